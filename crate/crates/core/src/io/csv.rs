use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// An append-only CSV file whose header is written once.
///
/// Reopening an existing file checks that its header matches.
#[derive(Debug)]
pub struct CsvLog {
    path: PathBuf,
    file: File,
    columns: usize,
}

impl CsvLog {
    pub fn open(path: &Path, header: &[&str]) -> Result<Self> {
        let header_line = header.join(",");
        let existing = match File::open(path) {
            Ok(f) => BufReader::new(f).lines().next().transpose()?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        match existing {
            Some(line) if line != header_line => {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: 0,
                    reason: format!("existing header {line:?} differs from {header_line:?}"),
                })
            }
            Some(_) => {}
            None => writeln!(file, "{header_line}")?,
        }
        Ok(CsvLog { path: path.to_path_buf(), file, columns: header.len() })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, fields: &[String]) -> Result<()> {
        if fields.len() != self.columns {
            return Err(Error::shape(format!("{} fields for {} columns", fields.len(), self.columns)));
        }
        if fields.iter().any(|f| f.contains([',', '\n', '"'])) {
            return Err(Error::param("CSV fields must not contain commas, quotes or newlines"));
        }
        writeln!(self.file, "{}", fields.join(","))?;
        self.file.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_written_once() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        {
            let mut log = CsvLog::open(&p, &["a", "b"]).unwrap();
            log.append(&["1".into(), "2".into()]).unwrap();
            assert!(log.append(&["1".into()]).is_err());
        }
        let mut log = CsvLog::open(&p, &["a", "b"]).unwrap();
        log.append(&["3".into(), "4".into()]).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "a,b\n1,2\n3,4\n");
        assert!(CsvLog::open(&p, &["x"]).is_err());
    }
}
