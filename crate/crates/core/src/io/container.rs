use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::tensor_ops::ComplexFeatureMap;

pub const MAGIC: &[u8; 4] = b"PCT1";

const DTYPE_REAL: u8 = 0;
const DTYPE_COMPLEX: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    Real(Vec<f64>),
    /// Stored as interleaved `(re, im)` f64 pairs.
    Complex(Vec<Complex64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::Real(v) => v.len(),
            TensorData::Complex(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn dtype(&self) -> u8 {
        match self {
            TensorData::Real(_) => DTYPE_REAL,
            TensorData::Complex(_) => DTYPE_COMPLEX,
        }
    }

    fn dtype_name(&self) -> &'static str {
        match self {
            TensorData::Real(_) => "real64",
            TensorData::Complex(_) => "complex128",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: TensorData) -> Result<Self> {
        let name = name.into();
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "tensor {name:?}: dims {dims:?} need {expected} values, got {}",
                data.len()
            )));
        }
        if dims.iter().any(|&d| d > u32::MAX as usize) || name.len() > u32::MAX as usize {
            return Err(Error::size(format!("tensor {name:?} exceeds the container's u32 fields")));
        }
        Ok(Tensor { name, dims, data })
    }

    pub fn real(name: impl Into<String>, dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        Tensor::new(name, dims, TensorData::Real(data))
    }

    pub fn complex(name: impl Into<String>, dims: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        Tensor::new(name, dims, TensorData::Complex(data))
    }

    /// A `channels × height × width` complex tensor.
    pub fn from_map(name: impl Into<String>, map: &ComplexFeatureMap) -> Self {
        let (c, h, w) = map.shape();
        Tensor { name: name.into(), dims: vec![c, h, w], data: TensorData::Complex(map.data().to_vec()) }
    }

    pub fn to_map(&self) -> Result<ComplexFeatureMap> {
        match (&self.data, self.dims.as_slice()) {
            (TensorData::Complex(v), &[c, h, w]) => ComplexFeatureMap::from_vec(c, h, w, v.clone()),
            _ => Err(Error::shape(format!("tensor {:?} is not a rank-3 complex map", self.name))),
        }
    }

    pub fn as_real(&self) -> Result<&[f64]> {
        match &self.data {
            TensorData::Real(v) => Ok(v),
            TensorData::Complex(_) => Err(Error::shape(format!("tensor {:?} is complex", self.name))),
        }
    }

    pub fn as_complex(&self) -> Result<&[Complex64]> {
        match &self.data {
            TensorData::Complex(v) => Ok(v),
            TensorData::Real(_) => Err(Error::shape(format!("tensor {:?} is real", self.name))),
        }
    }
}

/// An ordered list of named tensors with a little-endian binary encoding:
/// magic `PCT1`, a u32 tensor count, then per tensor a u32 name length, the
/// UTF-8 name, a dtype byte (0 real, 1 complex), a u32 rank, u32 dims and the
/// payload.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<Tensor>,
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, tensor: Tensor) -> Result<()> {
        if self.get(&tensor.name).is_some() {
            return Err(Error::param(format!("duplicate tensor name {:?}", tensor.name)));
        }
        self.tensors.push(tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::param(format!("container has no tensor {name:?}")))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn write_to(&self, mut out: impl Write) -> Result<()> {
        out.write_all(MAGIC)?;
        out.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            out.write_all(&(t.name.len() as u32).to_le_bytes())?;
            out.write_all(t.name.as_bytes())?;
            out.write_all(&[t.data.dtype()])?;
            out.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                out.write_all(&(d as u32).to_le_bytes())?;
            }
            match &t.data {
                TensorData::Real(v) => {
                    for x in v {
                        out.write_all(&x.to_le_bytes())?;
                    }
                }
                TensorData::Complex(v) => {
                    for z in v {
                        out.write_all(&z.re.to_le_bytes())?;
                        out.write_all(&z.im.to_le_bytes())?;
                    }
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    /// Decodes a container; `path` only labels errors.
    pub fn read_from(input: impl Read, path: &Path) -> Result<Self> {
        let mut r = Cursor { inner: input, offset: 0, path: path.to_path_buf() };
        let magic = r.bytes::<4>()?;
        if &magic != MAGIC {
            return Err(r.error_at(0, format!("bad magic {magic:?}")));
        }
        let count = r.u32()?;
        let mut container = TensorContainer::new();
        for _ in 0..count {
            let at = r.offset;
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.vec(len)?)
                .map_err(|_| r.error_at(at + 4, "tensor name is not UTF-8".into()))?;
            let dtype_at = r.offset;
            let dtype = r.bytes::<1>()?[0];
            let rank = r.u32()? as usize;
            let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = dims
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| r.error_at(dtype_at, "tensor size overflows".into()))?;
            let data = match dtype {
                DTYPE_REAL => TensorData::Real((0..n).map(|_| r.f64()).collect::<Result<_>>()?),
                DTYPE_COMPLEX => TensorData::Complex(
                    (0..n).map(|_| Ok(Complex64::new(r.f64()?, r.f64()?))).collect::<Result<_>>()?,
                ),
                other => return Err(r.error_at(dtype_at, format!("unknown dtype tag {other}"))),
            };
            container
                .push(Tensor { name, dims, data })
                .map_err(|e| r.error_at(at, e.to_string()))?;
        }
        let mut extra = [0u8; 1];
        if r.inner.read(&mut extra)? != 0 {
            return Err(r.error_at(r.offset, "trailing bytes after the last tensor".into()));
        }
        Ok(container)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?), path)
    }

    /// Human-readable listing: one `name dtype dims` line per tensor.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for t in &self.tensors {
            let dims: Vec<String> = t.dims.iter().map(|d| d.to_string()).collect();
            s.push_str(&format!("{} {} {}\n", t.name, t.data.dtype_name(), dims.join("x")));
        }
        s
    }

    /// Writes the container and a `.manifest` sidecar next to it, with
    /// `notes` lines (prefixed by `#`) ahead of the tensor listing.
    pub fn save_with_manifest(&self, path: &Path, notes: &[String]) -> Result<PathBuf> {
        self.save(path)?;
        let manifest = manifest_path(path);
        let mut text = String::new();
        for n in notes {
            text.push_str(&format!("# {n}\n"));
        }
        text.push_str(&self.manifest());
        std::fs::write(&manifest, text)?;
        Ok(manifest)
    }
}

fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest");
    PathBuf::from(s)
}

struct Cursor<R> {
    inner: R,
    offset: u64,
    path: PathBuf,
}

impl<R: Read> Cursor<R> {
    fn error_at(&self, offset: u64, reason: String) -> Error {
        Error::Format { path: self.path.clone(), offset, reason }
    }

    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        let mut done = 0;
        while done < buf.len() {
            let n = self.inner.read(&mut buf[done..])?;
            if n == 0 {
                let at = self.offset + done as u64;
                return Err(self.error_at(at, "unexpected end of file".into()));
            }
            done += n;
        }
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }

    fn vec(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut v = vec![0u8; n];
        self.fill(&mut v)?;
        Ok(v)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorContainer {
        let mut c = TensorContainer::new();
        c.push(Tensor::real("scalar", vec![], vec![f64::NAN]).unwrap()).unwrap();
        c.push(Tensor::real("v", vec![3], vec![1.0, -0.0, f64::INFINITY]).unwrap()).unwrap();
        c.push(Tensor::complex("m", vec![1, 2], vec![Complex64::new(1.5, -2.0), Complex64::new(0.0, 1e-300)]).unwrap())
            .unwrap();
        c
    }

    fn bits(c: &TensorContainer) -> Vec<(String, Vec<usize>, Vec<u64>)> {
        c.tensors()
            .iter()
            .map(|t| {
                let b = match &t.data {
                    TensorData::Real(v) => v.iter().map(|x| x.to_bits()).collect(),
                    TensorData::Complex(v) => v.iter().flat_map(|z| [z.re.to_bits(), z.im.to_bits()]).collect(),
                };
                (t.name.clone(), t.dims.clone(), b)
            })
            .collect()
    }

    #[test]
    fn layout_matches_the_format() {
        let mut c = TensorContainer::new();
        c.push(Tensor::real("ab", vec![1], vec![2.0]).unwrap()).unwrap();
        let b = c.to_bytes();
        let mut expected = b"PCT1".to_vec();
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.push(0);
        expected.extend(1u32.to_le_bytes());
        expected.extend(1u32.to_le_bytes());
        expected.extend(2.0f64.to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn round_trip_is_bit_exact_including_nan() {
        let c = sample();
        let back = TensorContainer::read_from(c.to_bytes().as_slice(), Path::new("mem")).unwrap();
        assert_eq!(bits(&c), bits(&back));
    }

    #[test]
    fn truncation_reports_the_offset() {
        let bytes = sample().to_bytes();
        let cut = bytes.len() - 3;
        match TensorContainer::read_from(&bytes[..cut], Path::new("x")) {
            Err(Error::Format { offset, .. }) => assert!(offset as usize >= cut - 8 && offset as usize <= cut),
            other => panic!("expected a format error, got {other:?}"),
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            TensorContainer::read_from(bad.as_slice(), Path::new("x")),
            Err(Error::Format { offset: 0, .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(TensorContainer::read_from(long.as_slice(), Path::new("x")).is_err());
    }

    #[test]
    fn shape_and_name_checks() {
        assert!(Tensor::real("x", vec![2, 2], vec![0.0; 3]).is_err());
        let mut c = TensorContainer::new();
        c.push(Tensor::real("x", vec![1], vec![0.0]).unwrap()).unwrap();
        assert!(c.push(Tensor::real("x", vec![1], vec![0.0]).unwrap()).is_err());
        assert_eq!(c.manifest(), "x real64 1\n");
    }

    proptest! {
        #[test]
        fn random_tensors_round_trip(
            dims in proptest::collection::vec(1usize..4, 0..=4),
            complex in any::<bool>(),
            seed in any::<u64>(),
        ) {
            let n: usize = dims.iter().product();
            let mut state = seed;
            let mut next = || {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                f64::from_bits(state)
            };
            let data = if complex {
                TensorData::Complex((0..n).map(|_| Complex64::new(next(), next())).collect())
            } else {
                TensorData::Real((0..n).map(|_| next()).collect())
            };
            let mut c = TensorContainer::new();
            c.push(Tensor::new("t", dims, data).unwrap()).unwrap();
            let back = TensorContainer::read_from(c.to_bytes().as_slice(), Path::new("p")).unwrap();
            prop_assert_eq!(bits(&c), bits(&back));
        }
    }
}
