use std::path::{Path, PathBuf};

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor_ops::RealImage;

/// Environment variable naming the dataset root directory.
pub const DATA_ENV: &str = "PHASECOLLAPSE_DATA";

/// Labelled images.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBatch {
    pub images: Vec<RealImage>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl DatasetBatch {
    pub fn new(images: Vec<RealImage>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::shape(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Label { label, classes });
        }
        if let Some(first) = images.first() {
            let shape = (first.channels(), first.height(), first.width());
            if images.iter().any(|im| (im.channels(), im.height(), im.width()) != shape) {
                return Err(Error::shape("images of different shapes in one dataset"));
            }
        }
        Ok(DatasetBatch { images, labels, classes })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// `(channels, height, width)` of the images, if any.
    pub fn image_shape(&self) -> Option<(usize, usize, usize)> {
        self.images.first().map(|im| (im.channels(), im.height(), im.width()))
    }

    /// The first `n` items (or all of them).
    pub fn head(&self, n: usize) -> DatasetBatch {
        let n = n.min(self.len());
        DatasetBatch {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        }
    }

    pub fn select(&self, indices: &[usize]) -> DatasetBatch {
        DatasetBatch {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }
}

/// Dataset root: the explicit override if given, else `$PHASECOLLAPSE_DATA`.
pub fn data_root(explicit: Option<&Path>) -> Option<PathBuf> {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(DATA_ENV).map(PathBuf::from))
}

/// `(train_images, train_labels, test_images, test_labels)` under `root/mnist`.
pub fn mnist_files(root: &Path) -> [PathBuf; 4] {
    let dir = root.join("mnist");
    [
        dir.join("train-images-idx3-ubyte"),
        dir.join("train-labels-idx1-ubyte"),
        dir.join("t10k-images-idx3-ubyte"),
        dir.join("t10k-labels-idx1-ubyte"),
    ]
}

/// `(train_batches, test_batch)` under `root/cifar-10-batches-bin`.
pub fn cifar10_files(root: &Path) -> (Vec<PathBuf>, PathBuf) {
    let dir = root.join("cifar-10-batches-bin");
    let train = (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect();
    (train, dir.join("test_batch.bin"))
}

fn format_error(path: &Path, offset: u64, reason: impl Into<String>) -> Error {
    Error::Format { path: path.to_path_buf(), offset, reason: reason.into() }
}

fn be_u32(bytes: &[u8], offset: usize, path: &Path) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| format_error(path, bytes.len() as u64, "header truncated"))
}

fn idx_payload<'a>(bytes: &'a [u8], path: &Path, magic: u32, rank: usize) -> Result<(Vec<usize>, &'a [u8])> {
    let found = be_u32(bytes, 0, path)?;
    if found != magic {
        return Err(format_error(path, 0, format!("bad magic {found:#010x}, expected {magic:#010x}")));
    }
    let dims = (0..rank)
        .map(|i| be_u32(bytes, 4 + 4 * i, path).map(|d| d as usize))
        .collect::<Result<Vec<_>>>()?;
    let start = 4 + 4 * rank;
    let len: usize = dims.iter().product();
    if bytes.len() < start + len {
        return Err(format_error(
            path,
            bytes.len() as u64,
            format!("payload truncated: dims {dims:?} need {len} bytes from offset {start}"),
        ));
    }
    if bytes.len() > start + len {
        return Err(format_error(path, (start + len) as u64, "trailing bytes after the payload"));
    }
    Ok((dims, &bytes[start..]))
}

/// Reads an MNIST IDX image/label file pair; pixels are scaled to `[0, 1]`.
pub fn load_mnist(images_path: &Path, labels_path: &Path) -> Result<DatasetBatch> {
    let image_bytes = std::fs::read(images_path)?;
    let label_bytes = std::fs::read(labels_path)?;
    let (dims, pixels) = idx_payload(&image_bytes, images_path, 0x0000_0803, 3)?;
    let (ldims, labels) = idx_payload(&label_bytes, labels_path, 0x0000_0801, 1)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    if ldims[0] != n {
        return Err(format_error(labels_path, 4, format!("{} labels for {n} images", ldims[0])));
    }
    let plane = h * w;
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let data = pixels[i * plane..(i + 1) * plane].iter().map(|&p| p as f64 / 255.0).collect();
        images.push(RealImage::new(1, h, w, data)?);
    }
    if let Some(pos) = labels.iter().position(|&l| l > 9) {
        return Err(format_error(labels_path, 8 + pos as u64, format!("label {} out of range", labels[pos])));
    }
    DatasetBatch::new(images, labels.iter().map(|&l| l as usize).collect(), 10)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Reads CIFAR-10 binary batches: 3073-byte records of one label byte and
/// three channel planes of 32×32 pixels.
pub fn load_cifar10(bin_paths: &[PathBuf]) -> Result<DatasetBatch> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for path in bin_paths {
        let bytes = std::fs::read(path)?;
        if bytes.len() % CIFAR_RECORD != 0 {
            let offset = (bytes.len() / CIFAR_RECORD * CIFAR_RECORD) as u64;
            return Err(format_error(
                path,
                offset,
                format!("length {} is not a multiple of {CIFAR_RECORD}", bytes.len()),
            ));
        }
        for (r, record) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            if record[0] > 9 {
                return Err(format_error(path, (r * CIFAR_RECORD) as u64, format!("label {} out of range", record[0])));
            }
            labels.push(record[0] as usize);
            let data = record[1..].iter().map(|&p| p as f64 / 255.0).collect();
            images.push(RealImage::new(3, 32, 32, data)?);
        }
    }
    DatasetBatch::new(images, labels, 10)
}

/// Oriented stripe textures: class `c` of `classes` has stripes at angle
/// `πc/classes`, with random frequency, phase and additive noise. Labels cycle
/// through the classes. Pixel values lie in `[0, 1]`.
pub fn synthetic_textures(n: usize, channels: usize, size: usize, classes: usize, seed: u64) -> Result<DatasetBatch> {
    if classes == 0 || channels == 0 || size == 0 {
        return Err(Error::param("classes, channels and size must be positive"));
    }
    let mut r = rng::stream(seed, "textures", 0);
    let mut images = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % classes;
        let angle = std::f64::consts::PI * label as f64 / classes as f64;
        let (c, s) = (angle.cos(), angle.sin());
        let freq = r.random_range(0.8..1.6);
        let phase = r.random_range(0.0..std::f64::consts::TAU);
        let data = (0..channels * size * size)
            .map(|k| {
                let (row, col) = (((k / size) % size) as f64, (k % size) as f64);
                let wave = (freq * (c * row + s * col) + phase).sin();
                (0.5 + 0.4 * wave + 0.1 * r.random_range(-1.0..1.0)).clamp(0.0, 1.0)
            })
            .collect();
        images.push(RealImage::new(channels, size, size, data)?);
        labels.push(label);
    }
    DatasetBatch::new(images, labels, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut v = magic.to_be_bytes().to_vec();
        for d in dims {
            v.extend(d.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    #[test]
    fn mnist_decodes_and_scales() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let pixels: Vec<u8> = (0..2 * 2 * 3).map(|i| if i == 0 { 255 } else { i as u8 }).collect();
        let ip = dir.join("img");
        let lp = dir.join("lab");
        std::fs::write(&ip, idx(0x803, &[2, 2, 3], &pixels)).unwrap();
        std::fs::write(&lp, idx(0x801, &[2], &[5, 0])).unwrap();
        let d = load_mnist(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels, vec![5, 0]);
        assert_eq!(d.image_shape(), Some((1, 2, 3)));
        assert_eq!(d.images[0].data()[0], 1.0);
        assert_eq!(d.images[1].data()[0], 6.0 / 255.0);
    }

    #[test]
    fn mnist_errors_name_offsets() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let ip = dir.join("img");
        let lp = dir.join("lab");
        std::fs::write(&lp, idx(0x801, &[1], &[3])).unwrap();
        std::fs::write(&ip, idx(0x803, &[1, 2, 2], &[0, 0, 0])).unwrap();
        match load_mnist(&ip, &lp) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 19),
            other => panic!("{other:?}"),
        }
        std::fs::write(&ip, idx(0x801, &[1, 2, 2], &[0; 4])).unwrap();
        assert!(matches!(load_mnist(&ip, &lp), Err(Error::Format { offset: 0, .. })));
        std::fs::write(&ip, idx(0x803, &[2, 1, 1], &[0; 2])).unwrap();
        assert!(matches!(load_mnist(&ip, &lp), Err(Error::Format { .. })));
    }

    #[test]
    fn cifar_records() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let p = dir.join("b.bin");
        let mut rec = vec![7u8];
        rec.extend(std::iter::repeat_n(255u8, 3072));
        std::fs::write(&p, &rec).unwrap();
        let d = load_cifar10(std::slice::from_ref(&p)).unwrap();
        assert_eq!(d.labels, vec![7]);
        assert!(d.images[0].data().iter().all(|&v| v == 1.0));

        let mut planar = vec![1u8];
        planar.extend((0..3072).map(|i| (i / 1024) as u8));
        std::fs::write(&p, &planar).unwrap();
        let d = load_cifar10(std::slice::from_ref(&p)).unwrap();
        assert_eq!(d.images[0].channel(2)[0], 2.0 / 255.0);

        std::fs::write(&p, &rec[..100]).unwrap();
        assert!(matches!(load_cifar10(&[p]), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn dataset_validation() {
        let im = RealImage::new(1, 1, 1, vec![0.0]).unwrap();
        assert!(matches!(DatasetBatch::new(vec![im.clone()], vec![3], 2), Err(Error::Label { label: 3, .. })));
        assert!(DatasetBatch::new(vec![im], vec![], 2).is_err());
        assert_eq!(data_root(Some(Path::new("/x"))), Some(PathBuf::from("/x")));
    }

    #[test]
    fn synthetic_textures_are_reproducible() {
        let a = synthetic_textures(6, 3, 8, 3, 1).unwrap();
        assert_eq!(a, synthetic_textures(6, 3, 8, 3, 1).unwrap());
        assert_eq!(a.labels, vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(a.image_shape(), Some((3, 8, 8)));
        assert!(a.images.iter().all(|im| im.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(synthetic_textures(1, 1, 8, 0, 0).is_err());
    }
}
