//! File formats: the `PCT1` tensor container, MNIST and CIFAR-10 loaders,
//! PGM images, append-only CSV logs and key=value configuration files.

mod config;
mod container;
mod csv;
mod datasets;
mod pgm;

pub use config::ConfigEntries;
pub use container::{Tensor, TensorContainer, TensorData, MAGIC};
pub use csv::CsvLog;
pub use datasets::{
    cifar10_files, data_root, load_cifar10, load_mnist, mnist_files, synthetic_textures, DatasetBatch, DATA_ENV,
};
pub use pgm::{read_pgm, write_pgm, Pgm};
