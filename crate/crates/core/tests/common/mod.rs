#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::OnceLock;

use ffgen::dataset::{
    filter_by_class, load_idx_images, load_idx_labels, preprocess, ImageTensor, LabelVector,
};

pub const IMAGES: &str = "train-images-idx3-ubyte";
pub const LABELS: &str = "train-labels-idx1-ubyte";

pub struct Mnist {
    pub dir: PathBuf,
    pub images: ImageTensor,
    pub labels: LabelVector,
}

/// Full MNIST when `FFGEN_MNIST_DIR` points at it, otherwise the bundled subset.
pub fn data_dir() -> PathBuf {
    match std::env::var_os("FFGEN_MNIST_DIR") {
        Some(d) => PathBuf::from(d),
        None => PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-5k"),
    }
}

pub fn mnist() -> &'static Mnist {
    static DATA: OnceLock<Mnist> = OnceLock::new();
    DATA.get_or_init(|| {
        let dir = data_dir();
        let raw = load_idx_images(dir.join(IMAGES)).expect("MNIST images");
        let labels = load_idx_labels(dir.join(LABELS)).expect("MNIST labels");
        Mnist {
            images: preprocess(&raw).unwrap(),
            labels,
            dir,
        }
    })
}

/// Up to `n` preprocessed images of `digit`.
pub fn class(digit: u8, n: usize) -> ImageTensor {
    let m = mnist();
    filter_by_class(&m.images, &m.labels, digit).unwrap().take(n)
}

pub fn temp_dir() -> tempfile::TempDir {
    tempfile::tempdir().unwrap()
}
