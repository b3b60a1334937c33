//! MNIST IDX ingestion and the pad + 2×2 average-pool preprocessing.
//!
//! Raw 28×28 digits are zero-padded to 32×32 with a 2-pixel margin and then
//! pooled to 16×16, which is the working resolution of every model stage.

use std::fs;
use std::path::Path;

use crate::error::{Error, IdxError, Result};

pub const IMAGE_MAGIC: u32 = 0x0000_0803;
pub const LABEL_MAGIC: u32 = 0x0000_0801;

/// Side length of preprocessed images.
pub const SIDE: usize = 16;

/// A batch of equally sized grayscale images, row-major, intensities in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
}

impl ImageTensor {
    pub fn new(count: usize, height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != count * height * width {
            return Err(Error::shape(
                format!("{count}x{height}x{width} = {} pixels", count * height * width),
                pixels.len(),
            ));
        }
        Ok(Self {
            count,
            height,
            width,
            pixels,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            count: 0,
            height,
            width,
            pixels: Vec::new(),
        }
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = self.image_len();
        &self.pixels[index * n..(index + 1) * n]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        // chunks_exact(0) panics, and a 0-pixel image has no meaningful slice anyway
        let n = self.image_len().max(1);
        self.pixels.chunks_exact(n).take(self.count)
    }

    /// Keeps the first `n` images.
    pub fn take(&self, n: usize) -> ImageTensor {
        let n = n.min(self.count);
        ImageTensor {
            count: n,
            height: self.height,
            width: self.width,
            pixels: self.pixels[..n * self.image_len()].to_vec(),
        }
    }

    /// Per-pixel mean image. Returns zeros for an empty tensor.
    pub fn mean_image(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.image_len()];
        for img in self.iter() {
            for (m, &p) in mean.iter_mut().zip(img) {
                *m += p;
            }
        }
        if self.count > 0 {
            let inv = 1.0 / self.count as f64;
            mean.iter_mut().for_each(|m| *m *= inv);
        }
        mean
    }
}

/// Digit class per image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(pub Vec<u8>);

impl LabelVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn read_u32_be(bytes: &[u8], offset: usize) -> std::result::Result<u32, IdxError> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IdxError::Truncated {
            expected: offset + 4,
            found: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32) -> std::result::Result<(), IdxError> {
    let found = read_u32_be(bytes, 0)?;
    if found != expected {
        return Err(IdxError::BadMagic { expected, found });
    }
    Ok(())
}

/// Parses an IDX3 image file held in memory.
pub fn parse_idx_images(bytes: &[u8]) -> std::result::Result<ImageTensor, IdxError> {
    check_magic(bytes, IMAGE_MAGIC)?;
    let dims = [
        read_u32_be(bytes, 4)?,
        read_u32_be(bytes, 8)?,
        read_u32_be(bytes, 12)?,
    ];
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize))
        .filter(|&n| n.checked_add(16).is_some())
        .ok_or(IdxError::DimensionOverflow {
            dims: dims.to_vec(),
        })?;
    let body = &bytes[16..];
    if body.len() < payload {
        return Err(IdxError::Truncated {
            expected: 16 + payload,
            found: bytes.len(),
        });
    }
    let pixels = body[..payload]
        .iter()
        .map(|&b| f64::from(b) / 255.0)
        .collect();
    Ok(ImageTensor {
        count: dims[0] as usize,
        height: dims[1] as usize,
        width: dims[2] as usize,
        pixels,
    })
}

/// Parses an IDX1 label file held in memory.
pub fn parse_idx_labels(bytes: &[u8]) -> std::result::Result<LabelVector, IdxError> {
    check_magic(bytes, LABEL_MAGIC)?;
    let count = read_u32_be(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() < count {
        return Err(IdxError::Truncated {
            expected: 8 + count,
            found: bytes.len(),
        });
    }
    let labels = body[..count].to_vec();
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l > 9) {
        return Err(IdxError::LabelOutOfRange { index, label });
    }
    Ok(LabelVector(labels))
}

pub fn load_idx_images(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_images(&bytes).map_err(|source| Error::Idx {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_idx_labels(path: impl AsRef<Path>) -> Result<LabelVector> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_idx_labels(&bytes).map_err(|source| Error::Idx {
        path: path.to_path_buf(),
        source,
    })
}

/// Pads 28×28 inputs to 32×32 and average-pools 2×2 blocks down to 16×16.
pub fn preprocess(images: &ImageTensor) -> Result<ImageTensor> {
    let margin = match (images.height, images.width) {
        (28, 28) => 2,
        (32, 32) => 0,
        (height, width) => return Err(Error::UnsupportedSize { height, width }),
    };
    let src_side = images.width;
    let mut pixels = Vec::with_capacity(images.count * SIDE * SIDE);
    let padded = |img: &[f64], r: usize, c: usize| -> f64 {
        if r < margin || c < margin || r >= margin + src_side || c >= margin + src_side {
            0.0
        } else {
            img[(r - margin) * src_side + (c - margin)]
        }
    };
    for img in images.iter() {
        for r in 0..SIDE {
            for c in 0..SIDE {
                let (pr, pc) = (2 * r, 2 * c);
                let sum = padded(img, pr, pc)
                    + padded(img, pr, pc + 1)
                    + padded(img, pr + 1, pc)
                    + padded(img, pr + 1, pc + 1);
                pixels.push(sum * 0.25);
            }
        }
    }
    Ok(ImageTensor {
        count: images.count,
        height: SIDE,
        width: SIDE,
        pixels,
    })
}

/// Images whose label equals `digit`, in original order.
pub fn filter_by_class(
    images: &ImageTensor,
    labels: &LabelVector,
    digit: u8,
) -> Result<ImageTensor> {
    if images.count != labels.len() {
        return Err(Error::CountMismatch(images.count, labels.len()));
    }
    let mut pixels = Vec::new();
    let mut count = 0;
    for (img, &label) in images.iter().zip(&labels.0) {
        if label == digit {
            pixels.extend_from_slice(img);
            count += 1;
        }
    }
    Ok(ImageTensor {
        count,
        height: images.height,
        width: images.width,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_images(count: u32, h: u32, w: u32, payload: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IMAGE_MAGIC, count, h, w] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(payload);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&LABEL_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn header_is_echoed() {
        let bytes = idx_images(4, 28, 28, &vec![7u8; 4 * 28 * 28]);
        let t = parse_idx_images(&bytes).unwrap();
        assert_eq!((t.count, t.height, t.width), (4, 28, 28));
    }

    #[test]
    fn byte_normalization_endpoints() {
        let t = parse_idx_images(&idx_images(1, 1, 2, &[255, 0])).unwrap();
        assert_eq!(t.pixels, vec![1.0, 0.0]);
    }

    #[test]
    fn image_parse_errors_are_distinct() {
        let mut bad = idx_images(1, 1, 1, &[0]);
        bad[3] = 0x01;
        assert!(matches!(
            parse_idx_images(&bad),
            Err(IdxError::BadMagic { found: 0x801, .. })
        ));
        assert!(matches!(
            parse_idx_images(&idx_images(2, 2, 2, &[0; 7])),
            Err(IdxError::Truncated { .. })
        ));
        assert!(matches!(
            parse_idx_images(&idx_images(u32::MAX, u32::MAX, u32::MAX, &[])),
            Err(IdxError::DimensionOverflow { .. })
        ));
        assert!(matches!(
            parse_idx_images(&[0, 0, 8]),
            Err(IdxError::Truncated { .. })
        ));
    }

    #[test]
    fn labels_parse_and_range_check() {
        assert_eq!(
            parse_idx_labels(&idx_labels(&[0, 1, 2])).unwrap().0,
            vec![0, 1, 2]
        );
        assert!(matches!(
            parse_idx_labels(&idx_labels(&[3, 10])),
            Err(IdxError::LabelOutOfRange { index: 1, label: 10 })
        ));
        assert!(matches!(
            parse_idx_labels(&idx_images(1, 1, 1, &[0])),
            Err(IdxError::BadMagic { .. })
        ));
    }

    #[test]
    fn constant_image_pools_to_interior_constant_and_scaled_border() {
        let c = 0.6;
        let t = ImageTensor::new(1, 28, 28, vec![c; 784]).unwrap();
        let out = preprocess(&t).unwrap();
        assert_eq!((out.height, out.width), (16, 16));
        for r in 0..16 {
            for c2 in 0..16 {
                let v = out.pixels[r * 16 + c2];
                let edge_r = r == 0 || r == 15;
                let edge_c = c2 == 0 || c2 == 15;
                // padded border pooling cells cover only zero padding
                let expect = if edge_r || edge_c { 0.0 } else { c };
                assert!((v - expect).abs() < 1e-15, "({r},{c2}) = {v}");
            }
        }
    }

    #[test]
    fn pooling_support_on_32x32() {
        let mut px = vec![0.0; 1024];
        for (r, c) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            px[r * 32 + c] = 1.0;
        }
        let out = preprocess(&ImageTensor::new(1, 32, 32, px).unwrap()).unwrap();
        assert_eq!(out.pixels[0], 1.0);
        assert_eq!(out.pixels.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn unsupported_size_rejected() {
        let t = ImageTensor::new(1, 16, 16, vec![0.0; 256]).unwrap();
        assert!(matches!(
            preprocess(&t),
            Err(Error::UnsupportedSize {
                height: 16,
                width: 16
            })
        ));
    }

    #[test]
    fn filter_keeps_order() {
        let t = ImageTensor::new(3, 1, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let labels = LabelVector(vec![3, 1, 3]);
        assert_eq!(filter_by_class(&t, &labels, 3).unwrap().pixels, vec![0.1, 0.3]);
        assert_eq!(filter_by_class(&t, &labels, 7).unwrap().count, 0);
        assert!(filter_by_class(&t, &LabelVector(vec![1]), 1).is_err());
    }
}
