//! Dataset ingestion: IDX files (MNIST layout) and a deterministic
//! synthetic pattern dataset for data-free runs.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::nn::Shape3;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Labeled image set. Pixels are normalized to `[0,1]` at load time.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u8>,
    pub shape: Shape3,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<u8>,
        shape: Shape3,
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        ensure!(
            images.len() == labels.len() * shape.len(),
            "image buffer length {} does not match {} samples of shape {:?}",
            images.len(),
            labels.len(),
            shape
        );
        ensure!(
            labels.iter().all(|&l| (l as usize) < num_classes),
            "label out of range for {num_classes} classes"
        );
        Ok(Self {
            images,
            labels,
            shape,
            num_classes,
            split: split.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let sz = self.shape.len();
        &self.images[i * sz..(i + 1) * sz]
    }

    /// First `n` samples, for reduced-scale runs.
    pub fn take(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let sz = self.shape.len();
        Dataset {
            images: self.images[..n * sz].to_vec(),
            labels: self.labels[..n].to_vec(),
            shape: self.shape,
            num_classes: self.num_classes,
            split: self.split.clone(),
        }
    }
}

/// Raw tensor parsed from an IDX file.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxTensor {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn read_be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    let end = offset + 4;
    if end > bytes.len() {
        return Err(Error::Format(format!(
            "truncated IDX header: need {end} bytes, file has {}",
            bytes.len()
        )));
    }
    Ok(u32::from_be_bytes(bytes[offset..end].try_into().unwrap()))
}

/// Parse an IDX file. Only the MNIST image (`0x00000803`) and label
/// (`0x00000801`) kinds are accepted; anything else is a format error
/// reporting the observed magic.
pub fn load_idx(path: &Path) -> Result<IdxTensor> {
    let bytes = fs::read(path)?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxTensor> {
    let magic = read_be_u32(bytes, 0)?;
    let ndims = match magic {
        IDX_IMAGES_MAGIC => 3,
        IDX_LABELS_MAGIC => 1,
        other => {
            return Err(Error::Format(format!(
                "bad IDX magic 0x{other:08x} (expected 0x{IDX_IMAGES_MAGIC:08x} for images or 0x{IDX_LABELS_MAGIC:08x} for labels)"
            )))
        }
    };
    let mut dims = Vec::with_capacity(ndims);
    for d in 0..ndims {
        dims.push(read_be_u32(bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndims;
    let expected: usize = dims.iter().product();
    let payload = &bytes[header..];
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "IDX payload length {} does not match header dims {:?} (expected {expected})",
            payload.len(),
            dims
        )));
    }
    Ok(IdxTensor {
        magic,
        dims,
        data: payload.to_vec(),
    })
}

fn load_idx_kind(path: &Path, expect: u32, kind: &str) -> Result<IdxTensor> {
    let t = load_idx(path)?;
    if t.magic != expect {
        return Err(Error::Format(format!(
            "{} is not an IDX {kind} file: magic 0x{:08x}, expected 0x{expect:08x}",
            path.display(),
            t.magic
        )));
    }
    Ok(t)
}

fn find_split_file(dir: &Path, stem: &str) -> Result<PathBuf> {
    // Both the hyphenated and dotted suffix spellings occur in the wild.
    for name in [format!("{stem}-ubyte"), format!("{stem}.ubyte")] {
        let p = dir.join(&name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Format(format!(
        "missing {stem}-ubyte under {}",
        dir.display()
    )))
}

/// Load one MNIST split (`"train"` or `"t10k"`) from a directory holding
/// the standard IDX files.
pub fn load_mnist_split(dir: &Path, split: &str) -> Result<Dataset> {
    ensure!(
        split == "train" || split == "t10k",
        "unknown MNIST split {split:?} (expected \"train\" or \"t10k\")"
    );
    let images = load_idx_kind(
        &find_split_file(dir, &format!("{split}-images-idx3"))?,
        IDX_IMAGES_MAGIC,
        "image",
    )?;
    let labels = load_idx_kind(
        &find_split_file(dir, &format!("{split}-labels-idx1"))?,
        IDX_LABELS_MAGIC,
        "label",
    )?;
    ensure!(
        images.dims[0] == labels.dims[0],
        "image/label count mismatch: {} vs {}",
        images.dims[0],
        labels.dims[0]
    );
    let (h, w) = (images.dims[1], images.dims[2]);
    let pixels: Vec<f32> = images.data.iter().map(|&b| b as f32 / 255.0).collect();
    Dataset::new(pixels, labels.data, Shape3 { c: 1, h, w }, 10, split)
}

/// True when a directory contains all four IDX files of both splits.
pub fn mnist_available(dir: &Path) -> bool {
    find_split_file(dir, "train-images-idx3").is_ok()
        && find_split_file(dir, "train-labels-idx1").is_ok()
        && find_split_file(dir, "t10k-images-idx3").is_ok()
        && find_split_file(dir, "t10k-labels-idx1").is_ok()
}

pub const SYNTHETIC_CLASSES: usize = 4;
pub const SYNTHETIC_SIDE: usize = 16;

/// Deterministic 4-class 16x16 pattern dataset: striped and checkered
/// textures with random phase, amplitude jitter and additive noise.
/// Fully reproducible from the seed, so the whole pipeline can run with
/// no external data.
pub fn synthetic(n: usize, seed: u64, split: impl Into<String>) -> Dataset {
    let side = SYNTHETIC_SIDE;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for idx in 0..n {
        let label = (idx % SYNTHETIC_CLASSES) as u8;
        let px = rng.gen_range(0..4usize);
        let py = rng.gen_range(0..4usize);
        let amp: f64 = rng.gen_range(0.6..1.0);
        for y in 0..side {
            for x in 0..side {
                let on = match label {
                    0 => ((y + py) / 2) % 2 == 0,
                    1 => ((x + px) / 2) % 2 == 0,
                    2 => ((x + y + px) / 2) % 2 == 0,
                    _ => (((x + px) / 2) + ((y + py) / 2)) % 2 == 0,
                };
                let base = if on { amp } else { 0.0 };
                let noise: f64 = rng.gen_range(-0.25..0.25);
                images.push((base + noise).clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(label);
    }
    Dataset {
        images,
        labels,
        shape: Shape3 {
            c: 1,
            h: side,
            w: side,
        },
        num_classes: SYNTHETIC_CLASSES,
        split: split.into(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_bytes(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
        let mut b = magic.to_be_bytes().to_vec();
        for d in dims {
            b.extend_from_slice(&d.to_be_bytes());
        }
        b.extend_from_slice(payload);
        b
    }

    #[test]
    fn parse_idx_images() {
        let bytes = idx_bytes(IDX_IMAGES_MAGIC, &[2, 2, 3], &[0; 12]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![2, 2, 3]);
        assert_eq!(t.data.len(), 12);
    }

    #[test]
    fn parse_idx_zero_items() {
        let bytes = idx_bytes(IDX_LABELS_MAGIC, &[0], &[]);
        let t = parse_idx(&bytes).unwrap();
        assert_eq!(t.dims, vec![0]);
        assert!(t.data.is_empty());
    }

    #[test]
    fn parse_idx_rejects_bad_magic() {
        let bytes = idx_bytes(0x0000_0703, &[1], &[5]);
        let err = parse_idx(&bytes).unwrap_err();
        match err {
            Error::Format(msg) => assert!(msg.contains("0x00000703"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn parse_idx_rejects_truncation() {
        let bytes = idx_bytes(IDX_IMAGES_MAGIC, &[1, 2, 2], &[0; 3]);
        assert!(matches!(parse_idx(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn wrong_kind_is_format_error() {
        let dir = std::env::temp_dir().join("dkm_idx_kind_test");
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join("labels.bin");
        std::fs::write(&p, idx_bytes(IDX_IMAGES_MAGIC, &[1, 1, 1], &[7])).unwrap();
        let err = load_idx_kind(&p, IDX_LABELS_MAGIC, "label").unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let a = synthetic(64, 9, "train");
        let b = synthetic(64, 9, "train");
        assert_eq!(a.images, b.images);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.len(), 64);
        assert!(a.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
        // All four classes present.
        for c in 0..4u8 {
            assert!(a.labels.contains(&c));
        }
    }
}
