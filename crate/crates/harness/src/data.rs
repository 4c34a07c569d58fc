//! IDX and CIFAR-10 binary datasets.
//!
//! IDX files start with a big-endian magic word (`0x00000803` for `u8`
//! image stacks, `0x00000801` for `u8` label vectors) followed by one
//! big-endian `u32` per dimension and the raw bytes. A CIFAR-10 binary
//! file is a sequence of 3073-byte records: one label byte, then 1024 red,
//! 1024 green and 1024 blue pixels of a 32x32 image in row-major order.
//! Either format may be gzip-compressed; compression is detected from the
//! content, not the file name.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::Rng;
use softprune::Tensor;

use crate::error::{HarnessError, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Undecoded `u8` images, `[count, channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawImages {
    pub count: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl RawImages {
    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Per-channel standardization applied after scaling pixels to `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Normalization { mean: vec![0.0; channels], std: vec![1.0; channels] }
    }
}

/// Standardized images with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

struct Fail {
    offset: usize,
    message: String,
}

fn fail<T>(offset: usize, message: impl Into<String>) -> std::result::Result<T, Fail> {
    Err(Fail { offset, message: message.into() })
}

fn with_path<T>(path: &Path, r: std::result::Result<T, Fail>) -> Result<T> {
    r.map_err(|f| HarnessError::Parse { path: path.to_path_buf(), offset: f.offset, message: f.message })
}

/// Reads a file, transparently inflating gzip content.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| HarnessError::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out).map_err(|e| HarnessError::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], offset: usize) -> std::result::Result<u32, Fail> {
    match bytes.get(offset..offset + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => fail(bytes.len(), format!("truncated header, expected 4 bytes at offset {offset}")),
    }
}

fn parse_idx(bytes: &[u8], magic: u32, ndim: usize) -> std::result::Result<(Vec<usize>, &[u8]), Fail> {
    let found = be_u32(bytes, 0)?;
    if found != magic {
        return fail(0, format!("bad magic 0x{found:08x}, expected 0x{magic:08x}"));
    }
    let mut dims = Vec::with_capacity(ndim);
    for d in 0..ndim {
        dims.push(be_u32(bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * ndim;
    let body: usize = dims.iter().product();
    let available = bytes.len() - header;
    if available < body {
        return fail(bytes.len(), format!("truncated payload: header declares {body} bytes, found {available}"));
    }
    if available > body {
        return fail(header + body, format!("{} trailing bytes after payload", available - body));
    }
    Ok((dims, &bytes[header..]))
}

pub fn parse_idx_images(path: &Path, bytes: &[u8]) -> Result<RawImages> {
    let (dims, body) = with_path(path, parse_idx(bytes, IDX_IMAGES_MAGIC, 3))?;
    Ok(RawImages { count: dims[0], channels: 1, height: dims[1], width: dims[2], pixels: body.to_vec() })
}

pub fn parse_idx_labels(path: &Path, bytes: &[u8]) -> Result<Vec<u8>> {
    let (_, body) = with_path(path, parse_idx(bytes, IDX_LABELS_MAGIC, 1))?;
    Ok(body.to_vec())
}

pub fn parse_cifar(path: &Path, bytes: &[u8]) -> Result<(RawImages, Vec<u8>)> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        let offset = bytes.len() - bytes.len() % CIFAR_RECORD;
        return with_path(
            path,
            fail(offset, format!("size {} is not a positive multiple of the {CIFAR_RECORD}-byte record", bytes.len())),
        );
    }
    let count = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(count);
    let mut pixels = Vec::with_capacity(count * (CIFAR_RECORD - 1));
    for record in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(record[0]);
        pixels.extend_from_slice(&record[1..]);
    }
    Ok((RawImages { count, channels: 3, height: 32, width: 32, pixels }, labels))
}

/// Scales to `[0, 1]` and standardizes per channel.
pub fn to_dataset(raw: &RawImages, labels: &[u8], norm: &Normalization, num_classes: usize) -> Result<Dataset> {
    if labels.len() != raw.count {
        return Err(HarnessError::InvalidConfig(format!("{} labels for {} images", labels.len(), raw.count)));
    }
    if norm.mean.len() != raw.channels || norm.std.len() != raw.channels {
        return Err(HarnessError::InvalidConfig(format!(
            "normalization has {} means and {} stds for {} channels",
            norm.mean.len(),
            norm.std.len(),
            raw.channels
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
        return Err(softprune::Error::LabelOutOfRange { label: bad as usize, classes: num_classes }.into());
    }
    let plane = raw.height * raw.width;
    let data = raw
        .pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = (i / plane) % raw.channels;
            (p as f32 / 255.0 - norm.mean[c]) / norm.std[c]
        })
        .collect();
    let images = Tensor::new(vec![raw.count, raw.channels, raw.height, raw.width], data)?;
    Ok(Dataset { images, labels: labels.iter().map(|&l| l as usize).collect() })
}

pub fn load_idx(images: &Path, labels: &Path, norm: &Normalization, num_classes: usize) -> Result<Dataset> {
    let raw = parse_idx_images(images, &read_bytes(images)?)?;
    let lab = parse_idx_labels(labels, &read_bytes(labels)?)?;
    if lab.len() != raw.count {
        return Err(HarnessError::Parse {
            path: labels.to_path_buf(),
            offset: 4,
            message: format!("{} labels but {} has {} images", lab.len(), images.display(), raw.count),
        });
    }
    to_dataset(&raw, &lab, norm, num_classes)
}

/// Loads and concatenates CIFAR-10 binary batch files.
pub fn load_cifar_binary(paths: &[&Path], norm: &Normalization, num_classes: usize) -> Result<Dataset> {
    let mut all = RawImages { count: 0, channels: 3, height: 32, width: 32, pixels: Vec::new() };
    let mut labels = Vec::new();
    for path in paths {
        let (raw, lab) = parse_cifar(path, &read_bytes(path)?)?;
        all.count += raw.count;
        all.pixels.extend(raw.pixels);
        labels.extend(lab);
    }
    to_dataset(&all, &labels, norm, num_classes)
}

fn write_file(path: &Path, bytes: &[u8], gzip: bool) -> Result<()> {
    let out = if gzip {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).and_then(|_| enc.finish()).map_err(|e| HarnessError::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(|e| HarnessError::io(path, e))
}

pub fn write_idx_images(path: &Path, raw: &RawImages, gzip: bool) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + raw.pixels.len());
    for v in [IDX_IMAGES_MAGIC, raw.count as u32, raw.height as u32, raw.width as u32] {
        bytes.extend_from_slice(&v.to_be_bytes());
    }
    bytes.extend_from_slice(&raw.pixels);
    write_file(path, &bytes, gzip)
}

pub fn write_idx_labels(path: &Path, labels: &[u8], gzip: bool) -> Result<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    write_file(path, &bytes, gzip)
}

pub fn write_cifar_binary(path: &Path, raw: &RawImages, labels: &[u8]) -> Result<()> {
    if raw.image_len() != CIFAR_RECORD - 1 || labels.len() != raw.count {
        return Err(HarnessError::InvalidConfig("CIFAR records hold one label and a 3x32x32 image".into()));
    }
    let mut bytes = Vec::with_capacity(raw.count * CIFAR_RECORD);
    for (label, image) in labels.iter().zip(raw.pixels.chunks_exact(CIFAR_RECORD - 1)) {
        bytes.push(*label);
        bytes.extend_from_slice(image);
    }
    write_file(path, &bytes, false)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[channels, height, width]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` examples.
    pub fn truncate(&mut self, n: usize) -> Result<()> {
        if n < self.len() {
            let per = self.images.len() / self.len();
            let mut shape = self.images.shape().to_vec();
            shape[0] = n;
            self.images = Tensor::from_slice(&shape, &self.images.data()[..n * per])?;
            self.labels.truncate(n);
        }
        Ok(())
    }

    /// Gathers examples by index, mirroring each image horizontally with
    /// probability one half when `flip` is given.
    pub fn batch<R: Rng + ?Sized>(&self, indices: &[usize], flip: Option<&mut R>) -> Result<(Tensor<f32>, Vec<usize>)> {
        let [c, h, w] = self.image_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut flip = flip;
        for &i in indices {
            let image = &self.images.data()[i * per..(i + 1) * per];
            let mirrored = flip.as_mut().is_some_and(|r| r.random_bool(0.5));
            if mirrored {
                for row in image.chunks_exact(w) {
                    data.extend(row.iter().rev());
                }
            } else {
                data.extend_from_slice(image);
            }
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((Tensor::new(vec![indices.len(), c, h, w], data)?, labels))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idx_header_errors_carry_offsets() {
        let p = Path::new("x");
        let mut bytes = IDX_IMAGES_MAGIC.to_be_bytes().to_vec();
        for d in [2u32, 2, 2] {
            bytes.extend_from_slice(&d.to_be_bytes());
        }
        bytes.extend_from_slice(&[0; 7]);
        match parse_idx_images(p, &bytes) {
            Err(HarnessError::Parse { offset, .. }) => assert_eq!(offset, 23),
            other => panic!("{other:?}"),
        }
        bytes[3] = 0x01;
        match parse_idx_images(p, &bytes) {
            Err(HarnessError::Parse { offset, message, .. }) => {
                assert_eq!(offset, 0);
                assert!(message.contains("magic"));
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_idx_labels(p, &[0, 0, 8]), Err(HarnessError::Parse { offset: 3, .. })));
    }

    #[test]
    fn cifar_size_must_be_whole_records() {
        let p = Path::new("x");
        assert!(parse_cifar(p, &vec![0; CIFAR_RECORD + 5]).is_err());
        assert!(parse_cifar(p, &[]).is_err());
        let (raw, labels) = parse_cifar(p, &vec![9; 2 * CIFAR_RECORD]).unwrap();
        assert_eq!((raw.count, labels), (2, vec![9, 9]));
    }

    #[test]
    fn flip_mirrors_rows() {
        let ds = Dataset { images: Tensor::from_slice(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(), labels: vec![0] };
        struct Always;
        impl rand::RngCore for Always {
            fn next_u32(&mut self) -> u32 {
                0
            }
            fn next_u64(&mut self) -> u64 {
                0
            }
            fn fill_bytes(&mut self, dst: &mut [u8]) {
                dst.fill(0)
            }
        }
        let (x, _) = ds.batch(&[0], Some(&mut Always)).unwrap();
        assert_eq!(x.data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }
}
