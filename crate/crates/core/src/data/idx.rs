//! Big-endian IDX files (the MNIST/Fashion-MNIST distribution format).

use std::path::Path;

use super::dataset::{Dataset, Provenance};
use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

/// Raw images: count, rows, cols and the `count * rows * cols` pixel bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

fn be_u32(buf: &[u8], at: usize) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Format {
            offset: at as u64,
            message: format!("truncated header: file has {} bytes", buf.len()),
        })
}

fn check_magic(buf: &[u8], expected: u32) -> Result<()> {
    let magic = be_u32(buf, 0)?;
    if magic != expected {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic 0x{magic:08x}, expected 0x{expected:08x}"),
        });
    }
    Ok(())
}

fn payload(buf: &[u8], header: usize, len: usize) -> Result<&[u8]> {
    let have = buf.len().saturating_sub(header);
    if have < len {
        return Err(Error::Format {
            offset: buf.len() as u64,
            message: format!("truncated payload: expected {len} bytes after header, found {have}"),
        });
    }
    if have > len {
        return Err(Error::Format {
            offset: (header + len) as u64,
            message: format!("{} trailing bytes after payload", have - len),
        });
    }
    Ok(&buf[header..])
}

pub fn parse_images(buf: &[u8]) -> Result<IdxImages> {
    check_magic(buf, IMAGES_MAGIC)?;
    let count = be_u32(buf, 4)? as usize;
    let rows = be_u32(buf, 8)? as usize;
    let cols = be_u32(buf, 12)? as usize;
    let pixels = payload(buf, 16, count * rows * cols)?.to_vec();
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels,
    })
}

pub fn parse_labels(buf: &[u8]) -> Result<Vec<u8>> {
    check_magic(buf, LABELS_MAGIC)?;
    let count = be_u32(buf, 4)? as usize;
    Ok(payload(buf, 8, count)?.to_vec())
}

/// Builds a dataset from raw IDX buffers: pixels scaled to `[0, 1]`, then
/// standardized with the global mean and standard deviation.
pub fn dataset_from_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let img = parse_images(images)?;
    let lab = parse_labels(labels)?;
    if lab.len() != img.count {
        return Err(Error::Format {
            offset: 4,
            message: format!("labels file holds {} items but images file holds {}", lab.len(), img.count),
        });
    }
    if img.count == 0 {
        return Err(Error::Format {
            offset: 4,
            message: "IDX files hold no items".into(),
        });
    }
    let scaled: Vec<f64> = img.pixels.iter().map(|&p| p as f64 / 255.0).collect();
    let n = scaled.len() as f64;
    let mean = scaled.iter().sum::<f64>() / n;
    let var = scaled.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let features = scaled.into_iter().map(|v| (v - mean) / std).collect();
    let labels: Vec<usize> = lab.iter().map(|&l| l as usize).collect();
    let num_classes = labels.iter().copied().max().unwrap_or(0) + 1;
    Dataset::new(features, img.rows * img.cols, labels, num_classes.max(2), Provenance::Idx)
}

pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let images = std::fs::read(images_path).map_err(|e| Error::io(images_path, e))?;
    let labels = std::fs::read(labels_path).map_err(|e| Error::io(labels_path, e))?;
    dataset_from_idx(&images, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled fixture, independent of the parser.
    fn images_fixture(n: u32, pixels: &[u8]) -> Vec<u8> {
        let mut b = vec![0x00, 0x00, 0x08, 0x03];
        b.extend_from_slice(&n.to_be_bytes());
        b.extend_from_slice(&[0, 0, 0, 28, 0, 0, 0, 28]);
        b.extend_from_slice(pixels);
        b
    }

    fn labels_fixture(labels: &[u8]) -> Vec<u8> {
        let mut b = vec![0x00, 0x00, 0x08, 0x01];
        b.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        b.extend_from_slice(labels);
        b
    }

    fn two_images() -> Vec<u8> {
        (0..2 * 784).map(|i| ((i * 7) % 256) as u8).collect()
    }

    #[test]
    fn recovers_exact_pixels_and_labels() {
        let px = two_images();
        let img = parse_images(&images_fixture(2, &px)).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (2, 28, 28));
        assert_eq!(img.pixels, px);
        assert_eq!(parse_labels(&labels_fixture(&[3, 9])).unwrap(), vec![3, 9]);

        let d = dataset_from_idx(&images_fixture(2, &px), &labels_fixture(&[3, 9])).unwrap();
        assert_eq!((d.len(), d.dim()), (2, 784));
        assert_eq!(d.labels(), &[3, 9]);
        // undo standardization with statistics computed here
        let s: Vec<f64> = px.iter().map(|&p| p as f64 / 255.0).collect();
        let mean = s.iter().sum::<f64>() / s.len() as f64;
        let std = (s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / s.len() as f64).sqrt();
        for (i, &p) in px.iter().enumerate() {
            let v = d.row(i / 784)[i % 784];
            assert!((v * std + mean - p as f64 / 255.0).abs() < 1e-12);
        }
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let err = dataset_from_idx(&images_fixture(2, &two_images()), &labels_fixture(&[1, 2, 3])).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn empty_truncated_and_bad_magic() {
        assert!(matches!(parse_images(&[]), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(parse_labels(&[]), Err(Error::Format { .. })));
        let mut bad = labels_fixture(&[1]);
        bad[3] = 0x03;
        assert!(matches!(parse_labels(&bad), Err(Error::Format { offset: 0, .. })));
        let mut short = images_fixture(2, &two_images());
        short.truncate(short.len() - 10);
        match parse_images(&short) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset as usize, short.len()),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn load_from_files() {
        let dir = tempfile::tempdir().unwrap();
        let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
        std::fs::write(&ip, images_fixture(2, &two_images())).unwrap();
        std::fs::write(&lp, labels_fixture(&[0, 1])).unwrap();
        let d = load_idx(&ip, &lp).unwrap();
        assert_eq!(d.len(), 2);
        assert!(matches!(load_idx(&dir.path().join("missing"), &lp), Err(Error::Io { .. })));
    }
}
