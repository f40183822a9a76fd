use std::path::Path;

use super::{Dataset, Split, Targets};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const DTYPE_U8: u8 = 0x08;

/// Decoded IDX payload: big-endian dims and unsigned bytes.
pub fn read_idx(bytes: &[u8]) -> Result<(Vec<usize>, &[u8])> {
    if bytes.len() < 4 {
        return Err(Error::format(bytes.len() as u64, "file shorter than the 4-byte IDX magic"));
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::format(0, "bad IDX magic, expected two zero bytes"));
    }
    if bytes[2] != DTYPE_U8 {
        return Err(Error::format(2, format!("unsupported IDX dtype 0x{:02x}, only u8 is read", bytes[2])));
    }
    let rank = bytes[3] as usize;
    if rank == 0 {
        return Err(Error::format(3, "IDX rank 0"));
    }
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::format(bytes.len() as u64, "truncated IDX dimension header"));
    }
    let dims: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]) as usize)
        .collect();
    let n: usize = dims.iter().product();
    if n == 0 {
        return Err(Error::format(4, format!("IDX dims {dims:?} describe an empty payload")));
    }
    if bytes.len() < header + n {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated IDX payload, expected {} bytes", header + n),
        ));
    }
    Ok((dims, &bytes[header..header + n]))
}

/// Loads an IDX image file (`N×H×W` or `N×H×W×C`) as `[N, C, H, W]` in `[0, 1]`.
pub fn load_idx(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let (dims, payload) = read_idx(&bytes)?;
    let (n, h, w, c) = match dims[..] {
        [n, h, w] => (n, h, w, 1),
        [n, h, w, c] => (n, h, w, c),
        _ => return Err(Error::format(3, format!("image IDX must have rank 3 or 4, got dims {dims:?}"))),
    };
    let mut data = vec![0.0; n * c * h * w];
    for i in 0..n {
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let src = ((i * h + y) * w + x) * c + ch;
                    data[((i * c + ch) * h + y) * w + x] = payload[src] as f64 / 255.0;
                }
            }
        }
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, c, h, w], data)?,
        targets: Targets::Unlabeled,
        split: Split::Train,
        provenance: format!("idx:{}", path.display()),
        shapes: None,
    })
}

/// Images plus a rank-1 IDX label file.
pub fn load_idx_labeled(images: &Path, labels: &Path) -> Result<Dataset> {
    let mut ds = load_idx(images)?;
    let bytes = std::fs::read(labels)?;
    let (dims, payload) = read_idx(&bytes)?;
    if dims.len() != 1 || dims[0] != ds.len() {
        return Err(Error::format(
            4,
            format!("label dims {dims:?} do not match {} images", ds.len()),
        ));
    }
    let values: Vec<usize> = payload.iter().map(|&b| b as usize).collect();
    let n_classes = values.iter().max().map_or(1, |m| m + 1);
    ds.targets = Targets::Classes {
        labels: values,
        n_classes,
    };
    ds.provenance = format!("{} labels:{}", ds.provenance, labels.display());
    Ok(ds)
}
