//! Image exports for segmentation results: binary PGM uncertainty maps and
//! PPM prediction overlays.

use std::f64::consts::LN_2;

use crate::error::{Error, Result};

const GREEN: [u8; 3] = [0, 255, 0];
const BLUE: [u8; 3] = [0, 0, 255];
const RED: [u8; 3] = [255, 0, 0];

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// P5 image of per-pixel binary entropy; `ln 2` (maximal uncertainty) maps to 255.
pub fn entropy_pgm(entropy: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if entropy.len() != width * height {
        return Err(Error::dim(format!("{} entropies for a {width}x{height} image", entropy.len())));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(entropy.iter().map(|&e| to_byte(e / LN_2)));
    Ok(out)
}

/// P6 overlay: true positives green, false positives blue, false negatives
/// red, true negatives show the grayscale input.
pub fn overlay_ppm(input: &[f64], pred: &[bool], truth: &[bool], width: usize, height: usize) -> Result<Vec<u8>> {
    let n = width * height;
    if input.len() != n || pred.len() != n || truth.len() != n {
        return Err(Error::dim(format!("overlay inputs do not match a {width}x{height} image")));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for i in 0..n {
        let px = match (pred[i], truth[i]) {
            (true, true) => GREEN,
            (true, false) => BLUE,
            (false, true) => RED,
            (false, false) => [to_byte(input[i]); 3],
        };
        out.extend_from_slice(&px);
    }
    Ok(out)
}
