use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::MultiviewDataset;
use crate::error::{Error, Result};
use crate::ndmath::Matrix;

/// Rotation choices for view x; the private x label is the index.
pub const ROTATION_ANGLES: [f64; 5] = [0.0, PI / 16.0, PI / 8.0, 3.0 * PI / 16.0, PI / 4.0];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Flip {
    None,
    Horizontal,
    Vertical,
    Both,
}

/// Flip choices for view y; the private y label is the index.
pub const FLIPS: [Flip; 4] = [Flip::None, Flip::Horizontal, Flip::Vertical, Flip::Both];

/// Side length of a square image flattened to `len` pixels.
pub fn square_side(len: usize) -> Result<usize> {
    let side = (len as f64).sqrt().round() as usize;
    if side * side != len || side == 0 {
        return Err(Error::InvalidArgument(format!(
            "image length {len} is not a square number of pixels"
        )));
    }
    Ok(side)
}

/// Rotates a square row-major image by `angle` radians about its centre,
/// bilinear interpolation, zero outside the frame.
pub fn rotate_image(image: &[f64], side: usize, angle: f64) -> Vec<f64> {
    let c = (side as f64 - 1.0) / 2.0;
    let (sin, cos) = angle.sin_cos();
    let at = |r: isize, col: isize| -> f64 {
        if r < 0 || col < 0 || r >= side as isize || col >= side as isize {
            0.0
        } else {
            image[r as usize * side + col as usize]
        }
    };
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for col in 0..side {
            let dx = col as f64 - c;
            let dy = r as f64 - c;
            let sx = cos * dx + sin * dy + c;
            let sy = -sin * dx + cos * dy + c;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            out[r * side + col] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
                + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1));
        }
    }
    out
}

pub fn flip_image(image: &[f64], side: usize, flip: Flip) -> Vec<f64> {
    let (mirror_cols, mirror_rows) = match flip {
        Flip::None => (false, false),
        Flip::Horizontal => (true, false),
        Flip::Vertical => (false, true),
        Flip::Both => (true, true),
    };
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            let sr = if mirror_rows { side - 1 - r } else { r };
            let sc = if mirror_cols { side - 1 - c } else { c };
            out[r * side + c] = image[sr * side + sc];
        }
    }
    out
}

/// View x is each image rotated by a random entry of [`ROTATION_ANGLES`],
/// view y the same image under a random entry of [`FLIPS`]. Both choices are
/// drawn uniformly and independently of the base label.
pub fn gen_twoview_transform(base_images: &Matrix, base_labels: &[usize], seed: u64) -> Result<MultiviewDataset> {
    let side = square_side(base_images.cols())?;
    if base_labels.len() != base_images.rows() {
        return Err(Error::CountMismatch {
            images: base_images.rows(),
            labels: base_labels.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = base_images.rows();
    let mut x = Matrix::zeros(n, side * side);
    let mut y = Matrix::zeros(n, side * side);
    let mut rot = Vec::with_capacity(n);
    let mut flips = Vec::with_capacity(n);
    for i in 0..n {
        let r = rng.random_range(0..ROTATION_ANGLES.len());
        let f = rng.random_range(0..FLIPS.len());
        x.row_mut(i).copy_from_slice(&rotate_image(base_images.row(i), side, ROTATION_ANGLES[r]));
        y.row_mut(i).copy_from_slice(&flip_image(base_images.row(i), side, FLIPS[f]));
        rot.push(r);
        flips.push(f);
    }
    let mut meta = BTreeMap::new();
    meta.insert("generator".into(), "twoview".into());
    meta.insert("seed".into(), seed.to_string());
    meta.insert("n".into(), n.to_string());
    meta.insert("side".into(), side.to_string());
    meta.insert("rotations".into(), "0,pi/16,pi/8,3pi/16,pi/4".into());
    meta.insert("flips".into(), "none,horizontal,vertical,horizontal+vertical".into());
    MultiviewDataset::new(x, y, base_labels.to_vec(), rot, flips, meta)
}
