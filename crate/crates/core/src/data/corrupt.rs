use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::transform::square_side;
use crate::error::{Error, Result};
use crate::model::normal_matrix;
use crate::ndmath::Matrix;

/// Noise standard deviation per level, as a fraction of the view's value range.
pub const NOISE_FRACTIONS: [f64; 5] = [0.04, 0.08, 0.12, 0.18, 0.26];
/// Box-kernel width per level.
pub const BLUR_WIDTHS: [usize; 5] = [3, 5, 7, 9, 11];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    Blur,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub level: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, level: u8) -> Result<Self> {
        if !(1..=5).contains(&level) {
            return Err(Error::InvalidArgument(format!("corruption level must be 1..=5, got {level}")));
        }
        Ok(Self { kind, level })
    }
}

impl fmt::Display for CorruptionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::Blur => "blur",
        };
        write!(f, "{kind}:{}", self.level)
    }
}

impl FromStr for CorruptionSpec {
    type Err = Error;

    /// Parses `kind:level`, e.g. `gaussian_noise:3` or `blur:2`.
    fn from_str(s: &str) -> Result<Self> {
        let (kind, level) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("expected kind:level, got `{s}`")))?;
        let kind = match kind {
            "gaussian_noise" | "noise" => CorruptionKind::GaussianNoise,
            "blur" => CorruptionKind::Blur,
            other => {
                return Err(Error::InvalidArgument(format!(
                    "unknown corruption `{other}` (valid: gaussian_noise, blur)"
                )))
            }
        };
        let level = level
            .parse::<u8>()
            .map_err(|_| Error::InvalidArgument(format!("bad corruption level `{level}`")))?;
        Self::new(kind, level)
    }
}

/// Applies one corruption to every row of `view`.
///
/// Noise adds `N(0, σ²)` with `σ = NOISE_FRACTIONS[level-1] · (max − min)` of
/// the whole view. Blur averages over a `w × w` box (zero padding) when rows
/// are square images, and over a width-`w` window of features otherwise.
pub fn corrupt(view: &Matrix, spec: &CorruptionSpec, seed: u64) -> Result<Matrix> {
    let spec = CorruptionSpec::new(spec.kind, spec.level)?;
    let idx = spec.level as usize - 1;
    match spec.kind {
        CorruptionKind::GaussianNoise => {
            let (lo, hi) = view
                .as_slice()
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
            let range = if view.is_empty() { 0.0 } else { hi - lo };
            let sd = NOISE_FRACTIONS[idx] * range;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noise = normal_matrix(view.rows(), view.cols(), &mut rng);
            view.zip_map(&noise, "corrupt", |v, e| v + sd * e)
        }
        CorruptionKind::Blur => {
            let width = BLUR_WIDTHS[idx];
            let mut out = Matrix::zeros(view.rows(), view.cols());
            match square_side(view.cols()) {
                Ok(side) if side > 1 => {
                    for i in 0..view.rows() {
                        out.row_mut(i).copy_from_slice(&box_blur_2d(view.row(i), side, width));
                    }
                }
                _ => {
                    for i in 0..view.rows() {
                        out.row_mut(i).copy_from_slice(&box_blur_1d(view.row(i), width));
                    }
                }
            }
            Ok(out)
        }
    }
}

fn box_blur_2d(img: &[f64], side: usize, width: usize) -> Vec<f64> {
    let half = (width / 2) as isize;
    let norm = (width * width) as f64;
    let s = side as isize;
    let mut out = vec![0.0; side * side];
    for r in 0..s {
        for c in 0..s {
            let mut acc = 0.0;
            for dr in -half..=half {
                for dc in -half..=half {
                    let (rr, cc) = (r + dr, c + dc);
                    if rr >= 0 && cc >= 0 && rr < s && cc < s {
                        acc += img[(rr * s + cc) as usize];
                    }
                }
            }
            out[(r * s + c) as usize] = acc / norm;
        }
    }
    out
}

fn box_blur_1d(row: &[f64], width: usize) -> Vec<f64> {
    let half = (width / 2) as isize;
    let n = row.len() as isize;
    (0..n)
        .map(|j| {
            (-half..=half)
                .map(|d| j + d)
                .filter(|&k| k >= 0 && k < n)
                .map(|k| row[k as usize])
                .sum::<f64>()
                / width as f64
        })
        .collect()
}
