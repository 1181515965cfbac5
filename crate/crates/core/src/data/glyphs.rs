//! Procedural 16×16 binary glyphs: ten fixed stroke skeletons, redrawn per
//! sample with jittered endpoints and a small translation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

pub const GLYPH_SIDE: usize = 16;
pub const GLYPH_CLASSES: usize = 10;

const STROKES: usize = 3;
const SKELETON_SEED: u64 = 0x6c79_7068;
const RADIUS: f64 = 5.5;
const HALF_WIDTH: f64 = 0.75;

type Segment = ((f64, f64), (f64, f64));

fn skeletons() -> Vec<Vec<Segment>> {
    let mut rng = ChaCha8Rng::seed_from_u64(SKELETON_SEED);
    let point = |rng: &mut ChaCha8Rng| {
        let r = RADIUS * rng.random_range(0.3f64..1.0).sqrt();
        let t = rng.random_range(0.0..std::f64::consts::TAU);
        (r * t.cos(), r * t.sin())
    };
    (0..GLYPH_CLASSES)
        .map(|_| {
            (0..STROKES)
                .map(|_| {
                    let a = point(&mut rng);
                    let mut b = point(&mut rng);
                    // strokes shorter than a few pixels barely register
                    while ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt() < 4.0 {
                        b = point(&mut rng);
                    }
                    (a, b)
                })
                .collect()
        })
        .collect()
}

fn distance_to_segment(p: (f64, f64), seg: Segment) -> f64 {
    let ((ax, ay), (bx, by)) = seg;
    let (vx, vy) = (bx - ax, by - ay);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - ax) * vx + (p.1 - ay) * vy) / len2).clamp(0.0, 1.0)
    };
    ((p.0 - ax - t * vx).powi(2) + (p.1 - ay - t * vy).powi(2)).sqrt()
}

fn render(strokes: &[Segment]) -> Vec<f64> {
    let c = (GLYPH_SIDE as f64 - 1.0) / 2.0;
    let mut img = vec![0.0; GLYPH_SIDE * GLYPH_SIDE];
    for r in 0..GLYPH_SIDE {
        for col in 0..GLYPH_SIDE {
            let p = (col as f64 - c, r as f64 - c);
            if strokes.iter().any(|&s| distance_to_segment(p, s) <= HALF_WIDTH) {
                img[r * GLYPH_SIDE + col] = 1.0;
            }
        }
    }
    img
}

/// `n` glyph images (rows of 256 pixels in {0, 1}) with uniformly drawn classes.
pub fn glyph_images(n: usize, seed: u64) -> Result<(Matrix, Vec<usize>)> {
    if n == 0 {
        return Err(Error::InvalidArgument("need at least one glyph".into()));
    }
    let skel = skeletons();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let jitter = Normal::new(0.0, 0.45).expect("positive sd");
    let mut images = Matrix::zeros(n, GLYPH_SIDE * GLYPH_SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = rng.random_range(0..GLYPH_CLASSES);
        let shift = (rng.random_range(-1i32..=1) as f64, rng.random_range(-1i32..=1) as f64);
        let strokes: Vec<Segment> = skel[class]
            .iter()
            .map(|&((ax, ay), (bx, by))| {
                let mut j = || jitter.sample(&mut rng);
                (
                    (ax + shift.0 + j(), ay + shift.1 + j()),
                    (bx + shift.0 + j(), by + shift.1 + j()),
                )
            })
            .collect();
        images.row_mut(i).copy_from_slice(&render(&strokes));
        labels.push(class);
    }
    Ok((images, labels))
}
