//! Linear probes, adjusted Rand index and the representation × label-set grid.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{class_count, LabelSet, MultiviewDataset, Split};
use crate::error::{Error, Result};
use crate::model::{Representation, Representations};
use crate::ndmath::Matrix;

pub const PROBE_WEIGHT_DECAY: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

/// Multinomial softmax regression on standardized features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    center: Vec<f64>,
    scale: Vec<f64>,
    weight: Matrix,
    bias: Vec<f64>,
}

impl LinearProbe {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    fn standardize(&self, latents: &Matrix) -> Matrix {
        Matrix::from_fn(latents.rows(), latents.cols(), |i, j| {
            (latents.get(i, j) - self.center[j]) / self.scale[j]
        })
    }

    pub fn logits(&self, latents: &Matrix) -> Result<Matrix> {
        if latents.cols() != self.center.len() {
            return Err(Error::shape("probe", latents.shape(), (latents.rows(), self.center.len())));
        }
        let mut z = self.standardize(latents).matmul(&self.weight)?;
        z.add_row_broadcast(&self.bias)?;
        Ok(z)
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, latents: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(latents)?;
        Ok(logits
            .iter_rows()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }
}

fn softmax_rows(z: &mut Matrix) {
    for i in 0..z.rows() {
        let row = z.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Full-batch gradient descent on mean cross-entropy plus
/// `½·PROBE_WEIGHT_DECAY·‖W‖²`.
pub fn train_probe(latents: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<LinearProbe> {
    if latents.rows() != labels.len() {
        return Err(Error::shape("train_probe", latents.shape(), (labels.len(), 1)));
    }
    let k = class_count(labels);
    let mut present = vec![false; k];
    for &l in labels {
        present[l] = true;
    }
    if present.iter().filter(|&&p| p).count() < 2 {
        return Err(Error::InvalidArgument("probe labels cover fewer than two classes".into()));
    }
    let n = latents.rows() as f64;
    let d = latents.cols();
    let center: Vec<f64> = latents.col_sums().iter().map(|s| s / n).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let var = latents.iter_rows().map(|r| (r[j] - center[j]).powi(2)).sum::<f64>() / n;
            if var.sqrt() > 1e-8 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut probe = LinearProbe {
        center,
        scale,
        weight: Matrix::from_fn(d, k, |_, _| rng.random_range(-0.01..0.01)),
        bias: vec![0.0; k],
    };
    let x = probe.standardize(latents);
    for _ in 0..cfg.epochs {
        let mut p = x.matmul(&probe.weight)?;
        p.add_row_broadcast(&probe.bias)?;
        softmax_rows(&mut p);
        for (i, &l) in labels.iter().enumerate() {
            p.row_mut(i)[l] -= 1.0;
        }
        let gw = x.t_matmul(&p)?;
        let gb = p.col_sums();
        for (w, g) in probe.weight.as_mut_slice().iter_mut().zip(gw.as_slice()) {
            *w -= cfg.lr * (g / n + PROBE_WEIGHT_DECAY * *w);
        }
        for (b, g) in probe.bias.iter_mut().zip(gb) {
            *b -= cfg.lr * g / n;
        }
    }
    Ok(probe)
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len().max(1) as f64
}

fn comb2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table of two labelings.
/// Returns 1.0 when both labelings are the same trivial partition.
pub fn adjusted_rand_index(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::InvalidArgument(format!(
            "labelings differ in length: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::InvalidArgument("ARI needs at least two samples".into()));
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&p, &t) in pred.iter().zip(truth) {
        *table.entry((p, t)).or_default() += 1;
        *rows.entry(p).or_default() += 1;
        *cols.entry(t).or_default() += 1;
    }
    // sum in key order so the result does not depend on hash iteration order
    let ordered_sum = |m: &HashMap<usize, u64>| {
        let mut v: Vec<_> = m.iter().collect();
        v.sort_unstable();
        v.into_iter().map(|(_, &c)| comb2(c)).sum::<f64>()
    };
    let mut cells: Vec<_> = table.iter().collect();
    cells.sort_unstable();
    let index: f64 = cells.into_iter().map(|(_, &c)| comb2(c)).sum();
    let sum_a = ordered_sum(&rows);
    let sum_b = ordered_sum(&cols);
    let expected = sum_a * sum_b / comb2(pred.len() as u64);
    let max_index = 0.5 * (sum_a + sum_b);
    if max_index == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max_index - expected))
}

/// One cell of the disentanglement grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub representation: Representation,
    pub label_set: LabelSet,
    pub accuracy: f64,
    pub ari: f64,
    pub n_test: usize,
}

/// Trains one probe per (representation, label set) on the train split and
/// scores it on the test split. Representations are posterior means.
pub fn disentanglement_grid<M: Representations + Sync>(
    model: &M,
    dataset: &MultiviewDataset,
    split: &Split,
    cfg: &ProbeConfig,
) -> Result<Vec<ProbeReport>> {
    let mut seen = vec![false; dataset.len()];
    for &i in &split.train {
        seen[i] = true;
    }
    if split.test.iter().any(|&i| seen[i]) {
        return Err(Error::InvalidArgument("train and test indices overlap".into()));
    }
    let train = dataset.subset(&split.train)?;
    let test = dataset.subset(&split.test)?;
    let train_reps = model.representations(&train.x, &train.y)?;
    let test_reps = model.representations(&test.x, &test.y)?;

    let cells: Vec<(usize, LabelSet)> = (0..train_reps.len())
        .flat_map(|r| LabelSet::ALL.into_iter().map(move |l| (r, l)))
        .collect();
    cells
        .par_iter()
        .map(|&(r, label_set)| {
            let probe = train_probe(&train_reps[r].1, train.labels(label_set), cfg)?;
            let truth = test.labels(label_set);
            let pred = probe.predict(&test_reps[r].1)?;
            Ok(ProbeReport {
                representation: train_reps[r].0,
                label_set,
                accuracy: accuracy(&pred, truth),
                ari: adjusted_rand_index(&pred, truth)?,
                n_test: truth.len(),
            })
        })
        .collect()
}

pub const GRID_CSV_HEADER: &str = "representation,label_set,accuracy,ari,n_test";

pub fn grid_to_csv(grid: &[ProbeReport]) -> String {
    let mut out = String::from(GRID_CSV_HEADER);
    out.push('\n');
    for r in grid {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.representation.name(),
            r.label_set.name(),
            r.accuracy,
            r.ari,
            r.n_test
        );
    }
    out
}

pub fn lookup(grid: &[ProbeReport], rep: Representation, set: LabelSet) -> Option<&ProbeReport> {
    grid.iter().find(|r| r.representation == rep && r.label_set == set)
}

/// Label set with the highest ARI for each representation (first wins ties).
pub fn best_label_sets(grid: &[ProbeReport]) -> Vec<(Representation, LabelSet)> {
    let mut reps: Vec<Representation> = grid.iter().map(|r| r.representation).collect();
    reps.dedup();
    reps.into_iter()
        .filter_map(|rep| {
            grid.iter()
                .filter(|r| r.representation == rep)
                .fold(None::<&ProbeReport>, |best, r| match best {
                    Some(b) if b.ari >= r.ari => Some(b),
                    _ => Some(r),
                })
                .map(|b| (rep, b.label_set))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest, Strategy};

    #[test]
    fn ari_identity_and_permutation() {
        let truth = vec![0, 0, 1, 1, 2, 2, 2];
        assert_eq!(adjusted_rand_index(&truth, &truth).unwrap(), 1.0);
        let relabeled: Vec<usize> = truth.iter().map(|&l| [5, 3, 9][l]).collect();
        assert_relative_eq!(adjusted_rand_index(&relabeled, &truth).unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ari_hand_contingency_table() {
        // rows pred {0,1,2}, cols truth {0,1}: [[2,0],[1,1],[0,2]]
        // index = 1 + 0 + 0 + 0 + 0 + 1 = 2; a = 3·C(2,2) = 3; b = 2·C(3,2) = 6
        // expected = 3·6/C(6,2) = 18/15 = 1.2; max = 4.5
        let pred = [0, 0, 1, 1, 2, 2];
        let truth = [0, 0, 0, 1, 1, 1];
        let expected = (2.0 - 1.2) / (4.5 - 1.2);
        assert_relative_eq!(adjusted_rand_index(&pred, &truth).unwrap(), expected, epsilon = 1e-12);
        assert_relative_eq!(expected, 0.242424, epsilon = 1e-6);
    }

    #[test]
    fn ari_errors() {
        assert!(adjusted_rand_index(&[0, 1], &[0]).is_err());
        assert!(adjusted_rand_index(&[0], &[0]).is_err());
    }

    fn blobs(n: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Matrix::from_fn(n, 2, |i, _| {
            let c = if labels[i] == 0 { -2.0 } else { 2.0 };
            c + rng.random_range(-1.0..1.0)
        });
        (x, labels)
    }

    #[test]
    fn separable_clusters_probe_perfectly() {
        let (x, y) = blobs(200, 1);
        let (xt, yt) = blobs(100, 2);
        let probe = train_probe(&x, &y, &ProbeConfig::default()).unwrap();
        assert_eq!(accuracy(&probe.predict(&xt).unwrap(), &yt), 1.0);
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let k = 4;
        let n = 2000;
        let x = Matrix::from_fn(n, 6, |_, _| rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let train: Vec<usize> = (0..1600).collect();
        let test: Vec<usize> = (1600..n).collect();
        let probe = train_probe(&x.select_rows(&train).unwrap(), &labels[..1600], &ProbeConfig::default()).unwrap();
        let pred = probe.predict(&x.select_rows(&test).unwrap()).unwrap();
        let acc = accuracy(&pred, &labels[1600..]);
        let chance = 1.0 / k as f64;
        let sigma = (chance * (1.0 - chance) / 400.0).sqrt();
        assert!((acc - chance).abs() <= 3.0 * sigma, "accuracy {acc}");
    }

    #[test]
    fn duplicated_columns_keep_predictions() {
        let (x, y) = blobs(200, 3);
        let (xt, _) = blobs(100, 4);
        let dup = |m: &Matrix| Matrix::hcat(m, m).unwrap();
        let cfg = ProbeConfig::default();
        let a = train_probe(&dup(&x), &y, &cfg).unwrap();
        let b = train_probe(&dup(&x), &y, &cfg).unwrap();
        assert_eq!(a, b);
        let single = train_probe(&x, &y, &cfg).unwrap().predict(&xt).unwrap();
        assert_eq!(a.predict(&dup(&xt)).unwrap(), single);
    }

    #[test]
    fn single_class_rejected() {
        let x = Matrix::zeros(5, 2);
        assert!(train_probe(&x, &[1, 1, 1, 1, 1], &ProbeConfig::default()).is_err());
    }

    #[test]
    fn csv_layout() {
        let grid = vec![ProbeReport {
            representation: Representation::XShared,
            label_set: LabelSet::PrivateY,
            accuracy: 0.5,
            ari: -0.25,
            n_test: 10,
        }];
        assert_eq!(grid_to_csv(&grid), "representation,label_set,accuracy,ari,n_test\nz_x_s,private_y,0.5,-0.25,10\n");
    }

    fn labeling() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
        (2usize..60).prop_flat_map(|n| {
            (
                proptest::collection::vec(0usize..5, n),
                proptest::collection::vec(0usize..5, n),
            )
        })
    }

    proptest! {
        #[test]
        fn ari_symmetric_and_relabel_invariant((a, b) in labeling(), shift in 1usize..7) {
            let ab = adjusted_rand_index(&a, &b).unwrap();
            let ba = adjusted_rand_index(&b, &a).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            let relabeled: Vec<usize> = a.iter().map(|&l| (l + shift) * 3).collect();
            prop_assert!((adjusted_rand_index(&relabeled, &b).unwrap() - ab).abs() < 1e-12);
            prop_assert!(ab <= 1.0 + 1e-12);
        }

        #[test]
        fn ari_of_self_is_one((a, _) in labeling()) {
            prop_assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
        }
    }
}
