//! Paired two-view datasets: generators, corruption operators, IDX loading
//! and the `DVDS` file format.

mod corrupt;
mod factor;
mod glyphs;
mod idx;
mod transform;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{find, read_arrays, write_arrays, NamedArray, Reader};
use crate::error::{Error, Result};
use crate::ndmath::Matrix;

pub use corrupt::{corrupt, CorruptionKind, CorruptionSpec, BLUR_WIDTHS, NOISE_FRACTIONS};
pub use factor::{gen_factor_dataset, FactorSpec};
pub use glyphs::{glyph_images, GLYPH_CLASSES, GLYPH_SIDE};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use transform::{flip_image, gen_twoview_transform, rotate_image, Flip, FLIPS, ROTATION_ANGLES};

pub const DATASET_MAGIC: &[u8; 4] = b"DVDS";
pub const DATASET_VERSION: u32 = 1;

/// Which of the three label sets a probe targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSet {
    Shared,
    PrivateX,
    PrivateY,
}

impl LabelSet {
    pub const ALL: [LabelSet; 3] = [LabelSet::Shared, LabelSet::PrivateX, LabelSet::PrivateY];

    pub fn name(self) -> &'static str {
        match self {
            LabelSet::Shared => "shared",
            LabelSet::PrivateX => "private_x",
            LabelSet::PrivateY => "private_y",
        }
    }
}

/// Paired views with one shared and two view-private label sets.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiviewDataset {
    pub x: Matrix,
    pub y: Matrix,
    pub shared_label: Vec<usize>,
    pub private_label_x: Vec<usize>,
    pub private_label_y: Vec<usize>,
    /// Generator name, seed and parameters.
    pub meta: BTreeMap<String, String>,
}

impl MultiviewDataset {
    pub fn new(
        x: Matrix,
        y: Matrix,
        shared_label: Vec<usize>,
        private_label_x: Vec<usize>,
        private_label_y: Vec<usize>,
        meta: BTreeMap<String, String>,
    ) -> Result<Self> {
        let ds = Self {
            x,
            y,
            shared_label,
            private_label_x,
            private_label_y,
            meta,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels(&self, set: LabelSet) -> &[usize] {
        match set {
            LabelSet::Shared => &self.shared_label,
            LabelSet::PrivateX => &self.private_label_x,
            LabelSet::PrivateY => &self.private_label_y,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        let lens = [
            self.y.rows(),
            self.shared_label.len(),
            self.private_label_x.len(),
            self.private_label_y.len(),
        ];
        if lens.iter().any(|&l| l != n) {
            return Err(Error::InvalidArgument(format!(
                "dataset row counts disagree: x has {n}, y/labels have {lens:?}"
            )));
        }
        if !self.x.is_finite() || !self.y.is_finite() {
            return Err(Error::InvalidArgument("dataset contains non-finite values".into()));
        }
        Ok(())
    }

    /// Rows at `indices`, in order. Meta is copied.
    pub fn subset(&self, indices: &[usize]) -> Result<MultiviewDataset> {
        let pick = |v: &[usize]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        Ok(Self {
            x: self.x.select_rows(indices)?,
            y: self.y.select_rows(indices)?,
            shared_label: pick(&self.shared_label),
            private_label_x: pick(&self.private_label_x),
            private_label_y: pick(&self.private_label_y),
            meta: self.meta.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        let as_u64 = |v: &[usize]| v.iter().map(|&l| l as u64).collect::<Vec<_>>();
        let shape = |m: &Matrix| vec![m.rows() as u64, m.cols() as u64];
        let arrays = vec![
            NamedArray::text("meta", serde_json::to_string(&self.meta)?),
            NamedArray::f64("x", shape(&self.x), self.x.as_slice().to_vec()),
            NamedArray::f64("y", shape(&self.y), self.y.as_slice().to_vec()),
            NamedArray::u64("shared_label", as_u64(&self.shared_label)),
            NamedArray::u64("private_label_x", as_u64(&self.private_label_x)),
            NamedArray::u64("private_label_y", as_u64(&self.private_label_y)),
        ];
        write_arrays(&mut buf, &arrays)?;
        Ok(buf)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != DATASET_MAGIC {
            return Err(Error::CorruptPayload("not a DVDS dataset file".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: DATASET_VERSION,
            });
        }
        let arrays = read_arrays(&mut r)?;
        let matrix = |name: &str| -> Result<Matrix> {
            let a = find(&arrays, name)?;
            if a.shape.len() != 2 {
                return Err(Error::CorruptPayload(format!("`{name}` is not 2-D")));
            }
            Matrix::new(a.shape[0] as usize, a.shape[1] as usize, a.as_f64()?.to_vec())
                .map_err(|e| Error::CorruptPayload(e.to_string()))
        };
        let labels = |name: &str| -> Result<Vec<usize>> {
            Ok(find(&arrays, name)?.as_u64()?.iter().map(|&v| v as usize).collect())
        };
        let meta: BTreeMap<String, String> = serde_json::from_str(find(&arrays, "meta")?.as_text()?)
            .map_err(|e| Error::CorruptPayload(format!("meta: {e}")))?;
        Self::new(
            matrix("x")?,
            matrix("y")?,
            labels("shared_label")?,
            labels("private_label_x")?,
            labels("private_label_y")?,
            meta,
        )
        .map_err(|e| Error::CorruptPayload(e.to_string()))
    }
}

/// Disjoint, exhaustive train/test index sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

pub const TRAIN_FRACTION: f64 = 0.8;

/// Seeded shuffle of `0..n`, first 80% train, remainder test.
pub fn train_test_split(n: usize, seed: u64) -> Split {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ SPLIT_STREAM));
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let test = idx.split_off(n_train);
    Split { train: idx, test }
}

// keeps the split stream distinct from generators seeded with the same value
const SPLIT_STREAM: u64 = 0x5eed_5011_7000_0000;

/// Number of classes, assuming contiguous labels from zero.
pub fn class_count(labels: &[usize]) -> usize {
    labels.iter().max().map_or(0, |m| m + 1)
}
