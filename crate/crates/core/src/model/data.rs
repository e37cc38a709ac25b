//! Synthetic 2-D classification datasets used for training fixtures and
//! calibration.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MIN_SAMPLES: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    GaussianBlobs,
    ConcentricRings,
    #[serde(rename = "two-moons-10class")]
    TwoMoons10Class,
}

impl DatasetKind {
    pub fn default_classes(self) -> usize {
        match self {
            DatasetKind::GaussianBlobs => 4,
            DatasetKind::ConcentricRings => 3,
            DatasetKind::TwoMoons10Class => 10,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| {
            Error::InvalidArgument(format!(
                "unknown dataset kind {s:?}; expected gaussian-blobs, concentric-rings or two-moons-10class"
            ))
        })
    }

    fn sample(self, class: usize, classes: usize, rng: &mut ChaCha8Rng) -> [f64; 2] {
        let unit = Normal::new(0.0, 1.0).expect("valid normal");
        match self {
            DatasetKind::GaussianBlobs => {
                let a = 2.0 * PI * class as f64 / classes as f64;
                [
                    4.0 * a.cos() + 0.8 * unit.sample(rng),
                    4.0 * a.sin() + 0.8 * unit.sample(rng),
                ]
            }
            DatasetKind::ConcentricRings => {
                let r = 1.0 + class as f64 + 0.1 * unit.sample(rng);
                let a = rng.random_range(0.0..2.0 * PI);
                [r * a.cos(), r * a.sin()]
            }
            DatasetKind::TwoMoons10Class => {
                let pair = class / 2;
                let t = rng.random_range(0.0..PI);
                let (mx, my) = if class.is_multiple_of(2) {
                    (t.cos(), t.sin())
                } else {
                    (1.0 - t.cos(), 0.5 - t.sin())
                };
                let x = mx - 0.5 + 0.1 * unit.sample(rng);
                let y = my - 0.25 + 0.1 * unit.sample(rng);
                let phi = 2.0 * PI * pair as f64 / 5.0;
                let (s, c) = phi.sin_cos();
                [5.0 * c + c * x - s * y, 5.0 * s + s * x + c * y]
            }
        }
    }
}

/// Labelled samples. `inputs` is `[N, 2]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet<T> {
    pub inputs: Tensor<T>,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub seed: u64,
}

impl<T: Scalar> CalibrationSet<T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<CalibrationSet<T>> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidArgument(format!(
                "requested {n} samples from a set of {}",
                self.len()
            )));
        }
        Ok(CalibrationSet {
            inputs: self.inputs.slice_rows(0, n)?,
            labels: self.labels[..n].to_vec(),
            class_count: self.class_count,
            seed: self.seed,
        })
    }

    pub fn select(&self, rows: &[usize]) -> Result<(Tensor<T>, Vec<usize>)> {
        Ok((
            self.inputs.select_rows(rows)?,
            rows.iter().map(|&r| self.labels[r]).collect(),
        ))
    }
}

/// Calibration draw plus a disjoint held-out test set of the same size.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit<T> {
    pub kind: DatasetKind,
    pub calibration: CalibrationSet<T>,
    pub test: CalibrationSet<T>,
}

fn draw<T: Scalar>(
    kind: DatasetKind,
    classes: usize,
    n: usize,
    seed: u64,
    rng: &mut ChaCha8Rng,
) -> CalibrationSet<T> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let mut data = Vec::with_capacity(2 * n);
    for &c in &labels {
        let [x, y] = kind.sample(c, classes, rng);
        data.push(T::lit(x));
        data.push(T::lit(y));
    }
    CalibrationSet {
        inputs: Tensor::new(vec![n, 2], data).expect("2 coords per sample"),
        labels,
        class_count: classes,
        seed,
    }
}

/// Deterministic in `(kind, classes, n, seed)`. Labels are balanced (class
/// counts differ by at most one) in both splits.
pub fn generate_dataset<T: Scalar>(
    kind: DatasetKind,
    classes: Option<usize>,
    n: usize,
    seed: u64,
) -> Result<DatasetSplit<T>> {
    if n < MIN_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "dataset needs at least {MIN_SAMPLES} samples, got {n}"
        )));
    }
    let classes = classes.unwrap_or(kind.default_classes());
    if classes < 2 || (kind == DatasetKind::TwoMoons10Class && classes != 10) {
        return Err(Error::InvalidArgument(format!(
            "{classes} classes not supported for {kind:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calibration = draw(kind, classes, n, seed, &mut rng);
    let test = draw(kind, classes, n, seed, &mut rng);
    Ok(DatasetSplit {
        kind,
        calibration,
        test,
    })
}

#[derive(Serialize, Deserialize)]
struct SplitDoc {
    inputs: Vec<f64>,
    labels: Vec<usize>,
}

/// JSON form: `{kind, n, seed, class_count, input_shape, calibration, test}`
/// where each split carries flat `inputs` and `labels` arrays.
#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    kind: DatasetKind,
    #[serde(rename = "N")]
    n: usize,
    seed: u64,
    class_count: usize,
    input_shape: Vec<usize>,
    calibration: SplitDoc,
    test: SplitDoc,
}

impl<T: Scalar> DatasetSplit<T> {
    pub fn to_json(&self) -> Result<String> {
        let split = |s: &CalibrationSet<T>| SplitDoc {
            inputs: s.inputs.data().iter().map(|v| v.to_f64_exact()).collect(),
            labels: s.labels.clone(),
        };
        let doc = DatasetDoc {
            kind: self.kind,
            n: self.calibration.len(),
            seed: self.calibration.seed,
            class_count: self.calibration.class_count,
            input_shape: vec![2],
            calibration: split(&self.calibration),
            test: split(&self.test),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetDoc = serde_json::from_str(text)?;
        let split = |s: SplitDoc, name: &str| -> Result<CalibrationSet<T>> {
            let dim: usize = doc.input_shape.iter().product();
            if s.inputs.len() != s.labels.len() * dim || s.labels.is_empty() {
                return Err(Error::schema(format!("/{name}/inputs"), "length does not match labels"));
            }
            if let Some(i) = s.labels.iter().position(|&l| l >= doc.class_count) {
                return Err(Error::schema(format!("/{name}/labels/{i}"), "label out of range"));
            }
            let mut shape = vec![s.labels.len()];
            shape.extend_from_slice(&doc.input_shape);
            Ok(CalibrationSet {
                inputs: Tensor::new(shape, s.inputs.iter().map(|&v| T::lit(v)).collect())?,
                labels: s.labels,
                class_count: doc.class_count,
                seed: doc.seed,
            })
        };
        Ok(DatasetSplit {
            kind: doc.kind,
            calibration: split(doc.calibration, "calibration")?,
            test: split(doc.test, "test")?,
        })
    }
}
