//! Synthetic datasets. Every sample is one column (or one `SEQ_LEN`-column
//! block for sequence tasks) of `inputs`.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterConfig, LossTarget, Variant};
use crate::tensor::Matrix;

use super::model::{pretrained_weights, Backbone, ToyModel, OUTPUTS, SEQ_LEN, TOKEN_DIM};
use super::{derive_seed, Result};

pub const REGRESSION_INPUT_DIM: usize = 16;
pub const REGRESSION_SAMPLES: usize = 256;
pub const TEACHER_NOISE: f64 = 0.01;
/// Rank of the teacher's directional perturbation.
pub const TEACHER_RANK: usize = 2;
pub const BLOB_DIM: usize = 8;
pub const BLOB_CLASSES: usize = 4;
pub const BLOB_SAMPLES: usize = 256;
pub const BLOB_SPREAD: f64 = 3.0;
pub const COPY_SEQUENCES: usize = 64;
/// Index of the flag feature within a raw token.
pub const FLAG: usize = TOKEN_DIM - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TeacherRegression,
    BlobClassification,
    AttentionCopy,
}

impl TaskKind {
    pub fn input_dim(self) -> usize {
        match self {
            TaskKind::TeacherRegression => REGRESSION_INPUT_DIM,
            TaskKind::BlobClassification => BLOB_DIM,
            TaskKind::AttentionCopy => TOKEN_DIM,
        }
    }

    pub fn backbone(self) -> Backbone {
        match self {
            TaskKind::AttentionCopy => Backbone::Attn,
            _ => Backbone::Mlp,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub targets: LossTarget,
    /// Columns per sample: 1, or `SEQ_LEN` for sequence tasks.
    pub group: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.cols() / self.group
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Gathers the listed samples, in order.
    pub fn batch(&self, samples: &[usize]) -> (Matrix, LossTarget) {
        let cols: Vec<usize> = samples
            .iter()
            .flat_map(|s| s * self.group..(s + 1) * self.group)
            .collect();
        let gather = |m: &Matrix| Matrix::from_fn(m.rows(), cols.len(), |r, c| m.get(r, cols[c]));
        let targets = match &self.targets {
            LossTarget::Regression(y) => LossTarget::Regression(gather(y)),
            LossTarget::Classes(labels) => LossTarget::Classes(cols.iter().map(|&c| labels[c]).collect()),
        };
        (gather(&self.inputs), targets)
    }

    pub fn all(&self) -> (Matrix, LossTarget) {
        (self.inputs.clone(), self.targets.clone())
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Labels `teacher(inputs) + noise` with Gaussian noise of standard deviation
/// `noise`.
pub fn teacher_dataset(teacher: &ToyModel, inputs: Matrix, noise: f64, seed: u64) -> Result<Dataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = teacher.predict(&inputs)?;
    let y = clean.add(&gaussian(clean.rows(), clean.cols(), noise, &mut rng))?;
    Ok(Dataset {
        inputs,
        targets: LossTarget::Regression(y),
        group: 1,
    })
}

/// The pre-trained MLP with a rank-`TEACHER_RANK` directional perturbation
/// and a per-column magnitude change on each hidden layer.
pub fn teacher_model(seed: u64) -> Result<ToyModel> {
    let mut weights = pretrained_weights(Backbone::Mlp, REGRESSION_INPUT_DIM, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "teacher"));
    for name in Backbone::Mlp.adapted_layers() {
        let w0 = &weights[*name];
        let (d, k) = w0.shape();
        let u = gaussian(d, TEACHER_RANK, 1.0, &mut rng);
        let v = gaussian(TEACHER_RANK, k, 1.0, &mut rng);
        let p = u.matmul(&v)?;
        let p = p.scale(0.5 * w0.frobenius_norm() / p.frobenius_norm());
        let moved = w0.add(&p)?;
        let norms = moved.column_norms();
        let target: Vec<f64> = w0
            .column_norms()
            .data()
            .iter()
            .zip(norms.data())
            .map(|(m0, n)| m0 * (1.0 + 0.5 * rng.random_range(-1.0..1.0)) / n)
            .collect();
        let w = moved.scale_columns(&crate::tensor::RowVector::new(target))?;
        weights.insert(name.to_string(), w);
    }
    let configs: BTreeMap<String, AdapterConfig> = Backbone::Mlp
        .adapted_layers()
        .iter()
        .map(|n| (n.to_string(), AdapterConfig::new(Variant::Ft, 1)))
        .collect();
    ToyModel::new(Backbone::Mlp, weights, &configs, 0, false)
}

fn blob_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "blobs"));
    let centers = gaussian(BLOB_DIM, BLOB_CLASSES, BLOB_SPREAD, &mut rng);
    let mut labels: Vec<usize> = (0..BLOB_SAMPLES).map(|i| i % BLOB_CLASSES).collect();
    labels.shuffle(&mut rng);
    let inputs = Matrix::from_fn(BLOB_DIM, BLOB_SAMPLES, |r, c| {
        centers.get(r, labels[c]) + rng.sample::<f64, _>(StandardNormal)
    });
    Dataset {
        inputs,
        targets: LossTarget::Classes(labels),
        group: 1,
    }
}

/// Each sequence has one flagged token; every position must output the
/// flagged token's first `OUTPUTS` features.
fn copy_dataset(seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "copy"));
    let cols = COPY_SEQUENCES * SEQ_LEN;
    let mut inputs = gaussian(TOKEN_DIM, cols, 1.0, &mut rng);
    let mut y = Matrix::zeros(OUTPUTS, cols);
    for s in 0..COPY_SEQUENCES {
        let flagged = s * SEQ_LEN + rng.random_range(0..SEQ_LEN);
        for c in s * SEQ_LEN..(s + 1) * SEQ_LEN {
            inputs.set(FLAG, c, if c == flagged { 1.0 } else { 0.0 });
        }
        for c in s * SEQ_LEN..(s + 1) * SEQ_LEN {
            for r in 0..OUTPUTS {
                y.set(r, c, inputs.get(r, flagged));
            }
        }
    }
    Dataset {
        inputs,
        targets: LossTarget::Regression(y),
        group: SEQ_LEN,
    }
}

/// Builds the dataset of `kind`; deterministic in `seed`.
pub fn make_task(kind: TaskKind, seed: u64) -> Result<Dataset> {
    match kind {
        TaskKind::TeacherRegression => {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "inputs"));
            let inputs = gaussian(REGRESSION_INPUT_DIM, REGRESSION_SAMPLES, 1.0, &mut rng);
            teacher_dataset(&teacher_model(seed)?, inputs, TEACHER_NOISE, derive_seed(seed, "noise"))
        }
        TaskKind::BlobClassification => Ok(blob_dataset(seed)),
        TaskKind::AttentionCopy => Ok(copy_dataset(seed)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::LossTarget;

    fn bytes(d: &Dataset) -> Vec<u64> {
        let mut out: Vec<u64> = d.inputs.data().iter().map(|v| v.to_bits()).collect();
        match &d.targets {
            LossTarget::Regression(y) => out.extend(y.data().iter().map(|v| v.to_bits())),
            LossTarget::Classes(l) => out.extend(l.iter().map(|&v| v as u64)),
        }
        out
    }

    #[test]
    fn same_seed_same_bytes() {
        for kind in [TaskKind::TeacherRegression, TaskKind::BlobClassification, TaskKind::AttentionCopy] {
            assert_eq!(bytes(&make_task(kind, 5).unwrap()), bytes(&make_task(kind, 5).unwrap()));
            assert_ne!(bytes(&make_task(kind, 5).unwrap()), bytes(&make_task(kind, 6).unwrap()));
        }
    }

    #[test]
    fn student_equal_to_noiseless_teacher_has_zero_loss() {
        let teacher = teacher_model(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = teacher_dataset(&teacher, gaussian(16, 40, 1.0, &mut rng), 0.0, 3).unwrap();
        let (x, y) = data.all();
        assert_eq!(teacher.loss(&x, &y).unwrap(), 0.0);
    }

    #[test]
    fn blobs_are_balanced() {
        let data = make_task(TaskKind::BlobClassification, 4).unwrap();
        let LossTarget::Classes(labels) = &data.targets else {
            panic!("blob labels")
        };
        let mut counts = [0usize; BLOB_CLASSES];
        labels.iter().for_each(|&l| counts[l] += 1);
        let majority = *counts.iter().max().unwrap() as f64 / labels.len() as f64;
        assert!((majority - 0.25).abs() < 1e-12);
    }

    #[test]
    fn copy_targets_follow_the_flag() {
        let data = make_task(TaskKind::AttentionCopy, 7).unwrap();
        assert_eq!(data.len(), COPY_SEQUENCES);
        let (x, LossTarget::Regression(y)) = data.batch(&[3]) else {
            panic!("copy targets")
        };
        let flagged: Vec<usize> = (0..SEQ_LEN).filter(|&c| x.get(FLAG, c) == 1.0).collect();
        assert_eq!(flagged.len(), 1);
        for c in 0..SEQ_LEN {
            for r in 0..OUTPUTS {
                assert_eq!(y.get(r, c), x.get(r, flagged[0]));
            }
        }
    }

    #[test]
    fn teacher_differs_from_pretrained_student() {
        let teacher = teacher_model(1).unwrap();
        let base = pretrained_weights(Backbone::Mlp, REGRESSION_INPUT_DIM, 1);
        assert!(teacher.layers["fc1"].merge().unwrap().max_abs_diff(&base["fc1"]).unwrap() > 0.01);
        assert_eq!(teacher.plain["head"], base["head"]);
    }
}
