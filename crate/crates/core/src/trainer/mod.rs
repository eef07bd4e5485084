//! Toy fine-tuning runs: AdamW on tape gradients over a synthetic task,
//! emitting checkpoints at chosen steps.
//!
//! A run is a pure function of its [`TrainConfig`]: dataset, pre-trained
//! weights, adapter initialization, minibatch order and dropout masks are
//! all derived from `seed`.

mod model;
mod optim;
mod task;

pub use model::{pretrained_weights, Backbone, ToyModel, D_MODEL, HIDDEN, OUTPUTS, SEQ_LEN, TOKEN_DIM};
pub use optim::{lr_at, AdamW, Moments, Schedule, Warmup};
pub use task::{make_task, teacher_dataset, teacher_model, Dataset, TaskKind, TEACHER_NOISE};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapters::{AdapterConfig, AdapterError, Variant};
use crate::autodiff::AutodiffError;
use crate::checkpoint::Checkpoint;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("layer {layer}: {source}")]
    Adapter {
        layer: String,
        #[source]
        source: AdapterError,
    },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: u64, loss: f64 },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// FNV-1a of `tag` mixed into `seed`; gives independent streams per purpose.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    seed.rotate_left(17) ^ h
}

fn default_lr() -> f64 {
    1e-2
}
fn default_batch_size() -> usize {
    32
}
fn default_steps() -> u64 {
    500
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_adam_eps() -> f64 {
    1e-8
}
fn default_schedule() -> Schedule {
    Schedule::Constant
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub task: TaskKind,
    pub backbone: Backbone,
    /// Applied to every adapted layer unless overridden.
    pub adapter: AdapterConfig,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_schedule")]
    pub schedule: Schedule,
    #[serde(default)]
    pub warmup: Warmup,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_adam_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub seed: u64,
    /// Empty means three evenly spaced intermediate steps plus the last.
    #[serde(default)]
    pub checkpoint_steps: Vec<u64>,
    /// Per-layer variant, e.g. `{"fc2": "magnitude_only"}`.
    #[serde(default)]
    pub overrides: BTreeMap<String, Variant>,
}

impl TrainConfig {
    pub fn new(task: TaskKind, adapter: AdapterConfig) -> Self {
        Self {
            task,
            backbone: task.backbone(),
            adapter,
            lr: default_lr(),
            schedule: default_schedule(),
            warmup: Warmup::default(),
            batch_size: default_batch_size(),
            steps: default_steps(),
            weight_decay: 0.0,
            betas: default_betas(),
            adam_eps: default_adam_eps(),
            seed: 0,
            checkpoint_steps: Vec::new(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.steps == 0 {
            return bad("steps must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if let Some(s) = self.checkpoint_steps.iter().find(|s| !(1..=self.steps).contains(*s)) {
            return bad(format!("checkpoint step {s} outside [1, {}]", self.steps));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.adam_eps > 0.0) {
            return bad(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if let Warmup::Ratio(r) = self.warmup {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("warmup ratio must lie in [0, 1], got {r}"));
            }
        }
        if self.task.backbone() != self.backbone {
            return bad(format!("task {:?} needs backbone {:?}", self.task, self.task.backbone()));
        }
        let layers = self.backbone.adapted_layers();
        if let Some(name) = self.overrides.keys().find(|n| !layers.contains(&n.as_str())) {
            return bad(format!("override for unknown layer {name:?}; adapted layers are {layers:?}"));
        }
        self.adapter.validate().map_err(|source| TrainError::Adapter {
            layer: "*".into(),
            source,
        })
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            beta1: self.betas.0,
            beta2: self.betas.1,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Sorted, de-duplicated checkpoint steps after applying the default.
    pub fn checkpoint_schedule(&self) -> Vec<u64> {
        let mut steps = if self.checkpoint_steps.is_empty() {
            (1..=4).map(|q| (self.steps * q / 4).max(1)).collect()
        } else {
            self.checkpoint_steps.clone()
        };
        steps.sort_unstable();
        steps.dedup();
        steps
    }

    /// Per-layer adapter config: the override variant if any, and an
    /// initialization seed derived from the run seed and layer name.
    pub fn layer_configs(&self) -> BTreeMap<String, AdapterConfig> {
        self.backbone
            .adapted_layers()
            .iter()
            .map(|name| {
                let mut cfg = self.adapter.clone();
                if let Some(v) = self.overrides.get(*name) {
                    cfg.variant = *v;
                }
                cfg.seed = derive_seed(self.seed, &format!("adapter/{name}"));
                (name.to_string(), cfg)
            })
            .collect()
    }

    /// `method_tag` recorded in checkpoints: the adapter variant, or `mixed`
    /// when overrides change it for some layer.
    pub fn method_tag(&self) -> String {
        let base = self.adapter.variant;
        if self.overrides.values().any(|v| *v != base) {
            "mixed".into()
        } else {
            base.as_str().into()
        }
    }

    /// The untrained model: pre-trained weights with freshly initialized
    /// adapters.
    pub fn initial_model(&self) -> Result<ToyModel> {
        let weights = pretrained_weights(self.backbone, self.task.input_dim(), self.seed);
        ToyModel::new(
            self.backbone,
            weights,
            &self.layer_configs(),
            derive_seed(self.seed, "shared"),
            self.adapter.variant == Variant::Ft,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: u64,
    pub lr: f64,
    /// Minibatch loss before the update at `step`.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub model: ToyModel,
    pub curve: Vec<LossPoint>,
    /// Untrained state, step 0.
    pub base: Checkpoint,
    pub checkpoints: Vec<Checkpoint>,
    /// Full-dataset loss before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub trainable: usize,
}

/// Runs `cfg.steps` AdamW updates on shuffled minibatches.
pub fn train(cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let data = make_task(cfg.task, cfg.seed)?;
    let mut model = cfg.initial_model()?;
    let echo = serde_json::to_value(cfg).expect("config serializes");
    let tag = cfg.method_tag();
    let base = model.to_checkpoint(&tag, 0, cfg.seed, echo.clone());
    let (all_x, all_y) = data.all();
    let initial_loss = model.loss(&all_x, &all_y)?;

    let opt = cfg.optimizer();
    let emit = cfg.checkpoint_schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "batches"));
    let mut order: Vec<usize> = Vec::new();
    let mut moments = BTreeMap::new();
    let mut curve = Vec::with_capacity(cfg.steps as usize);
    let mut checkpoints = Vec::with_capacity(emit.len());
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..data.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("non-empty epoch"));
        }
        let (x, y) = data.batch(&batch);
        let masks = model.dropout_masks(x.cols(), &mut rng);
        let (tape, loss) = model.build_tape(&x, &y, &masks)?;
        let value = tape.value(loss).get(0, 0);
        if !value.is_finite() {
            return Err(TrainError::NonFiniteLoss { step, loss: value });
        }
        let grads = tape.backward(loss)?;
        let lr = lr_at(step, cfg.steps, cfg.lr, cfg.schedule, cfg.warmup);
        model.apply_gradients(&grads, &mut moments, &opt, lr, step)?;
        curve.push(LossPoint { step, lr, loss: value });
        if emit.binary_search(&step).is_ok() {
            checkpoints.push(model.to_checkpoint(&tag, step, cfg.seed, echo.clone()));
        }
    }
    let final_loss = model.loss(&all_x, &all_y)?;
    let trainable = model.count_trainable();
    Ok(TrainOutput {
        model,
        curve,
        base,
        checkpoints,
        initial_loss,
        final_loss,
        trainable,
    })
}

/// Writes `step,lr,loss` rows.
pub fn write_loss_csv(curve: &[LossPoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |source: std::io::Error| TrainError::Io {
        path: path.into(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| io(e.into()))?;
    for p in curve {
        w.serialize(p).map_err(|e| io(e.into()))?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{delta_direction, delta_magnitude};

    fn quick(variant: Variant, steps: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(TaskKind::TeacherRegression, AdapterConfig::new(variant, 4));
        cfg.steps = steps;
        cfg.seed = 7;
        cfg
    }

    type Mutation = Box<dyn Fn(&mut TrainConfig)>;

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = quick(Variant::Dora, 10);
        assert!(ok.validate().is_ok());
        let cases: Vec<Mutation> = vec![
            Box::new(|c| c.steps = 0),
            Box::new(|c| c.lr = 0.0),
            Box::new(|c| c.checkpoint_steps = vec![11]),
            Box::new(|c| c.checkpoint_steps = vec![0]),
            Box::new(|c| c.backbone = Backbone::Attn),
            Box::new(|c| c.betas = (1.0, 0.9)),
            Box::new(|c| c.warmup = Warmup::Ratio(1.5)),
            Box::new(|c| {
                c.overrides.insert("q".into(), Variant::Lora);
            }),
            Box::new(|c| c.adapter.rank = 0),
        ];
        for (i, mutate) in cases.iter().enumerate() {
            let mut c = ok.clone();
            mutate(&mut c);
            assert!(c.validate().is_err(), "case {i}");
        }
    }

    #[test]
    fn checkpoint_schedule_defaults_to_quarters() {
        assert_eq!(quick(Variant::Dora, 500).checkpoint_schedule(), vec![125, 250, 375, 500]);
        assert_eq!(quick(Variant::Dora, 1).checkpoint_schedule(), vec![1]);
        let out = train(&quick(Variant::Dora, 1)).unwrap();
        assert_eq!(out.checkpoints.len(), 1);
        assert_eq!(out.curve.len(), 1);
    }

    #[test]
    fn frozen_tensors_are_untouched() {
        for variant in [Variant::Lora, Variant::Dora, Variant::Dvora, Variant::MagnitudeOnly] {
            let cfg = quick(variant, 20);
            let before = cfg.initial_model().unwrap();
            let out = train(&cfg).unwrap();
            assert_eq!(out.model.plain, before.plain, "{variant}");
            for (name, layer) in &out.model.layers {
                let b = &before.layers[name];
                assert_eq!(layer.base, b.base);
                if variant == Variant::Dvora {
                    assert_eq!(layer.lora_b, b.lora_b);
                    assert_eq!(layer.lora_a, b.lora_a);
                }
            }
        }
    }

    #[test]
    fn reruns_are_bit_identical() {
        let mut cfg = quick(Variant::Dora, 30);
        cfg.adapter.dropout_p = 0.1;
        let (a, b) = (train(&cfg).unwrap(), train(&cfg).unwrap());
        let bits = |c: &[LossPoint]| c.iter().map(|p| p.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.curve), bits(&b.curve));
        assert_eq!(a.checkpoints, b.checkpoints);
    }

    #[test]
    fn magnitude_only_keeps_direction() {
        let out = train(&quick(Variant::MagnitudeOnly, 40)).unwrap();
        let w0 = out.base.base_weights();
        for ckpt in &out.checkpoints {
            for (name, w) in ckpt.to_effective().unwrap() {
                assert!(delta_direction(&w, &w0[&name]).unwrap() < 1e-12);
                assert!(delta_magnitude(&w, &w0[&name]).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn overrides_mix_variants() {
        let mut cfg = quick(Variant::Dora, 5);
        cfg.overrides.insert("fc2".into(), Variant::MagnitudeOnly);
        let out = train(&cfg).unwrap();
        assert_eq!(out.model.layers["fc2"].variant(), Variant::MagnitudeOnly);
        assert_eq!(out.trainable, (4 * (32 + 16) + 16) + 32);
        assert_eq!(out.base.method_tag, "mixed");
    }

    #[test]
    fn other_tasks_train() {
        for task in [TaskKind::BlobClassification, TaskKind::AttentionCopy] {
            let mut cfg = TrainConfig::new(task, AdapterConfig::new(Variant::Dora, 4));
            cfg.steps = 60;
            cfg.batch_size = 16;
            let out = train(&cfg).unwrap();
            assert!(out.final_loss < out.initial_loss, "{task:?}: {} -> {}", out.initial_loss, out.final_loss);
        }
    }

    #[test]
    fn loss_csv_has_expected_header() {
        let out = train(&quick(Variant::Lora, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        write_loss_csv(&out.curve, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("step,lr,loss\n"));
        assert_eq!(text.lines().count(), 4);
    }
}
