//! Toy backbones with adapters on selected dense layers.
//!
//! * `mlp`: `x → relu(fc1 x + b1) → relu(fc2 · + b2) → head · + bh`, hidden
//!   width 32, 4 outputs; adapters on `fc1` and `fc2`.
//! * `attn`: one softmax attention head over sequences of 8 tokens.
//!   Tokens are embedded to `d_model = 16`; `q` and `v` carry adapters while
//!   `embed`, `k` and the output projection `o` are plain. Batches are packed
//!   side by side along columns and a block mask keeps attention within each
//!   sequence.
//!
//! Activations are `features × samples`. Plain tensors are frozen unless the
//! model is in full fine-tuning mode.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter_with_shared, AdapterConfig, AdapterLayer, LossTarget, SharedProjections, Variant};
use crate::autodiff::{softmax_columns, Gradients, NodeId, Tape};
use crate::checkpoint::Checkpoint;
use crate::tensor::Matrix;

use super::optim::{AdamW, Moments};
use super::{derive_seed, Result, TrainError};

pub const HIDDEN: usize = 32;
pub const OUTPUTS: usize = 4;
pub const D_MODEL: usize = 16;
pub const SEQ_LEN: usize = 8;
/// Raw token width: 8 features plus a flag bit.
pub const TOKEN_DIM: usize = 9;

/// Additive score for cross-sequence pairs; its softmax weight underflows to 0.
const MASKED_SCORE: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Mlp,
    Attn,
}

impl Backbone {
    pub fn adapted_layers(self) -> &'static [&'static str] {
        match self {
            Backbone::Mlp => &["fc1", "fc2"],
            Backbone::Attn => &["q", "v"],
        }
    }
}

fn gaussian(rows: usize, cols: usize, scale: f64, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Matrix::from_fn(rows, cols, |_, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Deterministic "pre-trained" weights: Gaussian with `1/sqrt(fan_in)` scale,
/// biases with standard deviation 0.1.
pub fn pretrained_weights(backbone: Backbone, input_dim: usize, seed: u64) -> BTreeMap<String, Matrix> {
    let shapes: Vec<(&str, usize, usize)> = match backbone {
        Backbone::Mlp => vec![
            ("fc1", HIDDEN, input_dim),
            ("fc1.bias", HIDDEN, 1),
            ("fc2", HIDDEN, HIDDEN),
            ("fc2.bias", HIDDEN, 1),
            ("head", OUTPUTS, HIDDEN),
            ("head.bias", OUTPUTS, 1),
        ],
        Backbone::Attn => vec![
            ("embed", D_MODEL, input_dim),
            ("q", D_MODEL, D_MODEL),
            ("k", D_MODEL, D_MODEL),
            ("v", D_MODEL, D_MODEL),
            ("o", OUTPUTS, D_MODEL),
        ],
    };
    shapes
        .into_iter()
        .map(|(name, rows, cols)| {
            let scale = if cols == 1 { 0.1 } else { 1.0 / (cols as f64).sqrt() };
            let seed = derive_seed(seed, &format!("pretrained/{name}"));
            (name.to_string(), gaussian(rows, cols, scale, seed))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub backbone: Backbone,
    pub layers: BTreeMap<String, AdapterLayer>,
    pub plain: BTreeMap<String, Matrix>,
    /// Plain tensors are trainable (full fine-tuning).
    pub train_plain: bool,
}

impl ToyModel {
    /// Wraps the backbone's adapted layers per `configs` (keyed by layer
    /// name); every other weight becomes a plain tensor. VeRA-style layers
    /// slice one set of projections sized for the largest layer.
    pub fn new(
        backbone: Backbone,
        mut weights: BTreeMap<String, Matrix>,
        configs: &BTreeMap<String, AdapterConfig>,
        shared_seed: u64,
        train_plain: bool,
    ) -> Result<Self> {
        let vera_rank = configs
            .values()
            .filter(|c| matches!(c.variant, Variant::Vera | Variant::Dvora))
            .map(|c| c.rank)
            .max();
        let shared = vera_rank.map(|rank| {
            let max_d = configs.keys().filter_map(|n| weights.get(n)).map(Matrix::rows).max().unwrap_or(1);
            let max_k = configs.keys().filter_map(|n| weights.get(n)).map(Matrix::cols).max().unwrap_or(1);
            SharedProjections::generate(max_d, max_k, rank, shared_seed)
        });
        let mut layers = BTreeMap::new();
        for &name in backbone.adapted_layers() {
            let w0 = weights
                .remove(name)
                .ok_or_else(|| TrainError::Config(format!("backbone weight {name:?} missing")))?;
            let cfg = configs
                .get(name)
                .ok_or_else(|| TrainError::Config(format!("no adapter config for layer {name:?}")))?;
            let shared = shared.as_ref().filter(|s| s.b.cols() == cfg.rank);
            let layer = init_adapter_with_shared(&w0, cfg, shared).map_err(|source| TrainError::Adapter {
                layer: name.to_string(),
                source,
            })?;
            layers.insert(name.to_string(), layer);
        }
        Ok(Self {
            backbone,
            layers,
            plain: weights,
            train_plain,
        })
    }

    /// Scalars updated by training.
    pub fn count_trainable(&self) -> usize {
        let adapters: usize = self.layers.values().map(AdapterLayer::count_trainable).sum();
        let plain: usize = if self.train_plain {
            self.plain.values().map(Matrix::len).sum()
        } else {
            0
        };
        adapters + plain
    }

    fn plain_node(&self, tape: &mut Tape, name: &str) -> Result<NodeId> {
        let value = self.plain[name].clone();
        Ok(if self.train_plain {
            tape.leaf(name, value)?
        } else {
            tape.constant(value)
        })
    }

    fn layer_node(
        &self,
        tape: &mut Tape,
        name: &str,
        x: NodeId,
        masks: &BTreeMap<String, Matrix>,
    ) -> Result<NodeId> {
        self.layers[name]
            .attach(tape, &format!("{name}."), x, masks.get(name))
            .map_err(|source| TrainError::Adapter {
                layer: name.to_string(),
                source,
            })
    }

    /// Records the forward pass for a `input_dim × n` batch. Adapter leaves
    /// are named `{layer}.{role}`, trainable plain tensors by their own name.
    pub fn attach(&self, tape: &mut Tape, x: &Matrix, masks: &BTreeMap<String, Matrix>) -> Result<NodeId> {
        let x = tape.constant(x.clone());
        match self.backbone {
            Backbone::Mlp => {
                let mut h = x;
                for name in ["fc1", "fc2"] {
                    let z = self.layer_node(tape, name, h, masks)?;
                    let b = self.plain_node(tape, &format!("{name}.bias"))?;
                    let z = tape.add_column_bias(z, b)?;
                    h = tape.relu(z);
                }
                let head = self.plain_node(tape, "head")?;
                let bias = self.plain_node(tape, "head.bias")?;
                let out = tape.matmul(head, h)?;
                Ok(tape.add_column_bias(out, bias)?)
            }
            Backbone::Attn => {
                let embed = self.plain_node(tape, "embed")?;
                let h = tape.matmul(embed, x)?;
                let q = self.layer_node(tape, "q", h, masks)?;
                let v = self.layer_node(tape, "v", h, masks)?;
                let wk = self.plain_node(tape, "k")?;
                let k = tape.matmul(wk, h)?;
                let kt = tape.transpose(k);
                let scores = tape.matmul(kt, q)?;
                let scores = tape.scale(scores, 1.0 / (D_MODEL as f64).sqrt());
                let block = tape.constant(block_mask(tape.value(scores).cols()));
                let scores = tape.add(scores, block)?;
                let attn = tape.softmax_columns(scores);
                let z = tape.matmul(v, attn)?;
                let o = self.plain_node(tape, "o")?;
                Ok(tape.matmul(o, z)?)
            }
        }
    }

    pub fn build_tape(
        &self,
        x: &Matrix,
        target: &LossTarget,
        masks: &BTreeMap<String, Matrix>,
    ) -> Result<(Tape, NodeId)> {
        let eps = self.layers.values().map(|l| l.config.eps).fold(f64::INFINITY, f64::min);
        let mut tape = Tape::with_eps(eps);
        let pred = self.attach(&mut tape, x, masks)?;
        let loss = target.attach(&mut tape, pred)?;
        Ok((tape, loss))
    }

    /// Inference forward pass through the factored adapter paths.
    pub fn predict(&self, x: &Matrix) -> Result<Matrix> {
        let layer = |name: &str, h: &Matrix| {
            self.layers[name].forward(h).map_err(|source| TrainError::Adapter {
                layer: name.to_string(),
                source,
            })
        };
        let bias = |m: Matrix, b: &Matrix| Matrix::from_fn(m.rows(), m.cols(), |r, c| m.get(r, c) + b.get(r, 0));
        let p = &self.plain;
        match self.backbone {
            Backbone::Mlp => {
                let h = bias(layer("fc1", x)?, &p["fc1.bias"]).map(|v| v.max(0.0));
                let h = bias(layer("fc2", &h)?, &p["fc2.bias"]).map(|v| v.max(0.0));
                Ok(bias(p["head"].matmul(&h)?, &p["head.bias"]))
            }
            Backbone::Attn => {
                let h = p["embed"].matmul(x)?;
                let (q, v) = (layer("q", &h)?, layer("v", &h)?);
                let k = p["k"].matmul(&h)?;
                let scores = k.transpose().matmul(&q)?.scale(1.0 / (D_MODEL as f64).sqrt());
                let scores = scores.add(&block_mask(scores.cols()))?;
                Ok(p["o"].matmul(&v.matmul(&softmax_columns(&scores))?)?)
            }
        }
    }

    /// Mean loss over `x` without recording a tape.
    pub fn loss(&self, x: &Matrix, target: &LossTarget) -> Result<f64> {
        Ok(target.evaluate(&self.predict(x)?)?)
    }

    /// One inverted-dropout mask per adapted layer that uses dropout.
    pub fn dropout_masks(&self, batch_cols: usize, rng: &mut impl Rng) -> BTreeMap<String, Matrix> {
        self.layers
            .iter()
            .filter_map(|(name, l)| l.dropout_mask((l.in_dim(), batch_cols), rng).map(|m| (name.clone(), m)))
            .collect()
    }

    /// Applies one AdamW update to every trainable tensor. Moments are keyed
    /// by leaf name and created on first use.
    pub fn apply_gradients(
        &mut self,
        grads: &Gradients,
        moments: &mut BTreeMap<String, Moments>,
        opt: &AdamW,
        lr: f64,
        t: u64,
    ) -> Result<()> {
        let mut update = |key: String, theta: &mut [f64]| -> Result<()> {
            let g = grads
                .get(&key)
                .ok_or_else(|| TrainError::Config(format!("no gradient for {key}")))?;
            let state = moments.entry(key).or_insert_with(|| Moments::zeros(theta.len()));
            opt.step(theta, g.data(), state, lr, t);
            Ok(())
        };
        for (name, layer) in self.layers.iter_mut() {
            for (role, theta) in layer.trainable_slices_mut() {
                update(format!("{name}.{}", role.leaf_name()), theta)?;
            }
        }
        if self.train_plain {
            for (name, value) in self.plain.iter_mut() {
                update(name.clone(), value.data_mut())?;
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, method_tag: &str, step: u64, seed: u64, config: serde_json::Value) -> Checkpoint {
        let mut ckpt = Checkpoint::new(method_tag, step, seed, config);
        for (name, layer) in &self.layers {
            ckpt.push_adapter(name, layer);
        }
        for (name, value) in &self.plain {
            ckpt.push_plain(name, value);
        }
        ckpt
    }
}

/// `0` within each `SEQ_LEN` block on the diagonal, a large negative score
/// elsewhere.
fn block_mask(cols: usize) -> Matrix {
    Matrix::from_fn(cols, cols, |r, c| {
        if r / SEQ_LEN == c / SEQ_LEN {
            0.0
        } else {
            MASKED_SCORE
        }
    })
}
