//! Adapter parameterizations of a frozen base weight `W0 ∈ R^{d×k}`.
//!
//! | variant          | effective weight                                  | trainable      |
//! |------------------|---------------------------------------------------|----------------|
//! | `ft`             | `W`                                               | `W`            |
//! | `lora`           | `W0 + s·BA`                                       | `B, A`         |
//! | `dora`           | `m ⊙ (W0 + s·BA) / ‖W0 + s·BA‖_c`                 | `m, B, A`      |
//! | `dora_detached`  | same value, norm treated as a constant in backward | `m, B, A`      |
//! | `vera`           | `W0 + Λ_b B Λ_d A` with shared frozen `B, A`      | `λ_b, λ_d`     |
//! | `dvora`          | `m ⊙ V' / ‖V'‖_c`, `V' = W0 + Λ_b B Λ_d A`        | `m, λ_b, λ_d`  |
//! | `magnitude_only` | `m ⊙ W0 / ‖W0‖_c`                                 | `m`            |
//!
//! Layers map `x ∈ R^k` to `W' x ∈ R^d`, so the magnitude vector `m` holds one
//! entry per input feature (column). `s = alpha / rank`.

mod gradients;
mod oracle;
mod tape;

pub use gradients::{
    closed_form_grads, closed_form_param_grads, detach_delta, equal_norm_pair, grad_m_identity_check,
    magnitude_grad, scenario_ordering_check, weight_gradient, ClosedFormGrads,
};
pub use oracle::{triple_check, TripleReport, FD_STEP};
pub use tape::LossTarget;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamSet};
use crate::tensor::{Matrix, RowVector, TensorError, DEFAULT_EPS};

/// Initial value of every `λ_d` entry for VeRA-style layers.
pub const VERA_LAMBDA_D_INIT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdapterError {
    #[error("rank must be at least 1")]
    ZeroRank,
    #[error("rank {rank} exceeds min(d, k) = {max}")]
    RankTooLarge { rank: usize, max: usize },
    #[error("invalid adapter config: {0}")]
    InvalidConfig(String),
    #[error("column {column} of the directional matrix has norm {norm:e}, below eps")]
    DegenerateColumn { column: usize, norm: f64 },
    #[error("variant {0} has no magnitude/direction decomposition")]
    NotDecomposed(Variant),
    #[error("missing parameter {0:?}")]
    MissingParam(String),
    #[error("zero vector passed to {0}")]
    ZeroVector(&'static str),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T> = std::result::Result<T, AdapterError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Ft,
    Lora,
    Dora,
    DoraDetached,
    Vera,
    Dvora,
    MagnitudeOnly,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Ft,
        Variant::Lora,
        Variant::Dora,
        Variant::DoraDetached,
        Variant::Vera,
        Variant::Dvora,
        Variant::MagnitudeOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Ft => "ft",
            Variant::Lora => "lora",
            Variant::Dora => "dora",
            Variant::DoraDetached => "dora_detached",
            Variant::Vera => "vera",
            Variant::Dvora => "dvora",
            Variant::MagnitudeOnly => "magnitude_only",
        }
    }

    /// Variants whose weight is `m ⊙ V' / ‖V'‖_c`.
    pub fn is_decomposed(self) -> bool {
        matches!(
            self,
            Variant::Dora | Variant::DoraDetached | Variant::Dvora | Variant::MagnitudeOnly
        )
    }

    fn uses_lora_factors(self) -> bool {
        matches!(self, Variant::Lora | Variant::Dora | Variant::DoraDetached)
    }

    fn uses_vera_factors(self) -> bool {
        matches!(self, Variant::Vera | Variant::Dvora)
    }

    /// Whether `rank` constrains the layer shape.
    pub fn is_low_rank(self) -> bool {
        self.uses_lora_factors() || self.uses_vera_factors()
    }

    pub fn trainable_roles(self) -> &'static [Role] {
        match self {
            Variant::Ft => &[Role::Full],
            Variant::Lora => &[Role::B, Role::A],
            Variant::Dora | Variant::DoraDetached => &[Role::M, Role::B, Role::A],
            Variant::Vera => &[Role::LambdaB, Role::LambdaD],
            Variant::Dvora => &[Role::M, Role::LambdaB, Role::LambdaD],
            Variant::MagnitudeOnly => &[Role::M],
        }
    }

    /// Every role a serialized layer of this variant must carry.
    pub fn stored_roles(self) -> &'static [Role] {
        match self {
            Variant::Ft => &[Role::W0, Role::Full],
            Variant::Lora => &[Role::W0, Role::B, Role::A],
            Variant::Dora | Variant::DoraDetached => &[Role::W0, Role::M, Role::B, Role::A],
            Variant::Vera => &[Role::W0, Role::B, Role::A, Role::LambdaB, Role::LambdaD],
            Variant::Dvora => &[Role::W0, Role::M, Role::B, Role::A, Role::LambdaB, Role::LambdaD],
            Variant::MagnitudeOnly => &[Role::W0, Role::M],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown variant {given:?}; expected one of: {expected}")]
pub struct ParseVariantError {
    pub given: String,
    pub expected: String,
}

impl FromStr for Variant {
    type Err = ParseVariantError;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == norm)
            .ok_or_else(|| ParseVariantError {
                given: s.to_string(),
                expected: Variant::ALL.map(Variant::as_str).join(", "),
            })
    }
}

/// Name of a stored parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    W0,
    #[serde(rename = "m")]
    M,
    B,
    A,
    #[serde(rename = "lambda_b")]
    LambdaB,
    #[serde(rename = "lambda_d")]
    LambdaD,
    #[serde(rename = "full")]
    Full,
}

impl Role {
    /// Leaf name used on training tapes.
    pub fn leaf_name(self) -> &'static str {
        match self {
            Role::W0 => "W0",
            Role::M => "m",
            Role::B => "B",
            Role::A => "A",
            Role::LambdaB => "lambda_b",
            Role::LambdaD => "lambda_d",
            Role::Full => "W",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterConfig {
    pub variant: Variant,
    #[serde(default = "default_rank")]
    pub rank: usize,
    /// Scaling numerator; `None` means `alpha = rank`.
    #[serde(default)]
    pub alpha: Option<f64>,
    #[serde(default)]
    pub dropout_p: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_rank() -> usize {
    4
}

fn default_eps() -> f64 {
    DEFAULT_EPS
}

impl AdapterConfig {
    pub fn new(variant: Variant, rank: usize) -> Self {
        Self {
            variant,
            rank,
            alpha: None,
            dropout_p: 0.0,
            seed: 0,
            eps: DEFAULT_EPS,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = Some(alpha);
        self
    }

    pub fn with_dropout(mut self, p: f64) -> Self {
        self.dropout_p = p;
        self
    }

    pub fn scaling(&self) -> f64 {
        self.alpha.unwrap_or(self.rank as f64) / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(AdapterError::ZeroRank);
        }
        if let Some(alpha) = self.alpha {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(AdapterError::InvalidConfig(format!("alpha must be positive, got {alpha}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(AdapterError::InvalidConfig(format!(
                "dropout_p must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        if !(self.eps > 0.0) {
            return Err(AdapterError::InvalidConfig(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    fn validate_for(&self, d: usize, k: usize) -> Result<()> {
        self.validate()?;
        if self.variant.is_low_rank() && self.rank > d.min(k) {
            return Err(AdapterError::RankTooLarge {
                rank: self.rank,
                max: d.min(k),
            });
        }
        Ok(())
    }
}

/// Frozen random projections shared by every VeRA-style layer of a model.
/// Each layer uses the top-left `d × r` / `r × k` block.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedProjections {
    pub b: Matrix,
    pub a: Matrix,
}

impl SharedProjections {
    /// Gaussian entries scaled by `1/sqrt(fan_in)`.
    pub fn generate(max_d: usize, max_k: usize, rank: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5645_5241);
        let sb = 1.0 / (rank as f64).sqrt();
        let sa = 1.0 / (max_k as f64).sqrt();
        let b = Matrix::from_fn(max_d, rank, |_, _| sb * rng.sample::<f64, _>(StandardNormal));
        let a = Matrix::from_fn(rank, max_k, |_, _| sa * rng.sample::<f64, _>(StandardNormal));
        Self { b, a }
    }
}

/// A frozen base weight plus the adapter parameters of one variant.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub config: AdapterConfig,
    /// Frozen pre-trained weight `W0`.
    pub base: Matrix,
    /// Fully trainable weight (FT only).
    pub full: Option<Matrix>,
    pub magnitude: Option<RowVector>,
    /// `B` (d × r): trainable for LoRA/DoRA, the shared frozen block for VeRA.
    pub lora_b: Option<Matrix>,
    /// `A` (r × k): trainable for LoRA/DoRA, the shared frozen block for VeRA.
    pub lora_a: Option<Matrix>,
    pub lambda_b: Option<RowVector>,
    pub lambda_d: Option<RowVector>,
}

/// Kaiming-uniform `A` and zero `B`; `m = ‖W0‖_c`; VeRA gets `λ_b = 0`,
/// `λ_d = 0.1` and projections derived from `cfg.seed`.
pub fn init_adapter(w0: &Matrix, cfg: &AdapterConfig) -> Result<AdapterLayer> {
    let shared = cfg
        .variant
        .uses_vera_factors()
        .then(|| SharedProjections::generate(w0.rows(), w0.cols(), cfg.rank, cfg.seed));
    init_adapter_with_shared(w0, cfg, shared.as_ref())
}

/// Like [`init_adapter`], slicing VeRA projections from `shared` when given.
pub fn init_adapter_with_shared(
    w0: &Matrix,
    cfg: &AdapterConfig,
    shared: Option<&SharedProjections>,
) -> Result<AdapterLayer> {
    let (d, k) = w0.shape();
    cfg.validate_for(d, k)?;
    let r = cfg.rank;
    let mut layer = AdapterLayer {
        config: cfg.clone(),
        base: w0.clone(),
        full: None,
        magnitude: None,
        lora_b: None,
        lora_a: None,
        lambda_b: None,
        lambda_d: None,
    };
    let v = cfg.variant;
    if v == Variant::Ft {
        layer.full = Some(w0.clone());
    }
    if v.is_decomposed() {
        layer.magnitude = Some(w0.column_norms());
    }
    if v.uses_lora_factors() {
        let bound = (6.0 / k as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        layer.lora_a = Some(Matrix::from_fn(r, k, |_, _| rng.random_range(-bound..=bound)));
        layer.lora_b = Some(Matrix::zeros(d, r));
    }
    if v.uses_vera_factors() {
        let owned;
        let shared = match shared {
            Some(s) => s,
            None => {
                owned = SharedProjections::generate(d, k, r, cfg.seed);
                &owned
            }
        };
        if shared.b.cols() != r || shared.a.rows() != r {
            return Err(AdapterError::InvalidConfig(format!(
                "shared projections have rank {}, layer wants {r}",
                shared.b.cols()
            )));
        }
        layer.lora_b = Some(shared.b.slice(d, r)?);
        layer.lora_a = Some(shared.a.slice(r, k)?);
        layer.lambda_b = Some(RowVector::zeros(d));
        layer.lambda_d = Some(RowVector::filled(r, VERA_LAMBDA_D_INIT));
    }
    Ok(layer)
}

fn required<T>(value: &Option<T>, role: Role) -> Result<&T> {
    value
        .as_ref()
        .ok_or_else(|| AdapterError::MissingParam(role.leaf_name().to_string()))
}

pub(crate) fn check_columns(v: &Matrix, eps: f64) -> Result<RowVector> {
    let norms = v.column_norms();
    if let Some((column, &norm)) = norms.data().iter().enumerate().find(|(_, n)| **n <= eps) {
        return Err(AdapterError::DegenerateColumn { column, norm });
    }
    Ok(norms)
}

impl AdapterLayer {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn out_dim(&self) -> usize {
        self.base.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.base.cols()
    }

    pub fn role(&self, role: Role) -> Option<Matrix> {
        match role {
            Role::W0 => Some(self.base.clone()),
            Role::Full => self.full.clone(),
            Role::M => self.magnitude.as_ref().map(RowVector::to_matrix),
            Role::B => self.lora_b.clone(),
            Role::A => self.lora_a.clone(),
            Role::LambdaB => self.lambda_b.as_ref().map(RowVector::to_matrix),
            Role::LambdaD => self.lambda_d.as_ref().map(RowVector::to_matrix),
        }
    }

    /// Overwrites one stored tensor, checking its shape against the layer.
    pub fn set_role(&mut self, role: Role, value: Matrix) -> Result<()> {
        let (d, k) = self.base.shape();
        let r = self.config.rank;
        let expected = match role {
            Role::W0 | Role::Full => (d, k),
            Role::M => (1, k),
            Role::B => (d, r),
            Role::A => (r, k),
            Role::LambdaB => (1, d),
            Role::LambdaD => (1, r),
        };
        if value.shape() != expected {
            return Err(TensorError::ShapeMismatch {
                op: "set_role",
                left: expected,
                right: value.shape(),
            }
            .into());
        }
        match role {
            Role::W0 => self.base = value,
            Role::Full => self.full = Some(value),
            Role::M => self.magnitude = Some(RowVector::from_matrix(&value)?),
            Role::B => self.lora_b = Some(value),
            Role::A => self.lora_a = Some(value),
            Role::LambdaB => self.lambda_b = Some(RowVector::from_matrix(&value)?),
            Role::LambdaD => self.lambda_d = Some(RowVector::from_matrix(&value)?),
        }
        Ok(())
    }

    /// Current trainable tensors keyed by leaf name.
    pub fn trainable_params(&self) -> ParamSet {
        self.variant()
            .trainable_roles()
            .iter()
            .filter_map(|role| self.role(*role).map(|m| (role.leaf_name().to_string(), m)))
            .collect()
    }

    /// Copy of this layer with trainable tensors replaced from `params`.
    pub fn with_params(&self, params: &ParamSet) -> Result<Self> {
        let mut out = self.clone();
        for role in self.variant().trainable_roles() {
            let value = params
                .get(role.leaf_name())
                .ok_or_else(|| AdapterError::MissingParam(role.leaf_name().to_string()))?;
            out.set_role(*role, value.clone())?;
        }
        Ok(out)
    }

    /// Mutable views of every trainable tensor, in `trainable_roles` order.
    pub fn trainable_slices_mut(&mut self) -> Vec<(Role, &mut [f64])> {
        let variant = self.variant();
        let Self {
            full,
            magnitude,
            lora_b,
            lora_a,
            lambda_b,
            lambda_d,
            ..
        } = self;
        let trainable = |r: Role| variant.trainable_roles().contains(&r);
        let mut out = Vec::new();
        if let (true, Some(m)) = (trainable(Role::Full), full.as_mut()) {
            out.push((Role::Full, m.data_mut()));
        }
        if let (true, Some(m)) = (trainable(Role::M), magnitude.as_mut()) {
            out.push((Role::M, m.data_mut()));
        }
        if let (true, Some(m)) = (trainable(Role::B), lora_b.as_mut()) {
            out.push((Role::B, m.data_mut()));
        }
        if let (true, Some(m)) = (trainable(Role::A), lora_a.as_mut()) {
            out.push((Role::A, m.data_mut()));
        }
        if let (true, Some(m)) = (trainable(Role::LambdaB), lambda_b.as_mut()) {
            out.push((Role::LambdaB, m.data_mut()));
        }
        if let (true, Some(m)) = (trainable(Role::LambdaD), lambda_d.as_mut()) {
            out.push((Role::LambdaD, m.data_mut()));
        }
        out
    }

    /// The low-rank update `ΔV` (`s·BA` or `Λ_b B Λ_d A`), if any.
    pub fn delta(&self) -> Result<Option<Matrix>> {
        let v = self.variant();
        if v.uses_lora_factors() {
            let b = required(&self.lora_b, Role::B)?;
            let a = required(&self.lora_a, Role::A)?;
            return Ok(Some(b.matmul(a)?.scale(self.config.scaling())));
        }
        if v.uses_vera_factors() {
            let b = required(&self.lora_b, Role::B)?;
            let a = required(&self.lora_a, Role::A)?;
            let lb = required(&self.lambda_b, Role::LambdaB)?;
            let ld = required(&self.lambda_d, Role::LambdaD)?;
            return Ok(Some(b.scale_columns(ld)?.matmul(a)?.scale_rows(lb)?));
        }
        Ok(None)
    }

    /// `V' = W0 + ΔV` (or `W0` when there is no update).
    pub fn directional(&self) -> Result<Matrix> {
        match self.delta()? {
            Some(delta) => Ok(self.base.add(&delta)?),
            None => Ok(self.base.clone()),
        }
    }

    pub fn effective_weight(&self) -> Result<Matrix> {
        let v = self.variant();
        if v == Variant::Ft {
            return Ok(required(&self.full, Role::Full)?.clone());
        }
        let vprime = self.directional()?;
        if !v.is_decomposed() {
            return Ok(vprime);
        }
        let m = required(&self.magnitude, Role::M)?;
        let norms = check_columns(&vprime, self.config.eps)?;
        let scale = RowVector::new(m.data().iter().zip(norms.data()).map(|(m, n)| m / n).collect());
        Ok(vprime.scale_columns(&scale)?)
    }

    /// Folds the adapter into one dense matrix for inference.
    pub fn merge(&self) -> Result<Matrix> {
        self.effective_weight()
    }

    /// Inference forward pass `W' x` for a `k × n` batch, evaluated through
    /// the factored adapter path rather than the merged weight.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.forward_with_mask(x, None)
    }

    /// Training forward pass: the adapter branch sees `x ⊙ mask` while the
    /// base path sees `x`.
    pub fn forward_with_mask(&self, x: &Matrix, mask: Option<&Matrix>) -> Result<Matrix> {
        if x.rows() != self.in_dim() {
            return Err(TensorError::ShapeMismatch {
                op: "forward",
                left: self.base.shape(),
                right: x.shape(),
            }
            .into());
        }
        let dropped = match mask {
            Some(mask) => x.hadamard(mask)?,
            None => x.clone(),
        };
        let v = self.variant();
        match v {
            Variant::Ft => Ok(required(&self.full, Role::Full)?.matmul(x)?),
            Variant::Lora | Variant::Vera => {
                let base = self.base.matmul(x)?;
                Ok(base.add(&self.adapter_branch(&dropped)?)?)
            }
            Variant::Dora | Variant::DoraDetached | Variant::Dvora | Variant::MagnitudeOnly => {
                let m = required(&self.magnitude, Role::M)?;
                let norms = check_columns(&self.directional()?, self.config.eps)?;
                let c = RowVector::new(m.data().iter().zip(norms.data()).map(|(m, n)| m / n).collect());
                let base = self.base.matmul(&x.scale_rows(&c)?)?;
                if v == Variant::MagnitudeOnly {
                    return Ok(base);
                }
                Ok(base.add(&self.adapter_branch(&dropped.scale_rows(&c)?)?)?)
            }
        }
    }

    /// `ΔV x` evaluated right to left without forming `ΔV`.
    fn adapter_branch(&self, x: &Matrix) -> Result<Matrix> {
        let b = required(&self.lora_b, Role::B)?;
        let a = required(&self.lora_a, Role::A)?;
        if self.variant().uses_vera_factors() {
            let lb = required(&self.lambda_b, Role::LambdaB)?;
            let ld = required(&self.lambda_d, Role::LambdaD)?;
            let ax = a.matmul(x)?.scale_rows(ld)?;
            Ok(b.matmul(&ax)?.scale_rows(lb)?)
        } else {
            Ok(b.matmul(&a.matmul(x)?)?.scale(self.config.scaling()))
        }
    }

    /// Inverted-dropout mask for a batch, or `None` when dropout is off or
    /// the variant has no adapter branch.
    pub fn dropout_mask(&self, shape: (usize, usize), rng: &mut impl Rng) -> Option<Matrix> {
        let p = self.config.dropout_p;
        let has_branch = self.variant().is_low_rank();
        if p <= 0.0 || !has_branch {
            return None;
        }
        let keep = 1.0 / (1.0 - p);
        Some(Matrix::from_fn(shape.0, shape.1, |_, _| {
            if rng.random::<f64>() < p {
                0.0
            } else {
                keep
            }
        }))
    }

    /// Number of trainable scalars.
    pub fn count_trainable(&self) -> usize {
        count_trainable(self.variant(), self.out_dim(), self.in_dim(), self.config.rank)
    }
}

/// Trainable scalar count for a `d × k` layer.
pub fn count_trainable(variant: Variant, d: usize, k: usize, r: usize) -> usize {
    match variant {
        Variant::Ft => d * k,
        Variant::Lora => r * (d + k),
        Variant::Dora | Variant::DoraDetached => r * (d + k) + k,
        Variant::Vera => d + r,
        Variant::Dvora => d + r + k,
        Variant::MagnitudeOnly => k,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    /// Random non-init state for every trainable tensor.
    fn perturbed(layer: &AdapterLayer, rng: &mut ChaCha8Rng) -> AdapterLayer {
        let mut out = layer.clone();
        for (role, data) in out.trainable_slices_mut() {
            for v in data.iter_mut() {
                *v += rng.random_range(-0.5..0.5);
                if role == Role::M {
                    *v = v.abs() + 0.1;
                }
            }
        }
        out
    }

    #[test]
    fn init_is_identity_for_all_variants() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for variant in Variant::ALL {
            let w0 = random(6, 5, &mut rng);
            let layer = init_adapter(&w0, &AdapterConfig::new(variant, 2).with_seed(9)).unwrap();
            let w = layer.effective_weight().unwrap();
            assert!(w.max_abs_diff(&w0).unwrap() < 1e-12, "{variant}");
        }
    }

    #[test]
    fn dora_magnitude_of_identity() {
        let layer = init_adapter(&Matrix::identity(3), &AdapterConfig::new(Variant::Dora, 1)).unwrap();
        assert_eq!(layer.magnitude.unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn init_is_seed_deterministic_and_kaiming_bounded() {
        let w0 = Matrix::filled(4, 9, 0.5);
        let cfg = AdapterConfig::new(Variant::Lora, 3).with_seed(42);
        let a1 = init_adapter(&w0, &cfg).unwrap().lora_a.unwrap();
        let a2 = init_adapter(&w0, &cfg).unwrap().lora_a.unwrap();
        assert_eq!(a1, a2);
        let bound = (6.0f64 / 9.0).sqrt();
        assert!(a1.max_abs() <= bound);
        let other = init_adapter(&w0, &cfg.clone().with_seed(43)).unwrap().lora_a.unwrap();
        assert_ne!(a1, other);
    }

    #[test]
    fn init_rejects_bad_configs() {
        let w0 = Matrix::filled(3, 5, 1.0);
        assert_eq!(
            init_adapter(&w0, &AdapterConfig::new(Variant::Dora, 4)).unwrap_err(),
            AdapterError::RankTooLarge { rank: 4, max: 3 }
        );
        assert_eq!(
            init_adapter(&w0, &AdapterConfig::new(Variant::Lora, 0)).unwrap_err(),
            AdapterError::ZeroRank
        );
        assert!(init_adapter(&w0, &AdapterConfig::new(Variant::Lora, 1).with_dropout(1.0)).is_err());
        assert!(init_adapter(&w0, &AdapterConfig::new(Variant::Lora, 1).with_alpha(0.0)).is_err());
        // rank does not constrain full or magnitude-only tuning
        assert!(init_adapter(&w0, &AdapterConfig::new(Variant::MagnitudeOnly, 8)).is_ok());
    }

    #[test]
    fn dora_pure_magnitude_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = random(4, 3, &mut rng);
        let mut layer = init_adapter(&w0, &AdapterConfig::new(Variant::Dora, 2)).unwrap();
        let m = layer.magnitude.as_ref().unwrap().data().iter().map(|v| 2.0 * v).collect();
        layer.magnitude = Some(RowVector::new(m));
        let w = layer.effective_weight().unwrap();
        assert!(w.max_abs_diff(&w0.scale(2.0)).unwrap() < 1e-12);
    }

    #[test]
    fn lora_unit_bump() {
        let w0 = Matrix::filled(3, 3, 1.0);
        let mut layer = init_adapter(&w0, &AdapterConfig::new(Variant::Lora, 1)).unwrap();
        layer.lora_b = Some(Matrix::from_rows(&[&[1.0], &[0.0], &[0.0]]));
        layer.lora_a = Some(Matrix::from_rows(&[&[1.0, 0.0, 0.0]]));
        let mut expected = w0.clone();
        expected.set(0, 0, 2.0);
        assert_eq!(layer.effective_weight().unwrap(), expected);
        assert_eq!(layer.merge().unwrap(), expected);
    }

    #[test]
    fn decomposed_column_norms_equal_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for variant in [Variant::Dora, Variant::DoraDetached, Variant::Dvora, Variant::MagnitudeOnly] {
            let w0 = random(5, 4, &mut rng);
            let layer = init_adapter(&w0, &AdapterConfig::new(variant, 2)).unwrap();
            let layer = perturbed(&layer, &mut rng);
            let norms = layer.effective_weight().unwrap().column_norms();
            assert!(norms.max_abs_diff(layer.magnitude.as_ref().unwrap()) < 1e-12, "{variant}");
        }
    }

    #[test]
    fn degenerate_direction_is_an_error() {
        let w0 = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let layer = init_adapter(&w0, &AdapterConfig::new(Variant::Dora, 1)).unwrap();
        assert!(matches!(layer.effective_weight(), Err(AdapterError::DegenerateColumn { column: 1, .. })));
        assert!(layer.forward(&Matrix::filled(2, 1, 1.0)).is_err());
    }

    #[test]
    fn forward_matches_merged_weight() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for variant in Variant::ALL {
            let w0 = random(6, 4, &mut rng);
            let layer = perturbed(&init_adapter(&w0, &AdapterConfig::new(variant, 2)).unwrap(), &mut rng);
            let x = random(4, 7, &mut rng);
            let direct = layer.forward(&x).unwrap();
            let oracle = layer.effective_weight().unwrap().matmul(&x).unwrap();
            assert!(direct.max_abs_diff(&oracle).unwrap() < 1e-12, "{variant}");
        }
    }

    #[test]
    fn forward_at_init_is_base_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = random(3, 4, &mut rng);
        let x = random(4, 2, &mut rng);
        let layer = init_adapter(&w0, &AdapterConfig::new(Variant::Dora, 2)).unwrap();
        assert!(layer.forward(&x).unwrap().max_abs_diff(&w0.matmul(&x).unwrap()).unwrap() < 1e-12);
        assert!(layer.forward(&random(3, 2, &mut rng)).is_err());
    }

    #[test]
    fn zero_dropout_has_no_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w0 = random(3, 4, &mut rng);
        let layer = init_adapter(&w0, &AdapterConfig::new(Variant::Lora, 2)).unwrap();
        assert!(layer.dropout_mask((4, 5), &mut rng).is_none());
        let x = random(4, 5, &mut rng);
        assert_eq!(layer.forward_with_mask(&x, None).unwrap(), layer.forward(&x).unwrap());

        let dropped = init_adapter(&w0, &AdapterConfig::new(Variant::Lora, 2).with_dropout(0.5)).unwrap();
        let mask = dropped.dropout_mask((4, 5), &mut rng).unwrap();
        assert!(mask.data().iter().all(|v| *v == 0.0 || *v == 2.0));
    }

    #[test]
    fn dropout_only_touches_adapter_branch() {
        // with B = 0 the adapter branch is zero, so any mask leaves output unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let w0 = random(3, 4, &mut rng);
        let layer = init_adapter(&w0, &AdapterConfig::new(Variant::Dora, 2).with_dropout(0.3)).unwrap();
        let x = random(4, 5, &mut rng);
        let mask = layer.dropout_mask((4, 5), &mut rng).unwrap();
        let y = layer.forward_with_mask(&x, Some(&mask)).unwrap();
        assert!(y.max_abs_diff(&w0.matmul(&x).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn trainable_counts() {
        assert_eq!(count_trainable(Variant::Lora, 4096, 4096, 32), 262_144);
        assert_eq!(count_trainable(Variant::Dora, 4096, 4096, 32), 266_240);
        assert_eq!(count_trainable(Variant::MagnitudeOnly, 8, 6, 1), 6);
        assert_eq!(count_trainable(Variant::Vera, 8, 6, 2), 10);
        assert_eq!(count_trainable(Variant::Dvora, 8, 6, 2), 16);
        assert_eq!(count_trainable(Variant::Ft, 8, 6, 2), 48);
        for (d, k, r) in [(3, 5, 1), (7, 2, 2), (16, 16, 4)] {
            assert_eq!(count_trainable(Variant::Dora, d, k, r) - count_trainable(Variant::Lora, d, k, r), k);
        }
    }

    #[test]
    fn trainable_inventory_matches_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for variant in Variant::ALL {
            let layer = init_adapter(&random(5, 4, &mut rng), &AdapterConfig::new(variant, 3)).unwrap();
            let scalars: usize = layer.trainable_params().values().map(Matrix::len).sum();
            assert_eq!(scalars, layer.count_trainable(), "{variant}");
        }
    }

    #[test]
    fn variant_parsing_lists_choices() {
        assert_eq!("dora-detached".parse::<Variant>().unwrap(), Variant::DoraDetached);
        assert_eq!("DVoRA".parse::<Variant>().unwrap(), Variant::Dvora);
        let err = "qdora".parse::<Variant>().unwrap_err().to_string();
        assert!(err.contains("magnitude_only") && err.contains("qdora"), "{err}");
    }

    #[test]
    fn with_params_checks_shapes() {
        let layer = init_adapter(&Matrix::filled(3, 3, 1.0), &AdapterConfig::new(Variant::Dora, 1)).unwrap();
        let mut params = layer.trainable_params();
        params.insert("B".into(), Matrix::zeros(2, 1));
        assert!(layer.with_params(&params).is_err());
        params.remove("B");
        assert_eq!(layer.with_params(&params).unwrap_err(), AdapterError::MissingParam("B".into()));
    }
}
