//! Magnitude/direction drift of fine-tuned weights relative to `W0`.
//!
//! For a weight `W_t` at step `t` and the pre-trained `W0` (both `d × k`):
//!
//! ```text
//! ΔM = (1/k) Σ_n | ‖W_t[:,n]‖ − ‖W0[:,n]‖ |
//! ΔD = (1/k) Σ_n ( 1 − cos(W_t[:,n], W0[:,n]) )
//! ```
//!
//! Each `(layer, step)` pair yields one record; records are pooled per method
//! and summarized by the Pearson correlation and least-squares slope of ΔM
//! on ΔD.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::tensor::{column_cosine, ls_slope, pearson, Matrix, RowVector, TensorError, DEFAULT_EPS};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint {method}@{step} has no layer {layer:?}")]
    MissingLayer { method: String, step: u64, layer: String },
    #[error("layer {layer:?} at step {step}: expected shape {expected:?}, found {found:?}")]
    ShapeDrift {
        layer: String,
        step: u64,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error("no layers match the analysis filter")]
    NoLayers,
    #[error("invalid layer pattern: {0}")]
    Pattern(#[from] regex::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
}

pub type Result<T> = std::result::Result<T, AnalysisError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub method: String,
    pub layer: String,
    pub step: u64,
    #[serde(rename = "delta_D")]
    pub delta_d: f64,
    #[serde(rename = "delta_M")]
    pub delta_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub pearson_r: f64,
    pub slope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupSummary {
    pub points: usize,
    /// Fails with a degenerate-variance error when all ΔD (or all ΔM) agree.
    pub stats: std::result::Result<Correlation, TensorError>,
}

impl GroupSummary {
    fn from_records<'a>(records: impl Iterator<Item = &'a DecompositionRecord>) -> Self {
        let (xs, ys): (Vec<f64>, Vec<f64>) = records.map(|r| (r.delta_d, r.delta_m)).unzip();
        let stats = pearson(&xs, &ys).and_then(|r| {
            Ok(Correlation {
                pearson_r: r,
                slope: ls_slope(&xs, &ys)?,
            })
        });
        Self {
            points: xs.len(),
            stats,
        }
    }

    pub fn warning(&self) -> Option<String> {
        self.stats.as_ref().err().map(|e| format!("correlation undefined: {e}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalysisSummary {
    pub records: Vec<DecompositionRecord>,
    /// Pooled over every record.
    pub overall: GroupSummary,
    pub methods: BTreeMap<String, GroupSummary>,
}

impl AnalysisSummary {
    pub fn from_records(records: Vec<DecompositionRecord>) -> Self {
        let mut methods = BTreeMap::new();
        for method in records.iter().map(|r| r.method.clone()) {
            methods.entry(method.clone()).or_insert_with(|| {
                GroupSummary::from_records(records.iter().filter(|r| r.method == method))
            });
        }
        Self {
            overall: GroupSummary::from_records(records.iter()),
            records,
            methods,
        }
    }

    /// Correlation for one method, surfacing the degenerate-variance error.
    pub fn correlation(&self, method: &str) -> std::result::Result<Correlation, TensorError> {
        match self.methods.get(method) {
            Some(g) => g.stats.clone(),
            None => Err(TensorError::TooFewPoints(0)),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AnalysisOptions {
    /// Only layers whose name matches are analyzed; `None` keeps all.
    pub pattern: Option<Regex>,
    pub eps: f64,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        Self {
            pattern: None,
            eps: DEFAULT_EPS,
        }
    }
}

impl AnalysisOptions {
    pub fn with_pattern(pattern: &str) -> Result<Self> {
        Ok(Self {
            pattern: Some(Regex::new(pattern)?),
            ..Self::default()
        })
    }
}

/// Splits `W` into `(‖W‖_c, W / ‖W‖_c)`; sub-eps columns give a zero direction.
pub fn decompose(w: &Matrix) -> (RowVector, Matrix) {
    (w.column_norms(), w.normalize_columns(DEFAULT_EPS))
}

fn check_shapes(wt: &Matrix, w0: &Matrix, op: &'static str) -> std::result::Result<(), TensorError> {
    if wt.shape() != w0.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: wt.shape(),
            right: w0.shape(),
        });
    }
    Ok(())
}

/// Mean absolute change of column norms.
pub fn delta_magnitude(wt: &Matrix, w0: &Matrix) -> std::result::Result<f64, TensorError> {
    check_shapes(wt, w0, "delta_magnitude")?;
    let (mt, m0) = (wt.column_norms(), w0.column_norms());
    let total: f64 = mt.data().iter().zip(m0.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(total / wt.cols() as f64)
}

/// Mean `1 − cos` between matching columns, with the default cosine guard.
pub fn delta_direction(wt: &Matrix, w0: &Matrix) -> std::result::Result<f64, TensorError> {
    delta_direction_eps(wt, w0, DEFAULT_EPS)
}

pub fn delta_direction_eps(wt: &Matrix, w0: &Matrix, eps: f64) -> std::result::Result<f64, TensorError> {
    check_shapes(wt, w0, "delta_direction")?;
    let total: f64 = (0..wt.cols())
        .map(|n| 1.0 - column_cosine(&wt.column(n), &w0.column(n), eps))
        .sum();
    Ok(total / wt.cols() as f64)
}

/// One record per (checkpoint, selected layer), comparing each checkpoint's
/// merged weights against `base`. Layers may be adapted or plain (as in a
/// merged checkpoint).
pub fn analyze_run(
    base: &BTreeMap<String, Matrix>,
    checkpoints: &[Checkpoint],
    options: &AnalysisOptions,
) -> Result<AnalysisSummary> {
    let selected: Vec<(&String, &Matrix)> = base
        .iter()
        .filter(|(name, _)| options.pattern.as_ref().is_none_or(|p| p.is_match(name)))
        .collect();
    if selected.is_empty() {
        return Err(AnalysisError::NoLayers);
    }
    let mut records = Vec::with_capacity(selected.len() * checkpoints.len());
    for ckpt in checkpoints {
        let merged = ckpt.all_weights()?;
        for (name, w0) in &selected {
            let wt = merged.get(*name).ok_or_else(|| AnalysisError::MissingLayer {
                method: ckpt.method_tag.clone(),
                step: ckpt.step,
                layer: (*name).clone(),
            })?;
            if wt.shape() != w0.shape() {
                return Err(AnalysisError::ShapeDrift {
                    layer: (*name).clone(),
                    step: ckpt.step,
                    expected: w0.shape(),
                    found: wt.shape(),
                });
            }
            records.push(DecompositionRecord {
                method: ckpt.method_tag.clone(),
                layer: (*name).clone(),
                step: ckpt.step,
                delta_d: delta_direction_eps(wt, w0, options.eps)?,
                delta_m: delta_magnitude(wt, w0)?,
            });
        }
    }
    Ok(AnalysisSummary::from_records(records))
}

const CSV_HEADER: [&str; 5] = ["method", "layer", "step", "delta_D", "delta_M"];

fn create(path: &Path) -> Result<File> {
    File::create(path).map_err(|source| AnalysisError::Io {
        path: path.into(),
        source,
    })
}

/// Writes `method,layer,step,delta_D,delta_M` rows with shortest round-trip
/// float formatting.
pub fn emit_analysis_csv(summary: &AnalysisSummary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let csv_err = |source| AnalysisError::Csv {
        path: path.into(),
        source,
    };
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in &summary.records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush().map_err(|source| AnalysisError::Io {
        path: path.into(),
        source,
    })
}

pub fn read_analysis_csv(path: impl AsRef<Path>) -> Result<Vec<DecompositionRecord>> {
    let path = path.as_ref();
    let csv_err = |source| AnalysisError::Csv {
        path: path.into(),
        source,
    };
    let mut reader = csv::Reader::from_path(path).map_err(csv_err)?;
    reader.deserialize().map(|r| r.map_err(csv_err)).collect()
}

fn group_json(g: &GroupSummary) -> serde_json::Value {
    let (r, slope) = match &g.stats {
        Ok(c) => (Some(c.pearson_r), Some(c.slope)),
        Err(_) => (None, None),
    };
    serde_json::json!({
        "pearson_r": r,
        "slope": slope,
        "points": g.points,
        "warning": g.warning(),
    })
}

pub fn scatter_json(summary: &AnalysisSummary) -> serde_json::Value {
    let methods: serde_json::Map<String, serde_json::Value> =
        summary.methods.iter().map(|(m, g)| (m.clone(), group_json(g))).collect();
    serde_json::json!({
        "records": summary.records,
        "summary": group_json(&summary.overall),
        "methods": methods,
    })
}

/// Plot-ready records plus `summary`/`methods` blocks of `{pearson_r, slope}`
/// (null when undefined).
pub fn emit_scatter_json(summary: &AnalysisSummary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = BufWriter::new(create(path)?);
    let text = serde_json::to_string_pretty(&scatter_json(summary)).expect("summary serializes");
    w.write_all(text.as_bytes())
        .and_then(|_| w.write_all(b"\n"))
        .and_then(|_| w.flush())
        .map_err(|source| AnalysisError::Io {
            path: path.into(),
            source,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_adapter, AdapterConfig, Variant};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    fn ft_checkpoint(name: &str, w0: &Matrix, wt: &Matrix, step: u64) -> Checkpoint {
        let mut layer = init_adapter(w0, &AdapterConfig::new(Variant::Ft, 1)).unwrap();
        layer.full = Some(wt.clone());
        let mut c = Checkpoint::new("ft", step, 0, serde_json::Value::Null);
        c.push_adapter(name, &layer);
        c
    }

    #[test]
    fn decompose_cases() {
        let w = Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 3.0]]);
        let (m, v) = decompose(&w);
        assert_eq!(m.data(), &[2.0, 3.0]);
        assert_eq!(v, Matrix::identity(2));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(8, 5, &mut rng);
        let (m, v) = decompose(&w);
        assert!(v.scale_columns(&m).unwrap().max_abs_diff(&w).unwrap() < 1e-12);

        let z = Matrix::from_rows(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let (m, v) = decompose(&z);
        assert_eq!(m.get(1), 0.0);
        assert_eq!(v.column(1), vec![0.0, 0.0]);
    }

    #[test]
    fn delta_magnitude_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w0 = random(4, 3, &mut rng);
        assert_eq!(delta_magnitude(&w0, &w0).unwrap(), 0.0);
        let mean_norm = w0.column_norms().data().iter().sum::<f64>() / 3.0;
        assert!((delta_magnitude(&w0.scale(2.0), &w0).unwrap() - mean_norm).abs() < 1e-15);

        let wt = random(4, 3, &mut rng);
        let mut oracle = 0.0;
        for n in 0..3 {
            let a: f64 = (0..4).map(|i| wt.get(i, n).powi(2)).sum::<f64>().sqrt();
            let b: f64 = (0..4).map(|i| w0.get(i, n).powi(2)).sum::<f64>().sqrt();
            oracle += (a - b).abs();
        }
        assert!((delta_magnitude(&wt, &w0).unwrap() - oracle / 3.0).abs() < 1e-14);
        assert!(delta_magnitude(&wt, &random(3, 3, &mut rng)).is_err());
    }

    #[test]
    fn delta_direction_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w0 = random(4, 3, &mut rng);
        assert!(delta_direction(&w0, &w0).unwrap().abs() < 1e-15);
        assert!((delta_direction(&w0.scale(-1.0), &w0).unwrap() - 2.0).abs() < 1e-15);
        // 90° rotation in every column: (x, y) -> (-y, x)
        let w0 = Matrix::from_rows(&[&[1.0, 2.0, -0.5], &[3.0, -1.0, 0.25]]);
        let rot = Matrix::from_fn(2, 3, |r, c| if r == 0 { -w0.get(1, c) } else { w0.get(0, c) });
        assert!((delta_direction(&rot, &w0).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn identical_checkpoints_surface_degenerate_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w0 = random(4, 3, &mut rng);
        let base = BTreeMap::from([("q".to_string(), w0.clone())]);
        let ckpts: Vec<_> = (1..=3).map(|s| ft_checkpoint("q", &w0, &w0, s)).collect();
        let summary = analyze_run(&base, &ckpts, &AnalysisOptions::default()).unwrap();
        assert!(summary.records.iter().all(|r| r.delta_d.abs() < 1e-15 && r.delta_m == 0.0));
        assert!(matches!(summary.correlation("ft"), Err(TensorError::DegenerateVariance { .. })));
        assert!(summary.methods["ft"].warning().is_some());
        assert!(scatter_json(&summary)["summary"]["pearson_r"].is_null());
    }

    #[test]
    fn pure_scaling_run() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w0 = random(5, 4, &mut rng);
        let base = BTreeMap::from([("q".to_string(), w0.clone())]);
        let ckpts: Vec<_> = (1..=4)
            .map(|s| ft_checkpoint("q", &w0, &w0.scale(1.1f64.powi(s)), s as u64))
            .collect();
        let summary = analyze_run(&base, &ckpts, &AnalysisOptions::default()).unwrap();
        for pair in summary.records.windows(2) {
            assert!(pair[1].delta_m > pair[0].delta_m);
        }
        assert!(summary.records.iter().all(|r| r.delta_d < 1e-14));
    }

    #[test]
    fn missing_layer_and_shape_drift() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w0 = random(3, 3, &mut rng);
        let base = BTreeMap::from([("q".to_string(), w0.clone())]);
        let other = ft_checkpoint("v", &w0, &w0, 1);
        assert!(matches!(
            analyze_run(&base, &[other], &AnalysisOptions::default()),
            Err(AnalysisError::MissingLayer { .. })
        ));
        let bigger = random(4, 3, &mut rng);
        let drift = ft_checkpoint("q", &bigger, &bigger, 2);
        assert!(matches!(
            analyze_run(&base, &[drift], &AnalysisOptions::default()),
            Err(AnalysisError::ShapeDrift { .. })
        ));
        let opts = AnalysisOptions::with_pattern("^v$").unwrap();
        assert!(matches!(analyze_run(&base, &[], &opts), Err(AnalysisError::NoLayers)));
    }

    #[test]
    fn empty_csv_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.csv");
        emit_analysis_csv(&AnalysisSummary::from_records(vec![]), &path).unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "method,layer,step,delta_D,delta_M\n");
        assert!(read_analysis_csv(&path).unwrap().is_empty());
    }

    #[test]
    fn csv_and_json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let records: Vec<_> = (0..12)
            .map(|i| DecompositionRecord {
                method: if i % 2 == 0 { "lora" } else { "dora" }.into(),
                layer: format!("layer,{}", i % 3),
                step: i,
                delta_d: rng.random_range(0.0..0.01),
                delta_m: rng.random_range(0.0..0.5),
            })
            .collect();
        let summary = AnalysisSummary::from_records(records);
        let dir = tempfile::tempdir().unwrap();
        let csv_path = dir.path().join("a.csv");
        let json_path = dir.path().join("a.json");
        emit_analysis_csv(&summary, &csv_path).unwrap();
        emit_scatter_json(&summary, &json_path).unwrap();
        let back = read_analysis_csv(&csv_path).unwrap();
        assert_eq!(back, summary.records);

        let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json_path).unwrap()).unwrap();
        let (xs, ys): (Vec<f64>, Vec<f64>) = back.iter().map(|r| (r.delta_d, r.delta_m)).unzip();
        let r = json["summary"]["pearson_r"].as_f64().unwrap();
        assert!((r - pearson(&xs, &ys).unwrap()).abs() < 1e-12);
        let slope = json["summary"]["slope"].as_f64().unwrap();
        assert!((slope - ls_slope(&xs, &ys).unwrap()).abs() < 1e-12);
        assert_eq!(json["methods"]["lora"]["points"], 6);
    }

    #[test]
    fn unwritable_path_reports_path() {
        let err = emit_analysis_csv(&AnalysisSummary::from_records(vec![]), "/nonexistent-dir/x.csv").unwrap_err();
        assert!(err.to_string().contains("/nonexistent-dir/x.csv"));
    }

    proptest! {
        #[test]
        fn delta_d_is_symmetric_and_scale_invariant(
            a in prop::collection::vec(-3.0f64..3.0, 12),
            b in prop::collection::vec(-3.0f64..3.0, 12),
            s in prop::collection::vec(0.1f64..10.0, 3),
        ) {
            let w0 = Matrix::from_vec(4, 3, a).unwrap();
            let wt = Matrix::from_vec(4, 3, b).unwrap();
            prop_assume!(w0.column_norms().data().iter().chain(wt.column_norms().data()).all(|n| *n > 1e-3));
            let fwd = delta_direction(&wt, &w0).unwrap();
            prop_assert!((fwd - delta_direction(&w0, &wt).unwrap()).abs() < 1e-15);
            let scaled = wt.scale_columns(&RowVector::new(s)).unwrap();
            prop_assert!((fwd - delta_direction(&scaled, &w0).unwrap()).abs() < 1e-12);
            prop_assert!((0.0..=2.0).contains(&fwd));
        }

        #[test]
        fn delta_m_ignores_norm_preserving_rotation(
            a in prop::collection::vec(-3.0f64..3.0, 6),
            theta in prop::collection::vec(0.0f64..std::f64::consts::TAU, 3),
        ) {
            let w0 = Matrix::from_vec(2, 3, a).unwrap();
            let rot = Matrix::from_fn(2, 3, |r, c| {
                let (s, co) = theta[c].sin_cos();
                let (x, y) = (w0.get(0, c), w0.get(1, c));
                if r == 0 { co * x - s * y } else { s * x + co * y }
            });
            prop_assert!(delta_magnitude(&rot, &w0).unwrap() < 1e-12);
        }
    }
}
