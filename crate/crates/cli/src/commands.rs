use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use dora_core::adapters::{
    closed_form_grads, detach_delta, equal_norm_pair, grad_m_identity_check, init_adapter, scenario_ordering_check,
    triple_check, weight_gradient, AdapterConfig, AdapterLayer, LossTarget, Variant,
};
use dora_core::analysis::{analyze_run, emit_analysis_csv, emit_scatter_json, AnalysisOptions};
use dora_core::checkpoint::Checkpoint;
use dora_core::tensor::Matrix;
use dora_core::trainer::{train, write_loss_csv};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::CliError;

pub const OUT_DIR_ENV: &str = "DORA_OUT_DIR";
pub const MANIFEST: &str = "manifest.json";
pub const LOSS_CSV: &str = "loss.csv";
/// Largest accepted deviation between merged and factored forward passes.
pub const MERGE_TOL: f64 = 1e-12;
pub const MERGE_PROBES: usize = 32;
pub const GRAD_ABS_TOL: f64 = 1e-10;
pub const GRAD_REL_TOL: f64 = 1e-6;
pub const IDENTITY_TOL: f64 = 1e-12;
pub const ORDERING_TRIALS: usize = 200;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write_new(path: &Path, text: &str) -> Result<(), CliError> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| io_err(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| io_err(path, e))
}

/// `--out`, then `$DORA_OUT_DIR`, then the config's `output_dir`.
fn output_dir(flag: Option<PathBuf>, cfg: &RunConfig) -> Result<PathBuf, CliError> {
    flag.or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| CliError::Config(format!("no output directory: pass --out, set {OUT_DIR_ENV}, or set output_dir")))
}

pub fn cmd_train(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    let dir = output_dir(out, &cfg)?;
    let steps = cfg.train.checkpoint_schedule();
    let mut files: Vec<String> = std::iter::once(0).chain(steps.iter().copied()).map(Checkpoint::file_name).collect();
    files.extend([LOSS_CSV.to_string(), MANIFEST.to_string()]);
    if let Some(existing) = files.iter().map(|f| dir.join(f)).find(|p| p.exists()) {
        return Err(CliError::Io(format!("{}: already exists; refusing to overwrite", existing.display())));
    }

    let tc = &cfg.train;
    let model = tc.initial_model()?;
    let per_layer: BTreeMap<String, serde_json::Value> = model
        .layers
        .iter()
        .map(|(n, l)| (n.clone(), serde_json::json!({"variant": l.variant(), "trainable": l.count_trainable()})))
        .collect();
    let summary = per_layer
        .iter()
        .map(|(n, v)| format!("{n} {} {}", v["variant"].as_str().unwrap_or("?"), v["trainable"]))
        .collect::<Vec<_>>()
        .join(", ");
    println!(
        "train {}: seed {}, trainable parameters {} ({summary})",
        tc.method_tag(),
        tc.seed,
        model.count_trainable()
    );

    let run = train(tc)?;
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    run.base.save(dir.join(Checkpoint::file_name(0)))?;
    for ckpt in &run.checkpoints {
        ckpt.save(dir.join(Checkpoint::file_name(ckpt.step)))?;
    }
    write_loss_csv(&run.curve, dir.join(LOSS_CSV))?;

    let config_json = serde_json::to_string(tc).expect("config serializes");
    let manifest = serde_json::json!({
        "method_tag": tc.method_tag(),
        "seed": tc.seed,
        "config_sha256": hex::encode(Sha256::digest(config_json.as_bytes())),
        "trainable_parameters": run.trainable,
        "layers": per_layer,
        "plain_trainable": run.model.train_plain,
        "steps": tc.steps,
        "initial_loss": run.initial_loss,
        "final_loss": run.final_loss,
        "base_checkpoint": Checkpoint::file_name(0),
        "checkpoints": run.checkpoints.iter().map(|c| Checkpoint::file_name(c.step)).collect::<Vec<_>>(),
        "loss_csv": LOSS_CSV,
        "config": tc,
    });
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_new(&dir.join(MANIFEST), &text)?;
    println!(
        "loss {:.6e} -> {:.6e}; {} checkpoints in {}",
        run.initial_loss,
        run.final_loss,
        run.checkpoints.len(),
        dir.display()
    );
    Ok(())
}

pub fn cmd_analyze(
    w0: &Path,
    checkpoints: &[PathBuf],
    out: &Path,
    pattern: Option<String>,
    config: Option<&Path>,
) -> Result<(), CliError> {
    let pattern = match (pattern, config) {
        (Some(p), _) => Some(p),
        (None, Some(path)) => RunConfig::load(path)?.pattern,
        (None, None) => None,
    };
    let options = match &pattern {
        Some(p) => AnalysisOptions::with_pattern(p)?,
        None => AnalysisOptions::default(),
    };
    let base = Checkpoint::load(w0)?.base_weights();
    if base.is_empty() {
        return Err(CliError::Check(format!("{}: no adapted layers to take W0 from", w0.display())));
    }
    let loaded = checkpoints.iter().map(Checkpoint::load).collect::<Result<Vec<_>, _>>()?;
    let summary = analyze_run(&base, &loaded, &options)?;

    let prefix = out.as_os_str().to_string_lossy();
    let csv_path = PathBuf::from(format!("{prefix}.csv"));
    let json_path = PathBuf::from(format!("{prefix}.json"));
    emit_analysis_csv(&summary, &csv_path)?;
    emit_scatter_json(&summary, &json_path)?;

    println!("{} records from {} checkpoints", summary.records.len(), loaded.len());
    for (method, group) in &summary.methods {
        match &group.stats {
            Ok(c) => println!(
                "{method}: {} points, pearson_r {:.6}, slope {:.6}",
                group.points, c.pearson_r, c.slope
            ),
            Err(_) => eprintln!(
                "warning: {method}: {} points, {}",
                group.points,
                group.warning().unwrap_or_default()
            ),
        }
    }
    println!("wrote {} and {}", csv_path.display(), json_path.display());
    Ok(())
}

/// Largest `|layer.forward(x) − merged · x|` over `probes` random inputs.
pub fn merge_deviation(layer: &AdapterLayer, merged: &Matrix, probes: usize, rng: &mut impl Rng) -> Result<f64, CliError> {
    let x = Matrix::from_fn(layer.in_dim(), probes, |_, _| rng.random_range(-1.0..1.0));
    let factored = layer.forward(&x).map_err(|e| CliError::Check(e.to_string()))?;
    let dense = merged.matmul(&x).map_err(|e| CliError::Check(e.to_string()))?;
    factored.max_abs_diff(&dense).map_err(|e| CliError::Check(e.to_string()))
}

pub fn cmd_merge(checkpoint: &Path, out: &Path, seed: u64) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut merged = Checkpoint::new(ckpt.method_tag.clone(), ckpt.step, ckpt.seed, ckpt.config.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for (name, layer) in ckpt.adapter_layers()? {
        let dense = layer.merge().map_err(|e| CliError::Check(format!("{name}: {e}")))?;
        let dev = merge_deviation(&layer, &dense, MERGE_PROBES, &mut rng)?;
        println!("{name}: max forward deviation {dev:.3e} over {MERGE_PROBES} probes");
        worst = worst.max(dev);
        merged.push_plain(&name, &dense);
    }
    for (name, value) in ckpt.plain_tensors() {
        merged.push_plain(&name, &value);
    }
    println!("max forward deviation {worst:.3e}");
    if !(worst < MERGE_TOL) {
        return Err(CliError::Check(format!("merge deviation {worst:e} is not below {MERGE_TOL:e}")));
    }
    merged.save(out)?;
    println!("wrote {}", out.display());
    Ok(())
}

struct Outcome {
    failures: usize,
}

impl Outcome {
    fn record(&mut self, ok: bool, line: String) {
        println!("{} {line}", if ok { "PASS" } else { "FAIL" });
        if !ok {
            self.failures += 1;
        }
    }
}

pub fn cmd_gradcheck(variant: Variant, dims: (usize, usize, usize), seed: u64) -> Result<(), CliError> {
    let (d, k, r) = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w0 = Matrix::from_fn(d, k, |_, _| rng.random_range(-1.0..1.0));
    let mut layer = init_adapter(&w0, &AdapterConfig::new(variant, r).with_seed(seed))
        .map_err(|e| CliError::Config(e.to_string()))?;
    for (_, data) in layer.trainable_slices_mut() {
        data.iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
    }
    let x = Matrix::from_fn(k, 6, |_, _| rng.random_range(-1.0..1.0));
    let target = LossTarget::Regression(Matrix::from_fn(d, 6, |_, _| rng.random_range(-1.0..1.0)));
    let check = |e: dora_core::adapters::AdapterError| CliError::Check(e.to_string());

    println!("gradcheck {variant} d={d} k={k} r={r} seed={seed}");
    let mut outcome = Outcome { failures: 0 };
    let report = triple_check(&layer, &x, &target, GRAD_REL_TOL).map_err(check)?;
    print!("{report}");
    outcome.record(
        report.passed(GRAD_ABS_TOL),
        format!(
            "triple oracle (autodiff/closed form < {GRAD_ABS_TOL:e}, finite differences rel < {GRAD_REL_TOL:e})"
        ),
    );

    if variant.is_decomposed() {
        let vprime = layer.directional().map_err(check)?;
        let upstream = weight_gradient(&layer.effective_weight().map_err(check)?, &x, &target).map_err(check)?;
        let mut worst: f64 = 0.0;
        for j in 0..k {
            let (lhs, rhs) = grad_m_identity_check(&vprime.column(j), &upstream.column(j)).map_err(check)?;
            worst = worst.max((lhs - rhs).abs());
        }
        outcome.record(
            worst < IDENTITY_TOL,
            format!("magnitude-gradient identity over {k} columns: max error {worst:.3e}"),
        );

        if d >= 2 {
            let mut violations = 0;
            for t in 0..ORDERING_TRIALS {
                let v = vprime.column(t % k);
                let c1 = rng.random_range(0.05..1.0);
                let c2 = c1 * rng.random_range(0.0..0.95) * if rng.random::<bool>() { 1.0 } else { -1.0 };
                let scale = rng.random_range(0.1..10.0);
                let (g1, g2) = equal_norm_pair(&v, c1, c2, scale, &mut rng).map_err(check)?;
                if !scenario_ordering_check(&v, &g1, &g2).map_err(check)? {
                    violations += 1;
                }
            }
            outcome.record(
                violations == 0,
                format!("magnitude-gradient ordering: {violations} violations in {ORDERING_TRIALS} equal-norm pairs"),
            );
        } else {
            println!("SKIP magnitude-gradient ordering needs d >= 2");
        }

        if variant == Variant::DoraDetached {
            let mut full = layer.clone();
            full.config.variant = Variant::Dora;
            let g_full = closed_form_grads(&full, &upstream).map_err(check)?;
            let g_det = closed_form_grads(&layer, &upstream).map_err(check)?;
            let delta = detach_delta(&layer, &upstream).map_err(check)?;
            let observed = g_full.vprime.sub(&g_det.vprime).map_err(|e| CliError::Check(e.to_string()))?;
            let err = observed.max_abs_diff(&delta).map_err(|e| CliError::Check(e.to_string()))?;
            let m_err = g_full.magnitude.max_abs_diff(&g_det.magnitude);
            let norm = delta.frobenius_norm();
            println!("projection delta norm {norm:.6e}");
            outcome.record(
                err < GRAD_ABS_TOL && m_err < IDENTITY_TOL && norm > 0.0,
                format!("detach delta law: max error {err:.3e}, magnitude gradient difference {m_err:.3e}"),
            );
        }
    }
    if outcome.failures > 0 {
        return Err(CliError::Check(format!("{} gradient check(s) failed", outcome.failures)));
    }
    Ok(())
}
