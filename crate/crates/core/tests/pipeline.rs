use dora_core::adapters::{AdapterConfig, Variant};
use dora_core::analysis::{analyze_run, emit_analysis_csv, read_analysis_csv, AnalysisOptions};
use dora_core::checkpoint::Checkpoint;
use dora_core::trainer::{train, TaskKind, TrainConfig};

fn config(task: TaskKind, variant: Variant, steps: u64) -> TrainConfig {
    let mut cfg = TrainConfig::new(task, AdapterConfig::new(variant, 2));
    cfg.steps = steps;
    cfg.seed = 3;
    cfg
}

#[test]
fn saved_checkpoints_analyze_like_in_memory_ones() {
    let out = train(&config(TaskKind::TeacherRegression, Variant::Dora, 60)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let loaded: Vec<Checkpoint> = out
        .checkpoints
        .iter()
        .map(|c| {
            let path = dir.path().join(Checkpoint::file_name(c.step));
            c.save(&path).unwrap();
            Checkpoint::load(&path).unwrap()
        })
        .collect();
    let base = out.base.all_weights().unwrap();
    let options = AnalysisOptions::default();
    let direct = analyze_run(&base, &out.checkpoints, &options).unwrap();
    let reloaded = analyze_run(&base, &loaded, &options).unwrap();
    assert_eq!(direct.records, reloaded.records);

    let csv = dir.path().join("drift.csv");
    emit_analysis_csv(&direct, &csv).unwrap();
    assert_eq!(read_analysis_csv(&csv).unwrap(), direct.records);
}

#[test]
fn merged_checkpoint_has_the_same_drift() {
    let out = train(&config(TaskKind::AttentionCopy, Variant::Dora, 40)).unwrap();
    let last = out.checkpoints.last().unwrap();
    let mut merged = Checkpoint::new(last.method_tag.clone(), last.step, last.seed, last.config.clone());
    for (name, layer) in last.adapter_layers().unwrap() {
        merged.push_plain(&name, &layer.merge().unwrap());
    }
    for (name, value) in last.plain_tensors() {
        merged.push_plain(&name, &value);
    }
    let base = out.base.all_weights().unwrap();
    let options = AnalysisOptions::with_pattern("^(q|v)$").unwrap();
    let a = analyze_run(&base, std::slice::from_ref(last), &options).unwrap();
    let b = analyze_run(&base, &[merged], &options).unwrap();
    assert_eq!(a.records.len(), 2);
    for (x, y) in a.records.iter().zip(&b.records) {
        assert!((x.delta_d - y.delta_d).abs() < 1e-12);
        assert!((x.delta_m - y.delta_m).abs() < 1e-12);
    }
}

#[test]
fn full_and_low_rank_methods_beat_their_start() {
    for variant in [Variant::Ft, Variant::Lora, Variant::Dora, Variant::Vera] {
        let out = train(&config(TaskKind::TeacherRegression, variant, 200)).unwrap();
        assert!(out.final_loss < out.initial_loss, "{variant}: {} vs {}", out.final_loss, out.initial_loss);
    }
}

#[test]
fn classification_loss_drops() {
    let out = train(&config(TaskKind::BlobClassification, Variant::Dora, 200)).unwrap();
    assert!(out.final_loss < 0.5 * out.initial_loss, "{} vs {}", out.final_loss, out.initial_loss);
}

#[test]
fn untouched_methods_have_zero_drift_at_step_zero() {
    for variant in [Variant::Lora, Variant::Dvora, Variant::MagnitudeOnly] {
        let out = train(&config(TaskKind::TeacherRegression, variant, 4)).unwrap();
        let base = out.base.all_weights().unwrap();
        let summary = analyze_run(&base, std::slice::from_ref(&out.base), &AnalysisOptions::default()).unwrap();
        for rec in &summary.records {
            assert_eq!(rec.delta_m, 0.0, "{variant} {}", rec.layer);
            assert!(rec.delta_d.abs() < 1e-15, "{variant} {}", rec.layer);
        }
    }
}
