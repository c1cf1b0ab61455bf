use std::fs;
use std::path::Path;

use ccreid_core::config::RunConfig;
use ccreid_core::pipeline::{cmd_augment, cmd_eval, cmd_probe, cmd_train, EvalOptions, ProbeTarget};
use ccreid_core::train::{read_jsonl, LossRecord};

/// 8 identities, 2 outfits, 2 hairstyles, 2 images each, two short epochs.
fn small(extra: &[&str]) -> RunConfig {
    let mut o: Vec<String> = [
        "dataset.synthetic.num_identities=8",
        "dataset.synthetic.clothes_per_identity=2",
        "dataset.synthetic.hairstyles_per_identity=2",
        "dataset.synthetic.images_per_combination=2",
        "sampler.p=2",
        "sampler.k=4",
        "schedule.epochs=2",
        "schedule.steps_per_epoch=3",
        "eval.every=1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    o.extend(extra.iter().map(|s| s.to_string()));
    RunConfig::load(None, &o).unwrap()
}

fn losses(out: &Path) -> Vec<LossRecord> {
    read_jsonl(&out.join("logs/loss.jsonl")).unwrap()
}

#[test]
fn train_logs_one_record_per_step_and_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let summary = cmd_train(&small(&[]), dir.path(), false).unwrap();
    let log = losses(dir.path());
    assert_eq!(summary.steps, 6);
    assert_eq!(log.len(), 6);
    assert_eq!(
        log.iter().map(|r| r.step).collect::<Vec<_>>(),
        (1..=6).collect::<Vec<u64>>()
    );
    for f in [
        "checkpoints/last.safetensors",
        "checkpoints/best.safetensors",
        "logs/eval.jsonl",
        "config.toml",
    ] {
        assert!(dir.path().join(f).is_file(), "{f} missing");
    }
    assert!(log.iter().all(|r| r.losses.total.is_finite()));
    assert!((0.0..=1.0).contains(&summary.final_evaluation.cloth_changing.rank1));
}

#[test]
fn zero_auxiliary_weights_leave_identity_loss_alone() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["loss.lambda_att=0.0", "loss.lambda_cal=0.0", "loss.lambda_tri=0.0"]);
    cmd_train(&cfg, dir.path(), false).unwrap();
    for r in losses(dir.path()) {
        assert_eq!(r.losses.total, r.losses.id, "step {}", r.step);
    }
}

#[test]
fn resume_continues_the_interrupted_run_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let (whole, split) = (dir.path().join("whole"), dir.path().join("split"));
    cmd_train(&small(&["schedule.epochs=3"]), &whole, false).unwrap();
    cmd_train(&small(&["schedule.epochs=1"]), &split, false).unwrap();
    cmd_train(&small(&["schedule.epochs=3"]), &split, true).unwrap();
    assert_eq!(losses(&whole), losses(&split));
    assert_eq!(
        fs::read(whole.join("reports/train_cloth_changing.json")).unwrap(),
        fs::read(split.join("reports/train_cloth_changing.json")).unwrap()
    );
}

#[test]
fn eval_is_repeatable_and_dumps_attention_per_query() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["schedule.epochs=1"]);
    cmd_train(&cfg, &dir.path().join("run"), false).unwrap();
    let ck = dir.path().join("run/checkpoints/last.safetensors");
    let opts = EvalOptions {
        dump_attention: true,
        top_k_csv: true,
    };
    let a = cmd_eval(&cfg, &ck, &dir.path().join("a"), opts).unwrap();
    let b = cmd_eval(&cfg, &ck, &dir.path().join("b"), EvalOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        fs::read(dir.path().join("a/reports/cloth_changing.json")).unwrap(),
        fs::read(dir.path().join("b/reports/cloth_changing.json")).unwrap()
    );
    let pngs = fs::read_dir(dir.path().join("a/dumps/attention")).unwrap().count();
    assert_eq!(pngs, a.standard.num_queries);
    assert!(dir.path().join("a/dumps/top10_cloth_changing.csv").is_file());
}

#[test]
fn probe_targets_and_shuffled_control() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&["schedule.epochs=1"]);
    cmd_train(&cfg, &dir.path().join("run"), false).unwrap();
    let ck = dir.path().join("run/checkpoints/last.safetensors");
    let hair = cmd_probe(&cfg, &ck, dir.path(), ProbeTarget::Hairstyle, false).unwrap();
    assert!((0.0..=1.0).contains(&hair.accuracy));
    // Outfit colors survive even an untrained network; shuffling must destroy them.
    let clothes = cmd_probe(&cfg, &ck, dir.path(), ProbeTarget::Clothes, false).unwrap();
    let shuffled = cmd_probe(&cfg, &ck, dir.path(), ProbeTarget::Clothes, true).unwrap();
    assert!(shuffled.accuracy < clothes.accuracy, "{shuffled:?} vs {clothes:?}");
    assert!(dir.path().join("reports/probe_clothes_shuffled.json").is_file());
}

#[test]
fn augment_writes_originals_plus_three_styles_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(&[]);
    let a = cmd_augment(&cfg, &dir.path().join("a")).unwrap();
    cmd_augment(&cfg, &dir.path().join("b")).unwrap();
    let rows = |d: &str| fs::read_to_string(dir.path().join(d).join("dataset/manifest.jsonl")).unwrap();
    assert_eq!(rows("a").lines().count(), 4 * a.sources);
    assert_eq!(a.generated, 3 * a.sources);
    assert_eq!(rows("a"), rows("b"));
}
