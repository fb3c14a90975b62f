//! Training-loop integration checks that are cheap enough to run always.

use std::path::PathBuf;

use pointda::config::{Config, LossFlag};
use pointda::data::{generate_domain_pair, load_dataset, DomainPairSpec, Split};
use pointda::error::Error;
use pointda::training::{train, train_step, TrainOptions, TrainState};

fn tmp(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name)
}

fn small_pair(root: &PathBuf, n: usize) {
    std::fs::remove_dir_all(root).ok();
    generate_domain_pair(&DomainPairSpec::default(), n, n, root).unwrap();
}

#[test]
fn two_hundred_supervised_steps_reduce_source_error() {
    let root = tmp("smoke/pair");
    small_pair(&root, 20);
    let mut cfg = Config::default();
    cfg.data.root = root.clone();
    cfg.train.steps = 200;
    cfg.train.eval_interval = 200;
    cfg.train.lr_main = 1e-3;
    cfg.train.enabled_losses = vec![];

    let source = load_dataset(&root, Split::SourceTrain).unwrap();
    let out = tmp("smoke/run");
    std::fs::remove_dir_all(&out).ok();
    train(&cfg, &source, None, &out, &TrainOptions::default()).unwrap();

    let text = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let mae_at = |step: &str| -> f64 {
        text.lines()
            .find(|l| l.starts_with(&format!("pair,source-eval,{step},")))
            .unwrap()
            .split(',')
            .nth(4)
            .unwrap()
            .parse()
            .unwrap()
    };
    let initial = mae_at("0");
    let trained = mae_at("200");
    assert!(
        trained < initial,
        "source MAE should drop: {initial} -> {trained}"
    );
}

#[test]
fn zero_steps_is_a_validation_error() {
    let root = tmp("smoke_zero/pair");
    small_pair(&root, 2);
    let mut cfg = Config::default();
    cfg.data.root = root.clone();
    cfg.train.steps = 0;
    let source = load_dataset(&root, Split::SourceTrain).unwrap();
    let out = tmp("smoke_zero/run");
    match train(&cfg, &source, None, &out, &TrainOptions::default()) {
        Err(Error::InvalidConfig(problems)) => {
            assert!(problems.iter().any(|p| p.contains("steps")));
        }
        other => panic!("expected a validation error, got {other:?}"),
    }
}

#[test]
fn each_ablation_flag_zeroes_exactly_its_component() {
    let root = tmp("smoke_flags/pair");
    small_pair(&root, 4);
    let source = load_dataset(&root, Split::SourceTrain).unwrap().load_all().unwrap();
    let target = load_dataset(&root, Split::TargetAdapt).unwrap().load_all().unwrap();

    for flags in [
        vec![LossFlag::EntSrc],
        vec![LossFlag::EntTgt],
        vec![LossFlag::Adv],
    ] {
        let mut cfg = Config::default();
        cfg.data.root = root.clone();
        cfg.train.enabled_losses = flags.clone();
        let mut state = TrainState::new(&cfg, source.len(), target.len()).unwrap();
        for _ in 0..3 {
            let log = train_step(&mut state, &source[..2], &target[..2], &cfg).unwrap();
            let ent_src_on = flags.contains(&LossFlag::EntSrc);
            let ent_tgt_on = flags.contains(&LossFlag::EntTgt);
            let adv_on = flags.contains(&LossFlag::Adv);
            assert_eq!(log.l_ent_x > 0.0, ent_src_on, "L_ent_X for {flags:?}");
            assert_eq!(log.l_ent_y > 0.0, ent_tgt_on, "L_ent_Y for {flags:?}");
            assert_eq!(log.l_adv > 0.0, adv_on, "L_adv for {flags:?}");
        }
    }
}
