use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use distillmatch::model::DistillMatch;
use distillmatch::trainer::{
    clip_grad_norm, distill_report, modality_correct, train, train_step, training_pair, write_run, AdamW, AdamWConfig, StepLog, TrainConfig,
    DESK_LR,
};
use distillmatch::Error;
use distillmatch_tensor::{ParamId, ParamStore, Tensor};

fn scalar_store(v: f64) -> (ParamStore, ParamId) {
    let mut s = ParamStore::new();
    let id = s.add("p", Tensor::new(&[1], vec![v]).unwrap(), true);
    (s, id)
}

fn f32r(v: f64) -> f64 {
    v as f32 as f64
}

#[test]
fn adamw_zero_gradient_without_decay_is_a_no_op() {
    let (mut s, id) = scalar_store(0.75);
    let mut opt = AdamW::new(AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    });
    for _ in 0..3 {
        opt.step(&mut s, &[(id, Tensor::new(&[1], vec![0.0]).unwrap())]).unwrap();
    }
    assert_eq!(s.value(id).data(), &[0.75]);
}

#[test]
fn adamw_first_two_steps_match_closed_form() {
    let cfg = AdamWConfig {
        lr: 0.01,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.01,
    };
    let (mut s, id) = scalar_store(0.5);
    let mut opt = AdamW::new(cfg);
    let g = 0.2;
    opt.step(&mut s, &[(id, Tensor::new(&[1], vec![g]).unwrap())]).unwrap();
    // bias correction makes the first moment ratio g / |g|
    let p1 = f32r(0.5 * (1.0 - 0.01 * 0.01) - 0.01 * g / (g + 1e-8));
    assert_eq!(s.value(id).data()[0], p1);

    let g2 = -0.1;
    opt.step(&mut s, &[(id, Tensor::new(&[1], vec![g2]).unwrap())]).unwrap();
    let m = 0.9 * 0.1 * g + 0.1 * g2;
    let v = 0.999 * 0.001 * g * g + 0.001 * g2 * g2;
    let (mh, vh) = (m / (1.0 - 0.81), v / (1.0 - 0.999f64.powi(2)));
    let p2 = f32r(p1 * (1.0 - 0.01 * 0.01) - 0.01 * mh / (vh.sqrt() + 1e-8));
    assert_eq!(s.value(id).data()[0], p2);
}

#[test]
fn adamw_decay_alone_shrinks_parameters() {
    let (mut s, id) = scalar_store(2.0);
    let mut opt = AdamW::new(AdamWConfig {
        lr: 0.1,
        weight_decay: 0.5,
        ..Default::default()
    });
    opt.step(&mut s, &[(id, Tensor::new(&[1], vec![0.0]).unwrap())]).unwrap();
    assert_eq!(s.value(id).data()[0], f32r(2.0 * (1.0 - 0.1 * 0.5)));
}

#[test]
fn adamw_rejects_non_finite_gradients() {
    let (mut s, id) = scalar_store(1.0);
    let mut opt = AdamW::new(AdamWConfig::default());
    let r = opt.step(&mut s, &[(id, Tensor::new(&[1], vec![f64::NAN]).unwrap())]);
    assert!(matches!(r, Err(Error::NonFinite(_))));
}

#[test]
fn gradient_clipping() {
    let (_, id) = scalar_store(0.0);
    let mut g = vec![(id, Tensor::new(&[2], vec![3.0, 4.0]).unwrap())];
    assert_eq!(clip_grad_norm(&mut g, 10.0), 5.0);
    assert_eq!(g[0].1.data(), &[3.0, 4.0]);
    assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
    assert!((g[0].1.data()[0] - 0.6).abs() < 1e-15 && (g[0].1.data()[1] - 0.8).abs() < 1e-15);
    let mut z = vec![(id, Tensor::zeros(&[2]))];
    assert_eq!(clip_grad_norm(&mut z, 1.0), 0.0);
}

#[test]
fn desk_preset_is_valid() {
    let cfg = TrainConfig::desk(10, 1);
    cfg.validate().unwrap();
    assert_eq!(cfg.optimizer.lr, DESK_LR);
    assert_eq!(AdamWConfig::default().lr, 6e-3);
    let mut bad = cfg.clone();
    bad.optimizer.lr = 0.0;
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
    let mut bad = cfg.clone();
    bad.data.width = 60;
    assert!(bad.validate().is_err());
    let mut bad = cfg;
    bad.data.textures.clear();
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn zero_steps_leave_the_initialisation() {
    let cfg = TrainConfig::desk(0, 3);
    let (model, logs) = train(&cfg, |_| {}).unwrap();
    assert!(logs.is_empty());
    let fresh = DistillMatch::new(cfg.model.clone(), cfg.seed).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    model.save(&tmp.path().join("a")).unwrap();
    fresh.save(&tmp.path().join("b")).unwrap();
    assert_eq!(dir_bytes(&tmp.path().join("a")), dir_bytes(&tmp.path().join("b")));
}

#[test]
fn runs_are_bitwise_reproducible_and_logged() {
    let cfg = TrainConfig::desk(3, 4);
    let tmp = tempfile::tempdir().unwrap();
    let mut seen = Vec::new();
    let (m1, l1) = train(&cfg, |l| seen.push(l.step)).unwrap();
    let (m2, l2) = train(&cfg, |_| {}).unwrap();
    assert_eq!(seen, vec![0, 1, 2]);
    assert_eq!(l1, l2);
    write_run(&tmp.path().join("r1"), &cfg, &m1, &l1).unwrap();
    write_run(&tmp.path().join("r2"), &cfg, &m2, &l2).unwrap();
    let (c1, c2) = (tmp.path().join("r1/checkpoint"), tmp.path().join("r2/checkpoint"));
    assert_eq!(dir_bytes(&c1), dir_bytes(&c2));

    // the producer thread feeds the same pairs a plain loop would
    let mut model = DistillMatch::new(cfg.model.clone(), cfg.seed).unwrap();
    let mut opt = AdamW::new(cfg.optimizer);
    for i in 0..3 {
        let log = train_step(&mut model, &mut opt, &cfg, i, &training_pair(&cfg, i).unwrap()).unwrap();
        assert_eq!(log, l1[i]);
    }

    let text = fs::read_to_string(tmp.path().join("r1/metrics.jsonl")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    let keys: BTreeSet<String> = serde_json::from_str::<serde_json::Map<String, serde_json::Value>>(lines[0])
        .unwrap()
        .keys()
        .cloned()
        .collect();
    let want: BTreeSet<String> = [
        "step", "total", "kd", "ce", "coarse", "fine", "sub", "modality_correct", "gt_coarse", "grad_norm", "pair_seed",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    assert_eq!(keys, want);
    let parsed: Vec<StepLog> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, l1);
    let stored: TrainConfig = serde_json::from_str(&fs::read_to_string(tmp.path().join("r1/config.json")).unwrap()).unwrap();
    assert_eq!(stored, cfg);

    let loaded = DistillMatch::load(&c1).unwrap();
    for e in m1.store.entries() {
        assert_eq!(loaded.store.value(loaded.store.id(&e.name).unwrap()), &e.value, "{}", e.name);
    }
}

#[test]
fn non_finite_loss_halts_with_the_pair_seed() {
    let mut cfg = TrainConfig::desk(1, 5);
    cfg.checked = false;
    let mut model = DistillMatch::new(cfg.model.clone(), cfg.seed).unwrap();
    let id = model.store.id("cefg.token").unwrap();
    model.store.value_mut(id).data_mut()[0] = f64::NAN;
    let mut opt = AdamW::new(cfg.optimizer);
    let pair = training_pair(&cfg, 0).unwrap();
    match train_step(&mut model, &mut opt, &cfg, 0, &pair) {
        Err(Error::NonFinite(msg)) => assert!(msg.contains(&pair.gt.seed.to_string()), "{msg}"),
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn checked_steps_keep_the_teacher_frozen() {
    let cfg = TrainConfig::desk(2, 6);
    assert!(cfg.checked);
    let mut model = DistillMatch::new(cfg.model.clone(), cfg.seed).unwrap();
    let before = model.clone();
    let mut opt = AdamW::new(cfg.optimizer);
    for i in 0..2 {
        train_step(&mut model, &mut opt, &cfg, i, &training_pair(&cfg, i).unwrap()).unwrap();
    }
    let mut moved = 0;
    for e in before.store.entries() {
        let now = model.store.value(model.store.id(&e.name).unwrap());
        if e.trainable {
            moved += usize::from(now != &e.value);
        } else {
            assert_eq!(now, &e.value, "{}", e.name);
        }
    }
    assert!(moved > 0);
    let r = distill_report(&model, 9, 64, 64, true).unwrap();
    assert!(r.mse.abs() < 1e-12 && r.gram.abs() < 1e-12 && r.kl.abs() < 1e-9);
}

#[test]
fn modality_decision() {
    assert!(modality_correct(&Tensor::new(&[2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap()));
    assert!(!modality_correct(&Tensor::new(&[2, 2], vec![1.0, 0.0, 1.0, 0.0]).unwrap()));
    assert!(!modality_correct(&Tensor::new(&[2, 2], vec![0.0, 0.0, 0.0, 0.0]).unwrap()));
}
