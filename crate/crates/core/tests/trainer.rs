use undersea::data::Dataset;
use undersea::model::{self, ForwardOptions};
use undersea::trainer::{self, adamw_step, AdamW, Checkpoint, OptimState, TrainConfig, Trainer, CHECKPOINT_VERSION};
use undersea::{metrics, physics, CheckpointError, Error, ModelParams, Tensor};

fn hyper(lr: f64, wd: f64) -> AdamW {
    AdamW { lr, beta1: 0.9, beta2: 0.999, weight_decay: wd, eps: 1e-8 }
}

fn scalar_params(theta: f64) -> ModelParams<f64> {
    let mut p = ModelParams::new();
    p.insert("theta", Tensor::new([1], vec![theta]).unwrap()).unwrap();
    p
}

fn theta(p: &ModelParams<f64>) -> f64 {
    p.get("theta").unwrap().data()[0]
}

fn step(p: &mut ModelParams<f64>, s: &mut OptimState<f64>, g: f64, h: &AdamW) {
    adamw_step(p, &[Tensor::new([1], vec![g]).unwrap()], s, h).unwrap();
}

#[test]
fn first_step_moves_by_lr() {
    let h = hyper(1e-3, 0.0);
    for g in [-3.0, 0.01, 250.0] {
        let mut p = scalar_params(0.5);
        let mut s = OptimState::new(&p);
        step(&mut p, &mut s, g, &h);
        let moved = 0.5 - theta(&p);
        assert!((moved - 1e-3 * g.signum()).abs() < 1e-9, "{g}: {moved}");
    }
}

#[test]
fn zero_gradient_only_decays() {
    let mut p = scalar_params(2.0);
    let mut s = OptimState::new(&p);
    step(&mut p, &mut s, 0.0, &hyper(0.1, 0.0));
    assert_eq!(theta(&p), 2.0);
    step(&mut p, &mut s, 0.0, &hyper(0.1, 0.01));
    assert!((theta(&p) - (2.0 - 0.1 * 0.01 * 2.0)).abs() < 1e-15);
}

/// Three steps on `θ²/2`, unrolled by hand.
#[test]
fn three_steps_on_a_quadratic() {
    let (lr, wd, b1, b2, eps) = (0.1, 0.01, 0.9f64, 0.999f64, 1e-8);
    let mut want = 1.0f64;
    let (mut m, mut v) = (0.0, 0.0);
    for t in 1..=3 {
        let g = want;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        want -= lr * (mh / (vh.sqrt() + eps) + wd * want);
    }
    let mut p = scalar_params(1.0);
    let mut s = OptimState::new(&p);
    let h = hyper(lr, wd);
    for _ in 0..3 {
        let g = theta(&p);
        step(&mut p, &mut s, g, &h);
    }
    assert!((theta(&p) - want).abs() <= 1e-7);
    assert_eq!(s.step, 3);
}

#[test]
fn no_decay_is_plain_adam() {
    let mut p = scalar_params(0.3);
    let mut s = OptimState::new(&p);
    let (b1, b2) = (0.9f64, 0.999f64);
    let (mut m, mut v, mut want) = (0.0, 0.0, 0.3f64);
    for (t, g) in [0.5, -0.2, 0.7, 0.1].into_iter().enumerate() {
        step(&mut p, &mut s, g, &hyper(0.01, 0.0));
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let k = t as i32 + 1;
        want -= 0.01 * (m / (1.0 - b1.powi(k))) / ((v / (1.0 - b2.powi(k))).sqrt() + 1e-8);
    }
    assert!((theta(&p) - want).abs() < 1e-12);
}

#[test]
fn optimizer_rejects_bad_input() {
    let mut p = scalar_params(0.0);
    let mut s = OptimState::new(&p);
    assert!(adamw_step(&mut p, &[], &mut s, &hyper(0.1, 0.0)).is_err());
    let wrong = [Tensor::zeros([2])];
    assert!(adamw_step(&mut p, &wrong, &mut s, &hyper(0.1, 0.0)).is_err());
    assert!(hyper(0.0, 0.0).validate().is_err());
    assert!(AdamW { beta1: 1.0, ..hyper(0.1, 0.0) }.validate().is_err());
}

fn small() -> TrainConfig {
    let mut c = TrainConfig::toy();
    c.data.count = 8;
    c.steps = Some(6);
    c.crop = Some(16);
    c.flip = true;
    c.eval_count = 4;
    c
}

#[test]
fn training_is_deterministic() {
    let cfg = small();
    let data = cfg.train_set().unwrap();
    let (pa, ha) = trainer::train(&cfg, &data).unwrap();
    let (pb, hb) = trainer::train(&cfg, &data).unwrap();
    assert_eq!(ha, hb);
    assert_eq!(pa, pb);
    assert_eq!(ha.len(), 6);
    let (_, hc) = trainer::train(&TrainConfig { seed: 1, ..cfg }, &data).unwrap();
    assert_ne!(ha, hc);
}

#[test]
fn logged_totals_are_term_sums() {
    let cfg = small();
    let (_, history) = trainer::train(&cfg, &cfg.train_set().unwrap()).unwrap();
    for r in &history {
        let want = r.rec + r.lap + cfg.loss.eta * (r.cycle + r.transmission);
        assert!((r.total - want).abs() <= 1e-6, "{r:?}");
        assert!(r.is_finite());
    }
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let cfg = small();
    let data = cfg.train_set().unwrap();
    let mut straight = Trainer::new(cfg.clone()).unwrap();
    straight.run(&data, |_| Ok(())).unwrap();

    let mut first = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..3 {
        first.train_step(&data).unwrap();
    }
    let bytes = first.checkpoint().to_bytes().unwrap();
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.params, first.params);
    assert_eq!(back.optim.as_ref(), Some(&first.optim));
    assert_eq!(back.history, first.history);
    assert!(back.to_bytes().unwrap() == bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    trainer::save_checkpoint(&path, &back).unwrap();
    let mut resumed = Trainer::from_checkpoint(trainer::load_checkpoint(&path).unwrap()).unwrap();
    assert_eq!(resumed.step, 3);
    resumed.run(&data, |_| Ok(())).unwrap();
    assert_eq!(resumed.history, straight.history);
    assert_eq!(resumed.params, straight.params);
    assert_eq!(resumed.optim, straight.optim);
}

fn ck_error(bytes: &[u8]) -> CheckpointError {
    match Checkpoint::from_bytes(bytes) {
        Err(Error::Checkpoint(e)) => e,
        other => panic!("expected a checkpoint error, got {other:?}"),
    }
}

#[test]
fn corrupt_checkpoints_are_rejected() {
    let t = Trainer::new(small()).unwrap();
    let bytes = t.checkpoint().to_bytes().unwrap();
    assert!(bytes.starts_with(b"PICEVAE1"));

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(ck_error(&bad), CheckpointError::BadMagic));
    assert!(matches!(ck_error(&bytes[..4]), CheckpointError::BadMagic));

    let mut bad = bytes.clone();
    bad[8..12].copy_from_slice(&(CHECKPOINT_VERSION + 1).to_le_bytes());
    assert!(matches!(ck_error(&bad), CheckpointError::UnknownVersion(2)));

    for cut in [10, 14, 200, bytes.len() / 2, bytes.len() - 1] {
        assert!(matches!(ck_error(&bytes[..cut]), CheckpointError::Truncated(_) | CheckpointError::Malformed(_)), "cut {cut}");
    }

    let mut bad = bytes.clone();
    let mid = bytes.len() - 100;
    bad[mid] ^= 1;
    assert!(matches!(ck_error(&bad), CheckpointError::Checksum { .. }));

    let mut bad = bytes.clone();
    bad.push(0);
    assert!(matches!(ck_error(&bad), CheckpointError::Malformed(_)));
}

#[test]
fn checkpoint_without_optimizer_state() {
    let t = Trainer::new(small()).unwrap();
    let ck = Checkpoint { optim: None, rng: None, ..t.checkpoint() };
    let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
    assert!(back.optim.is_none());
    let fresh = Trainer::from_checkpoint(back).unwrap();
    assert_eq!(fresh.optim, OptimState::new(&t.params));
    assert_eq!(fresh.augment_state(), t.augment_state());
}

#[test]
fn evaluate_matches_direct_scoring() {
    let cfg = small();
    let params = model::init_params(&cfg.model, 5).unwrap();
    let eval: Dataset = cfg.eval_set().unwrap();
    let report = trainer::evaluate(&params, &cfg.model, &cfg.loss, &eval).unwrap();
    assert_eq!(report.count, 4);
    let (mut psnr, mut ssim, mut dpsnr, mut total) = (0.0, 0.0, 0.0, 0.0);
    for s in &eval.samples {
        let out = model::forward(&params, &cfg.model, &s.degraded, &ForwardOptions::default()).unwrap();
        let img = physics::finalize(&out.enhanced).map(|v| (v * 255.0).round() / 255.0);
        psnr += metrics::psnr(&img, &s.clear).unwrap();
        ssim += metrics::ssim(&img, &s.clear).unwrap();
        dpsnr += metrics::psnr(&s.degraded, &s.clear).unwrap();
        total += undersea::losses::total_loss(&out.enhanced, &out.t_hat, &out.b_hat, &s.clear, &s.degraded, &cfg.loss)
            .unwrap()
            .total;
    }
    assert!((report.enhanced.psnr - psnr / 4.0).abs() < 1e-9);
    assert!((report.enhanced.ssim - ssim / 4.0).abs() < 1e-9);
    assert!((report.degraded.psnr - dpsnr / 4.0).abs() < 1e-9);
    assert!((report.loss.total - total / 4.0).abs() < 1e-9);

    // an oracle that knows the truth recovers the clear images to 8-bit precision
    let (enh, deg) = trainer::evaluate_with(&eval, |s| {
        let p = s.truth.as_ref().unwrap();
        physics::enhance(&s.degraded, &p.t, &p.b, physics::T_MIN)
    })
    .unwrap();
    assert_eq!(enh.psnr, f64::INFINITY);
    assert!(deg.psnr.is_finite());
    assert!(trainer::evaluate_with(&Dataset::default(), |s| Ok(s.degraded.clone())).is_err());
}

#[test]
fn smoothed_totals_windows() {
    let cfg = small();
    let (_, history) = trainer::train(&cfg, &cfg.train_set().unwrap()).unwrap();
    let s = trainer::smoothed_totals(&history, 4);
    assert_eq!(s.len(), 2);
    let want = history[..4].iter().map(|r| r.total).sum::<f64>() / 4.0;
    assert!((s[0] - want).abs() < 1e-12);
    assert!((s[1] - (history[4].total + history[5].total) / 2.0).abs() < 1e-12);
}

#[test]
fn config_validation_and_presets() {
    assert_eq!(TrainConfig::preset("toy"), Some(TrainConfig::toy()));
    assert!(TrainConfig::preset("huge").is_none());
    TrainConfig::paper().validate().unwrap();
    let p = TrainConfig::paper();
    assert_eq!((p.lr, p.batch, p.epochs, p.weight_decay), (4.5e-6, 32, 500, 0.01));
    assert!(TrainConfig { batch: 0, ..small() }.validate().is_err());
    assert!(TrainConfig { crop: Some(18), ..small() }.validate().is_err());
    assert_eq!(TrainConfig { steps: None, epochs: 3, ..small() }.total_steps(8), 6);
    let from_json: TrainConfig = serde_json::from_str(r#"{"lr": 0.5, "loss": {"eta": 0.0}}"#).unwrap();
    assert_eq!((from_json.lr, from_json.loss.eta), (0.5, 0.0));
    assert!(serde_json::from_str::<TrainConfig>(r#"{"learning_rate": 0.5}"#).is_err());
}

#[test]
fn untrained_model_smoke() {
    let cfg = small();
    let t = Trainer::new(cfg.clone()).unwrap();
    let r = trainer::evaluate(&t.params, &cfg.model, &cfg.loss, &cfg.eval_set().unwrap()).unwrap();
    assert!(r.enhanced.psnr.is_finite() && r.loss.is_finite());
    assert!((-1.0..=1.0).contains(&r.enhanced.ssim));
}

/// Least-squares slope of `ys` against their index.
fn slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    let xm = (n - 1.0) / 2.0;
    let ym = ys.iter().sum::<f64>() / n;
    let num: f64 = ys.iter().enumerate().map(|(i, y)| (i as f64 - xm) * (y - ym)).sum();
    let den: f64 = (0..ys.len()).map(|i| (i as f64 - xm).powi(2)).sum();
    num / den
}

#[test]
fn physics_weight_changes_trajectory_not_trend() {
    let on = TrainConfig::toy();
    let mut off = on.clone();
    off.loss.eta = 0.0;
    let data = on.train_set().unwrap();
    let (_, h_on) = trainer::train(&on, &data).unwrap();
    let (_, h_off) = trainer::train(&off, &data).unwrap();
    let cycles = |h: &[undersea::LossReport]| h.iter().map(|r| r.cycle).collect::<Vec<_>>();
    assert_ne!(cycles(&h_on), cycles(&h_off));
    for h in [&h_on, &h_off] {
        let s = trainer::smoothed_totals(h, 20);
        assert_eq!(s.len(), 10);
        assert!(slope(&s) < 0.0, "{s:?}");
        assert!(s[1..].iter().all(|&v| v < s[0]), "{s:?}");
    }
}
