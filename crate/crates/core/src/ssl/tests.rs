use std::sync::{Arc, Mutex};

use rand::Rng;

use super::*;
use crate::io::SpectralImage;
use crate::model::{CarlConfig, SpectralCall};
use crate::rng::{Purpose, Streams};
use crate::tensor::{ParamStore, Tape, Tensor};
use crate::test_support::{add, Mat, Oracle};

fn random_image(h: usize, w: usize, waves: &[f64], seed: u64) -> SpectralImage {
    let mut rng = Streams::new(seed).stream(Purpose::Data, 0);
    let data = (0..h * w * waves.len()).map(|_| rng.random_range(0.0..1.0)).collect();
    SpectralImage::new(h, w, waves.to_vec(), data, None).unwrap()
}

fn toy_state(seed: u64) -> SslState {
    let cfg = SslConfig {
        total_steps: 50,
        batch_size: 2,
        lr: 1e-3,
        predictor_depth: 1,
        ..SslConfig::default()
    };
    SslState::new(CarlConfig::toy(), cfg, seed).unwrap()
}

fn waves(c: usize) -> Vec<f64> {
    (0..c).map(|i| 520.0 + 20.0 * i as f64).collect()
}

#[test]
fn momentum_schedule() {
    assert_eq!(momentum_at(0, 100), 0.996);
    assert_eq!(momentum_at(100, 100), 1.0);
    assert_eq!(momentum_at(250, 100), 1.0);
    assert!((momentum_at(50, 100) - 0.998).abs() < 1e-15);
}

#[test]
fn ema_identities() {
    let mut student = ParamStore::new();
    student.insert("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
    let mut teacher = student.clone();
    teacher.set("w", Tensor::new(vec![3], vec![0.0, 0.0, 0.0]).unwrap()).unwrap();
    let before = teacher.clone();
    ema_update(&mut teacher, &student, 1.0).unwrap();
    assert_eq!(teacher.get("w"), before.get("w"));
    ema_update(&mut teacher, &student, 0.996).unwrap();
    assert!((teacher.get("w").unwrap().data()[0] - 0.004).abs() < 1e-15);
    ema_update(&mut teacher, &student, 0.0).unwrap();
    assert_eq!(teacher.get("w"), student.get("w"));
    assert!(ema_update(&mut teacher, &student, 1.5).is_err());
    let mut other = ParamStore::new();
    other.insert("v", Tensor::zeros(&[3]));
    assert!(ema_update(&mut other, &student, 0.5).is_err());
}

fn predictor_oracle(o: &Oracle, prefix: &str, context: &Mat, masks: &Mat, heads: usize, depth: usize) -> Mat {
    let mut x = o.linear(context, &format!("{prefix}.in_proj"));
    let tok = o.p(&format!("{prefix}.mask_token")).data().to_vec();
    let n = x.len();
    for m in masks {
        x.push(m.iter().zip(&tok).map(|(a, b)| a + b).collect());
    }
    for i in 0..depth {
        x = o.self_block(&x, &format!("{prefix}.blocks.{i}"), heads);
    }
    let x = o.norm(&x, &format!("{prefix}.norm"));
    o.linear(&x[n..].to_vec(), &format!("{prefix}.out_proj"))
}

#[test]
fn spectral_predictor_matches_oracle() {
    let s = toy_state(1);
    let cfg = s.model.config().clone();
    let mut t = Tape::no_grad();
    let reps = Tensor::from_fn(&[3, 2, 16], |i| (i as f64 * 0.13).cos());
    let rv = t.constant(reps.clone());
    let masked = [600.0, 720.0];
    let out = s
        .predictors
        .spectral
        .predict_spectral(&mut t, &s.predictor_params, rv, &[&masked], s.model.encoder())
        .unwrap();
    assert_eq!(t.shape(out), &[3, 2, 16]);
    let o = Oracle { ps: &s.predictor_params, cfg: &cfg };
    let enc = s.model.encoder();
    let pe: Mat = masked.iter().map(|&l| Oracle::wavelength_pe(enc.freqs(), enc.alpha(), l)).collect();
    for g in 0..3 {
        let ctx: Mat = reps.data()[g * 32..(g + 1) * 32].chunks(16).map(|r| r.to_vec()).collect();
        let expected = predictor_oracle(&o, "spectral_predictor", &ctx, &pe, cfg.heads_spectral, 1);
        let got = &t.value(out).data()[g * 32..(g + 1) * 32];
        let flat: Vec<f64> = expected.into_iter().flatten().collect();
        let diff = got.iter().zip(&flat).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }
}

#[test]
fn equal_wavelengths_give_equal_predictions() {
    let s = toy_state(2);
    let mut t = Tape::no_grad();
    let rv = t.constant(Tensor::from_fn(&[2, 2, 16], |i| (i as f64).sin()));
    let out = s
        .predictors
        .spectral
        .predict_spectral(&mut t, &s.predictor_params, rv, &[&[700.0, 700.0]], s.model.encoder())
        .unwrap();
    let d = t.value(out).data();
    for g in 0..2 {
        assert_eq!(&d[g * 32..g * 32 + 16], &d[g * 32 + 16..g * 32 + 32]);
    }
    let single = s
        .predictors
        .spectral
        .predict_spectral(&mut t, &s.predictor_params, rv, &[&[700.0]], s.model.encoder())
        .unwrap();
    assert_eq!(t.shape(single), &[2, 1, 16]);
}

#[test]
fn spatial_predictor_matches_oracle() {
    let s = toy_state(3);
    let cfg = s.model.config().clone();
    let ctx_pos = [0, 2, 5];
    let tgt = [1, 3];
    let ctx = Tensor::from_fn(&[2, 3, 16], |i| (i as f64 * 0.29).sin());
    let mut t = Tape::no_grad();
    let cv = t.constant(ctx.clone());
    let out = s
        .predictors
        .spatial
        .predict_spatial(&mut t, &s.predictor_params, cv, (2, 3), &ctx_pos, &tgt)
        .unwrap();
    assert_eq!(t.shape(out), &[2, 2, 16]);
    assert!(s.predictors.spatial.predict_spatial(&mut t, &s.predictor_params, cv, (2, 3), &ctx_pos, &[]).is_err());

    let o = Oracle { ps: &s.predictor_params, cfg: &cfg };
    let pe_row = |p: usize| {
        let mut v = Oracle::sinusoid((p / 3) as f64, 8);
        v.extend(Oracle::sinusoid((p % 3) as f64, 8));
        v
    };
    for b in 0..2 {
        let rows: Mat = ctx.data()[b * 48..(b + 1) * 48].chunks(16).map(|r| r.to_vec()).collect();
        // context positions are encoded after the input projection
        let mut x = o.linear(&rows, "spatial_predictor.in_proj");
        x = add(&x, &ctx_pos.iter().map(|&p| pe_row(p)).collect());
        let tok = o.p("spatial_predictor.mask_token").data().to_vec();
        for &p in &tgt {
            x.push(pe_row(p).iter().zip(&tok).map(|(a, b)| a + b).collect());
        }
        x = o.self_block(&x, "spatial_predictor.blocks.0", cfg.heads_spatial);
        let x = o.norm(&x, "spatial_predictor.norm");
        let expected: Vec<f64> = o.linear(&x[3..].to_vec(), "spatial_predictor.out_proj").into_iter().flatten().collect();
        let got = &t.value(out).data()[b * 32..(b + 1) * 32];
        let diff = got.iter().zip(&expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10, "{diff}");
    }
}

#[test]
fn training_step_contract() {
    let mut s = toy_state(4);
    let calls = Arc::new(Mutex::new(Vec::<SpectralCall>::new()));
    let sink = calls.clone();
    s.model.set_observer(Some(Arc::new(move |c: &SpectralCall| sink.lock().unwrap().push(c.clone()))));
    let w = waves(20);
    let a = random_image(32, 32, &w, 1);
    let b = random_image(32, 32, &w, 2);
    let masks = s.sample_masks(20, (4, 4)).unwrap();
    let report = s.step_with_masks(&[&a, &b], &masks).unwrap();

    assert!(report.loss.is_finite());
    assert!(report.spectral.inv >= 0.0 && report.spectral.var >= 0.0 && report.spectral.cov >= 0.0);
    assert!(report.spatial.inv >= 0.0 && report.spatial.var >= 0.0 && report.spatial.cov >= 0.0);
    assert!((report.loss - (report.spectral.total + report.spatial.total)).abs() < 1e-12);
    assert_eq!(report.momentum, 0.996);
    assert_eq!(s.step, 1);

    // teacher never enters a gradient computation
    assert!(s.teacher.ids().all(|id| s.teacher.grad(id).data().iter().all(|&g| g == 0.0)));
    assert!(s.student.ids().any(|id| s.student.grad(id).data().iter().any(|&g| g != 0.0)));

    let calls = calls.lock().unwrap();
    let student: Vec<_> = calls.iter().filter(|c| c.grad_enabled).collect();
    let teacher: Vec<_> = calls.iter().filter(|c| !c.grad_enabled).collect();
    assert_eq!((student.len(), teacher.len()), (1, 1));
    let hidden: Vec<f64> = masks.spectral.masked().iter().map(|&i| w[i]).collect();
    for seen in &student[0].wavelengths {
        assert!(seen.iter().all(|l| !hidden.contains(l)));
    }
    assert_eq!(student[0].token_rows, 2 * 16 * masks.spectral.visible().len());
    assert_eq!(teacher[0].token_rows, 2 * 16 * 20);
}

#[test]
fn zero_learning_rate_moves_teacher_by_ema_only() {
    let mut s = toy_state(5);
    s.config.lr = 0.0;
    s.config.final_lr = 0.0;
    let id = s.teacher.ids().next().unwrap();
    for v in s.teacher.value_mut(id).data_mut() {
        *v += 1.0;
    }
    let student_before = s.student.clone();
    let teacher_before = s.teacher.value(id).clone();
    let w = waves(6);
    let (a, b) = (random_image(32, 32, &w, 1), random_image(32, 32, &w, 2));
    let report = s.train_step(&[&a, &b]).unwrap();
    for pid in s.student.ids() {
        assert_eq!(s.student.value(pid), student_before.value(pid));
    }
    let m = report.momentum;
    let expected: Vec<f64> = teacher_before
        .data()
        .iter()
        .zip(s.student.value(id).data())
        .map(|(t, x)| m * t + (1.0 - m) * x)
        .collect();
    assert_eq!(s.teacher.value(id).data(), expected.as_slice());
}

#[test]
fn batch_must_be_homogeneous_and_at_least_two() {
    let mut s = toy_state(6);
    let a = random_image(32, 32, &waves(6), 1);
    let b = random_image(32, 32, &waves(8), 2);
    assert!(s.train_step(&[&a]).is_err());
    assert!(s.train_step(&[&a, &b]).is_err());
    let mut cfg = s.config.clone();
    cfg.batch_size = 1;
    assert!(cfg.validate().is_err());
}

#[test]
fn hyperspectral_inputs_are_strided_down() {
    let s = toy_state(7);
    let img = random_image(8, 8, &(0..100).map(|i| 500.0 + 5.0 * i as f64).collect::<Vec<_>>(), 1);
    let p = s.prepare(&img).unwrap();
    assert_eq!(p.channels(), 64);
    assert_eq!(p.wavelengths()[0], 500.0);
}

fn toy_corpus(n: usize, c: usize) -> Vec<SpectralImage> {
    (0..n).map(|i| random_image(32, 32, &waves(c), 100 + i as u64)).collect()
}

fn run(s: &mut SslState, corpus: &[SpectralImage], steps: usize) -> Vec<f64> {
    (0..steps)
        .map(|_| {
            let batch = s.sample_batch(corpus).unwrap();
            s.train_step(&batch).unwrap().loss
        })
        .collect()
}

#[test]
fn checkpoint_resume_matches_uninterrupted_run() {
    let corpus = toy_corpus(4, 6);
    let mut straight = toy_state(8);
    let full = run(&mut straight, &corpus, 6);

    let mut first = toy_state(8);
    let mut losses = run(&mut first, &corpus, 3);
    let bytes = first.checkpoint().unwrap().to_bytes();
    drop(first);
    let ck = crate::io::Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    let mut resumed = SslState::from_checkpoint(&ck).unwrap();
    assert_eq!(resumed.step, 3);
    losses.extend(run(&mut resumed, &corpus, 3));
    assert_eq!(losses, full);
    for id in straight.student.ids() {
        assert_eq!(straight.student.value(id), resumed.student.value(id));
        assert_eq!(straight.teacher.value(id), resumed.teacher.value(id));
    }
}

#[test]
fn checkpoint_into_other_config_names_the_tensor() {
    let s = toy_state(9);
    let ck = s.checkpoint().unwrap();
    let mut cfg = CarlConfig::toy();
    cfg.dim_spatial = 24;
    let mut other = SslState::new(cfg, s.config.clone(), 9).unwrap();
    match other.restore(&ck) {
        Err(crate::CarlError::TensorShape { name, .. }) => assert!(name.starts_with("student/"), "{name}"),
        r => panic!("expected a tensor shape error, got {r:?}"),
    }
}
