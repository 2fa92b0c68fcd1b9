use carl_core::camera::{apply_filters, sample_camera};
use carl_core::io::{make_toy_scene, Checkpoint, SpectralImage, ToySceneConfig};
use carl_core::model::CarlConfig;
use carl_core::rng::{Purpose, Streams};
use carl_core::ssl::{SslConfig, SslState};

fn corpus(n: u64) -> Vec<SpectralImage> {
    let s = Streams::new(40);
    let cams: Vec<_> = (0..3).map(|j| sample_camera(&mut s.stream(Purpose::Cameras, j)).unwrap()).collect();
    (0..n)
        .map(|i| {
            let hsi = make_toy_scene(&mut s.stream(Purpose::Scenes, i), None, &ToySceneConfig::default()).unwrap();
            match i % 4 {
                3 => hsi,
                j => apply_filters(&cams[j as usize], &hsi).unwrap(),
            }
        })
        .collect()
}

#[test]
fn two_hundred_steps_lower_the_loss() {
    let images = corpus(24);
    let cfg = SslConfig {
        total_steps: 200,
        batch_size: 4,
        lr: 1e-3,
        final_lr: 1e-5,
        ..SslConfig::default()
    };
    let mut st = SslState::new(CarlConfig::toy(), cfg, 2).unwrap();
    let mut losses = Vec::new();
    while st.step < 200 {
        let batch = st.sample_batch(&images).unwrap();
        let r = st.train_step(&batch).unwrap();
        assert!(r.loss.is_finite());
        losses.push(r.loss);
    }
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.9 * head, "first 20 mean {head:.4}, last 20 mean {tail:.4}");
}

#[test]
fn resume_through_a_file_matches_the_uninterrupted_run() {
    let images = corpus(8);
    let cfg = SslConfig {
        total_steps: 6,
        batch_size: 2,
        ..SslConfig::default()
    };
    let mut a = SslState::new(CarlConfig::toy(), cfg.clone(), 9).unwrap();
    let mut la = Vec::new();
    while a.step < 6 {
        let b = a.sample_batch(&images).unwrap();
        la.push(a.train_step(&b).unwrap().loss);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.ckpt");
    let mut b = SslState::new(CarlConfig::toy(), cfg, 9).unwrap();
    let mut lb = Vec::new();
    while b.step < 3 {
        let batch = b.sample_batch(&images).unwrap();
        lb.push(b.train_step(&batch).unwrap().loss);
    }
    b.checkpoint().unwrap().save(&path).unwrap();
    let mut c = SslState::from_checkpoint(&Checkpoint::load(&path).unwrap()).unwrap();
    while c.step < 6 {
        let batch = c.sample_batch(&images).unwrap();
        lb.push(c.train_step(&batch).unwrap().loss);
    }
    assert_eq!(la, lb);
    assert_eq!(a.checkpoint().unwrap().to_bytes(), c.checkpoint().unwrap().to_bytes());
}
