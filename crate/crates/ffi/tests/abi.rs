use std::ffi::{CStr, CString};
use std::ptr;

use carl_core::io::{make_toy_scene, write_image, ToySceneConfig};
use carl_core::model::CarlConfig;
use carl_core::rng::{Purpose, Streams};
use carl_core::train::{TrainConfig, TrainState};
use carl_ffi::*;

fn cstr(p: &std::path::Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(carl_last_error()) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    image: CString,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let train = TrainConfig {
        classes: 4,
        ..TrainConfig::default()
    };
    let state = TrainState::new(CarlConfig::toy(), train, 3).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    state.checkpoint().unwrap().save(&ckpt).unwrap();
    let scene = ToySceneConfig {
        size: 16,
        ..ToySceneConfig::default()
    };
    let img = make_toy_scene(&mut Streams::new(1).stream(Purpose::Scenes, 0), None, &scene).unwrap();
    let image = dir.path().join("a.csp");
    write_image(&image, &img).unwrap();
    Fixture {
        ckpt: cstr(&ckpt),
        image: cstr(&image),
        _dir: dir,
    }
}

#[test]
fn features_and_segmentation_round_trip() {
    let f = fixture();
    unsafe {
        let mut enc = ptr::null_mut();
        assert_eq!(carl_encoder_load(f.ckpt.as_ptr(), &mut enc), CarlStatus::Ok);
        let mut img = ptr::null_mut();
        assert_eq!(carl_image_read(f.image.as_ptr(), &mut img), CarlStatus::Ok);
        let (mut h, mut w, mut c) = (0, 0, 0);
        assert_eq!(carl_image_dims(img, &mut h, &mut w, &mut c), CarlStatus::Ok);
        assert_eq!((h, w), (16, 16));
        let (mut gh, mut gw, mut d) = (0, 0, 0);
        assert_eq!(carl_encoder_grid(enc, h, w, &mut gh, &mut gw), CarlStatus::Ok);
        assert_eq!(carl_encoder_feature_dim(enc, CarlLayer::Spatial, &mut d), CarlStatus::Ok);

        let mut written = 0;
        assert_eq!(carl_encoder_features(enc, img, CarlLayer::Spatial, ptr::null_mut(), 0, &mut written), CarlStatus::BufferTooSmall);
        assert_eq!(written, gh * gw * d);
        assert!(last_error().contains("need"));
        let mut buf = vec![f64::NAN; written];
        assert_eq!(carl_encoder_features(enc, img, CarlLayer::Spatial, buf.as_mut_ptr(), buf.len(), &mut written), CarlStatus::Ok);
        assert!(buf.iter().all(|v| v.is_finite()));
        assert_eq!(last_error(), "");

        let mut labels = vec![u32::MAX; h * w];
        assert_eq!(carl_encoder_segment(enc, img, labels.as_mut_ptr(), labels.len()), CarlStatus::Ok);
        assert!(labels.iter().all(|&l| l < 4));

        carl_image_free(img);
        carl_encoder_free(enc);
    }
}

#[test]
fn image_built_from_buffers_matches_dims() {
    let waves = [450.0, 550.0, 650.0];
    let data: Vec<f64> = (0..8 * 8 * 3).map(|i| (i % 5) as f64 / 5.0).collect();
    unsafe {
        let mut img = ptr::null_mut();
        assert_eq!(carl_image_new(8, 8, 3, waves.as_ptr(), data.as_ptr(), &mut img), CarlStatus::Ok);
        let (mut h, mut w, mut c) = (0, 0, 0);
        carl_image_dims(img, &mut h, &mut w, &mut c);
        assert_eq!((h, w, c), (8, 8, 3));
        carl_image_free(img);

        let bad = [650.0, 550.0, 450.0];
        let mut img = ptr::null_mut();
        assert_eq!(carl_image_new(8, 8, 3, bad.as_ptr(), data.as_ptr(), &mut img), CarlStatus::InvalidArgument);
        assert!(img.is_null());
        assert!(!last_error().is_empty());
    }
}

#[test]
fn failures_map_to_status_codes() {
    unsafe {
        let mut enc = ptr::null_mut();
        assert_eq!(carl_encoder_load(ptr::null(), &mut enc), CarlStatus::NullPointer);
        let missing = CString::new("/nonexistent/m.ckpt").unwrap();
        assert_eq!(carl_encoder_load(missing.as_ptr(), &mut enc), CarlStatus::Io);
        assert!(last_error().contains("nonexistent"));

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.ckpt");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        assert_eq!(carl_encoder_load(cstr(&junk).as_ptr(), &mut enc), CarlStatus::Format);
        assert!(enc.is_null());

        assert_eq!(carl_image_dims(ptr::null(), ptr::null_mut(), ptr::null_mut(), ptr::null_mut()), CarlStatus::NullPointer);
        carl_image_free(ptr::null_mut());
        carl_encoder_free(ptr::null_mut());
    }
}

#[test]
fn segmentation_needs_a_segmentation_checkpoint() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ssl = carl_core::ssl::SslState::new(CarlConfig::toy(), carl_core::ssl::SslConfig::default(), 1).unwrap();
    let p = dir.path().join("ssl.ckpt");
    ssl.checkpoint().unwrap().save(&p).unwrap();
    unsafe {
        let mut enc = ptr::null_mut();
        assert_eq!(carl_encoder_load(cstr(&p).as_ptr(), &mut enc), CarlStatus::Ok);
        let mut img = ptr::null_mut();
        carl_image_read(f.image.as_ptr(), &mut img);
        let mut out = vec![0u32; 256];
        assert_eq!(carl_encoder_segment(enc, img, out.as_mut_ptr(), out.len()), CarlStatus::Config);
        carl_image_free(img);
        carl_encoder_free(enc);
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(carl_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_api_and_compiles_as_c() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/carl.h")).unwrap();
    for name in ["carl_encoder_load", "carl_encoder_features", "carl_image_new", "carl_last_error", "CARL_STATUS_BUFFER_TOO_SMALL", "typedef struct CarlEncoder CarlEncoder"] {
        assert!(header.contains(name), "{name}");
    }
    if let Ok(out) = std::process::Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"]).arg(dir.join("include/carl.h")).output() {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}
