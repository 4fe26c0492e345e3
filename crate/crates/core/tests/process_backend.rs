use std::path::PathBuf;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use diffinterp::backend::{Backend, Capacity, Embedding, Image, ProcessBackend, ToyBackend, ToyConfig};
use diffinterp::diffusion::{Latent, NoiseSchedule, ScheduleProfile};
use diffinterp::error::Error;
use diffinterp::tree::{run_scheme, GenerationConfig, PairConditioning, Scheme};

fn worker(mode: &str) -> Vec<String> {
    let script = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/mock_worker.py");
    let mut argv = vec!["python3".to_owned(), script.to_string_lossy().into_owned()];
    if !mode.is_empty() {
        argv.push(mode.to_owned());
    }
    argv
}

fn toy() -> ToyBackend {
    ToyBackend::new(ToyConfig {
        width: 6,
        height: 4,
        prior_std: 0.5,
        supports_pose: false,
        ..ToyConfig::default()
    })
}

fn random_image(rng: &mut ChaCha8Rng) -> Image {
    let data = (0..6 * 4 * 3).map(|_| rng.random_range(0..=255) as f32 / 255.0).collect();
    Image::from_raw(6, 4, data).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn capabilities_come_from_the_first_line() {
    let p = ProcessBackend::spawn(&worker("")).unwrap();
    let caps = p.caps();
    assert_eq!(caps.latent_shape, (3, 4, 6));
    assert_eq!(caps.image_size, (6, 4));
    assert_eq!(caps.capacity, Capacity::Single);
    assert!(caps.supports_grad_wrt_embedding);
    assert_eq!(p.name(), "process");
}

#[test]
fn worker_agrees_with_the_in_process_model() {
    let p = ProcessBackend::spawn(&worker("")).unwrap();
    let t = toy();
    let s = NoiseSchedule::new(1000, ScheduleProfile::Cosine).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);

    let img = random_image(&mut rng);
    let (zp, zt) = (p.encode_image(&img).unwrap(), t.encode_image(&img).unwrap());
    // images cross the pipe as f32 text, so allow f32 rounding
    assert!(max_diff(zp.as_slice(), zt.as_slice()) < 1e-6);
    let back = p.decode_latent(&zt).unwrap();
    assert_eq!(back.size(), (6, 4));
    for (a, b) in back.raw().iter().zip(img.raw()) {
        assert!((a - b).abs() < 1e-6);
    }

    let emb = Embedding::new(vec![3, 4, 6], (0..72).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
    for step in [1, 250, 999] {
        let z = Latent::new(Array3::from_shape_simple_fn((3, 4, 6), || rng.sample(StandardNormal)), step).unwrap();
        let ep = p.predict_noise_conditional(&z, &emb, None, &s).unwrap();
        let et = t.predict_noise_conditional(&z, &emb, None, &s).unwrap();
        assert!(max_diff(ep.as_slice().unwrap(), et.as_slice().unwrap()) < 1e-12, "t={step}");

        let cot = Array3::from_shape_simple_fn((3, 4, 6), || rng.sample(StandardNormal));
        let gp = p.embedding_vjp(&z, &emb, None, &s, &cot).unwrap();
        let gt = t.embedding_vjp(&z, &emb, None, &s, &cot).unwrap();
        assert!(max_diff(&gp, &gt) < 1e-12, "t={step}");
    }
    assert_eq!(p.extract_pose(&img).unwrap(), None);
}

#[test]
fn whole_run_through_the_worker_matches() {
    let p = ProcessBackend::spawn(&worker("")).unwrap();
    let t = toy();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (a, b) = (random_image(&mut rng), random_image(&mut rng));
    let config = GenerationConfig {
        num_frames: 4,
        num_candidates: 1,
        substeps: 5,
        use_pose: false,
        ..GenerationConfig::default()
    };
    let mut cond = PairConditioning::from_prompts(&t, "", "", 1.0).unwrap();
    cond.positive_a = Embedding::new(vec![3, 4, 6], t.encode_image(&a).unwrap().as_slice().to_vec()).unwrap();
    cond.positive_b = Embedding::new(vec![3, 4, 6], t.encode_image(&b).unwrap().as_slice().to_vec()).unwrap();
    let via_worker = run_scheme(&a, &b, &config, &p, &cond).unwrap();
    let direct = run_scheme(&a, &b, &config, &t, &cond).unwrap();
    assert_eq!(via_worker.scheme, Scheme::Ours);
    for (x, y) in via_worker.frames.iter().zip(&direct.frames) {
        assert_eq!(x.index, y.index);
        assert!(max_diff(x.latent.as_slice(), y.latent.as_slice()) < 1e-5);
    }
}

#[test]
fn size_mismatch_is_caught_before_the_pipe() {
    let p = ProcessBackend::spawn(&worker("")).unwrap();
    assert!(matches!(p.encode_image(&Image::new(5, 5)), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn worker_errors_surface_as_backend_unavailable() {
    let p = ProcessBackend::spawn(&worker("fail")).unwrap();
    match p.encode_image(&Image::new(6, 4)) {
        Err(Error::BackendUnavailable(msg)) => assert!(msg.contains("exploded"), "{msg}"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn dead_worker_is_reported() {
    let p = ProcessBackend::spawn(&worker("die")).unwrap();
    assert!(matches!(p.encode_image(&Image::new(6, 4)), Err(Error::BackendUnavailable(_))));
}

#[test]
fn bad_capability_line_is_rejected() {
    assert!(matches!(ProcessBackend::spawn(&worker("badcaps")), Err(Error::BackendUnavailable(_))));
    assert!(ProcessBackend::spawn(&["/nonexistent/worker".to_owned()]).is_err());
    assert!(ProcessBackend::spawn(&[]).is_err());
}
