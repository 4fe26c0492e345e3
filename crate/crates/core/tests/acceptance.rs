//! End-to-end acceptance checks, one line of output per criterion.
//!
//! Run with `cargo test -p diffinterp --test acceptance`. Exits nonzero if
//! any criterion fails.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::sync::atomic::Ordering;
use std::sync::Arc;
use std::time::{Duration, Instant, SystemTime};

use nalgebra::{DMatrix, DVector};
use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{degenerate_toy, pattern, toy, with_pose, Hooked};
use diffinterp::backend::{Backend, ConditioningBundle, Embedding, Image};
use diffinterp::diffusion::{ddim_denoise, lerp, slerp, Latent, NoiseSchedule, ScheduleProfile};
use diffinterp::inversion::{gradient_check, invert_prompt, InversionConfig};
use diffinterp::metrics::{evaluate, fid, fid_from_moments, ppl, trace_sqrt_product, FeatureSet, RandomProjection};
use diffinterp::pose::{
    extract_pose_with_fallback, interpolate_pose, shared_keypoints, standing_figure, FallbackConfig, Joint,
    PoseSkeleton, PoseSource,
};
use diffinterp::project::{frame_path, NodeFilter, Project, Prompts, Session};
use diffinterp::tree::{
    build_tree, place_timesteps, run_scheme, GenerationConfig, InterpolationTree, PairConditioning, Scheme,
};

type Check = Result<(), String>;
type Criterion = (&'static str, Duration, fn() -> Check);

// a NaN comparison must fail the check, hence no `partial_cmp`
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("tree construction", Duration::from_secs(10), tree_construction),
        ("diffusion math", Duration::from_secs(60), diffusion_math),
        ("slerp/lerp properties", Duration::from_secs(60), interpolation_properties),
        ("textual inversion", Duration::from_secs(60), textual_inversion),
        ("scheme differentiation", Duration::from_secs(300), scheme_differentiation),
        ("FID/PPL correctness", Duration::from_secs(60), metric_correctness),
        ("pose pipeline", Duration::from_secs(60), pose_pipeline),
        ("determinism and steering", Duration::from_secs(300), determinism_and_steering),
        ("persistence", Duration::from_secs(300), persistence),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, budget, check) in criteria {
        let start = Instant::now();
        let outcome = match panic::catch_unwind(AssertUnwindSafe(check)) {
            Ok(r) => r,
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let took = start.elapsed();
        let outcome = outcome.and_then(|()| {
            if took > budget {
                Err(format!("took {took:.1?}, budget {budget:?}"))
            } else {
                Ok(())
            }
        });
        match outcome {
            Ok(()) => println!("PASS  {name:<26} {:>8.2}s", took.as_secs_f64()),
            Err(e) => {
                failed += 1;
                println!("FAIL  {name:<26} {:>8.2}s  {e}", took.as_secs_f64());
            }
        }
    }
    let _ = panic::take_hook();
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}

// ---------------------------------------------------------------- tree

/// Brute-force validity: every interior index exactly once, parents are
/// endpoints or nodes, ancestors strictly noisier, and no parent cycles.
fn tree_oracle(tree: &InterpolationTree) -> Check {
    let n = tree.num_frames;
    let mut by_index = BTreeMap::new();
    for node in &tree.nodes {
        ensure!(by_index.insert(node.index, node).is_none(), "N={n}: index {} repeated", node.index);
    }
    let expected: BTreeSet<usize> = (1..n).collect();
    let got: BTreeSet<usize> = by_index.keys().copied().collect();
    ensure!(got == expected, "N={n}: interior indices {got:?}");
    for node in &tree.nodes {
        let mut stack = vec![node.parent_lo, node.parent_hi];
        let mut seen = BTreeSet::new();
        while let Some(p) = stack.pop() {
            if p == 0 || p == n {
                continue;
            }
            ensure!(p != node.index, "N={n}: node {} is its own ancestor", node.index);
            let Some(parent) = by_index.get(&p) else {
                return Err(format!("N={n}: node {} has unknown parent {p}", node.index));
            };
            ensure!(
                parent.timestep > node.timestep,
                "N={n}: ancestor {p} (t={}) not noisier than {} (t={})",
                parent.timestep,
                node.index,
                node.timestep
            );
            if seen.insert(p) {
                stack.push(parent.parent_lo);
                stack.push(parent.parent_hi);
            }
        }
    }
    Ok(())
}

fn tree_construction() -> Check {
    for k in 1..=6 {
        let ts = ok(place_timesteps(k, 0.25, 0.65, 1000))?;
        for n in 2..=64 {
            let tree = ok(build_tree(n, &ts, None))?;
            tree_oracle(&tree)?;
        }
    }
    let ts = ok(place_timesteps(3, 0.25, 0.65, 1000))?;
    let tree = ok(build_tree(8, &ts, None))?;
    let got: Vec<(usize, usize, usize, usize, u32)> = tree
        .nodes
        .iter()
        .map(|nd| (nd.index, nd.parent_lo, nd.parent_hi, nd.level, nd.timestep))
        .collect();
    let (t0, t1, t2) = (ts[2], ts[1], ts[0]);
    let want = vec![
        (4, 0, 8, 0, t0),
        (2, 0, 4, 1, t1),
        (6, 4, 8, 1, t1),
        (1, 0, 2, 2, t2),
        (3, 2, 4, 2, t2),
        (5, 4, 6, 2, t2),
        (7, 6, 8, 2, t2),
    ];
    ensure!(got == want, "N=8, K=3 tree {got:?}");
    ensure!(ts == vec![250, 450, 650], "K=3 timesteps {ts:?}");
    Ok(())
}

// ---------------------------------------------------------------- diffusion

fn within_se(samples: &[f64], mean: f64, var: f64) -> Check {
    let n = samples.len() as f64;
    let m = samples.iter().sum::<f64>() / n;
    let v = samples.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    let se_mean = (var / n).sqrt();
    let se_var = var * (2.0 / (n - 1.0)).sqrt();
    ensure!((m - mean).abs() <= 3.0 * se_mean, "sample mean {m} vs {mean} (se {se_mean})");
    ensure!((v - var).abs() <= 3.0 * se_var, "sample variance {v} vs {var} (se {se_var})");
    Ok(())
}

fn gaussian(shape: (usize, usize, usize), rng: &mut ChaCha8Rng) -> Array3<f64> {
    Array3::from_shape_simple_fn(shape, || rng.sample(StandardNormal))
}

fn diffusion_math() -> Check {
    let shape = (1, 100, 100);
    let x0 = 0.8;
    for profile in [ScheduleProfile::Cosine, ScheduleProfile::ScaledLinear] {
        let s = ok(NoiseSchedule::new(1000, profile))?;
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let clean = ok(Latent::clean(Array3::from_elem(shape, x0)))?;
        let t = 300;
        let mut z = clean.clone();
        for _ in 0..t {
            z = ok(s.forward_diffuse_step(&z, &gaussian(shape, &mut rng)))?;
        }
        let (a, sg) = (s.alpha(t), s.sigma(t));
        within_se(z.as_slice(), a * x0, sg * sg).map_err(|e| format!("{profile:?} stepwise: {e}"))?;
        let closed = ok(s.forward_diffuse(&clean, t, &gaussian(shape, &mut rng)))?;
        within_se(closed.as_slice(), a * x0, sg * sg).map_err(|e| format!("{profile:?} closed form: {e}"))?;
    }

    // Degenerate prior: a single DDIM jump lands on the prior mean.
    let s = ok(NoiseSchedule::new(1000, ScheduleProfile::Cosine))?;
    let b = degenerate_toy(8);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m: Vec<f64> = (0..3 * 64).map(|_| rng.random_range(0.0..1.0)).collect();
    let emb = ok(Embedding::new(vec![3, 8, 8], m.clone()))?;
    let cond = ConditioningBundle::unguided(emb.clone());
    for t in [100, 500, 999] {
        let zt = ok(Latent::new(gaussian((3, 8, 8), &mut rng), t))?;
        let z0 = ok(ddim_denoise(&zt, 0, &cond, &b, &s, 1))?;
        let err = z0.as_slice().iter().zip(&m).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure!(err < 1e-6, "single jump from t={t} misses the prior mean by {err}");
    }

    // Gaussian prior N(m, v I): the probability-flow map is affine and keeps
    // (z_t - alpha m) / sqrt(alpha^2 v + sigma^2) fixed.
    let b = toy(8);
    let v = b.config().prior_std.powi(2);
    let t = 800;
    let x = ok(Latent::clean(gaussian((3, 8, 8), &mut rng)))?;
    let zt = ok(s.forward_diffuse(&x, t, &gaussian((3, 8, 8), &mut rng)))?;
    let (a, sg) = (s.alpha(t), s.sigma(t));
    let scale = v.sqrt() / (a * a * v + sg * sg).sqrt();
    let exact: Vec<f64> = zt.as_slice().iter().zip(&m).map(|(z, mi)| mi + scale * (z - a * mi)).collect();
    let mut errs = Vec::new();
    for k in [1, 5, 25, 125] {
        let z0 = ok(ddim_denoise(&zt, 0, &cond, &b, &s, k))?;
        let e = z0.as_slice().iter().zip(&exact).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        errs.push(e);
    }
    ensure!(errs.windows(2).all(|w| w[1] < w[0]), "multi-step errors not decreasing: {errs:?}");
    Ok(())
}

// ---------------------------------------------------------------- slerp

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn angle(a: &[f64], b: &[f64]) -> f64 {
    let c = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norm(a) * norm(b));
    c.clamp(-1.0, 1.0).acos()
}

fn interpolation_properties() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..200 {
        let d = 2 + case % 30;
        let mut a: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let mut b: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        for f in [ok(slerp(&a, &b, 0.0))?, ok(lerp(&a, &b, 0.0))?] {
            ensure!(f == a, "u=0 does not return a");
        }
        for f in [ok(slerp(&a, &b, 1.0))?, ok(lerp(&a, &b, 1.0))?] {
            ensure!(f == b, "u=1 does not return b");
        }
        let u = rng.random_range(0..=256) as f64 / 256.0;
        ensure!(ok(slerp(&a, &b, u))? == ok(slerp(&b, &a, 1.0 - u))?, "slerp not symmetric at u={u}");
        ensure!(ok(lerp(&a, &b, u))? == ok(lerp(&b, &a, 1.0 - u))?, "lerp not symmetric at u={u}");

        let (na, nb) = (norm(&a), norm(&b));
        a.iter_mut().for_each(|x| *x /= na);
        b.iter_mut().for_each(|x| *x /= nb);
        let theta = angle(&a, &b);
        let u: f64 = rng.random_range(0.0..=1.0);
        let s = ok(slerp(&a, &b, u))?;
        ensure!((norm(&s) - 1.0).abs() <= 1e-9, "unit norm lost: {}", norm(&s));
        let got = angle(&a, &s);
        ensure!((got - u * theta).abs() <= 1e-6, "arc angle {got} vs {} (theta {theta})", u * theta);
    }
    Ok(())
}

// ---------------------------------------------------------------- inversion

fn textual_inversion() -> Check {
    let s = ok(NoiseSchedule::new(1000, ScheduleProfile::Cosine))?;
    let b = degenerate_toy(8);
    let target = pattern(8, 1, false);
    let z0 = ok(b.encode_image(&target))?;
    let init = ok(b.encode_text("red"))?;
    let cfg = InversionConfig {
        iterations: 500,
        learning_rate: 0.15,
        timestep_range: Some((250, 650)),
        seed: 3,
        ..InversionConfig::default()
    };
    let r = ok(invert_prompt(&init, &z0, &cfg, &b, &s))?;
    // For the degenerate prior the loss vanishes exactly when the embedding
    // equals the clean latent.
    let err = r.embedding.values.iter().zip(z0.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    ensure!(err <= 1e-3, "embedding {err} away from the optimum after 500 iterations");
    ensure!(r.losses.len() == 500, "{} losses recorded", r.losses.len());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for backend in [degenerate_toy(8), toy(8)] {
        for t in [50, 300, 700] {
            let eps = gaussian((3, 8, 8), &mut rng);
            let c = ok(init.with_values(init.values.iter().map(|v| v + rng.random_range(-0.5..0.5)).collect()))?;
            let worst = ok(gradient_check(&c, &z0, t, &eps, &backend, &s, 1e-5, 24, t as u64))?;
            ensure!(worst <= 1e-4, "gradient disagrees with finite differences by {worst} at t={t}");
        }
    }
    Ok(())
}

// ---------------------------------------------------------------- schemes

fn corpus(size: u32) -> Vec<(Image, Image)> {
    (0..4).map(|k| (pattern(size, 2 * k, false), pattern(size, 2 * k + 1, false))).collect()
}

/// Conditioning at the closed-form inversion optimum of the toy backend:
/// each input's embedding is its own latent.
fn pair_conditioning(backend: &dyn Backend, a: &Image, b: &Image) -> Result<PairConditioning, String> {
    let mut cond = ok(PairConditioning::from_prompts(backend, "", "", 1.0))?;
    let shape = backend.caps().embedding_shape.clone();
    cond.positive_a = ok(Embedding::new(shape.clone(), ok(backend.encode_image(a))?.as_slice().to_vec()))?;
    cond.positive_b = ok(Embedding::new(shape, ok(backend.encode_image(b))?.as_slice().to_vec()))?;
    Ok(cond)
}

fn scheme_differentiation() -> Check {
    let b = toy(32);
    let config = GenerationConfig {
        num_frames: 8,
        num_candidates: 2,
        substeps: 20,
        ..GenerationConfig::default()
    };
    let mut inputs = Vec::new();
    let mut sequences: BTreeMap<Scheme, Vec<Vec<Image>>> = BTreeMap::new();
    for (a, bb) in corpus(32) {
        let cond = pair_conditioning(&b, &a, &bb)?;
        let mut runs = BTreeMap::new();
        for scheme in Scheme::ALL {
            let cfg = GenerationConfig { scheme, ..config.clone() };
            let seq = ok(run_scheme(&a, &bb, &cfg, &b, &cond))?;
            ensure!(seq.frames.len() == 9, "{scheme}: {} frames", seq.frames.len());
            sequences.entry(scheme).or_default().push(seq.frames.iter().map(|f| f.image.clone()).collect());
            runs.insert(scheme, seq);
        }

        let (za, zb) = (ok(b.encode_image(&a))?, ok(b.encode_image(&bb))?);
        for f in &runs[&Scheme::InterpolateOnly].frames {
            let u = f.index as f64 / 8.0;
            let direct = ok(slerp(za.as_slice(), zb.as_slice(), u))?;
            let latent = ok(Latent::clean(ok(Array3::from_shape_vec(za.shape(), direct))?))?;
            ensure!(f.latent == latent, "interpolate_only frame {} is not the latent slerp", f.index);
            ensure!(f.image == ok(b.decode_latent(&latent))?, "interpolate_only frame {} decode differs", f.index);
        }

        let (sa, sb) = runs[&Scheme::Did].diagnostics.noised_inputs.clone().ok_or("did kept no noised inputs")?;
        let (ua, ub) = runs[&Scheme::DidUnshared]
            .diagnostics
            .noised_inputs
            .clone()
            .ok_or("did_unshared kept no noised inputs")?;
        let s = ok(config.schedule())?;
        let noise_of = |zt: &Latent, z0: &Latent| -> Vec<f64> {
            let (al, sg) = (s.alpha(zt.timestep), s.sigma(zt.timestep));
            zt.as_slice().iter().zip(z0.as_slice()).map(|(t, c)| (t - al * c) / sg).collect()
        };
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-9);
        ensure!(sa == ua, "did variants disagree on the first noised input");
        ensure!(close(&noise_of(&sa, &za), &noise_of(&sb, &zb)), "did does not share input noise");
        ensure!(sb != ub, "did_unshared second input is identical to did");
        ensure!(!close(&noise_of(&ua, &za), &noise_of(&ub, &zb)), "did_unshared shares input noise");
        ensure!(
            runs[&Scheme::Did].frames[4].latent != runs[&Scheme::DidUnshared].frames[4].latent,
            "did and did_unshared give the same midpoint"
        );
        inputs.push(a);
        inputs.push(bb);
    }
    let report = ok(evaluate(&inputs, &sequences, &RandomProjection::default(), 0))?;
    ensure!(report.rows.len() == 5, "{} report rows", report.rows.len());
    for row in &report.rows {
        ensure!(
            row.fid.is_finite() && row.ppl_mean.is_finite() && row.ppl_std.is_finite(),
            "non-finite row {row:?}"
        );
    }
    Ok(())
}

// ---------------------------------------------------------------- metrics

fn random_spd(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    &a * a.transpose() + DMatrix::identity(d, d) * 0.1
}

fn features(n: usize, d: usize, shift: f64, rng: &mut ChaCha8Rng) -> Result<FeatureSet, String> {
    let v = (0..n).map(|_| (0..d).map(|_| shift + rng.sample::<f64, _>(StandardNormal)).collect()).collect();
    ok(FeatureSet::new(v, "test"))
}

fn metric_correctness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let a = features(50, 6, 0.0, &mut rng)?;
    let self_fid = ok(fid(&a, &a))?;
    ensure!(self_fid.abs() <= 1e-6, "fid(a, a) = {self_fid}");

    for _ in 0..20 {
        let d = 5;
        let sigma = random_spd(d, &mut rng);
        let mu = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        let zero = DVector::zeros(d);
        let got = ok(fid_from_moments((&mu, &sigma), (&zero, &sigma)))?;
        ensure!((got - mu.norm_squared()).abs() <= 1e-6, "equal covariances: {got} vs {}", mu.norm_squared());

        // The product of two SPD matrices is similar to an SPD matrix, so
        // its eigenvalues are real and nonnegative.
        let sb = random_spd(d, &mut rng);
        let eig = (&sigma * &sb).complex_eigenvalues();
        let oracle: f64 = eig.iter().map(|l| l.re.max(0.0).sqrt()).sum();
        let got = trace_sqrt_product(&sigma, &sb);
        ensure!((got - oracle).abs() <= 1e-6, "trace term {got} vs eigen oracle {oracle}");
    }

    let steps = (0..17).map(|i| vec![i as f64, 0.0, 0.0]).collect();
    let p = ok(ppl(&ok(FeatureSet::new(steps, "line"))?))?;
    ensure!(p == 16.0, "ppl of 17 unit steps = {p}");

    for _ in 0..100 {
        let d = 4;
        let x = features(12, d, rng.random_range(-1.0..1.0), &mut rng)?;
        let y = features(12, d, rng.random_range(-1.0..1.0), &mut rng)?;
        let z = features(12, d, rng.random_range(-1.0..1.0), &mut rng)?;
        let (xy, yx) = (ok(fid(&x, &y))?, ok(fid(&y, &x))?);
        ensure!((xy - yx).abs() <= 1e-9 * xy.max(1.0), "fid not symmetric: {xy} vs {yx}");
        // FID is a squared 2-Wasserstein distance; its root is a metric.
        let (dxy, dyz, dxz) = (xy.sqrt(), ok(fid(&y, &z))?.sqrt(), ok(fid(&x, &z))?.sqrt());
        ensure!(dxz <= dxy + dyz + 1e-6, "triangle inequality: {dxz} > {dxy} + {dyz}");

        let mut rev = x.vectors.clone();
        rev.reverse();
        let (fwd, bwd) = (ok(ppl(&x))?, ok(ppl(&ok(FeatureSet::new(rev, "test"))?))?);
        ensure!((fwd - bwd).abs() <= 1e-9 * fwd, "ppl depends on direction");
        let direct: f64 = x.vectors[0].iter().zip(&x.vectors[11]).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        ensure!(direct <= fwd + 1e-12, "path shorter than the chord");
    }
    Ok(())
}

// ---------------------------------------------------------------- pose

fn skeleton(points: &[(Joint, f64, f64, f64)]) -> Result<PoseSkeleton, String> {
    let mut s = PoseSkeleton::new(PoseSource::Detected);
    for &(j, x, y, c) in points {
        s = ok(s.with(j, x, y, c))?;
    }
    Ok(s)
}

fn pose_pipeline() -> Check {
    let a = skeleton(&[
        (Joint::Nose, 0.25, 0.75, 0.9),
        (Joint::Neck, 0.5, 0.5, 0.9),
        (Joint::RightShoulder, 0.375, 0.5, 0.3),
    ])?;
    let b = skeleton(&[
        (Joint::Nose, 0.75, 0.25, 0.8),
        (Joint::Neck, 0.5, 0.625, 0.2),
        (Joint::LeftHip, 0.5, 0.875, 0.9),
    ])?;
    let shared = shared_keypoints(&a, &b, 0.4);
    ensure!(shared == BTreeSet::from([Joint::Nose]), "shared keypoints {shared:?}");

    let mid = interpolate_pose(&a, &b, 0.5, 0.4).ok_or("nothing interpolated")?;
    ensure!(mid.keypoints.len() == 1, "midpoint keeps {} joints", mid.keypoints.len());
    let nose = mid.keypoints[&Joint::Nose];
    ensure!(nose.x == 0.5 && nose.y == 0.5 && nose.confidence == 0.8, "midpoint nose {nose:?}");
    for k in 0..=16 {
        let u = k as f64 / 16.0;
        let fwd = interpolate_pose(&a, &b, u, 0.4);
        let bwd = interpolate_pose(&b, &a, 1.0 - u, 0.4);
        ensure!(fwd == bwd, "pose interpolation not symmetric at u={u}");
    }
    ensure!(interpolate_pose(&a, &b, 0.5, 0.95).is_none(), "no joint clears 0.95 yet a pose came back");

    // Fallback: an extractor that only recognizes "photographic" images,
    // here those whose mean color is close to the fallback prompt's.
    let s = ok(NoiseSchedule::new(1000, ScheduleProfile::Cosine))?;
    let cfg = FallbackConfig::default();
    let base = toy(32);
    let prompt_color = ok(base.encode_text(&cfg.prompt))?.values;
    let target = [prompt_color[0], prompt_color[32 * 32], prompt_color[2 * 32 * 32]];
    let cartoon = Image::filled(32, 32, [target[0] as f32 * 0.2, 1.0, 1.0 - target[2] as f32 * 0.5]);
    let distance = move |im: &Image| {
        let m = im.mean_color();
        (0..3).map(|c| (m[c] - target[c]).abs()).fold(0.0, f64::max)
    };
    let limit = 0.6 * distance(&cartoon);
    let photographic = move |im: &Image| distance(im) < limit;
    let figure = standing_figure();
    let scripted = |accept: Box<dyn Fn(&Image) -> bool + Send + Sync>| {
        let fig = figure.clone();
        let mut h = Hooked::new(toy(32));
        h.pose = Some(Box::new(move |im: &Image| accept(im).then(|| fig.clone())));
        h
    };
    ensure!(!photographic(&cartoon), "scenario image already looks photographic");

    let h = scripted(Box::new(photographic));
    let got = ok(extract_pose_with_fallback(&cartoon, &h, &s, &cfg))?.ok_or("fallback found no pose")?;
    ensure!(got.source == PoseSource::FallbackTranslated, "source {:?}", got.source);
    ensure!(h.pose_calls.load(Ordering::SeqCst) == 2, "extractor called {} times", h.pose_calls.load(Ordering::SeqCst));

    let h = scripted(Box::new(|_| true));
    let got = ok(extract_pose_with_fallback(&cartoon, &h, &s, &cfg))?.ok_or("direct detection lost")?;
    ensure!(got.source == PoseSource::Detected && h.pose_calls.load(Ordering::SeqCst) == 1, "direct path not taken");

    let h = scripted(Box::new(|_| false));
    ensure!(ok(extract_pose_with_fallback(&cartoon, &h, &s, &cfg))?.is_none(), "pose invented");
    ensure!(h.pose_calls.load(Ordering::SeqCst) == 2, "fallback not attempted");

    // A weak detection counts as none and also triggers the fallback.
    let mut h = Hooked::new(toy(32));
    let weak = skeleton(&[(Joint::Nose, 0.5, 0.5, 0.1)])?;
    h.pose = Some(Box::new(move |_| Some(weak.clone())));
    ensure!(ok(extract_pose_with_fallback(&cartoon, &h, &s, &cfg))?.is_none(), "weak pose accepted");
    ensure!(h.pose_calls.load(Ordering::SeqCst) == 2, "weak pose did not trigger the fallback");

    // The real toy extractor finds markers painted on an image.
    let marked = with_pose(&pattern(64, 0, true), &figure);
    let direct = ok(extract_pose_with_fallback(&marked, &toy(64), &s, &cfg))?.ok_or("markers not found")?;
    ensure!(direct.keypoints.len() == 18, "{} joints found", direct.keypoints.len());

    // No pose anywhere: the run completes and matches a run without pose.
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (ia, ib) = (pattern(32, 0, true), pattern(32, 1, true));
    let mut frames = Vec::new();
    for use_pose in [true, false] {
        let config = GenerationConfig {
            num_frames: 4,
            num_candidates: 1,
            substeps: 10,
            use_pose,
            ..GenerationConfig::default()
        };
        let dir = tmp.path().join(format!("pose_{use_pose}"));
        let mut session = ok(Session::create(&dir, "p", &ia, &ib, Prompts::default(), config, None, Arc::new(toy(32))))?;
        let summary = ok(session.generate(&NodeFilter::All, &mut |_| {}))?;
        ensure!(summary.complete, "run with use_pose={use_pose} incomplete");
        let p = session.project();
        ensure!(p.poses.a.is_none() && p.poses.b.is_none(), "a pose was detected on blank inputs");
        frames.push(ok(session.frames())?);
    }
    ensure!(frames[0] == frames[1], "pose-less run differs from the unconditioned run");
    Ok(())
}

// ---------------------------------------------------------------- steering

fn steering_config() -> GenerationConfig {
    GenerationConfig {
        num_frames: 8,
        num_candidates: 3,
        substeps: 20,
        global_seed: 7,
        ..GenerationConfig::default()
    }
}

fn steering_inputs() -> (Image, Image) {
    let fig = standing_figure();
    let mut moved = PoseSkeleton::new(PoseSource::Detected);
    for (j, k) in &fig.keypoints {
        moved.keypoints.insert(*j, diffinterp::pose::Keypoint { x: (k.x + 0.1).min(1.0), ..*k });
    }
    (with_pose(&pattern(64, 0, true), &fig), with_pose(&pattern(64, 3, true), &moved))
}

fn create_session(dir: &Path, backend: Arc<dyn Backend>) -> Result<Session, String> {
    let (a, b) = steering_inputs();
    let prompts = Prompts {
        positive: "a photo".into(),
        negative: "blurry".into(),
    };
    let inversion = InversionConfig {
        iterations: 30,
        learning_rate: 0.1,
        ..InversionConfig::default()
    };
    ok(Session::create(dir, "steer", &a, &b, prompts, steering_config(), Some(inversion), backend))
}

fn frame_bytes(dir: &Path, n: usize) -> Result<Vec<Vec<u8>>, String> {
    (0..=n).map(|i| std::fs::read(dir.join(frame_path(i))).map_err(|e| e.to_string())).collect()
}

fn determinism_and_steering() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut runs = Vec::new();
    for k in 0..2 {
        let dir = tmp.path().join(format!("run{k}"));
        let mut s = create_session(&dir, Arc::new(toy(64)))?;
        ensure!(ok(s.generate(&NodeFilter::All, &mut |_| {}))?.complete, "run {k} incomplete");
        ensure!(s.project().poses.a.is_some() && s.project().poses.b.is_some(), "input poses not found");
        runs.push((dir, s));
    }
    ensure!(frame_bytes(&runs[0].0, 8)? == frame_bytes(&runs[1].0, 8)?, "frames differ between identical runs");
    ensure!(runs[0].1.project() == runs[1].1.project(), "project state differs between identical runs");

    let (dir, mut s) = runs.pop().expect("two runs");
    let root_desc = s.project().tree.as_ref().ok_or("no tree")?.descendants(4);
    ensure!(root_desc == BTreeSet::from([1, 2, 3, 5, 6, 7]), "descendants of 4: {root_desc:?}");

    let before = frame_bytes(&dir, 8)?;
    let node = 2;
    let current = s.project().selected(node).ok_or("node 2 has no selection")?;
    let pick = (current + 1) % 3;
    let invalidated = ok(s.select(node, pick))?;
    ensure!(invalidated == BTreeSet::from([1, 3]), "selection at 2 invalidated {invalidated:?}");
    let summary = ok(s.generate(&NodeFilter::Nodes(invalidated.clone()), &mut |_| {}))?;
    ensure!(summary.complete, "regeneration left gaps");
    ensure!(
        summary.generated.iter().copied().collect::<BTreeSet<_>>() == invalidated,
        "regenerated {:?}",
        summary.generated
    );
    let after = frame_bytes(&dir, 8)?;
    let changed: BTreeSet<usize> = (0..=8).filter(|&i| before[i] != after[i]).collect();
    ensure!(changed.contains(&node), "frame 2 did not change with its selection");
    ensure!(changed.is_subset(&BTreeSet::from([1, 2, 3])), "frames outside the subtree changed: {changed:?}");
    ensure!(changed.len() > 1, "no descendant changed: {changed:?}");
    Ok(())
}

// ---------------------------------------------------------------- persistence

fn file_state(dir: &Path, rel: &str) -> Result<(SystemTime, Vec<u8>), String> {
    let path = dir.join(rel);
    let meta = std::fs::metadata(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let bytes = std::fs::read(&path).map_err(|e| e.to_string())?;
    Ok((meta.modified().map_err(|e| e.to_string())?, bytes))
}

fn persistence() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path().join("crash");
    // Count the predictions of a whole run, then crash partway through.
    let counter = Arc::new(Hooked::new(toy(64)));
    let mut probe = create_session(&tmp.path().join("probe"), counter.clone())?;
    ok(probe.generate(&NodeFilter::All, &mut |_| {}))?;
    let total = counter.noise_calls.load(Ordering::SeqCst);
    let mut hooked = Hooked::new(toy(64));
    hooked.budget = Some(total * 3 / 5);
    let mut s = create_session(&dir, hooked.arc())?;
    ensure!(s.generate(&NodeFilter::All, &mut |_| {}).is_err(), "simulated crash did not happen");
    let finalized: BTreeMap<usize, String> = ok(Project::load(&dir))?.finalized;
    ensure!(!finalized.is_empty(), "nothing finalized before the crash");
    ensure!(finalized.len() < 7, "every node finished before the crash");

    let project = ok(Project::load(&dir))?;
    let mut files = BTreeMap::new();
    for (&node, set) in &project.candidates {
        for c in &set.candidates {
            let rel = c.image.clone().ok_or("candidate without image")?;
            files.insert((node, c.id), (rel.clone(), file_state(&dir, &rel)?));
        }
    }
    std::thread::sleep(Duration::from_millis(20));
    let mut resumed = ok(Session::open(&dir, Arc::new(toy(64))))?;
    let summary = ok(resumed.generate(&NodeFilter::All, &mut |_| {}))?;
    ensure!(summary.complete, "resume did not complete");
    let regenerated: BTreeSet<usize> = summary.generated.iter().copied().collect();
    for node in finalized.keys() {
        ensure!(!regenerated.contains(node), "finalized node {node} was regenerated");
    }
    for (rel, state) in files.values() {
        ensure!(file_state(&dir, rel)? == *state, "{rel} was rewritten");
    }

    // The resumed project matches an uninterrupted run.
    let clean = tmp.path().join("clean");
    let mut c = create_session(&clean, Arc::new(toy(64)))?;
    ok(c.generate(&NodeFilter::All, &mut |_| {}))?;
    ensure!(frame_bytes(&dir, 8)? == frame_bytes(&clean, 8)?, "resumed frames differ from a clean run");

    // Round trip, including overrides and user selections.
    let mut p = ok(Project::load(&dir))?;
    ensure!(p == *resumed.project(), "load differs from the in-memory project");
    ok(resumed.set_prompt_override(6, Some("a red apple".into())))?;
    ok(resumed.set_pose_override(6, Some(standing_figure())))?;
    ok(resumed.select(4, 1))?;
    p = ok(Project::load(&dir))?;
    ensure!(p == *resumed.project(), "load differs after mutations");
    let text = ok(serde_json::to_string(&p))?;
    let back: Project = ok(serde_json::from_str(&text))?;
    ensure!(back == p, "JSON round trip changed the project");
    Ok(())
}
