//! End-to-end acceptance checks. Each test prints one PASS/FAIL line with
//! the measured value and its tolerance, then asserts.
//!
//! The training checks run the default desk-scale schedule twice and take
//! several minutes; `cargo test --release` or the test profile's opt-level
//! keeps them within budget.

use std::sync::OnceLock;
use std::time::{Duration, Instant};

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use nvs_core::experiment::{default_rig, evaluate};
use nvs_core::field::plane_depths;
use nvs_core::geometry::{Camera, Pose};
use nvs_core::io::config::RunConfig;
use nvs_core::losses::{
    branch_loss, point_loss, pseudo_depth_loss, BranchTargets, BranchWeights, LossWeights, Metrics, SparsePoint,
    SparsePoints,
};
use nvs_core::optimizer::{train, TrainState};
use nvs_core::pipeline::{
    loss_and_grad, render_all, render_mpi, Model, ModelSpec, Objective, Patch, TrainView, Trainable, Variates,
};
use nvs_core::raster::Image;
use nvs_core::render::{composite, compositing_weights, Branch};
use nvs_core::sampler::{inverse_transform_sample, pdf_from_weights, Origin, SampleSet};
use nvs_core::scene::{mpi_from_scene, oracle_render, scene_preset, PresetFrame};

fn report(n: u32, what: &str, passed: bool, detail: String) {
    println!("criterion {n} {what}: {} ({detail})", if passed { "PASS" } else { "FAIL" });
}

/// Random ray: 1..=64 samples, densities in [0, 8), intervals in [0, 0.6).
fn random_ray(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<f64>) {
    let k = rng.gen_range(1..=64);
    let sigma = (0..k).map(|_| rng.gen_range(0.0..8.0)).collect();
    let delta = (0..k).map(|_| rng.gen_range(0.0..0.6)).collect();
    (sigma, delta)
}

#[test]
fn c1_compositing_against_cumulative_products() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let (mut weight_err, mut color_err, mut conservation_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..10_000 {
        let (sigma, delta) = random_ray(&mut rng);
        let n = sigma.len();
        // reference: T_i as an explicit product of survival factors
        let alpha: Vec<f64> = sigma.iter().zip(&delta).map(|(s, d)| 1.0 - (-s * d).exp()).collect();
        let reference: Vec<f64> = (0..n)
            .map(|i| alpha[i] * alpha[..i].iter().map(|a| 1.0 - a).product::<f64>())
            .collect();
        let (w, _) = compositing_weights(&sigma, &delta);
        for (a, b) in w.iter().zip(&reference) {
            weight_err = weight_err.max((a - b).abs());
        }
        let optical: f64 = sigma.iter().zip(&delta).map(|(s, d)| s * d).sum();
        conservation_err = conservation_err.max((w.iter().sum::<f64>() - (1.0 - (-optical).exp())).abs());

        let color: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let t: Vec<f64> = (0..n).map(|i| 1.0 + i as f64 * 0.1).collect();
        let set = SampleSet::with_deltas(t, color.clone(), sigma.clone(), delta.clone(), vec![Origin::Coarse; n])
            .unwrap();
        let c = composite(&set);
        for ch in 0..3 {
            let want: f64 = reference.iter().zip(&color).map(|(w, c)| w * c[ch]).sum();
            color_err = color_err.max((c.rgb[ch] - want).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = weight_err <= 1e-12 && color_err <= 1e-12 && conservation_err <= 1e-12 && secs < 10.0;
    report(
        1,
        "compositing",
        passed,
        format!(
            "weights {weight_err:.2e}, color {color_err:.2e}, conservation {conservation_err:.2e}, tol 1e-12, {secs:.2}s of 10s"
        ),
    );
    assert!(passed);
}

/// A two-view 4x4 problem exercising every parameter block.
struct TinyProblem {
    model: Model,
    src: Camera,
    image: Image,
    views: Vec<TrainView>,
    loss: LossWeights,
}

impl TinyProblem {
    fn new(seed: u64) -> Self {
        let spec = ModelSpec {
            width: 4,
            height: 4,
            n_coarse: 5,
            n_fine: 3,
            extractor_hidden: 3,
            decoder_hidden: 8,
            decoder_layers: 2,
            ..ModelSpec::default()
        };
        let model = Model::init(spec, seed).unwrap();
        let src = Camera::new(4.0, 4.0, 1.5, 1.5, 4, 4, Pose::identity()).unwrap();
        let tgt = src.with_pose(Pose::from_center(Matrix3::identity(), Vector3::new(-0.08, 0.12, 0.0)).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let image = Image::from_vec(4, 4, 3, (0..48).map(|_| rng.gen()).collect()).unwrap();
        let teacher = |rng: &mut ChaCha8Rng| {
            Image::from_vec(4, 4, 1, (0..16).map(|_| rng.gen_range(0.3..1.0)).collect()).unwrap()
        };
        let points = SparsePoints::new(vec![
            SparsePoint { x: 1, y: 2, z: 1.7 },
            SparsePoint { x: 3, y: 0, z: 2.9 },
        ])
        .unwrap();
        let views = vec![
            TrainView {
                camera: src,
                image: image.clone(),
                teacher: Some(teacher(&mut rng)),
                points: Some(points.clone()),
            },
            TrainView {
                camera: tgt,
                image: Image::from_vec(4, 4, 3, (0..48).map(|_| rng.gen()).collect()).unwrap(),
                teacher: Some(teacher(&mut rng)),
                points: Some(points),
            },
        ];
        // the SSIM window is wider than a 4x4 image
        let loss = LossWeights {
            ssim: 0.0,
            ..LossWeights::default()
        };
        Self {
            model,
            src,
            image,
            views,
            loss,
        }
    }

    fn objective(&self, variates: Variates) -> Objective<'_> {
        Objective {
            source_image: &self.image,
            source: &self.src,
            views: &self.views,
            loss: &self.loss,
            branches: BranchWeights::FULL,
            variates,
        }
    }

    fn patches(&self) -> Vec<Patch> {
        self.views.iter().enumerate().map(|(i, v)| Patch::full(i, &v.camera)).collect()
    }
}

#[test]
fn c2_full_pipeline_gradients_against_finite_differences() {
    let start = Instant::now();
    let p = TinyProblem::new(7);
    let variates = Variates::Stratified { seed: 7, iteration: 3 };
    let patches = p.patches();
    let total = |m: &Model, p: &TinyProblem| loss_and_grad(m, &p.objective(variates), &patches, None).unwrap().0.total;
    let grads = loss_and_grad(&p.model, &p.objective(variates), &patches, Some(Trainable::ALL))
        .unwrap()
        .1
        .unwrap();

    // 64 coordinates spread over the blocks, each with a gradient large
    // enough for a relative comparison to mean something
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut coords = Vec::new();
    while coords.len() < 64 {
        let b = coords.len() % grads.blocks.len();
        let i = rng.gen_range(0..grads.blocks[b].len());
        if grads.blocks[b][i].abs() > 1e-5 && !coords.contains(&(b, i)) {
            coords.push((b, i));
        }
    }
    let h = 1e-5;
    let mut worst = 0.0f64;
    for &(b, i) in &coords {
        let orig = p.model.params.blocks[b].values[i];
        let mut model = p.model.clone();
        model.params.blocks[b].values[i] = orig + h;
        let plus = total(&model, &p);
        model.params.blocks[b].values[i] = orig - h;
        let minus = total(&model, &p);
        let fd = (plus - minus) / (2.0 * h);
        let an = grads.blocks[b][i];
        worst = worst.max((fd - an).abs() / fd.abs().max(an.abs()));
    }
    let secs = start.elapsed().as_secs_f64();
    let passed = worst < 1e-4 && secs < 120.0;
    report(
        2,
        "gradients",
        passed,
        format!("worst relative error {worst:.2e} over 64 coordinates, tol 1e-4, {secs:.1}s of 120s"),
    );
    assert!(passed);
}

#[test]
fn c3_checker_stack_mpi_matches_exact_render() {
    let rig = default_rig(48, 48).unwrap();
    let (near, far, planes) = (1.0, 4.0, 32);
    let frame = PresetFrame {
        camera: rig.source,
        near,
        far,
        planes,
    };
    let scene = scene_preset("checker-stack", &frame).unwrap();
    let mpi = mpi_from_scene(&scene, &plane_depths(near, far, planes).unwrap()).unwrap();
    let mut worst = 0.0f64;
    for cam in std::iter::once(&rig.source).chain(&rig.train).chain(&rig.held_out) {
        let r = render_mpi(&mpi, &rig.source, cam).unwrap();
        let o = oracle_render(&scene, cam);
        for (a, b) in r.rgb.data.iter().zip(&o.rgb.data) {
            worst = worst.max((a - b).abs());
        }
        for (a, b) in r.opacity.data.iter().zip(&o.opacity.data) {
            worst = worst.max((a - b).abs());
        }
    }
    let passed = worst <= 1e-9;
    report(3, "checker-stack MPI", passed, format!("max abs difference {worst:.2e}, tol 1e-9, 7 cameras"));
    assert!(passed);
}

#[test]
fn c4_inverse_transform_sampling_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let bins = 16;
    let mut t: Vec<f64> = (0..bins).map(|_| rng.gen_range(1.0..4.0)).collect();
    t.sort_by(f64::total_cmp);
    let weights: Vec<f64> = (0..bins).map(|_| rng.gen_range(0.02..1.0)).collect();
    // expected layout: bins centered on the samples, masses proportional
    // to the weights
    let sum: f64 = weights.iter().sum();
    let masses: Vec<f64> = weights.iter().map(|w| w / sum).collect();
    let inner: Vec<f64> = t.windows(2).map(|p| 0.5 * (p[0] + p[1])).collect();

    let pdf = pdf_from_weights(&t, weights);
    let draws = 100_000;
    let mut u: Vec<f64> = (0..draws).map(|_| rng.gen()).collect();
    u.sort_by(f64::total_cmp);
    let depths = inverse_transform_sample(&pdf, &u).unwrap();
    let monotone = depths.windows(2).all(|p| p[1] >= p[0]);
    let in_range = depths.iter().all(|d| (t[0]..=t[bins - 1]).contains(d));

    let mut counts = vec![0usize; bins];
    for d in &depths {
        counts[inner.partition_point(|e| e <= d)] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&masses)
        .map(|(&c, &m)| (c as f64 - m * draws as f64).powi(2) / (m * draws as f64))
        .sum();
    let p = 1.0 - ChiSquared::new((bins - 1) as f64).unwrap().cdf(chi2);
    let passed = p > 0.01 && monotone && in_range;
    report(
        4,
        "sampling",
        passed,
        format!("chi-squared {chi2:.2} on 15 dof, p = {p:.3} (need > 0.01), monotone {monotone}, in range {in_range}"),
    );
    assert!(passed);
}

struct TrainedRun {
    /// Per held-out view, metrics of coarse, fine and joint.
    metrics: Vec<[(Branch, Metrics); 3]>,
    elapsed: Duration,
}

fn train_three_planes(pseudo_depth: f64) -> TrainedRun {
    let mut config = RunConfig::default();
    config.loss.pseudo_depth = pseudo_depth;
    let scene = config.build_scene().unwrap();
    let source = config.source_camera().unwrap();
    let rig = nvs_core::experiment::Rig {
        source,
        train: config.target_cameras().unwrap(),
        held_out: config.held_out_cameras().unwrap(),
    };
    let data = nvs_core::experiment::training_data(
        &scene,
        &rig,
        config.scene.noise_level,
        config.scene.points_per_view,
        config.seed,
    )
    .unwrap();
    let start = Instant::now();
    let mut state = TrainState::new(Model::init(config.model_spec(), config.seed).unwrap());
    train(&mut state, &data, &config.train_config(), |_, _| Ok(())).unwrap();
    let elapsed = start.elapsed();
    let metrics = evaluate(&state.model, &data.source_image, &source, &scene, &rig.held_out).unwrap();
    TrainedRun { metrics, elapsed }
}

fn default_run() -> &'static TrainedRun {
    static RUN: OnceLock<TrainedRun> = OnceLock::new();
    RUN.get_or_init(|| train_three_planes(RunConfig::default().loss.pseudo_depth))
}

fn branch(m: &[(Branch, Metrics); 3], b: Branch) -> Metrics {
    m.iter().find(|(x, _)| *x == b).unwrap().1
}

#[test]
fn c5_three_planes_desk_scale_training() {
    assert_eq!(RunConfig::default().scene.preset.as_deref(), Some("three-planes"));
    let run = default_run();
    let mut passed = run.elapsed < Duration::from_secs(20 * 60) && run.metrics.len() == 2;
    let mut detail = Vec::new();
    for (i, m) in run.metrics.iter().enumerate() {
        let (j, c) = (branch(m, Branch::Joint), branch(m, Branch::Coarse));
        passed &= j.psnr >= 30.0 && j.ssim >= 0.95 && j.psnr >= c.psnr;
        detail.push(format!(
            "view {i}: joint {:.2} dB / ssim {:.4}, coarse {:.2} dB",
            j.psnr, j.ssim, c.psnr
        ));
    }
    detail.push(format!("{:.0}s of 1200s", run.elapsed.as_secs_f64()));
    report(
        5,
        "three-planes training (joint >= 30 dB, ssim >= 0.95, joint >= coarse)",
        passed,
        detail.join("; "),
    );
    assert!(passed);
}

fn mean_joint_rms(run: &TrainedRun) -> f64 {
    run.metrics.iter().map(|m| branch(m, Branch::Joint).rms).sum::<f64>() / run.metrics.len() as f64
}

#[test]
fn c6_pseudo_depth_supervision_lowers_depth_error() {
    assert_eq!(RunConfig::default().loss.pseudo_depth, 1.0);
    let with = mean_joint_rms(default_run());
    let without = mean_joint_rms(&train_three_planes(0.0));
    let passed = with < without;
    report(
        6,
        "pseudo-depth ablation",
        passed,
        format!("joint RMS depth error {with:.4} with the term, {without:.4} without"),
    );
    assert!(passed);
}

#[test]
fn c7_depth_losses_ignore_disparity_scale() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let (w, h) = (12, 9);
    let disparity = Image::from_vec(w, h, 1, (0..w * h).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap();
    let teacher = Image::from_vec(w, h, 1, (0..w * h).map(|_| rng.gen_range(0.2..1.0)).collect()).unwrap();
    let points = SparsePoints::new(
        (0..10)
            .map(|_| SparsePoint {
                x: rng.gen_range(0..w),
                y: rng.gen_range(0..h),
                z: rng.gen_range(1.0..4.0),
            })
            .collect(),
    )
    .unwrap();
    let base_point = point_loss(&disparity, &points).unwrap();
    let base_pseudo = pseudo_depth_loss(&disparity, &teacher, 1.0, true).unwrap();
    let mut worst = 0.0f64;
    for k in [0.1, 1.0, 10.0] {
        let scaled = disparity.map(|d| k * d);
        worst = worst.max((point_loss(&scaled, &points).unwrap() - base_point).abs());
        worst = worst.max((pseudo_depth_loss(&scaled, &teacher, 1.0, true).unwrap() - base_pseudo).abs());
    }
    let passed = worst <= 1e-12 && base_point > 0.0 && base_pseudo > 0.0;
    report(
        7,
        "scale invariance",
        passed,
        format!("largest change {worst:.2e} for k in 0.1, 1, 10, tol 1e-12"),
    );
    assert!(passed);
}

#[test]
fn c8_total_loss_composition() {
    let p = TinyProblem::new(21);
    let patches = p.patches();
    let (rep, _) = loss_and_grad(&p.model, &p.objective(Variates::Midpoint), &patches, None).unwrap();
    // each branch rendered and scored on its own
    let mut per_branch = [0.0; 3];
    for (i, v) in p.views.iter().enumerate() {
        let rendered = render_all(&p.model, &p.image, &p.src, &v.camera).unwrap();
        let targets = BranchTargets {
            image: &v.image,
            points: v.points.as_ref(),
            teacher: v.teacher.as_ref(),
        };
        for (slot, r) in per_branch.iter_mut().zip(&rendered) {
            *slot += branch_loss(r, &targets, &p.loss).unwrap().total;
        }
        assert_eq!(patches[i].view, i);
    }
    let [lc, lf, lj] = per_branch;
    let expected = lc + 0.4 * lf + lj;
    let err = (rep.total - expected).abs();
    let passed = err <= 1e-12 && lc > 0.0 && lf > 0.0 && lj > 0.0;
    report(
        8,
        "loss composition",
        passed,
        format!("|total - (Lc + 0.4 Lf + Lj)| = {err:.2e}, tol 1e-12"),
    );
    assert!(passed);
}

#[test]
fn c9_identical_training_runs_write_identical_checkpoints() {
    let mut config = RunConfig::default();
    config.cameras.width = 16;
    config.cameras.height = 16;
    config.cameras.focal = 16.0;
    config.model.n_coarse = 8;
    config.model.n_fine = 4;
    config.model.extractor_hidden = 4;
    config.model.decoder_hidden = 16;
    config.model.decoder_layers = 2;
    config.train.stage1_steps = 4;
    config.train.stage2_steps = 4;
    config.train.patch_size = 12;
    config.train.fine_patch_size = 12;
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, config.to_toml()).unwrap();
        let out = nvs_core::commands::train(&path, false, None).unwrap();
        std::fs::read(out.checkpoint).unwrap()
    };
    let (a, b) = (run(), run());
    let passed = a == b && !a.is_empty();
    report(
        9,
        "determinism",
        passed,
        format!("two runs of 8 steps, checkpoints of {} and {} bytes, identical: {}", a.len(), b.len(), a == b),
    );
    assert!(passed);
}
