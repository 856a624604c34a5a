//! Self-check suites run by `nvs check`: compositing against an independent
//! reference, conservation, gradients against finite differences, exact
//! representation of a layered scene, and the sampler's distribution.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::experiment::default_rig;
use crate::field::plane_depths;
use crate::geometry::{Camera, Pose};
use crate::losses::{BranchWeights, LossWeights};
use crate::pipeline::{loss_and_grad, render_mpi, Model, ModelSpec, Objective, Patch, Trainable, TrainView, Variates};
use crate::raster::Image;
use crate::render::{composite, composite_backward, compositing_weights, CompositeGrad};
use crate::sampler::{inverse_transform_sample, pdf_from_weights, Origin, SampleSet};
use crate::scene::{mpi_from_scene, oracle_render, scene_preset, PresetFrame};

/// Deliberate defects used to confirm the suites catch them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Compositing sees every density with its sign flipped.
    SigmaSign,
}

impl FromStr for Fault {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma-sign" => Ok(Fault::SigmaSign),
            _ => Err(Error::Domain(format!("unknown fault {s:?} (expected sigma-sign)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub name: &'static str,
    /// Pass threshold on `measured`.
    pub tolerance: f64,
    pub measured: f64,
    pub passed: bool,
    pub seconds: f64,
    pub note: String,
}

impl fmt::Display for SuiteReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<20} measured {:.3e} tolerance {:.1e} ({:.2}s) {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.measured,
            self.tolerance,
            self.seconds,
            self.note
        )
    }
}

fn weights_with(fault: Option<Fault>, sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    match fault {
        Some(Fault::SigmaSign) => {
            let flipped: Vec<f64> = sigma.iter().map(|s| -s).collect();
            compositing_weights(&flipped, delta).0
        }
        None => compositing_weights(sigma, delta).0,
    }
}

/// Random per-ray densities and intervals.
pub fn random_rays(n: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let k = rng.gen_range(1..=48);
            let sigma = (0..k).map(|_| rng.gen_range(0.0..5.0)).collect();
            let delta = (0..k).map(|_| rng.gen_range(0.0..0.5)).collect();
            (sigma, delta)
        })
        .collect()
}

/// Weights from a running product of per-sample survival factors.
fn product_reference(sigma: &[f64], delta: &[f64]) -> Vec<f64> {
    let mut survive = 1.0;
    sigma
        .iter()
        .zip(delta)
        .map(|(s, d)| {
            let keep = (-s * d).exp();
            let w = survive * (1.0 - keep);
            survive *= keep;
            w
        })
        .collect()
}

/// Compositing weights against the product reference, and the sum of the
/// weights against `1 - exp(-sum sigma delta)`.
pub fn compositing_suites(fault: Option<Fault>, rays: usize, seed: u64) -> [SuiteReport; 2] {
    let start = Instant::now();
    let (mut ref_err, mut cons_err) = (0.0f64, 0.0f64);
    for (sigma, delta) in random_rays(rays, seed) {
        let w = weights_with(fault, &sigma, &delta);
        for (a, b) in w.iter().zip(product_reference(&sigma, &delta)) {
            ref_err = ref_err.max((a - b).abs());
        }
        let optical: f64 = sigma.iter().zip(&delta).map(|(s, d)| s * d).sum();
        let total: f64 = w.iter().sum();
        cons_err = cons_err.max((total - (1.0 - (-optical).exp())).abs());
    }
    let seconds = start.elapsed().as_secs_f64();
    let note = format!("{rays} random rays");
    [
        SuiteReport {
            name: "compositing",
            tolerance: 1e-12,
            measured: ref_err,
            passed: ref_err <= 1e-12,
            seconds,
            note: note.clone(),
        },
        SuiteReport {
            name: "conservation",
            tolerance: 1e-12,
            measured: cons_err,
            passed: cons_err <= 1e-12,
            seconds,
            note,
        },
    ]
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compositing reverse pass and the full training objective, both against
/// central finite differences.
pub fn gradient_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let h = 1e-6;
    for _ in 0..32 {
        let n = rng.gen_range(2..12);
        let mut t: Vec<f64> = (0..n).map(|_| rng.gen_range(1.0..4.0)).collect();
        t.sort_by(f64::total_cmp);
        let color: Vec<[f64; 3]> = (0..n).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        let sigma: Vec<f64> = (0..n).map(|_| rng.gen_range(0.1..3.0)).collect();
        let set = SampleSet::new(t, color, sigma, vec![Origin::Coarse; n])?;
        let g = CompositeGrad {
            rgb: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            opacity: rng.gen_range(-1.0..1.0),
            depth: rng.gen_range(-1.0..1.0),
            disparity: rng.gen_range(-1.0..1.0),
        };
        let objective = |s: &SampleSet| {
            let c = composite(s);
            g.rgb[0] * c.rgb[0] + g.rgb[1] * c.rgb[1] + g.rgb[2] * c.rgb[2]
                + g.opacity * c.opacity
                + g.depth * c.depth
                + g.disparity * c.disparity
        };
        let analytic = composite_backward(&set, &composite(&set), &g);
        for i in 0..n {
            let mut p = set.clone();
            let mut m = set.clone();
            p.sigma[i] += h;
            m.sigma[i] -= h;
            worst = worst.max(rel_err((objective(&p) - objective(&m)) / (2.0 * h), analytic.sigma[i]));
            let mut p = set.clone();
            let mut m = set.clone();
            p.color[i][1] += h;
            m.color[i][1] -= h;
            worst = worst.max(rel_err((objective(&p) - objective(&m)) / (2.0 * h), analytic.color[i][1]));
        }
    }
    let probes = 64;
    worst = worst.max(pipeline_gradient_error(seed, probes)?);
    Ok(SuiteReport {
        name: "gradients",
        tolerance: 1e-4,
        measured: worst,
        passed: worst < 1e-4,
        seconds: start.elapsed().as_secs_f64(),
        note: format!("compositing + {probes} full-objective coordinates, 4x4 image"),
    })
}

/// Worst relative error between the analytic gradient of the full objective
/// (all three branches, every parameter block) and central differences at
/// `probes` random coordinates with non-negligible gradient. SSIM is left
/// out because its window is larger than the 4x4 image.
pub fn pipeline_gradient_error(seed: u64, probes: usize) -> Result<f64> {
    let spec = ModelSpec {
        width: 4,
        height: 4,
        n_coarse: 6,
        n_fine: 4,
        extractor_hidden: 4,
        decoder_hidden: 8,
        decoder_layers: 2,
        ..ModelSpec::default()
    };
    let mut model = Model::init(spec, seed)?;
    let src = Camera::new(4.0, 4.0, 1.5, 1.5, 4, 4, Pose::identity())?;
    let tgt = src.with_pose(Pose::from_center(
        nalgebra::Matrix3::identity(),
        nalgebra::Vector3::new(0.1, 0.05, 0.0),
    )?);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let image = Image::from_vec(4, 4, 3, (0..48).map(|_| rng.gen()).collect())?;
    let teacher = Image::from_vec(4, 4, 1, (0..16).map(|_| rng.gen_range(0.3..1.0)).collect())?;
    let views = vec![
        TrainView {
            camera: src,
            image: image.clone(),
            teacher: Some(teacher.clone()),
            points: None,
        },
        TrainView {
            camera: tgt,
            image: image.map(|v| 1.0 - v),
            teacher: Some(teacher),
            points: None,
        },
    ];
    let weights = LossWeights {
        ssim: 0.0,
        ..LossWeights::default()
    };
    let patches = [Patch::full(0, &src), Patch::full(1, &tgt)];
    let eval = |m: &Model, grad: bool| {
        let obj = Objective {
            source_image: &image,
            source: &src,
            views: &views,
            loss: &weights,
            branches: BranchWeights::FULL,
            variates: Variates::Stratified { seed, iteration: 0 },
        };
        loss_and_grad(m, &obj, &patches, grad.then_some(Trainable::ALL))
    };
    let grads = eval(&model, true)?.1.expect("gradients requested");
    let blocks = grads.blocks.len();
    let mut worst = 0.0f64;
    let h = 1e-5;
    for p in 0..probes {
        let b = p % blocks;
        let live: Vec<usize> = (0..grads.blocks[b].len())
            .filter(|&i| grads.blocks[b][i].abs() > 1e-6)
            .collect();
        if live.is_empty() {
            continue;
        }
        let i = live[rng.gen_range(0..live.len())];
        let orig = model.params.blocks[b].values[i];
        model.params.blocks[b].values[i] = orig + h;
        let lp = eval(&model, false)?.0.total;
        model.params.blocks[b].values[i] = orig - h;
        let lm = eval(&model, false)?.0.total;
        model.params.blocks[b].values[i] = orig;
        worst = worst.max(rel_err((lp - lm) / (2.0 * h), grads.blocks[b][i]));
    }
    Ok(worst)
}

/// Largest difference between rendering the analytic MPI of the
/// checker-stack preset and the scene's exact render, over every camera of
/// the default rig. Depth compares with the transmitted remainder credited
/// to the far bound, as the exact render does.
pub fn representation_error(width: usize, height: usize, planes: usize) -> Result<f64> {
    let rig = default_rig(width, height)?;
    let (near, far) = (1.0, 4.0);
    let frame = PresetFrame {
        camera: rig.source,
        near,
        far,
        planes,
    };
    let scene = scene_preset("checker-stack", &frame)?;
    let mpi = mpi_from_scene(&scene, &plane_depths(near, far, planes)?)?;
    let mut worst = 0.0f64;
    for cam in std::iter::once(&rig.source).chain(&rig.train).chain(&rig.held_out) {
        let r = render_mpi(&mpi, &rig.source, cam)?;
        let o = oracle_render(&scene, cam);
        for (a, b) in r.rgb.data.iter().zip(&o.rgb.data) {
            worst = worst.max((a - b).abs());
        }
        for i in 0..o.opacity.data.len() {
            let op = r.opacity.data[i];
            worst = worst.max((op - o.opacity.data[i]).abs());
            let depth = r.depth.data[i] + (1.0 - op) * scene.z_far;
            worst = worst.max((depth - o.depth.data[i]).abs());
        }
    }
    Ok(worst)
}

pub fn representation_suite() -> Result<SuiteReport> {
    let start = Instant::now();
    let err = representation_error(48, 48, 32)?;
    Ok(SuiteReport {
        name: "oracle-equivalence",
        tolerance: 1e-9,
        measured: err,
        passed: err <= 1e-9,
        seconds: start.elapsed().as_secs_f64(),
        note: "checker-stack, 7 cameras".into(),
    })
}

/// Chi-squared p-value of inverse-transform draws against the bin masses of
/// a random 16-bin PDF, and whether sorted variates give sorted depths.
pub fn sampling_statistics(draws: usize, seed: u64) -> Result<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bins = 16;
    let mut t: Vec<f64> = (0..bins).map(|_| rng.gen_range(1.0..4.0)).collect();
    t.sort_by(f64::total_cmp);
    let weights: Vec<f64> = (0..bins).map(|_| rng.gen_range(0.05..1.0)).collect();
    let pdf = pdf_from_weights(&t, weights);
    let mut u: Vec<f64> = (0..draws).map(|_| rng.gen()).collect();
    u.sort_by(f64::total_cmp);
    let depths = inverse_transform_sample(&pdf, &u)?;
    let monotone = depths.windows(2).all(|w| w[1] >= w[0]);
    let mut counts = vec![0usize; bins];
    for d in &depths {
        let k = pdf.edges[1..bins].partition_point(|e| e <= d);
        counts[k] += 1;
    }
    let chi2: f64 = counts
        .iter()
        .zip(&pdf.masses)
        .map(|(&c, &m)| {
            let e = m * draws as f64;
            (c as f64 - e).powi(2) / e
        })
        .sum();
    let dist = ChiSquared::new((bins - 1) as f64).map_err(|e| Error::Domain(e.to_string()))?;
    Ok((1.0 - dist.cdf(chi2), monotone))
}

pub fn sampling_suite(seed: u64) -> Result<SuiteReport> {
    let start = Instant::now();
    let (p, monotone) = sampling_statistics(100_000, seed)?;
    Ok(SuiteReport {
        name: "sampling",
        tolerance: 0.01,
        measured: p,
        passed: p > 0.01 && monotone,
        seconds: start.elapsed().as_secs_f64(),
        note: format!("chi-squared p-value over 16 bins, monotone = {monotone}"),
    })
}

/// Every suite in a fixed order.
pub fn run_all(fault: Option<Fault>) -> Result<Vec<SuiteReport>> {
    let mut out = compositing_suites(fault, 10_000, 1).to_vec();
    out.push(gradient_suite(2)?);
    out.push(representation_suite()?);
    out.push(sampling_suite(3)?);
    Ok(out)
}
