//! Per-ray sample sets: plane-intersection sampling, weight PDFs, inverse
//! transform importance sampling and coarse/fine merging.
//!
//! Sample positions are source-frame plane depths `z`, for coarse and fine
//! samples alike, so merged sets share one coordinate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{domain, Error, Result};
use crate::field::{plane_intervals, MultiPlaneImage};
use crate::geometry::{Camera, SourceRay};
use crate::raster::{bilinear_taps, Taps};
use crate::render::compositing_weights;

/// Sums below this count as an empty ray and fall back to a uniform PDF.
pub const MIN_WEIGHT_SUM: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Origin {
    Coarse,
    Fine,
}

/// Ordered samples along one ray.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleSet {
    pub t: Vec<f64>,
    pub color: Vec<[f64; 3]>,
    pub sigma: Vec<f64>,
    pub delta: Vec<f64>,
    pub origin: Vec<Origin>,
}

impl SampleSet {
    /// Builds a set whose intervals follow from the depths
    /// (see [`plane_intervals`]).
    pub fn new(
        t: Vec<f64>,
        color: Vec<[f64; 3]>,
        sigma: Vec<f64>,
        origin: Vec<Origin>,
    ) -> Result<Self> {
        let delta = plane_intervals(&t);
        Self::with_deltas(t, color, sigma, delta, origin)
    }

    pub fn with_deltas(
        t: Vec<f64>,
        color: Vec<[f64; 3]>,
        sigma: Vec<f64>,
        delta: Vec<f64>,
        origin: Vec<Origin>,
    ) -> Result<Self> {
        let n = t.len();
        if color.len() != n || sigma.len() != n || delta.len() != n || origin.len() != n {
            return Err(Error::Shape("sample set columns differ in length".into()));
        }
        if t.windows(2).any(|w| !(w[1] >= w[0])) {
            return domain("sample depths must be nondecreasing");
        }
        if sigma.iter().any(|s| !(*s >= 0.0)) || delta.iter().any(|d| !(*d >= 0.0)) {
            return domain("densities and intervals must be nonnegative");
        }
        Ok(Self {
            t,
            color,
            sigma,
            delta,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Pulls a gradient on intervals built by [`plane_intervals`] back onto the
/// depths.
pub fn intervals_backward(n: usize, grad_delta: &[f64], grad_t: &mut [f64]) {
    if n < 2 {
        return;
    }
    for i in 0..n - 1 {
        grad_t[i + 1] += grad_delta[i];
        grad_t[i] -= grad_delta[i];
    }
    let g = grad_delta[n - 1] / (n - 1) as f64;
    grad_t[n - 1] += g;
    grad_t[0] -= g;
}

/// Coarse samples of one target ray: one per MPI plane, with the bilinear
/// taps used for each (empty taps for invalid warps).
pub fn coarse_samples_along(
    mpi: &MultiPlaneImage,
    ray: &SourceRay,
    intervals: &[f64],
) -> (SampleSet, Vec<Taps>) {
    let d = mpi.planes();
    let mut set = SampleSet {
        t: mpi.depths().to_vec(),
        color: vec![[0.0; 3]; d],
        sigma: vec![0.0; d],
        delta: intervals.to_vec(),
        origin: vec![Origin::Coarse; d],
    };
    let mut taps = vec![Taps::default(); d];
    for k in 0..d {
        if let Some(hit) = ray.intersect(mpi.depths()[k]) {
            taps[k] = bilinear_taps(hit.x, hit.y, mpi.width(), mpi.height());
            let (c, s) = mpi.sample_taps(k, &taps[k]);
            set.color[k] = c;
            set.sigma[k] = s;
        }
    }
    (set, taps)
}

/// Samples the MPI where the target ray through `px` crosses each plane.
pub fn coarse_samples(
    mpi: &MultiPlaneImage,
    src: &Camera,
    tgt: &Camera,
    px: (f64, f64),
) -> Result<SampleSet> {
    let ray = SourceRay::new(src, tgt, px)?;
    Ok(coarse_samples_along(mpi, &ray, &plane_intervals(mpi.depths())).0)
}

/// Piecewise-constant PDF over depth bins built from compositing weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPdf {
    pub edges: Vec<f64>,
    pub masses: Vec<f64>,
    /// Unnormalized compositing weights the masses came from.
    pub weights: Vec<f64>,
    pub total: f64,
    pub uniform: bool,
}

/// Normalized compositing weights of `s` over bins centered on its samples:
/// bin `k` spans the midpoints to its neighbours, clamped to the first and
/// last depth.
pub fn weight_pdf(s: &SampleSet) -> WeightPdf {
    let (weights, _) = compositing_weights(&s.sigma, &s.delta);
    pdf_from_weights(&s.t, weights)
}

pub fn pdf_from_weights(t: &[f64], weights: Vec<f64>) -> WeightPdf {
    let n = t.len();
    assert!(n > 0, "weight PDF of an empty sample set");
    let mut edges = Vec::with_capacity(n + 1);
    edges.push(t[0]);
    for w in t.windows(2) {
        edges.push(0.5 * (w[0] + w[1]));
    }
    edges.push(t[n - 1]);
    let total: f64 = weights.iter().sum();
    let uniform = !(total >= MIN_WEIGHT_SUM);
    let masses = if uniform {
        vec![1.0 / n as f64; n]
    } else {
        weights.iter().map(|w| w / total).collect()
    };
    WeightPdf {
        edges,
        masses,
        weights,
        total,
        uniform,
    }
}

/// One inverse-transform draw and the bin it landed in.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Draw {
    pub t: f64,
    pub bin: usize,
    /// Position within the bin in `[0, 1]`; `None` when clamped.
    pub frac: Option<f64>,
}

impl WeightPdf {
    fn cdf(&self) -> Vec<f64> {
        let mut cdf = Vec::with_capacity(self.masses.len() + 1);
        let mut acc = 0.0;
        cdf.push(0.0);
        for m in &self.masses {
            acc += m;
            cdf.push(acc);
        }
        cdf
    }

    /// Inverts the piecewise-linear CDF at each sorted variate.
    pub fn draws(&self, u: &[f64]) -> Result<Vec<Draw>> {
        if u.windows(2).any(|w| w[1] < w[0]) {
            return domain("variates must be sorted");
        }
        if u.iter().any(|v| !(0.0..1.0).contains(v)) {
            return domain("variates must lie in [0, 1)");
        }
        let cdf = self.cdf();
        let k_max = self.masses.len();
        let last_nonzero = self.masses.iter().rposition(|&m| m > 0.0).unwrap_or(k_max - 1);
        Ok(u.iter()
            .map(|&u| {
                let k = cdf[1..].partition_point(|&c| c <= u);
                if k >= k_max {
                    return Draw {
                        t: self.edges[last_nonzero + 1],
                        bin: last_nonzero,
                        frac: None,
                    };
                }
                let (lo, hi) = (self.edges[k], self.edges[k + 1]);
                let raw = (u - cdf[k]) / self.masses[k];
                let frac = raw.clamp(0.0, 1.0);
                Draw {
                    t: lo + frac * (hi - lo),
                    bin: k,
                    frac: (raw == frac).then_some(frac),
                }
            })
            .collect())
    }

    /// Gradient of the draws with respect to the normalized masses.
    pub fn mass_backward(&self, draws: &[Draw], grad_t: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.masses.len()];
        for (d, &gt) in draws.iter().zip(grad_t) {
            let Some(frac) = d.frac else { continue };
            if gt == 0.0 {
                continue;
            }
            let k = d.bin;
            let width = self.edges[k + 1] - self.edges[k];
            let rate = width / self.masses[k];
            for gi in &mut g[..k] {
                *gi -= gt * rate;
            }
            g[k] -= gt * frac * rate;
        }
        g
    }

    /// Gradient of the normalized masses with respect to the raw weights.
    pub fn weight_backward(&self, grad_masses: &[f64]) -> Vec<f64> {
        if self.uniform {
            return vec![0.0; self.masses.len()];
        }
        let dot: f64 = grad_masses.iter().zip(&self.masses).map(|(a, b)| a * b).sum();
        grad_masses.iter().map(|g| (g - dot) / self.total).collect()
    }
}

/// Depths drawn by inverting the PDF's CDF at the sorted variates `u`.
pub fn inverse_transform_sample(pdf: &WeightPdf, u: &[f64]) -> Result<Vec<f64>> {
    Ok(pdf.draws(u)?.into_iter().map(|d| d.t).collect())
}

/// Stratified variates `(j + xi_j) / n`, sorted.
pub fn stratified_variates(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n)
        .map(|j| ((j as f64 + rng.gen::<f64>()) / n as f64).min(1.0 - f64::EPSILON))
        .collect()
}

/// Deterministic bin midpoints `(j + 1/2) / n`.
pub fn midpoint_variates(n: usize) -> Vec<f64> {
    (0..n).map(|j| (j as f64 + 0.5) / n as f64).collect()
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based generator for one (seed, ray, iteration) triple.
pub fn ray_rng(seed: u64, ray_id: u64, iteration: u64) -> ChaCha8Rng {
    let key = splitmix(splitmix(splitmix(seed) ^ ray_id) ^ iteration.rotate_left(32));
    ChaCha8Rng::seed_from_u64(key)
}

/// Union of two sample sets ordered by depth, coarse first on ties. Coarse
/// samples keep their plane intervals, so each plane contributes the same
/// optical thickness as in the coarse render; a fine sample's interval runs
/// to the next merged sample (the last one takes the mean spacing). Fine
/// samples of zero density therefore leave the coarse composite unchanged.
/// Also returns where each merged sample came from.
pub fn merge_samples_indexed(
    coarse: &SampleSet,
    fine: &SampleSet,
) -> (SampleSet, Vec<(Origin, usize)>) {
    let mut order: Vec<(Origin, usize)> = (0..coarse.len())
        .map(|i| (Origin::Coarse, i))
        .chain((0..fine.len()).map(|i| (Origin::Fine, i)))
        .collect();
    let pick = |&(o, i): &(Origin, usize)| match o {
        Origin::Coarse => coarse.t[i],
        Origin::Fine => fine.t[i],
    };
    order.sort_by(|a, b| pick(a).total_cmp(&pick(b)).then(a.0.cmp(&b.0)));
    let mut merged = SampleSet::default();
    for &(o, i) in &order {
        let src = match o {
            Origin::Coarse => coarse,
            Origin::Fine => fine,
        };
        merged.t.push(src.t[i]);
        merged.color.push(src.color[i]);
        merged.sigma.push(src.sigma[i]);
        merged.origin.push(o);
    }
    merged.delta = plane_intervals(&merged.t);
    for (m, &(o, i)) in order.iter().enumerate() {
        if o == Origin::Coarse {
            merged.delta[m] = coarse.delta[i];
        }
    }
    (merged, order)
}

/// Pulls a gradient on merged intervals back onto the merged depths. Coarse
/// intervals are inputs, not functions of the merged depths, so only the
/// fine ones contribute.
pub fn merged_intervals_backward(merged: &SampleSet, grad_delta: &[f64], grad_t: &mut [f64]) {
    let fine_only: Vec<f64> = grad_delta
        .iter()
        .zip(&merged.origin)
        .map(|(&g, &o)| if o == Origin::Fine { g } else { 0.0 })
        .collect();
    intervals_backward(merged.len(), &fine_only, grad_t);
}

pub fn merge_samples(coarse: &SampleSet, fine: &SampleSet) -> SampleSet {
    merge_samples_indexed(coarse, fine).0
}
