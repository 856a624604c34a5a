//! Radiance field representations: the coarse multi-plane image and the fine
//! decoder fed by positional encodings and sampled image features.

pub mod activation;
pub mod decoder;
pub mod encoding;
pub mod extractor;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::raster::{bilinear_taps, Taps};
use activation::{sigmoid, sigmoid_grad, softplus, softplus_grad, softplus_inverse};
pub use decoder::{FineDecoder, Mlp};
pub use encoding::positional_encoding;
pub use extractor::{FeatureExtractor, FeatureMap, FEATURE_DIM};

/// `D` planes of `H x W x (r, g, b, sigma)` at strictly increasing depths in
/// the source camera frustum.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPlaneImage {
    depths: Vec<f64>,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl MultiPlaneImage {
    pub fn new(depths: Vec<f64>, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if depths.len() < 2 {
            return domain("a multi-plane image needs at least two planes");
        }
        if depths.windows(2).any(|w| !(w[1] > w[0])) || !(depths[0] > 0.0) {
            return domain("plane depths must be positive and strictly increasing");
        }
        if data.len() != depths.len() * width * height * 4 {
            return Err(Error::Shape(format!(
                "{} values for {} planes of {width}x{height}x4",
                data.len(),
                depths.len()
            )));
        }
        for px in data.chunks(4) {
            if px[..3].iter().any(|c| !(0.0..=1.0).contains(c)) || !(px[3] >= 0.0) {
                return domain("colors must lie in [0, 1] and densities be nonnegative");
            }
        }
        Ok(Self {
            depths,
            width,
            height,
            data,
        })
    }

    pub fn depths(&self) -> &[f64] {
        &self.depths
    }

    pub fn planes(&self) -> usize {
        self.depths.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height * 4
    }

    pub fn texel(&self, k: usize, x: usize, y: usize) -> [f64; 4] {
        let i = (k * self.width * self.height + y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }

    /// Color and density of plane `k` (0-based) through precomputed taps.
    pub fn sample_taps(&self, k: usize, taps: &Taps) -> ([f64; 3], f64) {
        let plane = &self.data[k * self.plane_len()..(k + 1) * self.plane_len()];
        let mut c = [0.0; 3];
        let mut s = 0.0;
        for (i, w) in taps.iter() {
            let t = &plane[i * 4..i * 4 + 4];
            c[0] += w * t[0];
            c[1] += w * t[1];
            c[2] += w * t[2];
            s += w * t[3];
        }
        (c, s)
    }

    /// Zero-padded bilinear lookup on plane `k` (0-based) at continuous
    /// source pixel `(x, y)`.
    pub fn sample(&self, k: usize, x: f64, y: f64) -> ([f64; 3], f64) {
        self.sample_taps(k, &bilinear_taps(x, y, self.width, self.height))
    }
}

/// Bilinear lookup on plane `k` (0-based).
pub fn sample_mpi(mpi: &MultiPlaneImage, k: usize, x: f64, y: f64) -> ([f64; 3], f64) {
    mpi.sample(k, x, y)
}

/// `count` depths between `near` and `far`, uniformly spaced in disparity.
pub fn plane_depths(near: f64, far: f64, count: usize) -> Result<Vec<f64>> {
    if count < 2 {
        return domain(format!("need at least two planes, got {count}"));
    }
    if !(near > 0.0 && far > near && far.is_finite()) {
        return domain(format!("need 0 < near < far, got near={near} far={far}"));
    }
    let (a, b) = (1.0 / near, 1.0 / far);
    Ok((0..count)
        .map(|k| {
            if k == 0 {
                near
            } else if k + 1 == count {
                far
            } else {
                let s = k as f64 / (count - 1) as f64;
                1.0 / (a + s * (b - a))
            }
        })
        .collect())
}

/// Interval widths for ordered depths: forward differences, with the last
/// interval set to the mean of the preceding ones. A lone depth gets a unit
/// interval.
pub fn plane_intervals(depths: &[f64]) -> Vec<f64> {
    let n = depths.len();
    let mut d = Vec::with_capacity(n);
    for w in depths.windows(2) {
        d.push(w[1] - w[0]);
    }
    match n {
        0 => {}
        1 => d.push(1.0),
        _ => d.push((depths[n - 1] - depths[0]) / (n - 1) as f64),
    }
    d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MpiMode {
    /// Freely trainable per-scene grid.
    Direct,
    /// Pointwise linear head over the source feature map.
    Feedforward,
}

/// Maps trainable parameters (and, in feedforward mode, source features) to
/// a multi-plane image. Densities are parameterized per unit of plane
/// interval: `sigma_k = softplus(raw) / delta_k`, so the raw value sets the
/// plane's optical thickness directly.
#[derive(Debug, Clone, PartialEq)]
pub struct CoarsePredictor {
    pub mode: MpiMode,
    pub depths: Vec<f64>,
    pub width: usize,
    pub height: usize,
    intervals: Vec<f64>,
}

impl CoarsePredictor {
    pub fn new(mode: MpiMode, depths: Vec<f64>, width: usize, height: usize) -> Self {
        let intervals = plane_intervals(&depths);
        Self {
            mode,
            depths,
            width,
            height,
            intervals,
        }
    }

    pub fn planes(&self) -> usize {
        self.depths.len()
    }

    pub fn intervals(&self) -> &[f64] {
        &self.intervals
    }

    pub fn param_count(&self) -> usize {
        let d = self.planes();
        match self.mode {
            MpiMode::Direct => d * self.width * self.height * 4,
            MpiMode::Feedforward => (FEATURE_DIM + 1) * d * 4,
        }
    }

    /// Raw density giving every plane an initial alpha of `1 / D`.
    pub fn initial_density_raw(&self) -> f64 {
        let d = self.planes() as f64;
        softplus_inverse(-(1.0 - 1.0 / d).ln())
    }

    /// Direct mode: colors at 0.5 and alpha `1/D` on every plane. Feedforward
    /// mode: small random head weights with the same biases.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let s0 = self.initial_density_raw();
        let d = self.planes();
        match self.mode {
            MpiMode::Direct => {
                let mut p = vec![0.0; self.param_count()];
                p.chunks_mut(4).for_each(|t| t[3] = s0);
                p
            }
            MpiMode::Feedforward => {
                let out = d * 4;
                let mut p = vec![0.0; self.param_count()];
                let a = (6.0 / (FEATURE_DIM + out) as f64).sqrt() * 0.1;
                p[..FEATURE_DIM * out]
                    .iter_mut()
                    .for_each(|w| *w = rng.gen_range(-a..a));
                p[FEATURE_DIM * out..].chunks_mut(4).for_each(|b| b[3] = s0);
                p
            }
        }
    }

    /// Returns the MPI and the raw pre-activations needed by
    /// [`CoarsePredictor::backward`].
    pub fn predict(
        &self,
        params: &[f64],
        features: Option<&FeatureMap>,
    ) -> Result<(MultiPlaneImage, Vec<f64>)> {
        if params.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} coarse parameters, expected {}",
                params.len(),
                self.param_count()
            )));
        }
        let raw = match self.mode {
            MpiMode::Direct => params.to_vec(),
            MpiMode::Feedforward => {
                let f = features.ok_or_else(|| {
                    Error::Domain("feedforward mode needs a feature map".into())
                })?;
                self.head_forward(params, f)?
            }
        };
        let plane_len = self.width * self.height * 4;
        let mut data = vec![0.0; raw.len()];
        for (k, (out, r)) in data
            .chunks_mut(plane_len)
            .zip(raw.chunks(plane_len))
            .enumerate()
        {
            let inv = 1.0 / self.intervals[k];
            for (o, r) in out.chunks_mut(4).zip(r.chunks(4)) {
                o[0] = sigmoid(r[0]);
                o[1] = sigmoid(r[1]);
                o[2] = sigmoid(r[2]);
                o[3] = softplus(r[3]) * inv;
            }
        }
        let mpi = MultiPlaneImage {
            depths: self.depths.clone(),
            width: self.width,
            height: self.height,
            data,
        };
        Ok((mpi, raw))
    }

    /// Raw plane values `[k][y][x][4]` from the pointwise linear head.
    fn head_forward(&self, params: &[f64], f: &FeatureMap) -> Result<Vec<f64>> {
        if f.width != self.width || f.height != self.height || f.channels != FEATURE_DIM {
            return Err(Error::Shape("feature map does not match the MPI grid".into()));
        }
        let d = self.planes();
        let out = d * 4;
        let (w, b) = params.split_at(FEATURE_DIM * out);
        let n = self.width * self.height;
        let mut raw = vec![0.0; d * n * 4];
        let mut acc = vec![0.0; out];
        for p in 0..n {
            acc.copy_from_slice(b);
            for (c, &v) in f.data[p * FEATURE_DIM..(p + 1) * FEATURE_DIM].iter().enumerate() {
                for (a, wt) in acc.iter_mut().zip(&w[c * out..(c + 1) * out]) {
                    *a += v * wt;
                }
            }
            for k in 0..d {
                raw[(k * n + p) * 4..(k * n + p) * 4 + 4].copy_from_slice(&acc[k * 4..k * 4 + 4]);
            }
        }
        Ok(raw)
    }

    /// Pulls a gradient on MPI texel values back to the parameters (and to
    /// the feature map in feedforward mode).
    pub fn backward(
        &self,
        params: &[f64],
        raw: &[f64],
        features: Option<&FeatureMap>,
        grad_mpi: &[f64],
        grad_params: &mut [f64],
        grad_features: Option<&mut [f64]>,
    ) {
        let plane_len = self.width * self.height * 4;
        let mut grad_raw = vec![0.0; raw.len()];
        for (k, ((g, r), gm)) in grad_raw
            .chunks_mut(plane_len)
            .zip(raw.chunks(plane_len))
            .zip(grad_mpi.chunks(plane_len))
            .enumerate()
        {
            let inv = 1.0 / self.intervals[k];
            for ((g, r), gm) in g.chunks_mut(4).zip(r.chunks(4)).zip(gm.chunks(4)) {
                if gm.iter().all(|&v| v == 0.0) {
                    continue;
                }
                g[0] = gm[0] * sigmoid_grad(r[0]);
                g[1] = gm[1] * sigmoid_grad(r[1]);
                g[2] = gm[2] * sigmoid_grad(r[2]);
                g[3] = gm[3] * softplus_grad(r[3]) * inv;
            }
        }
        match self.mode {
            MpiMode::Direct => {
                for (p, g) in grad_params.iter_mut().zip(&grad_raw) {
                    *p += g;
                }
            }
            MpiMode::Feedforward => {
                let f = features.expect("feedforward backward needs the feature map");
                let d = self.planes();
                let out = d * 4;
                let n = self.width * self.height;
                let (w, _) = params.split_at(FEATURE_DIM * out);
                let (gw, gb) = grad_params.split_at_mut(FEATURE_DIM * out);
                let mut gf = grad_features;
                let mut acc = vec![0.0; out];
                for p in 0..n {
                    for k in 0..d {
                        acc[k * 4..k * 4 + 4]
                            .copy_from_slice(&grad_raw[(k * n + p) * 4..(k * n + p) * 4 + 4]);
                    }
                    if acc.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for (b, a) in gb.iter_mut().zip(&acc) {
                        *b += a;
                    }
                    let feat = &f.data[p * FEATURE_DIM..(p + 1) * FEATURE_DIM];
                    for (c, &v) in feat.iter().enumerate() {
                        let row = &mut gw[c * out..(c + 1) * out];
                        for (g, a) in row.iter_mut().zip(&acc) {
                            *g += v * a;
                        }
                        if let Some(gf) = gf.as_deref_mut() {
                            let wr = &w[c * out..(c + 1) * out];
                            gf[p * FEATURE_DIM + c] +=
                                wr.iter().zip(&acc).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn plane_depths_examples() {
        assert_eq!(plane_depths(1.0, 2.0, 2).unwrap(), vec![1.0, 2.0]);
        let d = plane_depths(1.0, 2.0, 3).unwrap();
        assert!((d[1] - 4.0 / 3.0).abs() < 1e-15);
        assert!(plane_depths(1.0, 2.0, 1).is_err());
        assert!(plane_depths(2.0, 2.0, 4).is_err());
    }

    #[test]
    fn intervals_use_mean_for_last() {
        assert_eq!(plane_intervals(&[1.0, 2.0, 4.0]), vec![1.0, 2.0, 1.5]);
        assert_eq!(plane_intervals(&[3.0]), vec![1.0]);
    }

    fn tiny_mpi() -> MultiPlaneImage {
        let mut data = Vec::new();
        for k in 0..2 {
            for i in 0..6 {
                let v = (k * 6 + i) as f64 / 12.0;
                data.extend_from_slice(&[v, 1.0 - v, 0.5 * v, 3.0 * v]);
            }
        }
        MultiPlaneImage::new(vec![1.0, 2.0], 3, 2, data).unwrap()
    }

    #[test]
    fn sampling_at_nodes_midpoints_and_outside() {
        let m = tiny_mpi();
        let t = m.texel(1, 2, 1);
        let (c, s) = sample_mpi(&m, 1, 2.0, 1.0);
        assert_eq!([c[0], c[1], c[2], s], t);
        let a = m.texel(0, 0, 1);
        let b = m.texel(0, 1, 1);
        let (c, s) = sample_mpi(&m, 0, 0.5, 1.0);
        let got = [c[0], c[1], c[2], s];
        for i in 0..4 {
            assert!((got[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
        }
        assert_eq!(sample_mpi(&m, 0, -5.0, 0.0), ([0.0; 3], 0.0));
    }

    #[test]
    fn rejects_invalid_values() {
        assert!(MultiPlaneImage::new(vec![2.0, 1.0], 1, 1, vec![0.0; 8]).is_err());
        assert!(MultiPlaneImage::new(vec![1.0, 2.0], 1, 1, vec![0.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn direct_init_is_gray_with_uniform_alpha() {
        let depths = plane_depths(1.0, 4.0, 8).unwrap();
        let pred = CoarsePredictor::new(MpiMode::Direct, depths, 5, 4);
        let p = pred.init(&mut ChaCha8Rng::seed_from_u64(0));
        assert!(p.chunks(4).all(|t| t[3] == pred.initial_density_raw()));
        let (mpi, _) = pred.predict(&p, None).unwrap();
        for k in 0..8 {
            let t = mpi.texel(k, 2, 2);
            assert_eq!(&t[..3], &[0.5; 3]);
            let alpha = 1.0 - (-t[3] * pred.intervals()[k]).exp();
            assert!((alpha - 1.0 / 8.0).abs() < 1e-12);
        }
    }

    #[test]
    fn feedforward_shape_and_gradient() {
        let depths = plane_depths(1.0, 4.0, 32).unwrap();
        let (w, h) = (3, 2);
        let pred = CoarsePredictor::new(MpiMode::Feedforward, depths, w, h);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = pred.init(&mut rng);
        p.iter_mut().for_each(|v| *v += rng.gen_range(-0.3..0.3));
        let f = FeatureMap {
            width: w,
            height: h,
            channels: FEATURE_DIM,
            data: (0..w * h * FEATURE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        };
        let (mpi, raw) = pred.predict(&p, Some(&f)).unwrap();
        assert_eq!(mpi.planes(), 32);
        assert_eq!(mpi.data().len(), 32 * h * w * 4);
        let probe: Vec<f64> = (0..mpi.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let loss = |p: &[f64], f: &FeatureMap| -> f64 {
            let (m, _) = pred.predict(p, Some(f)).unwrap();
            m.data().iter().zip(&probe).map(|(a, b)| a * b).sum()
        };
        let mut gp = vec![0.0; p.len()];
        let mut gf = vec![0.0; f.data.len()];
        pred.backward(&p, &raw, Some(&f), &probe, &mut gp, Some(&mut gf));
        for k in 0..30 {
            let i = (k * 389 + 7) % p.len();
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += 1e-5;
            b[i] -= 1e-5;
            let fd = (loss(&a, &f) - loss(&b, &f)) / 2e-5;
            let rel = (fd - gp[i]).abs() / fd.abs().max(gp[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "param {i}: {fd} vs {}", gp[i]);
        }
        for k in 0..10 {
            let i = (k * 37 + 3) % f.data.len();
            let mut a = f.clone();
            let mut b = f.clone();
            a.data[i] += 1e-5;
            b.data[i] -= 1e-5;
            let fd = (loss(&p, &a) - loss(&p, &b)) / 2e-5;
            let rel = (fd - gf[i]).abs() / fd.abs().max(gf[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "feature {i}: {fd} vs {}", gf[i]);
        }
    }
}
