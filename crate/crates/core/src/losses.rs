//! Training losses, scale alignment and evaluation metrics.
//!
//! Every loss comes in two forms: a value-only function and a `*_grad`
//! variant that also returns the gradient with respect to the rendered
//! quantity (first argument).

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::raster::Image;
use crate::render::{Branch, RenderedView};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Weight of the fine branch in the full objective.
pub const FINE_BRANCH_WEIGHT: f64 = 0.4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsePoint {
    pub x: usize,
    pub y: usize,
    /// Metric depth, > 0.
    pub z: f64,
}

/// Sparse depth references in one view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparsePoints {
    pub points: Vec<SparsePoint>,
}

impl SparsePoints {
    pub fn new(points: Vec<SparsePoint>) -> Result<Self> {
        if points.iter().any(|p| !(p.z > 0.0)) {
            return domain("sparse point depths must be positive");
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Points inside the window `[x0, x0 + w) x [y0, y0 + h)`, re-expressed
    /// in window coordinates.
    pub fn window(&self, x0: usize, y0: usize, w: usize, h: usize) -> SparsePoints {
        SparsePoints {
            points: self
                .points
                .iter()
                .filter(|p| p.x >= x0 && p.x < x0 + w && p.y >= y0 && p.y < y0 + h)
                .map(|p| SparsePoint {
                    x: p.x - x0,
                    y: p.y - y0,
                    z: p.z,
                })
                .collect(),
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Mean absolute difference over all pixels and channels.
pub fn l1_loss(pred: &Image, target: &Image) -> Result<f64> {
    pred.check_same_shape(target)?;
    let n = pred.data.len() as f64;
    Ok(pred.data.iter().zip(&target.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
}

pub fn l1_loss_grad(pred: &Image, target: &Image) -> Result<(f64, Image)> {
    let value = l1_loss(pred, target)?;
    let n = pred.data.len() as f64;
    let grad = Image {
        data: pred.data.iter().zip(&target.data).map(|(a, b)| sign(a - b) / n).collect(),
        ..pred.clone()
    };
    Ok((value, grad))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.iter_mut().for_each(|v| *v /= s);
    g
}

/// Symmetric (edge-including) reflection of an index into `[0, n)`.
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - i - 1;
        } else {
            return i as usize;
        }
    }
}

/// Separable Gaussian blur of a single-channel plane.
struct Blur {
    g: [f64; SSIM_WINDOW],
    w: usize,
    h: usize,
}

impl Blur {
    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let r = (SSIM_WINDOW / 2) as i64;
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, g) in self.g.iter().enumerate() {
                    acc += g * src[y * w + reflect(x as i64 + k as i64 - r, w)];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, g) in self.g.iter().enumerate() {
                    acc += g * tmp[reflect(y as i64 + k as i64 - r, h) * w + x];
                }
                out[y * w + x] = acc;
            }
        }
        out
    }

    fn adjoint(&self, grad: &[f64]) -> Vec<f64> {
        let (w, h) = (self.w, self.h);
        let r = (SSIM_WINDOW / 2) as i64;
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = grad[y * w + x];
                for (k, g) in self.g.iter().enumerate() {
                    tmp[reflect(y as i64 + k as i64 - r, h) * w + x] += g * v;
                }
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 0..h {
            for x in 0..w {
                let v = tmp[y * w + x];
                for (k, g) in self.g.iter().enumerate() {
                    out[y * w + reflect(x as i64 + k as i64 - r, w)] += g * v;
                }
            }
        }
        out
    }
}

fn ssim_impl(a: &Image, b: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    a.check_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return domain(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            a.width, a.height
        ));
    }
    let blur = Blur {
        g: gaussian_window(),
        w: a.width,
        h: a.height,
    };
    let n = a.pixel_count();
    let channels = a.channels;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::new(a.width, a.height, channels));
    for c in 0..channels {
        let x: Vec<f64> = (0..n).map(|i| a.data[i * channels + c]).collect();
        let y: Vec<f64> = (0..n).map(|i| b.data[i * channels + c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let (mx, my) = (blur.apply(&x), blur.apply(&y));
        let (exx, eyy, exy) = (blur.apply(&xx), blur.apply(&yy), blur.apply(&xy));
        let mut d_mx = vec![0.0; n];
        let mut d_exx = vec![0.0; n];
        let mut d_exy = vec![0.0; n];
        let mut sum = 0.0;
        for i in 0..n {
            let (ux, uy) = (mx[i], my[i]);
            let vx = exx[i] - ux * ux;
            let vy = eyy[i] - uy * uy;
            let cxy = exy[i] - ux * uy;
            let a1 = 2.0 * ux * uy + SSIM_C1;
            let a2 = 2.0 * cxy + SSIM_C2;
            let b1 = ux * ux + uy * uy + SSIM_C1;
            let b2 = vx + vy + SSIM_C2;
            let s = (a1 * a2) / (b1 * b2);
            sum += s;
            if want_grad {
                let den = b1 * b2;
                d_mx[i] = (2.0 * uy * a2 - 2.0 * uy * a1) / den
                    - s * (2.0 * ux / b1 - 2.0 * ux / b2);
                d_exx[i] = -s / b2;
                d_exy[i] = 2.0 * a1 / den;
            }
        }
        total += sum / n as f64;
        if let Some(g) = grad.as_mut() {
            let scale = 1.0 / (n as f64 * channels as f64);
            let gm = blur.adjoint(&d_mx);
            let gxx = blur.adjoint(&d_exx);
            let gxy = blur.adjoint(&d_exy);
            for i in 0..n {
                g.data[i * channels + c] = scale * (gm[i] + 2.0 * x[i] * gxx[i] + y[i] * gxy[i]);
            }
        }
    }
    Ok((total / channels as f64, grad))
}

/// Mean windowed SSIM (11x11 Gaussian, stdev 1.5, symmetric edge padding),
/// averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    Ok(ssim_impl(a, b, false)?.0)
}

/// SSIM and its gradient with respect to `a`.
pub fn ssim_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(a, b, true)?;
    Ok((v, g.unwrap()))
}

pub fn ssim_loss(a: &Image, b: &Image) -> Result<f64> {
    Ok(1.0 - ssim(a, b)?)
}

/// Scale `s` with `mean(ln(pred / s) - ln(reference)) = 0` over the pairs
/// where both values are positive.
pub fn align_scale_pairs(pairs: impl Iterator<Item = (f64, f64)>) -> Result<f64> {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (p, r) in pairs {
        if p > 0.0 && r > 0.0 {
            acc += p.ln() - r.ln();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::NoScaleReference);
    }
    Ok((acc / n as f64).exp())
}

/// Reference depth values an alignment can use.
#[derive(Debug, Clone, Copy)]
pub enum ScaleReference<'a> {
    Points(&'a SparsePoints),
    Dense(&'a Image),
}

pub fn align_scale(disparity: &Image, refs: ScaleReference<'_>) -> Result<f64> {
    match refs {
        ScaleReference::Points(p) => align_scale_pairs(
            p.points
                .iter()
                .map(|q| (disparity.at(q.x, q.y, 0), 1.0 / q.z)),
        ),
        ScaleReference::Dense(d) => {
            disparity.check_same_shape(d)?;
            align_scale_pairs(disparity.data.iter().copied().zip(d.data.iter().copied()))
        }
    }
}

/// Mean absolute scale-aligned log residual between rendered disparity and
/// sparse point disparities `1/z`.
pub fn point_loss(disparity: &Image, points: &SparsePoints) -> Result<f64> {
    Ok(point_loss_grad(disparity, points)?.0)
}

pub fn point_loss_grad(disparity: &Image, points: &SparsePoints) -> Result<(f64, Image)> {
    let used: Vec<(usize, f64, f64)> = points
        .points
        .iter()
        .filter_map(|q| {
            if q.x >= disparity.width || q.y >= disparity.height {
                return None;
            }
            let d = disparity.at(q.x, q.y, 0);
            (d > 0.0).then(|| (q.y * disparity.width + q.x, d, (1.0 / q.z).ln()))
        })
        .collect();
    if used.is_empty() {
        return Err(Error::NoScaleReference);
    }
    let n = used.len() as f64;
    let log_s = used.iter().map(|(_, d, r)| d.ln() - r).sum::<f64>() / n;
    let residuals: Vec<f64> = used.iter().map(|(_, d, r)| d.ln() - log_s - r).collect();
    let value = residuals.iter().map(|r| r.abs()).sum::<f64>() / n;
    let mean_sign = residuals.iter().map(|&r| sign(r)).sum::<f64>() / n;
    let mut grad = Image::new(disparity.width, disparity.height, 1);
    for ((i, d, _), r) in used.iter().zip(&residuals) {
        grad.data[*i] += (sign(*r) - mean_sign) / (n * d);
    }
    Ok((value, grad))
}

/// L1 plus gradient-matching loss between rendered and teacher disparity.
/// With `align`, the rendered map is first divided by its log-mean scale
/// relative to the teacher.
pub fn pseudo_depth_loss(pred: &Image, teacher: &Image, lambda_grad: f64, align: bool) -> Result<f64> {
    Ok(pseudo_depth_loss_grad(pred, teacher, lambda_grad, align)?.0)
}

pub fn pseudo_depth_loss_grad(
    pred: &Image,
    teacher: &Image,
    lambda_grad: f64,
    align: bool,
) -> Result<(f64, Image)> {
    pred.check_same_shape(teacher)?;
    if pred.channels != 1 {
        return Err(Error::Shape("disparity maps must be single-channel".into()));
    }
    let (w, h) = (pred.width, pred.height);
    let s = if align {
        align_scale(pred, ScaleReference::Dense(teacher))?
    } else {
        1.0
    };
    let p: Vec<f64> = pred.data.iter().map(|v| v / s).collect();
    let t = &teacher.data;
    let n = (w * h) as f64;
    let mut g = vec![0.0; w * h];
    let mut value = 0.0;
    for i in 0..w * h {
        let r = p[i] - t[i];
        value += r.abs() / n;
        g[i] += sign(r) / n;
    }
    if lambda_grad != 0.0 {
        if w > 1 {
            let m = ((w - 1) * h) as f64;
            for y in 0..h {
                for x in 0..w - 1 {
                    let (i, j) = (y * w + x, y * w + x + 1);
                    let r = (p[j] - p[i]) - (t[j] - t[i]);
                    value += lambda_grad * r.abs() / m;
                    let sg = lambda_grad * sign(r) / m;
                    g[j] += sg;
                    g[i] -= sg;
                }
            }
        }
        if h > 1 {
            let m = (w * (h - 1)) as f64;
            for y in 0..h - 1 {
                for x in 0..w {
                    let (i, j) = (y * w + x, (y + 1) * w + x);
                    let r = (p[j] - p[i]) - (t[j] - t[i]);
                    value += lambda_grad * r.abs() / m;
                    let sg = lambda_grad * sign(r) / m;
                    g[j] += sg;
                    g[i] -= sg;
                }
            }
        }
    }
    // chain through p = pred / s, with ln s the mean log-ratio over the
    // positive pairs
    let mut grad = Image::new(w, h, 1);
    if align {
        let valid: Vec<usize> = (0..w * h)
            .filter(|&i| pred.data[i] > 0.0 && t[i] > 0.0)
            .collect();
        let m = valid.len() as f64;
        let dot: f64 = g.iter().zip(&p).map(|(a, b)| a * b).sum();
        for i in 0..w * h {
            grad.data[i] = g[i] / s;
        }
        for &i in &valid {
            grad.data[i] -= dot / (m * pred.data[i]);
        }
    } else {
        grad.data = g;
    }
    Ok((value, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub ssim: f64,
    pub point: f64,
    pub pseudo_depth: f64,
    pub grad: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 1.0,
            point: 1.0,
            pseudo_depth: 1.0,
            grad: 1.0,
        }
    }
}

/// Supervision available for one rendered view (or window of it).
#[derive(Debug, Clone, Copy)]
pub struct BranchTargets<'a> {
    pub image: &'a Image,
    pub points: Option<&'a SparsePoints>,
    pub teacher: Option<&'a Image>,
}

/// Individual loss terms of one branch. Unavailable terms are zero.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BranchTerms {
    pub l1: f64,
    pub ssim: f64,
    pub point: f64,
    pub pseudo_depth: f64,
    pub total: f64,
}

/// Gradients of a branch loss on the rendered color and disparity.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchGrad {
    pub rgb: Image,
    pub disparity: Image,
}

fn accumulate(dst: &mut Image, src: &Image, scale: f64) {
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += scale * s;
    }
}

pub fn branch_loss(view: &RenderedView, targets: &BranchTargets<'_>, weights: &LossWeights) -> Result<BranchTerms> {
    branch_loss_impl(view, targets, weights, false).map(|(t, _)| t)
}

pub fn branch_loss_grad(
    view: &RenderedView,
    targets: &BranchTargets<'_>,
    weights: &LossWeights,
) -> Result<(BranchTerms, BranchGrad)> {
    branch_loss_impl(view, targets, weights, true).map(|(t, g)| (t, g.unwrap()))
}

fn branch_loss_impl(
    view: &RenderedView,
    targets: &BranchTargets<'_>,
    weights: &LossWeights,
    want_grad: bool,
) -> Result<(BranchTerms, Option<BranchGrad>)> {
    let mut terms = BranchTerms::default();
    let mut g_rgb = Image::new(view.width(), view.height(), 3);
    let mut g_disp = Image::new(view.width(), view.height(), 1);

    let (l1, g) = l1_loss_grad(&view.rgb, targets.image)?;
    terms.l1 = l1;
    terms.total += l1;
    accumulate(&mut g_rgb, &g, 1.0);

    if weights.ssim != 0.0 {
        let (s, g) = ssim_grad(&view.rgb, targets.image)?;
        terms.ssim = 1.0 - s;
        terms.total += weights.ssim * terms.ssim;
        accumulate(&mut g_rgb, &g, -weights.ssim);
    }
    if let Some(points) = targets.points.filter(|p| !p.is_empty()) {
        if weights.point != 0.0 {
            match point_loss_grad(&view.disparity, points) {
                Ok((v, g)) => {
                    terms.point = v;
                    terms.total += weights.point * v;
                    accumulate(&mut g_disp, &g, weights.point);
                }
                // nothing rendered at any reference yet
                Err(Error::NoScaleReference) => {}
                Err(e) => return Err(e),
            }
        }
    }
    if let Some(teacher) = targets.teacher {
        if weights.pseudo_depth != 0.0 {
            match pseudo_depth_loss_grad(&view.disparity, teacher, weights.grad, true) {
                Ok((v, g)) => {
                    terms.pseudo_depth = v;
                    terms.total += weights.pseudo_depth * v;
                    accumulate(&mut g_disp, &g, weights.pseudo_depth);
                }
                Err(Error::NoScaleReference) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let grad = want_grad.then_some(BranchGrad {
        rgb: g_rgb,
        disparity: g_disp,
    });
    Ok((terms, grad))
}

/// Per-branch terms and the weighted total for one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub coarse: Option<BranchTerms>,
    pub fine: Option<BranchTerms>,
    pub joint: Option<BranchTerms>,
    pub total: f64,
}

/// How much each branch contributes to the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BranchWeights {
    pub coarse: f64,
    pub fine: f64,
    pub joint: f64,
}

impl BranchWeights {
    /// `L_c + 0.4 L_f + L_j`.
    pub const FULL: BranchWeights = BranchWeights {
        coarse: 1.0,
        fine: FINE_BRANCH_WEIGHT,
        joint: 1.0,
    };
    pub const COARSE_ONLY: BranchWeights = BranchWeights {
        coarse: 1.0,
        fine: 0.0,
        joint: 0.0,
    };
    pub const FINE_AND_JOINT: BranchWeights = BranchWeights {
        coarse: 0.0,
        fine: FINE_BRANCH_WEIGHT,
        joint: 1.0,
    };

    pub fn get(&self, b: Branch) -> f64 {
        match b {
            Branch::Coarse => self.coarse,
            Branch::Fine => self.fine,
            Branch::Joint => self.joint,
        }
    }

    pub fn active(&self) -> impl Iterator<Item = Branch> + '_ {
        Branch::ALL.into_iter().filter(|&b| self.get(b) != 0.0)
    }
}

impl LossReport {
    pub fn set(&mut self, b: Branch, t: BranchTerms) {
        match b {
            Branch::Coarse => self.coarse = Some(t),
            Branch::Fine => self.fine = Some(t),
            Branch::Joint => self.joint = Some(t),
        }
    }

    pub fn get(&self, b: Branch) -> Option<&BranchTerms> {
        match b {
            Branch::Coarse => self.coarse.as_ref(),
            Branch::Fine => self.fine.as_ref(),
            Branch::Joint => self.joint.as_ref(),
        }
    }

    /// Weighted sum of the recorded branch totals.
    pub fn weighted_total(&self, w: &BranchWeights) -> f64 {
        Branch::ALL
            .iter()
            .filter_map(|&b| self.get(b).map(|t| w.get(b) * t.total))
            .sum()
    }
}

/// Image and depth quality of one rendered view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub psnr: f64,
    pub ssim: f64,
    pub rel: f64,
    pub log10: f64,
    pub rms: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
}

impl Metrics {
    pub const KEYS: [&'static str; 8] = ["psnr", "ssim", "rel", "log10", "rms", "delta1", "delta2", "delta3"];

    pub fn entries(&self) -> [(&'static str, f64); 8] {
        let v = [
            self.psnr,
            self.ssim,
            self.rel,
            self.log10,
            self.rms,
            self.delta1,
            self.delta2,
            self.delta3,
        ];
        std::array::from_fn(|i| (Self::KEYS[i], v[i]))
    }
}

/// `10 log10(1 / MSE)` on `[0, 1]` images; `+inf` when identical.
pub fn psnr(pred: &Image, target: &Image) -> Result<f64> {
    pred.check_same_shape(target)?;
    let mse = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.data.len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / mse).log10()
    })
}

/// Least-squares `(a, b)` minimizing `sum (a d + b - d*)^2`.
pub fn fit_scale_bias(pred: &[f64], target: &[f64]) -> (f64, f64) {
    let n = pred.len() as f64;
    let (sx, sy) = (pred.iter().sum::<f64>(), target.iter().sum::<f64>());
    let sxx: f64 = pred.iter().map(|v| v * v).sum();
    let sxy: f64 = pred.iter().zip(target).map(|(a, b)| a * b).sum();
    let det = n * sxx - sx * sx;
    if det.abs() < 1e-300 {
        return (1.0, (sy - sx) / n);
    }
    let a = (n * sxy - sx * sy) / det;
    (a, (sy - a * sx) / n)
}

/// Depth errors after least-squares scale-and-bias alignment of `pred` to
/// `gt`. Aligned depths are floored at a tiny positive value.
pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<[f64; 6]> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(Error::Shape("depth metrics need equal, nonempty inputs".into()));
    }
    if gt.iter().any(|v| !(*v > 0.0)) {
        return domain("ground-truth depths must be positive");
    }
    let (a, b) = fit_scale_bias(pred, gt);
    let n = pred.len() as f64;
    let (mut rel, mut lg, mut sq) = (0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    for (&p, &g) in pred.iter().zip(gt) {
        let d = (a * p + b).max(1e-9);
        rel += (d - g).abs() / g;
        lg += (d.log10() - g.log10()).abs();
        sq += (d - g) * (d - g);
        let ratio = (d / g).max(g / d);
        for (k, w) in within.iter_mut().enumerate() {
            if ratio < 1.25f64.powi(k as i32 + 1) {
                *w += 1;
            }
        }
    }
    Ok([
        rel / n,
        lg / n,
        (sq / n).sqrt(),
        within[0] as f64 / n,
        within[1] as f64 / n,
        within[2] as f64 / n,
    ])
}

/// Full metric set for a view. Depth metrics cover the pixels selected by
/// `mask` (all pixels when `None`); they are NaN when the mask is empty.
pub fn metrics(
    rgb: &Image,
    rgb_gt: &Image,
    depth: &Image,
    depth_gt: &Image,
    mask: Option<&[bool]>,
) -> Result<Metrics> {
    depth.check_same_shape(depth_gt)?;
    let (mut p, mut g) = (Vec::new(), Vec::new());
    for i in 0..depth.data.len() {
        if mask.map_or(true, |m| m[i]) {
            p.push(depth.data[i]);
            g.push(depth_gt.data[i]);
        }
    }
    // A mask that excludes every pixel leaves depth quality undefined.
    let [rel, log10, rms, delta1, delta2, delta3] = if p.is_empty() && mask.is_some() {
        [f64::NAN; 6]
    } else {
        depth_metrics(&p, &g)?
    };
    Ok(Metrics {
        psnr: psnr(rgb, rgb_gt)?,
        ssim: ssim(rgb, rgb_gt)?,
        rel,
        log10,
        rms,
        delta1,
        delta2,
        delta3,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(w: usize, h: usize, c: usize, seed: u64, lo: f64, hi: f64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
    }

    #[test]
    fn l1_examples() {
        let a = random(6, 5, 3, 1, 0.1, 0.8);
        assert_eq!(l1_loss(&a, &a).unwrap(), 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((l1_loss(&b, &a).unwrap() - 0.1).abs() < 1e-12);
        let c = random(6, 5, 3, 2, 0.0, 1.0);
        let mut acc = 0.0;
        for y in 0..5 {
            for x in 0..6 {
                for k in 0..3 {
                    acc += (a.at(x, y, k) - c.at(x, y, k)).abs();
                }
            }
        }
        assert!((l1_loss(&a, &c).unwrap() - acc / 90.0).abs() < 1e-12);
        assert!(l1_loss(&a, &random(5, 5, 3, 1, 0.0, 1.0)).is_err());
    }

    #[test]
    fn ssim_identities() {
        let a = random(16, 13, 3, 3, 0.0, 1.0);
        let b = random(16, 13, 3, 4, 0.0, 1.0);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        assert!(ssim(&a, &b).unwrap() <= 1.0);
        assert!(ssim(&random(10, 12, 1, 1, 0.0, 1.0), &random(10, 12, 1, 2, 0.0, 1.0)).is_err());
    }

    #[test]
    fn ssim_of_constants() {
        let a = Image::filled(12, 12, 1, 0.3);
        let b = Image::filled(12, 12, 1, 0.5);
        let expect = (2.0 * 0.3 * 0.5 + SSIM_C1) / (0.09 + 0.25 + SSIM_C1);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn ssim_gradient_matches_differences() {
        let a = random(12, 11, 2, 5, 0.1, 0.9);
        let b = random(12, 11, 2, 6, 0.1, 0.9);
        let (_, g) = ssim_grad(&a, &b).unwrap();
        for k in 0..20 {
            let i = (k * 53 + 7) % a.data.len();
            let mut p = a.clone();
            let mut m = a.clone();
            p.data[i] += 1e-5;
            m.data[i] -= 1e-5;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / 2e-5;
            let rel = (fd - g.data[i]).abs() / fd.abs().max(1e-8);
            assert!(rel < 1e-4, "pixel {i}: {fd} vs {}", g.data[i]);
        }
    }

    fn points(coords: &[(usize, usize, f64)]) -> SparsePoints {
        SparsePoints::new(coords.iter().map(|&(x, y, z)| SparsePoint { x, y, z }).collect()).unwrap()
    }

    #[test]
    fn alignment_examples() {
        let refs = random(5, 4, 1, 7, 0.2, 2.0);
        let doubled = refs.map(|v| 2.0 * v);
        let s = align_scale(&doubled, ScaleReference::Dense(&refs)).unwrap();
        assert!((s - 2.0).abs() < 1e-12);
        let p = points(&[(1, 1, 3.0)]);
        let d = random(4, 4, 1, 8, 0.1, 1.0);
        let s = align_scale(&d, ScaleReference::Points(&p)).unwrap();
        assert!((d.at(1, 1, 0) / s - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(point_loss(&d, &p).unwrap(), 0.0);
        let zero = Image::new(4, 4, 1);
        assert!(matches!(
            align_scale(&zero, ScaleReference::Points(&p)),
            Err(Error::NoScaleReference)
        ));
    }

    #[test]
    fn point_loss_examples() {
        let mut d = Image::new(4, 1, 1);
        let p = points(&[(0, 0, 1.0), (1, 0, 2.0), (2, 0, 4.0)]);
        for q in &p.points {
            *d.at_mut(q.x, 0, 0) = 0.7 / q.z;
        }
        assert!(point_loss(&d, &p).unwrap().abs() < 1e-12);
        // residuals +ln2 and -ln2 around the aligned mean
        let p2 = points(&[(0, 0, 1.0), (1, 0, 1.0)]);
        let mut d2 = Image::new(4, 1, 1);
        *d2.at_mut(0, 0, 0) = 2.0;
        *d2.at_mut(1, 0, 0) = 0.5;
        assert!((point_loss(&d2, &p2).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pseudo_depth_examples() {
        let t = random(7, 5, 1, 9, 0.3, 1.2);
        assert_eq!(pseudo_depth_loss(&t, &t, 2.0, true).unwrap(), 0.0);
        let g = 0.01;
        let mut ramp = t.clone();
        let mut ramp_mean = 0.0;
        for y in 0..5 {
            for x in 0..7 {
                *ramp.at_mut(x, y, 0) += g * x as f64;
                ramp_mean += g * x as f64 / 35.0;
            }
        }
        let lambda = 3.0;
        let v = pseudo_depth_loss(&ramp, &t, lambda, false).unwrap();
        assert!((v - (ramp_mean + lambda * g)).abs() < 1e-12);
        let k = t.map(|v| 3.7 * v);
        assert!(pseudo_depth_loss(&k, &t, lambda, true).unwrap().abs() < 1e-12);
    }

    #[test]
    fn disparity_loss_gradients_match_differences() {
        let t = random(6, 5, 1, 10, 0.3, 1.2);
        let d = random(6, 5, 1, 11, 0.3, 1.2);
        let p = points(&[(0, 0, 1.0), (3, 2, 2.0), (5, 4, 1.5), (2, 1, 3.0)]);
        let (_, gp) = point_loss_grad(&d, &p).unwrap();
        let (_, gd) = pseudo_depth_loss_grad(&d, &t, 2.0, true).unwrap();
        for i in 0..d.data.len() {
            let mut a = d.clone();
            let mut b = d.clone();
            a.data[i] += 1e-6;
            b.data[i] -= 1e-6;
            let fd = (point_loss(&a, &p).unwrap() - point_loss(&b, &p).unwrap()) / 2e-6;
            assert!((fd - gp.data[i]).abs() < 1e-6 * fd.abs().max(1.0), "point {i}");
            let fd = (pseudo_depth_loss(&a, &t, 2.0, true).unwrap()
                - pseudo_depth_loss(&b, &t, 2.0, true).unwrap())
                / 2e-6;
            assert!((fd - gd.data[i]).abs() < 1e-6 * fd.abs().max(1.0), "pseudo {i}");
        }
    }

    #[test]
    fn scale_invariance() {
        let t = random(6, 5, 1, 12, 0.3, 1.2);
        let d = random(6, 5, 1, 13, 0.3, 1.2);
        let p = points(&[(0, 0, 1.0), (3, 2, 2.0), (5, 4, 1.5)]);
        let base_p = point_loss(&d, &p).unwrap();
        let base_d = pseudo_depth_loss(&d, &t, 2.0, true).unwrap();
        for k in [0.1, 1.0, 10.0] {
            let dk = d.map(|v| k * v);
            assert!((point_loss(&dk, &p).unwrap() - base_p).abs() < 1e-12);
            assert!((pseudo_depth_loss(&dk, &t, 2.0, true).unwrap() - base_d).abs() < 1e-12);
        }
    }

    fn view_from(rgb: Image, disparity: Image) -> RenderedView {
        let (w, h) = (rgb.width, rgb.height);
        RenderedView {
            rgb,
            disparity,
            opacity: Image::filled(w, h, 1, 1.0),
            depth: Image::new(w, h, 1),
            branch: Branch::Joint,
        }
    }

    #[test]
    fn branch_loss_composition() {
        let gt = random(12, 12, 3, 14, 0.0, 1.0);
        let teacher = random(12, 12, 1, 15, 0.3, 1.0);
        let p = points(&[(1, 1, 1.0), (5, 7, 2.0), (9, 3, 3.0)]);
        let w = LossWeights {
            ssim: 0.7,
            point: 1.3,
            pseudo_depth: 0.9,
            grad: 4.0,
        };
        let perfect = view_from(gt.clone(), teacher.clone());
        let mut pts = p.clone();
        for q in &mut pts.points {
            q.z = 1.0 / teacher.at(q.x, q.y, 0);
        }
        let t = BranchTargets {
            image: &gt,
            points: Some(&pts),
            teacher: Some(&teacher),
        };
        assert!(branch_loss(&perfect, &t, &w).unwrap().total.abs() < 1e-12);

        let rgb = random(12, 12, 3, 16, 0.0, 1.0);
        let disp = random(12, 12, 1, 17, 0.3, 1.0);
        let v = view_from(rgb.clone(), disp.clone());
        let rgb_only = BranchTargets {
            image: &gt,
            points: None,
            teacher: None,
        };
        let terms = branch_loss(&v, &rgb_only, &LossWeights::default()).unwrap();
        let expect = l1_loss(&rgb, &gt).unwrap() + ssim_loss(&rgb, &gt).unwrap();
        assert!((terms.total - expect).abs() < 1e-12);

        let full = BranchTargets {
            image: &gt,
            points: Some(&p),
            teacher: Some(&teacher),
        };
        let terms = branch_loss(&v, &full, &w).unwrap();
        let expect = l1_loss(&rgb, &gt).unwrap()
            + w.ssim * ssim_loss(&rgb, &gt).unwrap()
            + w.point * point_loss(&disp, &p).unwrap()
            + w.pseudo_depth * pseudo_depth_loss(&disp, &teacher, w.grad, true).unwrap();
        assert!((terms.total - expect).abs() < 1e-12);
    }

    #[test]
    fn metric_examples() {
        let a = random(12, 12, 3, 18, 0.0, 1.0);
        let d = random(12, 12, 1, 19, 1.0, 4.0);
        let m = metrics(&a, &a, &d, &d, None).unwrap();
        assert_eq!(m.psnr, f64::INFINITY);
        assert!((m.ssim - 1.0).abs() < 1e-12);
        assert!(m.rel < 1e-12 && m.log10 < 1e-12 && m.rms < 1e-12);
        assert_eq!((m.delta1, m.delta2, m.delta3), (1.0, 1.0, 1.0));
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&b, &a).unwrap() - 20.0).abs() < 1e-9);
        // scale-and-bias is absorbed
        let d2 = d.map(|v| 2.0 * v + 0.5);
        let m2 = metrics(&a, &a, &d2, &d, None).unwrap();
        assert!(m2.rms < 1e-12);
    }
}
