//! Volume compositing of color and depth along sample sets, and the
//! per-view render products.

use serde::{Deserialize, Serialize};

use crate::raster::Image;
use crate::sampler::SampleSet;

/// Opacity below which a ray reports zero disparity.
pub const OPACITY_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Coarse,
    Fine,
    Joint,
}

impl Branch {
    pub const ALL: [Branch; 3] = [Branch::Coarse, Branch::Fine, Branch::Joint];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Coarse => "coarse",
            Branch::Fine => "fine",
            Branch::Joint => "joint",
        }
    }
}

impl std::str::FromStr for Branch {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "coarse" => Ok(Branch::Coarse),
            "fine" => Ok(Branch::Fine),
            "joint" => Ok(Branch::Joint),
            other => Err(crate::Error::Domain(format!(
                "unknown branch '{other}' (expected coarse, fine or joint)"
            ))),
        }
    }
}

impl std::fmt::Display for Branch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Compositing weights `w_i = T_i (1 - exp(-sigma_i delta_i))` and the
/// transmittances `T_i = exp(-sum_{j<i} sigma_j delta_j)`.
pub fn compositing_weights(sigma: &[f64], delta: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut w = Vec::with_capacity(sigma.len());
    let mut trans = Vec::with_capacity(sigma.len());
    let mut optical = 0.0f64;
    for (s, d) in sigma.iter().zip(delta) {
        let t = (-optical).exp();
        let a = s * d;
        trans.push(t);
        w.push(-t * (-a).exp_m1());
        optical += a;
    }
    (w, trans)
}

/// Everything one ray composites to.
#[derive(Debug, Clone, PartialEq)]
pub struct Composite {
    pub rgb: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub disparity: f64,
    pub weights: Vec<f64>,
    pub transmittance: Vec<f64>,
}

pub fn composite(s: &SampleSet) -> Composite {
    let (weights, transmittance) = compositing_weights(&s.sigma, &s.delta);
    let mut rgb = [0.0; 3];
    let mut opacity = 0.0;
    let mut depth = 0.0;
    for ((w, c), t) in weights.iter().zip(&s.color).zip(&s.t) {
        rgb[0] += w * c[0];
        rgb[1] += w * c[1];
        rgb[2] += w * c[2];
        opacity += w;
        depth += w * t;
    }
    let disparity = if opacity > OPACITY_EPS { opacity / depth } else { 0.0 };
    Composite {
        rgb,
        opacity,
        depth,
        disparity,
        weights,
        transmittance,
    }
}

/// Rendered color, accumulated opacity and the per-sample weights.
pub fn composite_color(s: &SampleSet) -> ([f64; 3], f64, Vec<f64>) {
    let c = composite(s);
    (c.rgb, c.opacity, c.weights)
}

/// Expected depth `sum_i w_i z_i` and opacity-normalized disparity.
pub fn composite_depth(s: &SampleSet) -> (f64, f64) {
    let c = composite(s);
    (c.depth, c.disparity)
}

/// Upstream gradient on a ray's composite outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CompositeGrad {
    pub rgb: [f64; 3],
    pub opacity: f64,
    pub depth: f64,
    pub disparity: f64,
}

/// Gradients on every sample column.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleGrads {
    pub color: Vec<[f64; 3]>,
    pub sigma: Vec<f64>,
    pub delta: Vec<f64>,
    /// Through the depth term only; interval gradients are kept separate.
    pub t: Vec<f64>,
}

/// Gradient of the optical depths `a_k = sigma_k delta_k` given a gradient
/// on the weights.
pub fn weights_backward(weights: &[f64], transmittance: &[f64], sigma: &[f64], delta: &[f64], grad_w: &[f64]) -> Vec<f64> {
    let n = weights.len();
    let mut out = vec![0.0; n];
    let mut behind = 0.0;
    for k in (0..n).rev() {
        let t_next = transmittance[k] * (-sigma[k] * delta[k]).exp();
        out[k] = t_next * grad_w[k] - behind;
        behind += weights[k] * grad_w[k];
    }
    out
}

pub fn composite_backward(s: &SampleSet, c: &Composite, g: &CompositeGrad) -> SampleGrads {
    let n = s.len();
    let (mut g_opacity, mut g_depth) = (g.opacity, g.depth);
    if c.opacity > OPACITY_EPS {
        g_opacity += g.disparity / c.depth;
        g_depth -= g.disparity * c.opacity / (c.depth * c.depth);
    }
    let grad_w: Vec<f64> = (0..n)
        .map(|i| {
            let col = s.color[i];
            g.rgb[0] * col[0] + g.rgb[1] * col[1] + g.rgb[2] * col[2] + g_opacity + g_depth * s.t[i]
        })
        .collect();
    let grad_a = weights_backward(&c.weights, &c.transmittance, &s.sigma, &s.delta, &grad_w);
    SampleGrads {
        color: c
            .weights
            .iter()
            .map(|w| [g.rgb[0] * w, g.rgb[1] * w, g.rgb[2] * w])
            .collect(),
        sigma: grad_a.iter().zip(&s.delta).map(|(a, d)| a * d).collect(),
        delta: grad_a.iter().zip(&s.sigma).map(|(a, s)| a * s).collect(),
        t: c.weights.iter().map(|w| g_depth * w).collect(),
    }
}

/// Per-pixel products of rendering one view through one branch.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedView {
    pub rgb: Image,
    pub disparity: Image,
    pub opacity: Image,
    pub depth: Image,
    pub branch: Branch,
}

impl RenderedView {
    pub fn new(width: usize, height: usize, branch: Branch) -> Self {
        Self {
            rgb: Image::new(width, height, 3),
            disparity: Image::new(width, height, 1),
            opacity: Image::new(width, height, 1),
            depth: Image::new(width, height, 1),
            branch,
        }
    }

    pub fn width(&self) -> usize {
        self.rgb.width
    }

    pub fn height(&self) -> usize {
        self.rgb.height
    }

    pub fn set(&mut self, pixel: usize, c: &Composite) {
        self.rgb.data[pixel * 3..pixel * 3 + 3].copy_from_slice(&c.rgb);
        self.disparity.data[pixel] = c.disparity;
        self.opacity.data[pixel] = c.opacity;
        self.depth.data[pixel] = c.depth;
    }
}
