//! Shallow trainable per-pixel feature extractor: two 3x3 filter banks with a
//! tanh between them, zero padding at the borders.

use rand::Rng;

use crate::raster::{bilinear_taps, Image, Taps};

pub const FEATURE_DIM: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureExtractor {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

/// Per-pixel features of the source image.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    /// Zero-padded bilinear sample at continuous pixel `(x, y)`.
    pub fn sample_into(&self, taps: &Taps, out: &mut [f64]) {
        out.fill(0.0);
        for (i, w) in taps.iter() {
            let row = &self.data[i * self.channels..(i + 1) * self.channels];
            for (o, v) in out.iter_mut().zip(row) {
                *o += w * v;
            }
        }
    }

    pub fn sample(&self, x: f64, y: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.channels];
        self.sample_into(&bilinear_taps(x, y, self.width, self.height), &mut out);
        out
    }
}

/// Hidden activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ExtractorCache {
    hidden: Vec<f64>,
}

impl Default for FeatureExtractor {
    fn default() -> Self {
        Self::new(16)
    }
}

impl FeatureExtractor {
    pub fn new(hidden: usize) -> Self {
        Self {
            input: 3,
            hidden,
            output: FEATURE_DIM,
        }
    }

    fn w1_len(&self) -> usize {
        9 * self.input * self.hidden
    }

    fn w2_len(&self) -> usize {
        9 * self.hidden * self.output
    }

    pub fn param_count(&self) -> usize {
        self.w1_len() + self.hidden + self.w2_len() + self.output
    }

    fn split<'a>(&self, p: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64], &'a [f64]) {
        let (w1, rest) = p.split_at(self.w1_len());
        let (b1, rest) = rest.split_at(self.hidden);
        let (w2, b2) = rest.split_at(self.w2_len());
        (w1, b1, w2, b2)
    }

    fn split_mut<'a>(
        &self,
        p: &'a mut [f64],
    ) -> (&'a mut [f64], &'a mut [f64], &'a mut [f64], &'a mut [f64]) {
        let (w1, rest) = p.split_at_mut(self.w1_len());
        let (b1, rest) = rest.split_at_mut(self.hidden);
        let (w2, b2) = rest.split_at_mut(self.w2_len());
        (w1, b1, w2, b2)
    }

    /// Xavier-uniform weights, zero biases.
    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        let (w1, _, w2, _) = self.split_mut(&mut p);
        let a1 = (6.0 / (9 * self.input + 9 * self.hidden) as f64).sqrt();
        w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        let a2 = (6.0 / (9 * self.hidden + 9 * self.output) as f64).sqrt();
        w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        p
    }

    pub fn forward(&self, params: &[f64], image: &Image) -> (FeatureMap, ExtractorCache) {
        assert_eq!(image.channels, self.input, "extractor input channels");
        assert_eq!(params.len(), self.param_count(), "extractor parameter count");
        let (w1, b1, w2, b2) = self.split(params);
        let (w, h) = (image.width, image.height);
        let mut hidden = conv3x3(&image.data, w, h, self.input, w1, b1, self.hidden);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let data = conv3x3(&hidden, w, h, self.hidden, w2, b2, self.output);
        (
            FeatureMap {
                width: w,
                height: h,
                channels: self.output,
                data,
            },
            ExtractorCache { hidden },
        )
    }

    pub fn extract(&self, params: &[f64], image: &Image) -> FeatureMap {
        self.forward(params, image).0
    }

    /// Accumulates parameter gradients from a gradient on the feature map.
    pub fn backward(
        &self,
        params: &[f64],
        image: &Image,
        cache: &ExtractorCache,
        grad_features: &[f64],
        grad_params: &mut [f64],
    ) {
        let (w, h) = (image.width, image.height);
        let (_, _, w2, _) = self.split(params);
        let (gw1, gb1, gw2, gb2) = self.split_mut(grad_params);
        let mut grad_hidden = vec![0.0; w * h * self.hidden];
        conv3x3_backward(
            &cache.hidden,
            w,
            h,
            self.hidden,
            w2,
            self.output,
            grad_features,
            gw2,
            gb2,
            Some(&mut grad_hidden),
        );
        for (g, a) in grad_hidden.iter_mut().zip(&cache.hidden) {
            *g *= 1.0 - a * a;
        }
        conv3x3_backward(
            &image.data,
            w,
            h,
            self.input,
            &[],
            self.hidden,
            &grad_hidden,
            gw1,
            gb1,
            None,
        );
    }
}

/// Weights laid out `[ky][kx][cin][cout]`.
fn conv3x3(
    input: &[f64],
    w: usize,
    h: usize,
    cin: usize,
    weights: &[f64],
    bias: &[f64],
    cout: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; w * h * cout];
    for y in 0..h {
        for x in 0..w {
            let o = &mut out[(y * w + x) * cout..(y * w + x + 1) * cout];
            o.copy_from_slice(bias);
            for ky in 0..3 {
                let sy = y as i64 + ky as i64 - 1;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as i64 + kx as i64 - 1;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * cin;
                    for ci in 0..cin {
                        let v = input[src + ci];
                        if v == 0.0 {
                            continue;
                        }
                        let row = &weights[((ky * 3 + kx) * cin + ci) * cout..][..cout];
                        for (acc, wt) in o.iter_mut().zip(row) {
                            *acc += v * wt;
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv3x3_backward(
    input: &[f64],
    w: usize,
    h: usize,
    cin: usize,
    weights: &[f64],
    cout: usize,
    grad_out: &[f64],
    grad_w: &mut [f64],
    grad_b: &mut [f64],
    mut grad_input: Option<&mut Vec<f64>>,
) {
    for y in 0..h {
        for x in 0..w {
            let g = &grad_out[(y * w + x) * cout..(y * w + x + 1) * cout];
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            for (b, v) in grad_b.iter_mut().zip(g) {
                *b += v;
            }
            for ky in 0..3 {
                let sy = y as i64 + ky as i64 - 1;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as i64 + kx as i64 - 1;
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    let src = (sy as usize * w + sx as usize) * cin;
                    for ci in 0..cin {
                        let off = ((ky * 3 + kx) * cin + ci) * cout;
                        let v = input[src + ci];
                        if v != 0.0 {
                            for (gw, gv) in grad_w[off..off + cout].iter_mut().zip(g) {
                                *gw += v * gv;
                            }
                        }
                        if let Some(gi) = grad_input.as_deref_mut() {
                            let row = &weights[off..off + cout];
                            gi[src + ci] += row.iter().zip(g).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
        }
    }
}
