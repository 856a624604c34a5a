//! Fine radiance decoder: a small fully connected network over encoded
//! position, encoded view direction and a sampled image feature.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::activation::{sigmoid, sigmoid_grad, softplus, softplus_grad};
use super::encoding::{encode_into, encoded_len};
use super::extractor::FEATURE_DIM;
use crate::error::{domain, Result};

fn relu(z: f64) -> f64 {
    z.max(0.0)
}

fn relu_grad(z: f64) -> f64 {
    if z > 0.0 { 1.0 } else { 0.0 }
}

/// Multilayer perceptron with ReLU hidden units and a linear output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    widths: Vec<usize>,
}

/// Activations recorded by [`Mlp::forward`].
#[derive(Debug, Clone)]
pub struct MlpTrace {
    /// Layer inputs: the network input followed by each hidden activation.
    inputs: Vec<Array2<f64>>,
    /// Hidden pre-activations.
    pre: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn new(widths: Vec<usize>) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least input and output widths");
        Self { widths }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.widths.windows(2).map(move |w| {
            let start = off;
            off += w[0] * w[1] + w[1];
            (start, w[0], w[1])
        })
    }

    pub fn param_count(&self) -> usize {
        self.widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Xavier-uniform weights, zero biases; the output layer is scaled by
    /// `output_gain`.
    pub fn init(&self, rng: &mut impl Rng, output_gain: f64) -> Vec<f64> {
        let mut p = vec![0.0; self.param_count()];
        let n = self.widths.len() - 1;
        for (l, (off, i, o)) in self.layers().enumerate() {
            let gain = if l + 1 == n { output_gain } else { 1.0 };
            let a = gain * (6.0 / (i + o) as f64).sqrt();
            if a > 0.0 {
                p[off..off + i * o]
                    .iter_mut()
                    .for_each(|w| *w = rng.gen_range(-a..a));
            }
        }
        p
    }

    pub fn forward(&self, params: &[f64], input: Array2<f64>) -> MlpTrace {
        assert_eq!(params.len(), self.param_count(), "mlp parameter count");
        assert_eq!(input.ncols(), self.input_dim(), "mlp input width");
        let n = self.widths.len() - 1;
        let mut inputs = vec![input];
        let mut pre = Vec::with_capacity(n - 1);
        let mut output = None;
        for (l, (off, i, o)) in self.layers().enumerate() {
            let w = ArrayView2::from_shape((i, o), &params[off..off + i * o]).unwrap();
            let b = ndarray::ArrayView1::from(&params[off + i * o..off + i * o + o]);
            let mut z = inputs[l].dot(&w);
            z += &b;
            if l + 1 == n {
                output = Some(z);
            } else {
                inputs.push(z.mapv(relu));
                pre.push(z);
            }
        }
        MlpTrace {
            inputs,
            pre,
            output: output.unwrap(),
        }
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &MlpTrace,
        grad_output: Array2<f64>,
        grad_params: &mut [f64],
    ) -> Array2<f64> {
        let layers: Vec<_> = self.layers().collect();
        let mut dz = grad_output;
        for l in (0..layers.len()).rev() {
            let (off, i, o) = layers[l];
            let a = &trace.inputs[l];
            {
                let mut gw =
                    ArrayViewMut2::from_shape((i, o), &mut grad_params[off..off + i * o]).unwrap();
                general_mat_mul(1.0, &a.t(), &dz, 1.0, &mut gw);
            }
            let gb = dz.sum_axis(Axis(0));
            for (g, v) in grad_params[off + i * o..off + i * o + o].iter_mut().zip(gb.iter()) {
                *g += v;
            }
            let w = ArrayView2::from_shape((i, o), &params[off..off + i * o]).unwrap();
            let mut da = dz.dot(&w.t());
            if l > 0 {
                da.zip_mut_with(&trace.pre[l - 1], |g, &z| *g *= relu_grad(z));
            }
            dz = da;
        }
        dz
    }
}

/// Decoder input/output conventions around an [`Mlp`].
#[derive(Debug, Clone, PartialEq)]
pub struct FineDecoder {
    pub mlp: Mlp,
    pub pos_freqs: usize,
    pub dir_freqs: usize,
    pub feature_dim: usize,
    /// Multiplier applied after the density softplus.
    pub density_scale: f64,
}

impl Default for FineDecoder {
    fn default() -> Self {
        Self::new(64, 5, 1.0)
    }
}

impl FineDecoder {
    pub const POS_FREQS: usize = 10;
    pub const DIR_FREQS: usize = 4;

    pub fn new(hidden: usize, layers: usize, density_scale: f64) -> Self {
        let (pos_freqs, dir_freqs) = (Self::POS_FREQS, Self::DIR_FREQS);
        let input = encoded_len(pos_freqs) + encoded_len(dir_freqs) + FEATURE_DIM;
        let mut widths = vec![input];
        widths.extend(std::iter::repeat(hidden).take(layers));
        widths.push(4);
        Self {
            mlp: Mlp::new(widths),
            pos_freqs,
            dir_freqs,
            feature_dim: FEATURE_DIM,
            density_scale,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.mlp.input_dim()
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    pub fn pos_len(&self) -> usize {
        encoded_len(self.pos_freqs)
    }

    pub fn dir_len(&self) -> usize {
        encoded_len(self.dir_freqs)
    }

    /// Fills one input row: `[enc(x) | enc(d) | f]`.
    pub fn assemble(&self, x: [f64; 3], d: [f64; 3], feature: &[f64], row: &mut [f64]) {
        let (p, rest) = row.split_at_mut(self.pos_len());
        let (q, f) = rest.split_at_mut(self.dir_len());
        encode_into(x, self.pos_freqs, p);
        encode_into(d, self.dir_freqs, q);
        f.copy_from_slice(feature);
    }

    /// Squashes a raw output row into a color in `[0,1]^3` and a density.
    pub fn squash(&self, raw: &[f64]) -> ([f64; 3], f64) {
        (
            [sigmoid(raw[0]), sigmoid(raw[1]), sigmoid(raw[2])],
            self.density_scale * softplus(raw[3]),
        )
    }

    /// Gradient of the squashing maps: `(dc, dsigma)` to raw outputs.
    pub fn squash_backward(&self, raw: &[f64], grad_c: [f64; 3], grad_sigma: f64, out: &mut [f64]) {
        for i in 0..3 {
            out[i] = grad_c[i] * sigmoid_grad(raw[i]);
        }
        out[3] = grad_sigma * self.density_scale * softplus_grad(raw[3]);
    }

    pub fn init(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mlp.init(rng, 0.1)
    }

    /// Parameters whose output layer is all zeros.
    pub fn init_zero_output(&self, rng: &mut impl Rng) -> Vec<f64> {
        self.mlp.init(rng, 0.0)
    }

    /// Index of the density bias within the parameter vector.
    pub fn density_bias_index(&self) -> usize {
        self.param_count() - 1
    }

    /// Decodes a single sample.
    pub fn decode(
        &self,
        params: &[f64],
        x: [f64; 3],
        d: [f64; 3],
        feature: &[f64],
    ) -> Result<([f64; 3], f64)> {
        if feature.len() != self.feature_dim {
            return domain(format!(
                "feature length {} != {}",
                feature.len(),
                self.feature_dim
            ));
        }
        let norm = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return domain(format!("view direction is not unit length (|d| = {norm})"));
        }
        let mut input = Array2::zeros((1, self.input_dim()));
        self.assemble(x, d, feature, input.row_mut(0).as_slice_mut().unwrap());
        let trace = self.mlp.forward(params, input);
        Ok(self.squash(trace.output.row(0).as_slice().unwrap()))
    }
}
