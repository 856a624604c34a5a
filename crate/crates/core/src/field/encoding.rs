//! Sinusoidal positional encoding.

/// Encoded length for a 3-vector with `freqs` octaves.
pub const fn encoded_len(freqs: usize) -> usize {
    3 + 3 * 2 * freqs
}

/// Writes `(p, sin(2^0 p), cos(2^0 p), ..., sin(2^(L-1) p), cos(2^(L-1) p))`
/// into `out`, frequency-major with the sine triple before the cosine triple.
pub fn encode_into(p: [f64; 3], freqs: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), encoded_len(freqs));
    out[..3].copy_from_slice(&p);
    let mut scale = 1.0;
    for k in 0..freqs {
        let base = 3 + 6 * k;
        for i in 0..3 {
            let (s, c) = (scale * p[i]).sin_cos();
            out[base + i] = s;
            out[base + 3 + i] = c;
        }
        scale *= 2.0;
    }
}

pub fn positional_encoding(p: [f64; 3], freqs: usize) -> Vec<f64> {
    let mut out = vec![0.0; encoded_len(freqs)];
    encode_into(p, freqs, &mut out);
    out
}

/// Pulls a gradient on the encoding back onto `p`.
pub fn encode_backward(p: [f64; 3], freqs: usize, grad: &[f64]) -> [f64; 3] {
    let mut g = [grad[0], grad[1], grad[2]];
    let mut scale = 1.0;
    for k in 0..freqs {
        let base = 3 + 6 * k;
        for i in 0..3 {
            let (s, c) = (scale * p[i]).sin_cos();
            g[i] += scale * (c * grad[base + i] - s * grad[base + 3 + i]);
        }
        scale *= 2.0;
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn origin_encoding() {
        let e = positional_encoding([0.0; 3], 10);
        assert_eq!(e.len(), 63);
        for k in 0..10 {
            assert!(e[3 + 6 * k..3 + 6 * k + 3].iter().all(|&v| v == 0.0));
            assert!(e[3 + 6 * k + 3..3 + 6 * k + 6].iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn second_octave_sine_vanishes_at_half_pi() {
        let e = positional_encoding([PI * 0.5, 0.0, 0.0], 10);
        // octave k = 1 -> sin(2 * pi / 2)
        assert!(e[3 + 6].abs() < 1e-12);
        assert_eq!(&e[..3], &[PI * 0.5, 0.0, 0.0]);
    }

    #[test]
    fn backward_matches_differences() {
        let p = [0.3, -0.7, 0.11];
        let w: Vec<f64> = (0..encoded_len(4)).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let f = |p: [f64; 3]| -> f64 {
            positional_encoding(p, 4).iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        let g = encode_backward(p, 4, &w);
        for i in 0..3 {
            let mut a = p;
            let mut b = p;
            a[i] += 1e-6;
            b[i] -= 1e-6;
            let fd = (f(a) - f(b)) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7 * fd.abs().max(1.0));
        }
    }
}
