//! Dense interleaved f64 images and bilinear sampling taps.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "{} values for a {width}x{height}x{channels} image",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::Shape(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Single channel `c` as its own image.
    pub fn channel(&self, c: usize) -> Image {
        let data = self.data.chunks(self.channels).map(|p| p[c]).collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Rectangular crop `[x0, x0 + w) x [y0, y0 + h)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Image {
        let mut out = Image::new(w, h, self.channels);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * self.channels;
            let dst = y * w * self.channels;
            out.data[dst..dst + w * self.channels]
                .copy_from_slice(&self.data[src..src + w * self.channels]);
        }
        out
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..self.clone()
        }
    }
}

/// Up to four bilinear taps on a zero-padded grid, with the derivatives of
/// each weight with respect to the continuous sample position.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub dwdx: [f64; 4],
    pub dwdy: [f64; 4],
    pub len: usize,
}

impl Taps {
    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        (0..self.len).map(move |i| (self.index[i], self.weight[i]))
    }
}

/// Bilinear footprint of `(x, y)` on a `width x height` grid whose texel
/// centers sit at integer coordinates. Texels outside the grid read as zero,
/// so they are simply left out.
pub fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> Taps {
    let mut taps = Taps::default();
    if !(x > -1.0 && y > -1.0 && x < width as f64 && y < height as f64) {
        return taps;
    }
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let corners = [
        (x0, y0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
        (x0 + 1, y0, fx * (1.0 - fy), 1.0 - fy, -fx),
        (x0, y0 + 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
        (x0 + 1, y0 + 1, fx * fy, fy, fx),
    ];
    for (cx, cy, w, dx, dy) in corners {
        if cx >= 0 && cy >= 0 && (cx as usize) < width && (cy as usize) < height {
            let i = taps.len;
            taps.index[i] = cy as usize * width + cx as usize;
            taps.weight[i] = w;
            taps.dwdx[i] = dx;
            taps.dwdy[i] = dy;
            taps.len += 1;
        }
    }
    taps
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_at_node_are_exact() {
        let t = bilinear_taps(2.0, 3.0, 5, 5);
        let total: f64 = t.iter().map(|(_, w)| w).sum();
        assert_eq!(total, 1.0);
        let (i, w) = t.iter().find(|&(_, w)| w > 0.0).unwrap();
        assert_eq!((i, w), (3 * 5 + 2, 1.0));
    }

    #[test]
    fn far_outside_has_no_taps() {
        assert_eq!(bilinear_taps(-5.0, 0.0, 4, 4).len, 0);
        assert_eq!(bilinear_taps(0.0, 4.0, 4, 4).len, 0);
        assert_eq!(bilinear_taps(f64::NAN, 0.0, 4, 4).len, 0);
    }

    #[test]
    fn border_fades_to_zero() {
        let t = bilinear_taps(3.5, 0.0, 4, 4);
        let total: f64 = t.iter().map(|(_, w)| w).sum();
        assert!((total - 0.5).abs() < 1e-15);
    }

    #[test]
    fn crop_copies_rows() {
        let img = Image::from_vec(3, 2, 1, vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(img.crop(1, 0, 2, 2).data, vec![1., 2., 4., 5.]);
    }
}
