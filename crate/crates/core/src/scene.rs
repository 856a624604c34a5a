//! Synthetic layered scenes with an exact compositing renderer. They provide
//! ground-truth views, the stand-in depth teacher and sparse points.
//!
//! Layers are fronto-parallel planes in a reference camera's frame, each with
//! a texel grid aligned to that camera's pixel grid at the layer's depth.
//! Colors and optical thickness `-ln(1 - alpha)` are interpolated bilinearly
//! with zero padding, exactly as a multi-plane image with planes at the same
//! depths would be.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{domain, Error, Result};
use crate::field::{plane_depths, plane_intervals, MultiPlaneImage};
use crate::geometry::Camera;
use crate::losses::{SparsePoint, SparsePoints};
use crate::raster::{bilinear_taps, Image};

/// Alphas are capped just below one so optical thickness stays finite.
pub const MAX_THICKNESS: f64 = 27.631021115928547; // -ln(1e-12)

/// Opacity above which a pixel counts as a solid surface.
pub const SOLID_OPACITY: f64 = 0.99;

pub fn thickness(alpha: f64) -> f64 {
    (-(1.0 - alpha).max(1e-12).ln()).min(MAX_THICKNESS)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub depth: f64,
    /// `width x height x 3` colors in `[0, 1]`, on the reference pixel grid.
    pub rgb: Vec<f64>,
    /// `width x height` alphas in `[0, 1]`.
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayeredScene {
    /// Camera whose frame and pixel grid the layers live on.
    pub reference: Camera,
    pub layers: Vec<Layer>,
    pub background: [f64; 3],
    /// Depth credited to rays that pass every layer.
    pub z_far: f64,
}

impl LayeredScene {
    pub fn new(reference: Camera, layers: Vec<Layer>, background: [f64; 3], z_far: f64) -> Result<Self> {
        let n = reference.width * reference.height;
        if layers.is_empty() {
            return domain("a scene needs at least one layer");
        }
        if layers.windows(2).any(|w| !(w[1].depth > w[0].depth)) || !(layers[0].depth > 0.0) {
            return domain("layer depths must be positive and strictly increasing");
        }
        for (k, l) in layers.iter().enumerate() {
            if l.rgb.len() != n * 3 || l.alpha.len() != n {
                return Err(Error::Shape(format!("layer {k} does not match the reference grid")));
            }
            if l.alpha.iter().chain(&l.rgb).any(|v| !(0.0..=1.0).contains(v)) {
                return domain(format!("layer {k} has values outside [0, 1]"));
            }
        }
        if !(z_far >= layers.last().unwrap().depth) {
            return domain("z_far must lie behind the last layer");
        }
        Ok(Self {
            reference,
            layers,
            background,
            z_far,
        })
    }

    pub fn depths(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.depth).collect()
    }

    fn width(&self) -> usize {
        self.reference.width
    }

    fn height(&self) -> usize {
        self.reference.height
    }
}

/// Exact render of a scene: color, expected depth (background at `z_far`),
/// its inverse, and accumulated layer opacity.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleView {
    pub rgb: Image,
    pub depth: Image,
    pub disparity: Image,
    pub opacity: Image,
}

/// Renders `scene` from `cam` by front-to-back compositing of the layers.
pub fn oracle_render(scene: &LayeredScene, cam: &Camera) -> OracleView {
    let (w, h) = (cam.width, cam.height);
    let mut out = OracleView {
        rgb: Image::new(w, h, 3),
        depth: Image::new(w, h, 1),
        disparity: Image::new(w, h, 1),
        opacity: Image::new(w, h, 1),
    };
    let r = scene.reference;
    // target pixel ray, carried into the reference frame
    let rel_rot = r.pose.rotation() * cam.pose.rotation().transpose();
    let origin = r.pose.to_camera(&cam.pose.center());
    let tau: Vec<Vec<f64>> = scene
        .layers
        .iter()
        .map(|l| l.alpha.iter().map(|&a| thickness(a)).collect())
        .collect();
    for y in 0..h {
        for x in 0..w {
            let local = Vector3::new((x as f64 - cam.cx) / cam.fx, (y as f64 - cam.cy) / cam.fy, 1.0);
            let dir = rel_rot * local;
            let mut trans = 1.0;
            let mut rgb = [0.0; 3];
            let mut depth = 0.0;
            for (k, layer) in scene.layers.iter().enumerate() {
                let z = layer.depth;
                if dir.z.abs() < 1e-12 {
                    continue;
                }
                let s = (z - origin.z) / dir.z;
                if !(s > 0.0) {
                    continue;
                }
                let p = origin + dir * s;
                let u = r.fx * p.x / z + r.cx;
                let v = r.fy * p.y / z + r.cy;
                let taps = bilinear_taps(u, v, scene.width(), scene.height());
                let mut c = [0.0; 3];
                let mut t = 0.0;
                for (i, wt) in taps.iter() {
                    c[0] += wt * layer.rgb[i * 3];
                    c[1] += wt * layer.rgb[i * 3 + 1];
                    c[2] += wt * layer.rgb[i * 3 + 2];
                    t += wt * tau[k][i];
                }
                let alpha = -(-t).exp_m1();
                for ch in 0..3 {
                    rgb[ch] += trans * alpha * c[ch];
                }
                depth += trans * alpha * z;
                trans *= 1.0 - alpha;
            }
            for ch in 0..3 {
                rgb[ch] += trans * scene.background[ch];
            }
            depth += trans * scene.z_far;
            *out.rgb.at_mut(x, y, 0) = rgb[0];
            *out.rgb.at_mut(x, y, 1) = rgb[1];
            *out.rgb.at_mut(x, y, 2) = rgb[2];
            *out.depth.at_mut(x, y, 0) = depth;
            *out.disparity.at_mut(x, y, 0) = 1.0 / depth;
            *out.opacity.at_mut(x, y, 0) = 1.0 - trans;
        }
    }
    out
}

/// Oracle disparity with multiplicative log-normal noise of stdev
/// `noise_level`, reproducible from `seed`.
pub fn teacher_disparity(scene: &LayeredScene, cam: &Camera, noise_level: f64, seed: u64) -> Result<Image> {
    if !(noise_level >= 0.0) {
        return domain(format!("noise level must be nonnegative, got {noise_level}"));
    }
    let mut disp = oracle_render(scene, cam).disparity;
    if noise_level > 0.0 {
        let normal = Normal::new(0.0, noise_level).map_err(|e| Error::Domain(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut disp.data {
            *v *= normal.sample(&mut rng).exp();
        }
    }
    Ok(disp)
}

/// Up to `n` distinct pixels drawn uniformly among solid pixels, with their
/// oracle depths. Returned in row-major order.
pub fn sample_point_cloud(scene: &LayeredScene, cam: &Camera, n: usize, seed: u64) -> Result<SparsePoints> {
    if n == 0 {
        return domain("need at least one point");
    }
    let view = oracle_render(scene, cam);
    let solid: Vec<usize> = (0..cam.pixel_count())
        .filter(|&i| view.opacity.data[i] >= SOLID_OPACITY)
        .collect();
    if solid.is_empty() {
        return domain("view has no solid pixels to sample");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, solid.len(), n.min(solid.len())).into_vec();
    picks.sort_unstable();
    SparsePoints::new(
        picks
            .into_iter()
            .map(|j| {
                let i = solid[j];
                SparsePoint {
                    x: i % cam.width,
                    y: i / cam.width,
                    z: view.depth.data[i],
                }
            })
            .collect(),
    )
}

/// World-space point seen at pixel `(x, y)` at camera depth `z`.
pub fn unproject(cam: &Camera, x: f64, y: f64, z: f64) -> Vector3<f64> {
    let local = Vector3::new((x - cam.cx) / cam.fx * z, (y - cam.cy) / cam.fy * z, z);
    cam.pose.to_world(&local)
}

pub const PRESETS: [&str; 3] = ["three-planes", "checker-stack", "occluder"];

/// Geometry a preset is built against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PresetFrame {
    pub camera: Camera,
    pub near: f64,
    pub far: f64,
    /// Plane count of the MPI grid the checker-stack layers snap to.
    pub planes: usize,
}

fn layer_from(cam: &Camera, depth: f64, f: impl Fn(f64, f64) -> Option<[f64; 4]>) -> Layer {
    let n = cam.width * cam.height;
    let mut rgb = vec![0.0; n * 3];
    let mut alpha = vec![0.0; n];
    for y in 0..cam.height {
        for x in 0..cam.width {
            let i = y * cam.width + x;
            // normalized texel position, resolution independent
            let u = x as f64 / cam.width as f64;
            let v = y as f64 / cam.height as f64;
            if let Some(t) = f(u, v) {
                rgb[i * 3..i * 3 + 3].copy_from_slice(&t[..3]);
                alpha[i] = t[3];
            }
        }
    }
    Layer { depth, rgb, alpha }
}

fn inside(u: f64, v: f64, u0: f64, v0: f64, u1: f64, v1: f64) -> bool {
    u >= u0 && u < u1 && v >= v0 && v < v1
}

fn wave(a: f64) -> f64 {
    0.5 + 0.5 * a.sin()
}

/// Deterministic preset scenes: `three-planes` (opaque textured layers at
/// depths 1, 2, 4), `checker-stack` (four half-transparent checker layers
/// on the MPI plane grid) and `occluder` (small near square over a far
/// texture).
pub fn scene_preset(name: &str, frame: &PresetFrame) -> Result<LayeredScene> {
    let cam = &frame.camera;
    let tau = std::f64::consts::TAU;
    let layers = match name {
        "three-planes" => vec![
            layer_from(cam, 1.0, |u, v| {
                inside(u, v, 0.18, 0.22, 0.48, 0.55).then(|| {
                    [0.85, 0.25 + 0.5 * wave(tau * 2.0 * u), 0.2 + 0.3 * wave(tau * 1.5 * v), 1.0]
                })
            }),
            layer_from(cam, 2.0, |u, v| {
                inside(u, v, 0.42, 0.12, 0.88, 0.72).then(|| {
                    [0.15 + 0.4 * wave(tau * (u + v)), 0.7, 0.3 + 0.4 * wave(tau * 2.5 * v), 1.0]
                })
            }),
            layer_from(cam, 4.0, |u, v| {
                Some([
                    0.25 + 0.35 * wave(tau * 3.0 * u),
                    0.3 + 0.3 * wave(tau * 2.0 * v + 1.0),
                    0.65 + 0.25 * wave(tau * 1.5 * (u - v)),
                    1.0,
                ])
            }),
        ],
        "checker-stack" => {
            let grid = plane_depths(frame.near, frame.far, frame.planes)?;
            let step = frame.planes / 4;
            if step == 0 {
                return domain("checker-stack needs at least four planes");
            }
            let palette = [
                ([0.9, 0.2, 0.2], [0.2, 0.9, 0.3]),
                ([0.2, 0.3, 0.9], [0.9, 0.9, 0.2]),
                ([0.8, 0.4, 0.9], [0.1, 0.7, 0.7]),
                ([0.95, 0.6, 0.2], [0.3, 0.3, 0.3]),
            ];
            (0..4)
                .map(|k| {
                    let (a, b) = palette[k];
                    let period = 6 + 2 * k;
                    layer_from(cam, grid[k * step], move |u, v| {
                        let px = (u * cam.width as f64).round() as usize + k;
                        let py = (v * cam.height as f64).round() as usize;
                        let c = if (px / period + py / period) % 2 == 0 { a } else { b };
                        Some([c[0], c[1], c[2], 0.5])
                    })
                })
                .collect()
        }
        "occluder" => vec![
            layer_from(cam, 1.0, |u, v| {
                inside(u, v, 0.375, 0.375, 0.625, 0.625).then(|| [0.9, 0.8, 0.2, 1.0])
            }),
            layer_from(cam, 4.0, |u, v| {
                Some([0.2 + 0.3 * wave(tau * 4.0 * u), 0.35, 0.4 + 0.4 * wave(tau * 3.0 * v), 1.0])
            }),
        ],
        other => return domain(format!("unknown scene preset {other:?}")),
    };
    let z_far = frame.far.max(layers.last().unwrap().depth);
    LayeredScene::new(*cam, layers, [0.0; 3], z_far)
}

/// Multi-plane image that reproduces `scene` exactly: each layer is stored on
/// the plane at its depth with `sigma * delta = -ln(1 - alpha)`. Requires the
/// scene's reference camera to be the MPI's source camera.
pub fn mpi_from_scene(scene: &LayeredScene, depths: &[f64]) -> Result<MultiPlaneImage> {
    let intervals = plane_intervals(depths);
    let (w, h) = (scene.width(), scene.height());
    let n = w * h;
    let mut data = vec![0.0; depths.len() * n * 4];
    for layer in &scene.layers {
        let k = depths
            .iter()
            .position(|&z| (z - layer.depth).abs() <= 1e-12 * z)
            .ok_or_else(|| Error::Domain(format!("no plane at layer depth {}", layer.depth)))?;
        for i in 0..n {
            let o = (k * n + i) * 4;
            data[o..o + 3].copy_from_slice(&layer.rgb[i * 3..i * 3 + 3]);
            data[o + 3] = thickness(layer.alpha[i]) / intervals[k];
        }
    }
    MultiPlaneImage::new(depths.to_vec(), w, h, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Pose;
    use crate::losses::point_loss;

    fn cam(w: usize, h: usize) -> Camera {
        Camera::new(w as f64, w as f64, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h, Pose::identity())
            .unwrap()
    }

    fn shifted(c: &Camera, bx: f64, by: f64) -> Camera {
        c.with_pose(Pose::from_center(nalgebra::Matrix3::identity(), Vector3::new(bx, by, 0.0)).unwrap())
    }

    fn frame(c: Camera) -> PresetFrame {
        PresetFrame {
            camera: c,
            near: 1.0,
            far: 4.0,
            planes: 32,
        }
    }

    fn flat(c: &Camera, depth: f64, rgb: [f64; 3], alpha: f64) -> Layer {
        let n = c.pixel_count();
        Layer {
            depth,
            rgb: rgb.iter().copied().cycle().take(n * 3).collect(),
            alpha: vec![alpha; n],
        }
    }

    #[test]
    fn single_opaque_layer() {
        let c = cam(8, 6);
        let s = LayeredScene::new(c, vec![flat(&c, 2.5, [0.3, 0.6, 0.9], 1.0)], [0.0; 3], 4.0).unwrap();
        let v = oracle_render(&s, &c);
        for y in 0..6 {
            for x in 0..8 {
                assert!((v.rgb.at(x, y, 1) - 0.6).abs() < 1e-11);
                assert!((v.depth.at(x, y, 0) - 2.5).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn two_half_layers_over_background() {
        let c = cam(6, 6);
        let (c1, c2, bg) = ([0.8, 0.2, 0.4], [0.1, 0.9, 0.5], [0.3, 0.3, 0.7]);
        let s = LayeredScene::new(c, vec![flat(&c, 1.0, c1, 0.5), flat(&c, 2.0, c2, 0.5)], bg, 4.0).unwrap();
        let v = oracle_render(&s, &c);
        for ch in 0..3 {
            let expect = 0.5 * c1[ch] + 0.25 * c2[ch] + 0.25 * bg[ch];
            assert!((v.rgb.at(2, 3, ch) - expect).abs() < 1e-12);
        }
        assert!((v.opacity.at(2, 3, 0) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn lateral_shift_moves_texture_by_parallax() {
        let c = cam(48, 48);
        let s = scene_preset("three-planes", &frame(c)).unwrap();
        let b = 0.125;
        let moved = shifted(&c, b, 0.0);
        let (a, m) = (oracle_render(&s, &c), oracle_render(&s, &moved));
        // far layer at z = 4 shifts left by f b / z = 1.5 px; compare where
        // the far layer is visible in both and the shift lands on texels
        let (y, x0) = (44, 28);
        let xs = x0 as f64 + 48.0 * b / 4.0;
        let (xa, fr) = (xs.floor() as usize, xs - xs.floor());
        for ch in 0..3 {
            let expect = (1.0 - fr) * a.rgb.at(xa, y, ch) + fr * a.rgb.at(xa + 1, y, ch);
            assert!((m.rgb.at(x0, y, ch) - expect).abs() < 1e-9);
        }
    }

    #[test]
    fn preset_depths_and_opacity() {
        let c = cam(24, 20);
        let s = scene_preset("three-planes", &frame(c)).unwrap();
        assert_eq!(s.depths(), vec![1.0, 2.0, 4.0]);
        let cs = scene_preset("checker-stack", &frame(c)).unwrap();
        let v = oracle_render(&cs, &c);
        for o in &v.opacity.data {
            assert!((o - (1.0 - 0.5f64.powi(4))).abs() < 1e-12);
        }
        let grid = plane_depths(1.0, 4.0, 32).unwrap();
        for l in &cs.layers {
            assert!(grid.contains(&l.depth));
        }
        assert!(scene_preset("four-planes", &frame(c)).is_err());
    }

    #[test]
    fn disocclusion_band_width() {
        let c = cam(48, 48);
        let s = scene_preset("occluder", &frame(c)).unwrap();
        let b = 0.25;
        let t = shifted(&c, b, 0.0);
        let (src, tgt) = (oracle_render(&s, &c), oracle_render(&s, &t));
        let y = 24;
        // far surface seen in the target but hidden behind the square in the
        // source view
        let mut band = 0;
        for x in 0..48 {
            if (tgt.depth.at(x, y, 0) - 4.0).abs() > 1e-6 {
                continue;
            }
            let p = unproject(&t, x as f64, y as f64, 4.0);
            let xs = (48.0 * p.x / p.z + c.cx).round();
            if (0.0..48.0).contains(&xs) && src.depth.at(xs as usize, y, 0) < 1.5 {
                band += 1;
            }
        }
        let expect = 48.0 * b * (1.0 / 1.0 - 1.0 / 4.0);
        assert!((band as f64 - expect).abs() <= 1.0, "band {band} vs {expect}");
    }

    #[test]
    fn teacher_noise_contract() {
        let c = cam(32, 32);
        let s = scene_preset("three-planes", &frame(c)).unwrap();
        let exact = oracle_render(&s, &c).disparity;
        assert_eq!(teacher_disparity(&s, &c, 0.0, 3).unwrap(), exact);
        let a = teacher_disparity(&s, &c, 0.05, 3).unwrap();
        let b = teacher_disparity(&s, &c, 0.05, 3).unwrap();
        assert_eq!(a, b);
        let n = a.data.len() as f64;
        let mean: f64 = a.data.iter().zip(&exact.data).map(|(p, q)| (p / q).ln()).sum::<f64>() / n;
        assert!(mean.abs() < 3.0 * 0.05 / n.sqrt());
    }

    #[test]
    fn point_cloud_matches_oracle() {
        let c = cam(24, 24);
        let s = scene_preset("three-planes", &frame(c)).unwrap();
        let view = oracle_render(&s, &c);
        let p = sample_point_cloud(&s, &c, 32, 1).unwrap();
        assert_eq!(p.len(), 32);
        for q in &p.points {
            assert_eq!(q.z, view.depth.at(q.x, q.y, 0));
        }
        assert!(point_loss(&view.disparity, &p).unwrap().abs() < 1e-12);
        assert_eq!(sample_point_cloud(&s, &c, 1, 9).unwrap().len(), 1);
        let empty = LayeredScene::new(c, vec![flat(&c, 2.0, [0.5; 3], 0.0)], [0.0; 3], 4.0).unwrap();
        assert!(sample_point_cloud(&empty, &c, 4, 0).is_err());
    }

    #[test]
    fn mpi_needs_matching_planes() {
        let c = cam(8, 8);
        let s = scene_preset("three-planes", &frame(c)).unwrap();
        assert!(mpi_from_scene(&s, &plane_depths(1.0, 4.0, 32).unwrap()).is_err());
        assert!(mpi_from_scene(&s, &[1.0, 2.0, 4.0]).is_ok());
    }
}
