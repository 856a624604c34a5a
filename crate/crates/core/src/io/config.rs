//! Run configuration: one TOML file fully determines a run.

use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::experiment::{default_camera, HELD_OUT_OFFSETS, TRAIN_OFFSETS};
use crate::field::MpiMode;
use crate::geometry::{Camera, Pose};
use crate::losses::{LossWeights, SSIM_WINDOW};
use crate::optimizer::TrainConfig;
use crate::pipeline::ModelSpec;
use crate::scene::{scene_preset, Layer, LayeredScene, PresetFrame, PRESETS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory, relative to the config file.
    pub output_dir: String,
    pub scene: SceneConfig,
    pub cameras: CameraConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainSection,
}

/// Either a named preset or explicit constant-color rectangles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub layers: Vec<LayerConfig>,
    /// Multiplicative log-normal noise on the teacher disparity.
    pub noise_level: f64,
    pub points_per_view: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerConfig {
    /// Scene units along the source optical axis.
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha: f64,
    /// `[u0, v0, u1, v1]` in source-image fractions; full frame if absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rect: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraConfig {
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels, both axes.
    pub focal: f64,
    pub targets: Vec<CameraPlacement>,
    pub held_out: Vec<CameraPlacement>,
}

/// Camera placement relative to the source camera, which sits at the
/// origin looking down +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPlacement {
    /// Camera center in scene units.
    pub center: [f64; 3],
    /// Rotation about x, y, z in degrees (camera-to-world, applied x first).
    #[serde(default, skip_serializing_if = "is_zero3")]
    pub rotation_deg: [f64; 3],
}

fn is_zero3(v: &[f64; 3]) -> bool {
    *v == [0.0; 3]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub near: f64,
    pub far: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub mode: MpiMode,
    pub extractor_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    pub density_scale: f64,
    pub fine_density_bias: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub lr_coarse: f64,
    pub lr_fine: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    pub patch_size: usize,
    pub fine_patch_size: usize,
    pub patches_per_step: usize,
    /// Checkpoint interval in steps; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = ModelSpec::default();
        let t = TrainConfig::default();
        let place = |offs: &[(f64, f64)]| {
            offs.iter()
                .map(|&(x, y)| CameraPlacement {
                    center: [x, y, 0.0],
                    rotation_deg: [0.0; 3],
                })
                .collect()
        };
        Self {
            seed: 0,
            output_dir: "out".into(),
            scene: SceneConfig {
                preset: Some("three-planes".into()),
                layers: Vec::new(),
                noise_level: 0.02,
                points_per_view: 32,
            },
            cameras: CameraConfig {
                width: spec.width,
                height: spec.height,
                focal: spec.width as f64,
                targets: place(&TRAIN_OFFSETS),
                held_out: place(&HELD_OUT_OFFSETS),
            },
            model: ModelConfig {
                near: spec.near,
                far: spec.far,
                n_coarse: spec.n_coarse,
                n_fine: spec.n_fine,
                mode: spec.mode,
                extractor_hidden: spec.extractor_hidden,
                decoder_hidden: spec.decoder_hidden,
                decoder_layers: spec.decoder_layers,
                density_scale: spec.density_scale,
                fine_density_bias: spec.fine_density_bias,
            },
            loss: t.loss,
            train: TrainSection {
                stage1_steps: t.stage1_steps,
                stage2_steps: t.stage2_steps,
                lr_coarse: t.lr_coarse,
                lr_fine: t.lr_fine,
                decay_factor: t.decay_factor,
                decay_every: t.decay_every,
                patch_size: t.patch_size,
                fine_patch_size: t.fine_patch_size,
                patches_per_step: t.patches_per_step,
                checkpoint_every: 500,
            },
        }
    }
}

/// Line (1-based) of `key` inside `[table]` of a TOML document, if present.
fn locate(text: &str, table: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            current = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if current == format!("{table}.{key}") {
                return Some(i + 1);
            }
            continue;
        }
        if current == table {
            if let Some((k, _)) = l.split_once('=') {
                if k.trim().trim_matches('"') == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

struct Check<'a> {
    text: Option<&'a str>,
}

impl Check<'_> {
    fn fail(&self, table: &str, key: &str, msg: impl std::fmt::Display) -> Error {
        let path = if table.is_empty() { key.to_string() } else { format!("{table}.{key}") };
        let line = self.text.and_then(|t| locate(t, table, key));
        match line {
            Some(l) => Error::Config(format!("line {l}: {path}: {msg}")),
            None => Error::Config(format!("{path}: {msg}")),
        }
    }

    fn ensure(&self, ok: bool, table: &str, key: &str, msg: &str) -> Result<()> {
        if ok {
            Ok(())
        } else {
            Err(self.fail(table, key, msg))
        }
    }
}

impl RunConfig {
    /// Parses and validates a TOML document. Errors name the offending field
    /// and its line.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1));
            let msg = e.message().to_string();
            match line {
                Some(l) => Error::Config(format!("line {l}: {msg}")),
                None => Error::Config(msg),
            }
        })?;
        cfg.validate_with(Some(text))?;
        Ok(cfg)
    }

    /// Panics if the seed exceeds `i64::MAX`, which TOML cannot hold;
    /// [`RunConfig::validate`] rejects such configs.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with(None)
    }

    fn validate_with(&self, text: Option<&str>) -> Result<()> {
        let c = Check { text };
        c.ensure(self.seed <= i64::MAX as u64, "", "seed", "must fit a signed 64-bit integer")?;
        let s = &self.scene;
        match (&s.preset, s.layers.is_empty()) {
            (Some(p), true) => c.ensure(
                PRESETS.contains(&p.as_str()),
                "scene",
                "preset",
                &format!("unknown preset {p:?} (expected one of {})", PRESETS.join(", ")),
            )?,
            (None, false) => {
                for l in &s.layers {
                    c.ensure(l.depth > 0.0, "scene", "layers", "layer depth must be positive")?;
                    c.ensure(
                        l.color.iter().chain([&l.alpha]).all(|v| (0.0..=1.0).contains(v)),
                        "scene",
                        "layers",
                        "layer color and alpha must lie in [0, 1]",
                    )?;
                }
                c.ensure(
                    s.layers.windows(2).all(|w| w[1].depth > w[0].depth),
                    "scene",
                    "layers",
                    "layer depths must be strictly increasing",
                )?;
            }
            _ => return Err(c.fail("scene", "preset", "give exactly one of preset or layers")),
        }
        c.ensure(s.noise_level >= 0.0 && s.noise_level.is_finite(), "scene", "noise_level", "must be >= 0")?;

        let cam = &self.cameras;
        c.ensure(cam.width >= SSIM_WINDOW, "cameras", "width", "must be at least 11 pixels")?;
        c.ensure(cam.height >= SSIM_WINDOW, "cameras", "height", "must be at least 11 pixels")?;
        c.ensure(cam.focal > 0.0 && cam.focal.is_finite(), "cameras", "focal", "must be positive")?;
        for p in cam.targets.iter().chain(&cam.held_out) {
            c.ensure(
                p.center.iter().chain(&p.rotation_deg).all(|v| v.is_finite()),
                "cameras",
                "targets",
                "camera placements must be finite",
            )?;
        }

        let m = &self.model;
        c.ensure(m.near > 0.0, "model", "near", "must be positive")?;
        c.ensure(m.far > m.near && m.far.is_finite(), "model", "far", "must exceed near")?;
        c.ensure(m.n_coarse >= 2, "model", "n_coarse", "must be at least 2")?;
        c.ensure(m.n_fine >= 1, "model", "n_fine", "must be at least 1")?;
        c.ensure(m.extractor_hidden >= 1, "model", "extractor_hidden", "must be at least 1")?;
        c.ensure(m.decoder_hidden >= 1, "model", "decoder_hidden", "must be at least 1")?;
        c.ensure(m.density_scale > 0.0 && m.density_scale.is_finite(), "model", "density_scale", "must be positive")?;
        c.ensure(m.fine_density_bias.is_finite(), "model", "fine_density_bias", "must be finite")?;

        let l = &self.loss;
        for (k, v) in [("ssim", l.ssim), ("point", l.point), ("pseudo_depth", l.pseudo_depth), ("grad", l.grad)] {
            c.ensure(v >= 0.0 && v.is_finite(), "loss", k, "must be >= 0")?;
        }

        let t = &self.train;
        c.ensure(t.lr_coarse > 0.0 && t.lr_coarse.is_finite(), "train", "lr_coarse", "must be positive")?;
        c.ensure(t.lr_fine > 0.0 && t.lr_fine.is_finite(), "train", "lr_fine", "must be positive")?;
        c.ensure(t.decay_factor > 0.0 && t.decay_factor <= 1.0, "train", "decay_factor", "must lie in (0, 1]")?;
        let max_patch = cam.width.min(cam.height);
        for (k, v) in [("patch_size", t.patch_size), ("fine_patch_size", t.fine_patch_size)] {
            c.ensure(
                (SSIM_WINDOW..=max_patch).contains(&v) || (l.ssim == 0.0 && (1..=max_patch).contains(&v)),
                "train",
                k,
                "must lie between 11 and the image size",
            )?;
        }
        c.ensure(t.patches_per_step >= 1, "train", "patches_per_step", "must be at least 1")?;
        Ok(())
    }

    /// Stable digest of the canonical serialization.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = &self.model;
        ModelSpec {
            width: self.cameras.width,
            height: self.cameras.height,
            near: m.near,
            far: m.far,
            n_coarse: m.n_coarse,
            n_fine: m.n_fine,
            mode: m.mode,
            extractor_hidden: m.extractor_hidden,
            decoder_hidden: m.decoder_hidden,
            decoder_layers: m.decoder_layers,
            density_scale: m.density_scale,
            fine_density_bias: m.fine_density_bias,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            stage1_steps: t.stage1_steps,
            stage2_steps: t.stage2_steps,
            lr_coarse: t.lr_coarse,
            lr_fine: t.lr_fine,
            decay_factor: t.decay_factor,
            decay_every: t.decay_every,
            patch_size: t.patch_size,
            fine_patch_size: t.fine_patch_size,
            patches_per_step: t.patches_per_step,
            seed: self.seed,
            loss: self.loss,
        }
    }

    pub fn source_camera(&self) -> Result<Camera> {
        let c = &self.cameras;
        let base = default_camera(c.width, c.height)?;
        Camera::new(c.focal, c.focal, base.cx, base.cy, c.width, c.height, Pose::identity())
    }

    pub fn place(&self, p: &CameraPlacement) -> Result<Camera> {
        let [rx, ry, rz] = p.rotation_deg.map(f64::to_radians);
        let cam_to_world: Matrix3<f64> = (Rotation3::from_axis_angle(&Vector3::z_axis(), rz)
            * Rotation3::from_axis_angle(&Vector3::y_axis(), ry)
            * Rotation3::from_axis_angle(&Vector3::x_axis(), rx))
        .into_inner();
        let pose = Pose::from_center(cam_to_world.transpose(), Vector3::from(p.center))?;
        Ok(self.source_camera()?.with_pose(pose))
    }

    pub fn target_cameras(&self) -> Result<Vec<Camera>> {
        self.cameras.targets.iter().map(|p| self.place(p)).collect()
    }

    pub fn held_out_cameras(&self) -> Result<Vec<Camera>> {
        self.cameras.held_out.iter().map(|p| self.place(p)).collect()
    }

    pub fn build_scene(&self) -> Result<LayeredScene> {
        let cam = self.source_camera()?;
        if let Some(p) = &self.scene.preset {
            let frame = PresetFrame {
                camera: cam,
                near: self.model.near,
                far: self.model.far,
                planes: self.model.n_coarse,
            };
            return scene_preset(p, &frame);
        }
        let n = cam.pixel_count();
        let layers = self
            .scene
            .layers
            .iter()
            .map(|l| {
                let [u0, v0, u1, v1] = l.rect.unwrap_or([0.0, 0.0, 1.0, 1.0]);
                let mut rgb = vec![0.0; n * 3];
                let mut alpha = vec![0.0; n];
                for y in 0..cam.height {
                    for x in 0..cam.width {
                        let u = x as f64 / cam.width as f64;
                        let v = y as f64 / cam.height as f64;
                        if u >= u0 && u < u1 && v >= v0 && v < v1 {
                            let i = y * cam.width + x;
                            rgb[i * 3..i * 3 + 3].copy_from_slice(&l.color);
                            alpha[i] = l.alpha;
                        }
                    }
                }
                Layer {
                    depth: l.depth,
                    rgb,
                    alpha,
                }
            })
            .collect();
        let last = self.scene.layers.last().map_or(self.model.far, |l| l.depth);
        LayeredScene::new(cam, layers, [0.0; 3], self.model.far.max(last))
    }
}

/// Resolves `path` against the directory holding the config file.
pub fn resolve(config_path: &Path, path: &str) -> PathBuf {
    let p = Path::new(path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}
