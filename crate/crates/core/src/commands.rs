//! The operations behind the `nvs` command line: synthesize a scene's
//! artifacts, train, render, evaluate and self-check. Every path in a run
//! config is resolved against the config file's directory, and every output
//! carries the config hash.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::check::{self, Fault, SuiteReport};
use crate::error::{Error, Result};
use crate::experiment::{branch_metrics, training_data, Rig};
use crate::geometry::Camera;
use crate::io::checkpoint::Checkpoint;
use crate::io::config::{resolve, RunConfig};
use crate::io::formats::{encode_pfm, encode_ply, encode_png};
use crate::io::report::{log_line, Summary};
use crate::optimizer::{train_until, TrainData, TrainState};
use crate::pipeline::{render_all, render_view, Model};
use crate::render::{Branch, RenderedView};
use crate::scene::{oracle_render, unproject, LayeredScene};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train.log";
pub const TRAIN_SUMMARY_FILE: &str = "train_summary.txt";
pub const EVAL_FILE: &str = "eval.txt";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// A loaded config with everything derived from it.
pub struct Run {
    pub config: RunConfig,
    pub hash: String,
    pub output_dir: PathBuf,
    pub scene: LayeredScene,
    pub rig: Rig,
}

impl Run {
    pub fn load(config_path: &Path) -> Result<Self> {
        let config = RunConfig::load(config_path)?;
        let output_dir = resolve(config_path, &config.output_dir);
        let scene = config.build_scene()?;
        let rig = Rig {
            source: config.source_camera()?,
            train: config.target_cameras()?,
            held_out: config.held_out_cameras()?,
        };
        Ok(Self {
            hash: config.hash(),
            config,
            output_dir,
            scene,
            rig,
        })
    }

    fn out(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.output_dir)?;
        Ok(self.output_dir.join(name))
    }

    pub fn data(&self) -> Result<TrainData> {
        let s = &self.config.scene;
        training_data(&self.scene, &self.rig, s.noise_level, s.points_per_view, self.config.seed)
    }

    /// Source view, then training targets, then held-out views.
    pub fn named_cameras(&self) -> Vec<(String, Camera)> {
        let mut out = vec![("source".to_string(), self.rig.source)];
        out.extend(self.rig.train.iter().enumerate().map(|(i, c)| (format!("target-{i}"), *c)));
        out.extend(self.rig.held_out.iter().enumerate().map(|(i, c)| (format!("held-out-{i}"), *c)));
        out
    }

    pub fn camera(&self, name: &str) -> Result<Camera> {
        self.named_cameras()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, c)| c)
            .ok_or_else(|| {
                Error::Domain(format!(
                    "unknown view {name:?} (expected source, target-N or held-out-N)"
                ))
            })
    }

    fn source_image(&self) -> crate::raster::Image {
        oracle_render(&self.scene, &self.rig.source).rgb
    }

    pub fn load_checkpoint(&self, path: Option<&Path>) -> Result<Checkpoint> {
        let path = match path {
            Some(p) => p.to_path_buf(),
            None => self.output_dir.join(CHECKPOINT_FILE),
        };
        let ck = Checkpoint::load(&path)?;
        if ck.config_hash != self.hash {
            return Err(Error::Config(format!(
                "checkpoint {} was written by config {}, not {}",
                path.display(),
                ck.config_hash,
                self.hash
            )));
        }
        Ok(ck)
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes oracle images (PNG) and teacher disparity (PFM) for the source and
/// each training target, the sparse points of all those views in world
/// coordinates (PLY), and a manifest. Returns the written paths.
pub fn synth(config_path: &Path) -> Result<Vec<PathBuf>> {
    let run = Run::load(config_path)?;
    let data = run.data()?;
    let mut files = Vec::new();
    let mut manifest = Summary::default();
    manifest.push("config_hash", &run.hash);
    let mut cloud = Vec::new();
    let names = std::iter::once("source".to_string())
        .chain((0..run.rig.train.len()).map(|i| format!("target-{i}")));
    let mut write = |name: String, bytes: Vec<u8>, manifest: &mut Summary| -> Result<()> {
        let path = run.out(&name)?;
        fs::write(&path, &bytes)?;
        manifest.push(format!("file.{name}"), sha256_hex(&bytes));
        files.push(path);
        Ok(())
    };
    for (name, view) in names.zip(&data.views) {
        write(format!("{name}.png"), encode_png(&view.image, &run.hash)?, &mut manifest)?;
        let teacher = view.teacher.as_ref().expect("synthesized views carry a teacher");
        write(format!("{name}.pfm"), encode_pfm(teacher)?, &mut manifest)?;
        if let Some(points) = &view.points {
            for p in &points.points {
                let w = unproject(&view.camera, p.x as f64, p.y as f64, p.z);
                cloud.push([w.x, w.y, w.z]);
            }
        }
    }
    write("points.ply".into(), encode_ply(&cloud, &run.hash), &mut manifest)?;
    manifest.push("points", cloud.len());
    manifest.push("views", data.views.len());
    let path = run.out(MANIFEST_FILE)?;
    fs::write(&path, manifest.render())?;
    files.push(path);
    Ok(files)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub first_step: u64,
    pub steps: u64,
    pub final_loss: f64,
}

/// Runs (or with `resume`, continues) the two-stage schedule, stopping early
/// after `until` total steps if given. Writes a log line per step,
/// checkpoints at the configured interval and at the end, and a summary. On
/// divergence the last good state is checkpointed before the error is
/// returned.
pub fn train(config_path: &Path, resume: bool, until: Option<u64>) -> Result<TrainOutcome> {
    let run = Run::load(config_path)?;
    let data = run.data()?;
    let cfg = run.config.train_config();
    let ck_path = run.out(CHECKPOINT_FILE)?;
    let log_path = run.out(LOG_FILE)?;
    let mut state = if resume {
        run.load_checkpoint(Some(&ck_path))?.state
    } else {
        TrainState::new(Model::init(run.config.model_spec(), run.config.seed)?)
    };
    if state.model.spec != run.config.model_spec() {
        return Err(Error::Config("checkpoint model does not match [model]".into()));
    }
    // keep the log consistent with the checkpoint being continued
    let mut log_text = String::new();
    if resume {
        if let Ok(old) = fs::read_to_string(&log_path) {
            for line in old.lines() {
                let step = line
                    .strip_prefix("step=")
                    .and_then(|r| r.split_whitespace().next())
                    .and_then(|s| s.parse::<u64>().ok());
                if step.is_some_and(|s| s < state.step) {
                    log_text.push_str(line);
                    log_text.push('\n');
                }
            }
        }
    }
    let mut log = std::io::BufWriter::new(fs::File::create(&log_path)?);
    log.write_all(log_text.as_bytes())?;
    let first_step = state.step;
    let every = run.config.train.checkpoint_every;
    let save = |s: &TrainState| {
        Checkpoint {
            config_hash: run.hash.clone(),
            state: s.clone(),
        }
        .save(&ck_path)
    };
    let mut last_total = f64::NAN;
    let until = until.unwrap_or(u64::MAX);
    let result = train_until(&mut state, &data, &cfg, until, |r, s| {
        writeln!(log, "{}", log_line(r))?;
        last_total = r.report.total;
        if every > 0 && s.step % every == 0 && s.step < cfg.total_steps() {
            log.flush()?;
            save(s)?;
        }
        Ok(())
    });
    log.flush()?;
    save(&state)?;
    if let Err(e) = result {
        if let Error::Divergence { step, loss } = e {
            writeln!(log, "diverged step={step} loss={loss}")?;
            log.flush()?;
        }
        return Err(e);
    }
    let mut summary = Summary::default();
    summary.push("config_hash", &run.hash);
    summary.push("steps", state.step);
    summary.push("resumed_from", first_step);
    summary.push("final_loss", last_total);
    fs::write(run.out(TRAIN_SUMMARY_FILE)?, summary.render())?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        first_step,
        steps: state.step,
        final_loss: last_total,
    })
}

/// Renders one branch for a named view to `<stem>.png` and `<stem>.pfm`
/// (disparity). The stem defaults to `render-<view>-<branch>` in the
/// output directory.
pub fn render(
    config_path: &Path,
    checkpoint: Option<&Path>,
    view: &str,
    branch: Branch,
    stem: Option<&Path>,
) -> Result<(PathBuf, PathBuf, RenderedView)> {
    let run = Run::load(config_path)?;
    let ck = run.load_checkpoint(checkpoint)?;
    let cam = run.camera(view)?;
    let rendered = render_view(&ck.state.model, &run.source_image(), &run.rig.source, &cam, branch)?;
    let stem = match stem {
        Some(s) => s.to_path_buf(),
        None => run.out(&format!("render-{view}-{branch}"))?,
    };
    let png = stem.with_extension("png");
    let pfm = stem.with_extension("pfm");
    fs::write(&png, encode_png(&rendered.rgb, &run.hash)?)?;
    fs::write(&pfm, encode_pfm(&rendered.disparity)?)?;
    Ok((png, pfm, rendered))
}

/// Metrics of every branch on every held-out view, plus per-branch means,
/// written as `key = value` lines.
pub fn eval(config_path: &Path, checkpoint: Option<&Path>) -> Result<(PathBuf, Summary)> {
    let run = Run::load(config_path)?;
    let ck = run.load_checkpoint(checkpoint)?;
    let src = run.source_image();
    let mut summary = Summary::default();
    summary.push("config_hash", &run.hash);
    summary.push("step", ck.state.step);
    let views: Vec<(String, Camera)> = run
        .named_cameras()
        .into_iter()
        .filter(|(n, _)| n.starts_with("held-out"))
        .collect();
    let mut sums = vec![[0.0; 8]; 3];
    for (name, cam) in &views {
        let oracle = oracle_render(&run.scene, cam);
        let rendered = render_all(&ck.state.model, &src, &run.rig.source, cam)?;
        for (bi, r) in rendered.iter().enumerate() {
            let m = branch_metrics(r, &oracle)?;
            summary.push_metrics(&format!("{name}.{}", r.branch), &m);
            for (s, (_, v)) in sums[bi].iter_mut().zip(m.entries()) {
                *s += v;
            }
        }
    }
    if !views.is_empty() {
        for (bi, b) in Branch::ALL.iter().enumerate() {
            let keys = crate::losses::Metrics::KEYS;
            for (k, s) in keys.iter().zip(sums[bi]) {
                summary.push(format!("mean.{b}.{k}"), s / views.len() as f64);
            }
        }
    }
    let path = run.out(EVAL_FILE)?;
    fs::write(&path, summary.render())?;
    Ok((path, summary))
}

/// Runs every self-check suite, optionally with a deliberate defect.
pub fn check(fault: Option<Fault>) -> Result<Vec<SuiteReport>> {
    check::run_all(fault)
}
