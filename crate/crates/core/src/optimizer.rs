//! Adam updates and the two-stage training schedule.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{BranchWeights, LossReport, LossWeights};
use crate::pipeline::{loss_and_grad, Gradients, Group, Model, Objective, ParameterStore, Patch, TrainView, Trainable, Variates};
use crate::raster::Image;
use crate::geometry::Camera;
use crate::sampler::ray_rng;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Loss above which training counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e3;

/// First and second moments per parameter, with a step counter per block so
/// bias correction restarts when a block starts training.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(store: &ParameterStore) -> Self {
        Self {
            m: store.blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            v: store.blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
            steps: vec![0; store.blocks.len()],
        }
    }
}

/// One bias-corrected Adam update. `lr` gives each group's learning rate;
/// groups mapped to `None` are left untouched, moments included.
pub fn adam_step(
    store: &mut ParameterStore,
    state: &mut AdamState,
    grads: &Gradients,
    lr: impl Fn(Group) -> Option<f64>,
) -> Result<()> {
    if grads.blocks.len() != store.blocks.len() || state.m.len() != store.blocks.len() {
        return Err(Error::Shape("gradient and optimizer state must match the parameter blocks".into()));
    }
    for (b, block) in store.blocks.iter_mut().enumerate() {
        let Some(rate) = lr(block.group) else { continue };
        let g = &grads.blocks[b];
        if g.len() != block.values.len() || state.m[b].len() != block.values.len() {
            return Err(Error::Shape(format!("block {} changed size", block.name)));
        }
        state.steps[b] += 1;
        let t = state.steps[b] as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let (m, v) = (&mut state.m[b], &mut state.v[b]);
        for i in 0..g.len() {
            m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
            v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            block.values[i] -= rate * mh / (vh.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub stage1_steps: u64,
    pub stage2_steps: u64,
    pub lr_coarse: f64,
    pub lr_fine: f64,
    pub decay_factor: f64,
    pub decay_every: u64,
    /// Side of the square pixel window rendered per step in each stage.
    pub patch_size: usize,
    pub fine_patch_size: usize,
    pub patches_per_step: usize,
    pub seed: u64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1_steps: 2000,
            stage2_steps: 2000,
            lr_coarse: 0.1,
            lr_fine: 1e-3,
            decay_factor: 0.5,
            decay_every: 800,
            patch_size: 32,
            fine_patch_size: 32,
            patches_per_step: 1,
            seed: 0,
            loss: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Coarse,
    Fine,
}

impl Stage {
    pub fn number(self) -> u8 {
        match self {
            Stage::Coarse => 1,
            Stage::Fine => 2,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> u64 {
        self.stage1_steps + self.stage2_steps
    }

    /// Stage and step within the stage for global step `step`.
    pub fn stage_of(&self, step: u64) -> (Stage, u64) {
        if step < self.stage1_steps {
            (Stage::Coarse, step)
        } else {
            (Stage::Fine, step - self.stage1_steps)
        }
    }

    pub fn learning_rate(&self, base: f64, local_step: u64) -> f64 {
        let k = if self.decay_every == 0 { 0 } else { local_step / self.decay_every };
        base * self.decay_factor.powi(k.min(i32::MAX as u64) as i32)
    }

    pub fn branch_weights(stage: Stage) -> BranchWeights {
        match stage {
            Stage::Coarse => BranchWeights::COARSE_ONLY,
            // the coarse term carries no gradient once coarse parameters are
            // frozen; it is kept so the reported total is the full objective
            Stage::Fine => BranchWeights::FULL,
        }
    }

    pub fn trainable(stage: Stage) -> Trainable {
        match stage {
            Stage::Coarse => Trainable { coarse: true, fine: false },
            Stage::Fine => Trainable { coarse: false, fine: true },
        }
    }
}

/// Training supervision: the source image and the views to sample patches
/// from (the source view itself included).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainData {
    pub source_image: Image,
    pub source: Camera,
    pub views: Vec<TrainView>,
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub adam: AdamState,
    /// Number of completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let adam = AdamState::new(&model.params);
        Self { model, adam, step: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub stage: Stage,
    pub lr: f64,
    pub report: LossReport,
}

/// Patches drawn for `step`, keyed by (seed, step) alone.
pub fn step_patches(data: &TrainData, cfg: &TrainConfig, step: u64) -> Result<Vec<Patch>> {
    let mut rng = ray_rng(cfg.seed, u64::MAX, step);
    (0..cfg.patches_per_step)
        .map(|_| {
            let view = rng.gen_range(0..data.views.len());
            let cam = &data.views[view].camera;
            let p = match cfg.stage_of(step).0 {
                Stage::Coarse => cfg.patch_size,
                Stage::Fine => cfg.fine_patch_size,
            };
            if p > cam.width || p > cam.height {
                return Err(Error::Domain(format!("patch size {p} exceeds the {}x{} view", cam.width, cam.height)));
            }
            Ok(Patch {
                view,
                x0: rng.gen_range(0..=cam.width - p),
                y0: rng.gen_range(0..=cam.height - p),
                width: p,
                height: p,
            })
        })
        .collect()
}

/// Runs the remaining steps of the schedule. `on_step` sees every completed
/// step. On divergence the state is left as it was before the failing step.
pub fn train(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    train_until(state, data, cfg, cfg.total_steps(), on_step)
}

/// Like [`train`], but stops once `until` steps are done (or the schedule
/// ends). Stopping early and resuming gives the uninterrupted result.
pub fn train_until(
    state: &mut TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    until: u64,
    mut on_step: impl FnMut(&StepRecord, &TrainState) -> Result<()>,
) -> Result<()> {
    if data.views.is_empty() {
        return Err(Error::Domain("no training views".into()));
    }
    while state.step < until.min(cfg.total_steps()) {
        let step = state.step;
        let (stage, local) = cfg.stage_of(step);
        let patches = step_patches(data, cfg, step)?;
        let obj = Objective {
            source_image: &data.source_image,
            source: &data.source,
            views: &data.views,
            loss: &cfg.loss,
            branches: TrainConfig::branch_weights(stage),
            variates: Variates::Stratified { seed: cfg.seed, iteration: step },
        };
        let trainable = TrainConfig::trainable(stage);
        let (report, grads) = match loss_and_grad(&state.model, &obj, &patches, Some(trainable)) {
            Ok(r) => r,
            Err(Error::NonFinite(_)) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        if !report.total.is_finite() || report.total > DIVERGENCE_LIMIT {
            return Err(Error::Divergence { step, loss: report.total });
        }
        let base = match stage {
            Stage::Coarse => cfg.lr_coarse,
            Stage::Fine => cfg.lr_fine,
        };
        let lr = cfg.learning_rate(base, local);
        adam_step(&mut state.model.params, &mut state.adam, &grads.unwrap(), |g| {
            trainable.allows(g).then_some(lr)
        })?;
        state.step += 1;
        on_step(
            &StepRecord {
                step,
                stage,
                lr,
                report,
            },
            state,
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::ModelSpec;

    fn store() -> ParameterStore {
        let mut s = ParameterStore::default();
        s.push("a", Group::Coarse, vec![1.0, -2.0, 0.5]).unwrap();
        s.push("b", Group::Fine, vec![3.0]).unwrap();
        s
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut st = AdamState::new(&s);
        let g = s.zeros_like();
        adam_step(&mut s, &mut st, &g, |_| Some(0.1)).unwrap();
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = store();
        let mut st = AdamState::new(&s);
        let g = Gradients {
            blocks: vec![vec![2.0, -0.3, 1e3], vec![5.0]],
        };
        adam_step(&mut s, &mut st, &g, |grp| (grp == Group::Coarse).then_some(0.01)).unwrap();
        let a = &s.blocks[0].values;
        assert!((a[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((a[1] - (-2.0 + 0.01)).abs() < 1e-9);
        assert!((a[2] - (0.5 - 0.01)).abs() < 1e-9);
        assert_eq!(s.blocks[1].values, vec![3.0]);
        assert_eq!(st.steps, vec![1, 0]);
    }

    #[test]
    fn adam_matches_reference_loop() {
        let mut s = store();
        let mut st = AdamState::new(&s);
        let (mut m, mut v, mut x) = (0.0, 0.0, 1.0);
        for t in 1..=5 {
            let g = 0.3 * t as f64 - 0.7;
            let grads = Gradients {
                blocks: vec![vec![g, 0.0, 0.0], vec![0.0]],
            };
            adam_step(&mut s, &mut st, &grads, |_| Some(0.05)).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= 0.05 * mh / (vh.sqrt() + 1e-8);
        }
        assert!((s.blocks[0].values[0] - x).abs() < 1e-14);
    }

    #[test]
    fn schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.stage_of(1999), (Stage::Coarse, 1999));
        assert_eq!(cfg.stage_of(2000), (Stage::Fine, 0));
        assert_eq!(cfg.learning_rate(1.0, 799), 1.0);
        assert_eq!(cfg.learning_rate(1.0, 800), 0.5);
        assert_eq!(cfg.learning_rate(1.0, 1600), 0.25);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut s = store();
        let mut st = AdamState::new(&s);
        let g = Gradients { blocks: vec![vec![0.0]] };
        assert!(adam_step(&mut s, &mut st, &g, |_| Some(0.1)).is_err());
    }

    #[test]
    fn oversized_loss_is_divergence() {
        let spec = ModelSpec {
            width: 12,
            height: 12,
            n_coarse: 4,
            n_fine: 2,
            decoder_hidden: 8,
            decoder_layers: 1,
            extractor_hidden: 2,
            ..ModelSpec::default()
        };
        let cam = Camera::new(12.0, 12.0, 5.5, 5.5, 12, 12, crate::geometry::Pose::identity()).unwrap();
        let img = Image::filled(12, 12, 3, 0.5);
        let data = TrainData {
            source_image: img.clone(),
            source: cam,
            views: vec![TrainView {
                camera: cam,
                image: img.map(|v| 1.0 - v),
                teacher: Some(Image::from_vec(12, 12, 1, (0..144).map(|i| 0.2 + (i % 7) as f64 * 0.1).collect()).unwrap()),
                points: None,
            }],
        };
        let cfg = TrainConfig {
            stage1_steps: 0,
            stage2_steps: 50,
            patch_size: 12,
            fine_patch_size: 12,
            loss: LossWeights {
                pseudo_depth: 1e7,
                ..LossWeights::default()
            },
            ..TrainConfig::default()
        };
        let mut st = TrainState::new(Model::init(spec, 0).unwrap());
        let r = train(&mut st, &data, &cfg, |_, _| Ok(()));
        assert!(matches!(r, Err(Error::Divergence { step: 0, .. })), "{r:?}");
        assert_eq!(st.step, 0);
    }
}
