//! Camera rigs, training data built from a layered scene, and evaluation of
//! a trained model against the scene's exact renders.

use nalgebra::{Matrix3, Vector3};

use crate::error::Result;
use crate::geometry::{Camera, Pose};
use crate::losses::{metrics, Metrics};
use crate::optimizer::TrainData;
use crate::pipeline::{render_all, Model, TrainView};
use crate::render::{Branch, RenderedView};
use crate::scene::{oracle_render, sample_point_cloud, teacher_disparity, LayeredScene, OracleView, SOLID_OPACITY};

/// Source camera plus training and held-out target cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Rig {
    pub source: Camera,
    pub train: Vec<Camera>,
    pub held_out: Vec<Camera>,
}

/// Camera at the identity orientation with its center at `(bx, by, 0)`.
pub fn offset_camera(base: &Camera, bx: f64, by: f64) -> Result<Camera> {
    Ok(base.with_pose(Pose::from_center(Matrix3::identity(), Vector3::new(bx, by, 0.0))?))
}

/// Pinhole camera with focal length equal to the width and a centered
/// principal point.
pub fn default_camera(width: usize, height: usize) -> Result<Camera> {
    Camera::new(
        width as f64,
        width as f64,
        (width as f64 - 1.0) / 2.0,
        (height as f64 - 1.0) / 2.0,
        width,
        height,
        Pose::identity(),
    )
}

pub const TRAIN_OFFSETS: [(f64, f64); 4] = [(0.1, 0.0), (-0.1, 0.0), (0.0, 0.1), (0.0, -0.1)];
pub const HELD_OUT_OFFSETS: [(f64, f64); 2] = [(0.05, 0.03), (-0.04, -0.06)];

pub fn default_rig(width: usize, height: usize) -> Result<Rig> {
    let source = default_camera(width, height)?;
    let make = |offs: &[(f64, f64)]| -> Result<Vec<Camera>> {
        offs.iter().map(|&(x, y)| offset_camera(&source, x, y)).collect()
    };
    Ok(Rig {
        source,
        train: make(&TRAIN_OFFSETS)?,
        held_out: make(&HELD_OUT_OFFSETS)?,
    })
}

/// Oracle images, noisy teacher disparity and sparse points for the source
/// and every training target. View `i` draws its noise and points from
/// seeds derived from `seed` and `i`.
pub fn training_data(
    scene: &LayeredScene,
    rig: &Rig,
    noise_level: f64,
    points_per_view: usize,
    seed: u64,
) -> Result<TrainData> {
    let cams: Vec<&Camera> = std::iter::once(&rig.source).chain(&rig.train).collect();
    let mut views = Vec::with_capacity(cams.len());
    for (i, cam) in cams.into_iter().enumerate() {
        let view_seed = seed.wrapping_mul(0x9e37_79b9).wrapping_add(i as u64);
        let points = if points_per_view > 0 {
            Some(sample_point_cloud(scene, cam, points_per_view, view_seed ^ 0x5eed)?)
        } else {
            None
        };
        views.push(TrainView {
            camera: *cam,
            image: oracle_render(scene, cam).rgb,
            teacher: Some(teacher_disparity(scene, cam, noise_level, view_seed)?),
            points,
        });
    }
    Ok(TrainData {
        source_image: views[0].image.clone(),
        source: rig.source,
        views,
    })
}

/// Pixels whose oracle surface is solid and whose rendered disparity is
/// positive: the support of the depth metrics.
pub fn depth_mask(oracle: &OracleView, view: &RenderedView) -> Vec<bool> {
    oracle
        .opacity
        .data
        .iter()
        .zip(&view.disparity.data)
        .map(|(&o, &d)| o >= SOLID_OPACITY && d > 0.0)
        .collect()
}

/// Metrics of one rendered branch against the oracle. Rendered depth is
/// taken as inverse disparity.
pub fn branch_metrics(view: &RenderedView, oracle: &OracleView) -> Result<Metrics> {
    let mask = depth_mask(oracle, view);
    let depth = view.disparity.map(|d| if d > 0.0 { 1.0 / d } else { 0.0 });
    metrics(&view.rgb, &oracle.rgb, &depth, &oracle.depth, Some(&mask))
}

/// Metrics for every branch (coarse, fine, joint) of each camera.
pub fn evaluate(
    model: &Model,
    source_image: &crate::raster::Image,
    source: &Camera,
    scene: &LayeredScene,
    cams: &[Camera],
) -> Result<Vec<[(Branch, Metrics); 3]>> {
    cams.iter()
        .map(|cam| {
            let oracle = oracle_render(scene, cam);
            let views = render_all(model, source_image, source, cam)?;
            let mut out = [(Branch::Coarse, None), (Branch::Fine, None), (Branch::Joint, None)];
            for (slot, v) in out.iter_mut().zip(&views) {
                slot.1 = Some(branch_metrics(v, &oracle)?);
            }
            Ok(out.map(|(b, m)| (b, m.unwrap())))
        })
        .collect()
}
