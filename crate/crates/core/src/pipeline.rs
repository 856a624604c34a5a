//! The full differentiable model: coarse planes, feature extractor and fine
//! decoder, rendered per ray through all three branches, with an exact
//! reverse pass back to every parameter block.
//!
//! Rays are processed in fixed-size chunks. Each chunk is evaluated
//! independently and chunk gradients are summed in chunk order, so results
//! do not depend on the thread count.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::decoder::MlpTrace;
use crate::field::encoding::encode_backward;
use crate::field::extractor::ExtractorCache;
use crate::field::{
    plane_depths, CoarsePredictor, FeatureExtractor, FeatureMap, FineDecoder, MpiMode, MultiPlaneImage,
    FEATURE_DIM,
};
use crate::geometry::{Camera, PlaneHit, SourceRay};
use crate::losses::{
    branch_loss_grad, BranchTargets, BranchTerms, BranchWeights, LossReport, LossWeights, SparsePoints,
};
use crate::raster::{bilinear_taps, Image, Taps};
use crate::render::{composite, composite_backward, weights_backward, Branch, Composite, CompositeGrad, RenderedView};
use crate::sampler::{
    coarse_samples_along, intervals_backward, merge_samples_indexed, merged_intervals_backward, midpoint_variates, pdf_from_weights, ray_rng,
    stratified_variates, Draw, Origin, SampleSet, WeightPdf,
};

/// Rays per evaluation chunk.
pub const RAY_CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Coarse,
    Fine,
}

impl Group {
    pub fn name(self) -> &'static str {
        match self {
            Group::Coarse => "coarse",
            Group::Fine => "fine",
        }
    }
}

/// Architecture and sampling settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
    pub n_coarse: usize,
    pub n_fine: usize,
    pub mode: MpiMode,
    pub extractor_hidden: usize,
    pub decoder_hidden: usize,
    pub decoder_layers: usize,
    /// Multiplier on the fine decoder's density output.
    pub density_scale: f64,
    /// Initial bias of the fine density output.
    pub fine_density_bias: f64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            width: 48,
            height: 48,
            near: 1.0,
            far: 4.0,
            n_coarse: 32,
            n_fine: 16,
            mode: MpiMode::Direct,
            extractor_hidden: 16,
            decoder_hidden: 64,
            decoder_layers: 5,
            density_scale: 100.0,
            fine_density_bias: -4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub group: Group,
    pub values: Vec<f64>,
}

/// Named parameter blocks. Names are unique and shapes fixed at creation.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterStore {
    pub blocks: Vec<Block>,
}

impl ParameterStore {
    pub fn push(&mut self, name: &str, group: Group, values: Vec<f64>) -> Result<()> {
        if self.blocks.iter().any(|b| b.name == name) {
            return Err(Error::Domain(format!("duplicate parameter block {name:?}")));
        }
        self.blocks.push(Block {
            name: name.to_string(),
            group,
            values,
        });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Block> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn zeros_like(&self) -> Gradients {
        Gradients {
            blocks: self.blocks.iter().map(|b| vec![0.0; b.values.len()]).collect(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for b in &self.blocks {
            if b.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("parameter block {}", b.name)));
            }
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParameterStore`]'s blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub blocks: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn check_finite(&self, store: &ParameterStore) -> Result<()> {
        for (g, b) in self.blocks.iter().zip(&store.blocks) {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of {}", b.name)));
            }
        }
        Ok(())
    }
}

pub const COARSE_BLOCK: &str = "coarse";
pub const EXTRACTOR_BLOCK: &str = "extractor";
pub const DECODER_BLOCK: &str = "decoder";

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub coarse: CoarsePredictor,
    pub extractor: FeatureExtractor,
    pub decoder: FineDecoder,
    pub params: ParameterStore,
}

/// Which parameter groups receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Trainable {
    pub coarse: bool,
    pub fine: bool,
}

impl Trainable {
    pub const ALL: Trainable = Trainable { coarse: true, fine: true };

    pub fn allows(&self, g: Group) -> bool {
        match g {
            Group::Coarse => self.coarse,
            Group::Fine => self.fine,
        }
    }
}

impl Model {
    /// Architecture without parameters values; call [`Model::init`] or load a
    /// checkpoint to fill them.
    pub fn new(spec: ModelSpec) -> Result<Self> {
        if spec.width == 0 || spec.height == 0 {
            return Err(Error::Domain("image size must be positive".into()));
        }
        if spec.n_fine == 0 {
            return Err(Error::Domain("need at least one fine sample".into()));
        }
        let depths = plane_depths(spec.near, spec.far, spec.n_coarse)?;
        let coarse = CoarsePredictor::new(spec.mode, depths, spec.width, spec.height);
        let extractor = FeatureExtractor::new(spec.extractor_hidden);
        let decoder = FineDecoder::new(spec.decoder_hidden, spec.decoder_layers, spec.density_scale);
        let extractor_group = match spec.mode {
            MpiMode::Direct => Group::Fine,
            MpiMode::Feedforward => Group::Coarse,
        };
        let mut params = ParameterStore::default();
        params.push(COARSE_BLOCK, Group::Coarse, vec![0.0; coarse.param_count()])?;
        params.push(EXTRACTOR_BLOCK, extractor_group, vec![0.0; extractor.param_count()])?;
        params.push(DECODER_BLOCK, Group::Fine, vec![0.0; decoder.param_count()])?;
        Ok(Self {
            spec,
            coarse,
            extractor,
            decoder,
            params,
        })
    }

    /// Fresh seeded initialization of every block.
    pub fn init(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut m = Self::new(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        m.params.blocks[0].values = m.coarse.init(&mut rng);
        m.params.blocks[1].values = m.extractor.init(&mut rng);
        let mut dec = m.decoder.init(&mut rng);
        dec[m.decoder.density_bias_index()] = spec.fine_density_bias;
        m.params.blocks[2].values = dec;
        Ok(m)
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.params.blocks[i].values
    }

    fn uses_features(&self, fine: bool) -> bool {
        fine || self.spec.mode == MpiMode::Feedforward
    }

    /// Source-image quantities shared by every ray: features and the MPI.
    pub fn prepare<'a>(&self, image: &'a Image, src: &Camera, fine: bool) -> Result<Prepared<'a>> {
        if image.width != self.spec.width || image.height != self.spec.height || image.channels != 3 {
            return Err(Error::Shape(format!(
                "source image {}x{}x{} does not match the model's {}x{}x3",
                image.width, image.height, image.channels, self.spec.width, self.spec.height
            )));
        }
        if src.width != image.width || src.height != image.height {
            return Err(Error::Shape("source camera does not match the source image".into()));
        }
        let (features, cache) = if self.uses_features(fine) {
            let (f, c) = self.extractor.forward(self.block(1), image);
            (Some(f), Some(c))
        } else {
            (None, None)
        };
        let (mpi, raw) = self.coarse.predict(self.block(0), features.as_ref())?;
        Ok(Prepared {
            mpi,
            raw,
            features,
            cache,
            image,
            src: *src,
        })
    }
}

/// Per-source-image forward state.
#[derive(Debug, Clone)]
pub struct Prepared<'a> {
    pub mpi: MultiPlaneImage,
    raw: Vec<f64>,
    pub features: Option<FeatureMap>,
    cache: Option<ExtractorCache>,
    image: &'a Image,
    pub src: Camera,
}

/// How importance-sampling variates are chosen for each ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Variates {
    /// Deterministic bin midpoints.
    Midpoint,
    /// Seeded stratified draws keyed by (seed, ray id, iteration).
    Stratified { seed: u64, iteration: u64 },
}

/// One ray to render: target-view pixel and its globally unique id.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaySpec {
    pub x: usize,
    pub y: usize,
    pub id: u64,
}

#[derive(Debug, Clone)]
struct FineTrace {
    pdf: WeightPdf,
    draws: Vec<Draw>,
    hits: Vec<Option<PlaneHit>>,
    taps: Vec<Taps>,
    pos: Vec<[f64; 3]>,
    set: SampleSet,
    comp: Composite,
    merged: SampleSet,
    order: Vec<(Origin, usize)>,
    joint: Composite,
}

#[derive(Debug, Clone)]
struct RayTrace {
    ray: SourceRay,
    coarse: SampleSet,
    taps: Vec<Taps>,
    comp: Composite,
    fine: Option<FineTrace>,
}

impl RayTrace {
    fn composite(&self, b: Branch) -> &Composite {
        match (b, &self.fine) {
            (Branch::Coarse, _) => &self.comp,
            (Branch::Fine, Some(f)) => &f.comp,
            (Branch::Joint, Some(f)) => &f.joint,
            _ => panic!("fine branches were not traced"),
        }
    }
}

struct ChunkTrace {
    rays: Vec<RayTrace>,
    /// Decoder activations, `n_fine` rows per ray.
    mlp: Option<MlpTrace>,
    /// Rows whose plane intersection exists.
    valid: Vec<bool>,
}

/// Traced rays of one batch, kept for the reverse pass.
pub struct Trace {
    chunks: Vec<ChunkTrace>,
    fine: bool,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.chunks.iter().map(|c| c.rays.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rays(&self) -> impl Iterator<Item = &RayTrace> {
        self.chunks.iter().flat_map(|c| c.rays.iter())
    }

    pub fn composites(&self, b: Branch) -> Vec<Composite> {
        self.rays().map(|r| r.composite(b).clone()).collect()
    }

    /// Fills a `width x height` view from ray composites in row-major order.
    pub fn view(&self, b: Branch, width: usize, height: usize) -> RenderedView {
        let mut v = RenderedView::new(width, height, b);
        for (i, r) in self.rays().enumerate() {
            v.set(i, r.composite(b));
        }
        v
    }
}

/// Frustum-normalized decoder position: source-image direction `(X/Z, Y/Z)`
/// and disparity mapped to `[-1, 1]` between far and near, all shrunk so
/// the top encoding octave turns about one radian per source pixel.
fn decoder_position(spec: &ModelSpec, src: &Camera, hit: &PlaneHit) -> [f64; 3] {
    let span = 1.0 / spec.near - 1.0 / spec.far;
    let s = position_scale(src);
    [
        s * (hit.x - src.cx) / src.fx,
        s * (hit.y - src.cy) / src.fy,
        s * (2.0 * (1.0 / hit.z - 1.0 / spec.far) / span - 1.0),
    ]
}

fn position_scale(src: &Camera) -> f64 {
    let top = (1u64 << (FineDecoder::POS_FREQS - 1)) as f64;
    src.fx.min(src.fy) / top
}

fn decoder_position_rate(spec: &ModelSpec, src: &Camera, ray: &SourceRay, hit: &PlaneHit) -> [f64; 3] {
    let span = 1.0 / spec.near - 1.0 / spec.far;
    let s = position_scale(src);
    let (dx, dy) = ray.pixel_rate(hit);
    [s * dx / src.fx, s * dy / src.fy, -2.0 * s / (hit.z * hit.z * span)]
}

fn unit_direction(ray: &SourceRay) -> [f64; 3] {
    let d = ray.direction.normalize();
    [d.x, d.y, d.z]
}

impl Model {
    fn variates(&self, v: Variates, id: u64) -> Vec<f64> {
        match v {
            Variates::Midpoint => midpoint_variates(self.spec.n_fine),
            Variates::Stratified { seed, iteration } => {
                stratified_variates(self.spec.n_fine, &mut ray_rng(seed, id, iteration))
            }
        }
    }

    fn trace_chunk(
        &self,
        prep: &Prepared<'_>,
        tgt: &Camera,
        rays: &[RaySpec],
        fine: bool,
        variates: Variates,
    ) -> Result<ChunkTrace> {
        let nf = self.spec.n_fine;
        let mut traces = Vec::with_capacity(rays.len());
        let mut pending = Vec::new();
        for r in rays {
            let ray = SourceRay::new(&prep.src, tgt, (r.x as f64, r.y as f64))?;
            let (coarse, taps) = coarse_samples_along(&prep.mpi, &ray, self.coarse.intervals());
            let comp = composite(&coarse);
            if fine {
                let pdf = pdf_from_weights(&coarse.t, comp.weights.clone());
                let draws = pdf.draws(&self.variates(variates, r.id))?;
                pending.push((pdf, draws));
            }
            traces.push(RayTrace {
                ray,
                coarse,
                taps,
                comp,
                fine: None,
            });
        }
        if !fine {
            return Ok(ChunkTrace {
                rays: traces,
                mlp: None,
                valid: Vec::new(),
            });
        }
        let features = prep.features.as_ref().expect("features are prepared for fine rendering");
        let width = self.decoder.input_dim();
        let mut input = Array2::<f64>::zeros((rays.len() * nf, width));
        let mut valid = vec![false; rays.len() * nf];
        let mut geo = Vec::with_capacity(rays.len());
        let mut feature = vec![0.0; FEATURE_DIM];
        for (ri, (t, (_, draws))) in traces.iter().zip(&pending).enumerate() {
            let dir = unit_direction(&t.ray);
            let mut hits = Vec::with_capacity(nf);
            let mut taps = Vec::with_capacity(nf);
            let mut pos = Vec::with_capacity(nf);
            for (j, d) in draws.iter().enumerate() {
                let hit = t.ray.intersect(d.t);
                let row = ri * nf + j;
match hit {
                    Some(h) => {
                        let tp = bilinear_taps(h.x, h.y, prep.mpi.width(), prep.mpi.height());
                        features.sample_into(&tp, &mut feature);
                        let p = decoder_position(&self.spec, &prep.src, &h);
                        self.decoder
                            .assemble(p, dir, &feature, input.row_mut(row).as_slice_mut().unwrap());
                        valid[row] = true;
                        taps.push(tp);
                        pos.push(p);
                    }
                    None => {
                        taps.push(Taps::default());
                        pos.push([0.0; 3]);
                    }
                }
                hits.push(hit);
            }
            geo.push((hits, taps, pos));
        }
        let mlp = self.decoder.mlp.forward(self.block(2), input);
        for (ri, (trace, ((pdf, draws), (hits, taps, pos)))) in
            traces.iter_mut().zip(pending.into_iter().zip(geo)).enumerate()
        {
            let mut color = Vec::with_capacity(nf);
            let mut sigma = Vec::with_capacity(nf);
            for j in 0..nf {
                let row = ri * nf + j;
                if valid[row] {
                    let (c, s) = self.decoder.squash(mlp.output.row(row).as_slice().unwrap());
                    color.push(c);
                    sigma.push(s);
                } else {
                    color.push([0.0; 3]);
                    sigma.push(0.0);
                }
            }
            let t: Vec<f64> = draws.iter().map(|d| d.t).collect();
            let set = SampleSet::new(t, color, sigma, vec![Origin::Fine; nf])?;
            let comp = composite(&set);
            let (merged, order) = merge_samples_indexed(&trace.coarse, &set);
            let joint = composite(&merged);
            trace.fine = Some(FineTrace {
                pdf,
                draws,
                hits,
                taps,
                pos,
                set,
                comp,
                merged,
                order,
                joint,
            });
        }
        Ok(ChunkTrace {
            rays: traces,
            mlp: Some(mlp),
            valid,
        })
    }

    /// Forward pass over `rays` seen from `tgt`. Fine and joint branches are
    /// traced only when `fine` is set.
    pub fn trace(
        &self,
        prep: &Prepared<'_>,
        tgt: &Camera,
        rays: &[RaySpec],
        fine: bool,
        variates: Variates,
    ) -> Result<Trace> {
        if fine && prep.features.is_none() {
            return Err(Error::Domain("source was prepared without features".into()));
        }
        let chunks = rays
            .par_chunks(RAY_CHUNK)
            .map(|c| self.trace_chunk(prep, tgt, c, fine, variates))
            .collect::<Result<Vec<_>>>()?;
        Ok(Trace { chunks, fine })
    }
}

/// Row-major rays of a `w x h` window at `(x0, y0)` in a view, with ids
/// offset by `view * W * H`.
pub fn window_rays(cam: &Camera, view: usize, x0: usize, y0: usize, w: usize, h: usize) -> Vec<RaySpec> {
    let base = (view * cam.width * cam.height) as u64;
    let mut out = Vec::with_capacity(w * h);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            out.push(RaySpec {
                x,
                y,
                id: base + (y * cam.width + x) as u64,
            });
        }
    }
    out
}

/// Renders a full target view through one branch with midpoint variates.
pub fn render_view(model: &Model, src_image: &Image, src: &Camera, tgt: &Camera, branch: Branch) -> Result<RenderedView> {
    let fine = branch != Branch::Coarse;
    let prep = model.prepare(src_image, src, fine)?;
    let rays = window_rays(tgt, 0, 0, 0, tgt.width, tgt.height);
    let trace = model.trace(&prep, tgt, &rays, fine, Variates::Midpoint)?;
    Ok(trace.view(branch, tgt.width, tgt.height))
}

/// Renders every branch of a view in one pass.
pub fn render_all(model: &Model, src_image: &Image, src: &Camera, tgt: &Camera) -> Result<[RenderedView; 3]> {
    let prep = model.prepare(src_image, src, true)?;
    let rays = window_rays(tgt, 0, 0, 0, tgt.width, tgt.height);
    let trace = model.trace(&prep, tgt, &rays, true, Variates::Midpoint)?;
    Ok(Branch::ALL.map(|b| trace.view(b, tgt.width, tgt.height)))
}

/// Coarse rendering of an explicit multi-plane image.
pub fn render_mpi(mpi: &MultiPlaneImage, src: &Camera, tgt: &Camera) -> Result<RenderedView> {
    let intervals = crate::field::plane_intervals(mpi.depths());
    let mut v = RenderedView::new(tgt.width, tgt.height, Branch::Coarse);
    for y in 0..tgt.height {
        for x in 0..tgt.width {
            let ray = SourceRay::new(src, tgt, (x as f64, y as f64))?;
            let (s, _) = coarse_samples_along(mpi, &ray, &intervals);
            v.set(y * tgt.width + x, &composite(&s));
        }
    }
    Ok(v)
}

/// Upstream gradients on each traced ray, per branch.
#[derive(Debug, Clone, Default)]
pub struct RayGrads {
    pub coarse: Vec<CompositeGrad>,
    pub fine: Vec<CompositeGrad>,
    pub joint: Vec<CompositeGrad>,
}

impl RayGrads {
    pub fn zeros(n: usize) -> Self {
        Self {
            coarse: vec![CompositeGrad::default(); n],
            fine: vec![CompositeGrad::default(); n],
            joint: vec![CompositeGrad::default(); n],
        }
    }

    pub fn branch_mut(&mut self, b: Branch) -> &mut Vec<CompositeGrad> {
        match b {
            Branch::Coarse => &mut self.coarse,
            Branch::Fine => &mut self.fine,
            Branch::Joint => &mut self.joint,
        }
    }
}

fn is_zero(g: &CompositeGrad) -> bool {
    *g == CompositeGrad::default()
}

/// Gradient contributions of one chunk: dense decoder gradient plus sparse
/// texel and feature entries, summed later in chunk order.
struct ChunkGrad {
    decoder: Vec<f64>,
    mpi: Vec<(usize, f64)>,
    features: Vec<(usize, f64)>,
}

impl Model {
    fn chunk_backward(
        &self,
        prep: &Prepared<'_>,
        chunk: &ChunkTrace,
        grads: &RayGrads,
        offset: usize,
        want_coarse: bool,
        want_fine: bool,
    ) -> ChunkGrad {
        let nf = self.spec.n_fine;
        let plane = prep.mpi.width() * prep.mpi.height();
        let mut out = ChunkGrad {
            decoder: Vec::new(),
            mpi: Vec::new(),
            features: Vec::new(),
        };
        let mut grad_raw = chunk.mlp.as_ref().map(|m| Array2::<f64>::zeros(m.output.dim()));
        // per-ray gradients on the fine sample depths, filled in two passes
        let mut fine_t: Vec<Vec<f64>> = Vec::new();

        for (ri, ray) in chunk.rays.iter().enumerate() {
            let gi = offset + ri;
            let n = ray.coarse.len();
            let mut gc_color = vec![[0.0; 3]; n];
            let mut gc_sigma = vec![0.0; n];
            let gc = &grads.coarse[gi];
            if !is_zero(gc) {
                let g = composite_backward(&ray.coarse, &ray.comp, gc);
                gc_color = g.color;
                gc_sigma = g.sigma;
            }
            let mut gt_fine = vec![0.0; nf];
            if let Some(f) = &ray.fine {
                let mut gf_color = vec![[0.0; 3]; nf];
                let mut gf_sigma = vec![0.0; nf];
                let gfb = &grads.fine[gi];
                if !is_zero(gfb) {
                    let g = composite_backward(&f.set, &f.comp, gfb);
                    for j in 0..nf {
                        gf_color[j] = g.color[j];
                        gf_sigma[j] = g.sigma[j];
                        gt_fine[j] += g.t[j];
                    }
                    intervals_backward(nf, &g.delta, &mut gt_fine);
                }
                let gjb = &grads.joint[gi];
                if !is_zero(gjb) {
                    let g = composite_backward(&f.merged, &f.joint, gjb);
                    let mut gt_merged = g.t.clone();
merged_intervals_backward(&f.merged, &g.delta, &mut gt_merged);
                    for (m, &(o, i)) in f.order.iter().enumerate() {
                        match o {
                            Origin::Coarse => {
                                for ch in 0..3 {
                                    gc_color[i][ch] += g.color[m][ch];
                                }
                                gc_sigma[i] += g.sigma[m];
                            }
                            Origin::Fine => {
                                for ch in 0..3 {
                                    gf_color[i][ch] += g.color[m][ch];
                                }
                                gf_sigma[i] += g.sigma[m];
                                gt_fine[i] += gt_merged[m];
                            }
                        }
                    }
                }
                if want_fine {
                    let gr = grad_raw.as_mut().unwrap();
                    let mlp = chunk.mlp.as_ref().unwrap();
                    for j in 0..nf {
                        let row = ri * nf + j;
                        if !chunk.valid[row] {
                            continue;
                        }
                        self.decoder.squash_backward(
                            mlp.output.row(row).as_slice().unwrap(),
                            gf_color[j],
                            gf_sigma[j],
                            gr.row_mut(row).as_slice_mut().unwrap(),
                        );
                    }
                }
            }
            fine_t.push(gt_fine);
            if want_coarse {
                for k in 0..n {
                    let (c, s) = (gc_color[k], gc_sigma[k]);
                    if c == [0.0; 3] && s == 0.0 {
                        continue;
                    }
                    for (i, w) in ray.taps[k].iter() {
                        let base = (k * plane + i) * 4;
                        for ch in 0..3 {
                            if c[ch] != 0.0 {
                                out.mpi.push((base + ch, w * c[ch]));
                            }
                        }
                        if s != 0.0 {
                            out.mpi.push((base + 3, w * s));
                        }
                    }
                }
            }
        }

        if let (Some(mlp), Some(gr)) = (chunk.mlp.as_ref(), grad_raw) {
            let mut gdec = vec![0.0; self.decoder.param_count()];
            let gin = self.decoder.mlp.backward(self.block(2), mlp, gr, &mut gdec);
            if want_fine {
                out.decoder = gdec;
            }
            let features = prep.features.as_ref().unwrap();
            let (pl, dl) = (self.decoder.pos_len(), self.decoder.dir_len());
            for (ri, ray) in chunk.rays.iter().enumerate() {
                let f = ray.fine.as_ref().unwrap();
                for j in 0..nf {
                    let row = ri * nf + j;
                    if !chunk.valid[row] {
                        continue;
                    }
                    let g = gin.row(row);
                    let g = g.as_slice().unwrap();
                    let gfeat = &g[pl + dl..];
                    let taps = &f.taps[j];
                    if want_fine {
                        for (i, w) in taps.iter() {
                            for (c, v) in gfeat.iter().enumerate() {
                                if *v != 0.0 {
                                    out.features.push((i * FEATURE_DIM + c, w * v));
                                }
                            }
                        }
                    }
                    if want_coarse {
                        // the sample depth moves the decoder position and the
                        // feature lookup
                        let hit = f.hits[j].as_ref().unwrap();
                        let gp = encode_backward(f.pos[j], self.decoder.pos_freqs, &g[..pl]);
                        let rate = decoder_position_rate(&self.spec, &prep.src, &ray.ray, hit);
                        let mut dt = gp[0] * rate[0] + gp[1] * rate[1] + gp[2] * rate[2];
                        let (dx, dy) = ray.ray.pixel_rate(hit);
                        for k in 0..taps.len {
                            let dw = taps.dwdx[k] * dx + taps.dwdy[k] * dy;
                            if dw == 0.0 {
                                continue;
                            }
                            let frow = &features.data[taps.index[k] * FEATURE_DIM..(taps.index[k] + 1) * FEATURE_DIM];
                            dt += dw * frow.iter().zip(gfeat).map(|(a, b)| a * b).sum::<f64>();
                        }
                        fine_t[ri][j] += dt;
                    }
                }
            }
        }

        // sample depths -> normalized masses -> coarse weights -> densities
        if want_coarse {
            for (ri, ray) in chunk.rays.iter().enumerate() {
                let Some(f) = &ray.fine else { continue };
                let gt = &fine_t[ri];
                if gt.iter().all(|&v| v == 0.0) || f.pdf.uniform {
                    continue;
                }
                let gm = f.pdf.mass_backward(&f.draws, gt);
                let gw = f.pdf.weight_backward(&gm);
                let ga = weights_backward(&ray.comp.weights, &ray.comp.transmittance, &ray.coarse.sigma, &ray.coarse.delta, &gw);
                for k in 0..ray.coarse.len() {
                    let s = ga[k] * ray.coarse.delta[k];
                    if s == 0.0 {
                        continue;
                    }
                    for (i, w) in ray.taps[k].iter() {
                        out.mpi.push(((k * plane + i) * 4 + 3, w * s));
                    }
                }
            }
        }
        out
    }

    /// Reverse pass: parameter gradients of `sum_rays <grads, composites>`.
    /// Blocks outside `trainable` get zero gradient.
    pub fn backward(&self, prep: &Prepared<'_>, trace: &Trace, grads: &RayGrads, trainable: Trainable) -> Result<Gradients> {
        let mut out = self.params.zeros_like();
        let coarse_on = trainable.allows(self.params.blocks[0].group);
        let extractor_on = trainable.allows(self.params.blocks[1].group);
        let decoder_on = trainable.allows(self.params.blocks[2].group);
        let feedforward = self.spec.mode == MpiMode::Feedforward;
        // feature gradients are needed for the extractor, and, in
        // feedforward mode, MPI gradients feed the extractor too
        let want_coarse = coarse_on || (feedforward && extractor_on);
        let want_fine = decoder_on || extractor_on;
        let mut offsets = Vec::with_capacity(trace.chunks.len());
        let mut acc = 0;
        for c in &trace.chunks {
            offsets.push(acc);
            acc += c.rays.len();
        }
        let parts: Vec<ChunkGrad> = trace
            .chunks
            .par_iter()
            .zip(offsets.par_iter())
            .map(|(c, &off)| self.chunk_backward(prep, c, grads, off, want_coarse, want_fine && trace.fine))
            .collect();
        let mut grad_mpi = if want_coarse { vec![0.0; prep.mpi.data().len()] } else { Vec::new() };
        let mut grad_feat = prep
            .features
            .as_ref()
            .map(|f| vec![0.0; f.data.len()])
            .unwrap_or_default();
        for p in &parts {
            if decoder_on && !p.decoder.is_empty() {
                for (a, b) in out.blocks[2].iter_mut().zip(&p.decoder) {
                    *a += b;
                }
            }
            for &(i, v) in &p.mpi {
                grad_mpi[i] += v;
            }
            if extractor_on {
                for &(i, v) in &p.features {
                    grad_feat[i] += v;
                }
            }
        }
        if want_coarse {
            let mut gcoarse = vec![0.0; self.coarse.param_count()];
            let gf = (feedforward && extractor_on).then_some(&mut grad_feat[..]);
            self.coarse
                .backward(self.block(0), &prep.raw, prep.features.as_ref(), &grad_mpi, &mut gcoarse, gf);
            if coarse_on {
                out.blocks[0] = gcoarse;
            }
        }
        if extractor_on && grad_feat.iter().any(|&v| v != 0.0) {
            let cache = prep.cache.as_ref().unwrap();
            self.extractor
                .backward(self.block(1), prep.image, cache, &grad_feat, &mut out.blocks[1]);
        }
        out.check_finite(&self.params)?;
        Ok(out)
    }
}

/// Supervision for one view used in training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    pub image: Image,
    pub teacher: Option<Image>,
    pub points: Option<SparsePoints>,
}

/// A rectangular window of one training view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Patch {
    pub view: usize,
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl Patch {
    pub fn full(view: usize, cam: &Camera) -> Self {
        Self {
            view,
            x0: 0,
            y0: 0,
            width: cam.width,
            height: cam.height,
        }
    }
}

/// Everything a loss evaluation needs besides the model.
#[derive(Debug, Clone, Copy)]
pub struct Objective<'a> {
    pub source_image: &'a Image,
    pub source: &'a Camera,
    pub views: &'a [TrainView],
    pub loss: &'a LossWeights,
    pub branches: BranchWeights,
    pub variates: Variates,
}

/// Loss of a batch of patches (summed over patches) and, optionally, its
/// parameter gradients.
pub fn loss_and_grad(
    model: &Model,
    obj: &Objective<'_>,
    patches: &[Patch],
    trainable: Option<Trainable>,
) -> Result<(LossReport, Option<Gradients>)> {
    let fine = obj.branches.fine != 0.0 || obj.branches.joint != 0.0;
    let prep = model.prepare(obj.source_image, obj.source, fine)?;
    let mut report = LossReport::default();
    let mut grads = trainable.map(|_| model.params.zeros_like());
    for patch in patches {
        let view = obj
            .views
            .get(patch.view)
            .ok_or_else(|| Error::Domain(format!("no training view {}", patch.view)))?;
        let cam = &view.camera;
        if patch.x0 + patch.width > cam.width || patch.y0 + patch.height > cam.height {
            return Err(Error::Domain("patch exceeds the view".into()));
        }
        let rays = window_rays(cam, patch.view, patch.x0, patch.y0, patch.width, patch.height);
        let trace = model.trace(&prep, cam, &rays, fine, obj.variates)?;
        let image = view.image.crop(patch.x0, patch.y0, patch.width, patch.height);
        let teacher = view
            .teacher
            .as_ref()
            .map(|t| t.crop(patch.x0, patch.y0, patch.width, patch.height));
        let points = view
            .points
            .as_ref()
            .map(|p| p.window(patch.x0, patch.y0, patch.width, patch.height));
        let targets = BranchTargets {
            image: &image,
            points: points.as_ref(),
            teacher: teacher.as_ref(),
        };
        let mut ray_grads = RayGrads::zeros(rays.len());
        for b in obj.branches.active() {
            let rendered = trace.view(b, patch.width, patch.height);
            let (terms, g) = branch_loss_grad(&rendered, &targets, obj.loss)?;
            if !terms.total.is_finite() {
                return Err(Error::NonFinite(format!("{b} branch loss")));
            }
            let acc = report_entry(&mut report, b);
            add_terms(acc, &terms);
            let w = obj.branches.get(b);
            for (i, cg) in ray_grads.branch_mut(b).iter_mut().enumerate() {
                cg.rgb = [w * g.rgb.data[i * 3], w * g.rgb.data[i * 3 + 1], w * g.rgb.data[i * 3 + 2]];
                cg.disparity = w * g.disparity.data[i];
            }
        }
        if let (Some(t), Some(acc)) = (trainable, grads.as_mut()) {
            acc.add(&model.backward(&prep, &trace, &ray_grads, t)?);
        }
    }
    report.total = report.weighted_total(&obj.branches);
    Ok((report, grads))
}

fn report_entry(r: &mut LossReport, b: Branch) -> &mut BranchTerms {
    let slot = match b {
        Branch::Coarse => &mut r.coarse,
        Branch::Fine => &mut r.fine,
        Branch::Joint => &mut r.joint,
    };
    slot.get_or_insert_with(BranchTerms::default)
}

fn add_terms(a: &mut BranchTerms, b: &BranchTerms) {
    a.l1 += b.l1;
    a.ssim += b.ssim;
    a.point += b.point;
    a.pseudo_depth += b.pseudo_depth;
    a.total += b.total;
}
