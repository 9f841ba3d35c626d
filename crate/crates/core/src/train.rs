//! Optimization loop: batch assembly, all-scale rendering, adaptation, loss and
//! adjoint assembly, Adam updates, and finite-difference gradient checks.

use std::collections::HashMap;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    adapt_from_depths, geo_loss, image_patch, AdaptationRecord, SourcePatches,
};
use crate::config::Config;
use crate::data::SceneDataset;
use crate::error::{FrugalError, Result};
use crate::field::{FieldGrad, Scalar, VoxelField};
use crate::geometry::{ray_for_pixel, Camera, PixelCoord, Ray};
use crate::losses::{
    depth_smoothness_loss, distortion_loss, l1_sparsity_loss, ms_color_loss, mono_depth_loss,
    occlusion_loss, sparse_depth_loss, total_loss, tv_field, LossTerms, LossWeights,
    SparseDepthPoint, PEARSON_MIN_PIXELS,
};
use crate::metrics::{depth_mae, psnr, ssim, EvalReport, ViewMetrics};
use crate::optim::{learning_rate, AdamParams, AdamState};
use crate::poses::{nearest_training_view, spiral_poses};
use crate::raster::{DepthMap, Image};
use crate::render::{
    render_ray, render_ray_backward, render_ray_inference, sample_points, sample_points_with,
    RaySamples, RenderGrad, RenderOptions, RenderOutput, RenderTrace,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_train: usize,
    pub batch_novel: usize,
    /// Novel rays are drawn as `c x c` pixel clusters that share rendered
    /// source windows.
    pub novel_cluster: usize,
    pub batch_sparse: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub patch_k: usize,
    pub jitter: bool,
    /// Composite a random color behind every training-view ray.
    pub random_background: bool,
    pub checkpoint_every: usize,
    pub render_every: usize,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_train: 4096,
            batch_novel: 4096,
            novel_cluster: 1,
            batch_sparse: 256,
            lr_init: 0.08,
            lr_final: 0.002,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            patch_k: 4,
            jitter: true,
            random_background: false,
            checkpoint_every: 0,
            render_every: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(FrugalError::Config("train.iterations must be >= 1".into()));
        }
        if !(self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return Err(FrugalError::Config("train needs 0 < lr_final <= lr_init".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(FrugalError::Config("train Adam hyperparameters out of range".into()));
        }
        if self.patch_k == 0 || self.novel_cluster == 0 {
            return Err(FrugalError::Config("train.patch_k and train.novel_cluster must be >= 1".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn mix(a: u64, b: u64) -> u64 {
    splitmix(splitmix(a) ^ b.wrapping_mul(0x2545_f491_4f6c_dd1d))
}

/// Worker count from `FRUGAL_THREADS`, else the available parallelism.
pub fn worker_threads() -> usize {
    std::env::var("FRUGAL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

pub fn build_pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| FrugalError::Config(format!("thread pool: {e}")))
}

/// Immutable per-run inputs derived from the dataset and config.
#[derive(Clone, Debug)]
pub struct TrainContext {
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    /// Nearest other training view per training view.
    pub nearest: Vec<Option<usize>>,
    /// Resampled to image resolution, one per training view.
    pub mono: Option<Vec<DepthMap>>,
    /// Keypoints with `view_id` rewritten to the training-view position.
    pub sparse: Vec<SparseDepthPoint>,
    pub novel_poses: Vec<Camera>,
    pub novel_nearest: Vec<usize>,
}

impl TrainContext {
    pub fn new(ds: &SceneDataset, cfg: &Config) -> Result<Self> {
        ds.validate()?;
        cfg.validate()?;
        let cameras = ds.train_cameras();
        let images = ds.train_images();
        let k = cfg.train.patch_k;
        if cameras.iter().any(|c| c.width < k || c.height < k) {
            return Err(FrugalError::Config("train.patch_k exceeds the image size".into()));
        }
        if cfg.loss.geo > 0.0 && cameras.len() < 2 {
            return Err(FrugalError::Config(
                "geometric adaptation needs at least two training views (set loss.geo=0)".into(),
            ));
        }
        let nearest = cameras
            .iter()
            .enumerate()
            .map(|(i, c)| nearest_training_view(&c.center(), &cameras, Some(i)))
            .collect();
        let mono = match (&ds.mono_depth, cfg.data.use_mono_depth) {
            (Some(maps), true) => {
                if k * k < PEARSON_MIN_PIXELS {
                    return Err(FrugalError::Config(format!(
                        "mono depth needs train.patch_k^2 >= {PEARSON_MIN_PIXELS}"
                    )));
                }
                Some(
                    maps.iter()
                        .zip(&cameras)
                        .map(|(m, c)| m.resample(c.width, c.height))
                        .collect(),
                )
            }
            _ => None,
        };
        let sparse = match (&ds.sparse_depth, cfg.data.use_sparse_depth) {
            (Some(points), true) => points
                .iter()
                .filter_map(|p| {
                    let pos = ds.train.iter().position(|&t| t == p.view_id)?;
                    Some(SparseDepthPoint { view_id: pos, ..*p })
                })
                .collect(),
            _ => Vec::new(),
        };
        let use_novel = cfg.loss.geo > 0.0 && cfg.adapt.use_novel_views && cfg.train.batch_novel > 0;
        let novel_poses = if use_novel { spiral_poses(&cameras, &cfg.novel_poses)? } else { Vec::new() };
        let span = 2 * cfg.adapt.radius() + cfg.train.novel_cluster;
        if novel_poses.iter().any(|c| c.width < span || c.height < span) {
            return Err(FrugalError::Config("adapt.patch_size exceeds the image size".into()));
        }
        let novel_nearest = novel_poses
            .iter()
            .map(|c| nearest_training_view(&c.center(), &cameras, None).expect("non-empty"))
            .collect();
        Ok(Self {
            images,
            cameras,
            nearest,
            mono,
            sparse,
            novel_poses,
            novel_nearest,
        })
    }
}

/// Rays of one optimization step.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `(view, x0, y0)` top-left corners of `patch_k x patch_k` pixel patches.
    pub patches: Vec<(usize, usize, usize)>,
    /// `(pose, x, y)` pixels of spiral poses.
    pub novel: Vec<(usize, usize, usize)>,
    /// Indices into the context's keypoints.
    pub sparse: Vec<usize>,
    pub jitter: Option<u64>,
    /// Seed of the per-ray training backgrounds.
    pub background: Option<u64>,
}

pub fn sample_batch<R: Rng>(ctx: &TrainContext, cfg: &Config, rng: &mut R, jitter: Option<u64>) -> Batch {
    let k = cfg.train.patch_k;
    let n_patches = (cfg.train.batch_train / (k * k)).max(1);
    let patches = (0..n_patches)
        .map(|_| {
            let v = rng.gen_range(0..ctx.cameras.len());
            let c = &ctx.cameras[v];
            (v, rng.gen_range(0..=c.width - k), rng.gen_range(0..=c.height - k))
        })
        .collect();
    let r = cfg.adapt.radius();
    let m = cfg.train.novel_cluster;
    let novel = if ctx.novel_poses.is_empty() {
        Vec::new()
    } else {
        let mut rays = Vec::with_capacity(cfg.train.batch_novel);
        while rays.len() < cfg.train.batch_novel {
            let p = rng.gen_range(0..ctx.novel_poses.len());
            let c = &ctx.novel_poses[p];
            let x0 = rng.gen_range(r..=c.width - r - m);
            let y0 = rng.gen_range(r..=c.height - r - m);
            for j in 0..m * m {
                if rays.len() < cfg.train.batch_novel {
                    rays.push((p, x0 + j % m, y0 + j / m));
                }
            }
        }
        rays
    };
    let sparse = if cfg.loss.sparse_depth == 0.0 || ctx.sparse.is_empty() {
        Vec::new()
    } else if ctx.sparse.len() <= cfg.train.batch_sparse {
        (0..ctx.sparse.len()).collect()
    } else {
        (0..cfg.train.batch_sparse).map(|_| rng.gen_range(0..ctx.sparse.len())).collect()
    };
    let background = cfg.train.random_background.then(|| rng.gen());
    Batch {
        patches,
        novel,
        sparse,
        jitter,
        background,
    }
}

/// Which rendered quantities the objective weights; gradient checks isolate one
/// term at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub color: f64,
    pub weights: LossWeights,
}

impl Objective {
    pub fn full(weights: &LossWeights) -> Self {
        Self {
            color: 1.0,
            weights: weights.clone(),
        }
    }
}

pub enum AdaptMode<'a> {
    Skip,
    Compute,
    /// Reuse records from an earlier evaluation of the same batch.
    Frozen(&'a [Option<AdaptationRecord>]),
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub terms: LossTerms,
    pub total: f64,
    pub grad: Option<FieldGrad>,
    /// One entry per ray (train rays, then novel, then keypoints).
    pub records: Vec<Option<AdaptationRecord>>,
}

#[derive(Clone, Copy, Debug)]
enum RayKind {
    Train { view: usize, x: usize, y: usize },
    Novel { pose: usize, x: usize, y: usize },
    Sparse { point: usize },
}

/// Rendered colors of novel-pose pixels, one entry per rendered scale.
type NovelColors = HashMap<(usize, usize, usize), Vec<[f64; 3]>>;

/// Scales whose rendered color serves as the novel-view source patch.
fn novel_source_levels(cfg: &Config, scales: usize) -> Vec<usize> {
    match cfg.adapt.novel_src_scale {
        Some(l) => vec![l],
        None => (0..scales).collect(),
    }
}

/// Render every pixel inside the adaptation windows of the batch's novel rays
/// once, forward only.
fn render_novel_colors<T: Scalar>(
    field: &VoxelField<T>,
    ctx: &TrainContext,
    cfg: &Config,
    batch: &Batch,
) -> Result<NovelColors> {
    let r = cfg.adapt.radius();
    let mut pixels: Vec<(usize, usize, usize)> = batch
        .novel
        .iter()
        .flat_map(|&(p, x, y)| {
            (y - r..=y + r).flat_map(move |yy| (x - r..=x + r).map(move |xx| (p, xx, yy)))
        })
        .collect();
    pixels.sort_unstable();
    pixels.dedup();
    let levels = novel_source_levels(cfg, field.config.num_scales());
    let n = cfg.n_samples();
    let opts = RenderOptions {
        background: cfg.render.background,
    };
    let colors: Vec<Vec<[f64; 3]>> = pixels
        .par_iter()
        .map(|&(p, x, y)| {
            let ray = ray_for_pixel(&ctx.novel_poses[p], PixelCoord::new(x as f64, y as f64))?;
            let s = sample_points(&ray, n, None)?;
            levels
                .iter()
                .map(|&l| render_ray_inference(field, &ray, l, &s, &opts).map(|o| o.color))
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(pixels.into_iter().zip(colors).collect())
}

struct RayForward {
    ray: Ray,
    samples: RaySamples,
    outs: Vec<RenderOutput>,
    traces: Vec<RenderTrace>,
    record: Option<AdaptationRecord>,
    opts: RenderOptions,
}

fn batch_rays(batch: &Batch, k: usize) -> Vec<RayKind> {
    let mut rays = Vec::with_capacity(batch.patches.len() * k * k + batch.novel.len() + batch.sparse.len());
    for &(view, x0, y0) in &batch.patches {
        for dy in 0..k {
            for dx in 0..k {
                rays.push(RayKind::Train { view, x: x0 + dx, y: y0 + dy });
            }
        }
    }
    rays.extend(batch.novel.iter().map(|&(pose, x, y)| RayKind::Novel { pose, x, y }));
    rays.extend(batch.sparse.iter().map(|&point| RayKind::Sparse { point }));
    rays
}

#[allow(clippy::too_many_arguments)]
fn forward_ray<T: Scalar>(
    field: &VoxelField<T>,
    ctx: &TrainContext,
    cfg: &Config,
    kind: RayKind,
    index: usize,
    batch: &Batch,
    adapt: &AdaptMode<'_>,
    novel_colors: Option<&NovelColors>,
) -> Result<RayForward> {
    let n = cfg.n_samples();
    let background = match (batch.background, kind) {
        (Some(seed), RayKind::Train { .. }) => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, index as u64));
            Some([rng.gen(), rng.gen(), rng.gen()])
        }
        _ => cfg.render.background,
    };
    let opts = RenderOptions { background };
    let (cam, px) = match kind {
        RayKind::Train { view, x, y } => (&ctx.cameras[view], PixelCoord::new(x as f64, y as f64)),
        RayKind::Novel { pose, x, y } => (&ctx.novel_poses[pose], PixelCoord::new(x as f64, y as f64)),
        RayKind::Sparse { point } => {
            let p = &ctx.sparse[point];
            (&ctx.cameras[p.view_id], PixelCoord::new(p.u, p.v))
        }
    };
    let ray = ray_for_pixel(cam, px)?;
    let samples = match batch.jitter {
        Some(seed) => sample_points_with(&ray, n, Some(&mut ChaCha8Rng::seed_from_u64(mix(seed, index as u64))))?,
        None => sample_points(&ray, n, None)?,
    };
    let levels = match kind {
        RayKind::Sparse { .. } => 1,
        _ => field.config.num_scales(),
    };
    let mut outs = Vec::with_capacity(levels);
    let mut traces = Vec::with_capacity(levels);
    for l in 0..levels {
        let (o, t) = render_ray(field, &ray, l, &samples, &opts)?;
        outs.push(o);
        traces.push(t);
    }
    let record = match (adapt, kind) {
        (AdaptMode::Frozen(recs), _) => recs[index].clone(),
        (AdaptMode::Skip, _) | (_, RayKind::Sparse { .. }) => None,
        (AdaptMode::Compute, RayKind::Train { view, x, y }) => {
            let depths: Vec<f64> = outs.iter().map(|o| o.depth).collect();
            match ctx.nearest[view] {
                None => None,
                Some(j) => Some(match image_patch(&ctx.images[view], x, y, cfg.adapt.patch_size) {
                    Some(src) => adapt_from_depths(
                        &depths,
                        SourcePatches::Shared(&src),
                        px,
                        cam,
                        &ctx.cameras[j],
                        &ctx.images[j],
                        &cfg.adapt,
                    ),
                    None => AdaptationRecord {
                        errors: vec![f64::INFINITY; depths.len()],
                        selected: depths.len() - 1,
                        pseudo_depth: depths[depths.len() - 1],
                        valid: false,
                    },
                }),
            }
        }
        (AdaptMode::Compute, RayKind::Novel { pose, x, y }) => {
            let depths: Vec<f64> = outs.iter().map(|o| o.depth).collect();
            let j = ctx.novel_nearest[pose];
            let colors = novel_colors.expect("novel colors rendered");
            let r = cfg.adapt.radius();
            let n_src = novel_source_levels(cfg, levels).len();
            let patches: Vec<Vec<[f64; 3]>> = (0..n_src)
                .map(|li| {
                    (y - r..=y + r)
                        .flat_map(|yy| (x - r..=x + r).map(move |xx| (xx, yy)))
                        .map(|(xx, yy)| colors[&(pose, xx, yy)][li])
                        .collect()
                })
                .collect();
            let source = if n_src == 1 {
                SourcePatches::Shared(&patches[0])
            } else {
                SourcePatches::PerScale(&patches)
            };
            let rec = adapt_from_depths(&depths, source, px, cam, &ctx.cameras[j], &ctx.images[j], &cfg.adapt);
            Some(rec)
        }
    };
    Ok(RayForward {
        ray,
        samples,
        outs,
        traces,
        record,
        opts,
    })
}

/// Loss terms of `batch` and, when `want_grad`, the gradient of
/// `objective` with respect to the raw field parameters.
pub fn evaluate<T: Scalar>(
    field: &VoxelField<T>,
    ctx: &TrainContext,
    cfg: &Config,
    objective: &Objective,
    batch: &Batch,
    adapt: AdaptMode<'_>,
    want_grad: bool,
) -> Result<Evaluation> {
    let k = cfg.train.patch_k;
    let scales = field.config.num_scales();
    let rays = batch_rays(batch, k);
    let novel_colors = match adapt {
        AdaptMode::Compute if !batch.novel.is_empty() => Some(render_novel_colors(field, ctx, cfg, batch)?),
        _ => None,
    };
    let fwd: Vec<RayForward> = rays
        .par_iter()
        .enumerate()
        .map(|(i, kind)| forward_ray(field, ctx, cfg, *kind, i, batch, &adapt, novel_colors.as_ref()))
        .collect::<Result<_>>()?;

    let n_train = batch.patches.len() * k * k;
    let n_novel = batch.novel.len();
    let train = &fwd[..n_train];
    let novel = &fwd[n_train..n_train + n_novel];
    let sparse = &fwd[n_train + n_novel..];
    let w = &objective.weights;
    let mut terms = LossTerms::default();
    let mut upstream: Vec<Vec<RenderGrad>> = fwd
        .iter()
        .map(|f| vec![RenderGrad::default(); f.outs.len()])
        .collect();

    // multi-scale color
    let colors: Vec<Vec<[f64; 3]>> = (0..scales)
        .map(|l| train.iter().map(|f| f.outs[l].color).collect())
        .collect();
    let gt: Vec<[f64; 3]> = rays[..n_train]
        .iter()
        .map(|r| match *r {
            RayKind::Train { view, x, y } => ctx.images[view].get_f64(x, y),
            _ => unreachable!(),
        })
        .collect();
    let (ms, dms) = ms_color_loss(&colors, &gt, scales)?;
    terms.ms_color = ms;
    for (l, g) in dms.iter().enumerate() {
        for (r, c) in g.iter().enumerate() {
            for ch in 0..3 {
                upstream[r][l].color[ch] += objective.color * c[ch];
            }
        }
    }

    // cross-scale geometric adaptation, train and novel rays separately
    for (offset, part) in [(0, train), (n_train, novel)] {
        let pairs: Vec<(usize, &AdaptationRecord)> = part
            .iter()
            .enumerate()
            .filter_map(|(i, f)| f.record.as_ref().map(|r| (i, r)))
            .collect();
        if pairs.is_empty() {
            continue;
        }
        let recs: Vec<AdaptationRecord> = pairs.iter().map(|(_, r)| (*r).clone()).collect();
        let depths: Vec<Vec<f64>> = pairs
            .iter()
            .map(|(i, _)| part[*i].outs.iter().map(|o| o.depth).collect())
            .collect();
        let g = geo_loss(&recs, &depths);
        terms.geo += g.value;
        for ((i, _), gd) in pairs.iter().zip(&g.grad) {
            for (l, v) in gd.iter().enumerate() {
                upstream[offset + i][l].depth += w.geo * v;
            }
        }
    }

    // depth smoothness and distortion/occlusion at the finest scale
    let finest: Vec<f64> = train.iter().map(|f| f.outs[0].depth).collect();
    let (ds_val, ds_grad) = depth_smoothness_loss(&finest, k, k);
    terms.depth_smoothness = ds_val;
    let weights: Vec<Vec<f64>> = train.iter().map(|f| f.outs[0].weights.clone()).collect();
    let mids: Vec<Vec<f64>> = train.iter().map(|f| f.samples.normalized_midpoints()).collect();
    let spans: Vec<Vec<f64>> = train.iter().map(|f| f.samples.normalized_spacings()).collect();
    let (dist_val, dist_grad) = distortion_loss(&weights, &mids, &spans);
    terms.distortion = dist_val;
    let (occ_val, occ_grad) = occlusion_loss(&weights, w.occlusion_fraction);
    terms.occlusion = occ_val;
    let occ_w = if w.occlusion_enabled { w.occlusion } else { 0.0 };
    for r in 0..n_train {
        let n = train[r].outs[0].weights.len();
        upstream[r][0].depth += w.depth_smoothness * ds_grad[r];
        for i in 0..n {
            let g = w.distortion * dist_grad[r][i] + occ_w * occ_grad[r][i];
            if g != 0.0 {
                upstream[r][0].add_weight_grad(n, i, g);
            }
        }
    }

    // monocular depth, one correlation per training view over its patches
    if let Some(mono) = &ctx.mono {
        let per = k * k;
        let mut groups: Vec<(usize, Vec<usize>)> = Vec::new();
        for (p, &(v, _, _)) in batch.patches.iter().enumerate() {
            let idx = match groups.iter().position(|(gv, _)| *gv == v) {
                Some(i) => i,
                None => {
                    groups.push((v, Vec::new()));
                    groups.len() - 1
                }
            };
            groups[idx].1.extend(p * per..(p + 1) * per);
        }
        let ext: Vec<Vec<f64>> = groups
            .iter()
            .map(|(v, rays)| {
                rays.iter()
                    .map(|&r| {
                        let (_, x0, y0) = batch.patches[r / per];
                        let j = r % per;
                        mono[*v].get(x0 + j % k, y0 + j / k) as f64
                    })
                    .collect()
            })
            .collect();
        let rendered: Vec<Vec<Vec<f64>>> = (0..scales)
            .map(|l| {
                groups
                    .iter()
                    .map(|(_, rays)| rays.iter().map(|&r| train[r].outs[l].depth).collect())
                    .collect()
            })
            .collect();
        let (mv, mg) = mono_depth_loss(&rendered, &ext)?;
        terms.mono_depth = Some(mv);
        for (l, gl) in mg.iter().enumerate() {
            for (g, gg) in gl.iter().enumerate() {
                for (&r, v) in groups[g].1.iter().zip(gg) {
                    upstream[r][l].depth += w.mono_depth * v;
                }
            }
        }
    }

    // keypoint depths
    if !sparse.is_empty() {
        let rendered: Vec<f64> = sparse.iter().map(|f| f.outs[0].depth).collect();
        let target: Vec<f64> = batch.sparse.iter().map(|&i| ctx.sparse[i].depth).collect();
        let (sv, sg) = sparse_depth_loss(&rendered, &target);
        terms.sparse_depth = sv;
        for (i, g) in sg.iter().enumerate() {
            upstream[n_train + n_novel + i][0].depth += w.sparse_depth * g;
        }
    }

    let mut grad = want_grad.then(|| FieldGrad::zeros(&field.config));
    let (tv_d, tv_a) = tv_field(field, (w.tv_density, w.tv_appearance), grad.as_mut());
    terms.tv_density = tv_d;
    terms.tv_appearance = tv_a;
    terms.l1 = l1_sparsity_loss(field, grad.as_mut().map(|g| (g, w.l1)));

    if let Some(total_grad) = grad.as_mut() {
        let backward = |fs: &[RayForward], us: &[Vec<RenderGrad>], g: &mut FieldGrad| -> Result<()> {
            for (f, u) in fs.iter().zip(us) {
                for (l, ul) in u.iter().enumerate() {
                    render_ray_backward(field, &f.ray, l, &f.samples, &f.outs[l], &f.traces[l], ul, &f.opts, g)?;
                }
            }
            Ok(())
        };
        // one buffer per worker over contiguous ray chunks, merged in order
        let workers = rayon::current_num_threads().max(1);
        if workers == 1 {
            backward(&fwd, &upstream, total_grad)?;
        } else {
            let chunk = fwd.len().div_ceil(workers).max(1);
            let partial: Vec<FieldGrad> = fwd
                .par_chunks(chunk)
                .zip(upstream.par_chunks(chunk))
                .map(|(fs, us)| {
                    let mut g = FieldGrad::zeros(&field.config);
                    backward(fs, us, &mut g).map(|_| g)
                })
                .collect::<Result<_>>()?;
            for p in &partial {
                total_grad.add_assign(p);
            }
        }
    }

    let total = total_loss(&terms, w) + (objective.color - 1.0) * terms.ms_color;
    Ok(Evaluation {
        terms,
        total,
        grad,
        records: fwd.into_iter().map(|f| f.record).collect(),
    })
}

fn check_finite(terms: &LossTerms, total: f64, iteration: usize) -> Result<()> {
    let named = [
        ("ms_color", terms.ms_color),
        ("geo", terms.geo),
        ("tv_density", terms.tv_density),
        ("tv_appearance", terms.tv_appearance),
        ("depth_smoothness", terms.depth_smoothness),
        ("l1", terms.l1),
        ("distortion", terms.distortion),
        ("occlusion", terms.occlusion),
        ("sparse_depth", terms.sparse_depth),
        ("mono_depth", terms.mono_depth.unwrap_or(0.0)),
        ("total", total),
    ];
    match named.iter().find(|(_, v)| !v.is_finite()) {
        Some((term, _)) => Err(FrugalError::NonFinite {
            term: term.to_string(),
            iteration,
        }),
        None => Ok(()),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iteration: usize,
    pub lr: f64,
    pub terms: LossTerms,
    pub total: f64,
    /// Count of train rays whose argmin scale is `l`.
    pub selected_scales: Vec<usize>,
    pub valid_train: usize,
    pub valid_novel: usize,
}

pub struct Trainer {
    pub config: Config,
    pub field: VoxelField<f32>,
    pub adam: AdamState,
    /// Number of completed steps.
    pub iteration: usize,
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        config.validate()?;
        let field = VoxelField::initialized(config.grid.clone(), config.train.seed)?;
        let adam = AdamState::new(&field);
        Ok(Self {
            config,
            field,
            adam,
            iteration: 0,
            pool: None,
        })
    }

    pub fn from_parts(config: Config, field: VoxelField<f32>, adam: AdamState, iteration: usize) -> Result<Self> {
        config.validate()?;
        field.validate()?;
        adam.check_shapes(&field)?;
        if field.config != config.grid {
            return Err(FrugalError::Config("field grid differs from the config grid".into()));
        }
        Ok(Self {
            config,
            field,
            adam,
            iteration,
            pool: None,
        })
    }

    /// Run the parallel parts on a dedicated pool of `threads` workers.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        self.pool = Some(build_pool(threads)?);
        Ok(self)
    }

    pub fn lr(&self) -> f64 {
        let t = &self.config.train;
        learning_rate(self.iteration.min(t.iterations), t.iterations, t.lr_init, t.lr_final)
    }

    pub fn batch_for(&self, ctx: &TrainContext, iteration: usize) -> Batch {
        let seed = self.config.train.seed;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, iteration as u64));
        let jitter = self.config.train.jitter.then(|| mix(seed ^ 0x6a09_e667, iteration as u64));
        sample_batch(ctx, &self.config, &mut rng, jitter)
    }

    fn install<R: Send>(&self, f: impl FnOnce() -> R + Send) -> R {
        match &self.pool {
            Some(p) => p.install(f),
            None => f(),
        }
    }

    /// One optimization step with the learning rate of the current iteration.
    pub fn step(&mut self, ctx: &TrainContext) -> Result<StepReport> {
        let batch = self.batch_for(ctx, self.iteration);
        let lr = self.lr();
        let cfg = &self.config;
        let mode = if cfg.loss.geo > 0.0 { AdaptMode::Compute } else { AdaptMode::Skip };
        let objective = Objective::full(&cfg.loss);
        let field = &self.field;
        let eval = self.install(|| evaluate(field, ctx, cfg, &objective, &batch, mode, true))?;
        check_finite(&eval.terms, eval.total, self.iteration)?;
        let grad = eval.grad.as_ref().expect("gradient requested");
        if !grad.max_abs().is_finite() {
            return Err(FrugalError::NonFinite {
                term: "gradient".into(),
                iteration: self.iteration,
            });
        }
        let hp = self.config.train.adam();
        self.adam.update(&mut self.field, grad, lr, &hp);

        let k = self.config.train.patch_k;
        let n_train = batch.patches.len() * k * k;
        let mut selected_scales = vec![0; self.field.config.num_scales()];
        let mut valid_train = 0;
        let mut valid_novel = 0;
        for (i, r) in eval.records.iter().enumerate() {
            let Some(r) = r else { continue };
            if i < n_train {
                selected_scales[r.selected] += 1;
                valid_train += r.valid as usize;
            } else {
                valid_novel += r.valid as usize;
            }
        }
        let report = StepReport {
            iteration: self.iteration,
            lr,
            terms: eval.terms,
            total: eval.total,
            selected_scales,
            valid_train,
            valid_novel,
        };
        self.iteration += 1;
        Ok(report)
    }

    /// Loss of the batch the current iteration would draw, without updating.
    pub fn current_loss(&self, ctx: &TrainContext) -> Result<Evaluation> {
        let batch = self.batch_for(ctx, self.iteration);
        let cfg = &self.config;
        let mode = if cfg.loss.geo > 0.0 { AdaptMode::Compute } else { AdaptMode::Skip };
        let objective = Objective::full(&cfg.loss);
        let field = &self.field;
        self.install(|| evaluate(field, ctx, cfg, &objective, &batch, mode, false))
    }

    pub fn render(&self, cam: &Camera, level: usize) -> Result<(Image, DepthMap)> {
        let n = self.config.n_samples();
        let opts = RenderOptions {
            background: self.config.render.background,
        };
        self.install(|| render_view(&self.field, cam, level, n, &opts))
    }

    pub fn selection_stats(&self, ctx: &TrainContext, stride: usize) -> Result<SelectionStats> {
        self.install(|| selection_stats(&self.field, ctx, &self.config, stride))
    }
}

/// Full image and depth of `cam` at `level` (bin-center samples, early stop).
pub fn render_view<T: Scalar>(
    field: &VoxelField<T>,
    cam: &Camera,
    level: usize,
    n_samples: usize,
    opts: &RenderOptions,
) -> Result<(Image, DepthMap)> {
    field.scale_lattice(level)?;
    let rows: Vec<Vec<([f32; 3], f32)>> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            (0..cam.width)
                .map(|x| {
                    let ray = ray_for_pixel(cam, PixelCoord::new(x as f64, y as f64))?;
                    let s = sample_points(&ray, n_samples, None)?;
                    let o = render_ray_inference(field, &ray, level, &s, opts)?;
                    Ok((o.color.map(|c| c as f32), o.depth as f32))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let mut img = Image::new(cam.width, cam.height);
    let mut depth = DepthMap::filled(cam.width, cam.height, 0.0);
    for (y, row) in rows.iter().enumerate() {
        for (x, (c, d)) in row.iter().enumerate() {
            img.set(x, y, *c);
            depth.set(x, y, *d);
        }
    }
    Ok((img, depth))
}

/// Distribution of the reprojection-error argmin over a regular grid of
/// training pixels, using bin-center samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub counts: Vec<usize>,
    pub valid: usize,
    pub total: usize,
}

impl SelectionStats {
    pub fn fraction(&self, level: usize) -> f64 {
        self.counts[level] as f64 / self.total.max(1) as f64
    }
}

pub fn selection_stats<T: Scalar>(
    field: &VoxelField<T>,
    ctx: &TrainContext,
    cfg: &Config,
    stride: usize,
) -> Result<SelectionStats> {
    let stride = stride.max(1);
    let mut patches = Vec::new();
    for (v, c) in ctx.cameras.iter().enumerate() {
        for y in (0..c.height).step_by(stride) {
            for x in (0..c.width).step_by(stride) {
                patches.push((v, x, y));
            }
        }
    }
    let mut cfg = cfg.clone();
    cfg.train.patch_k = 1;
    let batch = Batch {
        patches,
        novel: Vec::new(),
        sparse: Vec::new(),
        jitter: None,
        background: None,
    };
    let rays = batch_rays(&batch, 1);
    let recs: Vec<Option<AdaptationRecord>> = rays
        .par_iter()
        .enumerate()
        .map(|(i, kind)| forward_ray(field, ctx, &cfg, *kind, i, &batch, &AdaptMode::Compute, None).map(|f| f.record))
        .collect::<Result<_>>()?;
    let mut stats = SelectionStats {
        counts: vec![0; field.config.num_scales()],
        valid: 0,
        total: 0,
    };
    for r in recs.into_iter().flatten() {
        if r.errors.iter().all(|e| e.is_infinite()) {
            continue;
        }
        stats.counts[r.selected] += 1;
        stats.valid += r.valid as usize;
        stats.total += 1;
    }
    Ok(stats)
}

/// PSNR/SSIM (and depth MAE when ground truth is given) of rendered views.
pub fn evaluate_views<T: Scalar>(
    field: &VoxelField<T>,
    ds: &SceneDataset,
    views: &[usize],
    gt_depth: Option<&[DepthMap]>,
    cfg: &Config,
) -> Result<EvalReport> {
    let opts = RenderOptions {
        background: cfg.render.background,
    };
    let mut rows = Vec::new();
    for &v in views {
        let (img, depth) = render_view(field, &ds.cameras[v], 0, cfg.n_samples(), &opts)?;
        let mae = match gt_depth {
            Some(gt) => Some(depth_mae(&depth, &gt[v], None)?),
            None => None,
        };
        rows.push(ViewMetrics {
            view: v,
            psnr: psnr(&img, &ds.images[v])?,
            ssim: ssim(&img, &ds.images[v])?,
            depth_mae: mae,
        });
    }
    Ok(EvalReport::from_views(rows))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSelector {
    MsColor,
    Geo,
    TvDensity,
    TvAppearance,
    DepthSmoothness,
    L1,
    Distortion,
    Occlusion,
    SparseDepth,
    MonoDepth,
}

impl LossSelector {
    pub const ALL: [LossSelector; 10] = [
        LossSelector::MsColor,
        LossSelector::Geo,
        LossSelector::TvDensity,
        LossSelector::TvAppearance,
        LossSelector::DepthSmoothness,
        LossSelector::L1,
        LossSelector::Distortion,
        LossSelector::Occlusion,
        LossSelector::SparseDepth,
        LossSelector::MonoDepth,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            LossSelector::MsColor => "ms_color",
            LossSelector::Geo => "geo",
            LossSelector::TvDensity => "tv_density",
            LossSelector::TvAppearance => "tv_appearance",
            LossSelector::DepthSmoothness => "depth_smoothness",
            LossSelector::L1 => "l1",
            LossSelector::Distortion => "distortion",
            LossSelector::Occlusion => "occlusion",
            LossSelector::SparseDepth => "sparse_depth",
            LossSelector::MonoDepth => "mono_depth",
        }
    }

    /// Unit weight on this term only.
    pub fn objective(&self, base: &LossWeights) -> Objective {
        let mut w = LossWeights {
            geo: 0.0,
            sparse_depth: 0.0,
            mono_depth: 0.0,
            tv_density: 0.0,
            tv_appearance: 0.0,
            depth_smoothness: 0.0,
            l1: 0.0,
            distortion: 0.0,
            occlusion: 0.0,
            occlusion_enabled: false,
            occlusion_fraction: base.occlusion_fraction,
        };
        let mut color = 0.0;
        match self {
            LossSelector::MsColor => color = 1.0,
            LossSelector::Geo => w.geo = 1.0,
            LossSelector::TvDensity => w.tv_density = 1.0,
            LossSelector::TvAppearance => w.tv_appearance = 1.0,
            LossSelector::DepthSmoothness => w.depth_smoothness = 1.0,
            LossSelector::L1 => w.l1 = 1.0,
            LossSelector::Distortion => w.distortion = 1.0,
            LossSelector::Occlusion => {
                w.occlusion = 1.0;
                w.occlusion_enabled = true;
            }
            LossSelector::SparseDepth => w.sparse_depth = 1.0,
            LossSelector::MonoDepth => w.mono_depth = 1.0,
        }
        Objective { color, weights: w }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub n_params: usize,
    pub h: f64,
    pub seed: u64,
    /// Flip the sign of the adjoint (sanity check of the checker itself).
    pub negate_adjoint: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            n_params: 64,
            h: 1e-4,
            seed: 0,
            negate_adjoint: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub selector: LossSelector,
    pub max_rel_error: f64,
    /// Parameters whose finite difference exceeded the noise floor.
    pub compared: usize,
    pub sampled: usize,
    pub loss: f64,
}

/// Central differences of one loss term against its adjoint, over a random
/// parameter subset drawn from the entries with nonzero analytic gradient
/// (topped up with other entries). Adaptation records are computed once and
/// held fixed, matching the detached pseudo depth. The relative error
/// denominator is floored at `1e-3 * max|adjoint|`.
pub fn grad_check(
    field: &VoxelField<f64>,
    ctx: &TrainContext,
    cfg: &Config,
    selector: LossSelector,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let batch = sample_batch(ctx, cfg, &mut rng, Some(opts.seed));
    let objective = selector.objective(&cfg.loss);
    let base = evaluate(field, ctx, cfg, &objective, &batch, AdaptMode::Compute, true)?;
    let records = base.records.clone();
    let grad = base.grad.expect("gradient requested");
    let nd = field.density_raw.len();
    let analytic = |i: usize| if i < nd { grad.density[i] } else { grad.appearance[i - nd] };
    let total = nd + field.appearance_raw.len();
    let nonzero: Vec<usize> = (0..total).filter(|&i| analytic(i) != 0.0).collect();
    let mut chosen: Vec<usize> = if nonzero.len() > opts.n_params {
        sample_indices(&mut rng, nonzero.len(), opts.n_params)
            .into_iter()
            .map(|j| nonzero[j])
            .collect()
    } else {
        nonzero.clone()
    };
    while chosen.len() < opts.n_params.min(total) {
        let i = rng.gen_range(0..total);
        if !chosen.contains(&i) {
            chosen.push(i);
        }
    }
    chosen.sort_unstable();

    let mut f = field.clone();
    let mut eval_at = |i: usize, value: f64| -> Result<f64> {
        let slot = if i < nd { &mut f.density_raw[i] } else { &mut f.appearance_raw[i - nd] };
        let old = *slot;
        *slot = value;
        let e = evaluate(&f, ctx, cfg, &objective, &batch, AdaptMode::Frozen(&records), false);
        let slot = if i < nd { &mut f.density_raw[i] } else { &mut f.appearance_raw[i - nd] };
        *slot = old;
        Ok(e?.total)
    };
    // entries far below the largest gradient carry cancellation noise
    let floor = 1e-3 * grad.max_abs();
    let mut max_rel: f64 = 0.0;
    let mut compared = 0;
    for &i in &chosen {
        let x = if i < nd { field.density_raw[i] } else { field.appearance_raw[i - nd] };
        let fd = (eval_at(i, x + opts.h)? - eval_at(i, x - opts.h)?) / (2.0 * opts.h);
        if fd.abs() <= 1e-8 {
            continue;
        }
        let mut a = analytic(i);
        if opts.negate_adjoint {
            a = -a;
        }
        compared += 1;
        max_rel = max_rel.max((fd - a).abs() / fd.abs().max(a.abs()).max(floor));
    }
    Ok(GradCheckReport {
        selector,
        max_rel_error: max_rel,
        compared,
        sampled: chosen.len(),
        loss: base.total,
    })
}

/// Overrides for the small f64 problem used by gradient checks. The large
/// threshold keeps every adaptation record valid so the geometric term has
/// support.
pub const GRAD_CHECK_OVERRIDES: &[&str] = &[
    "grid.base_res=4",
    "grid.downsample_ratio=2",
    "grid.num_coarse_levels=1",
    "grid.bbox_min=[-1.5,-1.5,-1.5]",
    "grid.bbox_max=[1.5,1.5,1.5]",
    "render.n_samples=24",
    "train.batch_train=32",
    "train.batch_novel=8",
    "train.batch_sparse=8",
    "train.random_background=true",
    "adapt.threshold=1e9",
    "loss.occlusion_fraction=0.5",
];

/// A 24x24 render of the fixture scene and a random f64 field with spread
/// densities, for [`grad_check`].
pub fn grad_check_problem(cfg: &Config) -> Result<(VoxelField<f64>, TrainContext)> {
    let (ds, _) = crate::data::generate_fixture(&crate::data::FixtureOptions {
        width: 24,
        height: 24,
        sparse_per_view: 8,
        mono_depth: true,
        seed: cfg.train.seed,
    })?;
    let ctx = TrainContext::new(&ds, cfg)?;
    let mut field = VoxelField::<f64>::constant(cfg.grid.clone(), 0.0, 0.0)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0xd1b5_4a32);
    field.density_raw.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..1.0));
    field.appearance_raw.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0));
    Ok((field, ctx))
}
