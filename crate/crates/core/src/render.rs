//! Emission-absorption volume rendering of one ray at one scale, with the
//! reverse-mode adjoint back into the voxel parameters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FrugalError, Result};
use crate::field::{sh_basis, sigmoid, FieldGrad, GridConfig, Scalar, VoxelField};
use crate::geometry::Ray;

/// Transmittance below which the inference path stops marching.
pub const EARLY_STOP_TRANSMITTANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct RaySamples {
    pub t: Vec<f64>,
    pub delta: Vec<f64>,
    pub near: f64,
    pub far: f64,
}

impl RaySamples {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Interval midpoints `t_i + delta_i / 2`, normalized to `[0, 1]` over `[near, far]`.
    pub fn normalized_midpoints(&self) -> Vec<f64> {
        let span = self.far - self.near;
        self.t
            .iter()
            .zip(&self.delta)
            .map(|(t, d)| (t + 0.5 * d - self.near) / span)
            .collect()
    }

    pub fn normalized_spacings(&self) -> Vec<f64> {
        let span = self.far - self.near;
        self.delta.iter().map(|d| d / span).collect()
    }
}

/// Stratified samples over `[near, far]`: one per equal-width bin, at the bin
/// center or uniformly jittered inside it.
pub fn sample_points_with<R: Rng>(ray: &Ray, n: usize, rng: Option<&mut R>) -> Result<RaySamples> {
    if n < 2 {
        return Err(FrugalError::Domain(format!("need at least 2 samples per ray, got {n}")));
    }
    if !(ray.near < ray.far) {
        return Err(FrugalError::Domain("ray near must be below far".into()));
    }
    let bin = (ray.far - ray.near) / n as f64;
    let t: Vec<f64> = match rng {
        Some(rng) => (0..n)
            .map(|i| ray.near + (i as f64 + rng.gen::<f64>()) * bin)
            .collect(),
        None => (0..n).map(|i| ray.near + (i as f64 + 0.5) * bin).collect(),
    };
    let mut delta = Vec::with_capacity(n);
    for i in 0..n {
        let next = if i + 1 < n { t[i + 1] } else { ray.far };
        // a jittered sample may land exactly on `far`
        delta.push((next - t[i]).max(1e-12));
    }
    Ok(RaySamples {
        t,
        delta,
        near: ray.near,
        far: ray.far,
    })
}

pub fn sample_points(ray: &Ray, n: usize, jitter_seed: Option<u64>) -> Result<RaySamples> {
    match jitter_seed {
        Some(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample_points_with(ray, n, Some(&mut rng))
        }
        None => sample_points_with::<ChaCha8Rng>(ray, n, None),
    }
}

/// Sample count heuristic: half the finest-grid diagonal in voxels, capped.
pub fn default_sample_count(grid: &GridConfig, cap: usize) -> usize {
    let diag = grid.base_res as f64 * 3f64.sqrt();
    ((0.5 * diag).ceil() as usize).clamp(2, cap.max(2))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RenderOptions {
    /// Composite `(1 - opacity) * background` into the color when set.
    pub background: Option<[f64; 3]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Vec<f64>,
}

/// Per-sample forward quantities kept for the adjoint pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderTrace {
    pub sigma: Vec<f64>,
    pub rgb: Vec<[f64; 3]>,
    /// Transmittance before each sample.
    pub transmittance: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// Upstream gradients on one ray's outputs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RenderGrad {
    pub color: [f64; 3],
    pub depth: f64,
    pub opacity: f64,
    pub weights: Option<Vec<f64>>,
}

impl RenderGrad {
    pub fn is_zero(&self) -> bool {
        self.color == [0.0; 3]
            && self.depth == 0.0
            && self.opacity == 0.0
            && self.weights.as_ref().is_none_or(|w| w.iter().all(|x| *x == 0.0))
    }

    pub fn add_weight_grad(&mut self, n: usize, i: usize, g: f64) {
        self.weights.get_or_insert_with(|| vec![0.0; n])[i] += g;
    }
}

pub fn render_ray<T: Scalar>(
    field: &VoxelField<T>,
    ray: &Ray,
    level: usize,
    samples: &RaySamples,
    opts: &RenderOptions,
) -> Result<(RenderOutput, RenderTrace)> {
    let lattice = field.scale_lattice(level)?;
    let basis = sh_basis(field.config.sh_degree, &[ray.dir.x, ray.dir.y, ray.dir.z]);
    let n = samples.len();
    let mut trace = RenderTrace {
        sigma: Vec::with_capacity(n),
        rgb: Vec::with_capacity(n),
        transmittance: Vec::with_capacity(n),
        alpha: Vec::with_capacity(n),
    };
    let mut weights = Vec::with_capacity(n);
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut opacity = 0.0;
    let mut trans = 1.0f64;
    for i in 0..n {
        let t = samples.t[i];
        let p = ray.at(t);
        let (sigma, rgb) = match field.corners(&lattice, &[p.x, p.y, p.z]) {
            Some(c) => (
                field.density_from_raw(field.density_raw_at(&c)),
                field.appearance_logits_at(&c, &basis).map(sigmoid),
            ),
            None => (0.0, [0.0; 3]),
        };
        let alpha = -(-sigma * samples.delta[i]).exp_m1();
        let w = trans * alpha;
        for k in 0..3 {
            color[k] += w * rgb[k];
        }
        depth += w * t;
        opacity += w;
        weights.push(w);
        trace.sigma.push(sigma);
        trace.rgb.push(rgb);
        trace.transmittance.push(trans);
        trace.alpha.push(alpha);
        trans *= 1.0 - alpha;
    }
    if let Some(bg) = opts.background {
        for k in 0..3 {
            color[k] += (1.0 - opacity) * bg[k];
        }
    }
    Ok((
        RenderOutput {
            color,
            depth,
            opacity,
            weights,
        },
        trace,
    ))
}

/// Forward-only render that stops once transmittance falls below
/// [`EARLY_STOP_TRANSMITTANCE`]. Not differentiable.
pub fn render_ray_inference<T: Scalar>(
    field: &VoxelField<T>,
    ray: &Ray,
    level: usize,
    samples: &RaySamples,
    opts: &RenderOptions,
) -> Result<RenderOutput> {
    let lattice = field.scale_lattice(level)?;
    let basis = sh_basis(field.config.sh_degree, &[ray.dir.x, ray.dir.y, ray.dir.z]);
    let n = samples.len();
    let mut weights = vec![0.0; n];
    let mut color = [0.0; 3];
    let mut depth = 0.0;
    let mut opacity = 0.0;
    let mut trans = 1.0;
    for i in 0..n {
        if trans < EARLY_STOP_TRANSMITTANCE {
            break;
        }
        let t = samples.t[i];
        let p = ray.at(t);
        let Some(c) = field.corners(&lattice, &[p.x, p.y, p.z]) else {
            continue;
        };
        let sigma = field.density_from_raw(field.density_raw_at(&c));
        if sigma == 0.0 {
            continue;
        }
        let alpha = -(-sigma * samples.delta[i]).exp_m1();
        let w = trans * alpha;
        let rgb = field.appearance_logits_at(&c, &basis).map(sigmoid);
        for k in 0..3 {
            color[k] += w * rgb[k];
        }
        depth += w * t;
        opacity += w;
        weights[i] = w;
        trans *= 1.0 - alpha;
    }
    if let Some(bg) = opts.background {
        for k in 0..3 {
            color[k] += (1.0 - opacity) * bg[k];
        }
    }
    Ok(RenderOutput {
        color,
        depth,
        opacity,
        weights,
    })
}

/// Accumulate the gradient of the ray outputs into `grad`.
///
/// With `g_i` the total upstream on weight `w_i`,
/// `dL/dsigma_k = delta_k * (g_k * T_{k+1} - sum_{i>k} g_i w_i)` and
/// `dL/dc_k = w_k * dL/dC`.
#[allow(clippy::too_many_arguments)]
pub fn render_ray_backward<T: Scalar>(
    field: &VoxelField<T>,
    ray: &Ray,
    level: usize,
    samples: &RaySamples,
    out: &RenderOutput,
    trace: &RenderTrace,
    upstream: &RenderGrad,
    opts: &RenderOptions,
    grad: &mut FieldGrad,
) -> Result<()> {
    if upstream.is_zero() {
        return Ok(());
    }
    let lattice = field.scale_lattice(level)?;
    let basis = sh_basis(field.config.sh_degree, &[ray.dir.x, ray.dir.y, ray.dir.z]);
    let n = samples.len();
    let dc = upstream.color;
    let mut d_opacity = upstream.opacity;
    if let Some(bg) = opts.background {
        d_opacity -= dc[0] * bg[0] + dc[1] * bg[1] + dc[2] * bg[2];
    }
    let mut suffix = 0.0;
    for i in (0..n).rev() {
        let w = out.weights[i];
        let rgb = &trace.rgb[i];
        let mut g = dc[0] * rgb[0] + dc[1] * rgb[1] + dc[2] * rgb[2]
            + upstream.depth * samples.t[i]
            + d_opacity;
        if let Some(dw) = &upstream.weights {
            g += dw[i];
        }
        let t_next = trace.transmittance[i] * (1.0 - trace.alpha[i]);
        let d_sigma = samples.delta[i] * (g * t_next - suffix);
        suffix += g * w;
        let d_rgb = [dc[0] * w, dc[1] * w, dc[2] * w];
        if d_sigma == 0.0 && d_rgb == [0.0; 3] {
            continue;
        }
        let p = ray.at(samples.t[i]);
        let Some(c) = field.corners(&lattice, &[p.x, p.y, p.z]) else {
            continue;
        };
        if d_sigma != 0.0 {
            let raw = field.density_raw_at(&c);
            field.density_backward(&c, raw, d_sigma, grad);
        }
        if d_rgb != [0.0; 3] {
            field.appearance_backward(&c, &basis, rgb, &d_rgb, grad);
        }
    }
    Ok(())
}
