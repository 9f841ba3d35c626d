//! Loss terms and their gradients with respect to rendered quantities (or the
//! voxel parameters, for the grid regularizers). Batch terms are averaged over
//! rays so their scale does not depend on the batch size.

use serde::{Deserialize, Serialize};

use crate::error::{FrugalError, Result};
use crate::field::{sigmoid, softplus, FieldGrad, Scalar, VoxelField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub geo: f64,
    pub sparse_depth: f64,
    pub mono_depth: f64,
    pub tv_density: f64,
    pub tv_appearance: f64,
    pub depth_smoothness: f64,
    pub l1: f64,
    pub distortion: f64,
    pub occlusion: f64,
    /// The occlusion prior only makes sense for object scenes on a known
    /// background, so it is opt-in.
    pub occlusion_enabled: bool,
    /// Fraction of leading samples penalized by the occlusion term.
    pub occlusion_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            geo: 0.01,
            sparse_depth: 0.5,
            mono_depth: 0.01,
            tv_density: 0.01,
            tv_appearance: 0.001,
            depth_smoothness: 0.001,
            l1: 1e-5,
            distortion: 0.001,
            occlusion: 0.01,
            occlusion_enabled: false,
            occlusion_fraction: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("loss.geo", self.geo),
            ("loss.sparse_depth", self.sparse_depth),
            ("loss.mono_depth", self.mono_depth),
            ("loss.tv_density", self.tv_density),
            ("loss.tv_appearance", self.tv_appearance),
            ("loss.depth_smoothness", self.depth_smoothness),
            ("loss.l1", self.l1),
            ("loss.distortion", self.distortion),
            ("loss.occlusion", self.occlusion),
        ];
        for (name, w) in all {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(FrugalError::Config(format!("{name} must be a finite value >= 0")));
            }
        }
        if !(self.occlusion_fraction > 0.0 && self.occlusion_fraction <= 1.0) {
            return Err(FrugalError::Config("loss.occlusion_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparseDepthPoint {
    pub view_id: usize,
    pub u: f64,
    pub v: f64,
    pub depth: f64,
}

/// Unweighted values of every term in the objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub ms_color: f64,
    pub geo: f64,
    pub tv_density: f64,
    pub tv_appearance: f64,
    pub depth_smoothness: f64,
    pub l1: f64,
    pub distortion: f64,
    pub occlusion: f64,
    pub sparse_depth: f64,
    pub mono_depth: Option<f64>,
}

pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> f64 {
    let mut total = terms.ms_color
        + w.geo * terms.geo
        + w.tv_density * terms.tv_density
        + w.tv_appearance * terms.tv_appearance
        + w.depth_smoothness * terms.depth_smoothness
        + w.l1 * terms.l1
        + w.distortion * terms.distortion
        + w.sparse_depth * terms.sparse_depth;
    if w.occlusion_enabled {
        total += w.occlusion * terms.occlusion;
    }
    if let Some(d) = terms.mono_depth {
        total += w.mono_depth * d;
    }
    total
}

/// `(1 / S) sum_l mean_r ||C^l(r) - C(r)||^2` over the `S` scales;
/// `rendered` is indexed `[scale][ray]`.
pub fn ms_color_loss(
    rendered: &[Vec<[f64; 3]>],
    gt: &[[f64; 3]],
    num_scales: usize,
) -> Result<(f64, Vec<Vec<[f64; 3]>>)> {
    if rendered.len() != num_scales {
        return Err(FrugalError::Domain(format!(
            "expected renders at {num_scales} scales, got {}",
            rendered.len()
        )));
    }
    if gt.is_empty() {
        return Ok((0.0, rendered.iter().map(|r| vec![[0.0; 3]; r.len()]).collect()));
    }
    let norm = 1.0 / (num_scales * gt.len()) as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(num_scales);
    for scale in rendered {
        if scale.len() != gt.len() {
            return Err(FrugalError::Domain("rendered/ground-truth ray count mismatch".into()));
        }
        let mut g = Vec::with_capacity(gt.len());
        for (c, t) in scale.iter().zip(gt) {
            let mut gi = [0.0; 3];
            for k in 0..3 {
                let r = c[k] - t[k];
                value += r * r * norm;
                gi[k] = 2.0 * r * norm;
            }
            g.push(gi);
        }
        grads.push(g);
    }
    Ok((value, grads))
}

/// Mean squared difference of neighbouring values along each axis of an
/// `nx x ny x nz` grid with `channels` interleaved values per node (x fastest).
/// Adds `scale * d/dvalue` into `grad` when given.
pub fn tv_loss<T: Scalar>(
    values: &[T],
    dims: [usize; 3],
    channels: usize,
    mut grad: Option<(&mut [f64], f64)>,
) -> f64 {
    let [nx, ny, nz] = dims;
    assert_eq!(values.len(), nx * ny * nz * channels);
    let pairs = (nx.saturating_sub(1) * ny * nz + nx * ny.saturating_sub(1) * nz + nx * ny * nz.saturating_sub(1))
        * channels;
    if pairs == 0 {
        return 0.0;
    }
    let norm = 1.0 / pairs as f64;
    let row = nx * channels;
    let plane = row * ny;
    // (start, len, offset) runs of pairs (i, i + offset)
    let mut runs = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            let start = z * plane + y * row;
            if nx > 1 {
                runs.push((start, row - channels, channels));
            }
            if y + 1 < ny {
                runs.push((start, row, row));
            }
        }
        if z + 1 < nz {
            runs.push((z * plane, plane, plane));
        }
    }
    let mut acc = 0.0;
    for (start, len, off) in runs {
        let a = &values[start..start + len];
        let b = &values[start + off..start + off + len];
        match grad.as_mut() {
            Some((g, s)) => {
                let f = 2.0 * norm * *s;
                for i in 0..len {
                    let d = b[i].to_f64() - a[i].to_f64();
                    acc += d * d;
                    g[start + off + i] += f * d;
                    g[start + i] -= f * d;
                }
            }
            None => {
                for i in 0..len {
                    let d = b[i].to_f64() - a[i].to_f64();
                    acc += d * d;
                }
            }
        }
    }
    acc * norm
}

/// TV of the density and appearance grids, returned separately. Gradients are
/// scaled by the given weights.
pub fn tv_field<T: Scalar>(
    field: &VoxelField<T>,
    weights: (f64, f64),
    grad: Option<&mut FieldGrad>,
) -> (f64, f64) {
    let n = field.config.base_res;
    let dims = [n, n, n];
    let c = field.config.appearance_channels();
    match grad {
        Some(g) => {
            let d = tv_loss(&field.density_raw, dims, 1, Some((&mut g.density, weights.0)));
            let a = tv_loss(&field.appearance_raw, dims, c, Some((&mut g.appearance, weights.1)));
            (d, a)
        }
        None => (
            tv_loss::<T>(&field.density_raw, dims, 1, None),
            tv_loss::<T>(&field.appearance_raw, dims, c, None),
        ),
    }
}

/// Mean squared difference of horizontally and vertically adjacent depths
/// within each `width x height` patch. `depths` holds the patches back to back,
/// each row-major.
pub fn depth_smoothness_loss(depths: &[f64], width: usize, height: usize) -> (f64, Vec<f64>) {
    let per = width * height;
    assert!(per > 0 && depths.len() % per == 0);
    let patches = depths.len() / per;
    let pairs = patches * ((width - 1) * height + width * (height - 1));
    let mut grad = vec![0.0; depths.len()];
    if pairs == 0 {
        return (0.0, grad);
    }
    let norm = 1.0 / pairs as f64;
    let mut value = 0.0;
    for p in 0..patches {
        let off = p * per;
        for y in 0..height {
            for x in 0..width {
                let i = off + y * width + x;
                let mut visit = |j: usize| {
                    let d = depths[j] - depths[i];
                    value += d * d * norm;
                    grad[j] += 2.0 * d * norm;
                    grad[i] -= 2.0 * d * norm;
                };
                if x + 1 < width {
                    visit(i + 1);
                }
                if y + 1 < height {
                    visit(i + width);
                }
            }
        }
    }
    (value, grad)
}

/// Mean activated density over the base grid. Adds `weight * gradient` when
/// `grad` is given.
pub fn l1_sparsity_loss<T: Scalar>(field: &VoxelField<T>, grad: Option<(&mut FieldGrad, f64)>) -> f64 {
    let n = field.density_raw.len() as f64;
    match grad {
        Some((g, w)) => {
            let mut acc = 0.0;
            for (raw, gd) in field.density_raw.iter().zip(g.density.iter_mut()) {
                let x = raw.to_f64();
                acc += softplus(x);
                *gd += w * sigmoid(x) / n;
            }
            acc / n
        }
        None => field.density_raw.iter().map(|x| softplus(x.to_f64())).sum::<f64>() / n,
    }
}

/// Per ray: `sum_{i<j} w_i w_j |m_i - m_j| + (1/3) sum_i w_i^2 delta_i` with
/// normalized midpoints and spacings; averaged over rays. Returns d/dw per ray.
pub fn distortion_loss(weights: &[Vec<f64>], midpoints: &[Vec<f64>], spacings: &[Vec<f64>]) -> (f64, Vec<Vec<f64>>) {
    let rays = weights.len();
    if rays == 0 {
        return (0.0, Vec::new());
    }
    let norm = 1.0 / rays as f64;
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(rays);
    for ((w, m), d) in weights.iter().zip(midpoints).zip(spacings) {
        let n = w.len();
        let mut g = vec![0.0; n];
        let mut ray = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                let dist = (m[i] - m[j]).abs();
                ray += w[i] * w[j] * dist;
                g[i] += w[j] * dist * norm;
                g[j] += w[i] * dist * norm;
            }
            ray += w[i] * w[i] * d[i] / 3.0;
            g[i] += 2.0 * w[i] * d[i] / 3.0 * norm;
        }
        value += ray * norm;
        grads.push(g);
    }
    (value, grads)
}

pub fn occlusion_sample_count(n: usize, fraction: f64) -> usize {
    ((n as f64 * fraction).round() as usize).clamp(1, n)
}

/// Mean weight over the first `fraction` of each ray's samples, averaged over rays.
pub fn occlusion_loss(weights: &[Vec<f64>], fraction: f64) -> (f64, Vec<Vec<f64>>) {
    let rays = weights.len();
    if rays == 0 {
        return (0.0, Vec::new());
    }
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(rays);
    for w in weights {
        let k = occlusion_sample_count(w.len(), fraction);
        let scale = 1.0 / (k * rays) as f64;
        let mut g = vec![0.0; w.len()];
        for i in 0..k {
            value += w[i] * scale;
            g[i] = scale;
        }
        grads.push(g);
    }
    (value, grads)
}

/// Mean squared error between rendered and keypoint depths.
pub fn sparse_depth_loss(rendered: &[f64], target: &[f64]) -> (f64, Vec<f64>) {
    assert_eq!(rendered.len(), target.len());
    if rendered.is_empty() {
        return (0.0, Vec::new());
    }
    let norm = 1.0 / rendered.len() as f64;
    let mut value = 0.0;
    let grad = rendered
        .iter()
        .zip(target)
        .map(|(r, t)| {
            let d = r - t;
            value += d * d * norm;
            2.0 * d * norm
        })
        .collect();
    (value, grad)
}

pub const PEARSON_MIN_PIXELS: usize = 16;
const PEARSON_EPS: f64 = 1e-12;

/// Pearson correlation of `x` against fixed `y` and its gradient in `x`.
/// Zero-variance input yields `None`.
pub fn pearson(x: &[f64], y: &[f64]) -> Option<(f64, Vec<f64>)> {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let xc: Vec<f64> = x.iter().map(|v| v - mx).collect();
    let yc: Vec<f64> = y.iter().map(|v| v - my).collect();
    let sxx: f64 = xc.iter().map(|v| v * v).sum();
    let syy: f64 = yc.iter().map(|v| v * v).sum();
    if sxx < PEARSON_EPS || syy < PEARSON_EPS {
        return None;
    }
    let sxy: f64 = xc.iter().zip(&yc).map(|(a, b)| a * b).sum();
    let nx = sxx.sqrt();
    let ny = syy.sqrt();
    let r = sxy / (nx * ny);
    let grad = xc
        .iter()
        .zip(&yc)
        .map(|(a, b)| b / (nx * ny) - r * a / sxx)
        .collect();
    Some((r, grad))
}

/// `sum_l mean_patches (1 - pearson(D^l, D_ext))`. `rendered[l][p]` and
/// `external[p]` hold one patch of depths each.
pub fn mono_depth_loss(rendered: &[Vec<Vec<f64>>], external: &[Vec<f64>]) -> Result<(f64, Vec<Vec<Vec<f64>>>)> {
    let mut value = 0.0;
    let mut grads = Vec::with_capacity(rendered.len());
    for scale in rendered {
        if scale.len() != external.len() {
            return Err(FrugalError::Domain("mono depth patch count mismatch".into()));
        }
        let norm = if external.is_empty() { 0.0 } else { 1.0 / external.len() as f64 };
        let mut gs = Vec::with_capacity(scale.len());
        for (d, e) in scale.iter().zip(external) {
            if d.len() != e.len() || d.len() < PEARSON_MIN_PIXELS {
                return Err(FrugalError::Domain(format!(
                    "pearson depth loss needs matching patches of at least {PEARSON_MIN_PIXELS} pixels"
                )));
            }
            match pearson(d, e) {
                Some((r, g)) => {
                    value += (1.0 - r) * norm;
                    gs.push(g.into_iter().map(|x| -x * norm).collect());
                }
                None => gs.push(vec![0.0; d.len()]),
            }
        }
        grads.push(gs);
    }
    Ok((value, grads))
}
