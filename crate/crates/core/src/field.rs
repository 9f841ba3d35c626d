//! Weight-sharing multi-scale voxel field.
//!
//! A single dense base grid of `N^3` nodes holds raw density and appearance
//! parameters. Scale `l` (0 = finest) reads the nodes whose base indices are
//! multiples of `s^l`, so every scale trains the same storage. Node `i` of the
//! base grid sits at the center of cell `i`: `bbox_min + (i + 0.5) * h` with
//! `h = (bbox_max - bbox_min) / N`. A coarse node keeps the world position of
//! the base node it aliases, and queries beyond the last coarse node clamp to
//! the border.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FrugalError, Result};
use crate::geometry::Point3;

pub trait Scalar: Copy + Default + Send + Sync + std::fmt::Debug + PartialEq + 'static {
    fn to_f64(self) -> f64;
    fn from_f64(x: f64) -> Self;
}

impl Scalar for f32 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
}

impl Scalar for f64 {
    #[inline(always)]
    fn to_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f64(x: f64) -> Self {
        x
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.max(0.0) + (-x.abs()).exp().ln_1p()
    }
}

#[inline]
pub fn softplus_inverse(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y + (-(-y).exp_m1()).ln()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub const MAX_SH_DEGREE: usize = 2;

/// Real SH basis up to degree 2. The DC term is 1 so that a degree-0 field
/// stores its color logits directly.
pub fn sh_basis(degree: usize, dir: &[f64; 3]) -> [f64; 9] {
    let [x, y, z] = *dir;
    let mut b = [0.0; 9];
    b[0] = 1.0;
    if degree >= 1 {
        b[1] = 0.488_602_511_902_919_9 * y;
        b[2] = 0.488_602_511_902_919_9 * z;
        b[3] = 0.488_602_511_902_919_9 * x;
    }
    if degree >= 2 {
        b[4] = 1.092_548_430_592_079 * x * y;
        b[5] = 1.092_548_430_592_079 * y * z;
        b[6] = 0.315_391_565_252_520_05 * (3.0 * z * z - 1.0);
        b[7] = 1.092_548_430_592_079 * x * z;
        b[8] = 0.546_274_215_296_039_5 * (x * x - y * y);
    }
    b
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub base_res: usize,
    pub downsample_ratio: usize,
    pub num_coarse_levels: usize,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub sh_degree: usize,
    /// Multiplier on the softplus density.
    pub density_scale: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            base_res: 64,
            downsample_ratio: 4,
            num_coarse_levels: 2,
            bbox_min: [-1.0; 3],
            bbox_max: [1.0; 3],
            sh_degree: 0,
            density_scale: 1.0,
        }
    }
}

impl GridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.downsample_ratio < 2 {
            return Err(FrugalError::Config(format!(
                "grid.downsample_ratio must be >= 2, got {}",
                self.downsample_ratio
            )));
        }
        let coarsest = self
            .downsample_ratio
            .checked_pow(self.num_coarse_levels as u32)
            .ok_or_else(|| FrugalError::Config("grid.num_coarse_levels too large".into()))?;
        if self.base_res == 0 || self.base_res % coarsest != 0 {
            return Err(FrugalError::Config(format!(
                "grid.base_res {} must be a positive multiple of downsample_ratio^num_coarse_levels = {}",
                self.base_res, coarsest
            )));
        }
        for a in 0..3 {
            if !(self.bbox_min[a] < self.bbox_max[a])
                || !self.bbox_min[a].is_finite()
                || !self.bbox_max[a].is_finite()
            {
                return Err(FrugalError::Config(format!(
                    "grid bbox must satisfy min < max on every axis (axis {a})"
                )));
            }
        }
        if self.sh_degree > MAX_SH_DEGREE {
            return Err(FrugalError::Config(format!(
                "grid.sh_degree must be <= {MAX_SH_DEGREE}"
            )));
        }
        if !(self.density_scale > 0.0) {
            return Err(FrugalError::Config("grid.density_scale must be positive".into()));
        }
        Ok(())
    }

    pub fn num_scales(&self) -> usize {
        self.num_coarse_levels + 1
    }

    pub fn sh_coeffs(&self) -> usize {
        (self.sh_degree + 1) * (self.sh_degree + 1)
    }

    pub fn appearance_channels(&self) -> usize {
        3 * self.sh_coeffs()
    }

    pub fn num_nodes(&self) -> usize {
        self.base_res * self.base_res * self.base_res
    }

    pub fn cell_size(&self) -> [f64; 3] {
        let n = self.base_res as f64;
        [
            (self.bbox_max[0] - self.bbox_min[0]) / n,
            (self.bbox_max[1] - self.bbox_min[1]) / n,
            (self.bbox_max[2] - self.bbox_min[2]) / n,
        ]
    }

    pub fn node_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.base_res * (y + self.base_res * z)
    }

    pub fn node_coords(&self, index: usize) -> [usize; 3] {
        let n = self.base_res;
        [index % n, (index / n) % n, index / (n * n)]
    }

    pub fn node_position(&self, x: usize, y: usize, z: usize) -> Point3 {
        let h = self.cell_size();
        Point3::new(
            self.bbox_min[0] + (x as f64 + 0.5) * h[0],
            self.bbox_min[1] + (y as f64 + 0.5) * h[1],
            self.bbox_min[2] + (z as f64 + 0.5) * h[2],
        )
    }

    pub fn contains(&self, p: &[f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.bbox_min[a] && p[a] <= self.bbox_max[a])
    }

    pub fn scale_lattice(&self, level: usize) -> Result<Lattice> {
        if level > self.num_coarse_levels {
            return Err(FrugalError::Domain(format!(
                "scale {level} out of range 0..={}",
                self.num_coarse_levels
            )));
        }
        let stride = self.downsample_ratio.pow(level as u32);
        Ok(Lattice {
            level,
            stride,
            res: self.base_res / stride,
        })
    }
}

/// Level-`l` read view of the base grid: nodes at base indices `k * stride`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Lattice {
    pub level: usize,
    pub stride: usize,
    pub res: usize,
}

impl Lattice {
    /// Base-grid indices (per axis) of the lattice nodes.
    pub fn axis_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.res).map(move |k| k * self.stride)
    }
}

/// The up-to-8 base nodes addressed by one trilinear lookup.
#[derive(Clone, Copy, Debug)]
pub struct Corners {
    pub index: [usize; 8],
    pub weight: [f64; 8],
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelField<T: Scalar = f32> {
    pub config: GridConfig,
    pub density_raw: Vec<T>,
    pub appearance_raw: Vec<T>,
}

impl<T: Scalar> VoxelField<T> {
    pub fn constant(config: GridConfig, density_raw: f64, appearance_raw: f64) -> Result<Self> {
        config.validate()?;
        let n = config.num_nodes();
        let c = config.appearance_channels();
        Ok(Self {
            density_raw: vec![T::from_f64(density_raw); n],
            appearance_raw: vec![T::from_f64(appearance_raw); n * c],
            config,
        })
    }

    /// Near-empty start: density raw values around softplus^-1(0.01), small
    /// random appearance logits.
    pub fn initialized(config: GridConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shift = softplus_inverse(1e-2);
        let n = config.num_nodes();
        let c = config.appearance_channels();
        let density_raw = (0..n)
            .map(|_| T::from_f64(shift + rng.gen_range(-1e-2..1e-2)))
            .collect();
        let appearance_raw = (0..n * c)
            .map(|_| T::from_f64(rng.gen_range(-0.1..0.1)))
            .collect();
        Ok(Self {
            config,
            density_raw,
            appearance_raw,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let n = self.config.num_nodes();
        if self.density_raw.len() != n
            || self.appearance_raw.len() != n * self.config.appearance_channels()
        {
            return Err(FrugalError::Data("voxel array sizes do not match grid config".into()));
        }
        let finite = self
            .density_raw
            .iter()
            .chain(self.appearance_raw.iter())
            .all(|x| x.to_f64().is_finite());
        if !finite {
            return Err(FrugalError::Data("voxel field contains non-finite values".into()));
        }
        Ok(())
    }

    pub fn convert<U: Scalar>(&self) -> VoxelField<U> {
        VoxelField {
            config: self.config.clone(),
            density_raw: self.density_raw.iter().map(|x| U::from_f64(x.to_f64())).collect(),
            appearance_raw: self
                .appearance_raw
                .iter()
                .map(|x| U::from_f64(x.to_f64()))
                .collect(),
        }
    }

    pub fn scale_lattice(&self, level: usize) -> Result<Lattice> {
        self.config.scale_lattice(level)
    }

    /// Trilinear corners of `p` on `lattice`, or `None` outside the bbox.
    #[inline]
    pub fn corners(&self, lattice: &Lattice, p: &[f64; 3]) -> Option<Corners> {
        let cfg = &self.config;
        if !cfg.contains(p) {
            return None;
        }
        let n = cfg.base_res;
        let stride = lattice.stride as f64;
        let max_q = (lattice.res - 1) as f64;
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let h = (cfg.bbox_max[a] - cfg.bbox_min[a]) / n as f64;
            let g = (p[a] - cfg.bbox_min[a]) / h - 0.5;
            let q = (g / stride).clamp(0.0, max_q);
            let i = if lattice.res > 1 {
                (q.floor() as usize).min(lattice.res - 2)
            } else {
                0
            };
            frac[a] = q - i as f64;
            base[a] = i;
        }
        let step = if lattice.res > 1 { lattice.stride } else { 0 };
        let s = lattice.stride;
        let mut index = [0usize; 8];
        let mut weight = [0.0f64; 8];
        for c in 0..8 {
            let dx = c & 1;
            let dy = (c >> 1) & 1;
            let dz = (c >> 2) & 1;
            let x = base[0] * s + dx * step;
            let y = base[1] * s + dy * step;
            let z = base[2] * s + dz * step;
            index[c] = x + n * (y + n * z);
            let wx = if dx == 1 { frac[0] } else { 1.0 - frac[0] };
            let wy = if dy == 1 { frac[1] } else { 1.0 - frac[1] };
            let wz = if dz == 1 { frac[2] } else { 1.0 - frac[2] };
            weight[c] = wx * wy * wz;
        }
        Some(Corners { index, weight })
    }

    #[inline]
    pub fn density_raw_at(&self, corners: &Corners) -> f64 {
        let mut acc = 0.0;
        for c in 0..8 {
            acc += corners.weight[c] * self.density_raw[corners.index[c]].to_f64();
        }
        acc
    }

    /// Pre-activation color logits.
    #[inline]
    pub fn appearance_logits_at(&self, corners: &Corners, basis: &[f64; 9]) -> [f64; 3] {
        let k = self.config.sh_coeffs();
        let ch = 3 * k;
        let mut out = [0.0; 3];
        for c in 0..8 {
            let w = corners.weight[c];
            if w == 0.0 {
                continue;
            }
            let node = &self.appearance_raw[corners.index[c] * ch..(corners.index[c] + 1) * ch];
            for (color, o) in out.iter_mut().enumerate() {
                let coeffs = &node[color * k..(color + 1) * k];
                let mut dot = 0.0;
                for (j, v) in coeffs.iter().enumerate() {
                    dot += basis[j] * v.to_f64();
                }
                *o += w * dot;
            }
        }
        out
    }

    #[inline]
    pub fn density_from_raw(&self, raw: f64) -> f64 {
        self.config.density_scale * softplus(raw)
    }

    /// Scatter `d_sigma` back to the density nodes; `raw` is the interpolated
    /// pre-activation value.
    #[inline]
    pub fn density_backward(&self, corners: &Corners, raw: f64, d_sigma: f64, grad: &mut FieldGrad) {
        let d_raw = d_sigma * self.config.density_scale * sigmoid(raw);
        for c in 0..8 {
            grad.density[corners.index[c]] += corners.weight[c] * d_raw;
        }
    }

    #[inline]
    pub fn appearance_backward(
        &self,
        corners: &Corners,
        basis: &[f64; 9],
        rgb: &[f64; 3],
        d_rgb: &[f64; 3],
        grad: &mut FieldGrad,
    ) {
        let k = self.config.sh_coeffs();
        let ch = 3 * k;
        let mut d_logit = [0.0; 3];
        for i in 0..3 {
            d_logit[i] = d_rgb[i] * rgb[i] * (1.0 - rgb[i]);
        }
        for c in 0..8 {
            let w = corners.weight[c];
            if w == 0.0 {
                continue;
            }
            let node = &mut grad.appearance[corners.index[c] * ch..(corners.index[c] + 1) * ch];
            for color in 0..3 {
                let g = w * d_logit[color];
                for j in 0..k {
                    node[color * k + j] += g * basis[j];
                }
            }
        }
    }

    pub fn sample_density(&self, point: &Point3, level: usize) -> Result<f64> {
        let lattice = self.scale_lattice(level)?;
        Ok(match self.corners(&lattice, &[point.x, point.y, point.z]) {
            Some(c) => self.density_from_raw(self.density_raw_at(&c)),
            None => 0.0,
        })
    }

    pub fn sample_density_adjoint(
        &self,
        point: &Point3,
        level: usize,
        d_sigma: f64,
        grad: &mut FieldGrad,
    ) -> Result<()> {
        let lattice = self.scale_lattice(level)?;
        if let Some(c) = self.corners(&lattice, &[point.x, point.y, point.z]) {
            let raw = self.density_raw_at(&c);
            self.density_backward(&c, raw, d_sigma, grad);
        }
        Ok(())
    }

    pub fn sample_appearance(&self, point: &Point3, view_dir: &Point3, level: usize) -> Result<[f64; 3]> {
        let lattice = self.scale_lattice(level)?;
        Ok(match self.corners(&lattice, &[point.x, point.y, point.z]) {
            Some(c) => {
                let basis = sh_basis(self.config.sh_degree, &[view_dir.x, view_dir.y, view_dir.z]);
                self.appearance_logits_at(&c, &basis).map(sigmoid)
            }
            None => [0.0; 3],
        })
    }

    pub fn sample_appearance_adjoint(
        &self,
        point: &Point3,
        view_dir: &Point3,
        level: usize,
        d_rgb: [f64; 3],
        grad: &mut FieldGrad,
    ) -> Result<()> {
        let lattice = self.scale_lattice(level)?;
        if let Some(c) = self.corners(&lattice, &[point.x, point.y, point.z]) {
            let basis = sh_basis(self.config.sh_degree, &[view_dir.x, view_dir.y, view_dir.z]);
            let rgb = self.appearance_logits_at(&c, &basis).map(sigmoid);
            self.appearance_backward(&c, &basis, &rgb, &d_rgb, grad);
        }
        Ok(())
    }
}

/// Dense gradient buffers in f64, shaped like the field's parameter arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGrad {
    pub density: Vec<f64>,
    pub appearance: Vec<f64>,
}

impl FieldGrad {
    pub fn zeros(config: &GridConfig) -> Self {
        let n = config.num_nodes();
        Self {
            density: vec![0.0; n],
            appearance: vec![0.0; n * config.appearance_channels()],
        }
    }

    pub fn clear(&mut self) {
        self.density.iter_mut().for_each(|g| *g = 0.0);
        self.appearance.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn add_assign(&mut self, other: &FieldGrad) {
        for (a, b) in self.density.iter_mut().zip(&other.density) {
            *a += b;
        }
        for (a, b) in self.appearance.iter_mut().zip(&other.appearance) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.density.iter_mut().for_each(|g| *g *= factor);
        self.appearance.iter_mut().for_each(|g| *g *= factor);
    }

    pub fn max_abs(&self) -> f64 {
        self.density
            .iter()
            .chain(&self.appearance)
            .fold(0.0f64, |m, g| m.max(g.abs()))
    }
}
