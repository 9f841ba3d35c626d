//! Novel pose generation along a spiral around the training rig, and nearest
//! training view lookup.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{FrugalError, Result};
use crate::geometry::{look_at_rotation, Camera, Point3};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpiralConfig {
    pub n_poses: usize,
    pub rotations: f64,
    pub radius_scale: f64,
    pub z_rate: f64,
}

impl Default for SpiralConfig {
    fn default() -> Self {
        Self::llff()
    }
}

impl SpiralConfig {
    pub fn llff() -> Self {
        Self {
            n_poses: 60,
            rotations: 1.0,
            radius_scale: 1.0,
            z_rate: 0.5,
        }
    }

    pub fn dtu() -> Self {
        Self {
            rotations: 4.0,
            radius_scale: 0.5,
            ..Self::llff()
        }
    }

    pub fn realestate() -> Self {
        Self {
            rotations: 2.0,
            radius_scale: 2.0,
            ..Self::llff()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_poses == 0 {
            return Err(FrugalError::Config("novel_poses.n_poses must be >= 1".into()));
        }
        if !(self.radius_scale >= 0.0) {
            return Err(FrugalError::Config("novel_poses.radius_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// Linear-interpolated percentile (numpy's default method).
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Axes of the averaged training pose: (right, up, back, center).
pub fn average_pose(cams: &[Camera]) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>, Point3) {
    let n = cams.len() as f64;
    let center = cams.iter().map(|c| c.translation).sum::<Vector3<f64>>() / n;
    let back = cams
        .iter()
        .map(|c| -c.rotation.column(2).into_owned())
        .sum::<Vector3<f64>>()
        .normalize();
    let up_sum = cams
        .iter()
        .map(|c| -c.rotation.column(1).into_owned())
        .sum::<Vector3<f64>>();
    let right = back.cross(&up_sum).normalize();
    let up = right.cross(&back);
    (right, up, back, center)
}

/// Spiral trajectory around the averaged training pose. Per-axis radii are the
/// 90th percentile of the training centers' offsets from the average center
/// (in the average pose frame) times `radius_scale`; cameras look at a focus
/// point on the average viewing axis and copy the first camera's intrinsics.
pub fn spiral_poses(train: &[Camera], cfg: &SpiralConfig) -> Result<Vec<Camera>> {
    cfg.validate()?;
    let first = train
        .first()
        .ok_or_else(|| FrugalError::Config("spiral needs at least one training camera".into()))?;
    let (right, up, back, center) = average_pose(train);
    let world_up = train
        .iter()
        .map(|c| -c.rotation.column(1).into_owned())
        .sum::<Vector3<f64>>()
        .normalize();

    let close_depth = train.iter().map(|c| c.near).fold(f64::INFINITY, f64::min) * 0.9;
    let inf_depth = train.iter().map(|c| c.far).fold(0.0, f64::max) * 5.0;
    let dt = 0.75;
    let focal = 1.0 / ((1.0 - dt) / close_depth + dt / inf_depth);

    let offsets: Vec<[f64; 3]> = train
        .iter()
        .map(|c| {
            let d = c.translation - center;
            [right.dot(&d).abs(), up.dot(&d).abs(), back.dot(&d).abs()]
        })
        .collect();
    let rads: Vec<f64> = (0..3)
        .map(|a| percentile(&offsets.iter().map(|o| o[a]).collect::<Vec<_>>(), 90.0) * cfg.radius_scale)
        .collect();

    let focus = center - back * focal;
    let total = 2.0 * std::f64::consts::PI * cfg.rotations;
    (0..cfg.n_poses)
        .map(|k| {
            let theta = total * k as f64 / cfg.n_poses as f64;
            let pos = center
                + right * (theta.cos() * rads[0])
                + up * (-theta.sin() * rads[1])
                + back * (-(theta * cfg.z_rate).sin() * rads[2]);
            let rotation = look_at_rotation(pos, focus, world_up)?;
            first.with_pose(rotation, pos)
        })
        .collect()
}

/// Index of the training camera whose center is closest to `center`, skipping
/// `exclude`. Ties go to the lowest index.
pub fn nearest_training_view(center: &Point3, train: &[Camera], exclude: Option<usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (j, c) in train.iter().enumerate() {
        if Some(j) == exclude {
            continue;
        }
        let d = (c.center() - center).norm();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((j, d));
        }
    }
    best.map(|(j, _)| j)
}
