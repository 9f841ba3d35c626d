//! Run configuration: one JSON document with a section per module, plus
//! dotted `key=value` overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adapt::AdaptConfig;
use crate::error::{FrugalError, Result};
use crate::field::GridConfig;
use crate::losses::LossWeights;
use crate::poses::SpiralConfig;
use crate::render::default_sample_count;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    /// Samples per ray; 0 derives the count from the grid resolution.
    pub n_samples: usize,
    /// Upper bound for the derived sample count.
    pub max_samples: usize,
    pub background: Option<[f64; 3]>,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            n_samples: 0,
            max_samples: 256,
            background: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub scene: Option<String>,
    pub use_mono_depth: bool,
    pub use_sparse_depth: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            scene: None,
            use_mono_depth: true,
            use_sparse_depth: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub grid: GridConfig,
    pub render: RenderConfig,
    pub adapt: AdaptConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub novel_poses: SpiralConfig,
    pub data: DataConfig,
}

/// One line of documentation per leaf key.
const KEY_DOCS: &[(&str, &str)] = &[
    ("grid.base_res", "voxels per axis of the finest grid"),
    ("grid.downsample_ratio", "stride ratio s between consecutive scales"),
    ("grid.num_coarse_levels", "number L of coarse scales above the finest"),
    ("grid.bbox_min", "scene box lower corner [x, y, z]"),
    ("grid.bbox_max", "scene box upper corner [x, y, z]"),
    ("grid.sh_degree", "spherical harmonics degree of the appearance (0..=2)"),
    ("grid.density_scale", "multiplier applied after the softplus density activation"),
    ("render.n_samples", "samples per ray (0 = derived from grid.base_res)"),
    ("render.max_samples", "cap on the derived sample count"),
    ("render.background", "background color [r, g, b] or null for none"),
    ("adapt.patch_size", "odd side length of the reprojection patch"),
    ("adapt.threshold", "maximum accepted patch error for pseudo depth"),
    ("adapt.novel_src_scale", "render novel source patches at this scale only (null = per scale)"),
    ("adapt.use_novel_views", "apply adaptation to rays from spiral poses"),
    ("loss.geo", "weight of the cross-scale geometric adaptation loss"),
    ("loss.sparse_depth", "weight of the sparse keypoint depth loss"),
    ("loss.mono_depth", "weight of the Pearson monocular depth loss"),
    ("loss.tv_density", "weight of total variation on the density grid"),
    ("loss.tv_appearance", "weight of total variation on the appearance grid"),
    ("loss.depth_smoothness", "weight of rendered depth smoothness inside patches"),
    ("loss.l1", "weight of the density L1 sparsity loss"),
    ("loss.distortion", "weight of the distortion loss"),
    ("loss.occlusion", "weight of the near-camera occlusion loss"),
    ("loss.occlusion_enabled", "enable the occlusion loss (object scenes)"),
    ("loss.occlusion_fraction", "fraction of leading samples penalized by the occlusion loss"),
    ("train.iterations", "number of optimization steps"),
    ("train.batch_train", "rays per step from training images (rounded to whole patches)"),
    ("train.batch_novel", "rays per step from spiral poses"),
    ("train.novel_cluster", "side of the square pixel clusters novel rays are drawn in"),
    ("train.batch_sparse", "keypoint rays per step (all keypoints when fewer)"),
    ("train.lr_init", "initial learning rate"),
    ("train.lr_final", "learning rate at the last iteration"),
    ("train.beta1", "Adam first moment decay"),
    ("train.beta2", "Adam second moment decay"),
    ("train.eps", "Adam denominator epsilon"),
    ("train.seed", "seed for initialization and ray sampling"),
    ("train.patch_k", "side of the square training ray patches"),
    ("train.jitter", "jitter sample positions inside their bins"),
    ("train.random_background", "composite a random color behind training-view rays"),
    ("train.checkpoint_every", "iterations between checkpoints (0 = final only)"),
    ("train.render_every", "iterations between test-view renders (0 = never)"),
    ("train.log_every", "iterations between progress lines"),
    ("novel_poses.n_poses", "number of spiral poses"),
    ("novel_poses.rotations", "spiral turns"),
    ("novel_poses.radius_scale", "multiplier on the spiral radii"),
    ("novel_poses.z_rate", "frequency of the depth oscillation along the spiral"),
    ("data.scene", "scene directory"),
    ("data.use_mono_depth", "use mono_depth/*.pfm maps when the scene has them"),
    ("data.use_sparse_depth", "use sparse_depth.json when the scene has it"),
];

impl Config {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.adapt.validate(self.grid.num_scales())?;
        self.loss.validate()?;
        self.train.validate()?;
        self.novel_poses.validate()?;
        if self.render.n_samples == 1 {
            return Err(FrugalError::Config("render.n_samples must be 0 or >= 2".into()));
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        if self.render.n_samples == 0 {
            default_sample_count(&self.grid, self.render.max_samples)
        } else {
            self.render.n_samples
        }
    }

    pub fn from_value(value: Value) -> Result<Self> {
        let cfg: Config =
            serde_json::from_value(value).map_err(|e| FrugalError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Load `path` (or defaults), then apply `key=value` overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let base = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| FrugalError::io(p, e))?;
                let cfg: Config = serde_json::from_str(&text)
                    .map_err(|e| FrugalError::Config(format!("{}: {e}", p.display())))?;
                cfg
            }
            None => Config::default(),
        };
        let mut value = base.to_value();
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        Self::from_value(value)
    }
}

/// Apply one `a.b.c=value` override. The value is parsed as JSON, falling back
/// to a plain string. The key must already exist.
pub fn apply_override(value: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| FrugalError::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    let mut node = value;
    for part in key.split('.') {
        node = node
            .as_object_mut()
            .and_then(|o| o.get_mut(part))
            .ok_or_else(|| FrugalError::Config(format!("unknown config key `{key}`")))?;
    }
    if node.is_object() {
        return Err(FrugalError::Config(format!("config key `{key}` is a section, not a value")));
    }
    *node = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
    Ok(())
}

/// Every leaf key with its default value and description.
pub fn config_keys() -> Vec<(String, String, &'static str)> {
    let mut out = Vec::new();
    flatten("", &Config::default().to_value(), &mut out);
    out.into_iter()
        .map(|(k, v)| {
            let doc = KEY_DOCS.iter().find(|(n, _)| *n == k).map(|(_, d)| *d).unwrap_or("");
            (k, v, doc)
        })
        .collect()
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, child, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

pub fn config_help() -> String {
    let mut s = String::from("Configuration keys (set with --set key=value):\n");
    for (k, v, doc) in config_keys() {
        s.push_str(&format!("  {k:<28} {doc} [default: {v}]\n"));
    }
    s
}
