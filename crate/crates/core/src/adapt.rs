//! Cross-scale geometric adaptation.
//!
//! Every ray is rendered at all scales. Each scale's depth warps a patch around
//! the ray's pixel into the nearest training view; the scale whose warp has the
//! smallest photometric patch error supplies the pseudo ground-truth depth that
//! all scales are then pulled towards. Rays whose best error exceeds the
//! threshold are masked out.

use serde::{Deserialize, Serialize};

use crate::error::{FrugalError, Result};
use crate::field::{Scalar, VoxelField};
use crate::geometry::{reproject, Camera, PixelCoord};
use crate::poses::nearest_training_view;
use crate::raster::Image;
use crate::render::{render_ray, render_ray_inference, sample_points, RenderOptions};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    /// Odd side length of the photometric patch.
    pub patch_size: usize,
    /// Maximum accepted patch-mean squared error.
    pub threshold: f64,
    /// Render novel-view source patches once at this scale instead of per scale.
    pub novel_src_scale: Option<usize>,
    /// Apply adaptation to rays from sampled novel poses.
    pub use_novel_views: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            patch_size: 5,
            threshold: 0.5,
            novel_src_scale: None,
            use_novel_views: true,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, num_scales: usize) -> Result<()> {
        if self.patch_size % 2 == 0 {
            return Err(FrugalError::Config("adapt.patch_size must be odd".into()));
        }
        if !(self.threshold >= 0.0) {
            return Err(FrugalError::Config("adapt.threshold must be >= 0".into()));
        }
        if let Some(l) = self.novel_src_scale {
            if l >= num_scales {
                return Err(FrugalError::Config(format!(
                    "adapt.novel_src_scale {l} exceeds the coarsest scale {}",
                    num_scales - 1
                )));
            }
        }
        Ok(())
    }

    pub fn radius(&self) -> usize {
        self.patch_size / 2
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationRecord {
    /// Patch error per scale; `+inf` where the warp left the target image.
    pub errors: Vec<f64>,
    /// Pre-threshold argmin over `errors` (coarsest wins ties).
    pub selected: usize,
    /// Rendered depth at the selected scale; detached pseudo ground truth.
    pub pseudo_depth: f64,
    pub valid: bool,
}

/// Source colors of a `patch x patch` window, row-major over offsets
/// `-r..=r` in y then x.
pub type SourcePatch = Vec<[f64; 3]>;

pub fn image_patch(img: &Image, x: usize, y: usize, patch: usize) -> Option<SourcePatch> {
    let r = patch / 2;
    if x < r || y < r || x + r >= img.width || y + r >= img.height {
        return None;
    }
    let mut out = Vec::with_capacity(patch * patch);
    for yy in y - r..=y + r {
        for xx in x - r..=x + r {
            out.push(img.get_f64(xx, yy));
        }
    }
    Some(out)
}

/// Mean squared RGB difference between `src` and `dst` sampled bilinearly at
/// `warped` plus the same integer offsets. `None` when any sample falls outside
/// `dst`.
pub fn patch_error(src: &[[f64; 3]], dst: &Image, warped: PixelCoord, patch: usize) -> Option<f64> {
    debug_assert_eq!(src.len(), patch * patch);
    let r = (patch / 2) as isize;
    let mut acc = 0.0;
    let mut k = 0;
    for dy in -r..=r {
        for dx in -r..=r {
            let d = dst.bilinear(warped.u + dx as f64, warped.v + dy as f64)?;
            let s = src[k];
            acc += (s[0] - d[0]).powi(2) + (s[1] - d[1]).powi(2) + (s[2] - d[2]).powi(2);
            k += 1;
        }
    }
    Some(acc / (3 * patch * patch) as f64)
}

/// Patch reprojection error between input images: source window centered on
/// integer pixel `px`, destination window centered on `warped`.
pub fn patch_reproj_error(
    src_img: &Image,
    dst_img: &Image,
    px: (usize, usize),
    warped: PixelCoord,
    patch: usize,
) -> Option<f64> {
    let src = image_patch(src_img, px.0, px.1, patch)?;
    patch_error(&src, dst_img, warped, patch)
}

/// Argmin with ties resolved towards the coarsest scale.
pub fn select_scale(errors: &[f64]) -> usize {
    let mut best = errors.len().saturating_sub(1);
    for l in (0..errors.len()).rev() {
        if errors[l] < errors[best] {
            best = l;
        }
    }
    best
}

/// Which source patch to compare at each scale.
pub enum SourcePatches<'a> {
    /// One patch shared by all scales (input image or single-scale render).
    Shared(&'a [[f64; 3]]),
    /// One rendered patch per scale.
    PerScale(&'a [SourcePatch]),
}

impl SourcePatches<'_> {
    fn get(&self, level: usize) -> &[[f64; 3]] {
        match self {
            SourcePatches::Shared(p) => p,
            SourcePatches::PerScale(p) => &p[level],
        }
    }
}

/// Build the record from already-rendered per-scale depths.
pub fn adapt_from_depths(
    depths: &[f64],
    source: SourcePatches<'_>,
    px: PixelCoord,
    cam_src: &Camera,
    cam_dst: &Camera,
    dst_img: &Image,
    cfg: &AdaptConfig,
) -> AdaptationRecord {
    let margin = cfg.radius() as f64;
    let errors: Vec<f64> = depths
        .iter()
        .enumerate()
        .map(|(l, &d)| {
            let warp = reproject(px, d, cam_src, cam_dst, margin);
            if !warp.valid {
                return f64::INFINITY;
            }
            patch_error(source.get(l), dst_img, warp.pixel, cfg.patch_size).unwrap_or(f64::INFINITY)
        })
        .collect();
    record_from_errors(errors, depths, cfg.threshold)
}

pub fn record_from_errors(errors: Vec<f64>, depths: &[f64], threshold: f64) -> AdaptationRecord {
    let selected = select_scale(&errors);
    let best = errors[selected];
    AdaptationRecord {
        pseudo_depth: depths[selected],
        valid: best.is_finite() && best <= threshold,
        selected,
        errors,
    }
}

/// Training-view context shared by the adaptation entry points.
pub struct TrainViews<'a> {
    pub images: &'a [Image],
    pub cameras: &'a [Camera],
}

/// Adaptation for a ray through integer pixel `px` of training view `view`,
/// using the input colors of both views.
pub fn adapt_train_ray<T: Scalar>(
    field: &VoxelField<T>,
    views: &TrainViews<'_>,
    view: usize,
    px: (usize, usize),
    n_samples: usize,
    cfg: &AdaptConfig,
    opts: &RenderOptions,
) -> Result<AdaptationRecord> {
    if views.cameras.len() < 2 {
        return Err(FrugalError::Config(
            "geometric adaptation needs at least two training views".into(),
        ));
    }
    let cam = &views.cameras[view];
    let pc = PixelCoord::new(px.0 as f64, px.1 as f64);
    let ray = crate::geometry::ray_for_pixel(cam, pc)?;
    let samples = sample_points(&ray, n_samples, None)?;
    let depths = (0..field.config.num_scales())
        .map(|l| render_ray(field, &ray, l, &samples, opts).map(|(o, _)| o.depth))
        .collect::<Result<Vec<_>>>()?;
    let j = nearest_training_view(&cam.center(), views.cameras, Some(view)).expect("two views");
    let Some(src) = image_patch(&views.images[view], px.0, px.1, cfg.patch_size) else {
        return Ok(AdaptationRecord {
            errors: vec![f64::INFINITY; depths.len()],
            selected: depths.len() - 1,
            pseudo_depth: depths[depths.len() - 1],
            valid: false,
        });
    };
    Ok(adapt_from_depths(
        &depths,
        SourcePatches::Shared(&src),
        pc,
        cam,
        &views.cameras[j],
        &views.images[j],
        cfg,
    ))
}

/// Render the `patch x patch` color window around `px` of `cam` at `level`.
pub fn render_patch<T: Scalar>(
    field: &VoxelField<T>,
    cam: &Camera,
    px: (usize, usize),
    level: usize,
    patch: usize,
    n_samples: usize,
    opts: &RenderOptions,
) -> Result<SourcePatch> {
    let r = patch / 2;
    if px.0 < r || px.1 < r || px.0 + r >= cam.width || px.1 + r >= cam.height {
        return Err(FrugalError::Domain("novel patch leaves the image".into()));
    }
    let mut out = Vec::with_capacity(patch * patch);
    for y in px.1 - r..=px.1 + r {
        for x in px.0 - r..=px.0 + r {
            let ray = crate::geometry::ray_for_pixel(cam, PixelCoord::new(x as f64, y as f64))?;
            let s = sample_points(&ray, n_samples, None)?;
            out.push(render_ray_inference(field, &ray, level, &s, opts)?.color);
        }
    }
    Ok(out)
}

/// Adaptation for a ray from a sampled novel pose. The source patch is the
/// rendered color around `px` (per scale, or at `novel_src_scale`); the target
/// is the nearest training view's input image.
pub fn adapt_novel_ray<T: Scalar>(
    field: &VoxelField<T>,
    views: &TrainViews<'_>,
    cam: &Camera,
    px: (usize, usize),
    n_samples: usize,
    cfg: &AdaptConfig,
    opts: &RenderOptions,
) -> Result<AdaptationRecord> {
    if views.cameras.len() < 2 {
        return Err(FrugalError::Config(
            "geometric adaptation needs at least two training views".into(),
        ));
    }
    let pc = PixelCoord::new(px.0 as f64, px.1 as f64);
    let ray = crate::geometry::ray_for_pixel(cam, pc)?;
    let samples = sample_points(&ray, n_samples, None)?;
    let scales = field.config.num_scales();
    let depths = (0..scales)
        .map(|l| render_ray(field, &ray, l, &samples, opts).map(|(o, _)| o.depth))
        .collect::<Result<Vec<_>>>()?;
    let j = nearest_training_view(&cam.center(), views.cameras, None).expect("non-empty");
    let record = match cfg.novel_src_scale {
        Some(l) => {
            let patch = render_patch(field, cam, px, l, cfg.patch_size, n_samples, opts)?;
            adapt_from_depths(
                &depths,
                SourcePatches::Shared(&patch),
                pc,
                cam,
                &views.cameras[j],
                &views.images[j],
                cfg,
            )
        }
        None => {
            let patches = (0..scales)
                .map(|l| render_patch(field, cam, px, l, cfg.patch_size, n_samples, opts))
                .collect::<Result<Vec<_>>>()?;
            adapt_from_depths(
                &depths,
                SourcePatches::PerScale(&patches),
                pc,
                cam,
                &views.cameras[j],
                &views.images[j],
                cfg,
            )
        }
    };
    Ok(record)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoLoss {
    pub value: f64,
    /// d loss / d depth, indexed `[ray][scale]`.
    pub grad: Vec<Vec<f64>>,
    pub valid_rays: usize,
}

/// `sum_l (D^l - D')^2` averaged over valid rays, with `D'` held fixed.
pub fn geo_loss(records: &[AdaptationRecord], depths: &[Vec<f64>]) -> GeoLoss {
    assert_eq!(records.len(), depths.len());
    let valid = records.iter().filter(|r| r.valid).count();
    let mut grad: Vec<Vec<f64>> = depths.iter().map(|d| vec![0.0; d.len()]).collect();
    if valid == 0 {
        return GeoLoss {
            value: 0.0,
            grad,
            valid_rays: 0,
        };
    }
    let inv = 1.0 / valid as f64;
    let mut value = 0.0;
    for ((rec, d), g) in records.iter().zip(depths).zip(grad.iter_mut()) {
        if !rec.valid {
            continue;
        }
        for (l, &dl) in d.iter().enumerate() {
            let r = dl - rec.pseudo_depth;
            value += r * r * inv;
            g[l] = 2.0 * r * inv;
        }
    }
    GeoLoss {
        value,
        grad,
        valid_rays: valid,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{Matrix3, Vector3};

    fn ramp(w: usize, h: usize, shift: f64) -> Image {
        Image::from_fn(w, h, |x, y| {
            let u = x as f64 + shift;
            [(0.02 * u) as f32, (0.5 + 0.01 * y as f64) as f32, (0.3 + 0.015 * u) as f32]
        })
    }

    #[test]
    fn identical_images_identity_warp() {
        let img = ramp(20, 20, 0.0);
        let e = patch_reproj_error(&img, &img, (10, 10), PixelCoord::new(10.0, 10.0), 5).unwrap();
        assert_eq!(e, 0.0);
    }

    #[test]
    fn unit_difference_gives_unit_error() {
        let a = Image::filled(10, 10, [1.0; 3]);
        let b = Image::filled(10, 10, [0.0; 3]);
        let e = patch_reproj_error(&a, &b, (5, 5), PixelCoord::new(5.0, 5.0), 5).unwrap();
        assert!((e - 1.0).abs() < 1e-12);
    }

    #[test]
    fn half_pixel_shift_on_linear_ramp_is_exact() {
        let src = ramp(20, 20, 0.0);
        // dst(x) = src(x - 0.5): a feature at src u lives at dst u + 0.5
        let dst = ramp(20, 20, -0.5);
        let e = patch_reproj_error(&src, &dst, (9, 9), PixelCoord::new(9.5, 9.0), 5).unwrap();
        assert!(e < 1e-9, "{e}");
    }

    #[test]
    fn patch_outside_destination_is_invalid() {
        let img = ramp(10, 10, 0.0);
        assert!(patch_reproj_error(&img, &img, (5, 5), PixelCoord::new(8.5, 5.0), 5).is_none());
        assert!(patch_reproj_error(&img, &img, (1, 5), PixelCoord::new(5.0, 5.0), 5).is_none());
    }

    #[test]
    fn argmin_and_ties() {
        assert_eq!(select_scale(&[0.3, 0.1, 0.2]), 1);
        assert_eq!(select_scale(&[0.1, 0.1, 0.2]), 1);
        assert_eq!(select_scale(&[0.1, 0.1, 0.1]), 2);
        assert_eq!(select_scale(&[f64::INFINITY, 0.4, f64::INFINITY]), 1);
        assert_eq!(select_scale(&[f64::INFINITY; 3]), 2);
    }

    #[test]
    fn threshold_masks_record() {
        let r = record_from_errors(vec![0.7, 0.6, 0.9], &[1.0, 2.0, 3.0], 0.5);
        assert!(!r.valid);
        assert_eq!(r.selected, 1);
        let r = record_from_errors(vec![0.3, 0.1, 0.2], &[1.0, 2.0, 3.0], 0.5);
        assert!(r.valid);
        assert_eq!((r.selected, r.pseudo_depth), (1, 2.0));
    }

    #[test]
    fn geo_loss_conventions() {
        let rec = record_from_errors(vec![0.3, 0.1, 0.2], &[2.0, 1.0, 1.0], 0.5);
        let g = geo_loss(std::slice::from_ref(&rec), &[vec![2.0, 1.0, 1.0]]);
        assert!((g.value - 1.0).abs() < 1e-15);
        assert_eq!(g.grad[0], vec![2.0, 0.0, 0.0]);
        let flat = record_from_errors(vec![0.3, 0.1, 0.2], &[1.0, 1.0, 1.0], 0.5);
        assert_eq!(geo_loss(&[flat], &[vec![1.0; 3]]).value, 0.0);
        let bad = record_from_errors(vec![0.9; 3], &[2.0, 1.0, 1.0], 0.5);
        let g = geo_loss(&[bad], &[vec![2.0, 1.0, 1.0]]);
        assert_eq!((g.value, g.valid_rays), (0.0, 0));
        assert!(g.grad[0].iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_view_is_a_configuration_error() {
        let cfg = crate::field::GridConfig {
            base_res: 4,
            downsample_ratio: 2,
            num_coarse_levels: 1,
            ..Default::default()
        };
        let field = VoxelField::<f64>::constant(cfg, 0.0, 0.0).unwrap();
        let cam = Camera::new(10.0, 10.0, 5.0, 5.0, 10, 10, Matrix3::identity(), Vector3::new(0.0, 0.0, -3.0), 1.0, 5.0)
            .unwrap();
        let img = Image::new(10, 10);
        let views = TrainViews {
            images: std::slice::from_ref(&img),
            cameras: std::slice::from_ref(&cam),
        };
        let r = adapt_train_ray(&field, &views, 0, (5, 5), 8, &AdaptConfig::default(), &RenderOptions::default());
        assert!(matches!(r, Err(FrugalError::Config(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn argmin_invariant_to_positive_rescaling(errs in proptest::collection::vec(0.0f64..2.0, 1..5), k in 1e-3f64..1e3) {
                let scaled: Vec<f64> = errs.iter().map(|e| e * k).collect();
                prop_assert_eq!(select_scale(&errs), select_scale(&scaled));
                let depths: Vec<f64> = (0..errs.len()).map(|i| i as f64 + 1.0).collect();
                let a = record_from_errors(errs.clone(), &depths, 0.5);
                let b = record_from_errors(scaled, &depths, 0.5);
                prop_assert_eq!(a.pseudo_depth, b.pseudo_depth);
            }

            #[test]
            fn raising_threshold_never_shrinks_valid_set(errs in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 1..20), t1 in 0.0f64..1.0, dt in 0.0f64..1.0) {
                let depths = [1.0, 2.0, 3.0];
                for e in &errs {
                    let low = record_from_errors(e.clone(), &depths, t1);
                    let high = record_from_errors(e.clone(), &depths, t1 + dt);
                    prop_assert!(!low.valid || high.valid);
                }
            }

            #[test]
            fn selected_scale_residual_is_zero(depths in proptest::collection::vec(0.1f64..5.0, 3), errs in proptest::collection::vec(0.0f64..0.4, 3)) {
                let rec = record_from_errors(errs, &depths, 0.5);
                let g = geo_loss(std::slice::from_ref(&rec), std::slice::from_ref(&depths));
                prop_assert!(rec.valid);
                prop_assert_eq!(g.grad[0][rec.selected], 0.0);
            }
        }
    }
}
