//! Image and depth quality metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FrugalError, Result};
use crate::raster::{DepthMap, Image};

pub const PSNR_CAP: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_dims(a: &Image, b: &Image) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(FrugalError::Domain(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            let d = *x as f64 - *y as f64;
            d * d
        })
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// Peak-1 PSNR in dB, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable valid-mode Gaussian filter of a single-channel plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w - SSIM_WINDOW + 1;
    let oh = h - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over all fully contained 11x11 Gaussian windows (sigma 1.5),
/// averaged over channels. Dynamic range 1.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_dims(a, b)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(FrugalError::Domain(format!("ssim needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")));
    }
    let k = gaussian_kernel();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for c in 0..3 {
        let x: Vec<f64> = a.data.iter().skip(c).step_by(3).map(|v| *v as f64).collect();
        let y: Vec<f64> = b.data.iter().skip(c).step_by(3).map(|v| *v as f64).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = filter_valid(&x, w, h, &k);
        let my = filter_valid(&y, w, h, &k);
        let sxx = filter_valid(&xx, w, h, &k);
        let syy = filter_valid(&yy, w, h, &k);
        let sxy = filter_valid(&xy, w, h, &k);
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

/// Mean absolute depth error over pixels where `mask` is set (all pixels when
/// `None`) and both depths are finite.
pub fn depth_mae(rendered: &DepthMap, gt: &DepthMap, mask: Option<&[bool]>) -> Result<f64> {
    if rendered.width != gt.width || rendered.height != gt.height {
        return Err(FrugalError::Domain("depth map sizes differ".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (r, g)) in rendered.data.iter().zip(&gt.data).enumerate() {
        if mask.is_some_and(|m| !m[i]) || !r.is_finite() || !g.is_finite() {
            continue;
        }
        sum += (*r as f64 - *g as f64).abs();
        n += 1;
    }
    if n == 0 {
        return Err(FrugalError::Domain("depth_mae over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub view: usize,
    pub psnr: f64,
    pub ssim: f64,
    pub depth_mae: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: Vec<ViewMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub mean_depth_mae: Option<f64>,
}

impl EvalReport {
    pub fn from_views(views: Vec<ViewMetrics>) -> Self {
        let n = views.len().max(1) as f64;
        let mean_psnr = views.iter().map(|v| v.psnr).sum::<f64>() / n;
        let mean_ssim = views.iter().map(|v| v.ssim).sum::<f64>() / n;
        let depths: Vec<f64> = views.iter().filter_map(|v| v.depth_mae).collect();
        let mean_depth_mae = (!depths.is_empty()).then(|| depths.iter().sum::<f64>() / depths.len() as f64);
        Self {
            views,
            mean_psnr,
            mean_ssim,
            mean_depth_mae,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("view,psnr,ssim,depth_mae\n");
        let fmt = |d: Option<f64>| d.map(|v| v.to_string()).unwrap_or_default();
        for v in &self.views {
            s.push_str(&format!("{},{},{},{}\n", v.view, v.psnr, v.ssim, fmt(v.depth_mae)));
        }
        s.push_str(&format!("mean,{},{},{}\n", self.mean_psnr, self.mean_ssim, fmt(self.mean_depth_mae)));
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let csv = dir.join("eval.csv");
        std::fs::write(&csv, self.to_csv()).map_err(|e| FrugalError::io(&csv, e))?;
        crate::data::write_json(&dir.join("eval.json"), self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(w, h, |_, _| [rng.gen(), rng.gen(), rng.gen()])
    }

    #[test]
    fn psnr_cases() {
        let a = random_image(8, 8, 1);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);
        let z = Image::filled(4, 4, [0.0; 3]);
        let h = Image::filled(4, 4, [0.5; 3]);
        assert!((psnr(&z, &h).unwrap() - 10.0 * 4f64.log10()).abs() < 1e-12);
        assert!((psnr(&z, &h).unwrap() - 6.0206).abs() < 1e-4);
        let t = Image::filled(4, 4, [0.1; 3]);
        assert!((psnr(&z, &t).unwrap() - 20.0).abs() < 1e-5);
        let b = random_image(8, 8, 2);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identity_and_negative() {
        let a = random_image(32, 32, 3);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let mut neg = a.clone();
        neg.data.iter_mut().for_each(|v| *v = 1.0 - *v);
        assert!(ssim(&a, &neg).unwrap() < 0.0);
        assert!(ssim(&Image::new(8, 8), &Image::new(8, 8)).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_formula() {
        let a = random_image(32, 32, 4);
        let b = random_image(32, 32, 5);
        // direct 2D window, unnormalized Gaussian renormalized per window
        let r = 5i64;
        let mut wts = vec![];
        for dy in -r..=r {
            for dx in -r..=r {
                wts.push((-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp());
            }
        }
        let ws: f64 = wts.iter().sum();
        let mut total = 0.0;
        for c in 0..3 {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for cy in 5..27 {
                for cx in 5..27 {
                    let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    let mut i = 0;
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let x = a.get((cx + dx) as usize, (cy + dy) as usize)[c] as f64;
                            let y = b.get((cx + dx) as usize, (cy + dy) as usize)[c] as f64;
                            let w = wts[i] / ws;
                            i += 1;
                            mx += w * x;
                            my += w * y;
                            xx += w * x * x;
                            yy += w * y * y;
                            xy += w * x * y;
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    let vx = xx - mx * mx;
                    let vy = yy - my * my;
                    let cv = xy - mx * my;
                    acc += ((2.0 * mx * my + c1) * (2.0 * cv + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    cnt += 1.0;
                }
            }
            total += acc / cnt;
        }
        assert!((ssim(&a, &b).unwrap() - total / 3.0).abs() < 1e-9);
    }

    #[test]
    fn channel_permutation_invariance() {
        let a = random_image(16, 16, 6);
        let b = random_image(16, 16, 7);
        let perm = |img: &Image| {
            Image::from_fn(img.width, img.height, |x, y| {
                let p = img.get(x, y);
                [p[2], p[0], p[1]]
            })
        };
        assert!((psnr(&a, &b).unwrap() - psnr(&perm(&a), &perm(&b)).unwrap()).abs() < 1e-12);
        assert!((ssim(&a, &b).unwrap() - ssim(&perm(&a), &perm(&b)).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn depth_mae_cases() {
        let a = DepthMap::from_fn(5, 4, |x, y| (x + 2 * y) as f32);
        assert_eq!(depth_mae(&a, &a, None).unwrap(), 0.0);
        let b = DepthMap::from_fn(5, 4, |x, y| (x + 2 * y) as f32 + 0.5);
        assert!((depth_mae(&a, &b, None).unwrap() - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let r = DepthMap::from_fn(5, 4, |_, _| rng.gen());
        let g = DepthMap::from_fn(5, 4, |_, _| rng.gen());
        let mask: Vec<bool> = (0..20).map(|i| i % 3 != 0).collect();
        let mut s = 0.0;
        let mut n = 0.0;
        for i in 0..20 {
            if mask[i] {
                s += (r.data[i] as f64 - g.data[i] as f64).abs();
                n += 1.0;
            }
        }
        assert!((depth_mae(&r, &g, Some(&mask)).unwrap() - s / n).abs() < 1e-12);
    }

    #[test]
    fn report_csv_rows() {
        let rep = EvalReport::from_views(vec![
            ViewMetrics { view: 2, psnr: 20.0, ssim: 0.5, depth_mae: Some(0.1) },
            ViewMetrics { view: 3, psnr: 30.0, ssim: 0.7, depth_mae: None },
        ]);
        assert_eq!(rep.mean_psnr, 25.0);
        assert_eq!(rep.mean_depth_mae, Some(0.1));
        assert_eq!(rep.to_csv().lines().count(), 4);
    }
}
