//! Scene datasets on disk, and analytic synthetic scenes with exact depth.
//!
//! Layout of a scene directory:
//!
//! ```text
//! cameras.json        bbox, split and one frame record per image
//! <frame.file>        PNG, 8 or 16 bit
//! sparse_depth.json   optional [{view_id, u, v, depth}]
//! mono_depth/<stem>.pfm  optional, one per training view
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FrugalError, Result};
use crate::geometry::{project_to_camera, reproject, Camera, PixelCoord, Point3};
use crate::losses::SparseDepthPoint;
use crate::raster::{DepthMap, Image};

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub images: Vec<Image>,
    pub cameras: Vec<Camera>,
    /// Image file name per view.
    pub files: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub sparse_depth: Option<Vec<SparseDepthPoint>>,
    /// One map per entry of `train`, in the same order.
    pub mono_depth: Option<Vec<DepthMap>>,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameRecord {
    file: String,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    c2w: [f64; 16],
    near: f64,
    far: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CamerasFile {
    bbox_min: [f64; 3],
    bbox_max: [f64; 3],
    train: Vec<usize>,
    test: Vec<usize>,
    frames: Vec<FrameRecord>,
}

fn data_err(msg: impl Into<String>) -> FrugalError {
    FrugalError::Data(msg.into())
}

fn stem(file: &str) -> String {
    Path::new(file)
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| file.to_string())
}

impl SceneDataset {
    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.cameras.len() != n || self.files.len() != n {
            return Err(data_err("images, cameras and files differ in length"));
        }
        for (i, (img, cam)) in self.images.iter().zip(&self.cameras).enumerate() {
            if img.width != cam.width {
                return Err(data_err(format!(
                    "frame {i}: width {} does not match image width {}",
                    cam.width, img.width
                )));
            }
            if img.height != cam.height {
                return Err(data_err(format!(
                    "frame {i}: height {} does not match image height {}",
                    cam.height, img.height
                )));
            }
            cam.validate().map_err(|e| data_err(format!("frame {i}: {e}")))?;
        }
        for (name, split) in [("train", &self.train), ("test", &self.test)] {
            if let Some(bad) = split.iter().find(|&&i| i >= n) {
                return Err(data_err(format!("{name} index {bad} out of range ({n} frames)")));
            }
        }
        if self.train.iter().any(|i| self.test.contains(i)) {
            return Err(data_err("train and test splits overlap"));
        }
        if self.train.is_empty() {
            return Err(data_err("train split is empty"));
        }
        let finite = self.bbox_min.iter().chain(&self.bbox_max).all(|v| v.is_finite());
        if !finite || (0..3).any(|a| self.bbox_min[a] >= self.bbox_max[a]) {
            return Err(data_err("bbox must be finite with bbox_min < bbox_max"));
        }
        if let Some(points) = &self.sparse_depth {
            for (k, p) in points.iter().enumerate() {
                if p.view_id >= n {
                    return Err(data_err(format!("sparse_depth[{k}].view_id {} out of range", p.view_id)));
                }
                if !(p.depth > 0.0) || !p.depth.is_finite() {
                    return Err(data_err(format!("sparse_depth[{k}].depth must be positive")));
                }
                if !self.cameras[p.view_id].contains(PixelCoord::new(p.u, p.v)) {
                    return Err(data_err(format!("sparse_depth[{k}] (u, v) outside the image")));
                }
            }
        }
        if let Some(maps) = &self.mono_depth {
            if maps.len() != self.train.len() {
                return Err(data_err("mono_depth needs one map per training view"));
            }
        }
        Ok(())
    }

    pub fn train_cameras(&self) -> Vec<Camera> {
        self.train.iter().map(|&i| self.cameras[i].clone()).collect()
    }

    pub fn train_images(&self) -> Vec<Image> {
        self.train.iter().map(|&i| self.images[i].clone()).collect()
    }
}

pub fn load_scene(dir: &Path) -> Result<SceneDataset> {
    let cam_path = dir.join("cameras.json");
    let text = std::fs::read_to_string(&cam_path).map_err(|e| FrugalError::io(&cam_path, e))?;
    let file: CamerasFile = serde_json::from_str(&text).map_err(|e| FrugalError::json("cameras.json", e))?;
    let mut images = Vec::new();
    let mut cameras = Vec::new();
    let mut files = Vec::new();
    for (i, f) in file.frames.iter().enumerate() {
        let (rotation, translation) = Camera::split_c2w(&f.c2w);
        let cam = Camera::new(f.fx, f.fy, f.cx, f.cy, f.width, f.height, rotation, translation, f.near, f.far)
            .map_err(|e| data_err(format!("frames[{i}]: {e}")))?;
        images.push(Image::load_png(&dir.join(&f.file))?);
        cameras.push(cam);
        files.push(f.file.clone());
    }
    let sparse_path = dir.join("sparse_depth.json");
    let sparse_depth = if sparse_path.exists() {
        let text = std::fs::read_to_string(&sparse_path).map_err(|e| FrugalError::io(&sparse_path, e))?;
        Some(serde_json::from_str(&text).map_err(|e| FrugalError::json("sparse_depth.json", e))?)
    } else {
        None
    };
    let mono_dir = dir.join("mono_depth");
    let mono_depth = if mono_dir.is_dir() {
        let maps = file
            .train
            .iter()
            .map(|&i| {
                let name = files
                    .get(i)
                    .ok_or_else(|| data_err(format!("train index {i} out of range")))?;
                DepthMap::load_pfm(&mono_dir.join(format!("{}.pfm", stem(name))))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(maps)
    } else {
        None
    };
    let ds = SceneDataset {
        images,
        cameras,
        files,
        train: file.train,
        test: file.test,
        sparse_depth,
        mono_depth,
        bbox_min: file.bbox_min,
        bbox_max: file.bbox_max,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_scene(ds: &SceneDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| FrugalError::io(dir, e))?;
    let frames = ds
        .cameras
        .iter()
        .zip(&ds.files)
        .map(|(c, f)| FrameRecord {
            file: f.clone(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            c2w: c.c2w(),
            near: c.near,
            far: c.far,
        })
        .collect();
    let file = CamerasFile {
        bbox_min: ds.bbox_min,
        bbox_max: ds.bbox_max,
        train: ds.train.clone(),
        test: ds.test.clone(),
        frames,
    };
    write_json(&dir.join("cameras.json"), &file)?;
    for (img, f) in ds.images.iter().zip(&ds.files) {
        img.save_png(&dir.join(f))?;
    }
    if let Some(points) = &ds.sparse_depth {
        write_json(&dir.join("sparse_depth.json"), points)?;
    }
    if let Some(maps) = &ds.mono_depth {
        let mono_dir = dir.join("mono_depth");
        std::fs::create_dir_all(&mono_dir).map_err(|e| FrugalError::io(&mono_dir, e))?;
        for (map, &i) in maps.iter().zip(&ds.train) {
            map.save_pfm(&mono_dir.join(format!("{}.pfm", stem(&ds.files[i]))))?;
        }
    }
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| FrugalError::json(path.display().to_string(), e))?;
    std::fs::write(path, text).map_err(|e| FrugalError::io(path, e))
}

/// Bilinear resampling of an external depth map to the render resolution.
pub fn resample_depth(map: &DepthMap, width: usize, height: usize) -> DepthMap {
    map.resample(width, height)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
        albedo: [f64; 3],
    },
    /// Axis-aligned box.
    Box {
        center: [f64; 3],
        half_size: [f64; 3],
        albedo: [f64; 3],
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Flat,
    /// Hard 3D checker with `frequency` cells per unit.
    Checker { frequency: f64 },
    /// Smooth band-limited pattern; `frequency` in radians per unit.
    Waves { frequency: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSceneSpec {
    pub primitives: Vec<Primitive>,
    pub texture: Texture,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub background: [f64; 3],
    /// Direction towards the light.
    pub light_dir: [f64; 3],
    pub ambient: f64,
}

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let inside = |p: [f64; 3], ext: [f64; 3]| {
            (0..3).all(|a| p[a] - ext[a] >= self.bbox_min[a] - 1e-9 && p[a] + ext[a] <= self.bbox_max[a] + 1e-9)
        };
        for (i, prim) in self.primitives.iter().enumerate() {
            let ok = match prim {
                Primitive::Sphere { center, radius, .. } => *radius > 0.0 && inside(*center, [*radius; 3]),
                Primitive::Box { center, half_size, .. } => {
                    half_size.iter().all(|h| *h > 0.0) && inside(*center, *half_size)
                }
            };
            if !ok {
                return Err(data_err(format!("primitive {i} is degenerate or leaves the bbox")));
            }
        }
        Ok(())
    }
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
    albedo: [f64; 3],
}

fn intersect(prim: &Primitive, o: &Point3, d: &Vector3<f64>) -> Option<Hit> {
    match prim {
        Primitive::Sphere { center, radius, albedo } => {
            let c = Vector3::from(*center);
            let oc = o - c;
            let b = oc.dot(d);
            let cc = oc.norm_squared() - radius * radius;
            let disc = b * b - cc;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > 1e-9 { -b - s } else { -b + s };
            if t <= 1e-9 {
                return None;
            }
            let normal = (o + d * t - c) / *radius;
            Some(Hit { t, normal, albedo: *albedo })
        }
        Primitive::Box { center, half_size, albedo } => {
            let mut t0 = f64::NEG_INFINITY;
            let mut t1 = f64::INFINITY;
            let mut axis0 = 0;
            let mut sign0 = 0.0;
            for a in 0..3 {
                let lo = center[a] - half_size[a];
                let hi = center[a] + half_size[a];
                if d[a].abs() < 1e-15 {
                    if o[a] < lo || o[a] > hi {
                        return None;
                    }
                    continue;
                }
                let ta = (lo - o[a]) / d[a];
                let tb = (hi - o[a]) / d[a];
                let (tn, tf, s) = if ta < tb { (ta, tb, -1.0) } else { (tb, ta, 1.0) };
                if tn > t0 {
                    t0 = tn;
                    axis0 = a;
                    sign0 = s;
                }
                t1 = t1.min(tf);
            }
            if t0 > t1 || t0 <= 1e-9 {
                return None;
            }
            let mut normal = Vector3::zeros();
            normal[axis0] = sign0;
            Some(Hit { t: t0, normal, albedo: *albedo })
        }
    }
}

fn texture_at(tex: &Texture, p: &Point3) -> [f64; 3] {
    match tex {
        Texture::Flat => [1.0; 3],
        Texture::Checker { frequency } => {
            let s = (p.x * frequency).floor() + (p.y * frequency).floor() + (p.z * frequency).floor();
            let v = if (s as i64).rem_euclid(2) == 0 { 1.0 } else { 0.45 };
            [v; 3]
        }
        Texture::Waves { frequency: f } => {
            let mut out = [0.0; 3];
            for (c, o) in out.iter_mut().enumerate() {
                let ph = c as f64 * 2.1;
                let a = (f * p.x + 1.3 * (0.6 * f * p.y + ph).sin() + ph).sin();
                let b = (0.8 * f * p.y - 0.9 * (0.7 * f * p.x).cos() + 0.5 * f * p.z + 1.7 * ph).sin();
                *o = 0.6 + 0.2 * a + 0.2 * b;
            }
            out
        }
    }
}

/// First-hit color and along-ray depth, `None` when the ray escapes.
pub fn trace_ray(spec: &SyntheticSceneSpec, origin: &Point3, dir: &Vector3<f64>) -> Option<([f64; 3], f64)> {
    let hit = spec
        .primitives
        .iter()
        .filter_map(|p| intersect(p, origin, dir))
        .min_by(|a, b| a.t.total_cmp(&b.t))?;
    let p = origin + dir * hit.t;
    let light = Vector3::from(spec.light_dir).normalize();
    let shade = spec.ambient + (1.0 - spec.ambient) * hit.normal.dot(&light).max(0.0);
    let tex = texture_at(&spec.texture, &p);
    let mut rgb = [0.0; 3];
    for c in 0..3 {
        rgb[c] = (hit.albedo[c] * tex[c] * shade).clamp(0.0, 1.0);
    }
    Some((rgb, hit.t))
}

/// Render one view; escaped rays get the background color and `+inf` depth.
pub fn render_synthetic_view(spec: &SyntheticSceneSpec, cam: &Camera) -> (Image, DepthMap) {
    let mut img = Image::new(cam.width, cam.height);
    let mut depth = DepthMap::filled(cam.width, cam.height, f32::INFINITY);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let dir = cam.pixel_direction(PixelCoord::new(x as f64, y as f64));
            match trace_ray(spec, &cam.translation, &dir) {
                Some((rgb, t)) => {
                    img.set(x, y, rgb.map(|v| v as f32));
                    depth.set(x, y, t as f32);
                }
                None => img.set(x, y, spec.background.map(|v| v as f32)),
            }
        }
    }
    (img, depth)
}

/// Synthetic dataset over `cams` and its per-view ground-truth depth maps
/// (for tests and evaluation only).
pub fn generate_synthetic(
    spec: &SyntheticSceneSpec,
    cams: &[Camera],
    train: &[usize],
    test: &[usize],
) -> Result<(SceneDataset, Vec<DepthMap>)> {
    spec.validate()?;
    let mut images = Vec::new();
    let mut depths = Vec::new();
    for cam in cams {
        let (img, d) = render_synthetic_view(spec, cam);
        images.push(img);
        depths.push(d);
    }
    let ds = SceneDataset {
        images,
        cameras: cams.to_vec(),
        files: (0..cams.len()).map(|i| format!("view_{i:03}.png")).collect(),
        train: train.to_vec(),
        test: test.to_vec(),
        sparse_depth: None,
        mono_depth: None,
        bbox_min: spec.bbox_min,
        bbox_max: spec.bbox_max,
    };
    ds.validate()?;
    Ok((ds, depths))
}

/// Whether the surface seen at integer pixel `px` of view `i` is also the first
/// surface seen by all four bilinear neighbours of its warp into view `j`.
pub fn covisible(
    px: (usize, usize),
    depth_i: &DepthMap,
    cam_i: &Camera,
    depth_j: &DepthMap,
    cam_j: &Camera,
    rel_tol: f64,
) -> Option<PixelCoord> {
    let d = depth_i.get(px.0, px.1) as f64;
    let pc = PixelCoord::new(px.0 as f64, px.1 as f64);
    let warp = reproject(pc, d, cam_i, cam_j, 0.0);
    if !warp.valid {
        return None;
    }
    let world = cam_i.translation + cam_i.pixel_direction(pc) * d;
    let dist = (world - cam_j.translation).norm();
    if project_to_camera(&world, cam_j).behind {
        return None;
    }
    let (u0, v0) = (warp.pixel.u.floor() as usize, warp.pixel.v.floor() as usize);
    for (u, v) in [(u0, v0), (u0 + 1, v0), (u0, v0 + 1), (u0 + 1, v0 + 1)] {
        let u = u.min(cam_j.width - 1);
        let v = v.min(cam_j.height - 1);
        let dj = depth_j.get(u, v) as f64;
        if !dj.is_finite() || (dj - dist).abs() > rel_tol * dist {
            return None;
        }
    }
    Some(warp.pixel)
}

/// Photoconsistency of ground-truth depth between views `i` and `j`:
/// `(consistent, tested)` over covisible pixels, where consistent means every
/// channel of the bilinearly sampled color in `j` is within `color_tol`.
pub fn photoconsistency(
    ds: &SceneDataset,
    gt: &[DepthMap],
    i: usize,
    j: usize,
    color_tol: f64,
) -> (usize, usize) {
    let (cam_i, cam_j) = (&ds.cameras[i], &ds.cameras[j]);
    let mut consistent = 0;
    let mut tested = 0;
    for y in 0..cam_i.height {
        for x in 0..cam_i.width {
            if !(gt[i].get(x, y) as f64).is_finite() {
                continue;
            }
            let Some(p) = covisible((x, y), &gt[i], cam_i, &gt[j], cam_j, 0.02) else {
                continue;
            };
            let Some(c) = ds.images[j].bilinear(p.u, p.v) else {
                continue;
            };
            tested += 1;
            let s = ds.images[i].get_f64(x, y);
            if (0..3).all(|k| (c[k] - s[k]).abs() <= color_tol) {
                consistent += 1;
            }
        }
    }
    (consistent, tested)
}

/// Keypoint-like depth samples: random pixels of each training view whose
/// surface is covisible in another training view.
pub fn sparse_points_from_gt(
    ds: &SceneDataset,
    gt: &[DepthMap],
    per_view: usize,
    seed: u64,
) -> Vec<SparseDepthPoint> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for &i in &ds.train {
        let cam = &ds.cameras[i];
        let mut found = 0;
        let mut attempts = 0;
        while found < per_view && attempts < per_view * 200 {
            attempts += 1;
            let x = rng.gen_range(0..cam.width);
            let y = rng.gen_range(0..cam.height);
            let d = gt[i].get(x, y) as f64;
            if !d.is_finite() {
                continue;
            }
            let seen = ds
                .train
                .iter()
                .filter(|&&j| j != i)
                .any(|&j| covisible((x, y), &gt[i], cam, &gt[j], &ds.cameras[j], 0.02).is_some());
            if seen {
                out.push(SparseDepthPoint {
                    view_id: i,
                    u: x as f64,
                    v: y as f64,
                    depth: d,
                });
                found += 1;
            }
        }
    }
    out
}

/// Stand-in for a monocular depth network: a positive affine map of the true
/// depth. Escaped pixels take the far bound.
pub fn affine_mono_depth(gt: &DepthMap, far: f64, scale: f64, offset: f64) -> DepthMap {
    DepthMap::from_fn(gt.width, gt.height, |x, y| {
        let d = gt.get(x, y) as f64;
        let d = if d.is_finite() { d } else { far };
        (scale * d + offset) as f32
    })
}

/// Parameters of the built-in textured test scene.
#[derive(Clone, Debug, PartialEq)]
pub struct FixtureOptions {
    pub width: usize,
    pub height: usize,
    pub sparse_per_view: usize,
    pub mono_depth: bool,
    pub seed: u64,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            width: 100,
            height: 100,
            sparse_per_view: 64,
            mono_depth: true,
            seed: 0,
        }
    }
}

pub fn fixture_spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        primitives: vec![
            Primitive::Box {
                center: [0.0, 0.0, 1.3],
                half_size: [1.45, 1.45, 0.1],
                albedo: [0.9, 0.85, 0.8],
            },
            Primitive::Sphere {
                center: [-0.45, 0.25, 0.3],
                radius: 0.45,
                albedo: [0.95, 0.5, 0.35],
            },
            Primitive::Sphere {
                center: [0.55, -0.35, 0.6],
                radius: 0.35,
                albedo: [0.35, 0.7, 0.95],
            },
            Primitive::Box {
                center: [0.3, 0.55, 0.0],
                half_size: [0.25, 0.2, 0.25],
                albedo: [0.5, 0.9, 0.45],
            },
        ],
        texture: Texture::Waves { frequency: 6.0 },
        bbox_min: [-1.5; 3],
        bbox_max: [1.5; 3],
        background: [0.0; 3],
        light_dir: [-0.4, -0.6, -1.0],
        ambient: 0.35,
    }
}

/// Two training cameras and one held-out camera facing the scene.
pub fn fixture_cameras(width: usize, height: usize) -> Result<Vec<Camera>> {
    let focal = 1.7 * width as f64;
    let target = Point3::new(0.0, 0.0, 0.5);
    let up = Vector3::new(0.0, -1.0, 0.0);
    [[-0.35, 0.0, -3.2], [0.35, 0.0, -3.2], [0.0, 0.15, -3.2]]
        .iter()
        .map(|e| Camera::look_at(Point3::from(*e), target, up, focal, width, height, 1.5, 4.8))
        .collect()
}

/// The textured fixture scene: views 0 and 1 train, view 2 is held out.
pub fn generate_fixture(opts: &FixtureOptions) -> Result<(SceneDataset, Vec<DepthMap>)> {
    let spec = fixture_spec();
    let cams = fixture_cameras(opts.width, opts.height)?;
    let (mut ds, gt) = generate_synthetic(&spec, &cams, &[0, 1], &[2])?;
    if opts.sparse_per_view > 0 {
        ds.sparse_depth = Some(sparse_points_from_gt(&ds, &gt, opts.sparse_per_view, opts.seed));
    }
    if opts.mono_depth {
        ds.mono_depth = Some(
            ds.train
                .iter()
                .map(|&i| affine_mono_depth(&gt[i], ds.cameras[i].far, 0.6, 0.4))
                .collect(),
        );
    }
    ds.validate()?;
    Ok((ds, gt))
}

/// Path of the checked-in two-view fixture scene.
pub fn bundled_fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/scene2")
}
