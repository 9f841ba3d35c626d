//! End-to-end acceptance checks. Every criterion prints one PASS/FAIL line to
//! stderr (outside the test harness capture) and the test fails if any fails.
//!
//! The ablation runs (criteria 6 to 8) train the 100x100 fixture scene for
//! 2000 iterations, four variants times three seeds. Expect tens of minutes on
//! one core.

use std::io::Write;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use frugal_core::adapt::{adapt_from_depths, image_patch, record_from_errors, select_scale, AdaptConfig, SourcePatches};
use frugal_core::checkpoint::{decode, encode};
use frugal_core::config::Config;
use frugal_core::data::{covisible, generate_fixture, photoconsistency, FixtureOptions};
use frugal_core::field::{softplus_inverse, FieldGrad, GridConfig, VoxelField};
use frugal_core::geometry::{lift_to_world, project_to_camera, reproject, Camera, PixelCoord, Point3, Ray};
use frugal_core::raster::DepthMap;
use frugal_core::render::{render_ray, render_ray_backward, sample_points, RenderGrad, RenderOptions};
use frugal_core::train::{
    evaluate_views, grad_check, grad_check_problem, GradCheckOptions, LossSelector, TrainContext, Trainer,
    GRAD_CHECK_OVERRIDES,
};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Held-out PSNR floor for the full model on the fixture. Pinned from the
/// first verified run of this exact fixture (27.66 dB, seed 0).
const PSNR_FLOOR_DB: f64 = 22.0;
const SEEDS: [u64; 3] = [0, 1, 2];

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, o: &Outcome, secs: f64) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {id} [{tag}] {name}: {} ({secs:.1}s)", o.detail);
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v[v.len() / 2]
}

fn fixture_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/fixture.json")
}

fn random_camera(rng: &mut ChaCha8Rng) -> Camera {
    let axis = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
    let r = Rotation3::from_axis_angle(&axis, rng.gen_range(-0.4..0.4)).into_inner();
    let t = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let f = rng.gen_range(50.0..300.0);
    Camera::new(f, f * rng.gen_range(0.9..1.1), 80.0, 60.0, 160, 120, r, t, 0.1, 100.0).expect("valid camera")
}

fn criterion_1() -> Outcome {
    let overrides: Vec<String> = GRAD_CHECK_OVERRIDES.iter().map(|s| s.to_string()).collect();
    let cfg = Config::load(None, &overrides).expect("config");
    let (field, ctx) = grad_check_problem(&cfg).expect("problem");
    let mut worst: (f64, &str) = (0.0, "");
    let mut empty = Vec::new();
    for sel in LossSelector::ALL {
        let r = grad_check(&field, &ctx, &cfg, sel, &GradCheckOptions::default()).expect("grad check");
        if r.compared == 0 {
            empty.push(sel.name());
        }
        if r.max_rel_error > worst.0 {
            worst = (r.max_rel_error, sel.name());
        }
    }
    Outcome {
        pass: worst.0 < 1e-5 && empty.is_empty(),
        detail: format!("10 terms on a 4^3 grid, max rel err {:.2e} ({}), terms without support {:?}", worst.0, worst.1, empty),
    }
}

fn criterion_2() -> Outcome {
    let (sigma0, c0) = (1.7, 0.3);
    let cfg = GridConfig {
        base_res: 4,
        downsample_ratio: 2,
        num_coarse_levels: 0,
        bbox_min: [-1.0, -1.0, -1.0],
        bbox_max: [1.0, 1.0, 2.0],
        ..Default::default()
    };
    let f = VoxelField::<f64>::constant(cfg, softplus_inverse(sigma0), (c0 / (1.0 - c0) as f64).ln()).expect("field");
    let ray = Ray {
        origin: Point3::new(0.1, -0.2, -0.5),
        dir: Vector3::new(0.0, 0.0, 1.0),
        near: 0.0,
        far: 1.0,
    };
    let s = sample_points(&ray, 4096, None).expect("samples");
    let (out, _) = render_ray(&f, &ray, 0, &s, &RenderOptions::default()).expect("render");
    let expected = (1.0 - (-sigma0).exp()) * c0;
    let closed = out.color.iter().map(|c| (c - expected).abs()).fold(0.0, f64::max);

    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let field = {
        let g = GridConfig {
            base_res: 8,
            downsample_ratio: 2,
            num_coarse_levels: 2,
            density_scale: 5.0,
            ..Default::default()
        };
        let mut f = VoxelField::<f64>::constant(g, 0.0, 0.0).expect("field");
        f.density_raw.iter_mut().for_each(|x| *x = rng.gen_range(-4.0..4.0));
        f
    };
    let mut violations = 0;
    for r in 0..100_000u64 {
        let origin = Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
        let target = Point3::new(rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9));
        let ray = Ray {
            origin,
            dir: (target - origin).normalize(),
            near: 0.0,
            far: rng.gen_range(1.0..5.0),
        };
        let s = sample_points(&ray, 16, Some(r)).expect("samples");
        let (o, t) = render_ray(&field, &ray, (r % 3) as usize, &s, &RenderOptions::default()).expect("render");
        let sum: f64 = o.weights.iter().sum();
        let monotone = t.transmittance.windows(2).all(|w| w[1] <= w[0]);
        if sum > 1.0 + 1e-12 || o.weights.iter().any(|w| *w < 0.0) || !monotone {
            violations += 1;
        }
    }
    Outcome {
        pass: closed < 1e-4 && violations == 0,
        detail: format!("closed-form error {closed:.2e}, {violations} violating rays of 100000"),
    }
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_id: f64 = 0.0;
    let mut worst_rigid: f64 = 0.0;
    let mut worst_stereo: f64 = 0.0;
    for _ in 0..1000 {
        let cam = random_camera(&mut rng);
        let px = PixelCoord::new(rng.gen_range(0.0..159.0), rng.gen_range(0.0..119.0));
        let d = rng.gen_range(0.2..50.0);
        let w = reproject(px, d, &cam, &cam, 0.0);
        worst_id = worst_id.max((w.pixel.u - px.u).abs()).max((w.pixel.v - px.v).abs());

        let x = lift_to_world(px, d, &cam).expect("lift");
        let other = random_camera(&mut rng);
        let a = project_to_camera(&x, &other);
        let axis = Unit::new_normalize(Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)));
        let g = Rotation3::from_axis_angle(&axis, rng.gen_range(-3.0..3.0)).into_inner();
        let s = Vector3::new(rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let moved = other.with_pose(g * other.rotation, g * other.translation + s).expect("pose");
        let b = project_to_camera(&(g * x + s), &moved);
        if !a.behind && a.z > 0.1 {
            worst_rigid = worst_rigid.max((a.pixel.u - b.pixel.u).abs()).max((a.pixel.v - b.pixel.v).abs());
        }

        // rectified pair: disparity f * b / z
        let base = rng.gen_range(0.05..1.0);
        let f = rng.gen_range(50.0..300.0);
        let left = Camera::new(f, f, 80.0, 60.0, 160, 120, nalgebra::Matrix3::identity(), Vector3::zeros(), 0.1, 100.0).expect("cam");
        let right = left.with_pose(left.rotation, Vector3::new(base, 0.0, 0.0)).expect("cam");
        let q = PixelCoord::new(rng.gen_range(0.0..159.0), rng.gen_range(0.0..119.0));
        let z = rng.gen_range(1.0..30.0);
        let dir = left.pixel_direction(q);
        let along = z / dir.z;
        let wq = reproject(q, along, &left, &right, 0.0);
        worst_stereo = worst_stereo.max(((q.u - wq.pixel.u) - f * base / z).abs()).max((wq.pixel.v - q.v).abs());
    }
    let (ds, gt) = generate_fixture(&FixtureOptions::default()).expect("fixture");
    let (c01, t01) = photoconsistency(&ds, &gt, 0, 1, 0.05);
    let (c10, t10) = photoconsistency(&ds, &gt, 1, 0, 0.05);
    let frac = (c01 + c10) as f64 / (t01 + t10) as f64;
    Outcome {
        pass: worst_id < 1e-9 && worst_rigid < 1e-9 && worst_stereo < 1e-9 && frac >= 0.99,
        detail: format!(
            "identity {worst_id:.1e}, rigid {worst_rigid:.1e}, stereo {worst_stereo:.1e}; photoconsistent {:.2}% of {} covisible pixels",
            100.0 * frac,
            t01 + t10
        ),
    }
}

fn criterion_4() -> Outcome {
    let base = GridConfig {
        base_res: 16,
        downsample_ratio: 2,
        num_coarse_levels: 3,
        sh_degree: 1,
        bbox_min: [-1.0, -0.5, 0.0],
        bbox_max: [1.0, 1.5, 3.0],
        density_scale: 1.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut f = VoxelField::<f64>::constant(base.clone(), 0.0, 0.0).expect("field");
    f.density_raw.iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
    f.appearance_raw.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
    let h = base.cell_size();
    let ch = base.appearance_channels();
    let mut worst: f64 = 0.0;
    let mut leaks = 0;
    for level in 0..=base.num_coarse_levels {
        let stride = base.downsample_ratio.pow(level as u32);
        let m = base.base_res / stride;
        // standalone grid whose nodes sit where the strided nodes sit
        let mut cfg = base.clone();
        cfg.base_res = m;
        cfg.num_coarse_levels = 0;
        for a in 0..3 {
            cfg.bbox_min[a] = base.bbox_min[a] + 0.5 * h[a] - 0.5 * h[a] * stride as f64;
            cfg.bbox_max[a] = cfg.bbox_min[a] + h[a] * (base.base_res) as f64;
        }
        let mut copy = VoxelField::<f64>::constant(cfg.clone(), 0.0, 0.0).expect("copy");
        for z in 0..m {
            for y in 0..m {
                for x in 0..m {
                    let src = base.node_index(x * stride, y * stride, z * stride);
                    let dst = cfg.node_index(x, y, z);
                    copy.density_raw[dst] = f.density_raw[src];
                    copy.appearance_raw[dst * ch..(dst + 1) * ch].copy_from_slice(&f.appearance_raw[src * ch..(src + 1) * ch]);
                }
            }
        }
        let lo: Vec<f64> = (0..3).map(|a| base.bbox_min[a].max(cfg.bbox_min[a])).collect();
        let hi: Vec<f64> = (0..3).map(|a| base.bbox_max[a].min(cfg.bbox_max[a])).collect();
        for _ in 0..2000 {
            let p = Point3::new(rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1]), rng.gen_range(lo[2]..hi[2]));
            let dir = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), 1.0);
            let a = f.sample_density(&p, level).expect("sample");
            let b = copy.sample_density(&p, 0).expect("sample");
            worst = worst.max((a - b).abs());
            let ca = f.sample_appearance(&p, &dir, level).expect("sample");
            let cb = copy.sample_appearance(&p, &dir, 0).expect("sample");
            for k in 0..3 {
                worst = worst.max((ca[k] - cb[k]).abs());
            }
        }
        // gradient support of rays rendered at this scale
        let mut g = FieldGrad::zeros(&base);
        for _ in 0..50 {
            let origin = Point3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-0.5..1.5), -1.0);
            let ray = Ray {
                origin,
                dir: Vector3::new(rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), 1.0).normalize(),
                near: 0.5,
                far: 5.0,
            };
            let s = sample_points(&ray, 32, None).expect("samples");
            let (o, t) = render_ray(&f, &ray, level, &s, &RenderOptions::default()).expect("render");
            let up = RenderGrad {
                color: [1.0, -0.5, 0.25],
                depth: 0.3,
                opacity: -0.7,
                weights: None,
            };
            render_ray_backward(&f, &ray, level, &s, &o, &t, &up, &RenderOptions::default(), &mut g).expect("backward");
        }
        for i in 0..base.num_nodes() {
            let [x, y, z] = base.node_coords(i);
            let on = x % stride == 0 && y % stride == 0 && z % stride == 0;
            let touched = g.density[i] != 0.0 || g.appearance[i * ch..(i + 1) * ch].iter().any(|v| *v != 0.0);
            if touched && !on {
                leaks += 1;
            }
        }
        if g.max_abs() == 0.0 {
            leaks += 1;
        }
    }
    Outcome {
        pass: worst <= 1e-12 && leaks == 0,
        detail: format!("strided vs materialized max diff {worst:.1e} over 4 scales, {leaks} off-sublattice gradient entries"),
    }
}

/// Every pixel of the window around `(x, y)` is covisible and lies within
/// 0.1 of the center depth, so the window warps as one surface.
fn window_unoccluded(x: usize, y: usize, r: usize, di: &DepthMap, ci: &Camera, dj: &DepthMap, cj: &Camera) -> bool {
    let d = di.get(x, y) as f64;
    if !d.is_finite() || x < r || y < r || x + r >= ci.width || y + r >= ci.height {
        return false;
    }
    (y - r..=y + r).all(|yy| {
        (x - r..=x + r).all(|xx| {
            let dn = di.get(xx, yy) as f64;
            (dn - d).abs() < 0.1 && covisible((xx, yy), di, ci, dj, cj, 0.02).is_some()
        })
    })
}

fn criterion_5() -> Outcome {
    let (ds, gt) = generate_fixture(&FixtureOptions::default()).expect("fixture");
    let cfg = AdaptConfig::default();
    let (ci, cj) = (&ds.cameras[0], &ds.cameras[1]);
    let mut tested = 0;
    let mut hits = 0;
    for y in 0..ci.height {
        for x in 0..ci.width {
            let d = gt[0].get(x, y) as f64;
            if !window_unoccluded(x, y, cfg.radius(), &gt[0], ci, &gt[1], cj) {
                continue;
            }
            let Some(src) = image_patch(&ds.images[0], x, y, cfg.patch_size) else {
                continue;
            };
            let planted = (x + 2 * y) % 3;
            let depths: Vec<f64> = (0..3)
                .map(|l| match (l as i64 - planted as i64).rem_euclid(3) {
                    0 => d,
                    1 => d - 0.3,
                    _ => d + 0.3,
                })
                .collect();
            let px = PixelCoord::new(x as f64, y as f64);
            if depths.iter().any(|&dl| !reproject(px, dl, ci, cj, cfg.radius() as f64).valid) {
                continue;
            }
            let rec = adapt_from_depths(&depths, SourcePatches::Shared(&src), px, ci, cj, &ds.images[1], &cfg);
            tested += 1;
            if rec.selected == planted && rec.pseudo_depth == d {
                hits += 1;
            }
        }
    }
    let rate = hits as f64 / tested.max(1) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut monotone = true;
    let mut invariant = true;
    for _ in 0..10_000 {
        let errors: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..1.0)).collect();
        let depths = [1.0, 2.0, 3.0];
        let k = rng.gen_range(1e-3..1e3);
        let scaled: Vec<f64> = errors.iter().map(|e| e * k).collect();
        invariant &= select_scale(&errors) == select_scale(&scaled);
        let t1 = rng.gen_range(0.0..1.0);
        let t2 = t1 + rng.gen_range(0.0..1.0);
        let a = record_from_errors(errors.clone(), &depths, t1);
        let b = record_from_errors(errors, &depths, t2);
        monotone &= !a.valid || b.valid;
    }
    Outcome {
        pass: rate >= 0.95 && monotone && invariant,
        detail: format!(
            "planted scale selected for {:.2}% of {tested} unoccluded rays; masking monotone {monotone}; argmin scale-invariant {invariant}",
            100.0 * rate
        ),
    }
}

#[derive(Clone, Copy, Debug)]
enum Variant {
    Full,
    FullMono,
    NoGeo,
    SingleScale,
}

impl Variant {
    fn overrides(self) -> &'static [&'static str] {
        match self {
            Variant::Full => &[],
            Variant::FullMono => &["data.use_mono_depth=true"],
            Variant::NoGeo => &["loss.geo=0"],
            Variant::SingleScale => &["grid.num_coarse_levels=0"],
        }
    }
}

#[derive(Clone, Debug)]
struct RunResult {
    psnr: f64,
    depth_mae: f64,
    coarse_early: f64,
    coarse_final: f64,
}

struct Runs {
    full: Vec<RunResult>,
    mono: Vec<RunResult>,
    no_geo: Vec<RunResult>,
    single: Vec<RunResult>,
    seconds: f64,
}

fn train_variant(v: Variant, seed: u64, ds: &frugal_core::data::SceneDataset, gt: &[DepthMap]) -> RunResult {
    let mut overrides: Vec<String> = v.overrides().iter().map(|s| s.to_string()).collect();
    overrides.push(format!("train.seed={seed}"));
    overrides.push("train.log_every=0".into());
    let cfg = Config::load(Some(&fixture_config_path()), &overrides).expect("config");
    let ctx = TrainContext::new(ds, &cfg).expect("context");
    let mut tr = Trainer::new(cfg.clone()).expect("trainer");
    let coarsest = cfg.grid.num_coarse_levels;
    let mut coarse_early = f64::NAN;
    while tr.iteration < cfg.train.iterations {
        tr.step(&ctx).expect("step");
        if tr.iteration == 100 {
            coarse_early = tr.selection_stats(&ctx, 4).expect("stats").fraction(coarsest);
        }
    }
    let coarse_final = tr.selection_stats(&ctx, 4).expect("stats").fraction(coarsest);
    let rep = evaluate_views(&tr.field, ds, &ds.test, Some(gt), &cfg).expect("eval");
    let r = RunResult {
        psnr: rep.mean_psnr,
        depth_mae: rep.mean_depth_mae.expect("gt depth given"),
        coarse_early,
        coarse_final,
    };
    let _ = writeln!(std::io::stderr(), "  run {v:?} seed {seed}: {r:?}");
    r
}

fn runs() -> &'static Runs {
    static RUNS: OnceLock<Runs> = OnceLock::new();
    RUNS.get_or_init(|| {
        let t0 = Instant::now();
        let (ds, gt) = generate_fixture(&FixtureOptions::default()).expect("fixture");
        let all = |v: Variant| SEEDS.iter().map(|&s| train_variant(v, s, &ds, &gt)).collect::<Vec<_>>();
        let full = all(Variant::Full);
        let mono = all(Variant::FullMono);
        let no_geo = all(Variant::NoGeo);
        let single = all(Variant::SingleScale);
        Runs {
            full,
            mono,
            no_geo,
            single,
            seconds: t0.elapsed().as_secs_f64(),
        }
    })
}

fn med(v: &[RunResult], f: impl Fn(&RunResult) -> f64) -> f64 {
    median(v.iter().map(f).collect())
}

fn criterion_6() -> Outcome {
    let r = runs();
    let full = med(&r.full, |x| x.psnr);
    let no_geo = med(&r.no_geo, |x| x.psnr);
    let single = med(&r.single, |x| x.psnr);
    Outcome {
        pass: full > no_geo && full > single && full >= PSNR_FLOOR_DB,
        detail: format!(
            "median held-out PSNR full {full:.2} dB, without geo {no_geo:.2} dB, single scale {single:.2} dB, floor {PSNR_FLOOR_DB} dB; {:.0}s per run",
            r.seconds / 12.0
        ),
    }
}

fn criterion_7() -> Outcome {
    let r = runs();
    let mono = med(&r.mono, |x| x.depth_mae);
    let geo = med(&r.full, |x| x.depth_mae);
    let no_geo = med(&r.no_geo, |x| x.depth_mae);
    Outcome {
        pass: mono <= geo && geo < no_geo,
        detail: format!("median depth MAE geo+mono {mono:.4}, geo only {geo:.4}, no geo {no_geo:.4}"),
    }
}

fn criterion_8() -> Outcome {
    let r = runs();
    let early = med(&r.full, |x| x.coarse_early);
    let late = med(&r.full, |x| x.coarse_final);
    Outcome {
        pass: early > late,
        detail: format!("median coarsest-scale selection fraction {early:.3} at iteration 100, {late:.3} at 2000"),
    }
}

fn criterion_9() -> Outcome {
    let (ds, _) = generate_fixture(&FixtureOptions {
        width: 32,
        height: 32,
        sparse_per_view: 16,
        ..Default::default()
    })
    .expect("fixture");
    let overrides = [
        "grid.base_res=16",
        "grid.downsample_ratio=2",
        "grid.bbox_min=[-1.5,-1.5,-1.5]",
        "grid.bbox_max=[1.5,1.5,1.5]",
        "train.batch_train=128",
        "train.batch_novel=32",
        "train.seed=9",
    ]
    .map(String::from);
    let cfg = Config::load(None, &overrides).expect("config");
    let ctx = TrainContext::new(&ds, &cfg).expect("context");
    let run = || {
        let mut t = Trainer::new(cfg.clone()).expect("trainer").with_threads(1).expect("pool");
        for _ in 0..10 {
            t.step(&ctx).expect("step");
        }
        t
    };
    let (a, b) = (run(), run());
    let bits = |f: &VoxelField<f32>| f.density_raw.iter().chain(&f.appearance_raw).map(|v| v.to_bits()).collect::<Vec<_>>();
    let same = bits(&a.field) == bits(&b.field) && a.adam == b.adam;
    let bytes = encode(&cfg, a.iteration, &a.field, &a.adam).expect("encode");
    let ck = decode(&bytes).expect("decode");
    let again = encode(&ck.config, ck.iteration, &ck.field, &ck.adam).expect("encode");
    let dir = tempfile::tempdir().expect("tempdir");
    let p1 = dir.path().join("a.bin");
    let p2 = dir.path().join("b.bin");
    frugal_core::checkpoint::save_checkpoint(&p1, &cfg, a.iteration, &a.field, &a.adam).expect("save");
    let l = frugal_core::checkpoint::load_checkpoint(&p1).expect("load");
    frugal_core::checkpoint::save_checkpoint(&p2, &l.config, l.iteration, &l.field, &l.adam).expect("save");
    let files_equal = std::fs::read(&p1).expect("read") == std::fs::read(&p2).expect("read");
    Outcome {
        pass: same && bytes == again && files_equal,
        detail: format!("10-step single-worker runs bit-identical {same}; checkpoint round trip byte-identical {}", bytes == again && files_equal),
    }
}

#[test]
fn acceptance() {
    let criteria: [(u32, &str, fn() -> Outcome); 9] = [
        (1, "gradient integrity", criterion_1),
        (2, "rendering oracle", criterion_2),
        (3, "reprojection oracle", criterion_3),
        (4, "weight sharing", criterion_4),
        (5, "adaptation correctness", criterion_5),
        (6, "ablation ordering", criterion_6),
        (7, "depth error ordering", criterion_7),
        (8, "frequency adaptation trend", criterion_8),
        (9, "determinism and persistence", criterion_9),
    ];
    let mut failed = Vec::new();
    for (id, name, f) in criteria {
        let t = Instant::now();
        let o = f();
        report(id, name, &o, t.elapsed().as_secs_f64());
        if !o.pass {
            failed.push(id);
        }
    }
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
