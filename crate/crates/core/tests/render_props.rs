use frugal_core::field::{FieldGrad, GridConfig, VoxelField};
use frugal_core::geometry::{Point3, Ray};
use frugal_core::render::{render_ray, render_ray_backward, sample_points, RenderGrad, RenderOptions};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(res: usize, levels: usize, seed: u64) -> VoxelField<f64> {
    let cfg = GridConfig {
        base_res: res,
        downsample_ratio: 2,
        num_coarse_levels: levels,
        sh_degree: 1,
        density_scale: 4.0,
        ..Default::default()
    };
    let mut f = VoxelField::<f64>::constant(cfg, 0.0, 0.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    f.density_raw.iter_mut().for_each(|x| *x = rng.gen_range(-3.0..3.0));
    f.appearance_raw.iter_mut().for_each(|x| *x = rng.gen_range(-2.0..2.0));
    f
}

fn random_ray(rng: &mut ChaCha8Rng) -> Ray {
    let origin = Point3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
    let target = Point3::new(rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8), rng.gen_range(-0.8..0.8));
    let dir = (target - origin).normalize();
    let near = rng.gen_range(0.0..0.5);
    Ray {
        origin,
        dir,
        near,
        far: near + rng.gen_range(0.5..4.0),
    }
}

#[test]
fn weights_bounded_and_transmittance_monotone_over_many_rays() {
    let f = random_field(8, 2, 11);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let opts = RenderOptions::default();
    for r in 0..100_000 {
        let ray = random_ray(&mut rng);
        let n = rng.gen_range(2..24);
        let level = r % 3;
        let s = sample_points(&ray, n, Some(r as u64)).unwrap();
        let (out, trace) = render_ray(&f, &ray, level, &s, &opts).unwrap();
        let sum: f64 = out.weights.iter().sum();
        assert!(sum <= 1.0 + 1e-12, "ray {r}: sum of weights {sum}");
        assert!(out.weights.iter().all(|w| *w >= 0.0));
        assert!((sum - out.opacity).abs() < 1e-12);
        assert!(trace.transmittance[0] <= 1.0);
        for w in trace.transmittance.windows(2) {
            assert!(w[1] <= w[0], "ray {r}: transmittance increased");
        }
    }
}

/// Adjoint of a fixed linear functional of all ray outputs against central
/// differences, over at least a hundred (parameter, ray) pairs.
#[test]
fn backward_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let opts = RenderOptions {
        background: Some([0.2, 0.5, 0.9]),
    };
    let mut pairs = 0;
    let mut worst: f64 = 0.0;
    for trial in 0..40 {
        let f = random_field(6, 1, 100 + trial);
        let ray = random_ray(&mut rng);
        let level = (trial % 2) as usize;
        let s = sample_points(&ray, 16, None).unwrap();
        let up = RenderGrad {
            color: [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            depth: rng.gen_range(-1.0..1.0),
            opacity: rng.gen_range(-1.0..1.0),
            weights: Some((0..16).map(|_| rng.gen_range(-1.0..1.0)).collect()),
        };
        let objective = |f: &VoxelField<f64>| {
            let (o, _) = render_ray(f, &ray, level, &s, &opts).unwrap();
            let mut v = o.depth * up.depth + o.opacity * up.opacity;
            for k in 0..3 {
                v += o.color[k] * up.color[k];
            }
            for (w, g) in o.weights.iter().zip(up.weights.as_ref().unwrap()) {
                v += w * g;
            }
            v
        };
        let (out, trace) = render_ray(&f, &ray, level, &s, &opts).unwrap();
        let mut grad = FieldGrad::zeros(&f.config);
        render_ray_backward(&f, &ray, level, &s, &out, &trace, &up, &opts, &mut grad).unwrap();
        let nd = f.density_raw.len();
        let touched: Vec<usize> = (0..nd + f.appearance_raw.len())
            .filter(|&i| if i < nd { grad.density[i] != 0.0 } else { grad.appearance[i - nd] != 0.0 })
            .collect();
        for &i in touched.iter().take(8) {
            let h = 1e-5;
            let mut fp = f.clone();
            let mut fm = f.clone();
            let (a, p, m) = if i < nd {
                fp.density_raw[i] += h;
                fm.density_raw[i] -= h;
                (grad.density[i], &fp, &fm)
            } else {
                fp.appearance_raw[i - nd] += h;
                fm.appearance_raw[i - nd] -= h;
                (grad.appearance[i - nd], &fp, &fm)
            };
            let fd = (objective(p) - objective(m)) / (2.0 * h);
            let err = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-4 * grad.max_abs());
            worst = worst.max(err);
            pairs += 1;
        }
    }
    assert!(pairs >= 100, "only {pairs} pairs compared");
    assert!(worst < 1e-5, "worst relative error {worst:e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Appearance behind an opaque slab never reaches the pixel.
    #[test]
    fn permuting_zero_weight_appearance_keeps_color(seed in 0u64..1000, n in 8usize..40) {
        let mut f = random_field(4, 0, seed);
        let res = f.config.base_res;
        for y in 0..res {
            for x in 0..res {
                let i = f.config.node_index(x, y, 0);
                f.density_raw[i] = 1e5;
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ray = Ray {
            origin: Point3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), -2.0),
            dir: Point3::new(0.0, 0.0, 1.0),
            near: 0.5,
            far: 3.5,
        };
        let s = sample_points(&ray, n, None).unwrap();
        let (a, _) = render_ray(&f, &ray, 0, &s, &RenderOptions::default()).unwrap();
        // nodes at z index >= 2 only reach samples with z > -0.25
        for (w, t) in a.weights.iter().zip(&s.t) {
            if ray.origin.z + t > -0.25 {
                prop_assert_eq!(*w, 0.0);
            }
        }
        let mut g = f.clone();
        let c = g.config.appearance_channels();
        let back: Vec<usize> = (0..g.config.num_nodes())
            .filter(|&i| g.config.node_coords(i)[2] >= 2)
            .collect();
        let mut shuffled = back.clone();
        shuffled.rotate_left(1 + (seed as usize) % (back.len() - 1));
        for (&dst, &src) in back.iter().zip(&shuffled) {
            for k in 0..c {
                g.appearance_raw[dst * c + k] = f.appearance_raw[src * c + k];
            }
        }
        prop_assert_ne!(&g.appearance_raw, &f.appearance_raw);
        let (b, _) = render_ray(&g, &ray, 0, &s, &RenderOptions::default()).unwrap();
        prop_assert_eq!(a.color, b.color);
    }

    #[test]
    fn opacity_monotone_in_density_scale(seed in 0u64..1000, k in 1.0f64..4.0) {
        let f = random_field(4, 0, seed);
        let mut g = f.clone();
        g.config.density_scale *= k;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 7);
        let ray = random_ray(&mut rng);
        let s = sample_points(&ray, 12, None).unwrap();
        let (a, _) = render_ray(&f, &ray, 0, &s, &RenderOptions::default()).unwrap();
        let (b, _) = render_ray(&g, &ray, 0, &s, &RenderOptions::default()).unwrap();
        prop_assert!(b.opacity >= a.opacity - 1e-12);
    }
}
