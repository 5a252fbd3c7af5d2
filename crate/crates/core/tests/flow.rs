use das::flow::{partition_samples, project, BoundedMap, Cutoff, FlowModel, FlowSpec, Frame};
use das::problems::BoxDomain;
use das::{Error, Mat};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn random_flow(domain: BoxDomain, layers: usize, k: usize, seed: u64, amp: f64) -> FlowModel {
    let spec = FlowSpec { layers, k_blocks: k, width: 6, map: BoundedMap::default() };
    let mut f = FlowModel::new(domain, spec, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in f.params_mut() {
        *p += amp * rng.sample::<f64, _>(StandardNormal);
    }
    f
}

fn interior_points(flow: &FlowModel, n: usize, seed: u64) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    flow.domain().sample_uniform(n, &mut rng)
}

#[test]
fn forward_then_inverse_recovers_points() {
    for (d, layers, k) in [(2, 6, 1), (3, 6, 3), (5, 6, 2)] {
        let dom = BoxDomain::new((0..d).map(|i| -1.0 - i as f64).collect(), (0..d).map(|i| 1.0 + 0.5 * i as f64).collect()).unwrap();
        let flow = random_flow(dom, layers, k, d as u64, 0.1);
        let x = interior_points(&flow, 10_000, 1);
        let (z, _) = flow.forward(&x).unwrap();
        let back = flow.inverse(&z).unwrap().points;
        let err = x.as_slice().iter().zip(back.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-8, "d={d}: round-trip error {err}");
    }
}

/// `log |det ∂z/∂x|` by central differences and LU elimination.
fn fd_log_det(flow: &FlowModel, x: &[f64]) -> f64 {
    let d = x.len();
    let h = 1e-6;
    let mut jac = vec![vec![0.0; d]; d];
    for j in 0..d {
        let mut p = x.to_vec();
        p[j] += h;
        let (zp, _) = flow.forward(&Mat::from_rows(&[&p], d)).unwrap();
        p[j] -= 2.0 * h;
        let (zm, _) = flow.forward(&Mat::from_rows(&[&p], d)).unwrap();
        for i in 0..d {
            jac[i][j] = (zp.get(0, i) - zm.get(0, i)) / (2.0 * h);
        }
    }
    let mut logdet = 0.0;
    for c in 0..d {
        let piv = (c..d).max_by(|&a, &b| jac[a][c].abs().total_cmp(&jac[b][c].abs())).unwrap();
        jac.swap(c, piv);
        logdet += jac[c][c].abs().ln();
        for r in c + 1..d {
            let f = jac[r][c] / jac[c][c];
            for k in c..d {
                jac[r][k] -= f * jac[c][k];
            }
        }
    }
    logdet
}

#[test]
fn log_det_matches_numerical_jacobian() {
    for (d, k) in [(2, 1), (3, 2)] {
        let flow = random_flow(BoxDomain::cube(d, -1.0, 1.0), 4, k, 7, 0.3);
        let x = interior_points(&flow, 20, 3);
        let (_, ld) = flow.forward(&x).unwrap();
        for (r, p) in x.iter_rows().enumerate() {
            let fd = fd_log_det(&flow, p);
            assert!((ld[r] - fd).abs() < 1e-5 * fd.abs().max(1.0), "d={d}: {} vs {fd}", ld[r]);
        }
    }
}

#[test]
fn sampled_log_density_matches_direct_evaluation() {
    let flow = random_flow(BoxDomain::new(vec![0.0, -2.0], vec![3.0, 2.0]).unwrap(), 6, 1, 2, 0.2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let s = flow.sample(500, &mut rng).unwrap();
    let inside: Vec<usize> = (0..500).filter(|&i| flow.domain().contains(s.points.row(i))).collect();
    assert!(inside.len() > 400);
    let lp = flow.log_density(&s.points.select_rows(&inside)).unwrap();
    for (k, &i) in inside.iter().enumerate() {
        assert!((lp[k] - s.log_density[i]).abs() < 1e-7, "{} vs {}", lp[k], s.log_density[i]);
    }
}

fn quadrature(flow: &FlowModel, n: usize) -> f64 {
    let b = flow.frame().padded_box();
    let d = flow.dim();
    let h: Vec<f64> = (0..d).map(|j| (b.hi[j] - b.lo[j]) / n as f64).collect();
    let total = n.pow(d as u32);
    let x = Mat::from_fn(total, d, |r, j| {
        let idx = (r / n.pow((d - 1 - j) as u32)) % n;
        b.lo[j] + h[j] * (idx as f64 + 0.5)
    });
    flow.density(&x).unwrap().iter().sum::<f64>() * h.iter().product::<f64>()
}

#[test]
fn density_integrates_to_one_over_the_padded_box() {
    for (d, n) in [(1, 20_000), (2, 600)] {
        // Larger perturbations pile mass into the δ-shell at the edge of B,
        // which a uniform midpoint grid cannot resolve.
        for seed in 0..4 {
            let dom = BoxDomain::new(vec![-1.0; d], vec![2.0; d]).unwrap();
            let flow = random_flow(dom, 4, 1, seed, 0.05);
            let mass = quadrature(&flow, n);
            assert!((mass - 1.0).abs() < 1e-2, "d={d} seed {seed}: mass {mass}");
        }
    }
}

#[test]
fn identity_flow_marginals_pass_kolmogorov_smirnov() {
    // With identity couplings each reference coordinate is h tanh(Z/s), so
    // its CDF is Φ(s atanh(t/h)).
    let map = BoundedMap::default();
    let flow = FlowModel::new(BoxDomain::cube(2, -1.0, 1.0), FlowSpec { layers: 4, k_blocks: 1, width: 4, map }, 0).unwrap();
    let n = 4000;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let s = flow.sample(n, &mut rng).unwrap();
    let h = map.half_width();
    for axis in 0..2 {
        let mut t: Vec<f64> = s.points.iter_rows().map(|p| flow.frame().to_reference(p)[axis]).collect();
        t.sort_by(f64::total_cmp);
        let ks = t
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let f = normal_cdf(map.scale * (v / h).atanh());
                (f - i as f64 / n as f64).abs().max(((i + 1) as f64 / n as f64 - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 1.63 / (n as f64).sqrt(), "axis {axis}: KS statistic {ks}");
    }
}

/// Abramowitz-Stegun 7.1.26 erf, accurate to about 1e-7.
fn normal_cdf(x: f64) -> f64 {
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.3275911 * z);
    let poly = t * (0.254829592 + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    let erf = 1.0 - poly * (-z * z).exp();
    0.5 * (1.0 + erf.copysign(x))
}

#[test]
fn identity_flow_density_matches_closed_form() {
    let map = BoundedMap::default();
    let dom = BoxDomain::new(vec![0.0, 0.0], vec![2.0, 4.0]).unwrap();
    let flow = FlowModel::new(dom, FlowSpec { layers: 2, k_blocks: 1, width: 3, map }, 0).unwrap();
    let x = [0.5, 3.0];
    let r = [0.5 / 2.0 - 0.5, 3.0 / 4.0 - 0.5];
    let a = 1.0 + map.delta;
    let expected: f64 = r
        .iter()
        .map(|&t| {
            let y = 0.5 * map.scale * ((a + 2.0 * t) / (a - 2.0 * t)).ln();
            let dy = 2.0 * map.scale * a / (a * a - 4.0 * t * t);
            (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt() * dy
        })
        .product::<f64>()
        / 8.0;
    assert!((flow.density_at(&x).unwrap() - expected).abs() < 1e-13 * expected);
}

#[test]
fn cutoff_values() {
    let c = Cutoff { delta: 0.01 };
    assert_eq!(c.eval(&[0.0, 0.0]), 1.0);
    assert_eq!(c.eval(&[0.5, -0.5]), 1.0);
    assert!((c.eval(&[0.5025, 0.0]) - 0.5).abs() < 1e-12);
    assert!((c.eval(&[0.5025, -0.5025]) - 0.25).abs() < 1e-12);
    assert_eq!(c.eval(&[0.506, 0.0]), 0.0);
    assert_eq!(c.grad(&[0.1, 0.2]), vec![0.0, 0.0]);
    let g = c.grad(&[0.5025, 0.0]);
    assert!((g[0] + 200.0).abs() < 1e-9 && g[1] == 0.0);

    let frame = Frame::new(BoxDomain::cube(2, -1.0, 1.0), BoundedMap::default());
    assert_eq!(frame.cutoff(&[1.0, 1.0]), 1.0);
    assert!((frame.cutoff(&[1.005, 0.0]) - 0.5).abs() < 1e-9);
    assert_eq!(frame.cutoff(&[1.2, 0.0]), 0.0);
    assert!((frame.cutoff_grad(&[1.005, 0.0])[0] + 100.0).abs() < 1e-6);
}

#[test]
fn projection_examples() {
    let dom = BoxDomain::cube(2, -1.0, 1.0);
    assert_eq!(project(&dom, &[1.004, 0.3]), vec![1.0, 0.3]);
    assert_eq!(project(&dom, &[-1.01, -1.002]), vec![-1.0, -1.0]);
    assert_eq!(project(&dom, &[0.2, 0.3]), vec![0.2, 0.3]);
    let pts = Mat::from_rows(&[[0.0, 0.0], [1.003, 0.5], [0.9, -0.9], [-1.001, 1.002]], 2);
    let (inside, projected) = partition_samples(&dom, &pts);
    assert_eq!(inside, vec![0, 2]);
    assert_eq!(projected.row(0), &[1.0, 0.5]);
    assert_eq!(projected.row(1), &[-1.0, 1.0]);
    assert!(projected.iter_rows().all(|p| dom.on_boundary(p)));
}

#[test]
fn points_outside_the_padded_box_are_rejected() {
    let flow = random_flow(BoxDomain::cube(2, -1.0, 1.0), 2, 1, 0, 0.1);
    let err = flow.log_density(&Mat::from_rows(&[[1.2, 0.0]], 2)).unwrap_err();
    assert!(matches!(err, Error::Domain(_)));
    assert_eq!(flow.density_at(&[1.2, 0.0]).unwrap(), 0.0);
    assert!(flow.density_at(&[1.004, 0.0]).unwrap() > 0.0);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let flow = random_flow(BoxDomain::new(vec![-1.0, 0.0, 2.0], vec![1.0, 1.0, 5.0]).unwrap(), 5, 3, 4, 0.2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flow.json");
    flow.save(&path).unwrap();
    let back = FlowModel::load(&path).unwrap();
    assert_eq!(back, flow);
    let x = interior_points(&flow, 10, 0);
    assert_eq!(back.log_density(&x).unwrap(), flow.log_density(&x).unwrap());
    assert!(FlowModel::from_json("{}").is_err());
}

#[test]
fn same_seed_gives_same_draws() {
    let flow = random_flow(BoxDomain::cube(2, -1.0, 1.0), 4, 1, 9, 0.3);
    let a = flow.sample(50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let b = flow.sample(50, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_eq!(a.points, b.points);
    assert_eq!(a.log_density, b.log_density);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn round_trip_holds_for_random_parameters(seed in 0u64..10_000, amp in 0.0f64..0.15, d in 1usize..5) {
        // Latent-to-physical is ill-conditioned next to the edge of B, where
        // nearby latents round to the same point, so the check runs from Ω.
        let flow = random_flow(BoxDomain::cube(d, -1.0, 1.0), 4, d.min(2), seed, amp);
        let x = interior_points(&flow, 30, seed);
        let (z, _) = flow.forward(&x).unwrap();
        let back = flow.inverse(&z).unwrap().points;
        for (a, b) in x.as_slice().iter().zip(back.as_slice()) {
            prop_assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn bounded_map_inverts(x in -0.5049f64..0.5049, delta in 0.001f64..0.5, s in 0.5f64..4.0) {
        let m = BoundedMap::new(delta, s).unwrap();
        let x = x * (1.0 + delta) / 1.01;
        let y = m.forward_1d(x).unwrap();
        prop_assert!((m.inverse_1d(y) - x).abs() < 1e-12);
        prop_assert!((m.log_derivative_at_image(y) - m.derivative_1d(x).ln()).abs() < 1e-9);
    }
}
