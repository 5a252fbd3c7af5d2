use das::autodiff::{Tape, Var};
use das::{Mat, SurrogateNet};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Builds a scalar loss from a parameter vector on a fresh tape.
type Build = fn(&mut Tape, &[f64]) -> Var;

fn value(build: Build, theta: &[f64]) -> f64 {
    let mut t = Tape::new(theta.len());
    let l = build(&mut t, theta);
    t.value(l).item()
}

fn check_op(name: &str, build: Build, theta: &[f64]) {
    let mut t = Tape::new(theta.len());
    let l = build(&mut t, theta);
    let g = t.grad_params(l).unwrap();
    let h = 1e-6;
    for i in 0..theta.len() {
        let mut p = theta.to_vec();
        p[i] += h;
        let up = value(build, &p);
        p[i] -= 2.0 * h;
        let fd = (up - value(build, &p)) / (2.0 * h);
        let scale = fd.abs().max(1.0);
        assert!((g[i] - fd).abs() / scale < 1e-7, "{name}[{i}]: tape {} vs fd {fd}", g[i]);
    }
}

fn theta(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0.2..1.2) * if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

/// Fixed weights so every output entry reaches the loss differently.
fn weighted_sum(t: &mut Tape, v: Var) -> Var {
    let (r, c) = t.value(v).shape();
    let w = t.constant(Mat::from_fn(r, c, |i, j| 0.3 + 0.7 * ((i * c + j) as f64).sin()));
    let p = t.mul(v, w);
    t.sum(p)
}

#[test]
fn every_primitive_matches_finite_differences() {
    let cases: Vec<(&str, Build)> = vec![
        ("matmul", |t, p| {
            let a = t.param(p, 0, 2, 3);
            let b = t.param(p, 6, 3, 2);
            let m = t.matmul(a, b);
            weighted_sum(t, m)
        }),
        ("add_row", |t, p| {
            let a = t.param(p, 0, 3, 2);
            let r = t.param(p, 6, 1, 2);
            let m = t.add_row(a, r);
            let s = t.square(m);
            weighted_sum(t, s)
        }),
        ("add_sub_mul", |t, p| {
            let a = t.param(p, 0, 2, 2);
            let b = t.param(p, 4, 2, 2);
            let s = t.add(a, b);
            let d = t.sub(a, b);
            let m = t.mul(s, d);
            weighted_sum(t, m)
        }),
        ("mul_col", |t, p| {
            let a = t.param(p, 0, 3, 2);
            let c = t.param(p, 6, 3, 1);
            let m = t.mul_col(a, c);
            weighted_sum(t, m)
        }),
        ("scale_offset", |t, p| {
            let a = t.param(p, 0, 2, 3);
            let s = t.scale(a, -1.7);
            let o = t.offset(s, 0.4);
            let q = t.square(o);
            t.mean(q)
        }),
        ("scale_offset_cols", |t, p| {
            let a = t.param(p, 0, 2, 3);
            let s = t.scale_cols(a, &[1.0, -2.0, 0.5]);
            let o = t.offset_cols(s, &[0.1, 0.2, -0.3]);
            let q = t.square(o);
            weighted_sum(t, q)
        }),
        ("tanh", |t, p| {
            let a = t.param(p, 0, 2, 3);
            let m = t.tanh(a);
            weighted_sum(t, m)
        }),
        ("relu", |t, p| {
            let a = t.param(p, 0, 2, 3);
            let m = t.relu(a);
            weighted_sum(t, m)
        }),
        ("exp_log", |t, p| {
            let a = t.param(p, 0, 2, 3);
            let e = t.exp(a);
            let o = t.offset(e, 1.0);
            let l = t.log(o);
            weighted_sum(t, l)
        }),
        ("log_cosh", |t, p| {
            let a = t.param(p, 0, 2, 3);
            let s = t.scale(a, 3.0);
            let m = t.log_cosh(s);
            weighted_sum(t, m)
        }),
        ("row_sum", |t, p| {
            let a = t.param(p, 0, 3, 2);
            let r = t.row_sum(a);
            let q = t.square(r);
            weighted_sum(t, q)
        }),
        ("select_assemble", |t, p| {
            let a = t.param(p, 0, 2, 3);
            let x = t.select_cols(a, &[2, 0]);
            let y = t.select_cols(a, &[1]);
            let tx = t.tanh(x);
            let m = t.assemble_cols(3, &[(tx, &[0, 2][..]), (y, &[1][..])]);
            let q = t.square(m);
            weighted_sum(t, q)
        }),
    ];
    for (i, (name, build)) in cases.into_iter().enumerate() {
        check_op(name, build, &theta(12, i as u64));
    }
}

#[test]
fn input_adjoint_matches_finite_differences() {
    let x0 = Mat::from_vec(2, 2, vec![0.3, -0.4, 1.1, 0.2]);
    let f = |x: &Mat| {
        let mut t = Tape::new(0);
        let v = t.input(x.clone());
        let s = t.tanh(v);
        let q = t.mul(s, v);
        let l = t.sum(q);
        (t, v, l)
    };
    let (t, v, l) = f(&x0);
    let g = t.backward(l).unwrap();
    let gx = g.wrt(v).unwrap();
    for k in 0..4 {
        let mut x = x0.clone();
        x.as_mut_slice()[k] += 1e-6;
        let (tp, _, lp) = f(&x);
        x.as_mut_slice()[k] -= 2e-6;
        let (tm, _, lm) = f(&x);
        let fd = (tp.value(lp).item() - tm.value(lm).item()) / 2e-6;
        assert!((gx.as_slice()[k] - fd).abs() < 1e-8);
    }
}

/// Hyper-dual number `a + b ε₁ + c ε₂ + e ε₁ε₂` with `ε₁² = ε₂² = 0`; the
/// `ε₁ε₂` part of `f(x + ε₁ v + ε₂ v)` is exactly `vᵀ ∇²f v`.
#[derive(Clone, Copy)]
struct HyperDual {
    a: f64,
    b: f64,
    c: f64,
    e: f64,
}

impl HyperDual {
    fn konst(a: f64) -> Self {
        HyperDual { a, b: 0.0, c: 0.0, e: 0.0 }
    }
    fn add(self, o: Self) -> Self {
        HyperDual { a: self.a + o.a, b: self.b + o.b, c: self.c + o.c, e: self.e + o.e }
    }
    fn scale(self, k: f64) -> Self {
        HyperDual { a: k * self.a, b: k * self.b, c: k * self.c, e: k * self.e }
    }
    fn tanh(self) -> Self {
        let t = self.a.tanh();
        let d1 = 1.0 - t * t;
        let d2 = -2.0 * t * d1;
        HyperDual { a: t, b: d1 * self.b, c: d1 * self.c, e: d1 * self.e + d2 * self.b * self.c }
    }
}

/// Straight-line forward pass over the documented parameter layout:
/// per layer, an `n_in x n_out` row-major weight block and then the bias.
fn oracle_forward(sizes: &[usize], params: &[f64], x: &[HyperDual]) -> HyperDual {
    let mut a = x.to_vec();
    let mut off = 0;
    let layers = sizes.len() - 1;
    for l in 0..layers {
        let (n_in, n_out) = (sizes[l], sizes[l + 1]);
        let w = &params[off..off + n_in * n_out];
        let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
        off += n_in * n_out + n_out;
        let z: Vec<HyperDual> = (0..n_out)
            .map(|j| (0..n_in).fold(HyperDual::konst(b[j]), |acc, i| acc.add(a[i].scale(w[i * n_out + j]))))
            .collect();
        a = if l + 1 < layers { z.into_iter().map(HyperDual::tanh).collect() } else { z };
    }
    a[0]
}

fn oracle_jet(sizes: &[usize], params: &[f64], x: &[f64]) -> (f64, Vec<f64>, f64) {
    let d = x.len();
    let mut grad = vec![0.0; d];
    let mut lap = 0.0;
    let mut value = 0.0;
    for k in 0..d {
        let xs: Vec<HyperDual> = (0..d)
            .map(|i| {
                let s = if i == k { 1.0 } else { 0.0 };
                HyperDual { a: x[i], b: s, c: s, e: 0.0 }
            })
            .collect();
        let out = oracle_forward(sizes, params, &xs);
        value = out.a;
        grad[k] = out.b;
        lap += out.e;
    }
    (value, grad, lap)
}

fn random_net(sizes: &[usize], seed: u64) -> SurrogateNet {
    let mut net = SurrogateNet::new(sizes, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let n = net.param_count();
    let p = net.params_mut();
    for v in p.iter_mut().take(n) {
        *v += 0.2 * rng.sample::<f64, _>(StandardNormal);
    }
    net
}

#[test]
fn network_derivatives_match_hyper_dual_oracle() {
    for (d, seed) in [(1, 0), (2, 1), (3, 2), (7, 3)] {
        let sizes = [d, 9, 7, 5, 1];
        let net = random_net(&sizes, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Mat::from_fn(20, d, |_, _| rng.random_range(-1.5..1.5));
        let jet = net.jet_batch(&x).unwrap();
        for (r, p) in x.iter_rows().enumerate() {
            let (v, g, lap) = oracle_jet(&sizes, net.params(), p);
            let tol = |a: f64| 1e-12 * a.abs().max(1.0);
            assert!((jet.value[r] - v).abs() < tol(v));
            assert!((net.eval(p).unwrap() - v).abs() < tol(v));
            assert!((jet.laplacian[r] - lap).abs() < tol(lap), "d={d} row {r}: {} vs {lap}", jet.laplacian[r]);
            assert!((net.laplacian(p).unwrap() - lap).abs() < tol(lap));
            let gi = net.grad_input(p).unwrap();
            for i in 0..d {
                assert!((jet.grad.get(r, i) - g[i]).abs() < tol(g[i]));
                assert!((gi[i] - g[i]).abs() < tol(g[i]));
            }
        }
    }
}

#[test]
fn single_tanh_unit_has_closed_form_laplacian() {
    // u(x) = v tanh(w·x + b): Δu = v |w|² tanh''(w·x + b), zero where the
    // pre-activation vanishes.
    let (w, b, v) = ([0.6, -1.3], 0.25, 2.0);
    let net = SurrogateNet::from_params(&[2, 1, 1], 0, vec![w[0], w[1], b, v, 0.0]).unwrap();
    let ww = w[0] * w[0] + w[1] * w[1];
    for x in [[0.0, 0.0], [0.4, -0.7], [1.0, 1.0]] {
        let z = w[0] * x[0] + w[1] * x[1] + b;
        let t = z.tanh();
        let expected = v * ww * (-2.0 * t * (1.0 - t * t));
        assert!((net.laplacian(&x).unwrap() - expected).abs() < 1e-14);
    }
    let at_root = SurrogateNet::from_params(&[2, 1, 1], 0, vec![w[0], w[1], 0.0, v, 0.0]).unwrap();
    assert_eq!(at_root.laplacian(&[0.0, 0.0]).unwrap(), 0.0);
}

#[test]
fn constant_network_has_zero_derivatives() {
    let sizes = [3, 4, 4, 1];
    let mut net = random_net(&sizes, 5);
    // Zero the output weights; the output is then its bias alone.
    let n = net.param_count();
    let p = net.params_mut();
    for v in &mut p[n - 5..n - 1] {
        *v = 0.0;
    }
    p[n - 1] = 0.75;
    let x = Mat::from_fn(6, 3, |i, j| (i as f64 - 2.5) * 0.3 + j as f64 * 0.1);
    let jet = net.jet_batch(&x).unwrap();
    assert!(jet.value.iter().all(|&v| v == 0.75));
    assert!(jet.grad.as_slice().iter().all(|&g| g == 0.0));
    assert!(jet.laplacian.iter().all(|&l| l == 0.0));
}

/// Mean squared Laplacian plus mean squared value: touches every jet block.
fn jet_loss(net: &SurrogateNet, x: &Mat) -> (f64, Vec<f64>) {
    let mut t = Tape::new(net.param_count());
    let xv = t.constant(x.clone());
    let j = net.on_tape(&mut t, xv, true).unwrap();
    let lap = j.laplacian.unwrap();
    let l2 = t.square(lap);
    let a = t.mean(l2);
    let g0 = t.square(j.grad[0]);
    let b = t.mean(g0);
    let v2 = t.square(j.value);
    let c = t.mean(v2);
    let ab = t.add(a, b);
    let loss = t.add(ab, c);
    (t.value(loss).item(), t.grad_params(loss).unwrap())
}

#[test]
fn tape_replay_matches_direct_jet_and_parameter_fd() {
    let net = random_net(&[2, 6, 6, 1], 11);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = Mat::from_fn(15, 2, |_, _| rng.random_range(-1.0..1.0));

    let jet = net.jet_batch(&x).unwrap();
    let mut t = Tape::new(net.param_count());
    let xv = t.constant(x.clone());
    let tj = net.on_tape(&mut t, xv, true).unwrap();
    assert_eq!(t.value(tj.value).as_slice(), &jet.value[..]);
    assert_eq!(t.value(tj.laplacian.unwrap()).as_slice(), &jet.laplacian[..]);

    // Replaying the same recording gives bit-identical gradients.
    let (v1, g1) = jet_loss(&net, &x);
    let (v2, g2) = jet_loss(&net, &x);
    assert_eq!(v1.to_bits(), v2.to_bits());
    assert_eq!(g1, g2);

    let h = 1e-6;
    for i in 0..net.param_count() {
        let mut p = net.clone();
        p.params_mut()[i] += h;
        let up = jet_loss(&p, &x).0;
        p.params_mut()[i] -= 2.0 * h;
        let fd = (up - jet_loss(&p, &x).0) / (2.0 * h);
        assert!((g1[i] - fd).abs() < 1e-6 * fd.abs().max(1.0), "param {i}: {} vs {fd}", g1[i]);
    }
}

proptest! {
    #[test]
    fn gradients_are_linear_in_the_loss(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let th = theta(6, seed);
        let build = |t: &mut Tape, ka: f64, kb: f64| {
            let x = t.param(&th, 0, 2, 3);
            let f = t.tanh(x);
            let f = t.sum(f);
            let g = t.square(x);
            let g = t.exp(g);
            let g = t.mean(g);
            let fa = t.scale(f, ka);
            let gb = t.scale(g, kb);
            t.add(fa, gb)
        };
        let grad = |ka, kb| {
            let mut t = Tape::new(6);
            let l = build(&mut t, ka, kb);
            t.grad_params(l).unwrap()
        };
        let (gf, gg, gab) = (grad(1.0, 0.0), grad(0.0, 1.0), grad(a, b));
        for i in 0..6 {
            let lin = a * gf[i] + b * gg[i];
            prop_assert!((gab[i] - lin).abs() <= 1e-12 * lin.abs().max(1.0));
        }
    }
}
