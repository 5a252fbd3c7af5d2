use std::path::PathBuf;

use das::driver::{
    compare, comparison_csv, density_diagnostic, grid_mse, load_run, midpoint_grid, origin_grid, relative_error, resolve_config,
    run, tail_probability, top_k_by_magnitude, write_run_dir, MetricRow, RunConfig, RunDir, RunRecord, Strategy, COMPARE_HEADER,
    METRICS_HEADER,
};
use das::problems::{BoxDomain, Problem};
use das::{Error, Mat, SurrogateNet};
use proptest::prelude::*;
use proptest::strategy::Strategy as _;

const TINY: &[&str] = &[
    "net.depth=2",
    "net.width=8",
    "flow.layers=2",
    "flow.width=8",
    "train.epochs=3",
    "train.batch=32",
    "sampling.n_interior=64",
    "sampling.n_boundary=32",
    "sampling.n_adaptive=3",
    "eval.every=2",
    "eval.grid_n=16",
    "eval.kl_grid=8",
    "eval.local_n=5",
];

fn tiny(strategy: &str) -> RunConfig {
    let mut ov: Vec<String> = TINY.iter().map(|s| s.to_string()).collect();
    ov.push(format!("sampling.strategy={strategy}"));
    resolve_config(Some("peak2d"), None, &ov).unwrap()
}

fn rows_equal(a: &Mat, b: &Mat, n: usize) -> bool {
    (0..n).all(|i| a.row(i) == b.row(i))
}

#[test]
fn set_sizes_follow_replacement_and_growth() {
    let expect: [(&str, Vec<usize>); 4] = [
        ("uniform", vec![64]),
        ("das_r", vec![64, 64, 64]),
        ("das_g", vec![21, 42, 63]),
        ("rar", vec![21, 42, 63]),
    ];
    for (s, sizes) in expect {
        let cfg = tiny(s);
        let out = run(&cfg, 0).unwrap();
        assert_eq!(out.record.stage_sizes, sizes, "{s}");
        assert_eq!(out.stage_sets.iter().map(Mat::rows).collect::<Vec<_>>(), sizes, "{s}");
        let dom = cfg.build_problem().unwrap().domain().clone();
        assert!(out.stage_sets.iter().all(|m| m.iter_rows().all(|p| dom.contains(p))), "{s}");
        assert_eq!(out.flow.is_some(), matches!(out.strategy, Strategy::DasR | Strategy::DasG));
    }
}

#[test]
fn every_strategy_spends_the_same_epoch_budget() {
    for s in ["uniform", "das_r", "das_g", "rar"] {
        let out = run(&tiny(s), 1).unwrap();
        let epochs: Vec<usize> = out.record.epoch_rows().map(|r| r.epoch).collect();
        assert_eq!(epochs, (1..=9).collect::<Vec<_>>(), "{s}");
        let stages = out.record.stage_rows().count();
        assert_eq!(stages, if s == "uniform" { 1 } else { 3 }, "{s}");
        let last = out.record.stage_rows().last().unwrap();
        assert_eq!(last.epoch, 9);
        assert!(last.grid_error.is_some() && last.rel_error.is_some() && last.r_k.is_some());
    }
}

#[test]
fn growing_sets_keep_earlier_points_and_share_the_initial_set() {
    let g = run(&tiny("das_g"), 2).unwrap();
    let r = run(&tiny("rar"), 2).unwrap();
    for out in [&g, &r] {
        for k in 1..out.stage_sets.len() {
            let prev = &out.stage_sets[k - 1];
            assert!(rows_equal(&out.stage_sets[k], prev, prev.rows()));
        }
    }
    assert_eq!(g.stage_sets[0], r.stage_sets[0]);

    let u = run(&tiny("uniform"), 2).unwrap();
    let d = run(&tiny("das_r"), 2).unwrap();
    assert_eq!(u.stage_sets[0], d.stage_sets[0]);
    assert_ne!(d.stage_sets[1], d.stage_sets[0]);
}

#[test]
fn growth_schedule_can_vary_per_stage() {
    let mut cfg = tiny("das_g");
    cfg.sampling.n_r = Some(vec![10, 20]);
    let out = run(&cfg, 0).unwrap();
    assert_eq!(out.record.stage_sizes, vec![10, 30, 50]);
}

#[test]
fn top_k_picks_largest_magnitudes_with_index_ties() {
    assert_eq!(top_k_by_magnitude(&[1.0, -5.0, 3.0, 5.0, 0.0], 2), vec![1, 3]);
    assert_eq!(top_k_by_magnitude(&[2.0, -2.0, 2.0], 2), vec![0, 1]);
    assert_eq!(top_k_by_magnitude(&[1.0], 3), vec![0]);
}

#[test]
fn zero_net_grid_error_matches_the_gaussian_integral() {
    // Zero parameters give u ≡ 0, so the error is the mean of u² over the
    // 256² inclusive grid. The lattice sum of exp(-2000 ρ²) equals
    // (π/2000)/h² up to exponentially small terms.
    let zero = SurrogateNet::from_params(&[2, 3, 1], 0, vec![0.0; 13]).unwrap();
    let p = Problem::peak2d(0.5);
    let h = 2.0 / 255.0;
    let expected = std::f64::consts::PI / 2000.0 / (h * h) / (256.0 * 256.0);
    let mse = grid_mse(&zero, &p, 256).unwrap();
    assert!((mse - expected).abs() < 1e-9 * expected, "{mse} vs {expected}");

    // On a 2×2 grid the nodes are the corners, where u underflows to zero.
    let e = 0.3;
    let mut params = vec![0.0; 13];
    params[12] = e;
    let constant = SurrogateNet::from_params(&[2, 3, 1], 0, params).unwrap();
    assert_eq!(grid_mse(&constant, &p, 2).unwrap(), e * e);
    assert!(matches!(grid_mse(&zero, &Problem::linear_hd(4), 4), Err(Error::Config(_))));
}

#[test]
fn relative_error_cases() {
    let p = Problem::linear_hd(3);
    let pts = origin_grid(3, 5, 0.1).unwrap();
    let zero = SurrogateNet::from_params(&[3, 1], 0, vec![0.0; 4]).unwrap();
    assert_eq!(relative_error(&zero, &p, &pts).unwrap(), 1.0);

    // u ≡ 1 against exp(-10|x|²), summed by hand.
    let one = SurrogateNet::from_params(&[3, 1], 0, vec![0.0, 0.0, 0.0, 1.0]).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for x in pts.iter_rows() {
        let u = (-10.0 * x.iter().map(|v| v * v).sum::<f64>()).exp();
        num += (1.0 - u).powi(2);
        den += u * u;
    }
    let rel = relative_error(&one, &p, &pts).unwrap();
    assert!((rel - (num / den).sqrt()).abs() < 1e-14);

    let far = Mat::from_rows(&[[-1.0, -1.0], [1.0, -1.0]], 2);
    assert!(matches!(relative_error(&zero, &Problem::peak2d(0.5), &far), Err(Error::Contract(_))));
}

#[test]
fn diagnostic_of_an_exactly_proportional_density() {
    let dom = BoxDomain::cube(2, -1.0, 1.0);
    let n = 64;
    let f = |x: &[f64]| (1.0 + x[0] * x[0]) * (2.0 + x[1]).powi(2);
    let (grid, cell) = midpoint_grid(&dom, n).unwrap();
    let mass: f64 = grid.iter_rows().map(f).sum::<f64>() * cell;
    let r2 = |x: &Mat| Ok(x.iter_rows().map(f).collect());
    let logp = |x: &Mat| Ok(x.iter_rows().map(|p| (f(p) / mass).ln()).collect());
    let d = density_diagnostic(&dom, n, r2, logp).unwrap();
    assert!(d.kl.unwrap().abs() < 1e-6);
    assert!((d.c_hat - 1.0 / mass).abs() < 1e-12);
    assert!((d.tau1 - mass).abs() < 1e-9 * mass && (d.tau2 - mass).abs() < 1e-9 * mass);
    assert_eq!(tail_probability(&dom, n, 1e-6, r2, logp).unwrap(), 0.0);

    // A flat density against a peaked residual has positive KL and puts
    // its mass in the tail.
    let peaked = |x: &Mat| Ok(x.iter_rows().map(|p| (-50.0 * (p[0] * p[0] + p[1] * p[1])).exp()).collect());
    let flat = |x: &Mat| Ok(vec![(0.25f64).ln(); x.rows()]);
    let d = density_diagnostic(&dom, n, peaked, flat).unwrap();
    assert!(d.kl.unwrap() > 0.5);
    assert!(tail_probability(&dom, n, 1e-3, peaked, flat).unwrap() > 0.9);

    let zero = |x: &Mat| Ok(vec![0.0; x.rows()]);
    let d = density_diagnostic(&dom, n, zero, flat).unwrap();
    assert!(d.kl.is_none() && d.c_hat.is_infinite());
}

fn record(rows: &[(usize, usize, Option<f64>, Option<f64>)], sizes: Vec<usize>) -> RunRecord {
    RunRecord {
        rows: rows
            .iter()
            .map(|&(stage, epoch, loss, grid_error)| MetricRow { stage, epoch, loss, grid_error, ..Default::default() })
            .collect(),
        stage_sizes: sizes,
    }
}

fn run_dir(strategy: &str, seed: u64, rec: RunRecord) -> RunDir {
    let mut config = tiny(strategy);
    config.seeds = vec![seed];
    RunDir { path: PathBuf::from(format!("{strategy}{seed}")), config, record: rec }
}

#[test]
fn compare_averages_over_reporting_runs() {
    let runs = vec![
        run_dir("das_r", 0, record(&[(0, 1, Some(4.0), None), (0, 2, Some(2.0), Some(1.0)), (0, 2, None, Some(1.0))], vec![64])),
        run_dir("das_r", 1, record(&[(0, 1, Some(6.0), Some(3.0)), (0, 2, Some(4.0), Some(5.0)), (0, 2, None, Some(5.0))], vec![64])),
        run_dir("uniform", 0, record(&[(0, 1, Some(1.0), None), (0, 2, None, Some(7.0))], vec![64])),
    ];
    let rows = compare(&runs).unwrap();
    assert_eq!(rows.len(), 5);
    let das: Vec<_> = rows.iter().filter(|r| r.strategy == "das_r").collect();
    assert_eq!(das[0].loss, Some(5.0));
    assert_eq!(das[0].grid_error, Some(3.0));
    assert_eq!(das[0].runs, 2);
    assert_eq!(das[1].grid_error, Some(3.0));
    assert_eq!((das[2].kind, das[2].loss, das[2].grid_error), ("stage", None, Some(3.0)));
    let uni: Vec<_> = rows.iter().filter(|r| r.strategy == "uniform").collect();
    assert_eq!(uni[0].runs, 1);

    let csv = comparison_csv(&rows);
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some(COMPARE_HEADER));
    assert_eq!(lines.count(), 5);
    assert!(matches!(compare(&runs[..1]), Err(Error::Contract(_))));
}

#[test]
fn run_directory_round_trip() {
    let cfg = tiny("das_g");
    let out = run(&cfg, 4).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("r");
    write_run_dir(&dir, &cfg, &out).unwrap();
    let back = load_run(&dir).unwrap();
    assert_eq!(back.record, out.record);
    assert_eq!(back.seed(), 4);
    assert_eq!(back.final_size(), 63);
    let metrics = std::fs::read_to_string(dir.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with(METRICS_HEADER));
    assert!(!metrics.contains('\r'));
    let net = SurrogateNet::load(&dir.join("net.json")).unwrap();
    assert_eq!(net, out.net);
    assert!(dir.join("flow.json").exists() && dir.join("samples_stage_2.csv").exists());
    assert!(write_run_dir(&dir, &cfg, &out).is_err());
}

#[test]
fn identical_config_and_seed_give_identical_metrics() {
    for s in ["uniform", "das_r", "das_g", "rar"] {
        let cfg = tiny(s);
        let a = run(&cfg, 3).unwrap().record.to_csv();
        let b = run(&cfg, 3).unwrap().record.to_csv();
        assert_eq!(a, b, "{s}");
        assert_ne!(a, run(&cfg, 4).unwrap().record.to_csv(), "{s}");
    }
}

fn opt_real() -> impl proptest::strategy::Strategy<Value = Option<f64>> {
    prop_oneof![Just(None), (-1e300f64..1e300).prop_map(Some), (-1e-300f64..1e-300).prop_map(Some), Just(Some(f64::INFINITY))]
}

proptest! {
    #[test]
    fn metrics_csv_round_trips(rows in prop::collection::vec((0usize..5, 0usize..1000, opt_real(), opt_real(), opt_real(), opt_real()), 1..20)) {
        let rec = RunRecord {
            rows: rows
                .into_iter()
                .map(|(stage, epoch, loss, grid_error, r_k, kl)| MetricRow { stage, epoch, loss, grid_error, r_k, kl, ..Default::default() })
                .collect(),
            stage_sizes: Vec::new(),
        };
        let back = RunRecord::from_csv(&rec.to_csv(), std::path::Path::new("m.csv")).unwrap();
        prop_assert_eq!(back.rows, rec.rows);
    }

    #[test]
    fn resolved_config_round_trips_through_json(
        epochs in 1usize..5000,
        batch in 1usize..4096,
        lr in 1e-6f64..1e-1,
        strategy in prop::sample::select(vec!["uniform", "das_r", "das_g", "rar"]),
        seeds in prop::collection::vec(0u64..1000, 1..4),
    ) {
        let ov = vec![
            format!("train.epochs={epochs}"),
            format!("train.batch={batch}"),
            format!("train.lr={lr}"),
            format!("sampling.strategy={strategy}"),
            format!("seeds={seeds:?}"),
        ];
        let cfg = resolve_config(Some("twopeak2d"), None, &ov).unwrap();
        prop_assert_eq!(cfg.train.lr, lr);
        let doc: serde_json::Value = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        let back = resolve_config(None, Some(doc), &[]).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
