use gipsi::dynamics::IntegratorConfig;
use gipsi::experiments::{
    self, extract_boundary, linear_grid, mean_field_run, run_sweep, BoundaryAxis, CellLabel,
    NetworkSource, Relaxation, SweepSpec,
};
use gipsi::market::{ModelParams, SyntheticSpec};

fn quarter_grid() -> Vec<f64> {
    (1..=7).map(|k| 0.25 * k as f64).collect()
}

#[test]
fn mean_field_sweep_phases() {
    let spec = SweepSpec::mean_field(quarter_grid(), quarter_grid(), -0.01, 69.0);
    let map = run_sweep(&spec).unwrap();
    assert_eq!(map.cells.len(), 49);
    for c in &map.cells {
        let gamma = c.alpha * c.beta;
        if gamma < 1.0 {
            assert_eq!(c.label, CellLabel::Settled, "{c:?}");
            assert!(c.order_param > 0.9);
        } else if gamma > 2.0 {
            assert_eq!(c.label, CellLabel::Collapsed, "{c:?}");
        }
        if gamma > 1.05 {
            assert!(c.order_param < 0.8, "{c:?}");
        }
    }
}

#[test]
fn frozen_prices_without_price_coupling() {
    let spec = SweepSpec {
        network: NetworkSource::Synthetic(SyntheticSpec {
            n_investors: 6,
            n_assets: 3,
            density: 0.7,
            weight_scale: 1.0,
            leverage: 2.0,
            seed: 4,
            constant_weights: false,
        }),
        ..SweepSpec::mean_field(vec![0.0], vec![-1.0, 0.5, 3.0], -0.2, 20.0)
    };
    let map = run_sweep(&spec).unwrap();
    for c in &map.cells {
        assert_eq!(c.label, CellLabel::Settled);
        assert_eq!(c.order_param, 3.0);
    }
}

#[test]
fn contrarian_quadrant_keeps_prices() {
    let spec = SweepSpec::mean_field(vec![-10.0, -2.0, -1.0], vec![0.5, 1.0, 2.0, 10.0], -0.01, 69.0);
    for c in &run_sweep(&spec).unwrap().cells {
        assert_eq!(c.label, CellLabel::Settled);
        assert!((c.order_param - 1.0).abs() < 0.05, "{c:?}");
    }
}

#[test]
fn no_crossing_in_stable_corner() {
    let grid = linear_grid(0.1, 0.7, 0.05);
    let spec = SweepSpec::mean_field(grid.clone(), grid, -1e-3, 69.0);
    let map = run_sweep(&spec).unwrap();
    assert!(map.cells.iter().all(|c| c.alpha * c.beta >= 0.5 || c.label == CellLabel::Settled));
    assert!(extract_boundary(&map, BoundaryAxis::Beta).is_empty());
}

#[test]
fn crossing_found_when_grid_spans_transition() {
    let grid = linear_grid(0.5, 2.0, 0.25);
    let map = run_sweep(&SweepSpec::mean_field(grid.clone(), grid, -0.01, 69.0)).unwrap();
    let locus = extract_boundary(&map, BoundaryAxis::Beta);
    assert!(!locus.is_empty());
    assert!(locus.iter().all(|p| p.gamma() > 1.0));
}

#[test]
fn sweep_is_independent_of_thread_count() {
    let grid = linear_grid(0.5, 1.5, 0.25);
    let spec = SweepSpec::mean_field(grid.clone(), grid, -0.05, 30.0);
    let run_on = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_sweep(&spec).unwrap())
    };
    assert_eq!(run_on(1), run_on(4));
}

#[test]
fn shocked_investor_does_not_change_labels() {
    let base = SweepSpec {
        network: NetworkSource::Synthetic(SyntheticSpec {
            n_investors: 10,
            n_assets: 5,
            density: 1.0,
            weight_scale: 1.0,
            leverage: 1.0,
            seed: 21,
            constant_weights: false,
        }),
        ..SweepSpec::mean_field(vec![0.5, 1.0, 2.0], vec![0.5, 1.0, 2.0], -0.1, 69.0)
    };
    let labels = |investor: usize| {
        let mut spec = base.clone();
        spec.shock.investor = investor;
        run_sweep(&spec).unwrap().cells.iter().map(|c| c.label).collect::<Vec<_>>()
    };
    let first = labels(0);
    assert_eq!(first, labels(4));
    assert_eq!(first, labels(9));
}

#[test]
fn relaxation_slows_towards_transition() {
    let cfg = IntegratorConfig::with_horizon(1500.0);
    let mut last = 0.0;
    for gamma in [0.2, 0.4, 0.6, 0.8, 0.9, 0.95] {
        let root: f64 = f64::sqrt(gamma);
        let traj = mean_field_run(&ModelParams::unit_times(root, root).unwrap(), -0.01, &cfg).unwrap();
        match experiments::relaxation_time(&traj, 1e-6).unwrap() {
            Relaxation::Settled(t) => {
                assert!(t >= last, "gamma {gamma}: {t} < {last}");
                last = t;
            }
            Relaxation::Censored(_) => {}
        }
    }
    assert!(last > 0.0);
}

#[test]
fn repeats_use_distinct_networks() {
    let synthetic = SyntheticSpec {
        n_investors: 5,
        n_assets: 3,
        density: 0.8,
        weight_scale: 1.0,
        leverage: 2.0,
        seed: 7,
        constant_weights: false,
    };
    let source = NetworkSource::Synthetic(synthetic);
    assert_ne!(source.build(0).unwrap(), source.build(1).unwrap());
    let spec = SweepSpec {
        network: source,
        repeats: 3,
        ..SweepSpec::mean_field(vec![0.5], vec![0.5], -0.1, 20.0)
    };
    let map = run_sweep(&spec).unwrap();
    assert_eq!(map.cells[0].label, CellLabel::Settled);
    assert!(map.cells[0].order_param > 0.0 && map.cells[0].order_param < 3.0);
}

#[test]
fn shock_out_of_range_is_rejected() {
    let mut spec = SweepSpec::mean_field(vec![0.5], vec![0.5], -0.1, 5.0);
    spec.shock.investor = 3;
    assert!(run_sweep(&spec).is_err());
}
