use fedfdi_core::attack::{attack_model, make_stealthy, sample_state_error, AttackParams};
use fedfdi_core::dataset::{gen_sample, gen_scenario};
use fedfdi_core::estimation::{BadDataDetector, WeightMatrix, WlsEstimator};
use fedfdi_core::grid::Grid;
use fedfdi_core::rng::SeedStreams;
use rand::Rng;

const SIGMA: f64 = 0.2;

fn setup() -> (Grid, BadDataDetector, WlsEstimator) {
    let grid = Grid::ieee14();
    let w = WeightMatrix::from_sigma(grid.n_meters(), SIGMA).unwrap();
    let det = BadDataDetector::new(&grid.h, &w, 0.05).unwrap();
    let est = WlsEstimator::new(&grid.h, &w).unwrap();
    (grid, det, est)
}

fn noisy(grid: &Grid, streams: &SeedStreams, k: u64) -> Vec<f64> {
    let mut rng = streams.indexed("corpus", k);
    let sc = gen_scenario(&mut rng, &grid.system, &grid.loads, 0.2).unwrap();
    gen_sample(&mut rng, &grid.h, &sc.state, SIGMA, None, k).unwrap().features
}

#[test]
fn stealthy_attack_leaves_residual_and_shifts_state() {
    let (grid, det, est) = setup();
    let streams = SeedStreams::new(11);
    for k in 0..1000 {
        let y = noisy(&grid, &streams, k);
        let mut arng = streams.indexed("attack", k);
        let sparsity = arng.random_range(1..=3);
        let c = sample_state_error(&mut arng, grid.n_state(), sparsity, 0.2).unwrap();
        let a = make_stealthy(&grid.h, &c).unwrap();
        let ya: Vec<f64> = y.iter().zip(&a.0).map(|(u, v)| u + v).collect();

        let before = det.statistic(&y).unwrap();
        let after = det.statistic(&ya).unwrap();
        assert!((after - before).abs() <= 1e-8 * (1.0 + before), "pair {k}: {before} -> {after}");

        let v = est.estimate(&y).unwrap();
        let va = est.estimate(&ya).unwrap();
        for j in 0..grid.n_state() {
            assert!((va[j] - v[j] - c.c[j]).abs() <= 1e-9, "pair {k} state {j}");
        }
    }
}

#[test]
fn noise_only_flag_rate_matches_significance() {
    let (grid, det, _) = setup();
    let streams = SeedStreams::new(12);
    let flagged = (0..10_000).filter(|&k| det.flags(&noisy(&grid, &streams, k)).unwrap()).count();
    let rate = flagged as f64 / 10_000.0;
    assert!((0.04..=0.06).contains(&rate), "{rate}");
}

#[test]
fn gross_errors_caught_stealthy_ones_not() {
    let (grid, det, _) = setup();
    let streams = SeedStreams::new(13);
    let params = AttackParams::default();
    let gross = attack_model("unstructured", &params).unwrap();
    let stealthy = attack_model("stealthy", &params).unwrap();
    let n = 5000;
    let (mut clean, mut caught, mut missed) = (0, 0, 0);
    for k in 0..n {
        let y = noisy(&grid, &streams, k);
        let add = |a: &[f64]| -> Vec<f64> { y.iter().zip(a).map(|(u, v)| u + v).collect() };
        clean += usize::from(det.flags(&y).unwrap());
        let g = gross.generate(&mut streams.indexed("gross", k), &grid.h).unwrap();
        caught += usize::from(det.flags(&add(&g.0)).unwrap());
        let s = stealthy.generate(&mut streams.indexed("attack", k), &grid.h).unwrap();
        missed += usize::from(det.flags(&add(&s.0)).unwrap());
    }
    let rate = |c: usize| c as f64 / n as f64;
    assert!(rate(caught) >= 0.99, "{}", rate(caught));
    assert!((rate(missed) - rate(clean)).abs() <= 0.02);
}
