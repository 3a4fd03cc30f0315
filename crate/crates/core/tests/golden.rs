use mfc_approx::bellman::{solve_bellman, GridSpec, ValueGrid};
use mfc_approx::lift::{lift, oracle_value_decoupled, LiftEstimator, OracleConfig};
use mfc_approx::mollify::{build_mollified, MollifierSpec};
use mfc_approx::{benchmark, DiscreteMeasure};

fn two_point() -> DiscreteMeasure {
    DiscreteMeasure::new(1, &[vec![-1.0], vec![1.0]], vec![0.5, 0.5]).unwrap()
}

// Hand-computed: atoms at ±1 are drift fixed points at the terminal maximum,
// and staying put is optimal, so the value at (0, ½δ₋₁ + ½δ₁) is T · 0.2 cos 1.
const DECOUPLED_GOLDEN: f64 = 0.108_060_461_173_627_94;

#[test]
fn oracle_matches_hand_computed_value() {
    let p = benchmark("decoupled-bounded").unwrap();
    let o = oracle_value_decoupled(&p, 0.0, &two_point(), &OracleConfig::default()).unwrap();
    assert!((o.value - DECOUPLED_GOLDEN).abs() < 1e-5, "oracle {} vs {DECOUPLED_GOLDEN}", o.value);
    assert!((o.fine - o.coarse).abs() < 1e-3);
}

#[test]
fn particle_value_refines_towards_the_oracle() {
    let p = benchmark("decoupled-bounded").unwrap();
    let mc = build_mollified(&p, 1, MollifierSpec::new(32)).unwrap();
    let coarse = solve_bellman(&mc, &GridSpec::new(2.5, 81, 0.1)).unwrap();
    let fine = solve_bellman(&mc, &GridSpec::new(2.5, 161, 0.1)).unwrap();
    let l = |vg: &ValueGrid| lift(vg, 0.0, &two_point(), LiftEstimator::Exact).unwrap().value;
    // Spatial refinement moves the value by far less than the ε bias.
    assert!((l(&coarse) - l(&fine)).abs() < 5e-3);
    assert!(l(&fine) < DECOUPLED_GOLDEN);
}

#[test]
fn saved_grid_round_trips_bitwise() {
    let p = benchmark("mean-reverting-mf").unwrap();
    let mc = build_mollified(&p, 2, MollifierSpec::new(8)).unwrap();
    let vg = solve_bellman(&mc, &GridSpec::new(2.0, 21, 0.2)).unwrap();
    let dir = std::env::temp_dir().join(format!("mfc-golden-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let prefix = dir.join("grid");
    vg.save(&prefix).unwrap();
    let back = ValueGrid::load(&prefix).unwrap();
    std::fs::remove_dir_all(&dir).unwrap();
    assert_eq!(back.times(), vg.times());
    for k in 0..vg.times().len() {
        assert_eq!(back.slice(k), vg.slice(k));
    }
}
