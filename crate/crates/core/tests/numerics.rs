mod common;

#[test]
fn step_halving_changes_trajectories_little() {
    let worst = common::step_halving_error(5.0e6);
    assert!(worst < 1e-3, "relative RMS change {worst}");
}

#[test]
fn islanded_equilibrium_holds_and_balances_power() {
    let (drift, balance) = common::equilibrium_drift(4.0e6, 1000);
    assert!(drift < 1e-6, "relative drift {drift}");
    assert!(balance < 1e-3, "power balance error {balance}");
}

#[test]
fn light_load_island_holds_equilibrium() {
    let (drift, balance) = common::equilibrium_drift(0.5e6, 1000);
    assert!(drift < 1e-6 && balance < 1e-3, "{drift} {balance}");
}

#[test]
fn frame_round_trips() {
    let e = common::frame_round_trip_error(1000, 3);
    assert!(e <= 1e-12, "round trip error {e}");
}
