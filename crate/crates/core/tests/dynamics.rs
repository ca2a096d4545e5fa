use haptic_takeover::dynamics::{
    CouplingSign, VehicleModel, VehicleParams, VehicleState, SIGN_GATE_MAX_REAL_PART, STATE_DIM,
};
use proptest::prelude::*;

fn model() -> VehicleModel<f64> {
    VehicleModel::new(VehicleParams::default()).unwrap()
}

fn simulate(
    m: &VehicleModel<f64>,
    x0: VehicleState<f64>,
    torque: f64,
    dt: f64,
    duration: f64,
) -> [f64; STATE_DIM] {
    let steps = (duration / dt).round() as usize;
    let mut x = x0;
    for _ in 0..steps {
        x = m.step_euler(&x, torque, dt).unwrap();
    }
    x.to_array()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn euler_is_first_order() {
    let m = model();
    let x0 = VehicleState::zero();
    let (dt, t) = (0.002, 1.0);
    let a = simulate(&m, x0, 0.3, dt, t);
    let b = simulate(&m, x0, 0.3, dt / 2.0, t);
    let c = simulate(&m, x0, 0.3, dt / 4.0, t);
    let ratio = max_diff(&a, &b) / max_diff(&b, &c);
    assert!((1.7..2.3).contains(&ratio), "ratio {ratio}");
}

/// Real parts of the eigenvalues of [[a, b], [c, d]].
fn eig_real_parts(a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let tr = a + d;
    let disc = (a - d).powi(2) + 4.0 * b * c;
    if disc >= 0.0 {
        (0.5 * (tr + disc.sqrt()), 0.5 * (tr - disc.sqrt()))
    } else {
        (0.5 * tr, 0.5 * tr)
    }
}

#[test]
fn sign_gate_selects_a_stable_lateral_yaw_block() {
    for speed in [5.0, 10.0, 20.0, 30.0] {
        let params = VehicleParams {
            speed,
            ..VehicleParams::default()
        };
        let m = VehicleModel::new(params).unwrap();
        let printed = VehicleModel::with_sign(params, CouplingSign::AsPrinted).unwrap();
        let c = &printed.coefficients;
        let (r1, r2) = eig_real_parts(
            c.lateral_damping,
            c.yaw_to_lateral,
            c.lateral_to_yaw,
            c.yaw_damping,
        );
        assert!((m.printed_sign_max_real_part - r1.max(r2)).abs() < 1e-9);
        let expected = if r1.max(r2) > SIGN_GATE_MAX_REAL_PART {
            CouplingSign::Textbook
        } else {
            CouplingSign::AsPrinted
        };
        assert_eq!(m.coupling_sign, expected, "speed {speed}");
        let c = &m.coefficients;
        let (s1, s2) = eig_real_parts(
            c.lateral_damping,
            c.yaw_to_lateral,
            c.lateral_to_yaw,
            c.yaw_damping,
        );
        assert!(
            s1.max(s2) <= SIGN_GATE_MAX_REAL_PART,
            "speed {speed}: {s1} {s2}"
        );
    }
}

#[test]
fn steady_turn_is_an_equilibrium() {
    let m = model();
    for yaw_rate in [-0.1, 0.02, 0.0526, 0.2] {
        let trim = m.steady_turn(yaw_rate);
        let x = VehicleState {
            lateral_velocity: trim.lateral_velocity,
            yaw_rate,
            steering_angle: trim.steering_angle,
            ..VehicleState::zero()
        };
        let d = m.derivative(&x, trim.torque);
        assert!(d.lateral_velocity.abs() < 1e-9);
        assert!(d.yaw_rate.abs() < 1e-9);
        assert!(d.steering_rate.abs() < 1e-9);
    }
}

#[test]
fn linearization_matches_finite_differences_at_origin() {
    let m = model();
    let lin = m.linearize(0.02);
    let h = 1e-6;
    let f0 = m.derivative(&VehicleState::zero(), 0.0).to_array();
    for j in 0..STATE_DIM {
        let mut x = [0.0; STATE_DIM];
        x[j] = h;
        let f = m.derivative(&VehicleState::from_array(x), 0.0).to_array();
        for i in 0..STATE_DIM {
            let fd = (f[i] - f0[i]) / h;
            assert!(
                (fd - lin.a[(i, j)]).abs() < 1e-4 * (1.0 + fd.abs()),
                "A[{i},{j}] {fd} vs {}",
                lin.a[(i, j)]
            );
        }
    }
    let f = m.derivative(&VehicleState::zero(), 1.0).to_array();
    for i in 0..STATE_DIM {
        assert!((f[i] - lin.b[i]).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn discrete_model_superposes(
        x1 in prop::array::uniform7(-1.0..1.0f64),
        x2 in prop::array::uniform7(-1.0..1.0f64),
        u1 in -5.0..5.0f64,
        u2 in -5.0..5.0f64,
        k in -3.0..3.0f64,
    ) {
        let lin = model().linearize(0.02);
        let sum: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a + k * b).collect();
        let lhs = lin.step(&sum, u1 + k * u2);
        let a = lin.step(&x1, u1);
        let b = lin.step(&x2, u2);
        for i in 0..STATE_DIM {
            let rhs = a[i] + k * b[i];
            prop_assert!((lhs[i] - rhs).abs() < 1e-9 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn steering_angle_stays_within_the_stop(torque in -50.0..50.0f64) {
        let m = model();
        let mut x = VehicleState::zero();
        for _ in 0..300 {
            x = m.step_euler(&x, torque, 0.01).unwrap();
            prop_assert!(x.steering_angle.abs() <= m.params.max_steering_angle() + 1e-12);
        }
    }
}
