use haptic_takeover::authority::Phase;
use haptic_takeover::config::ExperimentConfig;
use haptic_takeover::experiment::run_single;
use haptic_takeover::metrics::run_metrics;
use haptic_takeover::sim::{run, Condition, RunRecord, Task};
use haptic_takeover::DriverProfile;

fn cfg() -> ExperimentConfig {
    ExperimentConfig::default()
}

fn never_intervening(task: Task, condition: Condition) -> RunRecord {
    let c = cfg();
    let profile = DriverProfile {
        reaction_delay: f64::INFINITY,
        ..c.profile(1)
    };
    run(&c.scenario(task), &profile, condition, &c.sim_config(), 1).unwrap()
}

#[test]
fn identical_inputs_give_identical_csv() {
    let c = cfg();
    for task in [Task::A, Task::B] {
        let a = run_single(&c, task, Condition::Proposed, 7).unwrap();
        let b = run_single(&c, task, Condition::Proposed, 7).unwrap();
        assert_eq!(a.csv_string(), b.csv_string());
    }
}

#[test]
fn events_are_ordered_and_identity_holds() {
    let c = cfg();
    for id in 1..=6 {
        for task in [Task::A, Task::B] {
            for cond in [Condition::Baseline, Condition::Proposed] {
                let r = run_single(&c, task, cond, id).unwrap();
                assert!(r.events.ordered(), "{id} {task} {cond}: {:?}", r.events);
                assert!(r.events.tor <= r.events.completion.unwrap_or(f64::INFINITY));
                for k in &r.ticks {
                    match cond {
                        Condition::Proposed if k.phase != Phase::Completed => {
                            assert!(
                                (k.split.total - k.split.required).abs() < 1e-9,
                                "t = {}",
                                k.t
                            );
                        }
                        Condition::Baseline => assert_eq!(k.split.haptic, 0.0),
                        _ => {}
                    }
                    if let Some(a) = k.alpha {
                        assert!(a <= k.alpha_ref + 1e-12);
                    }
                }
                // Allowed authority never falls during a proposed run.
                if cond == Condition::Proposed {
                    assert!(r.ticks.windows(2).all(|w| w[1].alpha_ref >= w[0].alpha_ref));
                }
            }
        }
    }
}

#[test]
fn reference_controller_alone_keeps_the_lane() {
    let c = cfg();
    let dt = c.timing.control_dt;
    let rate = c.ref_mpc.rate_max * dt;
    for task in [Task::A, Task::B] {
        for cond in [Condition::Baseline, Condition::Proposed] {
            let r = never_intervening(task, cond);
            assert!(r.succeeded(), "{:?}", r.failure);
            assert!(r.events.hands_on.is_none() && r.events.completion.is_none());
            let last = r.ticks.last().unwrap().t;
            assert!(
                last >= c.scenario.duration - 2.0 * dt,
                "{task}: ended at {last}"
            );
            let worst = r
                .ticks
                .iter()
                .map(|k| k.lateral_error.abs())
                .fold(0.0, f64::max);
            assert!(worst < 0.2, "{task} {cond}: {worst}");
            for w in r.ticks.windows(2) {
                let (a, b) = (w[0].split.required, w[1].split.required);
                assert!(b.abs() <= c.ref_mpc.torque_max + 1e-9);
                assert!((b - a).abs() <= rate + 1e-9, "rate {} at {}", b - a, w[1].t);
            }
            assert!(r
                .ticks
                .iter()
                .all(|k| k.split.driver == 0.0 && k.split.total == k.split.required));
        }
    }
}

#[test]
fn automation_tracks_closely_before_the_request() {
    let c = cfg();
    for task in [Task::A, Task::B] {
        let r = run_single(&c, task, Condition::Proposed, 1).unwrap();
        let worst = r
            .ticks
            .iter()
            .filter(|k| k.t < r.events.tor)
            .map(|k| k.lateral_error.abs())
            .fold(0.0, f64::max);
        assert!(worst < 0.1, "{task}: {worst}");
    }
}

#[test]
fn sensor_noise_changes_the_log_but_not_the_event_order() {
    let mut c = cfg();
    let quiet = run_single(&c, Task::B, Condition::Proposed, 3).unwrap();
    c.scenario.noise_enabled = true;
    let noisy = run_single(&c, Task::B, Condition::Proposed, 3).unwrap();
    assert_ne!(quiet.csv_string(), noisy.csv_string());
    assert!(noisy.meta.noise_enabled);
    assert!(quiet.events.ordered() && noisy.events.ordered());
}

#[test]
fn task_a_proposed_yaw_rate_sits_near_the_curve_rate() {
    let c = cfg();
    let curve = (c.vehicle.speed / c.scenario.curve_radius).to_degrees();
    for id in 1..=4 {
        let m = run_metrics(&run_single(&c, Task::A, Condition::Proposed, id).unwrap());
        assert!(
            (m.mean_yaw_rate - curve).abs() < 0.1,
            "{id}: {}",
            m.mean_yaw_rate
        );
    }
}

#[test]
fn csv_layout() {
    let r = run_single(&cfg(), Task::A, Condition::Baseline, 2).unwrap();
    let text = r.csv_string();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("t,Y,y,y_dot,psi,psi_dot,theta_sw_deg"));
    assert_eq!(lines.count(), r.ticks.len());
    let side = r.sidecar();
    assert_eq!(side["ticks"], r.ticks.len());
    assert_eq!(side["meta"]["condition"], "baseline");
}
