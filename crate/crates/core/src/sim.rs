//! Scenarios, the fixed-step takeover simulation and run records.
//!
//! The plant runs at 100 Hz and the controllers at 50 Hz; torques are held
//! between control ticks. One control tick is one row of the run log.

use std::collections::VecDeque;
use std::fmt;
use std::io::{self, Write};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::authority::{
    allowed_authority, classify_ability, degree_of_intervention, phase_for, update_completion,
    AbilityLevel, AuthorityStatus, CompletionSample, Intervention, Phase, Thresholds,
};
use crate::controllers::{
    assistance, baseline_fade, baseline_split, blend, HapticGuidance, HapticMpcParams,
    RefMpcParams, ReferenceMpc, ReferenceTrajectory, TorqueSplit,
};
use crate::driver::{
    baseline_reaction_step, proposed_reaction_step, scripted_state, Attention, DriverProfile,
    DriverState,
};
use crate::dynamics::{
    CouplingSign, DynamicsError, VehicleModel, VehicleParams, VehicleState, STATE_DIM,
};
use crate::scalar::clamp;

/// Driver torque that counts as intervening (N·m).
pub const INTERVENTION_TORQUE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Task {
    /// Lane keeping on a constant-radius curve.
    A,
    /// Lane change to the left on a straight road.
    B,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Condition {
    Baseline,
    Proposed,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::A => "A",
            Self::B => "B",
        })
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Baseline => "baseline",
            Self::Proposed => "proposed",
        })
    }
}

impl FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "A" | "a" => Ok(Self::A),
            "B" | "b" => Ok(Self::B),
            _ => Err(format!("unknown task {s:?} (expected A or B)")),
        }
    }
}

impl FromStr for Condition {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "baseline" => Ok(Self::Baseline),
            "proposed" => Ok(Self::Proposed),
            _ => Err(format!(
                "unknown condition {s:?} (expected baseline or proposed)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Scenario {
    pub task: Task,
    pub lane_width: f64,
    /// Task A curve radius (m); the curve turns left.
    pub curve_radius: f64,
    /// Task B lateral offset of the target lane (m).
    pub lane_offset: f64,
    /// Task B lane-change duration (s).
    pub lane_change_duration: f64,
    /// Task B: TOR fires this long after the turn signal (s).
    pub turn_signal_lead: f64,
    /// Time of the TOR (s).
    pub tor_time: f64,
    pub duration: f64,
    /// Run time after a confirmed takeover (s).
    pub post_takeover: f64,
    pub noise_enabled: bool,
}

impl Scenario {
    pub fn new(task: Task) -> Self {
        Self {
            task,
            ..Self::default()
        }
    }

    pub fn turn_signal_time(&self) -> Option<f64> {
        match self.task {
            Task::A => None,
            Task::B => Some(self.tor_time - self.turn_signal_lead),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("lane_width", self.lane_width),
            ("curve_radius", self.curve_radius),
            ("lane_offset", self.lane_offset),
            ("lane_change_duration", self.lane_change_duration),
            ("duration", self.duration),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(format!("scenario.{name} must be positive"));
            }
        }
        if !(self.turn_signal_lead >= 0.0) || !(self.tor_time >= self.turn_signal_lead) {
            return Err("scenario.tor_time must be at least turn_signal_lead".into());
        }
        if !(self.post_takeover >= 0.0) {
            return Err("scenario.post_takeover must be non-negative".into());
        }
        if self.tor_time >= self.duration {
            return Err("scenario.duration must extend past the TOR".into());
        }
        Ok(())
    }
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            task: Task::A,
            lane_width: 3.5,
            curve_radius: 190.0,
            lane_offset: 3.5,
            lane_change_duration: 6.0,
            turn_signal_lead: 0.5,
            tor_time: 2.0,
            duration: 30.0,
            post_takeover: 2.0,
            noise_enabled: false,
        }
    }
}

/// Multiplicative Gaussian sensor noise on the measured driver torque and yaw
/// rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseModel {
    pub torque_relative_sd: f64,
    pub yaw_rate_relative_sd: f64,
}

impl Default for NoiseModel {
    fn default() -> Self {
        Self {
            torque_relative_sd: 0.03,
            yaw_rate_relative_sd: 0.05,
        }
    }
}

/// Sensor readings the controllers see.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub driver_torque: f64,
    pub yaw_rate: f64,
}

/// Applies the noise model; `rng == None` means noise is disabled.
pub fn apply_noise<R: Rng + ?Sized>(
    truth: Measurement,
    noise: &NoiseModel,
    rng: Option<&mut R>,
) -> Measurement {
    match rng {
        None => truth,
        Some(rng) => {
            let z1: f64 = StandardNormal.sample(rng);
            let z2: f64 = StandardNormal.sample(rng);
            Measurement {
                driver_torque: truth.driver_torque * (1.0 + noise.torque_relative_sd * z1),
                yaw_rate: truth.yaw_rate * (1.0 + noise.yaw_rate_relative_sd * z2),
            }
        }
    }
}

/// Everything except the scenario and the driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub vehicle: VehicleParams<f64>,
    pub thresholds: Thresholds<f64>,
    pub ref_mpc: RefMpcParams<f64>,
    pub haptic_mpc: HapticMpcParams<f64>,
    pub noise: NoiseModel,
    pub plant_dt: f64,
    pub control_dt: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            vehicle: VehicleParams::default(),
            thresholds: Thresholds::default(),
            ref_mpc: RefMpcParams::default(),
            haptic_mpc: HapticMpcParams::default(),
            noise: NoiseModel::default(),
            plant_dt: 0.01,
            control_dt: 0.02,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<(), String> {
        self.vehicle.validate().map_err(|e| e.to_string())?;
        self.thresholds.validate()?;
        self.ref_mpc.validate()?;
        self.haptic_mpc.validate()?;
        if !(self.plant_dt > 0.0 && self.control_dt > 0.0) {
            return Err("time steps must be positive".into());
        }
        let ratio = self.control_dt / self.plant_dt;
        if (ratio - ratio.round()).abs() > 1e-9 || ratio.round() < 1.0 {
            return Err("control_dt must be an integer multiple of plant_dt".into());
        }
        if self.noise.torque_relative_sd < 0.0 || self.noise.yaw_rate_relative_sd < 0.0 {
            return Err("noise sds must be non-negative".into());
        }
        Ok(())
    }

    pub fn plant_steps_per_tick(&self) -> usize {
        (self.control_dt / self.plant_dt).round() as usize
    }
}

/// Road geometry for one task.
#[derive(Debug, Clone, Copy)]
pub struct Road {
    scenario: Scenario,
    speed: f64,
}

/// Position of the vehicle relative to the road.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoadPose {
    /// Lateral offset from the path, positive left (m).
    pub lateral_error: f64,
    /// Vehicle yaw minus path heading (rad).
    pub heading_error: f64,
    /// Path curvature at the vehicle (1/m).
    pub curvature: f64,
}

fn quintic(s: f64) -> (f64, f64, f64) {
    // Position, first and second derivative of 10s³ − 15s⁴ + 6s⁵ on [0, 1].
    if s <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    if s >= 1.0 {
        return (1.0, 0.0, 0.0);
    }
    let (s2, s3) = (s * s, s * s * s);
    (
        10.0 * s3 - 15.0 * s3 * s + 6.0 * s3 * s2,
        30.0 * s2 - 60.0 * s3 + 30.0 * s2 * s2,
        60.0 * s - 180.0 * s2 + 120.0 * s3,
    )
}

impl Road {
    pub fn new(scenario: Scenario, speed: f64) -> Self {
        Self { scenario, speed }
    }

    /// Task B planned path: lateral position, its time derivative and second
    /// derivative at time `t`.
    pub fn lane_change(&self, t: f64) -> (f64, f64, f64) {
        let Some(ts) = self.scenario.turn_signal_time() else {
            return (0.0, 0.0, 0.0);
        };
        let d = self.scenario.lane_change_duration;
        let (p, v, a) = quintic((t - ts) / d);
        let h = self.scenario.lane_offset;
        (h * p, h * v / d, h * a / (d * d))
    }

    fn lane_change_heading_curvature(&self, t: f64) -> (f64, f64) {
        let (_, yd, ydd) = self.lane_change(t);
        let slope = yd / self.speed;
        let curvature = ydd / (self.speed * self.speed) / (1.0 + slope * slope).powf(1.5);
        (slope.atan(), curvature)
    }

    pub fn pose(&self, t: f64, x_long: f64, state: &VehicleState<f64>) -> RoadPose {
        match self.scenario.task {
            Task::A => {
                let r = self.scenario.curve_radius;
                let dy = state.lateral_position - r;
                let phi = x_long.atan2(-dy);
                RoadPose {
                    lateral_error: r - x_long.hypot(dy),
                    heading_error: state.yaw - phi,
                    curvature: 1.0 / r,
                }
            }
            Task::B => {
                // Time-parameterized path; the vehicle travels at constant
                // speed so the planned point moves with it.
                let (y_ref, _, _) = self.lane_change(t);
                let (heading, curvature) = self.lane_change_heading_curvature(t);
                RoadPose {
                    lateral_error: state.lateral_position - y_ref,
                    heading_error: state.yaw - heading,
                    curvature,
                }
            }
        }
    }

    /// Reference over the controller horizon in the controller's frame.
    ///
    /// Task A uses a frame aligned with the road tangent at the vehicle's
    /// projection, so the state passed to the controller carries the lateral
    /// and heading errors. Task B uses the global frame.
    pub fn reference(&self, t: f64, stage_times: &[f64]) -> ReferenceTrajectory<f64> {
        let mut outputs = Vec::with_capacity(stage_times.len());
        let mut curvature = Vec::with_capacity(stage_times.len());
        for &ti in stage_times {
            match self.scenario.task {
                Task::A => {
                    let r = self.scenario.curve_radius;
                    let s = (self.speed * ti).min(r);
                    outputs.push([r - (r * r - s * s).sqrt(), (s / r).asin()]);
                    curvature.push(1.0 / r);
                }
                Task::B => {
                    let (y, _, _) = self.lane_change(t + ti);
                    let (heading, k) = self.lane_change_heading_curvature(t + ti);
                    outputs.push([y, heading]);
                    curvature.push(k);
                }
            }
        }
        ReferenceTrajectory { outputs, curvature }
    }

    /// Controller state: Task A swaps global position/heading for the road
    /// errors.
    pub fn controller_state(&self, state: &VehicleState<f64>, pose: &RoadPose) -> [f64; STATE_DIM] {
        let mut x = state.to_array();
        if self.scenario.task == Task::A {
            x[0] = pose.lateral_error;
            x[3] = pose.heading_error;
        }
        x
    }
}

/// Reference trajectory for `scenario` at time `t`, sampled at `stage_times`
/// ahead.
pub fn reference_for(
    scenario: &Scenario,
    speed: f64,
    t: f64,
    stage_times: &[f64],
) -> ReferenceTrajectory<f64> {
    Road::new(*scenario, speed).reference(t, stage_times)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tick {
    pub t: f64,
    pub state: VehicleState<f64>,
    pub lateral_error: f64,
    pub split: TorqueSplit<f64>,
    pub alpha: Option<f64>,
    pub alpha_ref: f64,
    pub ability: AbilityLevel,
    pub phase: Phase,
    pub hands_on: bool,
    pub attention: Attention,
    pub stiffness: f64,
    /// Largest KKT residual of the QPs solved this tick.
    pub kkt_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Events {
    pub turn_signal: Option<f64>,
    /// t₀.
    pub tor: f64,
    /// t₁.
    pub hands_on: Option<f64>,
    /// t₂.
    pub intervention: Option<f64>,
    /// t₃, first human-dominant tick.
    pub phase_switch: Option<f64>,
    /// t₄, reported takeover instant (entry into the completion band).
    pub completion: Option<f64>,
    /// When the completion hold was confirmed.
    pub completion_confirmed: Option<f64>,
}

impl Events {
    /// `t₀ ≤ t₁ ≤ t₂ ≤ t₃ ≤ t₄` over the events that occurred.
    pub fn ordered(&self) -> bool {
        let seq = [
            Some(self.tor),
            self.hands_on,
            self.intervention,
            self.phase_switch,
            self.completion,
        ];
        let present: Vec<f64> = seq.iter().flatten().copied().collect();
        present.windows(2).all(|w| w[0] <= w[1] + 1e-12)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMeta {
    pub participant: usize,
    pub task: Task,
    pub condition: Condition,
    pub seed: u64,
    pub noise_enabled: bool,
    pub coupling_sign: String,
    pub printed_sign_max_real_part: f64,
    pub profile: DriverProfile<f64>,
    pub scenario: Scenario,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub meta: RunMeta,
    pub events: Events,
    pub ticks: Vec<Tick>,
    /// Reason the run failed, if it did.
    pub failure: Option<String>,
}

pub const CSV_COLUMNS: [&str; 20] = [
    "t",
    "Y",
    "y",
    "y_dot",
    "psi",
    "psi_dot",
    "theta_sw_deg",
    "theta_sw_dot",
    "T_ref",
    "T_H",
    "T_hpt",
    "T_A",
    "u",
    "alpha",
    "alpha_ref",
    "ability",
    "phase",
    "hands_on",
    "attention",
    "K_current",
];

impl RunRecord {
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "{}", CSV_COLUMNS.join(","))?;
        for k in &self.ticks {
            let s = &k.state;
            let alpha = k.alpha.map_or(String::new(), |a| a.to_string());
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                k.t,
                s.lateral_position,
                s.body_lateral_position,
                s.lateral_velocity,
                s.yaw,
                s.yaw_rate,
                s.steering_angle.to_degrees(),
                s.steering_rate,
                k.split.required,
                k.split.driver,
                k.split.haptic,
                k.split.automation,
                k.split.total,
                alpha,
                k.alpha_ref,
                k.ability.as_str(),
                k.phase.as_str(),
                u8::from(k.hands_on),
                k.attention.as_str(),
                k.stiffness,
            )?;
        }
        Ok(())
    }

    pub fn csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }

    /// Events, metadata and summary diagnostics for the JSON sidecar.
    pub fn sidecar(&self) -> serde_json::Value {
        let max_kkt = self.ticks.iter().fold(0.0f64, |m, k| m.max(k.kkt_residual));
        serde_json::json!({
            "meta": self.meta,
            "events": self.events,
            "failure": self.failure,
            "ticks": self.ticks.len(),
            "max_kkt_residual": max_kkt,
            "columns": CSV_COLUMNS,
        })
    }

    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
}

/// Mutable state of one run.
struct RunState {
    vehicle: VehicleState<f64>,
    x_long: f64,
    driver: DriverState<f64>,
    status: AuthorityStatus<f64>,
    last_alpha: f64,
    required_prev: f64,
    haptic_prev: f64,
    full_authority: bool,
    intervention: Option<(f64, f64)>,
    /// Recent required torques, newest last, for the driver's delayed
    /// perception.
    required_history: VecDeque<f64>,
}

/// Runs one takeover.
///
/// Per control tick: measure, update the scripted driver state, compute T_ref,
/// assess ability and allowed authority, compute α and the phase, compute the
/// haptic torque (proposed) or the fading automation torque (baseline), blend,
/// log, advance the driver and integrate the plant over the tick.
pub fn run(
    scenario: &Scenario,
    profile: &DriverProfile<f64>,
    condition: Condition,
    config: &SimConfig,
    participant: usize,
) -> Result<RunRecord, SimError> {
    scenario.validate().map_err(SimError::Config)?;
    config.validate().map_err(SimError::Config)?;
    profile.validate().map_err(SimError::Config)?;

    let model = VehicleModel::new(config.vehicle)?;
    let speed = config.vehicle.speed;
    let road = Road::new(*scenario, speed);
    let th = config.thresholds;
    let dt = config.control_dt;
    let mut ref_mpc = ReferenceMpc::new(config.ref_mpc, model.clone(), dt);
    let mut guidance = HapticGuidance::new(config.haptic_mpc, dt);
    let stage_times = ref_mpc.stage_times();

    let mut driver_rng = profile.rng();
    driver_rng.set_stream(1);
    let mut sensor_rng = ChaCha8Rng::seed_from_u64(profile.rng_seed);
    sensor_rng.set_stream(2);

    // Start on the path in its steady state.
    let mut vehicle = VehicleState::zero();
    let initial_curvature = road.pose(0.0, 0.0, &vehicle).curvature;
    let trim = model.steady_turn(speed * initial_curvature);
    let (beta, _) = ref_mpc.feedforward(initial_curvature);
    vehicle.lateral_velocity = trim.lateral_velocity;
    vehicle.yaw_rate = speed * initial_curvature;
    vehicle.steering_angle = trim.steering_angle;
    vehicle.yaw = -beta;

    let mut st = RunState {
        vehicle,
        x_long: 0.0,
        driver: DriverState::at_rest(profile),
        status: AuthorityStatus::default(),
        last_alpha: 0.0,
        required_prev: trim.torque,
        haptic_prev: 0.0,
        full_authority: false,
        intervention: None,
        required_history: VecDeque::new(),
    };
    let delay_ticks = (profile.perception_delay / dt).round() as usize;

    let mut record = RunRecord {
        meta: RunMeta {
            participant,
            task: scenario.task,
            condition,
            seed: profile.rng_seed,
            noise_enabled: scenario.noise_enabled,
            coupling_sign: match model.coupling_sign {
                CouplingSign::AsPrinted => "as_printed".into(),
                CouplingSign::Textbook => "textbook".into(),
            },
            printed_sign_max_real_part: model.printed_sign_max_real_part,
            profile: *profile,
            scenario: *scenario,
        },
        events: Events {
            turn_signal: scenario.turn_signal_time(),
            tor: scenario.tor_time,
            ..Events::default()
        },
        ticks: Vec::new(),
        failure: None,
    };

    let steps = (scenario.duration / dt).round() as usize;
    let plant_steps = config.plant_steps_per_tick();
    let hpt_rate = (
        config.haptic_mpc.rate_min * dt,
        config.haptic_mpc.rate_max * dt,
    );

    for k in 0..steps {
        let t = k as f64 * dt;
        let after_tor = t >= scenario.tor_time - 1e-12;

        // Driver timeline.
        if after_tor {
            let s = scripted_state(profile, t - scenario.tor_time);
            st.driver.apply_script(&s);
        }
        st.driver.t = t;
        if st.driver.hands_on && record.events.hands_on.is_none() {
            record.events.hands_on = Some(t);
        }

        // Sensors.
        let truth = Measurement {
            driver_torque: st.driver.torque,
            yaw_rate: st.vehicle.yaw_rate,
        };
        let measured = apply_noise(
            truth,
            &config.noise,
            scenario.noise_enabled.then_some(&mut sensor_rng),
        );

        // Required torque.
        let pose = road.pose(t, st.x_long, &st.vehicle);
        let mut x_ctrl = road.controller_state(&st.vehicle, &pose);
        x_ctrl[4] = measured.yaw_rate;
        let reference = road.reference(t, &stage_times);
        let ref_out = match ref_mpc.compute(&x_ctrl, &reference, st.required_prev) {
            Ok(o) => o,
            Err(e) => {
                record.failure = Some(format!("reference controller fault at t={t:.2}: {e}"));
                break;
            }
        };
        let required = ref_out.torque;
        let mut kkt = ref_out.kkt.max();

        // Authority.
        let ability = classify_ability(st.driver.attention, st.driver.stiffness, &th);
        let t_h = measured.driver_torque;
        if st.driver.hands_on && st.intervention.is_none() && t_h.abs() > INTERVENTION_TORQUE {
            st.intervention = Some((t, required - t_h));
            record.events.intervention = Some(t);
        }
        let alpha_ref = match condition {
            Condition::Proposed => {
                let granted = allowed_authority(ability, st.last_alpha, &th);
                // Full authority, once granted, is kept while ability stays high.
                st.full_authority =
                    st.full_authority && ability == AbilityLevel::High || granted >= 1.0;
                if st.full_authority {
                    1.0
                } else {
                    granted
                }
            }
            Condition::Baseline => {
                if st.intervention.is_some() {
                    1.0
                } else {
                    0.0
                }
            }
        };
        let alpha = degree_of_intervention(t_h, required, alpha_ref, &th);
        if let Intervention::Defined(a) = alpha {
            st.last_alpha = a;
        }
        let completed_before = st.status.phase == Phase::Completed;
        let phase = phase_for(st.status.phase, alpha, &th);
        if phase == Phase::HumanDominant && record.events.phase_switch.is_none() {
            record.events.phase_switch = Some(t);
        }
        if phase != st.status.phase && phase != Phase::Completed {
            guidance.reset();
        }
        st.status.phase = phase;
        st.status.alpha = alpha.value();
        st.status.alpha_ref = alpha_ref;
        st.status.ability = ability;

        // Torques.
        let split = match condition {
            Condition::Proposed => {
                let haptic = if completed_before || !st.driver.hands_on {
                    0.0
                } else if phase == Phase::HumanDominant {
                    let a = assistance(alpha_ref, required, t_h, &config.haptic_mpc);
                    clamp(a, st.haptic_prev + hpt_rate.0, st.haptic_prev + hpt_rate.1)
                } else {
                    match guidance.compute(
                        t_h,
                        required,
                        alpha_ref,
                        st.haptic_prev,
                        th.t_ref_epsilon,
                    ) {
                        Ok(o) => {
                            kkt = kkt.max(o.kkt.max());
                            o.torque
                        }
                        Err(e) => {
                            record.failure =
                                Some(format!("haptic controller fault at t={t:.2}: {e}"));
                            break;
                        }
                    }
                };
                // The automation term is computed from the measured driver
                // torque; the column receives the true one.
                let mut s = blend(required, t_h, haptic, completed_before);
                s.driver = st.driver.torque;
                s.total = if completed_before {
                    st.driver.torque
                } else {
                    st.driver.torque + s.automation + s.haptic
                };
                s
            }
            Condition::Baseline => {
                let automation = match st.intervention {
                    None => required - t_h,
                    Some((t2, initial)) => baseline_fade(initial, t - t2),
                };
                baseline_split(required, st.driver.torque, automation)
            }
        };

        // Completion.
        if after_tor && !completed_before {
            let eligible = st.intervention.is_some()
                && match condition {
                    Condition::Proposed => st.driver.hands_on && ability == AbilityLevel::High,
                    Condition::Baseline => true,
                };
            let neutral = model.steady_turn(speed * pose.curvature).steering_angle;
            let sample = CompletionSample {
                t,
                alpha,
                steering_angle: st.vehicle.steering_angle,
                neutral_angle: neutral,
                fallback_eligible: eligible,
            };
            st.status = update_completion(st.status, &sample, dt, &th);
            if st.status.phase == Phase::Completed {
                record.events.completion = st.status.completed_at;
                record.events.completion_confirmed = st.status.confirmed_at;
            }
        }

        record.ticks.push(Tick {
            t,
            state: st.vehicle,
            lateral_error: pose.lateral_error,
            split,
            alpha: alpha.value(),
            alpha_ref,
            ability,
            phase,
            hands_on: st.driver.hands_on,
            attention: st.driver.attention,
            stiffness: st.driver.stiffness,
            kkt_residual: kkt,
        });

        // Driver reacts over the tick.
        st.required_history.push_back(required);
        if st.required_history.len() > delay_ticks + 1 {
            st.required_history.pop_front();
        }
        let perceived = st.required_history[0];
        st.driver = match condition {
            Condition::Proposed => proposed_reaction_step(
                &st.driver,
                split.haptic,
                perceived,
                profile,
                dt,
                &mut driver_rng,
            ),
            Condition::Baseline => {
                baseline_reaction_step(&st.driver, perceived, profile, dt, &mut driver_rng)
            }
        };
        st.required_prev = required;
        st.haptic_prev = split.haptic;

        // Plant.
        for _ in 0..plant_steps {
            let (s, c) = st.vehicle.yaw.sin_cos();
            st.x_long += config.plant_dt * (speed * c - st.vehicle.lateral_velocity * s);
            match model.step_euler(&st.vehicle, split.total, config.plant_dt) {
                Ok(next) => st.vehicle = next,
                Err(e) => {
                    record.failure = Some(format!("integration blowup at t={t:.2}: {e}"));
                    break;
                }
            }
        }
        if record.failure.is_some() {
            break;
        }
        let pose_next = road.pose(t + dt, st.x_long, &st.vehicle);
        if pose_next.lateral_error.abs() > scenario.lane_width / 2.0 {
            record.failure = Some(format!(
                "lane departure at t={:.2}: lateral error {:.3} m",
                t + dt,
                pose_next.lateral_error
            ));
            break;
        }
        if let Some(tc) = record.events.completion_confirmed {
            if t + dt >= tc + scenario.post_takeover - 1e-9 {
                break;
            }
        }
    }
    Ok(record)
}
