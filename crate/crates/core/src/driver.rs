//! Synthetic driver.
//!
//! Stands in for the human participant: arm/column admittance, the first-order
//! reaction to haptic guidance, an unguided tracking model for the fade-out
//! baseline, an online stiffness estimator and the scripted recovery timeline
//! that replaces camera-based monitoring.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::VehicleParams;
use crate::metrics::moving_average;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Attention {
    Low,
    High,
}

impl Attention {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::High => "high",
        }
    }
}

/// Arm and steering-column second-order parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuromuscularParams<T> {
    pub arm_inertia: T,
    pub arm_damping: T,
    pub arm_stiffness: T,
    pub column_inertia: T,
    pub column_damping: T,
    pub column_stiffness: T,
}

impl<T: Scalar> Default for NeuromuscularParams<T> {
    fn default() -> Self {
        Self::with_column(&VehicleParams::default(), lit(2.5))
    }
}

impl<T: Scalar> NeuromuscularParams<T> {
    /// Column side taken from the vehicle; arm inertia and damping are
    /// calibration defaults.
    pub fn with_column(vehicle: &VehicleParams<T>, arm_stiffness: T) -> Self {
        Self {
            arm_inertia: lit(0.05),
            arm_damping: lit(0.4),
            arm_stiffness,
            column_inertia: vehicle.steering_inertia,
            column_damping: vehicle.steering_damping,
            column_stiffness: vehicle.steering_stiffness,
        }
    }

    pub fn inertia(&self) -> T {
        self.arm_inertia + self.column_inertia
    }

    pub fn damping(&self) -> T {
        self.arm_damping + self.column_damping
    }

    pub fn stiffness(&self) -> T {
        self.arm_stiffness + self.column_stiffness
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.inertia() > T::zero()) {
            return Err("arm_inertia + column_inertia must be positive".into());
        }
        if !(self.arm_stiffness >= T::zero()) {
            return Err("arm_stiffness must be non-negative".into());
        }
        Ok(())
    }
}

/// Wheel angle response of `J θ̈ + B θ̇ + K θ = T_H` from rest, explicit Euler.
pub fn admittance_response<T: Scalar>(
    params: &NeuromuscularParams<T>,
    torque: &[T],
    dt: T,
) -> Vec<T> {
    let (j, b, k) = (params.inertia(), params.damping(), params.stiffness());
    let mut theta = T::zero();
    let mut rate = T::zero();
    let mut out = Vec::with_capacity(torque.len());
    for &tau in torque {
        out.push(theta);
        let accel = (tau - b * rate - k * theta) / j;
        theta += dt * rate;
        rate += dt * accel;
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DriverProfile<T> {
    /// τ_H (s).
    pub reaction_time_constant: T,
    /// λ.
    pub guidance_gain: T,
    /// TOR to hands-on (s); infinite means never.
    pub reaction_delay: T,
    pub k_relaxed: T,
    pub k_engaged: T,
    /// Stiffness ramp duration from hands-on (s).
    pub k_ramp_time: T,
    /// TOR to high attention (s); also the duration of the awareness ramp.
    pub attention_recovery_delay: T,
    /// Fraction of the required torque the driver applies unaided.
    pub baseline_gain: T,
    /// Steady SD of the driver's torque error (N·m).
    pub baseline_noise_sd: T,
    /// Correlation time of the torque error (s).
    pub noise_corr_time: T,
    /// Delay with which the driver perceives the required torque (s).
    pub perception_delay: T,
    pub rng_seed: u64,
}

impl<T: Scalar> Default for DriverProfile<T> {
    fn default() -> Self {
        Self {
            reaction_time_constant: lit(0.5),
            guidance_gain: lit(6.0),
            reaction_delay: lit(1.2),
            k_relaxed: lit(0.5),
            k_engaged: lit(4.0),
            k_ramp_time: lit(1.75),
            attention_recovery_delay: lit(2.25),
            baseline_gain: lit(1.1),
            baseline_noise_sd: lit(0.25),
            noise_corr_time: lit(0.5),
            perception_delay: lit(0.3),
            rng_seed: 0,
        }
    }
}

impl<T: Scalar> DriverProfile<T> {
    pub fn validate(&self) -> Result<(), String> {
        let z = T::zero();
        if !(self.reaction_time_constant > z) || !(self.guidance_gain > z) {
            return Err("reaction_time_constant and guidance_gain must be positive".into());
        }
        if !(self.reaction_delay >= z)
            || !(self.attention_recovery_delay >= z)
            || !(self.k_ramp_time >= z)
        {
            return Err("delays must be non-negative".into());
        }
        if !(self.k_relaxed < self.k_engaged) {
            return Err("k_relaxed must be below k_engaged".into());
        }
        if !(self.perception_delay >= z) {
            return Err("perception_delay must be non-negative".into());
        }
        if !(self.baseline_noise_sd >= z) || !(self.noise_corr_time > z) {
            return Err("noise sd must be non-negative and correlation time positive".into());
        }
        Ok(())
    }

    /// Per-run RNG.
    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.rng_seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriverState<T> {
    pub t: T,
    /// T_H (N·m).
    pub torque: T,
    /// K_current (N·m/rad).
    pub stiffness: T,
    pub attention: Attention,
    pub hands_on: bool,
    /// Situation awareness in [0, 1], scales the driver's own intent.
    pub awareness: T,
    /// Current value of the correlated torque error (N·m).
    pub noise: T,
}

impl<T: Scalar> DriverState<T> {
    pub fn at_rest(profile: &DriverProfile<T>) -> Self {
        Self {
            t: T::zero(),
            torque: T::zero(),
            stiffness: profile.k_relaxed,
            attention: Attention::Low,
            hands_on: false,
            awareness: T::zero(),
            noise: T::zero(),
        }
    }
}

/// Timeline fields of the driver at `t_since_tor` seconds after the TOR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScriptedState<T> {
    pub attention: Attention,
    pub hands_on: bool,
    pub stiffness: T,
    pub awareness: T,
}

pub fn scripted_state<T: Scalar>(profile: &DriverProfile<T>, t_since_tor: T) -> ScriptedState<T> {
    let hands_on = t_since_tor >= profile.reaction_delay;
    let attention = if t_since_tor >= profile.attention_recovery_delay {
        Attention::High
    } else {
        Attention::Low
    };
    let since_hands = if hands_on {
        t_since_tor - profile.reaction_delay
    } else {
        T::zero()
    };
    let ramp = |duration: T| {
        if !hands_on {
            T::zero()
        } else if duration > T::zero() {
            (since_hands / duration).min(T::one())
        } else {
            T::one()
        }
    };
    ScriptedState {
        attention,
        hands_on,
        stiffness: profile.k_relaxed
            + (profile.k_engaged - profile.k_relaxed) * ramp(profile.k_ramp_time),
        awareness: ramp(profile.attention_recovery_delay),
    }
}

impl<T: Scalar> DriverState<T> {
    pub fn apply_script(&mut self, s: &ScriptedState<T>) {
        self.attention = s.attention;
        self.hands_on = s.hands_on;
        self.stiffness = s.stiffness;
        self.awareness = s.awareness;
    }
}

/// Euler step of `τ_H Ṫ_H + T_H = λ T_hpt`. No change without hands on.
pub fn guided_reaction_step<T: Scalar>(
    state: &DriverState<T>,
    haptic_torque: T,
    profile: &DriverProfile<T>,
    dt: T,
) -> DriverState<T> {
    lag_step(state, profile.guidance_gain * haptic_torque, profile, dt)
}

fn lag_step<T: Scalar>(
    state: &DriverState<T>,
    target: T,
    profile: &DriverProfile<T>,
    dt: T,
) -> DriverState<T> {
    let mut next = *state;
    next.t += dt;
    if state.hands_on {
        next.torque += dt / profile.reaction_time_constant * (target - state.torque);
    }
    next
}

/// Stationary SD of the torque error process that makes the lagged driver
/// torque have SD `baseline_noise_sd` (exact for the discrete recursion).
pub fn noise_drive_sd<T: Scalar>(profile: &DriverProfile<T>, dt: T) -> T {
    let a = T::one() - dt / profile.reaction_time_constant;
    let phi = (-dt / profile.noise_corr_time).exp();
    let one = T::one();
    let gain_sq = (one - a) * (one - a) * (one + a * phi) / ((one - a * a) * (one - a * phi));
    profile.baseline_noise_sd / gain_sq.sqrt()
}

/// Advances the AR(1) torque error.
pub fn advance_noise<T: Scalar, R: Rng + ?Sized>(
    state: &mut DriverState<T>,
    profile: &DriverProfile<T>,
    dt: T,
    rng: &mut R,
) {
    let phi = (-dt / profile.noise_corr_time).exp();
    let sd = noise_drive_sd(profile, dt);
    let z: f64 = StandardNormal.sample(rng);
    state.noise = phi * state.noise + sd * (T::one() - phi * phi).sqrt() * lit::<T>(z);
}

/// Unguided driver: lag toward `baseline_gain · awareness · T_ref` plus the
/// correlated torque error.
pub fn baseline_reaction_step<T: Scalar, R: Rng + ?Sized>(
    state: &DriverState<T>,
    perceived_required_torque: T,
    profile: &DriverProfile<T>,
    dt: T,
    rng: &mut R,
) -> DriverState<T> {
    let mut s = *state;
    if s.hands_on {
        advance_noise(&mut s, profile, dt, rng);
    }
    let target = profile.baseline_gain * s.awareness * perceived_required_torque + s.noise;
    lag_step(&s, target, profile, dt)
}

/// Guided driver with haptic feedback: the first-order lag response to `T_hpt` on top of
/// the same driver's own intent and torque error. The wheel conveys the
/// required torque, so the intent term is not scaled by awareness.
pub fn proposed_reaction_step<T: Scalar, R: Rng + ?Sized>(
    state: &DriverState<T>,
    haptic_torque: T,
    perceived_required_torque: T,
    profile: &DriverProfile<T>,
    dt: T,
    rng: &mut R,
) -> DriverState<T> {
    let mut s = *state;
    if s.hands_on {
        advance_noise(&mut s, profile, dt, rng);
    }
    let target = profile.guidance_gain * haptic_torque
        + profile.baseline_gain * perceived_required_torque
        + s.noise;
    lag_step(&s, target, profile, dt)
}

/// Recursive least-squares estimate of the total stiffness in
/// `T_H − J θ̈ − B θ̇ = K θ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StiffnessEstimate<T> {
    pub stiffness: T,
    pub covariance: T,
    pub samples: usize,
    pub forgetting: T,
}

impl<T: Scalar> StiffnessEstimate<T> {
    pub fn new(initial: T) -> Self {
        Self {
            stiffness: initial,
            covariance: lit(100.0),
            samples: 0,
            forgetting: lit(0.995),
        }
    }

    /// One update; samples with |θ| below 1e-4 rad carry no information and
    /// are skipped.
    pub fn update(
        mut self,
        params: &NeuromuscularParams<T>,
        theta: T,
        rate: T,
        accel: T,
        torque: T,
    ) -> Self {
        if theta.abs() < lit(1e-4)
            || !(theta.is_finite() && rate.is_finite() && accel.is_finite() && torque.is_finite())
        {
            return self;
        }
        let y = torque - params.inertia() * accel - params.damping() * rate;
        let p = self.covariance;
        let gain = p * theta / (self.forgetting + theta * p * theta);
        self.stiffness += gain * (y - self.stiffness * theta);
        self.covariance = (p - gain * theta * p) / self.forgetting;
        self.samples += 1;
        self
    }

    /// Runs the estimator over uniformly sampled angle and torque traces.
    /// Rates and accelerations are forward differences; all four signals pass
    /// through the same moving average so the linear relation is preserved.
    pub fn fit_trace(
        mut self,
        params: &NeuromuscularParams<T>,
        theta: &[T],
        torque: &[T],
        dt: T,
        window: usize,
    ) -> Self {
        let n = theta.len().min(torque.len());
        if n < 3 {
            return self;
        }
        let m = n - 2;
        let rate: Vec<T> = (0..m + 1).map(|k| (theta[k + 1] - theta[k]) / dt).collect();
        let accel: Vec<T> = (0..m).map(|k| (rate[k + 1] - rate[k]) / dt).collect();
        let window = if window % 2 == 1 && window <= m {
            window
        } else {
            1
        };
        let f = |v: &[T]| moving_average(&v[..m], window).unwrap_or_else(|_| v[..m].to_vec());
        let (th, ra, ac, tq) = (f(theta), f(&rate), f(&accel), f(torque));
        for k in 0..m {
            self = self.update(params, th[k], ra[k], ac[k], tq[k]);
        }
        self
    }
}

/// Uniform ranges used to draw a virtual cohort.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CohortDistributions {
    pub reaction_delay: (f64, f64),
    pub attention_recovery_delay: (f64, f64),
    pub reaction_time_constant: (f64, f64),
    pub guidance_gain: f64,
    pub k_relaxed: f64,
    pub k_engaged: f64,
    pub k_ramp_time: (f64, f64),
    pub baseline_gain: (f64, f64),
    pub baseline_noise_sd: (f64, f64),
    pub noise_corr_time: (f64, f64),
    pub perception_delay: (f64, f64),
}

impl Default for CohortDistributions {
    fn default() -> Self {
        Self {
            reaction_delay: (0.8, 1.6),
            attention_recovery_delay: (1.5, 3.0),
            reaction_time_constant: (0.4, 0.6),
            guidance_gain: 6.0,
            k_relaxed: 0.5,
            k_engaged: 4.0,
            k_ramp_time: (1.0, 2.5),
            baseline_gain: (0.8, 1.2),
            baseline_noise_sd: (0.15, 0.35),
            noise_corr_time: (0.4, 0.6),
            perception_delay: (0.2, 0.4),
        }
    }
}

impl CohortDistributions {
    pub fn validate(&self) -> Result<(), String> {
        let ranges = [
            ("reaction_delay", self.reaction_delay),
            ("attention_recovery_delay", self.attention_recovery_delay),
            ("reaction_time_constant", self.reaction_time_constant),
            ("k_ramp_time", self.k_ramp_time),
            ("baseline_gain", self.baseline_gain),
            ("baseline_noise_sd", self.baseline_noise_sd),
            ("noise_corr_time", self.noise_corr_time),
            ("perception_delay", self.perception_delay),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(format!(
                    "cohort.{name} must be a finite range with 0 <= lo <= hi"
                ));
            }
        }
        if self.reaction_time_constant.0 <= 0.0 || self.noise_corr_time.0 <= 0.0 {
            return Err("cohort time constants must be positive".into());
        }
        Ok(())
    }

    /// Draws `n` profiles. Participant `i` (1-based) gets its own seed derived from
    /// `seed`, so profiles do not depend on cohort size.
    pub fn sample<T: Scalar>(&self, n: usize, seed: u64) -> Vec<DriverProfile<T>> {
        (1..=n).map(|i| self.sample_one(i, seed)).collect()
    }

    pub fn sample_one<T: Scalar>(&self, participant: usize, seed: u64) -> DriverProfile<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(participant as u64 + 1);
        let mut draw = |(lo, hi): (f64, f64)| -> T {
            if hi > lo {
                lit(rng.random_range(lo..=hi))
            } else {
                lit(lo)
            }
        };
        let mut p = DriverProfile {
            reaction_delay: draw(self.reaction_delay),
            attention_recovery_delay: draw(self.attention_recovery_delay),
            reaction_time_constant: draw(self.reaction_time_constant),
            guidance_gain: lit(self.guidance_gain),
            k_relaxed: lit(self.k_relaxed),
            k_engaged: lit(self.k_engaged),
            k_ramp_time: draw(self.k_ramp_time),
            baseline_gain: draw(self.baseline_gain),
            baseline_noise_sd: draw(self.baseline_noise_sd),
            noise_corr_time: draw(self.noise_corr_time),
            perception_delay: draw(self.perception_delay),
            rng_seed: 0,
        };
        p.rng_seed = rng.random();
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn admittance_static_gain() {
        let p = NeuromuscularParams::<f64>::default();
        assert!((p.stiffness() - 14.5).abs() < 1e-12);
        let theta = admittance_response(&p, &vec![1.0; 2000], 0.01);
        assert!((theta.last().unwrap() - 1.0 / 14.5).abs() < 1e-6);
        let stiff = NeuromuscularParams {
            arm_stiffness: 17.0,
            ..p
        };
        let theta2 = admittance_response(&stiff, &vec![1.0; 2000], 0.01);
        assert!((theta2.last().unwrap() * 2.0 - theta.last().unwrap()).abs() < 1e-6);
        assert!(admittance_response(&p, &[0.0; 50], 0.01)
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn scripted_timeline() {
        let p = DriverProfile::<f64>::default();
        let s0 = scripted_state(&p, 0.0);
        assert_eq!(
            (s0.attention, s0.hands_on, s0.stiffness),
            (Attention::Low, false, 0.5)
        );
        let end = scripted_state(&p, p.reaction_delay + p.k_ramp_time);
        assert_eq!(end.stiffness, 4.0);
        let mid = scripted_state(&p, p.reaction_delay + p.k_ramp_time / 2.0);
        assert!((mid.stiffness - 2.25).abs() < 1e-12);
        let never = DriverProfile {
            reaction_delay: f64::INFINITY,
            ..p
        };
        let s = scripted_state(&never, 1e6);
        assert!(!s.hands_on && s.stiffness == 0.5 && s.awareness == 0.0);
    }

    #[test]
    fn hands_off_freezes_torque() {
        let p = DriverProfile::<f64>::default();
        let s = DriverState {
            torque: 1.0,
            ..DriverState::at_rest(&p)
        };
        assert_eq!(guided_reaction_step(&s, 3.0, &p, 0.02).torque, 1.0);
    }

    #[test]
    fn stiffness_rls_on_noiseless_data() {
        let p = NeuromuscularParams::<f64>::default();
        let dt = 0.01;
        let torque: Vec<f64> = (0..202)
            .map(|k| 1.0 + 0.5 * (k as f64 * 0.07).sin())
            .collect();
        let theta = admittance_response(&p, &torque, dt);
        let est = StiffnessEstimate::new(0.0).fit_trace(&p, &theta, &torque, dt, 5);
        assert!(
            (est.stiffness - 14.5).abs() / 14.5 < 0.01,
            "{}",
            est.stiffness
        );
        assert!(est.covariance > 0.0);
    }

    #[test]
    fn stiffness_skips_unobservable_samples() {
        let p = NeuromuscularParams::<f64>::default();
        let est = StiffnessEstimate::new(3.0);
        assert_eq!(est.update(&p, 1e-5, 0.0, 0.0, 1.0), est);
        assert_eq!(est.fit_trace(&p, &[], &[], 0.01, 5), est);
    }

    #[test]
    fn cohort_draws_respect_ranges() {
        let d = CohortDistributions::default();
        let profiles: Vec<DriverProfile<f64>> = d.sample(26, 11);
        for p in &profiles {
            assert!((0.8..=1.6).contains(&p.reaction_delay));
            assert!((0.4..=0.6).contains(&p.reaction_time_constant));
            assert_eq!(p.guidance_gain, 6.0);
            p.validate().unwrap();
        }
        // Prefix-stable in cohort size.
        let few: Vec<DriverProfile<f64>> = d.sample(3, 11);
        assert_eq!(&profiles[..3], &few[..]);
    }
}
