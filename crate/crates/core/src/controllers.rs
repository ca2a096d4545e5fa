//! Reference lane-keeping MPC, two-phase haptic controller, torque blending
//! and the fade-out baseline.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dynamics::{LinearModel, VehicleModel, STATE_DIM};
use crate::linalg::Matrix;
use crate::qp::{condense, solve, HorizonSpec, KktDiagnostics, PredictionModel, QpError, QpStatus};
use crate::scalar::{clamp, lit, Scalar};

/// Slope of the baseline automation-torque fade (N·m/s).
pub const BASELINE_FADE_RATE: f64 = 2.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControllerError {
    #[error(transparent)]
    Qp(#[from] QpError),
    #[error("{controller} QP ended with status {status:?} (KKT residual {residual:e})")]
    NotOptimal {
        controller: &'static str,
        status: QpStatus,
        residual: f64,
    },
    #[error("reference has {got} stages, controller horizon is {expected}")]
    ReferenceLength { got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefMpcParams<T> {
    /// Weight on (Y, ψ) tracking error.
    #[serde(alias = "W1")]
    pub tracking_weight: [[T; 2]; 2],
    /// Weight on deviation from the steady-turn torque.
    #[serde(alias = "Q1")]
    pub effort_weight: T,
    pub torque_min: T,
    pub torque_max: T,
    /// N·m/s.
    pub rate_min: T,
    pub rate_max: T,
    pub horizon: usize,
    /// Control ticks each horizon stage holds its input.
    pub block: usize,
}

impl<T: Scalar> Default for RefMpcParams<T> {
    fn default() -> Self {
        Self {
            tracking_weight: [[lit(2.5e3), T::zero()], [T::zero(), lit(7e3)]],
            effort_weight: lit(4e2),
            torque_min: lit(-10.0),
            torque_max: lit(10.0),
            rate_min: lit(-10.0),
            rate_max: lit(10.0),
            horizon: 10,
            block: 10,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HapticMpcParams<T> {
    /// Weight on (α − α_ref).
    #[serde(alias = "W")]
    pub tracking_weight: T,
    #[serde(alias = "Q")]
    pub effort_weight: T,
    pub torque_min: T,
    pub torque_max: T,
    /// N·m/s.
    pub rate_min: T,
    pub rate_max: T,
    /// τ_H of the prediction model (s).
    pub reaction_time_constant: T,
    /// λ of the prediction model.
    pub guidance_gain: T,
    pub horizon: usize,
}

impl<T: Scalar> Default for HapticMpcParams<T> {
    fn default() -> Self {
        Self {
            tracking_weight: lit(1e2),
            effort_weight: T::one(),
            torque_min: lit(-10.0),
            torque_max: lit(10.0),
            rate_min: lit(-10.0),
            rate_max: lit(10.0),
            reaction_time_constant: lit(0.5),
            guidance_gain: lit(6.0),
            horizon: 10,
        }
    }
}

fn check_weights<T: Scalar>(
    name: &str,
    min: T,
    max: T,
    rmin: T,
    rmax: T,
    horizon: usize,
) -> Result<(), String> {
    if !(min <= max) || !(rmin <= rmax) {
        return Err(format!("{name}: bounds must satisfy min <= max"));
    }
    if horizon == 0 {
        return Err(format!("{name}: horizon must be at least 1"));
    }
    Ok(())
}

impl<T: Scalar> RefMpcParams<T> {
    pub fn validate(&self) -> Result<(), String> {
        check_weights(
            "ref_mpc",
            self.torque_min,
            self.torque_max,
            self.rate_min,
            self.rate_max,
            self.horizon,
        )?;
        let w = self.tracking_weight;
        let det = w[0][0] * w[1][1] - w[0][1] * w[1][0];
        if w[0][1] != w[1][0] || w[0][0] < T::zero() || w[1][1] < T::zero() || det < T::zero() {
            return Err("ref_mpc.tracking_weight must be symmetric PSD".into());
        }
        if !(self.effort_weight > T::zero()) || self.block == 0 {
            return Err("ref_mpc.effort_weight must be positive and block at least 1".into());
        }
        Ok(())
    }
}

impl<T: Scalar> HapticMpcParams<T> {
    pub fn validate(&self) -> Result<(), String> {
        check_weights(
            "haptic_mpc",
            self.torque_min,
            self.torque_max,
            self.rate_min,
            self.rate_max,
            self.horizon,
        )?;
        if !(self.tracking_weight >= T::zero()) || !(self.effort_weight > T::zero()) {
            return Err(
                "haptic_mpc weights must be non-negative with positive effort weight".into(),
            );
        }
        if !(self.reaction_time_constant > T::zero()) || !(self.guidance_gain > T::zero()) {
            return Err("haptic_mpc model constants must be positive".into());
        }
        Ok(())
    }
}

/// Road-frame reference at the end of each horizon stage.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory<T> {
    /// Centerline lateral position and heading (Y_ref, ψ_road).
    pub outputs: Vec<[T; 2]>,
    /// Path curvature (1/m), positive to the left.
    pub curvature: Vec<T>,
}

/// Result of one controller evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MpcOutput<T> {
    pub torque: T,
    pub kkt: KktDiagnostics<T>,
    pub iterations: usize,
}

/// Lane-keeping MPC producing the required torque T_ref.
///
/// The prediction model is the Euler discretization at the control step. Each
/// of the `horizon` stages holds its input for `block` steps, so the horizon
/// spans `horizon · block · dt`. Curvature enters as a feedforward: the effort
/// term penalizes deviation from the steady-turn torque and the heading target
/// carries the steady-state sideslip.
#[derive(Debug, Clone)]
pub struct ReferenceMpc<T> {
    pub params: RefMpcParams<T>,
    model: VehicleModel<T>,
    linear: LinearModel<T>,
    warm: Option<Vec<T>>,
}

impl<T: Scalar> ReferenceMpc<T> {
    pub fn new(params: RefMpcParams<T>, model: VehicleModel<T>, dt: T) -> Self {
        let linear = model.linearize(dt);
        Self {
            params,
            model,
            linear,
            warm: None,
        }
    }

    pub fn linear_model(&self) -> &LinearModel<T> {
        &self.linear
    }

    /// Stage-end times relative to now.
    pub fn stage_times(&self) -> Vec<T> {
        let stage = self.linear.dt * lit::<T>(self.params.block as f64);
        (1..=self.params.horizon)
            .map(|i| stage * lit::<T>(i as f64))
            .collect()
    }

    /// Steady-state sideslip angle and torque for a path curvature.
    pub fn feedforward(&self, curvature: T) -> (T, T) {
        let trim = self.model.steady_turn(self.model.params.speed * curvature);
        (trim.lateral_velocity / self.model.params.speed, trim.torque)
    }

    pub fn compute(
        &mut self,
        x: &[T; STATE_DIM],
        reference: &ReferenceTrajectory<T>,
        previous: T,
    ) -> Result<MpcOutput<T>, ControllerError> {
        let p = &self.params;
        if reference.outputs.len() != p.horizon || reference.curvature.len() != p.horizon {
            return Err(ControllerError::ReferenceLength {
                got: reference.outputs.len().min(reference.curvature.len()),
                expected: p.horizon,
            });
        }
        let mut targets = Vec::with_capacity(p.horizon);
        let mut input_ref = Vec::with_capacity(p.horizon);
        for (out, &k) in reference.outputs.iter().zip(&reference.curvature) {
            let (beta, torque) = self.feedforward(k);
            targets.push(vec![out[0], out[1] - beta]);
            input_ref.push(torque);
        }
        let w = p.tracking_weight;
        let spec = HorizonSpec {
            horizon: p.horizon,
            block: p.block,
            dt: self.linear.dt,
            output_weight: Matrix::from_rows(&[&w[0], &w[1]]),
            input_weight: p.effort_weight,
            input_min: p.torque_min,
            input_max: p.torque_max,
            rate_min: p.rate_min,
            rate_max: p.rate_max,
        };
        let model = PredictionModel {
            a: &self.linear.a_d,
            b: &self.linear.b_d,
            c: &self.linear.c,
        };
        let condensed = condense(model, &spec, x, &targets, &input_ref, previous)?;
        let sol = solve(&condensed.problem, self.warm.as_deref())?;
        if sol.status != QpStatus::Optimal {
            return Err(ControllerError::NotOptimal {
                controller: "reference",
                status: sol.status,
                residual: sol.kkt_residual.to_f64_lossy(),
            });
        }
        let torque = sol.x[0];
        self.warm = Some(sol.x);
        Ok(MpcOutput {
            torque,
            kkt: sol.kkt,
            iterations: sol.iterations,
        })
    }
}

/// Phase-1 predictive guidance: steers the driver's torque so that
/// `α = T_H / T_ref` approaches `α_ref`, using the first-order reaction model.
#[derive(Debug, Clone)]
pub struct HapticGuidance<T> {
    pub params: HapticMpcParams<T>,
    pub dt: T,
    warm: Option<Vec<T>>,
}

impl<T: Scalar> HapticGuidance<T> {
    pub fn new(params: HapticMpcParams<T>, dt: T) -> Self {
        Self {
            params,
            dt,
            warm: None,
        }
    }

    /// Drops the warm start (e.g. after a phase switch).
    pub fn reset(&mut self) {
        self.warm = None;
    }

    /// Returns 0 without solving when `|T_ref|` is below `t_ref_epsilon`.
    pub fn compute(
        &mut self,
        driver_torque: T,
        required_torque: T,
        alpha_ref: T,
        previous: T,
        t_ref_epsilon: T,
    ) -> Result<MpcOutput<T>, ControllerError> {
        if !(required_torque.abs() >= t_ref_epsilon) {
            self.warm = None;
            return Ok(MpcOutput {
                torque: T::zero(),
                kkt: KktDiagnostics::default(),
                iterations: 0,
            });
        }
        let p = &self.params;
        let k = self.dt / p.reaction_time_constant;
        let a = Matrix::from_diagonal(&[T::one() - k]);
        let b = [k * p.guidance_gain];
        let c = Matrix::from_diagonal(&[T::one() / required_torque]);
        let spec = HorizonSpec {
            horizon: p.horizon,
            block: 1,
            dt: self.dt,
            output_weight: Matrix::from_diagonal(&[p.tracking_weight]),
            input_weight: p.effort_weight,
            input_min: p.torque_min,
            input_max: p.torque_max,
            rate_min: p.rate_min,
            rate_max: p.rate_max,
        };
        let targets = vec![vec![alpha_ref]; p.horizon];
        let zeros = vec![T::zero(); p.horizon];
        let model = PredictionModel {
            a: &a,
            b: &b,
            c: &c,
        };
        let condensed = condense(model, &spec, &[driver_torque], &targets, &zeros, previous)?;
        let sol = solve(&condensed.problem, self.warm.as_deref())?;
        if sol.status != QpStatus::Optimal {
            return Err(ControllerError::NotOptimal {
                controller: "haptic",
                status: sol.status,
                residual: sol.kkt_residual.to_f64_lossy(),
            });
        }
        let torque = sol.x[0];
        // Shift by one tick for the next warm start.
        let mut shifted = sol.x[1..].to_vec();
        shifted.push(*sol.x.last().expect("horizon >= 1"));
        self.warm = Some(shifted);
        Ok(MpcOutput {
            torque,
            kkt: sol.kkt,
            iterations: sol.iterations,
        })
    }
}

/// Phase-2 compensatory assistance `α_ref·T_ref − T_H`, clamped to the box.
pub fn assistance<T: Scalar>(
    alpha_ref: T,
    required_torque: T,
    driver_torque: T,
    params: &HapticMpcParams<T>,
) -> T {
    clamp(
        alpha_ref * required_torque - driver_torque,
        params.torque_min,
        params.torque_max,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TorqueSplit<T> {
    /// T_ref.
    pub required: T,
    /// T_H.
    pub driver: T,
    /// T_hpt.
    pub haptic: T,
    /// T_A.
    pub automation: T,
    /// u, the torque reaching the column.
    pub total: T,
}

/// Shared-control split: before completion the automation makes up the
/// difference so the column receives exactly T_ref; afterwards the driver
/// alone steers.
pub fn blend<T: Scalar>(required: T, driver: T, haptic: T, completed: bool) -> TorqueSplit<T> {
    if completed {
        TorqueSplit {
            required,
            driver,
            haptic: T::zero(),
            automation: T::zero(),
            total: driver,
        }
    } else {
        TorqueSplit {
            required,
            driver,
            haptic,
            automation: required - driver - haptic,
            total: required,
        }
    }
}

/// Automation torque `t` seconds into the fade from `initial`.
pub fn baseline_fade<T: Scalar>(initial: T, t: T) -> T {
    let mag = (initial.abs() - lit::<T>(BASELINE_FADE_RATE) * t.max(T::zero())).max(T::zero());
    if initial < T::zero() {
        -mag
    } else {
        mag
    }
}

/// Baseline split: the driver torque plus the (possibly fading) automation
/// torque, with no haptic term.
pub fn baseline_split<T: Scalar>(required: T, driver: T, automation: T) -> TorqueSplit<T> {
    TorqueSplit {
        required,
        driver,
        haptic: T::zero(),
        automation,
        total: driver + automation,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn assistance_examples() {
        let p = HapticMpcParams::<f64>::default();
        assert!((assistance(0.9, 2.0, 1.5, &p) - 0.3).abs() < 1e-12);
        assert_eq!(assistance(0.5, 2.0, 1.0, &p), 0.0);
        assert!((assistance(1.0, 2.0, 2.5, &p) + 0.5).abs() < 1e-12);
        assert_eq!(assistance(1.0, 50.0, 0.0, &p), 10.0);
    }

    #[test]
    fn blend_examples() {
        let s = blend(2.0f64, 0.5, 0.3, false);
        assert!((s.automation - 1.2).abs() < 1e-12);
        assert_eq!(s.total, 2.0);
        let s = blend(2.0, 2.0, 0.4, true);
        assert_eq!((s.total, s.automation, s.haptic), (2.0, 0.0, 0.0));
        let s = blend(-1.7, 0.0, 0.0, false);
        assert_eq!(s.automation, -1.7);
    }

    #[test]
    fn fade_examples() {
        assert_eq!(baseline_fade(5.0, 1.0), 2.5);
        assert_eq!(baseline_fade(5.0, 2.0), 0.0);
        assert!((baseline_fade(-3.0f64, 0.4) + 2.0).abs() < 1e-12);
        assert_eq!(baseline_fade(1.0, -1.0), 1.0);
    }

    #[test]
    fn guidance_silent_below_epsilon() {
        let mut g = HapticGuidance::new(HapticMpcParams::<f64>::default(), 0.02);
        assert_eq!(g.compute(0.0, 0.1, 0.3, 0.0, 0.2).unwrap().torque, 0.0);
    }
}
