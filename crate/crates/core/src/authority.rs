//! Driver ability assessment, allowed authority, degree of intervention and
//! takeover completion.

use serde::{Deserialize, Serialize};

use crate::driver::Attention;
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AbilityLevel {
    Low,
    Medium,
    High,
}

impl AbilityLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Low => "low",
            Self::Medium => "medium",
            Self::High => "high",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    AutomationDominant,
    HumanDominant,
    Completed,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::AutomationDominant => "automation",
            Self::HumanDominant => "human",
            Self::Completed => "completed",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds<T> {
    pub alpha1: T,
    pub alpha2: T,
    pub alpha3: T,
    /// Hold time for completion (s).
    pub hold_duration: T,
    /// Arm stiffness above which the muscle state counts as high (N·m/rad).
    pub stiffness_threshold: T,
    /// Below this |T_ref| the intervention ratio is undefined (N·m).
    pub t_ref_epsilon: T,
    /// Angle band for the straight-road completion fallback (rad).
    pub angle_hold_band: T,
}

impl<T: Scalar> Default for Thresholds<T> {
    fn default() -> Self {
        Self {
            alpha1: lit(0.30),
            alpha2: lit(0.60),
            alpha3: lit(0.90),
            hold_duration: lit(1.5),
            stiffness_threshold: lit(2.5),
            t_ref_epsilon: lit(0.2),
            angle_hold_band: lit(2f64.to_radians()),
        }
    }
}

impl<T: Scalar> Thresholds<T> {
    pub fn validate(&self) -> Result<(), String> {
        let z = T::zero();
        if !(z < self.alpha1
            && self.alpha1 < self.alpha2
            && self.alpha2 < self.alpha3
            && self.alpha3 < T::one())
        {
            return Err("thresholds must satisfy 0 < alpha1 < alpha2 < alpha3 < 1".into());
        }
        if !(self.hold_duration > z) || !(self.t_ref_epsilon >= z) || !(self.angle_hold_band > z) {
            return Err(
                "hold_duration and angle_hold_band must be positive, t_ref_epsilon non-negative"
                    .into(),
            );
        }
        if !self.stiffness_threshold.is_finite() {
            return Err("stiffness_threshold must be finite".into());
        }
        Ok(())
    }
}

/// Both low → Low, one high → Medium, both high → High.
pub fn classify_ability<T: Scalar>(
    attention: Attention,
    stiffness: T,
    thresholds: &Thresholds<T>,
) -> AbilityLevel {
    let muscle_high = stiffness > thresholds.stiffness_threshold;
    match (attention == Attention::High, muscle_high) {
        (false, false) => AbilityLevel::Low,
        (true, true) => AbilityLevel::High,
        _ => AbilityLevel::Medium,
    }
}

pub fn allowed_authority<T: Scalar>(
    ability: AbilityLevel,
    alpha: T,
    thresholds: &Thresholds<T>,
) -> T {
    match ability {
        AbilityLevel::Low => thresholds.alpha1,
        AbilityLevel::Medium => thresholds.alpha2,
        AbilityLevel::High if alpha < thresholds.alpha3 => thresholds.alpha3,
        AbilityLevel::High => T::one(),
    }
}

/// Degree of intervention, or `Undefined` when the required torque is too
/// small for the ratio to mean anything.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Intervention<T> {
    Defined(T),
    Undefined,
}

impl<T: Scalar> Intervention<T> {
    pub fn value(self) -> Option<T> {
        match self {
            Self::Defined(a) => Some(a),
            Self::Undefined => None,
        }
    }
}

/// `min(α_ref, T_H / T_ref)` with the ratio clamped to `[0, 1]`; opposing
/// signs count as no intervention.
pub fn degree_of_intervention<T: Scalar>(
    driver_torque: T,
    required_torque: T,
    alpha_ref: T,
    thresholds: &Thresholds<T>,
) -> Intervention<T> {
    if !(required_torque.abs() >= thresholds.t_ref_epsilon) || !driver_torque.is_finite() {
        return Intervention::Undefined;
    }
    let ratio = (driver_torque / required_torque)
        .max(T::zero())
        .min(T::one());
    Intervention::Defined(ratio.min(alpha_ref))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuthorityStatus<T> {
    pub alpha: Option<T>,
    pub alpha_ref: T,
    pub ability: AbilityLevel,
    pub phase: Phase,
    /// Time spent continuously inside the completion band (s).
    pub hold_timer: T,
    /// Start of the current hold streak.
    pub hold_start: Option<T>,
    /// Reported takeover instant (entry into the band) once confirmed.
    pub completed_at: Option<T>,
    /// Instant the hold was confirmed.
    pub confirmed_at: Option<T>,
}

impl<T: Scalar> Default for AuthorityStatus<T> {
    fn default() -> Self {
        Self {
            alpha: None,
            alpha_ref: T::zero(),
            ability: AbilityLevel::Low,
            phase: Phase::AutomationDominant,
            hold_timer: T::zero(),
            hold_start: None,
            completed_at: None,
            confirmed_at: None,
        }
    }
}

/// One completion-detector sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CompletionSample<T> {
    /// Time at the start of the tick.
    pub t: T,
    pub alpha: Intervention<T>,
    pub steering_angle: T,
    /// Angle that holds the road's curvature with no correction.
    pub neutral_angle: T,
    /// Whether the angle-hold fallback may count this tick.
    pub fallback_eligible: bool,
}

/// Advances the hold timer by one tick of length `dt` and latches completion.
///
/// With a defined α the tick counts while α ∈ [α₃, 1]. With an undefined α the
/// tick counts while the wheel stays within the angle band of neutral.
/// Completion never reverts.
pub fn update_completion<T: Scalar>(
    mut status: AuthorityStatus<T>,
    sample: &CompletionSample<T>,
    dt: T,
    thresholds: &Thresholds<T>,
) -> AuthorityStatus<T> {
    if status.phase == Phase::Completed {
        return status;
    }
    let tol = lit::<T>(1e-12);
    let inside = match sample.alpha {
        Intervention::Defined(a) => a >= thresholds.alpha3 - tol && a <= T::one() + tol,
        Intervention::Undefined => {
            sample.fallback_eligible
                && (sample.steering_angle - sample.neutral_angle).abs() < thresholds.angle_hold_band
        }
    };
    if inside {
        if status.hold_start.is_none() {
            status.hold_start = Some(sample.t);
            status.hold_timer = T::zero();
        }
        status.hold_timer += dt;
        if status.hold_timer >= thresholds.hold_duration - tol {
            status.phase = Phase::Completed;
            status.completed_at = status.hold_start;
            status.confirmed_at = Some(sample.t + dt);
        }
    } else {
        status.hold_start = None;
        status.hold_timer = T::zero();
    }
    status
}

/// Phase from the current α: human-dominant once α reaches α₂. An undefined α
/// keeps the previous phase.
pub fn phase_for<T: Scalar>(
    previous: Phase,
    alpha: Intervention<T>,
    thresholds: &Thresholds<T>,
) -> Phase {
    match (previous, alpha) {
        (Phase::Completed, _) => Phase::Completed,
        (p, Intervention::Undefined) => p,
        (_, Intervention::Defined(a)) if a >= thresholds.alpha2 => Phase::HumanDominant,
        _ => Phase::AutomationDominant,
    }
}
