//! Lateral vehicle dynamics with a steering-column degree of freedom.
//!
//! Single-track (bicycle) model at constant longitudinal speed. The state is
//! `[Y, y, ẏ, ψ, ψ̇, θ_sw, θ̇_sw]`: global lateral position, body-frame
//! lateral position and velocity, yaw angle and rate, steering-wheel angle and
//! rate. The input is the total torque on the steering column (N·m).
//!
//! The cornering stiffnesses are negative (force opposes slip). The printed
//! yaw-to-lateral coupling carries `+v_x`; [`VehicleModel::new`] keeps that
//! reading unless the lateral/yaw sub-block turns out unstable, in which case
//! it falls back to the textbook `−v_x` and reports the switch.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Matrix;
use crate::scalar::{lit, Scalar};

pub const STATE_DIM: usize = 7;

/// Largest real part tolerated in the lateral/yaw sub-block before the
/// coupling-sign fallback engages (1/s).
pub const SIGN_GATE_MAX_REAL_PART: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid vehicle parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("integration blew up: component `{component}` is not finite")]
    IntegrationBlowup { component: &'static str },
}

/// Vehicle and steering-system parameters.
///
/// Units follow the parameter table the defaults come from, including the
/// steering damping (N·s/m) and stiffness (N/rad) as printed there; only the
/// numeric values enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams<T> {
    /// kg
    pub mass: T,
    /// CoG to front axle (m)
    pub front_axle_distance: T,
    /// CoG to rear axle (m)
    pub rear_axle_distance: T,
    /// Front axle cornering stiffness (N/rad, negative)
    pub front_cornering_stiffness: T,
    /// Rear axle cornering stiffness (N/rad, negative)
    pub rear_cornering_stiffness: T,
    /// Yaw moment of inertia (kg·m²)
    pub yaw_inertia: T,
    /// Steering-wheel angle per front-wheel angle
    pub steering_ratio: T,
    /// Steering-system inertia (kg·m²)
    pub steering_inertia: T,
    pub steering_damping: T,
    pub steering_stiffness: T,
    /// Self-aligning torque per slip angle (N·m/rad)
    pub aligning_gain: T,
    /// Constant longitudinal speed (m/s)
    pub speed: T,
    /// Front-wheel angle limit (rad)
    pub max_wheel_angle: T,
}

impl<T: Scalar> Default for VehicleParams<T> {
    fn default() -> Self {
        Self {
            mass: lit(2040.0),
            front_axle_distance: lit(1.18),
            rear_axle_distance: lit(1.72),
            front_cornering_stiffness: lit(-1.396e5),
            rear_cornering_stiffness: lit(-1.401e5),
            yaw_inertia: lit(6242.0),
            steering_ratio: lit(16.0),
            steering_inertia: lit(0.1),
            steering_damping: lit(0.8),
            steering_stiffness: lit(12.0),
            aligning_gain: lit(-20.0),
            speed: lit(10.0),
            max_wheel_angle: lit(20f64.to_radians()),
        }
    }
}

impl<T: Scalar> VehicleParams<T> {
    pub fn validate(&self) -> Result<(), DynamicsError> {
        let positive = [
            ("mass", self.mass),
            ("yaw_inertia", self.yaw_inertia),
            ("steering_ratio", self.steering_ratio),
            ("steering_inertia", self.steering_inertia),
            ("speed", self.speed),
            ("max_wheel_angle", self.max_wheel_angle),
        ];
        for (name, v) in positive {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(DynamicsError::InvalidParameter {
                    name,
                    reason: format!("must be finite and > 0, got {v}"),
                });
            }
        }
        let finite = [
            ("front_axle_distance", self.front_axle_distance),
            ("rear_axle_distance", self.rear_axle_distance),
            ("front_cornering_stiffness", self.front_cornering_stiffness),
            ("rear_cornering_stiffness", self.rear_cornering_stiffness),
            ("steering_damping", self.steering_damping),
            ("steering_stiffness", self.steering_stiffness),
            ("aligning_gain", self.aligning_gain),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(DynamicsError::InvalidParameter {
                    name,
                    reason: format!("must be finite, got {v}"),
                });
            }
        }
        Ok(())
    }

    /// Steering-wheel angle limit implied by the front-wheel limit (rad).
    pub fn max_steering_angle(&self) -> T {
        self.steering_ratio * self.max_wheel_angle
    }
}

/// Sign of the `v_x` term in the yaw-rate → lateral-acceleration coupling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CouplingSign {
    /// `+v_x`, as in the source model.
    AsPrinted,
    /// `−v_x`, the usual body-frame kinematics.
    Textbook,
}

/// The ten model coefficients, named by the state/derivative pair they couple.
///
/// Position in [`Coefficients::as_array`] follows the conventional a₁…a₁₀ order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Coefficients<T> {
    /// ẏ → ÿ (1/s)
    pub lateral_damping: T,
    /// ψ̇ → ÿ (m/(s·rad))
    pub yaw_to_lateral: T,
    /// θ_sw → ÿ (m/s² per rad)
    pub steer_to_lateral: T,
    /// ẏ → ψ̈ (1/(m·s))
    pub lateral_to_yaw: T,
    /// ψ̇ → ψ̈ (1/s)
    pub yaw_damping: T,
    /// θ_sw → ψ̈ (1/s²)
    pub steer_to_yaw: T,
    /// ẏ → θ̈_sw (aligning torque via slip)
    pub lateral_to_column: T,
    /// ψ̇ → θ̈_sw (aligning torque via slip)
    pub yaw_to_column: T,
    /// θ_sw → θ̈_sw (1/s²)
    pub column_stiffness: T,
    /// θ̇_sw → θ̈_sw (1/s)
    pub column_damping: T,
}

impl<T: Scalar> Coefficients<T> {
    pub fn compute(p: &VehicleParams<T>, sign: CouplingSign) -> Result<Self, DynamicsError> {
        p.validate()?;
        let (m, vx, iz, isw_ratio, i_sw) = (
            p.mass,
            p.speed,
            p.yaw_inertia,
            p.steering_ratio,
            p.steering_inertia,
        );
        let (kf, kr, lf, lr) = (
            p.front_cornering_stiffness,
            p.rear_cornering_stiffness,
            p.front_axle_distance,
            p.rear_axle_distance,
        );
        let moment = kf * lf - kr * lr;
        let speed_term = match sign {
            CouplingSign::AsPrinted => vx,
            CouplingSign::Textbook => -vx,
        };
        Ok(Self {
            lateral_damping: (kf + kr) / (m * vx),
            yaw_to_lateral: moment / (m * vx) + speed_term,
            steer_to_lateral: -kf / (m * isw_ratio),
            lateral_to_yaw: moment / (iz * vx),
            yaw_damping: (kf * lf * lf + kr * lr * lr) / (iz * vx),
            steer_to_yaw: -kf * lf / (iz * isw_ratio),
            lateral_to_column: p.aligning_gain / (i_sw * vx * isw_ratio),
            yaw_to_column: p.aligning_gain * lf / (i_sw * vx * isw_ratio),
            column_stiffness: -p.steering_stiffness / i_sw,
            column_damping: -p.steering_damping / i_sw,
        })
    }

    pub fn as_array(&self) -> [T; 10] {
        [
            self.lateral_damping,
            self.yaw_to_lateral,
            self.steer_to_lateral,
            self.lateral_to_yaw,
            self.yaw_damping,
            self.steer_to_yaw,
            self.lateral_to_column,
            self.yaw_to_column,
            self.column_stiffness,
            self.column_damping,
        ]
    }

    /// Largest eigenvalue real part of the (ẏ, ψ̇) block.
    pub fn lateral_yaw_max_real_part(&self) -> T {
        let (a, b, c, d) = (
            self.lateral_damping,
            self.yaw_to_lateral,
            self.lateral_to_yaw,
            self.yaw_damping,
        );
        let half_trace = (a + d) / lit(2.0);
        let det = a * d - b * c;
        let disc = half_trace * half_trace - det;
        if disc >= T::zero() {
            half_trace + disc.sqrt()
        } else {
            half_trace
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct VehicleState<T> {
    /// Y, global frame (m)
    pub lateral_position: T,
    /// y, body frame (m)
    pub body_lateral_position: T,
    /// ẏ (m/s)
    pub lateral_velocity: T,
    /// ψ (rad)
    pub yaw: T,
    /// ψ̇ (rad/s)
    pub yaw_rate: T,
    /// θ_sw (rad)
    pub steering_angle: T,
    /// θ̇_sw (rad/s)
    pub steering_rate: T,
}

const COMPONENT_NAMES: [&str; STATE_DIM] = [
    "lateral_position",
    "body_lateral_position",
    "lateral_velocity",
    "yaw",
    "yaw_rate",
    "steering_angle",
    "steering_rate",
];

impl<T: Scalar> VehicleState<T> {
    pub fn zero() -> Self {
        Self::from_array([T::zero(); STATE_DIM])
    }

    pub fn to_array(&self) -> [T; STATE_DIM] {
        [
            self.lateral_position,
            self.body_lateral_position,
            self.lateral_velocity,
            self.yaw,
            self.yaw_rate,
            self.steering_angle,
            self.steering_rate,
        ]
    }

    pub fn from_array(x: [T; STATE_DIM]) -> Self {
        Self {
            lateral_position: x[0],
            body_lateral_position: x[1],
            lateral_velocity: x[2],
            yaw: x[3],
            yaw_rate: x[4],
            steering_angle: x[5],
            steering_rate: x[6],
        }
    }

    pub fn check_finite(&self) -> Result<(), DynamicsError> {
        match self.to_array().iter().position(|v| !v.is_finite()) {
            Some(i) => Err(DynamicsError::IntegrationBlowup {
                component: COMPONENT_NAMES[i],
            }),
            None => Ok(()),
        }
    }
}

/// Steady constant-yaw-rate operating point of the linear lateral model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteadyTurn<T> {
    pub lateral_velocity: T,
    pub steering_angle: T,
    /// Column torque that holds the steering angle (N·m).
    pub torque: T,
}

/// Vehicle parameters together with their derived coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VehicleModel<T> {
    pub params: VehicleParams<T>,
    pub coefficients: Coefficients<T>,
    pub coupling_sign: CouplingSign,
    /// Max real part of the lateral/yaw block under the printed sign.
    pub printed_sign_max_real_part: T,
}

impl<T: Scalar> VehicleModel<T> {
    /// Builds the model, applying the coupling-sign gate.
    pub fn new(params: VehicleParams<T>) -> Result<Self, DynamicsError> {
        let printed = Coefficients::compute(&params, CouplingSign::AsPrinted)?;
        let max_re = printed.lateral_yaw_max_real_part();
        if max_re > lit(SIGN_GATE_MAX_REAL_PART) {
            Ok(Self {
                params,
                coefficients: Coefficients::compute(&params, CouplingSign::Textbook)?,
                coupling_sign: CouplingSign::Textbook,
                printed_sign_max_real_part: max_re,
            })
        } else {
            Ok(Self {
                params,
                coefficients: printed,
                coupling_sign: CouplingSign::AsPrinted,
                printed_sign_max_real_part: max_re,
            })
        }
    }

    /// Builds the model with an explicit sign, bypassing the gate.
    pub fn with_sign(params: VehicleParams<T>, sign: CouplingSign) -> Result<Self, DynamicsError> {
        let printed = Coefficients::compute(&params, CouplingSign::AsPrinted)?;
        Ok(Self {
            params,
            coefficients: Coefficients::compute(&params, sign)?,
            coupling_sign: sign,
            printed_sign_max_real_part: printed.lateral_yaw_max_real_part(),
        })
    }

    /// Continuous-time state derivative `ẋ = g(x, u)` with the heading
    /// kinematics kept nonlinear.
    pub fn derivative(&self, x: &VehicleState<T>, torque: T) -> VehicleState<T> {
        let c = &self.coefficients;
        let (sin_psi, cos_psi) = x.yaw.sin_cos();
        VehicleState {
            lateral_position: self.params.speed * sin_psi + x.lateral_velocity * cos_psi,
            body_lateral_position: x.lateral_velocity,
            lateral_velocity: c.lateral_damping * x.lateral_velocity
                + c.yaw_to_lateral * x.yaw_rate
                + c.steer_to_lateral * x.steering_angle,
            yaw: x.yaw_rate,
            yaw_rate: c.lateral_to_yaw * x.lateral_velocity
                + c.yaw_damping * x.yaw_rate
                + c.steer_to_yaw * x.steering_angle,
            steering_angle: x.steering_rate,
            steering_rate: c.lateral_to_column * x.lateral_velocity
                + c.yaw_to_column * x.yaw_rate
                + c.column_stiffness * x.steering_angle
                + c.column_damping * x.steering_rate
                + torque / self.params.steering_inertia,
        }
    }

    /// One explicit Euler step followed by steering-angle saturation.
    pub fn step_euler(
        &self,
        x: &VehicleState<T>,
        torque: T,
        dt: T,
    ) -> Result<VehicleState<T>, DynamicsError> {
        let dx = self.derivative(x, torque).to_array();
        let mut next = x.to_array();
        for (xi, di) in next.iter_mut().zip(dx) {
            *xi += dt * di;
        }
        let mut next = VehicleState::from_array(next);
        next.check_finite()?;
        self.saturate(&mut next);
        Ok(next)
    }

    /// Clamps the steering angle to the mechanical limit and stops the wheel
    /// from moving further into the stop.
    pub fn saturate(&self, x: &mut VehicleState<T>) {
        let limit = self.params.max_steering_angle();
        if x.steering_angle > limit {
            x.steering_angle = limit;
            x.steering_rate = x.steering_rate.min(T::zero());
        } else if x.steering_angle < -limit {
            x.steering_angle = -limit;
            x.steering_rate = x.steering_rate.max(T::zero());
        }
    }

    /// Linear model about ψ = 0 and its Euler discretization at `dt`.
    pub fn linearize(&self, dt: T) -> LinearModel<T> {
        let c = &self.coefficients;
        let mut a = Matrix::zeros(STATE_DIM, STATE_DIM);
        a[(0, 2)] = T::one();
        a[(0, 3)] = self.params.speed;
        a[(1, 2)] = T::one();
        a[(2, 2)] = c.lateral_damping;
        a[(2, 4)] = c.yaw_to_lateral;
        a[(2, 5)] = c.steer_to_lateral;
        a[(3, 4)] = T::one();
        a[(4, 2)] = c.lateral_to_yaw;
        a[(4, 4)] = c.yaw_damping;
        a[(4, 5)] = c.steer_to_yaw;
        a[(5, 6)] = T::one();
        a[(6, 2)] = c.lateral_to_column;
        a[(6, 4)] = c.yaw_to_column;
        a[(6, 5)] = c.column_stiffness;
        a[(6, 6)] = c.column_damping;
        let mut b = vec![T::zero(); STATE_DIM];
        b[6] = T::one() / self.params.steering_inertia;

        let a_d = Matrix::identity(STATE_DIM).add(&a.scale(dt));
        let b_d = b.iter().map(|&v| v * dt).collect();
        let mut c_out = Matrix::zeros(2, STATE_DIM);
        c_out[(0, 0)] = T::one();
        c_out[(1, 3)] = T::one();
        LinearModel {
            a,
            b,
            a_d,
            b_d,
            c: c_out,
            dt,
        }
    }

    /// Operating point that sustains `yaw_rate` with zero lateral and yaw
    /// acceleration and a stationary steering wheel.
    pub fn steady_turn(&self, yaw_rate: T) -> SteadyTurn<T> {
        let c = &self.coefficients;
        // [a1 a3; a4 a6] [ẏ; θ] = -[a2; a5] ψ̇
        let (m11, m12, m21, m22) = (
            c.lateral_damping,
            c.steer_to_lateral,
            c.lateral_to_yaw,
            c.steer_to_yaw,
        );
        let r1 = -c.yaw_to_lateral * yaw_rate;
        let r2 = -c.yaw_damping * yaw_rate;
        let det = m11 * m22 - m12 * m21;
        let lateral_velocity = (r1 * m22 - m12 * r2) / det;
        let steering_angle = (m11 * r2 - m21 * r1) / det;
        let torque = -self.params.steering_inertia
            * (c.lateral_to_column * lateral_velocity
                + c.yaw_to_column * yaw_rate
                + c.column_stiffness * steering_angle);
        SteadyTurn {
            lateral_velocity,
            steering_angle,
            torque,
        }
    }
}

/// Linear prediction model: continuous `(A, B)`, its Euler discretization
/// `(A_d, B_d)` at `dt`, and the output selector for `(Y, ψ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<T> {
    pub a: Matrix<T>,
    pub b: Vec<T>,
    pub a_d: Matrix<T>,
    pub b_d: Vec<T>,
    pub c: Matrix<T>,
    pub dt: T,
}

impl<T: Scalar> LinearModel<T> {
    pub fn step(&self, x: &[T], u: T) -> Vec<T> {
        let mut next = self.a_d.mul_vec(x);
        for (n, &b) in next.iter_mut().zip(&self.b_d) {
            *n += b * u;
        }
        next
    }
}
