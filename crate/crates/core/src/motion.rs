//! Taylor-series motion of Gaussian centers.
//!
//! Each order `l` carries a speed `s_l` and a direction `v_l`; the motion
//! coefficient is `m_l = s_l v_l / |v_l|` and the displacement after `dt`
//! frames is `Γ(dt) = Σ_l m_l dt^(l+1) / (l+1)!`. Order 0 is velocity,
//! order 1 acceleration, order 2 jerk. `dt` may be negative.

use nalgebra::{Matrix3, Vector3};

use crate::error::{ensure_finite, Error, Result};
use crate::scene::GaussianPrimitive;

/// Directions shorter than this produce a zero coefficient (and zero Jacobian).
pub const DIRECTION_EPS: f64 = 1e-8;

/// Default static/dynamic threshold in meters per stride.
pub const DEFAULT_MOTION_THRESHOLD: f64 = 0.05;

pub fn motion_coefficient(speed: f64, direction: &Vector3<f64>) -> Result<Vector3<f64>> {
    ensure_finite("speed", &[speed])?;
    ensure_finite("direction", direction.as_slice())?;
    Ok(coefficient_unchecked(speed, direction))
}

fn coefficient_unchecked(speed: f64, direction: &Vector3<f64>) -> Vector3<f64> {
    let n = direction.norm();
    if n < DIRECTION_EPS {
        Vector3::zeros()
    } else {
        direction * (speed / n)
    }
}

/// `dt^(l+1) / (l+1)!`
pub fn taylor_weight(order: usize, dt: f64) -> f64 {
    let k = order as i32 + 1;
    let fact: f64 = (1..=k).map(f64::from).product();
    dt.powi(k) / fact
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionTerm {
    speed: f64,
    direction: Vector3<f64>,
    coefficient: Vector3<f64>,
}

impl MotionTerm {
    pub fn speed(&self) -> f64 {
        self.speed
    }

    pub fn direction(&self) -> &Vector3<f64> {
        &self.direction
    }

    pub fn coefficient(&self) -> &Vector3<f64> {
        &self.coefficient
    }
}

/// Partials of `Γ(dt)` with respect to one order's speed and direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrderJacobian {
    pub d_speed: Vector3<f64>,
    /// `d_direction[(i, j)] = ∂Γ_i / ∂v_j`
    pub d_direction: Matrix3<f64>,
}

/// Gradient of a scalar with respect to one order's `(s_l, v_l)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct OrderGrad {
    pub speed: f64,
    pub direction: Vector3<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionCoefficients {
    terms: Vec<MotionTerm>,
}

impl MotionCoefficients {
    /// `orders` static terms (zero speed, +x direction).
    pub fn zeros(orders: usize) -> Self {
        assert!(orders >= 1, "motion needs at least one order");
        let term = MotionTerm {
            speed: 0.0,
            direction: Vector3::x(),
            coefficient: Vector3::zeros(),
        };
        Self {
            terms: vec![term; orders],
        }
    }

    pub fn new(terms: &[(f64, Vector3<f64>)]) -> Result<Self> {
        if terms.is_empty() {
            return Err(Error::invalid("motion", "at least one order is required"));
        }
        let terms = terms
            .iter()
            .map(|(s, v)| {
                Ok(MotionTerm {
                    speed: *s,
                    direction: *v,
                    coefficient: motion_coefficient(*s, v)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { terms })
    }

    /// Decoder layout: `[s_0, v_0x, v_0y, v_0z, s_1, ...]`.
    pub fn from_raw(raw: &[f64]) -> Result<Self> {
        if raw.is_empty() || !raw.len().is_multiple_of(4) {
            return Err(Error::shape("motion_raw", "a positive multiple of 4", raw.len()));
        }
        let terms: Vec<_> = raw
            .chunks_exact(4)
            .map(|c| (c[0], Vector3::new(c[1], c[2], c[3])))
            .collect();
        Self::new(&terms)
    }

    /// Build from target coefficients `m_l`: speed `|m_l|`, direction `m_l`.
    pub fn from_coefficients(coefficients: &[Vector3<f64>]) -> Result<Self> {
        let terms: Vec<_> = coefficients
            .iter()
            .map(|m| {
                let n = m.norm();
                if n < DIRECTION_EPS {
                    (0.0, Vector3::x())
                } else {
                    (n, *m)
                }
            })
            .collect();
        Self::new(&terms)
    }

    pub fn orders(&self) -> usize {
        self.terms.len()
    }

    pub fn terms(&self) -> &[MotionTerm] {
        &self.terms
    }

    pub fn term(&self, order: usize) -> &MotionTerm {
        &self.terms[order]
    }

    pub fn coefficient(&self, order: usize) -> &Vector3<f64> {
        &self.terms[order].coefficient
    }

    pub fn set_term(&mut self, order: usize, speed: f64, direction: Vector3<f64>) {
        self.terms[order] = MotionTerm {
            speed,
            direction,
            coefficient: coefficient_unchecked(speed, &direction),
        };
    }

    /// Keep the first `orders` terms, padding with static terms if needed.
    pub fn with_orders(&self, orders: usize) -> Self {
        let mut out = Self::zeros(orders);
        for (dst, src) in out.terms.iter_mut().zip(&self.terms) {
            *dst = *src;
        }
        out
    }

    pub fn is_static(&self) -> bool {
        self.terms.iter().all(|t| t.coefficient == Vector3::zeros())
    }

    pub fn displacement(&self, dt: f64) -> Vector3<f64> {
        self.terms
            .iter()
            .enumerate()
            .fold(Vector3::zeros(), |acc, (l, t)| {
                acc + t.coefficient * taylor_weight(l, dt)
            })
    }

    pub fn displacement_jacobian(&self, dt: f64) -> Vec<OrderJacobian> {
        self.terms
            .iter()
            .enumerate()
            .map(|(l, t)| {
                let w = taylor_weight(l, dt);
                let n = t.direction.norm();
                if n < DIRECTION_EPS {
                    return OrderJacobian {
                        d_speed: Vector3::zeros(),
                        d_direction: Matrix3::zeros(),
                    };
                }
                let unit = t.direction / n;
                let proj = (Matrix3::identity() - unit * unit.transpose()) / n;
                OrderJacobian {
                    d_speed: unit * w,
                    d_direction: proj * (t.speed * w),
                }
            })
            .collect()
    }

    /// Pull a gradient on `m_l` back to `(s_l, v_l)`.
    pub fn coefficient_vjp(&self, order: usize, grad_m: &Vector3<f64>) -> OrderGrad {
        let t = &self.terms[order];
        let n = t.direction.norm();
        if n < DIRECTION_EPS {
            return OrderGrad::default();
        }
        let unit = t.direction / n;
        OrderGrad {
            speed: unit.dot(grad_m),
            direction: (grad_m - unit * unit.dot(grad_m)) * (t.speed / n),
        }
    }

    /// Pull a gradient on `Γ(dt)` back to every order's `(s_l, v_l)`.
    pub fn displacement_vjp(&self, dt: f64, grad_gamma: &Vector3<f64>) -> Vec<OrderGrad> {
        (0..self.terms.len())
            .map(|l| self.coefficient_vjp(l, &(grad_gamma * taylor_weight(l, dt))))
            .collect()
    }
}

pub fn displacement(m: &MotionCoefficients, dt: f64) -> Vector3<f64> {
    m.displacement(dt)
}

/// Move every center by its own `Γ(dt)`; all other attributes are copied untouched.
pub fn warp_gaussians(gaussians: &[GaussianPrimitive], dt: f64) -> Vec<GaussianPrimitive> {
    gaussians
        .iter()
        .map(|g| {
            let mut w = g.clone();
            w.mu = g.mu + g.motion.displacement(dt);
            w
        })
        .collect()
}

pub fn flow_field(gaussians: &[GaussianPrimitive], dt: f64) -> Vec<Vector3<f64>> {
    gaussians.iter().map(|g| g.motion.displacement(dt)).collect()
}

/// Indices of static (`|Γ(dt)| <= tau_m`) and dynamic Gaussians, in input order.
pub fn partition_static_dynamic(
    gaussians: &[GaussianPrimitive],
    dt: f64,
    tau_m: f64,
) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(tau_m > 0.0) {
        return Err(Error::invalid("tau_m", format!("{tau_m} must be positive")));
    }
    let (stat, dynamic): (Vec<usize>, Vec<usize>) = (0..gaussians.len())
        .partition(|&i| gaussians[i].motion.displacement(dt).norm() <= tau_m);
    Ok((stat, dynamic))
}

pub fn split_static_dynamic(
    gaussians: &[GaussianPrimitive],
    dt: f64,
    tau_m: f64,
) -> Result<(Vec<GaussianPrimitive>, Vec<GaussianPrimitive>)> {
    let (s, d) = partition_static_dynamic(gaussians, dt, tau_m)?;
    Ok((
        s.into_iter().map(|i| gaussians[i].clone()).collect(),
        d.into_iter().map(|i| gaussians[i].clone()).collect(),
    ))
}
