//! Log-barrier penalized objective.
//!
//! For an agent with cost `f`, constraints `g_j <= 0`, barrier weight
//! `rho(t)` and slack `sigma(t)`, the penalized objective is
//!
//! ```text
//! L(x, t) = f(x, t) - (1 / rho(t)) * sum_j log(sigma(t) - g_j(x, t))
//! ```
//!
//! finite only while every `g_j < sigma` (the slack-relaxed interior). The
//! growing `rho` shrinks the barrier-induced optimality gap; the decaying
//! `sigma` removes the initial relaxation. The derivative formulas below are
//! closed-form chain-rule expansions; the test suites validate every one of
//! them against central finite differences.

use nalgebra::{DMatrix, DVector};

use crate::math;
use crate::problem::{AgentProblem, FloatDisplay};

/// Exponential barrier/slack schedules
/// `rho(t) = a1 * exp(a2 t)`, `sigma(t) = a3 * exp(-a4 t)`,
/// with all four coefficients strictly positive, so `rho` is positive and
/// strictly increasing and `sigma` is positive, strictly decreasing, and
/// vanishing as `t -> inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarrierSchedule {
    a1: f64,
    a2: f64,
    a3: f64,
    a4: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PenaltyError {
    #[error("barrier coefficient {name} must be positive and finite, got {value}")]
    InvalidCoefficient {
        name: &'static str,
        value: FloatDisplay,
    },
    #[error(
        "outside the barrier domain at t = {t}: constraint {constraint} has \
         slack margin {margin} (needs > {MIN_DOMAIN_MARGIN:e})"
    )]
    DomainViolation {
        constraint: usize,
        t: FloatDisplay,
        margin: FloatDisplay,
    },
}

/// Margins below this count as domain violations even when still positive:
/// `1 / (sigma - g)^2` overflows long before the log does.
pub const MIN_DOMAIN_MARGIN: f64 = 1e-12;

impl BarrierSchedule {
    pub fn new(a1: f64, a2: f64, a3: f64, a4: f64) -> Result<Self, PenaltyError> {
        for (name, value) in [("a1", a1), ("a2", a2), ("a3", a3), ("a4", a4)] {
            if !(value > 0.0 && value.is_finite()) {
                return Err(PenaltyError::InvalidCoefficient {
                    name,
                    value: value.into(),
                });
            }
        }
        Ok(Self { a1, a2, a3, a4 })
    }

    pub fn a1(&self) -> f64 {
        self.a1
    }

    pub fn a2(&self) -> f64 {
        self.a2
    }

    pub fn a3(&self) -> f64 {
        self.a3
    }

    pub fn a4(&self) -> f64 {
        self.a4
    }

    /// Barrier weight `rho(t) = a1 * exp(a2 t)`.
    pub fn barrier_parameter(&self, t: f64) -> f64 {
        self.a1 * math::exp(self.a2 * t)
    }

    /// `d rho / dt = a2 * rho(t)`.
    pub fn barrier_parameter_rate(&self, t: f64) -> f64 {
        self.a2 * self.barrier_parameter(t)
    }

    /// Slack `sigma(t) = a3 * exp(-a4 t)`.
    pub fn slack(&self, t: f64) -> f64 {
        self.a3 * math::exp(-self.a4 * t)
    }

    /// `d sigma / dt = -a4 * sigma(t)`.
    pub fn slack_rate(&self, t: f64) -> f64 {
        -self.a4 * self.slack(t)
    }
}

/// True iff every constraint is strictly inside the slack boundary at
/// `(x, t)`, with the [`MIN_DOMAIN_MARGIN`] guard. Unconstrained agents are
/// always in-domain.
pub fn in_domain(agent: &AgentProblem, x: &DVector<f64>, t: f64) -> bool {
    let sigma = agent.barrier.slack(t);
    agent
        .constraints
        .iter()
        .all(|g| sigma - g.value(x, t) > MIN_DOMAIN_MARGIN)
}

/// Penalized objective value. Fails with the index of the first constraint
/// whose slack margin is not strictly positive.
pub fn penalized_value(agent: &AgentProblem, x: &DVector<f64>, t: f64) -> Result<f64, PenaltyError> {
    let rho = agent.barrier.barrier_parameter(t);
    let sigma = agent.barrier.slack(t);
    let mut barrier = 0.0;
    for (j, g) in agent.constraints.iter().enumerate() {
        let margin = sigma - g.value(x, t);
        if margin <= MIN_DOMAIN_MARGIN {
            return Err(PenaltyError::DomainViolation {
                constraint: j,
                t: t.into(),
                margin: margin.into(),
            });
        }
        barrier += math::ln(margin);
    }
    Ok(agent.cost.value(x, t) - barrier / rho)
}

/// Gradient, Hessian, and gradient-in-time partial of the penalized
/// objective, computed together since the controller needs all three at
/// every evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct PenalizedDerivatives {
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
    pub grad_time_partial: DVector<f64>,
}

/// Chain-rule expansion of the barrier derivatives. With `w_j = sigma - g_j`:
///
/// ```text
/// grad L   = grad f + (1/rho) sum_j grad g_j / w_j
/// hess L   = hess f + (1/rho) sum_j [ hess g_j / w_j + grad g_j grad g_j^T / w_j^2 ]
/// dt grad L = dt grad f - (rho'/rho^2) sum_j grad g_j / w_j
///             + (1/rho) sum_j [ dt grad g_j / w_j - grad g_j (sigma' - dt g_j) / w_j^2 ]
/// ```
pub fn penalized_derivatives(
    agent: &AgentProblem,
    x: &DVector<f64>,
    t: f64,
) -> Result<PenalizedDerivatives, PenaltyError> {
    let rho = agent.barrier.barrier_parameter(t);
    let rho_rate = agent.barrier.barrier_parameter_rate(t);
    let sigma = agent.barrier.slack(t);
    let sigma_rate = agent.barrier.slack_rate(t);

    let mut gradient = agent.cost.gradient(x, t);
    let mut hessian = agent.cost.hessian(x, t);
    let mut grad_time_partial = agent.cost.grad_time_partial(x, t);

    for (j, g) in agent.constraints.iter().enumerate() {
        let w = sigma - g.value(x, t);
        if w <= MIN_DOMAIN_MARGIN {
            return Err(PenaltyError::DomainViolation {
                constraint: j,
                t: t.into(),
                margin: w.into(),
            });
        }
        let gg = g.gradient(x, t);
        let gh = g.hessian(x, t);
        let gt = g.time_partial(x, t);
        let ggt = g.grad_time_partial(x, t);

        gradient.axpy(1.0 / (rho * w), &gg, 1.0);
        hessian += gh / (rho * w);
        hessian += &gg * gg.transpose() / (rho * w * w);
        grad_time_partial.axpy(-rho_rate / (rho * rho * w), &gg, 1.0);
        grad_time_partial.axpy(1.0 / (rho * w), &ggt, 1.0);
        grad_time_partial.axpy(-(sigma_rate - gt) / (rho * w * w), &gg, 1.0);
    }
    Ok(PenalizedDerivatives {
        gradient,
        hessian,
        grad_time_partial,
    })
}

pub fn penalized_gradient(
    agent: &AgentProblem,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, PenaltyError> {
    Ok(penalized_derivatives(agent, x, t)?.gradient)
}

pub fn penalized_hessian(
    agent: &AgentProblem,
    x: &DVector<f64>,
    t: f64,
) -> Result<DMatrix<f64>, PenaltyError> {
    Ok(penalized_derivatives(agent, x, t)?.hessian)
}

pub fn penalized_grad_time_partial(
    agent: &AgentProblem,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, PenaltyError> {
    Ok(penalized_derivatives(agent, x, t)?.grad_time_partial)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::scenario_a;
    use approx::assert_relative_eq;
    use nalgebra::DVector;

    fn x1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn schedules_match_closed_forms() {
        let s = BarrierSchedule::new(10.0, 0.05, 30.0, 1.0).unwrap();
        assert_eq!(s.barrier_parameter(0.0), 10.0);
        assert_relative_eq!(
            s.barrier_parameter(20.0),
            10.0 * core::f64::consts::E,
            epsilon = 1e-12
        );
        assert_eq!(s.slack(0.0), 30.0);
        assert_relative_eq!(s.slack(30.0f64.ln()), 1.0, epsilon = 1e-12);
        // monotone decrease toward zero
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let v = s.slack(k as f64);
            assert!(v > 0.0 && v < prev);
            prev = v;
        }
        assert!(s.slack(700.0) < 1e-300);
    }

    #[test]
    fn schedule_rejects_nonpositive_coefficients() {
        assert!(BarrierSchedule::new(1.0, 0.0, 30.0, 1.0).is_err());
        assert!(BarrierSchedule::new(-1.0, 0.1, 30.0, 1.0).is_err());
        assert!(BarrierSchedule::new(1.0, 0.1, 30.0, f64::NAN).is_err());
    }

    #[test]
    fn domain_membership() {
        let p = scenario_a();
        let agent = &p.agents[0];
        // x = -2 at t = 0: margin 30 - (-3) = 33
        assert!(in_domain(agent, &x1(-2.0), 0.0));
        // boundary: g(31, 0) = 30 is not < 30
        assert!(!in_domain(agent, &x1(31.0), 0.0));
    }

    #[test]
    fn unconstrained_agent_is_always_in_domain() {
        let mut p = scenario_a();
        p.agents[0].constraints.clear();
        let agent = &p.agents[0];
        assert!(in_domain(agent, &x1(1e6), 0.0));
        assert_eq!(
            penalized_value(agent, &x1(3.0), 0.25).unwrap(),
            agent.cost.value(&x1(3.0), 0.25)
        );
        assert_eq!(
            penalized_gradient(agent, &x1(3.0), 0.25).unwrap(),
            agent.cost.gradient(&x1(3.0), 0.25)
        );
        assert_eq!(
            penalized_hessian(agent, &x1(3.0), 0.25).unwrap(),
            agent.cost.hessian(&x1(3.0), 0.25)
        );
    }

    #[test]
    fn penalized_value_at_reference_point() {
        let p = scenario_a();
        // L(-2, 0) = 9 - log(33)/10
        let v = penalized_value(&p.agents[0], &x1(-2.0), 0.0).unwrap();
        assert_relative_eq!(v, 9.0 - 33.0f64.ln() / 10.0, epsilon = 1e-15);
        assert_relative_eq!(v, 8.650349243853352, epsilon = 1e-12);
    }

    #[test]
    fn penalized_value_errors_on_boundary() {
        let p = scenario_a();
        let err = penalized_value(&p.agents[0], &x1(31.0), 0.0).unwrap_err();
        match err {
            PenaltyError::DomainViolation { constraint, .. } => assert_eq!(constraint, 0),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn penalized_gradient_at_reference_point() {
        let p = scenario_a();
        let g = penalized_gradient(&p.agents[0], &x1(-2.0), 0.0).unwrap();
        // -4 + (1/10) * (1/33)
        assert_relative_eq!(g[0], -4.0 + 1.0 / 330.0, epsilon = 1e-15);
        assert_relative_eq!(g[0], -3.996969696969697, epsilon = 1e-12);
    }

    #[test]
    fn penalized_hessian_at_reference_point() {
        let p = scenario_a();
        let h = penalized_hessian(&p.agents[0], &x1(-2.0), 0.0).unwrap();
        // 2 + (1/10) * (1/33^2)
        assert_relative_eq!(h[(0, 0)], 2.0 + 1.0 / 10890.0, epsilon = 1e-15);
        assert_relative_eq!(h[(0, 0)], 2.0000918273645546, epsilon = 1e-12);
    }

    #[test]
    fn value_blows_up_monotonically_toward_boundary() {
        let p = scenario_a();
        let agent = &p.agents[0];
        // boundary at x = sigma(0) + cos(0) = 31; approach along a geometric
        // sequence of distances
        let mut prev = f64::NEG_INFINITY;
        for k in 1..=12 {
            let dist = 0.5f64.powi(k);
            let v = penalized_value(agent, &x1(31.0 - dist), 0.0).unwrap();
            assert!(v > prev, "barrier must increase toward the boundary");
            prev = v;
        }
        assert!(prev > agent.cost.value(&x1(31.0), 0.0));
    }
}
