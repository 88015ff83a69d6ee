//! The two-part distributed control law.
//!
//! Each agent applies `u = u1 + u2`:
//!
//! * `u1` (nominal): a sign-based consensus term weighted by the inverse
//!   penalized Hessian, plus a Newton tracking flow that descends the
//!   penalized objective while compensating its explicit time variation,
//!
//!   ```text
//!   u1_i = -beta * H_i^-1 * sum_{j in N_i} sign(x_i - x_j)
//!          - H_i^-1 * (grad L_i + dt_grad L_i)
//!   ```
//!
//! * `u2` (sliding): a fixed-time reaching law on the integral sliding
//!   manifold `s_i = x_i - integral of u1_i`, which rejects the matched
//!   disturbance once `s_i` reaches zero,
//!
//!   ```text
//!   u2_i = -k0 sign(s_i) - k1 sig(s_i)^rho1 - k2 sig(s_i)^rho2
//!   ```

use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::graph::Graph;
use crate::linalg;
use crate::math;
use crate::penalty::{self, PenaltyError};
use crate::problem::{AgentProblem, FloatDisplay, ProblemInstance};
use crate::rng::SplitMix64;

/// Switching and consensus gains. Valid iff `k0, k1, k2, beta > 0`,
/// `0 < rho1 < 1`, and `rho2 > 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControllerGains {
    pub k0: f64,
    pub k1: f64,
    pub k2: f64,
    pub rho1: f64,
    pub rho2: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ControllerError {
    #[error("invalid gains: {reason}")]
    InvalidGains { reason: &'static str },
    #[error("switching gain k0 = {k0} must exceed the disturbance bound {d0}")]
    GainMargin { k0: FloatDisplay, d0: FloatDisplay },
    #[error("penalized Hessian is ill-conditioned (condition number {condition})")]
    SingularHessian { condition: FloatDisplay },
    #[error(transparent)]
    Domain(#[from] PenaltyError),
    #[error("inverse-Hessian eigenvalue floor must be positive, got {value}")]
    NonPositiveEigenvalue { value: FloatDisplay },
    #[error("margin must be positive, got {value}")]
    NonPositiveMargin { value: FloatDisplay },
    #[error("sample box is invalid: {reason}")]
    InvalidSampleBox { reason: &'static str },
    #[error("no sample point was inside every agent's barrier domain")]
    NoValidSamples,
}

impl ControllerGains {
    pub fn new(
        k0: f64,
        k1: f64,
        k2: f64,
        rho1: f64,
        rho2: f64,
        beta: f64,
    ) -> Result<Self, ControllerError> {
        let bad = |reason| Err(ControllerError::InvalidGains { reason });
        if !(k0 > 0.0 && k0.is_finite()) {
            return bad("k0 must be positive");
        }
        if !(k1 > 0.0 && k1.is_finite()) {
            return bad("k1 must be positive");
        }
        if !(k2 > 0.0 && k2.is_finite()) {
            return bad("k2 must be positive");
        }
        if !(rho1 > 0.0 && rho1 < 1.0) {
            return bad("rho1 must lie in (0, 1)");
        }
        if !(rho2 > 1.0 && rho2.is_finite()) {
            return bad("rho2 must exceed 1");
        }
        if !(beta > 0.0 && beta.is_finite()) {
            return bad("beta must be positive");
        }
        Ok(Self {
            k0,
            k1,
            k2,
            rho1,
            rho2,
            beta,
        })
    }

    /// The sliding term can only dominate disturbances it out-weighs:
    /// requires `k0 > d0`.
    pub fn check_disturbance_margin(&self, d0: f64) -> Result<(), ControllerError> {
        if self.k0 > d0 {
            Ok(())
        } else {
            Err(ControllerError::GainMargin {
                k0: self.k0.into(),
                d0: d0.into(),
            })
        }
    }

    /// The scenario gain set: `k0 = 10, k1 = k2 = 3, rho1 = 0.5, rho2 = 3, beta = 3`.
    pub fn scenario_defaults() -> Self {
        let [k0, k1, k2, rho1, rho2, beta] = crate::problem::SCENARIO_GAIN_VALUES;
        Self::new(k0, k1, k2, rho1, rho2, beta).expect("scenario gains are valid")
    }
}

/// Per-agent controller memory: the running integral `z = integral of u1`.
/// Starts at zero so the manifold starts at `s(0) = x(0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    z: DVector<f64>,
}

impl ControllerState {
    pub fn new(dim: usize) -> Self {
        Self {
            z: DVector::zeros(dim),
        }
    }

    /// The accumulated integral of the nominal control.
    pub fn integral(&self) -> &DVector<f64> {
        &self.z
    }

    /// Sliding manifold value `s = x - z`.
    pub fn manifold(&self, x: &DVector<f64>) -> DVector<f64> {
        x - &self.z
    }

    /// One quadrature step `z += dt * u1`. Must use the same rule as the
    /// state integrator so `s = x - z` stays the exact discrete analogue of
    /// the defining integral.
    pub fn advance(&mut self, u1: &DVector<f64>, dt: f64) {
        self.z.axpy(dt, u1, 1.0);
    }
}

/// Element-wise `sign(v) * |v|^alpha` with `sig(0) = 0`. Requires `alpha > 0`.
pub fn sig(v: &DVector<f64>, alpha: f64) -> DVector<f64> {
    debug_assert!(alpha > 0.0);
    v.map(|c| math::sign(c) * math::powf(math::abs(c), alpha))
}

/// Element-wise sign with `sign(0) = 0`. A positive `epsilon` switches to
/// the boundary-layer approximation `w / (|w| + epsilon)`, which trades
/// exactness for less chattering at coarse step sizes.
pub fn sign_vector(v: &DVector<f64>, epsilon: f64) -> DVector<f64> {
    if epsilon > 0.0 {
        v.map(|c| c / (math::abs(c) + epsilon))
    } else {
        v.map(math::sign)
    }
}

/// Nominal control `u1` for one agent given everybody's current state.
///
/// Fails when the agent is outside its barrier domain or the penalized
/// Hessian is ill-conditioned.
pub fn nominal_control(
    agent_index: usize,
    states: &[DVector<f64>],
    t: f64,
    graph: &Graph,
    agent: &AgentProblem,
    beta: f64,
    sign_epsilon: f64,
) -> Result<DVector<f64>, ControllerError> {
    let x = &states[agent_index];
    let d = penalty::penalized_derivatives(agent, x, t)?;
    let mut rhs = &d.gradient + &d.grad_time_partial;
    for &j in graph.neighbors(agent_index) {
        let diff = x - &states[j];
        rhs.axpy(beta, &sign_vector(&diff, sign_epsilon), 1.0);
    }
    let solved = linalg::solve_symmetric(&d.hessian, &rhs).map_err(|e| {
        ControllerError::SingularHessian {
            condition: e.condition.into(),
        }
    })?;
    Ok(-solved)
}

/// Sliding control `u2 = -k0 sign(s) - k1 sig(s)^rho1 - k2 sig(s)^rho2`.
pub fn sliding_control(
    s: &DVector<f64>,
    gains: &ControllerGains,
    sign_epsilon: f64,
) -> DVector<f64> {
    let mut u = sign_vector(s, sign_epsilon) * (-gains.k0);
    u.axpy(-gains.k1, &sig(s, gains.rho1), 1.0);
    u.axpy(-gains.k2, &sig(s, gains.rho2), 1.0);
    u
}

/// Upper bound on the time the sliding manifold needs to reach zero,
/// independent of initial conditions and disturbances:
///
/// ```text
/// T_d = 1 / (2^((rho1-1)/2) k1 (1 - rho1))
///     + 1 / (2^((rho2-1)/2) k2 (N n)^((1-rho2)/2) (rho2 - 1))
/// ```
pub fn reaching_time_bound(gains: &ControllerGains, agent_count: usize, dim: usize) -> f64 {
    let first = 1.0 / (math::powf(2.0, (gains.rho1 - 1.0) / 2.0) * gains.k1 * (1.0 - gains.rho1));
    let nn = (agent_count * dim) as f64;
    let second = 1.0
        / (math::powf(2.0, (gains.rho2 - 1.0) / 2.0)
            * gains.k2
            * math::powf(nn, (1.0 - gains.rho2) / 2.0)
            * (gains.rho2 - 1.0));
    first + second
}

/// Consensus-gain lower bound sufficient for finite-time consensus:
///
/// ```text
/// beta >= 2 * psi_bound * n^2 * |E| / min_inv_hessian_eig + margin
/// ```
///
/// where `psi_bound` bounds the Newton-flow magnitude and
/// `min_inv_hessian_eig` is the smallest eigenvalue of the inverse penalized
/// Hessians over the operating region.
pub fn beta_lower_bound(
    psi_bound: f64,
    dim: usize,
    edge_count: usize,
    min_inv_hessian_eig: f64,
    margin: f64,
) -> Result<f64, ControllerError> {
    if !(min_inv_hessian_eig > 0.0) {
        return Err(ControllerError::NonPositiveEigenvalue {
            value: min_inv_hessian_eig.into(),
        });
    }
    if !(margin > 0.0) {
        return Err(ControllerError::NonPositiveMargin {
            value: margin.into(),
        });
    }
    let n = dim as f64;
    Ok(2.0 * psi_bound * n * n * edge_count as f64 / min_inv_hessian_eig + margin)
}

/// Axis-aligned sampling region for the bound estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBox {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl SampleBox {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self, ControllerError> {
        if lower.len() != upper.len() {
            return Err(ControllerError::InvalidSampleBox {
                reason: "bound dimensions differ",
            });
        }
        if lower.iter().zip(upper.iter()).any(|(l, u)| !(l <= u)) {
            return Err(ControllerError::InvalidSampleBox {
                reason: "lower bound exceeds upper bound",
            });
        }
        Ok(Self { lower, upper })
    }

    /// Symmetric cube `[-r, r]^n`.
    pub fn centered(dim: usize, r: f64) -> Result<Self, ControllerError> {
        Self::new(
            DVector::from_element(dim, -r),
            DVector::from_element(dim, r),
        )
    }

    fn draw(&self, rng: &mut SplitMix64) -> DVector<f64> {
        DVector::from_fn(self.lower.len(), |k, _| {
            rng.uniform(self.lower[k], self.upper[k])
        })
    }
}

fn newton_flow(
    agent: &AgentProblem,
    x: &DVector<f64>,
    t: f64,
) -> Result<DVector<f64>, ControllerError> {
    let d = penalty::penalized_derivatives(agent, x, t)?;
    let rhs = &d.gradient + &d.grad_time_partial;
    linalg::solve_symmetric(&d.hessian, &rhs).map_err(|e| ControllerError::SingularHessian {
        condition: e.condition.into(),
    })
}

/// Sampled estimate of an upper bound on the Newton-flow magnitude
/// `|H^-1 (grad L + dt_grad L)|_2` over `box x [0, t_max]`, inflated by a
/// safety factor of two. An estimate, not a certified bound. Out-of-domain
/// samples are skipped; it is an error if every sample lands outside.
pub fn estimate_psi_bound(
    instance: &ProblemInstance,
    sample_box: &SampleBox,
    t_max: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, ControllerError> {
    let mut rng = SplitMix64::new(seed);
    let mut best: Option<f64> = None;
    for _ in 0..samples {
        let x = sample_box.draw(&mut rng);
        let t = rng.uniform(0.0, t_max);
        for agent in &instance.agents {
            match newton_flow(agent, &x, t) {
                Ok(psi) => {
                    let norm = psi.norm();
                    best = Some(best.map_or(norm, |b| b.max(norm)));
                }
                Err(ControllerError::Domain(_)) => continue,
                Err(other) => return Err(other),
            }
        }
    }
    best.map(|b| 2.0 * b).ok_or(ControllerError::NoValidSamples)
}

/// Sampled estimate of `min_i lambda_min((hess L_i)^-1)` over
/// `box x [0, t_max]`; for positive-definite Hessians this is
/// `1 / max_i lambda_max(hess L_i)`. Same sampling contract as
/// [`estimate_psi_bound`].
pub fn estimate_min_inverse_hessian_eigenvalue(
    instance: &ProblemInstance,
    sample_box: &SampleBox,
    t_max: f64,
    samples: usize,
    seed: u64,
) -> Result<f64, ControllerError> {
    let mut rng = SplitMix64::new(seed);
    let mut best: Option<f64> = None;
    for _ in 0..samples {
        let x = sample_box.draw(&mut rng);
        let t = rng.uniform(0.0, t_max);
        for agent in &instance.agents {
            match penalty::penalized_derivatives(agent, &x, t) {
                Ok(d) => {
                    let eigs = linalg::symmetric_eigenvalues(&d.hessian);
                    let max_eig = eigs[eigs.len() - 1];
                    if max_eig > 0.0 {
                        let inv_min = 1.0 / max_eig;
                        best = Some(best.map_or(inv_min, |b: f64| b.min(inv_min)));
                    }
                }
                Err(_) => continue,
            }
        }
    }
    best.ok_or(ControllerError::NoValidSamples)
}

/// Consensus sum `sum_{j in N_i} sign(x_i - x_j)` for each agent; exposed
/// for diagnostics. The per-agent sums cancel pairwise when totalled over an
/// undirected graph.
pub fn consensus_sign_sums(
    states: &[DVector<f64>],
    graph: &Graph,
    sign_epsilon: f64,
) -> Vec<DVector<f64>> {
    let n = states[0].len();
    (0..states.len())
        .map(|i| {
            let mut acc = DVector::zeros(n);
            for &j in graph.neighbors(i) {
                acc += sign_vector(&(&states[i] - &states[j]), sign_epsilon);
            }
            acc
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph;
    use crate::penalty::penalized_hessian;
    use crate::problem::{scenario_a, SCENARIO_DISTURBANCE_BOUND};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn x1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    #[test]
    fn sig_matches_definition() {
        assert_eq!(sig(&x1(4.0), 0.5), x1(2.0));
        assert_eq!(sig(&x1(-2.0), 3.0), x1(-8.0));
        let v = DVector::from_vec(vec![0.0, -0.25]);
        assert_eq!(sig(&v, 0.5), DVector::from_vec(vec![0.0, -0.5]));
    }

    #[test]
    fn gain_validation() {
        assert!(ControllerGains::new(10.0, 3.0, 3.0, 0.5, 3.0, 3.0).is_ok());
        assert!(ControllerGains::new(10.0, 3.0, 3.0, 1.0, 3.0, 3.0).is_err());
        assert!(ControllerGains::new(10.0, 3.0, 3.0, 0.5, 1.0, 3.0).is_err());
        assert!(ControllerGains::new(0.0, 3.0, 3.0, 0.5, 3.0, 3.0).is_err());
        let g = ControllerGains::scenario_defaults();
        g.check_disturbance_margin(SCENARIO_DISTURBANCE_BOUND).unwrap();
        assert!(g.check_disturbance_margin(10.0).is_err());
    }

    #[test]
    fn sliding_control_reference_values() {
        let g = ControllerGains::scenario_defaults();
        assert_eq!(sliding_control(&x1(0.0), &g, 0.0), x1(0.0));
        assert_eq!(sliding_control(&x1(1.0), &g, 0.0), x1(-16.0));
        // +10 + 3*0.5 + 3*0.015625
        assert_relative_eq!(
            sliding_control(&x1(-0.25), &g, 0.0)[0],
            11.546875,
            epsilon = 1e-12
        );
    }

    #[test]
    fn manifold_bookkeeping() {
        let mut cs = ControllerState::new(1);
        // s(0) = x(0)
        assert_eq!(cs.manifold(&x1(3.0)), x1(3.0));
        cs.advance(&x1(2.0), 0.001);
        assert_eq!(cs.integral(), &x1(0.002));
        // u1 = 0 keeps z put, so s tracks x
        cs.advance(&x1(0.0), 0.001);
        assert_eq!(cs.manifold(&x1(1.0)), x1(0.998));
    }

    #[test]
    fn nominal_control_reference_value() {
        let p = scenario_a();
        let states = [x1(-2.0), x1(-1.0), x1(1.0), x1(3.0)];
        let u1 = nominal_control(0, &states, 0.0, &p.graph, &p.agents[0], 3.0, 0.0).unwrap();
        // neighbor sum: sign(-2 - (-1)) + sign(-2 - 3) = -2,
        // so u1 = 6 / hessian - psi
        let h = penalized_hessian(&p.agents[0], &x1(-2.0), 0.0).unwrap()[(0, 0)];
        let d = crate::penalty::penalized_derivatives(&p.agents[0], &x1(-2.0), 0.0).unwrap();
        let psi = (d.gradient[0] + d.grad_time_partial[0]) / h;
        assert_relative_eq!(u1[0], 6.0 / h - psi, epsilon = 1e-12);
        assert_relative_eq!(h, 2.0000918273645546, epsilon = 1e-12);
    }

    #[test]
    fn nominal_control_at_consensus_is_pure_newton_flow() {
        let p = scenario_a();
        let states = [x1(0.5), x1(0.5), x1(0.5), x1(0.5)];
        let u1 = nominal_control(0, &states, 1.0, &p.graph, &p.agents[0], 3.0, 0.0).unwrap();
        let flow = newton_flow(&p.agents[0], &x1(0.5), 1.0).unwrap();
        assert_eq!(u1, -flow);
    }

    #[test]
    fn isolated_agent_has_no_consensus_term() {
        let p = scenario_a();
        let lonely = graph::Graph::new(4, &[(2, 3), (3, 4)]).unwrap(); // node 1 isolated
        let states = [x1(-2.0), x1(-1.0), x1(1.0), x1(3.0)];
        let u1 = nominal_control(0, &states, 0.0, &lonely, &p.agents[0], 3.0, 0.0).unwrap();
        let flow = newton_flow(&p.agents[0], &x1(-2.0), 0.0).unwrap();
        assert_eq!(u1, -flow);
    }

    #[test]
    fn nominal_control_is_neighbor_order_invariant() {
        let p = scenario_a();
        let relabeled = graph::Graph::new(4, &[(4, 1), (3, 4), (2, 3), (1, 2)]).unwrap();
        let states = [x1(-2.0), x1(-1.0), x1(1.0), x1(3.0)];
        for i in 0..4 {
            let a = nominal_control(i, &states, 0.3, &p.graph, &p.agents[i], 3.0, 0.0).unwrap();
            let b = nominal_control(i, &states, 0.3, &relabeled, &p.agents[i], 3.0, 0.0).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn reaching_time_bound_reference_values() {
        let g = ControllerGains::scenario_defaults();
        let t = reaching_time_bound(&g, 4, 1);
        assert_relative_eq!(
            t,
            2.0f64.powf(0.25) / 1.5 + 1.0 / 3.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(t, 1.126138076668481, epsilon = 1e-12);

        let g2 = ControllerGains::new(10.0, 1.0, 1.0, 0.5, 2.0, 3.0).unwrap();
        assert_relative_eq!(
            reaching_time_bound(&g2, 1, 1),
            2.0f64.powf(0.25) * 2.0 + 1.0 / 2.0f64.sqrt(),
            epsilon = 1e-12
        );
        assert_relative_eq!(
            reaching_time_bound(&g2, 1, 1),
            3.0855210111919897,
            epsilon = 1e-12
        );
    }

    #[test]
    fn beta_lower_bound_reference_values() {
        // zero flow bound needs only the margin
        assert_eq!(beta_lower_bound(0.0, 3, 7, 0.5, 0.1).unwrap(), 0.1);
        assert_relative_eq!(
            beta_lower_bound(1.0, 1, 4, 0.5, 0.1).unwrap(),
            16.1,
            epsilon = 1e-12
        );
        // linear in the edge count
        let b1 = beta_lower_bound(1.0, 1, 4, 0.5, 0.0001).unwrap() - 0.0001;
        let b2 = beta_lower_bound(1.0, 1, 8, 0.5, 0.0001).unwrap() - 0.0001;
        assert_relative_eq!(b2, 2.0 * b1, epsilon = 1e-12);
        assert!(beta_lower_bound(1.0, 1, 4, 0.0, 0.1).is_err());
    }

    #[test]
    fn psi_bound_estimate_on_static_quadratic() {
        use crate::problem::{AgentProblem, ScalarTrackingCost, Signal};
        use alloc::sync::Arc;
        // f = x^2, no constraints: flow = x, sup over [-1, 1] is 1, doubled
        let agent = AgentProblem::new(
            Arc::new(ScalarTrackingCost {
                target: Signal::Constant(0.0),
                offset: Signal::Constant(0.0),
            }),
            vec![],
            crate::penalty::BarrierSchedule::new(10.0, 0.05, 30.0, 1.0).unwrap(),
            Arc::new(|_| x1(0.0)),
            x1(0.5),
        )
        .unwrap();
        let p = ProblemInstance::new(graph::Graph::new(1, &[]).unwrap(), vec![agent], 0.0).unwrap();
        let est = estimate_psi_bound(&p, &SampleBox::centered(1, 1.0).unwrap(), 10.0, 4000, 3)
            .unwrap();
        assert!(est > 1.9 && est <= 2.0, "estimate {est} should be close to 2");
    }

    proptest! {
        #[test]
        fn sig_is_odd(v in proptest::collection::vec(-10.0f64..10.0, 1..4),
                      alpha in 0.1f64..4.0) {
            let x = DVector::from_vec(v);
            let neg = sig(&(-&x), alpha);
            let pos = sig(&x, alpha);
            for k in 0..x.len() {
                prop_assert_eq!(neg[k], -pos[k]);
            }
        }

        #[test]
        fn sliding_control_is_odd_and_dominated_by_k0(
            v in proptest::collection::vec(-5.0f64..5.0, 1..4)) {
            let g = ControllerGains::scenario_defaults();
            let s = DVector::from_vec(v);
            let u = sliding_control(&s, &g, 0.0);
            let u_neg = sliding_control(&(-&s), &g, 0.0);
            for k in 0..s.len() {
                prop_assert_eq!(u_neg[k], -u[k]);
                if s[k] != 0.0 {
                    prop_assert!(u[k].abs() >= g.k0);
                    prop_assert!(u[k].signum() == -s[k].signum());
                }
            }
        }

        #[test]
        fn reaching_time_decreases_in_k1_k2(
            k1 in 0.5f64..10.0, k2 in 0.5f64..10.0, bump in 0.1f64..5.0) {
            let g = ControllerGains::new(10.0, k1, k2, 0.5, 3.0, 3.0).unwrap();
            let g_k1 = ControllerGains::new(10.0, k1 + bump, k2, 0.5, 3.0, 3.0).unwrap();
            let g_k2 = ControllerGains::new(10.0, k1, k2 + bump, 0.5, 3.0, 3.0).unwrap();
            let base = reaching_time_bound(&g, 4, 1);
            prop_assert!(reaching_time_bound(&g_k1, 4, 1) < base);
            prop_assert!(reaching_time_bound(&g_k2, 4, 1) < base);
        }
    }
}
