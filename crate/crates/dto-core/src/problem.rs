//! Problem data: time-varying cost and constraint functions, per-agent
//! problem definitions, the built-in four-agent scenarios, and the
//! finite-difference oracles used to validate analytic derivatives.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};

use crate::graph::{self, Graph};
use crate::math;
use crate::penalty::BarrierSchedule;
use crate::rng::SplitMix64;

/// A twice-differentiable function of `(x, t)` with analytic derivatives.
///
/// Implementations supply every channel analytically; nothing in the crate
/// differentiates symbolically or automatically. The channels must be
/// mutually consistent — [`ProblemInstance::verify_derivatives`] checks them
/// against central finite differences.
///
/// Implementations must be pure: evaluation at distinct `(x, t)` from
/// multiple threads must be safe.
pub trait TimeVaryingFunction: Send + Sync {
    /// Dimension of the state argument.
    fn dim(&self) -> usize;
    fn value(&self, x: &DVector<f64>, t: f64) -> f64;
    fn gradient(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;
    fn hessian(&self, x: &DVector<f64>, t: f64) -> DMatrix<f64>;
    /// Partial derivative of the value in `t`, holding `x` fixed.
    fn time_partial(&self, x: &DVector<f64>, t: f64) -> f64;
    /// Partial derivative of the gradient in `t`, holding `x` fixed.
    fn grad_time_partial(&self, x: &DVector<f64>, t: f64) -> DVector<f64>;
}

/// A scalar analytic signal of time with an exact derivative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Signal {
    Constant(f64),
    /// `amplitude * sin(angular_frequency * t) + offset`
    Sine {
        amplitude: f64,
        angular_frequency: f64,
        offset: f64,
    },
    /// `amplitude * cos(angular_frequency * t) + offset`
    Cosine {
        amplitude: f64,
        angular_frequency: f64,
        offset: f64,
    },
}

impl Signal {
    pub fn sine(amplitude: f64) -> Self {
        Signal::Sine {
            amplitude,
            angular_frequency: 1.0,
            offset: 0.0,
        }
    }

    pub fn cosine(amplitude: f64) -> Self {
        Signal::Cosine {
            amplitude,
            angular_frequency: 1.0,
            offset: 0.0,
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Signal::Constant(c) => c,
            Signal::Sine {
                amplitude,
                angular_frequency,
                offset,
            } => amplitude * math::sin(angular_frequency * t) + offset,
            Signal::Cosine {
                amplitude,
                angular_frequency,
                offset,
            } => amplitude * math::cos(angular_frequency * t) + offset,
        }
    }

    pub fn rate(&self, t: f64) -> f64 {
        match *self {
            Signal::Constant(_) => 0.0,
            Signal::Sine {
                amplitude,
                angular_frequency,
                ..
            } => amplitude * angular_frequency * math::cos(angular_frequency * t),
            Signal::Cosine {
                amplitude,
                angular_frequency,
                ..
            } => -amplitude * angular_frequency * math::sin(angular_frequency * t),
        }
    }
}

/// Scalar cost `(x - target(t))^2 + offset(t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScalarTrackingCost {
    pub target: Signal,
    pub offset: Signal,
}

impl TimeVaryingFunction for ScalarTrackingCost {
    fn dim(&self) -> usize {
        1
    }

    fn value(&self, x: &DVector<f64>, t: f64) -> f64 {
        let e = x[0] - self.target.value(t);
        e * e + self.offset.value(t)
    }

    fn gradient(&self, x: &DVector<f64>, t: f64) -> DVector<f64> {
        DVector::from_element(1, 2.0 * (x[0] - self.target.value(t)))
    }

    fn hessian(&self, _x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, 2.0)
    }

    fn time_partial(&self, x: &DVector<f64>, t: f64) -> f64 {
        -2.0 * (x[0] - self.target.value(t)) * self.target.rate(t) + self.offset.rate(t)
    }

    fn grad_time_partial(&self, _x: &DVector<f64>, t: f64) -> DVector<f64> {
        DVector::from_element(1, -2.0 * self.target.rate(t))
    }
}

/// Affine constraint `coefficients^T x - bound(t)`, intended as `g <= 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub coefficients: DVector<f64>,
    pub bound: Signal,
}

impl TimeVaryingFunction for AffineConstraint {
    fn dim(&self) -> usize {
        self.coefficients.len()
    }

    fn value(&self, x: &DVector<f64>, t: f64) -> f64 {
        self.coefficients.dot(x) - self.bound.value(t)
    }

    fn gradient(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        self.coefficients.clone()
    }

    fn hessian(&self, _x: &DVector<f64>, _t: f64) -> DMatrix<f64> {
        let n = self.coefficients.len();
        DMatrix::zeros(n, n)
    }

    fn time_partial(&self, _x: &DVector<f64>, t: f64) -> f64 {
        -self.bound.rate(t)
    }

    fn grad_time_partial(&self, _x: &DVector<f64>, _t: f64) -> DVector<f64> {
        DVector::zeros(self.coefficients.len())
    }
}

/// Deterministic disturbance: time to an n-vector.
pub type DisturbanceFn = Arc<dyn Fn(f64) -> DVector<f64> + Send + Sync>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProblemError {
    #[error("{what}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("agent count {agents} does not match node count {nodes}")]
    AgentCountMismatch { agents: usize, nodes: usize },
    #[error("finite-difference step must be positive")]
    InvalidStep,
    #[error("function value is not finite (domain violation near the sample point)")]
    NonFiniteValue,
    #[error(
        "agent {agent} starts outside the barrier domain: constraint {constraint} \
         has g(x(0), 0) = {value} with slack {slack}"
    )]
    InfeasibleStart {
        agent: usize,
        constraint: usize,
        value: FloatDisplay,
        slack: FloatDisplay,
    },
    #[error("agent {agent} {channel} disagrees with finite differences (error {error})")]
    DerivativeMismatch {
        agent: usize,
        channel: &'static str,
        error: FloatDisplay,
    },
    #[error("could not draw enough in-domain sample points")]
    SampleExhaustion,
}

/// f64 wrapper so error enums can derive `Eq` while still printing values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FloatDisplay(pub f64);

impl Eq for FloatDisplay {}

impl core::fmt::Display for FloatDisplay {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(f, "{:.6e}", self.0)
    }
}

impl From<f64> for FloatDisplay {
    fn from(v: f64) -> Self {
        Self(v)
    }
}

/// One agent's private data: cost, inequality constraints, barrier/slack
/// schedule, disturbance, and initial state.
#[derive(Clone)]
pub struct AgentProblem {
    pub cost: Arc<dyn TimeVaryingFunction>,
    pub constraints: Vec<Arc<dyn TimeVaryingFunction>>,
    pub barrier: BarrierSchedule,
    pub disturbance: DisturbanceFn,
    pub initial_state: DVector<f64>,
}

impl AgentProblem {
    pub fn new(
        cost: Arc<dyn TimeVaryingFunction>,
        constraints: Vec<Arc<dyn TimeVaryingFunction>>,
        barrier: BarrierSchedule,
        disturbance: DisturbanceFn,
        initial_state: DVector<f64>,
    ) -> Result<Self, ProblemError> {
        let n = initial_state.len();
        if cost.dim() != n {
            return Err(ProblemError::DimensionMismatch {
                what: "cost function",
                expected: n,
                found: cost.dim(),
            });
        }
        for c in &constraints {
            if c.dim() != n {
                return Err(ProblemError::DimensionMismatch {
                    what: "constraint function",
                    expected: n,
                    found: c.dim(),
                });
            }
        }
        let d0 = disturbance(0.0);
        if d0.len() != n {
            return Err(ProblemError::DimensionMismatch {
                what: "disturbance",
                expected: n,
                found: d0.len(),
            });
        }
        Ok(Self {
            cost,
            constraints,
            barrier,
            disturbance,
            initial_state,
        })
    }

    pub fn dim(&self) -> usize {
        self.initial_state.len()
    }

    pub fn constraint_count(&self) -> usize {
        self.constraints.len()
    }
}

impl core::fmt::Debug for AgentProblem {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("AgentProblem")
            .field("dim", &self.dim())
            .field("constraints", &self.constraints.len())
            .field("barrier", &self.barrier)
            .field("initial_state", &self.initial_state)
            .finish_non_exhaustive()
    }
}

/// The full multi-agent problem: topology plus one [`AgentProblem`] per node.
///
/// `disturbance_bound` is the declared sup-norm bound on every disturbance;
/// the simulator checks the switching gain against it before running.
/// Immutable after construction.
#[derive(Debug, Clone)]
pub struct ProblemInstance {
    pub graph: Graph,
    pub agents: Vec<AgentProblem>,
    pub disturbance_bound: f64,
}

impl ProblemInstance {
    pub fn new(
        graph: Graph,
        agents: Vec<AgentProblem>,
        disturbance_bound: f64,
    ) -> Result<Self, ProblemError> {
        if agents.len() != graph.node_count() {
            return Err(ProblemError::AgentCountMismatch {
                agents: agents.len(),
                nodes: graph.node_count(),
            });
        }
        let n = agents[0].dim();
        for a in &agents {
            if a.dim() != n {
                return Err(ProblemError::DimensionMismatch {
                    what: "agent state",
                    expected: n,
                    found: a.dim(),
                });
            }
        }
        Ok(Self {
            graph,
            agents,
            disturbance_bound,
        })
    }

    pub fn dim(&self) -> usize {
        self.agents[0].dim()
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    /// Checks the feasibility condition on initial states: every constraint
    /// must start strictly inside the slack-relaxed region,
    /// `g_j(x(0), 0) < sigma(0)`.
    pub fn check_initial_feasibility(&self) -> Result<(), ProblemError> {
        for (i, agent) in self.agents.iter().enumerate() {
            let slack = agent.barrier.slack(0.0);
            for (j, g) in agent.constraints.iter().enumerate() {
                let value = g.value(&agent.initial_state, 0.0);
                if !(value < slack) {
                    return Err(ProblemError::InfeasibleStart {
                        agent: i,
                        constraint: j,
                        value: value.into(),
                        slack: slack.into(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Finite-difference self-check of every analytic derivative channel at
    /// `samples` random in-domain points per agent. Optional at construction
    /// time; cheap insurance for hand-written `TimeVaryingFunction`s.
    pub fn verify_derivatives(&self, samples: usize, seed: u64) -> Result<(), ProblemError> {
        let mut rng = SplitMix64::new(seed);
        for (i, agent) in self.agents.iter().enumerate() {
            let points = sample_in_domain(agent, samples, &mut rng)?;
            for (x, t) in &points {
                check_function_derivatives(agent.cost.as_ref(), x, *t, i)?;
                for g in &agent.constraints {
                    check_function_derivatives(g.as_ref(), x, *t, i)?;
                }
            }
        }
        Ok(())
    }

    /// Same instance with the given initial states.
    pub fn with_initial_states(mut self, states: &[DVector<f64>]) -> Result<Self, ProblemError> {
        if states.len() != self.agents.len() {
            return Err(ProblemError::AgentCountMismatch {
                agents: states.len(),
                nodes: self.agents.len(),
            });
        }
        let n = self.dim();
        for (agent, x0) in self.agents.iter_mut().zip(states) {
            if x0.len() != n {
                return Err(ProblemError::DimensionMismatch {
                    what: "initial state",
                    expected: n,
                    found: x0.len(),
                });
            }
            agent.initial_state = x0.clone();
        }
        Ok(self)
    }

    /// Same instance with every disturbance replaced by zero (and the
    /// declared bound set to zero).
    pub fn with_zero_disturbances(mut self) -> Self {
        let n = self.dim();
        for agent in &mut self.agents {
            agent.disturbance = Arc::new(move |_t| DVector::zeros(n));
        }
        self.disturbance_bound = 0.0;
        self
    }
}

/// Sum of all agents' costs at a common state.
pub fn global_cost(instance: &ProblemInstance, x: &DVector<f64>, t: f64) -> f64 {
    instance.agents.iter().map(|a| a.cost.value(x, t)).sum()
}

/// Gain values recorded alongside the built-in scenarios. No term of the
/// control law consumes them; they are kept so the scenario parameter set
/// stays complete.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtraScenarioGains {
    pub nu: f64,
    pub rho: f64,
}

pub const SCENARIO_EXTRA_GAINS: ExtraScenarioGains = ExtraScenarioGains { nu: 3.0, rho: 18.0 };

/// Switching gains published with the built-in scenarios:
/// `k0 = 10, k1 = k2 = 3, rho1 = 0.5, rho2 = 3, beta = 3`.
pub const SCENARIO_GAIN_VALUES: [f64; 6] = [10.0, 3.0, 3.0, 0.5, 3.0, 3.0];

/// Sup-norm bound on the scenario disturbances (attained by the first one).
pub const SCENARIO_DISTURBANCE_BOUND: f64 = 5.0;

fn scenario_agents() -> Vec<AgentProblem> {
    let costs: [ScalarTrackingCost; 4] = [
        // (x - sin t)^2 + 5
        ScalarTrackingCost {
            target: Signal::sine(1.0),
            offset: Signal::Constant(5.0),
        },
        // (x + 3 sin t)^2 + cos t
        ScalarTrackingCost {
            target: Signal::sine(-3.0),
            offset: Signal::cosine(1.0),
        },
        // (x - cos t)^2 - 5
        ScalarTrackingCost {
            target: Signal::cosine(1.0),
            offset: Signal::Constant(-5.0),
        },
        // (x - sin t)^2
        ScalarTrackingCost {
            target: Signal::sine(1.0),
            offset: Signal::Constant(0.0),
        },
    ];
    let disturbances: [Signal; 4] = [
        Signal::Sine {
            amplitude: 3.0,
            angular_frequency: 1.0,
            offset: 2.0,
        },
        Signal::Sine {
            amplitude: 2.0,
            angular_frequency: 0.5 * core::f64::consts::PI,
            offset: 0.0,
        },
        Signal::Constant(2.0),
        Signal::Cosine {
            amplitude: 1.5,
            angular_frequency: 1.0,
            offset: 0.5,
        },
    ];
    let initial_states = [-2.0, -1.0, 1.0, 3.0];
    // rho(t) = 10 e^{0.05 t}, sigma(t) = 30 e^{-t}, shared by all agents
    let barrier = BarrierSchedule::new(10.0, 0.05, 30.0, 1.0).expect("positive coefficients");

    costs
        .iter()
        .zip(disturbances)
        .zip(initial_states)
        .map(|((cost, dist), x0)| {
            // one constraint per agent: x - cos t <= 0
            let constraint = AffineConstraint {
                coefficients: DVector::from_element(1, 1.0),
                bound: Signal::cosine(1.0),
            };
            AgentProblem::new(
                Arc::new(*cost),
                vec![Arc::new(constraint) as Arc<dyn TimeVaryingFunction>],
                barrier,
                Arc::new(move |t| DVector::from_element(1, dist.value(t))),
                DVector::from_element(1, x0),
            )
            .expect("scenario dimensions are consistent")
        })
        .collect()
}

/// Four agents on a ring: sinusoidal tracking costs, a shared moving
/// constraint `x <= cos t`, heterogeneous disturbances, initial states
/// `(-2, -1, 1, 3)`.
pub fn scenario_a() -> ProblemInstance {
    ProblemInstance::new(graph::ring4(), scenario_agents(), SCENARIO_DISTURBANCE_BOUND)
        .expect("scenario data is consistent")
}

/// Same agents as [`scenario_a`] on a path (less connected) topology.
pub fn scenario_b() -> ProblemInstance {
    ProblemInstance::new(graph::path4(), scenario_agents(), SCENARIO_DISTURBANCE_BOUND)
        .expect("scenario data is consistent")
}

// --- finite-difference oracles -------------------------------------------

/// Central-difference gradient of a scalar function in `x`.
pub fn fd_gradient<F>(f: F, x: &DVector<f64>, t: f64, h: f64) -> Result<DVector<f64>, ProblemError>
where
    F: Fn(&DVector<f64>, f64) -> f64,
{
    if h <= 0.0 {
        return Err(ProblemError::InvalidStep);
    }
    let mut out = DVector::zeros(x.len());
    let mut xp = x.clone();
    let mut xm = x.clone();
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        xm[k] = x[k] - h;
        let (vp, vm) = (f(&xp, t), f(&xm, t));
        if !vp.is_finite() || !vm.is_finite() {
            return Err(ProblemError::NonFiniteValue);
        }
        out[k] = (vp - vm) / (2.0 * h);
        xp[k] = x[k];
        xm[k] = x[k];
    }
    Ok(out)
}

/// Central-difference time partial of a scalar function.
pub fn fd_time_partial<F>(f: F, x: &DVector<f64>, t: f64, h: f64) -> Result<f64, ProblemError>
where
    F: Fn(&DVector<f64>, f64) -> f64,
{
    if h <= 0.0 {
        return Err(ProblemError::InvalidStep);
    }
    let (vp, vm) = (f(x, t + h), f(x, t - h));
    if !vp.is_finite() || !vm.is_finite() {
        return Err(ProblemError::NonFiniteValue);
    }
    Ok((vp - vm) / (2.0 * h))
}

/// Central differences of a gradient in `x`; column `k` approximates the
/// derivative of the gradient along coordinate `k`.
pub fn fd_hessian<G>(grad: G, x: &DVector<f64>, t: f64, h: f64) -> Result<DMatrix<f64>, ProblemError>
where
    G: Fn(&DVector<f64>, f64) -> DVector<f64>,
{
    if h <= 0.0 {
        return Err(ProblemError::InvalidStep);
    }
    let n = x.len();
    let mut out = DMatrix::zeros(n, n);
    let mut xp = x.clone();
    let mut xm = x.clone();
    for k in 0..n {
        xp[k] = x[k] + h;
        xm[k] = x[k] - h;
        let (gp, gm) = (grad(&xp, t), grad(&xm, t));
        if gp.iter().chain(gm.iter()).any(|v| !v.is_finite()) {
            return Err(ProblemError::NonFiniteValue);
        }
        out.set_column(k, &((gp - gm) / (2.0 * h)));
        xp[k] = x[k];
        xm[k] = x[k];
    }
    Ok(out)
}

/// Central differences of a gradient in `t`.
pub fn fd_grad_time_partial<G>(
    grad: G,
    x: &DVector<f64>,
    t: f64,
    h: f64,
) -> Result<DVector<f64>, ProblemError>
where
    G: Fn(&DVector<f64>, f64) -> DVector<f64>,
{
    if h <= 0.0 {
        return Err(ProblemError::InvalidStep);
    }
    let (gp, gm) = (grad(x, t + h), grad(x, t - h));
    if gp.iter().chain(gm.iter()).any(|v| !v.is_finite()) {
        return Err(ProblemError::NonFiniteValue);
    }
    Ok((gp - gm) / (2.0 * h))
}

/// `|a - b|` measured relative to `|b|`, with an absolute floor near zero.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let diff = math::abs(a - b);
    let scale = math::abs(b);
    if scale < 1e-2 {
        diff // compare absolutely near zero; callers use a 1e-8 floor
    } else {
        diff / scale
    }
}

pub(crate) const FD_STEP: f64 = 1e-5;
pub(crate) const FD_REL_TOL: f64 = 1e-6;
pub(crate) const FD_ABS_TOL: f64 = 1e-8;

fn close(a: f64, b: f64) -> bool {
    let diff = math::abs(a - b);
    diff <= FD_ABS_TOL || diff <= FD_REL_TOL * math::abs(b)
}

fn check_function_derivatives(
    f: &dyn TimeVaryingFunction,
    x: &DVector<f64>,
    t: f64,
    agent: usize,
) -> Result<(), ProblemError> {
    let mismatch = |channel: &'static str, error: f64| ProblemError::DerivativeMismatch {
        agent,
        channel,
        error: error.into(),
    };

    let g = f.gradient(x, t);
    let g_fd = fd_gradient(|x, t| f.value(x, t), x, t, FD_STEP)?;
    for k in 0..x.len() {
        if !close(g[k], g_fd[k]) {
            return Err(mismatch("gradient", math::abs(g[k] - g_fd[k])));
        }
    }

    let hp = f.time_partial(x, t);
    let hp_fd = fd_time_partial(|x, t| f.value(x, t), x, t, FD_STEP)?;
    if !close(hp, hp_fd) {
        return Err(mismatch("time_partial", math::abs(hp - hp_fd)));
    }

    let h = f.hessian(x, t);
    let h_fd = fd_hessian(|x, t| f.gradient(x, t), x, t, FD_STEP)?;
    for k in 0..h.len() {
        if !close(h[k], h_fd[k]) {
            return Err(mismatch("hessian", math::abs(h[k] - h_fd[k])));
        }
    }

    let gt = f.grad_time_partial(x, t);
    let gt_fd = fd_grad_time_partial(|x, t| f.gradient(x, t), x, t, FD_STEP)?;
    for k in 0..x.len() {
        if !close(gt[k], gt_fd[k]) {
            return Err(mismatch("grad_time_partial", math::abs(gt[k] - gt_fd[k])));
        }
    }
    Ok(())
}

/// Draws `(x, t)` pairs with every constraint at least `1e-2` inside the
/// slack boundary, so finite-difference probes stay in-domain.
fn sample_in_domain(
    agent: &AgentProblem,
    samples: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<(DVector<f64>, f64)>, ProblemError> {
    let n = agent.dim();
    let margin = 1e-2;
    let mut out = Vec::with_capacity(samples);
    let mut attempts = 0usize;
    while out.len() < samples {
        attempts += 1;
        if attempts > 1000 * samples.max(1) {
            return Err(ProblemError::SampleExhaustion);
        }
        let t = rng.uniform(0.0, 10.0);
        let x = DVector::from_fn(n, |_, _| rng.uniform(-5.0, 5.0));
        let slack = agent.barrier.slack(t);
        let inside = agent
            .constraints
            .iter()
            .all(|g| slack - g.value(&x, t) > margin);
        if inside {
            out.push((x, t));
        }
    }
    Ok(out)
}
