//! Closed-loop simulation of `xdot_i = u_i + d_i` under the distributed
//! controller, plus the independent centralized solvers used to measure
//! tracking quality.
//!
//! Integration is explicit Euler at a small fixed step: the control law is
//! discontinuous, so classical higher-order schemes buy nothing, and the
//! residual chattering is accounted for explicitly via [`chatter_band`].
//! The disturbance enters the integrator only — the controller never sees it.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DVector;

use crate::controller::{
    nominal_control, sliding_control, ControllerError, ControllerGains, ControllerState,
};
use crate::math;
use crate::penalty;
use crate::problem::{global_cost, ProblemError, ProblemInstance};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("invalid simulation config: {message}")]
    Config { message: &'static str },
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Gains(ControllerError),
    #[error("controller failed at t = {t} on agent {agent}: {source}")]
    Controller {
        t: f64,
        agent: usize,
        source: ControllerError,
    },
    #[error("agent {agent} left the barrier domain at t = {t} even after a dt/10 retry")]
    DomainAfterRetry { t: f64, agent: usize },
    #[error("agent {agent} state became non-finite at t = {t}")]
    NonFiniteState { t: f64, agent: usize },
    #[error("t = {t} is not on the recorded time grid")]
    OffGrid { t: f64 },
    #[error("no feasible point for the centralized problem at t = {t}")]
    OracleInfeasible { t: f64 },
    #[error("centralized solve did not converge at t = {t} (residual {residual:e})")]
    NewtonDiverged { t: f64, residual: f64 },
}

/// Everything one run needs. `dt`, `t_end`, `record_stride`, `sign_epsilon`,
/// and `sliding_enabled` default to `1e-4`, `20`, `100`, `0` (hard sign),
/// and `true`; `sliding_enabled = false` drops the `u2` term for ablation
/// runs.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub instance: ProblemInstance,
    pub gains: ControllerGains,
    pub dt: f64,
    pub t_end: f64,
    pub record_stride: usize,
    pub sign_epsilon: f64,
    pub sliding_enabled: bool,
}

impl SimConfig {
    pub fn new(instance: ProblemInstance, gains: ControllerGains) -> Self {
        Self {
            instance,
            gains,
            dt: 1e-4,
            t_end: 20.0,
            record_stride: 100,
            sign_epsilon: 0.0,
            sliding_enabled: true,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(SimError::Config {
                message: "dt must be positive and finite",
            });
        }
        if !(self.t_end >= 0.0 && self.t_end.is_finite()) {
            return Err(SimError::Config {
                message: "t_end must be non-negative and finite",
            });
        }
        if self.record_stride == 0 {
            return Err(SimError::Config {
                message: "record_stride must be at least 1",
            });
        }
        if !(self.sign_epsilon >= 0.0 && self.sign_epsilon.is_finite()) {
            return Err(SimError::Config {
                message: "sign_epsilon must be non-negative",
            });
        }
        Ok(())
    }
}

/// Time series for one agent, one entry per recorded instant.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentSeries {
    pub states: Vec<DVector<f64>>,
    pub manifolds: Vec<DVector<f64>>,
    pub nominal_controls: Vec<DVector<f64>>,
    pub sliding_controls: Vec<DVector<f64>>,
    /// `g_j(x, t) - sigma(t)` per constraint; negative means satisfied with
    /// room to spare.
    pub constraint_margins: Vec<Vec<f64>>,
    pub disturbances: Vec<DVector<f64>>,
}

/// Recorded run output. All series share the `times` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub agents: Vec<AgentSeries>,
    /// Max pairwise state distance.
    pub consensus_errors: Vec<f64>,
    /// Max agent distance to the constrained optimum trajectory.
    pub tracking_errors_true: Vec<f64>,
    /// Max agent distance to the penalized optimum trajectory.
    pub tracking_errors_penalized: Vec<f64>,
    /// Sum of the agents' costs, each evaluated at its own state.
    pub global_costs: Vec<f64>,
    /// Max agent sup-norm of the sliding manifold.
    pub manifold_norms: Vec<f64>,
    /// Constrained optimum `x*(t)` from the centralized oracle.
    pub optimal_states: Vec<DVector<f64>>,
    /// Penalized optimum: the state where the summed penalized gradients
    /// vanish.
    pub penalized_optimal_states: Vec<DVector<f64>>,
}

impl Trajectory {
    fn with_agents(agent_count: usize) -> Self {
        Self {
            times: Vec::new(),
            agents: vec![AgentSeries::default(); agent_count],
            consensus_errors: Vec::new(),
            tracking_errors_true: Vec::new(),
            tracking_errors_penalized: Vec::new(),
            global_costs: Vec::new(),
            manifold_norms: Vec::new(),
            optimal_states: Vec::new(),
            penalized_optimal_states: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Consensus error at time `t`. Looks up the nearest recorded instant;
    /// with `require_exact` the lookup fails unless `t` is on the grid (to
    /// within `1e-9`).
    pub fn consensus_error_at(&self, t: f64, require_exact: bool) -> Result<f64, SimError> {
        let idx = self.nearest_index(t).ok_or(SimError::OffGrid { t })?;
        if require_exact && math::abs(self.times[idx] - t) > 1e-9 {
            return Err(SimError::OffGrid { t });
        }
        Ok(self.consensus_errors[idx])
    }

    fn nearest_index(&self, t: f64) -> Option<usize> {
        if self.times.is_empty() {
            return None;
        }
        let right = self.times.partition_point(|&u| u < t);
        let candidates = [right.saturating_sub(1), right.min(self.times.len() - 1)];
        candidates
            .into_iter()
            .min_by(|&a, &b| {
                math::abs(self.times[a] - t)
                    .partial_cmp(&math::abs(self.times[b] - t))
                    .expect("finite times")
            })
    }
}

/// Max pairwise 2-norm distance between agent states.
pub fn consensus_error(states: &[DVector<f64>]) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..states.len() {
        for j in (i + 1)..states.len() {
            worst = worst.max((&states[i] - &states[j]).norm());
        }
    }
    worst
}

/// Residual oscillation amplitude of the discretized sliding phase:
/// `2 * dt * (k0 + k1 + k2 + d0)`. One Euler step can move `s` by at most
/// `dt * (total switching gain + disturbance)`, so the manifold cannot
/// escape a band of twice that once reached.
pub fn chatter_band(gains: &ControllerGains, disturbance_bound: f64, dt: f64) -> f64 {
    2.0 * dt * (gains.k0 + gains.k1 + gains.k2 + disturbance_bound)
}

struct ControlSample {
    u1: DVector<f64>,
    u2: DVector<f64>,
    disturbance: DVector<f64>,
}

fn compute_controls(
    states: &[DVector<f64>],
    controller_states: &[ControllerState],
    t: f64,
    config: &SimConfig,
) -> Result<Vec<ControlSample>, SimError> {
    let instance = &config.instance;
    let mut out = Vec::with_capacity(states.len());
    for (i, agent) in instance.agents.iter().enumerate() {
        let u1 = nominal_control(
            i,
            states,
            t,
            &instance.graph,
            agent,
            config.gains.beta,
            config.sign_epsilon,
        )
        .map_err(|source| SimError::Controller { t, agent: i, source })?;
        let u2 = if config.sliding_enabled {
            let s = controller_states[i].manifold(&states[i]);
            sliding_control(&s, &config.gains, config.sign_epsilon)
        } else {
            DVector::zeros(states[i].len())
        };
        let disturbance = (agent.disturbance)(t);
        out.push(ControlSample {
            u1,
            u2,
            disturbance,
        });
    }
    Ok(out)
}

/// Euler update of states and manifold integrals with the given controls and
/// step size. Fails without mutating anything if a state goes non-finite or
/// leaves its barrier domain at `t + dt`.
fn try_apply(
    states: &[DVector<f64>],
    controls: &[ControlSample],
    t: f64,
    dt: f64,
    config: &SimConfig,
) -> Result<Vec<DVector<f64>>, SimError> {
    let mut next = Vec::with_capacity(states.len());
    for (i, (x, c)) in states.iter().zip(controls).enumerate() {
        let mut xn = x.clone();
        xn.axpy(dt, &c.u1, 1.0);
        xn.axpy(dt, &c.u2, 1.0);
        xn.axpy(dt, &c.disturbance, 1.0);
        if xn.iter().any(|v| !v.is_finite()) {
            return Err(SimError::NonFiniteState { t, agent: i });
        }
        next.push(xn);
    }
    for (i, (agent, xn)) in config.instance.agents.iter().zip(&next).enumerate() {
        if !penalty::in_domain(agent, xn, t + dt) {
            return Err(SimError::DomainAfterRetry { t, agent: i });
        }
    }
    Ok(next)
}

/// Applies precomputed controls, retrying once with `dt / 10` on a
/// barrier-domain violation at the new state. Returns the step size taken.
fn apply_with_retry(
    states: &mut [DVector<f64>],
    controller_states: &mut [ControllerState],
    controls: &[ControlSample],
    t: f64,
    dt: f64,
    config: &SimConfig,
) -> Result<f64, SimError> {
    let (next, dt_used) = match try_apply(states, controls, t, dt, config) {
        Ok(next) => (next, dt),
        Err(SimError::DomainAfterRetry { .. }) => {
            let shrunk = dt / 10.0;
            (try_apply(states, controls, t, shrunk, config)?, shrunk)
        }
        Err(other) => return Err(other),
    };
    for (i, xn) in next.into_iter().enumerate() {
        states[i] = xn;
        controller_states[i].advance(&controls[i].u1, dt_used);
    }
    Ok(dt_used)
}

/// One integrator step. Evaluates the controller at `(states, t)`, advances
/// states and manifold integrals by `dt`, and on a barrier-domain violation
/// at the new state retries once with `dt / 10`. Returns the step size
/// actually taken.
pub fn step(
    states: &mut [DVector<f64>],
    controller_states: &mut [ControllerState],
    t: f64,
    dt: f64,
    config: &SimConfig,
) -> Result<f64, SimError> {
    let controls = compute_controls(states, controller_states, t, config)?;
    apply_with_retry(states, controller_states, &controls, t, dt, config)
}

/// Runs the closed loop over `[0, t_end]`, recording every
/// `record_stride`-th step plus the final state. Deterministic: identical
/// configs produce identical trajectories.
pub fn run(config: &SimConfig) -> Result<Trajectory, SimError> {
    config.validate()?;
    let instance = &config.instance;
    instance.check_initial_feasibility()?;
    config
        .gains
        .check_disturbance_margin(instance.disturbance_bound)
        .map_err(SimError::Gains)?;

    let agent_count = instance.agent_count();
    let dim = instance.dim();
    let mut states: Vec<DVector<f64>> = instance
        .agents
        .iter()
        .map(|a| a.initial_state.clone())
        .collect();
    let mut controller_states = vec![ControllerState::new(dim); agent_count];

    let steps = libm::round(config.t_end / config.dt) as usize;
    let mut trajectory = Trajectory::with_agents(agent_count);
    let mut t = 0.0;

    for k in 0..=steps {
        let controls = compute_controls(&states, &controller_states, t, config)?;
        if k % config.record_stride == 0 || k == steps {
            record(&mut trajectory, t, &states, &controller_states, &controls, config)?;
        }
        if k == steps {
            break;
        }
        let (next, dt_used) = match try_apply(&states, &controls, t, config.dt, config) {
            Ok(next) => (next, config.dt),
            Err(SimError::DomainAfterRetry { .. }) => {
                let shrunk = config.dt / 10.0;
                (try_apply(&states, &controls, t, shrunk, config)?, shrunk)
            }
            Err(other) => return Err(other),
        };
        states = next;
        for (cs, c) in controller_states.iter_mut().zip(&controls) {
            cs.advance(&c.u1, dt_used);
        }
        t += dt_used;
    }
    Ok(trajectory)
}

fn record(
    trajectory: &mut Trajectory,
    t: f64,
    states: &[DVector<f64>],
    controller_states: &[ControllerState],
    controls: &[ControlSample],
    config: &SimConfig,
) -> Result<(), SimError> {
    let instance = &config.instance;
    trajectory.times.push(t);

    let mut worst_manifold = 0.0f64;
    for (i, agent) in instance.agents.iter().enumerate() {
        let series = &mut trajectory.agents[i];
        let x = &states[i];
        let s = controller_states[i].manifold(x);
        worst_manifold = worst_manifold.max(s.amax());
        let slack = agent.barrier.slack(t);
        let margins: Vec<f64> = agent
            .constraints
            .iter()
            .map(|g| g.value(x, t) - slack)
            .collect();
        series.states.push(x.clone());
        series.manifolds.push(s);
        series.nominal_controls.push(controls[i].u1.clone());
        series.sliding_controls.push(controls[i].u2.clone());
        series.constraint_margins.push(margins);
        series.disturbances.push(controls[i].disturbance.clone());
    }

    let (err_true, err_pen, x_star, x_pen) = tracking_pair(instance, states, t)?;
    trajectory.consensus_errors.push(consensus_error(states));
    trajectory.tracking_errors_true.push(err_true);
    trajectory.tracking_errors_penalized.push(err_pen);
    trajectory.global_costs.push(
        instance
            .agents
            .iter()
            .zip(states)
            .map(|(a, x)| a.cost.value(x, t))
            .sum(),
    );
    trajectory.manifold_norms.push(worst_manifold);
    trajectory.optimal_states.push(x_star);
    trajectory.penalized_optimal_states.push(x_pen);
    Ok(())
}

fn tracking_pair(
    instance: &ProblemInstance,
    states: &[DVector<f64>],
    t: f64,
) -> Result<(f64, f64, DVector<f64>, DVector<f64>), SimError> {
    let x_star = optimal_trajectory(instance, t)?;
    let x_pen = penalized_optimal_trajectory(instance, t)?;
    let err_true = states
        .iter()
        .map(|x| (x - &x_star).norm())
        .fold(0.0f64, f64::max);
    let err_pen = states
        .iter()
        .map(|x| (x - &x_pen).norm())
        .fold(0.0f64, f64::max);
    Ok((err_true, err_pen, x_star, x_pen))
}

/// Recomputes both tracking-error series from a recorded trajectory:
/// distance to the constrained optimum and to the penalized optimum.
pub fn tracking_errors(
    trajectory: &Trajectory,
    instance: &ProblemInstance,
) -> Result<(Vec<f64>, Vec<f64>), SimError> {
    let mut series_true = Vec::with_capacity(trajectory.len());
    let mut series_pen = Vec::with_capacity(trajectory.len());
    for (k, &t) in trajectory.times.iter().enumerate() {
        let states: Vec<DVector<f64>> = trajectory
            .agents
            .iter()
            .map(|a| a.states[k].clone())
            .collect();
        let (err_true, err_pen, _, _) = tracking_pair(instance, &states, t)?;
        series_true.push(err_true);
        series_pen.push(err_pen);
    }
    Ok((series_true, series_pen))
}

/// Max-over-agents sup-norm of the sliding manifold per recorded instant.
pub fn manifold_norms(trajectory: &Trajectory) -> Vec<f64> {
    (0..trajectory.len())
        .map(|k| {
            trajectory
                .agents
                .iter()
                .map(|a| a.manifolds[k].amax())
                .fold(0.0f64, f64::max)
        })
        .collect()
}

/// Norm of the summed penalized gradients, `|sum_i grad L_i(x_i, t)|_2`,
/// per recorded instant. The nominal flow drives this to zero.
pub fn summed_gradient_norms(
    trajectory: &Trajectory,
    instance: &ProblemInstance,
) -> Result<Vec<f64>, SimError> {
    let dim = instance.dim();
    let mut out = Vec::with_capacity(trajectory.len());
    for (k, &t) in trajectory.times.iter().enumerate() {
        let mut sum = DVector::zeros(dim);
        for (i, agent) in instance.agents.iter().enumerate() {
            let g = penalty::penalized_gradient(agent, &trajectory.agents[i].states[k], t)
                .map_err(|source| SimError::Controller {
                    t,
                    agent: i,
                    source: ControllerError::Domain(source),
                })?;
            sum += g;
        }
        out.push(sum.norm());
    }
    Ok(out)
}

/// First recorded time at which the consensus error drops below `threshold`
/// and never exceeds `sustain` afterwards.
pub fn measure_consensus_time(
    trajectory: &Trajectory,
    threshold: f64,
    sustain: f64,
) -> Option<f64> {
    let errs = &trajectory.consensus_errors;
    let n = errs.len();
    let mut suffix_max = vec![0.0f64; n];
    let mut acc = 0.0f64;
    for k in (0..n).rev() {
        acc = acc.max(errs[k]);
        suffix_max[k] = acc;
    }
    (0..n)
        .find(|&k| errs[k] < threshold && suffix_max[k] < sustain)
        .map(|k| trajectory.times[k])
}

/// Least-squares fit of `values ~ amplitude * exp(-rate * t)`; returns
/// `(amplitude, rate)`. `None` if fewer than two positive samples.
pub fn fit_exponential_decay(times: &[f64], values: &[f64]) -> Option<(f64, f64)> {
    let points: Vec<(f64, f64)> = times
        .iter()
        .zip(values)
        .filter(|(_, &v)| v > 0.0)
        .map(|(&t, &v)| (t, math::ln(v)))
        .collect();
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let sum_t: f64 = points.iter().map(|p| p.0).sum();
    let sum_y: f64 = points.iter().map(|p| p.1).sum();
    let sum_tt: f64 = points.iter().map(|p| p.0 * p.0).sum();
    let sum_ty: f64 = points.iter().map(|p| p.0 * p.1).sum();
    let denom = n * sum_tt - sum_t * sum_t;
    if denom == 0.0 {
        return None;
    }
    let slope = (n * sum_ty - sum_t * sum_y) / denom;
    let intercept = (sum_y - slope * sum_t) / n;
    Some((math::exp(intercept), -slope))
}

// --- centralized oracles ---------------------------------------------------

const GOLDEN_XTOL: f64 = 1e-11;
const BOUNDARY_TOL: f64 = 1e-12;
const SEARCH_RADIUS: f64 = 1e6;
const INV_PHI: f64 = 0.618_033_988_749_894_9;

fn golden_min<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Constrained optimum of the summed cost at time `t`, computed without any
/// controller machinery: golden-section over the feasible interval for
/// one-dimensional states, interior Newton continuation otherwise.
pub fn optimal_trajectory(instance: &ProblemInstance, t: f64) -> Result<DVector<f64>, SimError> {
    if instance.dim() == 1 {
        scalar_optimal(instance, t).map(|x| DVector::from_element(1, x))
    } else {
        vector_optimal(instance, t)
    }
}

fn worst_constraint(instance: &ProblemInstance, x: f64, t: f64) -> f64 {
    let xv = DVector::from_element(1, x);
    let mut worst = f64::NEG_INFINITY;
    for agent in &instance.agents {
        for g in &agent.constraints {
            worst = worst.max(g.value(&xv, t));
        }
    }
    worst
}

fn scalar_optimal(instance: &ProblemInstance, t: f64) -> Result<f64, SimError> {
    let cost = |x: f64| global_cost(instance, &DVector::from_element(1, x), t);
    let constrained = instance.agents.iter().any(|a| !a.constraints.is_empty());
    if !constrained {
        return Ok(golden_min(cost, -SEARCH_RADIUS, SEARCH_RADIUS, GOLDEN_XTOL));
    }
    let worst = |x: f64| worst_constraint(instance, x, t);
    let feasible_seed = if worst(0.0) < 0.0 {
        0.0
    } else {
        let xf = golden_min(worst, -SEARCH_RADIUS, SEARCH_RADIUS, 1e-9);
        if worst(xf) >= 0.0 {
            return Err(SimError::OracleInfeasible { t });
        }
        xf
    };
    let hi = feasible_end(&worst, feasible_seed, 1.0);
    let lo = feasible_end(&worst, feasible_seed, -1.0);
    Ok(golden_min(cost, lo, hi, GOLDEN_XTOL))
}

/// Walks from a strictly feasible point in direction `dir` (doubling steps)
/// until the constraints flip sign, then bisects the boundary. Returns
/// `seed + dir * SEARCH_RADIUS` when nothing binds within the search radius.
fn feasible_end<F: Fn(f64) -> f64>(worst: &F, seed: f64, dir: f64) -> f64 {
    let mut step = 1.0;
    let mut inside = seed;
    loop {
        let cand = seed + dir * step;
        if step >= SEARCH_RADIUS {
            return seed + dir * SEARCH_RADIUS;
        }
        if worst(cand) >= 0.0 {
            let (mut a, mut b) = (inside, cand);
            while math::abs(b - a) > BOUNDARY_TOL {
                let mid = 0.5 * (a + b);
                if worst(mid) < 0.0 {
                    a = mid;
                } else {
                    b = mid;
                }
            }
            return a;
        }
        inside = cand;
        step *= 2.0;
    }
}

fn vector_optimal(instance: &ProblemInstance, t: f64) -> Result<DVector<f64>, SimError> {
    let n = instance.dim();
    let value = |x: &DVector<f64>| global_cost(instance, x, t);
    let grad = |x: &DVector<f64>| {
        let mut g = DVector::zeros(n);
        for a in &instance.agents {
            g += a.cost.gradient(x, t);
        }
        g
    };
    let hess = |x: &DVector<f64>| {
        let mut h = nalgebra::DMatrix::zeros(n, n);
        for a in &instance.agents {
            h += a.cost.hessian(x, t);
        }
        h
    };
    let constraints: Vec<_> = instance
        .agents
        .iter()
        .flat_map(|a| a.constraints.iter())
        .collect();

    // unconstrained damped Newton from the origin
    let mut x = DVector::zeros(n);
    for _ in 0..200 {
        let g = grad(&x);
        if g.norm() < 1e-12 {
            break;
        }
        let step = crate::linalg::solve_symmetric(&hess(&x), &g)
            .map_err(|_| SimError::NewtonDiverged { t, residual: g.norm() })?;
        let mut alpha = 1.0;
        let f0 = value(&x);
        while alpha > 1e-12 && value(&(&x - alpha * &step)) > f0 {
            alpha *= 0.5;
        }
        x -= alpha * step;
    }
    if constraints.is_empty() {
        return Ok(x);
    }

    // move strictly inside the feasible region if needed
    let infeasibility = |x: &DVector<f64>| {
        constraints
            .iter()
            .map(|g| g.value(x, t).max(0.0))
            .map(|v| v * v)
            .sum::<f64>()
    };
    if constraints.iter().any(|g| g.value(&x, t) >= -1e-9) {
        for _ in 0..5000 {
            if constraints.iter().all(|g| g.value(&x, t) < -1e-9) {
                break;
            }
            let mut step = DVector::zeros(n);
            for g in &constraints {
                let v = g.value(&x, t);
                if v > -1e-9 {
                    step.axpy(2.0 * (v + 1e-6).max(0.0), &g.gradient(&x, t), 1.0);
                }
            }
            let p0 = infeasibility(&x);
            let mut alpha = 1.0;
            while alpha > 1e-14 && infeasibility(&(&x - alpha * &step)) >= p0 {
                alpha *= 0.5;
            }
            if alpha <= 1e-14 {
                break;
            }
            x -= alpha * step;
        }
        if constraints.iter().any(|g| g.value(&x, t) >= 0.0) {
            return Err(SimError::OracleInfeasible { t });
        }
    }

    // interior continuation: minimize sum f - mu * sum log(-g), mu -> 0
    let mut mu = 1.0;
    while mu > 1e-10 {
        for _ in 0..100 {
            let mut g_total = grad(&x);
            let mut h_total = hess(&x);
            for g in &constraints {
                let v = g.value(&x, t);
                let gg = g.gradient(&x, t);
                let gh = g.hessian(&x, t);
                g_total.axpy(-mu / v, &gg, 1.0);
                h_total += gh * (-mu / v);
                h_total += &gg * gg.transpose() * (mu / (v * v));
            }
            if g_total.norm() < 1e-11 {
                break;
            }
            let step = crate::linalg::solve_symmetric(&h_total, &g_total).map_err(|_| {
                SimError::NewtonDiverged {
                    t,
                    residual: g_total.norm(),
                }
            })?;
            let barrier_value = |x: &DVector<f64>| {
                let mut v = value(x);
                for g in &constraints {
                    let gv = g.value(x, t);
                    if gv >= 0.0 {
                        return f64::INFINITY;
                    }
                    v -= mu * math::ln(-gv);
                }
                v
            };
            let f0 = barrier_value(&x);
            let mut alpha = 1.0;
            while alpha > 1e-14 && barrier_value(&(&x - alpha * &step)) > f0 {
                alpha *= 0.5;
            }
            if alpha <= 1e-14 {
                break;
            }
            x -= alpha * step;
        }
        mu *= 0.1;
    }
    Ok(x)
}

/// The consensus state where the summed penalized gradients vanish, found by
/// damped Newton seeded at [`optimal_trajectory`]. Independent of the
/// distributed controller path.
pub fn penalized_optimal_trajectory(
    instance: &ProblemInstance,
    t: f64,
) -> Result<DVector<f64>, SimError> {
    let mut x = optimal_trajectory(instance, t)?;
    let dim = instance.dim();
    let summed = |x: &DVector<f64>| -> Result<(DVector<f64>, nalgebra::DMatrix<f64>), SimError> {
        let mut g = DVector::zeros(dim);
        let mut h = nalgebra::DMatrix::zeros(dim, dim);
        for (i, agent) in instance.agents.iter().enumerate() {
            let d = penalty::penalized_derivatives(agent, x, t).map_err(|source| {
                SimError::Controller {
                    t,
                    agent: i,
                    source: ControllerError::Domain(source),
                }
            })?;
            g += d.gradient;
            h += d.hessian;
        }
        Ok((g, h))
    };
    let in_all_domains =
        |x: &DVector<f64>| instance.agents.iter().all(|a| penalty::in_domain(a, x, t));
    if !in_all_domains(&x) {
        return Err(SimError::OracleInfeasible { t });
    }
    let mut residual = f64::INFINITY;
    for _ in 0..100 {
        let (g, h) = summed(&x)?;
        residual = g.norm();
        if residual < 1e-10 {
            return Ok(x);
        }
        let step = crate::linalg::solve_symmetric(&h, &g)
            .map_err(|_| SimError::NewtonDiverged { t, residual })?;
        let mut alpha = 1.0;
        let mut candidate = &x - alpha * &step;
        while alpha > 1e-14 && !in_all_domains(&candidate) {
            alpha *= 0.5;
            candidate = &x - alpha * &step;
        }
        if alpha <= 1e-14 {
            return Err(SimError::NewtonDiverged { t, residual });
        }
        x = candidate;
    }
    Err(SimError::NewtonDiverged { t, residual })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::{scenario_a, AgentProblem, ScalarTrackingCost, Signal};
    use crate::{graph, penalty::BarrierSchedule};
    use alloc::sync::Arc;
    use approx::assert_relative_eq;

    fn x1(v: f64) -> DVector<f64> {
        DVector::from_element(1, v)
    }

    fn default_config() -> SimConfig {
        SimConfig::new(scenario_a(), ControllerGains::scenario_defaults())
    }

    #[test]
    fn config_validation() {
        let mut c = default_config();
        c.dt = 0.0;
        assert!(matches!(c.validate(), Err(SimError::Config { .. })));
        let mut c = default_config();
        c.record_stride = 0;
        assert!(c.validate().is_err());
        let mut c = default_config();
        c.t_end = -1.0;
        assert!(c.validate().is_err());
        assert!(default_config().validate().is_ok());
    }

    #[test]
    fn zero_horizon_gives_single_initial_record() {
        let mut c = default_config();
        c.t_end = 0.0;
        let traj = run(&c).unwrap();
        assert_eq!(traj.len(), 1);
        assert_eq!(traj.times[0], 0.0);
        // s(0) = x(0), so the manifold norm is the largest initial state
        assert_eq!(traj.manifold_norms[0], 3.0);
        // max pairwise distance of (-2, -1, 1, 3)
        assert_eq!(traj.consensus_errors[0], 5.0);
        // tracking error vs x*(0) = 0.25
        assert_relative_eq!(traj.tracking_errors_true[0], 2.75, epsilon = 1e-7);
        assert_eq!(traj.agents[3].states[0], x1(3.0));
        assert_eq!(traj.agents[3].manifolds[0], x1(3.0));
    }

    #[test]
    fn run_rejects_gain_margin_violation() {
        let mut c = default_config();
        c.gains = ControllerGains::new(4.0, 3.0, 3.0, 0.5, 3.0, 3.0).unwrap();
        // k0 = 4 does not exceed the declared disturbance bound 5
        assert!(matches!(run(&c), Err(SimError::Gains(_))));
    }

    #[test]
    fn run_rejects_infeasible_start() {
        let mut c = default_config();
        c.instance = c
            .instance
            .with_initial_states(&[x1(40.0), x1(-1.0), x1(1.0), x1(3.0)])
            .unwrap();
        assert!(matches!(run(&c), Err(SimError::Problem(_))));
    }

    #[test]
    fn first_step_composes_controller_terms() {
        let c = default_config();
        let mut states: Vec<DVector<f64>> =
            c.instance.agents.iter().map(|a| a.initial_state.clone()).collect();
        let mut cs = vec![ControllerState::new(1); 4];
        let expected: Vec<DVector<f64>> = (0..4)
            .map(|i| {
                let u1 = nominal_control(
                    i,
                    &states,
                    0.0,
                    &c.instance.graph,
                    &c.instance.agents[i],
                    c.gains.beta,
                    0.0,
                )
                .unwrap();
                let u2 = sliding_control(&states[i].clone(), &c.gains, 0.0); // s(0) = x(0)
                let d = (c.instance.agents[i].disturbance)(0.0);
                &states[i] + c.dt * (u1 + u2 + d)
            })
            .collect();
        let dt_used = step(&mut states, &mut cs, 0.0, c.dt, &c).unwrap();
        assert_eq!(dt_used, c.dt);
        for i in 0..4 {
            assert_relative_eq!(states[i][0], expected[i][0], epsilon = 1e-15);
        }
    }

    #[test]
    fn euler_rule_with_constant_disturbance_only() {
        // free particle: zero cost gradient at the point, no constraints,
        // disturbance 2, controller contributes nothing at consensus with
        // sliding disabled
        let agent = AgentProblem::new(
            Arc::new(ScalarTrackingCost {
                target: Signal::Constant(1.0),
                offset: Signal::Constant(0.0),
            }),
            vec![],
            BarrierSchedule::new(10.0, 0.05, 30.0, 1.0).unwrap(),
            Arc::new(|_| x1(2.0)),
            x1(1.0),
        )
        .unwrap();
        let instance =
            crate::problem::ProblemInstance::new(graph::Graph::new(1, &[]).unwrap(), vec![agent], 2.5)
                .unwrap();
        let mut config = SimConfig::new(instance, ControllerGains::scenario_defaults());
        config.dt = 0.001;
        config.sliding_enabled = false;
        let mut states = vec![x1(1.0)];
        let mut cs = vec![ControllerState::new(1)];
        // at x = 1 = target(0): gradient zero, flow zero, so xdot = d = 2
        step(&mut states, &mut cs, 0.0, config.dt, &config).unwrap();
        assert_relative_eq!(states[0][0], 1.002, epsilon = 1e-15);
    }

    #[test]
    fn consensus_error_metric() {
        assert_eq!(consensus_error(&[x1(1.0), x1(1.0)]), 0.0);
        let e = consensus_error(&[x1(-2.0), x1(-1.0), x1(1.0), x1(3.0)]);
        assert_eq!(e, 5.0);
    }

    #[test]
    fn consensus_error_lookup_on_grid() {
        let mut c = default_config();
        c.t_end = 0.01;
        c.record_stride = 10;
        let traj = run(&c).unwrap();
        assert_eq!(traj.consensus_error_at(0.0, true).unwrap(), 5.0);
        assert!(traj.consensus_error_at(0.0042, true).is_err());
        // nearest-record lookup
        let off = traj.consensus_error_at(0.0042, false).unwrap();
        assert!(off > 0.0);
    }

    #[test]
    fn optimal_trajectory_reference_points() {
        let p = scenario_a();
        // unconstrained stationary point 1/4 (cos 0 - sin 0) = 0.25 < cos 0
        let x0 = optimal_trajectory(&p, 0.0).unwrap();
        assert_relative_eq!(x0[0], 0.25, epsilon = 1e-9);
        // at t = pi the constraint x <= -1 binds
        let xpi = optimal_trajectory(&p, core::f64::consts::PI).unwrap();
        assert_relative_eq!(xpi[0], -1.0, epsilon = 1e-9);
    }

    #[test]
    fn optimal_trajectory_single_agent_unconstrained() {
        let agent = AgentProblem::new(
            Arc::new(ScalarTrackingCost {
                target: Signal::sine(1.0),
                offset: Signal::Constant(0.0),
            }),
            vec![],
            BarrierSchedule::new(10.0, 0.05, 30.0, 1.0).unwrap(),
            Arc::new(|_| x1(0.0)),
            x1(0.0),
        )
        .unwrap();
        let p = crate::problem::ProblemInstance::new(
            graph::Graph::new(1, &[]).unwrap(),
            vec![agent],
            0.0,
        )
        .unwrap();
        for t in [0.0, 0.7, 2.1] {
            assert_relative_eq!(
                optimal_trajectory(&p, t).unwrap()[0],
                t.sin(),
                epsilon = 1e-9
            );
        }
        // no barrier: penalized optimum equals the plain optimum
        assert_relative_eq!(
            penalized_optimal_trajectory(&p, 0.7).unwrap()[0],
            0.7f64.sin(),
            epsilon = 1e-9
        );
    }

    #[test]
    fn penalized_optimum_near_true_optimum() {
        let p = scenario_a();
        let x = penalized_optimal_trajectory(&p, 0.0).unwrap();
        assert!((x[0] - 0.25).abs() < 0.02, "got {}", x[0]);
        // the summed penalized gradient must vanish there
        let mut sum = 0.0;
        for a in &p.agents {
            sum += penalty::penalized_gradient(a, &x, 0.0).unwrap()[0];
        }
        assert!(sum.abs() < 1e-9);
    }

    #[test]
    fn fit_recovers_synthetic_decay() {
        let times: Vec<f64> = (0..100).map(|k| 0.05 * k as f64).collect();
        let values: Vec<f64> = times.iter().map(|t| 3.5 * (-1.7 * t).exp()).collect();
        let (c, rate) = fit_exponential_decay(&times, &values).unwrap();
        assert_relative_eq!(c, 3.5, epsilon = 1e-9);
        assert_relative_eq!(rate, 1.7, epsilon = 1e-9);
        assert!(fit_exponential_decay(&[1.0], &[1.0]).is_none());
    }

    #[test]
    fn consensus_time_measurement() {
        let mut traj = Trajectory::with_agents(1);
        traj.times = vec![0.0, 1.0, 2.0, 3.0, 4.0];
        traj.consensus_errors = vec![1.0, 0.005, 0.03, 0.004, 0.005];
        // dips below 1e-2 at t=1 but spikes above 2e-2 later, so T2 = 3
        assert_eq!(measure_consensus_time(&traj, 1e-2, 2e-2), Some(3.0));
        traj.consensus_errors = vec![1.0, 0.5, 0.3, 0.2, 0.1];
        assert_eq!(measure_consensus_time(&traj, 1e-2, 2e-2), None);
    }

    #[test]
    fn chatter_band_reference_value() {
        let band = chatter_band(&ControllerGains::scenario_defaults(), 5.0, 1e-4);
        assert_relative_eq!(band, 4.2e-3, epsilon = 1e-15);
    }
}
