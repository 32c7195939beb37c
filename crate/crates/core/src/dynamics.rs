//! Gradient-play disequilibrium dynamics.
//!
//! Each supply channel moves toward the quantity where its marginal cost
//! meets the SC price, each customer toward the quantity where its
//! marginal utility does, and each price moves with its SC's excess
//! effective demand:
//!
//! ```text
//! tau_x   d(vm_x)/dt  = rho_i - beta_x vm_x - alpha_x - mu_i
//! tau_ag  d(vm_ag)/dt = beta_ag vm_ag + alpha_ag - rho_i
//! tau_rho d(rho_i)/dt = sum_j (1 - k1_j - k2_j) vm_ag_j - sum_x vm_x
//! ```
//!
//! With capacity dynamics on, each SC also carries a multiplier `mu_i >= 0`
//! driven by the projection of `committed supply - capacity` onto the
//! nonnegative orthant.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::model::{validate_scenario, MarketScenario, MarketState, ModelError, StateLayout, Violation};

/// A trajectory stops as converged once `max |rhs|` falls below this.
pub const CONVERGENCE_THRESHOLD: f64 = 1e-8;

/// A trajectory stops as diverged once any component exceeds this.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("invalid scenario: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidScenario(Vec<Violation>),
    #[error("state dimension {got} does not match system dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("invalid integration parameter: {0}")]
    InvalidParameter(String),
    #[error("perturbation names unknown SC `{0}`")]
    UnknownSc(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Market quantities and prices plus one capacity multiplier per SC
/// (empty when capacity dynamics are off).
#[derive(Debug, Clone, PartialEq)]
pub struct DynamicState {
    pub market: MarketState,
    pub multipliers: Vec<f64>,
}

impl DynamicState {
    pub fn without_capacity(market: MarketState) -> Self {
        Self { market, multipliers: Vec::new() }
    }

    /// Capacity dynamics on, every multiplier starting at zero.
    pub fn with_capacity(market: MarketState) -> Self {
        let n = market.rho.len();
        Self { market, multipliers: vec![0.0; n] }
    }

    pub fn capacity_enabled(&self) -> bool {
        !self.multipliers.is_empty()
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut x = self.market.to_vector();
        x.extend_from_slice(&self.multipliers);
        x
    }

    pub fn from_vector(layout: &StateLayout, capacity: bool, x: &[f64]) -> Result<Self, DynamicsError> {
        let m = if capacity { layout.n_scs() } else { 0 };
        if x.len() != layout.dim() + m {
            return Err(DynamicsError::Dimension { expected: layout.dim() + m, got: x.len() });
        }
        let (market, mult) = x.split_at(layout.dim());
        Ok(Self { market: MarketState::from_vector(layout, market)?, multipliers: mult.to_vec() })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TerminalStatus {
    Converged,
    MaxTime,
    Diverged,
}

impl TerminalStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            TerminalStatus::Converged => "converged",
            TerminalStatus::MaxTime => "max_time",
            TerminalStatus::Diverged => "diverged",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub times: Vec<f64>,
    pub states: Vec<DynamicState>,
    pub terminal_status: TerminalStatus,
}

impl TrajectoryRecord {
    pub fn last(&self) -> &DynamicState {
        self.states.last().expect("a trajectory always holds its initial state")
    }
}

/// Supply-side perturbation factors and the declared norm bounds on the
/// supply and demand perturbation matrices.
///
/// A factor `f` for SC `i` scales the curvature term `beta * vm` of every
/// channel of that SC and the SC's supply entries in its price equation.
/// Demand perturbation comes from the scenario's curtailment factors.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerturbationSpec {
    pub supply_factors: BTreeMap<String, f64>,
    pub pi_sc: f64,
    pub pi_c: f64,
}

impl PerturbationSpec {
    pub fn factor(&self, sc_id: &str) -> f64 {
        self.supply_factors.get(sc_id).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationMethod {
    Euler,
    Rk4,
}

#[derive(Debug, Clone, Copy)]
struct SupplyTerm {
    sc: usize,
    alpha: f64,
    beta: f64,
    inv_tau: f64,
    factor: f64,
}

#[derive(Debug, Clone, Copy)]
struct DemandTerm {
    sc: usize,
    alpha: f64,
    beta: f64,
    inv_tau: f64,
    demand_factor: f64,
}

/// The gradient-play vector field of one scenario, with coefficients
/// resolved into flat arrays.
#[derive(Debug, Clone)]
pub struct GradientPlaySystem {
    layout: StateLayout,
    supply: Vec<SupplyTerm>,
    demand: Vec<DemandTerm>,
    inv_tau_rho: Vec<f64>,
    capacity: Vec<f64>,
    capacity_dynamics: bool,
}

impl GradientPlaySystem {
    pub fn new(
        scenario: &MarketScenario,
        perturbation: Option<&PerturbationSpec>,
        capacity_dynamics: bool,
    ) -> Result<Self, DynamicsError> {
        let violations = validate_scenario(scenario);
        if !violations.is_empty() {
            return Err(DynamicsError::InvalidScenario(violations));
        }
        let layout = scenario.layout()?;
        let mut factors = vec![1.0; scenario.scs.len()];
        if let Some(p) = perturbation {
            for (id, &f) in &p.supply_factors {
                let i = scenario.sc_index(id).ok_or_else(|| DynamicsError::UnknownSc(id.clone()))?;
                if !f.is_finite() {
                    return Err(DynamicsError::InvalidParameter(format!("supply factor for {id} is {f}")));
                }
                factors[i] = f;
            }
        }
        let supply = layout
            .supply
            .iter()
            .map(|slot| {
                let ch = scenario.channel(*slot);
                SupplyTerm {
                    sc: slot.sc,
                    alpha: ch.coeffs.alpha,
                    beta: ch.coeffs.beta,
                    inv_tau: 1.0 / ch.tau,
                    factor: factors[slot.sc],
                }
            })
            .collect();
        let demand = scenario
            .customers
            .iter()
            .zip(&layout.customer_sc)
            .map(|(c, &sc)| DemandTerm {
                sc,
                alpha: c.coeffs_ag.alpha,
                beta: c.coeffs_ag.beta,
                inv_tau: 1.0 / c.tau_ag,
                demand_factor: c.demand_factor(),
            })
            .collect();
        Ok(Self {
            supply,
            demand,
            inv_tau_rho: scenario.scs.iter().map(|s| 1.0 / s.tau_rho).collect(),
            capacity: scenario.scs.iter().map(|s| s.capacity()).collect(),
            capacity_dynamics,
            layout,
        })
    }

    pub fn layout(&self) -> &StateLayout {
        &self.layout
    }

    pub fn capacity_dynamics(&self) -> bool {
        self.capacity_dynamics
    }

    /// Per-SC capacity (sum of enabled channels' `vm_max`).
    pub fn capacities(&self) -> &[f64] {
        &self.capacity
    }

    /// Length of the flat state: market part plus multipliers if enabled.
    pub fn dim(&self) -> usize {
        self.layout.dim() + if self.capacity_dynamics { self.layout.n_scs() } else { 0 }
    }

    /// Writes the time derivative at `x` into `out`.
    pub fn rhs_into(&self, x: &[f64], out: &mut [f64]) {
        let l = &self.layout;
        let (d0, p0, m0) = (l.demand_offset(), l.price_offset(), l.dim());
        out[p0..m0].iter_mut().for_each(|v| *v = 0.0);
        let mut net = vec![0.0; l.n_scs()];
        let mut committed = vec![0.0; l.n_scs()];
        for (s, t) in self.supply.iter().enumerate() {
            let mu = if self.capacity_dynamics { x[m0 + t.sc] } else { 0.0 };
            let q = x[s];
            out[s] = (x[p0 + t.sc] - t.factor * t.beta * q - t.alpha - mu) * t.inv_tau;
            net[t.sc] -= t.factor * q;
            committed[t.sc] += q;
        }
        for (j, t) in self.demand.iter().enumerate() {
            let q = x[d0 + j];
            out[d0 + j] = (t.beta * q + t.alpha - x[p0 + t.sc]) * t.inv_tau;
            net[t.sc] += t.demand_factor * q;
        }
        for (i, n) in net.into_iter().enumerate() {
            out[p0 + i] = n * self.inv_tau_rho[i];
        }
        if self.capacity_dynamics {
            for i in 0..l.n_scs() {
                out[m0 + i] = project_multiplier_rhs(committed[i] - self.capacity[i], x[m0 + i]);
            }
        }
    }

    pub fn rhs(&self, x: &[f64]) -> Result<Vec<f64>, DynamicsError> {
        if x.len() != self.dim() {
            return Err(DynamicsError::Dimension { expected: self.dim(), got: x.len() });
        }
        let mut out = vec![0.0; x.len()];
        self.rhs_into(x, &mut out);
        Ok(out)
    }

    /// One fixed step of size `h` (negative `h` integrates backwards).
    /// Multipliers are clamped to the nonnegative orthant afterwards.
    pub fn step(&self, method: IntegrationMethod, x: &mut [f64], h: f64) {
        let n = x.len();
        match method {
            IntegrationMethod::Euler => {
                let mut k = vec![0.0; n];
                self.rhs_into(x, &mut k);
                x.iter_mut().zip(&k).for_each(|(xi, ki)| *xi += h * ki);
            }
            IntegrationMethod::Rk4 => {
                let mut k1 = vec![0.0; n];
                let mut k2 = vec![0.0; n];
                let mut k3 = vec![0.0; n];
                let mut k4 = vec![0.0; n];
                let mut tmp = vec![0.0; n];
                self.rhs_into(x, &mut k1);
                for i in 0..n {
                    tmp[i] = x[i] + 0.5 * h * k1[i];
                }
                self.rhs_into(&tmp, &mut k2);
                for i in 0..n {
                    tmp[i] = x[i] + 0.5 * h * k2[i];
                }
                self.rhs_into(&tmp, &mut k3);
                for i in 0..n {
                    tmp[i] = x[i] + h * k3[i];
                }
                self.rhs_into(&tmp, &mut k4);
                for i in 0..n {
                    x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
                }
            }
        }
        if self.capacity_dynamics {
            x[self.layout.dim()..].iter_mut().for_each(|m| *m = m.max(0.0));
        }
    }
}

/// Projection of the multiplier drift onto the nonnegative orthant: a
/// multiplier at zero may only grow, a positive one follows the drift.
pub fn project_multiplier_rhs(cx1_minus_max: f64, multiplier: f64) -> f64 {
    if multiplier > 0.0 {
        cx1_minus_max
    } else {
        cx1_minus_max.max(0.0)
    }
}

/// Time derivative of every state component.
pub fn rhs(
    state: &DynamicState,
    scenario: &MarketScenario,
    perturbation: Option<&PerturbationSpec>,
) -> Result<Vec<f64>, DynamicsError> {
    let system = GradientPlaySystem::new(scenario, perturbation, state.capacity_enabled())?;
    let n_sc = system.layout().n_scs();
    if state.capacity_enabled() && state.multipliers.len() != n_sc {
        return Err(DynamicsError::Dimension { expected: n_sc, got: state.multipliers.len() });
    }
    state.market.check_layout(system.layout())?;
    system.rhs(&state.to_vector())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegrationOptions {
    pub t_end: f64,
    pub dt: f64,
    pub method: IntegrationMethod,
    /// Keep every n-th step (the initial and final states are always kept).
    pub record_every: usize,
    /// Stop as soon as the vector field vanishes (`max |rhs| < 1e-8`).
    pub stop_on_convergence: bool,
}

impl Default for IntegrationOptions {
    fn default() -> Self {
        Self { t_end: 10.0, dt: 1e-3, method: IntegrationMethod::Rk4, record_every: 1, stop_on_convergence: true }
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Fixed-step integration from `initial`. Capacity dynamics are on when
/// `initial` carries multipliers.
pub fn integrate(
    scenario: &MarketScenario,
    initial: &DynamicState,
    options: &IntegrationOptions,
    perturbation: Option<&PerturbationSpec>,
) -> Result<TrajectoryRecord, DynamicsError> {
    let IntegrationOptions { t_end, dt, method, record_every, stop_on_convergence } = *options;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(DynamicsError::InvalidParameter(format!("dt must be positive, got {dt}")));
    }
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(DynamicsError::InvalidParameter(format!("t_end must be positive, got {t_end}")));
    }
    if record_every == 0 {
        return Err(DynamicsError::InvalidParameter("record_every must be at least 1".into()));
    }
    let system = GradientPlaySystem::new(scenario, perturbation, initial.capacity_enabled())?;
    let layout = system.layout().clone();
    let capacity = initial.capacity_enabled();
    if capacity && initial.multipliers.len() != layout.n_scs() {
        return Err(DynamicsError::Dimension { expected: layout.n_scs(), got: initial.multipliers.len() });
    }
    initial.market.check_layout(&layout)?;
    if initial.multipliers.iter().any(|&m| m < 0.0) {
        return Err(DynamicsError::InvalidParameter("multipliers must be nonnegative".into()));
    }

    let ratio = t_end / dt;
    let n_steps =
        if (ratio - ratio.round()).abs() < 1e-9 * ratio.max(1.0) { ratio.round() } else { ratio.ceil() } as u64;
    let mut x = initial.to_vector();
    let mut f = vec![0.0; x.len()];
    let mut times = vec![0.0];
    let mut states = vec![initial.clone()];
    let snapshot = |x: &[f64]| DynamicState::from_vector(&layout, capacity, x);

    system.rhs_into(&x, &mut f);
    if stop_on_convergence && max_abs(&f) < CONVERGENCE_THRESHOLD {
        return Ok(TrajectoryRecord { times, states, terminal_status: TerminalStatus::Converged });
    }
    let mut status = TerminalStatus::MaxTime;
    for k in 1..=n_steps {
        let t_prev = (k - 1) as f64 * dt;
        let t = if k == n_steps { t_end } else { k as f64 * dt };
        system.step(method, &mut x, t - t_prev);
        if x.iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_THRESHOLD) {
            times.push(t);
            states.push(snapshot(&x)?);
            status = TerminalStatus::Diverged;
            break;
        }
        let mut converged = false;
        if stop_on_convergence {
            system.rhs_into(&x, &mut f);
            converged = max_abs(&f) < CONVERGENCE_THRESHOLD;
        }
        if converged || k == n_steps || k % record_every as u64 == 0 {
            times.push(t);
            states.push(snapshot(&x)?);
        }
        if converged {
            status = TerminalStatus::Converged;
            break;
        }
    }
    Ok(TrajectoryRecord { times, states, terminal_status: status })
}

/// Multiplies every component by `1 + u` with `u` uniform in
/// `[-relative_magnitude, relative_magnitude]`, drawn from a generator
/// seeded by `seed`.
pub fn perturb_state(state: &DynamicState, relative_magnitude: f64, seed: u64) -> Result<DynamicState, DynamicsError> {
    if !(relative_magnitude >= 0.0 && relative_magnitude.is_finite()) {
        return Err(DynamicsError::InvalidParameter(format!("perturbation magnitude {relative_magnitude}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut scale = |v: &mut f64| {
        let u = if relative_magnitude > 0.0 { rng.gen_range(-relative_magnitude..=relative_magnitude) } else { 0.0 };
        *v *= 1.0 + u;
    };
    let mut out = state.clone();
    out.market.vm_supply.iter_mut().for_each(&mut scale);
    out.market.vm_demand.iter_mut().for_each(&mut scale);
    out.market.rho.iter_mut().for_each(&mut scale);
    out.multipliers.iter_mut().for_each(&mut scale);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::solve_kkt_closed_form;
    use crate::presets::{s1, s1_single, with_kappa};

    fn equilibrium(s: &MarketScenario) -> DynamicState {
        DynamicState::without_capacity(solve_kkt_closed_form(s).unwrap().state)
    }

    #[test]
    fn rhs_vanishes_at_equilibrium() {
        for s in [s1(), s1_single(), with_kappa(s1(), 0.02, 0.02)] {
            let f = rhs(&equilibrium(&s), &s, None).unwrap();
            assert!(max_abs(&f) < 1e-10, "{f:?}");
        }
    }

    #[test]
    fn rhs_hand_values() {
        let s = s1();
        let mut st = DynamicState::without_capacity(MarketState::zeros(&s.layout().unwrap()));
        st.market.rho[0] = 90.0;
        let f = rhs(&st, &s, None).unwrap();
        assert_eq!(&f[..3], &[0.0, 0.0, 0.0]);
        assert!((f[3] - 780.0).abs() < 1e-9);
        assert_eq!(f[4], 0.0);
    }

    #[test]
    fn doubling_time_constants_halves_rhs() {
        let s = s1();
        let mut slow = s.clone();
        for sc in &mut slow.scs {
            sc.tau_rho *= 2.0;
            for ch in &mut sc.channels {
                ch.tau *= 2.0;
            }
        }
        for c in &mut slow.customers {
            c.tau_ag *= 2.0;
        }
        let market = MarketState { vm_supply: vec![10.0, 20.0, 30.0], vm_demand: vec![40.0], rho: vec![50.0] };
        let st = DynamicState::without_capacity(market);
        let f = rhs(&st, &s, None).unwrap();
        let g = rhs(&st, &slow, None).unwrap();
        for (a, b) in f.iter().zip(&g) {
            assert!((a - 2.0 * b).abs() < 1e-12);
        }
    }

    #[test]
    fn rhs_dimension_mismatch() {
        let s = s1();
        let st =
            DynamicState::without_capacity(MarketState { vm_supply: vec![0.0], vm_demand: vec![0.0], rho: vec![0.0] });
        assert!(rhs(&st, &s, None).is_err());
        let sys = GradientPlaySystem::new(&s, None, false).unwrap();
        assert!(matches!(sys.rhs(&[0.0; 3]), Err(DynamicsError::Dimension { expected: 5, got: 3 })));
    }

    #[test]
    fn multiplier_projection() {
        assert_eq!(project_multiplier_rhs(-3.0, 0.0), 0.0);
        assert_eq!(project_multiplier_rhs(-3.0, 1.0), -3.0);
        assert_eq!(project_multiplier_rhs(5.0, 0.0), 5.0);
    }

    #[test]
    fn capacity_multiplier_couples_into_supply() {
        let s = s1_single();
        let eq = solve_kkt_closed_form(&s).unwrap().state;
        let committed = eq.vm_supply[0];
        let mut st = DynamicState::with_capacity(eq);
        st.multipliers[0] = 0.6;
        let f = rhs(&st, &s, None).unwrap();
        // -mu / tau on the supply row
        assert!((f[0] + 1.0).abs() < 1e-9);
        // committed supply is below capacity 1000, so a positive multiplier decays
        assert!((f[3] - (committed - 1000.0)).abs() < 1e-9);
        st.multipliers[0] = 0.0;
        assert_eq!(rhs(&st, &s, None).unwrap()[3], 0.0);
    }

    #[test]
    fn equilibrium_is_a_fixed_point_of_the_flow() {
        let s = s1();
        let x0 = equilibrium(&s);
        let opts = IntegrationOptions { t_end: 10.0, dt: 1e-2, stop_on_convergence: false, ..Default::default() };
        let tr = integrate(&s, &x0, &opts, None).unwrap();
        assert_eq!(tr.times.len(), 1001);
        assert_eq!(tr.times[0], 0.0);
        assert!((tr.times[1000] - 10.0).abs() < 1e-12);
        for st in &tr.states {
            assert!(st.market.max_abs_diff(&x0.market) < 1e-10);
        }
    }

    #[test]
    fn rk4_agrees_with_fine_euler() {
        let s = s1();
        let x0 = perturb_state(&equilibrium(&s), 0.01, 7).unwrap();
        let dt = 1e-3;
        let rk = IntegrationOptions { t_end: 1.0, dt, stop_on_convergence: false, ..Default::default() };
        let eu = IntegrationOptions { method: IntegrationMethod::Euler, dt: dt / 100.0, ..rk };
        let a = integrate(&s, &x0, &rk, None).unwrap().last().to_vector();
        let b = integrate(&s, &x0, &eu, None).unwrap().last().to_vector();
        for (p, q) in a.iter().zip(&b) {
            assert!((p - q).abs() <= 1e-4 * p.abs().max(1.0), "{p} vs {q}");
        }
    }

    #[test]
    fn s1_single_returns_to_equilibrium() {
        let s = s1_single();
        let eq = equilibrium(&s);
        let x0 = perturb_state(&eq, 0.01, 1).unwrap();
        let opts = IntegrationOptions { t_end: 200.0, dt: 1e-2, record_every: 100, ..Default::default() };
        let tr = integrate(&s, &x0, &opts, None).unwrap();
        assert_eq!(tr.terminal_status, TerminalStatus::Converged);
        assert!(tr.last().market.max_abs_diff(&eq.market) < 1e-4);
    }

    #[test]
    fn s1_diverges_through_channel_difference_mode() {
        let s = s1();
        let x0 = perturb_state(&equilibrium(&s), 0.01, 1).unwrap();
        let opts = IntegrationOptions { t_end: 200.0, dt: 1e-2, record_every: 100, ..Default::default() };
        let tr = integrate(&s, &x0, &opts, None).unwrap();
        assert_eq!(tr.terminal_status, TerminalStatus::Diverged);
    }

    #[test]
    fn trajectory_times_are_strictly_increasing() {
        let s = s1_single();
        let x0 = perturb_state(&equilibrium(&s), 0.05, 3).unwrap();
        let opts = IntegrationOptions {
            t_end: 1.05,
            dt: 0.1,
            record_every: 3,
            stop_on_convergence: false,
            ..Default::default()
        };
        let tr = integrate(&s, &x0, &opts, None).unwrap();
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*tr.times.last().unwrap(), 1.05);
        assert_eq!(tr.times.len(), tr.states.len());
    }

    #[test]
    fn integration_parameters_are_checked() {
        let s = s1();
        let x0 = equilibrium(&s);
        let bad_dt = IntegrationOptions { dt: 0.0, ..Default::default() };
        assert!(integrate(&s, &x0, &bad_dt, None).is_err());
        let bad_t = IntegrationOptions { t_end: -1.0, ..Default::default() };
        assert!(integrate(&s, &x0, &bad_t, None).is_err());
    }

    #[test]
    fn perturbation_is_seeded_and_bounded() {
        let x0 = equilibrium(&s1());
        assert_eq!(perturb_state(&x0, 0.0, 5).unwrap(), x0);
        let a = perturb_state(&x0, 0.01, 5).unwrap();
        assert_eq!(a, perturb_state(&x0, 0.01, 5).unwrap());
        assert_ne!(a, perturb_state(&x0, 0.01, 6).unwrap());
        for (p, q) in a.to_vector().iter().zip(x0.to_vector()) {
            assert!((p - q).abs() <= 0.01 * q.abs() + 1e-15);
        }
        assert!(perturb_state(&x0, -0.1, 5).is_err());
    }

    #[test]
    fn multipliers_stay_nonnegative() {
        // capacity well below the equilibrium supply so the multiplier is active
        let mut s = s1_single();
        s.scs[0].channels[0].vm_max = 40.0;
        let eq = solve_kkt_closed_form(&s).unwrap().state;
        let x0 = DynamicState::with_capacity(eq);
        let opts = IntegrationOptions { t_end: 20.0, dt: 1e-2, stop_on_convergence: false, ..Default::default() };
        let tr = integrate(&s, &x0, &opts, None).unwrap();
        assert!(tr.states.iter().all(|st| st.multipliers.iter().all(|&m| m >= 0.0)));
        assert!(tr.states.iter().any(|st| st.multipliers[0] > 0.0));
    }

    #[test]
    fn supply_factor_scales_supply_terms() {
        let s = s1_single();
        let p = PerturbationSpec { supply_factors: [("SC1".to_string(), 0.5)].into(), pi_sc: 1.0, pi_c: 0.0 };
        let market = MarketState { vm_supply: vec![10.0], vm_demand: vec![20.0], rho: vec![80.0] };
        let st = DynamicState::without_capacity(market);
        let f = rhs(&st, &s, Some(&p)).unwrap();
        assert!((f[0] - (80.0 - 0.5 * -0.3 * 10.0 - 90.0) / 0.6).abs() < 1e-12);
        assert!((f[2] - (20.0 - 0.5 * 10.0)).abs() < 1e-12);
        let unknown = PerturbationSpec { supply_factors: [("SCX".to_string(), 0.5)].into(), ..Default::default() };
        assert!(matches!(rhs(&st, &s, Some(&unknown)), Err(DynamicsError::UnknownSc(_))));
    }
}
