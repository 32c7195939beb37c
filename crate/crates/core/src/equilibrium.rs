//! Static market equilibrium: the point where every channel's marginal cost
//! and every customer's marginal utility equal their SC's price, and each
//! SC's supply covers the effective demand of its customers.
//!
//! Three routes are provided. [`solve_kkt_closed_form`] solves the linear
//! KKT system exactly, one scalar equation per SC. [`tatonnement`] adjusts
//! prices against excess demand with quantities at their best responses.
//! [`interior_point_iterate`] takes simultaneous primal-descent and
//! dual-ascent steps on the Lagrangian.

use std::fmt;

use thiserror::Error;

use crate::model::{validate_scenario, MarketScenario, MarketState, ModelError, StateLayout, Violation};

/// Residual below which a closed-form solve is reported as converged.
pub const CLOSED_FORM_TOLERANCE: f64 = 1e-9;

/// Any residual above this aborts an iterative solve as diverged.
pub const DIVERGENCE_THRESHOLD: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EquilibriumError {
    #[error("invalid scenario: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidScenario(Vec<Violation>),
    #[error("SC `{0}` has no enabled supply channel")]
    Unsolvable(String),
    #[error("SC `{0}` is degenerate: supply and demand slopes cancel")]
    Degenerate(String),
    #[error("invalid solver options: {0}")]
    InvalidOptions(&'static str),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    ClosedForm,
    Tatonnement,
    InteriorPoint,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::ClosedForm => "closed-form",
            Method::Tatonnement => "tatonnement",
            Method::InteriorPoint => "interior-point",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Converged,
    MaxIterations,
    Diverged,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Warning {
    NegativePrice { sc: String, rho: f64 },
    OutOfBounds { component: String, value: f64, min: f64, max: f64 },
}

impl fmt::Display for Warning {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Warning::NegativePrice { sc, rho } => write!(f, "negative price {rho} at {sc}"),
            Warning::OutOfBounds { component, value, min, max } => {
                write!(f, "{component} = {value} outside [{min}, {max}]")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumResult {
    pub state: MarketState,
    pub method: Method,
    pub iterations: u64,
    /// Max-norm KKT residual; complementarity form when bounds are enforced.
    pub kkt_residual: f64,
    pub status: SolveStatus,
    pub warnings: Vec<Warning>,
}

impl EquilibriumResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iterations: u64,
    /// Price and quantity step sizes of the iterative methods.
    pub step_scale: f64,
    /// Clamp best responses to `[vm_min, vm_max]`.
    pub enforce_bounds: bool,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tolerance: 1e-6, max_iterations: 1_000_000, step_scale: 0.01, enforce_bounds: false }
    }
}

impl SolverOptions {
    fn check(&self) -> Result<(), EquilibriumError> {
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(EquilibriumError::InvalidOptions("tolerance must be positive"));
        }
        if !(self.step_scale > 0.0 && self.step_scale.is_finite()) {
            return Err(EquilibriumError::InvalidOptions("step_scale must be positive"));
        }
        Ok(())
    }
}

fn checked_layout(scenario: &MarketScenario) -> Result<StateLayout, EquilibriumError> {
    let violations = validate_scenario(scenario);
    if !violations.is_empty() {
        return Err(EquilibriumError::InvalidScenario(violations));
    }
    Ok(scenario.layout()?)
}

/// Solves the KKT system exactly. Box bounds are not part of the problem;
/// quantities outside them, and negative prices, only produce warnings.
pub fn solve_kkt_closed_form(scenario: &MarketScenario) -> Result<EquilibriumResult, EquilibriumError> {
    let layout = checked_layout(scenario)?;
    let mut state = MarketState::zeros(&layout);
    for (i, sc) in scenario.scs.iter().enumerate() {
        if layout.sc_supply[i].is_empty() {
            return Err(EquilibriumError::Unsolvable(sc.id.clone()));
        }
        // Balance sum_j f_j (rho - a_j) / b_j = sum_x (rho - a_x) / b_x,
        // linear in rho: slope * rho = intercept.
        let mut slope = 0.0;
        let mut intercept = 0.0;
        for &j in &layout.sc_customers[i] {
            let c = &scenario.customers[j];
            let f = c.demand_factor();
            slope += f / c.coeffs_ag.beta;
            intercept += f * c.coeffs_ag.alpha / c.coeffs_ag.beta;
        }
        for &s in &layout.sc_supply[i] {
            let k = scenario.channel(layout.supply[s]).coeffs;
            slope -= 1.0 / k.beta;
            intercept -= k.alpha / k.beta;
        }
        let scale = layout.sc_supply[i]
            .iter()
            .map(|&s| 1.0 / scenario.channel(layout.supply[s]).coeffs.beta.abs())
            .chain(layout.sc_customers[i].iter().map(|&j| 1.0 / scenario.customers[j].coeffs_ag.beta.abs()))
            .fold(0.0, f64::max);
        if slope.abs() <= 1e-12 * scale {
            return Err(EquilibriumError::Degenerate(sc.id.clone()));
        }
        let rho = intercept / slope;
        state.rho[i] = rho;
        for &s in &layout.sc_supply[i] {
            state.vm_supply[s] = scenario.channel(layout.supply[s]).coeffs.quantity_at_marginal(rho);
        }
        for &j in &layout.sc_customers[i] {
            state.vm_demand[j] = scenario.customers[j].coeffs_ag.quantity_at_marginal(rho);
        }
    }
    let kkt_residual = residual_with_layout(&state, scenario, &layout);
    let status =
        if kkt_residual <= CLOSED_FORM_TOLERANCE { SolveStatus::Converged } else { SolveStatus::MaxIterations };
    let warnings = collect_warnings(&state, scenario, &layout);
    Ok(EquilibriumResult { state, method: Method::ClosedForm, iterations: 1, kkt_residual, status, warnings })
}

/// Per-SC `effective demand - supply`.
pub fn excess_demand(state: &MarketState, scenario: &MarketScenario) -> Result<Vec<f64>, EquilibriumError> {
    let layout = scenario.layout()?;
    state.check_layout(&layout)?;
    Ok(excess_with_layout(state, scenario, &layout))
}

fn excess_with_layout(state: &MarketState, scenario: &MarketScenario, layout: &StateLayout) -> Vec<f64> {
    (0..layout.n_scs())
        .map(|i| {
            let demand: f64 = layout.sc_customers[i]
                .iter()
                .map(|&j| scenario.customers[j].effective_demand(state.vm_demand[j]))
                .sum();
            let supply: f64 = layout.sc_supply[i].iter().map(|&s| state.vm_supply[s]).sum();
            demand - supply
        })
        .collect()
}

/// Largest violation among stationarity (`|marginal - rho|`) and balance
/// (`|effective demand - supply|`) equations. Box bounds are ignored.
pub fn kkt_residual(state: &MarketState, scenario: &MarketScenario) -> Result<f64, EquilibriumError> {
    let layout = scenario.layout()?;
    state.check_layout(&layout)?;
    Ok(residual_with_layout(state, scenario, &layout))
}

fn residual_with_layout(state: &MarketState, scenario: &MarketScenario, layout: &StateLayout) -> f64 {
    let mut r: f64 = 0.0;
    for (s, slot) in layout.supply.iter().enumerate() {
        let mc = scenario.channel(*slot).coeffs.marginal(state.vm_supply[s]);
        r = r.max((mc - state.rho[slot.sc]).abs());
    }
    for (j, c) in scenario.customers.iter().enumerate() {
        let mu = c.coeffs_ag.marginal(state.vm_demand[j]);
        r = r.max((state.rho[layout.customer_sc[j]] - mu).abs());
    }
    for e in excess_with_layout(state, scenario, layout) {
        r = r.max(e.abs());
    }
    r
}

// `gap` is `rho - marginal(q)`. With beta < 0 the unclamped best response
// lies below `q` iff gap > 0, so a quantity resting on its lower bound is
// consistent when gap >= 0 and one on its upper bound when gap <= 0.
fn complementarity(value: f64, min: f64, max: f64, gap: f64) -> f64 {
    let tol = 1e-12 * (1.0 + max.abs());
    if value <= min + tol {
        (-gap).max(0.0)
    } else if value >= max - tol {
        gap.max(0.0)
    } else {
        gap.abs()
    }
}

/// KKT residual of the box-constrained problem: a quantity at a bound only
/// contributes if its best response points further outside the box.
pub fn bounded_kkt_residual(state: &MarketState, scenario: &MarketScenario) -> Result<f64, EquilibriumError> {
    let layout = scenario.layout()?;
    state.check_layout(&layout)?;
    Ok(bounded_residual_with_layout(state, scenario, &layout))
}

fn bounded_residual_with_layout(state: &MarketState, scenario: &MarketScenario, layout: &StateLayout) -> f64 {
    let mut r: f64 = 0.0;
    for (s, slot) in layout.supply.iter().enumerate() {
        let ch = scenario.channel(*slot);
        let q = state.vm_supply[s];
        let gap = state.rho[slot.sc] - ch.coeffs.marginal(q);
        r = r.max(complementarity(q, ch.vm_min, ch.vm_max, gap));
    }
    for (j, c) in scenario.customers.iter().enumerate() {
        let q = state.vm_demand[j];
        let gap = state.rho[layout.customer_sc[j]] - c.coeffs_ag.marginal(q);
        r = r.max(complementarity(q, c.vm_min, c.vm_max, gap));
    }
    for e in excess_with_layout(state, scenario, layout) {
        r = r.max(e.abs());
    }
    r
}

fn collect_warnings(state: &MarketState, scenario: &MarketScenario, layout: &StateLayout) -> Vec<Warning> {
    let mut out = Vec::new();
    for (s, slot) in layout.supply.iter().enumerate() {
        let ch = scenario.channel(*slot);
        let v = state.vm_supply[s];
        if v < ch.vm_min || v > ch.vm_max {
            out.push(Warning::OutOfBounds {
                component: format!("vm_{}:{}", ch.channel, scenario.scs[slot.sc].id),
                value: v,
                min: ch.vm_min,
                max: ch.vm_max,
            });
        }
    }
    for (j, c) in scenario.customers.iter().enumerate() {
        let v = state.vm_demand[j];
        if v < c.vm_min || v > c.vm_max {
            out.push(Warning::OutOfBounds {
                component: format!("vm_ag:{}", c.id),
                value: v,
                min: c.vm_min,
                max: c.vm_max,
            });
        }
    }
    for (i, sc) in scenario.scs.iter().enumerate() {
        if state.rho[i] < 0.0 {
            out.push(Warning::NegativePrice { sc: sc.id.clone(), rho: state.rho[i] });
        }
    }
    out
}

/// Quantities at which each channel's marginal cost and each customer's
/// marginal utility equal the current price, optionally clamped to bounds.
pub fn best_responses(scenario: &MarketScenario, rho: &[f64], clamp: bool) -> Result<MarketState, EquilibriumError> {
    let layout = scenario.layout()?;
    let mut state = MarketState::zeros(&layout);
    if rho.len() != layout.n_scs() {
        return Err(ModelError::StateMismatch(format!("{} prices for {} SCs", rho.len(), layout.n_scs())).into());
    }
    state.rho.copy_from_slice(rho);
    fill_best_responses(scenario, &layout, &mut state, clamp);
    Ok(state)
}

fn fill_best_responses(scenario: &MarketScenario, layout: &StateLayout, state: &mut MarketState, clamp: bool) {
    for (s, slot) in layout.supply.iter().enumerate() {
        let ch = scenario.channel(*slot);
        let q = ch.coeffs.quantity_at_marginal(state.rho[slot.sc]);
        state.vm_supply[s] = if clamp { q.clamp(ch.vm_min, ch.vm_max) } else { q };
    }
    for (j, c) in scenario.customers.iter().enumerate() {
        let q = c.coeffs_ag.quantity_at_marginal(state.rho[layout.customer_sc[j]]);
        state.vm_demand[j] = if clamp { q.clamp(c.vm_min, c.vm_max) } else { q };
    }
}

// d(excess)/d(rho) for SC i with quantities at (possibly clamped) best
// responses; clamped quantities do not respond to price.
fn excess_slope(scenario: &MarketScenario, layout: &StateLayout, state: &MarketState, i: usize, clamp: bool) -> f64 {
    let free = |q: f64, lo: f64, hi: f64| !clamp || (q > lo && q < hi);
    let mut slope = 0.0;
    for &j in &layout.sc_customers[i] {
        let c = &scenario.customers[j];
        if free(state.vm_demand[j], c.vm_min, c.vm_max) {
            slope += c.demand_factor() / c.coeffs_ag.beta;
        }
    }
    for &s in &layout.sc_supply[i] {
        let ch = scenario.channel(layout.supply[s]);
        if free(state.vm_supply[s], ch.vm_min, ch.vm_max) {
            slope -= 1.0 / ch.coeffs.beta;
        }
    }
    slope
}

/// Price adjustment with quantities held at their best responses.
///
/// Each SC's price moves by `step_scale * excess` in the direction that
/// shrinks its excess demand: up when excess demand falls with price (the
/// classical rule), down when downward-sloping supply makes it rise with
/// price. Starts from the first enabled channel's `alpha`.
pub fn tatonnement(scenario: &MarketScenario, options: &SolverOptions) -> Result<EquilibriumResult, EquilibriumError> {
    let layout = checked_layout(scenario)?;
    let initial: Vec<f64> =
        scenario.scs.iter().map(|sc| sc.enabled_channels().next().map(|c| c.coeffs.alpha).unwrap_or(0.0)).collect();
    tatonnement_with_layout(scenario, &layout, initial, options)
}

/// [`tatonnement`] from the given initial prices.
pub fn tatonnement_from(
    scenario: &MarketScenario,
    initial_rho: &[f64],
    options: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    let layout = checked_layout(scenario)?;
    if initial_rho.len() != layout.n_scs() {
        return Err(
            ModelError::StateMismatch(format!("{} prices for {} SCs", initial_rho.len(), layout.n_scs())).into()
        );
    }
    tatonnement_with_layout(scenario, &layout, initial_rho.to_vec(), options)
}

fn tatonnement_with_layout(
    scenario: &MarketScenario,
    layout: &StateLayout,
    rho: Vec<f64>,
    options: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    options.check()?;
    let clamp = options.enforce_bounds;
    let mut state = MarketState::zeros(layout);
    state.rho = rho;
    let residual = |state: &MarketState| {
        if clamp {
            bounded_residual_with_layout(state, scenario, layout)
        } else {
            residual_with_layout(state, scenario, layout)
        }
    };
    let mut iterations = 0;
    let status = loop {
        fill_best_responses(scenario, layout, &mut state, clamp);
        let r = residual(&state);
        if !r.is_finite() || r > DIVERGENCE_THRESHOLD {
            break SolveStatus::Diverged;
        }
        if r <= options.tolerance && options.step_scale * r < options.tolerance {
            break SolveStatus::Converged;
        }
        if iterations >= options.max_iterations {
            break SolveStatus::MaxIterations;
        }
        let excess = excess_with_layout(&state, scenario, layout);
        for (i, e) in excess.into_iter().enumerate() {
            let direction = if excess_slope(scenario, layout, &state, i, clamp) > 0.0 { -1.0 } else { 1.0 };
            state.rho[i] += options.step_scale * direction * e;
        }
        iterations += 1;
    };
    finish(scenario, layout, state, Method::Tatonnement, iterations, status, clamp)
}

fn finish(
    scenario: &MarketScenario,
    layout: &StateLayout,
    state: MarketState,
    method: Method,
    iterations: u64,
    status: SolveStatus,
    bounded: bool,
) -> Result<EquilibriumResult, EquilibriumError> {
    let kkt_residual = if bounded {
        bounded_residual_with_layout(&state, scenario, layout)
    } else {
        residual_with_layout(&state, scenario, layout)
    };
    let warnings = collect_warnings(&state, scenario, layout);
    Ok(EquilibriumResult { state, method, iterations, kkt_residual, status, warnings })
}

/// Primal-dual gradient iteration from all-zero quantities and prices.
pub fn interior_point_iterate(
    scenario: &MarketScenario,
    options: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    let layout = checked_layout(scenario)?;
    let initial = MarketState::zeros(&layout);
    interior_point_with_layout(scenario, &layout, initial, options)
}

/// Primal-dual gradient iteration from `initial`.
///
/// Each step moves quantities against the Lagrangian gradient
/// (`alpha + beta * vm - rho` for supplies, `rho - alpha - beta * vm` for
/// demands) and prices along excess effective demand, all from the same
/// iterate.
pub fn interior_point_from(
    scenario: &MarketScenario,
    initial: &MarketState,
    options: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    let layout = checked_layout(scenario)?;
    initial.check_layout(&layout)?;
    interior_point_with_layout(scenario, &layout, initial.clone(), options)
}

fn interior_point_with_layout(
    scenario: &MarketScenario,
    layout: &StateLayout,
    mut state: MarketState,
    options: &SolverOptions,
) -> Result<EquilibriumResult, EquilibriumError> {
    options.check()?;
    let k = options.step_scale;
    let clamp = options.enforce_bounds;
    let mut iterations = 0;
    let status = loop {
        let r = if clamp {
            bounded_residual_with_layout(&state, scenario, layout)
        } else {
            residual_with_layout(&state, scenario, layout)
        };
        if !r.is_finite() || r > DIVERGENCE_THRESHOLD {
            break SolveStatus::Diverged;
        }
        if r <= options.tolerance {
            break SolveStatus::Converged;
        }
        if iterations >= options.max_iterations {
            break SolveStatus::MaxIterations;
        }
        let excess = excess_with_layout(&state, scenario, layout);
        for (s, slot) in layout.supply.iter().enumerate() {
            let ch = scenario.channel(*slot);
            let grad = ch.coeffs.marginal(state.vm_supply[s]) - state.rho[slot.sc];
            let q = state.vm_supply[s] - k * grad;
            state.vm_supply[s] = if clamp { q.clamp(ch.vm_min, ch.vm_max) } else { q };
        }
        for (j, c) in scenario.customers.iter().enumerate() {
            let grad = state.rho[layout.customer_sc[j]] - c.coeffs_ag.marginal(state.vm_demand[j]);
            let q = state.vm_demand[j] - k * grad;
            state.vm_demand[j] = if clamp { q.clamp(c.vm_min, c.vm_max) } else { q };
        }
        for (rho, e) in state.rho.iter_mut().zip(excess) {
            *rho += k * e;
        }
        iterations += 1;
    };
    finish(scenario, layout, state, Method::InteriorPoint, iterations, status, clamp)
}

/// Splits a customer's demand at price `rho` across elastic, curtailable
/// and shiftable jobs so that every job type's marginal utility equals the
/// price. `None` when the customer has no per-type coefficients.
pub fn job_type_split(customer: &crate::model::CustomerParams, rho: f64) -> Option<[f64; 3]> {
    customer.job_types.map(|jt| {
        [
            jt.elastic.quantity_at_marginal(rho),
            jt.curtailable.quantity_at_marginal(rho),
            jt.shiftable.quantity_at_marginal(rho),
        ]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{social_welfare, QuadraticCoefficients};
    use crate::presets::{s1, s1_single, with_kappa};

    #[test]
    fn closed_form_s1() {
        let r = solve_kkt_closed_form(&s1()).unwrap();
        assert!((r.state.rho[0] - 70.5).abs() < 1e-12);
        for &q in &r.state.vm_supply {
            assert!((q - 65.0).abs() < 1e-12);
        }
        assert!((r.state.vm_demand[0] - 195.0).abs() < 1e-12);
        assert!(r.kkt_residual < 1e-12);
        assert!(r.converged());
        assert!((social_welfare(&r.state, &s1()).unwrap() - 7605.0).abs() < 1e-9);
    }

    #[test]
    fn closed_form_with_curtailment() {
        let r = solve_kkt_closed_form(&with_kappa(s1(), 0.02, 0.02)).unwrap();
        assert!((r.state.rho[0] - 577.44 / 8.08).abs() < 1e-12);
        assert!((r.state.rho[0] - 71.465347).abs() < 1e-6);
        assert!(r.kkt_residual < 1e-12);
    }

    #[test]
    fn closed_form_without_customers() {
        let mut s = s1();
        s.customers.clear();
        let r = solve_kkt_closed_form(&s).unwrap();
        assert!((r.state.rho[0] - 90.0).abs() < 1e-12);
        assert!(r.state.vm_supply.iter().all(|q| q.abs() < 1e-12));
    }

    #[test]
    fn closed_form_errors() {
        let mut s = s1_single();
        s.scs[0].channels[0].enabled = false;
        assert!(matches!(solve_kkt_closed_form(&s), Err(EquilibriumError::InvalidScenario(_))));

        // supply slope -1/beta_x cancels demand slope f/beta_j
        let mut s = s1_single();
        s.scs[0].channels[0].coeffs = QuadraticCoefficients::new(90.0, -0.5);
        s.customers[0].coeffs_ag = QuadraticCoefficients::new(168.0, -0.5);
        assert!(matches!(solve_kkt_closed_form(&s), Err(EquilibriumError::Degenerate(_))));
    }

    #[test]
    fn closed_form_warnings() {
        let mut s = s1();
        s.customers[0].vm_max = 100.0;
        let r = solve_kkt_closed_form(&s).unwrap();
        assert!(r
            .warnings
            .iter()
            .any(|w| matches!(w, Warning::OutOfBounds { component, .. } if component == "vm_ag:C1")));

        // cheap supply that is more price-responsive than demand
        let mut s = s1_single();
        s.scs[0].channels[0].coeffs = QuadraticCoefficients::new(10.0, -0.5);
        s.customers[0].coeffs_ag = QuadraticCoefficients::new(168.0, -1.0);
        let r = solve_kkt_closed_form(&s).unwrap();
        assert!(r.state.rho[0] < 0.0);
        assert!(r.warnings.iter().any(|w| matches!(w, Warning::NegativePrice { .. })));
    }

    #[test]
    fn residual_examples() {
        let s = s1();
        let layout = s.layout().unwrap();
        assert_eq!(kkt_residual(&MarketState::zeros(&layout), &s).unwrap(), 168.0);
        let eq = solve_kkt_closed_form(&s).unwrap().state;
        let eps = 1e-3;
        let mut moved = eq.clone();
        moved.rho[0] += eps;
        let lipschitz = 1.0 + 3.0 / 0.3 + 1.0 / 0.5;
        assert!(kkt_residual(&moved, &s).unwrap() <= lipschitz * eps + 1e-12);
    }

    #[test]
    fn tatonnement_s1() {
        let r = tatonnement(&s1(), &SolverOptions::default()).unwrap();
        assert!(r.converged(), "{r:?}");
        assert!((r.state.rho[0] - 70.5).abs() < 1e-6);
        assert!(r.kkt_residual <= 1e-6);
    }

    #[test]
    fn tatonnement_fixed_point() {
        let s = s1();
        let r = tatonnement_from(&s, &[70.5], &SolverOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.state.rho[0], 70.5);
    }

    #[test]
    fn tatonnement_diverges_with_large_step() {
        let opts = SolverOptions { step_scale: 0.3, ..Default::default() };
        let r = tatonnement(&s1(), &opts).unwrap();
        assert_eq!(r.status, SolveStatus::Diverged);
    }

    #[test]
    fn tatonnement_uniqueness_probe() {
        let s = s1();
        let opts = SolverOptions::default();
        let a = tatonnement_from(&s, &[10.0], &opts).unwrap();
        let b = tatonnement_from(&s, &[150.0], &opts).unwrap();
        assert!(a.converged() && b.converged());
        assert!(a.state.max_abs_diff(&b.state) < 10.0 * opts.tolerance);
    }

    #[test]
    fn tatonnement_with_bounds_equalizes_channels() {
        let mut s = s1();
        s.customers[0].vm_max = 100.0;
        let opts = SolverOptions { enforce_bounds: true, ..Default::default() };
        // warm start from the unconstrained price; from rho = 90 the clamped
        // market instead settles on the zero-trade point at rho = 168
        let r = tatonnement_from(&s, &[70.5], &opts).unwrap();
        assert!(r.converged(), "{r:?}");
        assert!((r.state.vm_demand[0] - 100.0).abs() < 1e-9);
        for &q in &r.state.vm_supply {
            assert!((q - 100.0 / 3.0).abs() < 1e-5, "{q}");
        }
        assert!((r.state.rho[0] - 80.0).abs() < 1e-5);

        let cold = tatonnement(&s, &opts).unwrap();
        assert!(cold.converged());
        assert!((cold.state.rho[0] - 168.0).abs() < 1e-5);
        assert!(cold.state.vm_supply.iter().all(|&q| q == 0.0));
    }

    #[test]
    fn interior_point_fixed_point() {
        let s = s1();
        let eq = solve_kkt_closed_form(&s).unwrap().state;
        let r = interior_point_from(&s, &eq, &SolverOptions::default()).unwrap();
        assert_eq!(r.iterations, 0);
        assert_eq!(r.state, eq);
    }

    #[test]
    fn interior_point_s1_single_converges() {
        let s = s1_single();
        let r = interior_point_iterate(&s, &SolverOptions::default()).unwrap();
        assert!(r.converged(), "{r:?}");
        let cf = solve_kkt_closed_form(&s).unwrap();
        assert!(r.state.max_abs_diff(&cf.state) < 1e-3);
        let t = tatonnement(&s, &SolverOptions::default()).unwrap();
        assert!(t.converged());
        assert!(r.state.max_abs_diff(&t.state) < 1e-5);
    }

    #[test]
    fn options_are_checked() {
        let opts = SolverOptions { step_scale: 0.0, ..Default::default() };
        assert!(matches!(tatonnement(&s1(), &opts), Err(EquilibriumError::InvalidOptions(_))));
        let opts = SolverOptions { tolerance: -1.0, ..Default::default() };
        assert!(interior_point_iterate(&s1(), &opts).is_err());
    }

    #[test]
    fn per_type_split_equalizes_marginals() {
        let mut c = s1().customers[0].clone();
        assert!(job_type_split(&c, 70.5).is_none());
        c.job_types = Some(crate::model::JobTypeCoefficients {
            elastic: QuadraticCoefficients::new(150.0, -1.0),
            curtailable: QuadraticCoefficients::new(120.0, -0.5),
            shiftable: QuadraticCoefficients::new(100.0, -0.25),
        });
        let split = job_type_split(&c, 70.5).unwrap();
        let jt = c.job_types.unwrap();
        for (q, k) in split.iter().zip([jt.elastic, jt.curtailable, jt.shiftable]) {
            assert!((k.marginal(*q) - 70.5).abs() < 1e-12);
        }
    }
}
