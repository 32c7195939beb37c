//! Regulator allocations under utilitarian, egalitarian and Rawlsian
//! objectives.
//!
//! The regulator picks quantities directly, subject to per-SC supply/demand
//! balance `sum_x vm_x = sum_j f_j vm_ag_j` and box bounds. Costs are concave,
//! so social welfare is not concave and a local method can stall on a saddle.
//! All three programs are therefore solved exactly per SC:
//!
//! - utilitarian: enumeration of the faces of the box (each face is a
//!   one-multiplier linear system), keeping the best stationary point;
//! - Rawlsian: bisection on the guaranteed payoff level, with an exact
//!   feasibility test (minimizing a concave cost over a box slice only needs
//!   its vertices);
//! - egalitarian: bisection on the customer utility window, then the SC cost
//!   window over the exact cost image of the remaining feasible set.
//!
//! Payoffs are gross customer utility `U_j` and SC payoff `-cost_i`.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::model::{
    customer_utilities, sc_costs, social_welfare, validate_scenario, MarketScenario, MarketState, ModelError,
    QuadraticCoefficients, StateLayout, Violation,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WelfareError {
    #[error("invalid scenario: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    InvalidScenario(Vec<Violation>),
    #[error("SC `{0}` has no allocation meeting both balance and bounds")]
    Infeasible(String),
    #[error("SC `{sc}` has {variables} decision variables, more than the exact solver limit {limit}")]
    TooLarge { sc: String, variables: usize, limit: usize },
    #[error("allocation ratios need a positive maximum entry")]
    NoPositiveMaximum,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum WelfareType {
    Utilitarian,
    Egalitarian,
    Rawlsian,
}

impl WelfareType {
    pub const ALL: [WelfareType; 3] = [WelfareType::Utilitarian, WelfareType::Egalitarian, WelfareType::Rawlsian];

    pub fn as_str(self) -> &'static str {
        match self {
            WelfareType::Utilitarian => "utilitarian",
            WelfareType::Egalitarian => "egalitarian",
            WelfareType::Rawlsian => "rawlsian",
        }
    }
}

impl fmt::Display for WelfareType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WelfareOptions {
    /// Starting points for the lower edge of the customer utility window.
    pub window_grid_points: usize,
    pub bisection_iterations: usize,
    /// Face enumeration costs `3^n` per SC; larger SCs are rejected.
    pub max_face_variables: usize,
    /// Recorded for reproducibility; the solvers are deterministic.
    pub seed: u64,
}

impl Default for WelfareOptions {
    fn default() -> Self {
        Self { window_grid_points: 129, bisection_iterations: 100, max_face_variables: 12, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WelfareReport {
    pub allocations: BTreeMap<WelfareType, MarketState>,
    pub utilitarian_sw: BTreeMap<WelfareType, f64>,
    /// Welfare relative to the utilitarian optimum; NaN when that optimum is
    /// not positive and differs from the allocation's welfare.
    pub sw_ratio: BTreeMap<WelfareType, f64>,
    pub sc_cost_ratios: BTreeMap<WelfareType, Vec<f64>>,
    pub customer_utility_ratios: BTreeMap<WelfareType, Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Interval {
    lo: f64,
    hi: f64,
}

impl Interval {
    fn new(lo: f64, hi: f64) -> Option<Self> {
        (lo <= hi).then_some(Self { lo, hi })
    }

    fn intersect(self, other: Interval) -> Option<Interval> {
        Interval::new(self.lo.max(other.lo), self.hi.min(other.hi))
    }

    fn lerp(self, t: f64) -> f64 {
        self.lo + t * (self.hi - self.lo)
    }
}

#[derive(Debug, Clone, Copy)]
struct Var {
    coeffs: QuadraticCoefficients,
    bounds: Interval,
}

/// One SC's decision variables.
struct ScProblem {
    supply: Vec<Var>,
    demand: Vec<Var>,
    factors: Vec<f64>,
}

impl ScProblem {
    fn supply_range(&self) -> Interval {
        Interval {
            lo: self.supply.iter().map(|v| v.bounds.lo).sum(),
            hi: self.supply.iter().map(|v| v.bounds.hi).sum(),
        }
    }

    fn cost(&self, s: &[f64]) -> f64 {
        self.supply.iter().zip(s).map(|(v, &q)| v.coeffs.value(q)).sum()
    }
}

fn problems(scenario: &MarketScenario) -> Result<(StateLayout, Vec<ScProblem>), WelfareError> {
    let violations = validate_scenario(scenario);
    if !violations.is_empty() {
        return Err(WelfareError::InvalidScenario(violations));
    }
    let layout = scenario.layout()?;
    let out = (0..layout.n_scs())
        .map(|i| {
            let supply = layout.sc_supply[i]
                .iter()
                .map(|&s| {
                    let ch = scenario.channel(layout.supply[s]);
                    Var { coeffs: ch.coeffs, bounds: Interval { lo: ch.vm_min, hi: ch.vm_max } }
                })
                .collect();
            let customers = &layout.sc_customers[i];
            let demand = customers
                .iter()
                .map(|&j| {
                    let c = &scenario.customers[j];
                    Var { coeffs: c.coeffs_ag, bounds: Interval { lo: c.vm_min, hi: c.vm_max } }
                })
                .collect();
            let factors = customers.iter().map(|&j| scenario.customers[j].demand_factor()).collect();
            ScProblem { supply, demand, factors }
        })
        .collect();
    Ok((layout, out))
}

struct ScAllocation {
    supply: Vec<f64>,
    demand: Vec<f64>,
    rho: f64,
}

fn assemble(layout: &StateLayout, parts: Vec<ScAllocation>) -> MarketState {
    let mut state = MarketState::zeros(layout);
    for (i, part) in parts.into_iter().enumerate() {
        for (k, &s) in layout.sc_supply[i].iter().enumerate() {
            state.vm_supply[s] = part.supply[k];
        }
        for (k, &j) in layout.sc_customers[i].iter().enumerate() {
            state.vm_demand[j] = part.demand[k];
        }
        state.rho[i] = part.rho;
    }
    state
}

fn check_feasible(scenario: &MarketScenario, i: usize, p: &ScProblem) -> Result<(), WelfareError> {
    let demand = Interval {
        lo: p.demand.iter().zip(&p.factors).map(|(v, f)| f * v.bounds.lo).sum(),
        hi: p.demand.iter().zip(&p.factors).map(|(v, f)| f * v.bounds.hi).sum(),
    };
    let supply = p.supply_range();
    let slack = 1e-12 * (1.0 + supply.hi.abs().max(demand.hi.abs()));
    if demand.lo > supply.hi + slack || supply.lo > demand.hi + slack {
        return Err(WelfareError::Infeasible(scenario.scs[i].id.clone()));
    }
    Ok(())
}

// ---------------------------------------------------------------- utilitarian

/// Global maximizer of `sum U_j - sum c_x` over one SC's box slice. Each
/// variable is at its lower bound, its upper bound, or free; free variables
/// satisfy `a + b v = lambda g` for the balance weights `g`.
fn utilitarian_sc(p: &ScProblem, sc: &str, limit: usize) -> Result<ScAllocation, WelfareError> {
    // objective a v + b/2 v^2 per variable, balance weight g
    let vars: Vec<(f64, f64, f64, Interval)> = p
        .supply
        .iter()
        .map(|v| (-v.coeffs.alpha, -v.coeffs.beta, 1.0, v.bounds))
        .chain(p.demand.iter().zip(&p.factors).map(|(v, &f)| (v.coeffs.alpha, v.coeffs.beta, -f, v.bounds)))
        .collect();
    let n = vars.len();
    if n > limit {
        return Err(WelfareError::TooLarge { sc: sc.to_string(), variables: n, limit });
    }
    let scale = 1.0 + vars.iter().map(|v| v.3.hi.abs()).fold(0.0, f64::max);
    let bal_tol = 1e-9 * scale * n as f64;
    let mut best: Option<(f64, Vec<f64>, f64)> = None;
    let mut v = vec![0.0; n];
    let faces = 3usize.pow(n as u32);
    'face: for code in 0..faces {
        let mut c = code;
        let (mut r, mut num, mut den, mut den_scale) = (0.0, 0.0, 0.0, 0.0);
        let mut free = Vec::new();
        for (k, &(a, b, g, bounds)) in vars.iter().enumerate() {
            match c % 3 {
                0 => v[k] = bounds.lo,
                1 if bounds.hi == bounds.lo => continue 'face,
                1 => v[k] = bounds.hi,
                _ => {
                    free.push(k);
                    num += g * a / b;
                    den += g * g / b;
                    den_scale += (g * g / b).abs();
                }
            }
            if c % 3 != 2 {
                r -= g * v[k];
            }
            c /= 3;
        }
        let mut lambda = f64::NAN;
        if free.is_empty() {
            if r.abs() > bal_tol {
                continue;
            }
        } else {
            if den.abs() <= 1e-12 * den_scale {
                continue;
            }
            lambda = (r + num) / den;
            for &k in &free {
                let (a, b, g, bounds) = vars[k];
                let x = (lambda * g - a) / b;
                let tol = 1e-9 * (1.0 + bounds.hi.abs());
                if x < bounds.lo - tol || x > bounds.hi + tol {
                    continue 'face;
                }
                v[k] = x.clamp(bounds.lo, bounds.hi);
            }
        }
        let obj: f64 = vars.iter().zip(&v).map(|(&(a, b, _, _), &x)| a * x + 0.5 * b * x * x).sum();
        if best.as_ref().is_none_or(|(o, _, _)| obj > *o) {
            best = Some((obj, v.clone(), lambda));
        }
    }
    let (_, v, lambda) = best.ok_or_else(|| WelfareError::Infeasible(sc.to_string()))?;
    let k = p.supply.len();
    Ok(ScAllocation {
        supply: v[..k].to_vec(),
        demand: v[k..].to_vec(),
        // the balance multiplier is minus the shadow price; undefined at vertices
        rho: if lambda.is_nan() { 0.0 } else { -lambda },
    })
}

/// Maximizes social welfare subject to per-SC balance and box bounds. Prices
/// hold the balance shadow price (zero when every quantity sits on a bound).
pub fn bounded_utilitarian(scenario: &MarketScenario, options: &WelfareOptions) -> Result<MarketState, WelfareError> {
    let (layout, probs) = problems(scenario)?;
    let parts = probs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            check_feasible(scenario, i, p)?;
            utilitarian_sc(p, &scenario.scs[i].id, options.max_face_variables)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(assemble(&layout, parts))
}

// ------------------------------------------------------------ level-set tools

/// `{q in bounds : U(q) >= t}` for a concave quadratic `U`.
fn superlevel(c: &QuadraticCoefficients, t: f64, bounds: Interval) -> Option<Interval> {
    let disc = c.alpha * c.alpha + 2.0 * c.beta * t;
    if disc < 0.0 {
        return None;
    }
    let sq = disc.sqrt();
    let roots = Interval { lo: (-c.alpha + sq) / c.beta, hi: (-c.alpha - sq) / c.beta };
    roots.intersect(bounds)
}

/// `{q in bounds : lo <= U(q) <= lo + w}`, at most two intervals.
fn window(c: &QuadraticCoefficients, lo: f64, w: f64, bounds: Interval) -> Vec<Interval> {
    let Some(outer) = superlevel(c, lo, bounds) else { return Vec::new() };
    let disc = c.alpha * c.alpha + 2.0 * c.beta * (lo + w);
    if disc <= 0.0 {
        return vec![outer];
    }
    let sq = disc.sqrt();
    let (r1, r2) = ((-c.alpha + sq) / c.beta, (-c.alpha - sq) / c.beta);
    let mut out = Vec::new();
    if let Some(left) = Interval::new(outer.lo, r1.min(outer.hi)) {
        out.push(left);
    }
    if let Some(right) = Interval::new(r2.max(outer.lo), outer.hi) {
        if out.last().is_none_or(|l| right.lo > l.hi) {
            out.push(right);
        } else if let Some(l) = out.last_mut() {
            l.hi = l.hi.max(right.hi);
        }
    }
    out
}

fn peak_utility(c: &QuadraticCoefficients, bounds: Interval) -> f64 {
    let q = (-c.alpha / c.beta).clamp(bounds.lo, bounds.hi);
    c.value(q)
}

fn trough_utility(c: &QuadraticCoefficients, bounds: Interval) -> f64 {
    c.value(bounds.lo).min(c.value(bounds.hi))
}

/// Minimum cost over `{s in box : sum s in slab}`. Minimizing a concave
/// function over a polytope only needs its vertices, which have at most one
/// coordinate off its bounds.
fn cost_min(p: &ScProblem, slab: Interval) -> Option<(f64, Vec<f64>)> {
    let k = p.supply.len();
    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut consider = |s: Vec<f64>| {
        let c = p.cost(&s);
        if best.as_ref().is_none_or(|(b, _)| c < *b) {
            best = Some((c, s));
        }
    };
    let tol = 1e-12 * (1.0 + slab.hi.abs());
    for mask in 0..(1usize << k) {
        let s: Vec<f64> = p
            .supply
            .iter()
            .enumerate()
            .map(|(x, v)| if mask >> x & 1 == 1 { v.bounds.hi } else { v.bounds.lo })
            .collect();
        let total: f64 = s.iter().sum();
        if total >= slab.lo - tol && total <= slab.hi + tol {
            consider(s.clone());
        }
        for free in 0..k {
            if mask >> free & 1 == 1 {
                continue;
            }
            let rest = total - s[free];
            for target in [slab.lo, slab.hi] {
                let q = target - rest;
                let b = p.supply[free].bounds;
                if q > b.lo && q < b.hi {
                    let mut s2 = s.clone();
                    s2[free] = q;
                    consider(s2);
                }
            }
        }
    }
    best
}

/// Supply split maximizing cost for a fixed total (a concave program):
/// equal marginal cost `mu` across unclamped channels.
fn water_fill(p: &ScProblem, total: f64) -> Vec<f64> {
    let at = |mu: f64| -> Vec<f64> {
        p.supply.iter().map(|v| ((mu - v.coeffs.alpha) / v.coeffs.beta).clamp(v.bounds.lo, v.bounds.hi)).collect()
    };
    let mut lo = p.supply.iter().map(|v| v.coeffs.marginal(v.bounds.hi)).fold(f64::INFINITY, f64::min) - 1.0;
    let mut hi = p.supply.iter().map(|v| v.coeffs.marginal(v.bounds.lo)).fold(f64::NEG_INFINITY, f64::max) + 1.0;
    // sum of at(mu) is nonincreasing in mu
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if at(mid).iter().sum::<f64>() > total {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let mut s = at(0.5 * (lo + hi));
    let mut diff = total - s.iter().sum::<f64>();
    for (x, v) in s.iter_mut().zip(&p.supply) {
        let moved = (*x + diff).clamp(v.bounds.lo, v.bounds.hi);
        diff -= moved - *x;
        *x = moved;
    }
    s
}

/// Maximum cost over `{s in box : sum s in slab}`.
fn cost_max(p: &ScProblem, slab: Interval) -> Option<(f64, Vec<f64>)> {
    let range = p.supply_range().intersect(slab)?;
    let unconstrained: f64 =
        p.supply.iter().map(|v| (-v.coeffs.alpha / v.coeffs.beta).clamp(v.bounds.lo, v.bounds.hi)).sum::<f64>();
    let s = water_fill(p, unconstrained.clamp(range.lo, range.hi));
    Some((p.cost(&s), s))
}

/// Points of a one-interval-per-customer choice and its weighted sum.
#[derive(Debug, Clone)]
struct Combo {
    sum: Interval,
    parts: Vec<Interval>,
}

fn minkowski(sets: &[Vec<Interval>], factors: &[f64]) -> Vec<Combo> {
    let mut out = vec![Combo { sum: Interval { lo: 0.0, hi: 0.0 }, parts: Vec::new() }];
    for (set, &f) in sets.iter().zip(factors) {
        out = out
            .iter()
            .flat_map(|c| {
                set.iter().map(move |iv| {
                    let mut parts = c.parts.clone();
                    parts.push(*iv);
                    Combo { sum: Interval { lo: c.sum.lo + f * iv.lo, hi: c.sum.hi + f * iv.hi }, parts }
                })
            })
            .collect();
    }
    out
}

/// Demand quantities within `parts` whose weighted sum is `total`.
fn spread_demand(parts: &[Interval], factors: &[f64], total: f64) -> Vec<f64> {
    let lo: f64 = parts.iter().zip(factors).map(|(iv, f)| f * iv.lo).sum();
    let hi: f64 = parts.iter().zip(factors).map(|(iv, f)| f * iv.hi).sum();
    let t = if hi > lo { ((total - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.0 };
    parts.iter().map(|iv| iv.lerp(t).clamp(iv.lo, iv.hi)).collect()
}

fn bisect_max(mut lo: f64, mut hi: f64, iterations: usize, feasible: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

fn bisect_min(mut lo: f64, mut hi: f64, iterations: usize, feasible: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..iterations {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

// ------------------------------------------------------------------- Rawlsian

/// Allocation guaranteeing every stakeholder of the SC a payoff of at least `t`.
fn rawlsian_witness(p: &ScProblem, t: f64) -> Option<ScAllocation> {
    let parts: Vec<Interval> = p.demand.iter().map(|v| superlevel(&v.coeffs, t, v.bounds)).collect::<Option<_>>()?;
    let demand = Interval {
        lo: parts.iter().zip(&p.factors).map(|(iv, f)| f * iv.lo).sum(),
        hi: parts.iter().zip(&p.factors).map(|(iv, f)| f * iv.hi).sum(),
    };
    let (c, s) = cost_min(p, demand)?;
    if -c < t {
        return None;
    }
    let total: f64 = s.iter().sum();
    Some(ScAllocation { demand: spread_demand(&parts, &p.factors, total), supply: s, rho: 0.0 })
}

fn min_payoff_sc(p: &ScProblem, a: &ScAllocation) -> f64 {
    let u = p.demand.iter().zip(&a.demand).map(|(v, &d)| v.coeffs.value(d)).fold(f64::INFINITY, f64::min);
    u.min(-p.cost(&a.supply))
}

/// Maximizes the smallest stakeholder payoff (customer utility or negated
/// SC cost) subject to balance and bounds. Every SC is pushed to its own
/// best guaranteed level, so the global minimum is the best achievable.
pub fn rawlsian_allocation(scenario: &MarketScenario, options: &WelfareOptions) -> Result<MarketState, WelfareError> {
    let (layout, probs) = problems(scenario)?;
    let mut parts = Vec::with_capacity(probs.len());
    for (i, p) in probs.iter().enumerate() {
        check_feasible(scenario, i, p)?;
        let seed = utilitarian_sc(p, &scenario.scs[i].id, options.max_face_variables)?;
        let t_lo = min_payoff_sc(p, &seed);
        let mut step = 1.0 + t_lo.abs();
        let mut t_hi = t_lo + step;
        let mut guard = 0;
        while rawlsian_witness(p, t_hi).is_some() && guard < 200 {
            step *= 2.0;
            t_hi = t_lo + step;
            guard += 1;
        }
        let t = bisect_max(t_lo, t_hi, options.bisection_iterations, |t| rawlsian_witness(p, t).is_some());
        let alloc = rawlsian_witness(p, t).filter(|a| min_payoff_sc(p, a) >= t_lo).unwrap_or(seed);
        parts.push(alloc);
    }
    Ok(assemble(&layout, parts))
}

// ---------------------------------------------------------------- egalitarian

fn customer_windows(p: &ScProblem, lo: f64, w: f64) -> Option<Vec<Vec<Interval>>> {
    p.demand
        .iter()
        .map(|v| {
            let win = window(&v.coeffs, lo, w, v.bounds);
            (!win.is_empty()).then_some(win)
        })
        .collect()
}

/// Feasible supply totals of each combination of customer windows.
fn feasible_pieces(p: &ScProblem, lo: f64, w: f64) -> Option<Vec<Combo>> {
    let windows = customer_windows(p, lo, w)?;
    let supply = p.supply_range();
    let pieces: Vec<Combo> = minkowski(&windows, &p.factors)
        .into_iter()
        .filter_map(|c| c.sum.intersect(supply).map(|sum| Combo { sum, parts: c.parts }))
        .collect();
    (!pieces.is_empty()).then_some(pieces)
}

fn window_feasible(probs: &[ScProblem], lo: f64, w: f64) -> bool {
    probs.iter().all(|p| feasible_pieces(p, lo, w).is_some())
}

/// Smallest customer window width starting at `lo`, if any.
fn min_width(probs: &[ScProblem], lo: f64, w_max: f64, iterations: usize) -> Option<f64> {
    if !window_feasible(probs, lo, w_max) {
        return None;
    }
    if window_feasible(probs, lo, 0.0) {
        return Some(0.0);
    }
    Some(bisect_min(0.0, w_max, iterations, |w| window_feasible(probs, lo, w)))
}

struct CostPiece {
    min: (f64, Vec<f64>),
    max: (f64, Vec<f64>),
    combo: Combo,
}

fn cost_pieces(p: &ScProblem, lo: f64, w: f64) -> Vec<CostPiece> {
    feasible_pieces(p, lo, w)
        .unwrap_or_default()
        .into_iter()
        .filter_map(|combo| {
            let min = cost_min(p, combo.sum)?;
            let max = cost_max(p, combo.sum)?;
            Some(CostPiece { min, max, combo })
        })
        .collect()
}

/// Smallest SC cost at least `v` reachable in `pieces`, with its piece.
fn cost_at_or_above(pieces: &[CostPiece], v: f64) -> Option<(f64, usize)> {
    pieces
        .iter()
        .enumerate()
        .filter(|(_, pc)| pc.max.0 >= v)
        .map(|(k, pc)| (v.max(pc.min.0), k))
        .min_by(|a, b| a.0.total_cmp(&b.0))
}

/// A point of `piece` with SC cost `target`, found along the segment from
/// the cost minimizer to the cost maximizer.
fn realize_cost(p: &ScProblem, piece: &CostPiece, target: f64, iterations: usize) -> ScAllocation {
    let (a, b) = (&piece.min.1, &piece.max.1);
    let at = |t: f64| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect() };
    let (mut lo, mut hi) = (0.0, 1.0);
    if target > piece.min.0 {
        for _ in 0..iterations {
            let mid = 0.5 * (lo + hi);
            if p.cost(&at(mid)) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
    } else {
        hi = 0.0;
    }
    let s: Vec<f64> = at(hi).iter().zip(&p.supply).map(|(x, v)| x.clamp(v.bounds.lo, v.bounds.hi)).collect();
    let total = s.iter().sum::<f64>().clamp(piece.combo.sum.lo, piece.combo.sum.hi);
    ScAllocation { demand: spread_demand(&piece.combo.parts, &p.factors, total), supply: s, rho: 0.0 }
}

/// Lexicographically minimizes the spread of customer utilities, then the
/// spread of SC costs. Among equally narrow customer windows the highest
/// one is kept, and among SC cost windows the cheapest.
pub fn egalitarian_allocation(
    scenario: &MarketScenario,
    options: &WelfareOptions,
) -> Result<MarketState, WelfareError> {
    let (layout, probs) = problems(scenario)?;
    for (i, p) in probs.iter().enumerate() {
        check_feasible(scenario, i, p)?;
    }
    let utilitarian = probs
        .iter()
        .enumerate()
        .map(|(i, p)| utilitarian_sc(p, &scenario.scs[i].id, options.max_face_variables))
        .collect::<Result<Vec<_>, _>>()?;
    let iters = options.bisection_iterations;

    let all_demand = || probs.iter().flat_map(|p| p.demand.iter());
    let (lo_min, lo_max, w_max) = if all_demand().next().is_none() {
        (0.0, 0.0, 0.0)
    } else {
        let lo_min = all_demand().map(|v| trough_utility(&v.coeffs, v.bounds)).fold(f64::INFINITY, f64::min);
        let lo_max = all_demand().map(|v| peak_utility(&v.coeffs, v.bounds)).fold(f64::NEG_INFINITY, f64::max);
        (lo_min, lo_max, lo_max - lo_min)
    };

    // stage 1: customer utility window
    let util_lo = probs
        .iter()
        .zip(&utilitarian)
        .flat_map(|(p, a)| p.demand.iter().zip(&a.demand).map(|(v, &d)| v.coeffs.value(d)))
        .fold(f64::INFINITY, f64::min);
    let n = options.window_grid_points.max(2);
    let mut starts: Vec<f64> = (0..n).map(|k| lo_min + (lo_max - lo_min) * k as f64 / (n - 1) as f64).collect();
    if util_lo.is_finite() {
        starts.push(util_lo);
    }
    let evaluate = |lo: f64| min_width(&probs, lo, w_max.max(lo_max - lo), iters);
    let better = |cand: (f64, f64), best: Option<(f64, f64)>| match best {
        None => true,
        Some((blo, bw)) => {
            let tie = 1e-12 * (1.0 + bw.abs());
            cand.1 < bw - tie || (cand.1 <= bw + tie && cand.0 > blo)
        }
    };
    let mut best: Option<(f64, f64)> = None;
    let mut best_k = None;
    for (k, &lo) in starts.iter().enumerate() {
        if let Some(w) = evaluate(lo) {
            if better((lo, w), best) {
                best = Some((lo, w));
                best_k = Some(k);
            }
        }
    }
    // local refinement between the neighbours of the best grid start
    if let Some(k) = best_k.filter(|&k| k < n && n > 2) {
        let (mut a, mut b) = (starts[k.saturating_sub(1)], starts[(k + 1).min(n - 1)]);
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let width = |lo: f64| evaluate(lo).unwrap_or(f64::INFINITY);
        for _ in 0..60 {
            let (c, d) = (b - g * (b - a), a + g * (b - a));
            if width(c) <= width(d) {
                b = d;
            } else {
                a = c;
            }
        }
        for lo in [a, b] {
            if let Some(w) = evaluate(lo) {
                if better((lo, w), best) {
                    best = Some((lo, w));
                }
            }
        }
    }
    let (lo, w) = best.ok_or_else(|| WelfareError::Infeasible(scenario.scs[0].id.clone()))?;

    // stage 2: SC cost window over the exact cost images
    let pieces: Vec<Vec<CostPiece>> = probs.iter().map(|p| cost_pieces(p, lo, w)).collect();
    let mut ends: Vec<f64> = pieces.iter().flatten().flat_map(|pc| [pc.min.0, pc.max.0]).collect();
    ends.sort_by(f64::total_cmp);
    ends.dedup();
    let mut chosen: Option<(f64, f64)> = None;
    for &v in &ends {
        let reach: Option<Vec<(f64, usize)>> = pieces.iter().map(|pcs| cost_at_or_above(pcs, v)).collect();
        let Some(reach) = reach else { continue };
        let spread = reach.iter().map(|r| r.0).fold(v, f64::max) - v;
        if chosen.is_none_or(|(_, s)| spread < s) {
            chosen = Some((v, spread));
        }
    }
    let (v, _) = chosen.ok_or_else(|| WelfareError::Infeasible(scenario.scs[0].id.clone()))?;
    let parts = probs
        .iter()
        .zip(&pieces)
        .map(|(p, pcs)| {
            let (target, k) = cost_at_or_above(pcs, v).expect("every SC reaches the chosen window");
            realize_cost(p, &pcs[k], target, iters)
        })
        .collect();
    Ok(assemble(&layout, parts))
}

// -------------------------------------------------------------------- reports

/// Each entry divided by the largest entry.
pub fn allocation_ratios(values: &[f64]) -> Result<Vec<f64>, WelfareError> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > 0.0 && max.is_finite()) {
        return Err(WelfareError::NoPositiveMaximum);
    }
    Ok(values.iter().map(|v| v / max).collect())
}

/// Largest minus smallest customer utility.
pub fn customer_spread(state: &MarketState, scenario: &MarketScenario) -> Result<f64, WelfareError> {
    let u = customer_utilities(state, scenario)?;
    Ok(spread(&u))
}

/// Largest minus smallest SC cost.
pub fn sc_cost_spread(state: &MarketState, scenario: &MarketScenario) -> Result<f64, WelfareError> {
    Ok(spread(&sc_costs(state, scenario)?))
}

fn spread(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().copied().fold(f64::NEG_INFINITY, f64::max) - v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Smallest payoff over customers (utility) and SCs (negated cost).
pub fn min_stakeholder_payoff(state: &MarketState, scenario: &MarketScenario) -> Result<f64, WelfareError> {
    let u = customer_utilities(state, scenario)?;
    let c = sc_costs(state, scenario)?;
    Ok(u.into_iter().chain(c.into_iter().map(|c| -c)).fold(f64::INFINITY, f64::min))
}

/// Largest per-SC `|sum supply - sum effective demand|`.
pub fn balance_residual(state: &MarketState, scenario: &MarketScenario) -> Result<f64, WelfareError> {
    let layout = scenario.layout()?;
    state.check_layout(&layout)?;
    Ok((0..layout.n_scs())
        .map(|i| {
            let s: f64 = layout.sc_supply[i].iter().map(|&k| state.vm_supply[k]).sum();
            let d: f64 = layout.sc_customers[i]
                .iter()
                .map(|&j| scenario.customers[j].effective_demand(state.vm_demand[j]))
                .sum();
            (s - d).abs()
        })
        .fold(0.0, f64::max))
}

fn ratios_or_zero(values: &[f64]) -> Vec<f64> {
    allocation_ratios(values).unwrap_or_else(|_| vec![0.0; values.len()])
}

/// Solves the three programs concurrently and compares them on social
/// welfare and per-stakeholder ratios. Ratio vectors are all zero when no
/// entry is positive.
pub fn compare(scenario: &MarketScenario, options: &WelfareOptions) -> Result<WelfareReport, WelfareError> {
    let (u, (e, r)) = rayon::join(
        || bounded_utilitarian(scenario, options),
        || rayon::join(|| egalitarian_allocation(scenario, options), || rawlsian_allocation(scenario, options)),
    );
    let allocations: BTreeMap<WelfareType, MarketState> =
        [(WelfareType::Utilitarian, u?), (WelfareType::Egalitarian, e?), (WelfareType::Rawlsian, r?)].into();
    let mut report = WelfareReport {
        allocations: BTreeMap::new(),
        utilitarian_sw: BTreeMap::new(),
        sw_ratio: BTreeMap::new(),
        sc_cost_ratios: BTreeMap::new(),
        customer_utility_ratios: BTreeMap::new(),
    };
    let sw_u = social_welfare(&allocations[&WelfareType::Utilitarian], scenario)?;
    for (t, state) in &allocations {
        let sw = social_welfare(state, scenario)?;
        let ratio = if *t == WelfareType::Utilitarian || sw == sw_u {
            1.0
        } else if sw_u > 0.0 {
            sw / sw_u
        } else {
            f64::NAN
        };
        report.utilitarian_sw.insert(*t, sw);
        report.sw_ratio.insert(*t, ratio);
        report.sc_cost_ratios.insert(*t, ratios_or_zero(&sc_costs(state, scenario)?));
        report.customer_utility_ratios.insert(*t, ratios_or_zero(&customer_utilities(state, scenario)?));
    }
    report.allocations = allocations;
    Ok(report)
}
