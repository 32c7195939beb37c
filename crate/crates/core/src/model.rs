//! Scenario data types and the cost, utility and welfare functions of the
//! small-cloud market.
//!
//! Every cost and utility curve is a quadratic `alpha * q + (beta / 2) * q^2`
//! with `alpha > 0` and `beta < 0`, so marginals are decreasing linear
//! functions. VM quantities are real-valued throughout.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("non-finite quantity {0}")]
    NonFinite(f64),
    #[error("curtailment fractions must satisfy 0 <= kappa1, kappa2 and kappa1 + kappa2 < 1 (got {kappa1}, {kappa2})")]
    Curtailment { kappa1: f64, kappa2: f64 },
    #[error("state does not match scenario: {0}")]
    StateMismatch(String),
    #[error("unknown identifier `{0}`")]
    UnknownId(String),
    #[error("unknown supply channel `{0}`")]
    UnknownChannel(String),
}

fn finite(q: f64) -> Result<f64, ModelError> {
    if q.is_finite() {
        Ok(q)
    } else {
        Err(ModelError::NonFinite(q))
    }
}

/// `(alpha, beta)` of a quadratic cost or utility curve.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticCoefficients {
    pub alpha: f64,
    pub beta: f64,
}

impl QuadraticCoefficients {
    pub const fn new(alpha: f64, beta: f64) -> Self {
        Self { alpha, beta }
    }

    /// `alpha * q + (beta / 2) * q^2`, without input checks.
    #[inline]
    pub fn value(&self, q: f64) -> f64 {
        self.alpha * q + 0.5 * self.beta * q * q
    }

    /// `alpha + beta * q`, without input checks.
    #[inline]
    pub fn marginal(&self, q: f64) -> f64 {
        self.alpha + self.beta * q
    }

    /// Quantity at which the marginal equals `price`.
    #[inline]
    pub fn quantity_at_marginal(&self, price: f64) -> f64 {
        (price - self.alpha) / self.beta
    }

    pub fn is_valid(&self) -> bool {
        self.alpha.is_finite() && self.beta.is_finite() && self.alpha > 0.0 && self.beta < 0.0
    }
}

/// Where an SC sources VM capacity from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    Reserved,
    Borrowed,
    PublicCloud,
}

impl Channel {
    pub const ALL: [Channel; 3] = [Channel::Reserved, Channel::Borrowed, Channel::PublicCloud];

    pub fn short_name(self) -> &'static str {
        match self {
            Channel::Reserved => "r",
            Channel::Borrowed => "b",
            Channel::PublicCloud => "pc",
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for Channel {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "r" | "reserved" => Ok(Channel::Reserved),
            "b" | "borrowed" => Ok(Channel::Borrowed),
            "pc" | "public_cloud" => Ok(Channel::PublicCloud),
            other => Err(ModelError::UnknownChannel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupplyChannelParams {
    pub channel: Channel,
    pub coeffs: QuadraticCoefficients,
    pub vm_min: f64,
    pub vm_max: f64,
    pub tau: f64,
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmallCloudParams {
    pub id: String,
    pub channels: Vec<SupplyChannelParams>,
    pub tau_rho: f64,
}

impl SmallCloudParams {
    /// One SC with the same coefficients, bounds and time constant on every
    /// listed channel.
    pub fn uniform(
        id: impl Into<String>,
        channels: &[Channel],
        coeffs: QuadraticCoefficients,
        vm_min: f64,
        vm_max: f64,
        tau: f64,
        tau_rho: f64,
    ) -> Self {
        Self {
            id: id.into(),
            channels: channels
                .iter()
                .map(|&channel| SupplyChannelParams { channel, coeffs, vm_min, vm_max, tau, enabled: vm_max > 0.0 })
                .collect(),
            tau_rho,
        }
    }

    pub fn enabled_channels(&self) -> impl Iterator<Item = &SupplyChannelParams> + '_ {
        self.channels.iter().filter(|c| c.enabled)
    }

    /// Sum of `vm_max` over enabled channels.
    pub fn capacity(&self) -> f64 {
        self.enabled_channels().map(|c| c.vm_max).sum()
    }
}

/// Per-job-type utility curves (elastic, curtailable, time-shiftable).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JobTypeCoefficients {
    pub elastic: QuadraticCoefficients,
    pub curtailable: QuadraticCoefficients,
    pub shiftable: QuadraticCoefficients,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CustomerParams {
    pub id: String,
    pub sc_id: String,
    pub coeffs_ag: QuadraticCoefficients,
    pub job_types: Option<JobTypeCoefficients>,
    pub kappa1: f64,
    pub kappa2: f64,
    pub tau_ag: f64,
    pub vm_min: f64,
    pub vm_max: f64,
}

impl CustomerParams {
    /// `1 - kappa1 - kappa2`.
    #[inline]
    pub fn demand_factor(&self) -> f64 {
        1.0 - self.kappa1 - self.kappa2
    }

    /// Demand counted against supply in the market-clearing balance.
    #[inline]
    pub fn effective_demand(&self, vm_ag: f64) -> f64 {
        vm_ag * self.demand_factor()
    }
}

/// SCs and the customers they serve. Customer-to-SC assignment is carried by
/// `CustomerParams::sc_id`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarketScenario {
    pub scs: Vec<SmallCloudParams>,
    pub customers: Vec<CustomerParams>,
}

/// Position of one enabled supply channel in the state vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupplySlot {
    pub sc: usize,
    pub channel: usize,
}

/// Index maps between the scenario and flat state vectors.
///
/// State ordering is: every enabled supply channel grouped by SC (in SC
/// order, then channel order), every customer demand, then one price per SC.
#[derive(Debug, Clone, PartialEq)]
pub struct StateLayout {
    pub supply: Vec<SupplySlot>,
    /// SC index of each customer.
    pub customer_sc: Vec<usize>,
    /// Supply slot indices belonging to each SC.
    pub sc_supply: Vec<Vec<usize>>,
    /// Customer indices belonging to each SC.
    pub sc_customers: Vec<Vec<usize>>,
}

impl StateLayout {
    pub fn n_supply(&self) -> usize {
        self.supply.len()
    }

    pub fn n_customers(&self) -> usize {
        self.customer_sc.len()
    }

    pub fn n_scs(&self) -> usize {
        self.sc_supply.len()
    }

    /// Length of the market part of the state (supplies, demands, prices).
    pub fn dim(&self) -> usize {
        self.n_supply() + self.n_customers() + self.n_scs()
    }

    pub fn demand_offset(&self) -> usize {
        self.n_supply()
    }

    pub fn price_offset(&self) -> usize {
        self.n_supply() + self.n_customers()
    }
}

impl MarketScenario {
    pub fn sc_index(&self, id: &str) -> Option<usize> {
        self.scs.iter().position(|s| s.id == id)
    }

    pub fn customer_index(&self, id: &str) -> Option<usize> {
        self.customers.iter().position(|c| c.id == id)
    }

    /// Customer id to SC id.
    pub fn assignment(&self) -> BTreeMap<String, String> {
        self.customers.iter().map(|c| (c.id.clone(), c.sc_id.clone())).collect()
    }

    /// Builds the state layout. Customers whose SC does not exist are
    /// reported as an error; run `validate_scenario` first for a full list.
    pub fn layout(&self) -> Result<StateLayout, ModelError> {
        let mut supply = Vec::new();
        let mut sc_supply = vec![Vec::new(); self.scs.len()];
        for (i, sc) in self.scs.iter().enumerate() {
            for (k, ch) in sc.channels.iter().enumerate() {
                if ch.enabled {
                    sc_supply[i].push(supply.len());
                    supply.push(SupplySlot { sc: i, channel: k });
                }
            }
        }
        let mut customer_sc = Vec::with_capacity(self.customers.len());
        let mut sc_customers = vec![Vec::new(); self.scs.len()];
        for (j, c) in self.customers.iter().enumerate() {
            let i = self.sc_index(&c.sc_id).ok_or_else(|| ModelError::UnknownId(c.sc_id.clone()))?;
            customer_sc.push(i);
            sc_customers[i].push(j);
        }
        Ok(StateLayout { supply, customer_sc, sc_supply, sc_customers })
    }

    pub fn channel(&self, slot: SupplySlot) -> &SupplyChannelParams {
        &self.scs[slot.sc].channels[slot.channel]
    }

    /// Component labels in state order, e.g. `vm_r:SC1`, `vm_ag:C1`, `rho:SC1`.
    pub fn state_labels(&self) -> Result<Vec<String>, ModelError> {
        let layout = self.layout()?;
        let mut labels = Vec::with_capacity(layout.dim());
        for slot in &layout.supply {
            let ch = self.channel(*slot);
            labels.push(format!("vm_{}:{}", ch.channel, self.scs[slot.sc].id));
        }
        for c in &self.customers {
            labels.push(format!("vm_ag:{}", c.id));
        }
        for sc in &self.scs {
            labels.push(format!("rho:{}", sc.id));
        }
        Ok(labels)
    }
}

/// All VM quantities and per-SC prices, aligned with a scenario's
/// [`StateLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct MarketState {
    pub vm_supply: Vec<f64>,
    pub vm_demand: Vec<f64>,
    pub rho: Vec<f64>,
}

impl MarketState {
    pub fn zeros(layout: &StateLayout) -> Self {
        Self {
            vm_supply: vec![0.0; layout.n_supply()],
            vm_demand: vec![0.0; layout.n_customers()],
            rho: vec![0.0; layout.n_scs()],
        }
    }

    pub fn from_vector(layout: &StateLayout, x: &[f64]) -> Result<Self, ModelError> {
        if x.len() != layout.dim() {
            return Err(ModelError::StateMismatch(format!(
                "vector of length {} for state of dimension {}",
                x.len(),
                layout.dim()
            )));
        }
        let (s, rest) = x.split_at(layout.n_supply());
        let (d, p) = rest.split_at(layout.n_customers());
        Ok(Self { vm_supply: s.to_vec(), vm_demand: d.to_vec(), rho: p.to_vec() })
    }

    pub fn to_vector(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(self.vm_supply.len() + self.vm_demand.len() + self.rho.len());
        x.extend_from_slice(&self.vm_supply);
        x.extend_from_slice(&self.vm_demand);
        x.extend_from_slice(&self.rho);
        x
    }

    pub fn check_layout(&self, layout: &StateLayout) -> Result<(), ModelError> {
        if self.vm_supply.len() != layout.n_supply()
            || self.vm_demand.len() != layout.n_customers()
            || self.rho.len() != layout.n_scs()
        {
            return Err(ModelError::StateMismatch(format!(
                "state has ({}, {}, {}) supply/demand/price entries, scenario expects ({}, {}, {})",
                self.vm_supply.len(),
                self.vm_demand.len(),
                self.rho.len(),
                layout.n_supply(),
                layout.n_customers(),
                layout.n_scs()
            )));
        }
        if let Some(v) = self.to_vector().into_iter().find(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite(v));
        }
        Ok(())
    }

    /// Supply committed by `sc_id` through `channel`.
    pub fn supply_of(&self, scenario: &MarketScenario, sc_id: &str, channel: Channel) -> Result<f64, ModelError> {
        let layout = scenario.layout()?;
        let i = scenario.sc_index(sc_id).ok_or_else(|| ModelError::UnknownId(sc_id.to_string()))?;
        layout.sc_supply[i]
            .iter()
            .find(|&&s| scenario.channel(layout.supply[s]).channel == channel)
            .map(|&s| self.vm_supply[s])
            .ok_or_else(|| ModelError::UnknownId(format!("{sc_id}/{channel}")))
    }

    pub fn demand_of(&self, scenario: &MarketScenario, customer_id: &str) -> Result<f64, ModelError> {
        scenario
            .customer_index(customer_id)
            .map(|j| self.vm_demand[j])
            .ok_or_else(|| ModelError::UnknownId(customer_id.to_string()))
    }

    pub fn price_of(&self, scenario: &MarketScenario, sc_id: &str) -> Result<f64, ModelError> {
        scenario.sc_index(sc_id).map(|i| self.rho[i]).ok_or_else(|| ModelError::UnknownId(sc_id.to_string()))
    }

    /// Max-norm distance to another state of the same layout.
    pub fn max_abs_diff(&self, other: &MarketState) -> f64 {
        self.to_vector().iter().zip(other.to_vector()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }
}

pub fn cost(q: f64, coeffs: &QuadraticCoefficients) -> Result<f64, ModelError> {
    Ok(coeffs.value(finite(q)?))
}

pub fn marginal_cost(q: f64, coeffs: &QuadraticCoefficients) -> Result<f64, ModelError> {
    Ok(coeffs.marginal(finite(q)?))
}

pub fn utility(q: f64, coeffs: &QuadraticCoefficients) -> Result<f64, ModelError> {
    Ok(coeffs.value(finite(q)?))
}

pub fn marginal_utility(q: f64, coeffs: &QuadraticCoefficients) -> Result<f64, ModelError> {
    Ok(coeffs.marginal(finite(q)?))
}

/// VMs held for a curtailed job: `(kappa1 + kappa2) * vm_e`.
pub fn curtailed_demand(vm_e: f64, kappa1: f64, kappa2: f64) -> Result<f64, ModelError> {
    if !(kappa1 >= 0.0 && kappa2 >= 0.0 && kappa1 + kappa2 < 1.0) {
        return Err(ModelError::Curtailment { kappa1, kappa2 });
    }
    Ok((kappa1 + kappa2) * finite(vm_e)?)
}

/// Revenue minus cost for one supply channel.
pub fn sc_profit(rho: f64, q: f64, coeffs: &QuadraticCoefficients) -> Result<f64, ModelError> {
    Ok(finite(rho)? * q - cost(q, coeffs)?)
}

pub fn customer_net_utility(rho: f64, q: f64, coeffs: &QuadraticCoefficients) -> Result<f64, ModelError> {
    Ok(utility(q, coeffs)? - finite(rho)? * q)
}

/// Total cost per SC, summed over its enabled channels.
pub fn sc_costs(state: &MarketState, scenario: &MarketScenario) -> Result<Vec<f64>, ModelError> {
    let layout = scenario.layout()?;
    state.check_layout(&layout)?;
    Ok(layout
        .sc_supply
        .iter()
        .map(|slots| slots.iter().map(|&s| scenario.channel(layout.supply[s]).coeffs.value(state.vm_supply[s])).sum())
        .collect())
}

/// Gross utility per customer.
pub fn customer_utilities(state: &MarketState, scenario: &MarketScenario) -> Result<Vec<f64>, ModelError> {
    let layout = scenario.layout()?;
    state.check_layout(&layout)?;
    Ok(scenario.customers.iter().zip(&state.vm_demand).map(|(c, &d)| c.coeffs_ag.value(d)).collect())
}

/// Utilitarian social welfare: total customer utility minus total SC cost.
pub fn social_welfare(state: &MarketState, scenario: &MarketScenario) -> Result<f64, ModelError> {
    let layout = scenario.layout()?;
    state.check_layout(&layout)?;
    let utility: f64 = scenario.customers.iter().zip(&state.vm_demand).map(|(c, &d)| c.coeffs_ag.value(d)).sum();
    let cost: f64 =
        layout.supply.iter().zip(&state.vm_supply).map(|(slot, &q)| scenario.channel(*slot).coeffs.value(q)).sum();
    Ok(utility - cost)
}

/// A broken scenario invariant: which field, and which rule it breaks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.rule)
    }
}

fn check_coeffs(out: &mut Vec<Violation>, field: String, c: &QuadraticCoefficients) {
    if !(c.alpha.is_finite() && c.alpha > 0.0) {
        out.push(Violation { field: format!("{field}.alpha"), rule: "alpha must be positive and finite".into() });
    }
    if !(c.beta.is_finite() && c.beta < 0.0) {
        out.push(Violation { field: format!("{field}.beta"), rule: "beta must be negative and finite".into() });
    }
}

fn check_bounds(out: &mut Vec<Violation>, field: &str, vm_min: f64, vm_max: f64) {
    if !(vm_min.is_finite() && vm_min >= 0.0) {
        out.push(Violation { field: format!("{field}.vm_min"), rule: "vm_min must be finite and >= 0".into() });
    }
    if !(vm_max.is_finite() && vm_max >= vm_min) {
        out.push(Violation { field: format!("{field}.vm_max"), rule: "vm_max must be finite and >= vm_min".into() });
    }
}

fn check_tau(out: &mut Vec<Violation>, field: String, tau: f64) {
    if !(tau.is_finite() && tau > 0.0) {
        out.push(Violation { field, rule: "time constant must be positive and finite".into() });
    }
}

/// Every broken invariant of `scenario`; empty when the scenario is valid.
pub fn validate_scenario(scenario: &MarketScenario) -> Vec<Violation> {
    let mut out = Vec::new();
    if scenario.scs.is_empty() {
        out.push(Violation { field: "scs".into(), rule: "at least one SC is required".into() });
    }
    let mut sc_ids = BTreeSet::new();
    for sc in &scenario.scs {
        let f = format!("scs[{}]", sc.id);
        if !sc_ids.insert(sc.id.as_str()) {
            out.push(Violation { field: format!("{f}.id"), rule: "SC ids must be unique".into() });
        }
        check_tau(&mut out, format!("{f}.tau_rho"), sc.tau_rho);
        if !sc.channels.iter().any(|c| c.enabled) {
            out.push(Violation { field: format!("{f}.channels"), rule: "at least one channel must be enabled".into() });
        }
        let mut kinds = BTreeSet::new();
        for ch in &sc.channels {
            let cf = format!("{f}.channels[{}]", ch.channel);
            if !kinds.insert(ch.channel) {
                out.push(Violation { field: cf.clone(), rule: "channel kinds must be unique per SC".into() });
            }
            check_coeffs(&mut out, cf.clone(), &ch.coeffs);
            check_bounds(&mut out, &cf, ch.vm_min, ch.vm_max);
            check_tau(&mut out, format!("{cf}.tau"), ch.tau);
            if ch.enabled && ch.vm_max == 0.0 {
                out.push(Violation {
                    field: format!("{cf}.enabled"),
                    rule: "a channel with vm_max = 0 must be disabled".into(),
                });
            }
        }
    }
    let mut customer_ids = BTreeSet::new();
    for c in &scenario.customers {
        let f = format!("customers[{}]", c.id);
        if !customer_ids.insert(c.id.as_str()) {
            out.push(Violation { field: format!("{f}.id"), rule: "customer ids must be unique".into() });
        }
        if !sc_ids.contains(c.sc_id.as_str()) {
            out.push(Violation { field: format!("{f}.sc_id"), rule: format!("SC `{}` does not exist", c.sc_id) });
        }
        check_coeffs(&mut out, format!("{f}.ag"), &c.coeffs_ag);
        if let Some(jt) = &c.job_types {
            check_coeffs(&mut out, format!("{f}.e"), &jt.elastic);
            check_coeffs(&mut out, format!("{f}.c"), &jt.curtailable);
            check_coeffs(&mut out, format!("{f}.s"), &jt.shiftable);
        }
        if !(c.kappa1 >= 0.0 && c.kappa2 >= 0.0 && c.kappa1 + c.kappa2 < 1.0) {
            out.push(Violation {
                field: format!("{f}.kappa"),
                rule: "need kappa1, kappa2 >= 0 and kappa1 + kappa2 < 1".into(),
            });
        }
        check_tau(&mut out, format!("{f}.tau_ag"), c.tau_ag);
        check_bounds(&mut out, &f, c.vm_min, c.vm_max);
    }
    out
}
