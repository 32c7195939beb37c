//! Small reference scenarios with hand-checkable equilibria.

use crate::model::{Channel, CustomerParams, MarketScenario, QuadraticCoefficients, SmallCloudParams};

pub const SC1_COEFFS: QuadraticCoefficients = QuadraticCoefficients::new(90.0, -0.3);
pub const C1_COEFFS: QuadraticCoefficients = QuadraticCoefficients::new(168.0, -0.5);

fn c1(sc_id: &str) -> CustomerParams {
    CustomerParams {
        id: "C1".into(),
        sc_id: sc_id.into(),
        coeffs_ag: C1_COEFFS,
        job_types: None,
        kappa1: 0.0,
        kappa2: 0.0,
        tau_ag: 0.1,
        vm_min: 0.0,
        vm_max: 1000.0,
    }
}

/// One SC with reserved, borrowed and public-cloud channels that all share
/// `(alpha, beta, tau) = (90, -0.3, 0.6)`, and one customer with
/// `(168, -0.5, 0.1)`. Equilibrium price 70.5.
pub fn s1() -> MarketScenario {
    MarketScenario {
        scs: vec![SmallCloudParams::uniform("SC1", &Channel::ALL, SC1_COEFFS, 0.0, 1000.0, 0.6, 1.0)],
        customers: vec![c1("SC1")],
    }
}

/// [`s1`] with only the reserved channel enabled.
pub fn s1_single() -> MarketScenario {
    MarketScenario {
        scs: vec![SmallCloudParams::uniform("SC1", &[Channel::Reserved], SC1_COEFFS, 0.0, 1000.0, 0.6, 1.0)],
        customers: vec![c1("SC1")],
    }
}

/// [`s1`] with distinct coefficients per channel.
pub fn s2() -> MarketScenario {
    let mut sc = SmallCloudParams::uniform("SC1", &Channel::ALL, SC1_COEFFS, 0.0, 1000.0, 0.6, 1.0);
    sc.channels[1].coeffs = QuadraticCoefficients::new(102.0, -0.6);
    sc.channels[1].tau = 0.2;
    sc.channels[2].coeffs = QuadraticCoefficients::new(80.0, -0.25);
    sc.channels[2].tau = 0.6;
    MarketScenario { scs: vec![sc], customers: vec![c1("SC1")] }
}

/// Applies the same curtailment pair to every customer.
pub fn with_kappa(mut scenario: MarketScenario, kappa1: f64, kappa2: f64) -> MarketScenario {
    for c in &mut scenario.customers {
        c.kappa1 = kappa1;
        c.kappa2 = kappa2;
    }
    scenario
}
