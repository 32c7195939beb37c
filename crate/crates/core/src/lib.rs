//! Equilibrium computation, gradient-play dynamics and stability analysis
//! for small-cloud (SC) resource-sharing markets.
//!
//! - [`model`]: scenario types, cost/utility curves and social welfare.
//! - [`equilibrium`]: closed-form KKT solve, tatonnement, primal-dual iteration.
//! - [`dynamics`]: the coupled supply/demand/price ODEs and their integrators.
//! - [`stability`]: linearization, Hurwitz and Lyapunov analysis, attraction radii.
//! - [`welfare`]: utilitarian, egalitarian and Rawlsian allocations.

pub mod dynamics;
pub mod equilibrium;
pub mod generate;
pub mod model;
pub mod presets;
pub mod stability;
pub mod welfare;

pub use dynamics::{DynamicState, IntegrationMethod, PerturbationSpec, TerminalStatus, TrajectoryRecord};
pub use equilibrium::{EquilibriumResult, Method, SolveStatus, SolverOptions};
pub use model::{
    Channel, CustomerParams, MarketScenario, MarketState, QuadraticCoefficients, SmallCloudParams, SupplyChannelParams,
};
pub use stability::{LinearizedSystem, StabilityReport};
pub use welfare::{WelfareOptions, WelfareReport, WelfareType};
