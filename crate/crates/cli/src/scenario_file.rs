//! JSON scenario files.
//!
//! Each SC row carries one set of coefficients, applied to every channel
//! unless the optional `channels` object overrides fields per channel
//! (`reserved`, `borrowed`, `public_cloud`). Unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use scmarket_core::model::{validate_scenario, JobTypeCoefficients};
use scmarket_core::{
    Channel, CustomerParams, MarketScenario, QuadraticCoefficients, SmallCloudParams, SupplyChannelParams,
};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub version: u32,
    pub scs: Vec<ScRow>,
    #[serde(default)]
    pub customers: Vec<CustomerRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScRow {
    pub id: String,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub vm_min: f64,
    pub vm_max: f64,
    pub tau_rho: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<ChannelOverrides>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reserved: Option<ChannelOverride>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub borrowed: Option<ChannelOverride>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_cloud: Option<ChannelOverride>,
}

impl ChannelOverrides {
    fn get(&self, channel: Channel) -> Option<&ChannelOverride> {
        match channel {
            Channel::Reserved => self.reserved.as_ref(),
            Channel::Borrowed => self.borrowed.as_ref(),
            Channel::PublicCloud => self.public_cloud.as_ref(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enabled: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vm_min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vm_max: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Coeffs {
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobTypesRow {
    pub elastic: Coeffs,
    pub curtailable: Coeffs,
    pub shiftable: Coeffs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomerRow {
    pub id: String,
    pub sc_id: String,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub vm_min: f64,
    pub vm_max: f64,
    #[serde(default)]
    pub kappa1: f64,
    #[serde(default)]
    pub kappa2: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_types: Option<JobTypesRow>,
}

fn coeffs(c: Coeffs) -> QuadraticCoefficients {
    QuadraticCoefficients::new(c.alpha, c.beta)
}

impl ScenarioFile {
    /// Expands per-SC defaults and channel overrides into a scenario.
    /// Channels stay disabled when `vm_max` is zero.
    pub fn into_scenario(self) -> MarketScenario {
        let scs = self
            .scs
            .into_iter()
            .map(|row| {
                let overrides = row.channels.clone().unwrap_or_default();
                let channels = Channel::ALL
                    .into_iter()
                    .map(|channel| {
                        let o = overrides.get(channel).cloned().unwrap_or_default();
                        let vm_max = o.vm_max.unwrap_or(row.vm_max);
                        SupplyChannelParams {
                            channel,
                            coeffs: QuadraticCoefficients::new(
                                o.alpha.unwrap_or(row.alpha),
                                o.beta.unwrap_or(row.beta),
                            ),
                            vm_min: o.vm_min.unwrap_or(row.vm_min),
                            vm_max,
                            tau: o.tau.unwrap_or(row.tau),
                            enabled: o.enabled.unwrap_or(true) && vm_max > 0.0,
                        }
                    })
                    .collect();
                SmallCloudParams { id: row.id, channels, tau_rho: row.tau_rho }
            })
            .collect();
        let customers = self
            .customers
            .into_iter()
            .map(|c| CustomerParams {
                id: c.id,
                sc_id: c.sc_id,
                coeffs_ag: QuadraticCoefficients::new(c.alpha, c.beta),
                job_types: c.job_types.map(|j| JobTypeCoefficients {
                    elastic: coeffs(j.elastic),
                    curtailable: coeffs(j.curtailable),
                    shiftable: coeffs(j.shiftable),
                }),
                kappa1: c.kappa1,
                kappa2: c.kappa2,
                tau_ag: c.tau,
                vm_min: c.vm_min,
                vm_max: c.vm_max,
            })
            .collect();
        MarketScenario { scs, customers }
    }

    /// Writes every channel explicitly, so loading the result reproduces
    /// `scenario` exactly. SCs must list their channels in canonical order.
    pub fn from_scenario(scenario: &MarketScenario) -> Self {
        let scs = scenario
            .scs
            .iter()
            .map(|sc| {
                let base = sc.enabled_channels().next().or(sc.channels.first());
                let (alpha, beta, tau, vm_min, vm_max) = base
                    .map_or((1.0, -1.0, 1.0, 0.0, 0.0), |c| (c.coeffs.alpha, c.coeffs.beta, c.tau, c.vm_min, c.vm_max));
                let mut overrides = ChannelOverrides::default();
                for channel in Channel::ALL {
                    let o = match sc.channels.iter().find(|c| c.channel == channel) {
                        Some(c) => ChannelOverride {
                            enabled: Some(c.enabled),
                            alpha: Some(c.coeffs.alpha),
                            beta: Some(c.coeffs.beta),
                            tau: Some(c.tau),
                            vm_min: Some(c.vm_min),
                            vm_max: Some(c.vm_max),
                        },
                        None => ChannelOverride { enabled: Some(false), ..Default::default() },
                    };
                    match channel {
                        Channel::Reserved => overrides.reserved = Some(o),
                        Channel::Borrowed => overrides.borrowed = Some(o),
                        Channel::PublicCloud => overrides.public_cloud = Some(o),
                    }
                }
                ScRow {
                    id: sc.id.clone(),
                    alpha,
                    beta,
                    tau,
                    vm_min,
                    vm_max,
                    tau_rho: sc.tau_rho,
                    channels: Some(overrides),
                }
            })
            .collect();
        let customers = scenario
            .customers
            .iter()
            .map(|c| CustomerRow {
                id: c.id.clone(),
                sc_id: c.sc_id.clone(),
                alpha: c.coeffs_ag.alpha,
                beta: c.coeffs_ag.beta,
                tau: c.tau_ag,
                vm_min: c.vm_min,
                vm_max: c.vm_max,
                kappa1: c.kappa1,
                kappa2: c.kappa2,
                job_types: c.job_types.map(|j| JobTypesRow {
                    elastic: Coeffs { alpha: j.elastic.alpha, beta: j.elastic.beta },
                    curtailable: Coeffs { alpha: j.curtailable.alpha, beta: j.curtailable.beta },
                    shiftable: Coeffs { alpha: j.shiftable.alpha, beta: j.shiftable.beta },
                }),
            })
            .collect();
        Self { version: SCHEMA_VERSION, scs, customers }
    }
}

/// Parses and validates scenario JSON text.
pub fn parse_scenario(text: &str, origin: &str) -> Result<MarketScenario, CliError> {
    let file: ScenarioFile = serde_json::from_str(text).map_err(|e| CliError::Parse {
        path: origin.to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if file.version != SCHEMA_VERSION {
        return Err(CliError::Version { path: origin.to_string(), found: file.version, expected: SCHEMA_VERSION });
    }
    let scenario = file.into_scenario();
    let violations = validate_scenario(&scenario);
    if !violations.is_empty() {
        return Err(CliError::Invalid { path: origin.to_string(), violations });
    }
    Ok(scenario)
}

pub fn load_scenario(path: &Path) -> Result<MarketScenario, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Io { path: path.display().to_string(), source: e })?;
    parse_scenario(&text, &path.display().to_string())
}

pub fn to_json(scenario: &MarketScenario) -> String {
    serde_json::to_string_pretty(&ScenarioFile::from_scenario(scenario)).expect("scenario files always serialize")
}

#[cfg(test)]
mod tests {
    use super::*;
    use scmarket_core::presets::{s1, s2, with_kappa};

    const MINIMAL: &str = r#"{
        "version": 1,
        "scs": [{"id": "SC1", "alpha": 90, "beta": -0.3, "tau": 0.6, "vm_min": 0, "vm_max": 1000, "tau_rho": 1}],
        "customers": [{"id": "C1", "sc_id": "SC1", "alpha": 168, "beta": -0.5, "tau": 0.1, "vm_min": 0, "vm_max": 1000}]
    }"#;

    #[test]
    fn defaults_expand_to_all_channels() {
        assert_eq!(parse_scenario(MINIMAL, "mem").unwrap(), s1());
    }

    #[test]
    fn overrides_apply_per_channel() {
        let text = MINIMAL.replace(
            r#""tau_rho": 1}"#,
            r#""tau_rho": 1, "channels": {"borrowed": {"alpha": 102, "beta": -0.6, "tau": 0.2},
                "public_cloud": {"alpha": 80, "beta": -0.25}}}"#,
        );
        assert_eq!(parse_scenario(&text, "mem").unwrap(), s2());
        let text =
            MINIMAL.replace(r#""tau_rho": 1}"#, r#""tau_rho": 1, "channels": {"borrowed": {"enabled": false}}}"#);
        let s = parse_scenario(&text, "mem").unwrap();
        assert_eq!(s.scs[0].enabled_channels().count(), 2);
    }

    #[test]
    fn round_trip() {
        for s in [s1(), s2(), with_kappa(s1(), 0.02, 0.01)] {
            assert_eq!(parse_scenario(&to_json(&s), "mem").unwrap(), s);
        }
    }

    #[test]
    fn rejects_unknown_keys_with_position() {
        let text = MINIMAL.replace(r#""tau_rho": 1}"#, r#""tau_rho": 1, "colour": 3}"#);
        match parse_scenario(&text, "mem") {
            Err(CliError::Parse { line, column, message, .. }) => {
                assert_eq!(line, 3);
                assert!(column > 0);
                assert!(message.contains("colour"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        let bad = MINIMAL.replace(r#""tau_rho": 1}"#, r#""tau_rho": 1, "channels": {"spot": {}}}"#);
        assert!(matches!(parse_scenario(&bad, "mem"), Err(CliError::Parse { .. })));
    }

    #[test]
    fn rejects_bad_version_syntax_and_invalid_content() {
        let text = MINIMAL.replace(r#""version": 1"#, r#""version": 2"#);
        assert!(matches!(parse_scenario(&text, "mem"), Err(CliError::Version { found: 2, .. })));
        let text = MINIMAL.replace(r#""version": 1,"#, "");
        assert!(matches!(parse_scenario(&text, "mem"), Err(CliError::Parse { .. })));
        assert!(matches!(parse_scenario("{ \"version\": 1, ", "mem"), Err(CliError::Parse { line: 1, .. })));
        let empty = r#"{"version": 1, "scs": [], "customers": []}"#;
        assert!(matches!(parse_scenario(empty, "mem"), Err(CliError::Invalid { .. })));
    }
}
