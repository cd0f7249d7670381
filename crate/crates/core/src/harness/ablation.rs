use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{train, RunConfig};
use crate::error::{Error, Result};
use crate::par;
use crate::posenet::param_count;

/// A named set of `key=value` overrides on the base configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub overrides: Vec<String>,
}

impl Arm {
    pub fn new(name: &str, overrides: &[&str]) -> Self {
        Self {
            name: name.to_string(),
            overrides: overrides.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSpec {
    pub base: RunConfig,
    pub arms: Vec<Arm>,
}

impl AblationSpec {
    /// Attention off, channel path only, geometric path only, both.
    pub fn components(base: RunConfig) -> Self {
        Self {
            base,
            arms: vec![
                Arm::new("base", &["pam.enable_cap=false", "pam.enable_gap=false"]),
                Arm::new("cap", &["pam.enable_cap=true", "pam.enable_gap=false"]),
                Arm::new("gap", &["pam.enable_cap=false", "pam.enable_gap=true"]),
                Arm::new("cap+gap", &["pam.enable_cap=true", "pam.enable_gap=true"]),
            ],
        }
    }

    /// Full module at each reduction ratio.
    pub fn reduction_ratios(base: RunConfig, ratios: &[usize]) -> Self {
        let arms = ratios
            .iter()
            .map(|r| Arm {
                name: format!("r={r}"),
                overrides: vec![
                    format!("pam.reduction_ratio={r}"),
                    "pam.enable_cap=true".into(),
                    "pam.enable_gap=true".into(),
                ],
            })
            .collect();
        Self { base, arms }
    }

    pub fn arm_config(&self, arm: &Arm) -> Result<RunConfig> {
        let mut c = self.base.clone();
        for o in &arm.overrides {
            c.set_str(o)?;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub overrides: Vec<String>,
    /// Dense network parameters.
    pub params: usize,
    /// Of which attention modules.
    pub pam_params: usize,
    pub auc: f64,
    pub acc_at_2cm: f64,
    pub mean_error: f64,
    pub relative_error: f64,
    pub refined_auc: f64,
    pub refined_mean_error: f64,
    /// Set when the arm failed; metrics are then NaN.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seed: u64,
    pub base_config_hash: String,
    pub arms: Vec<ArmResult>,
    pub failures: usize,
}

impl AblationTable {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "arm,params,pam_params,auc,acc_at_2cm,mean_error,relative_error,refined_auc,refined_mean_error,error\n",
        );
        for a in &self.arms {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{}",
                a.name,
                a.params,
                a.pam_params,
                a.auc,
                a.acc_at_2cm,
                a.mean_error,
                a.relative_error,
                a.refined_auc,
                a.refined_mean_error,
                a.error.as_deref().unwrap_or("").replace(',', ";")
            );
        }
        s
    }
}

fn run_arm(spec: &AblationSpec, arm: &Arm) -> ArmResult {
    let failed = |params: usize, pam_params: usize, e: Error| ArmResult {
        name: arm.name.clone(),
        overrides: arm.overrides.clone(),
        params,
        pam_params,
        auc: f64::NAN,
        acc_at_2cm: f64::NAN,
        mean_error: f64::NAN,
        relative_error: f64::NAN,
        refined_auc: f64::NAN,
        refined_mean_error: f64::NAN,
        error: Some(e.to_string()),
    };
    let config = match spec.arm_config(arm) {
        Ok(c) => c,
        Err(e) => return failed(0, 0, e),
    };
    let params = param_count(&config.net).unwrap_or(0);
    let pam_params = crate::posenet::init_params(&config.net, 0)
        .map(|p| p.count_prefix("pam."))
        .unwrap_or(0);
    match train(&config) {
        Ok(out) => {
            let (u, r) = (&out.report.unrefined.mean, &out.report.refined.mean);
            ArmResult {
                name: arm.name.clone(),
                overrides: arm.overrides.clone(),
                params,
                pam_params,
                auc: u.auc,
                acc_at_2cm: u.acc_at_2cm,
                mean_error: u.mean_error,
                relative_error: u.relative_error,
                refined_auc: r.auc,
                refined_mean_error: r.mean_error,
                error: None,
            }
        }
        Err(e) => failed(params, pam_params, e),
    }
}

/// Trains every arm on the same seed and data streams. Arms are
/// independent and run in parallel; a failing arm is recorded and the
/// sweep carries on.
pub fn run_ablation(spec: &AblationSpec) -> Result<AblationTable> {
    if spec.arms.len() < 2 {
        return Err(Error::Config("an ablation needs at least two arms".into()));
    }
    spec.base.validate()?;
    let arms = par::map(&spec.arms, |arm| run_arm(spec, arm));
    Ok(AblationTable {
        seed: spec.base.seed,
        base_config_hash: spec.base.hash(),
        failures: arms.iter().filter(|a| a.error.is_some()).count(),
        arms,
    })
}
