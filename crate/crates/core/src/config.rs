//! TOML configuration: endpoints for runners, rewriters and lifters plus
//! the tunables of each stage.
//!
//! ```toml
//! [pricing]
//! input = "5"
//! cached_input = "0.5"
//! output = "25"
//!
//! [runners.h100]
//! kind = "process"
//! argv = ["python", "-m", "runner", "--device", "0"]
//!
//! [rewriters.default]
//! kind = "http"
//! url = "https://api.example.com/v1/chat/completions"
//! model = "some-model"
//! api_key_env = "REWRITER_API_KEY"
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::Pricing;
use crate::deopt::DeoptConfig;
use crate::gate::{GateConfig, ProcessRunner, Runner};
use crate::lift::{AdmissionConfig, Lifter, ProcessLifter};
use crate::materialize::OptimizeConfig;
use crate::rewrite::{HttpRewriter, ProcessRewriter, Rewriter};
use crate::sim::{SimLifter, SimRewriter, SimRunner};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("no {kind} named {name:?} in config")]
    Missing { kind: &'static str, name: String },
    #[error("{0}")]
    Invalid(String),
}

fn default_timeout() -> f64 {
    600.0
}

/// How to reach an external component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Endpoint {
    /// The built-in simulator over the case's lattice.
    Sim,
    Process {
        argv: Vec<String>,
        #[serde(default = "default_timeout")]
        timeout_s: f64,
    },
    /// OpenAI-compatible chat completions (rewriters only).
    Http {
        url: String,
        model: String,
        #[serde(default)]
        api_key_env: Option<String>,
    },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    /// Overrides the pricing in every stage when set.
    pub pricing: Option<Pricing>,
    pub gate: GateConfig,
    pub deopt: DeoptConfig,
    pub admission: AdmissionConfig,
    pub optimize: OptimizeConfig,
    pub runners: BTreeMap<String, Endpoint>,
    pub rewriters: BTreeMap<String, Endpoint>,
    pub lifters: BTreeMap<String, Endpoint>,
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: Config = toml::from_str(text)?;
        if let Some(p) = cfg.pricing {
            cfg.deopt.pricing = p;
            cfg.optimize.pricing = p;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn check(&self) -> Result<(), ConfigError> {
        self.gate.check().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.optimize.k == 0 {
            return Err(ConfigError::Invalid("optimize.k must be >= 1".into()));
        }
        for (name, ep) in self.runners.iter().chain(&self.lifters) {
            if matches!(ep, Endpoint::Http { .. }) {
                return Err(ConfigError::Invalid(format!("{name}: http endpoints are for rewriters only")));
            }
        }
        for (name, ep) in self.runners.iter().chain(&self.lifters).chain(&self.rewriters) {
            if let Endpoint::Process { argv, timeout_s } = ep {
                if argv.is_empty() {
                    return Err(ConfigError::Invalid(format!("{name}: empty argv")));
                }
                if !(timeout_s.is_finite() && *timeout_s > 0.0) {
                    return Err(ConfigError::Invalid(format!("{name}: timeout_s must be positive")));
                }
            }
        }
        Ok(())
    }

    fn endpoint<'a>(
        map: &'a BTreeMap<String, Endpoint>,
        kind: &'static str,
        name: &str,
    ) -> Result<&'a Endpoint, ConfigError> {
        match map.get(name) {
            Some(e) => Ok(e),
            None if name == "sim" => Ok(&Endpoint::Sim),
            None => Err(ConfigError::Missing {
                kind,
                name: name.to_string(),
            }),
        }
    }

    /// Builds a runner. The name `sim` always resolves to the simulator.
    pub fn runner(&self, name: &str) -> Result<Arc<dyn Runner>, ConfigError> {
        match Self::endpoint(&self.runners, "runner", name)? {
            Endpoint::Sim => Ok(Arc::new(SimRunner::new())),
            Endpoint::Process { argv, .. } => Ok(Arc::new(ProcessRunner::new(argv.clone()))),
            Endpoint::Http { .. } => Err(ConfigError::Invalid("http runner".into())),
        }
    }

    pub fn rewriter(&self, name: &str) -> Result<Arc<dyn Rewriter>, ConfigError> {
        match Self::endpoint(&self.rewriters, "rewriter", name)? {
            Endpoint::Sim => Ok(Arc::new(SimRewriter::new())),
            Endpoint::Process { argv, timeout_s } => Ok(Arc::new(ProcessRewriter {
                argv: argv.clone(),
                timeout: Duration::from_secs_f64(*timeout_s),
            })),
            Endpoint::Http {
                url,
                model,
                api_key_env,
            } => Ok(Arc::new(HttpRewriter::new(url, model, api_key_env.as_deref()))),
        }
    }

    pub fn lifter(&self, name: &str) -> Result<Box<dyn Lifter>, ConfigError> {
        match Self::endpoint(&self.lifters, "lifter", name)? {
            Endpoint::Sim => Ok(Box::new(SimLifter::default())),
            Endpoint::Process { argv, timeout_s } => Ok(Box::new(ProcessLifter {
                argv: argv.clone(),
                timeout: Duration::from_secs_f64(*timeout_s),
            })),
            Endpoint::Http { .. } => Err(ConfigError::Invalid("http lifter".into())),
        }
    }
}
