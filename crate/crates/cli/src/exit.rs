//! Maps errors to process exit codes: 2 validation or invariant failure,
//! 3 budget exhausted, 4 protocol error, 1 anything else.

use lineage_core::config::ConfigError;
use lineage_core::cost::BudgetError;
use lineage_core::deopt::DeoptError;
use lineage_core::gate::GateError;
use lineage_core::lift::LiftError;
use lineage_core::materialize::MaterializeError;
use lineage_core::model::ModelError;
use lineage_core::rewrite::RewriteError;
use lineage_core::sim::{RecoveryError, SimError};
use lineage_core::store::StoreError;

pub const VALIDATION: u8 = 2;
pub const BUDGET: u8 = 3;
pub const PROTOCOL: u8 = 4;

/// A failure the command detected itself, with its exit code.
#[derive(Debug)]
pub struct Exit {
    pub code: u8,
    pub message: String,
}

impl std::fmt::Display for Exit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for Exit {}

pub fn fail(code: u8, message: impl Into<String>) -> anyhow::Error {
    Exit {
        code,
        message: message.into(),
    }
    .into()
}

fn gate(e: &GateError) -> u8 {
    match e {
        GateError::Protocol(_) | GateError::InvalidSamples | GateError::Unavailable(_) => PROTOCOL,
        GateError::Timeout { .. } => 1,
        GateError::ProbeUnsupported => VALIDATION,
    }
}

fn lift(e: &LiftError) -> u8 {
    match e {
        LiftError::Protocol(_) => PROTOCOL,
        LiftError::Gate(g) => gate(g),
        LiftError::Budget(_) => BUDGET,
        _ => VALIDATION,
    }
}

fn deopt(e: &DeoptError) -> u8 {
    match e {
        DeoptError::Gate(g) => gate(g),
        _ => VALIDATION,
    }
}

fn materialize(e: &MaterializeError) -> u8 {
    match e {
        MaterializeError::Gate(g) => gate(g),
        MaterializeError::Budget(_) => BUDGET,
        MaterializeError::Model(_) => VALIDATION,
    }
}

pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Exit>() {
            return e.code;
        }
        if let Some(e) = cause.downcast_ref::<GateError>() {
            return gate(e);
        }
        if let Some(e) = cause.downcast_ref::<LiftError>() {
            return lift(e);
        }
        if let Some(e) = cause.downcast_ref::<DeoptError>() {
            return deopt(e);
        }
        if let Some(e) = cause.downcast_ref::<MaterializeError>() {
            return materialize(e);
        }
        if let Some(e) = cause.downcast_ref::<RecoveryError>() {
            return match e {
                RecoveryError::Deopt(d) => deopt(d),
                RecoveryError::Lift(l) => lift(l),
                RecoveryError::Materialize(m) => materialize(m),
                RecoveryError::Sim(_) | RecoveryError::Model(_) => VALIDATION,
            };
        }
        if let Some(e) = cause.downcast_ref::<RewriteError>() {
            return match e {
                RewriteError::Failed(_) => 1,
                _ => PROTOCOL,
            };
        }
        if cause.downcast_ref::<BudgetError>().is_some() {
            return BUDGET;
        }
        if let Some(e) = cause.downcast_ref::<StoreError>() {
            return match e {
                StoreError::Invalid { .. } | StoreError::Jsonl { .. } | StoreError::NotFound(_) => VALIDATION,
                _ => 1,
            };
        }
        if cause.downcast_ref::<ModelError>().is_some()
            || cause.downcast_ref::<SimError>().is_some()
            || cause.downcast_ref::<ConfigError>().is_some()
            || cause.downcast_ref::<serde_json::Error>().is_some()
        {
            return VALIDATION;
        }
    }
    1
}
