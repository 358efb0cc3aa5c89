//! Token pricing and the hard dollar budget.

use rust_decimal::Decimal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rewrite::TokenUsage;

/// Dollars per million tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pricing {
    pub input: Decimal,
    pub cached_input: Decimal,
    pub output: Decimal,
}

impl Default for Pricing {
    fn default() -> Self {
        Self {
            input: Decimal::new(5, 0),
            cached_input: Decimal::new(50, 2),
            output: Decimal::new(25, 0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostEvent {
    pub input_tokens: u64,
    pub cached_input_tokens: u64,
    pub output_tokens: u64,
    pub pricing: Pricing,
    pub dollars: Decimal,
}

impl CostEvent {
    pub fn new(input_tokens: u64, cached_input_tokens: u64, output_tokens: u64, pricing: Pricing) -> Self {
        let dollars = (Decimal::from(input_tokens) * pricing.input
            + Decimal::from(cached_input_tokens) * pricing.cached_input
            + Decimal::from(output_tokens) * pricing.output)
            / Decimal::from(1_000_000u64);
        Self {
            input_tokens,
            cached_input_tokens,
            output_tokens,
            pricing,
            dollars,
        }
    }

    pub fn from_usage(usage: &TokenUsage, pricing: Pricing) -> Self {
        Self::new(usage.input_tokens, usage.cached_input_tokens, usage.output_tokens, pricing)
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum BudgetError {
    #[error("budget exceeded: spent {spent} of {cap}, next charge {attempted}")]
    BudgetExceeded {
        cap: Decimal,
        spent: Decimal,
        attempted: Decimal,
    },
    #[error("budget cap must be positive, got {0}")]
    InvalidCap(Decimal),
}

/// Cumulative spend against a hard cap. A charge that would cross the cap
/// is refused before anything is committed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetMeter {
    cap: Decimal,
    spent: Decimal,
    exhausted: bool,
}

impl BudgetMeter {
    pub fn new(cap: Decimal) -> Result<Self, BudgetError> {
        if cap <= Decimal::ZERO {
            return Err(BudgetError::InvalidCap(cap));
        }
        Ok(Self {
            cap,
            spent: Decimal::ZERO,
            exhausted: false,
        })
    }

    /// A meter that never refuses.
    pub fn unlimited() -> Self {
        Self {
            cap: Decimal::MAX,
            spent: Decimal::ZERO,
            exhausted: false,
        }
    }

    pub fn cap(&self) -> Decimal {
        self.cap
    }

    pub fn spent(&self) -> Decimal {
        self.spent
    }

    pub fn remaining(&self) -> Decimal {
        self.cap - self.spent
    }

    pub fn is_exhausted(&self) -> bool {
        self.exhausted
    }

    pub fn charge(&mut self, event: &CostEvent) -> Result<Decimal, BudgetError> {
        let next = self.spent.checked_add(event.dollars);
        match next {
            Some(total) if total <= self.cap => {
                self.spent = total;
                Ok(total)
            }
            _ => {
                self.exhausted = true;
                Err(BudgetError::BudgetExceeded {
                    cap: self.cap,
                    spent: self.spent,
                    attempted: event.dollars,
                })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::str::FromStr;

    fn d(s: &str) -> Decimal {
        Decimal::from_str(s).unwrap()
    }

    fn dollars(amount: &str) -> CostEvent {
        CostEvent {
            input_tokens: 0,
            cached_input_tokens: 0,
            output_tokens: 0,
            pricing: Pricing::default(),
            dollars: d(amount),
        }
    }

    #[test]
    fn pricing_is_exact() {
        let p = Pricing::default();
        assert_eq!(CostEvent::new(1_000_000, 0, 0, p).dollars, d("5.00"));
        assert_eq!(CostEvent::new(0, 2_000_000, 0, p).dollars, d("1.00"));
        assert_eq!(CostEvent::new(3000, 0, 800, p).dollars, d("0.035"));
    }

    #[test]
    fn cap_is_hard() {
        let mut m = BudgetMeter::new(d("10.00")).unwrap();
        m.charge(&dollars("9.99")).unwrap();
        let err = m.charge(&dollars("0.02")).unwrap_err();
        assert!(matches!(err, BudgetError::BudgetExceeded { .. }));
        assert_eq!(m.spent(), d("9.99"));
        assert!(m.is_exhausted());
        assert_eq!(m.charge(&dollars("0.01")).unwrap(), d("10.00"));
    }

    #[test]
    fn zero_cap_rejected() {
        assert!(BudgetMeter::new(Decimal::ZERO).is_err());
    }
}
