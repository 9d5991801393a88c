//! Token usage and cost accounting.

use std::collections::BTreeMap;
use std::ops::Add;

use serde::{Deserialize, Serialize};

use super::GatewayError;

/// Token counts for one or more completions. `total_tokens` always equals
/// `prompt_tokens + completion_tokens`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

impl Usage {
    pub fn new(prompt_tokens: u64, completion_tokens: u64) -> Self {
        Self {
            prompt_tokens,
            completion_tokens,
            total_tokens: prompt_tokens + completion_tokens,
        }
    }

    /// Builds a usage from provider-reported counts. A reported total that
    /// disagrees with the component counts is replaced by their sum.
    pub fn from_reported(prompt_tokens: u64, completion_tokens: u64, total_tokens: u64) -> Self {
        let usage = Self::new(prompt_tokens, completion_tokens);
        if usage.total_tokens != total_tokens {
            log::warn!(
                "reported total_tokens {total_tokens} != {prompt_tokens} + {completion_tokens}; using {}",
                usage.total_tokens
            );
        }
        usage
    }
}

impl Add for Usage {
    type Output = Usage;

    fn add(self, rhs: Usage) -> Usage {
        Usage::new(
            self.prompt_tokens + rhs.prompt_tokens,
            self.completion_tokens + rhs.completion_tokens,
        )
    }
}

impl std::iter::Sum for Usage {
    fn sum<I: Iterator<Item = Usage>>(iter: I) -> Usage {
        iter.fold(Usage::default(), Add::add)
    }
}

impl<'de> Deserialize<'de> for Usage {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            prompt_tokens: u64,
            completion_tokens: u64,
            #[serde(default)]
            total_tokens: Option<u64>,
        }
        let raw = Raw::deserialize(d)?;
        Ok(match raw.total_tokens {
            Some(t) => Usage::from_reported(raw.prompt_tokens, raw.completion_tokens, t),
            None => Usage::new(raw.prompt_tokens, raw.completion_tokens),
        })
    }
}

pub fn usage_sum<'a, I: IntoIterator<Item = &'a Usage>>(usages: I) -> Usage {
    usages.into_iter().copied().sum()
}

/// Per-token prices for one model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelRates {
    pub input_per_token: f64,
    pub output_per_token: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PriceTable {
    pub models: BTreeMap<String, ModelRates>,
}

impl PriceTable {
    pub fn insert(&mut self, model: impl Into<String>, rates: ModelRates) -> Result<(), GatewayError> {
        if !(rates.input_per_token >= 0.0 && rates.output_per_token >= 0.0) {
            return Err(GatewayError::InvalidPrice(format!("{rates:?}")));
        }
        self.models.insert(model.into(), rates);
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, GatewayError> {
        let table: PriceTable = serde_json::from_str(text).map_err(|e| GatewayError::InvalidPrice(e.to_string()))?;
        let mut checked = PriceTable::default();
        for (model, rates) in table.models {
            checked.insert(model, rates)?;
        }
        Ok(checked)
    }
}

impl Default for ModelRates {
    fn default() -> Self {
        Self {
            input_per_token: 0.0,
            output_per_token: 0.0,
        }
    }
}

/// List prices of the default model, USD per token.
pub fn default_price_table() -> PriceTable {
    let mut t = PriceTable::default();
    t.insert(
        super::DEFAULT_MODEL,
        ModelRates {
            input_per_token: 10e-6,
            output_per_token: 30e-6,
        },
    )
    .expect("non-negative rates");
    t
}

pub fn usage_cost(usage: &Usage, model_id: &str, prices: &PriceTable) -> Result<f64, GatewayError> {
    let rates = prices
        .models
        .get(model_id)
        .ok_or_else(|| GatewayError::UnknownModel(model_id.to_string()))?;
    Ok(usage.prompt_tokens as f64 * rates.input_per_token + usage.completion_tokens as f64 * rates.output_per_token)
}
