use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::LlmError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rates {
    pub usd_per_1k_input_tokens: f64,
    pub usd_per_1k_output_tokens: f64,
}

/// USD rates keyed by provider id.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PriceTable(pub BTreeMap<String, Rates>);

impl PriceTable {
    pub fn with(mut self, provider_id: impl Into<String>, input: f64, output: f64) -> Self {
        self.0.insert(
            provider_id.into(),
            Rates {
                usd_per_1k_input_tokens: input,
                usd_per_1k_output_tokens: output,
            },
        );
        self
    }

    pub fn validate(&self) -> Result<(), String> {
        for (id, r) in &self.0 {
            if !(r.usd_per_1k_input_tokens >= 0.0) || !(r.usd_per_1k_output_tokens >= 0.0) {
                return Err(format!("negative rate for provider `{id}`"));
            }
        }
        Ok(())
    }
}

/// One provider call's token usage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEntry {
    pub provider_id: String,
    pub input_tokens: u64,
    pub output_tokens: u64,
}

/// Total USD cost of a usage ledger. Tokens are summed per provider before
/// pricing.
pub fn cost_of(ledger: &[UsageEntry], prices: &PriceTable) -> Result<f64, LlmError> {
    let mut totals: BTreeMap<&str, (u64, u64)> = BTreeMap::new();
    for e in ledger {
        let t = totals.entry(e.provider_id.as_str()).or_default();
        t.0 += e.input_tokens;
        t.1 += e.output_tokens;
    }
    let mut usd = 0.0;
    for (provider, (input, output)) in totals {
        let rates = prices
            .0
            .get(provider)
            .ok_or_else(|| LlmError::UnknownProvider(provider.to_string()))?;
        usd += input as f64 * rates.usd_per_1k_input_tokens / 1000.0
            + output as f64 * rates.usd_per_1k_output_tokens / 1000.0;
    }
    Ok(usd)
}
