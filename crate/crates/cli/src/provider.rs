use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Args, ValueEnum};
use kcforge::corpus::QuestionBank;
use kcforge::gateway::{
    default_price_table, usage_cost, CompletionParams, Gateway, LiveProvider, PriceTable, Provider, RecordingProvider, ReplayProvider,
    RetryPolicy, ScriptedProvider, Transcript, Usage, DEFAULT_BASE_URL,
};
use kcforge::scripts;
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ProviderKind {
    Live,
    Replay,
    Scripted,
}

#[derive(Debug, Args)]
pub struct ProviderArgs {
    /// Completion backend.
    #[arg(long, value_enum)]
    pub provider: Option<ProviderKind>,
    /// Transcript to replay (JSON lines).
    #[arg(long)]
    pub transcript: Option<PathBuf>,
    /// Script file, or `builtin:gold|adversarial|single-objective|random`.
    #[arg(long)]
    pub script: Option<String>,
    /// Also append every exchange to this transcript.
    #[arg(long)]
    pub record: Option<PathBuf>,
    #[arg(long, default_value = kcforge::gateway::DEFAULT_MODEL)]
    pub model: String,
    #[arg(long, default_value_t = 0.0)]
    pub temperature: f64,
    /// Maximum concurrent requests.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u32).range(1..))]
    pub concurrency: u32,
    #[arg(long, default_value = DEFAULT_BASE_URL)]
    pub base_url: String,
    /// Seed for randomized built-in scripts.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Price table JSON (`{"model": {"input": .., "output": ..}}`).
    #[arg(long)]
    pub prices: Option<PathBuf>,
    /// Directory of prompt template overrides.
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

impl ProviderArgs {
    pub fn gateway(&self, bank: &QuestionBank) -> Result<Gateway, CliError> {
        let kind = self
            .provider
            .ok_or_else(|| CliError::validation(anyhow::anyhow!("--provider is required for this command")))?;
        let provider: Box<dyn Provider> = match kind {
            ProviderKind::Live => Box::new(LiveProvider::from_env(&self.base_url, RetryPolicy::default()).map_err(CliError::provider)?),
            ProviderKind::Replay => {
                let path = self
                    .transcript
                    .as_ref()
                    .ok_or_else(|| CliError::validation(anyhow::anyhow!("--transcript is required for replay")))?;
                let t = Transcript::load(path)
                    .with_context(|| format!("loading {}", path.display()))
                    .map_err(CliError::validation)?;
                Box::new(ReplayProvider::new(t))
            }
            ProviderKind::Scripted => Box::new(self.script(bank).map_err(CliError::validation)?),
        };
        let params = CompletionParams {
            model_id: self.model.clone(),
            temperature: self.temperature,
            ..Default::default()
        };
        let provider: Box<dyn Provider> = match &self.record {
            Some(path) => Box::new(RecordingProvider::new(provider, Some(path.clone()))),
            None => provider,
        };
        Ok(Gateway::with_concurrency(provider, params, self.concurrency as usize))
    }

    fn script(&self, bank: &QuestionBank) -> anyhow::Result<ScriptedProvider> {
        let Some(spec) = &self.script else {
            bail!("--script is required for the scripted provider")
        };
        if let Some(name) = spec.strip_prefix("builtin:") {
            return scripts::builtin(name, bank, self.seed)
                .with_context(|| format!("unknown built-in script `{name}` (known: {})", scripts::BUILTIN_NAMES.join(", ")));
        }
        let text = std::fs::read_to_string(spec).with_context(|| format!("reading {spec}"))?;
        Ok(ScriptedProvider::from_json(&text)?)
    }

    pub fn templates(&self) -> anyhow::Result<kcforge::template::TemplateSet> {
        Ok(match &self.templates {
            Some(dir) => kcforge::template::TemplateSet::with_overrides(dir)?,
            None => kcforge::template::TemplateSet::builtin(),
        })
    }

    pub fn price_table(&self) -> anyhow::Result<PriceTable> {
        match &self.prices {
            Some(p) => Ok(PriceTable::from_json(
                &std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            )?),
            None => Ok(default_price_table()),
        }
    }
}

#[derive(Debug, Serialize)]
pub struct UsageSummary {
    pub model: String,
    pub requests: u64,
    pub usage: Usage,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cost_usd: Option<f64>,
}

impl UsageSummary {
    pub fn new(args: &ProviderArgs, gateway: &Gateway, usage: Usage) -> anyhow::Result<Self> {
        let prices = args.price_table()?;
        let cost_usd = match usage_cost(&usage, &args.model, &prices) {
            Ok(c) => Some(c),
            Err(e) => {
                log::warn!("no cost computed: {e}");
                None
            }
        };
        Ok(Self {
            model: args.model.clone(),
            requests: gateway.request_count(),
            usage,
            cost_usd,
        })
    }
}
