//! Run configuration. Every tunable of the pipelines lives here; a JSON file
//! may name any subset and the rest fall back to the defaults below.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::d3po::D3poConfig;
use crate::diffusion::{DenoiserConfig, NoiseSchedule};
use crate::embedder::{ContrastiveConfig, EmbedderConfig};
use crate::error::Result;
use crate::implicit::AeConfig;
use crate::nn::mix_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub ddim_steps: usize,
    /// Clip the clean-image estimate to [-1, 1] during DDIM.
    pub clip_denoised: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { timesteps: 64, beta_min: 1e-4, beta_max: 0.2, ddim_steps: 16, clip_denoised: true }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_min, self.beta_max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderTrainingConfig {
    pub pairs: usize,
    /// Probability of dropping each slot from a training caption.
    pub slot_dropout: f64,
    pub contrastive: ContrastiveConfig,
}

impl Default for EmbedderTrainingConfig {
    fn default() -> Self {
        EmbedderTrainingConfig {
            pairs: 2000,
            slot_dropout: 0.25,
            contrastive: ContrastiveConfig { epochs: 30, ..Default::default() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SftConfig {
    pub dataset_size: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Probability of dropping each slot from the conditioning prompt.
    pub slot_dropout: f64,
    pub log_every: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { dataset_size: 2000, steps: 15000, batch_size: 32, lr: 1e-3, slot_dropout: 0.2, log_every: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TwinConfig {
    pub traces: usize,
    /// Rounds per trace; each round discloses one more slot.
    pub rounds_per_trace: usize,
    /// D3PO steps after each round's pair.
    pub updates_per_round: usize,
    /// D3PO steps over all of a trace's pairs once the trace ends.
    pub updates_per_trace: usize,
    /// Train on tied pairs too (their order then comes from the seed rule only).
    pub use_tied_pairs: bool,
}

impl Default for TwinConfig {
    fn default() -> Self {
        TwinConfig { traces: 500, rounds_per_trace: 4, updates_per_round: 1, updates_per_trace: 0, use_tied_pairs: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub sessions: usize,
    pub round_cap: usize,
    /// Chance that an unprompted synthetic user says nothing useful.
    pub vague_probability: f64,
    /// match_score at which the synthetic user is satisfied.
    pub satisfaction: f64,
    /// Rounds counted as "early" in the summary.
    pub early_rounds: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { sessions: 100, round_cap: 10, vague_probability: 0.5, satisfaction: 1.0, early_rounds: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    pub cases: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig { thresholds: vec![0.66, 0.68, 0.70, 0.73, 0.75, 0.80], cases: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreferenceShiftConfig {
    pub d3po: D3poConfig,
    /// Online steps; each draws fresh pairs from the current policy.
    pub steps: usize,
    pub eval_prompts: usize,
    /// Chance of dropping position and background from a prompt.
    pub slot_dropout: f64,
}

impl Default for PreferenceShiftConfig {
    fn default() -> Self {
        PreferenceShiftConfig { d3po: D3poConfig::default(), steps: 50, eval_prompts: 200, slot_dropout: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummarizerConfig {
    pub url: String,
    #[serde(default = "default_summarizer_timeout")]
    pub timeout_ms: u64,
}

fn default_summarizer_timeout() -> u64 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub data_dir: PathBuf,
    pub schedule: ScheduleConfig,
    pub denoiser: DenoiserConfig,
    pub embedder: EmbedderConfig,
    pub embedder_training: EmbedderTrainingConfig,
    pub sft: SftConfig,
    /// Ambiguity threshold for clarification questions.
    pub tau: f64,
    pub attend_excite: AeConfig,
    pub d3po: D3poConfig,
    pub twin: TwinConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub preference_shift: PreferenceShiftConfig,
    pub summarizer: Option<SummarizerConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_dir: PathBuf::from("run"),
            schedule: ScheduleConfig::default(),
            denoiser: DenoiserConfig::default(),
            embedder: EmbedderConfig::default(),
            embedder_training: EmbedderTrainingConfig::default(),
            sft: SftConfig::default(),
            tau: 0.3,
            attend_excite: AeConfig::default(),
            d3po: D3poConfig::default(),
            twin: TwinConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            preference_shift: PreferenceShiftConfig::default(),
            summarizer: None,
        }
    }
}

/// Seed streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    EmbedderData = 1,
    EmbedderInit,
    EmbedderTraining,
    Dataset,
    DenoiserInit,
    SftBatches,
    Traces,
    Twin,
    Eval,
    Sweep,
    PreferenceShift,
    Service,
    Retrieval,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        mix_seed(self.seed, &[stage as u64])
    }

    /// A small configuration for tests and smoke runs.
    pub fn tiny() -> Self {
        let mut cfg = RunConfig::default();
        cfg.schedule.timesteps = 16;
        cfg.schedule.ddim_steps = 4;
        cfg.denoiser.hidden = 16;
        cfg.denoiser.local_channels = 4;
        cfg.embedder_training.pairs = 144;
        cfg.embedder_training.contrastive.epochs = 2;
        cfg.sft.dataset_size = 144;
        cfg.sft.steps = 20;
        cfg.sft.batch_size = 8;
        cfg.sft.log_every = 5;
        cfg.twin.traces = 3;
        cfg.eval.sessions = 4;
        cfg.eval.round_cap = 5;
        cfg.sweep.cases = 4;
        cfg.attend_excite.n_max = 2;
        cfg.preference_shift.steps = 2;
        cfg.preference_shift.eval_prompts = 8;
        cfg.preference_shift.d3po.batch_size = 2;
        cfg.d3po.batch_size = 2;
        cfg
    }
}
