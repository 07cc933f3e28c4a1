//! Run configuration shared by every subcommand, stored as TOML.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Batch, MarkovCorpus};
use crate::error::{config_err, Result};
use crate::infer::DEFAULT_MAX_DEFERRED;
use crate::model::{ExitSpec, HeadKind, ModelConfig};
use crate::pipeline::WeightSchedule;
use crate::train::optim::OptimizerConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Parallelism {
    pub stages: usize,
    pub micro_batch: usize,
    pub global_batch: usize,
    /// Run early-exit forwards in the backward step.
    #[serde(default = "yes")]
    pub defer_exit_forward: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Training {
    pub steps: u64,
    /// Tokens per training sequence; at most `model.max_seq_len`.
    pub seq_len: usize,
    pub optimizer: OptimizerConfig,
    /// Exit loss weights over time. Defaults to the weights in the model
    /// config, held constant.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<WeightSchedule>,
    #[serde(default)]
    pub fill: bool,
    /// Forward/backward time ratio the fill plan assumes.
    #[serde(default = "default_fill_ratio")]
    pub fill_ratio: f64,
    /// Rescale filled gradients. Turning this off biases the gradient and
    /// exists so the estimator checks can be shown to catch it.
    #[serde(default = "yes")]
    pub rescale_fill: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerateMode {
    Pipeline,
    Recompute,
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Inference {
    pub thresholds: Vec<f64>,
    #[serde(default = "default_mode")]
    pub mode: GenerateMode,
    #[serde(default = "default_max_deferred")]
    pub max_deferred: usize,
    pub max_new_tokens: usize,
    /// Number of prompts drawn from the corpus for mode comparisons.
    #[serde(default = "default_prompts")]
    pub prompts: usize,
    /// Modeled forward time of each stage. Empty means one unit each.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub stage_times: Vec<f64>,
}

/// Where training tokens come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Seeded order-2 Markov chain over the model vocabulary.
    Markov {
        seed: u64,
        #[serde(default = "default_branching")]
        branching: usize,
    },
    /// Whitespace-separated token ids. Training windows are drawn at
    /// seeded offsets.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub parallelism: Parallelism,
    pub training: Training,
    pub inference: Inference,
    pub data: DataSource,
}

fn yes() -> bool {
    true
}

fn default_fill_ratio() -> f64 {
    0.5
}

fn default_mode() -> GenerateMode {
    GenerateMode::Both
}

fn default_max_deferred() -> usize {
    DEFAULT_MAX_DEFERRED
}

fn default_prompts() -> usize {
    20
}

fn default_branching() -> usize {
    4
}

impl Default for RunConfig {
    /// Desk-scale setup: 8 layers, exits at 1/4 and 1/2 depth, 4 stages.
    fn default() -> Self {
        RunConfig {
            seed: 7,
            model: ModelConfig {
                num_layers: 8,
                hidden_dim: 32,
                num_heads: 4,
                vocab_size: 16,
                max_seq_len: 32,
                exits: vec![ExitSpec::new(2, HeadKind::NormEmbed, 0.25), ExitSpec::new(4, HeadKind::NormEmbed, 0.5)],
                tie_embeddings: false,
            },
            parallelism: Parallelism { stages: 4, micro_batch: 2, global_batch: 16, defer_exit_forward: true },
            training: Training {
                steps: 500,
                seq_len: 16,
                optimizer: OptimizerConfig::adam(3e-3),
                schedule: None,
                fill: false,
                fill_ratio: default_fill_ratio(),
                rescale_fill: true,
            },
            inference: Inference {
                thresholds: vec![1.0, 0.95, 0.9, 0.8],
                mode: GenerateMode::Both,
                max_deferred: DEFAULT_MAX_DEFERRED,
                max_new_tokens: 16,
                prompts: 20,
                stage_times: Vec::new(),
            },
            data: DataSource::Markov { seed: 11, branching: 2 },
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        // Relative token files are resolved against the config's directory.
        if let DataSource::File { path: p } = &mut cfg.data {
            if p.is_relative() {
                if let Some(dir) = path.parent() {
                    *p = dir.join(&*p);
                }
            }
            if !p.exists() {
                return Err(config_err(format!("token file {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(format!("config serialize: {e}")))
    }

    pub fn microbatches(&self) -> usize {
        self.parallelism.global_batch / self.parallelism.micro_batch
    }

    pub fn weight_schedule(&self) -> WeightSchedule {
        self.training.schedule.clone().unwrap_or_else(|| WeightSchedule::constant(self.model.default_weights()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let par = &self.parallelism;
        if par.stages == 0 || !self.model.num_layers.is_multiple_of(par.stages) {
            return Err(config_err(format!("{} layers cannot be split over {} stages", self.model.num_layers, par.stages)));
        }
        if par.micro_batch == 0 || par.global_batch == 0 || !par.global_batch.is_multiple_of(par.micro_batch) {
            return Err(config_err(format!(
                "global batch {} must be a positive multiple of micro batch {}",
                par.global_batch, par.micro_batch
            )));
        }
        let t = &self.training;
        if t.seq_len == 0 || t.seq_len > self.model.max_seq_len {
            return Err(config_err(format!("seq_len {} outside 1..={}", t.seq_len, self.model.max_seq_len)));
        }
        self.weight_schedule().validate(self.model.num_exits())?;
        t.optimizer.validate()?;
        if t.fill && par.stages > 1 {
            let plan = crate::pipeline::plan_bubble_fill(par.stages, t.fill_ratio)?;
            if !plan.is_empty() && self.model.tie_embeddings {
                return Err(config_err("bubble filling needs untied embeddings"));
            }
        }
        let inf = &self.inference;
        if let Some(&bad) = inf.thresholds.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
            return Err(config_err(format!("threshold {bad} outside (0, 1]")));
        }
        if inf.max_deferred == 0 {
            return Err(config_err("max_deferred must be at least 1"));
        }
        if !inf.stage_times.is_empty() && inf.stage_times.len() != par.stages {
            return Err(config_err(format!("{} stage times for {} stages", inf.stage_times.len(), par.stages)));
        }
        if let DataSource::Markov { branching, .. } = self.data {
            if branching == 0 {
                return Err(config_err("branching must be positive"));
            }
        }
        Ok(())
    }
}

/// Token stream for training and prompts.
#[derive(Clone, Debug)]
pub enum Corpus {
    Markov(MarkovCorpus),
    Tokens { seed: u64, tokens: Vec<usize> },
}

impl Corpus {
    pub fn open(cfg: &RunConfig) -> Result<Self> {
        let vocab = cfg.model.vocab_size;
        match &cfg.data {
            DataSource::Markov { seed, branching } => {
                Ok(Corpus::Markov(MarkovCorpus { vocab, seed: *seed, branching: *branching }))
            }
            DataSource::File { path } => {
                let text = fs::read_to_string(path).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
                let tokens = text
                    .split_whitespace()
                    .map(|w| w.parse::<usize>().map_err(|_| config_err(format!("bad token id {w:?}"))))
                    .collect::<Result<Vec<_>>>()?;
                if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
                    return Err(config_err(format!("token id {bad} outside vocabulary of {vocab}")));
                }
                if tokens.len() <= cfg.training.seq_len {
                    return Err(config_err("token file is shorter than one training sequence"));
                }
                Ok(Corpus::Tokens { seed: cfg.seed, tokens })
            }
        }
    }

    /// Deterministic batch for a stream position.
    pub fn batch(&self, index: u64, rows: usize, seq: usize) -> Result<Batch> {
        match self {
            Corpus::Markov(m) => m.batch(index, rows, seq),
            Corpus::Tokens { seed, tokens } => {
                use rand::{Rng, SeedableRng};
                let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15));
                let seqs: Vec<Vec<usize>> = (0..rows)
                    .map(|_| {
                        let at = rng.random_range(0..tokens.len() - seq);
                        tokens[at..at + seq + 1].to_vec()
                    })
                    .collect();
                Batch::from_sequences(&seqs)
            }
        }
    }

    /// Prompts of 1 to 6 tokens taken from a batch far from the training
    /// stream.
    pub fn prompts(&self, count: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
        let len = max_len.clamp(1, 6);
        let b = self.batch(u64::MAX - 1, count.max(1), len)?;
        Ok((0..count).map(|r| b.inputs[r * len..r * len + 1 + r % len].to_vec()).collect())
    }
}
