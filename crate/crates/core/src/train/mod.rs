//! Training runs: configuration, optimizer and the per-step loop that
//! drives pipeline iterations and writes metrics.

pub mod config;
pub mod optim;

use std::io::Write;

use serde::Serialize;

pub use config::{Corpus, DataSource, GenerateMode, RunConfig};
pub use optim::{Optimizer, OptimizerConfig};

use crate::error::{config_err, Error, Result};
use crate::model::EarlyExitModel;
use crate::pipeline::{plan_bubble_fill, run_iteration, Extra, FillPlan, IterationOptions, ModelProgram, StageProgram};
use crate::schedule::{simulate, ExitMode, Variant};

/// Offset separating the fill stream from the regular training stream.
const FILL_STREAM: u64 = 1 << 62;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsHeader {
    pub record: &'static str,
    pub stages: usize,
    pub microbatches: usize,
    pub exit_layers: Vec<usize>,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub record: &'static str,
    pub step: u64,
    /// Mean cross-entropy per exit in depth order, final exit last.
    pub loss: Vec<f64>,
    pub weights: Vec<f64>,
    pub weighted_loss: f64,
    /// Simulated iteration span in cost-model units.
    pub time: f64,
    pub peak_memory: Vec<f64>,
}

pub struct Trainer {
    cfg: RunConfig,
    model: EarlyExitModel,
    optimizer: Optimizer,
    corpus: Corpus,
    fill: Option<FillPlan>,
    span: f64,
    step: u64,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = EarlyExitModel::build(cfg.model.clone(), cfg.seed)?;
        let optimizer = Optimizer::new(cfg.training.optimizer.clone())?;
        let corpus = Corpus::open(&cfg)?;
        let p = cfg.parallelism.stages;
        let fill = if cfg.training.fill && p > 1 { Some(plan_bubble_fill(p, cfg.training.fill_ratio)?) } else { None };
        let mut t = Trainer { cfg, model, optimizer, corpus, fill, span: 0.0, step: 0 };
        t.span = t.simulated_span()?;
        Ok(t)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &EarlyExitModel {
        &self.model
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    fn mode(&self) -> ExitMode {
        if self.cfg.parallelism.defer_exit_forward {
            ExitMode::Deferred
        } else {
            ExitMode::Eager
        }
    }

    fn simulated_span(&self) -> Result<f64> {
        let prog = ModelProgram::new(&self.model, self.cfg.parallelism.stages)?;
        let sample = self.corpus.batch(0, self.cfg.parallelism.micro_batch, self.cfg.training.seq_len)?;
        let cost = prog.cost_model(self.cfg.microbatches(), &sample);
        let variant = match &self.fill {
            Some(plan) => Variant::with_fill(self.mode(), plan.clone()),
            None => Variant::new(self.mode()),
        };
        Ok(simulate(&cost, &variant)?.span)
    }

    pub fn header(&self) -> MetricsHeader {
        MetricsHeader {
            record: "header",
            stages: self.cfg.parallelism.stages,
            microbatches: self.cfg.microbatches(),
            exit_layers: self.cfg.model.exit_layers(),
            steps: self.cfg.training.steps,
        }
    }

    /// One optimizer step on the next global batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let par = &self.cfg.parallelism;
        let (m, seq) = (self.cfg.microbatches(), self.cfg.training.seq_len);
        let batch = self.corpus.batch(self.step, par.global_batch, seq)?;
        let micro = batch.split(m)?;
        let extra_batches = match &self.fill {
            Some(plan) => {
                let rows = par.micro_batch;
                let k = plan.k_part1.max(plan.k_part2);
                let pool = self.corpus.batch(FILL_STREAM + self.step, rows * 2 * k.max(1), seq)?.split(2 * k.max(1))?;
                let (a, b) = pool.split_at(k.max(1));
                (a[..plan.k_part1].to_vec(), b[..plan.k_part2].to_vec())
            }
            None => (Vec::new(), Vec::new()),
        };
        let mut opts = IterationOptions::new(self.cfg.weight_schedule()).deferred(par.defer_exit_forward);
        opts.step = self.step;
        if let Some(plan) = &self.fill {
            opts = opts.with_fill(plan.clone());
            opts.rescale_fill = self.cfg.training.rescale_fill;
        }
        let out = {
            let prog = ModelProgram::new(&self.model, par.stages)?;
            let extra = Extra { part1: &extra_batches.0, part2: &extra_batches.1 };
            run_iteration(&prog, &micro, &extra, &opts)?
        };
        if let Some(i) = out.report.per_exit_loss.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss(format!("exit {i} at step {}", self.step)));
        }
        self.optimizer.step(self.model.params_mut(), &out.grads)?;
        let metrics = StepMetrics {
            record: "step",
            step: self.step,
            loss: out.report.per_exit_loss.clone(),
            weights: out.report.weights.clone(),
            weighted_loss: out.report.weighted_loss,
            time: self.span,
            peak_memory: out.report.peak_memory.clone(),
        };
        self.step += 1;
        Ok(metrics)
    }

    /// Runs every configured step, writing one JSON record per line after
    /// a header record.
    pub fn run(&mut self, out: &mut dyn Write) -> Result<Vec<StepMetrics>> {
        write_record(out, &self.header())?;
        let mut all = Vec::with_capacity(self.cfg.training.steps as usize);
        while self.step < self.cfg.training.steps {
            let m = self.step()?;
            write_record(out, &m)?;
            all.push(m);
        }
        out.flush()?;
        Ok(all)
    }
}

/// Writes one JSON record followed by a newline.
pub fn write_record<T: Serialize>(out: &mut dyn Write, record: &T) -> Result<()> {
    let text = serde_json::to_string(record).map_err(|e| config_err(format!("record encoding: {e}")))?;
    writeln!(out, "{text}")?;
    Ok(())
}

/// Means of consecutive non-overlapping windows of `width` steps, per exit.
pub fn window_means(metrics: &[StepMetrics], width: usize) -> Vec<Vec<f64>> {
    let exits = metrics.first().map_or(0, |m| m.loss.len());
    (0..exits)
        .map(|e| metrics.chunks_exact(width).map(|c| c.iter().map(|m| m.loss[e]).sum::<f64>() / width as f64).collect())
        .collect()
}
