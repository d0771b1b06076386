//! Training loop for every routing strategy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Batch, Split, SyntheticTask, TaskSource};
use crate::error::{config_err, Error, Result};
use crate::graph::Graph;
use crate::model::{Model, ModelConfig};
use crate::moe::balance_loss;
use crate::optim::{adamw_step, OptimizerConfig};
use crate::schedule::{schedule, GranularityEvent, Routing, StrategyConfig, StrategyKind};

/// Independent random streams derived from one run seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Scheduler = 2,
}

/// Generator for `stream` under `seed`. Changing how many values one consumer
/// draws never shifts the others.
pub fn sub_stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Training-data generator for a run: keyed by the task's train seed, on a
/// stream selected by the run seed.
pub fn train_data_rng(task: &SyntheticTask, seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(task.train_seed);
    rng.set_stream(seed);
    rng
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub strategy: StrategyConfig,
    /// `total_steps = 0` means "derive from `tokens_total`"; warmup is then
    /// capped at the derived step count.
    pub optimizer: OptimizerConfig,
    pub tokens_total: u64,
    /// Sequences per forward pass.
    pub micro_batch_size: usize,
    /// Sequences per optimizer step.
    pub global_batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
    pub balance_coeff: f32,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: StrategyConfig::default(),
            optimizer: OptimizerConfig::default(),
            tokens_total: 100_000,
            micro_batch_size: 8,
            global_batch_size: 16,
            seq_len: 32,
            seed: 0,
            balance_coeff: 0.01,
            grad_clip: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn tokens_per_step(&self) -> u64 {
        (self.global_batch_size * self.seq_len) as u64
    }

    pub fn num_steps(&self) -> u64 {
        self.tokens_total / self.tokens_per_step().max(1)
    }

    pub fn micro_batches(&self) -> usize {
        self.global_batch_size / self.micro_batch_size.max(1)
    }

    /// Optimizer settings with the step count filled in.
    pub fn resolved_optimizer(&self) -> OptimizerConfig {
        let mut o = self.optimizer.clone();
        if o.total_steps == 0 {
            o.total_steps = self.num_steps();
            o.warmup_steps = o.warmup_steps.min(o.total_steps);
        }
        o
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.strategy.validate(model.num_experts)?;
        if self.micro_batch_size == 0 || self.global_batch_size == 0 {
            return Err(config_err("batch sizes must be positive"));
        }
        if self.global_batch_size % self.micro_batch_size != 0 {
            return Err(config_err(format!(
                "global_batch_size {} is not divisible by micro_batch_size {}",
                self.global_batch_size, self.micro_batch_size
            )));
        }
        if self.seq_len == 0 || self.seq_len > model.max_seq_len {
            return Err(config_err(format!(
                "seq_len {} must be in 1..={}",
                self.seq_len, model.max_seq_len
            )));
        }
        if self.num_steps() == 0 {
            return Err(config_err(format!(
                "tokens_total {} is less than one step ({} tokens)",
                self.tokens_total,
                self.tokens_per_step()
            )));
        }
        if !(self.balance_coeff >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(config_err("balance_coeff and grad_clip must be non-negative"));
        }
        self.resolved_optimizer().validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    /// 1-based optimizer step.
    pub step: u64,
    /// Mean next-token cross-entropy over the global batch (balance term excluded).
    pub loss: f64,
    /// Mean experts per token at each layer, one row per micro-batch.
    pub per_layer_k: Vec<Vec<f64>>,
    pub mean_k: f64,
    pub tokens: u64,
    pub lr: f32,
    /// Gradient norm before clipping.
    pub grad_norm: f64,
}

/// One optimizer step over `batch`, which must hold exactly
/// `global_batch_size` sequences. `step` is the 1-based step index.
pub fn train_step(
    model: &mut Model,
    batch: &Batch,
    config: &TrainConfig,
    optimizer: &OptimizerConfig,
    scheduler_rng: &mut ChaCha8Rng,
    step: u64,
) -> Result<StepReport> {
    if batch.num_sequences() != config.global_batch_size || batch.seq_len != config.seq_len {
        return Err(Error::Shape {
            op: "train_step",
            lhs: vec![batch.num_sequences(), batch.seq_len],
            rhs: vec![config.global_batch_size, config.seq_len],
        });
    }
    let strategy = &config.strategy;
    let layers = model.num_layers();
    let micro = config.micro_batches();
    let scale = 1.0 / micro as f32;
    model.params.zero_grad();

    let step_routing = match strategy.kind {
        StrategyKind::FixedTopk | StrategyKind::TopP | StrategyKind::MmoeGlobalBatch => {
            Some(schedule(strategy, layers, GranularityEvent::OptimizerStep, scheduler_rng)?)
        }
        _ => None,
    };
    let mut loss_sum = 0.0;
    let mut per_layer_k = Vec::with_capacity(micro);
    for m in 0..micro {
        let routing: Routing = match &step_routing {
            Some(r) => r.clone(),
            None => schedule(strategy, layers, strategy.kind.resample_event(), scheduler_rng)?,
        };
        let mb = batch.slice(m * config.micro_batch_size, (m + 1) * config.micro_batch_size);
        let mut g = Graph::new();
        let pass = model.forward(&mut g, &mb.inputs, mb.seq_len, &routing)?;
        let ce = g.cross_entropy(pass.logits, &mb.targets)?;
        let ce_value = g.value(ce).data()[0] as f64;
        if !ce_value.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss: ce_value });
        }
        loss_sum += ce_value;
        let mut total = ce;
        if config.balance_coeff > 0.0 {
            for layer in &pass.layers {
                let b = balance_loss(&mut g, layer.scores, &layer.selection, config.balance_coeff as f64)?;
                total = g.add(total, b)?;
            }
        }
        let total = g.scale(total, scale)?;
        g.backward_into(total, &mut model.params)?;
        per_layer_k.push(pass.layers.iter().map(|l| l.selection.mean_k()).collect::<Vec<_>>());
    }
    let grad_norm = model.params.clip_grad_norm(config.grad_clip as f64);
    if !grad_norm.is_finite() {
        return Err(Error::NonFiniteLoss { step, loss: grad_norm });
    }
    let lr = adamw_step(&mut model.params, optimizer, step);
    let mean_k = per_layer_k.iter().flatten().sum::<f64>() / (micro * layers) as f64;
    Ok(StepReport {
        step,
        loss: loss_sum / micro as f64,
        per_layer_k,
        mean_k,
        tokens: batch.num_tokens() as u64,
        lr,
        grad_norm,
    })
}

/// Owns a model, its optimizer state and the run's random streams.
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: OptimizerConfig,
    pub step: u64,
    pub tokens_seen: u64,
    data: TaskSource,
    scheduler_rng: ChaCha8Rng,
}

impl Trainer {
    /// Fresh model initialized from the run seed.
    pub fn new(model_config: &ModelConfig, config: &TrainConfig, task: &SyntheticTask) -> Result<Self> {
        let model = Model::build(model_config, &mut sub_stream(config.seed, Stream::Init))?;
        Self::from_model(model, config, task)
    }

    /// Continues training an existing model under `config`.
    pub fn from_model(model: Model, config: &TrainConfig, task: &SyntheticTask) -> Result<Self> {
        config.validate(&model.config)?;
        if task.vocab_size() > model.config.vocab_size {
            return Err(config_err(format!(
                "task needs {} tokens but the model vocabulary has {}",
                task.vocab_size(),
                model.config.vocab_size
            )));
        }
        Ok(Trainer {
            optimizer: config.resolved_optimizer(),
            data: TaskSource::new(task, train_data_rng(task, config.seed), Split::Train)?,
            scheduler_rng: sub_stream(config.seed, Stream::Scheduler),
            config: config.clone(),
            model,
            step: 0,
            tokens_seen: 0,
        })
    }

    pub fn next_batch(&mut self) -> Batch {
        let n = self.config.global_batch_size * (self.config.seq_len + 1);
        Batch::from_stream(&self.data.take(n), self.config.seq_len)
    }

    pub fn train_step(&mut self) -> Result<StepReport> {
        let batch = self.next_batch();
        let report = train_step(
            &mut self.model,
            &batch,
            &self.config,
            &self.optimizer,
            &mut self.scheduler_rng,
            self.step + 1,
        )?;
        self.step += 1;
        self.tokens_seen += report.tokens;
        Ok(report)
    }

    /// Trains until the token budget is spent, calling `on_step` after each step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepReport, &Model) -> Result<()>) -> Result<()> {
        while self.step < self.config.num_steps() {
            let report = self.train_step()?;
            on_step(&report, &self.model)?;
        }
        Ok(())
    }
}
