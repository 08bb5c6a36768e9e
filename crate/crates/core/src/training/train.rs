use std::collections::VecDeque;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use super::checkpoint::{Checkpoint, CheckpointError};
use super::loss::{bce_loss, mse_loss};
use super::optim::{sgd_momentum_step, OptimizerConfig, PlateauScheduler};
use crate::data::{make_batches, Batch, BatchSpec, DataError, Generator, SequenceRecord};
use crate::model::{Model, OutputNonlinearity};
use crate::tensor::{Graph, Tensor, Var};
use crate::TensorError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite values at step {step} (lr {lr}, loss {loss}): {detail}")]
    NonFinite {
        step: u64,
        lr: f64,
        loss: f64,
        detail: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
}

/// Pixel loss matching the output nonlinearity: BCE for sigmoid, MSE for tanh.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Bce,
    Mse,
}

impl LossKind {
    pub fn for_output(output: OutputNonlinearity) -> Self {
        match output {
            OutputNonlinearity::Sigmoid => LossKind::Bce,
            OutputNonlinearity::Tanh => LossKind::Mse,
        }
    }

    fn node(self, graph: &mut Graph<f32>, pred: Var, target: &Tensor<f32>) -> crate::Result<Var> {
        match self {
            LossKind::Bce => graph.bce_mean(pred, target),
            LossKind::Mse => graph.mse_mean(pred, target),
        }
    }

    /// Mean per-pixel loss on plain tensors.
    pub fn value(self, pred: &Tensor<f32>, target: &Tensor<f32>) -> crate::Result<f64> {
        match self {
            LossKind::Bce => Ok(bce_loss(pred, target)?.mean),
            LossKind::Mse => mse_loss(pred, target),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub seed: u64,
    /// Steps between validations; 0 disables validation.
    pub validate_every: u64,
    pub optimizer: OptimizerConfig,
    /// Where `best.tspr` and `last.tspr` go.
    pub checkpoint_dir: Option<PathBuf>,
    pub time_budget: Option<Duration>,
    /// Recent training batches used to re-estimate batch-norm statistics
    /// before each validation and at the end; 0 keeps the running averages.
    pub refit_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            seed: 0,
            validate_every: 500,
            optimizer: OptimizerConfig::default(),
            checkpoint_dir: None,
            time_budget: None,
            refit_batches: 8,
        }
    }
}

/// Training batches: a fixed set reshuffled per epoch, or fresh sequences.
pub enum TrainSource<'a> {
    Fixed(&'a [SequenceRecord]),
    Generated(&'a Generator),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub learning_rate: f64,
    pub validation: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Steps,
    TimeBudget,
    Monitor,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub stopped: StopReason,
}

/// Model plus optimizer state.
pub struct Trainer {
    pub checkpoint: Checkpoint,
    pub scheduler: PlateauScheduler,
    pub loss: LossKind,
}

impl Trainer {
    pub fn new(model: Model<f32>, optimizer: OptimizerConfig) -> Self {
        Self::resume(Checkpoint::fresh(model, optimizer))
    }

    pub fn resume(checkpoint: Checkpoint) -> Self {
        let s = &checkpoint.state;
        let scheduler = PlateauScheduler {
            learning_rate: s.learning_rate,
            best: s.best_validation,
            stale: s.stale_validations,
        };
        let loss = LossKind::for_output(checkpoint.model.config.output);
        Self {
            checkpoint,
            scheduler,
            loss,
        }
    }

    pub fn model(&self) -> &Model<f32> {
        &self.checkpoint.model
    }

    pub fn step(&self) -> u64 {
        self.checkpoint.state.step
    }

    pub fn batch_spec(&self, batch_size: usize) -> BatchSpec {
        let c = &self.checkpoint.model.config;
        BatchSpec {
            input_frames: c.input_frames,
            predict_frames: c.predict_frames,
            batch_size,
            range: c.output.range(),
        }
    }

    fn sync_state(&mut self) {
        let s = &mut self.checkpoint.state;
        s.learning_rate = self.scheduler.learning_rate;
        s.best_validation = self.scheduler.best;
        s.stale_validations = self.scheduler.stale;
    }

    /// Loss and parameter gradients of one batch, without updating anything
    /// but the batch-norm running statistics.
    pub fn loss_and_gradients(
        &mut self,
        batch: &Batch,
        seed: u64,
    ) -> Result<(f64, Vec<Tensor<f32>>), TrainError> {
        let kind = self.loss;
        let k = batch.targets.len();
        let mut fwd = self.checkpoint.model.train_forward(seed);
        let outputs = fwd.predict_sequence(&batch.inputs, k)?;
        let mut total = None;
        for (&out, target) in outputs.iter().zip(&batch.targets) {
            let l = kind.node(&mut fwd.graph, out, target)?;
            total = Some(match total {
                None => l,
                Some(t) => fwd.graph.add(t, l)?,
            });
        }
        let total = total.ok_or_else(|| TrainError::Config("nothing to predict".into()))?;
        let loss = fwd.graph.scale(total, 1.0 / k as f32);
        let value = fwd.graph.value(loss).data()[0] as f64;
        let grads = fwd.gradients(loss)?;
        Ok((value, grads))
    }

    /// One optimization step on `batch`; returns the pre-update loss.
    pub fn train_step(&mut self, batch: &Batch, seed: u64) -> Result<f64, TrainError> {
        let step = self.step();
        let dropout_seed = seed ^ (step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let (loss, grads) = self.loss_and_gradients(batch, dropout_seed)?;
        let bad: Vec<&str> = self
            .checkpoint
            .model
            .params
            .iter()
            .zip(&grads)
            .filter(|(_, g)| !g.is_finite())
            .map(|(p, _)| p.name.as_str())
            .collect();
        if !loss.is_finite() || !bad.is_empty() {
            return Err(TrainError::NonFinite {
                step,
                lr: self.scheduler.learning_rate,
                loss,
                detail: if bad.is_empty() {
                    "loss".into()
                } else {
                    format!("gradients of {}", bad.join(", "))
                },
            });
        }
        let c = &mut self.checkpoint;
        sgd_momentum_step(
            &mut c.model.params,
            &grads,
            &mut c.velocities,
            self.scheduler.learning_rate,
            &c.state.optimizer,
        )?;
        c.state.step += 1;
        Ok(loss)
    }

    /// Replaces the batch-norm running statistics by their average over
    /// `batches` of input frames.
    pub fn refit_batch_norm(&mut self, batches: &[Vec<Tensor<f32>>]) -> Result<(), TrainError> {
        Ok(self.checkpoint.model.refit_batch_norm(batches)?)
    }

    /// Mean per-pixel loss over `records` in eval mode.
    pub fn validate(&self, records: &[SequenceRecord], batch_size: usize) -> Result<f64, TrainError> {
        validation_loss(&self.checkpoint.model, records, batch_size, self.loss)
    }
}

/// Mean per-pixel eval-mode loss over `records`.
pub fn validation_loss(
    model: &Model<f32>,
    records: &[SequenceRecord],
    batch_size: usize,
    kind: LossKind,
) -> Result<f64, TrainError> {
    let c = &model.config;
    let spec = BatchSpec {
        input_frames: c.input_frames,
        predict_frames: c.predict_frames,
        batch_size,
        range: c.output.range(),
    };
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in records.chunks(batch_size.max(1)) {
        let refs: Vec<&SequenceRecord> = chunk.iter().collect();
        let batch = spec.assemble(&refs)?;
        let out = model.predict(&batch.inputs, c.predict_frames)?;
        for (p, t) in out.iter().zip(&batch.targets) {
            total += kind.value(p, t)? * p.len() as f64;
            count += p.len();
        }
    }
    Ok(total / count.max(1) as f64)
}

/// Runs the training loop. `monitor` sees every log entry and may stop the
/// run by returning `false`.
pub fn train(
    trainer: &mut Trainer,
    source: TrainSource<'_>,
    validation: &[SequenceRecord],
    config: &TrainConfig,
    mut monitor: impl FnMut(&Trainer, &LogEntry) -> bool,
) -> Result<TrainLog, TrainError> {
    config.optimizer.validate().map_err(TrainError::Config)?;
    let spec = trainer.batch_spec(config.batch_size);
    let start = Instant::now();
    let mut entries = Vec::new();
    let mut stopped = StopReason::Steps;
    let save = |trainer: &Trainer, name: &str| -> Result<(), TrainError> {
        if let Some(dir) = &config.checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| CheckpointError::Io {
                path: dir.display().to_string(),
                source: e,
            })?;
            trainer.checkpoint.save(&dir.join(name))?;
        }
        Ok(())
    };

    let mut epoch = 0u64;
    let mut pending: Vec<Batch> = Vec::new();
    let mut recent: VecDeque<Vec<Tensor<f32>>> = VecDeque::with_capacity(config.refit_batches);
    let refit = |trainer: &mut Trainer, recent: &VecDeque<Vec<Tensor<f32>>>| -> Result<(), TrainError> {
        if recent.is_empty() {
            return Ok(());
        }
        trainer.refit_batch_norm(&recent.iter().cloned().collect::<Vec<_>>())
    };
    for _ in 0..config.steps {
        if config.time_budget.is_some_and(|b| start.elapsed() >= b) {
            stopped = StopReason::TimeBudget;
            break;
        }
        let batch = match source {
            TrainSource::Fixed(records) => {
                if pending.is_empty() {
                    pending = make_batches(records, spec, config.seed, epoch)?.collect();
                    pending.reverse();
                    epoch += 1;
                }
                pending.pop().expect("an epoch has at least one batch")
            }
            TrainSource::Generated(generator) => {
                let first = trainer.step() * config.batch_size as u64;
                let records = generator.generate_range(first, config.batch_size);
                let refs: Vec<&SequenceRecord> = records.iter().collect();
                spec.assemble(&refs)?
            }
        };
        let result = trainer.train_step(&batch, config.seed);
        let loss = match result {
            Ok(l) => l,
            Err(e @ TrainError::NonFinite { .. }) => {
                save(trainer, "nonfinite.tspr")?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if config.refit_batches > 0 {
            if recent.len() == config.refit_batches {
                recent.pop_front();
            }
            recent.push_back(batch.inputs);
        }
        let step = trainer.step();
        let mut val = None;
        if config.validate_every > 0 && step.is_multiple_of(config.validate_every) && !validation.is_empty() {
            refit(trainer, &recent)?;
            let v = trainer.validate(validation, config.batch_size)?;
            let improved = trainer.scheduler.best.is_none_or(|b| v < b);
            trainer.scheduler.observe(v, &config.optimizer);
            trainer.sync_state();
            if improved {
                save(trainer, "best.tspr")?;
            }
            val = Some(v);
        }
        let entry = LogEntry {
            step,
            loss,
            learning_rate: trainer.scheduler.learning_rate,
            validation: val,
            seconds: start.elapsed().as_secs_f64(),
        };
        let keep_going = monitor(trainer, &entry);
        entries.push(entry);
        if !keep_going {
            stopped = StopReason::Monitor;
            break;
        }
    }
    refit(trainer, &recent)?;
    trainer.sync_state();
    save(trainer, "last.tspr")?;
    Ok(TrainLog { entries, stopped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::GeneratorConfig;
    use crate::model::ModelConfig;

    fn tiny_generator() -> Generator {
        let sprite = crate::data::Sprite::new(4, 4, vec![255; 16]);
        let config = GeneratorConfig {
            canvas: 8,
            frames: 5,
            sprites_per_sequence: 1,
            speed: (0.5, 1.0),
            seed: 2,
            source: crate::data::SpriteSource::BuiltinShapes,
        };
        Generator::with_sprites(config, vec![sprite]).unwrap()
    }

    fn tiny_data(n: usize) -> Vec<SequenceRecord> {
        tiny_generator().generate_range(0, n)
    }

    fn config(steps: u64) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            seed: 9,
            validate_every: 5,
            optimizer: OptimizerConfig {
                learning_rate: 0.5,
                ..Default::default()
            },
            checkpoint_dir: None,
            time_budget: None,
            refit_batches: 2,
        }
    }

    #[test]
    fn zero_budget_leaves_parameters_untouched() {
        let model = Model::<f32>::new(ModelConfig::miniature(), 1).unwrap();
        let before = model.params.clone();
        let mut t = Trainer::new(model, OptimizerConfig::default());
        let data = tiny_data(8);
        let log = train(&mut t, TrainSource::Fixed(&data), &data, &config(0), |_, _| true).unwrap();
        assert!(log.entries.is_empty());
        assert_eq!(t.model().params, before);
    }

    #[test]
    fn first_loss_reproduces() {
        let data = tiny_data(8);
        let run = || {
            let model = Model::<f32>::new(ModelConfig::miniature(), 1).unwrap();
            let mut t = Trainer::new(model, OptimizerConfig::default());
            train(&mut t, TrainSource::Fixed(&data), &[], &config(3), |_, _| true).unwrap()
        };
        let (a, b) = (run(), run());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!((x.loss - y.loss).abs() < 1e-7);
        }
    }

    #[test]
    fn loss_drops_and_checkpoints_are_written() {
        let data = tiny_data(8);
        let dir = tempfile::tempdir().unwrap();
        let model = Model::<f32>::new(ModelConfig::miniature(), 1).unwrap();
        let mut t = Trainer::new(model, OptimizerConfig::default());
        let cfg = TrainConfig {
            steps: 60,
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..config(0)
        };
        let log = train(&mut t, TrainSource::Fixed(&data), &data, &cfg, |_, _| true).unwrap();
        assert_eq!(log.entries.len(), 60);
        let head: f64 = log.entries[..10].iter().map(|e| e.loss).sum();
        let tail: f64 = log.entries[50..].iter().map(|e| e.loss).sum();
        assert!(tail < head, "{head} -> {tail}");
        assert!(dir.path().join("best.tspr").exists());
        let last = Checkpoint::load(&dir.path().join("last.tspr")).unwrap();
        assert_eq!(last.state.step, 60);
        assert_eq!(last.model, *t.model());
    }

    #[test]
    fn monitor_can_stop_the_run() {
        let data = tiny_data(8);
        let model = Model::<f32>::new(ModelConfig::miniature(), 1).unwrap();
        let mut t = Trainer::new(model, OptimizerConfig::default());
        let log = train(&mut t, TrainSource::Fixed(&data), &[], &config(50), |_, e| {
            e.step < 4
        })
        .unwrap();
        assert_eq!(log.entries.len(), 4);
        assert_eq!(log.stopped, StopReason::Monitor);
    }

    #[test]
    fn divergence_aborts_with_diagnostic() {
        let data = tiny_data(8);
        let model = Model::<f32>::new(ModelConfig::miniature(), 1).unwrap();
        let mut t = Trainer::new(model, OptimizerConfig::default());
        t.checkpoint.model.params.at_mut(0).value.data_mut()[0] = f32::NAN;
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            checkpoint_dir: Some(dir.path().to_path_buf()),
            ..config(5)
        };
        let err = train(&mut t, TrainSource::Fixed(&data), &[], &cfg, |_, _| true).unwrap_err();
        assert!(matches!(err, TrainError::NonFinite { step: 0, .. }), "{err}");
        assert!(dir.path().join("nonfinite.tspr").exists());
    }

    #[test]
    fn generated_source_trains() {
        let g = tiny_generator();
        let model = Model::<f32>::new(ModelConfig::miniature(), 1).unwrap();
        let mut t = Trainer::new(model, OptimizerConfig::default());
        let log = train(&mut t, TrainSource::Generated(&g), &[], &config(3), |_, _| true).unwrap();
        assert_eq!(log.entries.len(), 3);
        assert!(log.entries.iter().all(|e| e.loss.is_finite()));
    }
}
