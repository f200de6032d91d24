//! Joint objective, training loop, checkpoints and resumption.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{PrepareOptions, PreparedExample, Vocab};
use crate::error::{Error, Result};
use crate::model::{CheckpointMeta, LossParts, TransitionModel};
use crate::numerics::checkpoint::read_tensors;
use crate::numerics::{clip_global_norm, AdamW, AdamWConfig, Ctx, Graph, LrSchedule, Tensor, Var};

pub const COMPONENT_NAMES: [&str; 4] = ["l_gen", "l_sem", "l_str", "l_emo"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weights of generation, keyword, strategy and emotion losses.
    pub gamma: [f64; 4],
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub max_steps: u64,
    pub seed: u64,
    pub window_w: usize,
    pub keywords_k: usize,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    pub clip_norm: f64,
    /// Write a checkpoint every this many steps (0 disables).
    pub checkpoint_every: u64,
    /// Dev evaluation interval in steps (0 disables early stopping).
    pub eval_every: u64,
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: [1.0, 0.2, 1.0, 1.0],
            batch_size: 20,
            base_lr: 2e-5,
            warmup_steps: 120,
            max_steps: 1000,
            seed: 0,
            window_w: 2,
            keywords_k: 5,
            weight_decay: 0.0,
            schedule: LrSchedule::Constant,
            clip_norm: 1.0,
            checkpoint_every: 100,
            eval_every: 100,
            patience: 3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.window_w == 0 {
            return Err(Error::config("window_w must be positive"));
        }
        if self.gamma.iter().any(|g| !g.is_finite() || *g < 0.0) {
            return Err(Error::config("gamma weights must be finite and non-negative"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::config("clip_norm must be positive"));
        }
        self.optimizer().validate()
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            schedule: self.schedule,
            total_steps: self.max_steps,
            ..AdamWConfig::default()
        }
    }

    pub fn prepare_options(&self, max_context_len: usize, max_target_len: usize) -> PrepareOptions {
        PrepareOptions {
            window: self.window_w,
            keywords_k: self.keywords_k,
            max_context_len,
            max_target_len,
        }
    }
}

/// Scalar loss values of one step or evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub generation: f64,
    pub semantics: f64,
    pub strategy: f64,
    pub emotion: f64,
}

impl LossComponents {
    pub fn as_array(&self) -> [f64; 4] {
        [self.generation, self.semantics, self.strategy, self.emotion]
    }

    /// `γ1 L_gen + γ2 L_sem + γ3 L_str + γ4 L_emo`.
    pub fn total(&self, gamma: &[f64; 4]) -> Result<f64> {
        let parts = self.as_array();
        check_finite(&parts)?;
        Ok(gamma[0] * parts[0] + gamma[1] * parts[1] + gamma[2] * parts[2] + gamma[3] * parts[3])
    }
}

fn check_finite(parts: &[f64; 4]) -> Result<()> {
    match parts.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::Training(format!("{} is not finite ({})", COMPONENT_NAMES[i], parts[i]))),
        None => Ok(()),
    }
}

/// Weighted sum of the four loss terms as a differentiable scalar.
pub fn total_loss<'a>(parts: &LossParts<'a>, gamma: &[f64; 4]) -> Result<Var<'a>> {
    let vars = [parts.generation, parts.semantics, parts.strategy, parts.emotion];
    check_finite(&vars.map(|v| v.item()))?;
    let mut total = vars[0].scale(gamma[0]);
    for i in 1..4 {
        total = total.add(vars[i].scale(gamma[i]))?;
    }
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossComponents,
    pub total: f64,
    pub lr: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "step,l_gen,l_sem,l_str,l_emo,total,lr";

    pub fn csv_row(&self) -> String {
        let l = &self.losses;
        format!(
            "{},{},{},{},{},{},{}",
            self.step, l.generation, l.semantics, l.strategy, l.emotion, self.total, self.lr
        )
    }
}

/// Mean losses of the examples, teacher-forced with the gold strategy.
pub fn evaluate_losses(model: &TransitionModel, examples: &[PreparedExample]) -> Result<LossComponents> {
    if examples.is_empty() {
        return Err(Error::contract("evaluation over zero examples"));
    }
    let mut sum = [0.0; 4];
    for ex in examples {
        let graph = Graph::new();
        let cx = model.ctx(&graph);
        let (_, p) = model.losses(&cx, ex)?;
        for (s, v) in sum.iter_mut().zip([p.generation, p.semantics, p.strategy, p.emotion]) {
            *s += v.item();
        }
    }
    let n = examples.len() as f64;
    Ok(LossComponents {
        generation: sum[0] / n,
        semantics: sum[1] / n,
        strategy: sum[2] / n,
        emotion: sum[3] / n,
    })
}

/// Position of the trainer, stored in checkpoint sidecars.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub config: TrainConfig,
    pub step: u64,
    pub epoch: u64,
    pub cursor: usize,
    pub best_dev: Option<f64>,
    pub bad_evals: usize,
}

pub struct Trainer {
    pub model: TransitionModel,
    pub optimizer: AdamW,
    pub state: TrainerState,
    order: Vec<usize>,
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Directory for `last.ckpt` and `best.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    /// Loss trace CSV; appended to when it already exists.
    pub trace_path: Option<PathBuf>,
    pub vocab: Option<Vocab>,
    pub prepare: Option<PrepareOptions>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: u64,
    pub stopped_early: bool,
    pub best_dev: Option<f64>,
    pub trace: Vec<StepRecord>,
}

impl Trainer {
    pub fn new(mut model: TransitionModel, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        model.params.round_to_f32();
        let optimizer = AdamW::new(config.optimizer(), &model.params)?;
        Ok(Trainer {
            model,
            optimizer,
            state: TrainerState {
                config,
                step: 0,
                epoch: 0,
                cursor: 0,
                best_dev: None,
                bad_evals: 0,
            },
            order: Vec::new(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.state.config
    }

    /// One optimizer update on `batch`; components are averaged over the batch.
    pub fn step(&mut self, batch: &[&PreparedExample]) -> Result<StepRecord> {
        if batch.is_empty() {
            return Err(Error::contract("empty batch"));
        }
        let cfg = &self.state.config;
        let (losses, total, mut grads) = {
            let graph = Graph::new();
            let step_seed = cfg.seed ^ (self.state.step + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
            let cx = Ctx::new(&graph, &self.model.params).with_dropout(self.model.config.dropout, step_seed);
            let mut sums: Option<[Var; 4]> = None;
            for ex in batch {
                let (_, p) = self.model.losses(&cx, ex)?;
                let v = [p.generation, p.semantics, p.strategy, p.emotion];
                sums = Some(match sums {
                    None => v,
                    Some(s) => [s[0].add(v[0])?, s[1].add(v[1])?, s[2].add(v[2])?, s[3].add(v[3])?],
                });
            }
            let inv = 1.0 / batch.len() as f64;
            let s = sums.expect("non-empty batch").map(|v| v.scale(inv));
            let parts = LossParts {
                generation: s[0],
                semantics: s[1],
                strategy: s[2],
                emotion: s[3],
            };
            let total = total_loss(&parts, &cfg.gamma)?;
            graph.backward(total)?;
            let losses = LossComponents {
                generation: s[0].item(),
                semantics: s[1].item(),
                strategy: s[2].item(),
                emotion: s[3].item(),
            };
            (losses, total.item(), graph.param_grads())
        };
        clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = self.optimizer.step(&mut self.model.params, &grads)?;
        // keep the in-memory state equal to what a checkpoint can hold
        self.model.params.round_to_f32();
        self.optimizer.round_to_f32();
        self.state.step += 1;
        Ok(StepRecord {
            step: self.state.step,
            losses,
            total,
            lr,
        })
    }

    /// Indices of the next batch; the order is reshuffled every epoch from `(seed, epoch)`.
    pub fn next_batch(&mut self, n: usize) -> Vec<usize> {
        if self.state.cursor >= n {
            self.state.epoch += 1;
            self.state.cursor = 0;
            self.order.clear();
        }
        if self.order.len() != n {
            self.order = epoch_order(n, self.state.config.seed, self.state.epoch);
        }
        let end = (self.state.cursor + self.state.config.batch_size).min(n);
        let batch = self.order[self.state.cursor..end].to_vec();
        self.state.cursor = end;
        batch
    }

    /// Trains until `max_steps` or until the dev loss stops improving.
    pub fn run(
        &mut self,
        train: &[PreparedExample],
        dev: Option<&[PreparedExample]>,
        opts: &RunOptions,
    ) -> Result<TrainSummary> {
        if train.is_empty() {
            return Err(Error::contract("training set is empty"));
        }
        let mut trace_file = match &opts.trace_path {
            Some(p) => Some(open_trace(p)?),
            None => None,
        };
        let mut trace = Vec::new();
        let mut stopped_early = false;
        while self.state.step < self.state.config.max_steps {
            let idx = self.next_batch(train.len());
            let batch: Vec<&PreparedExample> = idx.iter().map(|&i| &train[i]).collect();
            let rec = self.step(&batch)?;
            log::debug!("step {} total {:.4} lr {:.3e}", rec.step, rec.total, rec.lr);
            if let Some(f) = trace_file.as_mut() {
                writeln!(f, "{}", rec.csv_row())?;
            }
            trace.push(rec);

            let cfg = &self.state.config;
            let step = self.state.step;
            if let (Some(dir), true) = (&opts.checkpoint_dir, cfg.checkpoint_every > 0 && step.is_multiple_of(cfg.checkpoint_every)) {
                self.save_checkpoint(&dir.join("last.ckpt"), opts)?;
            }
            if let (Some(dev), true) = (dev, cfg.eval_every > 0 && step.is_multiple_of(cfg.eval_every)) {
                if !dev.is_empty() {
                    let loss = evaluate_losses(&self.model, dev)?.total(&cfg.gamma)?;
                    log::info!("step {step}: dev loss {loss:.4}");
                    if self.state.best_dev.is_none_or(|b| loss < b) {
                        self.state.best_dev = Some(loss);
                        self.state.bad_evals = 0;
                        if let Some(dir) = &opts.checkpoint_dir {
                            self.save_checkpoint(&dir.join("best.ckpt"), opts)?;
                        }
                    } else {
                        self.state.bad_evals += 1;
                        if self.state.bad_evals >= self.state.config.patience {
                            log::info!("early stop at step {step}");
                            stopped_early = true;
                            break;
                        }
                    }
                }
            }
        }
        if let Some(dir) = &opts.checkpoint_dir {
            self.save_checkpoint(&dir.join("last.ckpt"), opts)?;
        }
        Ok(TrainSummary {
            steps: self.state.step,
            stopped_early,
            best_dev: self.state.best_dev,
            trace,
        })
    }

    /// Parameters, optimizer moments and trainer position.
    pub fn save_checkpoint(&self, path: &Path, opts: &RunOptions) -> Result<()> {
        let names: Vec<String> = self.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        let mut extra: Vec<(String, &Tensor)> = Vec::new();
        for (i, name) in names.iter().enumerate() {
            extra.push((format!("optim.m.{name}"), &self.optimizer.first_moment[i]));
            extra.push((format!("optim.v.{name}"), &self.optimizer.second_moment[i]));
        }
        let meta = CheckpointMeta {
            model: self.model.config.clone(),
            vocab: opts.vocab.clone(),
            prepare: opts.prepare.clone(),
            training: Some(serde_json::to_value(&self.state)?),
        };
        self.model.save_with(path, &meta, &extra)
    }

    /// Restores a trainer written by [`save_checkpoint`](Self::save_checkpoint).
    /// `max_steps` may be raised through `config`.
    pub fn resume(path: &Path, config: Option<TrainConfig>) -> Result<(Self, CheckpointMeta)> {
        let (model, meta) = TransitionModel::load(path)?;
        let state: TrainerState = match &meta.training {
            Some(v) => serde_json::from_value(v.clone())?,
            None => return Err(Error::Checkpoint(format!("{} holds no trainer state", path.display()))),
        };
        let config = config.unwrap_or_else(|| state.config.clone());
        let mut trainer = Trainer::new(model, config.clone())?;
        trainer.state = TrainerState { config, ..state };
        let tensors = read_tensors(path)?;
        let find = |name: String| {
            tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing optimizer tensor {name}")))
        };
        let names: Vec<String> = trainer.model.params.iter().map(|(_, n, _)| n.to_string()).collect();
        for (i, name) in names.iter().enumerate() {
            trainer.optimizer.first_moment[i] = find(format!("optim.m.{name}"))?;
            trainer.optimizer.second_moment[i] = find(format!("optim.v.{name}"))?;
        }
        trainer.optimizer.step_count = trainer.state.step;
        Ok((trainer, meta))
    }
}

pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn open_trace(path: &Path) -> Result<std::fs::File> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{}", StepRecord::CSV_HEADER)?;
    }
    Ok(f)
}
