use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{adam_step, lr_at, tolerance_at, EvalRecord, OptimizerState, StepRecord, TrainConfig, TrainLog};
use crate::autodiff::nn::Mode;
use crate::autodiff::rng::{streams, SeededRng};
use crate::autodiff::tape::Tape;
use crate::autodiff::tensor::Tensor;
use crate::batching::{plan_epoch, Batch, EpochPlan};
use crate::data::Utterance;
use crate::error::{Error, Result};
use crate::model::checkpoint::Checkpoint;
use crate::model::{Ctx, LossWeights, Model};

/// Optional extra validation metric (the CLI plugs in validation CER).
pub type Validator<'v> = dyn Fn(&Model) -> Result<f64> + 'v;

/// Position of the loop and the early-stopping bookkeeping; everything besides
/// the model and optimizer that a resumed run needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    /// Updates applied so far.
    pub step: u64,
    pub epoch: u64,
    /// Next batch index within `epoch`'s plan.
    pub cursor: usize,
    pub best_val: Option<f64>,
    pub best_step: Option<u64>,
    pub last_val: Option<f64>,
    /// Consecutive validations whose loss rose.
    pub increases: usize,
}

impl LoopState {
    fn new() -> Self {
        LoopState {
            step: 0,
            epoch: 0,
            cursor: 0,
            best_val: None,
            best_step: None,
            last_val: None,
            increases: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Status {
    Finished,
    EarlyStopped { at: u64 },
    /// The loss at `step` exceeded the threshold or was not finite; no update was applied.
    Diverged { step: u64, reason: String },
}

/// What a finished loop hands back.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub status: Status,
    /// Best-validation model, or the last good model when nothing was validated.
    pub model: Model,
    pub best_step: Option<u64>,
    pub best_val: Option<f64>,
    pub steps: u64,
}

#[derive(Serialize, Deserialize)]
struct ResumeInfo {
    train: TrainConfig,
    state: LoopState,
}

/// One training run over fixed train/validation sets.
pub struct Trainer<'c> {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub state: LoopState,
    pub log: TrainLog,
    best: Option<Model>,
    train: Vec<&'c Utterance>,
    val: Vec<&'c Utterance>,
    plan: Option<(u64, EpochPlan)>,
    val_batches: Vec<Batch>,
}

fn val_batches(val: &[&Utterance], batch_size: usize) -> Result<Vec<Batch>> {
    if val.is_empty() {
        return Ok(Vec::new());
    }
    let langs: Vec<usize> = val.iter().map(|u| u.language).collect();
    let lens: Vec<usize> = val.iter().map(|u| u.duration()).collect();
    let mut present = langs.clone();
    present.sort_unstable();
    present.dedup();
    let slots = present.len();
    let min_count = present
        .iter()
        .map(|l| langs.iter().filter(|x| *x == l).count())
        .min()
        .expect("non-empty");
    let per_slot = (batch_size / slots).clamp(1, min_count);
    // A fixed stream: every validation sees the same batches.
    let mut rng = SeededRng::with_stream(0, streams::EVAL);
    let plan = plan_epoch(&langs, &lens, per_slot * slots, true, &mut rng)?;
    plan.batches
        .iter()
        .map(|idx| {
            let utts: Vec<&Utterance> = idx.iter().map(|&i| val[i]).collect();
            Batch::assemble(&utts, plan.slot_languages.len())
        })
        .collect()
}

impl<'c> Trainer<'c> {
    pub fn new(model: Model, config: TrainConfig, train: Vec<&'c Utterance>, val: Vec<&'c Utterance>) -> Result<Self> {
        config.validate()?;
        if train.is_empty() {
            return Err(Error::Contract("training split is empty".into()));
        }
        for u in train.iter().chain(&val) {
            if u.language >= model.config.languages || u.speaker >= model.config.speakers {
                return Err(Error::Lookup(format!(
                    "utterance {} (language {}, speaker {}) is outside the model's {} languages / {} speakers",
                    u.id, u.language, u.speaker, model.config.languages, model.config.speakers
                )));
            }
        }
        let optimizer = OptimizerState::new(&model.params);
        let val_batches = val_batches(&val, config.batch_size)?;
        Ok(Trainer {
            model,
            config,
            optimizer,
            state: LoopState::new(),
            log: TrainLog::default(),
            best: None,
            train,
            val,
            plan: None,
            val_batches,
        })
    }

    /// Continues a run from a checkpoint written by [`Trainer::checkpoint`].
    /// `best` is the best-validation model saved alongside it, if any.
    pub fn resume(ck: Checkpoint, best: Option<Model>, train: Vec<&'c Utterance>, val: Vec<&'c Utterance>) -> Result<Self> {
        let info: ResumeInfo = toml::from_str(&ck.extra).map_err(|e| Error::Parse {
            offset: 0,
            msg: format!("checkpoint has no readable training state: {e}"),
        })?;
        let mut t = Trainer::new(ck.model, info.train, train, val)?;
        let n = t.model.params.len();
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for i in 0..n {
            let name = t.model.params.name(i).to_string();
            let find = |prefix: &str| -> Result<Tensor> {
                let key = format!("{prefix}.{name}");
                ck.aux
                    .iter()
                    .find(|(k, _)| *k == key)
                    .map(|(_, x)| x.clone())
                    .ok_or_else(|| Error::Lookup(format!("checkpoint lacks optimizer buffer `{key}`")))
            };
            m.push(find("adam.m")?);
            v.push(find("adam.v")?);
        }
        let optimizer = OptimizerState {
            m,
            v,
            step: info.state.step,
        };
        if !optimizer.matches(&t.model.params) {
            return Err(Error::Contract("optimizer buffers do not match the parameter shapes".into()));
        }
        t.optimizer = optimizer;
        t.state = info.state;
        t.best = best;
        Ok(t)
    }

    /// Model, optimizer moments, config and loop state.
    pub fn checkpoint(&self) -> Checkpoint {
        let info = ResumeInfo {
            train: self.config.clone(),
            state: self.state.clone(),
        };
        let mut aux = Vec::with_capacity(2 * self.model.params.len());
        for (prefix, bufs) in [("adam.m", &self.optimizer.m), ("adam.v", &self.optimizer.v)] {
            for (i, t) in bufs.iter().enumerate() {
                aux.push((format!("{prefix}.{}", self.model.params.name(i)), t.clone()));
            }
        }
        Checkpoint {
            model: self.model.clone(),
            extra: toml::to_string(&info).expect("training state serializes"),
            aux,
        }
    }

    pub fn best_model(&self) -> Option<&Model> {
        self.best.as_ref()
    }

    fn next_batch(&mut self) -> Result<Batch> {
        loop {
            let epoch = self.state.epoch;
            if self.plan.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let langs: Vec<usize> = self.train.iter().map(|u| u.language).collect();
                let lens: Vec<usize> = self.train.iter().map(|u| u.duration()).collect();
                let mut rng = SeededRng::with_stream(self.config.seed, streams::EPOCH_BASE + epoch);
                let plan = plan_epoch(&langs, &lens, self.config.batch_size, self.config.bucket_by_length, &mut rng)?;
                if plan.batches.is_empty() {
                    return Err(Error::Contract(format!(
                        "the training split cannot fill one language-balanced batch of {}",
                        self.config.batch_size
                    )));
                }
                self.plan = Some((epoch, plan));
            }
            let (_, plan) = self.plan.as_ref().expect("plan just set");
            if self.state.cursor < plan.batches.len() {
                let utts: Vec<&Utterance> = plan.batches[self.state.cursor].iter().map(|&i| self.train[i]).collect();
                let batch = Batch::assemble(&utts, plan.slot_languages.len())?;
                self.state.cursor += 1;
                return Ok(batch);
            }
            self.state.epoch += 1;
            self.state.cursor = 0;
        }
    }

    fn loss_weights(&self, step: u64) -> LossWeights {
        LossWeights {
            guided: self.config.guided_weight,
            tolerance: tolerance_at(step, &self.config),
            classifier: self
                .model
                .config
                .has_classifier()
                .then(|| self.config.classifier_weight_for(self.model.variant())),
        }
    }

    /// Applies one update. On divergence nothing is modified and the error says why.
    pub fn step(&mut self) -> Result<StepRecord> {
        let started = Instant::now();
        let step = self.state.step;
        let (epoch, cursor) = (self.state.epoch, self.state.cursor);
        let batch = self.next_batch()?;
        let lr = lr_at(step, &self.config);
        let weights = self.loss_weights(step);
        let tape = Tape::new();
        let p = self.model.bind(&tape, true);
        let mut rng = SeededRng::with_stream(self.config.seed, streams::STEP_BASE + step);
        let mut ctx = Ctx::new(Mode::Train, &mut rng);
        let outcome = self.model.total_loss(&p, &batch, weights, &mut ctx);
        let (loss, parts) = match outcome {
            Ok(v) => v,
            Err(e) => {
                self.state.epoch = epoch;
                self.state.cursor = cursor;
                return Err(e);
            }
        };
        if !(parts.total <= self.config.divergence_threshold) {
            self.state.epoch = epoch;
            self.state.cursor = cursor;
            return Err(Error::NonFinite(format!(
                "training loss {} at step {step} exceeds the divergence threshold {}",
                parts.total, self.config.divergence_threshold
            )));
        }
        tape.backward(loss)?;
        let grads: Vec<Tensor> = p
            .iter()
            .zip(self.model.params.tensors())
            .map(|(v, t)| v.grad().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let updates = std::mem::take(&mut ctx.bn_updates);
        drop(p);
        let stats = match adam_step(&mut self.model.params, &grads, &mut self.optimizer, lr, &self.config.adam()) {
            Ok(s) => s,
            Err(e) => {
                self.state.epoch = epoch;
                self.state.cursor = cursor;
                return Err(e);
            }
        };
        self.model.apply_bn_updates(&updates);
        let c = &parts.components;
        let record = StepRecord {
            step,
            lr,
            tolerance: weights.tolerance,
            total: parts.total,
            frame: c["frame"],
            stop: c["stop"],
            guided: c["guided"],
            classifier: c.get("classifier").copied(),
            grad_norm: stats.grad_norm,
        };
        self.state.step += 1;
        self.log.push_step(record.clone(), started.elapsed().as_secs_f64() * 1e3);
        Ok(record)
    }

    /// Frame plus stop loss over the validation batches, in eval mode. The
    /// guided term (its tolerance moves with the schedule) and the classifier
    /// term (a regularizer) are left out.
    pub fn validation_loss(&self, model: &Model) -> Result<f64> {
        if self.val_batches.is_empty() {
            return Err(Error::Contract("validation split is empty".into()));
        }
        let mut total = 0.0;
        let mut rng = SeededRng::with_stream(self.config.seed, streams::EVAL);
        for batch in &self.val_batches {
            let tape = Tape::new();
            let p = model.bind(&tape, false);
            let mut ctx = Ctx::new(Mode::Eval, &mut rng);
            let w = LossWeights {
                guided: 0.0,
                tolerance: 1.0,
                classifier: None,
            };
            let (_, parts) = model.total_loss(&p, batch, w, &mut ctx)?;
            total += parts.components["frame"] + parts.components["stop"];
        }
        Ok(total / self.val_batches.len() as f64)
    }

    /// Runs a validation round and updates the early-stopping state. Returns
    /// true when patience is exhausted.
    pub fn validate(&mut self, cer: Option<&Validator>) -> Result<bool> {
        let val_loss = self.validation_loss(&self.model)?;
        let val_cer = match cer {
            Some(f) => Some(f(&self.model)?),
            None => None,
        };
        self.log.push_eval(EvalRecord {
            step: self.state.step,
            val_loss,
            val_cer,
        });
        let st = &mut self.state;
        if st.best_val.is_none_or(|b| val_loss < b) {
            st.best_val = Some(val_loss);
            st.best_step = Some(st.step);
            self.best = Some(self.model.clone());
        }
        match st.last_val {
            Some(last) if val_loss > last => st.increases += 1,
            _ => st.increases = 0,
        }
        st.last_val = Some(val_loss);
        Ok(st.increases >= self.config.early_stop_patience)
    }

    /// Trains until `config.steps`, early stopping or divergence.
    pub fn run(&mut self, cer: Option<&Validator>) -> Result<TrainOutcome> {
        self.run_until(self.config.steps, cer, &mut |_| {})
    }

    /// Like [`Trainer::run`] but stops once `limit` updates have been applied
    /// and reports every step to `on_step`.
    pub fn run_until(
        &mut self,
        limit: u64,
        cer: Option<&Validator>,
        on_step: &mut dyn FnMut(&StepRecord),
    ) -> Result<TrainOutcome> {
        let limit = limit.min(self.config.steps);
        let validate = !self.val.is_empty();
        let mut status = Status::Finished;
        while self.state.step < limit {
            match self.step() {
                Ok(r) => on_step(&r),
                Err(Error::NonFinite(reason)) => {
                    status = Status::Diverged {
                        step: self.state.step,
                        reason,
                    };
                    break;
                }
                Err(e) => return Err(e),
            }
            if validate && self.state.step.is_multiple_of(self.config.validate_every) && self.validate(cer)? {
                status = Status::EarlyStopped { at: self.state.step };
                break;
            }
        }
        Ok(TrainOutcome {
            status,
            model: self.best.clone().unwrap_or_else(|| self.model.clone()),
            best_step: self.state.best_step,
            best_val: self.state.best_val,
            steps: self.state.step,
        })
    }
}
