use std::io::Write;
use std::path::Path;
use std::sync::mpsc;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use super::backward::gradients;
use super::forward::{aux_select, batch_topk_select, encode_pre, salience};
use super::{adam_step, fit_normalization, AdamConfig, AdamState, AuxConfig, CrossCoder};
use crate::store::{pair_batches, ActivationShard, PairedActivationBatch};
use crate::{Error, Real, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Linear warmup length in optimizer steps.
    pub warmup_steps: usize,
    /// Fraction of the run over which the learning rate decays linearly to
    /// zero at the end; 0 disables the decay.
    pub decay_fraction: f64,
    pub adam: AdamConfig,
    pub aux_alpha: f64,
    /// Defaults to `min(m/2, 512)`.
    pub k_aux: Option<usize>,
    /// A latent is dead for the auxiliary loss once it has not fired for this
    /// many training tokens.
    pub dead_window_tokens: u64,
    pub threshold_decay: f64,
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1,
            batch_size: 4096,
            lr: 1e-4,
            warmup_steps: 100,
            decay_fraction: 0.0,
            adam: AdamConfig::default(),
            aux_alpha: 1.0 / 32.0,
            k_aux: None,
            dead_window_tokens: 1_000_000,
            threshold_decay: 0.99,
            log_every: 10,
            seed: 0,
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub step: u64,
    pub loss: f64,
    pub recon_b: f64,
    pub recon_f: f64,
    pub aux: f64,
    pub dead_frac: f64,
    pub ev_b: f64,
    pub ev_f: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub records: Vec<TrainingRecord>,
}

impl TrainingLog {
    /// Line-delimited JSON, one record per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl().as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn first(&self) -> Option<&TrainingRecord> {
        self.records.first()
    }

    pub fn last(&self) -> Option<&TrainingRecord> {
        self.records.last()
    }
}

pub struct TrainOutcome<T> {
    /// The trained model, or the last model with finite loss on abort.
    pub model: CrossCoder<T>,
    pub log: TrainingLog,
    pub aborted: Option<String>,
}

/// Explained variance of `resid` relative to `x` centered on its own mean.
fn explained_variance<T: Real>(x: &ndarray::Array2<T>, resid: &ndarray::Array2<T>) -> f64 {
    let n = x.nrows().max(1) as f64;
    let mut total = 0.0;
    for col in x.columns() {
        let mean = col.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
        total += col.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>();
    }
    let res: f64 = resid.iter().map(|v| v.to_f64_lossy().powi(2)).sum();
    if total == 0.0 {
        return if res == 0.0 { 1.0 } else { f64::NEG_INFINITY };
    }
    1.0 - res / total
}

/// Owns a model during fitting and applies one optimizer step per batch.
pub struct Trainer<T: Real> {
    model: CrossCoder<T>,
    adam: AdamState<T>,
    cfg: TrainConfig,
    aux: AuxConfig,
    since_fired: Vec<u64>,
    total_steps: u64,
    log: TrainingLog,
}

impl<T: Real> Trainer<T> {
    /// `total_steps` drives the learning-rate schedule.
    pub fn new(model: CrossCoder<T>, cfg: TrainConfig, total_steps: u64) -> Result<Self> {
        if cfg.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if !(cfg.lr > 0.0) {
            return Err(Error::Param("learning rate must be positive".into()));
        }
        let m = model.m();
        let mut aux = AuxConfig::for_dictionary(m);
        aux.alpha = cfg.aux_alpha;
        if let Some(k_aux) = cfg.k_aux {
            aux.k_aux = k_aux;
        }
        Ok(Trainer {
            adam: AdamState::new(model.d(), m),
            model,
            cfg,
            aux,
            since_fired: vec![0; m],
            total_steps: total_steps.max(1),
            log: TrainingLog::default(),
        })
    }

    pub fn model(&self) -> &CrossCoder<T> {
        &self.model
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step
    }

    pub fn dead_mask(&self) -> Vec<bool> {
        self.since_fired
            .iter()
            .map(|&t| t >= self.cfg.dead_window_tokens)
            .collect()
    }

    fn lr_at(&self, step: u64) -> f64 {
        let warm = self.cfg.warmup_steps as u64;
        let mut lr = self.cfg.lr;
        if warm > 0 && step < warm {
            lr *= (step + 1) as f64 / warm as f64;
        }
        let decay_steps = (self.cfg.decay_fraction * self.total_steps as f64).round() as u64;
        let decay_start = self.total_steps.saturating_sub(decay_steps);
        if decay_steps > 0 && step >= decay_start {
            let left = self.total_steps.saturating_sub(step) as f64 / decay_steps as f64;
            lr *= left.max(1.0 / decay_steps as f64);
        }
        lr
    }

    /// Forward, backward and Adam on one normalized batch. Returns the
    /// pre-update record; on a non-finite loss the model is left untouched.
    pub fn step(&mut self, batch: &PairedActivationBatch<T>) -> Result<TrainingRecord> {
        let model = &self.model;
        let pre = encode_pre(model, batch)?;
        let sal = salience(model, &pre)?;
        let (code, theta) = batch_topk_select(&sal, &pre, model.k);
        let dead = self.dead_mask();
        let n_dead = dead.iter().filter(|&&x| x).count();
        let aux_code = (n_dead > 0).then(|| aux_select(&pre, &dead, self.aux.k_aux));
        let (grads, parts) = gradients(model, batch, &code, aux_code.as_ref(), self.aux.alpha)?;
        if !parts.total.is_finite() {
            return Err(Error::Training(format!(
                "non-finite loss at step {}",
                self.adam.step
            )));
        }

        let (hat_b, hat_f) = super::decode(model, &code)?;
        let record = TrainingRecord {
            step: self.adam.step,
            loss: parts.total,
            recon_b: parts.recon_base,
            recon_f: parts.recon_ft,
            aux: parts.aux,
            dead_frac: n_dead as f64 / model.m() as f64,
            ev_b: explained_variance(&batch.base, &(&batch.base - &hat_b)),
            ev_f: explained_variance(&batch.ft, &(&batch.ft - &hat_f)),
        };

        let lr = self.lr_at(self.adam.step);
        let snapshot = self.model.params.clone();
        adam_step(&mut self.model.params, &grads, &mut self.adam, lr, &self.cfg.adam)?;
        if !self.model.params.all_finite() {
            self.model.params = snapshot;
            return Err(Error::Training(format!(
                "parameters became non-finite at step {}",
                self.adam.step
            )));
        }

        let mut fired = vec![false; self.model.m()];
        for (_, j, _) in code.entries() {
            fired[j] = true;
        }
        let n = batch.len() as u64;
        for (t, f) in self.since_fired.iter_mut().zip(fired) {
            *t = if f { 0 } else { *t + n };
        }
        let theta = theta.to_f64_lossy();
        self.model.threshold = Some(match self.model.threshold {
            None => theta,
            Some(prev) => self.cfg.threshold_decay * prev + (1.0 - self.cfg.threshold_decay) * theta,
        });

        let step = self.adam.step;
        if step == 1 || step % self.cfg.log_every.max(1) as u64 == 0 || step == self.total_steps {
            self.log.records.push(record);
        }
        Ok(record)
    }

    pub fn finish(self) -> (CrossCoder<T>, TrainingLog) {
        (self.model, self.log)
    }
}

/// Number of optimizer steps for `epochs` passes over `n_rows` rows.
pub fn steps_for(n_rows: usize, batch_size: usize, epochs: usize) -> u64 {
    (n_rows.div_ceil(batch_size.max(1)) * epochs) as u64
}

/// Fits normalization (unless the model already carries it) and trains for
/// `cfg.epochs` shuffled epochs. Batch `b + 1` is gathered on a loader thread
/// while batch `b` is being optimized.
pub fn train<T: Real>(
    mut model: CrossCoder<T>,
    base: &ActivationShard,
    ft: &ActivationShard,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    base.check_pairable(ft)?;
    if base.d_model() != model.d() {
        return Err(Error::Shape(format!(
            "shards have d_model {} but model has d={}",
            base.d_model(),
            model.d()
        )));
    }
    if base.n_rows() == 0 {
        return Err(Error::Param("training stream is empty".into()));
    }
    if model.norm.is_none() {
        let batches: Vec<_> = pair_batches(base, ft, cfg.batch_size, cfg.seed)?.collect();
        model.norm = Some(fit_normalization(&batches)?);
    }
    let stats = model.norm;
    let total = steps_for(base.n_rows(), cfg.batch_size, cfg.epochs);
    let mut trainer = Trainer::new(model, cfg.clone(), total)?;
    let mut aborted = None;

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = mpsc::sync_channel::<Result<PairedActivationBatch<T>>>(1);
        scope.spawn(move || {
            let normalize = |b: PairedActivationBatch<f32>| {
                let mut out = b.cast::<T>();
                if let Some(s) = &stats {
                    out.base.mapv_inplace(|v| v / T::from_f64_lossy(s.scale_base));
                    out.ft.mapv_inplace(|v| v / T::from_f64_lossy(s.scale_ft));
                }
                out
            };
            for epoch in 0..cfg.epochs {
                let stream = match pair_batches(base, ft, cfg.batch_size, cfg.seed.wrapping_add(epoch as u64)) {
                    Ok(s) => s,
                    Err(e) => {
                        let _ = tx.send(Err(e));
                        return;
                    }
                };
                for b in stream {
                    if tx.send(Ok(normalize(b))).is_err() {
                        return;
                    }
                }
            }
        });
        for batch in rx {
            match trainer.step(&batch?) {
                Ok(_) => {}
                Err(Error::Training(msg)) => {
                    warn!("training aborted: {msg}");
                    aborted = Some(msg);
                    break;
                }
                Err(e) => return Err(e),
            }
            let step = trainer.step_count();
            if step % 50 == 0 {
                if let Some(r) = trainer.log().last() {
                    info!("step {step}/{total}: loss {:.4} ev_b {:.3} ev_f {:.3} dead {:.3}", r.loss, r.ev_b, r.ev_f, r.dead_frac);
                }
            }
        }
        Ok(())
    })?;

    let (model, log) = trainer.finish();
    Ok(TrainOutcome { model, log, aborted })
}
