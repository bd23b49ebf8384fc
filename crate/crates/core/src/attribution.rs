//! Per-latent attribution: decoder-norm classes, latent scaling and health.
//!
//! Relative norm `|D^f_j| / (|D^b_j| + |D^f_j|)` sorts latents into base
//! specific, fine-tuned specific and shared. Latent scaling fits, for each
//! model, how much of the latent's direction that model's activations carry:
//!
//! ```text
//! eps_ij = h_i - ĥ_i,-j           (reconstruction with latent j removed)
//! beta_j = sum_i z_ij <eps_ij, u_j> / (|u_j|^2 sum_i z_ij^2)   over z_ij > 0
//! ```
//!
//! Both betas of a latent are fitted against the same direction `u_j`, so
//! their ratio reads as amplification or minimization.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::crosscoder::{decode, infer_code, CrossCoder, InferenceMode, LatentCode};
use crate::store::{sequential_batches, ActivationShard, PairedActivationBatch};
use crate::{Error, Real, Result};

pub const HISTOGRAM_BINS: usize = 50;
/// Reporting-time dead window.
pub const REPORT_DEAD_WINDOW: u64 = 10_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormClass {
    BaseSpecific,
    FtSpecific,
    Shared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AmpClass {
    Amplified,
    Minimized,
    Unchanged,
    /// Never fired on the evaluation stream, so beta is undefined.
    Inactive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Target {
    Base,
    Ft,
}

/// Direction a latent's betas are fitted against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingDirection {
    /// `(D^b_j + D^f_j) / 2` in activation units, shared by both targets.
    #[default]
    Mean,
    /// The target model's own decoder row. Each model then explains its own
    /// reconstruction and both betas sit near 1.
    ModelSpecific,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionConfig {
    pub low: f64,
    pub high: f64,
    pub tau: f64,
    pub dead_window_tokens: u64,
    pub batch_size: usize,
    pub direction: ScalingDirection,
    pub inference: InferenceMode,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            low: 0.1,
            high: 0.9,
            tau: 1.5,
            dead_window_tokens: REPORT_DEAD_WINDOW,
            batch_size: 4096,
            direction: ScalingDirection::Mean,
            inference: InferenceMode::Threshold,
        }
    }
}

impl AttributionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.low && self.low < self.high && self.high < 1.0) {
            return Err(Error::Param(format!(
                "norm thresholds must satisfy 0 < low < high < 1, got ({}, {})",
                self.low, self.high
            )));
        }
        if !(self.tau > 1.0) {
            return Err(Error::Param(format!("tau must exceed 1, got {}", self.tau)));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentAttribution {
    pub latent_id: usize,
    pub norm_base: f64,
    pub norm_ft: f64,
    pub rel_norm: f64,
    pub norm_class: NormClass,
    pub beta_base: Option<f64>,
    pub beta_ft: Option<f64>,
    pub amp_class: AmpClass,
    pub fire_count: u64,
    pub is_dead: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthReport {
    pub dead_rate: f64,
    pub explained_variance_base: f64,
    pub explained_variance_ft: f64,
    /// Mean over tokens of `|r^b|^2 + |r^f|^2`, in normalized units.
    pub mean_recon_loss: f64,
    /// Counts of rel_norm over [`HISTOGRAM_BINS`] uniform bins on `[0, 1]`.
    pub decoder_norm_histogram: Vec<u64>,
    pub rel_norm_mean: f64,
    pub stream_tokens: u64,
    pub dead_window_tokens: u64,
    /// The requested window exceeded the stream and was cut to its length.
    pub window_truncated: bool,
    pub warnings: Vec<String>,
}

/// `|D^f| / (|D^b| + |D^f|)`, 0.5 when both vanish.
pub fn rel_norm(norm_base: f64, norm_ft: f64) -> f64 {
    let total = norm_base + norm_ft;
    if total == 0.0 {
        0.5
    } else {
        norm_ft / total
    }
}

pub fn norm_class(rel: f64, low: f64, high: f64) -> NormClass {
    if rel < low {
        NormClass::BaseSpecific
    } else if rel > high {
        NormClass::FtSpecific
    } else {
        NormClass::Shared
    }
}

/// `(latent_id, rel_norm, class)` for every latent.
pub fn classify_by_norm<T: Real>(model: &CrossCoder<T>, low: f64, high: f64) -> Vec<(usize, f64, NormClass)> {
    model
        .decoder_norms()
        .into_iter()
        .enumerate()
        .map(|(j, (nb, nf))| {
            let r = rel_norm(nb, nf);
            (j, r, norm_class(r, low, high))
        })
        .collect()
}

pub fn classify_amplification(beta_base: f64, beta_ft: f64, tau: f64) -> AmpClass {
    let (b, f) = (beta_base.abs(), beta_ft.abs());
    if b == 0.0 && f == 0.0 {
        AmpClass::Unchanged
    } else if f >= tau * b {
        AmpClass::Amplified
    } else if b >= tau * f {
        AmpClass::Minimized
    } else {
        AmpClass::Unchanged
    }
}

/// Closed-form least-squares beta for one latent: minimizes
/// `sum_i |eps_i - beta z_i u|^2` over tokens with `z_i > 0`. `None` when
/// the latent never fires or `u` is zero.
pub fn scaling_beta(eps: &[Vec<f64>], z: &[f64], u: &[f64]) -> Option<f64> {
    let uu: f64 = u.iter().map(|v| v * v).sum();
    let mut num = 0.0;
    let mut den = 0.0;
    for (e, &zi) in eps.iter().zip(z) {
        if zi > 0.0 {
            num += zi * e.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
            den += zi * zi;
        }
    }
    (den > 0.0 && uu > 0.0).then(|| num / (uu * den))
}

/// Fitting directions in activation units (normalization undone), one row
/// per latent, for each target.
fn scaling_directions<T: Real>(model: &CrossCoder<T>, direction: ScalingDirection) -> [Vec<Vec<f64>>; 2] {
    let (sb, sf) = model.norm.map_or((1.0, 1.0), |s| (s.scale_base, s.scale_ft));
    let p = &model.params;
    let row = |a: &ndarray::Array2<T>, j: usize, s: f64| -> Vec<f64> {
        a.row(j).iter().map(|v| v.to_f64_lossy() * s).collect()
    };
    let m = model.m();
    match direction {
        ScalingDirection::Mean => {
            let mean: Vec<Vec<f64>> = (0..m)
                .map(|j| {
                    row(&p.dec_base, j, sb)
                        .iter()
                        .zip(row(&p.dec_ft, j, sf))
                        .map(|(b, f)| 0.5 * (b + f))
                        .collect()
                })
                .collect();
            [mean.clone(), mean]
        }
        ScalingDirection::ModelSpecific => [
            (0..m).map(|j| row(&p.dec_base, j, sb)).collect(),
            (0..m).map(|j| row(&p.dec_ft, j, sf)).collect(),
        ],
    }
}

/// Running sums for the one-pass statistics over an evaluation stream.
struct Accumulator {
    dirs: [Vec<Vec<f64>>; 2],
    /// `<D^t_j, u^t_j>` in activation units.
    self_dot: [Vec<f64>; 2],
    dir_sq: [Vec<f64>; 2],
    num: [Vec<f64>; 2],
    den: Vec<f64>,
    fire_count: Vec<u64>,
    last_fired: Vec<Option<u64>>,
    tokens: u64,
    sq_err: [f64; 2],
    sum: [Vec<f64>; 2],
    sum_sq: [f64; 2],
}

impl Accumulator {
    fn new<T: Real>(model: &CrossCoder<T>, direction: ScalingDirection) -> Self {
        let (m, d) = (model.m(), model.d());
        let dirs = scaling_directions(model, direction);
        let (sb, sf) = model.norm.map_or((1.0, 1.0), |s| (s.scale_base, s.scale_ft));
        let p = &model.params;
        let self_dot = |a: &ndarray::Array2<T>, s: f64, u: &[Vec<f64>]| -> Vec<f64> {
            (0..m)
                .map(|j| a.row(j).iter().zip(&u[j]).map(|(x, y)| x.to_f64_lossy() * s * y).sum())
                .collect()
        };
        let sq = |u: &[Vec<f64>]| u.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
        Accumulator {
            self_dot: [self_dot(&p.dec_base, sb, &dirs[0]), self_dot(&p.dec_ft, sf, &dirs[1])],
            dir_sq: [sq(&dirs[0]), sq(&dirs[1])],
            dirs,
            num: [vec![0.0; m], vec![0.0; m]],
            den: vec![0.0; m],
            fire_count: vec![0; m],
            last_fired: vec![None; m],
            tokens: 0,
            sq_err: [0.0; 2],
            sum: [vec![0.0; d], vec![0.0; d]],
            sum_sq: [0.0; 2],
        }
    }

    fn add<T: Real>(&mut self, model: &CrossCoder<T>, batch: &PairedActivationBatch<T>, code: &LatentCode<T>) -> Result<()> {
        let (hat_b, hat_f) = decode(model, code)?;
        let (sb, sf) = model.norm.map_or((1.0, 1.0), |s| (s.scale_base, s.scale_ft));
        let resid = [&batch.base - &hat_b, &batch.ft - &hat_f];
        for (t, x) in [&batch.base, &batch.ft].into_iter().enumerate() {
            for row in x.rows() {
                for (acc, v) in self.sum[t].iter_mut().zip(row) {
                    let v = v.to_f64_lossy();
                    *acc += v;
                    self.sum_sq[t] += v * v;
                }
            }
            self.sq_err[t] += resid[t].iter().map(|v| v.to_f64_lossy().powi(2)).sum::<f64>();
        }
        let scales = [sb, sf];
        for (i, row) in code.rows.iter().enumerate() {
            let token = self.tokens + i as u64;
            for &(j, z) in row {
                let z = z.to_f64_lossy();
                if z <= 0.0 {
                    continue;
                }
                self.fire_count[j] += 1;
                self.last_fired[j] = Some(token);
                self.den[j] += z * z;
                for t in 0..2 {
                    // <eps, u> with eps = s (r + z D_j): the residual plus the
                    // latent's own contribution, in activation units
                    let r_dot: f64 = resid[t]
                        .row(i)
                        .iter()
                        .zip(&self.dirs[t][j])
                        .map(|(r, u)| r.to_f64_lossy() * u)
                        .sum();
                    self.num[t][j] += z * (scales[t] * r_dot + z * self.self_dot[t][j]);
                }
            }
        }
        self.tokens += batch.len() as u64;
        Ok(())
    }

    fn beta(&self, t: usize, j: usize) -> Option<f64> {
        (self.den[j] > 0.0 && self.dir_sq[t][j] > 0.0).then(|| self.num[t][j] / (self.dir_sq[t][j] * self.den[j]))
    }

    fn explained_variance(&self, t: usize) -> f64 {
        let n = self.tokens as f64;
        let mean_sq: f64 = self.sum[t].iter().map(|s| s * s).sum::<f64>() / n;
        let total = self.sum_sq[t] - mean_sq;
        if total <= 0.0 {
            return if self.sq_err[t] == 0.0 { 1.0 } else { f64::NEG_INFINITY };
        }
        1.0 - self.sq_err[t] / total
    }
}

fn scan<T: Real>(
    model: &CrossCoder<T>,
    base: &ActivationShard,
    ft: &ActivationShard,
    cfg: &AttributionConfig,
) -> Result<Accumulator> {
    if base.d_model() != model.d() {
        return Err(Error::Shape(format!(
            "shards have d_model {} but model has d={}",
            base.d_model(),
            model.d()
        )));
    }
    if base.n_rows() == 0 {
        return Err(Error::Param("evaluation stream is empty".into()));
    }
    let mut acc = Accumulator::new(model, cfg.direction);
    for raw in sequential_batches(base, ft, cfg.batch_size)? {
        let batch = model.normalize(&raw);
        let code = infer_code(model, &batch, cfg.inference)?;
        acc.add(model, &batch, &code)?;
    }
    Ok(acc)
}

/// Beta of one latent for one target over the whole stream.
pub fn latent_scaling<T: Real>(
    model: &CrossCoder<T>,
    base: &ActivationShard,
    ft: &ActivationShard,
    latent: usize,
    target: Target,
    cfg: &AttributionConfig,
) -> Result<f64> {
    if latent >= model.m() {
        return Err(Error::Param(format!("latent {latent} out of range (m={})", model.m())));
    }
    let acc = scan(model, base, ft, cfg)?;
    let t = match target {
        Target::Base => 0,
        Target::Ft => 1,
    };
    acc.beta(t, latent).ok_or(Error::UndefinedBeta(latent))
}

fn histogram(values: impl Iterator<Item = f64>) -> Vec<u64> {
    let mut h = vec![0u64; HISTOGRAM_BINS];
    for v in values {
        let bin = ((v * HISTOGRAM_BINS as f64).floor().max(0.0) as usize).min(HISTOGRAM_BINS - 1);
        h[bin] += 1;
    }
    h
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

fn dead_flags(acc: &Accumulator, window: u64) -> Vec<bool> {
    let window = window.min(acc.tokens);
    acc.last_fired
        .iter()
        .map(|last| match last {
            None => true,
            Some(t) => acc.tokens - 1 - t >= window,
        })
        .collect()
}

fn health_from(model_norms: &[f64], acc: &Accumulator, dead: &[bool], window: u64) -> HealthReport {
    let ev_b = acc.explained_variance(0);
    let ev_f = acc.explained_variance(1);
    let mut warnings = Vec::new();
    for (name, ev) in [("base", ev_b), ("ft", ev_f)] {
        if ev < 0.0 {
            warnings.push(format!("negative explained variance for {name}: {ev}"));
        }
    }
    let truncated = window > acc.tokens;
    HealthReport {
        dead_rate: dead.iter().filter(|&&x| x).count() as f64 / dead.len().max(1) as f64,
        explained_variance_base: ev_b,
        explained_variance_ft: ev_f,
        mean_recon_loss: (acc.sq_err[0] + acc.sq_err[1]) / acc.tokens as f64,
        decoder_norm_histogram: histogram(model_norms.iter().copied()),
        rel_norm_mean: mean(model_norms),
        stream_tokens: acc.tokens,
        dead_window_tokens: window.min(acc.tokens),
        window_truncated: truncated,
        warnings,
    }
}

/// Health metrics over an evaluation stream.
pub fn health<T: Real>(
    model: &CrossCoder<T>,
    base: &ActivationShard,
    ft: &ActivationShard,
    cfg: &AttributionConfig,
) -> Result<HealthReport> {
    let acc = scan(model, base, ft, cfg)?;
    let rel: Vec<f64> = classify_by_norm(model, cfg.low, cfg.high).iter().map(|r| r.1).collect();
    let dead = dead_flags(&acc, cfg.dead_window_tokens);
    Ok(health_from(&rel, &acc, &dead, cfg.dead_window_tokens))
}

/// Full attribution table and health report from one pass over the stream.
pub fn attribute<T: Real>(
    model: &CrossCoder<T>,
    base: &ActivationShard,
    ft: &ActivationShard,
    cfg: &AttributionConfig,
) -> Result<(Vec<LatentAttribution>, HealthReport)> {
    cfg.validate()?;
    let acc = scan(model, base, ft, cfg)?;
    let dead = dead_flags(&acc, cfg.dead_window_tokens);
    let norms = model.decoder_norms();
    let table: Vec<LatentAttribution> = norms
        .iter()
        .enumerate()
        .map(|(j, &(nb, nf))| {
            let rel = rel_norm(nb, nf);
            let (beta_base, beta_ft) = (acc.beta(0, j), acc.beta(1, j));
            let amp_class = match (beta_base, beta_ft) {
                (Some(b), Some(f)) => classify_amplification(b, f, cfg.tau),
                _ => AmpClass::Inactive,
            };
            LatentAttribution {
                latent_id: j,
                norm_base: nb,
                norm_ft: nf,
                rel_norm: rel,
                norm_class: norm_class(rel, cfg.low, cfg.high),
                beta_base,
                beta_ft,
                amp_class,
                fire_count: acc.fire_count[j],
                is_dead: dead[j],
            }
        })
        .collect();
    let rel: Vec<f64> = table.iter().map(|r| r.rel_norm).collect();
    let report = health_from(&rel, &acc, &dead, cfg.dead_window_tokens);
    Ok((table, report))
}

/// One JSON object per line, in latent order.
pub fn table_to_jsonl(table: &[LatentAttribution]) -> String {
    let mut out = String::new();
    for row in table {
        out.push_str(&serde_json::to_string(row).expect("attribution serializes"));
        out.push('\n');
    }
    out
}

pub fn write_table(table: &[LatentAttribution], path: &Path) -> Result<()> {
    std::fs::write(path, table_to_jsonl(table)).map_err(|e| Error::io(path, e))
}

pub fn read_table(path: &Path) -> Result<Vec<LatentAttribution>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format(format!("{} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Class counts, handy for summaries.
pub fn class_counts(table: &[LatentAttribution]) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for row in table {
        let norm = serde_json::to_value(row.norm_class).expect("enum serializes");
        let amp = serde_json::to_value(row.amp_class).expect("enum serializes");
        *out.entry(format!("norm:{}", norm.as_str().unwrap_or_default())).or_insert(0) += 1;
        *out.entry(format!("amp:{}", amp.as_str().unwrap_or_default())).or_insert(0) += 1;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormShiftEntry {
    pub label: String,
    pub histogram: Vec<u64>,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormShiftSummary {
    pub entries: Vec<NormShiftEntry>,
    /// `mean[i + 1] - mean[i]` along the series.
    pub mean_diffs: Vec<f64>,
}

/// Rel-norm histograms and means for a series of models, in the given order.
pub fn norm_shift_summary<T: Real>(models: &[(&str, &CrossCoder<T>)]) -> Result<NormShiftSummary> {
    if models.len() < 2 {
        return Err(Error::Param("norm shift summary needs at least two models".into()));
    }
    let (d0, m0) = (models[0].1.d(), models[0].1.m());
    if let Some((label, _)) = models.iter().find(|(_, m)| m.d() != d0 || m.m() != m0) {
        return Err(Error::Shape(format!("model {label} does not have d={d0}, m={m0}")));
    }
    let entries: Vec<NormShiftEntry> = models
        .iter()
        .map(|(label, model)| {
            let rel: Vec<f64> = model
                .decoder_norms()
                .into_iter()
                .map(|(b, f)| rel_norm(b, f))
                .collect();
            NormShiftEntry {
                label: label.to_string(),
                histogram: histogram(rel.iter().copied()),
                mean: mean(&rel),
            }
        })
        .collect();
    let mean_diffs = entries.windows(2).map(|w| w[1].mean - w[0].mean).collect();
    Ok(NormShiftSummary { entries, mean_diffs })
}

/// Residual energy after deleting latent `j` and re-adding it scaled by
/// `beta`, for checking least-squares optimality.
pub fn rescaled_residual(eps: &[Vec<f64>], z: &[f64], u: &[f64], beta: f64) -> f64 {
    eps.iter()
        .zip(z)
        .filter(|(_, &zi)| zi > 0.0)
        .map(|(e, &zi)| e.iter().zip(u).map(|(a, b)| (a - beta * zi * b).powi(2)).sum::<f64>())
        .sum()
}

/// Latents selected for interpretation: non-shared, amplified or minimized.
pub fn default_selection(table: &[LatentAttribution]) -> Vec<usize> {
    table
        .iter()
        .filter(|r| {
            r.norm_class != NormClass::Shared || matches!(r.amp_class, AmpClass::Amplified | AmpClass::Minimized)
        })
        .map(|r| r.latent_id)
        .collect()
}
