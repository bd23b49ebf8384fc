use std::cmp::Ordering;

use ndarray::{linalg::general_mat_mul, s, Array2, Axis};
use serde::{Deserialize, Serialize};

use super::CrossCoder;
use crate::store::PairedActivationBatch;
use crate::{Error, Real, Result};

/// How a [`LatentCode`] was selected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// n*k largest salience entries across the batch (training).
    BatchTopK,
    /// Salience at or above the running threshold (inference default).
    Threshold,
    /// k largest salience entries per row.
    PerRowTopK,
    /// Dead-latent auxiliary code.
    Auxiliary,
}

/// Sparse `n x m` code; each row lists `(latent, value)` sorted by latent.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T> {
    pub n: usize,
    pub m: usize,
    pub rows: Vec<Vec<(usize, T)>>,
    pub mode: SelectionMode,
}

impl<T: Real> LatentCode<T> {
    pub fn empty(n: usize, m: usize, mode: SelectionMode) -> Self {
        LatentCode {
            n,
            m,
            rows: vec![Vec::new(); n],
            mode,
        }
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    /// `(row, latent, value)` triples in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, v)| (i, j, v)))
    }

    /// Flat indices `i * m + j` of the active entries, ascending.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.entries().map(|(i, j, _)| i * self.m + j).collect()
    }

    pub fn to_dense(&self) -> Array2<T> {
        let mut out = Array2::zeros((self.n, self.m));
        for (i, j, v) in self.entries() {
            out[[i, j]] = v;
        }
        out
    }

    pub fn scaled(&self, c: T) -> Self {
        LatentCode {
            rows: self
                .rows
                .iter()
                .map(|r| r.iter().map(|&(j, v)| (j, v * c)).collect())
                .collect(),
            ..self.clone()
        }
    }
}

/// `relu([a^b ; a^f] W_enc + b_enc)` for a normalized batch.
pub fn encode_pre<T: Real>(model: &CrossCoder<T>, batch: &PairedActivationBatch<T>) -> Result<Array2<T>> {
    model.check_batch(batch)?;
    let d = model.d();
    let p = &model.params;
    let mut pre = Array2::<T>::zeros((batch.len(), model.m()));
    pre.rows_mut().into_iter().for_each(|mut r| r.assign(&p.b_enc));
    general_mat_mul(T::one(), &batch.base, &p.w_enc.slice(s![0..d, ..]), T::one(), &mut pre);
    general_mat_mul(T::one(), &batch.ft, &p.w_enc.slice(s![d.., ..]), T::one(), &mut pre);
    pre.mapv_inplace(|v| if v > T::zero() { v } else { T::zero() });
    Ok(pre)
}

/// `s_ij = pre_ij * (|D^b_j|^2 + |D^f_j|^2)`.
pub fn salience<T: Real>(model: &CrossCoder<T>, pre: &Array2<T>) -> Result<Array2<T>> {
    if pre.ncols() != model.m() {
        return Err(Error::Shape(format!(
            "pre-activations have {} columns, model has m={}",
            pre.ncols(),
            model.m()
        )));
    }
    let norms = model.decoder_sq_norms();
    Ok(pre * &norms.insert_axis(Axis(0)))
}

/// Descending by value, ascending by index.
fn rank<T: Real>(a: &(T, usize), b: &(T, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Keeps the `budget` best `(value, index)` candidates under [`rank`].
fn keep_best<T: Real>(mut cand: Vec<(T, usize)>, budget: usize) -> Vec<(T, usize)> {
    if cand.len() > budget {
        if budget == 0 {
            return Vec::new();
        }
        cand.select_nth_unstable_by(budget - 1, rank);
        cand.truncate(budget);
    }
    cand
}

fn code_from_flat<T: Real>(
    mut flat: Vec<usize>,
    pre: &Array2<T>,
    mode: SelectionMode,
) -> LatentCode<T> {
    let (n, m) = pre.dim();
    flat.sort_unstable();
    let mut code = LatentCode::empty(n, m, mode);
    for idx in flat {
        let (i, j) = (idx / m, idx % m);
        code.rows[i].push((j, pre[[i, j]]));
    }
    code
}

/// Batch-global top-(n*k) selection by salience.
///
/// Returns the code (values are pre-activations) and the smallest retained
/// salience, or zero when fewer than n*k entries are positive. Ties go to the
/// lower flat index.
pub fn batch_topk_select<T: Real>(salience: &Array2<T>, pre: &Array2<T>, k: usize) -> (LatentCode<T>, T) {
    assert_eq!(salience.dim(), pre.dim(), "salience and pre-activation shapes differ");
    let (n, m) = pre.dim();
    let budget = n * k;
    let cand: Vec<(T, usize)> = salience
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > T::zero())
        .map(|(idx, &s)| (s, idx))
        .collect();
    let short = cand.len() < budget;
    let kept = keep_best(cand, budget);
    let theta = if short {
        T::zero()
    } else {
        kept.iter().map(|c| c.0).fold(T::infinity(), T::min)
    };
    let theta = if kept.is_empty() { T::zero() } else { theta };
    let code = code_from_flat(kept.into_iter().map(|c| c.1).collect(), pre, SelectionMode::BatchTopK);
    debug_assert_eq!(code.m, m);
    (code, theta)
}

/// Per row, the `k` best positive entries of `score` restricted to `allowed`
/// latents (all latents when `allowed` is `None`).
fn per_row_topk<T: Real>(
    score: &Array2<T>,
    pre: &Array2<T>,
    k: usize,
    allowed: Option<&[bool]>,
    mode: SelectionMode,
) -> LatentCode<T> {
    let m = pre.ncols();
    let mut flat = Vec::new();
    for (i, row) in score.rows().into_iter().enumerate() {
        let cand: Vec<(T, usize)> = row
            .iter()
            .enumerate()
            .filter(|(j, &v)| v > T::zero() && allowed.is_none_or(|a| a[*j]))
            .map(|(j, &v)| (v, j))
            .collect();
        flat.extend(keep_best(cand, k).into_iter().map(|c| i * m + c.1));
    }
    code_from_flat(flat, pre, mode)
}

/// Auxiliary code: per row, the `k_aux` largest positive pre-activations among
/// dead latents.
pub fn aux_select<T: Real>(pre: &Array2<T>, dead: &[bool], k_aux: usize) -> LatentCode<T> {
    assert_eq!(dead.len(), pre.ncols(), "dead mask length must equal m");
    per_row_topk(pre, pre, k_aux, Some(dead), SelectionMode::Auxiliary)
}

/// `zD^b + bias^b` and `zD^f + bias^f`, touching only active entries.
pub fn decode<T: Real>(model: &CrossCoder<T>, code: &LatentCode<T>) -> Result<(Array2<T>, Array2<T>)> {
    let (d, m) = (model.d(), model.m());
    if code.m != m {
        return Err(Error::Shape(format!("code has m={} but model has m={m}", code.m)));
    }
    let p = &model.params;
    let mut rb = Array2::<T>::zeros((code.n, d));
    let mut rf = Array2::<T>::zeros((code.n, d));
    rb.rows_mut().into_iter().for_each(|mut r| r.assign(&p.bias_base));
    rf.rows_mut().into_iter().for_each(|mut r| r.assign(&p.bias_ft));
    for (i, row) in code.rows.iter().enumerate() {
        for &(j, v) in row {
            if j >= m {
                return Err(Error::Shape(format!("latent index {j} out of range (m={m})")));
            }
            rb.row_mut(i).scaled_add(v, &p.dec_base.row(j));
            rf.row_mut(i).scaled_add(v, &p.dec_ft.row(j));
        }
    }
    Ok((rb, rf))
}

/// Sparse reconstruction without biases.
pub(crate) fn decode_unbiased<T: Real>(model: &CrossCoder<T>, code: &LatentCode<T>) -> (Array2<T>, Array2<T>) {
    let d = model.d();
    let p = &model.params;
    let mut rb = Array2::<T>::zeros((code.n, d));
    let mut rf = Array2::<T>::zeros((code.n, d));
    for (i, j, v) in code.entries() {
        rb.row_mut(i).scaled_add(v, &p.dec_base.row(j));
        rf.row_mut(i).scaled_add(v, &p.dec_ft.row(j));
    }
    (rb, rf)
}

/// Dead-latent auxiliary loss settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxConfig {
    pub alpha: f64,
    pub k_aux: usize,
}

impl AuxConfig {
    /// `alpha = 1/32`, `k_aux = min(m/2, 512)`.
    pub fn for_dictionary(m: usize) -> Self {
        AuxConfig {
            alpha: 1.0 / 32.0,
            k_aux: (m / 2).clamp(1, 512),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `1/n sum_i |a^b_i - â^b_i|^2`
    pub recon_base: f64,
    pub recon_ft: f64,
    /// Unweighted auxiliary term; `total` adds `alpha * aux`.
    pub aux: f64,
}

pub(crate) fn sq_sum<T: Real>(a: &Array2<T>) -> f64 {
    a.iter().map(|v| v.to_f64_lossy().powi(2)).sum()
}

/// `|r - a|^2 / |r|^2` summed over the batch, zero when the residual vanishes.
pub(crate) fn aux_ratio<T: Real>(resid: &Array2<T>, aux_recon: &Array2<T>) -> f64 {
    let r2 = sq_sum(resid);
    if r2 == 0.0 {
        return 0.0;
    }
    let e2: f64 = resid
        .iter()
        .zip(aux_recon.iter())
        .map(|(r, a)| (r.to_f64_lossy() - a.to_f64_lossy()).powi(2))
        .sum();
    e2 / r2
}

/// Reconstruction loss plus `alpha` times the auxiliary term.
///
/// The auxiliary term reconstructs each model's residual from the `k_aux`
/// largest pre-activations among `dead` latents and is normalized by the
/// residual energy. No dead latents means no auxiliary term.
pub fn loss<T: Real>(
    model: &CrossCoder<T>,
    batch: &PairedActivationBatch<T>,
    code: &LatentCode<T>,
    dead: &[bool],
    aux: &AuxConfig,
) -> Result<LossBreakdown> {
    model.check_batch(batch)?;
    let n = batch.len().max(1) as f64;
    let (rb, rf) = decode(model, code)?;
    let resid_b = &batch.base - &rb;
    let resid_f = &batch.ft - &rf;
    let recon_base = sq_sum(&resid_b) / n;
    let recon_ft = sq_sum(&resid_f) / n;
    let aux_term = if dead.iter().any(|&x| x) {
        let pre = encode_pre(model, batch)?;
        let aux_code = aux_select(&pre, dead, aux.k_aux);
        let (ab, af) = decode_unbiased(model, &aux_code);
        aux_ratio(&resid_b, &ab) + aux_ratio(&resid_f, &af)
    } else {
        0.0
    };
    Ok(LossBreakdown {
        total: recon_base + recon_ft + aux.alpha * aux_term,
        recon_base,
        recon_ft,
        aux: aux_term,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    /// Keep entries whose salience reaches the model's running threshold.
    #[default]
    Threshold,
    /// Keep the k largest salience entries of each row.
    Strict,
}

/// Sparse code for a normalized batch at inference time.
pub fn infer_code<T: Real>(
    model: &CrossCoder<T>,
    batch: &PairedActivationBatch<T>,
    mode: InferenceMode,
) -> Result<LatentCode<T>> {
    let pre = encode_pre(model, batch)?;
    let sal = salience(model, &pre)?;
    Ok(match mode {
        InferenceMode::Threshold => {
            let theta = model
                .threshold
                .ok_or_else(|| Error::State("threshold mode requires a fitted threshold".into()))?;
            threshold_select(&sal, &pre, T::from_f64_lossy(theta))
        }
        InferenceMode::Strict => per_row_topk(&sal, &pre, model.k, None, SelectionMode::PerRowTopK),
    })
}

/// Entries with positive salience at or above `theta`.
pub(crate) fn threshold_select<T: Real>(sal: &Array2<T>, pre: &Array2<T>, theta: T) -> LatentCode<T> {
    let flat = sal
        .iter()
        .enumerate()
        .filter(|(_, &s)| s > T::zero() && s >= theta)
        .map(|(idx, _)| idx)
        .collect();
    code_from_flat(flat, pre, SelectionMode::Threshold)
}
