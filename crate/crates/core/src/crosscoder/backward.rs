use ndarray::{linalg::general_mat_mul, s, Array2, Axis};

use super::forward::{aux_ratio, aux_select, decode, decode_unbiased, encode_pre, sq_sum};
use super::{AuxConfig, CrossCoder, LatentCode, LossBreakdown, Params};
use crate::store::PairedActivationBatch;
use crate::{Real, Result};

/// Gradients of [`super::loss`] with the selection pattern held fixed.
///
/// Retained entries pass gradient straight through to their pre-activation;
/// the auxiliary term is differentiated through the residual and its
/// normalizer as well.
pub fn backward<T: Real>(
    model: &CrossCoder<T>,
    batch: &PairedActivationBatch<T>,
    code: &LatentCode<T>,
    dead: &[bool],
    aux: &AuxConfig,
) -> Result<Params<T>> {
    let aux_code = if dead.iter().any(|&x| x) {
        let pre = encode_pre(model, batch)?;
        Some(aux_select(&pre, dead, aux.k_aux))
    } else {
        None
    };
    Ok(gradients(model, batch, code, aux_code.as_ref(), aux.alpha)?.0)
}

/// Shared by [`backward`] and the trainer, which already has the auxiliary code.
pub(crate) fn gradients<T: Real>(
    model: &CrossCoder<T>,
    batch: &PairedActivationBatch<T>,
    code: &LatentCode<T>,
    aux_code: Option<&LatentCode<T>>,
    alpha: f64,
) -> Result<(Params<T>, LossBreakdown)> {
    model.check_batch(batch)?;
    let (n, d, m) = (batch.len(), model.d(), model.m());
    let p = &model.params;
    let nf = n.max(1) as f64;

    let (hat_b, hat_f) = decode(model, code)?;
    let resid = [&batch.base - &hat_b, &batch.ft - &hat_f];
    let recon = [sq_sum(&resid[0]) / nf, sq_sum(&resid[1]) / nf];

    // dL/dr and dL/da per side
    let mut g_resid: [Array2<T>; 2] = [&resid[0] * T::from_f64_lossy(2.0 / nf), &resid[1] * T::from_f64_lossy(2.0 / nf)];
    let mut g_aux: Option<[Array2<T>; 2]> = None;
    let mut aux_value = 0.0;
    if let Some(aux_code) = aux_code {
        let (ab, af) = decode_unbiased(model, aux_code);
        let aux_hat = [ab, af];
        let mut ga = [Array2::zeros((n, d)), Array2::zeros((n, d))];
        for side in 0..2 {
            let r2 = sq_sum(&resid[side]);
            if r2 == 0.0 {
                continue;
            }
            let ratio = aux_ratio(&resid[side], &aux_hat[side]);
            aux_value += ratio;
            let err = &resid[side] - &aux_hat[side];
            // L_aux = E / R: dR-part on r, dE-part on r and a
            let c_r = T::from_f64_lossy(-2.0 * alpha * ratio / r2);
            let c_e = T::from_f64_lossy(2.0 * alpha / r2);
            g_resid[side].scaled_add(c_r, &resid[side]);
            g_resid[side].scaled_add(c_e, &err);
            ga[side] = &err * (-c_e);
        }
        g_aux = Some(ga);
    }

    let mut grads = Params::<T>::zeros(d, m);
    // r = x - (zD + bias)
    grads.bias_base = -g_resid[0].sum_axis(Axis(0));
    grads.bias_ft = -g_resid[1].sum_axis(Axis(0));

    let mut g_pre = Array2::<T>::zeros((n, m));
    for (i, j, z) in code.entries() {
        let gb = g_resid[0].row(i);
        let gf = g_resid[1].row(i);
        grads.dec_base.row_mut(j).scaled_add(-z, &gb);
        grads.dec_ft.row_mut(j).scaled_add(-z, &gf);
        g_pre[[i, j]] -= p.dec_base.row(j).dot(&gb) + p.dec_ft.row(j).dot(&gf);
    }
    if let (Some(aux_code), Some(ga)) = (aux_code, &g_aux) {
        for (i, j, u) in aux_code.entries() {
            let gb = ga[0].row(i);
            let gf = ga[1].row(i);
            grads.dec_base.row_mut(j).scaled_add(u, &gb);
            grads.dec_ft.row_mut(j).scaled_add(u, &gf);
            g_pre[[i, j]] += p.dec_base.row(j).dot(&gb) + p.dec_ft.row(j).dot(&gf);
        }
    }

    // selected entries all have positive pre-activations, so relu' = 1 there
    grads.b_enc = g_pre.sum_axis(Axis(0));
    general_mat_mul(T::one(), &batch.base.t(), &g_pre, T::zero(), &mut grads.w_enc.slice_mut(s![0..d, ..]));
    general_mat_mul(T::one(), &batch.ft.t(), &g_pre, T::zero(), &mut grads.w_enc.slice_mut(s![d.., ..]));

    let breakdown = LossBreakdown {
        total: recon[0] + recon[1] + alpha * aux_value,
        recon_base: recon[0],
        recon_ft: recon[1],
        aux: aux_value,
    };
    Ok((grads, breakdown))
}
