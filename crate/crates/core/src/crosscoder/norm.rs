use serde::{Deserialize, Serialize};

use crate::store::PairedActivationBatch;
use crate::{Error, Result};

/// Per-model scalars; activations are divided by them before encoding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub scale_base: f64,
    pub scale_ft: f64,
}

/// Picks per-model scales so that, after division, the mean row norm is `sqrt(d)`.
pub fn fit_normalization<'a, I>(sample: I) -> Result<NormalizationStats>
where
    I: IntoIterator<Item = &'a PairedActivationBatch<f32>>,
{
    let (mut sum_b, mut sum_f, mut rows, mut d) = (0.0f64, 0.0f64, 0usize, 0usize);
    for batch in sample {
        d = batch.d_model();
        let row_norm = |r: ndarray::ArrayView1<f32>| {
            r.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt()
        };
        sum_b += batch.base.rows().into_iter().map(row_norm).sum::<f64>();
        sum_f += batch.ft.rows().into_iter().map(row_norm).sum::<f64>();
        rows += batch.len();
    }
    if rows == 0 {
        return Err(Error::Normalization("sample has no rows".into()));
    }
    let target = (d as f64).sqrt();
    let (mean_b, mean_f) = (sum_b / rows as f64, sum_f / rows as f64);
    if !(mean_b > 0.0 && mean_f > 0.0) || !mean_b.is_finite() || !mean_f.is_finite() {
        return Err(Error::Normalization(format!(
            "mean row norms must be positive and finite (base {mean_b}, ft {mean_f})"
        )));
    }
    Ok(NormalizationStats {
        scale_base: mean_b / target,
        scale_ft: mean_f / target,
    })
}
