//! BatchTopK cross-coder: one encoder reading the concatenated base and
//! fine-tuned activations, one decoder per model.
//!
//! ```text
//! pre_i   = relu([a_i^b ; a_i^f] W_enc + b_enc)                 (n x m)
//! s_ij    = pre_ij * (|D^b_j|^2 + |D^f_j|^2)                    salience
//! keep    the n*k largest s_ij over the whole batch
//! â_i^b   = sum_j z_ij D^b_j + bias^b,  â_i^f likewise
//! loss    = 1/n sum_i (|a^b_i - â^b_i|^2 + |a^f_i - â^f_i|^2) + alpha * aux
//! ```
//!
//! Retained code values are the pre-activations; salience only ranks them.

mod adam;
mod backward;
mod checkpoint;
mod forward;
mod norm;
mod train;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use backward::backward;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC};
pub use forward::{
    aux_select, batch_topk_select, decode, encode_pre, infer_code, loss, salience, AuxConfig,
    InferenceMode, LatentCode, LossBreakdown, SelectionMode,
};
pub use norm::{fit_normalization, NormalizationStats};
pub use train::{train, TrainConfig, TrainOutcome, Trainer, TrainingLog, TrainingRecord};

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::store::PairedActivationBatch;
use crate::{Error, Real, Result};

pub const DEFAULT_EXPANSION: usize = 32;

/// The trainable tensors of a cross-coder. Gradients and Adam moments use the
/// same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    /// `(2d, m)`; rows `0..d` read the base half, rows `d..2d` the fine-tuned half.
    pub w_enc: Array2<T>,
    pub b_enc: Array1<T>,
    /// `(m, d)`
    pub dec_base: Array2<T>,
    /// `(m, d)`
    pub dec_ft: Array2<T>,
    pub bias_base: Array1<T>,
    pub bias_ft: Array1<T>,
}

pub const PARAM_NAMES: [&str; 6] = ["w_enc", "b_enc", "dec_base", "dec_ft", "bias_base", "bias_ft"];

impl<T: Real> Params<T> {
    pub fn zeros(d: usize, m: usize) -> Self {
        Params {
            w_enc: Array2::zeros((2 * d, m)),
            b_enc: Array1::zeros(m),
            dec_base: Array2::zeros((m, d)),
            dec_ft: Array2::zeros((m, d)),
            bias_base: Array1::zeros(d),
            bias_ft: Array1::zeros(d),
        }
    }

    /// Flat views in [`PARAM_NAMES`] order.
    pub fn slices(&self) -> [&[T]; 6] {
        [
            self.w_enc.as_slice().expect("standard layout"),
            self.b_enc.as_slice().expect("standard layout"),
            self.dec_base.as_slice().expect("standard layout"),
            self.dec_ft.as_slice().expect("standard layout"),
            self.bias_base.as_slice().expect("standard layout"),
            self.bias_ft.as_slice().expect("standard layout"),
        ]
    }

    pub fn slices_mut(&mut self) -> [&mut [T]; 6] {
        [
            self.w_enc.as_slice_mut().expect("standard layout"),
            self.b_enc.as_slice_mut().expect("standard layout"),
            self.dec_base.as_slice_mut().expect("standard layout"),
            self.dec_ft.as_slice_mut().expect("standard layout"),
            self.bias_base.as_slice_mut().expect("standard layout"),
            self.bias_ft.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let c2 = |a: &Array2<T>| a.mapv(|v| U::from_f64_lossy(v.to_f64_lossy()));
        let c1 = |a: &Array1<T>| a.mapv(|v| U::from_f64_lossy(v.to_f64_lossy()));
        Params {
            w_enc: c2(&self.w_enc),
            b_enc: c1(&self.b_enc),
            dec_base: c2(&self.dec_base),
            dec_ft: c2(&self.dec_ft),
            bias_base: c1(&self.bias_base),
            bias_ft: c1(&self.bias_ft),
        }
    }
}

/// A cross-coder with its sparsity target, inference threshold and input
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossCoder<T> {
    pub params: Params<T>,
    pub k: usize,
    pub expansion: usize,
    /// Running estimate of the batch selection threshold, used at inference.
    pub threshold: Option<f64>,
    pub norm: Option<NormalizationStats>,
    pub seed: u64,
}

impl<T: Real> CrossCoder<T> {
    pub fn d(&self) -> usize {
        self.params.dec_base.ncols()
    }

    pub fn m(&self) -> usize {
        self.params.dec_base.nrows()
    }

    /// `|D^b_j|^2 + |D^f_j|^2` per latent.
    pub fn decoder_sq_norms(&self) -> Array1<T> {
        let sq = |a: &Array2<T>| a.map_axis(Axis(1), |r| r.dot(&r));
        sq(&self.params.dec_base) + sq(&self.params.dec_ft)
    }

    /// Per-latent `(|D^b_j|, |D^f_j|)`.
    pub fn decoder_norms(&self) -> Vec<(f64, f64)> {
        let norm = |a: &Array2<T>, j: usize| {
            a.row(j)
                .iter()
                .map(|v| v.to_f64_lossy().powi(2))
                .sum::<f64>()
                .sqrt()
        };
        (0..self.m())
            .map(|j| (norm(&self.params.dec_base, j), norm(&self.params.dec_ft, j)))
            .collect()
    }

    /// Divides each side by its fitted scale. A model without fitted
    /// statistics passes the batch through unchanged.
    pub fn normalize(&self, batch: &PairedActivationBatch<f32>) -> PairedActivationBatch<T> {
        let mut out = batch.cast::<T>();
        if let Some(stats) = &self.norm {
            out.base.mapv_inplace(|v| v / T::from_f64_lossy(stats.scale_base));
            out.ft.mapv_inplace(|v| v / T::from_f64_lossy(stats.scale_ft));
        }
        out
    }

    pub fn check_batch(&self, batch: &PairedActivationBatch<T>) -> Result<()> {
        if batch.base.ncols() != self.d() || batch.ft.ncols() != self.d() {
            return Err(Error::Shape(format!(
                "batch has d={} but model expects d={}",
                batch.base.ncols(),
                self.d()
            )));
        }
        if batch.base.nrows() != batch.ft.nrows() {
            return Err(Error::Shape("base and ft row counts differ".into()));
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> CrossCoder<U> {
        CrossCoder {
            params: self.params.cast(),
            k: self.k,
            expansion: self.expansion,
            threshold: self.threshold,
            norm: self.norm,
            seed: self.seed,
        }
    }
}

/// Decoder rows drawn from a standard normal and scaled to unit length; the
/// encoder starts as the transpose of the stacked decoders; biases are zero.
pub fn init_model<T: Real>(d: usize, expansion: usize, k: usize, seed: u64) -> Result<CrossCoder<T>> {
    if d == 0 {
        return Err(Error::Param("d must be at least 1".into()));
    }
    if expansion == 0 {
        return Err(Error::Param("expansion factor must be at least 1".into()));
    }
    let m = d * expansion;
    if k == 0 || k > m {
        return Err(Error::Param(format!("k={k} must lie in 1..={m}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let unit_rows = |rng: &mut ChaCha8Rng| {
        let mut a = Array2::<T>::zeros((m, d));
        for mut row in a.rows_mut() {
            let mut sq = 0.0f64;
            for v in row.iter_mut() {
                let x: f64 = StandardNormal.sample(rng);
                sq += x * x;
                *v = T::from_f64_lossy(x);
            }
            let inv = T::from_f64_lossy(1.0 / sq.sqrt());
            row.mapv_inplace(|v| v * inv);
        }
        a
    };
    let dec_base = unit_rows(&mut rng);
    let dec_ft = unit_rows(&mut rng);
    let mut w_enc = Array2::<T>::zeros((2 * d, m));
    w_enc.slice_mut(ndarray::s![0..d, ..]).assign(&dec_base.t());
    w_enc.slice_mut(ndarray::s![d.., ..]).assign(&dec_ft.t());
    Ok(CrossCoder {
        params: Params {
            w_enc,
            b_enc: Array1::zeros(m),
            dec_base,
            dec_ft,
            bias_base: Array1::zeros(d),
            bias_ft: Array1::zeros(d),
        },
        k,
        expansion,
        threshold: None,
        norm: None,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_expansion() {
        let model = init_model::<f64>(4, 2, 3, 1).unwrap();
        assert_eq!(model.m(), 8);
        assert_eq!(model.params.w_enc.dim(), (8, 8));
        assert_eq!(model.params.dec_base.dim(), (8, 4));
        assert_eq!(model.params.b_enc.len(), 8);
    }

    #[test]
    fn decoder_rows_unit_norm_and_encoder_is_transpose() {
        let model = init_model::<f64>(5, 3, 2, 9).unwrap();
        for (nb, nf) in model.decoder_norms() {
            assert!((nb - 1.0).abs() < 1e-12 && (nf - 1.0).abs() < 1e-12);
        }
        let p = &model.params;
        for j in 0..model.m() {
            for c in 0..5 {
                assert_eq!(p.w_enc[[c, j]], p.dec_base[[j, c]]);
                assert_eq!(p.w_enc[[5 + c, j]], p.dec_ft[[j, c]]);
            }
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = init_model::<f32>(6, 4, 3, 77).unwrap();
        let b = init_model::<f32>(6, 4, 3, 77).unwrap();
        assert_eq!(a, b);
        let c = init_model::<f32>(6, 4, 3, 78).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn k_above_m_rejected() {
        assert!(matches!(init_model::<f32>(2, 2, 5, 0), Err(Error::Param(_))));
        assert!(matches!(init_model::<f32>(0, 2, 1, 0), Err(Error::Param(_))));
    }
}
