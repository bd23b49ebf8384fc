use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ActivationShard;
use crate::{Error, Real, Result};

/// Row-aligned base and fine-tuned activations for one batch of tokens.
///
/// Row `i` of `base` and row `i` of `ft` come from the same token, whose
/// position in the source shards is `offsets[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedActivationBatch<T = f32> {
    pub base: Array2<T>,
    pub ft: Array2<T>,
    pub offsets: Vec<u64>,
}

impl<T: Real> PairedActivationBatch<T> {
    pub fn new(base: Array2<T>, ft: Array2<T>, offsets: Vec<u64>) -> Result<Self> {
        if base.dim() != ft.dim() {
            return Err(Error::Shape(format!(
                "base rows {:?} vs ft rows {:?}",
                base.dim(),
                ft.dim()
            )));
        }
        if offsets.len() != base.nrows() {
            return Err(Error::Shape(format!(
                "{} offsets for {} rows",
                offsets.len(),
                base.nrows()
            )));
        }
        Ok(PairedActivationBatch { base, ft, offsets })
    }

    pub fn len(&self) -> usize {
        self.base.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.base.nrows() == 0
    }

    pub fn d_model(&self) -> usize {
        self.base.ncols()
    }

    pub fn cast<U: Real>(&self) -> PairedActivationBatch<U> {
        let conv = |a: &Array2<T>| a.mapv(|v| U::from_f64_lossy(v.to_f64_lossy()));
        PairedActivationBatch {
            base: conv(&self.base),
            ft: conv(&self.ft),
            offsets: self.offsets.clone(),
        }
    }
}

/// One epoch of shuffled, paired batches over two shards.
pub struct BatchStream<'a> {
    base: &'a ActivationShard,
    ft: &'a ActivationShard,
    order: Vec<u64>,
    batch_size: usize,
    cursor: usize,
}

impl<'a> BatchStream<'a> {
    pub fn n_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }

    /// Row order for the whole epoch.
    pub fn order(&self) -> &[u64] {
        &self.order
    }
}

impl Iterator for BatchStream<'_> {
    type Item = PairedActivationBatch<f32>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.cursor >= self.order.len() {
            return None;
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let offsets = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        Some(PairedActivationBatch {
            base: self.base.gather(&offsets),
            ft: self.ft.gather(&offsets),
            offsets,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.cursor).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for BatchStream<'_> {}

/// Shuffles row indices without replacement with `shuffle_seed` and yields
/// batches of `batch_size` rows; the last batch may be short.
pub fn pair_batches<'a>(
    base: &'a ActivationShard,
    ft: &'a ActivationShard,
    batch_size: usize,
    shuffle_seed: u64,
) -> Result<BatchStream<'a>> {
    base.check_pairable(ft)?;
    if batch_size == 0 {
        return Err(Error::Param("batch_size must be at least 1".into()));
    }
    let mut order: Vec<u64> = (0..base.header().n_rows).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    order.shuffle(&mut rng);
    Ok(BatchStream {
        base,
        ft,
        order,
        batch_size,
        cursor: 0,
    })
}

/// Batches in stored row order, for evaluation passes.
pub(crate) fn sequential_batches<'a>(
    base: &'a ActivationShard,
    ft: &'a ActivationShard,
    batch_size: usize,
) -> Result<BatchStream<'a>> {
    base.check_pairable(ft)?;
    if batch_size == 0 {
        return Err(Error::Param("batch_size must be at least 1".into()));
    }
    Ok(BatchStream {
        base,
        ft,
        order: (0..base.header().n_rows).collect(),
        batch_size,
        cursor: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::{DType, ModelTag, ShardMeta};
    use proptest::prelude::*;

    fn shard(tag: ModelTag, n: usize, d: usize) -> ActivationShard {
        let rows: Vec<Vec<f32>> = (0..n)
            .map(|i| (0..d).map(|j| (i * d + j) as f32).collect())
            .collect();
        ActivationShard::from_rows(
            ShardMeta {
                model_tag: tag,
                layer_index: 1,
                dtype: DType::F32,
                corpus_ref: "c".into(),
            },
            rows,
            None,
        )
        .unwrap()
    }

    #[test]
    fn ten_rows_batch_four() {
        let (b, f) = (shard(ModelTag::Base, 10, 2), shard(ModelTag::Finetuned, 10, 2));
        let sizes: Vec<usize> = pair_batches(&b, &f, 4, 0).unwrap().map(|x| x.len()).collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn same_seed_same_order() {
        let (b, f) = (shard(ModelTag::Base, 50, 2), shard(ModelTag::Finetuned, 50, 2));
        let a: Vec<Vec<u64>> = pair_batches(&b, &f, 7, 42).unwrap().map(|x| x.offsets).collect();
        let c: Vec<Vec<u64>> = pair_batches(&b, &f, 7, 42).unwrap().map(|x| x.offsets).collect();
        assert_eq!(a, c);
    }

    #[test]
    fn mismatched_rows_name_field() {
        let (b, f) = (shard(ModelTag::Base, 10, 2), shard(ModelTag::Finetuned, 9, 2));
        match pair_batches(&b, &f, 4, 0) {
            Err(Error::Pairing { field, .. }) => assert_eq!(field, "n_rows"),
            _ => panic!("expected pairing error"),
        }
    }

    #[test]
    fn zero_batch_size_rejected() {
        let (b, f) = (shard(ModelTag::Base, 3, 2), shard(ModelTag::Finetuned, 3, 2));
        assert!(matches!(pair_batches(&b, &f, 0, 0), Err(Error::Param(_))));
    }

    proptest! {
        #[test]
        fn epoch_covers_every_row_once(n in 1usize..60, bs in 1usize..17, seed in any::<u64>()) {
            let (b, f) = (shard(ModelTag::Base, n, 3), shard(ModelTag::Finetuned, n, 3));
            let mut seen: Vec<u64> = Vec::new();
            for batch in pair_batches(&b, &f, bs, seed).unwrap() {
                // rows are aligned with their offsets in both matrices
                for (row, &off) in batch.offsets.iter().enumerate() {
                    prop_assert_eq!(batch.base[[row, 0]], (off as usize * 3) as f32);
                    prop_assert_eq!(batch.ft[[row, 0]], (off as usize * 3) as f32);
                }
                seen.extend(batch.offsets);
            }
            // multiset equality oracle: sorted sequences equal 0..n
            seen.sort_unstable();
            prop_assert_eq!(seen, (0..n as u64).collect::<Vec<_>>());
        }
    }
}
