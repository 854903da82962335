//! Padded mini-batches of variable-cardinality sets.

use crate::datagen::Instance;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededRng};
use crate::permutation::Permutation;

/// Batches per cardinality-sorted pool when bucketing.
const POOL_BATCHES: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    /// One `n_max x d_raw` matrix per item; rows past the item's cardinality are zero.
    pub elements: Vec<Matrix>,
    pub pad_mask: Vec<Vec<bool>>,
    pub targets: Vec<Permutation>,
    pub cardinalities: Vec<usize>,
}

/// Zero-pads an element matrix to `n_max` rows.
pub fn pad(elements: &Matrix, n_max: usize) -> (Matrix, Vec<bool>) {
    let n = elements.rows();
    let mut out = Matrix::zeros(n_max, elements.cols());
    out.data_mut()[..elements.len()].copy_from_slice(elements.data());
    let mask = (0..n_max).map(|r| r < n).collect();
    (out, mask)
}

impl TrainBatch {
    pub fn new(items: &[&Instance]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let d = items[0].d_raw();
        let n_max = items.iter().map(|i| i.len()).max().unwrap_or(0);
        let mut b = Self {
            elements: Vec::with_capacity(items.len()),
            pad_mask: Vec::with_capacity(items.len()),
            targets: Vec::with_capacity(items.len()),
            cardinalities: Vec::with_capacity(items.len()),
        };
        for inst in items {
            if inst.d_raw() != d {
                return Err(Error::Shape(format!("batch mixes d_raw {d} and {}", inst.d_raw())));
            }
            let target = inst
                .target
                .clone()
                .ok_or_else(|| Error::InvalidArgument("training instance without a target".into()))?;
            let (x, mask) = pad(&inst.elements, n_max);
            b.elements.push(x);
            b.pad_mask.push(mask);
            b.targets.push(target);
            b.cardinalities.push(inst.len());
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    pub fn n_max(&self) -> usize {
        self.elements.first().map_or(0, Matrix::rows)
    }
}

/// Splits a shuffled epoch order into batches of similar cardinality:
/// consecutive pools of `POOL_BATCHES` batches are sorted by set size, cut
/// into batches, and the batch order is shuffled.
pub fn bucketed_batches(data: &[Instance], order: &[usize], batch_size: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut batches = Vec::new();
    for pool in order.chunks(batch_size * POOL_BATCHES) {
        let mut pool = pool.to_vec();
        pool.sort_by_key(|&i| data[i].len());
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    rng.shuffle(&mut batches);
    batches
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::TaskTag;
    use serde_json::Map;

    fn inst(n: usize) -> Instance {
        let x = Matrix::from_vec(n, 2, (0..2 * n).map(|v| v as f64 + 1.0).collect()).unwrap();
        Instance::new(x, Some(Permutation::identity(n)), TaskTag::Embedded, Map::new()).unwrap()
    }

    #[test]
    fn padding_layout() {
        let (a, b) = (inst(2), inst(4));
        let batch = TrainBatch::new(&[&a, &b]).unwrap();
        assert_eq!(batch.n_max(), 4);
        assert_eq!(batch.pad_mask[0], vec![true, true, false, false]);
        assert_eq!(batch.elements[0].row(1), &[3.0, 4.0]);
        assert_eq!(batch.elements[0].row(2), &[0.0, 0.0]);
        assert_eq!(batch.cardinalities, vec![2, 4]);
    }

    #[test]
    fn buckets_cover_every_index_once() {
        let data: Vec<Instance> = (0..50).map(|i| inst(1 + i % 7)).collect();
        let mut rng = SeededRng::new(0);
        let order = rng.permutation(50);
        let batches = bucketed_batches(&data, &order, 4, &mut rng);
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        assert_eq!(seen, (0..50).collect::<Vec<_>>());
        assert!(batches.iter().all(|b| b.len() <= 4));
    }

    #[test]
    fn rejects_missing_targets_and_mixed_widths() {
        let mut a = inst(2);
        a.target = None;
        assert!(TrainBatch::new(&[&a]).is_err());
        let b = Instance::new(Matrix::zeros(2, 3), Some(Permutation::identity(2)), TaskTag::Embedded, Map::new()).unwrap();
        assert!(TrainBatch::new(&[&inst(2), &b]).is_err());
        assert!(TrainBatch::new(&[]).is_err());
    }
}
