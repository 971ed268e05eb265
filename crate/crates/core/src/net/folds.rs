use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};

/// Paired input/target rows with the block (source voxel + its rotations)
/// each row belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelDataset {
    pub inputs: DMatrix<f64>,
    pub targets: DMatrix<f64>,
    pub block_ids: Vec<u32>,
}

impl VoxelDataset {
    pub fn new(inputs: DMatrix<f64>, targets: DMatrix<f64>, block_ids: Vec<u32>) -> Result<Self> {
        if inputs.nrows() != targets.nrows() {
            return Err(Error::LengthMismatch {
                expected: inputs.nrows(),
                found: targets.nrows(),
            });
        }
        if block_ids.len() != inputs.nrows() {
            return Err(Error::LengthMismatch {
                expected: inputs.nrows(),
                found: block_ids.len(),
            });
        }
        let sizes = block_sizes(&block_ids);
        let mut it = sizes.values();
        if let Some(first) = it.next() {
            if it.any(|s| s != first) {
                return Err(invalid("all blocks must contain the same number of rows"));
            }
        }
        Ok(Self {
            inputs,
            targets,
            block_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.nrows() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn target_dim(&self) -> usize {
        self.targets.ncols()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        Self::new(
            self.inputs.select_rows(rows),
            self.targets.select_rows(rows),
            rows.iter().map(|&r| self.block_ids[r]).collect(),
        )
    }
}

fn block_sizes(ids: &[u32]) -> BTreeMap<u32, usize> {
    let mut sizes = BTreeMap::new();
    for &id in ids {
        *sizes.entry(id).or_insert(0) += 1;
    }
    sizes
}

/// Row indices of one cross-validation fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Block-level k-fold split: blocks are shuffled by `seed` and dealt into `k`
/// contiguous groups whose sizes differ by at most one; every row follows its
/// block. Row order within each side is ascending.
pub fn kfold_split_blocks(block_ids: &[u32], k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(invalid("k-fold split needs k >= 2"));
    }
    let mut blocks: Vec<u32> = block_sizes(block_ids).into_keys().collect();
    if blocks.len() < k {
        return Err(invalid(format!(
            "{} blocks cannot be split into {k} folds",
            blocks.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    blocks.shuffle(&mut rng);
    let (base, extra) = (blocks.len() / k, blocks.len() % k);
    let mut fold_of = BTreeMap::new();
    let mut start = 0;
    for f in 0..k {
        let size = base + usize::from(f < extra);
        for &b in &blocks[start..start + size] {
            fold_of.insert(b, f);
        }
        start += size;
    }
    Ok((0..k)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) =
                (0..block_ids.len()).partition(|&r| fold_of[&block_ids[r]] == f);
            Fold { train, test }
        })
        .collect())
}

pub fn kfold_split(data: &VoxelDataset, k: usize, seed: u64) -> Result<Vec<Fold>> {
    kfold_split_blocks(&data.block_ids, k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn ids(blocks: u32, per: usize) -> Vec<u32> {
        (0..blocks).flat_map(|b| std::iter::repeat_n(b, per)).collect()
    }

    #[test]
    fn ten_blocks_five_folds() {
        let ids = ids(10, 3);
        let folds = kfold_split_blocks(&ids, 5, 1).unwrap();
        let mut seen = BTreeSet::new();
        for f in &folds {
            let blocks: BTreeSet<u32> = f.test.iter().map(|&r| ids[r]).collect();
            assert_eq!(blocks.len(), 2);
            let train_blocks: BTreeSet<u32> = f.train.iter().map(|&r| ids[r]).collect();
            assert!(blocks.is_disjoint(&train_blocks));
            assert_eq!(f.train.len() + f.test.len(), ids.len());
            for b in blocks {
                assert!(seen.insert(b));
            }
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn near_equal_block_counts() {
        let ids = ids(567, 1);
        let folds = kfold_split_blocks(&ids, 8, 3).unwrap();
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert!(sizes.iter().all(|&s| s == 70 || s == 71));
        assert_eq!(sizes.iter().sum::<usize>(), 567);
    }

    #[test]
    fn too_few_blocks() {
        assert!(kfold_split_blocks(&ids(3, 2), 5, 0).is_err());
        assert!(kfold_split_blocks(&ids(3, 2), 1, 0).is_err());
    }

    #[test]
    fn uneven_blocks_rejected() {
        let x = DMatrix::zeros(3, 2);
        assert!(VoxelDataset::new(x.clone(), x.clone(), vec![0, 0, 1]).is_err());
        assert!(VoxelDataset::new(x.clone(), x, vec![0, 1, 2]).is_ok());
    }
}
