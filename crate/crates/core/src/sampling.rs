//! Batch composition: uniform draws and category-guided hard-negative
//! batches that fill a batch with products from one category subtree.

use crate::error::{Error, Result};

/// Hierarchical category index. Paths have at most four levels; every
/// product sits under exactly one leaf path.
#[derive(Debug, Clone)]
pub struct CategoryTree {
    /// All distinct path prefixes, each with the products underneath,
    /// sorted by product index for deterministic draws.
    prefixes: Vec<(Vec<String>, Vec<usize>)>,
    /// Leaf path per product index.
    leaf_of: Vec<Vec<String>>,
    max_depth: usize,
}

pub const MAX_CATEGORY_DEPTH: usize = 4;

impl CategoryTree {
    /// Build from one path per product (product index = position).
    pub fn build(paths: &[Vec<String>]) -> Result<Self> {
        use std::collections::BTreeMap;
        let mut by_prefix: BTreeMap<Vec<String>, Vec<usize>> = BTreeMap::new();
        let mut max_depth = 0;
        for (idx, path) in paths.iter().enumerate() {
            if path.is_empty() {
                return Err(Error::Parameter(format!(
                    "product {idx} has an empty category path"
                )));
            }
            if path.len() > MAX_CATEGORY_DEPTH {
                return Err(Error::Parameter(format!(
                    "product {idx} path deeper than {MAX_CATEGORY_DEPTH} levels"
                )));
            }
            max_depth = max_depth.max(path.len());
            for level in 1..=path.len() {
                by_prefix.entry(path[..level].to_vec()).or_default().push(idx);
            }
        }
        Ok(Self {
            prefixes: by_prefix.into_iter().collect(),
            leaf_of: paths.to_vec(),
            max_depth,
        })
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn len(&self) -> usize {
        self.leaf_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaf_of.is_empty()
    }

    pub fn leaf_path(&self, product: usize) -> &[String] {
        &self.leaf_of[product]
    }

    /// Products whose path starts with `prefix`.
    pub fn members(&self, prefix: &[String]) -> Option<&[usize]> {
        self.prefixes
            .binary_search_by(|(p, _)| p.as_slice().cmp(prefix))
            .ok()
            .map(|i| self.prefixes[i].1.as_slice())
    }
}

/// Draw `n` distinct product indices uniformly without replacement.
pub fn compose_batch_uniform(
    dataset_len: usize,
    n: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<usize>> {
    if n > dataset_len {
        return Err(Error::Capacity(format!(
            "cannot draw {n} from a dataset of {dataset_len}"
        )));
    }
    Ok(rand::seq::index::sample(rng, dataset_len, n).into_vec())
}

/// Draw a batch of hard negatives: pick an anchor uniformly, truncate its
/// category path to `level`, and fill the batch from that subtree. Falls
/// back to a uniform draw when the subtree is smaller than the batch.
pub fn compose_batch_category(
    tree: &CategoryTree,
    n: usize,
    level: usize,
    rng: &mut impl rand::Rng,
) -> Result<Vec<usize>> {
    if tree.is_empty() {
        return Err(Error::Capacity("category tree is empty".into()));
    }
    if level > tree.max_depth() {
        return Err(Error::Parameter(format!(
            "level {level} exceeds tree depth {}",
            tree.max_depth()
        )));
    }
    let anchor = rng.random_range(0..tree.len());
    let path = tree.leaf_path(anchor);
    let level = level.min(path.len()).max(1);
    let prefix = &path[..level];
    let members = tree
        .members(prefix)
        .expect("anchor's own prefix always present");
    if members.len() >= n {
        let picks = rand::seq::index::sample(rng, members.len(), n);
        Ok(picks.into_iter().map(|i| members[i]).collect())
    } else {
        compose_batch_uniform(tree.len(), n, rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn path(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn exhaustive_draw_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut batch = compose_batch_uniform(10, 10, &mut rng).unwrap();
        batch.sort_unstable();
        assert_eq!(batch, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn same_seed_same_batch() {
        let a = compose_batch_uniform(100, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = compose_batch_uniform(100, 7, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversized_draw_is_a_capacity_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert!(matches!(
            compose_batch_uniform(3, 4, &mut rng),
            Err(Error::Capacity(_))
        ));
    }

    #[test]
    fn single_draw_frequencies_are_uniform() {
        // 1e5 single draws from 10 ids: each frequency within 0.1 +- 0.01.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 10];
        let draws = 100_000;
        for _ in 0..draws {
            let batch = compose_batch_uniform(10, 1, &mut rng).unwrap();
            counts[batch[0]] += 1;
        }
        for (id, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.1).abs() <= 0.01, "id {id} freq {freq}");
        }
    }

    fn two_branch_tree() -> CategoryTree {
        // 10 products under A>B, 10 under D>E.
        let mut paths = Vec::new();
        for _ in 0..10 {
            paths.push(path(&["A", "B"]));
        }
        for _ in 0..10 {
            paths.push(path(&["D", "E"]));
        }
        CategoryTree::build(&paths).unwrap()
    }

    #[test]
    fn category_batch_shares_the_anchor_prefix() {
        let tree = two_branch_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let batch = compose_batch_category(&tree, 4, 1, &mut rng).unwrap();
            let first = &tree.leaf_path(batch[0])[..1];
            for &idx in &batch {
                assert_eq!(&tree.leaf_path(idx)[..1], first);
            }
        }
    }

    #[test]
    fn small_subtree_falls_back_to_uniform() {
        // One tiny branch (2 products) and one large; batch of 4 must always
        // be well-formed even when the anchor lands in the tiny branch.
        let mut paths = vec![path(&["Tiny"]); 2];
        paths.extend(std::iter::repeat_n(path(&["Big"]), 8));
        let tree = CategoryTree::build(&paths).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut saw_fallback = false;
        for _ in 0..50 {
            let batch = compose_batch_category(&tree, 4, 1, &mut rng).unwrap();
            assert_eq!(batch.len(), 4);
            let mut sorted = batch.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), 4, "batch has repeats");
            if batch.iter().any(|&i| i < 2) && batch.iter().any(|&i| i >= 2) {
                saw_fallback = true;
            }
        }
        assert!(saw_fallback, "tiny-branch anchor never exercised the fallback");
    }

    #[test]
    fn batches_never_repeat_ids() {
        let tree = two_branch_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let batch = compose_batch_category(&tree, 6, 2, &mut rng).unwrap();
            let mut sorted = batch.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(sorted.len(), batch.len());
        }
    }

    #[test]
    fn deeper_level_than_tree_is_rejected() {
        let tree = two_branch_tree();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        assert!(matches!(
            compose_batch_category(&tree, 2, 3, &mut rng),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn empty_tree_is_a_capacity_error() {
        let tree = CategoryTree::build(&[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        assert!(matches!(
            compose_batch_category(&tree, 1, 1, &mut rng),
            Err(Error::Capacity(_))
        ));
    }
}
