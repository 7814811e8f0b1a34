//! Inter-branch feature diversity.
//!
//! For every block m, image d and unordered branch pair (i, j), the metric
//! accumulates the Euclidean distance between the flattened branch features
//! divided by their length L, normalized by 1 / (N_m * N_d * N_b). Branch
//! pairs with different feature lengths (width-w identity branch vs
//! expanded simplified branches) are skipped and reported.

use serde::Serialize;

use crate::arch::ModelGraph;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tensor::{Element, Tensor};

#[derive(Debug, Clone, Serialize)]
pub struct PairDistance {
    pub i: usize,
    pub j: usize,
    /// ||f_i - f_j||_2 / L, averaged over images.
    pub distance: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockDiversity {
    pub block: String,
    pub pairs: Vec<PairDistance>,
    /// Unordered pairs skipped per image because the lengths differ.
    pub skipped_pairs: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiversityReport {
    pub diversity: f64,
    pub images: usize,
    pub blocks: usize,
    pub branches: usize,
    pub per_block: Vec<BlockDiversity>,
}

/// Length-normalized distance between two flattened features, or None when
/// the lengths differ.
pub fn pair_distance(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() {
        return None;
    }
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    Some(acc.sqrt() / a.len() as f64)
}

/// Diversity of explicit per-image, per-block branch features:
/// `features[d][m][i]` is branch i of block m for image d, flattened.
/// Returns the scalar metric plus the per-pair breakdown of block 0.
pub fn diversity_of_features(features: &[Vec<Vec<Vec<f64>>>], branches: usize) -> Result<f64> {
    if branches < 2 {
        return Err(Error::InvalidArgument {
            op: "branch_diversity",
            detail: format!("need at least 2 branches, got {branches}"),
        });
    }
    let images = features.len();
    let blocks = features.first().map_or(0, |f| f.len());
    if images == 0 || blocks == 0 {
        return Err(Error::InvalidArgument {
            op: "branch_diversity",
            detail: "need at least one image and one block".into(),
        });
    }
    let mut total = 0.0;
    for per_image in features {
        for block in per_image {
            for i in 0..block.len() {
                for j in (i + 1)..block.len() {
                    if let Some(d) = pair_distance(&block[i], &block[j]) {
                        total += d;
                    }
                }
            }
        }
    }
    Ok(total / (images * blocks * branches) as f64)
}

/// Evaluate the metric over a model's blocks (backbone and neck) on a set
/// of images, in eval mode.
pub fn branch_diversity<T: Element>(
    model: &ModelGraph<T>,
    images: &[Tensor<T>],
) -> Result<DiversityReport> {
    let branches = model.variant.branches;
    if branches < 2 {
        return Err(Error::InvalidArgument {
            op: "branch_diversity",
            detail: format!("need at least 2 branches, got {branches}"),
        });
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument {
            op: "branch_diversity",
            detail: "need at least one image".into(),
        });
    }

    let mut block_names: Vec<String> = Vec::new();
    let mut pair_sums: Vec<Vec<(usize, usize, f64)>> = Vec::new();
    let mut skipped: Vec<usize> = Vec::new();
    let mut total = 0.0;

    for (d, image) in images.iter().enumerate() {
        let (_, captured) = model.forward_with_branches(image, Mode::Eval)?;
        if d == 0 {
            for blk in &captured {
                block_names.push(blk.block.clone());
                pair_sums.push(Vec::new());
                skipped.push(0);
            }
        }
        for (m, blk) in captured.iter().enumerate() {
            let flat: Vec<Vec<f64>> = blk
                .branches
                .iter()
                .map(|t| t.data().iter().map(|v| v.to_f64()).collect())
                .collect();
            for i in 0..flat.len() {
                for j in (i + 1)..flat.len() {
                    match pair_distance(&flat[i], &flat[j]) {
                        Some(dist) => {
                            total += dist;
                            match pair_sums[m].iter_mut().find(|(a, b, _)| *a == i && *b == j) {
                                Some(entry) => entry.2 += dist,
                                None => pair_sums[m].push((i, j, dist)),
                            }
                        }
                        None => {
                            if d == 0 {
                                skipped[m] += 1;
                            }
                        }
                    }
                }
            }
        }
    }

    let images_n = images.len();
    let blocks_n = block_names.len();
    let per_block = block_names
        .into_iter()
        .zip(pair_sums)
        .zip(skipped)
        .map(|((block, sums), skipped_pairs)| BlockDiversity {
            block,
            pairs: sums
                .into_iter()
                .map(|(i, j, s)| PairDistance { i, j, distance: s / images_n as f64 })
                .collect(),
            skipped_pairs,
        })
        .collect();

    Ok(DiversityReport {
        diversity: total / (images_n * blocks_n * branches) as f64,
        images: images_n,
        blocks: blocks_n,
        branches,
        per_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn hand_computed_two_branch_case() {
        // Two branches, L = 4, differing by exactly 1 everywhere:
        // pair term = sqrt(4)/4 = 0.5; with one image, one block, N_b = 2
        // the metric is 0.25.
        let f1 = vec![1.0, 2.0, 3.0, 4.0];
        let f2 = vec![2.0, 3.0, 4.0, 5.0];
        let d = diversity_of_features(&[vec![vec![f1, f2]]], 2).unwrap();
        assert_eq!(d, 0.25);
    }

    #[test]
    fn zero_for_identical_branches() {
        let f = vec![0.3, -0.7, 1.1];
        let d = diversity_of_features(&[vec![vec![f.clone(), f.clone(), f]]], 3).unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn permutation_invariant() {
        let mut rng = Rng::new(1);
        let branches: Vec<Vec<f64>> =
            (0..3).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let base = diversity_of_features(&[vec![branches.clone()]], 3).unwrap();
        let permuted = vec![branches[2].clone(), branches[0].clone(), branches[1].clone()];
        let perm = diversity_of_features(&[vec![permuted]], 3).unwrap();
        assert!((base - perm).abs() < 1e-15);
    }

    #[test]
    fn absolutely_homogeneous() {
        let mut rng = Rng::new(2);
        let branches: Vec<Vec<f64>> =
            (0..3).map(|_| (0..8).map(|_| rng.normal()).collect()).collect();
        let base = diversity_of_features(&[vec![branches.clone()]], 3).unwrap();
        let alpha = -2.5f64;
        let scaled: Vec<Vec<f64>> = branches
            .iter()
            .map(|b| b.iter().map(|v| alpha * v).collect())
            .collect();
        let s = diversity_of_features(&[vec![scaled]], 3).unwrap();
        assert!((s - alpha.abs() * base).abs() < 1e-12);
    }

    #[test]
    fn mismatched_lengths_are_skipped() {
        let a = vec![1.0, 2.0];
        let b = vec![1.0, 2.0, 3.0];
        assert!(pair_distance(&a, &b).is_none());
    }
}
