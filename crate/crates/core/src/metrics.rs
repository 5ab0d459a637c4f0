//! Evaluation metrics.
//!
//! Three families:
//! - embedding quality against the hierarchy (distortion, mean average
//!   precision, per-level norm statistics),
//! - binary ID/OOD detection (AUROC, AUPR, FPR at a target TPR),
//! - hierarchical generalization of predicted ID classes for OOD samples
//!   (H-Dist and the hierarchical similarity indices).
//!
//! Scores follow the convention that higher means more in-distribution; a
//! sample is flagged OOD when its score falls below the threshold sigma.
//! Variances are population variances throughout.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::embedder::EmbeddingSet;
use crate::error::{Error, Result};
use crate::geometry::Ball;
use crate::hierarchy::{GraphDistances, Hierarchy};

/// One scored test sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredSample {
    pub score: f64,
    pub is_id: bool,
}

impl ScoredSample {
    pub fn new(score: f64, is_id: bool) -> Result<Self> {
        if !score.is_finite() {
            return Err(Error::NonFinite(0));
        }
        Ok(ScoredSample { score, is_id })
    }
}

/// Detection metrics for one (ID, OOD) dataset pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auroc: f64,
    pub aupr: f64,
    pub fpr_at_95: f64,
    pub n_id: usize,
    pub n_ood: usize,
}

/// Hierarchical generalization metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierReport {
    pub h_dist: f64,
    pub hsi_b1: f64,
    pub hsi_b2: f64,
    pub m: usize,
}

fn emb_index(emb: &EmbeddingSet, h: &Hierarchy) -> Result<Vec<usize>> {
    let by_name: HashMap<&str, usize> = (0..emb.len()).map(|i| (emb.name(i), i)).collect();
    (0..h.len())
        .map(|i| {
            by_name
                .get(h.name(i))
                .copied()
                .ok_or_else(|| Error::UnknownNode(h.name(i).to_string()))
        })
        .collect()
}

/// Mean relative deviation of embedded distances from graph distances over
/// unordered node pairs.
pub fn distortion_metric(
    emb: &EmbeddingSet,
    h: &Hierarchy,
    dist: &GraphDistances,
) -> Result<f64> {
    let map = emb_index(emb, h)?;
    let ball = Ball::new(emb.curvature());
    let n = h.len();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let db = ball.distance(emb.point(map[i]), emb.point(map[j]));
            let dg = dist.get(i, j) as f64;
            total += (db - dg).abs() / dg;
            pairs += 1;
        }
    }
    Ok(total / pairs.max(1) as f64)
}

/// Mean average precision of graph neighbors under the distance ranking:
/// for each node, all other nodes are ranked by geodesic distance and the
/// average precision of its tree neighbors in that ranking is computed.
pub fn map_metric(emb: &EmbeddingSet, h: &Hierarchy) -> Result<f64> {
    let map = emb_index(emb, h)?;
    let ball = Ball::new(emb.curvature());
    let n = h.len();
    let mut total = 0.0;
    for u in 0..n {
        let mut neighbors: Vec<usize> = h.children(u).to_vec();
        if let Some(p) = h.parent(u) {
            neighbors.push(p);
        }
        let mut ranked: Vec<(f64, usize)> = (0..n)
            .filter(|&v| v != u)
            .map(|v| (ball.distance(emb.point(map[u]), emb.point(map[v])), v))
            .collect();
        ranked.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank, (_, v)) in ranked.iter().enumerate() {
            if neighbors.contains(v) {
                hits += 1;
                ap += hits as f64 / (rank + 1) as f64;
            }
        }
        total += ap / neighbors.len() as f64;
    }
    Ok(total / n as f64)
}

/// Mean and population variance of Poincare norms per hierarchy level,
/// in level order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LevelNormStats {
    pub level: u32,
    pub count: usize,
    pub mean: f64,
    pub variance: f64,
}

pub fn level_norm_stats(emb: &EmbeddingSet, h: &Hierarchy) -> Result<Vec<LevelNormStats>> {
    let map = emb_index(emb, h)?;
    let ball = Ball::new(emb.curvature());
    let mut norms_by_level: Vec<Vec<f64>> = vec![Vec::new(); h.max_level() as usize + 1];
    for i in 0..h.len() {
        norms_by_level[h.level(i) as usize].push(ball.poincare_norm(emb.point(map[i])));
    }
    Ok(norms_by_level
        .iter()
        .enumerate()
        .map(|(level, norms)| {
            let count = norms.len();
            let mean = norms.iter().sum::<f64>() / count.max(1) as f64;
            let variance =
                norms.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count.max(1) as f64;
            LevelNormStats {
                level: level as u32,
                count,
                mean,
                variance,
            }
        })
        .collect())
}

fn split_counts(samples: &[ScoredSample]) -> Result<(usize, usize)> {
    let n_id = samples.iter().filter(|s| s.is_id).count();
    let n_ood = samples.len() - n_id;
    if n_id == 0 || n_ood == 0 {
        return Err(Error::SingleClassScores { n_id, n_ood });
    }
    Ok((n_id, n_ood))
}

/// Probability that a random ID sample outscores a random OOD sample, ties
/// counted one half (the Mann-Whitney statistic), computed through midranks.
pub fn auroc(samples: &[ScoredSample]) -> Result<f64> {
    let (n_id, n_ood) = split_counts(samples)?;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| a.score.partial_cmp(&b.score).expect("finite scores"));

    let mut rank_sum_id = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            j += 1;
        }
        // Ranks are 1-based; every member of the tie group gets the midrank.
        let midrank = (i + 1 + j) as f64 / 2.0;
        let ties_id = sorted[i..j].iter().filter(|s| s.is_id).count();
        rank_sum_id += midrank * ties_id as f64;
        i = j;
    }
    let u = rank_sum_id - (n_id * (n_id + 1)) as f64 / 2.0;
    Ok(u / (n_id as f64 * n_ood as f64))
}

/// Area under the precision-recall curve with ID as the positive class,
/// step-interpolated over descending score thresholds.
pub fn aupr(samples: &[ScoredSample]) -> Result<f64> {
    let (n_id, _) = split_counts(samples)?;
    let mut sorted: Vec<&ScoredSample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.score.partial_cmp(&a.score).expect("finite scores"));

    let mut area = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].score == sorted[i].score {
            if sorted[j].is_id {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        let recall = tp as f64 / n_id as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        area += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j;
    }
    Ok(area)
}

/// False-positive rate of OOD samples at the largest threshold sigma that
/// keeps the ID true-positive rate at or above `tpr` (score >= sigma means
/// accepted as ID). Returns `(fpr, sigma)`.
pub fn fpr_at_tpr(samples: &[ScoredSample], tpr: f64) -> Result<(f64, f64)> {
    if !(tpr > 0.0 && tpr <= 1.0) {
        return Err(Error::Config(format!("target TPR {tpr} outside (0, 1]")));
    }
    let (n_id, n_ood) = split_counts(samples)?;
    let mut id_scores: Vec<f64> = samples.iter().filter(|s| s.is_id).map(|s| s.score).collect();
    id_scores.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    let k = ((tpr * n_id as f64).ceil() as usize).clamp(1, n_id);
    let sigma = id_scores[k - 1];
    let fp = samples
        .iter()
        .filter(|s| !s.is_id && s.score >= sigma)
        .count();
    Ok((fp as f64 / n_ood as f64, sigma))
}

/// Convenience: detection report from separate ID and OOD score lists.
pub fn evaluate_scores(id_scores: &[f64], ood_scores: &[f64]) -> Result<EvalReport> {
    let mut samples = Vec::with_capacity(id_scores.len() + ood_scores.len());
    for &s in id_scores {
        samples.push(ScoredSample::new(s, true)?);
    }
    for &s in ood_scores {
        samples.push(ScoredSample::new(s, false)?);
    }
    Ok(EvalReport {
        auroc: auroc(&samples)?,
        aupr: aupr(&samples)?,
        fpr_at_95: fpr_at_tpr(&samples, 0.95)?.0,
        n_id: id_scores.len(),
        n_ood: ood_scores.len(),
    })
}

fn leaf_index(h: &Hierarchy, name: &str) -> Result<usize> {
    let idx = h.require(name)?;
    if !h.is_leaf(idx) {
        return Err(Error::Hierarchy(format!("'{name}' is not a leaf")));
    }
    Ok(idx)
}

/// Mean LCA height between predictions and ground truths: the number of
/// edges from the LCA down to the ground-truth leaf.
pub fn h_dist<S: AsRef<str>>(h: &Hierarchy, predictions: &[(S, S)]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Config("no predictions".into()));
    }
    let mut total = 0.0;
    for (pred, gt) in predictions {
        let p = leaf_index(h, pred.as_ref())?;
        let g = leaf_index(h, gt.as_ref())?;
        let (lca, _) = h.lca(p, g);
        total += (h.level(g) - h.level(lca)) as f64;
    }
    Ok(total / predictions.len() as f64)
}

/// Hierarchical similarity indices.
///
/// Per sample, with `a` the LCA of (prediction, ground truth):
/// - b1 uses the hop distance between the ground truth's direct ancestor
///   and `a`, clamped to at least 1; the contribution is its reciprocal.
/// - b2 uses the hop distance between the ground-truth class and `a`,
///   clamped to at least 1; the contribution is `1 / (ln(d + 1) * e)`.
///
/// The clamp keeps the reciprocal finite when the LCA coincides with the
/// reference node, assigning the maximum-similarity value.
pub fn hsi<S: AsRef<str>>(h: &Hierarchy, predictions: &[(S, S)]) -> Result<(f64, f64)> {
    if predictions.is_empty() {
        return Err(Error::Config("no predictions".into()));
    }
    let e = std::f64::consts::E;
    let mut b1 = 0.0;
    let mut b2 = 0.0;
    for (pred, gt) in predictions {
        let p = leaf_index(h, pred.as_ref())?;
        let g = leaf_index(h, gt.as_ref())?;
        let (lca, _) = h.lca(p, g);
        // Both reference nodes lie on the root-to-ground-truth chain, so hop
        // distances reduce to level differences.
        let parent = h
            .parent(g)
            .expect("a leaf in a parsed hierarchy always has a parent");
        let d1 = (h.level(parent) as i64 - h.level(lca) as i64).unsigned_abs() as f64;
        let d2 = (h.level(g) - h.level(lca)) as f64;
        b1 += 1.0 / d1.max(1.0);
        b2 += 1.0 / ((d2.max(1.0) + 1.0).ln() * e);
    }
    let m = predictions.len() as f64;
    Ok((b1 / m, b2 / m))
}

/// Convenience: both hierarchical metrics in one report.
pub fn hierarchical_report<S: AsRef<str>>(
    h: &Hierarchy,
    predictions: &[(S, S)],
) -> Result<HierReport> {
    let (hsi_b1, hsi_b2) = hsi(h, predictions)?;
    Ok(HierReport {
        h_dist: h_dist(h, predictions)?,
        hsi_b1,
        hsi_b2,
        m: predictions.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn samples(id: &[f64], ood: &[f64]) -> Vec<ScoredSample> {
        id.iter()
            .map(|&s| ScoredSample::new(s, true).unwrap())
            .chain(ood.iter().map(|&s| ScoredSample::new(s, false).unwrap()))
            .collect()
    }

    // O(n^2) pair-counting oracle for AUROC.
    fn auroc_oracle(s: &[ScoredSample]) -> f64 {
        let id: Vec<f64> = s.iter().filter(|x| x.is_id).map(|x| x.score).collect();
        let ood: Vec<f64> = s.iter().filter(|x| !x.is_id).map(|x| x.score).collect();
        let mut total = 0.0;
        for &a in &id {
            for &b in &ood {
                total += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (id.len() * ood.len()) as f64
    }

    // Exhaustive threshold-sweep oracle for AUPR: recomputes the confusion
    // counts from scratch at every distinct threshold.
    fn aupr_oracle(s: &[ScoredSample]) -> f64 {
        let n_id = s.iter().filter(|x| x.is_id).count();
        let mut thresholds: Vec<f64> = s.iter().map(|x| x.score).collect();
        thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
        thresholds.dedup();
        let mut area = 0.0;
        let mut prev_recall = 0.0;
        for &sigma in &thresholds {
            let tp = s.iter().filter(|x| x.is_id && x.score >= sigma).count();
            let fp = s.iter().filter(|x| !x.is_id && x.score >= sigma).count();
            let recall = tp as f64 / n_id as f64;
            let precision = tp as f64 / (tp + fp).max(1) as f64;
            area += (recall - prev_recall) * precision;
            prev_recall = recall;
        }
        area
    }

    // Threshold-sweep oracle for FPR at the target TPR.
    fn fpr_oracle(s: &[ScoredSample], tpr: f64) -> (f64, f64) {
        let n_id = s.iter().filter(|x| x.is_id).count();
        let n_ood = s.len() - n_id;
        let mut best: Option<(f64, f64)> = None;
        let mut sigmas: Vec<f64> = s.iter().filter(|x| x.is_id).map(|x| x.score).collect();
        sigmas.sort_by(|a, b| b.partial_cmp(a).unwrap());
        for &sigma in &sigmas {
            let got_tpr =
                s.iter().filter(|x| x.is_id && x.score >= sigma).count() as f64 / n_id as f64;
            if got_tpr >= tpr {
                let fp = s.iter().filter(|x| !x.is_id && x.score >= sigma).count();
                best = Some((fp as f64 / n_ood as f64, sigma));
                break; // first (largest) sigma achieving the target
            }
        }
        best.unwrap()
    }

    #[test]
    fn auroc_perfect_separation() {
        let s = samples(&[3.0, 4.0, 5.0], &[0.0, 1.0, 2.0]);
        assert_eq!(auroc(&s).unwrap(), 1.0);
    }

    #[test]
    fn auroc_all_ties_is_half() {
        let s = samples(&[1.0, 1.0, 1.0], &[1.0, 1.0]);
        assert_eq!(auroc(&s).unwrap(), 0.5);
    }

    #[test]
    fn auroc_six_mixed_samples_match_oracle() {
        let s = samples(&[0.9, 0.4, 0.4], &[0.6, 0.4, 0.1]);
        assert_eq!(auroc(&s).unwrap(), auroc_oracle(&s));
    }

    #[test]
    fn auroc_rejects_single_class() {
        let s = samples(&[1.0, 2.0], &[]);
        assert!(auroc(&s).is_err());
    }

    #[test]
    fn aupr_perfect_separation() {
        let s = samples(&[3.0, 4.0], &[0.0, 1.0]);
        assert_eq!(aupr(&s).unwrap(), 1.0);
    }

    #[test]
    fn aupr_constant_scores_equal_prevalence() {
        let s = samples(&[1.0, 1.0, 1.0], &[1.0]);
        assert!((aupr(&s).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn aupr_eight_samples_match_oracle() {
        let s = samples(&[0.8, 0.7, 0.3, 0.3], &[0.7, 0.5, 0.3, 0.1]);
        assert_eq!(aupr(&s).unwrap(), aupr_oracle(&s));
    }

    #[test]
    fn fpr_perfect_separation() {
        let s = samples(&[2.0, 3.0, 4.0], &[0.0, 0.5, 1.0]);
        let (fpr, _) = fpr_at_tpr(&s, 0.95).unwrap();
        assert_eq!(fpr, 0.0);
    }

    #[test]
    fn fpr_identical_distributions_is_boundary_case() {
        let scores: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let s = samples(&scores, &scores);
        let (fpr, sigma) = fpr_at_tpr(&s, 0.95).unwrap();
        let oracle = fpr_oracle(&s, 0.95);
        assert_eq!((fpr, sigma), oracle);
        assert!(fpr >= 0.95);
    }

    #[test]
    fn fpr_hand_built_set_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let id: Vec<f64> = (0..20).map(|_| (rng.random::<f64>() * 8.0).round()).collect();
            let ood: Vec<f64> = (0..20)
                .map(|_| (rng.random::<f64>() * 8.0).round() - 1.0)
                .collect();
            let s = samples(&id, &ood);
            let (fpr, sigma) = fpr_at_tpr(&s, 0.95).unwrap();
            assert_eq!((fpr, sigma), fpr_oracle(&s, 0.95));
        }
    }

    #[test]
    fn adding_constant_to_id_scores_never_raises_fpr() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let id: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
            let ood: Vec<f64> = (0..15).map(|_| rng.random::<f64>()).collect();
            let (base, _) = fpr_at_tpr(&samples(&id, &ood), 0.95).unwrap();
            let shifted: Vec<f64> = id.iter().map(|v| v + 0.5).collect();
            let (better, _) = fpr_at_tpr(&samples(&shifted, &ood), 0.95).unwrap();
            assert!(better <= base);
        }
    }

    #[test]
    fn auroc_monotone_transform_invariance_and_flip() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..30 {
            let id: Vec<f64> = (0..12).map(|_| rng.random::<f64>()).collect();
            let ood: Vec<f64> = (0..9).map(|_| rng.random::<f64>()).collect();
            let base = auroc(&samples(&id, &ood)).unwrap();
            // strictly monotone transform: 2x + exp(x)
            let t = |v: f64| 2.0 * v + v.exp();
            let t_id: Vec<f64> = id.iter().map(|&v| t(v)).collect();
            let t_ood: Vec<f64> = ood.iter().map(|&v| t(v)).collect();
            let transformed = auroc(&samples(&t_id, &t_ood)).unwrap();
            assert!((base - transformed).abs() < 1e-12);
            let neg_id: Vec<f64> = id.iter().map(|&v| -v).collect();
            let neg_ood: Vec<f64> = ood.iter().map(|&v| -v).collect();
            let flipped = auroc(&samples(&neg_id, &neg_ood)).unwrap();
            assert!((flipped - (1.0 - base)).abs() < 1e-12);
        }
    }

    #[test]
    fn random_small_inputs_match_all_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..200 {
            let n_id = rng.random_range(1..=50);
            let n_ood = rng.random_range(1..=50);
            // Quantized scores so ties actually occur.
            let id: Vec<f64> = (0..n_id)
                .map(|_| (rng.random::<f64>() * 10.0).round() / 10.0)
                .collect();
            let ood: Vec<f64> = (0..n_ood)
                .map(|_| (rng.random::<f64>() * 10.0).round() / 10.0)
                .collect();
            let s = samples(&id, &ood);
            assert!((auroc(&s).unwrap() - auroc_oracle(&s)).abs() <= 1e-12);
            assert!((aupr(&s).unwrap() - aupr_oracle(&s)).abs() <= 1e-12);
            let (fpr, sigma) = fpr_at_tpr(&s, 0.95).unwrap();
            assert_eq!((fpr, sigma), fpr_oracle(&s, 0.95));
        }
    }

    fn toy_hierarchy() -> Hierarchy {
        Hierarchy::from_edges(&[
            ("root", "p"),
            ("root", "q"),
            ("p", "a"),
            ("p", "b"),
            ("q", "c"),
            ("q", "d"),
        ])
        .unwrap()
    }

    #[test]
    fn h_dist_zero_iff_predictions_exact() {
        let h = toy_hierarchy();
        let exact = vec![("a", "a"), ("c", "c")];
        assert_eq!(h_dist(&h, &exact).unwrap(), 0.0);
        let off = vec![("a", "a"), ("d", "c")];
        assert!(h_dist(&h, &off).unwrap() > 0.0);
    }

    #[test]
    fn h_dist_siblings_is_one() {
        let h = toy_hierarchy();
        assert_eq!(h_dist(&h, &[("a", "b")]).unwrap(), 1.0);
    }

    #[test]
    fn h_dist_rejects_unknown_and_inner_nodes() {
        let h = toy_hierarchy();
        assert!(h_dist(&h, &[("a", "nope")]).is_err());
        assert!(h_dist(&h, &[("p", "a")]).is_err());
    }

    #[test]
    fn hsi_sibling_prediction_maxes_b1() {
        let h = toy_hierarchy();
        let (b1, b2) = hsi(&h, &[("b", "a")]).unwrap();
        assert_eq!(b1, 1.0);
        // d2 = 1: 1 / (ln 2 * e)
        let expected = 1.0 / (2.0f64.ln() * std::f64::consts::E);
        assert!((b2 - expected).abs() < 1e-12);
        assert!((b2 - 0.5307).abs() < 1e-4);
    }

    #[test]
    fn hsi_matches_hand_evaluated_three_level_tree() {
        // root -> s0, s1; s0 -> m0(a0,a1), m1(b0); s1 -> m2(c0,c1)
        let h = Hierarchy::from_edges(&[
            ("root", "s0"),
            ("root", "s1"),
            ("s0", "m0"),
            ("s0", "m1"),
            ("s1", "m2"),
            ("m0", "a0"),
            ("m0", "a1"),
            ("m1", "b0"),
            ("m2", "c0"),
            ("m2", "c1"),
        ])
        .unwrap();
        let preds = vec![("a1", "a0"), ("b0", "a0"), ("c0", "a0")];
        // sample 1: lca = m0 (parent), d1 = 0 -> clamp 1, d2 = 1
        // sample 2: lca = s0, d1 = |2-1| = 1, d2 = 2
        // sample 3: lca = root, d1 = 2, d2 = 3
        let e = std::f64::consts::E;
        let want_b1 = (1.0 + 1.0 + 0.5) / 3.0;
        let want_b2 =
            (1.0 / (2.0f64.ln() * e) + 1.0 / (3.0f64.ln() * e) + 1.0 / (4.0f64.ln() * e)) / 3.0;
        let (b1, b2) = hsi(&h, &preds).unwrap();
        assert!((b1 - want_b1).abs() < 1e-12);
        assert!((b2 - want_b2).abs() < 1e-12);

        // brute-force H-Dist oracle over the same predictions
        let hd = h_dist(&h, &preds).unwrap();
        assert!((hd - (1.0 + 2.0 + 3.0) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn embedding_metrics_invariant_under_node_reordering() {
        let h = toy_hierarchy();
        let dist = h.all_pairs_distances();
        let cfg = crate::embedder::EmbedConfig {
            dim: 3,
            total_epochs: 0,
            init_epochs: 20,
            seed: 8,
            ..Default::default()
        };
        let emb = crate::embedder::init_embeddings(&h, &cfg).unwrap();
        // serialize, reverse the row order, read back
        let mut buf = Vec::new();
        emb.write_tsv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let header = lines.remove(0);
        lines.reverse();
        let shuffled = format!("{header}\n{}\n", lines.join("\n"));
        let emb2 = crate::embedder::EmbeddingSet::read_tsv(shuffled.as_bytes()).unwrap();

        assert_eq!(
            distortion_metric(&emb, &h, &dist).unwrap(),
            distortion_metric(&emb2, &h, &dist).unwrap()
        );
        assert_eq!(map_metric(&emb, &h).unwrap(), map_metric(&emb2, &h).unwrap());
    }

    #[test]
    fn reports_serialize_flat_snake_case() {
        let report = EvalReport {
            auroc: 1.0,
            aupr: 1.0,
            fpr_at_95: 0.0,
            n_id: 3,
            n_ood: 2,
        };
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"fpr_at_95\":0.0"));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report);

        let hier = HierReport {
            h_dist: 1.5,
            hsi_b1: 0.5,
            hsi_b2: 0.25,
            m: 4,
        };
        let json = serde_json::to_string(&hier).unwrap();
        assert!(json.contains("\"hsi_b1\":0.5"));
    }
}
