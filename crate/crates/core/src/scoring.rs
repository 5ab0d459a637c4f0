//! Out-of-distribution scoring functions.
//!
//! Logit-based scores (MSP, temperature scaling, energy, GEN) work on either
//! head; with the hyperbolic head the logits are negative scaled prototype
//! distances and the energy score consumes the raw distances. The KNN score
//! works on unit-normalized pre-map backbone features. Every score follows
//! the higher-is-more-ID convention.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::geometry::sq_norm;
use crate::protohead::{LabeledFeatures, Model};

/// Which representation produced a logit vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoreSource {
    Hyperbolic,
    Euclidean,
}

impl std::fmt::Display for ScoreSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ScoreSource::Hyperbolic => write!(f, "hyperbolic"),
            ScoreSource::Euclidean => write!(f, "euclidean"),
        }
    }
}

/// Per-sample logit vector in fixed class order.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    values: Vec<f64>,
    pub source: ScoreSource,
}

impl LogitRecord {
    pub fn new(values: Vec<f64>, source: ScoreSource) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Config("empty logit vector".into()));
        }
        for (i, v) in values.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite(i));
            }
        }
        Ok(LogitRecord { values, source })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Numerically shifted softmax.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Maximum softmax probability.
pub fn msp(logits: &LogitRecord) -> f64 {
    softmax(logits.values())
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max)
}

/// MSP over temperature-divided logits.
pub fn temp_scale(logits: &LogitRecord, t: f64) -> Result<f64> {
    if !(t.is_finite() && t > 0.0) {
        return Err(Error::Config(format!("temperature {t} must be positive")));
    }
    let scaled: Vec<f64> = logits.values().iter().map(|v| v / t).collect();
    Ok(msp(&LogitRecord::new(scaled, logits.source)?))
}

/// Hyperbolic energy score over per-class geodesic distances:
/// `T * ln sum_k exp(-d_k / T)`, max-shifted for stability.
/// Higher is more in-distribution (the logits already carry the negation).
pub fn energy(distances: &[f64], t: f64) -> f64 {
    debug_assert!(t > 0.0);
    let min_d = distances.iter().cloned().fold(f64::INFINITY, f64::min);
    let sum: f64 = distances.iter().map(|d| (-(d - min_d) / t).exp()).sum();
    -min_d + t * sum.ln()
}

/// Conventional negative-energy score over Euclidean logits:
/// `T * ln sum_k exp(f_k / T)`.
pub fn energy_from_logits(logits: &[f64], t: f64) -> f64 {
    debug_assert!(t > 0.0);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|f| ((f - max) / t).exp()).sum();
    max + t * sum.ln()
}

/// Negative generalized entropy over the `top_m` largest probabilities:
/// `-sum p^g (1-p)^g`. Zero (the maximum) for a one-hot distribution.
pub fn gen_score(probs: &[f64], gamma_g: f64, top_m: usize) -> Result<f64> {
    if !(gamma_g > 0.0 && gamma_g < 1.0) {
        return Err(Error::Config(format!(
            "GEN gamma {gamma_g} outside (0, 1)"
        )));
    }
    if probs.is_empty() || top_m == 0 {
        return Err(Error::Config("empty probability vector".into()));
    }
    let sum: f64 = probs.iter().sum();
    if probs.iter().any(|p| *p < -1e-9) || (sum - 1.0).abs() > 1e-6 {
        return Err(Error::Config(
            "GEN expects a probability vector summing to 1".into(),
        ));
    }
    let mut sorted = probs.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite probabilities"));
    let g: f64 = sorted
        .iter()
        .take(top_m)
        .map(|&p| {
            let p = p.clamp(0.0, 1.0);
            p.powf(gamma_g) * (1.0 - p).powf(gamma_g)
        })
        .sum();
    Ok(-g)
}

/// Unit-normalized training-feature bank for the KNN score.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBank {
    dim: usize,
    rows: Vec<f64>,
}

impl FeatureBank {
    /// Builds the bank from raw feature rows, unit-normalizing each.
    pub fn new(dim: usize, raw_rows: &[Vec<f64>]) -> Result<Self> {
        if raw_rows.is_empty() {
            return Err(Error::Config("empty feature bank".into()));
        }
        let mut rows = Vec::with_capacity(raw_rows.len() * dim);
        for r in raw_rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    left: r.len(),
                    right: dim,
                });
            }
            rows.extend_from_slice(&normalize(r));
        }
        Ok(FeatureBank { dim, rows })
    }

    /// Runs every row of `features` through the model backbone.
    pub fn from_model(model: &Model, features: &LabeledFeatures) -> Result<Self> {
        let rows: Vec<Vec<f64>> = (0..features.len())
            .map(|i| model.backbone_features(features.row(i)))
            .collect::<Result<_>>()?;
        FeatureBank::new(model.backbone.output_dim(), &rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = sq_norm(v).sqrt();
    if n < 1e-300 {
        return v.to_vec();
    }
    v.iter().map(|x| x / n).collect()
}

/// Negative Euclidean distance from the (unit-normalized) query to its k-th
/// nearest bank row; ties broken by bank row index.
pub fn knn_score(query: &[f64], bank: &FeatureBank, k: usize) -> Result<f64> {
    if k == 0 || k > bank.len() {
        return Err(Error::Config(format!(
            "k = {k} outside [1, {}]",
            bank.len()
        )));
    }
    if query.len() != bank.dim() {
        return Err(Error::DimensionMismatch {
            left: query.len(),
            right: bank.dim(),
        });
    }
    let mut dists: Vec<(f64, usize)> = (0..bank.len())
        .map(|i| {
            let row = bank.row(i);
            let dd: f64 = row
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (dd.sqrt(), i)
        })
        .collect();
    dists.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    Ok(-dists[k - 1].0)
}

/// Default energy temperature per head, the best-performing setting for
/// each. Distances between desk-scale prototypes span a few hops, so the
/// sharp temperature keeps the nearest prototype dominant over the
/// class-count term `T ln C`; Euclidean logits use the conventional 1.
pub const HYPERBOLIC_ENERGY_T: f64 = 0.05;
pub const EUCLIDEAN_ENERGY_T: f64 = 1.0;

pub fn resolved_energy_t(source: ScoreSource) -> f64 {
    match source {
        ScoreSource::Hyperbolic => HYPERBOLIC_ENERGY_T,
        ScoreSource::Euclidean => EUCLIDEAN_ENERGY_T,
    }
}

/// A scoring method with its resolved hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub enum ScoreMethod {
    Msp,
    /// MSP over logits divided by `t`.
    TempScale { t: f64 },
    /// Energy; `t` of `None` resolves per head via [`resolved_energy_t`].
    Energy { t: Option<f64> },
    /// Generalized entropy; `top_m` of `None` means all classes.
    Gen { gamma_g: f64, top_m: Option<usize> },
    Knn { k: usize },
}

impl ScoreMethod {
    pub fn name(&self) -> &'static str {
        match self {
            ScoreMethod::Msp => "msp",
            ScoreMethod::TempScale { .. } => "tempscale",
            ScoreMethod::Energy { .. } => "energy",
            ScoreMethod::Gen { .. } => "gen",
            ScoreMethod::Knn { .. } => "knn",
        }
    }
}

/// Scores every row of `features` with `method`, preserving row order.
/// The KNN method requires a feature bank.
pub fn score_batch(
    method: &ScoreMethod,
    model: &Model,
    features: &LabeledFeatures,
    bank: Option<&FeatureBank>,
) -> Result<Vec<f64>> {
    if features.feature_dim != model.backbone.input_dim() {
        return Err(Error::Config(format!(
            "feature dim {} does not match model input {}",
            features.feature_dim,
            model.backbone.input_dim()
        )));
    }
    let source = if model.head.is_hyperbolic() {
        ScoreSource::Hyperbolic
    } else {
        ScoreSource::Euclidean
    };
    let mut scores = Vec::with_capacity(features.len());
    for i in 0..features.len() {
        let row = features.row(i);
        let score = match method {
            ScoreMethod::Msp => msp(&LogitRecord::new(model.logits(row)?, source)?),
            ScoreMethod::TempScale { t } => {
                temp_scale(&LogitRecord::new(model.logits(row)?, source)?, *t)?
            }
            ScoreMethod::Energy { t } => {
                let t = t.unwrap_or_else(|| resolved_energy_t(source));
                match source {
                    ScoreSource::Hyperbolic => {
                        let (_, dists) = model
                            .hyper_embedding(row)?
                            .expect("hyperbolic head yields distances");
                        energy(&dists, t)
                    }
                    ScoreSource::Euclidean => {
                        energy_from_logits(&model.logits(row)?, t)
                    }
                }
            }
            ScoreMethod::Gen { gamma_g, top_m } => {
                let probs = softmax(&model.logits(row)?);
                let m = top_m.unwrap_or(probs.len());
                gen_score(&probs, *gamma_g, m)?
            }
            ScoreMethod::Knn { k } => {
                let bank = bank.ok_or_else(|| {
                    Error::Config("the knn method requires a feature bank".into())
                })?;
                let q = normalize(&model.backbone_features(row)?);
                knn_score(&q, bank, *k)?
            }
        };
        scores.push(score);
    }
    Ok(scores)
}

/// Writes a score file: a `# method=... source=...` header followed by one
/// decimal float per line.
pub fn write_score_file(
    scores: &[f64],
    method: &ScoreMethod,
    source: ScoreSource,
    mut w: impl Write,
) -> std::io::Result<()> {
    let params = match method {
        ScoreMethod::Msp => String::new(),
        ScoreMethod::TempScale { t } => format!(" T={t}"),
        ScoreMethod::Energy { t } => {
            format!(" T={}", t.unwrap_or_else(|| resolved_energy_t(source)))
        }
        ScoreMethod::Gen { gamma_g, top_m } => match top_m {
            Some(m) => format!(" gamma={gamma_g} top_m={m}"),
            None => format!(" gamma={gamma_g}"),
        },
        ScoreMethod::Knn { k } => format!(" k={k}"),
    };
    writeln!(w, "# method={} source={}{}", method.name(), source, params)?;
    for s in scores {
        writeln!(w, "{s}")?;
    }
    Ok(())
}

/// Reads a score file: one float per line, `#` lines ignored.
pub fn read_score_file(reader: impl BufRead) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let raw = line.map_err(|e| Error::io(format!("line {}", lineno + 1), e))?;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let v: f64 = t.parse().map_err(|_| Error::Parse {
            line: lineno + 1,
            msg: format!("bad score '{t}'"),
        })?;
        out.push(v);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rec(values: &[f64]) -> LogitRecord {
        LogitRecord::new(values.to_vec(), ScoreSource::Euclidean).unwrap()
    }

    #[test]
    fn msp_uniform_logits() {
        assert!((msp(&rec(&[1.0, 1.0, 1.0, 1.0])) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn msp_dominant_logit() {
        let m = msp(&rec(&[50.0, 0.0, 0.0]));
        assert!(m >= 1.0 - 1e-15);
        assert!(m <= 1.0);
    }

    #[test]
    fn msp_bounds_hold_on_random_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let c = rng.random_range(2..10);
            let logits: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 20.0 - 10.0).collect();
            let m = msp(&rec(&logits));
            assert!(m >= 1.0 / c as f64 - 1e-12 && m <= 1.0);
        }
    }

    #[test]
    fn msp_matches_direct_softmax_oracle() {
        // Direct evaluation without the max shift on values where the naive
        // form cannot overflow.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let naive = logits.iter().map(|l| l.exp() / z).fold(0.0f64, f64::max);
            assert!((msp(&rec(&logits)) - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn temp_scale_one_equals_msp() {
        let r = rec(&[0.2, -1.0, 3.0]);
        assert_eq!(temp_scale(&r, 1.0).unwrap(), msp(&r));
    }

    #[test]
    fn temp_scale_limit_tends_to_uniform() {
        let r = rec(&[5.0, 1.0, -2.0, 0.0]);
        let s = temp_scale(&r, 1e9).unwrap();
        assert!((s - 0.25).abs() < 1e-8);
    }

    #[test]
    fn temp_scale_two_matches_oracle() {
        let r = rec(&[1.0, 0.5, -0.5]);
        let halved = rec(&[0.5, 0.25, -0.25]);
        assert_eq!(temp_scale(&r, 2.0).unwrap(), msp(&halved));
        assert!(temp_scale(&r, 0.0).is_err());
        assert!(temp_scale(&r, -1.0).is_err());
    }

    #[test]
    fn energy_single_class_closed_form() {
        // T ln exp(-d/T) = -d
        assert!((energy(&[1.0], 10.0) - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn energy_equal_distances_closed_form() {
        // two equal distances d: T ln 2 - d
        for (d, t) in [(0.5, 10.0), (3.0, 10.0), (2.0, 1.0)] {
            let expected = t * 2.0f64.ln() - d;
            assert!((energy(&[d, d], t) - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn energy_matches_frozen_high_precision_value() {
        // Fixed distance vector, T = 10; expected value computed once with
        // 50-digit decimal arithmetic. Every input is exactly representable.
        let d = [0.75, 1.5, 2.25, 4.0, 6.5];
        let expected = 13.295_476_724_738_08;
        assert!((energy(&d, 10.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn energy_with_shift_matches_naive_when_safe() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let c = rng.random_range(1..8);
            let d: Vec<f64> = (0..c).map(|_| rng.random::<f64>() * 12.0).collect();
            let t = 10.0;
            let naive = t * d.iter().map(|x| (-x / t).exp()).sum::<f64>().ln();
            assert!((energy(&d, t) - naive).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_is_monotone_decreasing_in_each_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let mut d: Vec<f64> = (0..5).map(|_| rng.random::<f64>() * 5.0).collect();
            let base = energy(&d, 10.0);
            let slot = rng.random_range(0..5);
            d[slot] += 0.5;
            assert!(energy(&d, 10.0) < base);
        }
    }

    #[test]
    fn gen_one_hot_is_zero() {
        assert_eq!(gen_score(&[1.0, 0.0, 0.0], 0.1, 3).unwrap(), 0.0);
    }

    #[test]
    fn gen_uniform_two_class_closed_form() {
        // -2 * (0.5 * 0.5)^0.5 = -1
        let s = gen_score(&[0.5, 0.5], 0.5, 2).unwrap();
        assert!((s - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn gen_matches_direct_summation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let raw: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
            let z: f64 = raw.iter().sum();
            let probs: Vec<f64> = raw.iter().map(|v| v / z).collect();
            let gamma = 0.1;
            let mut sorted = probs.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let oracle: f64 = -sorted
                .iter()
                .take(4)
                .map(|&p| p.powf(gamma) * (1.0 - p).powf(gamma))
                .sum::<f64>();
            let got = gen_score(&probs, gamma, 4).unwrap();
            assert!((got - oracle).abs() < 1e-13);
        }
    }

    #[test]
    fn gen_rejects_bad_gamma_and_non_probabilities() {
        assert!(gen_score(&[0.5, 0.5], 0.0, 2).is_err());
        assert!(gen_score(&[0.5, 0.5], 1.0, 2).is_err());
        assert!(gen_score(&[0.7, 0.7], 0.1, 2).is_err());
    }

    #[test]
    fn knn_query_in_bank_scores_zero() {
        let bank = FeatureBank::new(
            2,
            &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]],
        )
        .unwrap();
        let s = knn_score(&[1.0, 0.0], &bank, 1).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn knn_full_bank_is_negative_farthest() {
        let bank = FeatureBank::new(2, &[vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]])
            .unwrap();
        let q = normalize(&[1.0, 0.0]);
        let s = knn_score(&q, &bank, 3).unwrap();
        // exhaustive sort oracle
        let mut dists: Vec<f64> = (0..3)
            .map(|i| {
                bank.row(i)
                    .iter()
                    .zip(&q)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect();
        dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(s, -dists[2]);
    }

    #[test]
    fn knn_matches_brute_force_on_random_bank() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let rows: Vec<Vec<f64>> = (0..1000)
            .map(|_| (0..8).map(|_| rng.random::<f64>() - 0.5).collect())
            .collect();
        let bank = FeatureBank::new(8, &rows).unwrap();
        for _ in 0..20 {
            let q = normalize(
                &(0..8)
                    .map(|_| rng.random::<f64>() - 0.5)
                    .collect::<Vec<f64>>(),
            );
            let k = 10;
            let got = knn_score(&q, &bank, k).unwrap();
            let mut dists: Vec<f64> = (0..bank.len())
                .map(|i| {
                    bank.row(i)
                        .iter()
                        .zip(&q)
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt()
                })
                .collect();
            dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
            assert_eq!(got, -dists[k - 1]);
        }
    }

    #[test]
    fn knn_permutation_and_duplicate_invariance() {
        let rows = vec![vec![1.0, 0.0], vec![0.6, 0.8], vec![0.0, 1.0]];
        let bank = FeatureBank::new(2, &rows).unwrap();
        let mut reversed = rows.clone();
        reversed.reverse();
        let bank_rev = FeatureBank::new(2, &reversed).unwrap();
        let q = normalize(&[0.9, 0.1]);
        assert_eq!(
            knn_score(&q, &bank, 2).unwrap(),
            knn_score(&q, &bank_rev, 2).unwrap()
        );
        // duplicates beyond the k-th neighbor do not change the score
        let mut padded = rows.clone();
        padded.push(vec![0.0, 1.0]);
        let bank_pad = FeatureBank::new(2, &padded).unwrap();
        assert_eq!(
            knn_score(&q, &bank, 2).unwrap(),
            knn_score(&q, &bank_pad, 2).unwrap()
        );
    }

    #[test]
    fn knn_rejects_oversized_k() {
        let bank = FeatureBank::new(1, &[vec![1.0]]).unwrap();
        assert!(knn_score(&[1.0], &bank, 2).is_err());
        assert!(knn_score(&[1.0], &bank, 0).is_err());
    }

    #[test]
    fn score_batch_is_a_per_row_map() {
        use crate::protohead::{Backbone, Head, LinearHead, Model};
        let model = Model {
            backbone: Backbone::new(&[3, 4], 7).unwrap(),
            head: Head::Euclidean(
                LinearHead::new(vec!["a".to_string(), "b".to_string()], 4, 7).unwrap(),
            ),
        };
        let batch = LabeledFeatures::new(
            3,
            vec![0.1, -0.4, 0.9, 1.2, 0.3, -0.7],
            vec!["a".to_string(), "b".to_string()],
            "t",
        )
        .unwrap();
        let scores = score_batch(&ScoreMethod::Msp, &model, &batch, None).unwrap();
        assert_eq!(scores.len(), 2);
        for i in 0..2 {
            let rec =
                LogitRecord::new(model.logits(batch.row(i)).unwrap(), ScoreSource::Euclidean)
                    .unwrap();
            assert_eq!(scores[i], msp(&rec));
        }

        // empty input maps to no scores
        let empty = LabeledFeatures::new(3, vec![], vec![], "t").unwrap();
        assert!(score_batch(&ScoreMethod::Msp, &model, &empty, None)
            .unwrap()
            .is_empty());

        // knn without a bank is a usage error
        assert!(score_batch(&ScoreMethod::Knn { k: 1 }, &model, &batch, None).is_err());
    }

    #[test]
    fn score_file_round_trips_and_skips_header() {
        let scores = vec![0.25, -1.5, 3.0e-7];
        let mut buf = Vec::new();
        write_score_file(
            &scores,
            &ScoreMethod::Energy { t: None },
            ScoreSource::Hyperbolic,
            &mut buf,
        )
        .unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("# method=energy source=hyperbolic T=0.05"));
        let back = read_score_file(buf.as_slice()).unwrap();
        assert_eq!(back, scores);
    }

    #[test]
    fn empty_scores_write_header_only() {
        let mut buf = Vec::new();
        write_score_file(&[], &ScoreMethod::Msp, ScoreSource::Euclidean, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(read_score_file(buf.as_slice()).unwrap().is_empty());
    }
}
