//! Binary detectors that decide, from an attribution descriptor alone,
//! whether the explained input was adversarial (label 1) or clean (label 0).
//!
//! Two from-scratch models: full-batch gradient-descent logistic regression
//! on standardized features, and a random forest of Gini-grown CART trees
//! with bootstrap resampling and per-node feature subsets.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::AttributionMap;
use crate::error::{Error, Result};
use crate::rng::derive_rng;

const CHECKPOINT_VERSION: &str = "xgap-detector-v1";

/// Number of magnitude bins behind the entropy summary feature.
const ENTROPY_BINS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureScheme {
    /// Absolute attribution values, flattened; one feature per pixel.
    FlatAbs,
    /// Eight order-free statistics of the map.
    SummaryStats,
}

/// Feature vector extracted from one attribution map, with the detector
/// training label and the originating sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Descriptor {
    pub features: Vec<f64>,
    /// 0 = clean, 1 = adversarial.
    pub label: u8,
    pub sample_id: String,
}

/// Extracts detector features from an attribution map.
///
/// The summary scheme packs, in order: mean, standard deviation, maximum,
/// mean magnitude, Euclidean norm, skewness, the fraction of entries whose
/// magnitude exceeds half the maximum magnitude, and the entropy (nats) of
/// a 32-bin magnitude histogram. Degenerate statistics (zero spread or an
/// all-zero map) are defined as 0.
pub fn featurize(map: &AttributionMap, scheme: FeatureScheme) -> Vec<f64> {
    let values = map.values.data();
    match scheme {
        FeatureScheme::FlatAbs => values.iter().map(|v| v.abs()).collect(),
        FeatureScheme::SummaryStats => {
            let n = values.len() as f64;
            let mean = values.iter().sum::<f64>() / n;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let std = var.sqrt();
            let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean_abs = values.iter().map(|v| v.abs()).sum::<f64>() / n;
            let l2 = values.iter().map(|v| v * v).sum::<f64>().sqrt();
            let skew = if std > 1e-12 {
                values.iter().map(|v| ((v - mean) / std).powi(3)).sum::<f64>() / n
            } else {
                0.0
            };
            let max_abs = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            let frac_high = if max_abs > 0.0 {
                values.iter().filter(|v| v.abs() > 0.5 * max_abs).count() as f64 / n
            } else {
                0.0
            };
            let entropy = if max_abs > 0.0 {
                let mut counts = [0u64; ENTROPY_BINS];
                for v in values {
                    let idx = ((v.abs() / max_abs) * ENTROPY_BINS as f64) as usize;
                    counts[idx.min(ENTROPY_BINS - 1)] += 1;
                }
                -counts
                    .iter()
                    .filter(|&&c| c > 0)
                    .map(|&c| {
                        let p = c as f64 / n;
                        p * p.ln()
                    })
                    .sum::<f64>()
            } else {
                0.0
            };
            vec![mean, std, max, mean_abs, l2, skew, frac_high, entropy]
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticParams {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Coefficient of the squared-norm weight penalty; the bias is exempt.
    pub l2: f64,
}

impl Default for LogisticParams {
    fn default() -> Self {
        LogisticParams {
            learning_rate: 0.1,
            epochs: 300,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Features examined per split; `None` means floor(sqrt(d)).
    pub features_per_split: Option<usize>,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 100,
            max_depth: 16,
            min_leaf: 1,
            features_per_split: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Per-feature standardization learned from the training set.
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "node", rename_all = "snake_case")]
pub enum TreeNode {
    Leaf {
        /// Training samples of each class that reached the leaf.
        counts: [u64; 2],
    },
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<TreeNode>,
    pub params: ForestParams,
    pub num_features: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DetectorModel {
    Logistic(LogisticModel),
    Forest(ForestModel),
}

fn validate_training_set(features: &[Vec<f64>], labels: &[u8], op: &'static str) -> Result<usize> {
    let first = features.first().ok_or_else(|| Error::InvalidArgument {
        op,
        reason: "empty training set".into(),
    })?;
    let d = first.len();
    if d == 0 {
        return Err(Error::InvalidArgument {
            op,
            reason: "descriptors have no features".into(),
        });
    }
    if features.iter().any(|f| f.len() != d) {
        return Err(Error::InvalidArgument {
            op,
            reason: "descriptors have mixed lengths".into(),
        });
    }
    if labels.len() != features.len() {
        return Err(Error::InvalidArgument {
            op,
            reason: format!("{} labels for {} descriptors", labels.len(), features.len()),
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::InvalidArgument {
            op,
            reason: "labels must be 0 or 1".into(),
        });
    }
    Ok(d)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Trains the logistic detector with full-batch gradient descent on the
/// l2-penalized log loss. Returns the model and the per-epoch loss
/// measured before each update. The seed is recorded for provenance; the
/// optimization itself is deterministic.
pub fn logreg_train(
    features: &[Vec<f64>],
    labels: &[u8],
    params: &LogisticParams,
    seed: u64,
) -> Result<(DetectorModel, Vec<f64>)> {
    let d = validate_training_set(features, labels, "logreg_train")?;
    if !(params.learning_rate.is_finite() && params.learning_rate > 0.0) || !(params.l2.is_finite() && params.l2 >= 0.0)
    {
        return Err(Error::InvalidArgument {
            op: "logreg_train",
            reason: format!("learning_rate {} / l2 {} out of range", params.learning_rate, params.l2),
        });
    }
    let n = features.len();
    let inv_n = 1.0 / n as f64;

    let mut mean = vec![0.0; d];
    for row in features {
        for (m, &v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m *= inv_n;
    }
    let mut std = vec![0.0; d];
    for row in features {
        for ((s, &v), &m) in std.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut std {
        *s = (*s * inv_n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standardized: Vec<f64> = features
        .iter()
        .flat_map(|row| {
            row.iter()
                .zip(mean.iter().zip(&std))
                .map(|(&v, (&m, &s))| (v - m) / s)
        })
        .collect();

    let mut w = vec![0.0; d];
    let mut b = 0.0;
    let mut trace = Vec::with_capacity(params.epochs);
    let mut grad_w = vec![0.0; d];
    for _ in 0..params.epochs {
        let mut loss = 0.0;
        let mut grad_b = 0.0;
        grad_w.iter_mut().for_each(|g| *g = 0.0);
        for (i, row) in standardized.chunks_exact(d).enumerate() {
            let z = b + row.iter().zip(&w).map(|(&x, &wv)| x * wv).sum::<f64>();
            let y = labels[i] as f64;
            // Stable binary cross-entropy: max(z, 0) - z*y + ln(1 + e^-|z|).
            loss += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
            let residual = sigmoid(z) - y;
            grad_b += residual;
            for (g, &x) in grad_w.iter_mut().zip(row) {
                *g += residual * x;
            }
        }
        loss = loss * inv_n + params.l2 * w.iter().map(|v| v * v).sum::<f64>();
        trace.push(loss);
        for (wv, &g) in w.iter_mut().zip(&grad_w) {
            *wv -= params.learning_rate * (g * inv_n + 2.0 * params.l2 * *wv);
        }
        b -= params.learning_rate * (grad_b * inv_n);
    }
    Ok((
        DetectorModel::Logistic(LogisticModel {
            weights: w,
            bias: b,
            feature_mean: mean,
            feature_std: std,
            seed,
        }),
        trace,
    ))
}

/// Gini impurity of a two-class count pair.
fn gini(counts: [u64; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let p0 = counts[0] as f64 / n;
    let p1 = counts[1] as f64 / n;
    1.0 - p0 * p0 - p1 * p1
}

struct TreeBuilder<'a> {
    features: &'a [Vec<f64>],
    labels: &'a [u8],
    num_features: usize,
    subset_size: usize,
    max_depth: usize,
    min_leaf: usize,
}

impl TreeBuilder<'_> {
    /// Draws a sorted random subset of feature indices without replacement.
    fn feature_subset(&self, rng: &mut impl Rng) -> Vec<usize> {
        let mut pool: Vec<usize> = (0..self.num_features).collect();
        for k in 0..self.subset_size {
            let j = rng.random_range(k..pool.len());
            pool.swap(k, j);
        }
        pool.truncate(self.subset_size);
        pool.sort_unstable();
        pool
    }

    fn build(&self, samples: &[usize], depth: usize, rng: &mut impl Rng) -> TreeNode {
        let mut counts = [0u64; 2];
        for &i in samples {
            counts[self.labels[i] as usize] += 1;
        }
        let pure = counts[0] == 0 || counts[1] == 0;
        if pure || depth >= self.max_depth || samples.len() < 2 * self.min_leaf {
            return TreeNode::Leaf { counts };
        }

        // Feature subsets are drawn before descending, so the stream of rng
        // draws depends only on the visit order, which is deterministic.
        let subset = self.feature_subset(rng);
        let mut best: Option<(f64, usize, f64)> = None;
        let mut column: Vec<(f64, u8)> = Vec::with_capacity(samples.len());
        for &f in &subset {
            column.clear();
            column.extend(samples.iter().map(|&i| (self.features[i][f], self.labels[i])));
            column.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            let total = counts;
            let mut left = [0u64; 2];
            for p in 0..column.len() - 1 {
                left[column[p].1 as usize] += 1;
                if column[p].0 == column[p + 1].0 {
                    continue;
                }
                let n_left = (p + 1) as u64;
                let n_right = (column.len() - p - 1) as u64;
                if (n_left as usize) < self.min_leaf || (n_right as usize) < self.min_leaf {
                    continue;
                }
                let right = [total[0] - left[0], total[1] - left[1]];
                let weighted = (n_left as f64 * gini(left) + n_right as f64 * gini(right)) / samples.len() as f64;
                if best.map_or(true, |(bw, _, _)| weighted < bw) {
                    let mut threshold = 0.5 * (column[p].0 + column[p + 1].0);
                    if threshold >= column[p + 1].0 {
                        threshold = column[p].0;
                    }
                    best = Some((weighted, f, threshold));
                }
            }
        }

        let Some((_, feature, threshold)) = best else {
            return TreeNode::Leaf { counts };
        };
        let (left_samples, right_samples): (Vec<usize>, Vec<usize>) =
            samples.iter().partition(|&&i| self.features[i][feature] <= threshold);
        TreeNode::Split {
            feature,
            threshold,
            left: Box::new(self.build(&left_samples, depth + 1, rng)),
            right: Box::new(self.build(&right_samples, depth + 1, rng)),
        }
    }
}

/// Grows a random forest: each tree sees a bootstrap resample of the
/// training set and considers a fresh random feature subset at every node.
pub fn forest_train(
    features: &[Vec<f64>],
    labels: &[u8],
    params: &ForestParams,
    seed: u64,
) -> Result<DetectorModel> {
    let d = validate_training_set(features, labels, "forest_train")?;
    if params.n_trees == 0 || params.max_depth == 0 || params.min_leaf == 0 {
        return Err(Error::InvalidArgument {
            op: "forest_train",
            reason: format!(
                "n_trees {}, max_depth {}, min_leaf {} must all be at least 1",
                params.n_trees, params.max_depth, params.min_leaf
            ),
        });
    }
    let subset_size = match params.features_per_split {
        Some(k) if k == 0 || k > d => {
            return Err(Error::InvalidArgument {
                op: "forest_train",
                reason: format!("features_per_split {k} out of range 1..={d}"),
            })
        }
        Some(k) => k,
        None => ((d as f64).sqrt() as usize).max(1),
    };
    let n = features.len();
    let builder = TreeBuilder {
        features,
        labels,
        num_features: d,
        subset_size,
        max_depth: params.max_depth,
        min_leaf: params.min_leaf,
    };
    let trees = (0..params.n_trees)
        .map(|t| {
            let mut rng = derive_rng(seed, &format!("tree{t}"));
            let sample: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            builder.build(&sample, 0, &mut rng)
        })
        .collect();
    Ok(DetectorModel::Forest(ForestModel {
        trees,
        params: params.clone(),
        num_features: d,
        seed,
    }))
}

fn tree_vote(mut node: &TreeNode, features: &[f64]) -> u8 {
    loop {
        match node {
            TreeNode::Leaf { counts } => return u8::from(counts[1] > counts[0]),
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                node = if features[*feature] <= *threshold { left } else { right };
            }
        }
    }
}

/// Classifies one descriptor. Returns `(label, score)` where the score is
/// the model's probability or vote share for the adversarial class; ties
/// and exact 0.5 scores resolve as they do in training (logistic: 1,
/// forest: 0).
pub fn detect(model: &DetectorModel, features: &[f64]) -> Result<(u8, f64)> {
    match model {
        DetectorModel::Logistic(m) => {
            if features.len() != m.weights.len() {
                return Err(Error::InvalidArgument {
                    op: "detect",
                    reason: format!("{} features, model expects {}", features.len(), m.weights.len()),
                });
            }
            let z = m.bias
                + features
                    .iter()
                    .zip(m.feature_mean.iter().zip(&m.feature_std))
                    .zip(&m.weights)
                    .map(|((&v, (&mean, &std)), &w)| (v - mean) / std * w)
                    .sum::<f64>();
            let p = sigmoid(z);
            Ok((u8::from(p >= 0.5), p))
        }
        DetectorModel::Forest(m) => {
            if features.len() != m.num_features {
                return Err(Error::InvalidArgument {
                    op: "detect",
                    reason: format!("{} features, model expects {}", features.len(), m.num_features),
                });
            }
            let votes: u64 = m.trees.iter().map(|t| tree_vote(t, features) as u64).sum();
            let score = votes as f64 / m.trees.len() as f64;
            Ok((u8::from(2 * votes > m.trees.len() as u64), score))
        }
    }
}

/// Fraction of descriptors the detector labels correctly.
pub fn detection_accuracy(model: &DetectorModel, features: &[Vec<f64>], labels: &[u8]) -> Result<f64> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidArgument {
            op: "detection_accuracy",
            reason: format!("{} descriptors, {} labels", features.len(), labels.len()),
        });
    }
    let mut correct = 0usize;
    for (row, &y) in features.iter().zip(labels) {
        if detect(model, row)?.0 == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / features.len() as f64)
}

#[derive(Serialize, Deserialize)]
struct DetectorManifest {
    version: String,
    model: DetectorModel,
}

/// Writes a detector checkpoint (a single JSON manifest).
pub fn save_detector(model: &DetectorModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let manifest = DetectorManifest {
        version: CHECKPOINT_VERSION.into(),
        model: model.clone(),
    };
    crate::data::write_json(&dir.join("manifest.json"), &manifest)
}

/// Loads a detector checkpoint written by [`save_detector`].
pub fn load_detector(dir: &Path) -> Result<DetectorModel> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DetectorManifest = crate::data::read_json(&manifest_path)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            path: manifest_path.display().to_string(),
            expected: CHECKPOINT_VERSION.into(),
            found: manifest.version,
        });
    }
    Ok(manifest.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Head;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    fn map_of(values: Vec<f64>) -> AttributionMap {
        AttributionMap {
            values: Tensor::new(vec![values.len()], values).unwrap(),
            explained_class: 0,
            head: Head::Logit,
            baseline_id: "zeros".into(),
            steps_m: 1,
        }
    }

    #[test]
    fn flat_abs_features_are_magnitudes() {
        let f = featurize(&map_of(vec![-0.5, 0.25, 0.0]), FeatureScheme::FlatAbs);
        assert_eq!(f, vec![0.5, 0.25, 0.0]);
    }

    #[test]
    fn summary_stats_match_hand_computation() {
        // Values [1, -1, 1, -1]: mean 0, std 1, max 1, mean |v| 1, norm 2,
        // skew 0, every |v| above half max, all magnitudes in one bin.
        let f = featurize(&map_of(vec![1.0, -1.0, 1.0, -1.0]), FeatureScheme::SummaryStats);
        let expect = [0.0, 1.0, 1.0, 1.0, 2.0, 0.0, 1.0, 0.0];
        assert_eq!(f.len(), 8);
        for (got, want) in f.iter().zip(expect) {
            assert!((got - want).abs() <= 1e-15, "{f:?}");
        }
    }

    #[test]
    fn summary_stats_of_zero_map_are_all_zero() {
        let f = featurize(&map_of(vec![0.0; 6]), FeatureScheme::SummaryStats);
        assert_eq!(f, vec![0.0; 8]);
    }

    fn separable_set() -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..20 {
            let t = i as f64 / 20.0;
            features.push(vec![t, 1.0 - t]);
            labels.push(0);
            features.push(vec![t + 2.0, -t]);
            labels.push(1);
        }
        (features, labels)
    }

    #[test]
    fn logreg_starts_at_the_null_model() {
        let (features, labels) = separable_set();
        let params = LogisticParams {
            epochs: 0,
            ..LogisticParams::default()
        };
        let (model, trace) = logreg_train(&features, &labels, &params, 1).unwrap();
        assert!(trace.is_empty());
        let (label, score) = detect(&model, &features[0]).unwrap();
        assert_eq!(score, 0.5);
        assert_eq!(label, 1);
    }

    #[test]
    fn logreg_separates_and_loss_never_rises() {
        let (features, labels) = separable_set();
        let params = LogisticParams {
            learning_rate: 0.05,
            epochs: 200,
            l2: 1e-4,
        };
        let (model, trace) = logreg_train(&features, &labels, &params, 1).unwrap();
        assert_eq!(trace.len(), 200);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "loss rose: {} -> {}", w[0], w[1]);
        }
        assert_eq!(detection_accuracy(&model, &features, &labels).unwrap(), 1.0);
    }

    #[test]
    fn logreg_standardization_is_stored_in_the_model() {
        let features = vec![vec![100.0, 0.001], vec![102.0, 0.002], vec![98.0, 0.003]];
        let labels = vec![0, 1, 0];
        let (model, _) = logreg_train(&features, &labels, &LogisticParams::default(), 1).unwrap();
        let DetectorModel::Logistic(m) = &model else {
            panic!("expected logistic model");
        };
        assert!((m.feature_mean[0] - 100.0).abs() <= 1e-12);
        assert!(m.feature_std[0] > 1.0);
        // Constant feature: unit std stands in for zero spread.
        let constant = vec![vec![5.0, 1.0], vec![5.0, 2.0]];
        let (model, _) = logreg_train(&constant, &[0, 1], &LogisticParams::default(), 1).unwrap();
        let DetectorModel::Logistic(m) = &model else {
            panic!("expected logistic model");
        };
        assert_eq!(m.feature_std[0], 1.0);
    }

    #[test]
    fn training_set_validation_rejects_garbage() {
        assert!(logreg_train(&[], &[], &LogisticParams::default(), 1).is_err());
        let ragged = vec![vec![1.0, 2.0], vec![1.0]];
        assert!(logreg_train(&ragged, &[0, 1], &LogisticParams::default(), 1).is_err());
        let ok = vec![vec![1.0], vec![2.0]];
        assert!(logreg_train(&ok, &[0, 2], &LogisticParams::default(), 1).is_err());
        assert!(logreg_train(&ok, &[0], &LogisticParams::default(), 1).is_err());
        assert!(forest_train(&ok, &[0, 2], &ForestParams::default(), 1).is_err());
        let bad_subset = ForestParams {
            features_per_split: Some(5),
            ..ForestParams::default()
        };
        assert!(forest_train(&ok, &[0, 1], &bad_subset, 1).is_err());
    }

    fn xor_set(copies: usize) -> (Vec<Vec<f64>>, Vec<u8>) {
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..copies {
            for (a, b) in [(0.0, 0.0), (0.0, 1.0), (1.0, 0.0), (1.0, 1.0)] {
                features.push(vec![a, b]);
                labels.push(u8::from(a != b));
            }
        }
        (features, labels)
    }

    #[test]
    fn forest_fits_xor_exactly() {
        // XOR has no single-split gain; growing to depth 2 with all features
        // in play must still fit training data perfectly.
        let (features, labels) = xor_set(8);
        let params = ForestParams {
            n_trees: 9,
            max_depth: 2,
            min_leaf: 1,
            features_per_split: Some(2),
        };
        let model = forest_train(&features, &labels, &params, 7).unwrap();
        assert_eq!(detection_accuracy(&model, &features, &labels).unwrap(), 1.0);
    }

    #[test]
    fn single_tree_fits_xor() {
        let (features, labels) = xor_set(8);
        let params = ForestParams {
            n_trees: 1,
            max_depth: 2,
            min_leaf: 1,
            features_per_split: Some(2),
        };
        let model = forest_train(&features, &labels, &params, 11).unwrap();
        assert_eq!(detection_accuracy(&model, &features, &labels).unwrap(), 1.0);
    }

    #[test]
    fn forest_is_deterministic_in_the_seed() {
        let (features, labels) = separable_set();
        let params = ForestParams {
            n_trees: 5,
            max_depth: 4,
            min_leaf: 1,
            features_per_split: Some(1),
        };
        let a = forest_train(&features, &labels, &params, 3).unwrap();
        let b = forest_train(&features, &labels, &params, 3).unwrap();
        let c = forest_train(&features, &labels, &params, 4).unwrap();
        let json = |m: &DetectorModel| serde_json::to_string(m).unwrap();
        assert_eq!(json(&a), json(&b));
        assert_ne!(json(&a), json(&c));
    }

    #[test]
    fn detect_validates_feature_length() {
        let (features, labels) = separable_set();
        let (model, _) = logreg_train(&features, &labels, &LogisticParams::default(), 1).unwrap();
        assert!(detect(&model, &[1.0]).is_err());
        let forest = forest_train(&features, &labels, &ForestParams::default(), 1).unwrap();
        assert!(detect(&forest, &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn forest_vote_ties_resolve_to_clean() {
        // Two stumps with opposite leaves force a 1-1 vote.
        let make_leaf = |c0, c1| Box::new(TreeNode::Leaf { counts: [c0, c1] });
        let stump = |flip: bool| TreeNode::Split {
            feature: 0,
            threshold: 0.5,
            left: make_leaf(if flip { 0 } else { 4 }, if flip { 4 } else { 0 }),
            right: make_leaf(0, 4),
        };
        let model = DetectorModel::Forest(ForestModel {
            trees: vec![stump(false), stump(true)],
            params: ForestParams::default(),
            num_features: 1,
            seed: 0,
        });
        let (label, score) = detect(&model, &[0.0]).unwrap();
        assert_eq!(score, 0.5);
        assert_eq!(label, 0);
    }

    #[test]
    fn checkpoints_round_trip_both_kinds() {
        let (features, labels) = separable_set();
        let dir = tempfile::tempdir().unwrap();
        let (logistic, _) = logreg_train(&features, &labels, &LogisticParams::default(), 5).unwrap();
        let forest = forest_train(
            &features,
            &labels,
            &ForestParams {
                n_trees: 3,
                max_depth: 3,
                min_leaf: 1,
                features_per_split: Some(1),
            },
            5,
        )
        .unwrap();
        for (name, model) in [("logistic", &logistic), ("forest", &forest)] {
            let sub = dir.path().join(name);
            save_detector(model, &sub).unwrap();
            let back = load_detector(&sub).unwrap();
            assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(model).unwrap());
            for row in &features {
                assert_eq!(detect(&back, row).unwrap(), detect(model, row).unwrap());
            }
        }
        let manifest_path = dir.path().join("logistic/manifest.json");
        let manifest = std::fs::read_to_string(&manifest_path).unwrap();
        std::fs::write(&manifest_path, manifest.replace("xgap-detector-v1", "xgap-detector-v3")).unwrap();
        assert!(matches!(
            load_detector(&dir.path().join("logistic")),
            Err(Error::UnsupportedVersion { .. })
        ));
    }

    proptest! {
        #[test]
        fn labels_follow_scores(seed in any::<u64>(), n in 4usize..40) {
            use rand::Rng;
            let mut rng = crate::rng::derive_rng(seed, "detector-prop");
            let features: Vec<Vec<f64>> = (0..n)
                .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
                .collect();
            let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
            let (logistic, _) = logreg_train(&features, &labels, &LogisticParams { epochs: 20, ..LogisticParams::default() }, seed).unwrap();
            let forest = forest_train(&features, &labels, &ForestParams { n_trees: 7, max_depth: 3, min_leaf: 1, features_per_split: Some(1) }, seed).unwrap();
            for row in &features {
                let (label, score) = detect(&logistic, row).unwrap();
                prop_assert!((0.0..=1.0).contains(&score));
                prop_assert_eq!(label, u8::from(score >= 0.5));
                let (label, score) = detect(&forest, row).unwrap();
                prop_assert!((0.0..=1.0).contains(&score));
                prop_assert_eq!(label, u8::from(score > 0.5));
            }
        }

        #[test]
        fn trees_respect_min_leaf_and_depth(seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::derive_rng(seed, "tree-shape-prop");
            let n = 30;
            let features: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..3).map(|_| rng.random_range(0.0..1.0)).collect())
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2) as u8).collect();
            let params = ForestParams { n_trees: 3, max_depth: 3, min_leaf: 4, features_per_split: Some(2) };
            let model = forest_train(&features, &labels, &params, seed).unwrap();
            let DetectorModel::Forest(f) = &model else { panic!("expected forest") };
            fn walk(node: &TreeNode, depth: usize, max_depth: usize, min_leaf: u64) -> u64 {
                match node {
                    TreeNode::Leaf { counts } => {
                        let total = counts[0] + counts[1];
                        assert!(depth <= max_depth);
                        total
                    }
                    TreeNode::Split { left, right, .. } => {
                        assert!(depth < max_depth, "split below max depth");
                        let l = walk(left, depth + 1, max_depth, min_leaf);
                        let r = walk(right, depth + 1, max_depth, min_leaf);
                        assert!(l >= min_leaf && r >= min_leaf, "child under min_leaf");
                        l + r
                    }
                }
            }
            for tree in &f.trees {
                let total = walk(tree, 0, params.max_depth, params.min_leaf as u64);
                prop_assert_eq!(total, n as u64);
            }
        }
    }
}
