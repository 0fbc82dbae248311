//! Iterative sign-of-gradient attacks and the on-disk corpus of
//! clean/adversarial image pairs.
//!
//! Each iteration moves every pixel by epsilon along the sign of the loss
//! gradient: away from the true label for untargeted attacks, toward the
//! target label for targeted ones, clipping to the valid pixel range after
//! every step and stopping at the first success.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{second_most_confident, Head, Network};
use crate::tensor::{argmax, sign, Tensor};

const CORPUS_VERSION: &str = "xgap-attacks-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Push the prediction anywhere away from the clean prediction.
    Untargeted,
    /// Pull the prediction toward a uniformly chosen wrong label.
    TargetedRandom,
    /// Pull the prediction toward the runner-up class of the clean logits.
    TargetedSecond,
}

impl AttackMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackMode::Untargeted => "untargeted",
            AttackMode::TargetedRandom => "targeted_random",
            AttackMode::TargetedSecond => "targeted_second",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub epsilon: f64,
    pub num_iters: usize,
    pub clip_min: f64,
    pub clip_max: f64,
    pub seed: u64,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidArgument {
            op: "AttackConfig::validate",
            reason,
        };
        if !(self.epsilon.is_finite() && self.epsilon >= 0.0) {
            return Err(bad(format!("epsilon {} must be finite and non-negative", self.epsilon)));
        }
        if self.num_iters == 0 {
            return Err(bad("num_iters must be at least 1".into()));
        }
        if !(self.clip_min.is_finite() && self.clip_max.is_finite() && self.clip_min < self.clip_max) {
            return Err(bad(format!("clip range [{}, {}] is empty or non-finite", self.clip_min, self.clip_max)));
        }
        Ok(())
    }
}

/// A clean image together with its attacked counterpart and the outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub clean: Tensor,
    pub adversarial: Tensor,
    pub true_label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub target: Option<usize>,
    pub success: bool,
    pub mode: AttackMode,
}

/// Picks the attack target from the clean logits: `None` for untargeted,
/// the runner-up class for second-best, a uniform wrong label otherwise.
pub fn select_target(
    logits: &[f64],
    true_label: usize,
    mode: AttackMode,
    rng: &mut impl Rng,
) -> Result<Option<usize>> {
    if true_label >= logits.len() {
        return Err(Error::InvalidArgument {
            op: "select_target",
            reason: format!("true_label {true_label} out of range 0..{}", logits.len()),
        });
    }
    match mode {
        AttackMode::Untargeted => Ok(None),
        AttackMode::TargetedSecond => Ok(Some(second_most_confident(logits)?)),
        AttackMode::TargetedRandom => {
            let k = logits.len();
            if k < 2 {
                return Err(Error::InvalidArgument {
                    op: "select_target",
                    reason: "targeted attack needs at least 2 classes".into(),
                });
            }
            let draw = rng.random_range(0..k - 1);
            Ok(Some(if draw >= true_label { draw + 1 } else { draw }))
        }
    }
}

/// Runs the iterative attack on one image. The input must already lie in
/// the clip range. The perturbed image stays within `num_iters * epsilon`
/// of the input in max norm and inside the clip range.
pub fn bim(
    net: &Network,
    x: &Tensor,
    true_label: usize,
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<SamplePair> {
    cfg.validate()?;
    if x.data().iter().any(|&v| !(cfg.clip_min..=cfg.clip_max).contains(&v)) {
        return Err(Error::InvalidArgument {
            op: "bim",
            reason: format!("input pixels outside clip range [{}, {}]", cfg.clip_min, cfg.clip_max),
        });
    }
    let clean_logits = net.logits(x)?;
    if true_label >= clean_logits.len() {
        return Err(Error::InvalidArgument {
            op: "bim",
            reason: format!("true_label {true_label} out of range 0..{}", clean_logits.len()),
        });
    }
    let clean_pred = argmax(&clean_logits);
    let target = select_target(&clean_logits, true_label, cfg.mode, rng)?;
    let succeeded = |pred: usize| match target {
        Some(t) => pred == t,
        None => pred != clean_pred,
    };
    // Targeted descent on the target's loss; untargeted ascent on the true
    // label's loss.
    let (loss_class, step) = match target {
        Some(t) => (t, -cfg.epsilon),
        None => (true_label, cfg.epsilon),
    };

    let mut adv = x.clone();
    let mut adv_pred = clean_pred;
    for _ in 0..cfg.num_iters {
        if succeeded(adv_pred) {
            break;
        }
        let g = net.grad_input(&adv, loss_class, Head::Loss)?;
        let s = sign(&g);
        for (v, &sv) in adv.data_mut().iter_mut().zip(s.data()) {
            *v = (*v + step * sv).clamp(cfg.clip_min, cfg.clip_max);
        }
        adv_pred = argmax(&net.logits(&adv)?);
    }
    let success = succeeded(adv_pred);
    Ok(SamplePair {
        clean: x.clone(),
        adversarial: adv,
        true_label,
        clean_pred,
        adv_pred,
        target,
        success,
        mode: cfg.mode,
    })
}

/// Fraction of successful pairs. All pairs must share one attack mode.
pub fn attack_success_rate(pairs: &[SamplePair]) -> Result<f64> {
    let first = pairs.first().ok_or_else(|| Error::InvalidArgument {
        op: "attack_success_rate",
        reason: "no pairs".into(),
    })?;
    if pairs.iter().any(|p| p.mode != first.mode) {
        return Err(Error::InvalidArgument {
            op: "attack_success_rate",
            reason: "pairs mix attack modes".into(),
        });
    }
    Ok(pairs.iter().filter(|p| p.success).count() as f64 / pairs.len() as f64)
}

/// Attack outcomes for a batch of images, persisted as a manifest plus
/// stacked clean/adversarial tensor blobs.
#[derive(Debug, Clone)]
pub struct AttackCorpus {
    pub config: AttackConfig,
    pub ids: Vec<String>,
    pub pairs: Vec<SamplePair>,
}

#[derive(Serialize, Deserialize)]
struct CorpusManifest {
    version: String,
    config: AttackConfig,
    image_shape: Vec<usize>,
    entries: Vec<CorpusEntry>,
    clean: String,
    adversarial: String,
}

#[derive(Serialize, Deserialize)]
struct CorpusEntry {
    id: String,
    true_label: usize,
    clean_pred: usize,
    adv_pred: usize,
    target: Option<usize>,
    success: bool,
}

impl AttackCorpus {
    pub fn new(config: AttackConfig, ids: Vec<String>, pairs: Vec<SamplePair>) -> Result<Self> {
        if ids.len() != pairs.len() {
            return Err(Error::InvalidArgument {
                op: "AttackCorpus::new",
                reason: format!("{} ids for {} pairs", ids.len(), pairs.len()),
            });
        }
        if pairs.is_empty() {
            return Err(Error::InvalidArgument {
                op: "AttackCorpus::new",
                reason: "corpus needs at least one pair".into(),
            });
        }
        if pairs.iter().any(|p| p.mode != config.mode) {
            return Err(Error::InvalidArgument {
                op: "AttackCorpus::new",
                reason: "pair mode disagrees with corpus config".into(),
            });
        }
        Ok(AttackCorpus { config, ids, pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn success_rate(&self) -> Result<f64> {
        attack_success_rate(&self.pairs)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let clean: Vec<Tensor> = self.pairs.iter().map(|p| p.clean.clone()).collect();
        let adv: Vec<Tensor> = self.pairs.iter().map(|p| p.adversarial.clone()).collect();
        let clean = Tensor::stack(&clean)?;
        let adv = Tensor::stack(&adv)?;
        clean.save(&dir.join("clean.tnsr"))?;
        adv.save(&dir.join("adv.tnsr"))?;
        let manifest = CorpusManifest {
            version: CORPUS_VERSION.into(),
            config: self.config.clone(),
            image_shape: self.pairs[0].clean.shape().to_vec(),
            entries: self
                .ids
                .iter()
                .zip(&self.pairs)
                .map(|(id, p)| CorpusEntry {
                    id: id.clone(),
                    true_label: p.true_label,
                    clean_pred: p.clean_pred,
                    adv_pred: p.adv_pred,
                    target: p.target,
                    success: p.success,
                })
                .collect(),
            clean: "clean.tnsr".into(),
            adversarial: "adv.tnsr".into(),
        };
        crate::data::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<AttackCorpus> {
        let manifest_path = dir.join("manifest.json");
        let manifest: CorpusManifest = crate::data::read_json(&manifest_path)?;
        if manifest.version != CORPUS_VERSION {
            return Err(Error::UnsupportedVersion {
                path: manifest_path.display().to_string(),
                expected: CORPUS_VERSION.into(),
                found: manifest.version,
            });
        }
        let clean = Tensor::load(&dir.join(&manifest.clean))?;
        let adv = Tensor::load(&dir.join(&manifest.adversarial))?;
        let n = manifest.entries.len();
        let mut expect_shape = vec![n];
        expect_shape.extend_from_slice(&manifest.image_shape);
        if clean.shape() != expect_shape || adv.shape() != expect_shape {
            return Err(Error::Artifact {
                path: dir.display().to_string(),
                reason: format!(
                    "manifest promises {n} pairs of shape {:?}, blobs hold {:?} and {:?}",
                    manifest.image_shape,
                    clean.shape(),
                    adv.shape()
                ),
            });
        }
        let mut ids = Vec::with_capacity(n);
        let mut pairs = Vec::with_capacity(n);
        for (i, entry) in manifest.entries.into_iter().enumerate() {
            ids.push(entry.id);
            pairs.push(SamplePair {
                clean: clean.item_tensor(i),
                adversarial: adv.item_tensor(i),
                true_label: entry.true_label,
                clean_pred: entry.clean_pred,
                adv_pred: entry.adv_pred,
                target: entry.target,
                success: entry.success,
                mode: manifest.config.mode,
            });
        }
        AttackCorpus::new(manifest.config, ids, pairs)
    }
}
