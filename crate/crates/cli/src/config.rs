//! Pipeline configuration: one JSON file, dotted `--set` overrides, and a
//! canonical form (paths stripped) used for hashing and the report echo.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use xgap_core::attack::{AttackConfig, AttackMode};
use xgap_core::detector::FeatureScheme;
use xgap_core::model::Head;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub attack: AttackSection,
    pub attribution: AttributionConfig,
    pub detector: DetectorConfig,
    pub corpus: CorpusConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            attack: AttackSection::default(),
            attribution: AttributionConfig::default(),
            detector: DetectorConfig::default(),
            corpus: CorpusConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    /// Where stage artifacts are written. `--workdir` overrides this.
    pub workdir: Option<PathBuf>,
    /// Base directory that relative IDX paths resolve against.
    pub data: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Idx,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticConfig,
    pub idx: Option<IdxConfig>,
    pub holdout_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic: SyntheticConfig::default(),
            idx: None,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_images: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            num_images: 12_000,
            height: 28,
            width: 28,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxConfig {
    pub images: PathBuf,
    pub labels: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub classes: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![128, 64],
            classes: 10,
            learning_rate: 0.002,
            epochs: 2,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub epsilon: f64,
    pub num_iters: usize,
    pub clip_min: f64,
    pub clip_max: f64,
    pub modes: Vec<AttackMode>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            epsilon: 0.1,
            num_iters: 10,
            clip_min: 0.0,
            clip_max: 1.0,
            modes: vec![
                AttackMode::Untargeted,
                AttackMode::TargetedRandom,
                AttackMode::TargetedSecond,
            ],
        }
    }
}

impl AttackSection {
    /// The concrete per-mode attack configuration, seeded for that mode.
    pub fn for_mode(&self, mode: AttackMode, seed: u64) -> AttackConfig {
        AttackConfig {
            mode,
            epsilon: self.epsilon,
            num_iters: self.num_iters,
            clip_min: self.clip_min,
            clip_max: self.clip_max,
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineScheme {
    /// Single all-zero baseline (a black image).
    Zeros,
    /// Average over `num_baselines` training images drawn once per run.
    TrainSamples,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttributionConfig {
    pub head: Head,
    pub baseline: BaselineScheme,
    pub num_baselines: usize,
    pub steps_m: usize,
}

impl Default for AttributionConfig {
    fn default() -> Self {
        AttributionConfig {
            head: Head::Logit,
            baseline: BaselineScheme::Zeros,
            num_baselines: 8,
            steps_m: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectorConfig {
    pub scheme: FeatureScheme,
    /// Restrict descriptor pairs to attacks that actually succeeded.
    pub successful_only: bool,
    pub logistic: LogisticConfig,
    pub forest: ForestConfig,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            scheme: FeatureScheme::FlatAbs,
            successful_only: true,
            logistic: LogisticConfig::default(),
            forest: ForestConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LogisticConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig {
            learning_rate: 0.1,
            epochs: 300,
            l2: 1e-4,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub num_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub features_per_split: Option<usize>,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            num_trees: 100,
            max_depth: 16,
            min_leaf: 1,
            features_per_split: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// Training images attacked per mode; successful pairs feed the detector.
    pub train_pairs: usize,
    /// Held-out pairs per mode reserved for detector testing.
    pub test_pairs: usize,
    /// Held-out images attacked per mode for the success-rate table.
    pub eval_attacks: usize,
    pub histogram_bins: usize,
    pub histogram_range_max: f64,
    /// Cap on held-out maps pooled into the histogram; `None` pools all.
    pub histogram_subset: Option<usize>,
    pub exemplar_pairs: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            train_pairs: 1800,
            test_pairs: 450,
            eval_attacks: 1100,
            histogram_bins: 50,
            histogram_range_max: 0.08,
            histogram_subset: None,
            exemplar_pairs: 8,
        }
    }
}

impl PipelineConfig {
    /// Reads the config file, applies `--set` overrides in order, then
    /// validates. `workdir_flag` wins over `paths.workdir`.
    pub fn load(path: &Path, sets: &[String], workdir_flag: Option<&Path>) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut value: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{} is not valid JSON: {e}", path.display())))?;
        for set in sets {
            apply_override(&mut value, set)?;
        }
        let mut cfg: PipelineConfig = serde_json::from_value(value)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = workdir_flag {
            cfg.paths.workdir = Some(dir.to_path_buf());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn workdir(&self) -> Result<PathBuf> {
        self.paths
            .workdir
            .clone()
            .ok_or_else(|| CliError::Config("no workdir: set paths.workdir or pass --workdir".into()))
    }

    /// Resolves the IDX file pair, applying the `paths.data` base directory.
    pub fn idx_paths(&self) -> Result<(PathBuf, PathBuf)> {
        let idx = self
            .data
            .idx
            .as_ref()
            .ok_or_else(|| CliError::Config("data.source is \"idx\" but data.idx is not set".into()))?;
        let resolve = |p: &Path| -> PathBuf {
            match (&self.paths.data, p.is_relative()) {
                (Some(base), true) => base.join(p),
                _ => p.to_path_buf(),
            }
        };
        Ok((resolve(&idx.images), resolve(&idx.labels)))
    }

    /// The config with locations removed: the identity of the experiment,
    /// independent of where it runs. Hashed into provenance records and
    /// echoed into the report.
    pub fn canonical(&self) -> PipelineConfig {
        let mut c = self.clone();
        c.paths = PathsConfig::default();
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CliError::Config(msg));
        let d = &self.data;
        if !(d.holdout_fraction.is_finite() && 0.0 < d.holdout_fraction && d.holdout_fraction < 1.0) {
            return bad(format!(
                "data.holdout_fraction {} must lie strictly between 0 and 1",
                d.holdout_fraction
            ));
        }
        match d.source {
            DataSource::Synthetic => {
                let s = &d.synthetic;
                if s.num_images < 2 * self.model.classes {
                    return bad(format!(
                        "data.synthetic.num_images {} is too small for {} classes",
                        s.num_images, self.model.classes
                    ));
                }
                if s.height < 8 || s.width < 8 {
                    return bad(format!(
                        "data.synthetic image size {}x{} is too small to draw glyphs",
                        s.height, s.width
                    ));
                }
            }
            DataSource::Idx => {
                let (images, labels) = self.idx_paths()?;
                for p in [&images, &labels] {
                    if !p.is_file() {
                        return bad(format!("data.idx file {} does not exist", p.display()));
                    }
                }
            }
        }

        let m = &self.model;
        if m.classes < 2 {
            return bad(format!("model.classes {} must be at least 2", m.classes));
        }
        if m.hidden_dims.contains(&0) {
            return bad("model.hidden_dims entries must be positive".into());
        }
        if !(m.learning_rate.is_finite() && m.learning_rate > 0.0) {
            return bad(format!("model.learning_rate {} must be finite and positive", m.learning_rate));
        }
        if m.epochs == 0 || m.batch_size == 0 {
            return bad("model.epochs and model.batch_size must be at least 1".into());
        }

        let a = &self.attack;
        if a.modes.is_empty() {
            return bad("attack.modes must name at least one mode".into());
        }
        for (i, mode) in a.modes.iter().enumerate() {
            if a.modes[..i].contains(mode) {
                return bad(format!("attack.modes lists {} twice", mode.as_str()));
            }
            a.for_mode(*mode, 0)
                .validate()
                .map_err(|e| CliError::Config(format!("attack: {e}")))?;
        }

        let at = &self.attribution;
        if at.head == Head::Loss {
            return bad("attribution.head must be logit or probability".into());
        }
        if at.steps_m == 0 {
            return bad("attribution.steps_m must be at least 1".into());
        }
        if at.baseline == BaselineScheme::TrainSamples && at.num_baselines == 0 {
            return bad("attribution.num_baselines must be at least 1".into());
        }

        let det = &self.detector;
        if !(det.logistic.learning_rate.is_finite() && det.logistic.learning_rate > 0.0) {
            return bad(format!(
                "detector.logistic.learning_rate {} must be finite and positive",
                det.logistic.learning_rate
            ));
        }
        if !(det.logistic.l2.is_finite() && det.logistic.l2 >= 0.0) {
            return bad(format!("detector.logistic.l2 {} must be finite and non-negative", det.logistic.l2));
        }
        if det.forest.num_trees == 0 || det.forest.max_depth == 0 || det.forest.min_leaf == 0 {
            return bad("detector.forest sizes must all be at least 1".into());
        }
        if det.forest.features_per_split == Some(0) {
            return bad("detector.forest.features_per_split must be at least 1 when set".into());
        }

        let c = &self.corpus;
        if c.train_pairs == 0 || c.test_pairs == 0 || c.eval_attacks == 0 {
            return bad("corpus pair counts must be at least 1".into());
        }
        if c.test_pairs > c.eval_attacks {
            return bad(format!(
                "corpus.test_pairs {} cannot exceed corpus.eval_attacks {}",
                c.test_pairs, c.eval_attacks
            ));
        }
        if c.histogram_bins == 0 {
            return bad("corpus.histogram_bins must be at least 1".into());
        }
        if !(c.histogram_range_max.is_finite() && c.histogram_range_max > 0.0) {
            return bad(format!(
                "corpus.histogram_range_max {} must be finite and positive",
                c.histogram_range_max
            ));
        }
        if c.histogram_subset == Some(0) {
            return bad("corpus.histogram_subset must be at least 1 when set".into());
        }
        Ok(())
    }
}

/// Applies one `key.path=value` override onto the raw JSON tree. The value
/// is parsed as JSON when possible and kept as a string otherwise.
fn apply_override(root: &mut serde_json::Value, set: &str) -> Result<()> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("--set {set:?} is not of the form key=value")))?;
    let parts: Vec<&str> = key.split('.').collect();
    if key.is_empty() || parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("--set key {key:?} has an empty path segment")));
    }
    let mut cur = root;
    for part in &parts[..parts.len() - 1] {
        if cur.is_null() {
            *cur = serde_json::Value::Object(serde_json::Map::new());
        }
        let map = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("--set {key}: `{part}` is not an object")))?;
        cur = map
            .entry(part.to_string())
            .or_insert(serde_json::Value::Null);
    }
    if cur.is_null() {
        *cur = serde_json::Value::Object(serde_json::Map::new());
    }
    let leaf = parts[parts.len() - 1];
    let map = cur
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("--set {key}: parent of `{leaf}` is not an object")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
    map.insert(leaf.to_string(), value);
    Ok(())
}
