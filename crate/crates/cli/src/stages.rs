//! The seven pipeline stages. Each one reads the artifacts of its upstream
//! stages from the workdir, writes its own artifact directory from scratch,
//! and records provenance hashes so stale mixtures are caught, never used.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use xgap_core::attack::{attack_success_rate, bim, AttackCorpus, AttackMode, SamplePair};
use xgap_core::attribution::{
    abs_attribution_histogram, expected_gradients, write_pgm, AttributionMap, AttributionStore, Histogram,
};
use xgap_core::data::{load_idx, read_json, save_idx, split_holdout, write_json, LabeledDataset};
use xgap_core::detector::{
    detection_accuracy, featurize, forest_train, load_detector, logreg_train, save_detector,
    FeatureScheme, ForestParams, LogisticParams,
};
use xgap_core::model::{train, Head, Network, TrainConfig};
use xgap_core::rng::{derive_rng, derive_seed};
use xgap_core::tensor::{argmax, Tensor};

use crate::config::{BaselineScheme, DataSource, PipelineConfig};
use crate::error::{CliError, Result};
use crate::hashes::{files_under, verify_inputs, write_record};
use crate::synth;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Prepare,
    TrainModel,
    GenAttacks,
    GenAttributions,
    TrainDetector,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::Prepare,
        Stage::TrainModel,
        Stage::GenAttacks,
        Stage::GenAttributions,
        Stage::TrainDetector,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainModel => "train-model",
            Stage::GenAttacks => "gen-attacks",
            Stage::GenAttributions => "gen-attributions",
            Stage::TrainDetector => "train-detector",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Workdir subdirectory this stage owns.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Prepare => "data",
            Stage::TrainModel => "model",
            Stage::GenAttacks => "attacks",
            Stage::GenAttributions => "attributions",
            Stage::TrainDetector => "detector",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn from_name(name: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|s| s.name() == name)
    }
}

/// Runs one stage and appends its wall-clock time to `timings.log`.
/// Timing lives outside every artifact so reruns stay bit-identical.
pub fn run_stage(stage: Stage, cfg: &PipelineConfig) -> Result<()> {
    let started = Instant::now();
    match stage {
        Stage::Prepare => prepare(cfg)?,
        Stage::TrainModel => train_model(cfg)?,
        Stage::GenAttacks => gen_attacks(cfg)?,
        Stage::GenAttributions => gen_attributions(cfg)?,
        Stage::TrainDetector => train_detector(cfg)?,
        Stage::Evaluate => evaluate(cfg)?,
        Stage::Report => report(cfg)?,
    }
    let workdir = cfg.workdir()?;
    let path = workdir.join("timings.log");
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| CliError::Data(format!("cannot open {}: {e}", path.display())))?;
    writeln!(file, "{}\t{:.3}s", stage.name(), started.elapsed().as_secs_f64())
        .map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
    Ok(())
}

fn reset_dir(path: &Path) -> Result<()> {
    if path.exists() {
        std::fs::remove_dir_all(path)
            .map_err(|e| CliError::Data(format!("cannot clear {}: {e}", path.display())))?;
    }
    make_dir(path)
}

fn make_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

// ---------------------------------------------------------------- prepare

#[derive(Debug, Serialize, Deserialize)]
struct DataSummary {
    num_images: usize,
    image_shape: Vec<usize>,
    train_size: usize,
    test_size: usize,
    train_class_counts: Vec<usize>,
    test_class_counts: Vec<usize>,
}

fn class_counts(ds: &LabeledDataset, classes: usize) -> Vec<usize> {
    let mut counts = vec![0usize; classes];
    for &label in &ds.labels {
        counts[label] += 1;
    }
    counts
}

fn prepare(cfg: &PipelineConfig) -> Result<()> {
    let workdir = cfg.workdir()?;
    make_dir(&workdir)?;
    let data_dir = workdir.join(Stage::Prepare.dir());
    reset_dir(&data_dir)?;

    let ds = match cfg.data.source {
        DataSource::Synthetic => {
            let s = &cfg.data.synthetic;
            let (images, labels) = synth::generate(s.num_images, s.height, s.width, derive_seed(cfg.seed, "synth"));
            let idx_dir = data_dir.join("idx");
            make_dir(&idx_dir)?;
            let images_path = idx_dir.join("images.idx");
            let labels_path = idx_dir.join("labels.idx");
            save_idx(&images_path, &labels_path, &images, &labels)?;
            // Read back through the same parser real data takes, so the
            // canonical pixel values are the quantized ones on disk.
            load_idx(&images_path, &labels_path)?
        }
        DataSource::Idx => {
            let (images_path, labels_path) = cfg.idx_paths()?;
            load_idx(&images_path, &labels_path)?
        }
    };

    if let Some(&max_label) = ds.labels.iter().max() {
        if max_label >= cfg.model.classes {
            return Err(CliError::Data(format!(
                "dataset contains label {max_label} but model.classes is {}",
                cfg.model.classes
            )));
        }
    }

    let (train_ds, test_ds) = split_holdout(&ds, cfg.data.holdout_fraction, derive_seed(cfg.seed, "split"))?;
    train_ds.save(&data_dir.join("train"))?;
    test_ds.save(&data_dir.join("test"))?;
    write_json(
        &data_dir.join("summary.json"),
        &DataSummary {
            num_images: ds.len(),
            image_shape: ds.images.shape()[1..].to_vec(),
            train_size: train_ds.len(),
            test_size: test_ds.len(),
            train_class_counts: class_counts(&train_ds, cfg.model.classes),
            test_class_counts: class_counts(&test_ds, cfg.model.classes),
        },
    )?;

    write_record(&workdir, Stage::Prepare, cfg, BTreeMap::new(), &files_under(&data_dir)?)
}

// ------------------------------------------------------------ train-model

#[derive(Debug, Serialize, Deserialize)]
struct ModelMetrics {
    train_accuracy: f64,
    test_accuracy: f64,
    epoch_losses: Vec<f64>,
}

fn load_datasets(workdir: &Path) -> Result<(LabeledDataset, LabeledDataset)> {
    let data_dir = workdir.join(Stage::Prepare.dir());
    let train_ds = LabeledDataset::load(&data_dir.join("train"))?;
    let test_ds = LabeledDataset::load(&data_dir.join("test"))?;
    Ok((train_ds, test_ds))
}

fn load_network(workdir: &Path) -> Result<Network> {
    Ok(Network::load(&workdir.join(Stage::TrainModel.dir()).join("checkpoint"))?)
}

fn flattened(ds: &LabeledDataset) -> Result<Tensor> {
    Ok(ds.images.reshaped(vec![ds.len(), ds.images.item_len()])?)
}

fn model_accuracy(net: &Network, ds: &LabeledDataset) -> Result<f64> {
    let logits = net.logits_batch(&flattened(ds)?)?;
    let k = net.num_classes();
    let correct = (0..ds.len())
        .filter(|&i| argmax(&logits.data()[i * k..(i + 1) * k]) == ds.labels[i])
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

fn train_model(cfg: &PipelineConfig) -> Result<()> {
    let workdir = cfg.workdir()?;
    let inputs = verify_inputs(&workdir, &[Stage::Prepare], Stage::TrainModel.name())?;
    let model_dir = workdir.join(Stage::TrainModel.dir());
    reset_dir(&model_dir)?;

    let (train_ds, test_ds) = load_datasets(&workdir)?;
    let input_dim = train_ds.images.item_len();
    let model_seed = derive_seed(cfg.seed, "model");
    let mut net = Network::new(input_dim, &cfg.model.hidden_dims, cfg.model.classes, model_seed)?;
    let epoch_losses = train(
        &mut net,
        &flattened(&train_ds)?,
        &train_ds.labels,
        &TrainConfig {
            learning_rate: cfg.model.learning_rate,
            epochs: cfg.model.epochs,
            batch_size: cfg.model.batch_size,
            seed: model_seed,
        },
    )?;

    net.save(&model_dir.join("checkpoint"))?;
    write_json(
        &model_dir.join("metrics.json"),
        &ModelMetrics {
            train_accuracy: model_accuracy(&net, &train_ds)?,
            test_accuracy: model_accuracy(&net, &test_ds)?,
            epoch_losses,
        },
    )?;

    write_record(&workdir, Stage::TrainModel, cfg, inputs, &files_under(&model_dir)?)
}

// ------------------------------------------------------------ gen-attacks

#[derive(Debug, Serialize, Deserialize)]
struct AttackSideSummary {
    images: usize,
    success_rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct AttackModeSummary {
    mode: AttackMode,
    train: AttackSideSummary,
    eval: AttackSideSummary,
}

/// Draws `k` distinct indices from `0..n`, returned in ascending order.
fn sample_indices(n: usize, k: usize, seed: u64, label: &str) -> Result<Vec<usize>> {
    if k > n {
        return Err(CliError::Data(format!(
            "{label} needs {k} images but only {n} are available"
        )));
    }
    use rand::seq::SliceRandom;
    let mut rng = derive_rng(seed, label);
    let mut all: Vec<usize> = (0..n).collect();
    let (sampled, _) = all.partial_shuffle(&mut rng, k);
    let mut out = sampled.to_vec();
    out.sort_unstable();
    Ok(out)
}

fn attack_subset(
    net: &Network,
    ds: &LabeledDataset,
    indices: &[usize],
    cfg: &xgap_core::attack::AttackConfig,
    id_prefix: &str,
) -> Result<AttackCorpus> {
    let results: Vec<(String, SamplePair)> = indices
        .par_iter()
        .map(|&i| {
            let id = format!("{id_prefix}-{i:05}");
            let mut rng = derive_rng(cfg.seed, &id);
            let pair = bim(net, &ds.image(i), ds.labels[i], cfg, &mut rng).map_err(CliError::from)?;
            Ok::<_, CliError>((id, pair))
        })
        .collect::<Result<_>>()?;
    let (ids, pairs): (Vec<String>, Vec<SamplePair>) = results.into_iter().unzip();
    Ok(AttackCorpus::new(cfg.clone(), ids, pairs)?)
}

fn gen_attacks(cfg: &PipelineConfig) -> Result<()> {
    let workdir = cfg.workdir()?;
    let inputs = verify_inputs(&workdir, &[Stage::Prepare, Stage::TrainModel], Stage::GenAttacks.name())?;
    let attacks_dir = workdir.join(Stage::GenAttacks.dir());
    reset_dir(&attacks_dir)?;

    let (train_ds, test_ds) = load_datasets(&workdir)?;
    let net = load_network(&workdir)?;
    let train_idx = sample_indices(train_ds.len(), cfg.corpus.train_pairs, cfg.seed, "pairs-train")?;
    let eval_idx = sample_indices(test_ds.len(), cfg.corpus.eval_attacks, cfg.seed, "pairs-eval")?;

    let mut summaries = Vec::new();
    for &mode in &cfg.attack.modes {
        let mode_seed = derive_seed(cfg.seed, &format!("attack:{}", mode.as_str()));
        let attack_cfg = cfg.attack.for_mode(mode, mode_seed);
        let mode_dir = attacks_dir.join(mode.as_str());

        let train_corpus = attack_subset(&net, &train_ds, &train_idx, &attack_cfg, "train")?;
        train_corpus.save(&mode_dir.join("train"))?;
        let eval_corpus = attack_subset(&net, &test_ds, &eval_idx, &attack_cfg, "test")?;
        eval_corpus.save(&mode_dir.join("eval"))?;

        summaries.push(AttackModeSummary {
            mode,
            train: AttackSideSummary {
                images: train_corpus.len(),
                success_rate: attack_success_rate(&train_corpus.pairs)?,
            },
            eval: AttackSideSummary {
                images: eval_corpus.len(),
                success_rate: attack_success_rate(&eval_corpus.pairs)?,
            },
        });
    }
    write_json(&attacks_dir.join("summary.json"), &summaries)?;

    write_record(&workdir, Stage::GenAttacks, cfg, inputs, &files_under(&attacks_dir)?)
}

// ------------------------------------------------------- gen-attributions

#[derive(Debug, Serialize, Deserialize)]
struct StoreSummary {
    store: String,
    maps: usize,
    mean_abs: f64,
}

/// One attribution job: sample id, the input to explain, and the class the
/// model asserts for it.
type MapJob = (String, Tensor, usize);

fn compute_maps(
    net: &Network,
    jobs: &[MapJob],
    baselines: &[Tensor],
    baseline_id: &str,
    head: Head,
    steps_m: usize,
) -> Result<Vec<AttributionMap>> {
    jobs.par_iter()
        .map(|(_, x, class)| {
            expected_gradients(net, x, baselines, baseline_id, *class, head, steps_m).map_err(CliError::from)
        })
        .collect()
}

fn mean_abs(map: &AttributionMap) -> f64 {
    let v = map.values.data();
    v.iter().map(|x| x.abs()).sum::<f64>() / v.len() as f64
}

fn save_store(dir: &Path, ids: Vec<String>, maps: &[AttributionMap], summaries: &mut Vec<StoreSummary>) -> Result<()> {
    let store = AttributionStore::from_maps(ids, maps)?;
    store.save(dir)?;
    store.write_summary_csv(&dir.join("summary.csv"))?;
    summaries.push(StoreSummary {
        store: dir.file_name().unwrap_or_default().to_string_lossy().into_owned(),
        maps: maps.len(),
        mean_abs: maps.iter().map(mean_abs).sum::<f64>() / maps.len() as f64,
    });
    Ok(())
}

/// Picks which pairs of an attack corpus get attributed. Training-side
/// selections keep every (successful) pair; eval-side selections stop at
/// `limit` pairs so the detector test set has a fixed size.
fn select_pairs(corpus: &AttackCorpus, successful_only: bool, limit: Option<usize>) -> Vec<usize> {
    let mut picked = Vec::new();
    for (i, pair) in corpus.pairs.iter().enumerate() {
        if successful_only && !pair.success {
            continue;
        }
        picked.push(i);
        if limit.is_some_and(|l| picked.len() == l) {
            break;
        }
    }
    picked
}

fn gen_attributions(cfg: &PipelineConfig) -> Result<()> {
    let workdir = cfg.workdir()?;
    let inputs = verify_inputs(
        &workdir,
        &[Stage::Prepare, Stage::TrainModel, Stage::GenAttacks],
        Stage::GenAttributions.name(),
    )?;
    let attr_dir = workdir.join(Stage::GenAttributions.dir());
    reset_dir(&attr_dir)?;

    let net = load_network(&workdir)?;
    let head = cfg.attribution.head;
    let steps_m = cfg.attribution.steps_m;
    let successful_only = cfg.detector.successful_only;

    // Resolve the baseline set once; every map in the run shares it.
    let (baselines, baseline_id): (Vec<Tensor>, String) = match cfg.attribution.baseline {
        BaselineScheme::Zeros => (Vec::new(), "zeros".to_string()),
        BaselineScheme::TrainSamples => {
            let (train_ds, _) = load_datasets(&workdir)?;
            let k = cfg.attribution.num_baselines;
            let idx = sample_indices(train_ds.len(), k, cfg.seed, "baselines")?;
            let images = idx.iter().map(|&i| train_ds.image(i)).collect();
            (images, format!("train-samples-{k}"))
        }
    };
    let baselines_for = |shape: &[usize]| -> Vec<Tensor> {
        if baselines.is_empty() {
            vec![Tensor::zeros(shape)]
        } else {
            baselines.clone()
        }
    };

    let mut summaries = Vec::new();
    // Clean maps are shared across modes: collect unique ids per side in
    // first-appearance order, then compute each map once.
    let mut clean_jobs: BTreeMap<&str, (Vec<MapJob>, HashSet<String>)> = BTreeMap::new();

    for &mode in &cfg.attack.modes {
        let mode_dir = workdir.join(Stage::GenAttacks.dir()).join(mode.as_str());
        for (side, store_suffix, limit) in [
            ("train", "adv_train", None),
            ("eval", "adv_eval", Some(cfg.corpus.test_pairs)),
        ] {
            let corpus = AttackCorpus::load(&mode_dir.join(side))?;
            let picked = select_pairs(&corpus, successful_only, limit);
            if let Some(want) = limit {
                if picked.len() < want {
                    return Err(CliError::Data(format!(
                        "{} eval attacks yield only {} usable pairs of the {} requested; raise corpus.eval_attacks",
                        mode.as_str(),
                        picked.len(),
                        want
                    )));
                }
            }
            if picked.is_empty() {
                return Err(CliError::Data(format!(
                    "no usable {} pairs for mode {}; every attack failed",
                    side,
                    mode.as_str()
                )));
            }

            let adv_jobs: Vec<MapJob> = picked
                .iter()
                .map(|&i| {
                    let pair = &corpus.pairs[i];
                    (corpus.ids[i].clone(), pair.adversarial.clone(), pair.adv_pred)
                })
                .collect();
            let shape = adv_jobs[0].1.shape().to_vec();
            let maps = compute_maps(&net, &adv_jobs, &baselines_for(&shape), &baseline_id, head, steps_m)?;
            let ids: Vec<String> = adv_jobs.into_iter().map(|(id, _, _)| id).collect();
            save_store(&attr_dir.join(format!("{}_{store_suffix}", mode.as_str())), ids, &maps, &mut summaries)?;

            let (jobs, seen) = clean_jobs.entry(side).or_default();
            for &i in &picked {
                let id = &corpus.ids[i];
                if seen.insert(id.clone()) {
                    jobs.push((id.clone(), corpus.pairs[i].clean.clone(), corpus.pairs[i].clean_pred));
                }
            }
        }
    }

    for (side, (jobs, _)) in &clean_jobs {
        let shape = jobs[0].1.shape().to_vec();
        let maps = compute_maps(&net, jobs, &baselines_for(&shape), &baseline_id, head, steps_m)?;
        let ids: Vec<String> = jobs.iter().map(|(id, _, _)| id.clone()).collect();
        save_store(&attr_dir.join(format!("clean_{side}")), ids, &maps, &mut summaries)?;
    }

    write_json(&attr_dir.join("summary.json"), &summaries)?;
    write_record(&workdir, Stage::GenAttributions, cfg, inputs, &files_under(&attr_dir)?)
}

// ---------------------------------------------------------- train-detector

#[derive(Debug, Serialize, Deserialize)]
struct DetectorMetrics {
    mode: AttackMode,
    pairs: usize,
    logistic_train_accuracy: f64,
    logistic_final_loss: Option<f64>,
    forest_train_accuracy: f64,
}

fn load_store(workdir: &Path, name: &str) -> Result<AttributionStore> {
    Ok(AttributionStore::load(&workdir.join(Stage::GenAttributions.dir()).join(name))?)
}

/// Builds the labeled descriptor set for one mode: for every attacked id,
/// the clean map's descriptor (label 0) and the adversarial map's (label 1).
fn descriptor_set(
    clean: &AttributionStore,
    adv: &AttributionStore,
    scheme: FeatureScheme,
) -> Result<(Vec<Vec<f64>>, Vec<u8>)> {
    let mut features = Vec::with_capacity(2 * adv.len());
    let mut labels = Vec::with_capacity(2 * adv.len());
    for (i, id) in adv.ids.iter().enumerate() {
        let ci = clean
            .find(id)
            .ok_or_else(|| CliError::Data(format!("no clean attribution map for sample {id}")))?;
        features.push(featurize(&clean.map(ci), scheme));
        labels.push(0);
        features.push(featurize(&adv.map(i), scheme));
        labels.push(1);
    }
    Ok((features, labels))
}

fn train_detector(cfg: &PipelineConfig) -> Result<()> {
    let workdir = cfg.workdir()?;
    let inputs = verify_inputs(&workdir, &[Stage::GenAttributions], Stage::TrainDetector.name())?;
    let det_dir = workdir.join(Stage::TrainDetector.dir());
    reset_dir(&det_dir)?;

    let scheme = cfg.detector.scheme;
    let clean_train = load_store(&workdir, "clean_train")?;
    let logistic_params = LogisticParams {
        learning_rate: cfg.detector.logistic.learning_rate,
        epochs: cfg.detector.logistic.epochs,
        l2: cfg.detector.logistic.l2,
    };
    let forest_params = ForestParams {
        n_trees: cfg.detector.forest.num_trees,
        max_depth: cfg.detector.forest.max_depth,
        min_leaf: cfg.detector.forest.min_leaf,
        features_per_split: cfg.detector.forest.features_per_split,
    };

    let mut metrics = Vec::new();
    for &mode in &cfg.attack.modes {
        let adv = load_store(&workdir, &format!("{}_adv_train", mode.as_str()))?;
        let (features, labels) = descriptor_set(&clean_train, &adv, scheme)?;

        let logistic_seed = derive_seed(cfg.seed, &format!("detector:logistic:{}", mode.as_str()));
        let (logistic, losses) = logreg_train(&features, &labels, &logistic_params, logistic_seed)?;
        let forest_seed = derive_seed(cfg.seed, &format!("detector:forest:{}", mode.as_str()));
        let forest = forest_train(&features, &labels, &forest_params, forest_seed)?;

        let mode_dir = det_dir.join(mode.as_str());
        save_detector(&logistic, &mode_dir.join("logistic"))?;
        save_detector(&forest, &mode_dir.join("forest"))?;
        metrics.push(DetectorMetrics {
            mode,
            pairs: adv.len(),
            logistic_train_accuracy: detection_accuracy(&logistic, &features, &labels)?,
            logistic_final_loss: losses.last().copied(),
            forest_train_accuracy: detection_accuracy(&forest, &features, &labels)?,
        });
    }
    write_json(&det_dir.join("metrics.json"), &metrics)?;

    write_record(&workdir, Stage::TrainDetector, cfg, inputs, &files_under(&det_dir)?)
}

// ---------------------------------------------------------------- evaluate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSummary {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_epoch_loss: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub mode: AttackMode,
    pub images: usize,
    pub success_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorOutcome {
    pub mode: AttackMode,
    pub train_pairs: usize,
    pub test_pairs: usize,
    pub logistic_accuracy: f64,
    pub forest_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShiftSummary {
    pub head: Head,
    pub steps_m: usize,
    pub baseline_id: String,
    pub clean_maps: usize,
    pub adversarial_maps: usize,
    pub mean_abs_clean: f64,
    pub mean_abs_adversarial: f64,
    /// Probability that a random clean map outscores a random adversarial
    /// one on mean absolute attribution.
    pub auc_clean_greater: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationData {
    pub schema_version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub provenance: BTreeMap<String, String>,
    pub model: ModelSummary,
    pub attacks: Vec<AttackOutcome>,
    pub detectors: Vec<DetectorOutcome>,
    pub attribution_shift: ShiftSummary,
    pub histogram_bins: usize,
    pub histogram_range_max: f64,
    pub clean_histogram: Histogram,
    pub adversarial_histogram: Histogram,
}

pub const EVALUATION_SCHEMA: &str = "xgap-evaluation-v1";

/// Rank-based two-sample AUC: P(clean > adv) with ties counted half.
fn auc_clean_greater(clean: &[f64], adv: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = clean
        .iter()
        .map(|&v| (v, true))
        .chain(adv.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // Tied values share the average of ranks i+1..=j.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for entry in &all[i..j] {
            if entry.1 {
                rank_sum += avg_rank;
            }
        }
        i = j;
    }
    let (nc, na) = (clean.len() as f64, adv.len() as f64);
    (rank_sum - nc * (nc + 1.0) / 2.0) / (nc * na)
}

fn evaluate(cfg: &PipelineConfig) -> Result<()> {
    let workdir = cfg.workdir()?;
    let provenance = verify_inputs(
        &workdir,
        &[
            Stage::Prepare,
            Stage::TrainModel,
            Stage::GenAttacks,
            Stage::GenAttributions,
            Stage::TrainDetector,
        ],
        Stage::Evaluate.name(),
    )?;
    let eval_dir = workdir.join(Stage::Evaluate.dir());
    reset_dir(&eval_dir)?;

    let model_metrics: ModelMetrics = read_json(&workdir.join(Stage::TrainModel.dir()).join("metrics.json"))?;
    let detector_metrics: Vec<DetectorMetrics> =
        read_json(&workdir.join(Stage::TrainDetector.dir()).join("metrics.json"))?;

    let mut attacks = Vec::new();
    for &mode in &cfg.attack.modes {
        let corpus = AttackCorpus::load(&workdir.join(Stage::GenAttacks.dir()).join(mode.as_str()).join("eval"))?;
        attacks.push(AttackOutcome {
            mode,
            images: corpus.len(),
            success_rate: attack_success_rate(&corpus.pairs)?,
        });
    }

    if detector_metrics.len() != cfg.attack.modes.len() {
        return Err(CliError::Data(format!(
            "detector metrics cover {} modes but the config names {}; rerun train-detector",
            detector_metrics.len(),
            cfg.attack.modes.len()
        )));
    }
    let scheme = cfg.detector.scheme;
    let clean_eval = load_store(&workdir, "clean_eval")?;
    let mut detectors = Vec::new();
    let mut adv_maps: Vec<AttributionMap> = Vec::new();
    for (&mode, trained) in cfg.attack.modes.iter().zip(&detector_metrics) {
        if trained.mode != mode {
            return Err(CliError::Data(format!(
                "detector metrics list {} where {} was expected; rerun train-detector",
                trained.mode.as_str(),
                mode.as_str()
            )));
        }
        let adv = load_store(&workdir, &format!("{}_adv_eval", mode.as_str()))?;
        let (features, labels) = descriptor_set(&clean_eval, &adv, scheme)?;
        let mode_dir = workdir.join(Stage::TrainDetector.dir()).join(mode.as_str());
        let logistic = load_detector(&mode_dir.join("logistic"))?;
        let forest = load_detector(&mode_dir.join("forest"))?;
        detectors.push(DetectorOutcome {
            mode,
            train_pairs: trained.pairs,
            test_pairs: adv.len(),
            logistic_accuracy: detection_accuracy(&logistic, &features, &labels)?,
            forest_accuracy: detection_accuracy(&forest, &features, &labels)?,
        });
        adv_maps.extend((0..adv.len()).map(|i| adv.map(i)));
    }

    let mut clean_maps: Vec<AttributionMap> = (0..clean_eval.len()).map(|i| clean_eval.map(i)).collect();
    if let Some(cap) = cfg.corpus.histogram_subset {
        clean_maps.truncate(cap);
        adv_maps.truncate(cap);
    }
    let clean_scores: Vec<f64> = clean_maps.iter().map(mean_abs).collect();
    let adv_scores: Vec<f64> = adv_maps.iter().map(mean_abs).collect();
    let bins = cfg.corpus.histogram_bins;
    let range_max = cfg.corpus.histogram_range_max;

    let data = EvaluationData {
        schema_version: EVALUATION_SCHEMA.to_string(),
        seed: cfg.seed,
        config: cfg.canonical(),
        provenance,
        model: ModelSummary {
            train_accuracy: model_metrics.train_accuracy,
            test_accuracy: model_metrics.test_accuracy,
            final_epoch_loss: model_metrics.epoch_losses.last().copied(),
        },
        attacks,
        detectors,
        attribution_shift: ShiftSummary {
            head: clean_eval.head,
            steps_m: clean_eval.steps_m,
            baseline_id: clean_eval.baseline_id.clone(),
            clean_maps: clean_maps.len(),
            adversarial_maps: adv_maps.len(),
            mean_abs_clean: clean_scores.iter().sum::<f64>() / clean_scores.len() as f64,
            mean_abs_adversarial: adv_scores.iter().sum::<f64>() / adv_scores.len() as f64,
            auc_clean_greater: auc_clean_greater(&clean_scores, &adv_scores),
        },
        histogram_bins: bins,
        histogram_range_max: range_max,
        clean_histogram: abs_attribution_histogram(&clean_maps, bins, range_max)?,
        adversarial_histogram: abs_attribution_histogram(&adv_maps, bins, range_max)?,
    };
    write_json(&eval_dir.join("evaluation.json"), &data)?;

    let inputs = data.provenance.clone();
    write_record(&workdir, Stage::Evaluate, cfg, inputs, &files_under(&eval_dir)?)
}

// ------------------------------------------------------------------ report

#[derive(Debug, Serialize, Deserialize)]
pub struct ArtifactRefs {
    pub table1: String,
    pub table2: String,
    pub histogram: String,
    pub exemplars: Vec<String>,
    /// Wall-clock lines live outside the report so reruns stay identical.
    pub timings_log: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub schema_version: String,
    pub seed: u64,
    pub config: PipelineConfig,
    pub model: ModelSummary,
    pub attacks: Vec<AttackOutcome>,
    pub detectors: Vec<DetectorOutcome>,
    pub attribution_shift: ShiftSummary,
    pub artifacts: ArtifactRefs,
}

pub const REPORT_SCHEMA: &str = "xgap-report-v1";

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn histogram_csv(clean: &Histogram, adv: &Histogram) -> String {
    let mut out = String::from("bin_lo,bin_hi,count_clean,count_adv\n");
    let bins = clean.counts.len() - 1;
    for i in 0..clean.counts.len() {
        let (lo, hi) = if i < bins {
            (clean.bin_edges[i], clean.bin_edges[i + 1].to_string())
        } else {
            (clean.bin_edges[bins], "inf".to_string())
        };
        out.push_str(&format!("{lo},{hi},{},{}\n", clean.counts[i], adv.counts[i]));
    }
    out
}

fn report(cfg: &PipelineConfig) -> Result<()> {
    let workdir = cfg.workdir()?;
    let inputs = verify_inputs(&workdir, &[Stage::Evaluate, Stage::GenAttributions], Stage::Report.name())?;
    let report_dir = workdir.join(Stage::Report.dir());
    reset_dir(&report_dir)?;

    let data: EvaluationData = read_json(&workdir.join(Stage::Evaluate.dir()).join("evaluation.json"))?;
    if data.schema_version != EVALUATION_SCHEMA {
        return Err(CliError::Data(format!(
            "evaluation.json has schema {} but {EVALUATION_SCHEMA} is required",
            data.schema_version
        )));
    }

    let mut table1 = String::from("attack,images,success_rate\n");
    for a in &data.attacks {
        table1.push_str(&format!("{},{},{:.6}\n", a.mode.as_str(), a.images, a.success_rate));
    }
    write_text(&report_dir.join("table1.csv"), &table1)?;

    let mut table2 = String::from("attack,logistic_regression,random_forest\n");
    for d in &data.detectors {
        table2.push_str(&format!(
            "{},{:.6},{:.6}\n",
            d.mode.as_str(),
            d.logistic_accuracy,
            d.forest_accuracy
        ));
    }
    write_text(&report_dir.join("table2.csv"), &table2)?;

    write_text(
        &report_dir.join("fig2_histogram.csv"),
        &histogram_csv(&data.clean_histogram, &data.adversarial_histogram),
    )?;

    // Exemplar pairs: the first attributed eval samples of the first mode,
    // rendered as grayscale magnitude images.
    let mut exemplars = Vec::new();
    if cfg.corpus.exemplar_pairs > 0 {
        let mode = cfg.attack.modes[0];
        let clean_eval = load_store(&workdir, "clean_eval")?;
        let adv = load_store(&workdir, &format!("{}_adv_eval", mode.as_str()))?;
        let pgm_dir = report_dir.join("exemplars");
        make_dir(&pgm_dir)?;
        for i in 0..cfg.corpus.exemplar_pairs.min(adv.len()) {
            let id = &adv.ids[i];
            let ci = clean_eval
                .find(id)
                .ok_or_else(|| CliError::Data(format!("no clean attribution map for exemplar {id}")))?;
            for (suffix, map) in [("clean", clean_eval.map(ci)), ("adv", adv.map(i))] {
                let name = format!("{id}_{}_{suffix}.pgm", mode.as_str());
                write_pgm(&map, &pgm_dir.join(&name))?;
                exemplars.push(format!("report/exemplars/{name}"));
            }
        }
    }

    let report = EvaluationReport {
        schema_version: REPORT_SCHEMA.to_string(),
        seed: data.seed,
        config: data.config,
        model: data.model,
        attacks: data.attacks,
        detectors: data.detectors,
        attribution_shift: data.attribution_shift,
        artifacts: ArtifactRefs {
            table1: "report/table1.csv".to_string(),
            table2: "report/table2.csv".to_string(),
            histogram: "report/fig2_histogram.csv".to_string(),
            exemplars,
            timings_log: "timings.log".to_string(),
        },
    };
    write_json(&report_dir.join("report.json"), &report)?;

    write_record(&workdir, Stage::Report, cfg, inputs, &files_under(&report_dir)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_names_round_trip() {
        for stage in Stage::ALL {
            assert_eq!(Stage::from_name(stage.name()), Some(stage));
        }
        assert_eq!(Stage::from_name("bogus"), None);
    }

    #[test]
    fn sampled_indices_are_distinct_sorted_and_seeded() {
        let a = sample_indices(100, 20, 5, "pairs-train").unwrap();
        let b = sample_indices(100, 20, 5, "pairs-train").unwrap();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        let c = sample_indices(100, 20, 6, "pairs-train").unwrap();
        assert_ne!(a, c);
        let d = sample_indices(100, 20, 5, "pairs-eval").unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn oversampling_is_a_data_error() {
        let err = sample_indices(10, 11, 5, "pairs-train").unwrap_err();
        assert_eq!(err.exit_code(), 4);
    }

    #[test]
    fn auc_separated_groups_is_one() {
        let clean = vec![5.0, 6.0, 7.0];
        let adv = vec![1.0, 2.0, 3.0];
        assert_eq!(auc_clean_greater(&clean, &adv), 1.0);
        assert_eq!(auc_clean_greater(&adv, &clean), 0.0);
    }

    #[test]
    fn auc_identical_groups_is_half() {
        let xs = vec![1.0, 2.0, 3.0, 4.0];
        assert!((auc_clean_greater(&xs, &xs) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_hand_count() {
        // clean {3, 1}, adv {2, 0}: pairs won 3>2, 3>0, 1>0 of 4.
        let auc = auc_clean_greater(&[3.0, 1.0], &[2.0, 0.0]);
        assert!((auc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_ties_count_half() {
        let auc = auc_clean_greater(&[1.0], &[1.0]);
        assert!((auc - 0.5).abs() < 1e-12);
    }

    #[test]
    fn histogram_csv_has_bins_plus_overflow_rows() {
        let maps = [AttributionMap {
            values: Tensor::new(vec![1, 4], vec![0.1, 0.4, 0.9, 5.0]).unwrap(),
            explained_class: 0,
            head: Head::Logit,
            baseline_id: "zeros".into(),
            steps_m: 1,
        }];
        let h = abs_attribution_histogram(&maps, 4, 1.0).unwrap();
        let csv = histogram_csv(&h, &h);
        let lines: Vec<&str> = csv.trim_end().lines().collect();
        assert_eq!(lines[0], "bin_lo,bin_hi,count_clean,count_adv");
        assert_eq!(lines.len(), 1 + 4 + 1);
        assert!(lines[5].starts_with("1,inf,"));
        let total: u64 = h.counts.iter().sum();
        assert_eq!(total, 4);
    }

    #[test]
    fn pair_selection_respects_success_flag_and_limit() {
        let success = [true, false, true, true, false, true];
        let pairs: Vec<SamplePair> = success
            .iter()
            .map(|&s| SamplePair {
                clean: Tensor::zeros(&[2]),
                adversarial: Tensor::zeros(&[2]),
                true_label: 0,
                clean_pred: 0,
                adv_pred: 1,
                target: None,
                success: s,
                mode: AttackMode::Untargeted,
            })
            .collect();
        let corpus = AttackCorpus {
            config: xgap_core::attack::AttackConfig {
                mode: AttackMode::Untargeted,
                epsilon: 0.1,
                num_iters: 1,
                clip_min: 0.0,
                clip_max: 1.0,
                seed: 0,
            },
            ids: (0..6).map(|i| format!("test-{i:05}")).collect(),
            pairs,
        };
        assert_eq!(select_pairs(&corpus, true, None), vec![0, 2, 3, 5]);
        assert_eq!(select_pairs(&corpus, true, Some(2)), vec![0, 2]);
        assert_eq!(select_pairs(&corpus, false, Some(3)), vec![0, 1, 2]);
    }
}
