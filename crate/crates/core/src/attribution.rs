//! Path-integral attributions of a network head to input pixels.
//!
//! The attribution of input i is `(x_i - b_i)/m * sum_{h=1..m} g_i(b +
//! ((h-1/2)/m)(x - b))`, a midpoint Riemann sum of the head gradient along
//! the straight line from baseline b to input x. Sampling cell centers
//! rather than endpoints halves the worst-case error from crossing a ReLU
//! kink inside a cell. Summed over pixels the attribution approaches the
//! head difference between x and b as m grows; the residual is the
//! completeness gap.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{cross_entropy, Head, Network};
use crate::tensor::{softmax, Tensor};

const STORE_VERSION: &str = "xgap-attributions-v1";

/// How many interpolation points are pushed through the network at once.
const GRAD_CHUNK: usize = 128;

/// Per-pixel attribution of one head output on one input.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributionMap {
    /// Same shape as the explained input.
    pub values: Tensor,
    pub explained_class: usize,
    pub head: Head,
    /// Names the baseline that anchored the path, e.g. "zeros".
    pub baseline_id: String,
    /// Number of Riemann points.
    pub steps_m: usize,
}

fn check_pair(net: &Network, x: &Tensor, baseline: &Tensor, class: usize, op: &'static str) -> Result<()> {
    if x.shape() != baseline.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: baseline.shape().to_vec(),
        });
    }
    if x.len() != net.input_dim() {
        return Err(Error::ShapeMismatch {
            op,
            left: x.shape().to_vec(),
            right: vec![net.input_dim()],
        });
    }
    if class >= net.num_classes() {
        return Err(Error::InvalidArgument {
            op,
            reason: format!("class {class} out of range 0..{}", net.num_classes()),
        });
    }
    Ok(())
}

/// Integrated gradient of `head` for `class` along the straight path from
/// `baseline` to `x`, using an m-point midpoint rule.
pub fn integrated_gradients(
    net: &Network,
    x: &Tensor,
    baseline: &Tensor,
    baseline_id: &str,
    class: usize,
    head: Head,
    steps_m: usize,
) -> Result<AttributionMap> {
    check_pair(net, x, baseline, class, "integrated_gradients")?;
    if steps_m == 0 {
        return Err(Error::InvalidArgument {
            op: "integrated_gradients",
            reason: "steps_m must be at least 1".into(),
        });
    }
    let d = x.len();
    let m = steps_m as f64;
    let mut grad_sum = vec![0.0; d];
    let mut h = 1usize;
    while h <= steps_m {
        let count = GRAD_CHUNK.min(steps_m - h + 1);
        let mut batch = Vec::with_capacity(count * d);
        for step in h..h + count {
            let alpha = (step as f64 - 0.5) / m;
            for (&xv, &bv) in x.data().iter().zip(baseline.data()) {
                batch.push(bv + alpha * (xv - bv));
            }
        }
        let grads = net.grad_input_batch(&Tensor::new(vec![count, d], batch)?, &vec![class; count], head)?;
        for row in 0..count {
            for (acc, &g) in grad_sum.iter_mut().zip(grads.item(row)) {
                *acc += g;
            }
        }
        h += count;
    }
    let values: Vec<f64> = x
        .data()
        .iter()
        .zip(baseline.data())
        .zip(&grad_sum)
        .map(|((&xv, &bv), &g)| (xv - bv) / m * g)
        .collect();
    Ok(AttributionMap {
        values: Tensor::new(x.shape().to_vec(), values)?,
        explained_class: class,
        head,
        baseline_id: baseline_id.into(),
        steps_m,
    })
}

/// Value of the selected head output for one input.
pub fn head_value(net: &Network, x: &Tensor, class: usize, head: Head) -> Result<f64> {
    let logits = net.logits(x)?;
    if class >= logits.len() {
        return Err(Error::InvalidArgument {
            op: "head_value",
            reason: format!("class {class} out of range 0..{}", logits.len()),
        });
    }
    Ok(match head {
        Head::Loss => cross_entropy(&logits, class)?,
        Head::Logit => logits[class],
        Head::Probability => softmax(&logits)[class],
    })
}

/// Residual between the summed attributions and the head difference
/// `F(x) - F(baseline)`. Errors if the map was computed for a different
/// class, head, or input shape than the ones queried.
pub fn completeness_gap(
    net: &Network,
    x: &Tensor,
    baseline: &Tensor,
    map: &AttributionMap,
    class: usize,
    head: Head,
) -> Result<f64> {
    check_pair(net, x, baseline, class, "completeness_gap")?;
    if map.explained_class != class || map.head != head {
        return Err(Error::MetadataMismatch {
            op: "completeness_gap",
            reason: format!(
                "map explains class {} under {:?}, queried class {class} under {head:?}",
                map.explained_class, map.head
            ),
        });
    }
    if map.values.shape() != x.shape() {
        return Err(Error::MetadataMismatch {
            op: "completeness_gap",
            reason: format!("map shape {:?} vs input shape {:?}", map.values.shape(), x.shape()),
        });
    }
    let total: f64 = map.values.data().iter().sum();
    let delta = head_value(net, x, class, head)? - head_value(net, baseline, class, head)?;
    Ok(total - delta)
}

/// Mean attribution map over several baselines, all other parameters held
/// fixed.
pub fn expected_gradients(
    net: &Network,
    x: &Tensor,
    baselines: &[Tensor],
    baseline_id: &str,
    class: usize,
    head: Head,
    steps_m: usize,
) -> Result<AttributionMap> {
    if baselines.is_empty() {
        return Err(Error::InvalidArgument {
            op: "expected_gradients",
            reason: "at least one baseline required".into(),
        });
    }
    let mut acc = vec![0.0; x.len()];
    for baseline in baselines {
        let map = integrated_gradients(net, x, baseline, baseline_id, class, head, steps_m)?;
        for (a, &v) in acc.iter_mut().zip(map.values.data()) {
            *a += v;
        }
    }
    let inv = 1.0 / baselines.len() as f64;
    for a in &mut acc {
        *a *= inv;
    }
    Ok(AttributionMap {
        values: Tensor::new(x.shape().to_vec(), acc)?,
        explained_class: class,
        head,
        baseline_id: baseline_id.into(),
        steps_m,
    })
}

/// Counts of absolute attribution values in uniform bins over
/// `[0, range_max)`, plus one trailing overflow bin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    /// `bins + 1` edges from 0 to range_max.
    pub bin_edges: Vec<f64>,
    /// `bins + 1` counts; the last collects values at or above range_max.
    pub counts: Vec<u64>,
}

/// Histograms the absolute values pooled over all given maps.
pub fn abs_attribution_histogram(maps: &[AttributionMap], bins: usize, range_max: f64) -> Result<Histogram> {
    if maps.is_empty() || bins == 0 || !(range_max.is_finite() && range_max > 0.0) {
        return Err(Error::InvalidArgument {
            op: "abs_attribution_histogram",
            reason: format!("{} maps, {bins} bins, range_max {range_max}", maps.len()),
        });
    }
    let mut counts = vec![0u64; bins + 1];
    for map in maps {
        for &v in map.values.data() {
            let a = v.abs();
            if a < range_max {
                let idx = ((a / range_max) * bins as f64) as usize;
                counts[idx.min(bins - 1)] += 1;
            } else {
                counts[bins] += 1;
            }
        }
    }
    let bin_edges = (0..=bins).map(|k| range_max * k as f64 / bins as f64).collect();
    Ok(Histogram { bin_edges, counts })
}

/// Renders the map's absolute values as an 8-bit binary PGM image,
/// brightest at the largest magnitude. The map must be rank 2.
pub fn write_pgm(map: &AttributionMap, path: &Path) -> Result<()> {
    let (h, w) = map.values.dims2().map_err(|_| Error::InvalidArgument {
        op: "write_pgm",
        reason: format!("map must be rank 2, got shape {:?}", map.values.shape()),
    })?;
    let max = map.values.data().iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    if max == 0.0 {
        bytes.extend(std::iter::repeat_n(0u8, h * w));
    } else {
        bytes.extend(map.values.data().iter().map(|v| (v.abs() / max * 255.0).round() as u8));
    }
    let name = path.display().to_string();
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(&name, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&name, e))
}

/// A batch of same-shaped attribution maps sharing head, step count, and
/// baseline, persisted as a manifest plus one stacked tensor blob.
#[derive(Debug, Clone)]
pub struct AttributionStore {
    pub head: Head,
    pub steps_m: usize,
    pub baseline_id: String,
    pub ids: Vec<String>,
    pub classes: Vec<usize>,
    /// `[N, ...map shape]`.
    pub maps: Tensor,
}

#[derive(Serialize, Deserialize)]
struct StoreManifest {
    version: String,
    head: Head,
    steps_m: usize,
    baseline_id: String,
    map_shape: Vec<usize>,
    entries: Vec<StoreEntry>,
    maps: String,
}

#[derive(Serialize, Deserialize)]
struct StoreEntry {
    id: String,
    class: usize,
}

impl AttributionStore {
    /// Collects maps into a store, enforcing that metadata is homogeneous.
    pub fn from_maps(ids: Vec<String>, maps: &[AttributionMap]) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::InvalidArgument {
            op: "AttributionStore::from_maps",
            reason: "no maps".into(),
        })?;
        if ids.len() != maps.len() {
            return Err(Error::InvalidArgument {
                op: "AttributionStore::from_maps",
                reason: format!("{} ids for {} maps", ids.len(), maps.len()),
            });
        }
        for m in maps {
            if m.head != first.head || m.steps_m != first.steps_m || m.baseline_id != first.baseline_id {
                return Err(Error::MetadataMismatch {
                    op: "AttributionStore::from_maps",
                    reason: "maps mix heads, step counts, or baselines".into(),
                });
            }
        }
        let stacked: Vec<Tensor> = maps.iter().map(|m| m.values.clone()).collect();
        Ok(AttributionStore {
            head: first.head,
            steps_m: first.steps_m,
            baseline_id: first.baseline_id.clone(),
            ids,
            classes: maps.iter().map(|m| m.explained_class).collect(),
            maps: Tensor::stack(&stacked)?,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Reassembles the i-th map.
    pub fn map(&self, i: usize) -> AttributionMap {
        AttributionMap {
            values: self.maps.item_tensor(i),
            explained_class: self.classes[i],
            head: self.head,
            baseline_id: self.baseline_id.clone(),
            steps_m: self.steps_m,
        }
    }

    /// Index of the map with the given id.
    pub fn find(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|x| x == id)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        self.maps.save(&dir.join("maps.tnsr"))?;
        let manifest = StoreManifest {
            version: STORE_VERSION.into(),
            head: self.head,
            steps_m: self.steps_m,
            baseline_id: self.baseline_id.clone(),
            map_shape: self.maps.shape()[1..].to_vec(),
            entries: self
                .ids
                .iter()
                .zip(&self.classes)
                .map(|(id, &class)| StoreEntry { id: id.clone(), class })
                .collect(),
            maps: "maps.tnsr".into(),
        };
        crate::data::write_json(&dir.join("manifest.json"), &manifest)
    }

    pub fn load(dir: &Path) -> Result<AttributionStore> {
        let manifest_path = dir.join("manifest.json");
        let manifest: StoreManifest = crate::data::read_json(&manifest_path)?;
        if manifest.version != STORE_VERSION {
            return Err(Error::UnsupportedVersion {
                path: manifest_path.display().to_string(),
                expected: STORE_VERSION.into(),
                found: manifest.version,
            });
        }
        let maps = Tensor::load(&dir.join(&manifest.maps))?;
        let mut expect_shape = vec![manifest.entries.len()];
        expect_shape.extend_from_slice(&manifest.map_shape);
        if maps.shape() != expect_shape {
            return Err(Error::Artifact {
                path: dir.display().to_string(),
                reason: format!(
                    "manifest promises {} maps of shape {:?}, blob holds {:?}",
                    manifest.entries.len(),
                    manifest.map_shape,
                    maps.shape()
                ),
            });
        }
        Ok(AttributionStore {
            head: manifest.head,
            steps_m: manifest.steps_m,
            baseline_id: manifest.baseline_id,
            ids: manifest.entries.iter().map(|e| e.id.clone()).collect(),
            classes: manifest.entries.iter().map(|e| e.class).collect(),
            maps,
        })
    }

    /// One CSV row per map: id, class, value sum, mean and max magnitude.
    pub fn write_summary_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("id,class,sum,mean_abs,max_abs\n");
        for i in 0..self.len() {
            let values = self.maps.item(i);
            let sum: f64 = values.iter().sum();
            let mean_abs: f64 = values.iter().map(|v| v.abs()).sum::<f64>() / values.len() as f64;
            let max_abs = values.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
            out.push_str(&format!("{},{},{sum},{mean_abs},{max_abs}\n", self.ids[i], self.classes[i]));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }
}
