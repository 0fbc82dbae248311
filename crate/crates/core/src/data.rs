//! Datasets: IDX image/label ingestion, seeded holdout splitting, and the
//! on-disk dataset corpus (JSON manifest plus tensor blob).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

const DATASET_VERSION: &str = "xgap-dataset-v1";

/// Magic of an IDX file holding unsigned-byte images (rank 3).
pub const IDX_IMAGES_MAGIC: u32 = 2051;
/// Magic of an IDX file holding unsigned-byte labels (rank 1).
pub const IDX_LABELS_MAGIC: u32 = 2049;

/// Which side of a holdout split a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

/// Images stacked as `[N, H, W]` with one integer label per image.
/// Pixel values live in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Option<Split>,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<usize>) -> Result<Self> {
        if images.rank() < 2 {
            return Err(Error::InvalidArgument {
                op: "LabeledDataset::new",
                reason: format!("images must be [N, ...], got shape {:?}", images.shape()),
            });
        }
        if images.shape()[0] != labels.len() {
            return Err(Error::InvalidArgument {
                op: "LabeledDataset::new",
                reason: format!("{} images but {} labels", images.shape()[0], labels.len()),
            });
        }
        Ok(LabeledDataset {
            images,
            labels,
            split: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// The i-th image as its own tensor.
    pub fn image(&self, i: usize) -> Tensor {
        self.images.item_tensor(i)
    }

    /// Writes the corpus to `dir`: manifest.json, labels.json, images.tnsr.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        self.images.save(&dir.join("images.tnsr"))?;
        write_json_compact(&dir.join("labels.json"), &self.labels)?;
        let manifest = DatasetManifest {
            version: DATASET_VERSION.into(),
            count: self.len(),
            image_shape: self.images.shape()[1..].to_vec(),
            split: self.split,
            images: "images.tnsr".into(),
            labels: "labels.json".into(),
        };
        write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Loads a corpus written by [`LabeledDataset::save`].
    pub fn load(dir: &Path) -> Result<LabeledDataset> {
        let manifest_path = dir.join("manifest.json");
        let manifest: DatasetManifest = read_json(&manifest_path)?;
        if manifest.version != DATASET_VERSION {
            return Err(Error::UnsupportedVersion {
                path: manifest_path.display().to_string(),
                expected: DATASET_VERSION.into(),
                found: manifest.version,
            });
        }
        let images = Tensor::load(&dir.join(&manifest.images))?;
        let labels: Vec<usize> = read_json(&dir.join(&manifest.labels))?;
        let mut expect_shape = vec![manifest.count];
        expect_shape.extend_from_slice(&manifest.image_shape);
        if images.shape() != expect_shape || labels.len() != manifest.count {
            return Err(Error::Artifact {
                path: dir.display().to_string(),
                reason: format!(
                    "manifest promises {} images of shape {:?}, blobs hold {:?} and {} labels",
                    manifest.count,
                    manifest.image_shape,
                    images.shape(),
                    labels.len()
                ),
            });
        }
        let mut ds = LabeledDataset::new(images, labels)?;
        ds.split = manifest.split;
        Ok(ds)
    }
}

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    version: String,
    count: usize,
    image_shape: Vec<usize>,
    split: Option<Split>,
    images: String,
    labels: String,
}

/// Reads big-endian IDX image and label files into a dataset, scaling
/// pixels to `[0, 1]`.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let iname = images_path.display().to_string();
    let lname = labels_path.display().to_string();
    let ibytes = std::fs::read(images_path).map_err(|e| Error::io(&iname, e))?;
    let lbytes = std::fs::read(labels_path).map_err(|e| Error::io(&lname, e))?;

    let ihdr = idx_header(&ibytes, &iname, IDX_IMAGES_MAGIC, 3)?;
    let (n, h, w) = (ihdr[0], ihdr[1], ihdr[2]);
    if n == 0 || h == 0 || w == 0 {
        return Err(Error::Parse {
            path: iname,
            offset: 4,
            reason: format!("degenerate dimensions {n}x{h}x{w}"),
        });
    }
    let want = 16 + n * h * w;
    if ibytes.len() != want {
        return Err(Error::Parse {
            path: iname,
            offset: ibytes.len().min(want) as u64,
            reason: format!("expected {want} bytes for {n} {h}x{w} images, got {}", ibytes.len()),
        });
    }

    let lhdr = idx_header(&lbytes, &lname, IDX_LABELS_MAGIC, 1)?;
    let n_labels = lhdr[0];
    let want = 8 + n_labels;
    if lbytes.len() != want {
        return Err(Error::Parse {
            path: lname,
            offset: lbytes.len().min(want) as u64,
            reason: format!("expected {want} bytes for {n_labels} labels, got {}", lbytes.len()),
        });
    }
    if n_labels != n {
        return Err(Error::Parse {
            path: lname,
            offset: 4,
            reason: format!("{n_labels} labels for {n} images"),
        });
    }

    let data: Vec<f64> = ibytes[16..].iter().map(|&b| b as f64 / 255.0).collect();
    let labels: Vec<usize> = lbytes[8..].iter().map(|&b| b as usize).collect();
    LabeledDataset::new(Tensor::new(vec![n, h, w], data)?, labels)
}

/// Parses an IDX header: the magic plus `dims` big-endian u32 extents.
fn idx_header(bytes: &[u8], path: &str, magic: u32, dims: usize) -> Result<Vec<usize>> {
    let header = 4 + dims * 4;
    if bytes.len() < header {
        return Err(Error::Parse {
            path: path.into(),
            offset: bytes.len() as u64,
            reason: "truncated header".into(),
        });
    }
    let got = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if got != magic {
        return Err(Error::Parse {
            path: path.into(),
            offset: 0,
            reason: format!("magic {got}, expected {magic}"),
        });
    }
    Ok((0..dims)
        .map(|i| u32::from_be_bytes(bytes[4 + i * 4..8 + i * 4].try_into().unwrap()) as usize)
        .collect())
}

/// Writes a dataset as a pair of big-endian IDX files, quantizing pixels
/// to the u8 grid. Pixel values must already lie in `[0, 1]` and labels
/// must fit a byte.
pub fn save_idx(images_path: &Path, labels_path: &Path, images: &Tensor, labels: &[usize]) -> Result<()> {
    let bad = |reason: String| Error::InvalidArgument {
        op: "save_idx",
        reason,
    };
    if images.rank() != 3 {
        return Err(bad(format!("images must be [N, H, W], got {:?}", images.shape())));
    }
    let (n, h, w) = (images.shape()[0], images.shape()[1], images.shape()[2]);
    if labels.len() != n {
        return Err(bad(format!("{} labels for {n} images", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 255) {
        return Err(bad(format!("label {l} does not fit a byte")));
    }
    if images.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(bad("pixel values must lie in [0, 1]".into()));
    }

    let mut ibytes = Vec::with_capacity(16 + n * h * w);
    ibytes.extend_from_slice(&IDX_IMAGES_MAGIC.to_be_bytes());
    for dim in [n, h, w] {
        ibytes.extend_from_slice(&(dim as u32).to_be_bytes());
    }
    ibytes.extend(images.data().iter().map(|&v| (v * 255.0).round() as u8));

    let mut lbytes = Vec::with_capacity(8 + n);
    lbytes.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    lbytes.extend_from_slice(&(n as u32).to_be_bytes());
    lbytes.extend(labels.iter().map(|&l| l as u8));

    std::fs::write(images_path, ibytes).map_err(|e| Error::io(images_path.display().to_string(), e))?;
    std::fs::write(labels_path, lbytes).map_err(|e| Error::io(labels_path.display().to_string(), e))
}

/// Splits a dataset into train and test parts by a seeded permutation.
/// The test side receives `round(N * fraction)` images; both sides keep
/// their images in original dataset order.
pub fn split_holdout(ds: &LabeledDataset, fraction: f64, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(fraction.is_finite() && 0.0 < fraction && fraction < 1.0) {
        return Err(Error::InvalidArgument {
            op: "split_holdout",
            reason: format!("fraction {fraction} must lie strictly between 0 and 1"),
        });
    }
    let n = ds.len();
    let n_test = (n as f64 * fraction).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::InvalidArgument {
            op: "split_holdout",
            reason: format!("fraction {fraction} leaves an empty side for {n} images"),
        });
    }
    use rand::seq::SliceRandom;
    let mut rng = derive_rng(seed, "split-holdout");
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut test_idx = order[..n_test].to_vec();
    let mut train_idx = order[n_test..].to_vec();
    test_idx.sort_unstable();
    train_idx.sort_unstable();

    let gather = |idx: &[usize], split| -> Result<LabeledDataset> {
        let width = ds.images.item_len();
        let mut data = Vec::with_capacity(idx.len() * width);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(ds.images.item(i));
            labels.push(ds.labels[i]);
        }
        let mut shape = ds.images.shape().to_vec();
        shape[0] = idx.len();
        let mut out = LabeledDataset::new(Tensor::new(shape, data)?, labels)?;
        out.split = Some(split);
        Ok(out)
    };
    Ok((gather(&train_idx, Split::Train)?, gather(&test_idx, Split::Test)?))
}

/// Serializes `value` as pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let name = path.display().to_string();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Artifact {
        path: name.clone(),
        reason: format!("serialize failed: {e}"),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(&name, e))
}

/// Serializes `value` as single-line JSON; for bulky arrays.
pub fn write_json_compact<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let name = path.display().to_string();
    let mut text = serde_json::to_string(value).map_err(|e| Error::Artifact {
        path: name.clone(),
        reason: format!("serialize failed: {e}"),
    })?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(&name, e))
}

/// Reads a JSON file into `T`, mapping a missing file to an artifact error.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Artifact {
                path: name.clone(),
                reason: "missing".into(),
            }
        } else {
            Error::io(&name, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Artifact {
        path: name,
        reason: format!("invalid JSON: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn toy_dataset(n: usize) -> LabeledDataset {
        let data: Vec<f64> = (0..n * 4).map(|i| (i % 256) as f64 / 255.0).collect();
        LabeledDataset::new(Tensor::new(vec![n, 2, 2], data).unwrap(), (0..n).map(|i| i % 10).collect()).unwrap()
    }

    #[test]
    fn idx_round_trip_preserves_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("images.idx");
        let lpath = dir.path().join("labels.idx");
        let ds = toy_dataset(7);
        save_idx(&ipath, &lpath, &ds.images, &ds.labels).unwrap();
        let back = load_idx(&ipath, &lpath).unwrap();
        assert_eq!(back.labels, ds.labels);
        for (a, b) in back.images.data().iter().zip(ds.images.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn idx_round_trip_survives_single_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("images.idx");
        let lpath = dir.path().join("labels.idx");
        let images = Tensor::new(vec![1, 1, 1], vec![0.5]).unwrap();
        save_idx(&ipath, &lpath, &images, &[9]).unwrap();
        let back = load_idx(&ipath, &lpath).unwrap();
        assert_eq!(back.labels, vec![9]);
        assert_eq!(back.images.shape(), [1, 1, 1]);
    }

    #[test]
    fn idx_header_layout_is_big_endian() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("images.idx");
        let lpath = dir.path().join("labels.idx");
        let ds = toy_dataset(3);
        save_idx(&ipath, &lpath, &ds.images, &ds.labels).unwrap();
        let ibytes = std::fs::read(&ipath).unwrap();
        assert_eq!(&ibytes[..4], 2051u32.to_be_bytes().as_slice());
        assert_eq!(&ibytes[4..8], 3u32.to_be_bytes().as_slice());
        assert_eq!(&ibytes[8..12], 2u32.to_be_bytes().as_slice());
        assert_eq!(&ibytes[12..16], 2u32.to_be_bytes().as_slice());
        assert_eq!(ibytes.len(), 16 + 3 * 4);
        let lbytes = std::fs::read(&lpath).unwrap();
        assert_eq!(&lbytes[..4], 2049u32.to_be_bytes().as_slice());
        assert_eq!(lbytes.len(), 8 + 3);
    }

    #[test]
    fn idx_load_rejects_malformed_files() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("images.idx");
        let lpath = dir.path().join("labels.idx");
        let ds = toy_dataset(3);
        save_idx(&ipath, &lpath, &ds.images, &ds.labels).unwrap();
        let good_images = std::fs::read(&ipath).unwrap();
        let good_labels = std::fs::read(&lpath).unwrap();

        // Wrong magic.
        let mut bad = good_images.clone();
        bad[3] = 0x99;
        std::fs::write(&ipath, &bad).unwrap();
        assert!(matches!(
            load_idx(&ipath, &lpath),
            Err(Error::Parse { offset: 0, .. })
        ));

        // Truncated payload.
        std::fs::write(&ipath, &good_images[..good_images.len() - 1]).unwrap();
        assert!(matches!(load_idx(&ipath, &lpath), Err(Error::Parse { .. })));

        // Image/label count mismatch.
        std::fs::write(&ipath, &good_images).unwrap();
        let mut bad = good_labels;
        bad[4..8].copy_from_slice(&9u32.to_be_bytes());
        bad.extend(std::iter::repeat_n(0u8, 6));
        std::fs::write(&lpath, &bad).unwrap();
        assert!(matches!(load_idx(&ipath, &lpath), Err(Error::Parse { offset: 4, .. })));
    }

    #[test]
    fn save_idx_rejects_out_of_range_values() {
        let dir = tempfile::tempdir().unwrap();
        let ipath = dir.path().join("i.idx");
        let lpath = dir.path().join("l.idx");
        let images = Tensor::new(vec![1, 1, 2], vec![0.5, 1.5]).unwrap();
        assert!(save_idx(&ipath, &lpath, &images, &[0]).is_err());
        let images = Tensor::new(vec![1, 1, 2], vec![0.5, 0.5]).unwrap();
        assert!(save_idx(&ipath, &lpath, &images, &[256]).is_err());
    }

    #[test]
    fn split_holdout_rounds_and_partitions() {
        let ds = toy_dataset(10);
        let (train, test) = split_holdout(&ds, 0.25, 5).unwrap();
        assert_eq!(test.len(), 3); // round(10 * 0.25)
        assert_eq!(train.len(), 7);
        assert_eq!(train.split, Some(Split::Train));
        assert_eq!(test.split, Some(Split::Test));
    }

    #[test]
    fn split_holdout_is_deterministic_and_seed_sensitive() {
        let ds = toy_dataset(40);
        let (a_train, a_test) = split_holdout(&ds, 0.2, 5).unwrap();
        let (b_train, b_test) = split_holdout(&ds, 0.2, 5).unwrap();
        assert_eq!(a_train, b_train);
        assert_eq!(a_test, b_test);
        let (_, c_test) = split_holdout(&ds, 0.2, 6).unwrap();
        assert_ne!(a_test.images, c_test.images);
    }

    #[test]
    fn split_holdout_rejects_degenerate_fractions() {
        let ds = toy_dataset(10);
        assert!(split_holdout(&ds, 0.0, 1).is_err());
        assert!(split_holdout(&ds, 1.0, 1).is_err());
        assert!(split_holdout(&ds, 0.01, 1).is_err()); // rounds to zero test images
    }

    #[test]
    fn dataset_corpus_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = toy_dataset(6);
        ds.split = Some(Split::Test);
        ds.save(dir.path()).unwrap();
        let back = LabeledDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn dataset_load_rejects_unknown_version_and_tampered_blobs() {
        let dir = tempfile::tempdir().unwrap();
        let ds = toy_dataset(4);
        ds.save(dir.path()).unwrap();

        let manifest_path = dir.path().join("manifest.json");
        let manifest = std::fs::read_to_string(&manifest_path).unwrap();
        std::fs::write(&manifest_path, manifest.replace("xgap-dataset-v1", "xgap-dataset-v0")).unwrap();
        assert!(matches!(
            LabeledDataset::load(dir.path()),
            Err(Error::UnsupportedVersion { .. })
        ));

        std::fs::write(&manifest_path, &manifest).unwrap();
        Tensor::zeros(&[2, 2, 2]).save(&dir.path().join("images.tnsr")).unwrap();
        assert!(matches!(LabeledDataset::load(dir.path()), Err(Error::Artifact { .. })));
    }

    proptest! {
        #[test]
        fn split_partition_preserves_multiset(n in 4usize..60, fraction in 0.1f64..0.9, seed in any::<u64>()) {
            let ds = toy_dataset(n);
            prop_assume!({
                let t = (n as f64 * fraction).round() as usize;
                t > 0 && t < n
            });
            let (train, test) = split_holdout(&ds, fraction, seed).unwrap();
            prop_assert_eq!(train.len() + test.len(), n);
            let mut seen: Vec<&[f64]> = (0..train.len()).map(|i| train.images.item(i)).collect();
            seen.extend((0..test.len()).map(|i| test.images.item(i)));
            seen.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mut orig: Vec<&[f64]> = (0..n).map(|i| ds.images.item(i)).collect();
            orig.sort_by(|a, b| a.partial_cmp(b).unwrap());
            prop_assert_eq!(seen, orig);
        }
    }
}
