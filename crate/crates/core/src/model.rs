//! From-scratch feedforward classifier: dense ReLU layers, softmax
//! cross-entropy loss, reverse-mode gradients with respect to both
//! parameters and inputs, and minibatch SGD training.
//!
//! Input gradients expose a selectable scalar head (loss, logit, or
//! probability of a chosen class), which is what attacks and attributions
//! differentiate through.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tensor::{argmax, matmul, matmul_nt, softmax, topk_indices, Tensor};

const CHECKPOINT_VERSION: &str = "xgap-model-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Linear,
}

/// Scalar output a gradient is taken of, always tied to one class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    /// Cross-entropy loss treating the class as the label.
    Loss,
    /// Raw logit of the class.
    Logit,
    /// Softmax probability of the class.
    Probability,
}

/// One dense layer; weights are stored `[outputs × inputs]`.
#[derive(Debug, Clone)]
pub struct Layer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl Layer {
    fn dims(&self) -> Result<(usize, usize)> {
        let (out, inp) = self.weights.dims2()?;
        if self.bias.shape() != [out] {
            return Err(Error::ShapeMismatch {
                op: "Layer::dims",
                left: self.weights.shape().to_vec(),
                right: self.bias.shape().to_vec(),
            });
        }
        Ok((out, inp))
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    layers: Vec<Layer>,
    input_dim: usize,
    num_classes: usize,
}

/// Gradient of the mean loss with respect to one layer's parameters.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Error::InvalidArgument {
            op: "TrainConfig::validate",
            reason,
        };
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad(format!("learning_rate {} must be finite and positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(bad("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

struct ForwardTrace {
    /// Input to each layer, `[n × inputs]`.
    inputs: Vec<Tensor>,
    /// Pre-activation of each layer, `[n × outputs]`.
    preacts: Vec<Tensor>,
    /// Final output, `[n × classes]`.
    logits: Tensor,
}

impl Network {
    /// Fresh network with ReLU hidden layers and a linear output layer.
    /// Weights are uniform in `(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`;
    /// biases start at zero.
    pub fn new(input_dim: usize, hidden_dims: &[usize], num_classes: usize, seed: u64) -> Result<Network> {
        if input_dim == 0 || num_classes == 0 || hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument {
                op: "Network::new",
                reason: format!("zero-width layer in {input_dim} -> {hidden_dims:?} -> {num_classes}"),
            });
        }
        use rand::Rng;
        let mut rng = derive_rng(seed, "init");
        let mut dims = Vec::with_capacity(hidden_dims.len() + 2);
        dims.push(input_dim);
        dims.extend_from_slice(hidden_dims);
        dims.push(num_classes);
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (inp, out) = (w[0], w[1]);
            let a = (6.0 / (inp + out) as f64).sqrt();
            let data: Vec<f64> = (0..out * inp).map(|_| rng.random_range(-a..a)).collect();
            let activation = if layers.len() == dims.len() - 2 { Activation::Linear } else { Activation::Relu };
            layers.push(Layer {
                weights: Tensor::new(vec![out, inp], data).unwrap(),
                bias: Tensor::zeros(&[out]),
                activation,
            });
        }
        Network::from_layers(layers)
    }

    /// Assembles a network from explicit layers, checking that consecutive
    /// dimensions chain.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Network> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument {
                op: "Network::from_layers",
                reason: "network needs at least one layer".into(),
            });
        }
        let mut prev_out = None;
        for layer in &layers {
            let (out, inp) = layer.dims()?;
            if let Some(p) = prev_out {
                if p != inp {
                    return Err(Error::ShapeMismatch {
                        op: "Network::from_layers",
                        left: vec![p],
                        right: vec![inp],
                    });
                }
            }
            prev_out = Some(out);
        }
        let input_dim = layers[0].dims()?.1;
        let num_classes = prev_out.unwrap();
        Ok(Network {
            layers,
            input_dim,
            num_classes,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn check_batch(&self, x: &Tensor, op: &'static str) -> Result<()> {
        let (_, d) = x.dims2().map_err(|_| Error::InvalidArgument {
            op,
            reason: format!("batch must be rank 2, got shape {:?}", x.shape()),
        })?;
        if d != self.input_dim {
            return Err(Error::ShapeMismatch {
                op,
                left: x.shape().to_vec(),
                right: vec![self.input_dim],
            });
        }
        Ok(())
    }

    fn forward_trace(&self, x: &Tensor) -> Result<ForwardTrace> {
        self.check_batch(x, "Network::forward")?;
        let n = x.shape()[0];
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        let mut act = x.clone();
        for layer in &self.layers {
            let out = layer.weights.shape()[0];
            let mut z = matmul_nt(&act, &layer.weights, "Network::forward")?;
            for row in 0..n {
                let zr = &mut z.data_mut()[row * out..(row + 1) * out];
                for (v, b) in zr.iter_mut().zip(layer.bias.data()) {
                    *v += b;
                }
            }
            inputs.push(act);
            preacts.push(z.clone());
            if layer.activation == Activation::Relu {
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            act = z;
        }
        Ok(ForwardTrace {
            inputs,
            preacts,
            logits: act,
        })
    }

    /// Logits for a batch of flattened inputs, `[n × d] -> [n × classes]`.
    pub fn logits_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_trace(x)?.logits)
    }

    /// Logits for one input of any shape with `input_dim` values.
    pub fn logits(&self, x: &Tensor) -> Result<Vec<f64>> {
        let flat = Tensor::new(vec![1, x.len()], x.data().to_vec())?;
        Ok(self.logits_batch(&flat)?.into_data())
    }

    /// Predicted class and its softmax confidence; ties go to the lower
    /// class index.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, f64)> {
        let logits = self.logits(x)?;
        let class = argmax(&logits);
        Ok((class, softmax(&logits)[class]))
    }

    /// Gradient of the selected head with respect to a batch of inputs.
    /// `classes[i]` picks the head class for row i.
    pub fn grad_input_batch(&self, x: &Tensor, classes: &[usize], head: Head) -> Result<Tensor> {
        self.check_batch(x, "Network::grad_input")?;
        let n = x.shape()[0];
        if classes.len() != n {
            return Err(Error::InvalidArgument {
                op: "Network::grad_input",
                reason: format!("{} class picks for a batch of {n}", classes.len()),
            });
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(Error::InvalidArgument {
                op: "Network::grad_input",
                reason: format!("class {c} out of range 0..{}", self.num_classes),
            });
        }
        let trace = self.forward_trace(x)?;
        let k = self.num_classes;
        let mut delta = Tensor::zeros(&[n, k]);
        for (row, &c) in classes.iter().enumerate() {
            let logits = &trace.logits.data()[row * k..(row + 1) * k];
            let d = &mut delta.data_mut()[row * k..(row + 1) * k];
            match head {
                Head::Loss => {
                    let p = softmax(logits);
                    d.copy_from_slice(&p);
                    d[c] -= 1.0;
                }
                Head::Logit => d[c] = 1.0,
                Head::Probability => {
                    let p = softmax(logits);
                    let pc = p[c];
                    for (j, v) in d.iter_mut().enumerate() {
                        *v = -pc * p[j];
                    }
                    d[c] += pc;
                }
            }
        }
        self.backprop_to_input(delta, &trace)
    }

    /// Gradient of the selected head for a single input; the result has the
    /// input's shape.
    pub fn grad_input(&self, x: &Tensor, class: usize, head: Head) -> Result<Tensor> {
        let flat = Tensor::new(vec![1, x.len()], x.data().to_vec())?;
        let g = self.grad_input_batch(&flat, &[class], head)?;
        Tensor::new(x.shape().to_vec(), g.into_data())
    }

    /// Propagates d(scalar)/d(logits) back to d(scalar)/d(input).
    fn backprop_to_input(&self, mut delta: Tensor, trace: &ForwardTrace) -> Result<Tensor> {
        for (layer, z) in self.layers.iter().zip(&trace.preacts).rev() {
            if layer.activation == Activation::Relu {
                for (d, &pre) in delta.data_mut().iter_mut().zip(z.data()) {
                    if pre <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            delta = matmul(&delta, &layer.weights)?;
        }
        Ok(delta)
    }

    /// Gradient of the mean cross-entropy loss over the batch with respect
    /// to every parameter.
    pub fn grad_params(&self, x: &Tensor, labels: &[usize]) -> Result<Vec<LayerGrads>> {
        self.check_batch(x, "Network::grad_params")?;
        let n = x.shape()[0];
        if labels.len() != n {
            return Err(Error::InvalidArgument {
                op: "Network::grad_params",
                reason: format!("{} labels for a batch of {n}", labels.len()),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(Error::InvalidArgument {
                op: "Network::grad_params",
                reason: format!("label {l} out of range 0..{}", self.num_classes),
            });
        }
        let trace = self.forward_trace(x)?;
        Ok(self.grads_from_trace(&trace, labels).1)
    }

    /// Shared by `grad_params` and `train`: mean batch loss plus parameter
    /// gradients from an existing forward trace.
    fn grads_from_trace(&self, trace: &ForwardTrace, labels: &[usize]) -> (f64, Vec<LayerGrads>) {
        let n = trace.logits.shape()[0];
        let k = self.num_classes;
        let mut loss_sum = 0.0;
        let mut upstream = Tensor::zeros(&[n, k]);
        for (row, &label) in labels.iter().enumerate() {
            let logits = &trace.logits.data()[row * k..(row + 1) * k];
            loss_sum += cross_entropy(logits, label).expect("label checked by caller");
            let d = &mut upstream.data_mut()[row * k..(row + 1) * k];
            d.copy_from_slice(&softmax(logits));
            d[label] -= 1.0;
        }
        let inv_n = 1.0 / n as f64;
        for v in upstream.data_mut() {
            *v *= inv_n;
        }

        let mut grads = vec![None; self.layers.len()];
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let z = &trace.preacts[l];
            if layer.activation == Activation::Relu {
                for (d, &pre) in upstream.data_mut().iter_mut().zip(z.data()) {
                    if pre <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (out, inp) = (layer.weights.shape()[0], layer.weights.shape()[1]);
            let a = &trace.inputs[l];
            let mut dw = vec![0.0; out * inp];
            let mut db = vec![0.0; out];
            for row in 0..n {
                let drow = &upstream.data()[row * out..(row + 1) * out];
                let arow = a.item(row);
                for (o, &dv) in drow.iter().enumerate() {
                    db[o] += dv;
                    let dst = &mut dw[o * inp..(o + 1) * inp];
                    for (w, &av) in dst.iter_mut().zip(arow) {
                        *w += dv * av;
                    }
                }
            }
            grads[l] = Some(LayerGrads {
                weights: Tensor::new(vec![out, inp], dw).unwrap(),
                bias: Tensor::new(vec![out], db).unwrap(),
            });
            if l > 0 {
                upstream = matmul(&upstream, &layer.weights).expect("shapes chain by construction");
            }
        }
        (loss_sum * inv_n, grads.into_iter().map(Option::unwrap).collect())
    }

    /// One plain SGD update: `param -= learning_rate * grad`.
    pub fn sgd_step(&mut self, grads: &[LayerGrads], learning_rate: f64) {
        assert_eq!(grads.len(), self.layers.len(), "gradient count mismatch");
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            assert_eq!(layer.weights.shape(), g.weights.shape(), "weight grad shape mismatch");
            for (w, &gv) in layer.weights.data_mut().iter_mut().zip(g.weights.data()) {
                *w -= learning_rate * gv;
            }
            for (b, &gv) in layer.bias.data_mut().iter_mut().zip(g.bias.data()) {
                *b -= learning_rate * gv;
            }
        }
    }

    /// Writes the architecture and weights to `dir` as a JSON manifest plus
    /// one tensor blob per parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut entries = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let w_name = format!("layer{l}_w.tnsr");
            let b_name = format!("layer{l}_b.tnsr");
            layer.weights.save(&dir.join(&w_name))?;
            layer.bias.save(&dir.join(&b_name))?;
            entries.push(LayerEntry {
                inputs: layer.weights.shape()[1],
                outputs: layer.weights.shape()[0],
                activation: layer.activation,
                weights: w_name,
                bias: b_name,
            });
        }
        let manifest = CheckpointManifest {
            version: CHECKPOINT_VERSION.into(),
            layers: entries,
        };
        crate::data::write_json(&dir.join("manifest.json"), &manifest)
    }

    /// Loads a checkpoint written by [`Network::save`], validating the
    /// format version and that stored shapes chain.
    pub fn load(dir: &Path) -> Result<Network> {
        let manifest_path = dir.join("manifest.json");
        let manifest: CheckpointManifest = crate::data::read_json(&manifest_path)?;
        if manifest.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                path: manifest_path.display().to_string(),
                expected: CHECKPOINT_VERSION.into(),
                found: manifest.version,
            });
        }
        let mut layers = Vec::with_capacity(manifest.layers.len());
        for entry in &manifest.layers {
            let weights = Tensor::load(&dir.join(&entry.weights))?;
            let bias = Tensor::load(&dir.join(&entry.bias))?;
            if weights.shape() != [entry.outputs, entry.inputs] {
                return Err(Error::Artifact {
                    path: dir.join(&entry.weights).display().to_string(),
                    reason: format!(
                        "blob shape {:?} disagrees with manifest {}x{}",
                        weights.shape(),
                        entry.outputs,
                        entry.inputs
                    ),
                });
            }
            layers.push(Layer {
                weights,
                bias,
                activation: entry.activation,
            });
        }
        Network::from_layers(layers)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointManifest {
    version: String,
    layers: Vec<LayerEntry>,
}

#[derive(Serialize, Deserialize)]
struct LayerEntry {
    inputs: usize,
    outputs: usize,
    activation: Activation,
    weights: String,
    bias: String,
}

/// Softmax cross-entropy of one logit vector against an integer label,
/// computed through log-sum-exp.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::InvalidArgument {
            op: "cross_entropy",
            reason: format!("label {label} out of range 0..{}", logits.len()),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    Ok(max + sum.ln() - logits[label])
}

/// Class with the second-highest logit; the usual target of a
/// runner-up attack.
pub fn second_most_confident(logits: &[f64]) -> Result<usize> {
    Ok(topk_indices(logits, 2)?[1])
}

/// Minibatch SGD over the whole dataset; images are `[N, ...]` with one
/// flattened sample per first-axis slice. Returns the mean training loss
/// per epoch, measured on each batch before its update.
pub fn train(net: &mut Network, images: &Tensor, labels: &[usize], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let n = images.shape()[0];
    let d = images.item_len();
    if d != net.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "train",
            left: images.shape().to_vec(),
            right: vec![net.input_dim()],
        });
    }
    if labels.len() != n {
        return Err(Error::InvalidArgument {
            op: "train",
            reason: format!("{} labels for {n} images", labels.len()),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= net.num_classes()) {
        return Err(Error::InvalidArgument {
            op: "train",
            reason: format!("label {l} out of range 0..{}", net.num_classes()),
        });
    }
    use rand::seq::SliceRandom;
    let mut rng = derive_rng(cfg.seed, "train-shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut batch = Vec::with_capacity(chunk.len() * d);
            let mut batch_labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                batch.extend_from_slice(images.item(i));
                batch_labels.push(labels[i]);
            }
            let x = Tensor::new(vec![chunk.len(), d], batch)?;
            let fwd = net.forward_trace(&x)?;
            let (loss, grads) = net.grads_from_trace(&fwd, &batch_labels);
            loss_sum += loss * chunk.len() as f64;
            net.sgd_step(&grads, cfg.learning_rate);
        }
        trace.push(loss_sum / n as f64);
    }
    Ok(trace)
}
