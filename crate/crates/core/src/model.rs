//! Small MLP classifiers feeding logits to attacks and losses.
//!
//! The classifier is a stack of affine layers with relu between them and raw
//! logits out. Parameters live in the model as plain buffers; a training or
//! attack step binds them onto a [`Tape`] (trainable or frozen) and runs
//! [`MlpClassifier::forward`] against the bound handles. Evaluation paths
//! that need no gradients use [`MlpClassifier::predict_logits`], which runs
//! the identical arithmetic without a tape.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{matmul_raw, Tape, Var};

/// Multi-layer perceptron with per-layer weight and bias tensors.
#[derive(Debug, Clone)]
pub struct MlpClassifier {
    sizes: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    seed: u64,
}

/// Tape handles for one binding of the model parameters.
pub struct MlpVars {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
}

impl MlpClassifier {
    /// Build a classifier with He-style fan-in scaled uniform weights,
    /// `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, and zero biases.
    pub fn init(layer_sizes: &[usize], seed: u64) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for (layer, pair) in layer_sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / fan_in as f64).sqrt();
            let mut stream = rng::stream(&[seed, 0x4d4c50, layer as u64]);
            let w: Vec<f64> = (0..fan_in * fan_out)
                .map(|_| rng::uniform_in(&mut stream, -bound, bound))
                .collect();
            weights.push(w);
            biases.push(vec![0.0; fan_out]);
        }
        Ok(MlpClassifier {
            sizes: layer_sizes.to_vec(),
            weights,
            biases,
            seed,
        })
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn class_count(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameter buffers in checkpoint order: w0, b0, w1, b1, ...
    pub fn params(&self) -> Vec<(&str, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for i in 0..self.weights.len() {
            out.push((
                WEIGHT_NAMES[i],
                vec![self.sizes[i], self.sizes[i + 1]],
                self.weights[i].as_slice(),
            ));
            out.push((BIAS_NAMES[i], vec![self.sizes[i + 1]], self.biases[i].as_slice()));
        }
        out
    }

    /// Mutable parameter buffers in the same order as [`MlpClassifier::params`].
    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w);
            out.push(b);
        }
        out
    }

    /// Register the parameters on a tape. Trainable bindings participate in
    /// gradients; frozen bindings are constants for attack generation.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        let mut weights = Vec::with_capacity(self.weights.len());
        let mut biases = Vec::with_capacity(self.biases.len());
        for i in 0..self.weights.len() {
            let wshape = [self.sizes[i], self.sizes[i + 1]];
            weights.push(
                tape.leaf(&wshape, self.weights[i].clone(), trainable)
                    .expect("weight buffer matches its shape"),
            );
            biases.push(
                tape.leaf(&[self.sizes[i + 1]], self.biases[i].clone(), trainable)
                    .expect("bias buffer matches its shape"),
            );
        }
        MlpVars { weights, biases }
    }

    /// Forward pass over bound parameters. `x` must be `[batch, input_dim]`.
    pub fn forward(&self, tape: &mut Tape, vars: &MlpVars, x: Var) -> Result<Var> {
        let shape = tape.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim() {
            return Err(Error::ShapeMismatch {
                op: "mlp forward",
                lhs: shape,
                rhs: vec![self.input_dim()],
            });
        }
        let mut h = x;
        let last = self.weights.len() - 1;
        for i in 0..self.weights.len() {
            let affine = tape.matmul(h, vars.weights[i])?;
            h = tape.add(affine, vars.biases[i])?;
            if i != last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Logits without a tape, for evaluation loops.
    pub fn predict_logits(&self, x: &[f64], batch: usize) -> Result<Vec<f64>> {
        if batch * self.input_dim() != x.len() {
            return Err(Error::invalid(format!(
                "feature buffer of {} does not hold {batch} rows of {}",
                x.len(),
                self.input_dim()
            )));
        }
        let mut h = x.to_vec();
        let mut width = self.input_dim();
        let last = self.weights.len() - 1;
        for i in 0..self.weights.len() {
            let out_width = self.sizes[i + 1];
            let mut next = matmul_raw(&h, &self.weights[i], batch, width, out_width);
            for row in next.chunks_mut(out_width) {
                for (v, b) in row.iter_mut().zip(&self.biases[i]) {
                    *v += b;
                }
                if i != last {
                    for v in row.iter_mut() {
                        *v = v.max(0.0);
                    }
                }
            }
            h = next;
            width = out_width;
        }
        Ok(h)
    }

    /// Argmax class per row of `[batch, classes]` logits. Ties go to the
    /// lowest class index.
    pub fn predict(&self, x: &[f64], batch: usize) -> Result<Vec<usize>> {
        let logits = self.predict_logits(x, batch)?;
        Ok(logits
            .chunks_exact(self.class_count())
            .map(argmax)
            .collect())
    }
}

/// First index of the row maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

const WEIGHT_NAMES: [&str; 8] = ["w0", "w1", "w2", "w3", "w4", "w5", "w6", "w7"];
const BIAS_NAMES: [&str; 8] = ["b0", "b1", "b2", "b3", "b4", "b5", "b6", "b7"];

/// JSON header stored ahead of the raw little-endian f64 tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub names: Vec<String>,
    pub shapes: Vec<Vec<usize>>,
    pub seed: u64,
    pub config_hash: String,
}

/// Persist the model: a u32-LE header length, the JSON header, then each
/// named tensor's f64 values little-endian in header order.
pub fn save_checkpoint(model: &MlpClassifier, path: &Path, config_hash: &str) -> Result<()> {
    let params = model.params();
    let header = CheckpointHeader {
        names: params.iter().map(|(n, _, _)| n.to_string()).collect(),
        shapes: params.iter().map(|(_, s, _)| s.clone()).collect(),
        seed: model.seed,
        config_hash: config_hash.to_string(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::invalid(format!("header encode: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    for (_, _, values) in &params {
        for v in *values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(MlpClassifier, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 4 {
        return Err(bad("file shorter than the header length field"));
    }
    let header_len = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + header_len {
        return Err(bad("header extends past end of file"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[4..4 + header_len])
        .map_err(|e| bad(&format!("header decode: {e}")))?;
    if header.names.len() != header.shapes.len() {
        return Err(bad("names and shapes disagree"));
    }

    // Reconstruct layer sizes from the weight shapes.
    let mut sizes = Vec::new();
    for (name, shape) in header.names.iter().zip(&header.shapes) {
        if name.starts_with('w') {
            if shape.len() != 2 {
                return Err(bad(&format!("{name} is not a matrix")));
            }
            if sizes.is_empty() {
                sizes.push(shape[0]);
            }
            sizes.push(shape[1]);
        }
    }
    if sizes.len() < 2 {
        return Err(bad("no weight tensors present"));
    }

    let mut offset = 4 + header_len;
    let mut tensors = Vec::new();
    for shape in &header.shapes {
        let count: usize = shape.iter().product();
        let needed = count * 8;
        if bytes.len() < offset + needed {
            return Err(bad("tensor data truncated"));
        }
        let mut values = Vec::with_capacity(count);
        for chunk in bytes[offset..offset + needed].chunks_exact(8) {
            values.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        tensors.push(values);
        offset += needed;
    }

    let mut model = MlpClassifier::init(&sizes, header.seed)?;
    for (i, (name, tensor)) in header.names.iter().zip(tensors).enumerate() {
        let layer = i / 2;
        if name.starts_with('w') {
            model.weights[layer] = tensor;
        } else {
            model.biases[layer] = tensor;
        }
    }
    Ok((model, header))
}
