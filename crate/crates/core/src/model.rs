//! Multilayer-perceptron classifiers: init, training, prediction, and a
//! binary checkpoint format shared with the experiment harness.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tape::{softmax_row, NodeId, Tape};
use crate::tensor::Tensor;

/// One dense layer: weight `[in, out]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Dense network parameters. Hidden layers use relu, the output layer is
/// identity (logits).
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 64,
            momentum: 0.9,
            seed: 0,
        }
    }
}

impl ModelParams {
    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.shape()[0]
    }

    pub fn class_count(&self) -> usize {
        self.layers.last().unwrap().weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.numel() + l.bias.numel())
            .sum()
    }

    /// Concatenate all weights and biases in layer order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend_from_slice(l.weight.data());
            out.extend_from_slice(l.bias.data());
        }
        out
    }

    /// Rebuild params with the same shapes from a flat vector.
    pub fn unflatten(&self, flat: &[f64]) -> Result<ModelParams> {
        if flat.len() != self.param_count() {
            return Err(Error::shape(format!(
                "flat length {} != param count {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            let wn = l.weight.numel();
            let bn = l.bias.numel();
            let weight = Tensor::new(l.weight.shape().to_vec(), flat[off..off + wn].to_vec())?;
            off += wn;
            let bias = Tensor::new(l.bias.shape().to_vec(), flat[off..off + bn].to_vec())?;
            off += bn;
            layers.push(Layer { weight, bias });
        }
        Ok(ModelParams { layers })
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.all_finite() && l.bias.all_finite())
    }
}

/// Uniform fan-based init: weights U(-a, a) with a = sqrt(6/(in+out)),
/// biases zero. Deterministic in the seed.
pub fn mlp_init(layer_sizes: &[usize], seed: u64) -> Result<ModelParams> {
    if layer_sizes.len() < 2 {
        return Err(Error::config("mlp_init needs at least 2 layer sizes"));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(Error::config("layer sizes must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers = Vec::new();
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<f64> = (0..fan_in * fan_out).map(|_| rng.gen_range(-a..a)).collect();
        layers.push(Layer {
            weight: Tensor::matrix(fan_in, fan_out, data)?,
            bias: Tensor::zeros(vec![fan_out]),
        });
    }
    Ok(ModelParams { layers })
}

/// Put the parameters on a tape as leaves, returning (weight, bias) ids.
pub fn params_to_tape(
    tape: &mut Tape,
    params: &ModelParams,
    requires_grad: bool,
) -> Result<Vec<(NodeId, NodeId)>> {
    params
        .layers
        .iter()
        .map(|l| {
            let w = tape.leaf(l.weight.clone(), requires_grad)?;
            let b = tape.leaf(l.bias.clone(), requires_grad)?;
            Ok((w, b))
        })
        .collect()
}

/// Forward pass producing logits for a batch node `[n, in]`.
pub fn forward_on_tape(
    tape: &mut Tape,
    param_ids: &[(NodeId, NodeId)],
    x: NodeId,
) -> Result<NodeId> {
    let mut h = x;
    let last = param_ids.len() - 1;
    for (i, &(w, b)) in param_ids.iter().enumerate() {
        let z = tape.matmul(h, w)?;
        let z = tape.add(z, b)?;
        h = if i < last { tape.relu(z)? } else { z };
    }
    Ok(h)
}

/// Logits for a batch, evaluated off-tape.
pub fn forward(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let ids = params_to_tape(&mut tape, params, false)?;
    let xid = tape.leaf(x.clone(), false)?;
    let out = forward_on_tape(&mut tape, &ids, xid)?;
    Ok(tape.value(out).clone())
}

/// Mean cross-entropy of the model on a batch, as a tape scalar.
pub fn loss_ce(
    tape: &mut Tape,
    param_ids: &[(NodeId, NodeId)],
    x: NodeId,
    labels: &[usize],
) -> Result<NodeId> {
    let logits = forward_on_tape(tape, param_ids, x)?;
    tape.softmax_xent(logits, labels)
}

/// Mean cross-entropy on a dataset, evaluated off-tape.
pub fn ce_value(params: &ModelParams, data: &Dataset) -> Result<f64> {
    let mut tape = Tape::new();
    let ids = params_to_tape(&mut tape, params, false)?;
    let x = tape.leaf(data.x.clone(), false)?;
    let l = loss_ce(&mut tape, &ids, x, &data.y)?;
    tape.value(l).scalar_value()
}

/// Minibatch SGD with momentum; deterministic shuffling from the seed.
pub fn train(params: &ModelParams, data: &Dataset, cfg: &TrainConfig) -> Result<ModelParams> {
    if data.len() == 0 {
        return Err(Error::config("train on empty dataset"));
    }
    let n = data.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut current = params.clone();
    let mut velocity: Vec<Vec<f64>> = current
        .layers
        .iter()
        .flat_map(|l| [vec![0.0; l.weight.numel()], vec![0.0; l.bias.numel()]])
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        // Fisher-Yates with the run's RNG
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let (bx, by) = data.gather(batch)?;
            let mut tape = Tape::new();
            let ids = params_to_tape(&mut tape, &current, true)?;
            let x = tape.leaf(bx, false)?;
            let loss = loss_ce(&mut tape, &ids, x, &by)?;
            let wrt: Vec<NodeId> = ids.iter().flat_map(|&(w, b)| [w, b]).collect();
            let grads = tape.gradient(loss, &wrt, false)?;
            let mut gi = 0;
            for l in current.layers.iter_mut() {
                for t in [&mut l.weight, &mut l.bias] {
                    let g = tape.value(grads[gi]).data();
                    let v = &mut velocity[gi];
                    for (k, p) in t.data_mut().iter_mut().enumerate() {
                        v[k] = cfg.momentum * v[k] + g[k];
                        *p -= cfg.learning_rate * v[k];
                    }
                    gi += 1;
                }
            }
            if !current.all_finite() {
                return Err(Error::numeric("training diverged to non-finite parameters"));
            }
        }
    }
    Ok(current)
}

/// Argmax class (ties to the lowest index) and softmax probabilities.
pub fn predict(params: &ModelParams, x_row: &[f64]) -> Result<(usize, Vec<f64>)> {
    let x = Tensor::matrix(1, x_row.len(), x_row.to_vec())?;
    let logits = forward(params, &x)?;
    let mut probs = vec![0.0; logits.numel()];
    softmax_row(logits.data(), &mut probs);
    let class = argmax(&probs);
    Ok((class, probs))
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Batch argmax predictions.
pub fn predict_batch(params: &ModelParams, x: &Tensor) -> Result<Vec<usize>> {
    let logits = forward(params, x)?;
    Ok((0..logits.rows()).map(|i| argmax(logits.row(i))).collect())
}

pub fn accuracy(params: &ModelParams, data: &Dataset) -> Result<f64> {
    if data.len() == 0 {
        return Err(Error::config("accuracy on empty dataset"));
    }
    let preds = predict_batch(params, &data.x)?;
    let hits = preds.iter().zip(&data.y).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / data.len() as f64)
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"EVEC";
const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout: magic "EVEC", version u32, layer count u32, then per
/// layer: in u32, out u32, weight f64s (little-endian, row-major), bias f64s.
pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.layers.len() as u32).to_le_bytes());
    for l in &params.layers {
        buf.extend_from_slice(&(l.weight.shape()[0] as u32).to_le_bytes());
        buf.extend_from_slice(&(l.weight.shape()[1] as u32).to_le_bytes());
        for v in l.weight.data().iter().chain(l.bias.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut off = 0usize;
    let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
        if *off + n > bytes.len() {
            return Err(Error::format("truncated checkpoint"));
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let magic = take(&mut off, 4)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::format("bad checkpoint magic"));
    }
    let version = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let layer_count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
    let mut layers = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let fan_in = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let fan_out = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        if fan_in == 0 || fan_out == 0 {
            return Err(Error::format("zero layer dimension in checkpoint"));
        }
        let read_f64s = |off: &mut usize, n: usize| -> Result<Vec<f64>> {
            let raw = take(off, n * 8)?;
            Ok(raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect())
        };
        let weight = Tensor::matrix(fan_in, fan_out, read_f64s(&mut off, fan_in * fan_out)?)?;
        let bias = Tensor::from_vec(read_f64s(&mut off, fan_out)?);
        layers.push(Layer { weight, bias });
    }
    if off != bytes.len() {
        return Err(Error::format("trailing bytes in checkpoint"));
    }
    if layers.is_empty() {
        return Err(Error::format("checkpoint has no layers"));
    }
    Ok(ModelParams { layers })
}
