//! Small fully-connected classifier on a seeded two-moons dataset, trained
//! in-process. It stands in for a real network when exercising the
//! measurement pipeline: tanh layers make the loss non-quadratic and couple
//! the layers through the forward pass.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_perturbations, LossOracle, Perturbation};
use crate::container::{Container, DType, Tensor};
use crate::error::{invalid, Error, Result};
use crate::quantizer::LayerSpec;

pub(crate) const KIND: &str = "toy-classifier";

pub const DEFAULT_EPOCHS: usize = 1500;

const TRAIN_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const BATCH_STREAM_BASE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub hidden: Vec<usize>,
    pub train_size: usize,
    pub noise: f64,
    pub learning_rate: f64,
    /// Samples in the default sensitivity set (batch 0).
    pub eval_size: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16; 5],
            train_size: 512,
            noise: 0.15,
            learning_rate: 0.01,
            eval_size: 256,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Sample {
    x: [f64; 2],
    label: usize,
}

fn moons(rng: &mut ChaCha8Rng, n: usize, noise: f64) -> Vec<Sample> {
    let jitter = Normal::new(0.0, noise).expect("noise is non-negative");
    (0..n)
        .map(|i| {
            let label = i % 2;
            let t = PI * rng.random::<f64>();
            let (x, y) = if label == 0 {
                (t.cos(), t.sin())
            } else {
                (1.0 - t.cos(), 0.5 - t.sin())
            };
            Sample {
                x: [x + jitter.sample(rng), y + jitter.sample(rng)],
                label,
            }
        })
        .collect()
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq)]
struct Network {
    dims: Vec<usize>,
    /// Row-major `out x in` matrices.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl Network {
    fn init(dims: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let std = (1.0 / fan_in as f64).sqrt();
            weights.push(
                (0..fan_in * fan_out)
                    .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect(),
            );
            biases.push(vec![0.0; fan_out]);
        }
        Self {
            dims: dims.to_vec(),
            weights,
            biases,
        }
    }

    fn depth(&self) -> usize {
        self.weights.len()
    }

    /// Forward pass keeping every activation; the last entry holds logits.
    fn forward_trace(&self, weights: &[&[f64]], x: &[f64; 2]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for k in 0..self.depth() {
            let (fan_in, fan_out) = (self.dims[k], self.dims[k + 1]);
            let input = &acts[k];
            let w = weights[k];
            let mut out = self.biases[k].clone();
            for (o, z) in out.iter_mut().enumerate().take(fan_out) {
                let row = &w[o * fan_in..(o + 1) * fan_in];
                *z += row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>();
            }
            if k + 1 < self.depth() {
                out.iter_mut().for_each(|z| *z = z.tanh());
            }
            acts.push(out);
        }
        acts
    }

    fn logits(&self, weights: &[&[f64]], x: &[f64; 2]) -> Vec<f64> {
        self.forward_trace(weights, x).pop().unwrap()
    }

    fn own_weights(&self) -> Vec<&[f64]> {
        self.weights.iter().map(Vec::as_slice).collect()
    }

    fn round_to_f32(&mut self) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        }
    }
}

/// Returns `(cross-entropy, softmax)`.
fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    let loss = sum.ln() - (logits[label] - max);
    (loss, exp.iter().map(|e| e / sum).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(shapes: impl Iterator<Item = usize>) -> Self {
        let m: Vec<Vec<f64>> = shapes.map(|n| vec![0.0; n]).collect();
        let v = m.clone();
        Self { m, v, t: 0 }
    }

    fn step(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            for i in 0..p.len() {
                let g = grads[k][i];
                self.m[k][i] = B1 * self.m[k][i] + (1.0 - B1) * g;
                self.v[k][i] = B2 * self.v[k][i] + (1.0 - B2) * g * g;
                p[i] -= lr * (self.m[k][i] / c1) / ((self.v[k][i] / c2).sqrt() + EPS);
            }
        }
    }
}

/// Gradients of the mean cross-entropy with respect to weights and biases.
fn gradients(net: &Network, data: &[Sample]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let depth = net.depth();
    let inv_n = 1.0 / data.len() as f64;
    let mut gw: Vec<Vec<f64>> = net.weights.iter().map(|w| vec![0.0; w.len()]).collect();
    let mut gb: Vec<Vec<f64>> = net.biases.iter().map(|b| vec![0.0; b.len()]).collect();
    for s in data {
        let acts = net.forward_trace(&net.own_weights(), &s.x);
        let (_, mut delta) = cross_entropy(&acts[depth], s.label);
        delta[s.label] -= 1.0;
        delta.iter_mut().for_each(|d| *d *= inv_n);
        for k in (0..depth).rev() {
            let fan_in = net.dims[k];
            let input = &acts[k];
            for (o, &d) in delta.iter().enumerate() {
                gb[k][o] += d;
                let row = &mut gw[k][o * fan_in..(o + 1) * fan_in];
                row.iter_mut().zip(input).for_each(|(g, a)| *g += d * a);
            }
            if k > 0 {
                let w = &net.weights[k];
                delta = (0..fan_in)
                    .map(|i| {
                        let back: f64 = delta
                            .iter()
                            .enumerate()
                            .map(|(o, d)| d * w[o * fan_in + i])
                            .sum();
                        back * (1.0 - input[i] * input[i])
                    })
                    .collect();
            }
        }
    }
    (gw, gb)
}

fn train(net: &mut Network, data: &[Sample], epochs: usize, lr: f64) {
    let mut adam = Adam::new(
        net.weights
            .iter()
            .map(Vec::len)
            .chain(net.biases.iter().map(Vec::len)),
    );
    for _ in 0..epochs {
        let (gw, gb) = gradients(net, data);
        let grads: Vec<Vec<f64>> = gw.into_iter().chain(gb).collect();
        let (ws, bs) = (&mut net.weights, &mut net.biases);
        let mut params: Vec<&mut Vec<f64>> = ws.iter_mut().chain(bs.iter_mut()).collect();
        adam.step(&mut params, &grads, lr);
    }
}

/// Trained classifier evaluated on a fixed sensitivity set.
#[derive(Debug, Clone)]
pub struct ToyClassifierOracle {
    config: ToyConfig,
    seed: u64,
    epochs: usize,
    network: Arc<Network>,
    layers: Vec<LayerSpec>,
    eval: Arc<Vec<Sample>>,
    batch: (usize, u64),
}

/// Trains the toy classifier with full-batch Adam on mean cross-entropy.
/// Weights are rounded to `f32` afterwards so the model file stores them exactly.
pub fn train_toy(seed: u64, epochs: usize) -> Result<ToyClassifierOracle> {
    ToyClassifierOracle::train(ToyConfig::default(), seed, epochs)
}

impl ToyClassifierOracle {
    pub fn train(config: ToyConfig, seed: u64, epochs: usize) -> Result<Self> {
        if epochs == 0 {
            return invalid("epochs must be at least 1");
        }
        validate_config(&config)?;
        let data = moons(
            &mut stream(seed, TRAIN_STREAM),
            config.train_size,
            config.noise,
        );
        let dims = dims_for(&config);
        let mut net = Network::init(&dims, &mut stream(seed, INIT_STREAM));
        train(&mut net, &data, epochs, config.learning_rate);
        net.round_to_f32();
        Self::assemble(config, seed, epochs, net)
    }

    fn assemble(config: ToyConfig, seed: u64, epochs: usize, net: Network) -> Result<Self> {
        let layers = net
            .weights
            .iter()
            .enumerate()
            .map(|(k, w)| LayerSpec::new(format!("fc{k}.weight"), w.clone()))
            .collect::<Result<Vec<_>>>()?;
        let eval_size = config.eval_size;
        let mut oracle = Self {
            config,
            seed,
            epochs,
            network: Arc::new(net),
            layers,
            eval: Arc::new(Vec::new()),
            batch: (0, 0),
        };
        oracle = oracle.with_sensitivity_batch(eval_size, 0)?;
        Ok(oracle)
    }

    /// Same network, evaluated on sensitivity batch `index` of `batch_size`
    /// fresh samples drawn from the training distribution.
    pub fn with_sensitivity_batch(&self, batch_size: usize, index: u64) -> Result<Self> {
        if batch_size == 0 {
            return invalid("batch size must be at least 1");
        }
        let mut rng = stream(self.seed, BATCH_STREAM_BASE + index);
        let eval = moons(&mut rng, batch_size, self.config.noise);
        Ok(Self {
            eval: Arc::new(eval),
            batch: (batch_size, index),
            ..self.clone()
        })
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    /// `(batch_size, batch_index)` of the current sensitivity set.
    pub fn batch(&self) -> (usize, u64) {
        self.batch
    }

    /// Fraction of the training set classified correctly.
    pub fn training_accuracy(&self) -> f64 {
        let data = moons(
            &mut stream(self.seed, TRAIN_STREAM),
            self.config.train_size,
            self.config.noise,
        );
        let weights = self.network.own_weights();
        let correct = data
            .iter()
            .filter(|s| argmax(&self.network.logits(&weights, &s.x)) == s.label)
            .count();
        correct as f64 / data.len() as f64
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "seed": self.seed,
            "epochs": self.epochs,
            "dims": self.network.dims,
            "config": self.config,
        });
        let mut c = Container::new(KIND, meta);
        let dims = &self.network.dims;
        for k in 0..self.network.depth() {
            c.push(Tensor::new(
                format!("fc{k}.weight"),
                vec![dims[k + 1], dims[k]],
                DType::F32,
                self.network.weights[k].clone(),
            ));
            c.push(Tensor::new(
                format!("fc{k}.bias"),
                vec![dims[k + 1]],
                DType::F32,
                self.network.biases[k].clone(),
            ));
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != KIND {
            return Err(Error::Format(format!(
                "expected a {KIND} container, got {:?}",
                c.kind
            )));
        }
        let fmt = |what: &str| Error::Format(format!("toy-classifier meta: {what}"));
        let seed = c.meta["seed"].as_u64().ok_or_else(|| fmt("seed"))?;
        let epochs = c.meta["epochs"].as_u64().ok_or_else(|| fmt("epochs"))? as usize;
        let config: ToyConfig =
            serde_json::from_value(c.meta["config"].clone()).map_err(|e| fmt(&e.to_string()))?;
        validate_config(&config)?;
        let dims = dims_for(&config);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for k in 0..dims.len() - 1 {
            let w = c.tensor(&format!("fc{k}.weight"))?;
            let b = c.tensor(&format!("fc{k}.bias"))?;
            if w.info.shape != [dims[k + 1], dims[k]] || b.info.shape != [dims[k + 1]] {
                return Err(Error::Format(format!("fc{k} shape disagrees with config")));
            }
            weights.push(w.data.clone());
            biases.push(b.data.clone());
        }
        let net = Network {
            dims,
            weights,
            biases,
        };
        Self::assemble(config, seed, epochs, net)
    }
}

fn dims_for(config: &ToyConfig) -> Vec<usize> {
    let mut dims = vec![2];
    dims.extend_from_slice(&config.hidden);
    dims.push(2);
    dims
}

fn validate_config(config: &ToyConfig) -> Result<()> {
    if config.hidden.contains(&0) {
        return invalid("hidden widths must be positive");
    }
    if config.train_size < 2 || config.eval_size == 0 {
        return invalid("need train_size >= 2 and eval_size >= 1");
    }
    if !(config.noise >= 0.0 && config.learning_rate > 0.0) {
        return invalid("noise must be >= 0 and learning rate > 0");
    }
    Ok(())
}

impl LossOracle for ToyClassifierOracle {
    fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn evaluate(&self, perturbations: &[Perturbation<'_>]) -> Result<f64> {
        check_perturbations(&self.layers, perturbations)?;
        let mut shifted: Vec<Option<Vec<f64>>> = vec![None; self.layers.len()];
        for &(l, delta) in perturbations {
            let w = self.network.weights[l]
                .iter()
                .zip(delta)
                .map(|(w, d)| w + d)
                .collect();
            shifted[l] = Some(w);
        }
        let weights: Vec<&[f64]> = shifted
            .iter()
            .zip(&self.network.weights)
            .map(|(s, w)| s.as_deref().unwrap_or(w))
            .collect();
        let total: f64 = self
            .eval
            .iter()
            .map(|s| cross_entropy(&self.network.logits(&weights, &s.x), s.label).0)
            .sum();
        Ok(total / self.eval.len() as f64)
    }

    fn sample_count(&self) -> u64 {
        self.eval.len() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyClassifierOracle {
        let config = ToyConfig {
            hidden: vec![6, 6],
            train_size: 64,
            eval_size: 32,
            ..Default::default()
        };
        ToyClassifierOracle::train(config, 4, 20).unwrap()
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let config = ToyConfig {
            hidden: vec![5, 4],
            train_size: 16,
            ..Default::default()
        };
        let data = moons(
            &mut stream(1, TRAIN_STREAM),
            config.train_size,
            config.noise,
        );
        let net = Network::init(&dims_for(&config), &mut stream(1, INIT_STREAM));
        let loss = |n: &Network| -> f64 {
            data.iter()
                .map(|s| cross_entropy(&n.logits(&n.own_weights(), &s.x), s.label).0)
                .sum::<f64>()
                / data.len() as f64
        };
        let (gw, gb) = gradients(&net, &data);
        let h = 1e-6;
        for k in 0..net.depth() {
            for i in [0, net.weights[k].len() / 2, net.weights[k].len() - 1] {
                let mut plus = net.clone();
                plus.weights[k][i] += h;
                let mut minus = net.clone();
                minus.weights[k][i] -= h;
                let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
                assert!(
                    (fd - gw[k][i]).abs() < 1e-7,
                    "w[{k}][{i}]: {fd} vs {}",
                    gw[k][i]
                );
            }
            let mut plus = net.clone();
            plus.biases[k][0] += h;
            let mut minus = net.clone();
            minus.biases[k][0] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!((fd - gb[k][0]).abs() < 1e-7, "b[{k}]: {fd} vs {}", gb[k][0]);
        }
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let a = small();
        let b = small();
        assert_eq!(a.network, b.network);
        let config = a.config().clone();
        let c = ToyClassifierOracle::train(config, 5, 20).unwrap();
        assert_ne!(a.network, c.network);
    }

    #[test]
    fn baseline_is_positive_and_repeatable() {
        let o = small();
        let l0 = o.baseline_loss().unwrap();
        assert!(l0 > 0.0);
        assert_eq!(l0, o.baseline_loss().unwrap());
        assert_eq!(o.sample_count(), 32);
    }

    #[test]
    fn evaluate_does_not_mutate_weights() {
        let o = small();
        let l0 = o.baseline_loss().unwrap();
        let delta = vec![0.5; o.layers()[1].count()];
        let l1 = o.evaluate(&[(1, &delta)]).unwrap();
        assert_ne!(l0, l1);
        assert_eq!(o.baseline_loss().unwrap(), l0);
    }

    #[test]
    fn batches_are_distinct_and_reproducible() {
        let o = small();
        let b1 = o.with_sensitivity_batch(16, 1).unwrap();
        let b2 = o.with_sensitivity_batch(16, 2).unwrap();
        assert_ne!(b1.baseline_loss().unwrap(), b2.baseline_loss().unwrap());
        let again = o.with_sensitivity_batch(16, 1).unwrap();
        assert_eq!(b1.baseline_loss().unwrap(), again.baseline_loss().unwrap());
    }

    #[test]
    fn container_round_trip_preserves_losses() {
        let o = small();
        let back = ToyClassifierOracle::from_container(
            &Container::from_bytes(&o.to_container().to_bytes().unwrap()).unwrap(),
        )
        .unwrap();
        assert_eq!(back.network, o.network);
        assert_eq!(back.baseline_loss().unwrap(), o.baseline_loss().unwrap());
    }

    #[test]
    fn rejects_zero_epochs() {
        assert!(train_toy(0, 0).is_err());
    }
}
