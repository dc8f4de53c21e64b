//! Loss oracles: the measurement pipeline's only view of a model.
//!
//! An oracle exposes its quantizable layers and the mean loss over a fixed
//! sensitivity set when selected layers are shifted by additive weight
//! perturbations. Oracles are immutable after construction and may be shared
//! across measurement workers.

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::quantizer::{self, LayerSpec};

mod matrix_backed;
mod quadratic;
mod toy;

pub use matrix_backed::MatrixBackedOracle;
pub use quadratic::{QuadraticOracle, QuadraticParams};
pub use toy::{train_toy, ToyClassifierOracle, ToyConfig, DEFAULT_EPOCHS};

/// A perturbation applied to one layer: `(layer index, delta)`.
pub type Perturbation<'a> = (usize, &'a [f64]);

pub trait LossOracle: Sync {
    fn layers(&self) -> &[LayerSpec];

    /// Mean loss with `w[l] += delta` for every `(l, delta)` given. Layers not
    /// listed keep their stored weights. Each layer may appear at most once.
    fn evaluate(&self, perturbations: &[Perturbation<'_>]) -> Result<f64>;

    /// Loss of the unperturbed model.
    fn baseline_loss(&self) -> Result<f64> {
        self.evaluate(&[])
    }

    /// Quantization error of `layer` at `bits`.
    fn perturbation(&self, layer: usize, bits: u32) -> Result<Vec<f64>> {
        let spec = self
            .layers()
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer index {layer} out of range")))?;
        quantizer::perturbation(spec, bits)
    }

    /// Number of samples the loss is averaged over.
    fn sample_count(&self) -> u64 {
        1
    }
}

/// Rejects out-of-range indices, duplicate layers and wrong-length deltas.
pub fn check_perturbations(layers: &[LayerSpec], perturbations: &[Perturbation<'_>]) -> Result<()> {
    for (k, &(l, delta)) in perturbations.iter().enumerate() {
        let Some(spec) = layers.get(l) else {
            return Err(Error::InvalidArgument(format!(
                "perturbation targets layer {l}, but the oracle has {} layers",
                layers.len()
            )));
        };
        if delta.len() != spec.count() {
            return Err(Error::DimensionMismatch(format!(
                "perturbation for layer {l} has {} elements, layer has {}",
                delta.len(),
                spec.count()
            )));
        }
        if perturbations[..k].iter().any(|&(other, _)| other == l) {
            return Err(Error::InvalidArgument(format!("layer {l} perturbed twice")));
        }
    }
    Ok(())
}

/// Wraps an oracle and counts `evaluate` calls.
#[derive(Debug)]
pub struct CountingOracle<O> {
    inner: O,
    calls: AtomicUsize,
}

impl<O: LossOracle> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn into_inner(self) -> O {
        self.inner
    }
}

impl<O: LossOracle> LossOracle for CountingOracle<O> {
    fn layers(&self) -> &[LayerSpec] {
        self.inner.layers()
    }

    fn evaluate(&self, perturbations: &[Perturbation<'_>]) -> Result<f64> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(perturbations)
    }

    fn perturbation(&self, layer: usize, bits: u32) -> Result<Vec<f64>> {
        self.inner.perturbation(layer, bits)
    }

    fn sample_count(&self) -> u64 {
        self.inner.sample_count()
    }
}

/// Any oracle that can be stored in a container file.
#[derive(Debug, Clone)]
pub enum OracleFile {
    Toy(ToyClassifierOracle),
    Quadratic(QuadraticOracle),
}

impl OracleFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let container = Container::load(path)?;
        match container.kind.as_str() {
            toy::KIND => Ok(Self::Toy(ToyClassifierOracle::from_container(&container)?)),
            quadratic::KIND => Ok(Self::Quadratic(QuadraticOracle::from_container(
                &container,
            )?)),
            other => Err(Error::Format(format!("unknown oracle kind {other:?}"))),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            Self::Toy(o) => o.to_container().save(path),
            Self::Quadratic(o) => o.to_container().save(path),
        }
    }

    /// The oracle restricted to sensitivity batch `index` of `batch_size`
    /// samples. The quadratic oracle is exact and has no batches, so it is
    /// returned unchanged.
    pub fn batch(&self, batch_size: usize, index: u64) -> Result<OracleFile> {
        match self {
            Self::Toy(o) => Ok(Self::Toy(o.with_sensitivity_batch(batch_size, index)?)),
            Self::Quadratic(o) => Ok(Self::Quadratic(o.clone())),
        }
    }
}

impl LossOracle for OracleFile {
    fn layers(&self) -> &[LayerSpec] {
        match self {
            Self::Toy(o) => o.layers(),
            Self::Quadratic(o) => o.layers(),
        }
    }

    fn evaluate(&self, perturbations: &[Perturbation<'_>]) -> Result<f64> {
        match self {
            Self::Toy(o) => o.evaluate(perturbations),
            Self::Quadratic(o) => o.evaluate(perturbations),
        }
    }

    fn sample_count(&self) -> u64 {
        match self {
            Self::Toy(o) => o.sample_count(),
            Self::Quadratic(o) => o.sample_count(),
        }
    }
}
