//! Sensitivity matrix assembly from forward-only loss evaluations.
//!
//! Row/column `p = i * |B| + m` of the matrix corresponds to layer `i`
//! quantized to the `m`-th entry (0-based) of the bit menu. Diagonal entries
//! hold layer-specific sensitivities `2 (L(w + d_im) - L(w))`; off-diagonal
//! entries between different layers hold cross-layer sensitivities
//! `L(w + d_im + d_jn) + L(w) - L(w + d_im) - L(w + d_jn)`. Both are exactly
//! `d_im^T H_ij d_jn` when the loss is quadratic around a minimum.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::oracles::LossOracle;
use crate::quantizer::MAX_BITS;

pub mod cache;

/// Ordered set of candidate bit-widths.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BitMenu(Vec<u32>);

impl BitMenu {
    /// Sorts the widths; rejects duplicates, an empty menu and widths outside `[2, 32]`.
    pub fn new(mut bits: Vec<u32>) -> Result<Self> {
        if bits.is_empty() {
            return invalid("bit menu is empty");
        }
        bits.sort_unstable();
        if bits.windows(2).any(|w| w[0] == w[1]) {
            return invalid(format!("bit menu has duplicates: {bits:?}"));
        }
        if let Some(&b) = bits.iter().find(|&&b| !(2..=MAX_BITS).contains(&b)) {
            return invalid(format!("bit-width {b} outside [2, {MAX_BITS}]"));
        }
        Ok(Self(bits))
    }

    /// Parses a comma-separated list such as `2,4,8`.
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse::<u32>()
                    .map_err(|_| Error::InvalidArgument(format!("bad bit-width {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(bits)
    }

    pub fn bits(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn min(&self) -> u32 {
        self.0[0]
    }

    pub fn max(&self) -> u32 {
        *self.0.last().unwrap()
    }

    pub fn index_of(&self, bits: u32) -> Option<usize> {
        self.0.binary_search(&bits).ok()
    }
}

impl fmt::Display for BitMenu {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(u32::to_string).collect();
        f.write_str(&parts.join(","))
    }
}

/// How entries pairing two different bit-widths of the same layer are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SameLayerCrossBits {
    /// Left at zero. No integer assignment ever selects two widths for one layer.
    #[default]
    Zero,
    /// Measured by applying the sum of both perturbations to the layer. The
    /// resulting matrix is the full Gram matrix of the perturbations under the
    /// loss Hessian and is PSD whenever that Hessian is.
    Measured,
}

impl SameLayerCrossBits {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Measured => "measured",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(Self::Zero),
            "measured" => Ok(Self::Measured),
            _ => invalid(format!("unknown same-layer mode {s:?} (zero | measured)")),
        }
    }
}

/// Symmetric `|B| L x |B| L` matrix of layer-specific and cross-layer sensitivities.
#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    menu: BitMenu,
    layer_sizes: Vec<usize>,
    entries: Matrix,
    sample_count: u64,
    same_layer: SameLayerCrossBits,
}

impl SensitivityMatrix {
    /// Validates shape and symmetry. With [`SameLayerCrossBits::Zero`], the
    /// same-layer cross-bit entries must be zero.
    pub fn new(
        menu: BitMenu,
        layer_sizes: Vec<usize>,
        entries: Matrix,
        sample_count: u64,
        same_layer: SameLayerCrossBits,
    ) -> Result<Self> {
        if layer_sizes.is_empty() {
            return invalid("sensitivity matrix needs at least one layer");
        }
        if layer_sizes.contains(&0) {
            return invalid("layer sizes must be positive");
        }
        let dim = menu.len() * layer_sizes.len();
        if entries.dim() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{} layers x {} widths needs a {dim}x{dim} matrix, got {2}x{2}",
                layer_sizes.len(),
                menu.len(),
                entries.dim(),
            )));
        }
        let deviation = entries.asymmetry();
        if deviation != 0.0 {
            return Err(Error::NotSymmetric { deviation });
        }
        if same_layer == SameLayerCrossBits::Zero {
            let nb = menu.len();
            for i in 0..layer_sizes.len() {
                for m in 0..nb {
                    for n in 0..nb {
                        if m != n && entries[(i * nb + m, i * nb + n)] != 0.0 {
                            return invalid(format!(
                                "same-layer cross-bit entry ({i}, {m}, {n}) must be zero"
                            ));
                        }
                    }
                }
            }
        }
        Ok(Self {
            menu,
            layer_sizes,
            entries,
            sample_count,
            same_layer,
        })
    }

    pub fn menu(&self) -> &BitMenu {
        &self.menu
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    pub fn entries(&self) -> &Matrix {
        &self.entries
    }

    pub fn sample_count(&self) -> u64 {
        self.sample_count
    }

    pub fn same_layer(&self) -> SameLayerCrossBits {
        self.same_layer
    }

    /// Flattened index of layer `layer` at menu position `choice`.
    pub fn index(&self, layer: usize, choice: usize) -> usize {
        layer * self.menu.len() + choice
    }

    pub fn get(&self, layer_i: usize, choice_m: usize, layer_j: usize, choice_n: usize) -> f64 {
        self.entries[(self.index(layer_i, choice_m), self.index(layer_j, choice_n))]
    }
}

/// Measures sensitivities against one oracle, sharing the baseline loss and
/// the per-layer perturbations across all queries.
pub struct Measurement<'a, O: ?Sized> {
    oracle: &'a O,
    menu: BitMenu,
    baseline: f64,
    /// `perturbations[layer][choice]`
    perturbations: Vec<Vec<Vec<f64>>>,
}

impl<'a, O: LossOracle + ?Sized> Measurement<'a, O> {
    /// Evaluates the baseline loss once and precomputes every perturbation.
    pub fn new(oracle: &'a O, menu: &BitMenu) -> Result<Self> {
        if oracle.layers().is_empty() {
            return invalid("oracle exposes no layers");
        }
        let baseline = oracle.baseline_loss()?;
        let perturbations = (0..oracle.layers().len())
            .map(|l| {
                menu.bits()
                    .iter()
                    .map(|&b| oracle.perturbation(l, b))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            oracle,
            menu: menu.clone(),
            baseline,
            perturbations,
        })
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    pub fn perturbation(&self, layer: usize, choice: usize) -> &[f64] {
        &self.perturbations[layer][choice]
    }

    fn check(&self, layer: usize, choice: usize) -> Result<()> {
        if layer >= self.perturbations.len() || choice >= self.menu.len() {
            return invalid(format!("no layer {layer} / menu position {choice}"));
        }
        Ok(())
    }

    /// `2 (L(w + d_im) - L(w))`
    pub fn diagonal(&self, layer: usize, choice: usize) -> Result<f64> {
        self.check(layer, choice)?;
        let loss = self
            .oracle
            .evaluate(&[(layer, self.perturbation(layer, choice))])?;
        Ok(2.0 * (loss - self.baseline))
    }

    /// `L(w + d_im + d_jn) - L(w) - diag_ii / 2 - diag_jj / 2`, for `i < j`.
    pub fn cross(
        &self,
        i: usize,
        m: usize,
        j: usize,
        n: usize,
        diag_ii: f64,
        diag_jj: f64,
    ) -> Result<f64> {
        if i >= j {
            return invalid(format!("cross sensitivity needs i < j, got i={i}, j={j}"));
        }
        self.check(i, m)?;
        self.check(j, n)?;
        let joint = self
            .oracle
            .evaluate(&[(i, self.perturbation(i, m)), (j, self.perturbation(j, n))])?;
        Ok(joint - self.baseline - 0.5 * diag_ii - 0.5 * diag_jj)
    }

    /// Same-layer analogue of [`Self::cross`], perturbing layer `i` by
    /// `d_im + d_in`.
    pub fn same_layer_cross(
        &self,
        i: usize,
        m: usize,
        n: usize,
        diag_m: f64,
        diag_n: f64,
    ) -> Result<f64> {
        if m == n {
            return invalid("same-layer cross sensitivity needs two different widths");
        }
        self.check(i, m)?;
        self.check(i, n)?;
        let sum: Vec<f64> = self
            .perturbation(i, m)
            .iter()
            .zip(self.perturbation(i, n))
            .map(|(a, b)| a + b)
            .collect();
        let joint = self.oracle.evaluate(&[(i, &sum)])?;
        Ok(joint - self.baseline - 0.5 * diag_m - 0.5 * diag_n)
    }
}

/// Layer-specific sensitivity of `layer` at `bits`. Evaluates the baseline as well.
pub fn measure_diagonal<O: LossOracle + ?Sized>(
    oracle: &O,
    layer: usize,
    bits: u32,
) -> Result<f64> {
    let baseline = oracle.baseline_loss()?;
    let delta = oracle.perturbation(layer, bits)?;
    let loss = oracle.evaluate(&[(layer, &delta)])?;
    Ok(2.0 * (loss - baseline))
}

/// Cross-layer sensitivity between `(i, bits_m)` and `(j, bits_n)` given the
/// two layer-specific sensitivities. Requires `i < j`.
pub fn measure_cross<O: LossOracle + ?Sized>(
    oracle: &O,
    i: usize,
    bits_m: u32,
    j: usize,
    bits_n: u32,
    diag_ii: f64,
    diag_jj: f64,
) -> Result<f64> {
    if i >= j {
        return invalid(format!("cross sensitivity needs i < j, got i={i}, j={j}"));
    }
    let baseline = oracle.baseline_loss()?;
    let di = oracle.perturbation(i, bits_m)?;
    let dj = oracle.perturbation(j, bits_n)?;
    let joint = oracle.evaluate(&[(i, &di), (j, &dj)])?;
    Ok(joint - baseline - 0.5 * diag_ii - 0.5 * diag_jj)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildOptions {
    pub same_layer: SameLayerCrossBits,
}

/// Number of oracle evaluations [`build_matrix`] performs: one baseline,
/// `|B| L` layer-specific and `|B|^2 L (L - 1) / 2` cross-layer measurements,
/// plus `L |B| (|B| - 1) / 2` when same-layer entries are measured.
pub fn evaluation_count(layers: usize, widths: usize, same_layer: SameLayerCrossBits) -> usize {
    let base = 1 + widths * layers + widths * widths * layers * layers.saturating_sub(1) / 2;
    match same_layer {
        SameLayerCrossBits::Zero => base,
        SameLayerCrossBits::Measured => base + layers * widths * (widths - 1) / 2,
    }
}

pub fn build_matrix<O: LossOracle + ?Sized>(
    oracle: &O,
    menu: &BitMenu,
) -> Result<SensitivityMatrix> {
    build_matrix_with(oracle, menu, BuildOptions::default())
}

/// Fills the sensitivity matrix. Measurements run on the rayon pool; results
/// are written in lexicographic `(i, m, j, n)` order, so the matrix does not
/// depend on scheduling.
pub fn build_matrix_with<O: LossOracle + ?Sized>(
    oracle: &O,
    menu: &BitMenu,
    opts: BuildOptions,
) -> Result<SensitivityMatrix> {
    let meas = Measurement::new(oracle, menu)?;
    let layers = oracle.layers().len();
    let nb = menu.len();
    let dim = layers * nb;
    let mut g = Matrix::zeros(dim);

    let diag: Vec<f64> = (0..dim)
        .into_par_iter()
        .map(|p| meas.diagonal(p / nb, p % nb))
        .collect::<Result<_>>()?;
    for (p, &d) in diag.iter().enumerate() {
        g[(p, p)] = d;
    }

    let mut pairs = Vec::with_capacity(nb * nb * layers * layers.saturating_sub(1) / 2);
    for i in 0..layers {
        for j in (i + 1)..layers {
            for m in 0..nb {
                for n in 0..nb {
                    pairs.push((i * nb + m, j * nb + n));
                }
            }
        }
    }
    let cross: Vec<f64> = pairs
        .par_iter()
        .map(|&(p, q)| meas.cross(p / nb, p % nb, q / nb, q % nb, diag[p], diag[q]))
        .collect::<Result<_>>()?;
    for (&(p, q), &v) in pairs.iter().zip(&cross) {
        g[(p, q)] = v;
        g[(q, p)] = v;
    }

    if opts.same_layer == SameLayerCrossBits::Measured {
        let mut same = Vec::new();
        for i in 0..layers {
            for m in 0..nb {
                for n in (m + 1)..nb {
                    same.push((i, m, n));
                }
            }
        }
        let vals: Vec<f64> = same
            .par_iter()
            .map(|&(i, m, n)| meas.same_layer_cross(i, m, n, diag[i * nb + m], diag[i * nb + n]))
            .collect::<Result<_>>()?;
        for (&(i, m, n), &v) in same.iter().zip(&vals) {
            g[(i * nb + m, i * nb + n)] = v;
            g[(i * nb + n, i * nb + m)] = v;
        }
    }

    let sizes = oracle.layers().iter().map(|l| l.count()).collect();
    SensitivityMatrix::new(
        menu.clone(),
        sizes,
        g,
        oracle.sample_count(),
        opts.same_layer,
    )
}

/// Sample-count-weighted mean of per-batch matrices. Sample counts add up.
pub fn merge_batches(parts: &[SensitivityMatrix]) -> Result<SensitivityMatrix> {
    let Some(first) = parts.first() else {
        return invalid("nothing to merge");
    };
    for p in &parts[1..] {
        if p.menu != first.menu || p.layer_sizes != first.layer_sizes {
            return Err(Error::InvalidArgument(format!(
                "cannot merge matrices with different shapes ({} / {:?} vs {} / {:?})",
                first.menu, first.layer_sizes, p.menu, p.layer_sizes
            )));
        }
        if p.same_layer != first.same_layer {
            return invalid("cannot merge matrices measured with different same-layer modes");
        }
    }
    let total: u64 = parts.iter().map(|p| p.sample_count).sum();
    if total == 0 {
        return invalid("merged sample count is zero");
    }
    let dim = first.entries.dim();
    let mut acc = vec![0.0; dim * dim];
    for p in parts {
        let w = p.sample_count as f64 / total as f64;
        for (a, &v) in acc.iter_mut().zip(p.entries.as_slice()) {
            *a += w * v;
        }
    }
    SensitivityMatrix::new(
        first.menu.clone(),
        first.layer_sizes.clone(),
        Matrix::from_row_major(dim, acc)?,
        total,
        first.same_layer,
    )
}
