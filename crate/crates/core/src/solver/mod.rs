//! Bit-width allocation under a model-size budget.
//!
//! A [`Problem`] holds a sensitivity matrix `G` over (layer, bit-width) pairs,
//! indexed `layer * |menu| + choice`, together with the layer sizes and the
//! bit menu. An assignment picks one width per layer; its objective is
//! `a^T G a` for the one-hot selection vector `a`, and its size is
//! `sum_l count_l * bits_l`.

mod bnb;
mod exhaustive;
mod relaxation;

use std::cmp::Ordering;
use std::fmt;
use std::time::Duration;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::linalg::{exact_sum, Matrix};
use crate::sensitivity::{BitMenu, SensitivityMatrix};
use crate::spectra;

pub use bnb::solve_bnb;
pub use exhaustive::{solve_exhaustive, MAX_EXHAUSTIVE_SPACE};
pub use relaxation::relaxation_bound;

const BITS_PER_MEGABYTE: f64 = 8.0 * 1048576.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BitAssignment {
    pub bits: Vec<u32>,
}

impl BitAssignment {
    pub fn new(bits: Vec<u32>) -> Self {
        Self { bits }
    }

    /// Parses `"2,4,8"` (commas or whitespace).
    pub fn parse(s: &str) -> Result<Self> {
        let bits = s
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|t| !t.is_empty())
            .map(|t| {
                t.parse::<u32>()
                    .map_err(|_| Error::InvalidArgument(format!("bad bit-width {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.is_empty() {
            return invalid("empty bit assignment");
        }
        Ok(Self { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

impl fmt::Display for BitAssignment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.bits.iter().map(u32::to_string).collect();
        f.write_str(&parts.join(" "))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct SizeBudget {
    pub limit_bits: u64,
}

impl SizeBudget {
    pub fn bits(limit_bits: u64) -> Self {
        Self { limit_bits }
    }

    /// `mb * 8 * 2^20` bits, rounded down.
    pub fn from_megabytes(mb: f64) -> Result<Self> {
        if !mb.is_finite() || mb < 0.0 {
            return invalid(format!(
                "budget must be a non-negative number of megabytes, got {mb}"
            ));
        }
        Ok(Self {
            limit_bits: (mb * BITS_PER_MEGABYTE).floor() as u64,
        })
    }

    pub fn megabytes(&self) -> f64 {
        bits_to_megabytes(self.limit_bits)
    }
}

pub fn bits_to_megabytes(bits: u64) -> f64 {
    bits as f64 / BITS_PER_MEGABYTE
}

/// Contiguous or scattered groups of layers; every layer belongs to exactly one block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockPartition {
    block_of: Vec<usize>,
}

impl BlockPartition {
    /// `block_of[l]` is the block id of layer `l`.
    pub fn from_assignment(block_of: Vec<usize>) -> Result<Self> {
        if block_of.is_empty() {
            return invalid("a block partition needs at least one layer");
        }
        Ok(Self { block_of })
    }

    /// Parses `"0-1,2-4,5"` over layers `0..layers`.
    pub fn parse(s: &str, layers: usize) -> Result<Self> {
        let mut block_of = vec![usize::MAX; layers];
        for (b, part) in s.split(',').map(str::trim).enumerate() {
            let (lo, hi) = match part.split_once('-') {
                Some((a, z)) => (a.trim(), z.trim()),
                None => (part, part),
            };
            let parse = |t: &str| {
                t.parse::<usize>().map_err(|_| {
                    Error::InvalidArgument(format!("bad layer index {t:?} in block {part:?}"))
                })
            };
            let (lo, hi) = (parse(lo)?, parse(hi)?);
            if lo > hi || hi >= layers {
                return invalid(format!("block {part:?} is not a range within 0..{layers}"));
            }
            for slot in &mut block_of[lo..=hi] {
                if *slot != usize::MAX {
                    return invalid(format!("block {part:?} overlaps an earlier block"));
                }
                *slot = b;
            }
        }
        if let Some(l) = block_of.iter().position(|&b| b == usize::MAX) {
            return invalid(format!("layer {l} is not covered by any block"));
        }
        Self::from_assignment(block_of)
    }

    pub fn singletons(layers: usize) -> Self {
        Self {
            block_of: (0..layers).collect(),
        }
    }

    pub fn single(layers: usize) -> Self {
        Self {
            block_of: vec![0; layers],
        }
    }

    /// Consecutive blocks of `size` layers; the last may be shorter.
    pub fn contiguous(layers: usize, size: usize) -> Self {
        let size = size.max(1);
        Self {
            block_of: (0..layers).map(|l| l / size).collect(),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.block_of.len()
    }

    pub fn block_of(&self, layer: usize) -> usize {
        self.block_of[layer]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    /// Full cross-layer matrix.
    Clado,
    /// Cross-layer entries removed.
    Diagonal,
    /// Cross-layer entries kept only within blocks.
    Block(BlockPartition),
    /// Full matrix, brute-force enumeration.
    Exhaustive,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Clado => "clado",
            Method::Diagonal => "diag",
            Method::Block(_) => "block",
            Method::Exhaustive => "exhaustive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// The search space was fully explored or pruned.
    Complete,
    NodeLimit,
    TimeLimit,
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub node_limit: u64,
    pub time_limit: Option<Duration>,
    /// Frank-Wolfe iteration cap per relaxation.
    pub max_iterations: usize,
    /// Relative duality-gap target for a relaxation.
    pub gap_tolerance: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            node_limit: 1_000_000,
            time_limit: None,
            max_iterations: 10_000,
            gap_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub assignment: BitAssignment,
    /// `a^T G a` of the returned assignment under the matrix that was solved.
    pub objective: f64,
    pub size_bits: u64,
    pub method: String,
    /// Set only when the search completed on a PSD matrix (or exhaustively).
    pub optimal: bool,
    pub termination: Termination,
    /// Set when the matrix was not PSD, so relaxation bounds were not valid.
    pub psd_warning: bool,
    pub nodes: u64,
    pub iterations: u64,
    pub elapsed: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Problem {
    g: Matrix,
    sizes: Vec<usize>,
    menu: BitMenu,
}

impl Problem {
    pub fn new(mut g: Matrix, sizes: Vec<usize>, menu: BitMenu) -> Result<Self> {
        if sizes.is_empty() {
            return invalid("a problem needs at least one layer");
        }
        if g.dim() != sizes.len() * menu.len() {
            return Err(Error::DimensionMismatch(format!(
                "{} layers x {} widths need a {2}x{2} matrix, got {3}x{3}",
                sizes.len(),
                menu.len(),
                sizes.len() * menu.len(),
                g.dim()
            )));
        }
        if g.as_slice().iter().any(|v| !v.is_finite()) {
            return invalid("sensitivity matrix has non-finite entries");
        }
        let deviation = g.asymmetry();
        if deviation > spectra::SYMMETRY_TOLERANCE * g.max_abs().max(1.0) {
            return Err(Error::NotSymmetric { deviation });
        }
        g.symmetrize();
        Ok(Self { g, sizes, menu })
    }

    pub fn from_sensitivity(s: &SensitivityMatrix) -> Self {
        Self {
            g: s.entries().clone(),
            sizes: s.layer_sizes().to_vec(),
            menu: s.menu().clone(),
        }
    }

    pub fn matrix(&self) -> &Matrix {
        &self.g
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn menu(&self) -> &BitMenu {
        &self.menu
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len()
    }

    pub fn index(&self, layer: usize, choice: usize) -> usize {
        layer * self.menu.len() + choice
    }

    pub fn cost(&self, layer: usize, choice: usize) -> u64 {
        self.sizes[layer] as u64 * u64::from(self.menu.bits()[choice])
    }

    pub fn min_size_bits(&self) -> u64 {
        (0..self.num_layers()).map(|l| self.cost(l, 0)).sum()
    }

    pub fn max_size_bits(&self) -> u64 {
        let top = self.menu.len() - 1;
        (0..self.num_layers()).map(|l| self.cost(l, top)).sum()
    }

    /// Same problem with `G` replaced by its PSD projection.
    pub fn psd_projected(&self) -> Result<Self> {
        Ok(Self {
            g: spectra::psd_project(&self.g)?,
            ..self.clone()
        })
    }

    /// Zeroes entries coupling layers in different blocks.
    pub fn restricted_to_blocks(&self, partition: &BlockPartition) -> Result<Self> {
        if partition.num_layers() != self.num_layers() {
            return Err(Error::InvalidArgument(format!(
                "block partition covers {} layers, problem has {}",
                partition.num_layers(),
                self.num_layers()
            )));
        }
        let nb = self.menu.len();
        let mut g = self.g.clone();
        let n = g.dim();
        for p in 0..n {
            for q in 0..n {
                if partition.block_of(p / nb) != partition.block_of(q / nb) {
                    g[(p, q)] = 0.0;
                }
            }
        }
        Ok(Self { g, ..self.clone() })
    }

    /// Zeroes all cross-layer entries.
    pub fn without_cross_layer(&self) -> Self {
        self.restricted_to_blocks(&BlockPartition::singletons(self.num_layers()))
            .expect("singleton partition matches the layer count")
    }

    /// The matrix a method optimizes: masked for the ablations, unchanged otherwise.
    pub fn masked_for(&self, method: &Method) -> Result<Self> {
        match method {
            Method::Clado | Method::Exhaustive => Ok(self.clone()),
            Method::Diagonal => Ok(self.without_cross_layer()),
            Method::Block(partition) => self.restricted_to_blocks(partition),
        }
    }

    pub fn choices_of(&self, a: &BitAssignment) -> Result<Vec<usize>> {
        if a.len() != self.num_layers() {
            return Err(Error::DimensionMismatch(format!(
                "assignment has {} layers, problem has {}",
                a.len(),
                self.num_layers()
            )));
        }
        a.bits
            .iter()
            .map(|&b| {
                self.menu.index_of(b).ok_or_else(|| {
                    Error::InvalidArgument(format!("{b} bits is not in the menu {}", self.menu))
                })
            })
            .collect()
    }

    pub fn assignment(&self, choices: &[usize]) -> BitAssignment {
        BitAssignment::new(choices.iter().map(|&m| self.menu.bits()[m]).collect())
    }

    pub fn size_of_choices(&self, choices: &[usize]) -> u64 {
        choices
            .iter()
            .enumerate()
            .map(|(l, &m)| self.cost(l, m))
            .sum()
    }

    pub fn size_bits(&self, a: &BitAssignment) -> Result<u64> {
        Ok(self.size_of_choices(&self.choices_of(a)?))
    }

    /// `a^T G a`, correctly rounded.
    pub(crate) fn objective_of_choices(&self, choices: &[usize]) -> f64 {
        let idx: Vec<usize> = choices
            .iter()
            .enumerate()
            .map(|(l, &m)| self.index(l, m))
            .collect();
        exact_sum(
            idx.iter()
                .flat_map(|&p| idx.iter().map(move |&q| self.g[(p, q)])),
        )
    }

    fn check_feasible(&self, budget: SizeBudget) -> Result<()> {
        let required = self.min_size_bits();
        if required > budget.limit_bits {
            return Err(Error::Infeasible {
                required,
                limit: budget.limit_bits,
            });
        }
        Ok(())
    }
}

/// `a^T G a` for the one-hot selection of `a`, computed as the correctly
/// rounded sum of the selected entries.
pub fn objective(problem: &Problem, a: &BitAssignment) -> Result<f64> {
    Ok(problem.objective_of_choices(&problem.choices_of(a)?))
}

/// Candidate order: lower objective, then smaller size, then the
/// lexicographically smaller choice vector.
pub(crate) fn compare_candidates(a: (f64, u64, &[usize]), b: (f64, u64, &[usize])) -> Ordering {
    a.0.total_cmp(&b.0)
        .then(a.1.cmp(&b.1))
        .then_with(|| a.2.cmp(b.2))
}

/// Best assignment for the method, on `problem`'s matrix masked as the method requires.
pub fn solve(
    problem: &Problem,
    budget: SizeBudget,
    method: &Method,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    let masked = problem.masked_for(method)?;
    let mut report = match method {
        Method::Exhaustive => solve_exhaustive(&masked, budget)?,
        _ => solve_bnb(&masked, budget, opts)?,
    };
    report.method = method.name().to_string();
    Ok(report)
}

/// Solves with all cross-layer sensitivities removed.
pub fn solve_diagonal_only(
    problem: &Problem,
    budget: SizeBudget,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    solve(problem, budget, &Method::Diagonal, opts)
}

/// Solves with cross-layer sensitivities kept only inside blocks.
pub fn solve_block(
    problem: &Problem,
    budget: SizeBudget,
    partition: &BlockPartition,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    solve(problem, budget, &Method::Block(partition.clone()), opts)
}

/// One solve per budget; budgets must be ascending. Per-budget failures
/// (such as infeasibility) are returned in place.
pub fn sweep(
    problem: &Problem,
    budgets: &[SizeBudget],
    method: &Method,
    opts: &SolveOptions,
) -> Result<Vec<Result<SolveReport>>> {
    if budgets.windows(2).any(|w| w[0] > w[1]) {
        return invalid("sweep budgets must be in ascending order");
    }
    let masked = problem.masked_for(method)?;
    Ok(budgets
        .par_iter()
        .map(|&b| solve(&masked, b, method, opts))
        .collect())
}

#[cfg(test)]
mod tests;
