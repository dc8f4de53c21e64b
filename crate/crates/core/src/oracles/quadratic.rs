use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{check_perturbations, LossOracle, Perturbation};
use crate::container::{Container, DType, Tensor};
use crate::error::{invalid, Error, Result};
use crate::linalg::Matrix;
use crate::quantizer::LayerSpec;

pub(crate) const KIND: &str = "quadratic";

/// Exact quadratic loss `L(w* + d) = L0 + 1/2 d^T H d` around an optimum `w*`.
///
/// The gradient at `w*` vanishes, so second-order sensitivity measurements
/// against this oracle are exact up to round-off.
#[derive(Debug, Clone)]
pub struct QuadraticOracle {
    layers: Vec<LayerSpec>,
    offsets: Vec<usize>,
    hessian: Matrix,
    baseline: f64,
}

/// Knobs for [`QuadraticOracle::generate`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QuadraticParams {
    pub layers: usize,
    pub min_size: usize,
    pub max_size: usize,
    /// Share of the curvature carried by a low-rank term that couples all
    /// layers; 0 gives a block-diagonal Hessian.
    pub rho: f64,
    pub coupling_rank: usize,
    pub baseline: f64,
}

impl Default for QuadraticParams {
    fn default() -> Self {
        Self {
            layers: 4,
            min_size: 4,
            max_size: 24,
            rho: 0.5,
            coupling_rank: 3,
            baseline: 0.0,
        }
    }
}

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp()
}

impl QuadraticOracle {
    pub fn new(layers: Vec<LayerSpec>, mut hessian: Matrix, baseline: f64) -> Result<Self> {
        if layers.is_empty() {
            return invalid("quadratic oracle needs at least one layer");
        }
        let mut offsets = Vec::with_capacity(layers.len() + 1);
        let mut total = 0;
        for l in &layers {
            offsets.push(total);
            total += l.count();
        }
        offsets.push(total);
        if hessian.dim() != total {
            return Err(Error::DimensionMismatch(format!(
                "Hessian is {0}x{0} but layers hold {total} weights",
                hessian.dim()
            )));
        }
        let deviation = hessian.asymmetry();
        if deviation > 1e-12 * hessian.max_abs().max(1.0) {
            return Err(Error::NotSymmetric { deviation });
        }
        hessian.symmetrize();
        Ok(Self {
            layers,
            offsets,
            hessian,
            baseline,
        })
    }

    /// Random instance with PSD Hessian
    /// `D ((1 - rho) blockdiag(B_l) + rho M) D`, where each `B_l` is a Wishart
    /// block, `M` is a low-rank Gram matrix spanning every layer and `D` scales
    /// layers by a log-uniform importance in `[0.1, 10]`.
    pub fn generate(params: &QuadraticParams, seed: u64) -> Result<Self> {
        if params.layers == 0 || params.min_size == 0 || params.min_size > params.max_size {
            return invalid("need layers >= 1 and 1 <= min_size <= max_size");
        }
        if !(0.0..=1.0).contains(&params.rho) {
            return invalid(format!("rho must lie in [0, 1], got {}", params.rho));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sizes: Vec<usize> = (0..params.layers)
            .map(|_| rng.random_range(params.min_size..=params.max_size))
            .collect();
        let n: usize = sizes.iter().sum();

        let mut layers = Vec::with_capacity(sizes.len());
        for (l, &size) in sizes.iter().enumerate() {
            let sigma = log_uniform(&mut rng, 0.5, 2.0);
            let w = (0..size)
                .map(|_| sigma * Distribution::<f64>::sample(&StandardNormal, &mut rng))
                .collect::<Vec<f64>>();
            layers.push(LayerSpec::new(format!("layer{l}"), w)?);
        }
        let importance: Vec<f64> = sizes
            .iter()
            .map(|_| log_uniform(&mut rng, 0.1, 10.0))
            .collect();

        let mut h = Matrix::zeros(n);
        let mut offset = 0;
        for &size in &sizes {
            let a: Vec<f64> = (0..size * size)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            for r in 0..size {
                for c in r..size {
                    let v: f64 = (0..size)
                        .map(|k| a[r * size + k] * a[c * size + k])
                        .sum::<f64>()
                        / size as f64;
                    h[(offset + r, offset + c)] = (1.0 - params.rho) * v;
                }
            }
            offset += size;
        }
        let rank = params.coupling_rank.max(1);
        for _ in 0..rank {
            let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
            for r in 0..n {
                for c in r..n {
                    h[(r, c)] += params.rho * v[r] * v[c] / rank as f64;
                }
            }
        }
        let scale: Vec<f64> = sizes
            .iter()
            .zip(&importance)
            .flat_map(|(&s, &d)| std::iter::repeat_n(d.sqrt(), s))
            .collect();
        for r in 0..n {
            for c in r..n {
                let v = h[(r, c)] * scale[r] * scale[c];
                h[(r, c)] = v;
                h[(c, r)] = v;
            }
        }
        Self::new(layers, h, params.baseline)
    }

    pub fn hessian(&self) -> &Matrix {
        &self.hessian
    }

    /// Index range of layer `l` inside the concatenated weight vector.
    pub fn layer_range(&self, l: usize) -> std::ops::Range<usize> {
        self.offsets[l]..self.offsets[l + 1]
    }

    pub fn to_container(&self) -> Container {
        let meta = serde_json::json!({
            "baseline": self.baseline,
            "layers": self.layers.iter().map(|l| l.name()).collect::<Vec<_>>(),
        });
        let mut c = Container::new(KIND, meta);
        for l in &self.layers {
            c.push(Tensor::new(
                format!("optimum/{}", l.name()),
                vec![l.count()],
                DType::F64,
                l.weights().to_vec(),
            ));
        }
        let n = self.hessian.dim();
        c.push(Tensor::new(
            "hessian",
            vec![n, n],
            DType::F64,
            self.hessian.as_slice().to_vec(),
        ));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != KIND {
            return Err(Error::Format(format!(
                "expected a {KIND} container, got {:?}",
                c.kind
            )));
        }
        let baseline = c.meta["baseline"]
            .as_f64()
            .ok_or_else(|| Error::Format("meta.baseline missing".into()))?;
        let names = c.meta["layers"]
            .as_array()
            .ok_or_else(|| Error::Format("meta.layers missing".into()))?;
        let mut layers = Vec::with_capacity(names.len());
        for name in names {
            let name = name
                .as_str()
                .ok_or_else(|| Error::Format("layer names must be strings".into()))?;
            let t = c.tensor(&format!("optimum/{name}"))?;
            layers.push(LayerSpec::new(name, t.data.clone())?);
        }
        let h = c.tensor("hessian")?;
        let n = h.info.shape.first().copied().unwrap_or(0);
        if h.info.shape != [n, n] {
            return Err(Error::Format("hessian must be square".into()));
        }
        Self::new(layers, Matrix::from_row_major(n, h.data.clone())?, baseline)
    }
}

impl LossOracle for QuadraticOracle {
    fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn evaluate(&self, perturbations: &[Perturbation<'_>]) -> Result<f64> {
        check_perturbations(&self.layers, perturbations)?;
        let mut parts: Vec<Perturbation<'_>> = perturbations.to_vec();
        parts.sort_by_key(|&(l, _)| l);

        let mut acc = 0.0;
        for &(a, da) in &parts {
            let oa = self.offsets[a];
            for (r, &x) in da.iter().enumerate() {
                if x == 0.0 {
                    continue;
                }
                let row = self.hessian.row(oa + r);
                let mut inner = 0.0;
                for &(b, db) in &parts {
                    let ob = self.offsets[b];
                    inner += row[ob..ob + db.len()]
                        .iter()
                        .zip(db)
                        .map(|(h, y)| h * y)
                        .sum::<f64>();
                }
                acc += x * inner;
            }
        }
        Ok(self.baseline + 0.5 * acc)
    }
}
