use super::{check_perturbations, LossOracle, Perturbation};
use crate::error::{Error, Result};
use crate::quantizer::LayerSpec;
use crate::sensitivity::SensitivityMatrix;

/// Replays a stored sensitivity matrix as a loss oracle.
///
/// Perturbations are synthetic tags rather than quantization errors: the
/// perturbation of layer `l` at menu position `m` has `2^m` in its first
/// element and zeros elsewhere. The loss of a set of tagged layers is
/// `1/2 a^T G a` for the implied one-hot selection `a`, with a baseline of 0,
/// so layer-specific sensitivities come back exactly and cross-layer ones up
/// to round-off in the final subtraction.
#[derive(Debug, Clone)]
pub struct MatrixBackedOracle {
    matrix: SensitivityMatrix,
    layers: Vec<LayerSpec>,
}

impl MatrixBackedOracle {
    pub fn new(matrix: SensitivityMatrix) -> Result<Self> {
        let layers = matrix
            .layer_sizes()
            .iter()
            .enumerate()
            .map(|(i, &n)| LayerSpec::new(format!("layer{i}"), vec![0.0; n]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { matrix, layers })
    }

    pub fn matrix(&self) -> &SensitivityMatrix {
        &self.matrix
    }

    fn decode(&self, layer: usize, delta: &[f64]) -> Result<usize> {
        let tag = delta[0];
        let nb = self.matrix.menu().len();
        let choice = (0..nb).find(|&m| (1u64 << m) as f64 == tag);
        match choice {
            Some(m) if delta[1..].iter().all(|&d| d == 0.0) => Ok(m),
            _ => Err(Error::InvalidArgument(format!(
                "layer {layer}: matrix-backed oracle only accepts its own single-width perturbations"
            ))),
        }
    }
}

impl LossOracle for MatrixBackedOracle {
    fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    fn evaluate(&self, perturbations: &[Perturbation<'_>]) -> Result<f64> {
        check_perturbations(&self.layers, perturbations)?;
        let mut selected = perturbations
            .iter()
            .map(|&(l, d)| Ok(self.matrix.index(l, self.decode(l, d)?)))
            .collect::<Result<Vec<_>>>()?;
        selected.sort_unstable();
        let g = self.matrix.entries();
        let mut acc = 0.0;
        for (k, &p) in selected.iter().enumerate() {
            acc += g[(p, p)];
            for &q in &selected[k + 1..] {
                acc += 2.0 * g[(p, q)];
            }
        }
        Ok(0.5 * acc)
    }

    fn perturbation(&self, layer: usize, bits: u32) -> Result<Vec<f64>> {
        let spec = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("layer index {layer} out of range")))?;
        let m = self.matrix.menu().index_of(bits).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "{bits} bits is not in the menu {}",
                self.matrix.menu()
            ))
        })?;
        let mut d = vec![0.0; spec.count()];
        d[0] = (1u64 << m) as f64;
        Ok(d)
    }

    fn sample_count(&self) -> u64 {
        self.matrix.sample_count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::sensitivity::{build_matrix, BitMenu, SameLayerCrossBits};

    fn stored() -> SensitivityMatrix {
        let menu = BitMenu::parse("2,4").unwrap();
        let mut g = Matrix::zeros(6);
        let d = [0.4, 0.1, 0.3, 0.05, 0.7, 0.2];
        for (p, &v) in d.iter().enumerate() {
            g[(p, p)] = v;
        }
        for &(p, q, v) in &[(0, 2, 0.01), (0, 5, -0.03), (1, 4, 0.02), (3, 4, -0.005)] {
            g[(p, q)] = v;
            g[(q, p)] = v;
        }
        SensitivityMatrix::new(menu, vec![2, 1, 3], g, 10, SameLayerCrossBits::Zero).unwrap()
    }

    #[test]
    fn baseline_is_zero() {
        let o = MatrixBackedOracle::new(stored()).unwrap();
        assert_eq!(o.baseline_loss().unwrap(), 0.0);
    }

    #[test]
    fn rebuild_reproduces_stored_entries() {
        let g = stored();
        let o = MatrixBackedOracle::new(g.clone()).unwrap();
        let rebuilt = build_matrix(&o, g.menu()).unwrap();
        let n = g.entries().dim();
        for p in 0..n {
            assert_eq!(rebuilt.entries()[(p, p)], g.entries()[(p, p)]);
            for q in 0..n {
                assert!((rebuilt.entries()[(p, q)] - g.entries()[(p, q)]).abs() < 1e-16);
            }
        }
        assert_eq!(rebuilt.sample_count(), 10);
    }

    #[test]
    fn rejects_foreign_perturbations() {
        let o = MatrixBackedOracle::new(stored()).unwrap();
        assert!(o.evaluate(&[(0, &[0.5, 0.0])]).is_err());
        assert!(o.evaluate(&[(0, &[3.0, 0.0])]).is_err());
        assert!(o.perturbation(0, 8).is_err());
    }
}
