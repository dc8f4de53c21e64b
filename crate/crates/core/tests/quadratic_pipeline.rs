use mpq_core::linalg::dot;
use mpq_core::oracles::{LossOracle, MatrixBackedOracle, QuadraticOracle, QuadraticParams};
use mpq_core::sensitivity::{
    build_matrix, build_matrix_with, cache, BitMenu, BuildOptions, SameLayerCrossBits,
};
use mpq_core::solver::{solve, BitAssignment, Method, Problem, SizeBudget, SolveOptions};
use mpq_core::spectra::eigh;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn menu() -> BitMenu {
    BitMenu::parse("2,4,8").unwrap()
}

/// `Δ_i^T H_ij Δ_j` straight from the Hessian blocks.
fn bilinear(o: &QuadraticOracle, i: usize, di: &[f64], j: usize, dj: &[f64]) -> f64 {
    let h = o.hessian();
    let (ri, rj) = (o.layer_range(i), o.layer_range(j));
    let mut acc = 0.0;
    for (a, r) in ri.enumerate() {
        for (b, c) in rj.clone().enumerate() {
            acc += di[a] * h[(r, c)] * dj[b];
        }
    }
    acc
}

fn true_loss_increase(o: &QuadraticOracle, a: &BitAssignment) -> f64 {
    let deltas: Vec<Vec<f64>> = a
        .bits
        .iter()
        .enumerate()
        .map(|(l, &b)| o.perturbation(l, b).unwrap())
        .collect();
    let pert: Vec<(usize, &[f64])> = deltas
        .iter()
        .enumerate()
        .map(|(l, d)| (l, d.as_slice()))
        .collect();
    o.evaluate(&pert).unwrap() - o.baseline_loss().unwrap()
}

#[test]
fn entries_match_hessian_blocks() {
    for seed in 0..4 {
        let params = QuadraticParams {
            layers: 3 + seed as usize,
            baseline: 0.7,
            ..QuadraticParams::default()
        };
        let o = QuadraticOracle::generate(&params, seed).unwrap();
        let g = build_matrix_with(
            &o,
            &menu(),
            BuildOptions {
                same_layer: SameLayerCrossBits::Measured,
            },
        )
        .unwrap();
        let nb = menu().len();
        for p in 0..g.entries().dim() {
            for q in 0..g.entries().dim() {
                let (i, m, j, n) = (p / nb, p % nb, q / nb, q % nb);
                let di = o.perturbation(i, menu().bits()[m]).unwrap();
                let dj = o.perturbation(j, menu().bits()[n]).unwrap();
                let expected = bilinear(&o, i, &di, j, &dj);
                let got = g.entries()[(p, q)];
                assert!(
                    (got - expected).abs() <= 1e-9 * expected.abs().max(1e-12),
                    "seed {seed} ({p},{q}): {got} vs {expected}"
                );
            }
        }
    }
}

#[test]
fn measured_matrix_is_the_hessian_in_perturbation_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for seed in 0..3 {
        let o = QuadraticOracle::generate(&QuadraticParams::default(), 100 + seed).unwrap();
        let g = build_matrix_with(
            &o,
            &menu(),
            BuildOptions {
                same_layer: SameLayerCrossBits::Measured,
            },
        )
        .unwrap();
        let nb = menu().len();
        let deltas: Vec<Vec<Vec<f64>>> = (0..o.layers().len())
            .map(|l| {
                menu()
                    .bits()
                    .iter()
                    .map(|&b| o.perturbation(l, b).unwrap())
                    .collect()
            })
            .collect();
        for _ in 0..200 {
            let v: Vec<f64> = (0..g.entries().dim())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect();
            // u_l = sum_m v_{l,m} Δ_l(m)
            let mut u = Vec::new();
            for (l, per) in deltas.iter().enumerate() {
                let mut ul = vec![0.0; per[0].len()];
                for (m, d) in per.iter().enumerate() {
                    for (x, y) in ul.iter_mut().zip(d) {
                        *x += v[l * nb + m] * y;
                    }
                }
                u.extend(ul);
            }
            let uhu = dot(&u, &o.hessian().mul_vec(&u));
            let vgv = g.entries().quadratic_form(&v);
            assert!(
                (vgv - uhu).abs() <= 1e-9 * uhu.abs().max(1e-12),
                "{vgv} vs {uhu}"
            );
        }
        assert!(eigh(g.entries()).unwrap().min_value() >= -1e-10);
    }
}

#[test]
fn proxy_equals_true_loss_for_one_hot_selections() {
    let o = QuadraticOracle::generate(&QuadraticParams::default(), 9).unwrap();
    let g = build_matrix(&o, &menu()).unwrap();
    let p = Problem::from_sensitivity(&g);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let a = BitAssignment::new(
            (0..4)
                .map(|_| menu().bits()[rng.random_range(0..3)])
                .collect(),
        );
        let proxy = 0.5 * mpq_core::solver::objective(&p, &a).unwrap();
        let truth = true_loss_increase(&o, &a);
        assert!(
            (proxy - truth).abs() <= 1e-9 * truth.abs(),
            "{proxy} vs {truth}"
        );
    }
}

#[test]
fn dependency_aware_solve_never_loses_to_diagonal_on_strong_coupling() {
    let opts = SolveOptions::default();
    for seed in 0..8 {
        let params = QuadraticParams {
            layers: 6,
            rho: 0.9,
            ..QuadraticParams::default()
        };
        let o = QuadraticOracle::generate(&params, 500 + seed).unwrap();
        let g = build_matrix_with(
            &o,
            &menu(),
            BuildOptions {
                same_layer: SameLayerCrossBits::Measured,
            },
        )
        .unwrap();
        let p = Problem::from_sensitivity(&g);
        let budget = SizeBudget::bits((p.min_size_bits() + p.max_size_bits()) / 3);
        let full = solve(&p.psd_projected().unwrap(), budget, &Method::Clado, &opts).unwrap();
        let diag_problem = p.without_cross_layer().psd_projected().unwrap();
        let diag = solve(&diag_problem, budget, &Method::Diagonal, &opts).unwrap();
        let (tf, td) = (
            true_loss_increase(&o, &full.assignment),
            true_loss_increase(&o, &diag.assignment),
        );
        assert!(
            td >= tf - 1e-12 * tf.abs(),
            "seed {seed}: diag {td} < clado {tf}"
        );
    }
}

#[test]
fn cache_round_trip_and_replay() {
    let o = QuadraticOracle::generate(&QuadraticParams::default(), 21).unwrap();
    let g = build_matrix(&o, &menu()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    cache::write_file(dir.path().join(cache::batch_file_name(0)), &g).unwrap();
    let loaded = cache::load_merged(dir.path()).unwrap();
    assert_eq!(loaded, g);

    let replay = MatrixBackedOracle::new(loaded).unwrap();
    let rebuilt = build_matrix(&replay, &menu()).unwrap();
    let diff = rebuilt.entries().sub(g.entries());
    assert!(diff.max_abs() <= 1e-15 * g.entries().max_abs());
}
