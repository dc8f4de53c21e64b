use super::*;
use crate::spectra::eigh;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn menu(s: &str) -> BitMenu {
    BitMenu::parse(s).unwrap()
}

/// Two-width instance where only the low width carries sensitivity.
fn two_width_instance(low: u32, diag: &[f64], cross: &[(usize, usize, f64)]) -> Problem {
    let l = diag.len();
    let mut g = Matrix::zeros(2 * l);
    for (i, &d) in diag.iter().enumerate() {
        g[(2 * i, 2 * i)] = d;
    }
    for &(i, j, v) in cross {
        g[(2 * i, 2 * j)] = v;
        g[(2 * j, 2 * i)] = v;
    }
    Problem::new(g, vec![1; l], menu(&format!("{low},32"))).unwrap()
}

/// Layers 12, 19, 22, 23 at 2 bits.
fn resnet34_subset() -> Problem {
    two_width_instance(
        2,
        &[0.115, 0.140, 0.246, 0.148],
        &[(0, 1, 0.009), (2, 3, -0.070)],
    )
}

/// Layers 19, 24, 25 at 4 bits.
fn resnet50_subset() -> Problem {
    two_width_instance(4, &[0.016, 0.022, 0.026], &[(0, 1, 0.004), (0, 2, -0.001)])
}

fn random_psd_problem(rng: &mut ChaCha8Rng, layers: usize, widths: &[u32]) -> Problem {
    let nb = widths.len();
    let n = layers * nb;
    let rank = n.min(2 + rng.random_range(0..n));
    let mut g = Matrix::zeros(n);
    for _ in 0..rank {
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for r in 0..n {
            for c in 0..n {
                g[(r, c)] += v[r] * v[c];
            }
        }
    }
    let sizes = (0..layers).map(|_| rng.random_range(1..=20)).collect();
    Problem::new(g, sizes, BitMenu::new(widths.to_vec()).unwrap()).unwrap()
}

fn mid_budget(p: &Problem, rng: &mut ChaCha8Rng) -> SizeBudget {
    let (lo, hi) = (p.min_size_bits(), p.max_size_bits());
    SizeBudget::bits(lo + (rng.random::<f64>() * (hi - lo) as f64) as u64)
}

#[test]
fn objective_of_zero_matrix() {
    let p = Problem::new(Matrix::zeros(6), vec![3, 5], menu("2,4,8")).unwrap();
    for bits in [[2, 2], [4, 8], [8, 2]] {
        assert_eq!(
            objective(&p, &BitAssignment::new(bits.to_vec())).unwrap(),
            0.0
        );
    }
}

#[test]
fn objective_reproduces_worked_examples() {
    let p = resnet34_subset();
    let obj = |b: [u32; 4]| objective(&p, &BitAssignment::new(b.to_vec())).unwrap();
    assert_eq!(obj([2, 2, 32, 32]), 0.273);
    assert_eq!(obj([32, 32, 2, 2]), 0.254);

    let p = resnet50_subset();
    let obj = |b: [u32; 3]| objective(&p, &BitAssignment::new(b.to_vec())).unwrap();
    assert_eq!(obj([4, 4, 32]), 0.046);
    assert_eq!(obj([4, 32, 4]), 0.040);
}

#[test]
fn objective_rejects_foreign_assignments() {
    let p = resnet50_subset();
    assert!(objective(&p, &BitAssignment::new(vec![4, 4])).is_err());
    assert!(objective(&p, &BitAssignment::new(vec![4, 8, 4])).is_err());
}

#[test]
fn worked_examples_select_the_stated_pairs() {
    let opts = SolveOptions::default();
    // Equal sizes; the budget pays for two layers at the low width.
    let p = resnet34_subset();
    let budget = SizeBudget::bits(2 * 2 + 2 * 32);
    let clado = solve(&p, budget, &Method::Clado, &opts).unwrap();
    assert_eq!(clado.assignment.bits, [32, 32, 2, 2]);
    assert_eq!(clado.objective, 0.254);
    assert!(clado.optimal);
    assert_eq!(
        solve_exhaustive(&p, budget).unwrap().assignment,
        clado.assignment
    );
    let diag = solve_diagonal_only(&p, budget, &opts).unwrap();
    assert_eq!(diag.assignment.bits, [2, 2, 32, 32]);
    assert_eq!(objective(&p, &diag.assignment).unwrap(), 0.273);

    let p = resnet50_subset();
    let budget = SizeBudget::bits(2 * 4 + 32);
    let clado = solve(&p, budget, &Method::Clado, &opts).unwrap();
    assert_eq!(clado.assignment.bits, [4, 32, 4]);
    let diag = solve_diagonal_only(&p, budget, &opts).unwrap();
    assert_eq!(diag.assignment.bits, [4, 4, 32]);
    assert_eq!(objective(&p, &diag.assignment).unwrap(), 0.046);
}

#[test]
fn exhaustive_hand_example() {
    let g = Matrix::from_diagonal(&[4.0, 1.0, 9.0, 1.0]);
    let p = Problem::new(g, vec![1, 1], menu("2,4")).unwrap();
    let r = solve_exhaustive(&p, SizeBudget::bits(6)).unwrap();
    assert_eq!(r.assignment.bits, [2, 4]);
    assert_eq!(r.objective, 5.0);
    assert_eq!(r.size_bits, 6);
    assert_eq!(r.nodes, 4);
}

#[test]
fn exhaustive_tie_breaks_on_size_then_bits() {
    // All assignments have objective 0.
    let p = Problem::new(Matrix::zeros(4), vec![1, 1], menu("2,4")).unwrap();
    let r = solve_exhaustive(&p, SizeBudget::bits(100)).unwrap();
    assert_eq!(r.assignment.bits, [2, 2]);
    // Equal objective and size: lexicographically smaller wins.
    let g = Matrix::from_diagonal(&[1.0, 0.0, 1.0, 0.0]);
    let p = Problem::new(g, vec![1, 1], menu("2,4")).unwrap();
    let r = solve_exhaustive(&p, SizeBudget::bits(6)).unwrap();
    assert_eq!(r.assignment.bits, [2, 4]);
    assert_eq!(
        solve_bnb(&p, SizeBudget::bits(6), &SolveOptions::default())
            .unwrap()
            .assignment
            .bits,
        [2, 4]
    );
}

#[test]
fn errors() {
    let p = resnet34_subset();
    let e = solve_exhaustive(&p, SizeBudget::bits(7)).unwrap_err();
    assert!(matches!(
        e,
        Error::Infeasible {
            required: 8,
            limit: 7
        }
    ));
    assert!(matches!(
        solve_bnb(&p, SizeBudget::bits(7), &SolveOptions::default()),
        Err(Error::Infeasible { .. })
    ));
    let big = Problem::new(Matrix::zeros(30), vec![1; 15], menu("2,4")).unwrap();
    assert!(solve_exhaustive(&big, SizeBudget::bits(100)).is_ok());
    let big = Problem::new(Matrix::zeros(72), vec![1; 24], menu("2,4,8")).unwrap();
    assert!(matches!(
        solve_exhaustive(&big, SizeBudget::bits(1000)),
        Err(Error::TooLarge { .. })
    ));
    assert!(Problem::new(Matrix::zeros(5), vec![1, 1], menu("2,4")).is_err());
    let mut asym = Matrix::zeros(4);
    asym[(0, 1)] = 1.0;
    assert!(matches!(
        Problem::new(asym, vec![1, 1], menu("2,4")),
        Err(Error::NotSymmetric { .. })
    ));
}

#[test]
fn unconstrained_budget_is_tight_at_root() {
    // Sensitivity only at the low widths; the top width is free of loss.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let layers = 5;
    let widths = [2u32, 4, 8];
    let nb = widths.len();
    let mut g = Matrix::zeros(layers * nb);
    let low: Vec<usize> = (0..layers).flat_map(|l| [l * nb, l * nb + 1]).collect();
    for _ in 0..4 {
        let v: Vec<f64> = low
            .iter()
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        for (a, &p) in low.iter().enumerate() {
            for (b, &q) in low.iter().enumerate() {
                g[(p, q)] += v[a] * v[b];
            }
        }
    }
    let p = Problem::new(
        g,
        vec![3, 7, 2, 9, 4],
        BitMenu::new(widths.to_vec()).unwrap(),
    )
    .unwrap();
    let budget = SizeBudget::bits(p.max_size_bits());
    let r = solve_bnb(&p, budget, &SolveOptions::default()).unwrap();
    assert_eq!(r.assignment.bits, [8; 5]);
    assert_eq!(r.objective, 0.0);
    assert!(r.optimal);
    assert_eq!(r.nodes, 1);
    assert!(
        relaxation_bound(&p, budget, &SolveOptions::default())
            .unwrap()
            .abs()
            < 1e-12
    );
}

/// Exact integer DP over layers for a separable objective.
fn dp_separable(p: &Problem, budget: SizeBudget) -> f64 {
    let limit = budget.limit_bits as usize;
    let nb = p.menu().len();
    let mut best = vec![f64::INFINITY; limit + 1];
    best[0] = 0.0;
    for l in 0..p.num_layers() {
        let mut next = vec![f64::INFINITY; limit + 1];
        for (c, &v) in best.iter().enumerate() {
            if v.is_infinite() {
                continue;
            }
            for m in 0..nb {
                let nc = c + p.cost(l, m) as usize;
                let k = p.index(l, m);
                if nc <= limit {
                    next[nc] = next[nc].min(v + p.matrix()[(k, k)]);
                }
            }
        }
        best = next;
    }
    best.into_iter().fold(f64::INFINITY, f64::min)
}

#[test]
fn diagonal_instances_match_dynamic_programming() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..40 {
        let layers = rng.random_range(2..=9);
        let p = random_psd_problem(&mut rng, layers, &[2, 4, 8]).without_cross_layer();
        let budget = mid_budget(&p, &mut rng);
        let r = solve_bnb(&p, budget, &SolveOptions::default()).unwrap();
        let expected = dp_separable(&p, budget);
        assert!(
            (r.objective - expected).abs() <= 1e-12 * expected.abs().max(1.0),
            "{} vs {expected}",
            r.objective
        );
        assert!(r.optimal);
        assert!(r.size_bits <= budget.limit_bits);
    }
}

#[test]
fn bnb_matches_exhaustive() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..60 {
        let widths: &[u32] = if case % 2 == 0 {
            &[2, 4, 8]
        } else {
            &[2, 3, 4, 6]
        };
        let layers = rng.random_range(1..=7);
        let p = random_psd_problem(&mut rng, layers, widths);
        let budget = mid_budget(&p, &mut rng);
        let exact = solve_exhaustive(&p, budget).unwrap();
        let r = solve_bnb(&p, budget, &SolveOptions::default()).unwrap();
        assert_eq!(r.objective, exact.objective, "case {case}");
        assert!(r.optimal);
        assert!(r.size_bits <= budget.limit_bits);
        assert_eq!(r.objective, objective(&p, &r.assignment).unwrap());
        assert_eq!(r.size_bits, p.size_bits(&r.assignment).unwrap());
    }
}

#[test]
fn root_relaxation_is_a_lower_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..30 {
        let layers = rng.random_range(2..=6);
        let p = random_psd_problem(&mut rng, layers, &[2, 4, 8]);
        let budget = mid_budget(&p, &mut rng);
        let bound = relaxation_bound(&p, budget, &SolveOptions::default()).unwrap();
        let exact = solve_exhaustive(&p, budget).unwrap().objective;
        assert!(
            bound <= exact + 1e-12 * exact.abs().max(1.0),
            "{bound} > {exact}"
        );
    }
}

#[test]
fn indefinite_matrix_is_flagged() {
    let mut g = Matrix::from_diagonal(&[1.0, 0.0, 1.0, 0.0]);
    g[(0, 2)] = -3.0;
    g[(2, 0)] = -3.0;
    let p = Problem::new(g, vec![1, 1], menu("2,4")).unwrap();
    assert!(eigh(p.matrix()).unwrap().min_value() < 0.0);
    let r = solve_bnb(&p, SizeBudget::bits(8), &SolveOptions::default()).unwrap();
    assert!(r.psd_warning);
    assert!(!r.optimal);
    assert_eq!(r.assignment.bits, [2, 2]);
    assert_eq!(r.objective, -4.0);
}

#[test]
fn node_limit_returns_feasible_incumbent() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let p = random_psd_problem(&mut rng, 10, &[2, 3, 4, 5, 6, 8]);
    let budget = mid_budget(&p, &mut rng);
    let opts = SolveOptions {
        node_limit: 1,
        ..SolveOptions::default()
    };
    let r = solve_bnb(&p, budget, &opts).unwrap();
    assert!(r.size_bits <= budget.limit_bits);
    if r.termination != Termination::Complete {
        assert!(!r.optimal);
        assert_eq!(r.termination, Termination::NodeLimit);
    }
}

#[test]
fn block_partitions() {
    assert_eq!(
        BlockPartition::parse("0-1,2-3", 4).unwrap(),
        BlockPartition::contiguous(4, 2)
    );
    assert_eq!(
        BlockPartition::parse("0,1,2", 3).unwrap(),
        BlockPartition::singletons(3)
    );
    assert_eq!(
        BlockPartition::parse("0-2", 3).unwrap(),
        BlockPartition::single(3)
    );
    for bad in ["0-1", "0-1,1-2", "0-3", "1-0,2", "a-1,2", "0-1,,2"] {
        assert!(BlockPartition::parse(bad, 3).is_err(), "{bad}");
    }
    let p = resnet34_subset();
    assert!(p.restricted_to_blocks(&BlockPartition::single(3)).is_err());
}

#[test]
fn degenerate_partitions_match_other_methods() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let opts = SolveOptions::default();
    for _ in 0..10 {
        let p = random_psd_problem(&mut rng, 5, &[2, 4, 8]);
        let budget = mid_budget(&p, &mut rng);
        let l = p.num_layers();
        let a = solve_block(&p, budget, &BlockPartition::singletons(l), &opts).unwrap();
        let b = solve_diagonal_only(&p, budget, &opts).unwrap();
        assert_eq!((a.assignment, a.objective), (b.assignment, b.objective));
        let a = solve_block(&p, budget, &BlockPartition::single(l), &opts).unwrap();
        let b = solve_bnb(&p, budget, &opts).unwrap();
        assert_eq!((a.assignment, a.objective), (b.assignment, b.objective));
    }
    // Already separable: diagonal-only changes nothing.
    let p = random_psd_problem(&mut rng, 4, &[2, 4]).without_cross_layer();
    let budget = mid_budget(&p, &mut rng);
    let a = solve_diagonal_only(&p, budget, &opts).unwrap();
    let b = solve_bnb(&p, budget, &opts).unwrap();
    assert_eq!((a.assignment, a.objective), (b.assignment, b.objective));
}

#[test]
fn sweep_behaviour() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let p = random_psd_problem(&mut rng, 6, &[2, 4, 8]);
    let opts = SolveOptions::default();
    let (lo, hi) = (p.min_size_bits(), p.max_size_bits());
    let budgets: Vec<SizeBudget> = (0..8)
        .map(|k| SizeBudget::bits(lo + (hi - lo) * k / 7))
        .collect();
    let reports = sweep(&p, &budgets, &Method::Clado, &opts).unwrap();
    let objs: Vec<f64> = reports
        .iter()
        .map(|r| r.as_ref().unwrap().objective)
        .collect();
    assert!(objs.windows(2).all(|w| w[1] <= w[0]), "{objs:?}");
    assert!(objs[7] <= objs[0]);

    let same = sweep(&p, &[budgets[3], budgets[3]], &Method::Clado, &opts).unwrap();
    let (a, b) = (same[0].as_ref().unwrap(), same[1].as_ref().unwrap());
    assert_eq!(
        (&a.assignment, a.objective, a.nodes),
        (&b.assignment, b.objective, b.nodes)
    );

    let mixed = sweep(
        &p,
        &[SizeBudget::bits(lo - 1), budgets[2]],
        &Method::Diagonal,
        &opts,
    )
    .unwrap();
    assert!(matches!(mixed[0], Err(Error::Infeasible { .. })));
    assert_eq!(mixed[1].as_ref().unwrap().method, "diag");

    assert!(sweep(&p, &[budgets[2], budgets[1]], &Method::Clado, &opts).is_err());
}

#[test]
fn budget_conversion() {
    assert_eq!(
        SizeBudget::from_megabytes(1.0).unwrap().limit_bits,
        8 * 1048576
    );
    assert_eq!(SizeBudget::from_megabytes(0.5).unwrap().megabytes(), 0.5);
    assert!(SizeBudget::from_megabytes(-1.0).is_err());
    assert!(SizeBudget::from_megabytes(f64::NAN).is_err());
}

#[test]
fn assignment_parsing() {
    assert_eq!(BitAssignment::parse("2,4, 8").unwrap().bits, [2, 4, 8]);
    assert_eq!(BitAssignment::new(vec![2, 4]).to_string(), "2 4");
    assert!(BitAssignment::parse("").is_err());
    assert!(BitAssignment::parse("2,x").is_err());
}
