use std::cmp::Ordering;
use std::time::Instant;

use super::relaxation::relax;
use super::{compare_candidates, Problem, SizeBudget, SolveOptions, SolveReport, Termination};
use crate::error::Result;
use crate::spectra;

/// Matrices whose smallest eigenvalue is below `-PSD_TOLERANCE * ||G||_2`
/// are treated as indefinite.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// Frank-Wolfe iterations spent on a node that cannot be pruned before
/// branching on its current point.
const BRANCH_AFTER: usize = 100;

const LOCAL_SEARCH_PASSES: usize = 1000;

struct Node {
    fixed: Vec<Option<usize>>,
    lower_bound: f64,
    x: Vec<f64>,
}

struct Search<'a> {
    p: &'a Problem,
    budget: SizeBudget,
    scale: f64,
    gap_tolerance: f64,
    best: (f64, u64, Vec<usize>),
}

impl Search<'_> {
    fn offer(&mut self, choices: Vec<usize>) {
        let size = self.p.size_of_choices(&choices);
        if size > self.budget.limit_bits {
            return;
        }
        let obj = self.p.objective_of_choices(&choices);
        let (bo, bs, bc) = &self.best;
        if compare_candidates((obj, size, &choices), (*bo, *bs, bc)) == Ordering::Less {
            self.best = (obj, size, choices);
        }
    }

    /// Bounds at or above this cannot lead to a better assignment.
    fn cutoff(&self) -> f64 {
        let inc = self.best.0;
        inc - self.gap_tolerance * inc.abs().max(self.scale)
    }

    fn round(&self, x: &[f64], fixed: &[Option<usize>]) -> Vec<usize> {
        let nb = self.p.menu().len();
        fixed
            .iter()
            .enumerate()
            .map(|(l, f)| {
                f.unwrap_or_else(|| {
                    let w = &x[l * nb..(l + 1) * nb];
                    (1..nb).fold(0, |best, m| if w[m] > w[best] { m } else { best })
                })
            })
            .collect()
    }

    /// Moves layers to cheaper widths until the budget holds, each time
    /// taking the move with the least objective increase per bit saved.
    fn repair(&self, mut choices: Vec<usize>) -> Vec<usize> {
        let p = self.p;
        let mut size = p.size_of_choices(&choices);
        let mut obj = p.objective_of_choices(&choices);
        while size > self.budget.limit_bits {
            let mut best: Option<(f64, usize, usize, f64)> = None;
            for l in 0..p.num_layers() {
                let cur = choices[l];
                for m in 0..cur {
                    let saved = (p.cost(l, cur) - p.cost(l, m)) as f64;
                    if saved <= 0.0 {
                        continue;
                    }
                    choices[l] = m;
                    let cand = p.objective_of_choices(&choices);
                    choices[l] = cur;
                    let ratio = (cand - obj) / saved;
                    if best.is_none_or(|b| ratio < b.0) {
                        best = Some((ratio, l, m, cand));
                    }
                }
            }
            let Some((_, l, m, cand)) = best else {
                break;
            };
            size -= p.cost(l, choices[l]) - p.cost(l, m);
            choices[l] = m;
            obj = cand;
        }
        choices
    }

    /// Best-improvement search over single-layer changes.
    fn local_search(&self, mut choices: Vec<usize>) -> Vec<usize> {
        let p = self.p;
        let nb = p.menu().len();
        let mut obj = p.objective_of_choices(&choices);
        let mut size = p.size_of_choices(&choices);
        for _ in 0..LOCAL_SEARCH_PASSES {
            let mut best: Option<(f64, u64, Vec<usize>)> = None;
            for l in 0..p.num_layers() {
                for m in 0..nb {
                    if m == choices[l] {
                        continue;
                    }
                    let mut cand = choices.clone();
                    cand[l] = m;
                    let cs = p.size_of_choices(&cand);
                    if cs > self.budget.limit_bits {
                        continue;
                    }
                    let co = p.objective_of_choices(&cand);
                    let (ro, rs, rc) = best
                        .as_ref()
                        .map_or((obj, size, &choices), |b| (b.0, b.1, &b.2));
                    if compare_candidates((co, cs, &cand), (ro, rs, rc)) == Ordering::Less {
                        best = Some((co, cs, cand));
                    }
                }
            }
            match best {
                Some((o, s, c)) => {
                    obj = o;
                    size = s;
                    choices = c;
                }
                None => break,
            }
        }
        choices
    }

    fn improve(&mut self, x: &[f64], fixed: &[Option<usize>]) {
        let rounded = self.round(x, fixed);
        let repaired = self.repair(rounded);
        let polished = self.local_search(repaired);
        self.offer(polished);
    }
}

fn branch_layer(node: &Node, nb: usize) -> usize {
    let mut best = (f64::NEG_INFINITY, 0);
    for (l, f) in node.fixed.iter().enumerate() {
        if f.is_some() {
            continue;
        }
        let w = &node.x[l * nb..(l + 1) * nb];
        let frac = 1.0 - w.iter().cloned().fold(0.0, f64::max);
        if frac > best.0 {
            best = (frac, l);
        }
    }
    best.1
}

/// Branch-and-bound on the integer quadratic program.
///
/// Bounds come from the Frank-Wolfe relaxation; nodes are explored depth
/// first, with the child of lowest bound taken first. The optimality flag is
/// set only if the search finishes within the limits on a PSD matrix.
pub fn solve_bnb(
    problem: &Problem,
    budget: SizeBudget,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    problem.check_feasible(budget)?;
    let started = Instant::now();
    let eig = spectra::eigh(problem.matrix())?;
    let psd_warning = eig.min_value() < -PSD_TOLERANCE * eig.spectral_norm();

    let layers = problem.num_layers();
    let nb = problem.menu().len();
    let cheapest = vec![0usize; layers];
    let mut search = Search {
        p: problem,
        budget,
        scale: problem.matrix().max_abs(),
        gap_tolerance: opts.gap_tolerance,
        best: (
            problem.objective_of_choices(&cheapest),
            problem.size_of_choices(&cheapest),
            cheapest.clone(),
        ),
    };
    let start = search.local_search(cheapest);
    search.offer(start);

    let mut nodes = 1u64;
    let mut iterations = 0u64;
    let mut stack: Vec<Node> = Vec::new();
    let root_fixed = vec![None; layers];
    let root = relax(
        problem,
        &root_fixed,
        budget,
        opts,
        search.cutoff(),
        BRANCH_AFTER,
        search.scale,
    )
    .expect("feasibility was checked");
    iterations += root.iterations;
    search.improve(&root.x, &root_fixed);
    if root.lower_bound < search.cutoff() {
        stack.push(Node {
            fixed: root_fixed,
            lower_bound: root.lower_bound,
            x: root.x,
        });
    }

    let mut termination = Termination::Complete;
    while let Some(node) = stack.pop() {
        if node.lower_bound >= search.cutoff() {
            continue;
        }
        if nodes >= opts.node_limit {
            termination = Termination::NodeLimit;
            break;
        }
        if opts.time_limit.is_some_and(|t| started.elapsed() >= t) {
            termination = Termination::TimeLimit;
            break;
        }
        let l = branch_layer(&node, nb);
        let mut children = Vec::new();
        for m in 0..nb {
            let mut fixed = node.fixed.clone();
            fixed[l] = Some(m);
            nodes += 1;
            if fixed.iter().all(Option::is_some) {
                search.offer(fixed.iter().map(|f| f.unwrap()).collect());
                continue;
            }
            let Some(r) = relax(
                problem,
                &fixed,
                budget,
                opts,
                search.cutoff(),
                BRANCH_AFTER,
                search.scale,
            ) else {
                continue;
            };
            iterations += r.iterations;
            search.improve(&r.x, &fixed);
            if r.lower_bound < search.cutoff() {
                children.push(Node {
                    fixed,
                    lower_bound: r.lower_bound,
                    x: r.x,
                });
            }
        }
        children.sort_by(|a, b| b.lower_bound.total_cmp(&a.lower_bound));
        stack.extend(children);
    }

    let (objective, size_bits, choices) = search.best;
    Ok(SolveReport {
        assignment: problem.assignment(&choices),
        objective,
        size_bits,
        method: "clado".into(),
        optimal: termination == Termination::Complete && !psd_warning,
        termination,
        psd_warning,
        nodes,
        iterations,
        elapsed: started.elapsed(),
    })
}
