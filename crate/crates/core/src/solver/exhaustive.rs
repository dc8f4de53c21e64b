use std::cmp::Ordering;
use std::time::Instant;

use super::{compare_candidates, Problem, SizeBudget, SolveReport, Termination};
use crate::error::{Error, Result};

/// Largest `|menu|^L` that [`solve_exhaustive`] will enumerate.
pub const MAX_EXHAUSTIVE_SPACE: f64 = 1e7;

/// Enumerates every assignment. Ties are broken by size, then by the
/// lexicographically smaller bit vector.
pub fn solve_exhaustive(problem: &Problem, budget: SizeBudget) -> Result<SolveReport> {
    let layers = problem.num_layers();
    let nb = problem.menu().len();
    let space = (nb as f64).powi(layers as i32);
    if space > MAX_EXHAUSTIVE_SPACE {
        return Err(Error::TooLarge {
            size: space,
            limit: MAX_EXHAUSTIVE_SPACE,
        });
    }
    problem.check_feasible(budget)?;
    let started = Instant::now();

    let mut choices = vec![0usize; layers];
    let mut best: Option<(f64, u64, Vec<usize>)> = None;
    let mut visited = 0u64;
    loop {
        visited += 1;
        let size = problem.size_of_choices(&choices);
        if size <= budget.limit_bits {
            let obj = problem.objective_of_choices(&choices);
            let better = match &best {
                None => true,
                Some((bo, bs, bc)) => {
                    compare_candidates((obj, size, &choices), (*bo, *bs, bc)) == Ordering::Less
                }
            };
            if better {
                best = Some((obj, size, choices.clone()));
            }
        }
        // Odometer over choice indices, last layer fastest.
        let mut l = layers;
        loop {
            if l == 0 {
                let (objective, size_bits, choices) = best.expect("feasibility was checked");
                return Ok(SolveReport {
                    assignment: problem.assignment(&choices),
                    objective,
                    size_bits,
                    method: "exhaustive".into(),
                    optimal: true,
                    termination: Termination::Complete,
                    psd_warning: false,
                    nodes: visited,
                    iterations: 0,
                    elapsed: started.elapsed(),
                });
            }
            l -= 1;
            choices[l] += 1;
            if choices[l] < nb {
                break;
            }
            choices[l] = 0;
        }
    }
}
