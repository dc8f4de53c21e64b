//! Continuous relaxation: minimize `x^T G x` over the product of per-layer
//! simplices intersected with the budget half-space, by Frank-Wolfe with
//! exact line search.
//!
//! The linear subproblem is a multiple-choice knapsack LP. Per layer, only the
//! lower convex hull of the (cost, gradient) points matters; starting every
//! layer at its cheapest option and taking hull segments in order of gradient
//! decrease per bit until the budget runs out solves it exactly, with at most
//! one layer split between two options.

use super::{Problem, SizeBudget, SolveOptions};
use crate::error::Result;

pub(crate) struct Relaxation {
    /// Dense point, `|menu| * L` entries.
    pub x: Vec<f64>,
    /// Best `f - gap` seen; a valid lower bound when `G` is PSD.
    pub lower_bound: f64,
    pub iterations: u64,
}

struct Segment {
    layer: usize,
    to: usize,
    dc: f64,
    dg: f64,
}

/// Greedy LMO. Writes `(index, weight)` pairs, fixed layers included, into
/// `out`; returns false when even the cheapest completion exceeds the budget.
fn linear_minimizer(
    p: &Problem,
    grad: &[f64],
    fixed: &[Option<usize>],
    limit: f64,
    out: &mut Vec<(usize, f64)>,
) -> bool {
    out.clear();
    let nb = p.menu().len();
    let mut remaining = limit;
    let mut segments: Vec<Segment> = Vec::new();
    let mut start = vec![0usize; p.num_layers()];
    for (l, f) in fixed.iter().enumerate() {
        if let Some(m) = *f {
            remaining -= p.cost(l, m) as f64;
            start[l] = m;
            continue;
        }
        let g = &grad[l * nb..(l + 1) * nb];
        if p.layer_sizes()[l] == 0 {
            // Every option is free; take the smallest gradient.
            let mut best = 0;
            for m in 1..nb {
                if g[m] < g[best] {
                    best = m;
                }
            }
            start[l] = best;
            continue;
        }
        remaining -= p.cost(l, 0) as f64;
        // Lower hull from the cheapest option, keeping only descending parts.
        let mut hull: Vec<usize> = Vec::with_capacity(nb);
        for m in 0..nb {
            while hull.len() >= 2 {
                let (a, b) = (hull[hull.len() - 2], hull[hull.len() - 1]);
                let (ca, cb, cm) = (
                    p.cost(l, a) as f64,
                    p.cost(l, b) as f64,
                    p.cost(l, m) as f64,
                );
                let cross = (cb - ca) * (g[m] - g[a]) - (g[b] - g[a]) * (cm - ca);
                if cross <= 0.0 {
                    hull.pop();
                } else {
                    break;
                }
            }
            hull.push(m);
        }
        let descending = 1 + hull.windows(2).take_while(|w| g[w[1]] < g[w[0]]).count();
        hull.truncate(descending);
        for w in hull.windows(2) {
            segments.push(Segment {
                layer: l,
                to: w[1],
                dc: (p.cost(l, w[1]) - p.cost(l, w[0])) as f64,
                dg: g[w[1]] - g[w[0]],
            });
        }
    }
    if remaining < 0.0 {
        return false;
    }

    // Steepest descent per bit first; ties by layer, then hull order.
    let mut order: Vec<usize> = (0..segments.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&segments[a], &segments[b]);
        (sa.dg / sa.dc).total_cmp(&(sb.dg / sb.dc)).then(a.cmp(&b))
    });
    let mut split: Option<(usize, usize, f64)> = None;
    for k in order {
        let s = &segments[k];
        if s.dc <= remaining {
            remaining -= s.dc;
            start[s.layer] = s.to;
        } else {
            if remaining > 0.0 {
                split = Some((s.layer, s.to, remaining / s.dc));
            }
            break;
        }
    }
    for (l, &m) in start.iter().enumerate() {
        match split {
            Some((sl, to, t)) if sl == l => {
                out.push((l * nb + m, 1.0 - t));
                out.push((l * nb + to, t));
            }
            _ => out.push((l * nb + m, 1.0)),
        }
    }
    true
}

/// Solves the node relaxation with layers in `fixed` pinned. Stops early once
/// the bound reaches `cutoff`, or once the value is below `cutoff` and
/// `branch_after` iterations have run (the node will be branched anyway).
/// Returns `None` for an infeasible node.
pub(crate) fn relax(
    p: &Problem,
    fixed: &[Option<usize>],
    budget: SizeBudget,
    opts: &SolveOptions,
    cutoff: f64,
    branch_after: usize,
    gap_scale: f64,
) -> Option<Relaxation> {
    let n = p.matrix().dim();
    let g = p.matrix();
    let limit = budget.limit_bits as f64;

    let diag: Vec<f64> = (0..n).map(|k| g[(k, k)]).collect();
    let mut s: Vec<(usize, f64)> = Vec::with_capacity(p.num_layers() + 1);
    if !linear_minimizer(p, &diag, fixed, limit, &mut s) {
        return None;
    }
    let mut x = vec![0.0; n];
    for &(k, w) in &s {
        x[k] += w;
    }
    let sparse_product = |s: &[(usize, f64)], out: &mut Vec<f64>| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &(k, w) in s {
            for (o, gk) in out.iter_mut().zip(g.row(k)) {
                *o += w * gk;
            }
        }
    };
    let mut gx = vec![0.0; n];
    sparse_product(&s, &mut gx);
    let mut f: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
    let mut lower_bound = f64::NEG_INFINITY;
    let mut grad = vec![0.0; n];
    let mut gs = vec![0.0; n];
    let mut iterations = 0u64;

    for it in 0..opts.max_iterations {
        iterations += 1;
        for (d, v) in grad.iter_mut().zip(&gx) {
            *d = 2.0 * v;
        }
        linear_minimizer(p, &grad, fixed, limit, &mut s);
        let s_gx: f64 = s.iter().map(|&(k, w)| w * gx[k]).sum();
        let gap = (2.0 * (f - s_gx)).max(0.0);
        lower_bound = lower_bound.max(f - gap);
        if gap <= opts.gap_tolerance * f.abs().max(gap_scale) || lower_bound >= cutoff {
            break;
        }
        if it >= branch_after && f < cutoff {
            break;
        }
        sparse_product(&s, &mut gs);
        let s_gs: f64 = s.iter().map(|&(k, w)| w * gs[k]).sum();
        // f(x + t d) = f + 2 t b + t^2 a with d = s - x.
        let a = s_gs - 2.0 * s_gx + f;
        let b = s_gx - f;
        let t = if a > 0.0 {
            (-b / a).clamp(0.0, 1.0)
        } else {
            1.0
        };
        if t == 0.0 {
            break;
        }
        for v in x.iter_mut() {
            *v *= 1.0 - t;
        }
        for &(k, w) in &s {
            x[k] += t * w;
        }
        for (v, w) in gx.iter_mut().zip(&gs) {
            *v += t * (w - *v);
        }
        f = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
    }
    Some(Relaxation {
        x,
        lower_bound: lower_bound.min(f),
        iterations,
    })
}

/// Lower bound from the root relaxation, run to the gap tolerance or the
/// iteration cap. Valid when `G` is PSD.
pub fn relaxation_bound(problem: &Problem, budget: SizeBudget, opts: &SolveOptions) -> Result<f64> {
    problem.check_feasible(budget)?;
    let fixed = vec![None; problem.num_layers()];
    let scale = problem.matrix().max_abs();
    let r = relax(
        problem,
        &fixed,
        budget,
        opts,
        f64::INFINITY,
        usize::MAX,
        scale,
    )
    .expect("feasibility was checked");
    Ok(r.lower_bound)
}
