//! Partial dependence, individual conditional expectation and variable
//! importance computed from posterior forest snapshots.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::diagnostics::{hdi, DiagError};
use crate::likelihood::LikelihoodSpec;
use crate::matrix::Matrix;
use crate::trace::{Snapshot, Trace};
use crate::tree::{ColumnSet, TreeError};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("trace has no forest snapshots")]
    NoForests,
    #[error("grid size must be at least 2, got {0}")]
    Grid(usize),
    #[error("column {column} out of range for {p} covariates")]
    Column { column: usize, p: usize },
    #[error("no tree ever split; variable importance is undefined")]
    NoInclusion,
    #[error("covariate matrix has {got} columns, the model was fitted with {expected}")]
    Shape { expected: usize, got: usize },
    #[error("empty covariate matrix")]
    NoRows,
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Diag(#[from] DiagError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InterpretOptions {
    /// Forest snapshots to use, sampled without replacement.
    pub draws: usize,
    pub seed: u64,
    pub prob: f64,
}

impl Default for InterpretOptions {
    fn default() -> Self {
        Self {
            draws: 100,
            seed: 0,
            prob: 0.94,
        }
    }
}

/// Up to `s` snapshots drawn uniformly without replacement, in trace order.
pub fn subsample_snapshots(trace: &Trace, s: usize, seed: u64) -> Result<Vec<&Snapshot>, InterpretError> {
    let all: Vec<&Snapshot> = trace.snapshots().collect();
    if all.is_empty() {
        return Err(InterpretError::NoForests);
    }
    if s >= all.len() {
        return Ok(all);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = sample(&mut rng, all.len(), s.max(1)).into_vec();
    idx.sort_unstable();
    Ok(idx.into_iter().map(|i| all[i]).collect())
}

/// Square of the Pearson correlation; `None` for fewer than two points or
/// zero variance in either vector.
pub fn r_squared(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        saa += dx * dx;
        sbb += dy * dy;
        sab += dx * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(((sab * sab) / (saa * sbb)).min(1.0))
}

/// Grid over column `j`: its sorted distinct values when categorical,
/// otherwise `g` evenly spaced points from its minimum to its maximum.
pub fn grid_for(x: &Matrix, j: usize, g: usize, categorical: bool) -> Result<Vec<f64>, InterpretError> {
    if j >= x.n_cols() {
        return Err(InterpretError::Column { column: j, p: x.n_cols() });
    }
    if x.n_rows() == 0 {
        return Err(InterpretError::NoRows);
    }
    let mut col = x.column(j);
    col.sort_by(f64::total_cmp);
    if categorical {
        col.dedup();
        return Ok(col);
    }
    if g < 2 {
        return Err(InterpretError::Grid(g));
    }
    let (lo, hi) = (col[0], col[col.len() - 1]);
    Ok((0..g)
        .map(|i| if i == g - 1 { hi } else { lo + (hi - lo) * i as f64 / (g - 1) as f64 })
        .collect())
}

/// Mean and HDI of a sample; a single value gives a zero-width band.
fn summarize(samples: &[f64], prob: f64) -> Result<(f64, f64, f64), InterpretError> {
    let mean = samples.iter().sum::<f64>() / samples.len() as f64;
    if samples.len() < 2 {
        return Ok((mean, mean, mean));
    }
    let (lo, hi) = hdi(samples, prob)?;
    Ok((mean, lo, hi))
}

fn apply_link(link: Option<&LikelihoodSpec>, eta: Vec<f64>) -> Vec<f64> {
    match link {
        Some(spec) => eta
            .into_iter()
            .enumerate()
            .map(|(k, v)| spec.inverse_link(k, v))
            .collect(),
        None => eta,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PdpPoint {
    pub grid: f64,
    pub dim: usize,
    pub mean: f64,
    pub low: f64,
    pub high: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PdpResult {
    pub column: usize,
    pub points: Vec<PdpPoint>,
}

/// Partial dependence of column `j`: every other column is excluded, so each
/// tree averages over the branches that would consult them, weighted by
/// training counts. The inverse link is applied when `link` is given.
pub fn pdp(
    trace: &Trace,
    x: &Matrix,
    j: usize,
    grid: &[f64],
    link: Option<&LikelihoodSpec>,
    opts: &InterpretOptions,
) -> Result<PdpResult, InterpretError> {
    check_x(trace, x)?;
    if j >= x.n_cols() {
        return Err(InterpretError::Column { column: j, p: x.n_cols() });
    }
    let snaps = subsample_snapshots(trace, opts.draws, opts.seed)?;
    let excluded = ColumnSet::all_except(x.n_cols(), &[j]);
    let mut row = x.row(0).to_vec();
    let mut points = Vec::with_capacity(grid.len() * trace.out_dim);
    for &v in grid {
        row[j] = v;
        let values = snaps
            .par_iter()
            .map(|s| Ok(apply_link(link, s.predict_excluded(&row, &excluded)?)))
            .collect::<Result<Vec<Vec<f64>>, TreeError>>()?;
        for dim in 0..trace.out_dim {
            let col: Vec<f64> = values.iter().map(|v| v[dim]).collect();
            let (mean, low, high) = summarize(&col, opts.prob)?;
            points.push(PdpPoint {
                grid: v,
                dim,
                mean,
                low,
                high,
            });
        }
    }
    Ok(PdpResult { column: j, points })
}

#[derive(Debug, Clone, Serialize)]
pub struct IceResult {
    pub column: usize,
    pub grid: Vec<f64>,
    /// Rows of `x` that were traced.
    pub rows: Vec<usize>,
    /// `curves[r][g][dim]`: mean over snapshots for row `rows[r]` at `grid[g]`.
    pub curves: Vec<Vec<Vec<f64>>>,
}

/// Individual conditional expectation of column `j` for up to `n_rows`
/// rows (all rows when `n_rows >= x.n_rows()`), without exclusion.
pub fn ice(
    trace: &Trace,
    x: &Matrix,
    j: usize,
    grid: &[f64],
    n_rows: usize,
    link: Option<&LikelihoodSpec>,
    opts: &InterpretOptions,
) -> Result<IceResult, InterpretError> {
    check_x(trace, x)?;
    if j >= x.n_cols() {
        return Err(InterpretError::Column { column: j, p: x.n_cols() });
    }
    let snaps = subsample_snapshots(trace, opts.draws, opts.seed)?;
    let rows: Vec<usize> = if n_rows >= x.n_rows() {
        (0..x.n_rows()).collect()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x1ce);
        let mut r = sample(&mut rng, x.n_rows(), n_rows).into_vec();
        r.sort_unstable();
        r
    };
    let curves = rows
        .par_iter()
        .map(|&i| {
            let mut row = x.row(i).to_vec();
            grid.iter()
                .map(|&v| {
                    row[j] = v;
                    let mut acc = vec![0.0; trace.out_dim];
                    for s in &snaps {
                        for (a, p) in acc.iter_mut().zip(apply_link(link, s.predict(&row)?)) {
                            *a += p;
                        }
                    }
                    Ok(acc.into_iter().map(|a| a / snaps.len() as f64).collect())
                })
                .collect::<Result<Vec<Vec<f64>>, TreeError>>()
        })
        .collect::<Result<Vec<_>, TreeError>>()?;
    Ok(IceResult {
        column: j,
        grid: grid.to_vec(),
        rows,
        curves,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct R2Point {
    pub k: usize,
    /// `None` when no sampled draw had a defined r².
    pub mean: Option<f64>,
    pub low: Option<f64>,
    pub high: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariableImportanceResult {
    /// Column indices, most important first; ties by ascending index.
    pub ordering: Vec<usize>,
    pub normalized_importance: Vec<f64>,
    pub r2_curve: Vec<R2Point>,
}

/// Importance from mean split counts, normalized to sum to one.
pub fn importance_from_counts(counts: &[&[usize]], p: usize) -> Result<(Vec<f64>, Vec<usize>), InterpretError> {
    let mut totals = vec![0.0; p];
    for c in counts {
        for (t, v) in totals.iter_mut().zip(c.iter()) {
            *t += *v as f64;
        }
    }
    let sum: f64 = totals.iter().sum();
    if sum == 0.0 {
        return Err(InterpretError::NoInclusion);
    }
    let imp: Vec<f64> = totals.iter().map(|t| t / sum).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| imp[b].total_cmp(&imp[a]).then(a.cmp(&b)));
    Ok((imp, order))
}

/// Variable importance and the r² curve of restricted predictions.
///
/// For `k = 1..=p` each sampled forest predicts every row with all but the
/// `k` most important columns excluded; r² against that forest's full
/// prediction is summarized across draws.
pub fn variable_importance(trace: &Trace, x: &Matrix, opts: &InterpretOptions) -> Result<VariableImportanceResult, InterpretError> {
    check_x(trace, x)?;
    let p = x.n_cols();
    let (imp, order) = importance_from_counts(&trace.variable_inclusion(), p)?;
    let snaps = subsample_snapshots(trace, opts.draws, opts.seed)?;

    let predict_all = |s: &Snapshot, excluded: &ColumnSet| -> Result<Vec<f64>, TreeError> {
        let mut out = Vec::with_capacity(x.n_rows() * trace.out_dim);
        for row in x.rows() {
            out.extend(s.predict_excluded(row, excluded)?);
        }
        Ok(out)
    };
    let full = snaps
        .par_iter()
        .map(|s| predict_all(s, &ColumnSet::empty()))
        .collect::<Result<Vec<_>, _>>()?;

    let mut r2_curve = Vec::with_capacity(p);
    for k in 1..=p {
        let excluded = ColumnSet::all_except(p, &order[..k]);
        let r2: Vec<Option<f64>> = snaps
            .par_iter()
            .zip(&full)
            .map(|(s, f)| Ok(r_squared(f, &predict_all(s, &excluded)?)))
            .collect::<Result<Vec<_>, TreeError>>()?;
        let defined: Vec<f64> = r2.into_iter().flatten().collect();
        r2_curve.push(if defined.is_empty() {
            R2Point {
                k,
                mean: None,
                low: None,
                high: None,
            }
        } else {
            let (mean, low, high) = summarize(&defined, opts.prob)?;
            R2Point {
                k,
                mean: Some(mean),
                low: Some(low),
                high: Some(high),
            }
        });
    }
    Ok(VariableImportanceResult {
        ordering: order,
        normalized_importance: imp,
        r2_curve,
    })
}

fn check_x(trace: &Trace, x: &Matrix) -> Result<(), InterpretError> {
    if x.n_cols() != trace.p {
        return Err(InterpretError::Shape {
            expected: trace.p,
            got: x.n_cols(),
        });
    }
    if x.n_rows() == 0 {
        return Err(InterpretError::NoRows);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::ChainTrace;
    use crate::tree::{Forest, SplitRule, Tree};
    use std::sync::Arc;

    fn trace_of(forests: Vec<Forest>, counts: Vec<usize>, p: usize) -> Trace {
        let mut c = ChainTrace::new(0, 0);
        for f in forests {
            c.push_draw(vec![0.0; 4], vec![], vec![], counts.clone(), Some(vec![f]));
        }
        Trace::new(vec![c], 4, 1, p, vec![])
    }

    fn x4() -> Matrix {
        Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 5.0],
            vec![2.0, 1.0],
            vec![3.0, 2.0],
        ])
    }

    fn split_on_col0() -> Tree {
        let mut t = Tree::new_leaf(vec![0.0], 4);
        t.grow_at_leaf(0, 0, SplitRule::Continuous(1.5), vec![1.0], vec![3.0], &[0, 1], &[2, 3])
            .unwrap();
        t
    }

    #[test]
    fn r_squared_examples() {
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), Some(1.0));
        assert_eq!(r_squared(&[1.0, 2.0, 3.0], &[-1.0, -2.0, -3.0]), Some(1.0));
        assert!((r_squared(&[1.0, 2.0, 3.0], &[1.0, 2.0, 4.0]).unwrap() - 0.9643).abs() < 1e-4);
        assert_eq!(r_squared(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), None);
        let a = [0.3, -1.7, 2.2, 9.1, 0.0];
        assert_eq!(r_squared(&a, &a), Some(1.0));
    }

    #[test]
    fn flat_pdp_for_single_leaf() {
        let f = Forest::new(vec![Arc::new(Tree::new_leaf(vec![0.7], 4))], true);
        let tr = trace_of(vec![f], vec![0, 0], 2);
        let x = x4();
        for j in 0..2 {
            let g = grid_for(&x, j, 5, false).unwrap();
            let r = pdp(&tr, &x, j, &g, None, &InterpretOptions::default()).unwrap();
            assert!(r.points.iter().all(|p| p.mean == 0.7 && p.low == 0.7 && p.high == 0.7));
        }
    }

    #[test]
    fn pdp_unused_column_constant() {
        let f = Forest::new(vec![Arc::new(split_on_col0())], true);
        let tr = trace_of(vec![f.clone(), f], vec![1, 0], 2);
        let x = x4();
        let g = grid_for(&x, 1, 7, false).unwrap();
        let r = pdp(&tr, &x, 1, &g, None, &InterpretOptions::default()).unwrap();
        assert!(r.points.iter().all(|p| p.mean == 2.0));
        let g = grid_for(&x, 0, 2, false).unwrap();
        let r = pdp(&tr, &x, 0, &g, None, &InterpretOptions::default()).unwrap();
        assert_eq!(r.points.len(), 2);
        assert_eq!(r.points[0].mean, 1.0);
        assert_eq!(r.points[1].mean, 3.0);
    }

    #[test]
    fn ice_matches_pdp_when_only_j_is_used() {
        let f = Forest::new(vec![Arc::new(split_on_col0())], true);
        let tr = trace_of(vec![f], vec![1, 0], 2);
        let x = x4();
        let g = grid_for(&x, 0, 4, false).unwrap();
        let opts = InterpretOptions::default();
        let p = pdp(&tr, &x, 0, &g, None, &opts).unwrap();
        let i = ice(&tr, &x, 0, &g, 100, None, &opts).unwrap();
        assert_eq!(i.rows, vec![0, 1, 2, 3]);
        for (gi, pt) in p.points.iter().enumerate() {
            let avg = i.curves.iter().map(|c| c[gi][0]).sum::<f64>() / 4.0;
            assert_eq!(avg, pt.mean);
        }
    }

    #[test]
    fn importance_ordering_and_full_r2() {
        let mut t = split_on_col0();
        t.grow_at_leaf(1, 1, SplitRule::Continuous(2.0), vec![0.5], vec![1.5], &[0], &[1])
            .unwrap();
        let f = Forest::new(vec![Arc::new(t)], true);
        let tr = trace_of(vec![f], vec![1, 1], 2);
        let vi = variable_importance(&tr, &x4(), &InterpretOptions::default()).unwrap();
        assert_eq!(vi.ordering, vec![0, 1]);
        assert!((vi.normalized_importance.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(vi.r2_curve[1].mean, Some(1.0));
    }

    #[test]
    fn no_inclusion_is_an_error() {
        let f = Forest::new(vec![Arc::new(Tree::new_leaf(vec![0.7], 4))], true);
        let tr = trace_of(vec![f], vec![0, 0], 2);
        assert!(matches!(
            variable_importance(&tr, &x4(), &InterpretOptions::default()),
            Err(InterpretError::NoInclusion)
        ));
    }

    #[test]
    fn no_forests_is_an_error() {
        let tr = Trace::new(vec![ChainTrace::new(0, 0)], 4, 1, 2, vec![]);
        let x = x4();
        assert!(matches!(
            pdp(&tr, &x, 0, &[0.0, 1.0], None, &InterpretOptions::default()),
            Err(InterpretError::NoForests)
        ));
    }

    #[test]
    fn subsample_is_seeded_and_ordered() {
        let f = Forest::new(vec![Arc::new(Tree::new_leaf(vec![0.7], 4))], true);
        let tr = trace_of(vec![f; 20], vec![0, 0], 2);
        let a: Vec<usize> = subsample_snapshots(&tr, 5, 3).unwrap().iter().map(|s| s.draw).collect();
        let b: Vec<usize> = subsample_snapshots(&tr, 5, 3).unwrap().iter().map(|s| s.draw).collect();
        assert_eq!(a, b);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(subsample_snapshots(&tr, 50, 3).unwrap().len(), 20);
    }

    #[test]
    fn categorical_grid_uses_categories() {
        let x = Matrix::from_rows(&[vec![2.0], vec![0.0], vec![2.0], vec![1.0]]);
        assert_eq!(grid_for(&x, 0, 50, true).unwrap(), vec![0.0, 1.0, 2.0]);
        assert!(matches!(grid_for(&x, 0, 1, false), Err(InterpretError::Grid(1))));
    }
}
