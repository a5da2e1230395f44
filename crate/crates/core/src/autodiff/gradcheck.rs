//! Central finite-difference checks of analytic gradients.

use super::{Graph, NodeId};
use crate::error::Result;
use crate::grid::Grid;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct InputReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub inputs: Vec<InputReport>,
    pub tolerance: f64,
    /// Set when the loss could not be evaluated at some probe point.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|r| r.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_error() < self.tolerance
    }
}

fn evaluate<F>(
    builder: &F,
    inputs: &[Grid<f64>],
    with_grad: bool,
) -> Result<(f64, Graph<f64>, Vec<NodeId>)>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut graph = Graph::new();
    let ids = inputs
        .iter()
        .map(|g| graph.leaf(g.clone(), with_grad))
        .collect::<Result<Vec<_>>>()?;
    let root = builder(&mut graph, &ids)?;
    let value = graph.value(root).item();
    if with_grad {
        graph.backward(root)?;
    }
    Ok((value, graph, ids))
}

const FLOOR_FRACTION: f64 = 1e-4;

/// Compares the analytic gradient of the scalar graph built by `builder`
/// against `(f(x+h) - f(x-h)) / 2h` at every coordinate of every input.
///
/// Relative error uses the denominator `max(|analytic|, |numeric|, floor)`
/// where `floor` is `1e-4` times the largest analytic gradient magnitude of
/// that input (and at least `1e-8`). Entries far below the input's gradient
/// scale are then judged against that scale, since central differences
/// carry a roundoff of order `ε·|f|/h` regardless of the entry's size.
pub fn finite_diff_check<F>(builder: F, inputs: &[Grid<f64>], h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let mut report = GradCheckReport {
        inputs: Vec::new(),
        tolerance: tol,
        failure: None,
    };
    let analytic: Vec<Grid<f64>> = match evaluate(&builder, inputs, true) {
        Ok((_, graph, ids)) => ids.iter().map(|&id| graph.grad_or_zeros(id)).collect(),
        Err(e) => {
            report.failure = Some(format!("evaluation at the base point failed: {e}"));
            return report;
        }
    };

    let mut probe: Vec<Grid<f64>> = inputs.to_vec();
    for (which, grad) in analytic.iter().enumerate() {
        let mut worst = InputReport {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        let scale = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (FLOOR_FRACTION * scale).max(1e-8);
        for index in 0..inputs[which].len() {
            let base = inputs[which].data()[index];
            let mut at = |x: f64| {
                probe[which].data_mut()[index] = x;
                let r = evaluate(&builder, &probe, false).map(|(v, _, _)| v);
                probe[which].data_mut()[index] = base;
                r
            };
            let (plus, minus) = match (at(base + h), at(base - h)) {
                (Ok(p), Ok(m)) if p.is_finite() && m.is_finite() => (p, m),
                (p, m) => {
                    report.failure = Some(format!(
                        "non-finite loss probing input {which} index {index}: {:?} / {:?}",
                        p.map_err(|e| e.to_string()),
                        m.map_err(|e| e.to_string())
                    ));
                    report.inputs.push(worst);
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * h);
            let a = grad.data()[index];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let err = (a - numeric).abs() / denom;
            if err > worst.max_rel_error {
                worst = InputReport {
                    max_rel_error: err,
                    worst_index: index,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.inputs.push(worst);
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_matches_exactly() {
        let x = Grid::from_f64(&[5], &[0.3, -1.2, 2.0, 0.0, 4.5]).unwrap();
        let report = finite_diff_check(
            |g, ids| {
                let y = g.mul_const(ids[0], 3.0)?;
                g.sum(y)
            },
            &[x],
            DEFAULT_STEP,
            1e-5,
        );
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // relu evaluated right at its kink: analytic 0, numeric 0.5
        let x = Grid::from_f64(&[1], &[0.0]).unwrap();
        let report = finite_diff_check(
            |g, ids| {
                let y = g.relu(ids[0])?;
                g.sum(y)
            },
            &[x],
            DEFAULT_STEP,
            1e-5,
        );
        assert!(!report.passed());
    }

    #[test]
    fn failing_probe_is_reported_with_coordinates() {
        let x = Grid::from_f64(&[2], &[1.0, 1e-6]).unwrap();
        let report = finite_diff_check(
            |g, ids| {
                let y = g.log(ids[0])?;
                g.sum(y)
            },
            &[x],
            1e-5,
            1e-5,
        );
        let msg = report.failure.expect("probe below zero must fail");
        assert!(msg.contains("index 1"), "{msg}");
    }
}
