use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Outcome of comparing backward-mode gradients with central differences.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over every checked element.
    pub max_rel_error: f64,
    /// Largest relative error per leaf, in input order.
    pub per_leaf: Vec<f64>,
}

/// Checks `f` against central finite differences with step `eps`.
///
/// `f` receives a fresh graph and one parameter node per entry of `leaves`
/// and must return a scalar node. Relative error is
/// `|a - n| / max(1, |a|, |n|)`.
pub fn grad_check<F>(mut f: F, leaves: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    let analytic: Vec<Tensor> = {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = leaves.iter().map(|v| g.param(v.clone())).collect();
        let root = f(&mut g, &ids)?;
        let grads = g.backward(root)?;
        ids.iter()
            .zip(leaves)
            .map(|(&id, v)| grads.wrt(id, v))
            .collect()
    };

    let mut eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|v| g.param(v.clone())).collect();
        let root = f(&mut g, &ids)?;
        Ok(g.value(root).item())
    };

    let mut work = leaves.to_vec();
    let mut per_leaf = Vec::with_capacity(leaves.len());
    for li in 0..leaves.len() {
        let mut worst: f64 = 0.0;
        for k in 0..leaves[li].len() {
            let orig = leaves[li].data()[k];
            work[li].data_mut()[k] = orig + eps;
            let plus = eval(&work)?;
            work[li].data_mut()[k] = orig - eps;
            let minus = eval(&work)?;
            work[li].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[li].data()[k];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at leaf {li} element {k}"
                )));
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            worst = worst.max(rel);
        }
        per_leaf.push(worst);
    }
    let max_rel_error = per_leaf.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_leaf,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let report = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.2))),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn quadratic_form() {
        // f = xᵀAx with A SPD; analytic gradient (A + Aᵀ)x.
        let a = Tensor::from_rows(&[[3.0, 1.0, 0.5], [1.0, 2.0, 0.0], [0.5, 0.0, 1.5]]);
        let x = Tensor::column(&[0.3, -1.2, 2.0]);
        let report = grad_check(
            |g, ids| {
                let av = g.constant(a.clone());
                let ax = g.matmul(av, ids[0])?;
                let xt = g.transpose(ids[0]);
                let q = g.matmul(xt, ax)?;
                Ok(g.sum(q))
            },
            &[x.clone()],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");

        let mut g = Graph::new();
        let xn = g.param(x.clone());
        let av = g.constant(a.clone());
        let ax = g.matmul(av, xn).unwrap();
        let xt = g.transpose(xn);
        let q = g.matmul(xt, ax).unwrap();
        let grads = g.backward(q).unwrap();
        let oracle = a.matmul(&x).unwrap().scale(2.0);
        for (u, v) in grads.get(xn).unwrap().data().iter().zip(oracle.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }
}
