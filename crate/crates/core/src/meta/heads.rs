//! Classification heads fitted per episode on support embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::solvers::{
    calibrate, irls_fit, one_vs_all_fit, one_vs_all_logits, ridge_fit_diag, ridge_fit_naive,
    ridge_fit_woodbury, BoundHyperparams,
};
use crate::tensor::{Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    R2d2,
    LrD2,
    LrD2Ova,
    Centroid,
    UnrolledGd,
}

impl HeadKind {
    pub const ALL: [HeadKind; 5] = [
        HeadKind::R2d2,
        HeadKind::LrD2,
        HeadKind::LrD2Ova,
        HeadKind::Centroid,
        HeadKind::UnrolledGd,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            HeadKind::R2d2 => "r2d2",
            HeadKind::LrD2 => "lr-d2",
            HeadKind::LrD2Ova => "lr-d2-ova",
            HeadKind::Centroid => "centroid",
            HeadKind::UnrolledGd => "unrolled-gd",
        }
    }

    /// Whether the head is binary-only.
    pub fn is_binary(self) -> bool {
        self == HeadKind::LrD2
    }

    /// Whether the head's outputs go through `α·(·) + β`.
    pub fn is_calibrated(self) -> bool {
        self == HeadKind::R2d2
    }

    pub fn uses_lambda(self) -> bool {
        matches!(self, HeadKind::R2d2 | HeadKind::LrD2 | HeadKind::LrD2Ova)
    }

    pub fn check_ways(self, ways: usize) -> Result<()> {
        if self.is_binary() && ways != 2 {
            return Err(Error::validation(format!(
                "lr-d2 is a binary head but episodes have {ways} ways; use lr-d2-ova for multi-class"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|h| h.as_str() == s)
            .ok_or_else(|| Error::validation(format!("unknown head {s:?}")))
    }
}

/// Per-head settings that are not solver hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadSettings {
    pub kind: HeadKind,
    /// IRLS or inner gradient steps.
    pub steps: usize,
    pub inner_lr: f64,
    pub naive_cap_bytes: Option<usize>,
}

/// Logits and how to score them.
#[derive(Clone, Copy, Debug)]
pub struct HeadOutput {
    pub logits: NodeId,
    /// Single-column logits scored with binary cross-entropy.
    pub binary: bool,
}

/// `−‖x_q − c_k‖²` for class means `c_k` of the support embeddings.
pub fn centroid_head(g: &mut Graph, xs: NodeId, ys: &Tensor, xq: NodeId) -> Result<NodeId> {
    let (n, o) = (ys.rows(), ys.cols());
    let mut avg = ys.transpose();
    for k in 0..o {
        let count: f64 = avg.row_slice(k).iter().sum();
        if count == 0.0 {
            return Err(Error::validation(format!("class {k} has no support rows")));
        }
        for i in 0..n {
            let v = avg.get(k, i) / count;
            avg.set(k, i, v);
        }
    }
    let avg = g.constant(avg);
    let centroids = g.matmul(avg, xs)?;
    let dist = g.sq_dist(xq, centroids)?;
    Ok(g.scale(dist, -1.0))
}

/// Query logits after `steps` of gradient descent on the support
/// cross-entropy of a linear classifier started at zero.
pub fn unrolled_gd_head(
    g: &mut Graph,
    xs: NodeId,
    ys: &Tensor,
    xq: NodeId,
    steps: usize,
    inner_lr: f64,
) -> Result<NodeId> {
    if steps == 0 {
        return Err(Error::validation("unrolled gradient descent needs at least one step"));
    }
    let e = g.value(xs).cols();
    let (n, o) = (ys.rows(), ys.cols());
    let targets = g.constant(ys.clone());
    let xst = g.transpose(xs);
    let mut w = g.constant(Tensor::zeros(&[e, o]));
    for _ in 0..steps {
        let logits = g.matmul(xs, w)?;
        let probs = g.softmax(logits);
        let resid = g.sub(probs, targets)?;
        let grad = g.matmul(xst, resid)?;
        let step = g.scale(grad, inner_lr / n as f64);
        w = g.sub(w, step)?;
    }
    g.matmul(xq, w)
}

/// Support targets for the binary head: class 1 is the positive class.
pub fn binary_labels(ys: &Tensor) -> Tensor {
    let col: Vec<f64> = (0..ys.rows())
        .map(|i| if ys.get(i, 1) == 1.0 { 1.0 } else { -1.0 })
        .collect();
    Tensor::column(&col)
}

/// Fits `settings.kind` on `(xs, ys)` and produces query logits.
///
/// The ridge head solves in Woodbury form when there are no more support
/// rows than embedding dimensions, and directly otherwise. A per-dimension
/// `λ` always takes the diagonal route.
pub fn head_logits(
    g: &mut Graph,
    settings: &HeadSettings,
    hp: &BoundHyperparams,
    xs: NodeId,
    ys: &Tensor,
    xq: NodeId,
) -> Result<HeadOutput> {
    settings.kind.check_ways(ys.cols())?;
    let multi = |logits| HeadOutput {
        logits,
        binary: false,
    };
    match settings.kind {
        HeadKind::R2d2 => {
            let (n, e) = (g.value(xs).rows(), g.value(xs).cols());
            let targets = g.constant(ys.clone());
            let head = if g.value(hp.lambda).len() > 1 {
                ridge_fit_diag(g, xs, targets, hp.lambda)?
            } else if n <= e {
                ridge_fit_woodbury(g, xs, targets, hp.lambda)?
            } else {
                ridge_fit_naive(g, xs, targets, hp.lambda, settings.naive_cap_bytes)?
            };
            Ok(multi(calibrate(g, xq, &head, hp.alpha, hp.beta)?))
        }
        HeadKind::LrD2 => {
            let head = irls_fit(g, xs, &binary_labels(ys), scalar_lambda(g, hp)?, settings.steps)?;
            Ok(HeadOutput {
                logits: g.matmul(xq, head.weights)?,
                binary: true,
            })
        }
        HeadKind::LrD2Ova => {
            let head = one_vs_all_fit(g, xs, ys, scalar_lambda(g, hp)?, settings.steps)?;
            Ok(multi(one_vs_all_logits(g, xq, &head)?))
        }
        HeadKind::Centroid => Ok(multi(centroid_head(g, xs, ys, xq)?)),
        HeadKind::UnrolledGd => Ok(multi(unrolled_gd_head(
            g,
            xs,
            ys,
            xq,
            settings.steps,
            settings.inner_lr,
        )?)),
    }
}

fn scalar_lambda(g: &Graph, hp: &BoundHyperparams) -> Result<NodeId> {
    if g.value(hp.lambda).len() != 1 {
        return Err(Error::validation(
            "logistic heads take a scalar lambda; per-dimension lambda is ridge-only",
        ));
    }
    Ok(hp.lambda)
}

/// Scalar loss and query accuracy for head output against one-hot query labels.
pub fn score(g: &mut Graph, out: HeadOutput, yq: &Tensor) -> Result<(NodeId, f64)> {
    if out.binary {
        let labels = Tensor::column(&(0..yq.rows()).map(|i| yq.get(i, 1)).collect::<Vec<_>>());
        let loss = g.bce_with_logits(out.logits, &labels)?;
        let logits = g.value(out.logits);
        let correct = logits
            .data()
            .iter()
            .zip(labels.data())
            .filter(|(&z, &t)| (z > 0.0) == (t == 1.0))
            .count();
        Ok((loss, correct as f64 / yq.rows() as f64))
    } else {
        let loss = g.softmax_cross_entropy(out.logits, yq)?;
        let pred = g.value(out.logits).argmax_rows();
        let truth = yq.argmax_rows();
        let correct = pred.iter().zip(&truth).filter(|(a, b)| a == b).count();
        Ok((loss, correct as f64 / yq.rows() as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_names_round_trip() {
        for h in HeadKind::ALL {
            assert_eq!(h.as_str().parse::<HeadKind>().unwrap(), h);
        }
        assert!("maml".parse::<HeadKind>().is_err());
    }

    #[test]
    fn binary_head_rejects_multiway() {
        assert!(HeadKind::LrD2.check_ways(5).is_err());
        assert!(HeadKind::LrD2.check_ways(2).is_ok());
        assert!(HeadKind::LrD2Ova.check_ways(5).is_ok());
    }

    #[test]
    fn one_shot_centroids_are_support_points() {
        let mut g = Graph::new();
        let xs = g.constant(Tensor::from_rows(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]));
        let ys = Tensor::eye(3);
        let xq = g.constant(Tensor::from_rows(&[[10.0, 0.0], [1.0, 2.0]]));
        let logits = centroid_head(&mut g, xs, &ys, xq).unwrap();
        let l = g.value(logits);
        assert_eq!(l.row_slice(0), &[-100.0, 0.0, -200.0]);
        assert_eq!(l.row_slice(1), &[-5.0, -85.0, -65.0]);
        assert_eq!(l.argmax_rows(), vec![1, 0]);
    }

    #[test]
    fn one_gd_step_closed_form() {
        let xs_t = Tensor::from_rows(&[[1.0, 2.0], [-1.0, 0.5], [0.3, -0.7]]);
        let ys = Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]);
        let xq_t = Tensor::from_rows(&[[0.2, 0.4]]);
        let eta = 0.3;
        let mut g = Graph::new();
        let xs = g.constant(xs_t.clone());
        let xq = g.constant(xq_t.clone());
        let logits = unrolled_gd_head(&mut g, xs, &ys, xq, 1, eta).unwrap();
        // W₁ = −η·Xᵀ(1/o − Y)/n
        let resid = ys.map(|t| 0.5 - t);
        let w1 = xs_t.transpose().matmul(&resid).unwrap().scale(-eta / 3.0);
        let want = xq_t.matmul(&w1).unwrap();
        let got = g.value(logits);
        assert!(got.zip_map(&want, |a, b| a - b).max_abs() < 1e-15);
    }

    #[test]
    fn frozen_inner_loop_gives_zero_logits() {
        let mut g = Graph::new();
        let xs = g.constant(Tensor::from_rows(&[[1.0, 2.0], [3.0, 4.0]]));
        let xq = g.constant(Tensor::from_rows(&[[5.0, 6.0]]));
        let logits = unrolled_gd_head(&mut g, xs, &Tensor::eye(2), xq, 4, 0.0).unwrap();
        assert!(g.value(logits).data().iter().all(|&v| v == 0.0));
        assert!(unrolled_gd_head(&mut g, xs, &Tensor::eye(2), xq, 0, 0.1).is_err());
    }
}
