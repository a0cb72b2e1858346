//! Differentiable base learners.
//!
//! Every solver takes support embeddings `X` (`n×e`, samples as rows) and
//! targets as graph nodes and returns head weights as a graph node, so a
//! query loss computed from those weights back-propagates into `X`, the
//! targets and the solver hyper-parameters.
//!
//! Ridge regression has three routes that agree up to rounding:
//!
//! - [`ridge_fit_naive`]: `(XᵀX + λI)⁻¹XᵀY`, an `e×e` system.
//! - [`ridge_fit_woodbury`]: `Xᵀ(XXᵀ + λI)⁻¹Y`, an `n×n` system. Cost is
//!   linear in `e`, which is what makes wide embeddings affordable.
//! - [`ridge_fit_diag`]: per-feature regularisation
//!   `diag(λ)⁻¹Xᵀ(X diag(λ)⁻¹Xᵀ + I)⁻¹Y`.
//!
//! Logistic regression runs a fixed number of Newton (IRLS) steps, each a
//! weighted ridge problem solved in Woodbury form.

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

/// Default byte budget for the `e×e` system of the direct ridge route.
pub const DEFAULT_NAIVE_CAP_BYTES: usize = 1 << 30;

/// Floor applied to IRLS weights `μ(1-μ)` when the sigmoid saturates.
pub const IRLS_WEIGHT_FLOOR: f64 = 1e-12;

/// Hyper-parameters of the base learner: regularisation `λ` and the
/// calibration scale `α` and bias `β`.
///
/// `λ` is stored unconstrained as `lambda_raw`, with `λ = softplus(lambda_raw)`.
/// A scalar `lambda_raw` gives isotropic regularisation; a `[1, e]` row gives
/// one `λ` per embedding dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverHyperparams {
    pub lambda_raw: Tensor,
    pub alpha: f64,
    pub beta: f64,
    pub learn_lambda: bool,
    pub learn_alpha: bool,
    pub learn_beta: bool,
}

impl Default for SolverHyperparams {
    fn default() -> Self {
        Self::new(1.0, 1.0, 0.0)
    }
}

impl SolverHyperparams {
    pub fn new(lambda: f64, alpha: f64, beta: f64) -> Self {
        assert!(lambda > 0.0, "lambda must be positive");
        Self {
            lambda_raw: Tensor::scalar(inverse_softplus(lambda)),
            alpha,
            beta,
            learn_lambda: true,
            learn_alpha: true,
            learn_beta: true,
        }
    }

    /// Per-dimension variant with every entry initialised to `lambda`.
    pub fn with_lambda_vector(embed_dim: usize, lambda: f64, alpha: f64, beta: f64) -> Self {
        let mut hp = Self::new(lambda, alpha, beta);
        hp.lambda_raw = Tensor::full(&[1, embed_dim], inverse_softplus(lambda));
        hp
    }

    pub fn is_diagonal(&self) -> bool {
        !self.lambda_raw.is_scalar()
    }

    /// Effective (positive) regularisation.
    pub fn lambda(&self) -> Tensor {
        self.lambda_raw.map(crate::tensor::softplus_value)
    }

    /// Mean effective `λ`; equals `λ` in the scalar case.
    pub fn lambda_mean(&self) -> f64 {
        let l = self.lambda();
        l.sum() / l.len() as f64
    }

    /// Places the hyper-parameters into `g`, as parameters where learnable.
    pub fn bind(&self, g: &mut Graph) -> BoundHyperparams {
        let leaf = |g: &mut Graph, t: Tensor, learn: bool| {
            if learn {
                g.param(t)
            } else {
                g.constant(t)
            }
        };
        let lambda_raw = leaf(g, self.lambda_raw.clone(), self.learn_lambda);
        let lambda = g.softplus(lambda_raw);
        let alpha = leaf(g, Tensor::scalar(self.alpha), self.learn_alpha);
        let beta = leaf(g, Tensor::scalar(self.beta), self.learn_beta);
        BoundHyperparams {
            lambda_raw,
            lambda,
            alpha,
            beta,
        }
    }
}

/// Graph handles for a bound [`SolverHyperparams`].
#[derive(Clone, Copy, Debug)]
pub struct BoundHyperparams {
    pub lambda_raw: NodeId,
    /// `softplus(lambda_raw)`.
    pub lambda: NodeId,
    pub alpha: NodeId,
    pub beta: NodeId,
}

/// Per-episode head weights: `e×o` for ridge, `e×1` for logistic regression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadWeights {
    pub weights: NodeId,
}

pub fn inverse_softplus(y: f64) -> f64 {
    // ln(eʸ - 1), rearranged to avoid overflow for large y.
    y + (-(-y).exp_m1()).ln()
}

fn check_pair(g: &Graph, x: NodeId, y: NodeId, op: &'static str) -> Result<(usize, usize)> {
    let (xs, ys) = (g.value(x), g.value(y));
    if xs.ndim() != 2 || ys.ndim() != 2 || xs.rows() != ys.rows() || xs.rows() == 0 {
        return Err(Error::Dimension {
            op,
            lhs: xs.shape().to_vec(),
            rhs: ys.shape().to_vec(),
        });
    }
    Ok((xs.rows(), xs.cols()))
}

fn check_scalar_lambda(g: &Graph, lambda: NodeId) -> Result<()> {
    let l = g.value(lambda);
    if l.len() != 1 {
        return Err(Error::validation(format!(
            "scalar lambda expected, got shape {:?}",
            l.shape()
        )));
    }
    if !(l.item() > 0.0) {
        return Err(Error::validation(format!("lambda must be positive, got {}", l.item())));
    }
    Ok(())
}

/// `W = (XᵀX + λI)⁻¹XᵀY` through an `e×e` Cholesky solve.
///
/// Fails with [`Error::Capacity`] when the `e×e` system would exceed
/// `cap_bytes` (default [`DEFAULT_NAIVE_CAP_BYTES`]).
pub fn ridge_fit_naive(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    lambda: NodeId,
    cap_bytes: Option<usize>,
) -> Result<HeadWeights> {
    let (_, e) = check_pair(g, x, y, "ridge_fit_naive")?;
    check_scalar_lambda(g, lambda)?;
    let cap = cap_bytes.unwrap_or(DEFAULT_NAIVE_CAP_BYTES);
    let bytes = e.saturating_mul(e).saturating_mul(std::mem::size_of::<f64>());
    if bytes > cap {
        return Err(Error::Capacity(format!(
            "{e}x{e} system needs {bytes} bytes (cap {cap}); use the Woodbury route"
        )));
    }
    let xt = g.transpose(x);
    let gram = g.matmul(xt, x)?;
    let system = g.add_diag(gram, lambda)?;
    let rhs = g.matmul(xt, y)?;
    let weights = g.solve_spd(system, rhs)?;
    Ok(HeadWeights { weights })
}

/// `W = Xᵀ(XXᵀ + λI)⁻¹Y` through an `n×n` Cholesky solve.
pub fn ridge_fit_woodbury(g: &mut Graph, x: NodeId, y: NodeId, lambda: NodeId) -> Result<HeadWeights> {
    check_pair(g, x, y, "ridge_fit_woodbury")?;
    check_scalar_lambda(g, lambda)?;
    let xt = g.transpose(x);
    let kernel = g.matmul(x, xt)?;
    let system = g.add_diag(kernel, lambda)?;
    let dual = g.solve_spd(system, y)?;
    let weights = g.matmul(xt, dual)?;
    Ok(HeadWeights { weights })
}

/// `W = diag(λ)⁻¹Xᵀ(X diag(λ)⁻¹Xᵀ + I)⁻¹Y` for a positive `[1, e]` (or `[e]`) `λ`.
pub fn ridge_fit_diag(
    g: &mut Graph,
    x: NodeId,
    y: NodeId,
    lambda_vec: NodeId,
) -> Result<HeadWeights> {
    let (_, e) = check_pair(g, x, y, "ridge_fit_diag")?;
    let lv = g.value(lambda_vec);
    if lv.len() != e || lv.rows() > 1 && lv.ndim() == 2 {
        return Err(Error::Dimension {
            op: "ridge_fit_diag",
            lhs: g.value(x).shape().to_vec(),
            rhs: lv.shape().to_vec(),
        });
    }
    if let Some(bad) = lv.data().iter().find(|&&v| !(v > 0.0)) {
        return Err(Error::validation(format!(
            "per-dimension lambda must be positive, got {bad}"
        )));
    }
    let scaled = g.div(x, lambda_vec)?;
    let xt = g.transpose(x);
    let kernel = g.matmul(scaled, xt)?;
    let one = g.constant(Tensor::scalar(1.0));
    let system = g.add_diag(kernel, one)?;
    let dual = g.solve_spd(system, y)?;
    let scaled_t = g.transpose(scaled);
    let weights = g.matmul(scaled_t, dual)?;
    Ok(HeadWeights { weights })
}

/// Calibrated regression outputs `α·Xq·W + β`.
pub fn calibrate(
    g: &mut Graph,
    xq: NodeId,
    head: &HeadWeights,
    alpha: NodeId,
    beta: NodeId,
) -> Result<NodeId> {
    let raw = g.matmul(xq, head.weights)?;
    let scaled = g.mul(alpha, raw)?;
    g.add(scaled, beta)
}

/// One IRLS iterate. `mu`, `s` and `z` describe the step that produced `w`
/// and are absent for the initial state.
#[derive(Clone, Debug)]
pub struct IrlsState {
    pub w: NodeId,
    pub mu: Option<NodeId>,
    pub s: Option<NodeId>,
    pub z: Option<NodeId>,
    pub iteration: usize,
    /// Weights clamped to [`IRLS_WEIGHT_FLOOR`] so far.
    pub clamped: usize,
}

impl IrlsState {
    /// `w₀ = 0`.
    pub fn initial(g: &mut Graph, embed_dim: usize) -> Self {
        Self::zeros(g, embed_dim, 1)
    }

    fn zeros(g: &mut Graph, embed_dim: usize, outputs: usize) -> Self {
        Self {
            w: g.constant(Tensor::zeros(&[embed_dim, outputs])),
            mu: None,
            s: None,
            z: None,
            iteration: 0,
            clamped: 0,
        }
    }
}

/// Converts `±1` labels to an `n×1` column, validating the alphabet.
fn signed_labels(y: &Tensor) -> Result<Tensor> {
    if let Some(bad) = y.data().iter().find(|&&v| v != 1.0 && v != -1.0) {
        return Err(Error::validation(format!("labels must be ±1, got {bad}")));
    }
    Ok(Tensor::column(y.data()))
}

/// One Newton step for L2-regularised logistic regression in Woodbury form:
/// `w = Xᵀ(XXᵀ + λ·diag(s)⁻¹)⁻¹z` with `μ = σ(Xw_prev)`, `s = μ(1-μ)` and
/// working response `z = Xw_prev + (t - μ)/s`, `t = (y + 1)/2`.
pub fn irls_step(
    g: &mut Graph,
    x: NodeId,
    y: &Tensor,
    state: IrlsState,
    lambda: NodeId,
) -> Result<IrlsState> {
    let xt = g.transpose(x);
    let kernel = g.matmul(x, xt)?;
    irls_step_with_kernel(g, x, xt, kernel, &signed_labels(y)?, state, lambda)
}

fn irls_step_with_kernel(
    g: &mut Graph,
    x: NodeId,
    xt: NodeId,
    kernel: NodeId,
    y: &Tensor,
    state: IrlsState,
    lambda: NodeId,
) -> Result<IrlsState> {
    check_scalar_lambda(g, lambda)?;
    let n = g.value(x).rows();
    if y.rows() != n || g.value(state.w).cols() != y.cols() {
        return Err(Error::Dimension {
            op: "irls_step",
            lhs: g.value(x).shape().to_vec(),
            rhs: y.shape().to_vec(),
        });
    }
    if !g.value(state.w).all_finite() {
        return Err(Error::Numerical("non-finite IRLS iterate".into()));
    }
    let targets = g.constant(y.map(|v| (v + 1.0) / 2.0));
    let margin = g.matmul(x, state.w)?;
    let mu = g.sigmoid(margin);
    let one = g.constant(Tensor::scalar(1.0));
    let one_minus = g.sub(one, mu)?;
    let s_raw = g.mul(mu, one_minus)?;
    let clamped = g
        .value(s_raw)
        .data()
        .iter()
        .filter(|&&v| v < IRLS_WEIGHT_FLOOR)
        .count();
    let s = g.clamp_min(s_raw, IRLS_WEIGHT_FLOOR);
    let residual = g.sub(targets, mu)?;
    let correction = g.div(residual, s)?;
    let z = g.add(margin, correction)?;
    let ridge = g.div(lambda, s)?;
    let dual = g.solve_shifted(kernel, ridge, z)?;
    let w = g.matmul(xt, dual)?;
    Ok(IrlsState {
        w,
        mu: Some(mu),
        s: Some(s),
        z: Some(z),
        iteration: state.iteration + 1,
        clamped: state.clamped + clamped,
    })
}

/// `steps` unrolled IRLS iterations from `w₀ = 0`; differentiable through the chain.
pub fn irls_fit(
    g: &mut Graph,
    x: NodeId,
    y: &Tensor,
    lambda: NodeId,
    steps: usize,
) -> Result<HeadWeights> {
    Ok(HeadWeights {
        weights: irls_run(g, x, y, lambda, steps)?.w,
    })
}

/// Like [`irls_fit`] but returns the final [`IrlsState`].
pub fn irls_run(
    g: &mut Graph,
    x: NodeId,
    y: &Tensor,
    lambda: NodeId,
    steps: usize,
) -> Result<IrlsState> {
    if steps == 0 {
        return Err(Error::validation("IRLS needs at least one step"));
    }
    let labels = signed_labels(y)?;
    let e = g.value(x).cols();
    let xt = g.transpose(x);
    let kernel = g.matmul(x, xt)?;
    let mut state = IrlsState::initial(g, e);
    for _ in 0..steps {
        state = irls_step_with_kernel(g, x, xt, kernel, &labels, state, lambda)?;
    }
    Ok(state)
}

/// One binary IRLS classifier per class against the rest, fitted side by
/// side: column `c` of the returned `e×o` weights separates class `c`. Each
/// class keeps its own weights `s` and so its own `n×n` system.
pub fn one_vs_all_fit(
    g: &mut Graph,
    x: NodeId,
    one_hot: &Tensor,
    lambda: NodeId,
    steps: usize,
) -> Result<HeadWeights> {
    let classes = one_hot.cols();
    if classes < 2 {
        return Err(Error::validation("one-vs-all needs at least two classes"));
    }
    if one_hot.rows() != g.value(x).rows() {
        return Err(Error::Dimension {
            op: "one_vs_all_fit",
            lhs: g.value(x).shape().to_vec(),
            rhs: one_hot.shape().to_vec(),
        });
    }
    if steps == 0 {
        return Err(Error::validation("IRLS needs at least one step"));
    }
    let signed = one_hot.map(|v| if v == 1.0 { 1.0 } else { -1.0 });
    for c in 0..classes {
        if (0..signed.rows()).all(|i| signed.get(i, c) == -1.0) {
            return Err(Error::validation(format!("class {c} has no support rows")));
        }
    }
    let e = g.value(x).cols();
    let xt = g.transpose(x);
    let kernel = g.matmul(x, xt)?;
    let mut state = IrlsState::zeros(g, e, classes);
    for _ in 0..steps {
        state = irls_step_with_kernel(g, x, xt, kernel, &signed, state, lambda)?;
    }
    Ok(HeadWeights { weights: state.w })
}

/// Per-class query logits `Xq·W`, one column per class.
pub fn one_vs_all_logits(g: &mut Graph, xq: NodeId, head: &HeadWeights) -> Result<NodeId> {
    g.matmul(xq, head.weights)
}
