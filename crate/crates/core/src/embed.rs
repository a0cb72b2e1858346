//! The shared feature extractor: a multilayer perceptron with leaky-ReLU
//! activations, optional inverted dropout, and optional concatenation of the
//! last two layer outputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Tensor};

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub input_dim: usize,
    pub widths: Vec<usize>,
    /// Dropout rate after each layer; missing entries mean 0.
    #[serde(default)]
    pub dropout: Vec<f64>,
    #[serde(default = "default_concat")]
    pub concat_last_two: bool,
}

fn default_concat() -> bool {
    true
}

impl EmbeddingConfig {
    pub fn new(input_dim: usize, widths: Vec<usize>) -> Self {
        Self {
            input_dim,
            widths,
            dropout: Vec::new(),
            concat_last_two: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::validation(format!(
                "embedding needs a positive input size and at least one positive width, got {} and {:?}",
                self.input_dim, self.widths
            )));
        }
        if self.dropout.len() > self.widths.len() {
            return Err(Error::validation("more dropout rates than layers"));
        }
        if let Some(p) = self.dropout.iter().find(|p| !(0.0..1.0).contains(*p)) {
            return Err(Error::validation(format!("dropout rate {p} outside [0, 1)")));
        }
        Ok(())
    }

    fn concat_active(&self) -> bool {
        self.concat_last_two && self.widths.len() >= 2
    }

    /// Embedding size `e`.
    pub fn output_dim(&self) -> usize {
        let n = self.widths.len();
        if self.concat_active() {
            self.widths[n - 1] + self.widths[n - 2]
        } else {
            self.widths[n - 1]
        }
    }

    pub fn dropout_rate(&self, layer: usize) -> f64 {
        self.dropout.get(layer).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingParams {
    pub config: EmbeddingConfig,
    /// `fan_in × fan_out` per layer.
    pub weights: Vec<Tensor>,
    /// `1 × fan_out` per layer.
    pub biases: Vec<Tensor>,
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(config: &EmbeddingConfig, seed: u64) -> Result<EmbeddingParams> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut fan_in = config.input_dim;
    for &fan_out in &config.widths {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
        weights.push(Tensor::matrix(fan_in, fan_out, data)?);
        biases.push(Tensor::zeros(&[1, fan_out]));
        fan_in = fan_out;
    }
    Ok(EmbeddingParams {
        config: config.clone(),
        weights,
        biases,
    })
}

/// Graph handles for bound embedding parameters.
#[derive(Clone, Debug)]
pub struct BoundEmbedding {
    pub weights: Vec<NodeId>,
    pub biases: Vec<NodeId>,
}

impl EmbeddingParams {
    pub fn output_dim(&self) -> usize {
        self.config.output_dim()
    }

    pub fn layers(&self) -> usize {
        self.weights.len()
    }

    /// Tensors in a fixed order with stable names.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers());
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            out.push((format!("embed.w{i}"), w));
            out.push((format!("embed.b{i}"), b));
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::with_capacity(2 * self.layers());
        for (i, (w, b)) in self.weights.iter_mut().zip(self.biases.iter_mut()).enumerate() {
            out.push((format!("embed.w{i}"), w));
            out.push((format!("embed.b{i}"), b));
        }
        out
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundEmbedding {
        let leaf = |g: &mut Graph, t: &Tensor| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        BoundEmbedding {
            weights: self.weights.iter().map(|w| leaf(g, w)).collect(),
            biases: self.biases.iter().map(|b| leaf(g, b)).collect(),
        }
    }
}

/// `φ(inputs)`. Dropout masks are drawn from `dropout_rng` when given and
/// skipped entirely otherwise.
pub fn forward(
    g: &mut Graph,
    params: &EmbeddingParams,
    bound: &BoundEmbedding,
    inputs: NodeId,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeId> {
    let shape = g.shape(inputs).to_vec();
    if shape.len() != 2 || shape[1] != params.config.input_dim {
        return Err(Error::Dimension {
            op: "embed",
            lhs: shape,
            rhs: vec![0, params.config.input_dim],
        });
    }
    let rows = shape[0];
    let mut h = inputs;
    let mut previous = None;
    for layer in 0..params.layers() {
        let z = g.matmul(h, bound.weights[layer])?;
        let z = g.add(z, bound.biases[layer])?;
        let mut a = g.leaky_relu(z, LEAKY_SLOPE);
        let p = params.config.dropout_rate(layer);
        if let (Some(rng), true) = (dropout_rng.as_deref_mut(), p > 0.0) {
            let width = params.config.widths[layer];
            let keep = 1.0 / (1.0 - p);
            let mask: Vec<f64> = (0..rows * width)
                .map(|_| if rng.random_bool(1.0 - p) { keep } else { 0.0 })
                .collect();
            let mask = g.constant(Tensor::matrix(rows, width, mask)?);
            a = g.mul(a, mask)?;
        }
        previous = Some(h);
        h = a;
    }
    if params.config.concat_active() {
        let second_last = previous.expect("at least two layers");
        return g.concat_cols(&[second_last, h]);
    }
    Ok(h)
}

/// Eval-mode embedding of a plain tensor, without gradients.
pub fn embed(params: &EmbeddingParams, inputs: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(inputs.clone());
    let out = forward(&mut g, params, &bound, x, None)?;
    Ok(g.value(out).clone())
}
