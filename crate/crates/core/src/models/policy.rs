use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Vocabulary, embedding width and recurrent width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub embed: usize,
    pub hidden: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.embed == 0 || self.hidden == 0 {
            return Err(Error::invalid(format!("model dimensions must be >= 1, got {self:?}")));
        }
        Ok(())
    }
}

/// Parameters of the recurrent policy:
///
/// ```text
/// h' = tanh(A·e + B·h + c)
/// ℓ  = W·h'
/// v  = v_w·h' + v_b
/// ```
///
/// `A` is stored output-major (`hidden × embed`) so that `A·e` is a plain
/// matrix-vector product.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    /// `vocab × embed`
    pub embedding: Tensor,
    /// `hidden × embed`
    pub input_map: Tensor,
    /// `hidden × hidden`
    pub state_map: Tensor,
    /// `hidden`
    pub bias: Tensor,
    /// `vocab × hidden`
    pub output_head: Tensor,
    /// `hidden`
    pub value_weight: Tensor,
    /// scalar
    pub value_bias: Tensor,
}

pub const PARAM_NAMES: [&str; 7] = [
    "embedding",
    "input_map",
    "state_map",
    "bias",
    "output_head",
    "value_weight",
    "value_bias",
];

impl PolicyParams {
    pub fn zeros(dims: ModelDims) -> Self {
        let ModelDims { vocab, embed, hidden } = dims;
        PolicyParams {
            embedding: Tensor::zeros(&[vocab, embed]),
            input_map: Tensor::zeros(&[hidden, embed]),
            state_map: Tensor::zeros(&[hidden, hidden]),
            bias: Tensor::zeros(&[hidden]),
            output_head: Tensor::zeros(&[vocab, hidden]),
            value_weight: Tensor::zeros(&[hidden]),
            value_bias: Tensor::scalar(0.0),
        }
    }

    /// Uniform `[−s, s]` entries with `s = scale / √fan_in`; zero value head.
    pub fn init(dims: ModelDims, scale: f64, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut p = PolicyParams::zeros(dims);
        let fan_ins = [dims.vocab, dims.embed, dims.hidden, dims.hidden, dims.hidden];
        let tensors = [
            &mut p.embedding,
            &mut p.input_map,
            &mut p.state_map,
            &mut p.bias,
            &mut p.output_head,
        ];
        for (t, fan_in) in tensors.into_iter().zip(fan_ins) {
            let s = scale / (fan_in as f64).sqrt();
            for v in t.data_mut() {
                *v = rng.uniform_range(-s, s);
            }
        }
        Ok(p)
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            vocab: self.embedding.rows(),
            embed: self.embedding.cols(),
            hidden: self.state_map.rows(),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 7] {
        [
            &self.embedding,
            &self.input_map,
            &self.state_map,
            &self.bias,
            &self.output_head,
            &self.value_weight,
            &self.value_bias,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 7] {
        [
            &mut self.embedding,
            &mut self.input_map,
            &mut self.state_map,
            &mut self.bias,
            &mut self.output_head,
            &mut self.value_weight,
            &mut self.value_bias,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// All entries in field order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors().iter().map(|t| t.squared_norm()).sum()
    }

    /// `self += alpha · other`
    pub fn add_scaled(&mut self, other: &PolicyParams, alpha: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= alpha);
        }
    }

    /// Records every tensor on `g`, as leaves when `trainable`, else constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> PolicyVars {
        let mut put = |t: &Tensor| {
            if trainable {
                g.leaf(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        PolicyVars {
            embedding: put(&self.embedding),
            input_map: put(&self.input_map),
            state_map: put(&self.state_map),
            bias: put(&self.bias),
            output_head: put(&self.output_head),
            value_weight: put(&self.value_weight),
            value_bias: put(&self.value_bias),
            dims: self.dims(),
        }
    }
}

/// Policy parameters as recorded on a graph.
#[derive(Clone, Copy, Debug)]
pub struct PolicyVars {
    pub embedding: Var,
    pub input_map: Var,
    pub state_map: Var,
    pub bias: Var,
    pub output_head: Var,
    pub value_weight: Var,
    pub value_bias: Var,
    pub dims: ModelDims,
}

impl PolicyVars {
    pub fn vars(&self) -> [Var; 7] {
        [
            self.embedding,
            self.input_map,
            self.state_map,
            self.bias,
            self.output_head,
            self.value_weight,
            self.value_bias,
        ]
    }

    /// Gradients shaped like the parameters; zeros where nothing flowed.
    pub fn gradients(&self, grads: &Gradients) -> PolicyParams {
        let [e, a, b, c, w, vw, vb] = self.vars().map(|v| grads.wrt(v));
        PolicyParams {
            embedding: e,
            input_map: a,
            state_map: b,
            bias: c,
            output_head: w,
            value_weight: vw,
            value_bias: vb,
        }
    }

    pub fn zero_hidden(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[self.dims.hidden]))
    }
}

/// One recurrent step: returns `(logits, hidden')`.
pub fn policy_step(g: &mut Graph, p: &PolicyVars, prev_embedding: Var, hidden: Var) -> Result<(Var, Var)> {
    let ae = g.matvec(p.input_map, prev_embedding)?;
    let bh = g.matvec(p.state_map, hidden)?;
    let pre = g.add(ae, bh)?;
    let pre = g.add(pre, p.bias)?;
    let next = g.tanh(pre);
    let logits = g.matvec(p.output_head, next)?;
    Ok((logits, next))
}

/// `tokenᵀ E`: the convex combination of embedding rows.
pub fn soft_embed(g: &mut Graph, token: Var, embedding: Var) -> Result<Var> {
    g.vecmat(token, embedding)
}

/// `v_w · hidden + v_b`
pub fn value_estimate(g: &mut Graph, p: &PolicyVars, hidden: Var) -> Result<Var> {
    let d = g.dot(p.value_weight, hidden)?;
    g.add(d, p.value_bias)
}
