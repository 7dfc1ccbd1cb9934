//! Gumbel noise, the Gumbel-Softmax relaxation, straight-through
//! combination, the sparse top-k variant, hard Gumbel-max sampling and the
//! linear temperature schedule.
//!
//! Argmax ties go to the lowest index everywhere in this module.

use crate::autograd::{argmax, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;

const SIMPLEX_TOL: f64 = 1e-9;

fn check_simplex(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::invalid("simplex must be non-empty"));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::invalid(format!("simplex has a negative or non-finite weight: {weights:?}")));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!("simplex weights sum to {total}")));
    }
    Ok(())
}

/// Nonnegative weights over the vocabulary that sum to one.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexVector {
    weights: Vec<f64>,
}

impl SimplexVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        check_simplex(&weights)?;
        Ok(SimplexVector { weights })
    }

    pub fn one_hot(len: usize, index: usize) -> Self {
        SimplexVector {
            weights: Tensor::one_hot(len, index).into_data(),
        }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.weights)
    }

    /// True when exactly one entry is 1 and the rest are 0.
    pub fn is_one_hot(&self) -> bool {
        self.weights.iter().filter(|&&w| w == 1.0).count() == 1
            && self.weights.iter().all(|&w| w == 0.0 || w == 1.0)
    }
}

/// The retained `(index, weight)` pairs of a top-k relaxed token.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseSimplex {
    indices: Vec<usize>,
    weights: Vec<f64>,
}

impl SparseSimplex {
    pub fn new(indices: Vec<usize>, weights: Vec<f64>, vocab: usize) -> Result<Self> {
        if indices.len() != weights.len() {
            return Err(Error::invalid("sparse simplex indices and weights differ in length"));
        }
        let mut seen = indices.clone();
        seen.sort_unstable();
        seen.dedup();
        if seen.len() != indices.len() {
            return Err(Error::invalid(format!("duplicate indices in {indices:?}")));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= vocab) {
            return Err(Error::invalid(format!("index {bad} outside vocabulary of {vocab}")));
        }
        check_simplex(&weights)?;
        Ok(SparseSimplex { indices, weights })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn to_dense(&self, vocab: usize) -> SimplexVector {
        let mut w = vec![0.0; vocab];
        for (&i, &v) in self.indices.iter().zip(&self.weights) {
            w[i] = v;
        }
        SimplexVector { weights: w }
    }
}

/// Linear decay from `tau_start` to `tau_end` over `anneal_steps`, then flat.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TemperatureSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub anneal_steps: usize,
}

impl TemperatureSchedule {
    pub fn new(tau_start: f64, tau_end: f64, anneal_steps: usize) -> Result<Self> {
        let s = TemperatureSchedule {
            tau_start,
            tau_end,
            anneal_steps,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn constant(tau: f64) -> Result<Self> {
        TemperatureSchedule::new(tau, tau, 1)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau_end > 0.0 && self.tau_start >= self.tau_end) {
            return Err(Error::invalid(format!(
                "temperature schedule needs tau_start >= tau_end > 0, got {} -> {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.anneal_steps == 0 {
            return Err(Error::invalid("anneal_steps must be positive"));
        }
        Ok(())
    }

    pub fn temperature(&self, step: usize) -> f64 {
        if step >= self.anneal_steps {
            return self.tau_end;
        }
        let frac = step as f64 / self.anneal_steps as f64;
        self.tau_start - frac * (self.tau_start - self.tau_end)
    }
}

/// `-ln(-ln u)` for `u` in the open unit interval.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

pub fn gumbel_noise(rng: &mut Rng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| gumbel_from_uniform(rng.open_uniform())).collect())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    Ok(())
}

/// `softmax((logits + noise) / tau)`, differentiable in `logits`. The noise
/// enters as a constant.
pub fn gumbel_softmax(g: &mut Graph, logits: Var, noise: &Tensor, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let n = g.constant(noise.clone());
    let shifted = g.add(logits, n)?;
    let scaled = g.scale(shifted, 1.0 / tau);
    g.softmax(scaled)
}

/// Value-only Gumbel-Softmax.
pub fn gumbel_softmax_values(logits: &[f64], noise: &[f64], tau: f64) -> Result<SimplexVector> {
    let mut g = Graph::new();
    let l = g.constant(Tensor::vector(logits.to_vec()));
    let y = gumbel_softmax(&mut g, l, &Tensor::vector(noise.to_vec()), tau)?;
    SimplexVector::new(g.value(y).data().to_vec())
}

/// Forward value is the one-hot argmax of `soft`; the backward pass hands
/// the incoming gradient to `soft` unchanged.
///
/// Equivalent to `hard − stop_gradient(soft) + soft`, recorded as a single
/// primitive so the forward value is exactly one-hot rather than off by
/// rounding in `(1 − s) + s`.
pub fn straight_through(g: &mut Graph, soft: Var) -> Result<Var> {
    g.straight_through(soft)
}

/// Indices of the `k` largest logits, largest first, ties to the lower index.
pub fn top_k_indices(logits: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > logits.len() {
        return Err(Error::invalid(format!(
            "top-k needs 1 <= k <= {}, got {k}",
            logits.len()
        )));
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    Ok(order)
}

/// A top-k relaxed token living in a graph.
#[derive(Clone, Debug)]
pub struct SparseToken {
    pub indices: Vec<usize>,
    /// Length-k weights aligned with `indices`.
    pub weights: Var,
}

impl SparseToken {
    pub fn to_simplex(&self, g: &Graph, vocab: usize) -> Result<SparseSimplex> {
        SparseSimplex::new(self.indices.clone(), g.value(self.weights).data().to_vec(), vocab)
    }

    /// Scatter the weights back to a dense vocabulary-length vector.
    pub fn dense(&self, g: &mut Graph, vocab: usize) -> Result<Var> {
        g.scatter(self.weights, self.indices.clone(), vocab)
    }
}

/// Gumbel-Softmax restricted to the `k` largest noiseless logits.
///
/// `noise` has length `k` and is matched position-by-position to the
/// retained indices.
pub fn topk_gumbel_softmax(
    g: &mut Graph,
    logits: Var,
    k: usize,
    noise: &Tensor,
    tau: f64,
) -> Result<SparseToken> {
    let indices = top_k_indices(g.value(logits).data(), k)?;
    if noise.len() != k {
        return Err(Error::Shape {
            op: "topk_gumbel_softmax",
            shapes: format!("noise {:?} for k = {k}", noise.shape()),
        });
    }
    let picked = g.gather(logits, indices.clone())?;
    let weights = gumbel_softmax(g, picked, noise, tau)?;
    Ok(SparseToken { indices, weights })
}

/// Gumbel-max categorical draw: `argmax(logits + g)`.
pub fn sample_hard(logits: &[f64], rng: &mut Rng) -> usize {
    let noise = gumbel_noise(rng, logits.len());
    let perturbed: Vec<f64> = logits.iter().zip(noise.data()).map(|(l, n)| l + n).collect();
    argmax(&perturbed)
}
