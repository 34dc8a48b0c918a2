//! Tabular autoregressive softmax policy.
//!
//! The distribution at position `t` of a response to prompt `q` is
//! `softmax(logits[q][t][..])`, independent of the tokens emitted before `t`.
//! Every sequence-level quantity (success probability, sequence likelihood,
//! their gradients) therefore has a closed form.

use rand::Rng;

use crate::error::{LabError, Result};

/// Logit table indexed by `(prompt, position, token)`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    num_prompts: usize,
    seq_len: usize,
    vocab_size: usize,
    logits: Vec<f64>,
}

/// One sampled response together with the per-token probabilities of the
/// policy that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: usize,
    pub tokens: Vec<usize>,
    pub token_probs: Vec<f64>,
}

/// Flat gradient aligned index-for-index with [`PolicyParams::logits`].
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector(pub Vec<f64>);

/// Numerically stable softmax of one logit slice.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

impl PolicyParams {
    /// All-zero logits: the uniform policy.
    pub fn uniform(num_prompts: usize, seq_len: usize, vocab_size: usize) -> Result<Self> {
        Self::check_shape(num_prompts, seq_len, vocab_size)?;
        Ok(Self {
            num_prompts,
            seq_len,
            vocab_size,
            logits: vec![0.0; num_prompts * seq_len * vocab_size],
        })
    }

    pub fn from_logits(
        num_prompts: usize,
        seq_len: usize,
        vocab_size: usize,
        logits: Vec<f64>,
    ) -> Result<Self> {
        Self::check_shape(num_prompts, seq_len, vocab_size)?;
        let expected = num_prompts * seq_len * vocab_size;
        if logits.len() != expected {
            return Err(LabError::DimensionMismatch(format!(
                "expected {expected} logits, got {}",
                logits.len()
            )));
        }
        if logits.iter().any(|l| !l.is_finite()) {
            return Err(LabError::invalid("logits must be finite"));
        }
        Ok(Self {
            num_prompts,
            seq_len,
            vocab_size,
            logits,
        })
    }

    /// Logits drawn uniformly from `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(
        num_prompts: usize,
        seq_len: usize,
        vocab_size: usize,
        scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let n = num_prompts * seq_len * vocab_size;
        let logits = (0..n).map(|_| rng.gen_range(-scale..=scale)).collect();
        Self::from_logits(num_prompts, seq_len, vocab_size, logits)
    }

    fn check_shape(num_prompts: usize, seq_len: usize, vocab_size: usize) -> Result<()> {
        if num_prompts == 0 || seq_len == 0 || vocab_size == 0 {
            return Err(LabError::invalid(
                "num_prompts, seq_len and vocab_size must be positive",
            ));
        }
        Ok(())
    }

    pub fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn dim(&self) -> usize {
        self.logits.len()
    }

    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    fn offset(&self, prompt: usize, position: usize) -> usize {
        (prompt * self.seq_len + position) * self.vocab_size
    }

    /// The logit slice for `(prompt, position)`.
    pub fn slice(&self, prompt: usize, position: usize) -> &[f64] {
        let o = self.offset(prompt, position);
        &self.logits[o..o + self.vocab_size]
    }

    /// Next-token distribution at `(prompt, position)`.
    pub fn probs(&self, prompt: usize, position: usize) -> Vec<f64> {
        softmax(self.slice(prompt, position))
    }

    pub fn token_prob(&self, prompt: usize, position: usize, token: usize) -> f64 {
        self.probs(prompt, position)[token]
    }

    /// `logits += scale * grad`.
    pub fn add_scaled(&mut self, grad: &GradientVector, scale: f64) -> Result<()> {
        if grad.0.len() != self.logits.len() {
            return Err(LabError::DimensionMismatch(format!(
                "gradient has {} entries, parameters have {}",
                grad.0.len(),
                self.logits.len()
            )));
        }
        for (l, g) in self.logits.iter_mut().zip(&grad.0) {
            *l += scale * g;
        }
        Ok(())
    }

    pub(crate) fn logits_mut(&mut self) -> &mut [f64] {
        &mut self.logits
    }

    pub fn check_prompt(&self, prompt: usize) -> Result<()> {
        if prompt >= self.num_prompts {
            return Err(LabError::invalid(format!(
                "prompt id {prompt} out of range (num_prompts = {})",
                self.num_prompts
            )));
        }
        Ok(())
    }

    /// Verifies that `traj` indexes into this table.
    pub fn check_trajectory(&self, traj: &Trajectory) -> Result<()> {
        self.check_prompt(traj.prompt)?;
        if traj.tokens.len() != self.seq_len {
            return Err(LabError::DimensionMismatch(format!(
                "trajectory has {} tokens, policy seq_len is {}",
                traj.tokens.len(),
                self.seq_len
            )));
        }
        if let Some(&bad) = traj.tokens.iter().find(|&&v| v >= self.vocab_size) {
            return Err(LabError::DimensionMismatch(format!(
                "token id {bad} >= vocab_size {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

impl Trajectory {
    /// Builds a trajectory for a fixed token sequence, recording the token
    /// probabilities of `params` as if `params` had generated it.
    pub fn scored(params: &PolicyParams, prompt: usize, tokens: Vec<usize>) -> Result<Self> {
        let mut traj = Trajectory {
            prompt,
            tokens,
            token_probs: Vec::new(),
        };
        params.check_trajectory(&traj)?;
        traj.token_probs = traj
            .tokens
            .iter()
            .enumerate()
            .map(|(t, &v)| params.token_prob(prompt, t, v))
            .collect();
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl GradientVector {
    pub fn zeros(dim: usize) -> Self {
        GradientVector(vec![0.0; dim])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn dot(&self, other: &GradientVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &GradientVector, scale: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.0 {
            *a *= s;
        }
    }
}

/// Draws one response to `prompt`, one token per position.
pub fn sample_trajectory<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: usize,
    rng: &mut R,
) -> Result<Trajectory> {
    params.check_prompt(prompt)?;
    let mut tokens = Vec::with_capacity(params.seq_len);
    let mut token_probs = Vec::with_capacity(params.seq_len);
    let mut probs = vec![0.0; params.vocab_size];
    for t in 0..params.seq_len {
        softmax_into(params.slice(prompt, t), &mut probs);
        let v = draw_categorical(&probs, rng);
        tokens.push(v);
        token_probs.push(probs[v]);
    }
    Ok(Trajectory {
        prompt,
        tokens,
        token_probs,
    })
}

fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (v, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = v;
        }
        acc += p;
        if u < acc {
            return v;
        }
    }
    // u landed in the rounding gap above the accumulated mass
    last_positive
}

/// Length-normalized token-probability mean `(1/T) Σ_t π(o_t)` under the
/// current parameters.
pub fn sequence_avg_prob(params: &PolicyParams, traj: &Trajectory) -> Result<f64> {
    params.check_trajectory(traj)?;
    let total: f64 = traj
        .tokens
        .iter()
        .enumerate()
        .map(|(t, &v)| params.token_prob(traj.prompt, t, v))
        .sum();
    Ok(total / traj.len() as f64)
}

/// `Σ_t log π(o_t)`: the log-likelihood of the full sequence.
pub fn sequence_log_prob(params: &PolicyParams, traj: &Trajectory) -> Result<f64> {
    params.check_trajectory(traj)?;
    Ok(traj
        .tokens
        .iter()
        .enumerate()
        .map(|(t, &v)| {
            let slice = params.slice(traj.prompt, t);
            let max = slice.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + slice.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            slice[v] - lse
        })
        .sum())
}

/// `∇ Σ_t log π(o_t)`: at every visited slice, `one_hot(o_t) - softmax`.
pub fn grad_log_prob(params: &PolicyParams, traj: &Trajectory) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros(params.dim());
    add_grad_log_prob(params, traj, 1.0, &mut grad)?;
    Ok(grad)
}

/// `grad += weight * ∇ Σ_t log π(o_t)`.
pub fn add_grad_log_prob(
    params: &PolicyParams,
    traj: &Trajectory,
    weight: f64,
    grad: &mut GradientVector,
) -> Result<()> {
    params.check_trajectory(traj)?;
    let mut probs = vec![0.0; params.vocab_size];
    for (t, &token) in traj.tokens.iter().enumerate() {
        softmax_into(params.slice(traj.prompt, t), &mut probs);
        let o = params.offset(traj.prompt, t);
        for (v, &p) in probs.iter().enumerate() {
            let one_hot = if v == token { 1.0 } else { 0.0 };
            grad.0[o + v] += weight * (one_hot - p);
        }
    }
    Ok(())
}

/// Gradient of [`sequence_avg_prob`]: per token `(1/T) π(o_t) (one_hot - softmax)`.
pub fn grad_avg_prob(params: &PolicyParams, traj: &Trajectory) -> Result<GradientVector> {
    let mut grad = GradientVector::zeros(params.dim());
    add_grad_avg_prob(params, traj, 1.0, &mut grad)?;
    Ok(grad)
}

/// `grad += weight * ∇ sequence_avg_prob`.
pub fn add_grad_avg_prob(
    params: &PolicyParams,
    traj: &Trajectory,
    weight: f64,
    grad: &mut GradientVector,
) -> Result<()> {
    let token_weights = vec![1.0; traj.len()];
    add_weighted_token_prob_grads(
        params,
        traj,
        &token_weights,
        weight / traj.len() as f64,
        grad,
    )
}

/// `grad += weight * Σ_t token_weights[t] * ∇ π(o_t)`.
pub(crate) fn add_weighted_token_prob_grads(
    params: &PolicyParams,
    traj: &Trajectory,
    token_weights: &[f64],
    weight: f64,
    grad: &mut GradientVector,
) -> Result<()> {
    params.check_trajectory(traj)?;
    let mut probs = vec![0.0; params.vocab_size];
    for (t, &token) in traj.tokens.iter().enumerate() {
        let w = weight * token_weights[t];
        if w == 0.0 {
            continue;
        }
        softmax_into(params.slice(traj.prompt, t), &mut probs);
        let o = params.offset(traj.prompt, t);
        let pt = probs[token];
        for (v, &p) in probs.iter().enumerate() {
            let one_hot = if v == token { 1.0 } else { 0.0 };
            grad.0[o + v] += w * pt * (one_hot - p);
        }
    }
    Ok(())
}
