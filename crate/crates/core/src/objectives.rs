//! Policy-gradient objectives and their exact gradients.
//!
//! Every objective is exposed as a loss to minimize: the returned scalar is
//! the negated objective and the returned vector is its gradient with
//! respect to the logits. A gradient-descent step `θ ← θ - η g` therefore
//! ascends the underlying objective.
//!
//! The group-relative family uses the length-normalized token-probability
//! mean `(1/|o|) Σ_t π(o_t)` as its sequence score; preference optimization
//! uses the causal sequence likelihood `Π_t π(o_t)`.

use rayon::prelude::*;

use crate::advantage::{group_normalize, pair_advantage, RolloutGroup};
use crate::error::{LabError, Result};
use crate::policy::{
    add_grad_avg_prob, add_grad_log_prob, add_weighted_token_prob_grads, sequence_avg_prob,
    sequence_log_prob, GradientVector, PolicyParams, Trajectory,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveKind {
    Vpg,
    Ppo,
    Grpo,
    TwoGrpo,
    Dpo,
}

/// How the clipped surrogate turns a token's importance ratio into a loss term.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SurrogateForm {
    /// `min(ρ A, clip(ρ, 1-ε, 1+ε) A)` with `ρ = π_θ / π_old`. On-policy the
    /// gradient is the advantage-weighted score function `A ∇log π`.
    Ratio,
    /// The ratio term scaled by the behaviour probability `π_old`, i.e.
    /// `min(π_θ A, clip(π_θ, (1-ε)π_old, (1+ε)π_old) A)`. On-policy the
    /// gradient is `A ∇π`, the form the contrastive decomposition rewrites.
    Probability,
}

/// Score used by vanilla policy gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VpgForm {
    /// REINFORCE: `r Σ_t ∇log π(o_t)`.
    LogProb,
    /// `r Σ_t ∇π(o_t)`, without the logarithm. Kept for comparison only.
    Literal,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    pub clip_eps: f64,
    pub adv_eps: f64,
    pub group_size: usize,
    pub beta: f64,
    /// Constant baseline subtracted from rewards in PPO mode.
    pub ppo_baseline: Option<f64>,
    pub surrogate_form: SurrogateForm,
    pub vpg_form: VpgForm,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self {
            kind: ObjectiveKind::Grpo,
            clip_eps: 0.2,
            adv_eps: crate::advantage::DEFAULT_ADV_EPS,
            group_size: 16,
            beta: 0.1,
            ppo_baseline: None,
            surrogate_form: SurrogateForm::Probability,
            vpg_form: VpgForm::LogProb,
        }
    }
}

impl ObjectiveSpec {
    pub fn grpo(group_size: usize) -> Self {
        Self {
            group_size,
            ..Self::default()
        }
    }

    pub fn two_grpo() -> Self {
        Self {
            kind: ObjectiveKind::TwoGrpo,
            group_size: 2,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64, name: &str| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LabError::config(
                    format!("objective.{name}"),
                    "must be a positive finite number",
                ))
            }
        };
        match self.kind {
            ObjectiveKind::Grpo | ObjectiveKind::TwoGrpo | ObjectiveKind::Ppo => {
                positive(self.clip_eps, "clip_eps")?;
            }
            ObjectiveKind::Dpo => positive(self.beta, "beta")?,
            ObjectiveKind::Vpg => {}
        }
        if !(self.adv_eps >= 0.0 && self.adv_eps.is_finite()) {
            return Err(LabError::config(
                "objective.adv_eps",
                "must be finite and >= 0",
            ));
        }
        if self.group_size < 2 {
            return Err(LabError::config(
                "trainer.group_size",
                "group size must be ≥ 2",
            ));
        }
        if self.kind == ObjectiveKind::TwoGrpo && self.group_size != 2 {
            return Err(LabError::config(
                "trainer.group_size",
                "two_grpo requires group size 2",
            ));
        }
        if self.kind == ObjectiveKind::Ppo {
            match self.ppo_baseline {
                Some(b) if b.is_finite() => {}
                _ => {
                    return Err(LabError::config(
                        "objective.ppo_baseline",
                        "ppo requires a finite constant baseline",
                    ))
                }
            }
        }
        Ok(())
    }

    /// Per-trajectory advantages this objective assigns to `group`.
    pub fn advantages(&self, group: &RolloutGroup) -> Result<Vec<f64>> {
        match self.kind {
            ObjectiveKind::Grpo => Ok(group_normalize(&group.rewards, self.adv_eps)?.0),
            ObjectiveKind::TwoGrpo => {
                if group.size() != 2 {
                    return Err(LabError::invalid(format!(
                        "two_grpo needs groups of 2, got {}",
                        group.size()
                    )));
                }
                let (a, b) = pair_advantage(group.rewards[0], group.rewards[1]);
                Ok(vec![a, b])
            }
            ObjectiveKind::Ppo => {
                let baseline = self
                    .ppo_baseline
                    .ok_or_else(|| LabError::invalid("ppo requires a baseline"))?;
                Ok(group.rewards.iter().map(|r| r - baseline).collect())
            }
            ObjectiveKind::Vpg | ObjectiveKind::Dpo => Err(LabError::invalid(
                "advantages are only defined for the clipped-surrogate objectives",
            )),
        }
    }
}

/// Weights of a contrastive gradient `-(a ∇π(y⁺) - b ∇π(y⁻))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContrastiveCoefficients {
    pub a: f64,
    pub b: f64,
}

/// Inputs from which contrastive coefficients are derived.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CoefficientContext {
    /// Group-relative: empirical correct fraction of the group.
    Grpo { p_hat: f64 },
    /// Preference optimization: `σ' = σ(r̂(o⁻) - r̂(o⁺))` and the reference
    /// sequence likelihoods of both responses.
    Dpo {
        beta: f64,
        sigma_prime: f64,
        ref_prob_pos: f64,
        ref_prob_neg: f64,
    },
}

pub fn contrastive_coefficients(context: CoefficientContext) -> Result<ContrastiveCoefficients> {
    match context {
        CoefficientContext::Grpo { p_hat } => {
            if !(0.0..=1.0).contains(&p_hat) {
                return Err(LabError::invalid("p_hat must lie in [0, 1]"));
            }
            let w = (p_hat * (1.0 - p_hat)).sqrt();
            Ok(ContrastiveCoefficients { a: w, b: w })
        }
        CoefficientContext::Dpo {
            beta,
            sigma_prime,
            ref_prob_pos,
            ref_prob_neg,
        } => {
            if !(ref_prob_pos > 0.0 && ref_prob_neg > 0.0) {
                return Err(LabError::invalid(
                    "reference probabilities must be positive",
                ));
            }
            Ok(ContrastiveCoefficients {
                a: beta * sigma_prime / ref_prob_pos,
                b: beta * sigma_prime / ref_prob_neg,
            })
        }
    }
}

/// Sums per-item `(loss, gradient)` contributions in index order. Items are
/// evaluated in parallel; the reduction order is fixed so results do not
/// depend on the worker count.
fn reduce_ordered<T, F>(items: &[T], dim: usize, eval: F) -> Result<(f64, GradientVector)>
where
    T: Sync,
    F: Fn(usize, &T, &mut GradientVector) -> Result<f64> + Sync,
{
    let parts: Vec<(f64, GradientVector)> = items
        .par_iter()
        .enumerate()
        .map(|(j, item)| {
            let mut g = GradientVector::zeros(dim);
            let loss = eval(j, item, &mut g)?;
            Ok((loss, g))
        })
        .collect::<Result<_>>()?;
    let mut total = GradientVector::zeros(dim);
    let mut loss = 0.0;
    for (l, g) in &parts {
        loss += l;
        total.add_scaled(g, 1.0);
    }
    Ok((loss, total))
}

fn nonempty<T>(items: &[T], what: &str) -> Result<()> {
    if items.is_empty() {
        return Err(LabError::invalid(format!("{what} must be nonempty")));
    }
    Ok(())
}

/// Vanilla policy gradient on `(trajectory, reward)` pairs:
/// loss `-mean_i r_i log π(o_i)` (or `-mean_i r_i Σ_t π(o_{i,t})` in literal form).
pub fn vpg_objective(
    params: &PolicyParams,
    batch: &[(Trajectory, f64)],
    form: VpgForm,
) -> Result<(f64, GradientVector)> {
    nonempty(batch, "vpg batch")?;
    let n = batch.len() as f64;
    reduce_ordered(batch, params.dim(), |_, (traj, r), g| {
        let w = -r / n;
        match form {
            VpgForm::LogProb => {
                add_grad_log_prob(params, traj, w, g)?;
                Ok(w * sequence_log_prob(params, traj)?)
            }
            VpgForm::Literal => {
                let ones = vec![1.0; traj.len()];
                add_weighted_token_prob_grads(params, traj, &ones, w, g)?;
                Ok(w * sequence_avg_prob(params, traj)? * traj.len() as f64)
            }
        }
    })
}

pub fn vpg_gradient(
    params: &PolicyParams,
    batch: &[(Trajectory, f64)],
    form: VpgForm,
) -> Result<GradientVector> {
    Ok(vpg_objective(params, batch, form)?.1)
}

/// Clipped group-relative surrogate averaged as `1/Q Σ_j 1/G Σ_i 1/|o_i| Σ_t`.
///
/// Importance ratios use the probabilities recorded in each trajectory at
/// sampling time. When the clipped branch is strictly binding the token
/// contributes a constant and zero gradient; at the kink the unclipped
/// branch is taken.
pub fn grpo_surrogate(
    params: &PolicyParams,
    groups: &[RolloutGroup],
    spec: &ObjectiveSpec,
) -> Result<(f64, GradientVector)> {
    nonempty(groups, "groups")?;
    let q = groups.len() as f64;
    let lo = 1.0 - spec.clip_eps;
    let hi = 1.0 + spec.clip_eps;
    reduce_ordered(groups, params.dim(), |j, group, g| {
        let adv = spec.advantages(group)?;
        let scale = -1.0 / (q * group.size() as f64);
        let mut loss = 0.0;
        for (traj, &a) in group.trajectories.iter().zip(&adv) {
            if a == 0.0 {
                continue;
            }
            params.check_trajectory(traj)?;
            let len = traj.len() as f64;
            let mut token_weights = vec![0.0; traj.len()];
            for (t, &token) in traj.tokens.iter().enumerate() {
                let old = traj.token_probs[t];
                let ratio = params.token_prob(traj.prompt, t, token) / old;
                if !ratio.is_finite() {
                    return Err(LabError::NonFiniteRatio { group: j });
                }
                let unclipped = ratio * a;
                let clipped = ratio.clamp(lo, hi) * a;
                let (value, active) = if clipped < unclipped {
                    (clipped, false)
                } else {
                    (unclipped, true)
                };
                let (value, dvalue_dprob) = match spec.surrogate_form {
                    SurrogateForm::Ratio => (value, a / old),
                    SurrogateForm::Probability => (value * old, a),
                };
                loss += scale * value / len;
                if active {
                    token_weights[t] = dvalue_dprob / len;
                }
            }
            add_weighted_token_prob_grads(params, traj, &token_weights, scale, g)?;
        }
        Ok(loss)
    })
}

/// Contrastive rewrite of the group-relative objective:
/// `J = 1/Q Σ_j sqrt(p̂_j (1 - p̂_j)) (mean_{o⁺} π̄(o⁺) - mean_{o⁻} π̄(o⁻))`
/// with `π̄` the length-normalized token-probability mean. Degenerate groups
/// contribute nothing.
pub fn grpo_contrastive_objective(
    params: &PolicyParams,
    groups: &[RolloutGroup],
) -> Result<(f64, GradientVector)> {
    nonempty(groups, "groups")?;
    let q = groups.len() as f64;
    reduce_ordered(groups, params.dim(), |_, group, g| {
        if group.is_degenerate() {
            return Ok(0.0);
        }
        let coeffs = contrastive_coefficients(CoefficientContext::Grpo {
            p_hat: group.p_hat(),
        })?;
        let n_pos = group.num_correct() as f64;
        let n_neg = group.size() as f64 - n_pos;
        contrastive_terms(params, group, coeffs.a / n_pos, coeffs.b / n_neg, q, g)
    })
}

pub fn grpo_contrastive_gradient(
    params: &PolicyParams,
    groups: &[RolloutGroup],
) -> Result<GradientVector> {
    Ok(grpo_contrastive_objective(params, groups)?.1)
}

/// Adds `-(1/q)(w_pos Σ_{o⁺} ∇π̄ - w_neg Σ_{o⁻} ∇π̄)` and returns the matching loss.
fn contrastive_terms(
    params: &PolicyParams,
    group: &RolloutGroup,
    w_pos: f64,
    w_neg: f64,
    q: f64,
    g: &mut GradientVector,
) -> Result<f64> {
    let mut loss = 0.0;
    for (traj, &r) in group.trajectories.iter().zip(&group.rewards) {
        let w = if r == 1.0 { -w_pos / q } else { w_neg / q };
        add_grad_avg_prob(params, traj, w, g)?;
        loss += w * sequence_avg_prob(params, traj)?;
    }
    Ok(loss)
}

/// Two-rollout objective: `J = 1/Q Σ_pairs 1/2 (π̄(o⁺) - π̄(o⁻))` over mixed
/// pairs.
pub fn two_grpo_objective(
    params: &PolicyParams,
    groups: &[RolloutGroup],
) -> Result<(f64, GradientVector)> {
    nonempty(groups, "groups")?;
    if let Some((j, g)) = groups.iter().enumerate().find(|(_, g)| g.size() != 2) {
        return Err(LabError::invalid(format!(
            "two_grpo needs groups of 2; group {j} has {}",
            g.size()
        )));
    }
    let q = groups.len() as f64;
    reduce_ordered(groups, params.dim(), |_, group, g| {
        if group.is_degenerate() {
            return Ok(0.0);
        }
        contrastive_terms(params, group, 0.5, 0.5, q, g)
    })
}

pub fn two_grpo_gradient(params: &PolicyParams, groups: &[RolloutGroup]) -> Result<GradientVector> {
    Ok(two_grpo_objective(params, groups)?.1)
}

/// A preferred and a dispreferred response to the same prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceTriple {
    pub prompt: usize,
    pub chosen: Trajectory,
    pub rejected: Trajectory,
}

impl PreferenceTriple {
    pub fn new(chosen: Trajectory, rejected: Trajectory) -> Result<Self> {
        if chosen.prompt != rejected.prompt {
            return Err(LabError::invalid("preference pair spans two prompts"));
        }
        Ok(Self {
            prompt: chosen.prompt,
            chosen,
            rejected,
        })
    }
}

/// `-log σ(z)` computed without overflow.
fn neg_log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        (-z).exp().ln_1p()
    } else {
        -z + z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Implicit-reward margin `z = r̂(o⁺) - r̂(o⁻)` with `r̂ = β log(π_θ / π_ref)`.
fn dpo_margin(
    params: &PolicyParams,
    reference: &PolicyParams,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<f64> {
    let pos =
        sequence_log_prob(params, &triple.chosen)? - sequence_log_prob(reference, &triple.chosen)?;
    let neg = sequence_log_prob(params, &triple.rejected)?
        - sequence_log_prob(reference, &triple.rejected)?;
    Ok(beta * (pos - neg))
}

/// Mean preference loss `-log σ(z)` over triples and its gradient
/// `-β σ' (∇log π(o⁺) - ∇log π(o⁻))` with `σ' = σ(-z)`.
pub fn dpo_loss_and_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    triples: &[PreferenceTriple],
    beta: f64,
) -> Result<(f64, GradientVector)> {
    nonempty(triples, "preference triples")?;
    if params.dim() != reference.dim() {
        return Err(LabError::DimensionMismatch(
            "policy and reference shapes differ".into(),
        ));
    }
    let n = triples.len() as f64;
    reduce_ordered(triples, params.dim(), |_, triple, g| {
        let z = dpo_margin(params, reference, triple, beta)?;
        let w = beta * sigmoid(-z) / n;
        add_grad_log_prob(params, &triple.chosen, -w, g)?;
        add_grad_log_prob(params, &triple.rejected, w, g)?;
        Ok(neg_log_sigmoid(z) / n)
    })
}

/// Contrastive coefficients `(β σ' / π_ref(o⁺), β σ' / π_ref(o⁻))` of one triple.
pub fn dpo_coefficients(
    params: &PolicyParams,
    reference: &PolicyParams,
    triple: &PreferenceTriple,
    beta: f64,
) -> Result<ContrastiveCoefficients> {
    let z = dpo_margin(params, reference, triple, beta)?;
    contrastive_coefficients(CoefficientContext::Dpo {
        beta,
        sigma_prime: sigmoid(-z),
        ref_prob_pos: sequence_log_prob(reference, &triple.chosen)?.exp(),
        ref_prob_neg: sequence_log_prob(reference, &triple.rejected)?.exp(),
    })
}

/// Preference gradient written in contrastive form,
/// `-mean (a ∇π(o⁺) - b ∇π(o⁻))` with sequence likelihoods `π` and the
/// coefficients of [`dpo_coefficients`]. Agrees with
/// [`dpo_loss_and_gradient`] when the policy equals the reference.
pub fn dpo_contrastive_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    triples: &[PreferenceTriple],
    beta: f64,
) -> Result<GradientVector> {
    nonempty(triples, "preference triples")?;
    let n = triples.len() as f64;
    let (_, g) = reduce_ordered(triples, params.dim(), |_, triple, g| {
        let c = dpo_coefficients(params, reference, triple, beta)?;
        // ∇π(o) = π(o) ∇log π(o)
        let p_pos = sequence_log_prob(params, &triple.chosen)?.exp();
        let p_neg = sequence_log_prob(params, &triple.rejected)?.exp();
        add_grad_log_prob(params, &triple.chosen, -c.a * p_pos / n, g)?;
        add_grad_log_prob(params, &triple.rejected, c.b * p_neg / n, g)?;
        Ok(0.0)
    })?;
    Ok(g)
}

/// Pairs the i-th correct rollout with the i-th incorrect rollout of every
/// mixed group.
pub fn preference_triples(groups: &[RolloutGroup]) -> Vec<PreferenceTriple> {
    let mut out = Vec::new();
    for group in groups {
        let pos = group
            .trajectories
            .iter()
            .zip(&group.rewards)
            .filter(|(_, &r)| r == 1.0)
            .map(|(t, _)| t);
        let neg = group
            .trajectories
            .iter()
            .zip(&group.rewards)
            .filter(|(_, &r)| r == 0.0)
            .map(|(t, _)| t);
        for (p, n) in pos.zip(neg) {
            out.push(PreferenceTriple {
                prompt: group.prompt,
                chosen: p.clone(),
                rejected: n.clone(),
            });
        }
    }
    out
}

/// Loss and gradient of the configured objective on a batch of groups.
/// `reference` is only consulted by preference optimization; a batch with
/// no mixed group yields a zero loss and gradient there.
pub fn batch_loss_and_gradient(
    params: &PolicyParams,
    reference: &PolicyParams,
    groups: &[RolloutGroup],
    spec: &ObjectiveSpec,
) -> Result<(f64, GradientVector)> {
    match spec.kind {
        ObjectiveKind::Vpg => {
            let batch: Vec<(Trajectory, f64)> = groups
                .iter()
                .flat_map(|g| {
                    g.trajectories
                        .iter()
                        .cloned()
                        .zip(g.rewards.iter().copied())
                })
                .collect();
            vpg_objective(params, &batch, spec.vpg_form)
        }
        ObjectiveKind::Ppo | ObjectiveKind::Grpo | ObjectiveKind::TwoGrpo => {
            grpo_surrogate(params, groups, spec)
        }
        ObjectiveKind::Dpo => {
            let triples = preference_triples(groups);
            if triples.is_empty() {
                return Ok((0.0, GradientVector::zeros(params.dim())));
            }
            dpo_loss_and_gradient(params, reference, &triples, spec.beta)
        }
    }
}
