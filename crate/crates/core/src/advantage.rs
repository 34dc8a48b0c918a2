//! Intra-group reward normalization and its closed-form limits.

use crate::error::{LabError, Result};
use crate::policy::Trajectory;

/// Default denominator guard for [`group_normalize`].
pub const DEFAULT_ADV_EPS: f64 = 1e-6;

/// `G` rollouts of one prompt and their binary rewards.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub prompt: usize,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<f64>,
}

/// Per-trajectory advantages of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageVector(pub Vec<f64>);

/// Which conditional-expectation limit to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LimitMode {
    /// Group size tending to infinity: `(x - p) / sqrt(p (1 - p))`.
    LargeGroup,
    /// Groups of two: `x - p`.
    Pairwise,
}

impl RolloutGroup {
    pub fn new(prompt: usize, trajectories: Vec<Trajectory>, rewards: Vec<f64>) -> Result<Self> {
        if trajectories.len() != rewards.len() {
            return Err(LabError::invalid(format!(
                "{} trajectories but {} rewards",
                trajectories.len(),
                rewards.len()
            )));
        }
        if rewards.len() < 2 {
            return Err(LabError::invalid("group size must be >= 2"));
        }
        if rewards.iter().any(|&r| r != 0.0 && r != 1.0) {
            return Err(LabError::invalid("rewards must be 0 or 1"));
        }
        if let Some(t) = trajectories.iter().find(|t| t.prompt != prompt) {
            return Err(LabError::invalid(format!(
                "trajectory for prompt {} placed in group for prompt {prompt}",
                t.prompt
            )));
        }
        Ok(Self {
            prompt,
            trajectories,
            rewards,
        })
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }

    pub fn num_correct(&self) -> usize {
        self.rewards.iter().filter(|&&r| r == 1.0).count()
    }

    /// Fraction of correct rollouts, `G⁺ / G`.
    pub fn p_hat(&self) -> f64 {
        self.num_correct() as f64 / self.size() as f64
    }

    /// All rewards identical.
    pub fn is_degenerate(&self) -> bool {
        let c = self.num_correct();
        c == 0 || c == self.size()
    }
}

impl AdvantageVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `A_i = (r_i - mean(r)) / (std(r) + eps)` with the population standard
/// deviation. Uniform groups map to exact zeros.
pub fn group_normalize(rewards: &[f64], eps: f64) -> Result<AdvantageVector> {
    let g = rewards.len();
    if g < 2 {
        return Err(LabError::invalid("group size must be >= 2"));
    }
    if !eps.is_finite() || eps < 0.0 {
        return Err(LabError::invalid("advantage eps must be finite and >= 0"));
    }
    if rewards.iter().all(|&r| r == rewards[0]) {
        return Ok(AdvantageVector(vec![0.0; g]));
    }
    let mean = rewards.iter().sum::<f64>() / g as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / g as f64;
    let denom = var.sqrt() + eps;
    Ok(AdvantageVector(
        rewards.iter().map(|r| (r - mean) / denom).collect(),
    ))
}

/// Advantages of a two-rollout group: `(1, -1)`, `(-1, 1)` or `(0, 0)`.
pub fn pair_advantage(r1: f64, r2: f64) -> (f64, f64) {
    if r1 > r2 {
        (1.0, -1.0)
    } else if r1 < r2 {
        (-1.0, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Closed-form limit of `E[Y | X = x]` for the requested grouping.
pub fn theoretical_advantage_limit(x: f64, p: f64, mode: LimitMode) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(LabError::invalid(format!("p must lie in (0, 1), got {p}")));
    }
    Ok(match mode {
        LimitMode::Pairwise => x - p,
        LimitMode::LargeGroup => (x - p) / (p * (1.0 - p)).sqrt(),
    })
}

/// Closed-form `(A⁺, A⁻)` of a mixed binary group with correct fraction
/// `p_hat`, including the `σ̂ / (σ̂ + eps)` shrinkage.
pub fn binary_advantages(p_hat: f64, eps: f64) -> Result<(f64, f64)> {
    if !(p_hat > 0.0 && p_hat < 1.0) {
        return Err(LabError::invalid(
            "p_hat must lie in (0, 1) for a mixed group",
        ));
    }
    let sigma = (p_hat * (1.0 - p_hat)).sqrt();
    let shrink = sigma / (sigma + eps);
    Ok((
        ((1.0 - p_hat) / p_hat).sqrt() * shrink,
        -(p_hat / (1.0 - p_hat)).sqrt() * shrink,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_pair_and_uniform() {
        let a = group_normalize(&[1.0, 0.0], 1e-12).unwrap();
        assert!((a.0[0] - 1.0).abs() < 1e-11 && (a.0[1] + 1.0).abs() < 1e-11);
        assert_eq!(group_normalize(&[1.0; 4], 1e-6).unwrap().0, vec![0.0; 4]);
        assert_eq!(group_normalize(&[0.0; 3], 0.0).unwrap().0, vec![0.0; 3]);
    }

    #[test]
    fn normalize_matches_closed_form_at_quarter() {
        let a = group_normalize(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0], 0.0).unwrap();
        let plus = 3f64.sqrt();
        let minus = -1.0 / 3f64.sqrt();
        for (i, &x) in a.0.iter().enumerate() {
            let target = if [0, 3].contains(&i) { plus } else { minus };
            assert!((x - target).abs() < 1e-15, "{i}: {x} vs {target}");
        }
        assert!((plus - 1.7321).abs() < 1e-4 && (minus + 0.5774).abs() < 1e-4);
    }

    #[test]
    fn normalize_rejects_small_groups() {
        assert!(group_normalize(&[1.0], 1e-6).is_err());
        assert!(group_normalize(&[1.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn pair_cases() {
        assert_eq!(pair_advantage(1.0, 0.0), (1.0, -1.0));
        assert_eq!(pair_advantage(0.0, 0.0), (0.0, 0.0));
        assert_eq!(pair_advantage(1.0, 1.0), (0.0, 0.0));
        let (a1, a2) = pair_advantage(0.0, 1.0);
        assert_eq!((a1, a2), (-1.0, 1.0));
        let n = group_normalize(&[0.0, 1.0], 1e-12).unwrap();
        assert!((n.0[0] - a1).abs() < 1e-11 && (n.0[1] - a2).abs() < 1e-11);
    }

    #[test]
    fn limit_cases() {
        use LimitMode::*;
        assert_eq!(
            theoretical_advantage_limit(1.0, 0.5, LargeGroup).unwrap(),
            1.0
        );
        assert_eq!(
            theoretical_advantage_limit(1.0, 0.5, Pairwise).unwrap(),
            0.5
        );
        let lg = theoretical_advantage_limit(0.0, 0.25, LargeGroup).unwrap();
        assert!((lg - (-0.25 / 0.1875f64.sqrt())).abs() < 1e-15);
        assert!((lg + 0.5774).abs() < 1e-4);
        assert_eq!(
            theoretical_advantage_limit(0.0, 0.25, Pairwise).unwrap(),
            -0.25
        );
        assert!(theoretical_advantage_limit(1.0, 0.0, Pairwise).is_err());
        assert!(theoretical_advantage_limit(1.0, 1.0, LargeGroup).is_err());
    }

    #[test]
    fn group_validation() {
        assert!(RolloutGroup::new(0, vec![], vec![]).is_err());
        let t = Trajectory {
            prompt: 0,
            tokens: vec![0],
            token_probs: vec![0.5],
        };
        assert!(RolloutGroup::new(0, vec![t.clone(), t.clone()], vec![1.0, 0.5]).is_err());
        assert!(RolloutGroup::new(1, vec![t.clone(), t.clone()], vec![1.0, 0.0]).is_err());
        let g = RolloutGroup::new(0, vec![t.clone(), t], vec![1.0, 0.0]).unwrap();
        assert_eq!(g.p_hat(), 0.5);
        assert!(!g.is_degenerate());
    }

    fn binary_group() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(
            prop::bool::ANY.prop_map(|b| if b { 1.0 } else { 0.0 }),
            2..64,
        )
    }

    proptest! {
        #[test]
        fn scaling_factor_identity(p in 1e-6f64..(1.0 - 1e-6), x in prop::bool::ANY) {
            let x = if x { 1.0 } else { 0.0 };
            let large = theoretical_advantage_limit(x, p, LimitMode::LargeGroup).unwrap();
            let pair = theoretical_advantage_limit(x, p, LimitMode::Pairwise).unwrap();
            prop_assert!((large - pair / (p * (1.0 - p)).sqrt()).abs() <= 1e-12 * large.abs().max(1.0));
        }

        #[test]
        fn signs_and_binary_structure(rewards in binary_group(), eps in 0.0f64..1e-3) {
            let adv = group_normalize(&rewards, eps).unwrap();
            let correct = rewards.iter().filter(|&&r| r == 1.0).count();
            let mixed = correct > 0 && correct < rewards.len();
            for (a, r) in adv.0.iter().zip(&rewards) {
                if !mixed {
                    prop_assert_eq!(*a, 0.0);
                } else if *r == 1.0 {
                    prop_assert!(*a > 0.0);
                } else {
                    prop_assert!(*a < 0.0);
                }
            }
            if mixed {
                let p_hat = correct as f64 / rewards.len() as f64;
                let (plus, minus) = binary_advantages(p_hat, eps).unwrap();
                for (a, r) in adv.0.iter().zip(&rewards) {
                    let target = if *r == 1.0 { plus } else { minus };
                    prop_assert!((a - target).abs() <= 1e-12 * target.abs().max(1.0));
                }
                let sum: f64 = adv.0.iter().sum();
                prop_assert!(sum.abs() <= 1e-12 * rewards.len() as f64);
            }
        }

        #[test]
        fn pair_normalization_converges(r1 in prop::bool::ANY, r2 in prop::bool::ANY, eps in 1e-12f64..1e-3) {
            let (r1, r2) = (r1 as u8 as f64, r2 as u8 as f64);
            let n = group_normalize(&[r1, r2], eps).unwrap();
            let (a1, a2) = pair_advantage(r1, r2);
            prop_assert!((n.0[0] - a1).abs() <= 2.0 * eps / 0.5);
            prop_assert!((n.0[1] - a2).abs() <= 2.0 * eps / 0.5);
        }
    }
}
