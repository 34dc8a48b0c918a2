//! Synthetic verifiable-reward tasks with closed-form success probabilities.

use rand::Rng;

use crate::error::{LabError, Result};
use crate::policy::{PolicyParams, Trajectory};

/// Largest explicit correct set that `success_probability` will enumerate.
pub const MAX_ENUMERATED_SEQUENCES: usize = 1 << 20;

/// The set of accepted responses for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub enum CorrectSet {
    /// Cartesian product of per-position accepted-token masks.
    Product(Vec<Vec<bool>>),
    /// Explicit list of accepted sequences.
    Explicit(Vec<Vec<usize>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSpec {
    vocab_size: usize,
    seq_len: usize,
    correct: Vec<CorrectSet>,
}

impl CorrectSet {
    pub fn contains(&self, tokens: &[usize]) -> bool {
        match self {
            CorrectSet::Product(masks) => tokens.iter().zip(masks).all(|(&v, m)| m[v]),
            CorrectSet::Explicit(seqs) => seqs.iter().any(|s| s == tokens),
        }
    }
}

impl TaskSpec {
    /// Validates and builds a task. Every prompt's correct set must be a
    /// nonempty strict subset of all `V^T` sequences.
    pub fn new(vocab_size: usize, seq_len: usize, correct: Vec<CorrectSet>) -> Result<Self> {
        if vocab_size < 2 || seq_len == 0 {
            return Err(LabError::invalid(
                "tasks need vocab_size >= 2 and seq_len >= 1",
            ));
        }
        if correct.is_empty() {
            return Err(LabError::invalid("tasks need at least one prompt"));
        }
        for (q, set) in correct.iter().enumerate() {
            match set {
                CorrectSet::Product(masks) => {
                    if masks.len() != seq_len || masks.iter().any(|m| m.len() != vocab_size) {
                        return Err(LabError::DimensionMismatch(format!(
                            "prompt {q}: product mask must be {seq_len} x {vocab_size}"
                        )));
                    }
                    if masks.iter().any(|m| !m.iter().any(|&a| a)) {
                        return Err(LabError::invalid(format!(
                            "prompt {q}: empty accepted-token set"
                        )));
                    }
                    if masks.iter().all(|m| m.iter().all(|&a| a)) {
                        return Err(LabError::invalid(format!(
                            "prompt {q}: every sequence is accepted"
                        )));
                    }
                }
                CorrectSet::Explicit(seqs) => {
                    if seqs.is_empty() {
                        return Err(LabError::invalid(format!("prompt {q}: empty correct set")));
                    }
                    if seqs
                        .iter()
                        .any(|s| s.len() != seq_len || s.iter().any(|&v| v >= vocab_size))
                    {
                        return Err(LabError::DimensionMismatch(format!(
                            "prompt {q}: sequence outside the {vocab_size}^{seq_len} space"
                        )));
                    }
                    let mut distinct = seqs.clone();
                    distinct.sort();
                    distinct.dedup();
                    let total = (vocab_size as f64).powi(seq_len as i32);
                    if distinct.len() as f64 >= total {
                        return Err(LabError::invalid(format!(
                            "prompt {q}: every sequence is accepted"
                        )));
                    }
                }
            }
        }
        Ok(Self {
            vocab_size,
            seq_len,
            correct,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn num_prompts(&self) -> usize {
        self.correct.len()
    }

    pub fn correct_set(&self, prompt: usize) -> &CorrectSet {
        &self.correct[prompt]
    }

    /// A uniform policy shaped for this task.
    pub fn uniform_policy(&self) -> PolicyParams {
        PolicyParams::uniform(self.num_prompts(), self.seq_len, self.vocab_size)
            .expect("task dimensions are validated at construction")
    }

    pub fn check_policy(&self, params: &PolicyParams) -> Result<()> {
        if params.num_prompts() != self.num_prompts()
            || params.seq_len() != self.seq_len
            || params.vocab_size() != self.vocab_size
        {
            return Err(LabError::DimensionMismatch(format!(
                "policy is {}x{}x{}, task is {}x{}x{}",
                params.num_prompts(),
                params.seq_len(),
                params.vocab_size(),
                self.num_prompts(),
                self.seq_len,
                self.vocab_size
            )));
        }
        Ok(())
    }
}

/// Binary verifiable reward: 1 iff the response is in the prompt's correct set.
pub fn reward(task: &TaskSpec, traj: &Trajectory) -> Result<f64> {
    if traj.prompt >= task.num_prompts() {
        return Err(LabError::invalid(format!(
            "prompt id {} out of range",
            traj.prompt
        )));
    }
    if traj.tokens.len() != task.seq_len || traj.tokens.iter().any(|&v| v >= task.vocab_size) {
        return Err(LabError::DimensionMismatch(
            "trajectory does not fit the task's sequence space".into(),
        ));
    }
    Ok(if task.correct[traj.prompt].contains(&traj.tokens) {
        1.0
    } else {
        0.0
    })
}

/// Exact probability that one rollout on `prompt` is correct.
pub fn success_probability(task: &TaskSpec, params: &PolicyParams, prompt: usize) -> Result<f64> {
    task.check_policy(params)?;
    params.check_prompt(prompt)?;
    match &task.correct[prompt] {
        CorrectSet::Product(masks) => Ok(masks
            .iter()
            .enumerate()
            .map(|(t, mask)| {
                params
                    .probs(prompt, t)
                    .iter()
                    .zip(mask)
                    .filter(|(_, &a)| a)
                    .map(|(p, _)| p)
                    .sum::<f64>()
            })
            .product()),
        CorrectSet::Explicit(seqs) => {
            if seqs.len() > MAX_ENUMERATED_SEQUENCES {
                return Err(LabError::Unsupported(format!(
                    "explicit correct set of {} sequences is too large to enumerate",
                    seqs.len()
                )));
            }
            let probs: Vec<Vec<f64>> = (0..task.seq_len).map(|t| params.probs(prompt, t)).collect();
            let mut distinct = seqs.clone();
            distinct.sort();
            distinct.dedup();
            Ok(distinct
                .iter()
                .map(|s| {
                    s.iter()
                        .enumerate()
                        .map(|(t, &v)| probs[t][v])
                        .product::<f64>()
                })
                .sum())
        }
    }
}

/// Mean exact success probability over every prompt of the task.
pub fn mean_success_probability(task: &TaskSpec, params: &PolicyParams) -> Result<f64> {
    let mut total = 0.0;
    for q in 0..task.num_prompts() {
        total += success_probability(task, params, q)?;
    }
    Ok(total / task.num_prompts() as f64)
}

/// One random correct sequence per prompt, stored as a product of singletons.
pub fn make_needle_task<R: Rng + ?Sized>(
    vocab_size: usize,
    seq_len: usize,
    num_prompts: usize,
    rng: &mut R,
) -> Result<TaskSpec> {
    if vocab_size < 2 || seq_len == 0 || num_prompts == 0 {
        return Err(LabError::invalid(
            "needle task needs vocab_size >= 2, seq_len >= 1, num_prompts >= 1",
        ));
    }
    let correct = (0..num_prompts)
        .map(|_| {
            CorrectSet::Product(
                (0..seq_len)
                    .map(|_| {
                        let needle = rng.gen_range(0..vocab_size);
                        (0..vocab_size).map(|v| v == needle).collect()
                    })
                    .collect(),
            )
        })
        .collect();
    TaskSpec::new(vocab_size, seq_len, correct)
}

/// `k` accepted tokens at every position; the accepted window is rotated by
/// prompt and position so prompts differ.
pub fn make_kofv_task(
    vocab_size: usize,
    seq_len: usize,
    k: usize,
    num_prompts: usize,
) -> Result<TaskSpec> {
    if k == 0 || k >= vocab_size {
        return Err(LabError::invalid(format!(
            "k-of-V task needs 1 <= k < V (got k = {k}, V = {vocab_size})"
        )));
    }
    if seq_len == 0 || num_prompts == 0 {
        return Err(LabError::invalid(
            "k-of-V task needs seq_len >= 1, num_prompts >= 1",
        ));
    }
    let correct = (0..num_prompts)
        .map(|q| {
            CorrectSet::Product(
                (0..seq_len)
                    .map(|t| {
                        let start = (q + t) % vocab_size;
                        let mut mask = vec![false; vocab_size];
                        for j in 0..k {
                            mask[(start + j) % vocab_size] = true;
                        }
                        mask
                    })
                    .collect(),
            )
        })
        .collect();
    TaskSpec::new(vocab_size, seq_len, correct)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::sample_trajectory;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_sequences(v: usize, t: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![]];
        for _ in 0..t {
            out = out
                .into_iter()
                .flat_map(|s| {
                    (0..v).map(move |tok| {
                        let mut s = s.clone();
                        s.push(tok);
                        s
                    })
                })
                .collect();
        }
        out
    }

    #[test]
    fn needle_rewards() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let task = make_needle_task(4, 2, 1, &mut rng).unwrap();
        let p = task.uniform_policy();
        let CorrectSet::Product(masks) = task.correct_set(0) else {
            panic!("needle tasks are product form")
        };
        let needle: Vec<usize> = masks
            .iter()
            .map(|m| m.iter().position(|&a| a).unwrap())
            .collect();
        let hit = Trajectory::scored(&p, 0, needle.clone()).unwrap();
        assert_eq!(reward(&task, &hit).unwrap(), 1.0);
        for seq in all_sequences(4, 2) {
            if seq != needle {
                let miss = Trajectory::scored(&p, 0, seq).unwrap();
                assert_eq!(reward(&task, &miss).unwrap(), 0.0);
            }
        }
    }

    #[test]
    fn product_form_matches_explicit_enumeration() {
        let masks = vec![vec![true, false, true], vec![false, true, false]];
        let product = TaskSpec::new(3, 2, vec![CorrectSet::Product(masks.clone())]).unwrap();
        let explicit_set: Vec<Vec<usize>> = all_sequences(3, 2)
            .into_iter()
            .filter(|s| masks[0][s[0]] && masks[1][s[1]])
            .collect();
        assert_eq!(explicit_set, vec![vec![0, 1], vec![2, 1]]);
        let explicit = TaskSpec::new(3, 2, vec![CorrectSet::Explicit(explicit_set)]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = PolicyParams::random(1, 2, 3, 1.5, &mut rng).unwrap();
        for seq in all_sequences(3, 2) {
            let traj = Trajectory::scored(&p, 0, seq).unwrap();
            assert_eq!(
                reward(&product, &traj).unwrap(),
                reward(&explicit, &traj).unwrap()
            );
        }
        let a = success_probability(&product, &p, 0).unwrap();
        let b = success_probability(&explicit, &p, 0).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn closed_form_success_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let needle = make_needle_task(4, 2, 1, &mut rng).unwrap();
        assert_eq!(
            success_probability(&needle, &needle.uniform_policy(), 0).unwrap(),
            0.0625
        );
        let k = make_kofv_task(8, 1, 2, 3).unwrap();
        for q in 0..3 {
            assert_eq!(
                success_probability(&k, &k.uniform_policy(), q).unwrap(),
                0.25
            );
        }
        let k = make_kofv_task(4, 3, 1, 2).unwrap();
        assert_eq!(
            success_probability(&k, &k.uniform_policy(), 1).unwrap(),
            0.015625
        );
    }

    #[test]
    fn success_probability_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let task = TaskSpec::new(
            3,
            2,
            vec![CorrectSet::Product(vec![
                vec![true, true, false],
                vec![false, true, false],
            ])],
        )
        .unwrap();
        let p = PolicyParams::random(1, 2, 3, 1.0, &mut rng).unwrap();
        let exact = success_probability(&task, &p, 0).unwrap();
        let n = 1_000_000;
        let hits: f64 = (0..n)
            .map(|_| reward(&task, &sample_trajectory(&p, 0, &mut rng).unwrap()).unwrap())
            .sum();
        let se = (exact * (1.0 - exact) / n as f64).sqrt();
        assert!((hits / n as f64 - exact).abs() < 3.0 * se);
    }

    #[test]
    fn constructors_are_reproducible_and_validated() {
        let a = make_needle_task(4, 2, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = make_needle_task(4, 2, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        assert!(make_kofv_task(4, 2, 0, 1).is_err());
        assert!(make_kofv_task(4, 2, 4, 1).is_err());
        assert!(make_needle_task(1, 2, 1, &mut ChaCha8Rng::seed_from_u64(5)).is_err());
    }

    #[test]
    fn invalid_correct_sets_are_rejected() {
        assert!(TaskSpec::new(2, 1, vec![CorrectSet::Product(vec![vec![true, true]])]).is_err());
        assert!(TaskSpec::new(2, 1, vec![CorrectSet::Product(vec![vec![false, false]])]).is_err());
        assert!(TaskSpec::new(2, 1, vec![CorrectSet::Explicit(vec![vec![0], vec![1]])]).is_err());
        assert!(TaskSpec::new(2, 1, vec![CorrectSet::Explicit(vec![])]).is_err());
    }

    #[test]
    fn reward_rejects_mismatched_trajectories() {
        let task = make_kofv_task(4, 2, 1, 1).unwrap();
        let bad = Trajectory {
            prompt: 0,
            tokens: vec![0],
            token_probs: vec![0.25],
        };
        assert!(reward(&task, &bad).is_err());
    }
}
