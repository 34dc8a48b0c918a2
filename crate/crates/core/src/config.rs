//! Sectioned `key = value` run configuration.
//!
//! ```text
//! [task]
//! family = needle
//! vocab_size = 8
//! seq_len = 2
//! k = 2
//! num_prompts = 20
//! seed = 0
//!
//! [objective]
//! kind = grpo
//! clip_eps = 0.2
//! ...
//! ```
//!
//! `family` is `needle` or `kofv` (`k` only matters for the latter) and
//! `kind` is one of `vpg`, `ppo`, `grpo`, `two_grpo`, `dpo`.
//! Missing keys take their defaults, unknown sections or keys are errors,
//! and [`RunConfig::to_ini_string`] writes every field so a snapshot fully
//! determines a run.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{LabError, Result};
use crate::objectives::{ObjectiveKind, ObjectiveSpec, SurrogateForm, VpgForm};
use crate::tasks::{make_kofv_task, make_needle_task, TaskSpec};
use crate::trainer::{LrScaling, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    Needle,
    KOfV,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskConfig {
    pub family: TaskFamily,
    pub vocab_size: usize,
    pub seq_len: usize,
    /// Correct tokens per position for k-of-V tasks.
    pub k: usize,
    pub num_prompts: usize,
    /// Seed for the needle positions; k-of-V tasks are deterministic.
    pub seed: u64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            family: TaskFamily::Needle,
            vocab_size: 8,
            seq_len: 2,
            k: 2,
            num_prompts: 20,
            seed: 0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(LabError::config("task.vocab_size", "must be ≥ 2"));
        }
        if self.seq_len == 0 {
            return Err(LabError::config("task.seq_len", "must be ≥ 1"));
        }
        if self.num_prompts == 0 {
            return Err(LabError::config("task.num_prompts", "must be ≥ 1"));
        }
        if self.family == TaskFamily::KOfV && !(1..self.vocab_size).contains(&self.k) {
            return Err(LabError::config(
                "task.k",
                "must satisfy 1 ≤ k < vocab_size",
            ));
        }
        Ok(())
    }

    pub fn build(&self) -> Result<TaskSpec> {
        self.validate()?;
        match self.family {
            TaskFamily::Needle => make_needle_task(
                self.vocab_size,
                self.seq_len,
                self.num_prompts,
                &mut ChaCha8Rng::seed_from_u64(self.seed),
            ),
            TaskFamily::KOfV => {
                make_kofv_task(self.vocab_size, self.seq_len, self.k, self.num_prompts)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    /// The objective's group size always mirrors `trainer.group_size`.
    pub objective: ObjectiveSpec,
    pub trainer: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskConfig::default(),
            objective: ObjectiveSpec::default(),
            trainer: TrainConfig::default(),
            output_dir: PathBuf::from("runs"),
        }
    }
}

const TASK_KEYS: &[&str] = &[
    "family",
    "vocab_size",
    "seq_len",
    "k",
    "num_prompts",
    "seed",
];
const OBJECTIVE_KEYS: &[&str] = &[
    "kind",
    "clip_eps",
    "adv_eps",
    "beta",
    "ppo_baseline",
    "surrogate_form",
    "vpg_form",
];
const TRAINER_KEYS: &[&str] = &[
    "prompts_per_step",
    "group_size",
    "base_lr",
    "lr_scaling",
    "reference_prompts",
    "epochs",
    "steps_per_epoch",
    "seed",
    "optimizer",
    "adam_beta1",
    "adam_beta2",
    "adam_delta",
    "warmup_steps",
    "updates_per_batch",
];
const OUTPUT_KEYS: &[&str] = &["dir"];

fn kind_name(kind: ObjectiveKind) -> &'static str {
    match kind {
        ObjectiveKind::Vpg => "vpg",
        ObjectiveKind::Ppo => "ppo",
        ObjectiveKind::Grpo => "grpo",
        ObjectiveKind::TwoGrpo => "two_grpo",
        ObjectiveKind::Dpo => "dpo",
    }
}

/// Looks up `section.key`, parsing it when present.
struct Section<'a> {
    name: &'a str,
    props: Option<&'a ini::Properties>,
}

impl Section<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.props.and_then(|p| p.get(key)).map(str::trim)
    }

    fn field(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn parse<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s
                .parse()
                .map_err(|_| LabError::config(self.field(key), format!("cannot parse {s:?}"))),
        }
    }

    fn choice<T: Copy>(&self, key: &str, default: T, options: &[(&str, T)]) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => options
                .iter()
                .find(|(name, _)| name.eq_ignore_ascii_case(s))
                .map(|(_, v)| *v)
                .ok_or_else(|| {
                    let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
                    LabError::config(
                        self.field(key),
                        format!("expected one of {}, got {s:?}", names.join("|")),
                    )
                }),
        }
    }

    /// `none`/`auto` maps to `None`.
    fn optional<T: FromStr>(&self, key: &str, default: Option<T>) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) if s.eq_ignore_ascii_case("none") || s.eq_ignore_ascii_case("auto") => Ok(None),
            Some(s) => s
                .parse()
                .map(Some)
                .map_err(|_| LabError::config(self.field(key), format!("cannot parse {s:?}"))),
        }
    }
}

impl RunConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini =
            Ini::load_from_str(text).map_err(|e| LabError::config("config", e.to_string()))?;
        for (section, props) in ini.iter() {
            let allowed = match section {
                None => {
                    if let Some((key, _)) = props.iter().next() {
                        return Err(LabError::config(key, "key outside of any section"));
                    }
                    continue;
                }
                Some("task") => TASK_KEYS,
                Some("objective") => OBJECTIVE_KEYS,
                Some("trainer") => TRAINER_KEYS,
                Some("output") => OUTPUT_KEYS,
                Some(other) => return Err(LabError::config(other, "unknown section")),
            };
            let name = section.unwrap_or_default();
            for (key, _) in props.iter() {
                if !allowed.contains(&key) {
                    return Err(LabError::config(format!("{name}.{key}"), "unknown key"));
                }
                if props.get_all(key).count() > 1 {
                    return Err(LabError::config(format!("{name}.{key}"), "duplicate key"));
                }
            }
        }
        let section = |name| Section {
            name,
            props: ini.section(Some(name)),
        };

        let t = section("task");
        let td = TaskConfig::default();
        let task = TaskConfig {
            family: t.choice(
                "family",
                td.family,
                &[("needle", TaskFamily::Needle), ("kofv", TaskFamily::KOfV)],
            )?,
            vocab_size: t.parse("vocab_size", td.vocab_size)?,
            seq_len: t.parse("seq_len", td.seq_len)?,
            k: t.parse("k", td.k)?,
            num_prompts: t.parse("num_prompts", td.num_prompts)?,
            seed: t.parse("seed", td.seed)?,
        };

        let r = section("trainer");
        let rd = TrainConfig::default();
        let optimizer = match r.choice("optimizer", "adam", &[("sgd", "sgd"), ("adam", "adam")])? {
            "sgd" => {
                for key in ["adam_beta1", "adam_beta2", "adam_delta"] {
                    if r.raw(key).is_some() {
                        return Err(LabError::config(
                            r.field(key),
                            "only valid with optimizer = adam",
                        ));
                    }
                }
                OptimizerKind::Sgd
            }
            _ => OptimizerKind::Adam {
                beta1: r.parse("adam_beta1", 0.9)?,
                beta2: r.parse("adam_beta2", 0.999)?,
                delta: r.parse("adam_delta", 1e-8)?,
            },
        };
        let trainer = TrainConfig {
            prompts_per_step: r.parse("prompts_per_step", rd.prompts_per_step)?,
            group_size: r.parse("group_size", rd.group_size)?,
            base_lr: r.parse("base_lr", rd.base_lr)?,
            lr_scaling: r.choice(
                "lr_scaling",
                rd.lr_scaling,
                &[("none", LrScaling::None), ("linear", LrScaling::Linear)],
            )?,
            reference_prompts: r.parse("reference_prompts", rd.reference_prompts)?,
            epochs: r.parse("epochs", rd.epochs)?,
            steps_per_epoch: r.optional("steps_per_epoch", rd.steps_per_epoch)?,
            seed: r.parse("seed", rd.seed)?,
            optimizer,
            warmup_steps: r.parse("warmup_steps", rd.warmup_steps)?,
            updates_per_batch: r.parse("updates_per_batch", rd.updates_per_batch)?,
        };

        let o = section("objective");
        let od = ObjectiveSpec::default();
        let objective = ObjectiveSpec {
            kind: o.choice(
                "kind",
                od.kind,
                &[
                    ("vpg", ObjectiveKind::Vpg),
                    ("ppo", ObjectiveKind::Ppo),
                    ("grpo", ObjectiveKind::Grpo),
                    ("two_grpo", ObjectiveKind::TwoGrpo),
                    ("dpo", ObjectiveKind::Dpo),
                ],
            )?,
            clip_eps: o.parse("clip_eps", od.clip_eps)?,
            adv_eps: o.parse("adv_eps", od.adv_eps)?,
            group_size: trainer.group_size,
            beta: o.parse("beta", od.beta)?,
            ppo_baseline: o.optional("ppo_baseline", od.ppo_baseline)?,
            surrogate_form: o.choice(
                "surrogate_form",
                od.surrogate_form,
                &[
                    ("probability", SurrogateForm::Probability),
                    ("ratio", SurrogateForm::Ratio),
                ],
            )?,
            vpg_form: o.choice(
                "vpg_form",
                od.vpg_form,
                &[
                    ("log_prob", VpgForm::LogProb),
                    ("literal", VpgForm::Literal),
                ],
            )?,
        };

        let output_dir = section("output")
            .raw("dir")
            .map(PathBuf::from)
            .unwrap_or_else(|| RunConfig::default().output_dir);

        let config = RunConfig {
            task,
            objective,
            trainer,
            output_dir,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_ini_str(&text)
    }

    /// Validates every section before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.trainer.validate()?;
        self.objective.validate()?;
        if self.objective.group_size != self.trainer.group_size {
            return Err(LabError::config(
                "trainer.group_size",
                "objective and trainer disagree",
            ));
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(LabError::config("output.dir", "must not be empty"));
        }
        Ok(())
    }

    /// Sets the group size of both the trainer and the objective.
    pub fn set_group_size(&mut self, g: usize) {
        self.trainer.group_size = g;
        self.objective.group_size = g;
    }

    /// Complete snapshot; parsing it back yields an equal config.
    pub fn to_ini_string(&self) -> String {
        let t = &self.task;
        let o = &self.objective;
        let r = &self.trainer;
        let mut s = String::new();
        s.push_str("[task]\n");
        s.push_str(&format!(
            "family = {}\n",
            match t.family {
                TaskFamily::Needle => "needle",
                TaskFamily::KOfV => "kofv",
            }
        ));
        s.push_str(&format!("vocab_size = {}\n", t.vocab_size));
        s.push_str(&format!("seq_len = {}\n", t.seq_len));
        s.push_str(&format!("k = {}\n", t.k));
        s.push_str(&format!("num_prompts = {}\n", t.num_prompts));
        s.push_str(&format!("seed = {}\n", t.seed));

        s.push_str("\n[objective]\n");
        s.push_str(&format!("kind = {}\n", kind_name(o.kind)));
        s.push_str(&format!("clip_eps = {:?}\n", o.clip_eps));
        s.push_str(&format!("adv_eps = {:?}\n", o.adv_eps));
        s.push_str(&format!("beta = {:?}\n", o.beta));
        match o.ppo_baseline {
            Some(b) => s.push_str(&format!("ppo_baseline = {b:?}\n")),
            None => s.push_str("ppo_baseline = none\n"),
        }
        s.push_str(&format!(
            "surrogate_form = {}\n",
            match o.surrogate_form {
                SurrogateForm::Probability => "probability",
                SurrogateForm::Ratio => "ratio",
            }
        ));
        s.push_str(&format!(
            "vpg_form = {}\n",
            match o.vpg_form {
                VpgForm::LogProb => "log_prob",
                VpgForm::Literal => "literal",
            }
        ));

        s.push_str("\n[trainer]\n");
        s.push_str(&format!("prompts_per_step = {}\n", r.prompts_per_step));
        s.push_str(&format!("group_size = {}\n", r.group_size));
        s.push_str(&format!("base_lr = {:?}\n", r.base_lr));
        s.push_str(&format!(
            "lr_scaling = {}\n",
            match r.lr_scaling {
                LrScaling::None => "none",
                LrScaling::Linear => "linear",
            }
        ));
        s.push_str(&format!("reference_prompts = {}\n", r.reference_prompts));
        s.push_str(&format!("epochs = {}\n", r.epochs));
        match r.steps_per_epoch {
            Some(n) => s.push_str(&format!("steps_per_epoch = {n}\n")),
            None => s.push_str("steps_per_epoch = auto\n"),
        }
        s.push_str(&format!("seed = {}\n", r.seed));
        match r.optimizer {
            OptimizerKind::Sgd => s.push_str("optimizer = sgd\n"),
            OptimizerKind::Adam {
                beta1,
                beta2,
                delta,
            } => {
                s.push_str("optimizer = adam\n");
                s.push_str(&format!("adam_beta1 = {beta1:?}\n"));
                s.push_str(&format!("adam_beta2 = {beta2:?}\n"));
                s.push_str(&format!("adam_delta = {delta:?}\n"));
            }
        }
        s.push_str(&format!("warmup_steps = {}\n", r.warmup_steps));
        s.push_str(&format!("updates_per_batch = {}\n", r.updates_per_batch));

        s.push_str("\n[output]\n");
        s.push_str(&format!("dir = {}\n", self.output_dir.display()));
        s
    }
}
