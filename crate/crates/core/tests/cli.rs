use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

const SMALL: &str = "[task]\nfamily = kofv\nvocab_size = 4\nk = 1\nnum_prompts = 4\n\
                     [trainer]\nprompts_per_step = 4\ngroup_size = 4\nepochs = 3\nseed = 2\n";

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_grpo-lab"));
    c.env_remove("GRPO_LAB_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn write_config(dir: &TempDir, name: &str, text: &str) -> String {
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

fn subdirs(root: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(root)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    v
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_a_self_describing_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.ini", SMALL);
    let out = dir.path().join("out");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let runs = subdirs(&out);
    assert_eq!(runs.len(), 1);
    let run_dir = &runs[0];
    assert!(run_dir
        .file_name()
        .unwrap()
        .to_str()
        .unwrap()
        .starts_with("train-"));
    for f in ["config.ini", "metrics.csv", "timing.csv", "summary.csv"] {
        assert!(run_dir.join(f).is_file(), "missing {f}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 1 + 3, "one row per step");

    // rerunning the snapshot reproduces the metrics byte-for-byte
    let snapshot = run_dir.join("config.ini");
    let out2 = dir.path().join("out2");
    let o = run(&[
        "train",
        "--config",
        snapshot.to_str().unwrap(),
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let again = std::fs::read(subdirs(&out2)[0].join("metrics.csv")).unwrap();
    assert_eq!(again, metrics.as_bytes());
}

#[test]
fn seed_flag_changes_the_run() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.ini", SMALL);
    let out = dir.path().join("out");
    let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&[
        "train",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "99",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let runs = subdirs(&out);
    assert_eq!(runs.len(), 2, "second run gets its own directory");
    let a = std::fs::read(runs[0].join("metrics.csv")).unwrap();
    let b = std::fs::read(runs[1].join("metrics.csv")).unwrap();
    assert_ne!(a, b);
    let snap = std::fs::read_to_string(runs[1].join("config.ini")).unwrap();
    assert!(snap.contains("seed = 99"));
}

#[test]
fn output_root_from_environment() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.ini", SMALL);
    let root = dir.path().join("env-root");
    let o = bin()
        .args(["train", "--config", &cfg])
        .env("GRPO_LAB_OUT", &root)
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(subdirs(&root).len(), 1);
}

#[test]
fn config_errors_exit_two_with_field_names() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let cases = [
        (
            "[trainer]\ngroup_size = 1\n",
            "trainer.group_size: group size must be ≥ 2",
        ),
        (
            "[trainer]\nlearning_rate = 1\n",
            "trainer.learning_rate: unknown key",
        ),
        ("[task]\nfamily = kofv\nk = 0\n", "task.k"),
        (
            "[objective]\nkind = two_grpo\n",
            "two_grpo requires group size 2",
        ),
    ];
    for (i, (text, message)) in cases.iter().enumerate() {
        let cfg = write_config(&dir, &format!("bad{i}.ini"), text);
        let o = run(&["train", "--config", &cfg, "--out", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(2), "{text}");
        assert!(stderr(&o).contains(message), "{}", stderr(&o));
    }
    let o = run(&["train", "--config", "/nonexistent/c.ini"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.exists(), "no work before validation");
}

#[test]
fn verify_subcommands() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();

    let o = run(&[
        "verify",
        "advantage-limits",
        "--p",
        "0.5",
        "--g",
        "2",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    assert!(stdout(&o).contains("[PASS] advantage-limits"));

    let o = run(&["verify", "hard-question", "--schedule", "0.5", "--out", out]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("equality case"));

    let o = run(&[
        "verify",
        "hard-question",
        "--schedule",
        "0.5,0.1",
        "--trials",
        "1000",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("out-of-assumption"));

    let o = run(&[
        "verify",
        "finite-difference",
        "--objective",
        "dpo",
        "--instances",
        "2",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(0));

    let o = run(&["verify", "no-such-check", "--out", out]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&[
        "verify",
        "finite-difference",
        "--objective",
        "nope",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(2));

    // a deliberately unattainable tolerance setting fails the check
    let o = run(&[
        "verify",
        "advantage-limits",
        "--p",
        "0.5",
        "--g",
        "2",
        "--n",
        "50",
        "--adv-eps",
        "10",
        "--out",
        out,
    ]);
    assert_eq!(o.status.code(), Some(1));

    let checks: Vec<PathBuf> = subdirs(Path::new(out))
        .into_iter()
        .map(|d| d.join("checks.csv"))
        .collect();
    assert!(checks.iter().all(|c| c.is_file()));
    let text = std::fs::read_to_string(&checks[0]).unwrap();
    assert!(text.starts_with(
        "check,parameters,label,estimate,target,std_error,tolerance,row_status,check_status"
    ));
}

#[test]
fn sweep_budget_matched_and_fixed() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.ini", SMALL);
    let out = dir.path().join("out");
    let o = run(&[
        "sweep",
        "--config",
        &cfg,
        "--groups",
        "4,2",
        "--budget",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let sweep = &subdirs(&out)[0];
    let table = std::fs::read_to_string(sweep.join("comparison.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 2);
    assert_eq!((rows[0][0], rows[0][1]), ("2", "8"));
    assert_eq!((rows[1][0], rows[1][1]), ("4", "4"));
    assert_eq!(rows[0][3], rows[1][3], "equal rollout totals");
    assert!(sweep.join("G2/metrics.csv").is_file() && sweep.join("G4/config.ini").is_file());

    let out2 = dir.path().join("out2");
    let o = run(&[
        "sweep",
        "--config",
        &cfg,
        "--groups",
        "2,4,8,16",
        "--fixed-q",
        "2",
        "--out",
        out2.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let table = std::fs::read_to_string(subdirs(&out2)[0].join("comparison.csv")).unwrap();
    let per_step: Vec<u64> = table
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            f[3].parse::<u64>().unwrap() / f[4].parse::<u64>().unwrap()
        })
        .collect();
    assert_eq!(per_step, vec![4, 8, 16, 32]);

    let o = run(&[
        "sweep",
        "--config",
        &cfg,
        "--groups",
        "3",
        "--budget",
        "16",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("not divisible"));
}

#[test]
fn report_tabulates_and_flags_corrupt_inputs() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(&dir, "c.ini", SMALL);
    let out = dir.path().join("out");
    let o = run(&[
        "sweep",
        "--config",
        &cfg,
        "--groups",
        "2,4",
        "--budget",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let sweep = subdirs(&out)[0].clone();
    let before = std::fs::read(sweep.join("G2/metrics.csv")).unwrap();

    let rep = dir.path().join("rep");
    let g2 = sweep.join("G2");
    let g4 = sweep.join("G4");
    let o = run(&[
        "report",
        g2.to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let o = run(&[
        "report",
        g2.to_str().unwrap(),
        g4.to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    let reports = subdirs(&rep);
    let one = std::fs::read_to_string(reports[0].join("report.csv")).unwrap();
    let two = std::fs::read_to_string(reports[1].join("report.csv")).unwrap();
    assert_eq!(one.lines().count(), 2);
    assert_eq!(two.lines().count(), 3);
    assert!(two
        .lines()
        .next()
        .unwrap()
        .ends_with("relative_budget,delta_reward"));

    let corrupt = dir.path().join("corrupt");
    std::fs::create_dir(&corrupt).unwrap();
    std::fs::write(corrupt.join("metrics.csv"), "not,a,metrics\nfile\n").unwrap();
    let o = run(&[
        "report",
        g2.to_str().unwrap(),
        corrupt.to_str().unwrap(),
        "--out",
        rep.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("corrupt/metrics.csv"), "{}", stderr(&o));
    assert!(stdout(&o).contains("G2"));

    assert_eq!(
        std::fs::read(sweep.join("G2/metrics.csv")).unwrap(),
        before,
        "report never mutates runs"
    );
}

#[test]
fn shipped_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in std::fs::read_dir(root).unwrap() {
        let path = entry.unwrap().path();
        let text = std::fs::read_to_string(&path).unwrap();
        grpo_lab::config::RunConfig::from_ini_str(&text)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    }
}
