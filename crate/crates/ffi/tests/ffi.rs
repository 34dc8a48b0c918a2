use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use grpo_lab_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(grpo_last_error_message()) }
        .to_string_lossy()
        .into_owned()
}

#[test]
fn advantages_through_the_abi() {
    let rewards = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0];
    let mut out = [0.0; 8];
    let s = unsafe { grpo_group_normalize(rewards.as_ptr(), 8, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, GrpoStatus::Ok);
    assert!((out[0] - 3f64.sqrt()).abs() < 1e-15);
    assert!((out[1] + 1.0 / 3f64.sqrt()).abs() < 1e-15);

    let s = unsafe { grpo_group_normalize(rewards.as_ptr(), 1, 0.0, out.as_mut_ptr()) };
    assert_eq!(s, GrpoStatus::InvalidArgument);
    assert!(last_error().contains("group size"));

    let (mut a, mut b) = (0.0, 0.0);
    assert_eq!(
        unsafe { grpo_pair_advantage(0.0, 1.0, &mut a, &mut b) },
        GrpoStatus::Ok
    );
    assert_eq!((a, b), (-1.0, 1.0));

    let mut lim = 0.0;
    let large = GrpoLimitMode::LargeGroup as u32;
    assert_eq!(
        unsafe { grpo_advantage_limit(0.0, 0.25, large, &mut lim) },
        GrpoStatus::Ok
    );
    assert!((lim + 0.25 / 0.1875f64.sqrt()).abs() < 1e-15);
    assert_eq!(
        unsafe { grpo_advantage_limit(0.0, 0.25, 7, &mut lim) },
        GrpoStatus::InvalidArgument
    );
}

#[test]
fn lr_and_exploration_probabilities() {
    let mut lr = 0.0;
    assert_eq!(
        unsafe { grpo_lr_for_batch(1e-6, 32, 256, true, &mut lr) },
        GrpoStatus::Ok
    );
    assert!((lr - 8e-6).abs() < 1e-20);
    assert_eq!(
        unsafe { grpo_lr_for_batch(1e-6, 0, 256, true, &mut lr) },
        GrpoStatus::InvalidArgument
    );

    let schedule = [0.1, 0.2, 0.3, 0.4];
    let (mut p2m, mut pmx2) = (0.0, 0.0);
    let s = unsafe { grpo_hard_question_probabilities(schedule.as_ptr(), 4, &mut p2m, &mut pmx2) };
    assert_eq!(s, GrpoStatus::Ok);
    assert!((p2m - (1.0 - 0.9f64.powi(8))).abs() < 1e-15);
    assert!((pmx2 - (1.0 - (0.9f64 * 0.8 * 0.7 * 0.6).powi(2))).abs() < 1e-15);
    let s = unsafe { grpo_hard_question_probabilities(ptr::null(), 2, &mut p2m, &mut pmx2) };
    assert_eq!(s, GrpoStatus::NullPointer);
}

#[test]
fn handles_round_trip() {
    let mut task = ptr::null_mut();
    let mut policy = ptr::null_mut();
    unsafe {
        assert_eq!(grpo_task_new_needle(8, 2, 3, 5, &mut task), GrpoStatus::Ok);
        assert_eq!(
            grpo_policy_new_uniform(3, 2, 8, &mut policy),
            GrpoStatus::Ok
        );
        assert_eq!(grpo_policy_dim(policy), 48);
        let mut p = 0.0;
        assert_eq!(
            grpo_success_probability(task, policy, 1, &mut p),
            GrpoStatus::Ok
        );
        assert!((p - 1.0 / 64.0).abs() < 1e-15);
        assert_eq!(
            grpo_success_probability(task, policy, 3, &mut p),
            GrpoStatus::InvalidArgument
        );

        let mut wrong = ptr::null_mut();
        assert_eq!(grpo_policy_new_uniform(2, 2, 8, &mut wrong), GrpoStatus::Ok);
        assert_ne!(
            grpo_mean_success_probability(task, wrong, &mut p),
            GrpoStatus::Ok
        );
        grpo_policy_free(wrong);

        let logits: Vec<f64> = (0..48).map(|i| i as f64 / 10.0).collect();
        let mut from = ptr::null_mut();
        assert_eq!(
            grpo_policy_from_logits(3, 2, 8, logits.as_ptr(), 48, &mut from),
            GrpoStatus::Ok
        );
        let mut back = vec![0.0; 48];
        assert_eq!(
            grpo_policy_logits(from, back.as_mut_ptr(), 48),
            GrpoStatus::Ok
        );
        assert_eq!(back, logits);
        assert_eq!(
            grpo_policy_logits(from, back.as_mut_ptr(), 47),
            GrpoStatus::DimensionMismatch
        );
        assert_eq!(
            grpo_policy_from_logits(3, 2, 8, logits.as_ptr(), 47, &mut from),
            GrpoStatus::DimensionMismatch
        );
        grpo_policy_free(from);

        grpo_policy_free(policy);
        grpo_task_free(task);
        grpo_task_free(ptr::null_mut());
        assert_eq!(grpo_policy_dim(ptr::null()), 0);
    }
}

#[test]
fn training_from_config_text() {
    let text = CString::new(
        "[task]\nfamily = kofv\nvocab_size = 4\nk = 1\nnum_prompts = 4\n\
         [trainer]\nprompts_per_step = 4\ngroup_size = 4\nepochs = 20\nseed = 3\n",
    )
    .unwrap();
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(grpo_run_train(text.as_ptr(), &mut run), GrpoStatus::Ok);
        assert_eq!(grpo_run_num_steps(run), 20);
        assert_eq!(grpo_run_total_rollouts(run), 320);
        let mut first = GrpoStepMetrics::default();
        let mut last = GrpoStepMetrics::default();
        assert_eq!(grpo_run_step_metrics(run, 0, &mut first), GrpoStatus::Ok);
        assert_eq!(grpo_run_step_metrics(run, 19, &mut last), GrpoStatus::Ok);
        assert_eq!(
            grpo_run_step_metrics(run, 20, &mut last),
            GrpoStatus::InvalidArgument
        );
        assert!(last.exact_success > first.exact_success);

        let mut policy = ptr::null_mut();
        assert_eq!(grpo_run_policy(run, &mut policy), GrpoStatus::Ok);
        assert_eq!(grpo_policy_dim(policy), 4 * 2 * 4);
        grpo_policy_free(policy);
        grpo_run_free(run);
    }

    let bad = CString::new("[trainer]\ngroup_size = 1\n").unwrap();
    let mut run = ptr::null_mut();
    assert_eq!(
        unsafe { grpo_run_train(bad.as_ptr(), &mut run) },
        GrpoStatus::Config
    );
    assert_eq!(last_error(), "trainer.group_size: group size must be ≥ 2");
    assert!(run.is_null());
}

/// Compiles `tests/smoke.c` against the generated header and the static
/// library, then runs it.
#[test]
fn c_program_links_against_header() {
    let manifest = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().and_then(|d| d.parent()).unwrap().to_path_buf();
    let lib = profile_dir.join("libgrpo_lab_ffi.a");
    if !lib.exists() {
        eprintln!("static library not built at {}; skipping", lib.display());
        return;
    }
    let out_dir = tempfile::tempdir().unwrap();
    let bin = out_dir.path().join("smoke");
    let compiled = Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&bin)
        .status();
    match compiled {
        Err(e) => {
            eprintln!("no C compiler available ({e}); skipping");
            return;
        }
        Ok(s) => assert!(s.success(), "C smoke program failed to compile"),
    }
    let run = Command::new(&bin).output().unwrap();
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    assert!(String::from_utf8_lossy(&run.stdout).starts_with("ok "));
}
