use std::path::PathBuf;
use std::process::{Command, Output};

use serde_json::Value;

fn repo(rel: &str) -> String {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel);
    p.to_string_lossy().into_owned()
}

fn duodec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duodec")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "exit {:?}: {}", o.status.code(), String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

/// Parses JSON lines and checks each against the named schema.
fn lines(text: &str, schema: &str) -> Vec<Value> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("schema/{schema}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    text.lines()
        .map(|l| {
            let v: Value = serde_json::from_str(l).unwrap();
            let errors: Vec<String> = validator.iter_errors(&v).map(|e| e.to_string()).collect();
            assert!(errors.is_empty(), "{errors:?}\n{l}");
            v
        })
        .collect()
}

fn target() -> String {
    repo("models/target.model")
}

fn draft() -> String {
    repo("models/draft.model")
}

#[test]
fn vanilla_generates_exactly_five_tokens() {
    let o = duodec(&["generate", "--mode", "vanilla", "--target", &target(), "--max-tokens", "5", "--prompt", "1"]);
    let v = &lines(&stdout(&o), "generate")[0];
    assert_eq!(v["tokens"].as_array().unwrap().len(), 5);
    assert_eq!(v["iterations"].as_array().unwrap().len(), 5);
}

#[test]
fn duo_without_draft_is_usage_error() {
    let o = duodec(&["generate", "--mode", "duo", "--target", &target()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!o.stderr.is_empty());
    assert!(o.stdout.is_empty());
}

#[test]
fn load_failures_exit_three() {
    let o = duodec(&["generate", "--target", "/nonexistent/t.model", "--draft", &draft()]);
    assert_eq!(o.status.code(), Some(3));
    let o = duodec(&["generate", "--target", &target(), "--draft", &repo("models/run.conf")]);
    assert_eq!(o.status.code(), Some(3));
    let o = duodec(&["generate", "--target", &target(), "--draft", &draft(), "--profile", &target()]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn bad_options_exit_two() {
    for args in [
        vec!["generate", "--target", "t", "--draft", "d", "--preset", "nope"],
        vec!["generate", "--mode", "fast"],
        vec!["generate", "--gamma", "1", "--target", "t"],
        vec!["bench", "--modes", "duo,warp"],
        vec!["frobnicate"],
    ] {
        let o = duodec(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn fixed_seeds_are_byte_identical() {
    let (t, d) = (target(), draft());
    let args = |verify: &'static str| {
        [
            "generate", "--target", &t, "--draft", &d, "--preset", "matched", "--max-tokens", "300", "--seed-draft",
            "4", "--seed-verify", verify, "--smax", "4",
        ]
        .map(str::to_string)
    };
    let run = |verify| {
        let a = args(verify);
        stdout(&duodec(&a.iter().map(String::as_str).collect::<Vec<_>>()))
    };
    let a = run("5");
    for _ in 0..4 {
        assert_eq!(run("5"), a);
    }
    assert_ne!(run("6"), a);
}

#[test]
fn config_file_paths_are_relative_to_it() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run.json");
    let o = Command::new(env!("CARGO_BIN_EXE_duodec"))
        .current_dir(dir.path())
        .args(["generate", "--config", &repo("models/run.conf"), "--out", out.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(stdout(&o).is_empty());
    let v = &lines(&std::fs::read_to_string(out).unwrap(), "generate")[0];
    assert_eq!(v["mode"], "duo");
    assert!(v["tokens"].as_array().unwrap().len() >= 64);
}

#[test]
fn bench_self_ratio_is_one() {
    let o = duodec(&["bench", "--modes", "vanilla,vanilla", "--target", &target(), "--preset", "balanced", "--max-tokens", "50"]);
    for v in lines(&stdout(&o), "bench") {
        assert_eq!(v["phi"], 1.0);
        assert_eq!(v["relative_ttft"], 1.0);
    }
}

#[test]
fn bench_without_vanilla_has_no_ratios() {
    let o = duodec(&["bench", "--modes", "sps,duo", "--target", &target(), "--draft", &draft(), "--preset", "balanced"]);
    for v in lines(&stdout(&o), "bench") {
        assert!(v["phi"].is_null());
    }
}

#[test]
fn perfect_draft_speedup_near_budget() {
    let o = duodec(&[
        "bench", "--modes", "vanilla,duo", "--target", &target(), "--draft", &target(), "--preset", "balanced",
        "--gamma", "24", "--smax", "1", "--max-tokens", "4800",
    ]);
    let v = lines(&stdout(&o), "bench");
    let phi = v[1]["phi"].as_f64().unwrap();
    // 24 tokens per 24.44 ms iteration against 24 ms per vanilla token
    assert!(phi > 23.0 && phi < 24.0, "{phi}");
}

#[test]
fn duo_first_token_faster_than_sps_on_every_preset() {
    for preset in duodec::simclock::PRESETS {
        let o = duodec(&[
            "bench", "--modes", "vanilla,sps,duo", "--target", &target(), "--draft", &draft(), "--preset", preset,
            "--max-tokens", "20",
        ]);
        let v = lines(&stdout(&o), "bench");
        let (sps, duo) = (v[1]["relative_ttft"].as_f64().unwrap(), v[2]["relative_ttft"].as_f64().unwrap());
        assert!(duo < sps && duo > 1.0, "{preset}: duo {duo} sps {sps}");
    }
}

#[test]
fn calibrate_presets() {
    let v = &lines(&stdout(&duodec(&["calibrate", "--preset", "balanced"])), "calibrate")[0];
    assert_eq!((v["cost_coefficient"].as_f64(), v["gamma"].as_u64()), (Some(24.0), Some(24)));
    assert_eq!(v["clock"], "simulated");
    let v = &lines(&stdout(&duodec(&["calibrate", "--preset", "equal"])), "calibrate")[0];
    assert_eq!((v["cost_coefficient"].as_f64(), v["gamma"].as_u64()), (Some(1.0), Some(2)));
    let v = &lines(&stdout(&duodec(&["calibrate", "--preset", "matched"])), "calibrate")[0];
    assert_eq!(v["gamma"].as_u64(), Some(8));
    let v = &lines(
        &stdout(&duodec(&["calibrate", "--target", &target(), "--draft", &draft(), "--profile", &repo("models/slow-draft.profile")])),
        "calibrate",
    )[0];
    // (18 + 0.4 * 8) / 2.5
    assert_eq!(v["cost_coefficient"].as_f64(), Some(8.48));
    assert_eq!(v["gamma"].as_u64(), Some(8));
}

#[test]
fn calibrate_needs_ten_trials() {
    assert_eq!(duodec(&["calibrate", "--preset", "balanced", "--trials", "9"]).status.code(), Some(2));
    assert!(duodec(&["calibrate", "--preset", "balanced", "--trials", "10"]).status.success());
}

#[test]
fn fidelity_sample_floor() {
    let o = duodec(&["fidelity", "--mode", "vanilla", "--target", &target(), "--samples", "9999"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn fidelity_vanilla_and_perfect_draft_pass() {
    let o = duodec(&["fidelity", "--modes", "vanilla,duo", "--target", &target(), "--draft", &target(), "--samples", "50000"]);
    for v in lines(&stdout(&o), "fidelity") {
        assert_eq!(v["pass"], true, "{v}");
    }
}

#[test]
fn fidelity_adversarial_draft_passes() {
    let o = duodec(&[
        "fidelity", "--modes", "sps,duo", "--target", &target(), "--draft", &repo("models/adversarial.model"),
        "--samples", "200000", "--prompt", "2",
    ]);
    let v = lines(&stdout(&o), "fidelity");
    assert_eq!(v.len(), 2);
    for r in v {
        assert!(r["max_tv"].as_f64().unwrap() < 0.01, "{r}");
    }
}

#[test]
fn fidelity_failure_exits_four() {
    // 10^4 samples over 64 equally likely tokens leave a TV of about 0.03
    // from sampling noise alone.
    let dir = tempfile::tempdir().unwrap();
    let wide = dir.path().join("wide.model");
    let row = vec!["0.015625"; 64].join(" ");
    std::fs::write(&wide, format!("vocab 64\ndefault : {row}\n")).unwrap();
    let o = duodec(&["fidelity", "--mode", "vanilla", "--target", wide.to_str().unwrap(), "--samples", "10000"]);
    assert_eq!(o.status.code(), Some(4));
    let v = &lines(&String::from_utf8(o.stdout).unwrap(), "fidelity")[0];
    assert_eq!(v["pass"], false);
    assert!(v["max_tv"].as_f64().unwrap() > 0.01);
}

#[test]
fn profile_vanilla_one_token_per_iteration() {
    let o = duodec(&["profile", "--mode", "vanilla", "--target", &target(), "--preset", "matched", "--max-tokens", "30"]);
    let v = lines(&stdout(&o), "profile");
    assert_eq!(v.len(), 31);
    assert!(v[..30].iter().all(|r| r["tokens_processed"] == 1 && r["s"] == 0));
    assert_eq!(v[30]["record"], "summary");
    assert_eq!(v[30]["sequence_histogram"]["0"], 30);
}

#[test]
fn profile_perfect_draft_processes_twenty_four() {
    let o = duodec(&[
        "profile", "--target", &target(), "--draft", &target(), "--preset", "balanced", "--gamma", "24", "--smax", "1",
        "--max-tokens", "240",
    ]);
    let v = lines(&stdout(&o), "profile");
    let iters: Vec<_> = v.iter().filter(|r| r["record"] == "iteration").collect();
    assert!(iters[1..].iter().all(|r| r["tokens_processed"] == 24));
    let summary = v.last().unwrap();
    assert_eq!(summary["sequence_histogram"]["1"].as_u64().unwrap() as usize, iters.len());
}

#[test]
fn profile_sps_is_sequential() {
    let o = duodec(&[
        "profile", "--mode", "sps", "--target", &target(), "--draft", &draft(), "--preset", "cpu-bound", "--max-tokens", "60",
    ]);
    for r in lines(&stdout(&o), "profile").iter().filter(|r| r["record"] == "iteration") {
        let (d, t, it) = (r["draft_ms"].as_f64().unwrap(), r["target_ms"].as_f64().unwrap(), r["iteration_ms"].as_f64().unwrap());
        assert!(d > 0.0 && t > 0.0);
        assert!((it - (d + t)).abs() < 0.05 * it, "{r}");
    }
}

#[test]
fn wall_clock_run_works() {
    let o = duodec(&["generate", "--target", &target(), "--draft", &draft(), "--max-tokens", "40"]);
    let v = &lines(&stdout(&o), "generate")[0];
    assert_eq!(v["budget"], 8);
}
