use std::path::Path;
use std::process::{Command, Output};

fn twostep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twostep")).args(args).output().unwrap()
}

/// A small imputation configuration that runs in a second or two.
fn write_config(dir: &Path) -> String {
    let path = dir.join("config.json");
    std::fs::write(
        &path,
        r#"{
            "study": "imputation",
            "m": 5,
            "n": 40,
            "p": 3,
            "seed": 4,
            "hmc": {"n_chains": 2, "n_warmup": 200, "n_sampling": 100}
        }"#,
    )
    .unwrap();
    path.to_str().unwrap().to_string()
}

fn report(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn bruteforce_runs_every_target() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("bf");
    let o = twostep(&["run", "--config", &cfg, "--method", "mcmc_bruteforce", "--output", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["report"]["n_mcmc_runs"], 5);
    for f in ["pooled_draws.csv", "summary.csv"] {
        assert!(out.join(f).exists());
    }
    let pooled = std::fs::read_to_string(out.join("pooled_draws.csv")).unwrap();
    assert_eq!(pooled.lines().count(), 1 + 5 * 200);
    assert!(pooled.starts_with("target,b_Intercept,b_V1,b_V2,b_V3,sigma"));
}

#[test]
fn baseline_comparison_and_reproducibility() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let bf = tmp.path().join("bf");
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    assert!(twostep(&["run", "--config", &cfg, "--method", "mcmc_bruteforce", "--output", bf.to_str().unwrap()])
        .status
        .success());
    for dir in [&a, &b] {
        let o = twostep(&[
            "run",
            "--config",
            &cfg,
            "--method",
            "psis_single",
            "--baseline",
            bf.to_str().unwrap(),
            "--output",
            dir.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let cost: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("cost.json")).unwrap()).unwrap();
    let runs = cost["n_mcmc_runs"].as_f64().unwrap();
    assert!(cost["grad_ratio"].as_f64().unwrap() <= runs / 5.0);
    assert!(a.join("comparison.csv").exists());

    for f in ["pooled_draws.csv", "summary.csv", "comparison.csv", "cost.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let (mut ra, mut rb) = (report(&a), report(&b));
    ra["elapsed_secs"] = 0.into();
    rb["elapsed_secs"] = 0.into();
    assert_eq!(ra, rb);

    let o = twostep(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.starts_with("scope,d_mean,d_sd,d_q05,d_q95\npooled,0,0,0,0\n"), "{text}");
    let again = twostep(&["compare", a.to_str().unwrap(), b.to_str().unwrap()]);
    assert_eq!(text, String::from_utf8(again.stdout).unwrap());
}

#[test]
fn configuration_errors_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path());
    let out = tmp.path().join("x");
    let out = out.to_str().unwrap();
    for args in [
        vec!["run", "--method", "nonsense", "--output", out],
        vec!["run", "--config", &cfg, "--S", "301", "--output", out],
        vec!["run", "--config", &cfg, "--method", "psis_mixture", "--n-mix", "5", "--output", out],
        vec!["run", "--config", &cfg, "--strategy", "loglik_quantile", "--output", out],
        vec!["run", "--config", "/nonexistent/config.json", "--output", out],
        vec!["run", "--study", "custom_csv", "--output", out],
        vec!["bogus"],
    ] {
        let o = twostep(&args);
        assert_eq!(o.status.code(), Some(1), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, r#"{"study": "imputation", "unknown_field": 3}"#).unwrap();
    assert_eq!(twostep(&["run", "--config", bad.to_str().unwrap(), "--output", out]).status.code(), Some(1));
    assert_eq!(twostep(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("x");
    let o = twostep(&[
        "run",
        "--study",
        "custom_csv",
        "--manifest",
        tmp.path().join("missing.json").to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&o.stderr).is_empty());
}

#[test]
fn surrogate_study_from_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("s");
    let o = twostep(&[
        "run",
        "--study",
        "surrogate_logistic",
        "--method",
        "psis_iwmm",
        "--strategy",
        "loglik_quantile",
        "--m",
        "20",
        "--chains",
        "2",
        "--S",
        "400",
        "--warmup",
        "300",
        "--output",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = report(&out);
    assert_eq!(r["report"]["m"], 20);
    assert_eq!(r["report"]["s"], 400);
    assert_eq!(r["config"]["hmc"]["n_sampling"], 200);
    assert!(r["report"]["n_mcmc_runs"].as_u64().unwrap() <= 10);
}
