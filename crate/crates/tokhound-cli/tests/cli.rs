//! End-to-end tests of the `tokhound` binary: exit codes, artifact layout,
//! and stage/pipeline equivalence, all over the built-in synthetic fixture.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn tokhound() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tokhound"))
}

fn run_ok(args: &[&str]) -> Output {
    let output = tokhound().args(args).output().expect("binary must spawn");
    assert!(
        output.status.success(),
        "expected success for {args:?}, got {:?}\nstderr: {}",
        output.status.code(),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

fn exit_code(args: &[&str]) -> i32 {
    let output = tokhound().args(args).output().expect("binary must spawn");
    output.status.code().expect("process must exit normally")
}

/// Writes the synthetic model into `dir/model` and returns the flag values
/// pointing at it.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let model = dir.join("model");
    run_ok(&["fixture", "--out", model.to_str().unwrap()]);
    (model.join("tokenizer.json"), model.join("weights.safetensors"))
}

fn path_args<'a>(tokenizer: &'a Path, weights: &'a Path, out: &'a Path) -> Vec<&'a str> {
    vec![
        "--tokenizer",
        tokenizer.to_str().unwrap(),
        "--weights",
        weights.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]
}

#[test]
fn run_confirms_the_planted_tokens_and_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let (tokenizer, weights) = fixture(dir.path());
    let out = dir.path().join("run");

    let mut args = vec!["run"];
    args.extend(path_args(&tokenizer, &weights, &out));
    args.extend(["--fraction", "0.125"]);
    let output = run_ok(&args);

    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("confirmed 8 of 8 tested"), "stdout: {stdout}");
    for file in [
        "stamp.json",
        "taxonomy.json",
        "indicators.json",
        "indicators.bin",
        "candidates.json",
        "verification.json",
        "report.json",
        "report.md",
    ] {
        assert!(out.join(file).is_file(), "missing artifact {file}");
    }

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["summary"]["n_confirmed"], 8);
    assert_eq!(report["summary"]["vocab_size"], 64);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(exit_code(&["--bogus"]), 1);
    assert_eq!(exit_code(&["run"]), 1, "missing --out is a usage error");
    // --tokenizer is validated per subcommand, after parsing.
    assert_eq!(exit_code(&["run", "--out", "/tmp/nowhere"]), 1);
    assert_eq!(exit_code(&[]), 1, "a subcommand is required");
}

#[test]
fn help_and_version_exit_0() {
    assert_eq!(exit_code(&["--help"]), 0);
    assert_eq!(exit_code(&["run", "--help"]), 0);
    assert_eq!(exit_code(&["--version"]), 0);
}

#[test]
fn missing_input_file_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (_, weights) = fixture(dir.path());
    let out = dir.path().join("run");
    let missing = dir.path().join("no-such-tokenizer.json");

    let mut args = vec!["run"];
    args.extend(path_args(&missing, &weights, &out));
    let output = tokhound().args(&args).output().unwrap();
    assert_eq!(output.status.code(), Some(2));
    let stderr = String::from_utf8(output.stderr).unwrap();
    assert!(stderr.contains("tokenizer"), "stderr: {stderr}");
}

#[test]
fn unreachable_backend_exits_3_but_keeps_the_verification_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let (tokenizer, weights) = fixture(dir.path());
    let out = dir.path().join("run");

    let mut args = vec!["run"];
    args.extend(path_args(&tokenizer, &weights, &out));
    args.extend([
        "--fraction",
        "0.125",
        "--backend-url",
        "http://127.0.0.1:1/complete",
        "--retries",
        "0",
        "--timeout",
        "2",
    ]);
    let output = tokhound().args(&args).output().unwrap();
    assert_eq!(
        output.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    assert!(out.join("verification.json").is_file(), "partial results are kept");
    assert!(!out.join("report.json").exists(), "no report without measurements");
}

#[test]
fn staged_invocations_match_the_full_run_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let (tokenizer, weights) = fixture(dir.path());
    let full = dir.path().join("full");
    let staged = dir.path().join("staged");

    let mut args = vec!["run"];
    args.extend(path_args(&tokenizer, &weights, &full));
    args.extend(["--fraction", "0.125"]);
    run_ok(&args);

    for stage in ["classify", "indicators", "candidates", "verify", "report"] {
        let mut args = vec![stage];
        args.extend(path_args(&tokenizer, &weights, &staged));
        args.extend(["--fraction", "0.125"]);
        run_ok(&args);
    }

    for file in ["taxonomy.json", "candidates.json", "verification.json", "report.json", "report.md"]
    {
        let a = std::fs::read(full.join(file)).unwrap();
        let b = std::fs::read(staged.join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between the full run and staged runs");
    }

    // Re-running a stage over the same inputs must be byte-identical too.
    let before = std::fs::read(staged.join("candidates.json")).unwrap();
    let mut args = vec!["candidates"];
    args.extend(path_args(&tokenizer, &weights, &staged));
    args.extend(["--fraction", "0.125"]);
    run_ok(&args);
    assert_eq!(before, std::fs::read(staged.join("candidates.json")).unwrap());
}

#[test]
fn no_verify_stops_after_candidate_selection() {
    let dir = tempfile::tempdir().unwrap();
    let (tokenizer, weights) = fixture(dir.path());
    let out = dir.path().join("run");

    let mut args = vec!["run"];
    args.extend(path_args(&tokenizer, &weights, &out));
    args.extend(["--fraction", "0.125", "--no-verify"]);
    let output = run_ok(&args);

    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("verification skipped"), "stdout: {stdout}");
    assert!(!out.join("verification.json").exists());
    assert!(out.join("report.json").is_file(), "candidates-only report still emitted");
}

#[test]
fn compare_renders_one_row_per_indicator() {
    let dir = tempfile::tempdir().unwrap();
    let (tokenizer, weights) = fixture(dir.path());
    let cosine = dir.path().join("cosine");
    let euclid = dir.path().join("euclid");

    for (out, indicator) in [(&cosine, "cosine-to-ref"), (&euclid, "euclidean-to-ref")] {
        let mut args = vec!["run"];
        args.extend(path_args(&tokenizer, &weights, out));
        args.extend(["--fraction", "0.125", "--indicator", indicator]);
        run_ok(&args);
    }

    let output = run_ok(&["compare", cosine.to_str().unwrap(), euclid.to_str().unwrap()]);
    let stdout = String::from_utf8(output.stdout).unwrap();
    assert!(stdout.contains("| CosineToRef | 8 | 8 | 8 | 0 | 0 |"), "stdout: {stdout}");
    assert!(stdout.contains("| EuclideanToRef | 8 | 8 | 8 | 0 | 0 |"), "stdout: {stdout}");
}
