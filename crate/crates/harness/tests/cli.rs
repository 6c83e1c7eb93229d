mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn tradeloop(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tradeloop")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Copies the mock config into `dir` with absolute data paths and `extra`
/// appended to the top-level keys.
fn write_config(dir: &Path, extra: &str, bars: Option<&Path>) -> PathBuf {
    let fx = common::fixtures();
    let text = std::fs::read_to_string(fx.join("mock.toml")).unwrap();
    let text = text
        .replace("runs = 3", &format!("runs = 2\n{extra}"))
        .replace("window_end = \"2025-06-27\"", "window_end = \"2025-05-30\"");
    let mut text = text.replace("bars = \"SYN_daily.csv\"", &format!("bars = {:?}", bars.unwrap_or(&fx.join("SYN_daily.csv"))));
    for f in ["calendar.csv", "news.jsonl", "fundamentals.json"] {
        text = text.replace(&format!("\"{f}\""), &format!("{:?}", fx.join(f)));
    }
    let path = dir.join("exp.toml");
    std::fs::write(&path, text).unwrap();
    path
}

fn run_dirs(exp: &Path) -> Vec<PathBuf> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(exp).unwrap().map(|e| e.unwrap().path()).filter(|p| p.is_dir()).collect();
    dirs.sort();
    dirs
}

#[test]
fn run_writes_artifacts_and_replays_identically() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "", None);
    let out = tmp.path().join("out");
    let o = tradeloop(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains(" ± "));
    let exp = out.join("syn-mock");
    let runs = run_dirs(&exp);
    assert_eq!(runs.len(), 2);
    for f in ["engine.jsonl", "gateway.jsonl", "opro.jsonl", "metrics.json", "config.lock", "equity.csv", "decisions.jsonl"] {
        assert!(runs[0].join(f).is_file(), "{f}");
    }
    for f in ["summary.txt", "summary.csv", "equity_curves.csv"] {
        assert!(exp.join(f).is_file(), "{f}");
    }
    let equity = std::fs::read_to_string(runs[0].join("equity.csv")).unwrap();
    assert_eq!(equity.lines().count(), 24 + 1);

    let o = tradeloop(&["replay", runs[0].to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("identical"));

    let o = tradeloop(&["report", exp.to_str().unwrap(), "--csv-dir", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("syn-mock"));
    let curves = std::fs::read_to_string(tmp.path().join("equity_curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 24);
}

#[test]
fn tampered_logs_fail_replay() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "", None);
    let out = tmp.path().join("out");
    assert_eq!(code(&tradeloop(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])), 0);
    let run = run_dirs(&out.join("syn-mock")).remove(0);

    let gw_path = run.join("gateway.jsonl");
    let original = std::fs::read_to_string(&gw_path).unwrap();
    std::fs::write(&gw_path, original.replacen("ELITE MARKET ANALYST", "ELITE MARKET ANALYSTS", 1)).unwrap();
    let o = tradeloop(&["replay", run.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("HASH_MISMATCH") || stderr(&o).to_lowercase().contains("hash"), "{}", stderr(&o));
    std::fs::write(&gw_path, &original).unwrap();

    let engine = run.join("engine.jsonl");
    let text = std::fs::read_to_string(&engine).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.pop();
    std::fs::write(&engine, lines.join("\n") + "\n").unwrap();
    let o = tradeloop(&["replay", run.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("engine.jsonl"), "{}", stderr(&o));
}

#[test]
fn exit_codes_by_failure_class() {
    let tmp = TempDir::new().unwrap();

    let cfg = write_config(tmp.path(), "opro_k = 0", None);
    let o = tradeloop(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));

    let fx = common::fixtures();
    let text = std::fs::read_to_string(fx.join("SYN_daily.csv")).unwrap();
    let gappy: String = text.lines().filter(|l| !l.starts_with("2025-05-07")).map(|l| format!("{l}\n")).collect();
    let bars = tmp.path().join("gappy.csv");
    std::fs::write(&bars, gappy).unwrap();
    let cfg = write_config(tmp.path(), "", Some(&bars));
    let o = tradeloop(&["validate-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("2025-05-07"), "{}", stderr(&o));

    let cfg = write_config(tmp.path(), "", None);
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "kind = \"mock\"",
        "kind = \"http\"\nbase_url = \"http://127.0.0.1:9\"\napi_key = \"${TRADELOOP_TEST_KEY_THAT_IS_NOT_SET}\"",
    );
    std::fs::write(&cfg, text).unwrap();
    let o = tradeloop(&["run", "--config", cfg.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("TRADELOOP_TEST_KEY_THAT_IS_NOT_SET"), "{}", stderr(&o));
}

#[test]
fn literal_api_keys_are_refused() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "", None);
    let text = std::fs::read_to_string(&cfg).unwrap().replace(
        "kind = \"mock\"",
        "kind = \"http\"\nbase_url = \"http://127.0.0.1:9\"\napi_key = \"sk-live-123\"",
    );
    std::fs::write(&cfg, text).unwrap();
    let o = tradeloop(&["validate-data", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(!stderr(&o).contains("sk-live-123"));
}

#[test]
fn flags_override_the_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "", None);
    let out = tmp.path().join("out");
    let o = tradeloop(&[
        "run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(),
        "--mode", "baseline", "--runs", "1", "--no-news", "--name", "ablate",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let runs = run_dirs(&out.join("ablate"));
    assert_eq!(runs.len(), 1);
    let lock = std::fs::read_to_string(runs[0].join("config.lock")).unwrap();
    assert!(lock.contains("prompting_mode = \"baseline\"") && lock.contains("no_news = true"), "{lock}");
    let gw = std::fs::read_to_string(runs[0].join("gateway.jsonl")).unwrap();
    assert!(!gw.contains("\"role\":\"news\""));
}

#[test]
fn backtest_prints_every_baseline() {
    let o = tradeloop(&["backtest", "--config", common::fixtures().join("mock.toml").to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = stdout(&o);
    for label in ["Buy & Hold", "SMA", "SLMA", "MACD", "Bollinger"] {
        assert!(table.contains(label), "{label}\n{table}");
    }
}
