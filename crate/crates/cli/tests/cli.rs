use std::path::Path;
use std::process::{Command, Output};

fn lcnmf(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lcnmf"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn synth(dir: &Path) {
    std::fs::write(dir.join("gen.toml"), "out = \"gen\"\n[synth]\nn_days = 365\nnoise_level = 0.005\n").unwrap();
    let out = lcnmf(&["--config", "gen.toml", "--seed", "3", "synth"], dir);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn help_lists_commands() {
    let tmp = tempfile::tempdir().unwrap();
    let out = lcnmf(&["--help"], tmp.path());
    let text = String::from_utf8(out.stdout).unwrap();
    for cmd in ["prepare", "rank", "fit", "disaggregate", "nowcast", "synth", "report"] {
        assert!(text.contains(cmd), "{cmd}");
    }
}

#[test]
fn end_to_end_with_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let config = tmp.path().join("gen/synth/config.toml");
    let cfg = std::fs::read_to_string(&config).unwrap();
    assert!(cfg.starts_with("seed = 3\n"));
    std::fs::write(&config, cfg.replace("runs = 50", "runs = 5")).unwrap();
    let out_dir = tmp.path().join("elsewhere");
    let c = config.to_str().unwrap();
    let o = out_dir.to_str().unwrap();
    for cmd in ["prepare", "rank", "fit", "disaggregate", "report"] {
        let out = lcnmf(&["--config", c, "--out", o, "--seed", "11", "--threads", "1", cmd], tmp.path());
        assert_eq!(out.status.code(), Some(0), "{cmd}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let hourly = std::fs::read_to_string(out_dir.join("ensemble/sector_hourly.csv")).unwrap();
    assert!(hourly.starts_with("timestamp,sector,mean_mw,q025_mw,q975_mw\n"));
    let losses = std::fs::read_to_string(out_dir.join("ensemble/losses.csv")).unwrap();
    assert!(losses.lines().nth(1).unwrap().starts_with("11,"));
    assert!(!tmp.path().join("gen/synth/out").exists());
}

#[test]
fn nowcast_without_section_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let out = lcnmf(&["--config", "gen/synth/config.toml", "nowcast"], tmp.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn missing_config_is_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(lcnmf(&["--config", "nope.toml", "prepare"], tmp.path()).status.code(), Some(2));
    std::fs::write(tmp.path().join("bad.toml"), "seeed = 1\n").unwrap();
    assert_eq!(lcnmf(&["--config", "bad.toml", "rank"], tmp.path()).status.code(), Some(2));
    assert_eq!(lcnmf(&["--threads", "0", "synth"], tmp.path()).status.code(), Some(2));
}

#[test]
fn malformed_load_is_exit_3() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let load = tmp.path().join("gen/synth/load.csv");
    let mut text = std::fs::read_to_string(&load).unwrap();
    text.push_str("not a timestamp,12\n");
    std::fs::write(&load, text).unwrap();
    let out = lcnmf(&["--config", "gen/synth/config.toml", "prepare"], tmp.path());
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn empty_cluster_is_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    synth(tmp.path());
    let config = tmp.path().join("gen/synth/config.toml");
    let cfg = std::fs::read_to_string(&config)
        .unwrap()
        .replace("runs = 50", "runs = 2")
        .replace("{ mode = \"auto_gap\" }", "{ mode = \"threshold\", value = 1e-30 }");
    std::fs::write(&config, cfg).unwrap();
    let c = config.to_str().unwrap();
    assert_eq!(lcnmf(&["--config", c, "prepare"], tmp.path()).status.code(), Some(0));
    assert_eq!(lcnmf(&["--config", c, "fit"], tmp.path()).status.code(), Some(4));
}
