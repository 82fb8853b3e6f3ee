use std::path::{Path, PathBuf};

use lcnmf::pipeline::{
    cmd_disaggregate, cmd_fit, cmd_nowcast, cmd_prepare, cmd_rank, cmd_report, cmd_synth, RunConfig,
};
use lcnmf::Error;

fn synth_into(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 4\nout = \"gen\"\n[synth]\nn_days = 730\nholdout_days = 365\nnoise_level = 0.01\n{extra}"
    );
    let cfg = RunConfig::parse(&text, dir).unwrap();
    cmd_synth(&cfg).unwrap();
    dir.join("gen/synth/config.toml")
}

fn run_all(config: &Path, runs: usize) -> RunConfig {
    let mut cfg = RunConfig::load(config).unwrap();
    cfg.ensemble.runs = runs;
    cmd_prepare(&cfg).unwrap();
    cmd_rank(&cfg).unwrap();
    cmd_fit(&cfg).unwrap();
    cmd_disaggregate(&cfg).unwrap();
    cmd_nowcast(&cfg).unwrap();
    cmd_report(&cfg).unwrap();
    cfg
}

fn csv_files(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "csv" || x == "svg") {
                out.push(p);
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_writes_expected_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let config = synth_into(tmp.path(), "");
    let cfg = run_all(&config, 6);
    let out = &cfg.out;

    let hourly = std::fs::read_to_string(out.join("ensemble/sector_hourly.csv")).unwrap();
    assert!(hourly.starts_with("timestamp,sector,mean_mw,q025_mw,q975_mw\n"));
    assert_eq!(hourly.lines().count(), 1 + 365 * 24 * 3);

    let monthly = std::fs::read_to_string(out.join("nowcast/monthly_sectors.csv")).unwrap();
    assert!(monthly.starts_with("sector,month,mean_mwh,q025,q975\n"));
    assert_eq!(monthly.lines().count(), 1 + 12 * 3);
    assert!(out.join("nowcast/correlations.csv").is_file());

    let scree = std::fs::read_to_string(out.join("rank/scree.csv")).unwrap();
    assert!(scree.starts_with("component,ratio,cumulative\n"));

    let solutions: Vec<_> = std::fs::read_dir(out.join("solutions")).unwrap().collect();
    assert!(!solutions.is_empty());
    for s in solutions {
        let s = s.unwrap().path();
        assert!(s.join("C.csv").is_file() && s.join("S.csv").is_file());
    }
    for f in ["sources.svg", "losses.svg", "weekly.svg", "summary.txt"] {
        assert!(out.join("report").join(f).is_file(), "{f}");
    }
    for c in ["prepare", "rank", "fit", "disaggregate", "nowcast", "report"] {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join(format!("manifest/{c}.json"))).unwrap()).unwrap();
        assert_eq!(m["config_sha256"].as_str().unwrap().len(), 64);
    }
}

#[test]
fn reruns_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let config = synth_into(tmp.path(), "");
    let cfg = run_all(&config, 4);
    let first: Vec<_> = csv_files(&cfg.out).iter().map(|p| (p.clone(), std::fs::read(p).unwrap())).collect();
    run_all(&config, 4);
    let second = csv_files(&cfg.out);
    assert_eq!(first.len(), second.len());
    for (p, bytes) in first {
        assert_eq!(bytes, std::fs::read(&p).unwrap(), "{}", p.display());
    }
}

#[test]
fn nowcast_without_indicators_skips_correlations() {
    let tmp = tempfile::tempdir().unwrap();
    let config = synth_into(tmp.path(), "");
    let text = std::fs::read_to_string(&config)
        .unwrap()
        .replace("load = \"load_test.csv\"\nmsi = \"msi.csv\"\n", "load = \"load_test.csv\"\n");
    std::fs::write(&config, text).unwrap();
    let mut cfg = RunConfig::load(&config).unwrap();
    assert!(cfg.nowcast.as_ref().unwrap().msi.is_none());
    cfg.ensemble.runs = 3;
    cmd_prepare(&cfg).unwrap();
    cmd_fit(&cfg).unwrap();
    let outcome = cmd_nowcast(&cfg).unwrap();
    assert!(outcome.notices.iter().any(|n| n.contains("correlations")));
    assert!(!cfg.out.join("nowcast/correlations.csv").exists());
    assert!(cfg.out.join("nowcast/monthly_sectors.csv").is_file());
}

#[test]
fn commands_need_their_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let config = synth_into(tmp.path(), "");
    let cfg = RunConfig::load(&config).unwrap();
    assert!(matches!(cmd_fit(&cfg), Err(Error::Config(_))));
    std::fs::remove_file(tmp.path().join("gen/synth/msi.csv")).unwrap();
    assert!(matches!(cmd_prepare(&cfg), Err(Error::Config(_))));
}

#[test]
fn k_below_sector_count_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let config = synth_into(tmp.path(), "");
    let text = std::fs::read_to_string(&config).unwrap().replace("k = 3", "k = 2");
    std::fs::write(&config, text).unwrap();
    let cfg = RunConfig::load(&config).unwrap();
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn multi_source_sectors() {
    let tmp = tempfile::tempdir().unwrap();
    let text = "seed = 2\nout = \"gen\"\n[model.sectors]\nhousehold = [1, 2]\nindustry = [3]\n[synth]\nn_days = 365\n";
    let cfg = RunConfig::parse(text, tmp.path()).unwrap();
    cmd_synth(&cfg).unwrap();
    let config = tmp.path().join("gen/synth/config.toml");
    assert!(std::fs::read_to_string(&config).unwrap().contains("household = [1, 2]"));
    let mut cfg = RunConfig::load(&config).unwrap();
    cfg.ensemble.runs = 3;
    cmd_prepare(&cfg).unwrap();
    cmd_fit(&cfg).unwrap();
    cmd_disaggregate(&cfg).unwrap();
    let a = std::fs::read_to_string(cfg.out.join("prepare/A.csv")).unwrap();
    assert!(a.starts_with("label,household,industry\nhousehold_1,1,0\nhousehold_2,1,0\nindustry,0,1\n"));
}
