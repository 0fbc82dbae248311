//! End-to-end smoke tests of the staged pipeline at the 16x16 micro scale:
//! artifact layout, derived-file schemas, rerun determinism, and the exit
//! codes of the provenance safety rails.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use xgap_cli::config::PipelineConfig;
use xgap_cli::stages::{run_stage, EvaluationData, Stage};
use xgap_core::data::read_json;

const MODES: [&str; 3] = ["untargeted", "targeted_random", "targeted_second"];

fn micro_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.json")
}

fn run_all(workdir: &Path) {
    let cfg = PipelineConfig::load(&micro_config_path(), &[], Some(workdir)).expect("micro config loads");
    for stage in Stage::ALL {
        run_stage(stage, &cfg).unwrap_or_else(|e| panic!("{} failed: {e}", stage.name()));
    }
}

struct Fixture {
    workdir: PathBuf,
    _tmp: tempfile::TempDir,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

/// One shared micro run; tests that mutate a workdir make their own.
fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let tmp = tempfile::tempdir().expect("tempdir");
        run_all(tmp.path());
        Fixture {
            workdir: tmp.path().to_path_buf(),
            _tmp: tmp,
        }
    })
}

fn read_text(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

/// The CLI binary, for tests that need real exit codes.
fn xgap(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_xgap"))
        .args(args)
        .output()
        .expect("binary runs")
}

#[test]
fn full_run_lays_out_every_stage_artifact() {
    let wd = &fixture().workdir;
    let mut expected: Vec<String> = [
        "data/idx/images.idx",
        "data/idx/labels.idx",
        "data/train/images.tnsr",
        "data/train/labels.json",
        "data/train/manifest.json",
        "data/test/images.tnsr",
        "data/test/labels.json",
        "data/test/manifest.json",
        "data/summary.json",
        "model/checkpoint/manifest.json",
        "model/metrics.json",
        "attacks/summary.json",
        "attributions/summary.json",
        "detector/metrics.json",
        "evaluate/evaluation.json",
        "report/report.json",
        "report/table1.csv",
        "report/table2.csv",
        "report/fig2_histogram.csv",
        "timings.log",
    ]
    .map(str::to_string)
    .to_vec();
    for mode in MODES {
        for split in ["train", "eval"] {
            for file in ["clean.tnsr", "adv.tnsr", "manifest.json"] {
                expected.push(format!("attacks/{mode}/{split}/{file}"));
            }
        }
        for group in [format!("{mode}_adv_train"), format!("{mode}_adv_eval")] {
            for file in ["maps.tnsr", "summary.csv", "manifest.json"] {
                expected.push(format!("attributions/{group}/{file}"));
            }
        }
        for detector in ["logistic", "forest"] {
            expected.push(format!("detector/{mode}/{detector}/manifest.json"));
        }
    }
    for group in ["clean_train", "clean_eval"] {
        for file in ["maps.tnsr", "summary.csv", "manifest.json"] {
            expected.push(format!("attributions/{group}/{file}"));
        }
    }
    for stage in Stage::ALL {
        expected.push(format!("{}/stage.json", stage.dir()));
    }
    for rel in &expected {
        assert!(wd.join(rel).is_file(), "missing artifact {rel}");
    }

    // Two exemplar pairs from the first attack mode, clean and adversarial.
    let pgms: Vec<String> = std::fs::read_dir(wd.join("report/exemplars"))
        .expect("exemplars dir")
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(pgms.len(), 4, "exemplars: {pgms:?}");
    for name in &pgms {
        assert!(name.contains("_untargeted_"), "exemplar from wrong mode: {name}");
        assert!(name.ends_with("_clean.pgm") || name.ends_with("_adv.pgm"), "{name}");
    }
}

#[test]
fn derived_tables_mirror_the_evaluation_snapshot() {
    let wd = &fixture().workdir;
    let data: EvaluationData = read_json(&wd.join("evaluate/evaluation.json")).expect("evaluation loads");

    let table1 = read_text(&wd.join("report/table1.csv"));
    let lines: Vec<&str> = table1.trim_end().lines().collect();
    assert_eq!(lines[0], "attack,images,success_rate");
    assert_eq!(lines.len(), 1 + data.attacks.len());
    assert_eq!(data.attacks.len(), MODES.len());
    for (row, attack) in lines[1..].iter().zip(&data.attacks) {
        let want = format!("{},{},{:.6}", attack.mode.as_str(), attack.images, attack.success_rate);
        assert_eq!(*row, want);
    }

    let table2 = read_text(&wd.join("report/table2.csv"));
    let lines: Vec<&str> = table2.trim_end().lines().collect();
    assert_eq!(lines[0], "attack,logistic_regression,random_forest");
    assert_eq!(lines.len(), 1 + data.detectors.len());
    for (row, det) in lines[1..].iter().zip(&data.detectors) {
        let want = format!(
            "{},{:.6},{:.6}",
            det.mode.as_str(),
            det.logistic_accuracy,
            det.forest_accuracy
        );
        assert_eq!(*row, want);
    }

    // Histogram rows: header, one per bin, one overflow; counts add up to
    // pixels-per-map times the number of pooled maps.
    let hist = read_text(&wd.join("report/fig2_histogram.csv"));
    let lines: Vec<&str> = hist.trim_end().lines().collect();
    assert_eq!(lines[0], "bin_lo,bin_hi,count_clean,count_adv");
    let bins = data.clean_histogram.counts.len() - 1;
    assert_eq!(lines.len(), 1 + bins + 1);
    assert!(lines.last().unwrap().split(',').nth(1) == Some("inf"));
    let clean_total: u64 = data.clean_histogram.counts.iter().sum();
    let adv_total: u64 = data.adversarial_histogram.counts.iter().sum();
    assert_eq!(clean_total * MODES.len() as u64, adv_total);
}

#[test]
fn report_json_is_self_describing_and_round_trips() {
    let wd = &fixture().workdir;
    let text = read_text(&wd.join("report/report.json"));
    let parsed: serde_json::Value = serde_json::from_str(&text).expect("report parses");
    let reserialized = serde_json::to_string(&parsed).expect("report reserializes");
    let again: serde_json::Value = serde_json::from_str(&reserialized).expect("round trip parses");
    assert_eq!(parsed, again);

    assert_eq!(parsed["schema_version"], "xgap-report-v1");
    let artifacts = &parsed["artifacts"];
    for key in ["table1", "table2", "histogram", "timings_log"] {
        let rel = artifacts[key].as_str().unwrap_or_else(|| panic!("artifacts.{key} missing"));
        assert!(wd.join(rel).is_file(), "artifacts.{key} points at missing {rel}");
    }
    for exemplar in artifacts["exemplars"].as_array().expect("exemplar list") {
        let rel = exemplar.as_str().expect("exemplar path");
        assert!(wd.join(rel).is_file(), "missing exemplar {rel}");
    }
}

#[test]
fn rerun_matches_and_upstream_divergence_is_refused() {
    let first = &fixture().workdir;
    let tmp = tempfile::tempdir().expect("tempdir");
    run_all(tmp.path());

    // Same config in a fresh directory: every stage record and the final
    // report must come out byte-identical (records are workdir-relative).
    for stage in Stage::ALL {
        let rel = format!("{}/stage.json", stage.dir());
        let a = read_text(&first.join(&rel));
        let b = read_text(&tmp.path().join(&rel));
        assert_eq!(a, b, "{rel} differs between identical runs");
    }
    let a = read_text(&first.join("report/report.json"));
    let b = read_text(&tmp.path().join("report/report.json"));
    assert_eq!(a, b, "report.json differs between identical runs");

    // Regenerating an upstream stage under a different seed must poison the
    // chain for downstream stages instead of silently mixing artifacts.
    let wd = tmp.path().to_str().expect("utf8 workdir");
    let config = micro_config_path();
    let config = config.to_str().expect("utf8 config path");
    let out = xgap(&["prepare", "--config", config, "--set", "seed=99", "--workdir", wd]);
    assert!(out.status.success(), "reseeded prepare failed: {out:?}");
    let out = xgap(&["gen-attacks", "--config", config, "--set", "seed=99", "--workdir", wd]);
    assert_eq!(out.status.code(), Some(4), "expected mixed-provenance exit: {out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("mixed provenance"), "stderr: {stderr}");
}

#[test]
fn missing_upstream_stage_is_a_dependency_exit() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let config = micro_config_path();
    let out = xgap(&[
        "report",
        "--config",
        config.to_str().expect("utf8 config path"),
        "--workdir",
        tmp.path().to_str().expect("utf8 workdir"),
    ]);
    assert_eq!(out.status.code(), Some(3), "expected dependency exit: {out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("`evaluate` must run before `report`"), "stderr: {stderr}");
}

#[test]
fn config_errors_exit_with_the_config_code() {
    let tmp = tempfile::tempdir().expect("tempdir");
    let wd = tmp.path().to_str().expect("utf8 workdir");
    let missing = tmp.path().join("nope.json");
    let out = xgap(&["all", "--config", missing.to_str().unwrap(), "--workdir", wd]);
    assert_eq!(out.status.code(), Some(2), "missing config: {out:?}");

    let config = micro_config_path();
    let config = config.to_str().expect("utf8 config path");
    let out = xgap(&["all", "--config", config, "--set", "nosuch.key=1", "--workdir", wd]);
    assert_eq!(out.status.code(), Some(2), "unknown override key: {out:?}");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("unknown field"), "stderr: {stderr}");
}
