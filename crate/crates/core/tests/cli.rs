use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use transfer_core::data::ShiftSpec;
use transfer_core::experiment::{presets, ExperimentConfig, Modes};
use transfer_core::network::init_params;

fn transfer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_transfer"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_json<T: serde::Serialize>(dir: &Path, name: &str, value: &T) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(value).unwrap()).unwrap();
    p
}

fn small_spec() -> ShiftSpec {
    let mut spec = ShiftSpec::default_synthetic(4, 8, 5);
    spec.source_per_category = 30;
    spec.target_per_category = 30;
    spec
}

#[test]
fn gen_data_writes_reproducible_csv() {
    let dir = tempfile::tempdir().unwrap();
    let spec = small_spec();
    let spec_path = write_json(dir.path(), "spec.json", &spec);
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    for out in [&a, &b] {
        let o = transfer(&[
            "gen-data",
            "--spec",
            spec_path.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(o.stderr.is_empty());
        assert!(String::from_utf8_lossy(&o.stdout).contains("source 120 target 120"));
    }
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 2 * 4 * 30 + 1);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn gen_data_names_the_bad_field() {
    let dir = tempfile::tempdir().unwrap();
    let mut spec = small_spec();
    spec.std = -1.0;
    let bad = write_json(dir.path(), "bad.json", &spec);
    let out = dir.path().join("x.csv");
    let o = transfer(&[
        "gen-data",
        "--spec",
        bad.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("std"), "{}", stderr(&o));

    let mut value = serde_json::to_value(small_spec()).unwrap();
    value["rotaton_degrees"] = 10.into();
    let typo = write_json(dir.path(), "typo.json", &value);
    let o = transfer(&[
        "gen-data",
        "--spec",
        typo.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("rotaton_degrees"), "{}", stderr(&o));
    assert!(!out.exists());
}

fn quick_config(dir: &Path, modes: Modes) -> ExperimentConfig {
    let mut cfg = presets::supervised(0);
    cfg.dataset = transfer_core::experiment::DatasetSource::Synthetic(small_spec());
    cfg.source_training.epochs = 3;
    cfg.adaptation.epochs = 3;
    cfg.probe.n_train_per_domain = 20;
    cfg.modes = modes;
    cfg.output_dir = Some(dir.join(modes.tag().replace('+', "_")));
    cfg
}

#[test]
fn run_writes_all_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick_config(
        dir.path(),
        Modes {
            confusion: true,
            soft_labels: true,
        },
    );
    let cfg_path = write_json(dir.path(), "run.json", &cfg);
    let out_dir = cfg.output_dir.clone().unwrap();
    let mut snapshots = Vec::new();
    for _ in 0..2 {
        let o = transfer(&["run", "--config", cfg_path.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        assert!(o.stderr.is_empty());
        let stdout = String::from_utf8_lossy(&o.stdout).into_owned();
        assert!(stdout.contains("multiclass_accuracy") && stdout.contains("probe_accuracy"));
        for f in [
            "params.json",
            "soft_labels.json",
            "train_log.jsonl",
            "report.json",
        ] {
            assert!(out_dir.join(f).is_file(), "{f} missing");
        }
        snapshots.push((
            std::fs::read(out_dir.join("report.json")).unwrap(),
            std::fs::read(out_dir.join("train_log.jsonl")).unwrap(),
        ));
    }
    assert_eq!(snapshots[0], snapshots[1]);
}

#[test]
fn ablation_grid_tags_each_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut tags = Vec::new();
    for modes in Modes::grid() {
        let cfg = quick_config(dir.path(), modes);
        let path = write_json(dir.path(), &format!("{}.json", tags.len()), &cfg);
        let o = transfer(&["run", "--config", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let report: serde_json::Value = serde_json::from_slice(
            &std::fs::read(cfg.output_dir.unwrap().join("report.json")).unwrap(),
        )
        .unwrap();
        tags.push(report["mode"].as_str().unwrap().to_string());
    }
    tags.sort();
    tags.dedup();
    assert_eq!(tags.len(), 4);
}

#[test]
fn run_reports_the_failing_phase() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = quick_config(
        dir.path(),
        Modes {
            confusion: true,
            soft_labels: true,
        },
    );
    cfg.dataset = transfer_core::experiment::DatasetSource::Csv(dir.path().join("missing.csv"));
    let path = write_json(dir.path(), "run.json", &cfg);
    let o = transfer(&["run", "--config", path.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("data"), "{}", stderr(&o));

    let text = std::fs::read_to_string(&path)
        .unwrap()
        .replace("\"hidden\"", "\"hiden\"");
    std::fs::write(&path, text).unwrap();
    let o = transfer(&["run", "--config", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("hiden"), "{}", stderr(&o));
}

fn gen_csv(dir: &Path, spec: &ShiftSpec) -> PathBuf {
    let spec_path = write_json(dir, "spec.json", spec);
    let csv = dir.join("data.csv");
    let o = transfer(&[
        "gen-data",
        "--spec",
        spec_path.to_str().unwrap(),
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    csv
}

#[test]
fn probe_on_a_constant_representation_is_chance() {
    let dir = tempfile::tempdir().unwrap();
    let csv = gen_csv(dir.path(), &small_spec());
    let mut p = init_params(&[8, 4], 4, 0).unwrap();
    for l in p.repr_layers_mut() {
        l.weight.data_mut().fill(0.0);
    }
    let params = dir.path().join("params.json");
    p.save(&params).unwrap();
    let o = transfer(&[
        "probe",
        "--params",
        params.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
        "--n",
        "20",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let acc: f64 = String::from_utf8_lossy(&o.stdout).trim().parse().unwrap();
    assert!((acc - 0.5).abs() <= 0.05, "{acc}");
}

#[test]
fn probe_rejects_bad_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let csv = gen_csv(dir.path(), &small_spec());
    let params = dir.path().join("params.json");
    init_params(&[8, 4], 4, 0).unwrap().save(&params).unwrap();

    let missing = dir.path().join("nope.json");
    let o = transfer(&[
        "probe",
        "--params",
        missing.to_str().unwrap(),
        "--data",
        csv.to_str().unwrap(),
    ]);
    assert!(!o.status.success());

    let mut text = std::fs::read_to_string(&csv).unwrap();
    text = text.replacen("\nsource,labeled,0,", "\nsource,labeled,zero,", 1);
    let corrupt = dir.path().join("corrupt.csv");
    std::fs::write(&corrupt, text).unwrap();
    let o = transfer(&[
        "probe",
        "--params",
        params.to_str().unwrap(),
        "--data",
        corrupt.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(
        err.contains("corrupt.csv:") && err.contains("bad label"),
        "{err}"
    );
}

#[test]
fn probe_scores_confusion_training_lower() {
    let dir = tempfile::tempdir().unwrap();
    let mut accuracy = Vec::new();
    for (name, confusion) in [("plain", false), ("confused", true)] {
        let mut cfg = presets::supervised(0);
        cfg.modes = Modes {
            confusion,
            soft_labels: false,
        };
        cfg.output_dir = Some(dir.path().join(name));
        let path = write_json(dir.path(), &format!("{name}.json"), &cfg);
        let o = transfer(&["run", "--config", path.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));

        let transfer_core::experiment::DatasetSource::Synthetic(spec) = &cfg.dataset else {
            panic!("preset uses synthetic data");
        };
        let csv = gen_csv(dir.path(), spec);
        let params = cfg.output_dir.unwrap().join("params.json");
        let o = transfer(&[
            "probe",
            "--params",
            params.to_str().unwrap(),
            "--data",
            csv.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        accuracy.push(
            String::from_utf8_lossy(&o.stdout)
                .trim()
                .parse::<f64>()
                .unwrap(),
        );
    }
    assert!(accuracy[1] < accuracy[0], "{accuracy:?}");
}

#[test]
fn shipped_configs_match_presets() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for (name, preset) in [
        ("supervised", presets::supervised(0)),
        ("semi_supervised", presets::semi_supervised(0)),
    ] {
        let mut cfg = ExperimentConfig::load(&dir.join(format!("{name}.json"))).unwrap();
        assert!(cfg
            .output_dir
            .take()
            .unwrap()
            .ends_with(format!("runs/{name}")));
        assert_eq!(cfg, preset, "{name}");
    }
    let shift: ShiftSpec =
        serde_json::from_str(&std::fs::read_to_string(dir.join("shift.json")).unwrap()).unwrap();
    let transfer_core::experiment::DatasetSource::Synthetic(spec) = presets::supervised(0).dataset
    else {
        panic!("preset uses synthetic data");
    };
    assert_eq!(shift, spec);
}
