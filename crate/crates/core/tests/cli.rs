use std::path::Path;

use dynstg::cli::{run, EXIT_CHECK, EXIT_DIVERGED, EXIT_INPUT, EXIT_OK};

const TINY: &str = r#"{"data": {"kind": "synth", "classes": 2, "per_class": 4, "frames": 8, "joints": 5, "seed": 0},
    "epochs_teacher": 1, "epochs_student": 1, "folds": 2, "model": {"graph_out": 2, "state_dim": 2}}"#;

fn dynstg(dir: &Path, config: &str, args: &[&str]) -> i32 {
    let cfg = dir.join("config.json");
    std::fs::write(&cfg, config).unwrap();
    let mut argv = vec![
        "dynstg".to_string(),
        "--config".into(),
        cfg.display().to_string(),
    ];
    argv.extend(["--out".to_string(), dir.display().to_string()]);
    argv.extend(args.iter().map(|s| s.to_string()));
    run(argv)
}

#[test]
fn train_distill_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(dynstg(d, TINY, &["train-teacher", "--fold", "1"]), EXIT_OK);
    for f in [
        "teacher.json",
        "teacher_log.json",
        "folds.json",
        "normstats.json",
    ] {
        assert!(d.join(f).exists(), "{f}");
    }
    let teacher = d.join("teacher.json").display().to_string();
    assert_eq!(
        dynstg(
            d,
            TINY,
            &["distill-student", "--teacher", &teacher, "--fold", "1"]
        ),
        EXIT_OK
    );
    let student = d.join("student.json").display().to_string();
    assert_eq!(
        dynstg(d, TINY, &["eval", "--checkpoint", &student, "--fold", "1"]),
        EXIT_OK
    );
    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("eval.json")).unwrap()).unwrap();
    assert!(eval["headline"]["accuracy"].is_number());
}

#[test]
fn cv_writes_its_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(dynstg(d, TINY, &["cv", "--seed", "4"]), EXIT_OK);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["format_version"], 1);
    assert_eq!(report["config"]["seed"], 4);
    assert_eq!(report["table"].as_array().unwrap().len(), 3);
    assert!(report["timings"]["total_seconds"].is_number());
    assert!(d.join("checkpoints/student_fold1.json").exists());
    assert!(d.join("normstats.json").exists());
}

#[test]
fn synth_writes_a_loadable_dataset() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(dynstg(dir.path(), TINY, &["synth"]), EXIT_OK);
    let seqs = dynstg::data::load_sequences(dir.path().join("dataset.jsonl")).unwrap();
    assert_eq!(seqs.len(), 8);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(dynstg(d, r#"{"folds": 1}"#, &["cv"]), EXIT_INPUT);
    assert_eq!(dynstg(d, "not json", &["cv"]), EXIT_INPUT);
    assert_eq!(
        dynstg(d, TINY, &["eval", "--checkpoint", "missing.json"]),
        EXIT_INPUT
    );
    let mut diverging: serde_json::Value = serde_json::from_str(TINY).unwrap();
    diverging["optim"] = serde_json::json!({"learning_rate": 1e308});
    diverging["epochs_teacher"] = 4.into();
    assert_eq!(
        dynstg(d, &diverging.to_string(), &["train-teacher"]),
        EXIT_DIVERGED
    );
    assert!(d.join("teacher.json").exists());
    let ckpt = dynstg::model::Model::load(d.join("teacher.json")).unwrap();
    assert!(ckpt.params.iter().all(|(_, t)| t.is_finite()));
    assert_eq!(
        dynstg(d, TINY, &["gradcheck", "--corrupt-grad"]),
        EXIT_CHECK
    );
    assert_eq!(dynstg(d, TINY, &["gradcheck"]), EXIT_OK);
}
