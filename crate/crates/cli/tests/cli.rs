use std::path::Path;
use std::process::{Command, Output};

use hscrf::topology::Topology;

fn hscrf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hscrf"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = hscrf(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_topology_exits_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere").join("topo.json");
    let out = hscrf(&[
        "simulate",
        "--topology",
        s(&missing),
        "--out",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains(s(&missing)), "{err}");
}

#[test]
fn invalid_topology_is_a_failure() {
    let dir = tempfile::tempdir().unwrap();
    let topo = dir.path().join("topo.json");
    std::fs::write(&topo, r#"{"depth":1,"states_per_level":[2],"children":[]}"#).unwrap();
    let out = hscrf(&["simulate", "--topology", s(&topo), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let topo = d.join("topo.json");
    Topology::fully_connected(&[1, 2, 3], true)
        .save(&topo)
        .unwrap();

    let sim = d.join("sim");
    let sim_args = [
        "simulate",
        "--topology",
        s(&topo),
        "--symbols",
        "2",
        "--length",
        "6",
        "--n-train",
        "6",
        "--n-test",
        "3",
        "--seed",
        "4",
        "--out",
        s(&sim),
    ];
    ok(&sim_args);
    let first = std::fs::read(sim.join("train.jsonl")).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 6);
    ok(&sim_args);
    assert_eq!(std::fs::read(sim.join("train.jsonl")).unwrap(), first);
    assert!(sim.join("test.jsonl").is_file());
    assert!(sim.join("generative.json").is_file());

    let params = d.join("params.json");
    ok(&[
        "train",
        "--topology",
        s(&topo),
        "--data",
        s(&sim.join("train.jsonl")),
        "--symbols",
        "2",
        "--epochs",
        "5",
        "--learning-rate",
        "0.01",
        "--out",
        s(&params),
    ]);
    let log = std::fs::read_to_string(d.join("params_log.csv")).unwrap();
    assert!(log.starts_with("epoch,log_likelihood,grad_norm,seconds"));

    let test = sim.join("test.jsonl");
    let exact = d.join("exact");
    let est = d.join("est");
    ok(&[
        "infer-exact",
        "--topology",
        s(&topo),
        "--params",
        s(&params),
        "--data",
        s(&test),
        "--out",
        s(&exact),
    ]);
    ok(&[
        "infer-rbgs",
        "--topology",
        s(&topo),
        "--params",
        s(&params),
        "--data",
        s(&test),
        "--iters",
        "300",
        "--burn-in",
        "0.1",
        "--seed",
        "1",
        "--out",
        s(&est),
    ]);
    for i in 0..3 {
        assert!(exact.join(format!("seq{i}_states.csv")).is_file());
        assert!(est.join(format!("seq{i}_transitions.csv")).is_file());
        let manifest = std::fs::read_to_string(est.join(format!("seq{i}_manifest.json"))).unwrap();
        assert!(manifest.contains("\"burn_in\": 30"));
    }
    let metrics = d.join("metrics");
    ok(&[
        "eval",
        "--exact",
        s(&exact),
        "--estimate",
        s(&est),
        "--out",
        s(&metrics),
    ]);
    let rows = std::fs::read_to_string(d.join("metrics.csv")).unwrap();
    assert!(rows.starts_with("sequence,metric,value"));
    assert!(rows.contains("seq2,avg_kl,"));
    assert!(std::fs::read_to_string(d.join("metrics.json"))
        .unwrap()
        .contains("\"sequences\": 3"));

    let conv = d.join("conv");
    ok(&[
        "convergence",
        "--topology",
        s(&topo),
        "--params",
        s(&params),
        "--data",
        s(&test),
        "--iters",
        "200",
        "--seed",
        "2",
        "--out",
        s(&conv),
    ]);
    let csv = std::fs::read_to_string(conv.join("convergence.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(
        std::fs::read_to_string(conv.join("convergence_manifest.json"))
            .unwrap()
            .contains("\"version\"")
    );

    let plan = d.join("plan.json");
    std::fs::write(
        &plan,
        r#"{"mode":"scaling","lengths":[6,12],"budgets":[{"rule":"fixed","iterations":20}],
            "checkpoints":[],"burn_in_fraction":0.1,"seed":0,"timing_runs":1}"#,
    )
    .unwrap();
    let scal = d.join("scal");
    ok(&[
        "scaling",
        "--topology",
        s(&topo),
        "--params",
        s(&params),
        "--data",
        s(&test),
        "--plan",
        s(&plan),
        "--budget",
        "fixed",
        "--budget",
        "linear",
        "--out",
        s(&scal),
    ]);
    let csv = std::fs::read_to_string(scal.join("scaling.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 4);
    assert!(csv.contains("12,linear,60,"));
}

#[test]
fn burn_in_consuming_every_sweep_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let topo = d.join("topo.json");
    Topology::fully_connected(&[1, 2], true)
        .save(&topo)
        .unwrap();
    ok(&[
        "simulate",
        "--topology",
        s(&topo),
        "--symbols",
        "2",
        "--length",
        "3",
        "--n-train",
        "2",
        "--n-test",
        "0",
        "--out",
        s(d),
    ]);
    let params = d.join("params.json");
    ok(&[
        "train",
        "--topology",
        s(&topo),
        "--data",
        s(&d.join("train.jsonl")),
        "--symbols",
        "2",
        "--epochs",
        "1",
        "--out",
        s(&params),
    ]);
    let out = hscrf(&[
        "infer-rbgs",
        "--topology",
        s(&topo),
        "--params",
        s(&params),
        "--data",
        s(&d.join("train.jsonl")),
        "--iters",
        "1",
        "--burn-in",
        "0.5",
        "--out",
        s(&d.join("est")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("burn"));
}
