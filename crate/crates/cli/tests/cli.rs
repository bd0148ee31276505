use std::fs;
use std::io::BufReader;
use std::path::Path;
use std::process::{Command, Output};

use latentcf::autodiff::Tensor;
use latentcf::counterfactual::{read_jsonl, Outcome};
use latentcf::datasets::LabeledSample;
use latentcf::flow::{FlowModel, FlowSpec};
use latentcf::nn::{Activation, Mlp};
use latentcf::predictor::MlpClassifier;

fn latentcf(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_latentcf"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const SMALL: &str = r#"{
  "data": {"n_starts": 6, "n_heldout": 100, "n_reference": 40, "n_spectrum": 5},
  "flow": {"blocks": 2, "hidden": [8, 8], "train": {"epochs": 3, "batch_size": 50}},
  "classifier": {"hidden": [8], "train": {"epochs": 5, "batch_size": 50}},
  "oracle": {"hidden": [4], "train": {"epochs": 5, "batch_size": 50}},
  "class_autoencoder": {"hidden": [8], "train": {"epochs": 3, "batch_size": 50}},
  "ascent": {"input": {"max_steps": 15}, "latent": {"max_steps": 15}}
}"#;

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"flow": {"epocs": 10}}"#).unwrap();
    let o = latentcf(dir.path(), &["train-flow", "--config", cfg.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("epocs"), "{}", stderr(&o));

    let o = latentcf(dir.path(), &["train-flow", "--set", "flow.train.learning_rat=0.1"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("learning_rat"), "{}", stderr(&o));
}

#[test]
fn missing_model_file_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let o = latentcf(dir.path(), &["generate"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("classifier.json"), "{}", stderr(&o));

    let o = latentcf(dir.path(), &["spectrum"]);
    assert!(!o.status.success());
    assert!(stderr(&o).contains("flow.json"), "{}", stderr(&o));
}

#[test]
fn generate_from_start_past_threshold_is_zero_step_success() {
    let dir = tempfile::tempdir().unwrap();
    let w = Tensor::new(vec![0.0, 0.0, 10.0], vec![3, 1]).unwrap();
    let net = Mlp::from_parts(vec![3, 1], Activation::Relu, vec![w], vec![Tensor::zeros(&[1])]).unwrap();
    MlpClassifier::from_net(net)
        .unwrap()
        .save(&dir.path().join("classifier.json"))
        .unwrap();
    let starts = dir.path().join("starts.csv");
    let sample = LabeledSample::from_points(Tensor::new(vec![1.0, 0.0, 2.0], vec![1, 3]).unwrap());
    sample.write_csv(fs::File::create(&starts).unwrap(), None).unwrap();

    let o = latentcf(
        dir.path(),
        &[
            "generate",
            "--set",
            "generate.space=input",
            "--set",
            &format!("generate.starts_csv={}", starts.display()),
            "--set",
            r#"ascent.input.goal={"mode":"confidence_threshold","target_class":1,"threshold":0.9}"#,
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let f = fs::File::open(dir.path().join("trajectories.jsonl")).unwrap();
    let sets = read_jsonl(BufReader::new(f)).unwrap();
    assert_eq!(sets.len(), 1);
    let t = &sets[0].trajectories[0];
    assert_eq!(t.outcome, Outcome::Success { step: 0 });
    assert_eq!(t.final_point, vec![1.0, 0.0, 2.0]);
}

#[test]
fn spectrum_of_identity_flow_is_all_ones() {
    let dir = tempfile::tempdir().unwrap();
    FlowModel::new(&FlowSpec::default())
        .unwrap()
        .save(&dir.path().join("flow.json"))
        .unwrap();
    let o = latentcf(dir.path(), &["spectrum", "--set", "data.n_spectrum=7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("spectrum.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("# config_hash: "));
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 7);
    for row in rows {
        for (h, v) in header.iter().zip(&row) {
            if h.starts_with("sigma2_") {
                assert_eq!(v.parse::<f64>().unwrap(), 1.0);
            }
        }
    }
}

#[test]
fn reproduce_toy_reports_failure_and_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    fs::write(&cfg, SMALL).unwrap();
    let runs: Vec<_> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let o = latentcf(&out, &["reproduce-toy", "--config", cfg.to_str().unwrap(), "--seed", "7"]);
            // Five spectrum points can never reach the default rank-one count.
            assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
            assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL spectrum_rank_one_count"));
            out
        })
        .collect();
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(runs[0].join("report.json")).unwrap()).unwrap();
    let hash = report["config_hash"].as_str().unwrap().to_owned();
    assert_eq!(report["seed"], 7);
    for file in ["report.json", "trajectories.jsonl", "spectrum.csv", "metrics.csv", "flow.json"] {
        let a = fs::read(runs[0].join(file)).unwrap();
        let b = fs::read(runs[1].join(file)).unwrap();
        assert!(a == b, "{file} differs between runs");
        assert!(String::from_utf8_lossy(&a).contains(&hash), "{file} does not name the config hash");
    }
}
