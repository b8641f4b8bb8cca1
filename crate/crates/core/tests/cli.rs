//! End-to-end runs of the `tacq` binary.

use std::path::Path;
use std::process::{Command, Output};

use tacq::diffusion::NoiseSchedule;
use tacq::harness::checkpoint::{samples_from_container, samples_to_container};
use tacq::harness::Container;
use tacq::tensors::Tensor;

const SMALL: &str = "dataset = gauss2d
data.size = 1024
train.steps = 200
quant.n_calib = 32
correction.calib_batch = 16
sampler.steps = 10
sampler.n_samples = 200
";

fn tacq(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tacq"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("spawn tacq")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn setup() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("cfg.txt"), SMALL).unwrap();
    dir
}

fn train_and_quantize(dir: &Path) {
    let o = tacq(dir, &["train", "--config", "cfg.txt", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).starts_with("final_loss="));
    let o = tacq(dir, &["quantize", "--config", "cfg.txt", "--out", "run", "--model", "run/model.tacq"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("weight_bits=3"));
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = setup();
    assert_eq!(code(&tacq(dir.path(), &[])), 1);
    assert_eq!(code(&tacq(dir.path(), &["frobnicate"])), 1);
    assert_eq!(code(&tacq(dir.path(), &["quantize", "--config", "cfg.txt", "stray"])), 1);
    assert_eq!(code(&tacq(dir.path(), &["--help"])), 0);
    let o = tacq(dir.path(), &["train"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));
}

#[test]
fn config_errors_name_the_offending_key() {
    let dir = setup();
    std::fs::write(dir.path().join("empty.txt"), "seed = 3\n").unwrap();
    let o = tacq(dir.path(), &["train", "--config", "empty.txt"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("dataset"), "{}", stderr(&o));

    std::fs::write(dir.path().join("typo.txt"), "dataset = gauss2d\nsampler.stpes = 4\n").unwrap();
    let o = tacq(dir.path(), &["train", "--config", "typo.txt"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("sampler.stpes") && stderr(&o).contains("line 2"), "{}", stderr(&o));

    let o = tacq(dir.path(), &["train", "--config", "cfg.txt", "--lambda1", "1.0"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("lambda1"), "{}", stderr(&o));
    let o = tacq(dir.path(), &["train", "--config", "cfg.txt", "--variant", "bogus"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn pipeline_from_train_to_eval() {
    let dir = setup();
    let d = dir.path();
    train_and_quantize(d);
    for f in ["model.tacq", "qmodel.tacq", "loss_curve.csv", "config.txt"] {
        assert!(d.join("run").join(f).exists(), "{f} missing");
    }

    let o = tacq(d, &["correct", "--config", "cfg.txt", "--out", "run", "--model", "run/model.tacq", "--qmodel", "run/qmodel.tacq"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let summary = std::fs::read_to_string(d.join("run/table_summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1 + 10);

    let sample = |model: &str, extra: &[&str], name: &str| {
        let mut args = vec!["sample", "--config", "cfg.txt", "--out", "run", "--model", model, "--name", name];
        args.extend_from_slice(extra);
        let o = tacq(d, &args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    };
    sample("run/model.tacq", &[], "ref.tacq");
    sample("run/qmodel.tacq", &["--table", "run/table.tacq"], "tac.tacq");
    sample("run/qmodel.tacq", &["--table", "run/table.tacq"], "tac2.tacq");
    let a = std::fs::read(d.join("run/tac.tacq")).unwrap();
    assert_eq!(a, std::fs::read(d.join("run/tac2.tacq")).unwrap(), "reruns differ");
    let (s, _, label) = samples_from_container(&Container::read(&d.join("run/tac.tacq")).unwrap()).unwrap();
    assert_eq!(s.shape(), &[200, 2, 1, 1]);
    assert_eq!(label, "quantized+tac");

    let o = tacq(d, &["eval", "--samples", "run/tac.tacq", "--reference", "run/ref.tacq", "--out", "run"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("energy"));
    assert!(d.join("run/report.csv").exists());

    let o = tacq(d, &["eval", "--samples", "run/tac.tacq", "--reference", "run/ref.tacq", "--out", "run", "--threshold", "0"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = tacq(d, &["eval", "--samples", "run/ref.tacq", "--reference", "run/ref.tacq", "--out", "run", "--threshold", "0"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn non_finite_samples_exit_with_two() {
    let dir = setup();
    let d = dir.path();
    let schedule = NoiseSchedule::ddpm_default();
    let mut bad = Tensor::zeros(&[4, 2, 1, 1]);
    bad.data_mut()[3] = f64::NAN;
    samples_to_container(&bad, 0, "bad", &schedule).write(&d.join("bad.tacq")).unwrap();
    samples_to_container(&Tensor::zeros(&[4, 2, 1, 1]), 0, "ok", &schedule).write(&d.join("ok.tacq")).unwrap();
    let o = tacq(d, &["eval", "--samples", "bad.tacq", "--reference", "ok.tacq", "--out", "."]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

#[test]
fn corrupted_checkpoint_is_rejected() {
    let dir = setup();
    let d = dir.path();
    std::fs::write(d.join("junk.tacq"), b"TACQ\x07garbage").unwrap();
    let o = tacq(d, &["quantize", "--config", "cfg.txt", "--model", "junk.tacq"]);
    assert_eq!(code(&o), 1);
    assert!(!stderr(&o).is_empty());
}

#[test]
fn ablation_reports_every_component_row() {
    let dir = setup();
    let d = dir.path();
    train_and_quantize(d);
    let args = ["ablate", "--config", "cfg.txt", "--out", "run", "--model", "run/model.tacq", "--qmodel", "run/qmodel.tacq"];
    let o = tacq(d, &args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("run/ablation.csv")).unwrap();
    for label in ["\"Baseline\"", "\"+IBC+ Timestep-Aware\"", "\"+NER + IBC\"", "\"+NER + IBC+ Timestep-Aware\""] {
        assert!(csv.contains(label), "{label} missing from\n{csv}");
    }
    assert_eq!(csv.lines().count(), 5);
    let again = tacq(d, &args);
    assert_eq!(stdout(&again), stdout(&o));
}

#[test]
fn sweep_and_histograms() {
    let dir = setup();
    let d = dir.path();
    train_and_quantize(d);
    let o = tacq(d, &["sweep-lambda", "--config", "cfg.txt", "--out", "run", "--model", "run/model.tacq", "--qmodel", "run/qmodel.tacq"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = std::fs::read_to_string(d.join("run/sweep_lambda.csv")).unwrap();
    assert_eq!(csv.lines().count(), 11);
    assert!(csv.starts_with("lambda1,energy_distance\n0,"));

    let o = tacq(d, &["sample", "--config", "cfg.txt", "--out", "run", "--model", "run/qmodel.tacq", "--n", "20", "--trajectory"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let o = tacq(d, &["hist", "--dump", "run/trajectory.tacq", "--out", "run", "--points", "0,9", "--bins", "5"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hist = std::fs::read_to_string(d.join("run/hist.csv")).unwrap();
    assert_eq!(hist.lines().count(), 1 + 2 * 5);
    let o = tacq(d, &["hist", "--dump", "run/trajectory.tacq", "--out", "run", "--site", "nope"]);
    assert_eq!(code(&o), 1);
}
