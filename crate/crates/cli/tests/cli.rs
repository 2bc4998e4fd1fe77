use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vinlab_cli::plot::{polylines, AREA};
use vinlab_core::ddqn::parse_history_csv;
use vinlab_core::gridworld::{GameRules, ObjectClass, Variant};
use vinlab_core::rng::rng_from;
use vinlab_core::transfer::{select_seed_pair, PairConstraints};
use vinlab_core::vinnet::VinNetwork;

fn vinlab(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vinlab"))
        .env_remove("VINLAB_OUT")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn quick() -> Vec<&'static str> {
    vec!["--eval-interval", "100", "--eval-episodes", "3", "--warmup", "50"]
}

#[test]
fn train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = vinlab(&out, &["train", "--variant", "simplified", "--steps", "1000", "--master-seed", "1"]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(stdout(&o).contains("final average test reward"));
        let base = out.join("train/simplified/0");
        assert!(base.join("network.params").exists());
        fs::read(base.join("history.csv")).unwrap()
    };
    let a = run("a");
    assert_eq!(a, run("b"));
    let checkpoints = parse_history_csv(std::str::from_utf8(&a).unwrap()).unwrap();
    assert_eq!(checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), [0, 1000]);
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = vinlab(dir.path(), &["train", "--steps", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("--variant"));
    assert!(stderr(&o).to_lowercase().contains("usage"));

    let o = vinlab(dir.path(), &["train", "--variant", "simplified", "--gamma", "2"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = vinlab(dir.path(), &["train", "--variant", "chess"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("train").exists());
}

#[test]
fn output_root_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_vinlab"))
        .env("VINLAB_OUT", dir.path())
        .args(["train", "--variant", "autogen", "--seed", "3", "--steps", "100"])
        .args(quick())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(dir.path().join("train/autogen/0/history.csv").exists());
    assert!(dir.path().join("train/autogen/summary.csv").exists());
}

fn base_params(dir: &Path) -> PathBuf {
    let path = dir.join("base.params");
    VinNetwork::build(5, 20, 1).unwrap().save(&path).unwrap();
    path
}

#[test]
fn self_transfer_smoke_run() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_params(dir.path());
    let out = dir.path().join("out");
    let mut args = vec!["self-transfer", "--base", base.to_str().unwrap(), "--steps", "200", "--layers", "reward,vi"];
    args.extend(quick());
    let o = vinlab(&out, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for layer in ["reward", "vi"] {
        let body = fs::read_to_string(out.join("self-transfer").join(layer).join("0/history.csv")).unwrap();
        let steps: Vec<u64> = parse_history_csv(&body).unwrap().iter().map(|c| c.step).collect();
        assert_eq!(steps, [0, 100, 200]);
    }
    let summary = fs::read_to_string(out.join("self-transfer/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3);
    assert!(summary.starts_with("layers,replicate,base_reward,final_reward,steps_to_recovery\n"));
}

#[test]
fn self_transfer_rejects_unknown_layers_and_missing_files() {
    let dir = tempfile::tempdir().unwrap();
    let base = base_params(dir.path());
    let o = vinlab(dir.path(), &["self-transfer", "--base", base.to_str().unwrap(), "--layers", "foo"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("foo"));
    let o = vinlab(dir.path(), &["self-transfer", "--base", "/nonexistent/base.params", "--steps", "10"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn transfer_rejects_identical_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let o = vinlab(dir.path(), &["transfer", "--source-seed", "4", "--target-seed", "4", "--steps", "10"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("differ"));
}

#[test]
fn transfer_with_selected_pair_reports_invalid_experiment() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["transfer", "--select-pair", "--steps", "200", "--transfer-steps", "100"];
    args.extend(quick());
    let o = vinlab(dir.path(), &args);
    // Two hundred steps cannot reach the threshold.
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let log = stderr(&o);
    assert!(log.contains("selected seed pair"));
    assert!(log.contains("shared channel meanings 0"));
    for condition in ["source", "control", "transfer"] {
        assert!(dir.path().join("transfer").join(condition).join("0/history.csv").exists());
    }
    let manifest = fs::read_to_string(dir.path().join("transfer/manifest.txt")).unwrap();
    assert!(manifest.contains("threshold = 2.0"));
}

#[test]
fn transfer_summary_and_manifest_replay() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("first");
    let mut args = vec![
        "transfer", "--source-seed", "42", "--target-seed", "256", "--steps", "200", "--threshold", "-3", "--high-rate",
    ];
    args.extend(quick());
    let o = vinlab(&out, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("transfer phase learning rate 0.005"));
    let summary = fs::read_to_string(out.join("transfer/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().collect();
    assert_eq!(rows[0], "replicate,steps_to_threshold_control,steps_to_threshold_transfer,ratio");
    let ratio: f64 = rows[1].rsplit(',').next().unwrap().parse().unwrap();
    assert!(ratio.is_finite());

    // Re-running from the written manifest reproduces the experiment.
    let manifest = out.join("transfer/manifest.txt");
    let second = dir.path().join("second");
    let mut args = vec!["transfer", "--manifest", manifest.to_str().unwrap()];
    args.extend(quick());
    let o = vinlab(&second, &args);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for file in ["summary.csv", "manifest.txt", "transfer/0/history.csv", "control/0/history.csv"] {
        assert_eq!(
            fs::read(out.join("transfer").join(file)).unwrap(),
            fs::read(second.join("transfer").join(file)).unwrap(),
            "{file}"
        );
    }
}

#[test]
fn inspect_prints_the_legend() {
    let dir = tempfile::tempdir().unwrap();
    let o = vinlab(dir.path(), &["inspect", "--variant", "simplified"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    let legend: Vec<&str> = text.lines().filter(|l| l.starts_with("legend")).collect();
    assert_eq!(legend.len(), 5);
    for (line, class) in legend.iter().zip(ObjectClass::ALL) {
        assert!(line.contains(class.name()), "{line}");
    }

    let (_, target) = select_seed_pair(&mut rng_from(1), &PairConstraints::default()).unwrap();
    assert_eq!(GameRules::generate(target, Variant::Autogen).channels_of(ObjectClass::Repulsor).len(), 2);
    let seed = target.to_string();
    let args = ["inspect", "--variant", "autogen", "--seed", &seed, "--moves", "5"];
    let first = stdout(&vinlab(dir.path(), &args));
    let repulsors = first.lines().filter(|l| l.starts_with("legend") && l.contains("repulsor")).count();
    assert_eq!(repulsors, 2);
    assert_eq!(first, stdout(&vinlab(dir.path(), &args)));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none(), "inspect wrote files");
}

fn write_history(path: &Path, rows: &[(u64, f64)]) {
    let mut body = String::from("step,avg_test_reward,epsilon\n");
    for (s, r) in rows {
        body.push_str(&format!("{s},{r},0.5\n"));
    }
    fs::write(path, body).unwrap();
}

#[test]
fn plot_requires_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = vinlab(dir.path(), &["plot"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn plot_single_history() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("run.csv");
    write_history(&csv, &[(0, -2.0), (1000, 1.0)]);
    let o = vinlab(dir.path(), &["plot", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let svg = fs::read_to_string(dir.path().join("plot.svg")).unwrap();
    let lines = polylines(&svg);
    assert_eq!(lines.len(), 1);
    assert_eq!(lines[0].len(), 2);
    assert!(svg.contains(">run</text>"));
}

#[test]
fn plot_axes_span_all_histories() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("control.csv");
    let b = dir.path().join("transfer.csv");
    write_history(&a, &[(0, -2.5), (2000, 0.5), (4000, 1.5)]);
    write_history(&b, &[(0, -1.0), (1000, 2.5)]);
    let svg_path = dir.path().join("curves.svg");
    let args = ["plot", a.to_str().unwrap(), b.to_str().unwrap(), "--output", svg_path.to_str().unwrap()];
    assert_eq!(vinlab(dir.path(), &args).status.code(), Some(0));
    let svg = fs::read_to_string(&svg_path).unwrap();
    let lines = polylines(&svg);
    assert_eq!(lines.len(), 2);
    let (left, top, right, bottom) = AREA;
    // Map SVG coordinates back to data space and compare with the inputs.
    let x = |px: f64| (px - left) / (right - left) * 4000.0;
    let y = |py: f64| -2.5 + (bottom - py) / (bottom - top) * 5.0;
    let back: Vec<Vec<(f64, f64)>> = lines.iter().map(|l| l.iter().map(|&(px, py)| (x(px), y(py))).collect()).collect();
    let want = [vec![(0.0, -2.5), (2000.0, 0.5), (4000.0, 1.5)], vec![(0.0, -1.0), (1000.0, 2.5)]];
    for (got, want) in back.iter().zip(&want) {
        for ((gx, gy), (wx, wy)) in got.iter().zip(want) {
            assert!((gx - wx).abs() < 10.0 && (gy - wy).abs() < 0.02, "{got:?} vs {want:?}");
        }
    }
    assert_eq!(fs::read_to_string(&svg_path).unwrap(), svg);
    let again = dir.path().join("again.svg");
    let args = ["plot", a.to_str().unwrap(), b.to_str().unwrap(), "--output", again.to_str().unwrap()];
    assert_eq!(vinlab(dir.path(), &args).status.code(), Some(0));
    assert_eq!(fs::read(&again).unwrap(), svg.as_bytes());
}

#[test]
fn plot_rejects_malformed_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bad.csv");
    fs::write(&csv, "step,reward\n1,2\n").unwrap();
    let o = vinlab(dir.path(), &["plot", csv.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}
