//! End-to-end runs of the `spp-cascade` binary.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use spp_cascade::cascade::CascadeNet;
use spp_cascade::pipeline::PipelineConfig;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_spp-cascade"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn spp-cascade")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// `key=value` pairs from a one-line summary.
fn summary(stdout: &str) -> HashMap<String, String> {
    stdout
        .split_whitespace()
        .filter_map(|kv| kv.split_once('='))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect()
}

fn data_rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(str::to_string)
        .collect()
}

/// A 9 × 21 grid, small enough for quick training runs.
fn small_dataset(dir: &Path) -> PathBuf {
    ok(&[
        "gen-data",
        "--n-lambda",
        "21",
        "--out-dir",
        s(dir),
        "--output",
        "small.csv",
    ]);
    dir.join("small.csv")
}

fn load_net(path: &Path) -> CascadeNet {
    let f = std::fs::File::open(path).unwrap();
    CascadeNet::read_model(std::io::BufReader::new(f))
        .unwrap()
        .0
}

#[test]
fn default_grid_has_909_rows_and_regenerates_identically() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let out = ok(&["gen-data", "--out-dir", s(a.path())]);
    let kv = summary(&out);
    assert_eq!(kv["samples"], "909");
    assert_eq!(kv["excluded"], "0");
    ok(&["gen-data", "--out-dir", s(b.path())]);
    let fa = std::fs::read(a.path().join("dataset.csv")).unwrap();
    let fb = std::fs::read(b.path().join("dataset.csv")).unwrap();
    assert_eq!(fa, fb);
    let text = String::from_utf8(fa).unwrap();
    assert!(text.contains("# grid.thicknesses_nm=36 42 48 54 60 72 84 96 128"));
    assert!(text.contains("# seed=7"));
    assert_eq!(data_rows(&a.path().join("dataset.csv")).len(), 909);
    assert!(a.path().join("dataset.exclusions.csv").exists());
}

#[test]
fn single_point_grid() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "gen-data",
        "--n-lambda",
        "1",
        "--thickness",
        "48",
        "--out-dir",
        s(dir.path()),
    ]);
    let rows = data_rows(&dir.path().join("dataset.csv"));
    assert_eq!(rows.len(), 1);
    assert!(rows[0].starts_with("4.0000000000000000e2,4.8000000000000000e1,"));
}

#[test]
fn sequential_training_is_deterministic_and_matches_parallel() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run_mode = |mode: &str, sub: &str| {
        let out = dir.path().join(sub);
        ok(&[
            "train",
            "--data",
            s(&data),
            "--mode",
            mode,
            "--seed",
            "7",
            "--epochs",
            "4",
            "--out-dir",
            s(&out),
        ]);
        out.join("model.txt")
    };
    let s1 = run_mode("sequential", "s1");
    let s2 = run_mode("sequential", "s2");
    let p = run_mode("parallel", "p");
    assert_eq!(std::fs::read(&s1).unwrap(), std::fs::read(&s2).unwrap());
    let (a, b) = (load_net(&s1), load_net(&p));
    for (x, y) in a.flat_parameters().iter().zip(b.flat_parameters()) {
        assert!((x - y).abs() <= 1e-12);
    }
    assert_eq!(a.region, b.region);
}

#[test]
fn zero_epochs_write_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("run");
    let stdout = ok(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "0",
        "--seed",
        "11",
        "--out-dir",
        s(&out),
    ]);
    assert_eq!(summary(&stdout)["epochs_run"], "0");
    let net = load_net(&out.join("model.txt"));
    let init = CascadeNet::random(11, 0.5, PipelineConfig::default().decoding(152)).unwrap();
    assert_eq!(net.flat_parameters(), init.flat_parameters());
    assert_eq!(net.region, None);
    assert_eq!(data_rows(&out.join("metrics.csv")).len(), 0);
}

#[test]
fn eval_on_training_split_reproduces_final_mse() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("run");
    let train = summary(&ok(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "6",
        "--out-dir",
        s(&out),
    ]));
    let eval = summary(&ok(&[
        "eval",
        "--model",
        s(&out.join("model.txt")),
        "--data",
        s(&out.join("train.csv")),
        "--out-dir",
        s(&out),
    ]));
    let a: f64 = train["final_mse"].parse().unwrap();
    let b: f64 = eval["mse"].parse().unwrap();
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
    assert_eq!(eval["samples"], "152");

    let text = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert!(text.lines().any(|l| l
        == "lambda0_nm,t_nm,lambda_spp_true,lambda_spp_pred,L_spp_true,L_spp_pred,rejected_flag"));
    let rows = data_rows(&out.join("predictions.csv"));
    let mut rejected = 0;
    for row in &rows {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[5] == "NaN", f[6] == "1", "{row}");
        rejected += usize::from(f[6] == "1");
    }
    assert_eq!(rejected.to_string(), eval["rejected"]);
}

/// fan_in, fan_out, activation, row-major weights, bias.
type PlainLayer = (usize, usize, String, Vec<f64>, Vec<f64>);

/// Forward pass written against the text model format alone.
struct PlainModel {
    layers: HashMap<String, PlainLayer>,
    meta: HashMap<String, String>,
}

impl PlainModel {
    fn parse(text: &str) -> Self {
        let mut layers = HashMap::new();
        let mut meta = HashMap::new();
        let mut lines = text.lines();
        while let Some(line) = lines.next() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            match parts.first() {
                Some(&"meta") => {
                    meta.insert(
                        parts[1].to_string(),
                        parts.get(2).unwrap_or(&"").to_string(),
                    );
                }
                Some(&"layer") => {
                    let (fi, fo): (usize, usize) =
                        (parts[2].parse().unwrap(), parts[3].parse().unwrap());
                    let mut w = Vec::new();
                    for _ in 0..fo {
                        w.extend(
                            lines
                                .next()
                                .unwrap()
                                .split_whitespace()
                                .map(|v| v.parse::<f64>().unwrap()),
                        );
                    }
                    let b: Vec<f64> = lines
                        .next()
                        .unwrap()
                        .split_whitespace()
                        .skip(1)
                        .map(|v| v.parse().unwrap())
                        .collect();
                    layers.insert(parts[1].to_string(), (fi, fo, parts[4].to_string(), w, b));
                }
                _ => {}
            }
        }
        Self { layers, meta }
    }

    fn apply(&self, name: &str, x: &[f64]) -> Vec<f64> {
        let (fi, fo, act, w, b) = &self.layers[name];
        assert_eq!(x.len(), *fi);
        (0..*fo)
            .map(|i| {
                let z: f64 = b[i] + (0..*fi).map(|j| w[i * fi + j] * x[j]).sum::<f64>();
                match act.as_str() {
                    "tansig" => z.tanh(),
                    "logsig" => 1.0 / (1.0 + (-z).exp()),
                    _ => z,
                }
            })
            .collect()
    }

    fn range(&self, column: &str) -> (f64, f64) {
        let (a, b) = self.meta[&format!("normalization.{column}")]
            .split_once(',')
            .unwrap();
        (a.parse().unwrap(), b.parse().unwrap())
    }

    fn lambda_spp(&self, lambda0: f64, t: f64, accepted: bool) -> f64 {
        let norm = |v: f64, (lo, hi): (f64, f64)| 2.0 * (v - lo) / (hi - lo) - 1.0;
        let x = [
            norm(lambda0, self.range("lambda0_nm")),
            norm(t, self.range("t_nm")),
        ];
        let y_a = self.apply("IVa", &self.apply("IIIa", &x));
        let mut merged = y_a.clone();
        if accepted {
            let joined: Vec<f64> = x.iter().chain(&y_a).copied().collect();
            merged.extend(self.apply("IVb", &self.apply("IIIb", &joined)));
        } else {
            merged.extend([0.0; 5]);
        }
        let out = self.apply("VI", &merged)[0];
        let (lo, hi) = self.range("lambda_spp_nm");
        lo + 0.5 * (out + 1.0) * (hi - lo)
    }
}

#[test]
fn held_out_predictions_match_an_independent_forward_pass() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = dir.path().join("run");
    ok(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "5",
        "--out-dir",
        s(&out),
    ]);
    ok(&[
        "eval",
        "--model",
        s(&out.join("model.txt")),
        "--data",
        s(&out.join("test.csv")),
        "--out-dir",
        s(&out),
        "--output",
        "held_out.csv",
    ]);
    let model = PlainModel::parse(&std::fs::read_to_string(out.join("model.txt")).unwrap());
    let rows = data_rows(&out.join("held_out.csv"));
    assert_eq!(rows.len(), 189 - 152);
    for row in rows {
        let f: Vec<f64> = row.split(',').map(|v| v.parse().unwrap()).collect();
        let expected = model.lambda_spp(f[0], f[1], f[6] == 0.0);
        assert!(
            (f[3] - expected).abs() <= 1e-9 * expected,
            "{row}: offline {expected}"
        );
        let rel_cli = (f[3] - f[2]).abs() / f[2];
        let rel_offline = (expected - f[2]).abs() / f[2];
        assert!((rel_cli - rel_offline).abs() < 1e-9);
    }
}

#[test]
fn eval_rejects_data_normalized_elsewhere() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    ok(&[
        "train",
        "--data",
        s(&data),
        "--epochs",
        "1",
        "--out-dir",
        s(&dir.path().join("a")),
    ]);
    ok(&[
        "gen-data",
        "--n-lambda",
        "11",
        "--lambda-max",
        "650",
        "--out-dir",
        s(dir.path()),
        "--output",
        "other.csv",
    ]);
    ok(&[
        "train",
        "--data",
        s(&dir.path().join("other.csv")),
        "--epochs",
        "1",
        "--out-dir",
        s(&dir.path().join("b")),
    ]);
    let out = run(&[
        "eval",
        "--model",
        s(&dir.path().join("a/model.txt")),
        "--data",
        s(&dir.path().join("b/train.csv")),
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("normalization mismatch"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    let missing = dir.path().join("missing.csv");
    assert_eq!(
        run(&["train", "--data", s(&missing), "--out-dir", s(dir.path())])
            .status
            .code(),
        Some(3)
    );
    let data = small_dataset(dir.path());
    let diverged = run(&[
        "train",
        "--data",
        s(&data),
        "--learning-rate",
        "1e300",
        "--epochs",
        "2",
        "--out-dir",
        s(dir.path()),
    ]);
    assert_eq!(diverged.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&diverged.stderr).contains("diverged"));
    assert_eq!(
        run(&[
            "gen-data",
            "--parity",
            "sideways",
            "--out-dir",
            s(dir.path())
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn config_file_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = dir.path().join("run.cfg");
    std::fs::write(
        &cfg,
        format!(
            "# small run\ndata = {}\nepochs = 2\nmode = sequential\nseed = 3\n",
            s(&data)
        ),
    )
    .unwrap();
    let out = dir.path().join("run");
    let kv = summary(&ok(&[
        "train",
        "--config",
        s(&cfg),
        "--epochs",
        "1",
        "--out-dir",
        s(&out),
    ]));
    assert_eq!(kv["epochs_run"], "1");
    let model = std::fs::read_to_string(out.join("model.txt")).unwrap();
    assert!(model.contains("meta seed 3"));
    assert!(model.contains("meta mode sequential"));
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    assert!(metrics.contains("# epochs=1"));
    std::fs::write(&cfg, "epochz = 2\n").unwrap();
    assert_eq!(run(&["train", "--config", s(&cfg)]).status.code(), Some(1));
}

#[test]
fn bench_report_has_a_fixed_header() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let stdout = ok(&[
        "bench",
        "--data",
        s(&data),
        "--epochs",
        "2",
        "--out-dir",
        s(dir.path()),
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "spp-cascade bench report");
    assert_eq!(
        lines[1],
        "threads,samples,epochs,sequential_ms,parallel_ms,speedup,overlap_ratio,max_weight_gap"
    );
    let fields: Vec<&str> = lines[2].split(',').collect();
    assert_eq!(fields.len(), 8);
    assert_eq!(fields[1], "152");
    assert_eq!(fields[2], "2");
    assert_eq!(fields[7].parse::<f64>().unwrap(), 0.0);
    let timeline = std::fs::read_to_string(dir.path().join("timeline.csv")).unwrap();
    assert!(timeline.lines().any(|l| l == "tau,stage,start_ns,end_ns"));
}
