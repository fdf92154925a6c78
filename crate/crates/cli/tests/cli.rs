use std::fs::File;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dlrt_core::data::{write_idx_images, write_idx_labels, MNIST_FILES};
use dlrt_core::linalg::Matrix;
use dlrt_core::nn::checkpoint::read_network;

fn dlrt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlrt"))
        .args(args)
        .env_remove("DLRT_DATA_DIR")
        .output()
        .expect("run dlrt")
}

/// 2x2 images in three classes: the bright pixel (or pair) gives the class.
fn fake_mnist(dir: &Path) {
    let sample = |i: usize| -> ([f64; 4], usize) {
        let class = i % 3;
        let mut px = [0.1; 4];
        px[class] = 0.9;
        px[3] = (i % 7) as f64 / 10.0;
        (px, class)
    };
    for (k, n) in [(0, 60), (1, 30)] {
        let (rows, labels): (Vec<[f64; 4]>, Vec<usize>) =
            (0..n).map(|i| sample(i + 1000 * k)).unzip();
        let images = Matrix::from_rows(&rows);
        write_idx_images(
            &mut File::create(dir.join(MNIST_FILES[2 * k])).unwrap(),
            &images,
            2,
            2,
        )
        .unwrap();
        write_idx_labels(
            &mut File::create(dir.join(MNIST_FILES[2 * k + 1])).unwrap(),
            &labels,
        )
        .unwrap();
    }
}

struct Fixture {
    _tmp: tempfile::TempDir,
    data: PathBuf,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let data = tmp.path().join("data");
        std::fs::create_dir(&data).unwrap();
        fake_mnist(&data);
        let root = tmp.path().to_path_buf();
        Fixture {
            _tmp: tmp,
            data,
            root,
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let (data, out) = (
            self.data.to_str().unwrap().to_owned(),
            self.out(out).to_str().unwrap().to_owned(),
        );
        let mut args = vec![
            "train",
            "--data-dir",
            &data,
            "--out-dir",
            &out,
            "--widths",
            "4,6,5,3",
            "--rank",
            "2",
            "--r-max",
            "4",
            "--r-min",
            "1",
            "--batch-size",
            "8",
        ];
        for (flag, default) in [("--epochs", "3"), ("--lr", "0.2")] {
            if !extra.contains(&flag) {
                args.extend([flag, default]);
            }
        }
        args.extend_from_slice(extra);
        dlrt(&args)
    }
}

/// Data rows of a CSV written by the tool (comment line skipped).
fn read_csv(path: &Path) -> (String, Vec<String>, Vec<Vec<String>>) {
    let text = std::fs::read_to_string(path).unwrap();
    let first = text.lines().next().unwrap().to_owned();
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.unwrap().iter().map(String::from).collect())
        .collect();
    (first, header, rows)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_csv_summary_and_checkpoint() {
    let fx = Fixture::new();
    let o = fx.train("run", &[]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (first, header, rows) = read_csv(&fx.out("run/train.csv"));
    assert!(
        first.starts_with("# tool=dlrt ") && first.contains("config_hash="),
        "{first}"
    );
    assert_eq!(
        header,
        [
            "epoch",
            "train_loss",
            "test_accuracy",
            "rank_1",
            "rank_2",
            "rank_3",
            "param_count",
            "compression_rate"
        ]
    );
    assert_eq!(rows.len(), 4);

    // Compression recomputed from the logged ranks and the widths.
    let widths = [4usize, 6, 5, 3];
    for row in &rows {
        let ranks: Vec<usize> = row[3..6].iter().map(|r| r.parse().unwrap()).collect();
        let stored: usize = (0..3).map(|l| (widths[l] + widths[l + 1]) * ranks[l]).sum();
        let dense: usize = (0..3).map(|l| widths[l] * widths[l + 1]).sum();
        let expect = (1.0 - stored as f64 / dense as f64) * 100.0;
        let logged: f64 = row[7].parse().unwrap();
        assert!((logged - expect).abs() < 1e-9, "{logged} vs {expect}");
    }

    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.out("run/train.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "completed");
    assert_eq!(summary["epochs_completed"], 3);
    assert_eq!(summary["settings"]["integrator"], "abc-psi");
    let last_acc: f64 = rows[3][2].parse().unwrap();
    assert_eq!(summary["final_test_accuracy"].as_f64().unwrap(), last_acc);

    let net = read_network(&mut File::open(fx.out("run/train.ckpt")).unwrap()).unwrap();
    assert_eq!(net.input_dim(), 4);
    assert_eq!(net.output_dim(), 3);
}

#[test]
fn zero_epochs_gives_initial_row_only() {
    let fx = Fixture::new();
    let o = fx.train("run", &["--epochs", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, _, rows) = read_csv(&fx.out("run/train.csv"));
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "0");
}

#[test]
fn identical_config_gives_identical_csv() {
    let fx = Fixture::new();
    assert!(fx.train("a", &[]).status.success());
    assert!(fx.train("b", &[]).status.success());
    let a = std::fs::read(fx.out("a/train.csv")).unwrap();
    let b = std::fs::read(fx.out("b/train.csv")).unwrap();
    assert_eq!(a, b);
    assert!(fx.train("c", &["--seed", "9"]).status.success());
    let c = std::fs::read_to_string(fx.out("c/train.csv")).unwrap();
    assert_ne!(
        c.lines().next(),
        String::from_utf8(a).unwrap().lines().next()
    );
}

#[test]
fn every_integrator_trains() {
    let fx = Fixture::new();
    for name in ["full", "psi", "bc-psi", "bug", "abc-psi"] {
        let o = fx.train(name, &["--integrator", name, "--lr", "0.05"]);
        assert!(o.status.success(), "{name}: {}", stderr(&o));
        let (_, header, rows) = read_csv(&fx.out(&format!("{name}/train.csv")));
        assert_eq!(rows.len(), 4);
        if name == "full" {
            let comp = header.iter().position(|h| h == "compression_rate").unwrap();
            assert_eq!(rows[3][comp], "0.0");
        }
    }
}

#[test]
fn config_file_and_flag_precedence() {
    let fx = Fixture::new();
    let cfg = fx.root.join("run.toml");
    std::fs::write(&cfg, "epochs = 5\nbatch_size = 16\ntau = 0.3\n").unwrap();
    let o = fx.train("run", &["--config", cfg.to_str().unwrap(), "--epochs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.out("run/train.json")).unwrap()).unwrap();
    assert_eq!(summary["settings"]["epochs"], 1);
    assert_eq!(summary["settings"]["batch_size"], 8);
    assert_eq!(summary["settings"]["tau"], 0.3);

    let file_only = fx.root.join("only.toml");
    std::fs::write(&file_only, "epochs = 2\nbatch_size = 16\n").unwrap();
    let data = fx.data.to_str().unwrap().to_owned();
    let out = fx.out("file").to_str().unwrap().to_owned();
    let o = dlrt(&[
        "train",
        "--config",
        file_only.to_str().unwrap(),
        "--data-dir",
        &data,
        "--out-dir",
        &out,
        "--widths",
        "4,3",
        "--rank",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.out("file/train.json")).unwrap()).unwrap();
    assert_eq!(summary["settings"]["epochs"], 2);
    assert_eq!(summary["settings"]["batch_size"], 16);
}

#[test]
fn configuration_errors_exit_with_code_1() {
    let fx = Fixture::new();
    let cfg = fx.root.join("bad.toml");
    std::fs::write(&cfg, "learning_rate = 0.1\n").unwrap();
    let o = fx.train("run", &["--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("learning_rate"));
    assert_eq!(
        fx.train("run", &["--integrator", "rk4"]).status.code(),
        Some(1)
    );
    let data = fx.data.to_str().unwrap().to_owned();
    let bad = |extra: &[&str]| {
        let mut args = vec!["train", "--data-dir", &data, "--epochs", "1"];
        args.extend_from_slice(extra);
        let o = dlrt(&args);
        (o.status.code(), stderr(&o))
    };
    let (code, msg) = bad(&["--widths", "4,3", "--r-min", "5", "--r-max", "2"]);
    assert_eq!(code, Some(1), "{msg}");
    assert!(msg.contains("configuration error"), "{msg}");
    let (code, msg) = bad(&["--widths", "5,3"]);
    assert_eq!(code, Some(1), "{msg}");
    assert!(msg.contains("features"), "{msg}");
    assert_eq!(dlrt(&["train", "--no-such-flag"]).status.code(), Some(1));
    assert_eq!(dlrt(&["--version"]).status.code(), Some(0));
}

#[test]
fn missing_data_exits_with_code_2() {
    let fx = Fixture::new();
    let out = fx.out("run").to_str().unwrap().to_owned();
    let o = dlrt(&[
        "train",
        "--data-dir",
        "/definitely/not/here",
        "--out-dir",
        &out,
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn data_dir_falls_back_to_environment() {
    let fx = Fixture::new();
    let out = fx.out("run").to_str().unwrap().to_owned();
    let o = Command::new(env!("CARGO_BIN_EXE_dlrt"))
        .args([
            "train",
            "--out-dir",
            &out,
            "--widths",
            "4,3",
            "--rank",
            "2",
            "--epochs",
            "1",
        ])
        .env("DLRT_DATA_DIR", &fx.data)
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn divergence_exits_with_code_3_and_keeps_partial_csv() {
    let fx = Fixture::new();
    let o = fx.train("run", &["--lr", "1e9"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let (_, _, rows) = read_csv(&fx.out("run/train.csv"));
    assert!(!rows.is_empty() && rows.len() < 4);
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(fx.out("run/train.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "diverged");
}

#[test]
fn compare_tabulates_runs_and_summaries() {
    let fx = Fixture::new();
    let (data, out) = (
        fx.data.to_str().unwrap().to_owned(),
        fx.out("cmp").to_str().unwrap().to_owned(),
    );
    let o = dlrt(&[
        "compare",
        "--data-dir",
        &data,
        "--out-dir",
        &out,
        "--widths",
        "4,6,3",
        "--rank",
        "2",
        "--r-min",
        "1",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--lr",
        "0.1",
        "--integrators",
        "abc-psi,psi",
        "--seeds",
        "1,2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, header, rows) = read_csv(&fx.out("cmp/compare.csv"));
    assert_eq!(header[0], "kind");
    assert_eq!(rows.iter().filter(|r| r[0] == "run").count(), 4);
    assert_eq!(rows.iter().filter(|r| r[0] == "summary").count(), 2);
    for integrator in ["abc-psi", "psi"] {
        for seed in [1, 2] {
            assert!(fx
                .out(&format!("cmp/runs/{integrator}-seed{seed}.csv"))
                .is_file());
        }
        // Summary mean equals the mean of its runs.
        let accs: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == "run" && r[1] == integrator)
            .map(|r| r[6].parse().unwrap())
            .collect();
        let summary = rows
            .iter()
            .find(|r| r[0] == "summary" && r[1] == integrator)
            .unwrap();
        let mean: f64 = summary[6].parse().unwrap();
        assert!((mean - accs.iter().sum::<f64>() / 2.0).abs() < 1e-12);
    }

    let out1 = fx.out("one").to_str().unwrap().to_owned();
    let o = dlrt(&[
        "compare",
        "--data-dir",
        &data,
        "--out-dir",
        &out1,
        "--widths",
        "4,3",
        "--rank",
        "2",
        "--epochs",
        "1",
        "--integrators",
        "bug",
        "--seeds",
        "4",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, _, rows) = read_csv(&fx.out("one/compare.csv"));
    let summary = rows.iter().find(|r| r[0] == "summary").unwrap();
    assert_eq!(summary[7], "0.0");
}

#[test]
fn ode_bench_orders_and_plateau() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("ode");
    let o = dlrt(&[
        "ode-bench",
        "--out-dir",
        out.to_str().unwrap(),
        "--h-list",
        "0.1,0.05,0.025",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, header, rows) = read_csv(&out.join("ode_bench.csv"));
    assert_eq!(
        header,
        ["integrator", "h", "steps", "error", "order", "final_rank"]
    );
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[0][4], "");
    for r in &rows[1..] {
        let order: f64 = r[4].parse().unwrap();
        assert!((0.8..=1.2).contains(&order), "order {order}");
    }

    let o = dlrt(&[
        "ode-bench",
        "--out-dir",
        out.to_str().unwrap(),
        "--h-list",
        "0.1",
    ]);
    assert!(o.status.success());
    let (_, _, rows) = read_csv(&out.join("ode_bench.csv"));
    assert_eq!(rows.len(), 1);

    let o = dlrt(&[
        "ode-bench",
        "--out-dir",
        out.to_str().unwrap(),
        "--eps",
        "1e-2",
        "--integrator",
        "bc-psi",
        "--r-max",
        "4",
        "--h-list",
        "0.1,0.05,0.025,0.0125",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ode_bench.json")).unwrap())
            .unwrap();
    assert_eq!(json["results"][0]["plateaued"], true);
    assert_eq!(
        dlrt(&["ode-bench", "--h-list", "0.3"]).status.code(),
        Some(1)
    );
}

#[test]
fn descent_audit_reports_and_gates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("audit");
    let o = dlrt(&[
        "descent-audit",
        "--out-dir",
        out.to_str().unwrap(),
        "--steps",
        "40",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, header, rows) = read_csv(&out.join("descent_audit.csv"));
    assert_eq!(header.last().unwrap(), "holds");
    assert_eq!(rows.len(), 40);
    assert!(rows.iter().all(|r| r[8] == "true"));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("descent_audit.json")).unwrap())
            .unwrap();
    assert!(json["s_step_delta"].as_f64().unwrap() > 0.0);

    // Beyond h = 2/c_l the inequality is not guaranteed: warning, not failure.
    let o = dlrt(&[
        "descent-audit",
        "--out-dir",
        out.to_str().unwrap(),
        "--steps",
        "10",
        "--lr",
        "2.5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("not guaranteed"));

    let o = dlrt(&[
        "descent-audit",
        "--out-dir",
        out.to_str().unwrap(),
        "--steps",
        "5",
        "--stationary",
        "true",
    ]);
    assert!(o.status.success());
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("descent_audit.json")).unwrap())
            .unwrap();
    assert!(json["s_step_delta"].as_f64().unwrap().abs() < 1e-25);
    assert!(json["s_step_delta_half"].as_f64().unwrap().abs() < 1e-25);
}
