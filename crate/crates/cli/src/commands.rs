use std::ops::ControlFlow;
use std::path::Path;

use anyhow::Context;
use dlrt_core::data::{load_mnist, Dataset};
use dlrt_core::integrators::study::{descent_audit, ode_error_study, SyntheticQuadratic};
use dlrt_core::integrators::{s_step_loss_delta_psi, QuadraticLoss, StepConfig};
use dlrt_core::lowrank::init_lowrank;
use dlrt_core::nn::checkpoint::write_network;
use dlrt_core::nn::{mlp, train, EpochRecord, Network, TrainConfig, TrainStatus};
use dlrt_core::{DlrtError, Integrator};
use serde::Serialize;

use crate::config::{config_hash, AuditSettings, CompareSettings, OdeSettings, TrainSettings};
use crate::report::{num, opt_num, write_json, CsvOut, TOOL};
use crate::Failure;

fn core_err(e: DlrtError) -> Failure {
    match e {
        DlrtError::Io(_)
        | DlrtError::Format(_)
        | DlrtError::Truncated(_)
        | DlrtError::LabelRange { .. } => Failure::Io(e.into()),
        _ => Failure::Config(e.into()),
    }
}

fn io<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Io)
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    io(std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display())))
}

fn load_data(s: &TrainSettings) -> Result<(Dataset, Dataset), Failure> {
    let (train_set, test_set) = load_mnist(&s.data_dir).map_err(|e| {
        Failure::Io(
            anyhow::Error::new(e).context(format!("loading MNIST from {}", s.data_dir.display())),
        )
    })?;
    let train_set = s
        .train_limit
        .map_or(train_set.clone(), |n| train_set.truncated(n));
    let test_set = s
        .test_limit
        .map_or(test_set.clone(), |n| test_set.truncated(n));
    let input = s.widths[0];
    if train_set.features() != input || test_set.features() != input {
        return Err(Failure::Config(anyhow::anyhow!(
            "widths start at {input} but the data has {} features",
            train_set.features()
        )));
    }
    if let Some(&classes) = s.widths.last() {
        if let Some(&y) = train_set
            .labels()
            .iter()
            .chain(test_set.labels())
            .find(|&&y| y >= classes)
        {
            return Err(Failure::Config(anyhow::anyhow!(
                "label {y} does not fit {classes} outputs"
            )));
        }
    }
    Ok((train_set, test_set))
}

fn build_network(
    s: &TrainSettings,
    integrator: Integrator,
    rank: usize,
    seed: u64,
) -> Result<Network, Failure> {
    let rank = (integrator != Integrator::Full).then_some(rank);
    Network::init(&mlp(&s.widths, rank), seed).map_err(core_err)
}

/// Per-layer ranks, with dense layers reported at full rank.
fn layer_ranks(net: &Network) -> Vec<usize> {
    net.layers()
        .iter()
        .map(|l| {
            let (m, n) = l.dims();
            l.weights.rank().unwrap_or(m.min(n))
        })
        .collect()
}

fn train_header(layers: usize) -> Vec<String> {
    let mut h: Vec<String> = ["epoch", "train_loss", "test_accuracy"]
        .map(String::from)
        .to_vec();
    h.extend((1..=layers).map(|i| format!("rank_{i}")));
    h.extend(["param_count", "compression_rate"].map(String::from));
    h
}

fn train_row(r: &EpochRecord, ranks: &[usize]) -> Vec<String> {
    let mut row = vec![r.epoch.to_string(), num(r.train_loss), num(r.test_accuracy)];
    row.extend(ranks.iter().map(usize::to_string));
    row.extend([r.param_count.to_string(), num(r.compression_rate)]);
    row
}

#[derive(Serialize)]
struct RunSummary<'a, T: Serialize> {
    tool: &'static str,
    config_hash: &'a str,
    settings: &'a T,
    status: &'static str,
    diverged_at: Option<(usize, usize)>,
    reason: Option<String>,
    epochs_completed: usize,
    final_train_loss: f64,
    final_test_accuracy: f64,
    best_test_accuracy: f64,
    ranks: Vec<usize>,
    param_count: usize,
    compression_rate: f64,
}

struct RunResult {
    status: TrainStatus,
    last: EpochRecord,
    best: f64,
    ranks: Vec<usize>,
}

/// Trains one network and writes `<stem>.csv`, `<stem>.json` and
/// `<stem>.ckpt` into `dir`.
fn run_training(
    s: &TrainSettings,
    integrator: Integrator,
    rank: usize,
    seed: u64,
    data: &(Dataset, Dataset),
    dir: &Path,
    stem: &str,
) -> Result<RunResult, Failure> {
    let mut settings = s.clone();
    settings.integrator = integrator;
    settings.rank = rank;
    settings.seed = seed;
    let hash = config_hash(&settings);
    let mut net = build_network(&settings, integrator, rank, seed)?;
    let layers = net.layers().len();
    let mut csv = io(CsvOut::create(
        &dir.join(format!("{stem}.csv")),
        &hash,
        &train_header(layers),
    ))?;
    let policy = settings.policy().map_err(Failure::Config)?;
    let cfg = TrainConfig {
        integrator,
        step: StepConfig::new(settings.lr, policy).with_substeps(settings.substeps),
        epochs: settings.epochs,
        batch_size: settings.batch_size,
        seed,
    };

    let mut write_err = None;
    let mut ranks = Vec::new();
    // Rank columns come from the network at the time of the record; dense
    // layers never change, factored ranks come from the record.
    let dense_ranks = layer_ranks(&net);
    let factored: Vec<bool> = net
        .layers()
        .iter()
        .map(|l| l.weights.rank().is_some())
        .collect();
    let outcome = train(&mut net, &data.0, &data.1, &cfg, |r| {
        let mut it = r.ranks.iter();
        ranks = dense_ranks
            .iter()
            .zip(&factored)
            .map(|(&d, &f)| {
                if f {
                    *it.next().expect("rank per factored layer")
                } else {
                    d
                }
            })
            .collect();
        match csv.row(&train_row(r, &ranks)) {
            Ok(()) => ControlFlow::Continue(()),
            Err(e) => {
                write_err = Some(e);
                ControlFlow::Break(())
            }
        }
    })
    .map_err(core_err)?;
    if let Some(e) = write_err {
        return Err(Failure::Io(e));
    }

    let last = outcome.records.last().expect("initial record").clone();
    let best = outcome
        .records
        .iter()
        .map(|r| r.test_accuracy)
        .fold(0.0, f64::max);
    let (status, diverged_at, reason) = match &outcome.status {
        TrainStatus::Diverged {
            epoch,
            batch,
            reason,
        } => ("diverged", Some((*epoch, *batch)), Some(reason.clone())),
        _ => ("completed", None, None),
    };
    let summary = RunSummary {
        tool: TOOL,
        config_hash: &hash,
        settings: &settings,
        status,
        diverged_at,
        reason,
        epochs_completed: last.epoch,
        final_train_loss: last.train_loss,
        final_test_accuracy: last.test_accuracy,
        best_test_accuracy: best,
        ranks: ranks.clone(),
        param_count: last.param_count,
        compression_rate: last.compression_rate,
    };
    io(write_json(&dir.join(format!("{stem}.json")), &summary))?;
    if !matches!(outcome.status, TrainStatus::Diverged { .. }) {
        let path = dir.join(format!("{stem}.ckpt"));
        let mut f =
            io(std::fs::File::create(&path)
                .with_context(|| format!("creating {}", path.display())))?;
        write_network(&mut f, &net).map_err(core_err)?;
    }
    Ok(RunResult {
        status: outcome.status,
        last,
        best,
        ranks,
    })
}

pub fn cmd_train(s: &TrainSettings) -> Result<(), Failure> {
    let data = load_data(s)?;
    create_dir(&s.out_dir)?;
    let r = run_training(s, s.integrator, s.rank, s.seed, &data, &s.out_dir, "train")?;
    println!(
        "{}: epochs {}, test accuracy {:.4} (best {:.4}), ranks {:?}, params {}, compression {:.2}%",
        s.integrator, r.last.epoch, r.last.test_accuracy, r.best, r.ranks, r.last.param_count, r.last.compression_rate
    );
    match r.status {
        TrainStatus::Diverged {
            epoch,
            batch,
            reason,
        } => Err(Failure::Diverged(format!(
            "epoch {epoch}, batch {batch}: {reason}"
        ))),
        _ => Ok(()),
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_compare(s: &CompareSettings) -> Result<(), Failure> {
    let data = load_data(&s.base)?;
    let runs_dir = s.base.out_dir.join("runs");
    create_dir(&runs_dir)?;
    let hash = config_hash(s);
    let header = [
        "kind",
        "integrator",
        "seed",
        "status",
        "runs",
        "failures",
        "test_accuracy",
        "test_accuracy_std",
        "param_count",
        "compression_rate",
        "ranks",
    ]
    .map(String::from);
    let mut csv = io(CsvOut::create(
        &s.base.out_dir.join("compare.csv"),
        &hash,
        &header,
    ))?;
    let mut summaries = Vec::new();
    for &integrator in &s.integrators {
        let rank = if integrator.is_rank_adaptive() {
            s.base.rank
        } else {
            s.fixed_rank
        };
        let mut finished = Vec::new();
        let mut failures = 0;
        for &seed in &s.seeds {
            let stem = format!("{integrator}-seed{seed}");
            let r = run_training(&s.base, integrator, rank, seed, &data, &runs_dir, &stem)?;
            let status = if matches!(r.status, TrainStatus::Diverged { .. }) {
                "diverged"
            } else {
                "completed"
            };
            eprintln!(
                "{stem}: {status}, test accuracy {:.4}",
                r.last.test_accuracy
            );
            csv_row(
                &mut csv,
                "run",
                integrator,
                &seed.to_string(),
                status,
                1,
                (status == "diverged") as usize,
                r.last.test_accuracy,
                None,
                r.last.param_count as f64,
                r.last.compression_rate,
                &r.ranks,
            )?;
            if status == "diverged" {
                failures += 1;
            } else {
                finished.push(r);
            }
        }
        let acc: Vec<f64> = finished.iter().map(|r| r.last.test_accuracy).collect();
        let (mean, std) = mean_std(&acc);
        let params = mean_std(
            &finished
                .iter()
                .map(|r| r.last.param_count as f64)
                .collect::<Vec<_>>(),
        )
        .0;
        let comp = mean_std(
            &finished
                .iter()
                .map(|r| r.last.compression_rate)
                .collect::<Vec<_>>(),
        )
        .0;
        csv_row(
            &mut csv,
            "summary",
            integrator,
            "",
            "",
            s.seeds.len(),
            failures,
            mean,
            Some(std),
            params,
            comp,
            &[],
        )?;
        println!(
            "{:<8} acc {:.2} ± {:.2}%  params {:.3}M  compression {:.2}%  failed {}/{}",
            integrator.name(),
            100.0 * mean,
            100.0 * std,
            params / 1e6,
            comp,
            failures,
            s.seeds.len()
        );
        summaries.push(serde_json::json!({
            "integrator": integrator.name(),
            "rank": rank,
            "runs": s.seeds.len(),
            "failures": failures,
            "mean_test_accuracy": mean,
            "std_test_accuracy": std,
            "mean_param_count": params,
            "mean_compression_rate": comp,
        }));
    }
    io(write_json(
        &s.base.out_dir.join("compare.json"),
        &serde_json::json!({ "tool": TOOL, "config_hash": hash, "settings": s, "summary": summaries }),
    ))
}

#[allow(clippy::too_many_arguments)]
fn csv_row(
    csv: &mut CsvOut,
    kind: &str,
    integrator: Integrator,
    seed: &str,
    status: &str,
    runs: usize,
    failures: usize,
    acc: f64,
    std: Option<f64>,
    params: f64,
    comp: f64,
    ranks: &[usize],
) -> Result<(), Failure> {
    let ranks = ranks
        .iter()
        .map(usize::to_string)
        .collect::<Vec<_>>()
        .join(" ");
    io(csv.row(&[
        kind.into(),
        integrator.name().into(),
        seed.into(),
        status.into(),
        runs.to_string(),
        failures.to_string(),
        num(acc),
        opt_num(std),
        num(params),
        num(comp),
        ranks,
    ]))
}

pub fn cmd_ode_bench(s: &OdeSettings) -> Result<(), Failure> {
    create_dir(&s.out_dir)?;
    let hash = config_hash(s);
    let problem = SyntheticQuadratic::generate(s.m, s.n, s.target_rank, s.eps, s.scale, s.seed)
        .map_err(core_err)?;
    let policy = dlrt_core::TruncationPolicy::new(s.tau, s.r_min, s.r_max).map_err(core_err)?;
    let header = ["integrator", "h", "steps", "error", "order", "final_rank"].map(String::from);
    let mut csv = io(CsvOut::create(
        &s.out_dir.join("ode_bench.csv"),
        &hash,
        &header,
    ))?;
    let mut tables = Vec::new();
    for &integrator in &s.integrators {
        let table = ode_error_study(&problem, integrator, &s.h_list, s.t_end, s.ref_h, policy)
            .map_err(core_err)?;
        for row in &table.rows {
            io(csv.row(&[
                integrator.name().into(),
                num(row.h),
                row.steps.to_string(),
                num(row.error),
                opt_num(row.order),
                row.final_rank.to_string(),
            ]))?;
            println!(
                "{:<8} h {:<8} error {:.3e}  order {}",
                integrator.name(),
                row.h,
                row.error,
                row.order.map_or("-".into(), |o| format!("{o:.3}"))
            );
        }
        if table.plateaued() {
            println!(
                "{}: error plateau (last observed order < 0.5)",
                integrator.name()
            );
        }
        tables.push(serde_json::json!({
            "integrator": integrator.name(),
            "plateaued": table.plateaued(),
            "orders": table.rows.iter().map(|r| r.order).collect::<Vec<_>>(),
            "errors": table.rows.iter().map(|r| r.error).collect::<Vec<_>>(),
        }));
    }
    io(write_json(
        &s.out_dir.join("ode_bench.json"),
        &serde_json::json!({ "tool": TOOL, "config_hash": hash, "settings": s, "results": tables }),
    ))
}

/// Slack allowed on the descent inequality.
const DESCENT_SLACK: f64 = 1e-9;

pub fn cmd_descent_audit(s: &AuditSettings) -> Result<(), Failure> {
    create_dir(&s.out_dir)?;
    let hash = config_hash(s);
    let initial = init_lowrank(s.m, s.n, s.rank, s.seed.wrapping_add(1)).map_err(core_err)?;
    let mut oracle = if s.stationary {
        QuadraticLoss::new(initial.to_dense())
    } else {
        SyntheticQuadratic::generate(
            s.m,
            s.n,
            s.target_rank.min(s.m.min(s.n)),
            s.eps,
            s.scale,
            s.seed,
        )
        .map_err(core_err)?
        .oracle()
    };
    let c_l = QuadraticLoss::LIPSCHITZ;
    let guaranteed = s.lr <= 2.0 / c_l;
    if !guaranteed {
        eprintln!(
            "warning: h = {} exceeds 2/c_l = {}; the descent inequality is not guaranteed",
            s.lr,
            2.0 / c_l
        );
    }
    let policy = dlrt_core::TruncationPolicy::new(s.tau, s.r_min, s.r_max).map_err(core_err)?;
    let cfg = StepConfig::new(s.lr, policy).with_substeps(s.substeps);
    let records = descent_audit(&mut oracle, &initial, &cfg, s.steps, c_l).map_err(core_err)?;

    let header = [
        "step",
        "rank_before",
        "rank_after",
        "loss_before",
        "loss_pre_truncation",
        "loss_after",
        "bound",
        "excess",
        "holds",
    ]
    .map(String::from);
    let mut csv = io(CsvOut::create(
        &s.out_dir.join("descent_audit.csv"),
        &hash,
        &header,
    ))?;
    for r in &records {
        io(csv.row(&[
            r.step.to_string(),
            r.rank_before.to_string(),
            r.rank_after.to_string(),
            num(r.loss_before),
            num(r.loss_pre_truncation),
            num(r.loss_after),
            num(r.bound),
            num(r.excess),
            r.holds(DESCENT_SLACK).to_string(),
        ]))?;
    }
    let first_violation = records.iter().find(|r| !r.holds(DESCENT_SLACK));
    let max_excess = records
        .iter()
        .map(|r| r.excess)
        .fold(f64::NEG_INFINITY, f64::max);

    // PSI S-step from the initial state at h and h/2.
    let delta = |h: f64, oracle: &mut QuadraticLoss| -> Result<f64, Failure> {
        let (before, after) =
            s_step_loss_delta_psi(&initial, oracle, &cfg.with_h(h)).map_err(core_err)?;
        Ok(after - before)
    };
    let (d1, d2) = (delta(s.lr, &mut oracle)?, delta(s.lr / 2.0, &mut oracle)?);
    let ratio = if d2 != 0.0 { Some(d1 / d2) } else { None };
    println!(
        "descent: {} steps, max excess {:.3e}, violations {}",
        records.len(),
        max_excess,
        records.iter().filter(|r| !r.holds(DESCENT_SLACK)).count()
    );
    println!(
        "PSI S-step loss delta: {d1:.6e} at h, {d2:.6e} at h/2, ratio {}",
        opt_num(ratio)
    );
    io(write_json(
        &s.out_dir.join("descent_audit.json"),
        &serde_json::json!({
            "tool": TOOL,
            "config_hash": hash,
            "settings": s,
            "steps": records.len(),
            "max_excess": max_excess,
            "violations": records.iter().filter(|r| !r.holds(DESCENT_SLACK)).count(),
            "guaranteed": guaranteed,
            "s_step_delta": d1,
            "s_step_delta_half": d2,
            "s_step_ratio": ratio,
        }),
    ))?;
    match first_violation {
        Some(r) if guaranteed => Err(Failure::Violation(format!(
            "step {}: ℓ(Ŷ₁) = {:.6e} exceeds the bound {:.6e} by {:.3e}",
            r.step, r.loss_pre_truncation, r.bound, r.excess
        ))),
        _ => Ok(()),
    }
}
