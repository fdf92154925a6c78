//! Run configuration: an optional TOML file merged with command-line flags.
//!
//! Every key is optional in both places; flags win over the file, and the
//! remaining gaps are filled with per-command defaults. Unknown file keys are
//! rejected.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::Args;
use dlrt_core::integrators::study::step_count;
use dlrt_core::lowrank::TruncationPolicy;
use dlrt_core::Integrator;
use serde::{Deserialize, Serialize, Serializer};
use sha2::{Digest, Sha256};

/// Keys accepted in the config file and as flags.
#[derive(Args, Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Overrides {
    /// TOML config file; flags take precedence over its keys.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// full, psi, bc-psi, bug or abc-psi.
    #[arg(long)]
    pub integrator: Option<String>,
    /// Comma-separated integrators (compare).
    #[arg(long, value_delimiter = ',')]
    pub integrators: Option<Vec<String>>,
    /// Layer widths, input first (e.g. 784,500,10).
    #[arg(long, value_delimiter = ',')]
    pub widths: Option<Vec<usize>>,
    /// Learning rate / time step h.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Truncation tolerance τ.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Initial rank of factored layers.
    #[arg(long)]
    pub rank: Option<usize>,
    /// Rank used by the fixed-rank integrators in compare (defaults to --rank).
    #[arg(long)]
    pub fixed_rank: Option<usize>,
    #[arg(long)]
    pub r_min: Option<usize>,
    #[arg(long)]
    pub r_max: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated seeds (compare).
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Directory with the four MNIST IDX files [default: $DLRT_DATA_DIR, then data/mnist].
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Explicit Euler substeps per sub-flow.
    #[arg(long)]
    pub substeps: Option<usize>,
    /// Use only the first N training samples.
    #[arg(long)]
    pub train_limit: Option<usize>,
    /// Use only the first N test samples.
    #[arg(long)]
    pub test_limit: Option<usize>,

    /// Synthetic problem rows (ode-bench, descent-audit).
    #[arg(long)]
    pub m: Option<usize>,
    /// Synthetic problem columns.
    #[arg(long)]
    pub n: Option<usize>,
    /// Rank of the synthetic target's low-rank part.
    #[arg(long)]
    pub target_rank: Option<usize>,
    /// Weight of the full-rank perturbation of the synthetic target.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Frobenius norm of the synthetic target's low-rank part and start point.
    #[arg(long)]
    pub scale: Option<f64>,
    /// Comma-separated step sizes (ode-bench).
    #[arg(long, value_delimiter = ',')]
    pub h_list: Option<Vec<f64>>,
    #[arg(long)]
    pub t_end: Option<f64>,
    /// Step size of the full-Euler reference solution.
    #[arg(long)]
    pub ref_h: Option<f64>,
    /// Number of steps (descent-audit).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Use a target equal to the start point, so the gradient vanishes
    /// (descent-audit).
    #[arg(long)]
    pub stationary: Option<bool>,
}

macro_rules! merge_fields {
    ($hi:expr, $lo:expr; $($f:ident),* $(,)?) => {
        Overrides { config: $hi.config.clone(), $($f: $hi.$f.clone().or_else(|| $lo.$f.clone())),* }
    };
}

impl Overrides {
    /// `self` (flags) over the file named by `--config`, if any.
    pub fn resolve(&self) -> anyhow::Result<Overrides> {
        let Some(path) = &self.config else {
            return Ok(self.clone());
        };
        let file = Self::from_file(path)?;
        Ok(merge_fields!(self, file;
            integrator, integrators, widths, lr, tau, rank, fixed_rank, r_min, r_max, epochs, batch_size,
            seed, seeds, data_dir, out_dir, substeps, train_limit, test_limit, m, n, target_rank, eps,
            scale, h_list, t_end, ref_h, steps, stationary))
    }

    pub fn from_file(path: &Path) -> anyhow::Result<Overrides> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn ser_integrator<S: Serializer>(i: &Integrator, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(i.name())
}

fn ser_integrators<S: Serializer>(list: &[Integrator], s: S) -> Result<S::Ok, S::Error> {
    s.collect_seq(list.iter().map(|i| i.name()))
}

fn integrator(s: &str) -> anyhow::Result<Integrator> {
    Ok(s.parse::<Integrator>()?)
}

fn policy(tau: f64, r_min: usize, r_max: usize) -> anyhow::Result<TruncationPolicy> {
    Ok(TruncationPolicy::new(tau, r_min, r_max)?)
}

fn positive(name: &str, v: f64) -> anyhow::Result<f64> {
    if !(v > 0.0 && v.is_finite()) {
        bail!("{name} must be a positive number, got {v}");
    }
    Ok(v)
}

/// Settings shared by `train` and `compare`.
#[derive(Clone, Debug, Serialize)]
pub struct TrainSettings {
    #[serde(serialize_with = "ser_integrator")]
    pub integrator: Integrator,
    pub widths: Vec<usize>,
    pub lr: f64,
    pub tau: f64,
    pub rank: usize,
    pub r_min: usize,
    pub r_max: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub substeps: usize,
    pub train_limit: Option<usize>,
    pub test_limit: Option<usize>,
    #[serde(skip)]
    pub data_dir: PathBuf,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl TrainSettings {
    pub fn from_overrides(o: &Overrides) -> anyhow::Result<Self> {
        let s = TrainSettings {
            integrator: integrator(o.integrator.as_deref().unwrap_or("abc-psi"))?,
            widths: o
                .widths
                .clone()
                .unwrap_or_else(|| vec![784, 500, 500, 500, 500, 10]),
            lr: positive("lr", o.lr.unwrap_or(0.01))?,
            tau: o.tau.unwrap_or(0.1),
            rank: o.rank.unwrap_or(32),
            r_min: o.r_min.unwrap_or(2),
            r_max: o.r_max.unwrap_or(64),
            epochs: o.epochs.unwrap_or(20),
            batch_size: o.batch_size.unwrap_or(64),
            seed: o.seed.unwrap_or(1),
            substeps: o.substeps.unwrap_or(1),
            train_limit: o.train_limit,
            test_limit: o.test_limit,
            data_dir: o
                .data_dir
                .clone()
                .or_else(|| std::env::var_os("DLRT_DATA_DIR").map(PathBuf::from))
                .unwrap_or_else(|| PathBuf::from("data/mnist")),
            out_dir: o.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
        };
        if s.widths.len() < 2 || s.widths.contains(&0) {
            bail!(
                "widths needs at least two positive entries, got {:?}",
                s.widths
            );
        }
        if s.rank == 0 {
            bail!("rank must be ≥ 1");
        }
        if s.batch_size == 0 {
            bail!("batch_size must be ≥ 1");
        }
        if s.substeps == 0 {
            bail!("substeps must be ≥ 1");
        }
        s.policy()?;
        Ok(s)
    }

    pub fn policy(&self) -> anyhow::Result<TruncationPolicy> {
        policy(self.tau, self.r_min, self.r_max)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CompareSettings {
    pub base: TrainSettings,
    #[serde(serialize_with = "ser_integrators")]
    pub integrators: Vec<Integrator>,
    pub seeds: Vec<u64>,
    pub fixed_rank: usize,
}

impl CompareSettings {
    pub fn from_overrides(o: &Overrides) -> anyhow::Result<Self> {
        let base = TrainSettings::from_overrides(o)?;
        let integrators = match &o.integrators {
            Some(list) => list
                .iter()
                .map(|s| integrator(s.trim()))
                .collect::<anyhow::Result<Vec<_>>>()?,
            None => vec![Integrator::AbcPsi, Integrator::BcPsi, Integrator::Psi],
        };
        let seeds = o.seeds.clone().unwrap_or_else(|| vec![1, 2, 3, 4, 5]);
        if integrators.is_empty() || seeds.is_empty() {
            bail!("compare needs at least one integrator and one seed");
        }
        let fixed_rank = o.fixed_rank.unwrap_or(base.rank);
        if fixed_rank == 0 {
            bail!("fixed_rank must be ≥ 1");
        }
        Ok(Self {
            base,
            integrators,
            seeds,
            fixed_rank,
        })
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct OdeSettings {
    #[serde(serialize_with = "ser_integrators")]
    pub integrators: Vec<Integrator>,
    pub m: usize,
    pub n: usize,
    pub target_rank: usize,
    pub eps: f64,
    pub scale: f64,
    pub tau: f64,
    pub r_min: usize,
    pub r_max: usize,
    pub h_list: Vec<f64>,
    pub t_end: f64,
    pub ref_h: f64,
    pub seed: u64,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl OdeSettings {
    pub fn from_overrides(o: &Overrides) -> anyhow::Result<Self> {
        let integrators = match (&o.integrators, &o.integrator) {
            (Some(list), _) => list
                .iter()
                .map(|s| integrator(s.trim()))
                .collect::<anyhow::Result<Vec<_>>>()?,
            (None, Some(one)) => vec![integrator(one)?],
            (None, None) => vec![Integrator::AbcPsi],
        };
        let target_rank = o.target_rank.or(o.rank).unwrap_or(4);
        let s = OdeSettings {
            integrators,
            m: o.m.unwrap_or(40),
            n: o.n.unwrap_or(30),
            target_rank,
            eps: o.eps.unwrap_or(0.0),
            scale: positive("scale", o.scale.unwrap_or(0.02))?,
            tau: o.tau.unwrap_or(0.0),
            r_min: o.r_min.unwrap_or(1),
            r_max: o.r_max.unwrap_or(2 * target_rank),
            h_list: o
                .h_list
                .clone()
                .unwrap_or_else(|| vec![0.1, 0.05, 0.025, 0.0125]),
            t_end: positive("t_end", o.t_end.unwrap_or(1.0))?,
            ref_h: positive("ref_h", o.ref_h.unwrap_or(1e-4))?,
            seed: o.seed.unwrap_or(7),
            out_dir: o.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
        };
        if s.h_list.is_empty() {
            bail!("h_list is empty");
        }
        for &h in s.h_list.iter().chain([&s.ref_h]) {
            step_count(s.t_end, positive("h", h)?)?;
        }
        if s.eps < 0.0 || !s.eps.is_finite() {
            bail!("eps must be ≥ 0, got {}", s.eps);
        }
        policy(s.tau, s.r_min, s.r_max)?;
        Ok(s)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct AuditSettings {
    pub m: usize,
    pub n: usize,
    pub rank: usize,
    pub target_rank: usize,
    pub eps: f64,
    pub scale: f64,
    pub lr: f64,
    pub tau: f64,
    pub r_min: usize,
    pub r_max: usize,
    pub steps: usize,
    pub seed: u64,
    pub substeps: usize,
    pub stationary: bool,
    #[serde(skip)]
    pub out_dir: PathBuf,
}

impl AuditSettings {
    pub fn from_overrides(o: &Overrides) -> anyhow::Result<Self> {
        let rank = o.rank.unwrap_or(4);
        let s = AuditSettings {
            m: o.m.unwrap_or(50),
            n: o.n.unwrap_or(40),
            rank,
            target_rank: o.target_rank.unwrap_or(10),
            eps: o.eps.unwrap_or(0.1),
            scale: positive("scale", o.scale.unwrap_or(1.0))?,
            lr: positive("lr", o.lr.unwrap_or(0.5))?,
            tau: o.tau.unwrap_or(0.05),
            r_min: o.r_min.unwrap_or(1),
            r_max: o.r_max.unwrap_or(4 * rank),
            steps: o.steps.unwrap_or(200),
            seed: o.seed.unwrap_or(0),
            substeps: o.substeps.unwrap_or(1),
            stationary: o.stationary.unwrap_or(false),
            out_dir: o.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs")),
        };
        if s.rank == 0 || s.rank > s.m.min(s.n) {
            bail!("rank {} does not fit a {}x{} problem", s.rank, s.m, s.n);
        }
        if s.substeps == 0 {
            bail!("substeps must be ≥ 1");
        }
        policy(s.tau, s.r_min, s.r_max)?;
        Ok(s)
    }
}

/// First 16 hex digits of the SHA-256 of the settings' JSON form.
pub fn config_hash<T: Serialize>(settings: &T) -> String {
    let json = serde_json::to_vec(settings).expect("settings serialize");
    hex::encode(&Sha256::digest(&json)[..8])
}
