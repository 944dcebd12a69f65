use std::path::PathBuf;

use anyhow::Result;
use fedfdi_core::config::Overrides;
use fedfdi_core::dataset::{bdd_flag_rates, build_corpus, save_corpus};
use fedfdi_core::estimation::{BadDataDetector, WeightMatrix};

use crate::setup::{GridArgs, ProfileArgs};

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    profile: ProfileArgs,

    #[command(flatten)]
    grid: GridArgs,

    /// Master seed [default: 7]
    #[arg(long)]
    seed: Option<u64>,

    /// Training samples [default: profile]
    #[arg(long)]
    train: Option<usize>,

    /// Validation samples, split evenly across subsets [default: profile]
    #[arg(long)]
    val: Option<usize>,

    /// Number of validation subsets [default: 10]
    #[arg(long)]
    subsets: Option<usize>,

    /// Share of attacked samples in every split [default: 0.5]
    #[arg(long)]
    attack_fraction: Option<f64>,

    /// Meter noise standard deviation, p.u. [default: 0.2]
    #[arg(long)]
    sigma: Option<f64>,

    /// Loads are scaled by U[1 - v, 1 + v] [default: 0.2]
    #[arg(long)]
    variation: Option<f64>,

    /// Attack model: stealthy or unstructured [default: stealthy]
    #[arg(long)]
    attack: Option<String>,

    /// Largest state-error entry, rad [default: 0.2]
    #[arg(long)]
    magnitude: Option<f64>,

    /// Largest number of attacked state variables [default: 3]
    #[arg(long)]
    max_sparsity: Option<usize>,

    /// Unstructured error size in noise sigmas [default: 50]
    #[arg(long)]
    sigma_mult: Option<f64>,

    /// Share of attacked samples that use the unstructured model instead [default: 0]
    #[arg(long)]
    unstructured_share: Option<f64>,

    /// Residual-test significance level
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,

    /// Output directory [default: data]
    #[arg(long, env = crate::OUT_ENV)]
    out: Option<PathBuf>,
}

pub fn run(a: Args) -> Result<()> {
    let flags = Overrides {
        seed: a.seed,
        n_train: a.train,
        n_val: a.val,
        val_subsets: a.subsets,
        attack_fraction: a.attack_fraction,
        sigma: a.sigma,
        load_variation: a.variation,
        attack_model: a.attack.clone(),
        attack_magnitude: a.magnitude,
        max_sparsity: a.max_sparsity,
        gross_sigma_mult: a.sigma_mult,
        unstructured_share: a.unstructured_share,
        ..Overrides::default()
    };
    let cfg = a.profile.resolve(&flags)?;
    let grid = a.grid.load()?;
    let w = WeightMatrix::from_sigma(grid.n_meters(), cfg.gen.sigma)?;
    let detector = BadDataDetector::new(&grid.h, &w, a.alpha)?;
    let out = crate::out_dir(&a.out, "data");

    let corpus = build_corpus(cfg.seed, &cfg.split, &cfg.gen, &grid)?;
    let (attacked_rate, normal_rate) = bdd_flag_rates(&corpus.train, &detector)?;
    save_corpus(&corpus, &out)?;

    println!("corpus      {}", out.display());
    println!("seed        {}", cfg.seed);
    println!("grid        {} buses, {} meters, sha256 {}", grid.system.n_bus(), grid.n_meters(), grid.system.fingerprint());
    println!("train       {} samples, {} attacked", corpus.train.len(), corpus.train.attacked_count());
    println!(
        "validation  {} subsets x {} samples, {} attacked",
        corpus.val.len(),
        corpus.val.first().map_or(0, |v| v.len()),
        corpus.val.iter().map(|v| v.attacked_count()).sum::<usize>()
    );
    println!("residual test (alpha {}, threshold {:.4}) on train:", a.alpha, detector.config().threshold);
    println!("  attacked flagged  {attacked_rate:.4}");
    println!("  normal flagged    {normal_rate:.4}");
    println!("  gap               {:.4}", (attacked_rate - normal_rate).abs());
    Ok(())
}
