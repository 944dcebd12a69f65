use anyhow::Result;
use fedfdi_core::attack::{attack_model, AttackParams};
use fedfdi_core::dataset::{gen_sample, gen_scenario};
use fedfdi_core::estimation::{BadDataDetector, WeightMatrix};
use fedfdi_core::rng::SeedStreams;

use crate::setup::GridArgs;

#[derive(Debug, clap::Args)]
pub struct Args {
    #[command(flatten)]
    grid: GridArgs,

    /// Number of rows
    #[arg(long, default_value_t = 20)]
    n: usize,

    /// Master seed
    #[arg(long, default_value_t = 7)]
    seed: u64,

    /// Use single-meter gross errors instead of stealthy attacks
    #[arg(long)]
    unstructured: bool,

    /// Gross error size in noise sigmas
    #[arg(long, default_value_t = 50.0)]
    sigma_mult: f64,

    /// Meter noise standard deviation, p.u.
    #[arg(long, default_value_t = 0.2)]
    sigma: f64,

    /// Largest state-error entry, rad
    #[arg(long, default_value_t = 0.2)]
    magnitude: f64,

    /// Largest number of attacked state variables
    #[arg(long, default_value_t = 3)]
    max_sparsity: usize,

    /// Loads are scaled by U[1 - v, 1 + v]
    #[arg(long, default_value_t = 0.2)]
    variation: f64,

    /// Residual-test significance level
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
}

pub fn run(a: Args) -> Result<()> {
    let grid = a.grid.load()?;
    let params = AttackParams {
        magnitude: a.magnitude,
        max_sparsity: a.max_sparsity,
        gross_sigma_mult: a.sigma_mult,
        noise_sigma: a.sigma,
    };
    let model = attack_model(if a.unstructured { "unstructured" } else { "stealthy" }, &params)?;
    let w = WeightMatrix::from_sigma(grid.n_meters(), a.sigma)?;
    let detector = BadDataDetector::new(&grid.h, &w, a.alpha)?;
    let streams = SeedStreams::new(a.seed);

    println!("row,attacked_meters,r2_before,r2_after,flag_before,flag_after");
    let (mut flagged, mut unchanged) = (0, 0);
    for k in 0..a.n {
        let mut rng = streams.indexed("corpus", k as u64);
        let scenario = gen_scenario(&mut rng, &grid.system, &grid.loads, a.variation)?;
        let clean = gen_sample(&mut rng, &grid.h, &scenario.state, a.sigma, None, k as u64)?;
        let attack = model.generate(&mut streams.indexed("attack", k as u64), &grid.h)?;
        let attacked: Vec<f64> = clean.features.iter().zip(&attack.0).map(|(y, d)| y + d).collect();
        let (before, after) = (detector.statistic(&clean.features)?, detector.statistic(&attacked)?);
        let (fb, fa) = (detector.flags(&clean.features)?, detector.flags(&attacked)?);
        let meters = attack.0.iter().filter(|v| v.abs() > fedfdi_core::attack::DEFAULT_LABEL_EPS).count();
        println!("{},{meters},{before:.6},{after:.6},{fb},{fa}", k + 1);
        flagged += usize::from(fa);
        unchanged += usize::from(fa == fb);
    }
    if a.n > 0 {
        eprintln!(
            "{} attack, threshold {:.4}: flagged after attack {flagged}/{n}, verdict unchanged {unchanged}/{n}",
            model.name(),
            detector.config().threshold,
            n = a.n
        );
    }
    Ok(())
}
