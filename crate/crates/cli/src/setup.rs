//! Profile, config-file and flag layering plus grid loading.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use fedfdi_core::config::{load_overrides, ExperimentConfig, Overrides, Profile};
use fedfdi_core::grid::{load_bus_system, load_load_profile, load_measurement_config, Grid, LoadProfile, MeasurementConfig};

#[derive(Debug, Clone, Args)]
pub struct ProfileArgs {
    /// Built-in settings: desk (20k/2k samples, 30 rounds) or paper (100k/10k, 100 rounds)
    #[arg(long, default_value = "desk")]
    pub profile: String,

    /// TOML file of overrides applied on top of the profile
    #[arg(long)]
    pub config: Option<PathBuf>,
}

impl ProfileArgs {
    /// Profile, then config file, then explicit flags.
    pub fn resolve(&self, flags: &Overrides) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::profile(Profile::parse(&self.profile)?);
        if let Some(path) = &self.config {
            if !path.is_file() {
                bail!("config file not found: {}", path.display());
            }
            cfg.apply(&load_overrides(path)?);
        }
        cfg.apply(flags);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    /// Branch table (`buses N slack S` then `branch FROM TO X` lines) [default: bundled IEEE 14-bus]
    #[arg(long)]
    pub grid: Option<PathBuf>,

    /// Meter list (`inj BUS` / `flow BRANCH fwd|rev` lines) [default: all injections plus the first five flows]
    #[arg(long)]
    pub meters: Option<PathBuf>,

    /// Base loads (`load BUS P` / `gen BUS P` lines) [default: bundled IEEE 14-bus loads]
    #[arg(long)]
    pub loads: Option<PathBuf>,
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} file not found: {}", path.display());
    }
    Ok(())
}

impl GridArgs {
    pub fn load(&self) -> Result<Grid> {
        if self.grid.is_none() && self.meters.is_none() && self.loads.is_none() {
            return Ok(Grid::ieee14());
        }
        for (p, what) in [(&self.grid, "grid"), (&self.meters, "meter"), (&self.loads, "load")] {
            if let Some(p) = p {
                require(p, what)?;
            }
        }
        let system = match &self.grid {
            Some(p) => load_bus_system(p).with_context(|| format!("reading {}", p.display()))?,
            None => fedfdi_core::grid::BusSystem::ieee14(),
        };
        let meters = match &self.meters {
            Some(p) => load_measurement_config(p).with_context(|| format!("reading {}", p.display()))?,
            None => MeasurementConfig::injections_plus_flows(&system, 5),
        };
        let loads = match &self.loads {
            Some(p) => load_load_profile(p, system.n_bus()).with_context(|| format!("reading {}", p.display()))?,
            None if system.n_bus() == 14 => LoadProfile::ieee14(),
            None => bail!("a custom {}-bus grid needs --loads", system.n_bus()),
        };
        Ok(Grid::new(system, meters, loads)?)
    }
}
