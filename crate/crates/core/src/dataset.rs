//! Labeled measurement corpus: operating scenarios, noisy meter readings,
//! injected attacks, standardization and CSV persistence.
//!
//! A saved dataset is a CSV file with header `f1..fI,l1..lI,attacked` and a
//! sidecar `<file>.meta` of `key=value` lines:
//!
//! ```text
//! format=fedfdi-dataset-v1
//! samples=1000
//! features=19
//! first_scenario=0
//! seed=7
//! sigma=0.2
//! grid=<sha256 of the grid file>
//! standardized=false
//! scaler_mean=0.1,0.2,...
//! scaler_std=1.1,0.9,...
//! ```
//!
//! The scaler keys are optional. Floats are written in Rust's shortest
//! round-trip notation so a save/load cycle is exact.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::attack::{attack_model, label_of, AttackParams, AttackVector, LabelVector, DEFAULT_LABEL_EPS};
use crate::error::{Error, Result};
use crate::estimation::BadDataDetector;
use crate::grid::{BusSystem, Grid, HMatrix, LoadProfile};
use crate::rng::{SeedStreams, StreamRng};

pub const FORMAT_TAG: &str = "fedfdi-dataset-v1";
const STD_FLOOR: f64 = 1e-8;

/// DC power flow with the slack bus absorbing the imbalance.
pub struct DcPowerFlow {
    system: BusSystem,
    factor: nalgebra::Cholesky<f64, nalgebra::Dyn>,
}

impl DcPowerFlow {
    pub fn new(system: &BusSystem) -> Result<Self> {
        let factor = system
            .reduced_susceptance()
            .cholesky()
            .ok_or_else(|| Error::invalid("singular susceptance matrix"))?;
        Ok(Self {
            system: system.clone(),
            factor,
        })
    }

    /// Angles of the non-slack buses for per-bus net injections (slack entry ignored).
    pub fn solve(&self, injections: &[f64]) -> Result<Vec<f64>> {
        if injections.len() != self.system.n_bus() {
            return Err(Error::Dimension {
                what: "injection vector",
                expected: self.system.n_bus(),
                found: injections.len(),
            });
        }
        let p: Vec<f64> = (1..=self.system.n_bus())
            .filter(|&b| b != self.system.slack_bus())
            .map(|b| injections[b - 1])
            .collect();
        Ok(self.factor.solve(&DVector::from_vec(p)).as_slice().to_vec())
    }
}

/// One operating point: net per-bus injections (slack balanced) and the angles.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub injections: Vec<f64>,
    pub state: Vec<f64>,
}

fn sample_injections(rng: &mut StreamRng, system: &BusSystem, loads: &LoadProfile, variation: f64) -> Vec<f64> {
    let slack = system.slack_bus() - 1;
    let mut p: Vec<f64> = loads
        .demand
        .iter()
        .zip(&loads.generation)
        .map(|(&d, &g)| {
            let factor = if variation > 0.0 {
                rand::Rng::random_range(rng, 1.0 - variation..=1.0 + variation)
            } else {
                1.0
            };
            g - factor * d
        })
        .collect();
    p[slack] = 0.0;
    p[slack] = -p.iter().sum::<f64>();
    p
}

fn check_variation(variation: f64) -> Result<()> {
    if !(0.0..1.0).contains(&variation) {
        return Err(Error::invalid(format!("load variation must lie in [0, 1), got {variation}")));
    }
    Ok(())
}

/// Scales every bus load by an independent factor from
/// `[1 - variation, 1 + variation]` and solves the DC power flow.
pub fn gen_scenario(rng: &mut StreamRng, system: &BusSystem, loads: &LoadProfile, variation: f64) -> Result<Scenario> {
    check_variation(variation)?;
    let flow = DcPowerFlow::new(system)?;
    let injections = sample_injections(rng, system, loads, variation);
    let state = flow.solve(&injections)?;
    Ok(Scenario { injections, state })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub labels: LabelVector,
    pub scenario: u64,
    pub attacked: bool,
}

/// `features = H v_true + N(0, σ²) + a`
pub fn gen_sample(
    rng: &mut StreamRng,
    h: &HMatrix,
    v_true: &[f64],
    sigma: f64,
    attack: Option<&AttackVector>,
    scenario: u64,
) -> Result<Sample> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut features = h.apply(v_true)?;
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
        for f in features.iter_mut() {
            *f += normal.sample(rng);
        }
    }
    let labels = match attack {
        Some(a) => {
            if a.len() != features.len() {
                return Err(Error::Dimension {
                    what: "attack vector",
                    expected: features.len(),
                    found: a.len(),
                });
            }
            for (f, d) in features.iter_mut().zip(a.as_slice()) {
                *f += d;
            }
            label_of(a, DEFAULT_LABEL_EPS)
        }
        None => LabelVector::zeros(features.len()),
    };
    let attacked = labels.any();
    Ok(Sample {
        features,
        labels,
        scenario,
        attacked,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scaler {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Scaler {
    pub fn transform(&self, features: &[f64]) -> Vec<f64> {
        features
            .iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(x, (m, s))| (x - m) / s)
            .collect()
    }
}

/// Where a dataset came from; written to the metadata sidecar.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Provenance {
    pub seed: Option<u64>,
    pub sigma: Option<f64>,
    pub grid_hash: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Scaler fit on the training split this data belongs to.
    pub scaler: Option<Scaler>,
    /// Whether `scaler` has already been applied to the features.
    pub standardized: bool,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self {
            samples,
            scaler: None,
            standardized: false,
            provenance: Provenance::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.samples.first().map_or(0, |s| s.features.len())
    }

    pub fn attacked_count(&self) -> usize {
        self.samples.iter().filter(|s| s.attacked).count()
    }

    pub fn feature_matrix(&self) -> Array2<f64> {
        let (n, d) = (self.len(), self.n_features());
        Array2::from_shape_fn((n, d), |(i, j)| self.samples[i].features[j])
    }

    pub fn label_matrix(&self) -> Array2<f64> {
        let (n, d) = (self.len(), self.samples.first().map_or(0, |s| s.labels.0.len()));
        Array2::from_shape_fn((n, d), |(i, j)| f64::from(self.samples[i].labels.0[j]))
    }

    /// Copy restricted to `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            scaler: self.scaler.clone(),
            standardized: self.standardized,
            provenance: self.provenance.clone(),
        }
    }
}

/// Per-feature mean and population standard deviation (floored at 1e-8).
pub fn fit_scaler(train: &Dataset) -> Result<Scaler> {
    if train.is_empty() {
        return Err(Error::invalid("cannot fit a scaler on an empty dataset"));
    }
    let n = train.len() as f64;
    let d = train.n_features();
    let mut mean = vec![0.0; d];
    for s in &train.samples {
        for (m, x) in mean.iter_mut().zip(&s.features) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; d];
    for s in &train.samples {
        for ((v, x), m) in var.iter_mut().zip(&s.features).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt().max(STD_FLOOR)).collect();
    Ok(Scaler { mean, std })
}

pub fn apply_scaler(ds: &Dataset, scaler: &Scaler) -> Result<Dataset> {
    if ds.standardized {
        return Err(Error::invalid("dataset is already standardized"));
    }
    if !ds.is_empty() && ds.n_features() != scaler.mean.len() {
        return Err(Error::Dimension {
            what: "scaler",
            expected: ds.n_features(),
            found: scaler.mean.len(),
        });
    }
    let samples = ds
        .samples
        .iter()
        .map(|s| Sample {
            features: scaler.transform(&s.features),
            ..s.clone()
        })
        .collect();
    Ok(Dataset {
        samples,
        scaler: Some(scaler.clone()),
        standardized: true,
        provenance: ds.provenance.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub n_train: usize,
    pub n_val: usize,
    pub val_subsets: usize,
    pub attack_fraction: f64,
}

impl SplitSpec {
    pub fn desk() -> Self {
        Self {
            n_train: 20_000,
            n_val: 2_000,
            val_subsets: 10,
            attack_fraction: 0.5,
        }
    }

    pub fn paper() -> Self {
        Self {
            n_train: 100_000,
            n_val: 10_000,
            val_subsets: 10,
            attack_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_train == 0 {
            return Err(Error::invalid("training split must be nonempty"));
        }
        if self.val_subsets == 0 || self.n_val == 0 {
            return Err(Error::invalid("need at least one nonempty validation subset"));
        }
        if !self.n_val.is_multiple_of(self.val_subsets) {
            return Err(Error::invalid(format!(
                "{} validation samples cannot be split into {} equal subsets",
                self.n_val, self.val_subsets
            )));
        }
        if !(0.0..=1.0).contains(&self.attack_fraction) {
            return Err(Error::invalid(format!("attack fraction must lie in [0, 1], got {}", self.attack_fraction)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    pub sigma: f64,
    pub variation: f64,
    pub attack_model: String,
    pub attack: AttackParams,
    /// Share of attacked samples that use an unstructured gross error instead.
    pub unstructured_share: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            sigma: 0.2,
            variation: 0.2,
            attack_model: "stealthy".into(),
            attack: AttackParams::default(),
            unstructured_share: 0.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        check_variation(self.variation)?;
        if !(self.sigma > 0.0) {
            return Err(Error::invalid(format!("noise sigma must be > 0, got {}", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.unstructured_share) {
            return Err(Error::invalid("unstructured share must lie in [0, 1]"));
        }
        if !(self.attack.magnitude > 0.0) || self.attack.max_sparsity == 0 {
            return Err(Error::invalid("attack magnitude and sparsity must be positive"));
        }
        crate::attack::ATTACKS.lookup(&self.attack_model)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub train: Dataset,
    pub val: Vec<Dataset>,
}

impl Corpus {
    pub fn val_len(&self) -> usize {
        self.val.iter().map(Dataset::len).sum()
    }
}

/// `n` attacked flags, exactly `round(frac * n)` of them set, in shuffled order.
fn balanced_flags(n: usize, frac: f64, rng: &mut StreamRng) -> Vec<bool> {
    let n_attacked = (frac * n as f64).round() as usize;
    let mut flags: Vec<bool> = (0..n).map(|i| i < n_attacked).collect();
    flags.shuffle(rng);
    flags
}

/// Generates the training split and the equal validation subsets.
///
/// Sample `k` (train first, then validation subsets in order) is scenario
/// `k`; its randomness comes from stream `k` of the `corpus` and `attack`
/// families, so the output does not depend on thread count.
pub fn build_corpus(seed: u64, spec: &SplitSpec, cfg: &GenConfig, grid: &Grid) -> Result<Corpus> {
    spec.validate()?;
    cfg.validate()?;
    let streams = SeedStreams::new(seed);
    let mut layout = streams.stream("corpus-layout");
    let mut flags = balanced_flags(spec.n_train, spec.attack_fraction, &mut layout);
    let subset_len = spec.n_val / spec.val_subsets;
    for _ in 0..spec.val_subsets {
        flags.extend(balanced_flags(subset_len, spec.attack_fraction, &mut layout));
    }

    let flow = DcPowerFlow::new(&grid.system)?;
    let primary = attack_model(&cfg.attack_model, &cfg.attack)?;
    let gross = attack_model(
        "unstructured",
        &AttackParams {
            noise_sigma: cfg.sigma,
            ..cfg.attack.clone()
        },
    )?;
    let samples: Vec<Sample> = flags
        .par_iter()
        .enumerate()
        .map(|(k, &attacked)| {
            let mut rng = streams.indexed("corpus", k as u64);
            let injections = sample_injections(&mut rng, &grid.system, &grid.loads, cfg.variation);
            let state = flow.solve(&injections)?;
            let attack = if attacked {
                let mut arng = streams.indexed("attack", k as u64);
                let use_gross = cfg.unstructured_share > 0.0 && rand::Rng::random_bool(&mut arng, cfg.unstructured_share);
                let model = if use_gross { &gross } else { &primary };
                Some(model.generate(&mut arng, &grid.h)?)
            } else {
                None
            };
            gen_sample(&mut rng, &grid.h, &state, cfg.sigma, attack.as_ref(), k as u64)
        })
        .collect::<Result<_>>()?;

    let provenance = Provenance {
        seed: Some(seed),
        sigma: Some(cfg.sigma),
        grid_hash: Some(grid.system.fingerprint()),
    };
    let mut samples = samples.into_iter();
    let mut take = |n: usize| {
        let mut ds = Dataset::new(samples.by_ref().take(n).collect());
        ds.provenance = provenance.clone();
        ds
    };
    let train = take(spec.n_train);
    let val = (0..spec.val_subsets).map(|_| take(subset_len)).collect();
    Ok(Corpus { train, val })
}

/// Fraction of attacked and of normal samples flagged by the residual test
/// (computed on raw features).
pub fn bdd_flag_rates(ds: &Dataset, detector: &BadDataDetector) -> Result<(f64, f64)> {
    if ds.standardized {
        return Err(Error::invalid("residual test needs raw (unstandardized) features"));
    }
    let mut counts = [(0usize, 0usize); 2];
    for s in &ds.samples {
        let slot = &mut counts[usize::from(s.attacked)];
        slot.1 += 1;
        if detector.flags(&s.features)? {
            slot.0 += 1;
        }
    }
    let rate = |(f, n): (usize, usize)| if n == 0 { 0.0 } else { f as f64 / n as f64 };
    Ok((rate(counts[1]), rate(counts[0])))
}

pub fn meta_path(csv: &Path) -> PathBuf {
    let mut name = csv.as_os_str().to_owned();
    name.push(".meta");
    PathBuf::from(name)
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn csv_header(n: usize) -> String {
    let f = (1..=n).map(|i| format!("f{i}"));
    let l = (1..=n).map(|i| format!("l{i}"));
    f.chain(l).chain(std::iter::once("attacked".to_string())).collect::<Vec<_>>().join(",")
}

pub fn save(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let n = ds.n_features();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", csv_header(n)).map_err(io)?;
    for s in &ds.samples {
        let mut line = String::with_capacity(24 * n);
        for x in &s.features {
            line.push_str(&x.to_string());
            line.push(',');
        }
        for b in &s.labels.0 {
            line.push(if *b != 0 { '1' } else { '0' });
            line.push(',');
        }
        line.push(if s.attacked { '1' } else { '0' });
        writeln!(out, "{line}").map_err(io)?;
    }
    out.flush().map_err(io)?;

    let mut meta = format!(
        "format={FORMAT_TAG}\nsamples={}\nfeatures={n}\nfirst_scenario={}\n",
        ds.len(),
        ds.samples.first().map_or(0, |s| s.scenario)
    );
    if let Some(seed) = ds.provenance.seed {
        meta.push_str(&format!("seed={seed}\n"));
    }
    if let Some(sigma) = ds.provenance.sigma {
        meta.push_str(&format!("sigma={sigma}\n"));
    }
    if let Some(h) = &ds.provenance.grid_hash {
        meta.push_str(&format!("grid={h}\n"));
    }
    meta.push_str(&format!("standardized={}\n", ds.standardized));
    if let Some(sc) = &ds.scaler {
        meta.push_str(&format!("scaler_mean={}\nscaler_std={}\n", join_floats(&sc.mean), join_floats(&sc.std)));
    }
    let mp = meta_path(path);
    fs::write(&mp, meta).map_err(|e| Error::io(&mp, e))
}

fn schema(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Schema(format!("{}: {msg}", path.display()))
}

fn parse_floats(path: &Path, key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|x| x.parse().map_err(|_| schema(path, format!("bad float '{x}' in {key}"))))
        .collect()
}

pub fn load(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mp = meta_path(path);
    let meta_text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
    let mut kv = std::collections::BTreeMap::new();
    for line in meta_text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| schema(&mp, format!("expected key=value, got '{line}'")))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    if kv.get("format").map(String::as_str) != Some(FORMAT_TAG) {
        return Err(schema(&mp, format!("missing or unknown format tag (want {FORMAT_TAG})")));
    }
    let num = |k: &str| -> Result<usize> {
        kv.get(k)
            .ok_or_else(|| schema(&mp, format!("missing key '{k}'")))?
            .parse()
            .map_err(|_| schema(&mp, format!("bad value for '{k}'")))
    };
    let n_features = num("features")?;
    let n_samples = num("samples")?;
    let first_scenario = num("first_scenario")? as u64;
    let provenance = Provenance {
        seed: kv.get("seed").map(|s| s.parse()).transpose().map_err(|_| schema(&mp, "bad seed"))?,
        sigma: kv.get("sigma").map(|s| s.parse()).transpose().map_err(|_| schema(&mp, "bad sigma"))?,
        grid_hash: kv.get("grid").cloned(),
    };
    let standardized = match kv.get("standardized").map(String::as_str) {
        Some("true") => true,
        Some("false") | None => false,
        Some(other) => return Err(schema(&mp, format!("bad standardized flag '{other}'"))),
    };
    let scaler = match (kv.get("scaler_mean"), kv.get("scaler_std")) {
        (Some(m), Some(s)) => {
            let sc = Scaler {
                mean: parse_floats(&mp, "scaler_mean", m)?,
                std: parse_floats(&mp, "scaler_std", s)?,
            };
            if sc.mean.len() != n_features || sc.std.len() != n_features {
                return Err(schema(&mp, "scaler length does not match feature count"));
            }
            Some(sc)
        }
        (None, None) => None,
        _ => return Err(schema(&mp, "scaler_mean and scaler_std must appear together")),
    };

    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| schema(path, "empty file"))?;
    if header != csv_header(n_features) {
        return Err(schema(path, format!("header does not match {n_features}-feature schema")));
    }
    let mut samples = Vec::with_capacity(n_samples);
    for (row, line) in lines.enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 2 * n_features + 1 {
            return Err(schema(path, format!("row {}: expected {} columns, found {}", row + 1, 2 * n_features + 1, cols.len())));
        }
        let features = cols[..n_features]
            .iter()
            .map(|x| x.parse().map_err(|_| schema(path, format!("row {}: bad feature '{x}'", row + 1))))
            .collect::<Result<Vec<f64>>>()?;
        let bit = |x: &str| match x {
            "0" => Ok(0u8),
            "1" => Ok(1u8),
            _ => Err(schema(path, format!("row {}: bad label '{x}'", row + 1))),
        };
        let labels = cols[n_features..2 * n_features].iter().map(|x| bit(x)).collect::<Result<Vec<u8>>>()?;
        let attacked = bit(cols[2 * n_features])? == 1;
        let labels = LabelVector(labels);
        if attacked != labels.any() {
            return Err(schema(path, format!("row {}: attacked flag disagrees with labels", row + 1)));
        }
        samples.push(Sample {
            features,
            labels,
            scenario: first_scenario + row as u64,
            attacked,
        });
    }
    if samples.len() != n_samples {
        return Err(schema(path, format!("metadata lists {n_samples} samples, file has {}", samples.len())));
    }
    Ok(Dataset {
        samples,
        scaler,
        standardized,
        provenance,
    })
}

pub fn val_file_name(index: usize) -> String {
    format!("val_{:02}.csv", index + 1)
}

/// Writes `train.csv` and `val_NN.csv` (plus sidecars) under `dir`.
pub fn save_corpus(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save(&corpus.train, dir.join("train.csv"))?;
    for (i, v) in corpus.val.iter().enumerate() {
        save(v, dir.join(val_file_name(i)))?;
    }
    Ok(())
}

pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Corpus> {
    let dir = dir.as_ref();
    let train = load(dir.join("train.csv"))?;
    let val = load_val_sets(dir)?;
    Ok(Corpus { train, val })
}

/// Loads `val_01.csv`, `val_02.csv`, ... until the first missing index.
pub fn load_val_sets(dir: impl AsRef<Path>) -> Result<Vec<Dataset>> {
    let dir = dir.as_ref();
    let mut val = Vec::new();
    while dir.join(val_file_name(val.len())).exists() {
        val.push(load(dir.join(val_file_name(val.len())))?);
    }
    if val.is_empty() {
        return Err(Error::Schema(format!("{}: no validation subsets (val_01.csv, ...)", dir.display())));
    }
    Ok(val)
}
