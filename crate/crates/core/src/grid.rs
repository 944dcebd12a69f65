//! Bus/branch topology, meter placement and the DC measurement matrix.
//!
//! Grid files are plain text:
//!
//! ```text
//! buses 14 slack 1
//! branch 1 2 0.05917
//! ...
//! ```
//!
//! Measurement files list one meter per line, either `inj BUS` or
//! `flow BRANCH DIR` with `DIR` one of `fwd` (from -> to) or `rev`.
//! Load files list `load BUS P` and `gen BUS P` lines in per-unit.
//! Blank lines and `#` comments are ignored everywhere.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const IEEE14_GRID: &str = include_str!("../data/ieee14.grid");
const IEEE14_MEAS: &str = include_str!("../data/ieee14.meas");
const IEEE14_LOADS: &str = include_str!("../data/ieee14.loads");

#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub from_bus: usize,
    pub to_bus: usize,
    pub reactance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BusSystem {
    n_bus: usize,
    slack_bus: usize,
    branches: Vec<Branch>,
}

impl BusSystem {
    /// Validates topology: bus indices in range, no self loops, positive
    /// reactances and a connected bus graph.
    pub fn new(n_bus: usize, slack_bus: usize, branches: Vec<Branch>) -> Result<Self> {
        if n_bus < 2 {
            return Err(Error::invalid(format!("need at least 2 buses, got {n_bus}")));
        }
        if slack_bus == 0 || slack_bus > n_bus {
            return Err(Error::invalid(format!("slack bus {slack_bus} outside 1..={n_bus}")));
        }
        for (k, br) in branches.iter().enumerate() {
            check_branch(br, n_bus).map_err(|msg| Error::invalid(format!("branch {}: {msg}", k + 1)))?;
            if br.reactance <= 0.0 || !br.reactance.is_finite() {
                return Err(Error::invalid(format!(
                    "branch {}: non-positive reactance {}",
                    k + 1,
                    br.reactance
                )));
            }
        }
        let system = Self {
            n_bus,
            slack_bus,
            branches,
        };
        if let Some(bus) = system.first_unreachable_bus() {
            return Err(Error::Disconnected { bus });
        }
        Ok(system)
    }

    pub fn ieee14() -> Self {
        parse_bus_system(IEEE14_GRID).expect("bundled ieee14 grid is valid")
    }

    pub fn n_bus(&self) -> usize {
        self.n_bus
    }

    pub fn slack_bus(&self) -> usize {
        self.slack_bus
    }

    pub fn branches(&self) -> &[Branch] {
        &self.branches
    }

    /// Number of state variables (non-slack angles).
    pub fn n_state(&self) -> usize {
        self.n_bus - 1
    }

    /// Column of bus `bus` (1-based) in the state vector, `None` for the slack.
    pub fn state_index(&self, bus: usize) -> Option<usize> {
        match bus.cmp(&self.slack_bus) {
            std::cmp::Ordering::Less => Some(bus - 1),
            std::cmp::Ordering::Equal => None,
            std::cmp::Ordering::Greater => Some(bus - 2),
        }
    }

    /// Reduced nodal susceptance matrix (slack row and column removed).
    pub fn reduced_susceptance(&self) -> DMatrix<f64> {
        let j = self.n_state();
        let mut b = DMatrix::zeros(j, j);
        for br in &self.branches {
            let y = 1.0 / br.reactance;
            let f = self.state_index(br.from_bus);
            let t = self.state_index(br.to_bus);
            if let Some(f) = f {
                b[(f, f)] += y;
            }
            if let Some(t) = t {
                b[(t, t)] += y;
            }
            if let (Some(f), Some(t)) = (f, t) {
                b[(f, t)] -= y;
                b[(t, f)] -= y;
            }
        }
        b
    }

    /// Canonical text form; parsing it yields an equal system.
    pub fn to_config_string(&self) -> String {
        let mut out = format!("buses {} slack {}\n", self.n_bus, self.slack_bus);
        for br in &self.branches {
            out.push_str(&format!("branch {} {} {}\n", br.from_bus, br.to_bus, br.reactance));
        }
        out
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.to_config_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn first_unreachable_bus(&self) -> Option<usize> {
        let mut adj = vec![Vec::new(); self.n_bus + 1];
        for br in &self.branches {
            adj[br.from_bus].push(br.to_bus);
            adj[br.to_bus].push(br.from_bus);
        }
        let mut seen = vec![false; self.n_bus + 1];
        let mut stack = vec![1];
        seen[1] = true;
        while let Some(b) = stack.pop() {
            for &n in &adj[b] {
                if !seen[n] {
                    seen[n] = true;
                    stack.push(n);
                }
            }
        }
        (1..=self.n_bus).find(|&b| !seen[b])
    }
}

fn check_branch(br: &Branch, n_bus: usize) -> std::result::Result<(), String> {
    for bus in [br.from_bus, br.to_bus] {
        if bus == 0 || bus > n_bus {
            return Err(format!("bus {bus} outside 1..={n_bus}"));
        }
    }
    if br.from_bus == br.to_bus {
        return Err(format!("self loop at bus {}", br.from_bus));
    }
    Ok(())
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            None
        } else {
            Some((i + 1, line.split_whitespace().collect()))
        }
    })
}

fn parse_num<T: std::str::FromStr>(tok: &str, line: usize, what: &str) -> Result<T> {
    tok.parse().map_err(|_| Error::Parse {
        line,
        msg: format!("invalid {what} '{tok}'"),
    })
}

pub fn parse_bus_system(text: &str) -> Result<BusSystem> {
    let mut header: Option<(usize, usize)> = None;
    let mut branches = Vec::new();
    for (line, toks) in content_lines(text) {
        match toks.as_slice() {
            ["buses", n, "slack", s] => {
                if header.is_some() {
                    return Err(Error::Parse {
                        line,
                        msg: "duplicate header".into(),
                    });
                }
                header = Some((parse_num(n, line, "bus count")?, parse_num(s, line, "slack bus")?));
            }
            ["branch", f, t, x] => {
                let Some((n_bus, _)) = header else {
                    return Err(Error::Parse {
                        line,
                        msg: "branch before 'buses N slack S' header".into(),
                    });
                };
                let br = Branch {
                    from_bus: parse_num(f, line, "bus")?,
                    to_bus: parse_num(t, line, "bus")?,
                    reactance: parse_num(x, line, "reactance")?,
                };
                check_branch(&br, n_bus).map_err(|msg| Error::Parse { line, msg })?;
                if br.reactance <= 0.0 || !br.reactance.is_finite() {
                    return Err(Error::NonPositiveReactance {
                        line,
                        reactance: br.reactance,
                    });
                }
                branches.push(br);
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 'buses N slack S' or 'branch FROM TO X', got '{}'", toks.join(" ")),
                })
            }
        }
    }
    let (n_bus, slack) = header.ok_or(Error::Parse {
        line: 0,
        msg: "missing 'buses N slack S' header".into(),
    })?;
    BusSystem::new(n_bus, slack, branches)
}

pub fn load_bus_system(path: impl AsRef<Path>) -> Result<BusSystem> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_bus_system(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowDirection {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Measurement {
    /// Net real power injection at a bus (1-based).
    Injection(usize),
    /// Real power flow on a branch (1-based, file order).
    LineFlow(usize, FlowDirection),
}

impl fmt::Display for Measurement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Measurement::Injection(bus) => write!(f, "inj {bus}"),
            Measurement::LineFlow(br, FlowDirection::Forward) => write!(f, "flow {br} fwd"),
            Measurement::LineFlow(br, FlowDirection::Reverse) => write!(f, "flow {br} rev"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MeasurementConfig {
    pub entries: Vec<Measurement>,
}

impl MeasurementConfig {
    /// The bundled 19-meter IEEE 14-bus placement.
    pub fn ieee14_default() -> Self {
        parse_measurement_config(IEEE14_MEAS).expect("bundled measurement config is valid")
    }

    /// One injection meter per bus, followed by forward flows on the first
    /// `n_flows` branches.
    pub fn injections_plus_flows(system: &BusSystem, n_flows: usize) -> Self {
        let mut entries: Vec<_> = (1..=system.n_bus()).map(Measurement::Injection).collect();
        entries.extend((1..=n_flows.min(system.branches().len())).map(|b| Measurement::LineFlow(b, FlowDirection::Forward)));
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

pub fn parse_measurement_config(text: &str) -> Result<MeasurementConfig> {
    let mut entries = Vec::new();
    for (line, toks) in content_lines(text) {
        let m = match toks.as_slice() {
            ["inj", bus] => Measurement::Injection(parse_num(bus, line, "bus")?),
            ["flow", br, dir] => {
                let dir = match *dir {
                    "fwd" => FlowDirection::Forward,
                    "rev" => FlowDirection::Reverse,
                    other => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("flow direction must be 'fwd' or 'rev', got '{other}'"),
                        })
                    }
                };
                Measurement::LineFlow(parse_num(br, line, "branch")?, dir)
            }
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 'inj BUS' or 'flow BRANCH DIR', got '{}'", toks.join(" ")),
                })
            }
        };
        entries.push(m);
    }
    Ok(MeasurementConfig { entries })
}

pub fn load_measurement_config(path: impl AsRef<Path>) -> Result<MeasurementConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_measurement_config(&text)
}

/// Per-bus base demand and fixed generation, in per-unit.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadProfile {
    pub demand: Vec<f64>,
    pub generation: Vec<f64>,
}

impl LoadProfile {
    pub fn ieee14() -> Self {
        parse_load_profile(IEEE14_LOADS, 14).expect("bundled load profile is valid")
    }

    pub fn zeros(n_bus: usize) -> Self {
        Self {
            demand: vec![0.0; n_bus],
            generation: vec![0.0; n_bus],
        }
    }
}

pub fn parse_load_profile(text: &str, n_bus: usize) -> Result<LoadProfile> {
    let mut profile = LoadProfile::zeros(n_bus);
    for (line, toks) in content_lines(text) {
        let (target, bus, p) = match toks.as_slice() {
            ["load", bus, p] => (&mut profile.demand, bus, p),
            ["gen", bus, p] => (&mut profile.generation, bus, p),
            _ => {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 'load BUS P' or 'gen BUS P', got '{}'", toks.join(" ")),
                })
            }
        };
        let bus: usize = parse_num(bus, line, "bus")?;
        if bus == 0 || bus > n_bus {
            return Err(Error::Parse {
                line,
                msg: format!("bus {bus} outside 1..={n_bus}"),
            });
        }
        target[bus - 1] += parse_num::<f64>(p, line, "power")?;
    }
    Ok(profile)
}

pub fn load_load_profile(path: impl AsRef<Path>, n_bus: usize) -> Result<LoadProfile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_load_profile(&text, n_bus)
}

/// A bus system with its meter placement, base loads and measurement matrix.
#[derive(Debug, Clone)]
pub struct Grid {
    pub system: BusSystem,
    pub meters: MeasurementConfig,
    pub loads: LoadProfile,
    pub h: HMatrix,
}

impl Grid {
    pub fn new(system: BusSystem, meters: MeasurementConfig, loads: LoadProfile) -> Result<Self> {
        if loads.demand.len() != system.n_bus() || loads.generation.len() != system.n_bus() {
            return Err(Error::Dimension {
                what: "load profile",
                expected: system.n_bus(),
                found: loads.demand.len(),
            });
        }
        let h = build_h(&system, &meters)?;
        Ok(Self { system, meters, loads, h })
    }

    pub fn ieee14() -> Self {
        Self::new(BusSystem::ieee14(), MeasurementConfig::ieee14_default(), LoadProfile::ieee14())
            .expect("bundled ieee14 setup is observable")
    }

    pub fn n_meters(&self) -> usize {
        self.h.rows()
    }

    pub fn n_state(&self) -> usize {
        self.h.cols()
    }
}

/// Linear measurement matrix of the DC model, rows in meter order and
/// columns over the non-slack bus angles.
#[derive(Debug, Clone, PartialEq)]
pub struct HMatrix {
    values: DMatrix<f64>,
}

impl HMatrix {
    pub fn from_matrix(values: DMatrix<f64>) -> Self {
        Self { values }
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[(row, col)]
    }

    pub fn row(&self, row: usize) -> Vec<f64> {
        self.values.row(row).iter().copied().collect()
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.values.column(col).iter().copied().collect()
    }

    /// `H x` for a state-sized vector.
    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols() {
            return Err(Error::Dimension {
                what: "state vector",
                expected: self.cols(),
                found: x.len(),
            });
        }
        let v = &self.values * DVector::from_column_slice(x);
        Ok(v.as_slice().to_vec())
    }

    pub fn rank(&self) -> usize {
        let scale = self.values.amax().max(1.0);
        let tol = scale * 1e-10 * self.rows().max(self.cols()) as f64;
        self.values.rank(tol)
    }
}

/// Builds the DC sensitivity matrix for the given meters.
pub fn build_h(system: &BusSystem, config: &MeasurementConfig) -> Result<HMatrix> {
    let j = system.n_state();
    let mut h = DMatrix::zeros(config.len(), j);
    for (row, m) in config.entries.iter().enumerate() {
        match *m {
            Measurement::LineFlow(idx, dir) => {
                let br = idx
                    .checked_sub(1)
                    .and_then(|k| system.branches().get(k))
                    .ok_or_else(|| Error::invalid(format!("meter {}: branch {idx} does not exist", row + 1)))?;
                let (from, to) = match dir {
                    FlowDirection::Forward => (br.from_bus, br.to_bus),
                    FlowDirection::Reverse => (br.to_bus, br.from_bus),
                };
                add_flow(&mut h, row, system, from, to, 1.0 / br.reactance);
            }
            Measurement::Injection(bus) => {
                if bus == 0 || bus > system.n_bus() {
                    return Err(Error::invalid(format!("meter {}: bus {bus} does not exist", row + 1)));
                }
                for br in system.branches() {
                    let y = 1.0 / br.reactance;
                    if br.from_bus == bus {
                        add_flow(&mut h, row, system, bus, br.to_bus, y);
                    } else if br.to_bus == bus {
                        add_flow(&mut h, row, system, bus, br.from_bus, y);
                    }
                }
            }
        }
    }
    let h = HMatrix::from_matrix(h);
    let rank = h.rank();
    if rank < j {
        return Err(Error::Unobservable { rank, expected: j });
    }
    Ok(h)
}

// flow out of `from` towards `to`: (theta_from - theta_to) * y
fn add_flow(h: &mut DMatrix<f64>, row: usize, system: &BusSystem, from: usize, to: usize, y: f64) {
    if let Some(c) = system.state_index(from) {
        h[(row, c)] += y;
    }
    if let Some(c) = system.state_index(to) {
        h[(row, c)] -= y;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triangle() -> BusSystem {
        parse_bus_system("buses 3 slack 1\nbranch 1 2 1\nbranch 2 3 1\nbranch 1 3 1\n").unwrap()
    }

    #[test]
    fn bundled_ieee14() {
        let sys = BusSystem::ieee14();
        assert_eq!(sys.n_bus(), 14);
        assert_eq!(sys.branches().len(), 20);
        assert_eq!(sys.slack_bus(), 1);
        assert_eq!(MeasurementConfig::ieee14_default().len(), 19);
        let loads = LoadProfile::ieee14();
        assert!((loads.demand.iter().sum::<f64>() - 2.59).abs() < 1e-12);
    }

    #[test]
    fn two_bus_system() {
        let sys = parse_bus_system("buses 2 slack 1\nbranch 1 2 1\n").unwrap();
        assert_eq!(sys.n_state(), 1);
    }

    #[test]
    fn zero_reactance_reports_line() {
        let err = parse_bus_system("buses 2 slack 1\n\nbranch 1 2 0\n").unwrap_err();
        assert!(matches!(err, Error::NonPositiveReactance { line: 3, .. }));
        assert!(err.to_string().contains("non-positive reactance"));
    }

    #[test]
    fn disconnected_graph_rejected() {
        let err = parse_bus_system("buses 4 slack 1\nbranch 1 2 1\nbranch 3 4 1\n").unwrap_err();
        assert!(matches!(err, Error::Disconnected { bus: 3 }));
    }

    #[test]
    fn malformed_lines_report_position() {
        let err = parse_bus_system("buses 3 slack 1\nbranch 1 2\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_bus_system("branch 1 2 0.1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_bus_system("buses 3 slack 1\nbranch 1 1 0.1\n").unwrap_err();
        assert!(err.to_string().contains("self loop"));
        assert!(parse_bus_system("buses 3 slack 4\nbranch 1 2 1\nbranch 2 3 1\n").is_err());
    }

    #[test]
    fn config_string_round_trips() {
        let sys = BusSystem::ieee14();
        assert_eq!(parse_bus_system(&sys.to_config_string()).unwrap(), sys);
        assert_eq!(sys.fingerprint().len(), 64);
    }

    #[test]
    fn triangle_flow_row() {
        let sys = triangle();
        let cfg = MeasurementConfig {
            entries: vec![
                Measurement::LineFlow(1, FlowDirection::Forward),
                Measurement::Injection(2),
                Measurement::Injection(3),
            ],
        };
        let h = build_h(&sys, &cfg).unwrap();
        assert_eq!(h.row(0), vec![-1.0, 0.0]);
        assert_eq!(h.row(1), vec![2.0, -1.0]);
        assert_eq!(h.row(2), vec![-1.0, 2.0]);
    }

    #[test]
    fn reverse_flow_negates_row() {
        let sys = triangle();
        let fwd = MeasurementConfig {
            entries: vec![Measurement::LineFlow(2, FlowDirection::Forward), Measurement::Injection(2), Measurement::Injection(3)],
        };
        let rev = MeasurementConfig {
            entries: vec![Measurement::LineFlow(2, FlowDirection::Reverse), Measurement::Injection(2), Measurement::Injection(3)],
        };
        let a = build_h(&sys, &fwd).unwrap();
        let b = build_h(&sys, &rev).unwrap();
        assert_eq!(a.row(0), vec![1.0, -1.0]);
        assert_eq!(b.row(0), vec![-1.0, 1.0]);
    }

    #[test]
    fn unobservable_names_rank() {
        let sys = triangle();
        let cfg = MeasurementConfig {
            entries: vec![Measurement::LineFlow(1, FlowDirection::Forward)],
        };
        let err = build_h(&sys, &cfg).unwrap_err();
        assert!(matches!(err, Error::Unobservable { rank: 1, expected: 2 }));
        assert!(err.to_string().contains("unobservable configuration"));
    }

    #[test]
    fn bad_references_rejected() {
        let sys = triangle();
        let cfg = MeasurementConfig {
            entries: vec![Measurement::LineFlow(9, FlowDirection::Forward)],
        };
        assert!(build_h(&sys, &cfg).is_err());
        let cfg = MeasurementConfig {
            entries: vec![Measurement::Injection(0)],
        };
        assert!(build_h(&sys, &cfg).is_err());
    }

    #[test]
    fn measurement_config_parse_and_display() {
        let cfg = parse_measurement_config("inj 3\n# c\nflow 2 rev\n").unwrap();
        assert_eq!(cfg.entries, vec![Measurement::Injection(3), Measurement::LineFlow(2, FlowDirection::Reverse)]);
        let text: Vec<String> = cfg.entries.iter().map(ToString::to_string).collect();
        assert_eq!(text, vec!["inj 3", "flow 2 rev"]);
        assert!(parse_measurement_config("flow 2 up\n").is_err());
        assert_eq!(MeasurementConfig::injections_plus_flows(&BusSystem::ieee14(), 5), MeasurementConfig::ieee14_default());
    }

    #[test]
    fn susceptance_is_laplacian_minor() {
        let b = triangle().reduced_susceptance();
        assert_eq!(b, DMatrix::from_row_slice(2, 2, &[2.0, -1.0, -1.0, 2.0]));
    }
}
