//! False-data injection attacks and per-meter ground-truth labels.
//!
//! A stealthy attack `a = Hc` moves the estimated state by exactly `c` and
//! leaves the WLS residual untouched. An unstructured attack corrupts one
//! meter by a gross error and is what the residual test is designed to catch.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::HMatrix;
use crate::registry::{Entry, Registry};
use crate::rng::StreamRng;

/// Label threshold separating exact zeros from numerical dust, p.u.
pub const DEFAULT_LABEL_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct AttackVector(pub Vec<f64>);

impl AttackVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateError {
    pub c: Vec<f64>,
    pub support: Vec<usize>,
}

impl StateError {
    pub fn zeros(j: usize) -> Self {
        Self {
            c: vec![0.0; j],
            support: Vec::new(),
        }
    }

    pub fn unit(j: usize, k: usize) -> Self {
        let mut c = vec![0.0; j];
        c[k] = 1.0;
        Self { c, support: vec![k] }
    }
}

/// One bit per meter: 1 when that meter was tampered with.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector(pub Vec<u8>);

impl LabelVector {
    pub fn zeros(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn any(&self) -> bool {
        self.0.iter().any(|&b| b != 0)
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b != 0).count()
    }
}

/// `a = H c`
pub fn make_stealthy(h: &HMatrix, c: &StateError) -> Result<AttackVector> {
    Ok(AttackVector(h.apply(&c.c)?))
}

/// Sparse state error with `sparsity` nonzeros drawn uniformly from
/// `[-magnitude, -magnitude/2] ∪ [magnitude/2, magnitude]`.
pub fn sample_state_error<R: Rng + ?Sized>(rng: &mut R, j: usize, sparsity: usize, magnitude: f64) -> Result<StateError> {
    if sparsity == 0 || sparsity > j {
        return Err(Error::invalid(format!("sparsity must lie in 1..={j}, got {sparsity}")));
    }
    if !(magnitude > 0.0) {
        return Err(Error::invalid(format!("attack magnitude must be > 0, got {magnitude}")));
    }
    let mut support: Vec<usize> = sample(rng, j, sparsity).into_vec();
    support.sort_unstable();
    let mut c = vec![0.0; j];
    for &k in &support {
        let size = rng.random_range(0.5 * magnitude..=magnitude);
        c[k] = if rng.random_bool(0.5) { size } else { -size };
    }
    Ok(StateError { c, support })
}

/// Zero vector with one random meter offset by `±gross_sigma_mult * noise_sigma`.
pub fn make_unstructured<R: Rng + ?Sized>(rng: &mut R, i: usize, gross_sigma_mult: f64, noise_sigma: f64) -> Result<AttackVector> {
    if i == 0 {
        return Err(Error::invalid("attack vector needs at least one meter"));
    }
    let mut a = vec![0.0; i];
    let k = rng.random_range(0..i);
    let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    // keeps -0.0 out of the output for a zero multiplier
    a[k] = sign * gross_sigma_mult * noise_sigma + 0.0;
    Ok(AttackVector(a))
}

pub fn label_of(a: &AttackVector, eps_label: f64) -> LabelVector {
    LabelVector(a.0.iter().map(|v| u8::from(v.abs() > eps_label)).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackParams {
    /// Half-width scale of the state error entries, radians.
    pub magnitude: f64,
    /// Support size is uniform on `1..=max_sparsity` (capped at the state size).
    pub max_sparsity: usize,
    pub gross_sigma_mult: f64,
    pub noise_sigma: f64,
}

impl Default for AttackParams {
    fn default() -> Self {
        Self {
            magnitude: 0.2,
            max_sparsity: 3,
            gross_sigma_mult: 50.0,
            noise_sigma: 0.2,
        }
    }
}

pub trait AttackModel: Send + Sync {
    fn name(&self) -> &'static str;

    fn generate(&self, rng: &mut StreamRng, h: &HMatrix) -> Result<AttackVector>;
}

pub struct StealthyAttack {
    pub magnitude: f64,
    pub max_sparsity: usize,
}

impl AttackModel for StealthyAttack {
    fn name(&self) -> &'static str {
        "stealthy"
    }

    fn generate(&self, rng: &mut StreamRng, h: &HMatrix) -> Result<AttackVector> {
        let max = self.max_sparsity.clamp(1, h.cols());
        let sparsity = rng.random_range(1..=max);
        let c = sample_state_error(rng, h.cols(), sparsity, self.magnitude)?;
        make_stealthy(h, &c)
    }
}

pub struct UnstructuredAttack {
    pub gross_sigma_mult: f64,
    pub noise_sigma: f64,
}

impl AttackModel for UnstructuredAttack {
    fn name(&self) -> &'static str {
        "unstructured"
    }

    fn generate(&self, rng: &mut StreamRng, h: &HMatrix) -> Result<AttackVector> {
        make_unstructured(rng, h.rows(), self.gross_sigma_mult, self.noise_sigma)
    }
}

pub type AttackFactory = fn(&AttackParams) -> Box<dyn AttackModel>;

pub static ATTACKS: Registry<AttackFactory> = Registry::new(
    "attack model",
    &[
        Entry {
            name: "stealthy",
            summary: "a = Hc for a sparse random state error c; invisible to the residual test",
            build: |p| {
                Box::new(StealthyAttack {
                    magnitude: p.magnitude,
                    max_sparsity: p.max_sparsity,
                })
            },
        },
        Entry {
            name: "unstructured",
            summary: "single-meter gross error of gross_sigma_mult noise sigmas",
            build: |p| {
                Box::new(UnstructuredAttack {
                    gross_sigma_mult: p.gross_sigma_mult,
                    noise_sigma: p.noise_sigma,
                })
            },
        },
    ],
);

pub fn attack_model(name: &str, params: &AttackParams) -> Result<Box<dyn AttackModel>> {
    Ok((ATTACKS.lookup(name)?)(params))
}
