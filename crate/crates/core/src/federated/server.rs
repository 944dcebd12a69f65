//! Server-side model updates.

use crate::error::{Error, Result};
use crate::neural::ModelParams;
use crate::registry::{Entry, Registry};

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Data-size weights `|D_m| / D` as reduced integer fractions sharing one
/// denominator; the numerators sum to the denominator exactly.
pub fn aggregation_weights(sizes: &[usize]) -> Result<(Vec<u64>, u64)> {
    if sizes.is_empty() {
        return Err(Error::invalid("no client sizes"));
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("client sizes must be positive"));
    }
    let g = sizes.iter().fold(0u64, |g, &s| gcd(g, s as u64));
    let nums: Vec<u64> = sizes.iter().map(|&s| s as u64 / g).collect();
    let den = nums.iter().sum();
    Ok((nums, den))
}

/// `Σ |D_m| / D · w_m`, element-wise.
///
/// Entries on which all models agree are copied unchanged, so averaging
/// identical models is exact. With equal sizes the result is the plain mean.
pub fn aggregate(models: &[ModelParams], sizes: &[usize]) -> Result<ModelParams> {
    let first = models.first().ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if models.len() != sizes.len() {
        return Err(Error::invalid(format!("{} models but {} sizes", models.len(), sizes.len())));
    }
    if models.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::invalid("model shapes differ"));
    }
    let (nums, den) = aggregation_weights(sizes)?;
    let den = den as f64;
    let sources: Vec<Vec<&[f64]>> = models.iter().map(ModelParams::slices).collect();
    let mut out = first.clone();
    for (t, dst) in out.slices_mut().into_iter().enumerate() {
        for (i, d) in dst.iter_mut().enumerate() {
            let v0 = sources[0][t][i];
            if sources.iter().all(|s| s[t][i] == v0) {
                *d = v0;
                continue;
            }
            let mut acc = 0.0;
            for (s, &n) in sources.iter().zip(&nums) {
                acc += n as f64 * s[t][i];
            }
            *d = acc / den;
        }
    }
    Ok(out)
}

/// `(w_global - w_local) / η`
pub fn cumulative_gradient(global: &ModelParams, local: &ModelParams, lr: f64) -> Result<ModelParams> {
    if !(lr > 0.0) {
        return Err(Error::invalid(format!("cumulative gradient needs a positive learning rate, got {lr}")));
    }
    global.zip_with(local, |w, wm| (w - wm) / lr)
}

pub trait ServerUpdate: Send + Sync {
    fn name(&self) -> &'static str;

    fn apply(&self, global: &ModelParams, locals: &[ModelParams], sizes: &[usize], lr: f64) -> Result<ModelParams>;
}

/// Replace the global model by the data-size weighted average of the locals.
pub struct FedAvg;

impl ServerUpdate for FedAvg {
    fn name(&self) -> &'static str {
        "fedavg"
    }

    fn apply(&self, _global: &ModelParams, locals: &[ModelParams], sizes: &[usize], _lr: f64) -> Result<ModelParams> {
        aggregate(locals, sizes)
    }
}

/// Step the global model along the weighted sum of the clients' cumulative
/// gradients: `w + η Δw` with `Δw = -Σ |D_m|/D ∇F_m`.
pub struct DeltaUpdate;

impl ServerUpdate for DeltaUpdate {
    fn name(&self) -> &'static str {
        "delta"
    }

    fn apply(&self, global: &ModelParams, locals: &[ModelParams], sizes: &[usize], lr: f64) -> Result<ModelParams> {
        if locals.len() != sizes.len() || locals.is_empty() {
            return Err(Error::invalid("need one size per local model"));
        }
        let grads = locals.iter().map(|l| cumulative_gradient(global, l, lr)).collect::<Result<Vec<_>>>()?;
        let (nums, den) = aggregation_weights(sizes)?;
        let mut step = global.zeros_like();
        for (g, &n) in grads.iter().zip(&nums) {
            let p = n as f64 / den as f64;
            step = step.zip_with(g, |acc, gi| acc - p * gi)?;
        }
        global.zip_with(&step, |w, d| w + lr * d)
    }
}

pub type ServerFactory = fn() -> Box<dyn ServerUpdate>;

pub static SERVER_UPDATES: Registry<ServerFactory> = Registry::new(
    "server update",
    &[
        Entry {
            name: "fedavg",
            summary: "global = Σ |D_m|/D · w_m",
            build: || Box::new(FedAvg),
        },
        Entry {
            name: "delta",
            summary: "global += η · (-Σ |D_m|/D · cumulative gradient)",
            build: || Box::new(DeltaUpdate),
        },
    ],
);

pub fn server_update(name: &str) -> Result<Box<dyn ServerUpdate>> {
    Ok((SERVER_UPDATES.lookup(name)?)())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::Architecture;
    use crate::rng::SeedStreams;

    fn model(seed: u64) -> ModelParams {
        ModelParams::init(&Architecture::new(3, vec![4], 2), &mut SeedStreams::new(seed).stream("init"))
    }

    #[test]
    fn weights_are_exact_fractions() {
        let (n, d) = aggregation_weights(&[4000, 4000, 4000, 4000, 4000]).unwrap();
        assert_eq!((n, d), (vec![1; 5], 5));
        let (n, d) = aggregation_weights(&[21, 21, 20]).unwrap();
        assert_eq!(n.iter().sum::<u64>(), d);
        assert!(aggregation_weights(&[3, 0]).is_err());
    }

    #[test]
    fn one_model_is_itself() {
        let p = model(1);
        assert_eq!(aggregate(std::slice::from_ref(&p), &[17]).unwrap(), p);
    }

    #[test]
    fn identical_models_exact() {
        let p = model(1).map(|x| x * 0.1);
        assert_eq!(aggregate(&[p.clone(), p.clone(), p.clone()], &[3, 5, 11]).unwrap(), p);
    }

    #[test]
    fn two_equal_sizes_average() {
        let (p, q) = (model(1), model(2));
        let a = aggregate(&[p.clone(), q.clone()], &[10, 10]).unwrap();
        let mean = p.zip_with(&q, |x, y| (x + y) / 2.0).unwrap();
        assert_eq!(a, mean);
    }

    #[test]
    fn unequal_sizes_weighting() {
        let (p, q) = (model(1), model(2));
        let a = aggregate(&[p.clone(), q.clone()], &[1, 3]).unwrap();
        let expect = p.zip_with(&q, |x, y| 0.25 * x + 0.75 * y).unwrap();
        assert!(a.max_abs_diff(&expect) < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let other = ModelParams::zeroed(&Architecture::new(3, vec![5], 2));
        assert!(aggregate(&[model(1), other], &[1, 1]).is_err());
        assert!(aggregate(&[], &[]).is_err());
    }

    #[test]
    fn cumulative_gradient_arithmetic() {
        let w = model(1).map(|_| 1.0);
        let wm = w.map(|_| 0.9);
        let g = cumulative_gradient(&w, &wm, 0.1).unwrap();
        assert!(g.slices().iter().flat_map(|s| s.iter()).all(|&v| (v - 1.0).abs() < 1e-14));
        assert!(cumulative_gradient(&w, &w, 0.1).unwrap().slices().iter().flat_map(|s| s.iter()).all(|&v| v == 0.0));
        assert!(cumulative_gradient(&w, &wm, 0.0).is_err());
    }

    #[test]
    fn reconstruct_local_from_gradient() {
        let (w, wm) = (model(1), model(2));
        let g = cumulative_gradient(&w, &wm, 1e-3).unwrap();
        let back = w.zip_with(&g, |a, b| a - 1e-3 * b).unwrap();
        assert!(back.max_abs_diff(&wm) < 1e-12);
    }

    #[test]
    fn delta_form_matches_fedavg() {
        let w = model(0);
        let locals = vec![model(1), model(2), model(3)];
        let sizes = [100, 250, 50];
        let a = FedAvg.apply(&w, &locals, &sizes, 1e-3).unwrap();
        let b = DeltaUpdate.apply(&w, &locals, &sizes, 1e-3).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        assert!(server_update("fedprox").is_err());
    }
}
