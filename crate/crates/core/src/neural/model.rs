use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

/// Smallest and largest probability fed to the log terms of the loss.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub output: usize,
}

impl Architecture {
    pub fn new(input: usize, hidden: Vec<usize>, output: usize) -> Self {
        Self { input, hidden, output }
    }

    /// `input -> 128 -> 64 -> input` multilabel detector.
    pub fn detector(meters: usize) -> Self {
        Self::new(meters, vec![128, 64], meters)
    }

    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input];
        w.extend(&self.hidden);
        w.push(self.output);
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `fan_in x fan_out`
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
}

/// Every tensor of the detector. Gradients and parameter deltas reuse this
/// type; their running-statistic slots are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dense: Vec<Dense>,
    pub norms: Vec<BatchNorm>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorKind {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorKind::RunningMean | TensorKind::RunningVar)
    }
}

impl ModelParams {
    /// He-uniform weights (limit `sqrt(6 / fan_in)`), zero biases, unit gains.
    pub fn init(arch: &Architecture, rng: &mut StreamRng) -> Self {
        let widths = arch.widths();
        let dense = widths
            .windows(2)
            .map(|w| {
                let limit = (6.0 / w[0] as f64).sqrt();
                Dense {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || rng.random_range(-limit..limit)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Self {
            dense,
            norms: arch.hidden.iter().map(|&h| BatchNorm::identity(h)).collect(),
        }
    }

    /// All-zero weights and biases with identity batch norms.
    pub fn zeroed(arch: &Architecture) -> Self {
        let widths = arch.widths();
        Self {
            dense: widths
                .windows(2)
                .map(|w| Dense {
                    weights: Array2::zeros((w[0], w[1])),
                    bias: Array1::zeros(w[1]),
                })
                .collect(),
            norms: arch.hidden.iter().map(|&h| BatchNorm::identity(h)).collect(),
        }
    }

    /// Same shapes, every entry zero.
    pub fn zeros_like(&self) -> Self {
        self.map(|_| 0.0)
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input: self.dense[0].weights.nrows(),
            hidden: self.norms.iter().map(|n| n.gamma.len()).collect(),
            output: self.dense.last().map_or(0, |d| d.weights.ncols()),
        }
    }

    pub fn len(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Tensor names, kinds and shapes in canonical order.
    pub fn layout(&self) -> Vec<(String, TensorKind, Vec<usize>)> {
        let mut out = Vec::new();
        for (l, d) in self.dense.iter().enumerate() {
            out.push((format!("dense{l}.weight"), TensorKind::Weight, d.weights.shape().to_vec()));
            out.push((format!("dense{l}.bias"), TensorKind::Bias, vec![d.bias.len()]));
            if let Some(n) = self.norms.get(l) {
                let h = vec![n.gamma.len()];
                out.push((format!("norm{l}.gamma"), TensorKind::Gamma, h.clone()));
                out.push((format!("norm{l}.beta"), TensorKind::Beta, h.clone()));
                out.push((format!("norm{l}.running_mean"), TensorKind::RunningMean, h.clone()));
                out.push((format!("norm{l}.running_var"), TensorKind::RunningVar, h));
            }
        }
        out
    }

    /// Flat views of every tensor, in [`ModelParams::layout`] order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for (l, d) in self.dense.iter().enumerate() {
            out.push(d.weights.as_slice().expect("standard layout"));
            out.push(d.bias.as_slice().expect("standard layout"));
            if let Some(n) = self.norms.get(l) {
                for t in [&n.gamma, &n.beta, &n.running_mean, &n.running_var] {
                    out.push(t.as_slice().expect("standard layout"));
                }
            }
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        let mut norms = self.norms.iter_mut();
        for d in self.dense.iter_mut() {
            out.push(d.weights.as_slice_mut().expect("standard layout"));
            out.push(d.bias.as_slice_mut().expect("standard layout"));
            if let Some(n) = norms.next() {
                for t in [&mut n.gamma, &mut n.beta, &mut n.running_mean, &mut n.running_var] {
                    out.push(t.as_slice_mut().expect("standard layout"));
                }
            }
        }
        out
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        self.layout().iter().map(|l| &l.2).eq(other.layout().iter().map(|l| &l.2))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        for s in out.slices_mut() {
            s.iter_mut().for_each(|x| *x = f(*x));
        }
        out
    }

    /// Element-wise combination of two equally shaped parameter sets.
    pub fn zip_with(&self, other: &ModelParams, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if !self.same_shape(other) {
            return Err(Error::invalid("parameter shapes differ"));
        }
        let mut out = self.clone();
        for (dst, src) in out.slices_mut().into_iter().zip(other.slices()) {
            dst.iter_mut().zip(src).for_each(|(a, &b)| *a = f(*a, b));
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs_diff(&self, other: &ModelParams) -> f64 {
        self.slices()
            .iter()
            .zip(other.slices())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }

    /// `Σ ‖W‖²` over dense weight matrices only.
    pub fn weight_sq_norm(&self) -> f64 {
        self.dense.iter().map(|d| d.weights.iter().map(|w| w * w).sum::<f64>()).sum()
    }

    /// Exponential moving update of the batch-norm running statistics.
    pub fn update_running_stats(&mut self, cache: &ForwardCache, momentum: f64) {
        for (n, layer) in self.norms.iter_mut().zip(&cache.hidden) {
            if let Some((mean, var)) = &layer.batch_stats {
                Zip::from(&mut n.running_mean).and(mean).for_each(|r, &m| *r = momentum * *r + (1.0 - momentum) * m);
                Zip::from(&mut n.running_var).and(var).for_each(|r, &v| *r = momentum * *r + (1.0 - momentum) * v);
            }
        }
    }
}

impl BatchNorm {
    fn identity(h: usize) -> Self {
        Self {
            gamma: Array1::ones(h),
            beta: Array1::zeros(h),
            running_mean: Array1::zeros(h),
            running_var: Array1::ones(h),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardConfig {
    pub dropout_p: f64,
    pub bn_eps: f64,
}

impl Default for ForwardConfig {
    fn default() -> Self {
        Self {
            dropout_p: 0.4,
            bn_eps: 1e-5,
        }
    }
}

pub enum Mode<'a> {
    /// Batch statistics and sampled inverted-dropout masks.
    Train(&'a mut StreamRng),
    /// Running statistics, no dropout.
    Eval,
}

#[derive(Debug, Clone)]
pub(crate) struct HiddenCache {
    input: Array2<f64>,
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
    activated: Array2<f64>,
    mask: Option<Array2<f64>>,
    batch_stats: Option<(Array1<f64>, Array1<f64>)>,
}

/// Intermediate values of one forward pass, consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    hidden: Vec<HiddenCache>,
    last_input: Array2<f64>,
    probs: Array2<f64>,
    train: bool,
}

impl ForwardCache {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn into_probs(self) -> Array2<f64> {
        self.probs
    }

    pub fn batch_size(&self) -> usize {
        self.probs.nrows()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn affine(x: &ArrayView2<f64>, d: &Dense) -> Array2<f64> {
    let mut z = x.dot(&d.weights);
    z += &d.bias;
    z
}

/// Hidden blocks run dense -> batch-norm -> ReLU -> dropout; the output
/// block is dense -> sigmoid.
pub fn forward(params: &ModelParams, x: ArrayView2<f64>, cfg: &ForwardConfig, mut mode: Mode<'_>) -> Result<ForwardCache> {
    let arch_in = params.dense[0].weights.nrows();
    if x.ncols() != arch_in {
        return Err(Error::Dimension {
            what: "feature width",
            expected: arch_in,
            found: x.ncols(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::invalid("empty batch"));
    }
    let train = matches!(mode, Mode::Train(_));
    let keep = 1.0 - cfg.dropout_p;
    let mut hidden = Vec::with_capacity(params.norms.len());
    let mut a = x.to_owned();
    for (d, n) in params.dense.iter().zip(&params.norms) {
        let z = affine(&a.view(), d);
        let (mean, var, batch_stats) = if train {
            let mean = z.mean_axis(Axis(0)).expect("nonempty batch");
            let centered = &z - &mean;
            let var = (&centered * &centered).mean_axis(Axis(0)).expect("nonempty batch");
            (mean.clone(), var.clone(), Some((mean, var)))
        } else {
            (n.running_mean.clone(), n.running_var.clone(), None)
        };
        let inv_std = var.mapv(|v| 1.0 / (v + cfg.bn_eps).sqrt());
        let xhat = (z - &mean) * &inv_std;
        let mut activated = &xhat * &n.gamma + &n.beta;
        activated.mapv_inplace(|v| v.max(0.0));
        let mask = match &mut mode {
            Mode::Train(rng) if cfg.dropout_p > 0.0 => {
                let scale = 1.0 / keep;
                let m = Array2::from_shape_simple_fn(activated.raw_dim(), || if rng.random::<f64>() < keep { scale } else { 0.0 });
                Some(m)
            }
            _ => None,
        };
        let out = match &mask {
            Some(m) => &activated * m,
            None => activated.clone(),
        };
        hidden.push(HiddenCache {
            input: a,
            xhat,
            inv_std,
            activated,
            mask,
            batch_stats,
        });
        a = out;
    }
    let last = params.dense.last().expect("output layer");
    let mut probs = affine(&a.view(), last);
    probs.mapv_inplace(sigmoid);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence {
            round: None,
            what: "non-finite activations".into(),
        });
    }
    Ok(ForwardCache {
        hidden,
        last_input: a,
        probs,
        train,
    })
}

/// Output probabilities in eval mode.
pub fn predict(params: &ModelParams, x: ArrayView2<f64>, cfg: &ForwardConfig) -> Result<Array2<f64>> {
    Ok(forward(params, x, cfg, Mode::Eval)?.into_probs())
}

/// Mean binary cross-entropy over all cells (probabilities clamped to
/// `[1e-7, 1 - 1e-7]`).
pub fn bce(probs: ArrayView2<f64>, labels: ArrayView2<f64>) -> f64 {
    let n = probs.len().max(1) as f64;
    let mut total = 0.0;
    Zip::from(&probs).and(&labels).for_each(|&p, &y| {
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
    });
    total / n
}

/// Cross-entropy plus `l2 / 2 · Σ‖W‖²`.
pub fn loss(probs: ArrayView2<f64>, labels: ArrayView2<f64>, params: &ModelParams, l2: f64) -> f64 {
    bce(probs, labels) + 0.5 * l2 * params.weight_sq_norm()
}

/// Exact gradient of [`loss`] through a train-mode forward pass.
pub fn backward(params: &ModelParams, cache: &ForwardCache, labels: ArrayView2<f64>, l2: f64) -> Result<ModelParams> {
    if !cache.train {
        return Err(Error::invalid("stale cache: backward needs a train-mode forward pass"));
    }
    if labels.dim() != cache.probs.dim() || cache.hidden.len() != params.norms.len() {
        return Err(Error::invalid("stale cache: shapes do not match labels or parameters"));
    }
    let b = cache.probs.nrows() as f64;
    let mut grads = params.zeros_like();

    let mut delta = (&cache.probs - &labels) / cache.probs.len() as f64;
    let out = params.dense.len() - 1;
    {
        let g = &mut grads.dense[out];
        g.weights = cache.last_input.t().dot(&delta) + &(&params.dense[out].weights * l2);
        g.bias = delta.sum_axis(Axis(0));
    }
    let mut da = delta.dot(&params.dense[out].weights.t());

    for l in (0..params.norms.len()).rev() {
        let hc = &cache.hidden[l];
        let n = &params.norms[l];
        if let Some(m) = &hc.mask {
            da *= m;
        }
        Zip::from(&mut da).and(&hc.activated).for_each(|g, &a| {
            if a <= 0.0 {
                *g = 0.0;
            }
        });
        let dy = da;
        grads.norms[l].gamma = (&dy * &hc.xhat).sum_axis(Axis(0));
        grads.norms[l].beta = dy.sum_axis(Axis(0));
        let dxhat = &dy * &n.gamma;
        let sum_dxhat = dxhat.sum_axis(Axis(0));
        let sum_dxhat_xhat = (&dxhat * &hc.xhat).sum_axis(Axis(0));
        delta = (&dxhat * b - &sum_dxhat - &hc.xhat * &sum_dxhat_xhat) * &(&hc.inv_std / b);

        let g = &mut grads.dense[l];
        g.weights = hc.input.t().dot(&delta) + &(&params.dense[l].weights * l2);
        g.bias = delta.sum_axis(Axis(0));
        da = if l > 0 {
            delta.dot(&params.dense[l].weights.t())
        } else {
            Array2::zeros((0, 0))
        };
    }
    Ok(grads)
}
