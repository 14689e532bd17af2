//! Attribution methods for trained networks: the gradient family
//! (gradient, input x gradient, SmoothGrad, guided backprop), GradCAM
//! variants, reference-based DeepLift (Rescale rule), and a layer-wise
//! relevance propagation (LRP) rule engine with composite rule sets.
//!
//! Rule-based methods (LRP, DeepLift, excitation backprop) operate on a
//! batch-norm-folded network; `explain` folds internally when needed.

use crate::error::{Error, Result};
use crate::net::{
    conv_forward, conv_transpose, fold_batchnorm, network_hash, ActivationCache, CacheEntry,
    Conv, Dense, Layer, Network, ReluBackward, Tensor,
};
use crate::volcore::{upsample, Dims, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Stabilizer for the residual-junction relevance split.
const RES_SPLIT_EPS: f64 = 1e-9;

/// Default epsilon for the LRP Epsilon rule.
pub const LRP_DEFAULT_EPS: f64 = 1e-6;

// --- Method configuration ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Rule {
    Zero,
    Epsilon { eps: f64 },
    AlphaBeta { alpha: f64, beta: f64 },
    ZPlus,
    Flat,
}

impl Rule {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Rule::Epsilon { eps } if eps <= 0.0 => {
                Err(Error::InvalidArgument("epsilon rule needs eps > 0".into()))
            }
            Rule::AlphaBeta { alpha, beta } if (alpha - beta - 1.0).abs() > 1e-12 => {
                Err(Error::InvalidArgument("alpha - beta must equal 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Per-position rule assignment: first conv, all middle layers, final
/// dense layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrpComposite {
    pub first_layer_rule: Rule,
    pub middle_rule: Rule,
    pub last_dense_rule: Rule,
    pub label: String,
}

impl LrpComposite {
    pub fn validate(&self) -> Result<()> {
        self.first_layer_rule.validate()?;
        self.middle_rule.validate()?;
        self.last_dense_rule.validate()
    }

    fn uniform(rule: Rule, label: &str) -> Self {
        Self {
            first_layer_rule: rule.clone(),
            middle_rule: rule.clone(),
            last_dense_rule: rule,
            label: label.into(),
        }
    }

    pub fn zero() -> Self {
        Self::uniform(Rule::Zero, "zero")
    }

    pub fn epsilon(eps: f64) -> Self {
        Self::uniform(Rule::Epsilon { eps }, "epsilon")
    }

    pub fn zplus() -> Self {
        Self::uniform(Rule::ZPlus, "zplus")
    }

    pub fn epsilon_alpha2_beta1() -> Self {
        Self {
            first_layer_rule: Rule::AlphaBeta { alpha: 2.0, beta: 1.0 },
            middle_rule: Rule::AlphaBeta { alpha: 2.0, beta: 1.0 },
            last_dense_rule: Rule::Epsilon { eps: LRP_DEFAULT_EPS },
            label: "epsilon_alpha2beta1".into(),
        }
    }

    pub fn epsilon_alpha2_beta1_flat() -> Self {
        Self {
            first_layer_rule: Rule::Flat,
            middle_rule: Rule::AlphaBeta { alpha: 2.0, beta: 1.0 },
            last_dense_rule: Rule::Epsilon { eps: LRP_DEFAULT_EPS },
            label: "epsilon_alpha2beta1_flat".into(),
        }
    }

    pub fn epsilon_plus() -> Self {
        Self {
            first_layer_rule: Rule::ZPlus,
            middle_rule: Rule::ZPlus,
            last_dense_rule: Rule::Epsilon { eps: LRP_DEFAULT_EPS },
            label: "epsilon_plus".into(),
        }
    }

    pub fn epsilon_plus_flat() -> Self {
        Self {
            first_layer_rule: Rule::Flat,
            middle_rule: Rule::ZPlus,
            last_dense_rule: Rule::Epsilon { eps: LRP_DEFAULT_EPS },
            label: "epsilon_plus_flat".into(),
        }
    }
}

/// Reference input for DeepLift.
#[derive(Debug, Clone, PartialEq)]
pub enum Baseline {
    Zero,
    /// Per-voxel mean over the training split; must be resolved to a
    /// concrete volume (see `Baseline::training_mean`) before `explain`.
    TrainingMean,
    Custom(Volume),
}

impl Baseline {
    /// Per-voxel mean image of a set of volumes.
    pub fn training_mean(volumes: &[Volume]) -> Result<Baseline> {
        if volumes.is_empty() {
            return Err(Error::EmptyDomain("no volumes for baseline mean".into()));
        }
        let mut mean = Volume::zeros(volumes[0].dims, volumes[0].spacing_mm);
        for v in volumes {
            if v.dims != mean.dims {
                return Err(Error::DimMismatch("baseline volumes differ in dims".into()));
            }
            for (m, x) in mean.data.iter_mut().zip(&v.data) {
                *m += x;
            }
        }
        let n = volumes.len() as f64;
        for m in &mut mean.data {
            *m /= n;
        }
        Ok(Baseline::Custom(mean))
    }

    fn resolve(&self, dims: Dims, spacing_mm: [f64; 3]) -> Result<Volume> {
        match self {
            Baseline::Zero => Ok(Volume::zeros(dims, spacing_mm)),
            Baseline::TrainingMean => Err(Error::InvalidArgument(
                "training-mean baseline must be resolved to a concrete volume first".into(),
            )),
            Baseline::Custom(v) => {
                if v.dims != dims {
                    return Err(Error::DimMismatch("baseline dims do not match input".into()));
                }
                Ok(v.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Method {
    Gradient,
    InputXGradient,
    SmoothGrad { noise_level: f64, n: usize, seed: u64 },
    GuidedBackprop,
    ExcitationBackprop,
    GradCam { tap: String },
    GuidedGradCam { tap: String },
    DeepLift { baseline: Baseline },
    Lrp { composite: LrpComposite },
}

impl Method {
    pub fn name(&self) -> String {
        match self {
            Method::Gradient => "gradient".into(),
            Method::InputXGradient => "input_x_gradient".into(),
            Method::SmoothGrad { .. } => "smoothgrad".into(),
            Method::GuidedBackprop => "guided_backprop".into(),
            Method::ExcitationBackprop => "excitation_backprop".into(),
            Method::GradCam { tap } => format!("gradcam_{tap}"),
            Method::GuidedGradCam { tap } => format!("guided_gradcam_{tap}"),
            Method::DeepLift { .. } => "deeplift".into(),
            Method::Lrp { composite } => format!("lrp_{}", composite.label),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Method::SmoothGrad { noise_level, n, .. } => {
                if *noise_level < 0.0 || *n < 1 {
                    return Err(Error::InvalidArgument(
                        "smoothgrad needs noise_level >= 0 and n >= 1".into(),
                    ));
                }
                Ok(())
            }
            Method::Lrp { composite } => composite.validate(),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Provenance {
    pub method: String,
    pub target: usize,
    pub net_hash: String,
    pub seed: Option<u64>,
    /// DeepLift only: residual of summation-to-delta attributable to
    /// near-zero-delta stabilization (bias terms cancel in differences).
    pub bias_contribution: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Heatmap {
    pub volume: Volume,
    pub provenance: Provenance,
}

impl Heatmap {
    /// Write the map in the volumetric container plus a JSON provenance
    /// sidecar at `<path>.json`.
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        crate::volcore::write_volume(&path, &self.volume)?;
        let side = path.as_ref().with_extension("json");
        let json = serde_json::to_string_pretty(&self.provenance)
            .map_err(|e| Error::Serde(e.to_string()))?;
        std::fs::write(side, json)?;
        Ok(())
    }
}

// --- Shared plumbing ----------------------------------------------------------

fn output_dim(net: &Network) -> Result<usize> {
    for l in net.layers.iter().rev() {
        if let Layer::Dense(d) = l {
            return Ok(d.out_dim);
        }
    }
    Err(Error::Network("network does not end in a dense head".into()))
}

fn check_target(net: &Network, target: usize) -> Result<()> {
    if target >= output_dim(net)? {
        return Err(Error::InvalidArgument(format!("target {target} out of range")));
    }
    Ok(())
}

/// Eval-mode forward + one-hot-seeded backward; returns (output value at
/// target, gradients).
fn forward_backward(
    net: &Network,
    x: &Volume,
    target: usize,
    mode: ReluBackward,
) -> Result<(f64, crate::net::Gradients, ActivationCache)> {
    check_target(net, target)?;
    let mut n = net.clone();
    n.set_eval(true);
    let (_, cache) = n.forward(std::slice::from_ref(x))?;
    let out_dim = output_dim(net)?;
    let value = final_outputs(&n, &cache)?[target];
    let mut seed = Tensor::zeros(out_dim, (1, 1, 1));
    seed.data[target] = 1.0;
    let grads = n.backward_seeded(&cache, vec![seed], mode)?;
    Ok((value, grads, cache))
}

/// Recompute the full output vector of the final dense layer from its
/// cached input (the cache only stores per-layer inputs).
fn final_outputs(net: &Network, cache: &ActivationCache) -> Result<Vec<f64>> {
    match (net.layers.last(), cache.entries.last()) {
        (Some(Layer::Dense(d)), Some(CacheEntry::Dense { x })) => {
            let xi = &x[0];
            let mut out = vec![0.0; d.out_dim];
            for (oi, o) in out.iter_mut().enumerate() {
                let mut acc = d.bias.as_ref().map_or(0.0, |b| b[oi]);
                for ii in 0..d.in_dim {
                    acc += d.weights[oi * d.in_dim + ii] * xi.data[ii];
                }
                *o = acc;
            }
            Ok(out)
        }
        _ => Err(Error::Network("network does not end in a dense head".into())),
    }
}

fn grad_to_volume(g: &Tensor, spacing_mm: [f64; 3]) -> Volume {
    g.to_volume(spacing_mm)
}

fn wrap(net: &Network, volume: Volume, method: &Method, target: usize, seed: Option<u64>) -> Heatmap {
    Heatmap {
        volume,
        provenance: Provenance {
            method: method.name(),
            target,
            net_hash: network_hash(net),
            seed,
            bias_contribution: None,
        },
    }
}

// --- Gradient family -----------------------------------------------------------

pub fn gradient(net: &Network, x: &Volume, target: usize) -> Result<Volume> {
    let (_, grads, _) = forward_backward(net, x, target, ReluBackward::Standard)?;
    Ok(grad_to_volume(&grads.inputs[0], x.spacing_mm))
}

pub fn input_x_gradient(net: &Network, x: &Volume, target: usize) -> Result<Volume> {
    let mut g = gradient(net, x, target)?;
    for (gi, xi) in g.data.iter_mut().zip(&x.data) {
        *gi *= xi;
    }
    Ok(g)
}

pub fn guided_backprop(net: &Network, x: &Volume, target: usize) -> Result<Volume> {
    let (_, grads, _) = forward_backward(net, x, target, ReluBackward::Guided)?;
    Ok(grad_to_volume(&grads.inputs[0], x.spacing_mm))
}

/// Average of input gradients under per-voxel Gaussian input noise with
/// sigma = noise_level * (max(x) - min(x)); deterministic per seed.
pub fn smoothgrad(
    net: &Network,
    x: &Volume,
    noise_level: f64,
    n: usize,
    seed: u64,
    target: usize,
) -> Result<Volume> {
    if n < 1 {
        return Err(Error::InvalidArgument("smoothgrad needs n >= 1".into()));
    }
    let sigma = noise_level * (x.max() - x.min());
    let mut noisy = Vec::with_capacity(n);
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    for _ in 0..n {
        let mut v = x.clone();
        if sigma > 0.0 {
            let dist = Normal::new(0.0, sigma).unwrap();
            for d in &mut v.data {
                *d += dist.sample(&mut rng);
            }
        }
        noisy.push(v);
    }
    let grads: Vec<Volume> = noisy
        .par_iter()
        .map(|v| gradient(net, v, target))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = Volume::zeros(x.dims, x.spacing_mm);
    for g in &grads {
        for (a, v) in acc.data.iter_mut().zip(&g.data) {
            *a += v;
        }
    }
    for a in &mut acc.data {
        *a /= n as f64;
    }
    Ok(acc)
}

// --- GradCAM ---------------------------------------------------------------------

/// Channel-gradient-weighted activation map at a residual-block tap,
/// rectified and upsampled to input resolution.
pub fn gradcam(net: &Network, x: &Volume, tap: &str, target: usize) -> Result<Volume> {
    let (_, grads, cache) = forward_backward(net, x, target, ReluBackward::Standard)?;
    let mut n = net.clone();
    n.set_eval(true);
    let acts = cache
        .tap_output(&n, tap)
        .ok_or_else(|| Error::InvalidArgument(format!("unknown tap '{tap}'")))?;
    let grad = grads
        .taps
        .iter()
        .find(|(name, _)| name == tap)
        .map(|(_, g)| &g[0])
        .ok_or_else(|| Error::InvalidArgument(format!("unknown tap '{tap}'")))?;
    let a = &acts[0];
    let nvox = a.nvox();
    let mut raw = Volume::zeros(a.dims, x.spacing_mm);
    for c in 0..a.ch {
        let alpha = grad.channel(c).iter().sum::<f64>() / nvox as f64;
        for (r, &v) in raw.data.iter_mut().zip(a.channel(c)) {
            *r += alpha * v;
        }
    }
    for r in &mut raw.data {
        *r = r.max(0.0);
    }
    let mut up = upsample(&raw, x.dims)?;
    up.spacing_mm = x.spacing_mm;
    Ok(up)
}

pub fn guided_gradcam(net: &Network, x: &Volume, tap: &str, target: usize) -> Result<Volume> {
    let cam = gradcam(net, x, tap, target)?;
    let mut gb = guided_backprop(net, x, target)?;
    for (g, c) in gb.data.iter_mut().zip(&cam.data) {
        *g *= c;
    }
    Ok(gb)
}

// --- DeepLift (Rescale) ------------------------------------------------------------

fn folded(net: &Network) -> Result<Network> {
    if net.has_batchnorm() {
        fold_batchnorm(net)
    } else {
        let mut n = net.clone();
        n.set_eval(true);
        Ok(n)
    }
}

/// Rescale multiplier for an elementwise ReLU given activation deltas.
fn rescale_ratio(z: f64, zb: f64) -> f64 {
    let dz = z - zb;
    if dz.abs() > 1e-9 {
        (z.max(0.0) - zb.max(0.0)) / dz
    } else if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

fn apply_ratio(m: &mut Tensor, z: &Tensor, zb: &Tensor) {
    for i in 0..m.data.len() {
        m.data[i] *= rescale_ratio(z.data[i], zb.data[i]);
    }
}

/// Propagate DeepLift multipliers backward through `layers` given caches
/// for the actual input and the baseline.
fn deeplift_layers(
    layers: &[Layer],
    cx: &[CacheEntry],
    cb: &[CacheEntry],
    mut m: Tensor,
) -> Result<Tensor> {
    for ((layer, ex), eb) in layers.iter().zip(cx).zip(cb).rev() {
        match (layer, ex, eb) {
            (Layer::Conv(c), CacheEntry::Conv { x }, _) => {
                m = conv_transpose(c, &m, x[0].dims);
            }
            (Layer::Dense(d), CacheEntry::Dense { x }, _) => {
                let xi = &x[0];
                let mut out = Tensor::zeros(xi.ch, xi.dims);
                for oi in 0..d.out_dim {
                    for ii in 0..d.in_dim {
                        out.data[ii] += m.data[oi] * d.weights[oi * d.in_dim + ii];
                    }
                }
                m = out;
            }
            (Layer::Gap, CacheEntry::Gap { x }, _) => {
                let xi = &x[0];
                let nvox = xi.nvox();
                let mut out = Tensor::zeros(xi.ch, xi.dims);
                for c in 0..xi.ch {
                    let g = m.data[c] / nvox as f64;
                    for i in 0..nvox {
                        out.data[c * nvox + i] = g;
                    }
                }
                m = out;
            }
            (Layer::ReLU, CacheEntry::ReLU { x }, CacheEntry::ReLU { x: xb }) => {
                apply_ratio(&mut m, &x[0], &xb[0]);
            }
            (
                Layer::Res(r),
                CacheEntry::Res { path, pre_relu, skip_in, .. },
                CacheEntry::Res { path: path_b, pre_relu: pre_b, .. },
            ) => {
                apply_ratio(&mut m, &pre_relu[0], &pre_b[0]);
                let m_path = deeplift_layers(&r.path, path, path_b, m.clone())?;
                let m_skip = match &r.proj {
                    Some(p) => conv_transpose(p, &m, skip_in[0].dims),
                    None => m.clone(),
                };
                m = Tensor {
                    ch: m_path.ch,
                    dims: m_path.dims,
                    data: m_path.data.iter().zip(&m_skip.data).map(|(a, b)| a + b).collect(),
                };
            }
            (Layer::BatchNorm(_), _, _) => {
                return Err(Error::Network("deeplift requires a batch-norm-folded network".into()))
            }
            _ => return Err(Error::Network("cache does not match network".into())),
        }
    }
    Ok(m)
}

/// DeepLift with the Rescale rule. Returns the per-voxel contributions
/// (x - baseline) * multipliers and the summation-to-delta residual
/// (f(x) - f(baseline) - sum of contributions).
pub fn deeplift_rescale(
    net: &Network,
    x: &Volume,
    baseline: &Baseline,
    target: usize,
) -> Result<(Volume, f64)> {
    let net = folded(net)?;
    check_target(&net, target)?;
    let b = baseline.resolve(x.dims, x.spacing_mm)?;
    let mut nx = net.clone();
    let (_, cache_x) = nx.forward(std::slice::from_ref(x))?;
    let mut nb = net.clone();
    let (_, cache_b) = nb.forward(std::slice::from_ref(&b))?;
    let fx = final_outputs(&net, &cache_x)?[target];
    let fb = final_outputs(&net, &cache_b)?[target];
    let out_dim = output_dim(&net)?;
    let mut m = Tensor::zeros(out_dim, (1, 1, 1));
    m.data[target] = 1.0;
    let m_in = deeplift_layers(&net.layers, &cache_x.entries, &cache_b.entries, m)?;
    let mut heat = Volume::zeros(x.dims, x.spacing_mm);
    for i in 0..heat.data.len() {
        heat.data[i] = (x.data[i] - b.data[i]) * m_in.data[i];
    }
    let residual = (fx - fb) - heat.sum();
    Ok((heat, residual))
}

// --- LRP rule engine -----------------------------------------------------------------

fn stabilized(z: f64, rule: &Rule) -> f64 {
    match rule {
        Rule::Epsilon { eps } => z + eps * if z >= 0.0 { 1.0 } else { -1.0 },
        _ => z,
    }
}

fn safe_div(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn conv_with_weights(c: &Conv, f: impl Fn(f64) -> f64, bias: Option<Vec<f64>>) -> Conv {
    Conv {
        in_ch: c.in_ch,
        out_ch: c.out_ch,
        kernel: c.kernel,
        stride: c.stride,
        weights: c.weights.iter().map(|&w| f(w)).collect(),
        bias,
    }
}

fn pos_part(t: &Tensor) -> Tensor {
    Tensor { ch: t.ch, dims: t.dims, data: t.data.iter().map(|&v| v.max(0.0)).collect() }
}

fn neg_part(t: &Tensor) -> Tensor {
    Tensor { ch: t.ch, dims: t.dims, data: t.data.iter().map(|&v| v.min(0.0)).collect() }
}

fn tensor_add(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor {
        ch: a.ch,
        dims: a.dims,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    }
}

fn lrp_conv(c: &Conv, a: &Tensor, r: &Tensor, rule: &Rule) -> Result<Tensor> {
    match rule {
        Rule::Zero | Rule::Epsilon { .. } => {
            let z = conv_forward(c, a);
            let mut s = r.clone();
            for (si, &zi) in s.data.iter_mut().zip(&z.data) {
                *si = safe_div(*si, stabilized(zi, rule));
            }
            let mut out = conv_transpose(c, &s, a.dims);
            for (o, &ai) in out.data.iter_mut().zip(&a.data) {
                *o *= ai;
            }
            Ok(out)
        }
        Rule::ZPlus => lrp_conv(c, a, r, &Rule::AlphaBeta { alpha: 1.0, beta: 0.0 }),
        Rule::AlphaBeta { alpha, beta } => {
            let ap = pos_part(a);
            let an = neg_part(a);
            let bias_pos = c.bias.as_ref().map(|b| b.iter().map(|&v| v.max(0.0)).collect());
            let bias_neg = c.bias.as_ref().map(|b| b.iter().map(|&v| v.min(0.0)).collect());
            let wp = conv_with_weights(c, |w| w.max(0.0), bias_pos);
            let wn = conv_with_weights(c, |w| w.min(0.0), bias_neg);
            let wp_nb = Conv { bias: None, ..wp.clone() };
            let wn_nb = Conv { bias: None, ..wn.clone() };
            // Positive pre-activation parts: a+*w+ + a-*w- (+ b+), and the
            // mirror for negative parts.
            let zpos = tensor_add(&conv_forward(&wp, &ap), &conv_forward(&wn_nb, &an));
            let zneg = tensor_add(&conv_forward(&wn, &ap), &conv_forward(&wp_nb, &an));
            let mut s_alpha = r.clone();
            let mut s_beta = r.clone();
            for i in 0..r.data.len() {
                s_alpha.data[i] = alpha * safe_div(r.data[i], zpos.data[i]);
                s_beta.data[i] = beta * safe_div(r.data[i], zneg.data[i]);
            }
            let tp_a = conv_transpose(&wp_nb, &s_alpha, a.dims);
            let tn_a = conv_transpose(&wn_nb, &s_alpha, a.dims);
            let tp_b = conv_transpose(&wp_nb, &s_beta, a.dims);
            let tn_b = conv_transpose(&wn_nb, &s_beta, a.dims);
            let mut out = Tensor::zeros(a.ch, a.dims);
            for i in 0..out.data.len() {
                out.data[i] = ap.data[i] * (tp_a.data[i] - tn_b.data[i])
                    + an.data[i] * (tn_a.data[i] - tp_b.data[i]);
            }
            Ok(out)
        }
        Rule::Flat => {
            // Uniform split of each output's relevance over the in-bounds
            // inputs of its receptive field.
            let ones_w = conv_with_weights(c, |_| 1.0, None);
            let ones_in = Tensor {
                ch: a.ch,
                dims: a.dims,
                data: vec![1.0; a.data.len()],
            };
            let counts = conv_forward(&ones_w, &ones_in);
            let mut s = r.clone();
            for (si, &ni) in s.data.iter_mut().zip(&counts.data) {
                *si = safe_div(*si, ni);
            }
            Ok(conv_transpose(&ones_w, &s, a.dims))
        }
    }
}

fn lrp_dense(d: &Dense, a: &Tensor, r: &[f64], rule: &Rule) -> Result<Tensor> {
    let mut out = Tensor::zeros(a.ch, a.dims);
    match rule {
        Rule::Zero | Rule::Epsilon { .. } => {
            for oi in 0..d.out_dim {
                let mut z = d.bias.as_ref().map_or(0.0, |b| b[oi]);
                for ii in 0..d.in_dim {
                    z += d.weights[oi * d.in_dim + ii] * a.data[ii];
                }
                let s = safe_div(r[oi], stabilized(z, rule));
                for ii in 0..d.in_dim {
                    out.data[ii] += a.data[ii] * d.weights[oi * d.in_dim + ii] * s;
                }
            }
        }
        Rule::ZPlus => return lrp_dense(d, a, r, &Rule::AlphaBeta { alpha: 1.0, beta: 0.0 }),
        Rule::AlphaBeta { alpha, beta } => {
            for oi in 0..d.out_dim {
                let b = d.bias.as_ref().map_or(0.0, |b| b[oi]);
                let mut zpos = b.max(0.0);
                let mut zneg = b.min(0.0);
                for ii in 0..d.in_dim {
                    let zij = d.weights[oi * d.in_dim + ii] * a.data[ii];
                    zpos += zij.max(0.0);
                    zneg += zij.min(0.0);
                }
                let sa = *alpha * safe_div(r[oi], zpos);
                let sb = *beta * safe_div(r[oi], zneg);
                for ii in 0..d.in_dim {
                    let zij = d.weights[oi * d.in_dim + ii] * a.data[ii];
                    out.data[ii] += zij.max(0.0) * sa - zij.min(0.0) * sb;
                }
            }
        }
        Rule::Flat => {
            for oi in 0..d.out_dim {
                let s = r[oi] / d.in_dim as f64;
                for ii in 0..d.in_dim {
                    out.data[ii] += s;
                }
            }
        }
    }
    Ok(out)
}

/// GAP as a linear layer with uniform weights 1/N.
fn lrp_gap(a: &Tensor, r: &Tensor, rule: &Rule) -> Result<Tensor> {
    let nvox = a.nvox();
    let nf = nvox as f64;
    let mut out = Tensor::zeros(a.ch, a.dims);
    for c in 0..a.ch {
        let rc = r.data[c];
        match rule {
            Rule::Zero | Rule::Epsilon { .. } => {
                let z = a.channel(c).iter().sum::<f64>() / nf;
                let s = safe_div(rc, stabilized(z, rule));
                for i in 0..nvox {
                    out.data[c * nvox + i] = (a.data[c * nvox + i] / nf) * s;
                }
            }
            Rule::ZPlus | Rule::AlphaBeta { .. } => {
                let (alpha, beta) = match rule {
                    Rule::ZPlus => (1.0, 0.0),
                    Rule::AlphaBeta { alpha, beta } => (*alpha, *beta),
                    _ => unreachable!(),
                };
                let mut zpos = 0.0;
                let mut zneg = 0.0;
                for i in 0..nvox {
                    let zi = a.data[c * nvox + i] / nf;
                    zpos += zi.max(0.0);
                    zneg += zi.min(0.0);
                }
                let sa = alpha * safe_div(rc, zpos);
                let sb = beta * safe_div(rc, zneg);
                for i in 0..nvox {
                    let zi = a.data[c * nvox + i] / nf;
                    out.data[c * nvox + i] = zi.max(0.0) * sa - zi.min(0.0) * sb;
                }
            }
            Rule::Flat => {
                for i in 0..nvox {
                    out.data[c * nvox + i] = rc / nf;
                }
            }
        }
    }
    Ok(out)
}

/// Split relevance at a residual sum node proportionally to each branch's
/// activation with sign-aware epsilon stabilization, then recurse.
fn lrp_res_split(r: &Tensor, path_out: &Tensor, skip_out: &Tensor) -> (Tensor, Tensor) {
    let mut rp = Tensor::zeros(r.ch, r.dims);
    let mut rs = Tensor::zeros(r.ch, r.dims);
    for i in 0..r.data.len() {
        let total = path_out.data[i] + skip_out.data[i];
        let stab = total + RES_SPLIT_EPS * if total >= 0.0 { 1.0 } else { -1.0 };
        rp.data[i] = r.data[i] * path_out.data[i] / stab;
        rs.data[i] = r.data[i] * skip_out.data[i] / stab;
    }
    (rp, rs)
}

struct LrpCtx<'a> {
    composite: &'a LrpComposite,
    /// Top-level index of the leading conv layer, if the network starts
    /// with one (gets the first-layer rule).
    first_conv: Option<usize>,
    /// Top-level index of the final dense layer (gets the last-dense rule).
    last_dense: Option<usize>,
}

fn lrp_layers(
    layers: &[Layer],
    entries: &[CacheEntry],
    mut r: Tensor,
    ctx: &LrpCtx,
    top_level: bool,
) -> Result<Tensor> {
    for (idx, (layer, entry)) in layers.iter().zip(entries).enumerate().rev() {
        let rule = if top_level && ctx.first_conv == Some(idx) {
            &ctx.composite.first_layer_rule
        } else if top_level && ctx.last_dense == Some(idx) {
            &ctx.composite.last_dense_rule
        } else {
            &ctx.composite.middle_rule
        };
        match (layer, entry) {
            (Layer::Conv(c), CacheEntry::Conv { x }) => {
                r = lrp_conv(c, &x[0], &r, rule)?;
            }
            (Layer::Dense(d), CacheEntry::Dense { x }) => {
                let rv = r.data.clone();
                r = lrp_dense(d, &x[0], &rv, rule)?;
            }
            (Layer::Gap, CacheEntry::Gap { x }) => {
                r = lrp_gap(&x[0], &r, rule)?;
            }
            (Layer::ReLU, CacheEntry::ReLU { .. }) => {}
            (Layer::Res(rb), CacheEntry::Res { path, path_out, skip_in, skip_out, .. }) => {
                // The block's final ReLU passes relevance unchanged.
                let (rp, rs) = lrp_res_split(&r, &path_out[0], &skip_out[0]);
                let r_path = lrp_layers(&rb.path, path, rp, ctx, false)?;
                let r_skip = match &rb.proj {
                    Some(p) => lrp_conv(p, &skip_in[0], &rs, &ctx.composite.middle_rule)?,
                    None => rs,
                };
                r = tensor_add(&r_path, &r_skip);
            }
            (Layer::BatchNorm(_), _) => {
                return Err(Error::Network(
                    "relevance propagation requires a batch-norm-folded network".into(),
                ))
            }
            _ => return Err(Error::Network("cache does not match network".into())),
        }
    }
    Ok(r)
}

/// Layer-wise relevance propagation; requires a batch-norm-folded
/// network (`explain` folds internally).
pub fn lrp(net: &Network, x: &Volume, composite: &LrpComposite, target: usize) -> Result<Volume> {
    composite.validate()?;
    if net.has_batchnorm() {
        return Err(Error::Network(
            "relevance propagation requires a batch-norm-folded network".into(),
        ));
    }
    check_target(net, target)?;
    let mut n = net.clone();
    n.set_eval(true);
    let (_, cache) = n.forward(std::slice::from_ref(x))?;
    let out_dim = output_dim(net)?;
    let value = final_outputs(net, &cache)?[target];
    let mut r = Tensor::zeros(out_dim, (1, 1, 1));
    r.data[target] = value;
    let first_conv = match net.layers.first() {
        Some(Layer::Conv(_)) => Some(0),
        _ => None,
    };
    let last_dense = net
        .layers
        .iter()
        .rposition(|l| matches!(l, Layer::Dense(_)));
    let ctx = LrpCtx { composite, first_conv, last_dense };
    let out = lrp_layers(&net.layers, &cache.entries, r, &ctx, true)?;
    Ok(out.to_volume(x.spacing_mm))
}

// --- Excitation backprop (independent ZPlus implementation) --------------------------

// Deliberately written with direct scatter loops rather than through the
// rule engine above, so the two can cross-check each other.

fn eb_conv(c: &Conv, a: &Tensor, r: &Tensor) -> Tensor {
    let (nx, ny, nz) = a.dims;
    let k = c.kernel as i64;
    let kx = if nx == 1 { 1 } else { k };
    let ky = if ny == 1 { 1 } else { k };
    let kz = if nz == 1 { 1 } else { k };
    let od = r.dims;
    let onv = r.nvox();
    let inv = a.nvox();
    let mut out = Tensor::zeros(c.in_ch, a.dims);
    let kxy = (c.kernel * c.kernel) as usize;
    let widx = |oc: usize, ic: usize, dx: usize, dy: usize, dz: usize| {
        (((oc * c.in_ch + ic) * c.kernel + dz) * c.kernel + dy) * c.kernel + dx
    };
    let _ = kxy;
    for oc in 0..c.out_ch {
        for oz in 0..od.2 as i64 {
            for oy in 0..od.1 as i64 {
                for ox in 0..od.0 as i64 {
                    let rj = r.data[oc * onv
                        + ox as usize
                        + od.0 * (oy as usize + od.1 * oz as usize)];
                    if rj == 0.0 {
                        continue;
                    }
                    // First pass: positive pre-activation mass.
                    let mut denom = c.bias.as_ref().map_or(0.0, |b| b[oc].max(0.0));
                    for ic in 0..c.in_ch {
                        for dz in 0..kz {
                            for dy in 0..ky {
                                for dx in 0..kx {
                                    let iz = oz * c.stride as i64 + dz - kz / 2;
                                    let iy = oy * c.stride as i64 + dy - ky / 2;
                                    let ix = ox * c.stride as i64 + dx - kx / 2;
                                    if ix < 0
                                        || iy < 0
                                        || iz < 0
                                        || ix >= nx as i64
                                        || iy >= ny as i64
                                        || iz >= nz as i64
                                    {
                                        continue;
                                    }
                                    let ai = a.data[ic * inv
                                        + ix as usize
                                        + nx * (iy as usize + ny * iz as usize)];
                                    let w = c.weights
                                        [widx(oc, ic, dx as usize, dy as usize, dz as usize)];
                                    denom += (ai * w).max(0.0);
                                }
                            }
                        }
                    }
                    if denom == 0.0 {
                        continue;
                    }
                    // Second pass: scatter shares.
                    for ic in 0..c.in_ch {
                        for dz in 0..kz {
                            for dy in 0..ky {
                                for dx in 0..kx {
                                    let iz = oz * c.stride as i64 + dz - kz / 2;
                                    let iy = oy * c.stride as i64 + dy - ky / 2;
                                    let ix = ox * c.stride as i64 + dx - kx / 2;
                                    if ix < 0
                                        || iy < 0
                                        || iz < 0
                                        || ix >= nx as i64
                                        || iy >= ny as i64
                                        || iz >= nz as i64
                                    {
                                        continue;
                                    }
                                    let ii = ic * inv
                                        + ix as usize
                                        + nx * (iy as usize + ny * iz as usize);
                                    let w = c.weights
                                        [widx(oc, ic, dx as usize, dy as usize, dz as usize)];
                                    let zij = (a.data[ii] * w).max(0.0);
                                    if zij != 0.0 {
                                        out.data[ii] += rj * zij / denom;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn eb_dense(d: &Dense, a: &Tensor, r: &[f64]) -> Tensor {
    let mut out = Tensor::zeros(a.ch, a.dims);
    for oi in 0..d.out_dim {
        if r[oi] == 0.0 {
            continue;
        }
        let mut denom = d.bias.as_ref().map_or(0.0, |b| b[oi].max(0.0));
        for ii in 0..d.in_dim {
            denom += (d.weights[oi * d.in_dim + ii] * a.data[ii]).max(0.0);
        }
        if denom == 0.0 {
            continue;
        }
        for ii in 0..d.in_dim {
            let zij = (d.weights[oi * d.in_dim + ii] * a.data[ii]).max(0.0);
            if zij != 0.0 {
                out.data[ii] += r[oi] * zij / denom;
            }
        }
    }
    out
}

fn eb_gap(a: &Tensor, r: &Tensor) -> Tensor {
    let nvox = a.nvox();
    let nf = nvox as f64;
    let mut out = Tensor::zeros(a.ch, a.dims);
    for c in 0..a.ch {
        let mut denom = 0.0;
        for i in 0..nvox {
            denom += (a.data[c * nvox + i] / nf).max(0.0);
        }
        if denom == 0.0 {
            continue;
        }
        for i in 0..nvox {
            let zij = (a.data[c * nvox + i] / nf).max(0.0);
            out.data[c * nvox + i] = r.data[c] * zij / denom;
        }
    }
    out
}

fn eb_layers(layers: &[Layer], entries: &[CacheEntry], mut r: Tensor) -> Result<Tensor> {
    for (layer, entry) in layers.iter().zip(entries).rev() {
        match (layer, entry) {
            (Layer::Conv(c), CacheEntry::Conv { x }) => r = eb_conv(c, &x[0], &r),
            (Layer::Dense(d), CacheEntry::Dense { x }) => {
                let rv = r.data.clone();
                r = eb_dense(d, &x[0], &rv);
            }
            (Layer::Gap, CacheEntry::Gap { x }) => r = eb_gap(&x[0], &r),
            (Layer::ReLU, CacheEntry::ReLU { .. }) => {}
            (Layer::Res(rb), CacheEntry::Res { path, path_out, skip_in, skip_out, .. }) => {
                // Same documented junction split as the rule engine,
                // re-derived here rather than shared.
                let mut rp = Tensor::zeros(r.ch, r.dims);
                let mut rs = Tensor::zeros(r.ch, r.dims);
                for i in 0..r.data.len() {
                    let total = path_out[0].data[i] + skip_out[0].data[i];
                    let sgn = if total >= 0.0 { 1.0 } else { -1.0 };
                    let stab = total + RES_SPLIT_EPS * sgn;
                    rp.data[i] = r.data[i] * path_out[0].data[i] / stab;
                    rs.data[i] = r.data[i] * skip_out[0].data[i] / stab;
                }
                let r_path = eb_layers(&rb.path, path, rp)?;
                let r_skip = match &rb.proj {
                    Some(p) => eb_conv(p, &skip_in[0], &rs),
                    None => rs,
                };
                r = tensor_add(&r_path, &r_skip);
            }
            (Layer::BatchNorm(_), _) => {
                return Err(Error::Network(
                    "excitation backprop requires a batch-norm-folded network".into(),
                ))
            }
            _ => return Err(Error::Network("cache does not match network".into())),
        }
    }
    Ok(r)
}

/// Excitation backprop: winner-take-most propagation through positive
/// pre-activation shares at every layer (including first and last).
pub fn excitation_backprop(net: &Network, x: &Volume, target: usize) -> Result<Volume> {
    let net = folded(net)?;
    check_target(&net, target)?;
    let mut n = net.clone();
    n.set_eval(true);
    let (_, cache) = n.forward(std::slice::from_ref(x))?;
    let out_dim = output_dim(&net)?;
    let value = final_outputs(&net, &cache)?[target];
    let mut r = Tensor::zeros(out_dim, (1, 1, 1));
    r.data[target] = value;
    let out = eb_layers(&net.layers, &cache.entries, r)?;
    Ok(out.to_volume(x.spacing_mm))
}

// --- Dispatch -------------------------------------------------------------------------

/// Run one attribution method against one input. The network may be in
/// either mode; evaluation uses running statistics, and rule-based
/// methods run against a batch-norm-folded copy.
pub fn explain(net: &Network, x: &Volume, method: &Method, target: usize) -> Result<Heatmap> {
    method.validate()?;
    if x.dims != net.spec.input_dims {
        return Err(Error::DimMismatch("input dims do not match network".into()));
    }
    let volume = match method {
        Method::Gradient => gradient(net, x, target)?,
        Method::InputXGradient => input_x_gradient(net, x, target)?,
        Method::SmoothGrad { noise_level, n, seed } => {
            let v = smoothgrad(net, x, *noise_level, *n, *seed, target)?;
            return Ok(wrap(net, v, method, target, Some(*seed)));
        }
        Method::GuidedBackprop => guided_backprop(net, x, target)?,
        Method::ExcitationBackprop => excitation_backprop(net, x, target)?,
        Method::GradCam { tap } => gradcam(net, x, tap, target)?,
        Method::GuidedGradCam { tap } => guided_gradcam(net, x, tap, target)?,
        Method::DeepLift { baseline } => {
            let (v, residual) = deeplift_rescale(net, x, baseline, target)?;
            let mut h = wrap(net, v, method, target, None);
            h.provenance.bias_contribution = Some(residual);
            return Ok(h);
        }
        Method::Lrp { composite } => {
            let f = folded(net)?;
            lrp(&f, x, composite, target)?
        }
    };
    Ok(wrap(net, volume, method, target, None))
}
