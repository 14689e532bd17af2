//! Small configurable 2D/3D residual CNN with hand-written forward and
//! backward passes, an Adam + one-cycle training loop, and batch-norm
//! folding for rule-based relevance propagation.
//!
//! All math is f64; reductions are ordered deterministically so results
//! are independent of worker count.

use crate::error::{Error, Result};
use crate::volcore::{Dims, Volume};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::io::{Read, Write};
use std::path::Path;

/// Channel-major feature map: `data[c * nvox + vox]` with the volcore
/// voxel layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub ch: usize,
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(ch: usize, dims: Dims) -> Self {
        Self { ch, dims, data: vec![0.0; ch * dims.0 * dims.1 * dims.2] }
    }

    pub fn nvox(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn from_volume(v: &Volume) -> Self {
        Self { ch: 1, dims: v.dims, data: v.data.clone() }
    }

    pub fn to_volume(&self, spacing_mm: [f64; 3]) -> Volume {
        assert_eq!(self.ch, 1);
        Volume { dims: self.dims, spacing_mm, data: self.data.clone() }
    }

    /// Channel slice accessors.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.nvox();
        &self.data[c * n..(c + 1) * n]
    }
}

// --- Specs -----------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum LayerSpec {
    Conv { in_ch: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool },
    BatchNorm { ch: usize, eps: f64, momentum: f64 },
    ReLU,
    /// Two Conv+BN+ReLU stages with an identity or 1x1-projection skip.
    ResBlock { in_ch: usize, out_ch: usize, stride: usize },
    GlobalAvgPool,
    Dense { in_dim: usize, out_dim: usize, bias: bool },
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkSpec {
    pub input_dims: Dims,
    pub in_ch: usize,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Reduced-depth residual preset: stem conv + N res blocks (stride 2
    /// after the first) + GAP + dense head to one output.
    pub fn tiny_resnet(input_dims: Dims, base_ch: usize, n_blocks: usize) -> Self {
        let mut layers = vec![
            LayerSpec::Conv { in_ch: 1, out_ch: base_ch, kernel: 3, stride: 1, bias: false },
            LayerSpec::BatchNorm { ch: base_ch, eps: 1e-5, momentum: 0.1 },
            LayerSpec::ReLU,
        ];
        let mut ch = base_ch;
        for b in 0..n_blocks {
            let out = if b == 0 { ch } else { ch * 2 };
            let stride = if b == 0 { 1 } else { 2 };
            layers.push(LayerSpec::ResBlock { in_ch: ch, out_ch: out, stride });
            ch = out;
        }
        layers.push(LayerSpec::GlobalAvgPool);
        layers.push(LayerSpec::Dense { in_dim: ch, out_dim: 1, bias: true });
        Self { input_dims, in_ch: 1, layers }
    }

    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spec serializes");
        let mut h = Sha256::new();
        h.update(&bytes);
        format!("{:x}", h.finalize())
    }
}

// --- Runtime layers ----------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `weights[((oc * in_ch + ic) * kz + z) * ky*kx + ...]`, see `widx`.
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl Conv {
    fn kdims(&self, in_dims: Dims) -> (usize, usize, usize) {
        // 2D mode: collapse the kernel along axes of extent 1.
        (
            self.kernel.min(if in_dims.0 == 1 { 1 } else { self.kernel }),
            self.kernel.min(if in_dims.1 == 1 { 1 } else { self.kernel }),
            self.kernel.min(if in_dims.2 == 1 { 1 } else { self.kernel }),
        )
    }

    pub fn out_dims(&self, in_dims: Dims) -> Dims {
        let o = |d: usize| (d - 1) / self.stride + 1;
        (o(in_dims.0), o(in_dims.1), o(in_dims.2))
    }

    pub fn weight_len(&self) -> usize {
        self.out_ch * self.in_ch * self.kernel * self.kernel * self.kernel
    }

    #[inline]
    fn widx(&self, oc: usize, ic: usize, kx: usize, ky: usize, kz: usize) -> usize {
        (((oc * self.in_ch + ic) * self.kernel + kz) * self.kernel + ky) * self.kernel + kx
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub ch: usize,
    pub eps: f64,
    pub momentum: f64,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub in_dim: usize,
    pub out_dim: usize,
    /// `weights[o * in_dim + i]`
    pub weights: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    /// Conv-BN-ReLU-Conv-BN main path.
    pub path: Vec<Layer>,
    /// 1x1 projection when channels or stride change, otherwise identity.
    pub proj: Option<Conv>,
    pub tap: String,
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv),
    BatchNorm(BatchNorm),
    ReLU,
    Res(ResBlock),
    Gap,
    Dense(Dense),
}

#[derive(Debug, Clone)]
pub struct Network {
    pub spec: NetworkSpec,
    pub layers: Vec<Layer>,
    pub eval_mode: bool,
}

// --- Initialization ----------------------------------------------------------

fn he_conv(spec_conv: &Conv, rng: &mut ChaCha12Rng) -> Vec<f64> {
    let fan_in = spec_conv.in_ch * spec_conv.kernel.pow(3);
    let sd = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, sd).unwrap();
    (0..spec_conv.weight_len()).map(|_| dist.sample(rng)).collect()
}

fn build_conv(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, bias: bool, rng: &mut ChaCha12Rng) -> Conv {
    let mut c = Conv { in_ch, out_ch, kernel, stride, weights: vec![], bias: if bias { Some(vec![0.0; out_ch]) } else { None } };
    c.weights = he_conv(&c, rng);
    c
}

fn build_bn(ch: usize, eps: f64, momentum: f64) -> BatchNorm {
    BatchNorm {
        ch,
        eps,
        momentum,
        gamma: vec![1.0; ch],
        beta: vec![0.0; ch],
        running_mean: vec![0.0; ch],
        running_var: vec![1.0; ch],
    }
}

impl Network {
    /// He-normal conv/dense weights, zero biases, identity batch norm;
    /// deterministic per seed.
    pub fn init(spec: &NetworkSpec, seed: u64) -> Result<Network> {
        validate_spec(spec)?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut block_no = 0usize;
        for ls in &spec.layers {
            layers.push(match *ls {
                LayerSpec::Conv { in_ch, out_ch, kernel, stride, bias } => {
                    Layer::Conv(build_conv(in_ch, out_ch, kernel, stride, bias, &mut rng))
                }
                LayerSpec::BatchNorm { ch, eps, momentum } => Layer::BatchNorm(build_bn(ch, eps, momentum)),
                LayerSpec::ReLU => Layer::ReLU,
                LayerSpec::ResBlock { in_ch, out_ch, stride } => {
                    block_no += 1;
                    let path = vec![
                        Layer::Conv(build_conv(in_ch, out_ch, 3, stride, false, &mut rng)),
                        Layer::BatchNorm(build_bn(out_ch, 1e-5, 0.1)),
                        Layer::ReLU,
                        Layer::Conv(build_conv(out_ch, out_ch, 3, 1, false, &mut rng)),
                        Layer::BatchNorm(build_bn(out_ch, 1e-5, 0.1)),
                    ];
                    let proj = if in_ch != out_ch || stride != 1 {
                        Some(build_conv(in_ch, out_ch, 1, stride, false, &mut rng))
                    } else {
                        None
                    };
                    Layer::Res(ResBlock { path, proj, tap: format!("block{block_no}") })
                }
                LayerSpec::GlobalAvgPool => Layer::Gap,
                LayerSpec::Dense { in_dim, out_dim, bias } => {
                    let sd = (2.0 / in_dim as f64).sqrt();
                    let dist = Normal::new(0.0, sd).unwrap();
                    Layer::Dense(Dense {
                        in_dim,
                        out_dim,
                        weights: (0..in_dim * out_dim).map(|_| dist.sample(&mut rng)).collect(),
                        bias: if bias { Some(vec![0.0; out_dim]) } else { None },
                    })
                }
            });
        }
        Ok(Network { spec: spec.clone(), layers, eval_mode: false })
    }

    pub fn tap_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                Layer::Res(r) => Some(r.tap.clone()),
                _ => None,
            })
            .collect()
    }

    pub fn set_eval(&mut self, eval: bool) {
        self.eval_mode = eval;
    }

    pub fn has_batchnorm(&self) -> bool {
        fn any_bn(layers: &[Layer]) -> bool {
            layers.iter().any(|l| match l {
                Layer::BatchNorm(_) => true,
                Layer::Res(r) => any_bn(&r.path),
                _ => false,
            })
        }
        any_bn(&self.layers)
    }
}

fn validate_spec(spec: &NetworkSpec) -> Result<()> {
    let mut ch = spec.in_ch;
    let mut dims = spec.input_dims;
    let mut spatial = true;
    for ls in &spec.layers {
        match *ls {
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, .. } => {
                if !spatial || in_ch != ch {
                    return Err(Error::Network(format!("conv in_ch {in_ch} != {ch}")));
                }
                if kernel % 2 == 0 || stride == 0 {
                    return Err(Error::Network("kernel must be odd, stride >= 1".into()));
                }
                ch = out_ch;
                let o = |d: usize| (d - 1) / stride + 1;
                dims = (o(dims.0), o(dims.1), o(dims.2));
            }
            LayerSpec::BatchNorm { ch: c, eps, .. } => {
                if c != ch || eps <= 0.0 {
                    return Err(Error::Network("batchnorm channel/eps mismatch".into()));
                }
            }
            LayerSpec::ReLU => {}
            LayerSpec::ResBlock { in_ch, out_ch, stride } => {
                if !spatial || in_ch != ch || stride == 0 {
                    return Err(Error::Network("resblock channel chain".into()));
                }
                ch = out_ch;
                let o = |d: usize| (d - 1) / stride + 1;
                dims = (o(dims.0), o(dims.1), o(dims.2));
            }
            LayerSpec::GlobalAvgPool => {
                spatial = false;
                dims = (1, 1, 1);
            }
            LayerSpec::Dense { in_dim, out_dim, .. } => {
                let flat = ch * dims.0 * dims.1 * dims.2;
                if in_dim != flat {
                    return Err(Error::Network(format!("dense in_dim {in_dim} != {flat}")));
                }
                ch = out_dim;
            }
        }
        if dims.0 < 1 || dims.1 < 1 || dims.2 < 1 {
            return Err(Error::Network("spatial dims collapsed below 1".into()));
        }
    }
    Ok(())
}

// --- Parameter flattening ------------------------------------------------------

macro_rules! for_each_param_vec {
    ($layers:expr, $f:expr) => {{
        fn walk<'a>(layers: impl Iterator<Item = &'a Layer>, f: &mut impl FnMut(&Vec<f64>)) {
            for l in layers {
                match l {
                    Layer::Conv(c) => {
                        f(&c.weights);
                        if let Some(b) = &c.bias {
                            f(b);
                        }
                    }
                    Layer::BatchNorm(bn) => {
                        f(&bn.gamma);
                        f(&bn.beta);
                    }
                    Layer::Dense(d) => {
                        f(&d.weights);
                        if let Some(b) = &d.bias {
                            f(b);
                        }
                    }
                    Layer::Res(r) => {
                        walk(r.path.iter(), f);
                        if let Some(p) = &r.proj {
                            f(&p.weights);
                            if let Some(b) = &p.bias {
                                f(b);
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        let mut fun = $f;
        walk($layers.iter(), &mut fun);
    }};
}

macro_rules! for_each_param_vec_mut {
    ($layers:expr, $f:expr) => {{
        fn walk<'a>(layers: impl Iterator<Item = &'a mut Layer>, f: &mut impl FnMut(&mut Vec<f64>)) {
            for l in layers {
                match l {
                    Layer::Conv(c) => {
                        f(&mut c.weights);
                        if let Some(b) = &mut c.bias {
                            f(b);
                        }
                    }
                    Layer::BatchNorm(bn) => {
                        f(&mut bn.gamma);
                        f(&mut bn.beta);
                    }
                    Layer::Dense(d) => {
                        f(&mut d.weights);
                        if let Some(b) = &mut d.bias {
                            f(b);
                        }
                    }
                    Layer::Res(r) => {
                        walk(r.path.iter_mut(), f);
                        if let Some(p) = &mut r.proj {
                            f(&mut p.weights);
                            if let Some(b) = &mut p.bias {
                                f(b);
                            }
                        }
                    }
                    _ => {}
                }
            }
        }
        let mut fun = $f;
        walk($layers.iter_mut(), &mut fun);
    }};
}

impl Network {
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for_each_param_vec!(self.layers, |v: &Vec<f64>| out.extend_from_slice(v));
        out
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) {
        let mut off = 0usize;
        for_each_param_vec_mut!(self.layers, |v: &mut Vec<f64>| {
            let n = v.len();
            v.copy_from_slice(&flat[off..off + n]);
            off += n;
        });
        assert_eq!(off, flat.len());
    }

    /// Full mutable state including batch-norm running statistics.
    pub fn state_flat(&self) -> Vec<f64> {
        let mut out = self.params_flat();
        fn walk(layers: &[Layer], out: &mut Vec<f64>) {
            for l in layers {
                match l {
                    Layer::BatchNorm(bn) => {
                        out.extend_from_slice(&bn.running_mean);
                        out.extend_from_slice(&bn.running_var);
                    }
                    Layer::Res(r) => walk(&r.path, out),
                    _ => {}
                }
            }
        }
        walk(&self.layers, &mut out);
        out
    }

    pub fn set_state_flat(&mut self, flat: &[f64]) {
        let np = self.params_flat().len();
        self.set_params_flat(&flat[..np]);
        let mut off = np;
        fn walk(layers: &mut [Layer], flat: &[f64], off: &mut usize) {
            for l in layers {
                match l {
                    Layer::BatchNorm(bn) => {
                        let c = bn.ch;
                        bn.running_mean.copy_from_slice(&flat[*off..*off + c]);
                        *off += c;
                        bn.running_var.copy_from_slice(&flat[*off..*off + c]);
                        *off += c;
                    }
                    Layer::Res(r) => walk(&mut r.path, flat, off),
                    _ => {}
                }
            }
        }
        walk(&mut self.layers, flat, &mut off);
        assert_eq!(off, flat.len());
    }
}

// --- Forward -------------------------------------------------------------------

/// Valid output range along one axis for a kernel offset: all `o` with
/// `0 <= o*stride + d - pad < n`, clamped to `0..od`.
#[inline]
fn axis_range(n: usize, od: usize, stride: usize, d: usize, pad: i64) -> (usize, usize) {
    let s = stride as i64;
    let off = d as i64 - pad;
    // o >= ceil((-off)/s), o <= floor((n-1-off)/s)
    let lo = (-off).div_euclid(s) + if (-off).rem_euclid(s) > 0 { 1 } else { 0 };
    let hi = (n as i64 - 1 - off).div_euclid(s);
    let lo = lo.max(0) as usize;
    let hi = hi.min(od as i64 - 1);
    if hi < lo as i64 {
        (0, 0)
    } else {
        (lo, hi as usize + 1)
    }
}

pub(crate) fn conv_forward(c: &Conv, x: &Tensor) -> Tensor {
    let (nx, ny, nz) = x.dims;
    let (kx, ky, kz) = c.kdims(x.dims);
    let (px, py, pz) = ((kx / 2) as i64, (ky / 2) as i64, (kz / 2) as i64);
    let od = c.out_dims(x.dims);
    let mut out = Tensor::zeros(c.out_ch, od);
    let onv = od.0 * od.1 * od.2;
    let inv = x.nvox();
    let s = c.stride;
    for oc in 0..c.out_ch {
        let ochan = &mut out.data[oc * onv..(oc + 1) * onv];
        if let Some(bb) = &c.bias {
            ochan.fill(bb[oc]);
        }
        for ic in 0..c.in_ch {
            let xc = &x.data[ic * inv..(ic + 1) * inv];
            for dz in 0..kz {
                let (ozlo, ozhi) = axis_range(nz, od.2, s, dz, pz);
                for dy in 0..ky {
                    let (oylo, oyhi) = axis_range(ny, od.1, s, dy, py);
                    for dx in 0..kx {
                        let (oxlo, oxhi) = axis_range(nx, od.0, s, dx, px);
                        if oxhi <= oxlo {
                            continue;
                        }
                        let w = c.weights[c.widx(oc, ic, dx, dy, dz)];
                        for oz in ozlo..ozhi {
                            let iz = oz * s + dz - pz as usize;
                            for oy in oylo..oyhi {
                                let iy = oy * s + dy - py as usize;
                                let orow = oxlo + od.0 * (oy + od.1 * oz);
                                let ibase = nx * (iy + ny * iz);
                                let ixlo = oxlo * s + dx - px as usize;
                                if s == 1 {
                                    let n = oxhi - oxlo;
                                    let orow = &mut ochan[orow..orow + n];
                                    let xrow = &xc[ibase + ixlo..ibase + ixlo + n];
                                    for (o, xv) in orow.iter_mut().zip(xrow) {
                                        *o += w * xv;
                                    }
                                } else {
                                    for (j, o) in
                                        ochan[orow..orow + (oxhi - oxlo)].iter_mut().enumerate()
                                    {
                                        *o += w * xc[ibase + ixlo + j * s];
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

/// dx, and accumulation into dw/db, given dy. `dw` has `weight_len` slots,
/// `db` has `out_ch`.
fn conv_backward(
    c: &Conv,
    x: &Tensor,
    dy: &Tensor,
    dw: &mut [f64],
    db: Option<&mut [f64]>,
) -> Tensor {
    let (nx, ny, nz) = x.dims;
    let (kx, ky, kz) = c.kdims(x.dims);
    let (px, py, pz) = ((kx / 2) as i64, (ky / 2) as i64, (kz / 2) as i64);
    let od = dy.dims;
    let onv = dy.nvox();
    let inv = x.nvox();
    let mut dx = Tensor::zeros(c.in_ch, x.dims);
    if let Some(db) = db {
        for oc in 0..c.out_ch {
            db[oc] += dy.data[oc * onv..(oc + 1) * onv].iter().sum::<f64>();
        }
    }
    let s = c.stride;
    for oc in 0..c.out_ch {
        let dyc = &dy.data[oc * onv..(oc + 1) * onv];
        for ic in 0..c.in_ch {
            let (xc, dxc) = (
                &x.data[ic * inv..(ic + 1) * inv],
                &mut dx.data[ic * inv..(ic + 1) * inv],
            );
            for dz in 0..kz {
                let (ozlo, ozhi) = axis_range(nz, od.2, s, dz, pz);
                for dyk in 0..ky {
                    let (oylo, oyhi) = axis_range(ny, od.1, s, dyk, py);
                    for dxk in 0..kx {
                        let (oxlo, oxhi) = axis_range(nx, od.0, s, dxk, px);
                        if oxhi <= oxlo {
                            continue;
                        }
                        let wi = c.widx(oc, ic, dxk, dyk, dz);
                        let w = c.weights[wi];
                        let mut wgrad = 0.0;
                        for oz in ozlo..ozhi {
                            let iz = oz * s + dz - pz as usize;
                            for oy in oylo..oyhi {
                                let iy = oy * s + dyk - py as usize;
                                let orow = oxlo + od.0 * (oy + od.1 * oz);
                                let ixlo = oxlo * s + dxk - px as usize;
                                let ibase = nx * (iy + ny * iz) + ixlo;
                                let n = oxhi - oxlo;
                                if s == 1 {
                                    let grow = &dyc[orow..orow + n];
                                    let xrow = &xc[ibase..ibase + n];
                                    let drow = &mut dxc[ibase..ibase + n];
                                    for ((g, xv), dv) in grow.iter().zip(xrow).zip(drow) {
                                        wgrad += g * xv;
                                        *dv += w * g;
                                    }
                                } else {
                                    for (j, g) in dyc[orow..orow + n].iter().enumerate() {
                                        wgrad += g * xc[ibase + j * s];
                                        dxc[ibase + j * s] += w * g;
                                    }
                                }
                            }
                        }
                        dw[wi] += wgrad;
                    }
                }
            }
        }
    }
    dx
}

/// Transposed convolution: routes `dy` back through the connectivity of
/// `c` (the input-gradient of `conv_forward`), leaving parameters alone.
pub fn conv_transpose(c: &Conv, dy: &Tensor, in_dims: Dims) -> Tensor {
    let (nx, ny, nz) = in_dims;
    let (kx, ky, kz) = c.kdims(in_dims);
    let (px, py, pz) = ((kx / 2) as i64, (ky / 2) as i64, (kz / 2) as i64);
    let od = dy.dims;
    let onv = dy.nvox();
    let inv = nx * ny * nz;
    let mut dx = Tensor::zeros(c.in_ch, in_dims);
    for oc in 0..c.out_ch {
        let dyc = &dy.data[oc * onv..(oc + 1) * onv];
        for oz in 0..od.2 {
            for oy in 0..od.1 {
                for ox in 0..od.0 {
                    let g = dyc[ox + od.0 * (oy + od.1 * oz)];
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..c.in_ch {
                        for dz in 0..kz {
                            let iz = (oz * c.stride) as i64 + dz as i64 - pz;
                            if iz < 0 || iz >= nz as i64 {
                                continue;
                            }
                            for dyk in 0..ky {
                                let iy = (oy * c.stride) as i64 + dyk as i64 - py;
                                if iy < 0 || iy >= ny as i64 {
                                    continue;
                                }
                                for dxk in 0..kx {
                                    let ix = (ox * c.stride) as i64 + dxk as i64 - px;
                                    if ix < 0 || ix >= nx as i64 {
                                        continue;
                                    }
                                    let ii = ix as usize + nx * (iy as usize + ny * iz as usize);
                                    dx.data[ic * inv + ii] +=
                                        g * c.weights[c.widx(oc, ic, dxk, dyk, dz)];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

pub enum CacheEntry {
    Conv { x: Vec<Tensor> },
    Bn { xhat: Vec<Tensor>, inv_std: Vec<f64>, training: bool },
    ReLU { x: Vec<Tensor> },
    Res {
        path: Vec<CacheEntry>,
        path_out: Vec<Tensor>,
        skip_in: Vec<Tensor>,
        skip_out: Vec<Tensor>,
        pre_relu: Vec<Tensor>,
        out: Vec<Tensor>,
    },
    Gap { x: Vec<Tensor> },
    Dense { x: Vec<Tensor> },
}

/// Per-layer activations retained from a forward pass.
pub struct ActivationCache {
    pub entries: Vec<CacheEntry>,
    pub outputs: Vec<f64>,
}

impl ActivationCache {
    /// Output tensors of the named residual-block tap.
    pub fn tap_output<'a>(&'a self, net: &Network, tap: &str) -> Option<&'a [Tensor]> {
        for (l, e) in net.layers.iter().zip(&self.entries) {
            if let (Layer::Res(r), CacheEntry::Res { out, .. }) = (l, e) {
                if r.tap == tap {
                    return Some(out);
                }
            }
        }
        None
    }
}

fn bn_forward(
    bn: &mut BatchNorm,
    xs: &[Tensor],
    training: bool,
) -> (Vec<Tensor>, CacheEntry) {
    let n = xs.len();
    let nvox = xs[0].nvox();
    let count = (n * nvox) as f64;
    let mut mean = vec![0.0; bn.ch];
    let mut var = vec![0.0; bn.ch];
    if training {
        for c in 0..bn.ch {
            let mut s = 0.0;
            for x in xs {
                s += x.channel(c).iter().sum::<f64>();
            }
            mean[c] = s / count;
            let mut v = 0.0;
            for x in xs {
                v += x.channel(c).iter().map(|&a| (a - mean[c]).powi(2)).sum::<f64>();
            }
            var[c] = v / count; // biased, used for normalization
        }
        for c in 0..bn.ch {
            bn.running_mean[c] = (1.0 - bn.momentum) * bn.running_mean[c] + bn.momentum * mean[c];
            bn.running_var[c] = (1.0 - bn.momentum) * bn.running_var[c] + bn.momentum * var[c];
        }
    } else {
        mean.copy_from_slice(&bn.running_mean);
        var.copy_from_slice(&bn.running_var);
    }
    let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = Vec::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    for x in xs {
        let mut xh = Tensor::zeros(bn.ch, x.dims);
        let mut o = Tensor::zeros(bn.ch, x.dims);
        for c in 0..bn.ch {
            for i in 0..nvox {
                let h = (x.data[c * nvox + i] - mean[c]) * inv_std[c];
                xh.data[c * nvox + i] = h;
                o.data[c * nvox + i] = bn.gamma[c] * h + bn.beta[c];
            }
        }
        xhat.push(xh);
        out.push(o);
    }
    let cache = CacheEntry::Bn { xhat, inv_std, training };
    (out, cache)
}

fn bn_backward(
    bn: &BatchNorm,
    cache_xhat: &[Tensor],
    inv_std: &[f64],
    training: bool,
    dys: &[Tensor],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<Tensor> {
    let n = dys.len();
    let nvox = dys[0].nvox();
    let count = (n * nvox) as f64;
    let mut dxs: Vec<Tensor> = dys.iter().map(|d| Tensor::zeros(bn.ch, d.dims)).collect();
    for c in 0..bn.ch {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for (dy, xh) in dys.iter().zip(cache_xhat) {
            for i in 0..nvox {
                let d = dy.data[c * nvox + i];
                sum_dy += d;
                sum_dy_xhat += d * xh.data[c * nvox + i];
            }
        }
        dgamma[c] += sum_dy_xhat;
        dbeta[c] += sum_dy;
        let scale = bn.gamma[c] * inv_std[c];
        if training {
            let mdy = sum_dy / count;
            let mdyx = sum_dy_xhat / count;
            for ((dy, xh), dx) in dys.iter().zip(cache_xhat).zip(&mut dxs) {
                for i in 0..nvox {
                    let d = dy.data[c * nvox + i];
                    let h = xh.data[c * nvox + i];
                    dx.data[c * nvox + i] = scale * (d - mdy - h * mdyx);
                }
            }
        } else {
            for (dy, dx) in dys.iter().zip(&mut dxs) {
                for i in 0..nvox {
                    dx.data[c * nvox + i] = scale * dy.data[c * nvox + i];
                }
            }
        }
    }
    dxs
}

/// ReLU backward gating mode: standard or guided (also gates on the
/// incoming gradient sign).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReluBackward {
    Standard,
    Guided,
}

fn relu_backward_gate(mode: ReluBackward, x: f64, g: f64) -> f64 {
    match mode {
        ReluBackward::Standard => {
            if x > 0.0 {
                g
            } else {
                0.0
            }
        }
        ReluBackward::Guided => {
            if x > 0.0 && g > 0.0 {
                g
            } else {
                0.0
            }
        }
    }
}

fn forward_layers(
    layers: &mut [Layer],
    mut xs: Vec<Tensor>,
    training: bool,
    entries: &mut Vec<CacheEntry>,
) -> Vec<Tensor> {
    for layer in layers {
        match layer {
            Layer::Conv(c) => {
                let out: Vec<Tensor> = xs.par_iter().map(|x| conv_forward(c, x)).collect();
                entries.push(CacheEntry::Conv { x: xs });
                xs = out;
            }
            Layer::BatchNorm(bn) => {
                let (out, cache) = bn_forward(bn, &xs, training);
                entries.push(cache);
                xs = out;
            }
            Layer::ReLU => {
                let out: Vec<Tensor> = xs
                    .iter()
                    .map(|x| Tensor {
                        ch: x.ch,
                        dims: x.dims,
                        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
                    })
                    .collect();
                entries.push(CacheEntry::ReLU { x: xs });
                xs = out;
            }
            Layer::Res(r) => {
                let mut path_entries = Vec::new();
                let path_out = forward_layers(&mut r.path, xs.clone(), training, &mut path_entries);
                let skip_out: Vec<Tensor> = match &r.proj {
                    Some(p) => xs.par_iter().map(|x| conv_forward(p, x)).collect(),
                    None => xs.clone(),
                };
                let pre_relu: Vec<Tensor> = path_out
                    .iter()
                    .zip(&skip_out)
                    .map(|(a, b)| Tensor {
                        ch: a.ch,
                        dims: a.dims,
                        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                    })
                    .collect();
                let out: Vec<Tensor> = pre_relu
                    .iter()
                    .map(|t| Tensor {
                        ch: t.ch,
                        dims: t.dims,
                        data: t.data.iter().map(|&v| v.max(0.0)).collect(),
                    })
                    .collect();
                entries.push(CacheEntry::Res {
                    path: path_entries,
                    path_out,
                    skip_in: xs,
                    skip_out,
                    pre_relu,
                    out: out.clone(),
                });
                xs = out;
            }
            Layer::Gap => {
                let out: Vec<Tensor> = xs
                    .iter()
                    .map(|x| {
                        let nvox = x.nvox() as f64;
                        let mut o = Tensor::zeros(x.ch, (1, 1, 1));
                        for c in 0..x.ch {
                            o.data[c] = x.channel(c).iter().sum::<f64>() / nvox;
                        }
                        o
                    })
                    .collect();
                entries.push(CacheEntry::Gap { x: xs });
                xs = out;
            }
            Layer::Dense(d) => {
                let out: Vec<Tensor> = xs
                    .iter()
                    .map(|x| {
                        let mut o = Tensor::zeros(d.out_dim, (1, 1, 1));
                        for oi in 0..d.out_dim {
                            let mut acc = d.bias.as_ref().map_or(0.0, |b| b[oi]);
                            for ii in 0..d.in_dim {
                                acc += d.weights[oi * d.in_dim + ii] * x.data[ii];
                            }
                            o.data[oi] = acc;
                        }
                        o
                    })
                    .collect();
                entries.push(CacheEntry::Dense { x: xs });
                xs = out;
            }
        }
    }
    xs
}

impl Network {
    /// Forward pass over a batch. Training mode uses batch statistics for
    /// batch norm (and updates running stats); eval mode uses running
    /// stats. Returns the scalar output per sample and the cache.
    pub fn forward(&mut self, batch: &[Volume]) -> Result<(Vec<f64>, ActivationCache)> {
        let xs: Vec<Tensor> = batch.iter().map(Tensor::from_volume).collect();
        self.forward_tensors(xs)
    }

    pub fn forward_tensors(&mut self, xs: Vec<Tensor>) -> Result<(Vec<f64>, ActivationCache)> {
        if xs.is_empty() {
            return Err(Error::Network("empty batch".into()));
        }
        if xs[0].dims != self.spec.input_dims || xs[0].ch != self.spec.in_ch {
            return Err(Error::Network(format!(
                "input dims {:?} ch {} do not match the stem",
                xs[0].dims, xs[0].ch
            )));
        }
        let training = !self.eval_mode;
        let mut entries = Vec::new();
        let out = forward_layers(&mut self.layers, xs, training, &mut entries);
        let outputs: Vec<f64> = out.iter().map(|t| t.data[0]).collect();
        Ok(ActivationCache { entries, outputs }).map(|c| (c.outputs.clone(), c))
    }

    /// Eval-mode forward returning just the scalar outputs.
    pub fn predict(&self, batch: &[Volume]) -> Result<Vec<f64>> {
        let mut net = self.clone();
        net.set_eval(true);
        Ok(net.forward(batch)?.0)
    }
}

/// Gradients of the scalar output w.r.t. parameters (flat, `params_flat`
/// order) and the batch inputs; also the gradient arriving at each
/// residual tap output.
pub struct Gradients {
    pub params: Vec<f64>,
    pub inputs: Vec<Tensor>,
    pub taps: Vec<(String, Vec<Tensor>)>,
}

struct BackwardCtx {
    relu_mode: ReluBackward,
    taps: Vec<(String, Vec<Tensor>)>,
}

fn backward_layers(
    layers: &[Layer],
    entries: &[CacheEntry],
    mut dys: Vec<Tensor>,
    grads: &mut [f64],
    offsets: &mut Vec<(usize, usize)>,
    ctx: &mut BackwardCtx,
) -> Vec<Tensor> {
    // offsets: parameter ranges in forward order for this slice of layers;
    // computed by the caller via param_ranges.
    debug_assert_eq!(layers.len(), entries.len());
    for (layer, entry) in layers.iter().zip(entries).rev() {
        match (layer, entry) {
            (Layer::Conv(c), CacheEntry::Conv { x }) => {
                let (w_range, b_range) = pop_conv_ranges(offsets, c);
                let per: Vec<(Tensor, Vec<f64>, Vec<f64>)> = x
                    .par_iter()
                    .zip(dys.par_iter())
                    .map(|(xi, dyi)| {
                        let mut dw = vec![0.0; c.weight_len()];
                        let mut db = vec![0.0; c.bias.as_ref().map_or(0, |b| b.len())];
                        let dx = conv_backward(
                            c,
                            xi,
                            dyi,
                            &mut dw,
                            if c.bias.is_some() { Some(&mut db) } else { None },
                        );
                        (dx, dw, db)
                    })
                    .collect();
                let mut dxs = Vec::with_capacity(per.len());
                for (dx, dw, db) in per {
                    for (g, v) in grads[w_range.0..w_range.1].iter_mut().zip(&dw) {
                        *g += v;
                    }
                    if let Some((b0, b1)) = b_range {
                        for (g, v) in grads[b0..b1].iter_mut().zip(&db) {
                            *g += v;
                        }
                    }
                    dxs.push(dx);
                }
                dys = dxs;
            }
            (Layer::BatchNorm(bn), CacheEntry::Bn { xhat, inv_std, training }) => {
                let (g_range, b_range) = pop_bn_ranges(offsets);
                let mut dgamma = vec![0.0; bn.ch];
                let mut dbeta = vec![0.0; bn.ch];
                dys = bn_backward(bn, xhat, inv_std, *training, &dys, &mut dgamma, &mut dbeta);
                for (g, v) in grads[g_range.0..g_range.1].iter_mut().zip(&dgamma) {
                    *g += v;
                }
                for (g, v) in grads[b_range.0..b_range.1].iter_mut().zip(&dbeta) {
                    *g += v;
                }
            }
            (Layer::ReLU, CacheEntry::ReLU { x }) => {
                for (dy, xi) in dys.iter_mut().zip(x) {
                    for (d, &v) in dy.data.iter_mut().zip(&xi.data) {
                        *d = relu_backward_gate(ctx.relu_mode, v, *d);
                    }
                }
            }
            (Layer::Res(r), CacheEntry::Res { path, pre_relu, skip_in, .. }) => {
                // Record the gradient at the block output (tap).
                ctx.taps.push((r.tap.clone(), dys.clone()));
                // Final ReLU of the block.
                for (dy, pre) in dys.iter_mut().zip(pre_relu) {
                    for (d, &v) in dy.data.iter_mut().zip(&pre.data) {
                        *d = relu_backward_gate(ctx.relu_mode, v, *d);
                    }
                }
                // Ranges were pushed path-first, projection last; consume
                // the projection ranges before recursing into the path.
                let dx_skip: Vec<Tensor> = match &r.proj {
                    Some(p) => {
                        let (w_range, b_range) = pop_conv_ranges(offsets, p);
                        let per: Vec<(Tensor, Vec<f64>, Vec<f64>)> = skip_in
                            .par_iter()
                            .zip(dys.par_iter())
                            .map(|(xi, dyi)| {
                                let mut dw = vec![0.0; p.weight_len()];
                                let mut db =
                                    vec![0.0; p.bias.as_ref().map_or(0, |b| b.len())];
                                let dx = conv_backward(
                                    p,
                                    xi,
                                    dyi,
                                    &mut dw,
                                    if p.bias.is_some() { Some(&mut db) } else { None },
                                );
                                (dx, dw, db)
                            })
                            .collect();
                        let mut dxs = Vec::with_capacity(per.len());
                        for (dx, dw, db) in per {
                            for (g, v) in grads[w_range.0..w_range.1].iter_mut().zip(&dw) {
                                *g += v;
                            }
                            if let Some((b0, b1)) = b_range {
                                for (g, v) in grads[b0..b1].iter_mut().zip(&db) {
                                    *g += v;
                                }
                            }
                            dxs.push(dx);
                        }
                        dxs
                    }
                    None => dys.clone(),
                };
                let dx_path = backward_layers(&r.path, path, dys.clone(), grads, offsets, ctx);
                dys = dx_path
                    .into_iter()
                    .zip(dx_skip)
                    .map(|(a, b)| Tensor {
                        ch: a.ch,
                        dims: a.dims,
                        data: a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
                    })
                    .collect();
            }
            (Layer::Gap, CacheEntry::Gap { x }) => {
                dys = dys
                    .iter()
                    .zip(x)
                    .map(|(dy, xi)| {
                        let nvox = xi.nvox();
                        let mut dx = Tensor::zeros(xi.ch, xi.dims);
                        for c in 0..xi.ch {
                            let g = dy.data[c] / nvox as f64;
                            for i in 0..nvox {
                                dx.data[c * nvox + i] = g;
                            }
                        }
                        dx
                    })
                    .collect();
            }
            (Layer::Dense(d), CacheEntry::Dense { x }) => {
                let (w_range, b_range) = pop_dense_ranges(offsets, d);
                let mut dxs = Vec::with_capacity(dys.len());
                for (dy, xi) in dys.iter().zip(x) {
                    let mut dx = Tensor::zeros(xi.ch, xi.dims);
                    for oi in 0..d.out_dim {
                        let g = dy.data[oi];
                        if let Some((b0, _)) = b_range {
                            grads[b0 + oi] += g;
                        }
                        for ii in 0..d.in_dim {
                            grads[w_range.0 + oi * d.in_dim + ii] += g * xi.data[ii];
                            dx.data[ii] += g * d.weights[oi * d.in_dim + ii];
                        }
                    }
                    dxs.push(dx);
                }
                dys = dxs;
            }
            _ => unreachable!("cache entry does not match layer"),
        }
    }
    dys
}

type Range = (usize, usize);

fn pop_conv_ranges(offsets: &mut Vec<Range>, c: &Conv) -> (Range, Option<Range>) {
    // Ranges were pushed in forward order; pop from the back.
    let b = if c.bias.is_some() { Some(offsets.pop().unwrap()) } else { None };
    let w = offsets.pop().unwrap();
    (w, b)
}

fn pop_bn_ranges(offsets: &mut Vec<Range>) -> (Range, Range) {
    let beta = offsets.pop().unwrap();
    let gamma = offsets.pop().unwrap();
    (gamma, beta)
}

fn pop_dense_ranges(offsets: &mut Vec<Range>, d: &Dense) -> (Range, Option<Range>) {
    let b = if d.bias.is_some() { Some(offsets.pop().unwrap()) } else { None };
    let w = offsets.pop().unwrap();
    (w, b)
}

fn param_ranges(layers: &[Layer]) -> Vec<Range> {
    let mut out = Vec::new();
    let mut off = 0usize;
    for_each_param_vec!(layers, |v: &Vec<f64>| {
        out.push((off, off + v.len()));
        off += v.len();
    });
    out
}

impl Network {
    /// Exact reverse-mode gradients of the weighted sum of outputs
    /// (`d_output` per sample) w.r.t. all parameters and the inputs.
    pub fn backward(&self, cache: &ActivationCache, d_output: &[f64]) -> Result<Gradients> {
        self.backward_with_mode(cache, d_output, ReluBackward::Standard)
    }

    pub fn backward_with_mode(
        &self,
        cache: &ActivationCache,
        d_output: &[f64],
        relu_mode: ReluBackward,
    ) -> Result<Gradients> {
        if cache.entries.len() != self.layers.len() {
            return Err(Error::Network("cache does not match network".into()));
        }
        if d_output.len() != cache.outputs.len() {
            return Err(Error::Network("d_output length mismatch".into()));
        }
        let dys: Vec<Tensor> = d_output
            .iter()
            .map(|&g| Tensor { ch: 1, dims: (1, 1, 1), data: vec![g] })
            .collect();
        self.backward_seeded(cache, dys, relu_mode)
    }

    /// Backward pass seeded with an arbitrary gradient tensor at the
    /// network output (e.g. one-hot at a chosen output index).
    pub fn backward_seeded(
        &self,
        cache: &ActivationCache,
        dys: Vec<Tensor>,
        relu_mode: ReluBackward,
    ) -> Result<Gradients> {
        if cache.entries.len() != self.layers.len() {
            return Err(Error::Network("cache does not match network".into()));
        }
        let n_params = self.params_flat().len();
        let mut grads = vec![0.0; n_params];
        let mut offsets = param_ranges(&self.layers);
        let mut ctx = BackwardCtx { relu_mode, taps: Vec::new() };
        let inputs = backward_layers(
            &self.layers,
            &cache.entries,
            dys,
            &mut grads,
            &mut offsets,
            &mut ctx,
        );
        debug_assert!(offsets.is_empty());
        Ok(Gradients { params: grads, inputs, taps: ctx.taps })
    }
}

// --- Batch-norm folding ---------------------------------------------------------

fn fold_pair(conv: &Conv, bn: &BatchNorm) -> Conv {
    let mut out = conv.clone();
    let ksz = conv.in_ch * conv.kernel.pow(3);
    let mut bias = conv.bias.clone().unwrap_or_else(|| vec![0.0; conv.out_ch]);
    for oc in 0..conv.out_ch {
        let s = bn.gamma[oc] / (bn.running_var[oc] + bn.eps).sqrt();
        for k in 0..ksz {
            out.weights[oc * ksz + k] *= s;
        }
        bias[oc] = (bias[oc] - bn.running_mean[oc]) * s + bn.beta[oc];
    }
    out.bias = Some(bias);
    out
}

fn fold_layer_list(layers: &[Layer]) -> Result<Vec<Layer>> {
    let mut out: Vec<Layer> = Vec::with_capacity(layers.len());
    for l in layers {
        match l {
            Layer::BatchNorm(bn) => match out.pop() {
                Some(Layer::Conv(c)) => out.push(Layer::Conv(fold_pair(&c, bn))),
                _ => return Err(Error::Network("batch norm without preceding conv".into())),
            },
            Layer::Res(r) => {
                let path = fold_layer_list(&r.path)?;
                out.push(Layer::Res(ResBlock { path, proj: r.proj.clone(), tap: r.tap.clone() }));
            }
            other => out.push(other.clone()),
        }
    }
    Ok(out)
}

/// Replace every Conv+BatchNorm pair with a single equivalent Conv using
/// the frozen running statistics. The returned network contains no batch
/// norm layers and produces identical eval-mode outputs.
pub fn fold_batchnorm(net: &Network) -> Result<Network> {
    let layers = fold_layer_list(&net.layers)?;
    // Rebuild the spec without the folded batch-norm entries.
    let mut spec_layers = Vec::new();
    for ls in &net.spec.layers {
        match ls {
            LayerSpec::BatchNorm { .. } => {}
            LayerSpec::Conv { in_ch, out_ch, kernel, stride, .. } => spec_layers.push(
                LayerSpec::Conv { in_ch: *in_ch, out_ch: *out_ch, kernel: *kernel, stride: *stride, bias: true },
            ),
            other => spec_layers.push(other.clone()),
        }
    }
    Ok(Network {
        spec: NetworkSpec {
            input_dims: net.spec.input_dims,
            in_ch: net.spec.in_ch,
            layers: spec_layers,
        },
        layers,
        eval_mode: true,
    })
}

// --- Training --------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Loss {
    Mse,
    Bce,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub warmup_frac: f64,
    pub final_lr_ratio: f64,
    pub loss: Loss,
    pub seed: u64,
    pub split: (f64, f64, f64),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 600,
            batch_size: 8,
            max_lr: 3e-3,
            warmup_frac: 0.3,
            final_lr_ratio: 0.01,
            loss: Loss::Mse,
            seed: 0,
            split: (0.7, 0.15, 0.15),
        }
    }
}

/// One-cycle learning rate: linear warmup from max_lr/25 to max_lr over
/// the warmup fraction, then cosine decay to max_lr * final_ratio.
pub fn one_cycle_lr(step: usize, steps: usize, max_lr: f64, warmup_frac: f64, final_ratio: f64) -> f64 {
    let warm = ((steps as f64 * warmup_frac).round() as usize).max(1);
    if step < warm {
        let t = step as f64 / warm as f64;
        max_lr / 25.0 + (max_lr - max_lr / 25.0) * t
    } else if steps <= warm {
        max_lr
    } else {
        let t = (step - warm) as f64 / (steps - warm) as f64;
        let floor = max_lr * final_ratio;
        floor + (max_lr - floor) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[derive(Debug, Clone)]
pub struct HistoryRow {
    pub step: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_metric: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<HistoryRow>,
    /// Mean/sd used to z-score regression targets (train split).
    pub target_mean: f64,
    pub target_sd: f64,
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub test_idx: Vec<usize>,
}

/// Deterministic split of `n` indices by the config fractions.
pub fn split_indices(n: usize, split: (f64, f64, f64), seed: u64) -> (Vec<usize>, Vec<usize>, Vec<usize>) {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5f5f_5f5f);
    idx.shuffle(&mut rng);
    let n_train = (n as f64 * split.0).round() as usize;
    let n_val = (n as f64 * split.1).round() as usize;
    let train = idx[..n_train.min(n)].to_vec();
    let val = idx[n_train.min(n)..(n_train + n_val).min(n)].to_vec();
    let test = idx[(n_train + n_val).min(n)..].to_vec();
    (train, val, test)
}

/// Coefficient of determination.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> f64 {
    let n = truth.len() as f64;
    let my = truth.iter().sum::<f64>() / n;
    let sse: f64 = pred.iter().zip(truth).map(|(p, y)| (p - y).powi(2)).sum();
    let sst: f64 = truth.iter().map(|y| (y - my).powi(2)).sum();
    if sst <= 0.0 {
        if sse <= 0.0 {
            return 1.0;
        }
        return f64::NEG_INFINITY;
    }
    1.0 - sse / sst
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - B1.powi(self.t as i32);
        let bc2 = 1.0 - B2.powi(self.t as i32);
        for i in 0..params.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grads[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grads[i] * grads[i];
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * mh / (vh.sqrt() + EPS);
        }
    }
}

/// Train with Adam and a one-cycle schedule. Regression targets are
/// z-scored with training-split statistics; the returned network is in
/// eval mode. NaN loss aborts with a diagnostic.
pub fn train(
    net: &mut Network,
    volumes: &[Volume],
    targets: &[f64],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if volumes.len() != targets.len() || volumes.is_empty() {
        return Err(Error::InvalidArgument("dataset size mismatch".into()));
    }
    let (train_idx, val_idx, test_idx) = split_indices(volumes.len(), cfg.split, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::InvalidArgument("empty training split".into()));
    }
    let (target_mean, target_sd) = match cfg.loss {
        Loss::Mse => {
            let ys: Vec<f64> = train_idx.iter().map(|&i| targets[i]).collect();
            let m = ys.iter().sum::<f64>() / ys.len() as f64;
            let sd = (ys.iter().map(|y| (y - m).powi(2)).sum::<f64>()
                / (ys.len() as f64 - 1.0).max(1.0))
            .sqrt();
            (m, if sd > 0.0 { sd } else { 1.0 })
        }
        Loss::Bce => (0.0, 1.0),
    };
    let z = |y: f64| (y - target_mean) / target_sd;

    let mut adam = Adam::new(net.params_flat().len());
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    net.set_eval(false);
    let eval_every = (cfg.steps / 10).max(1);
    for step in 0..cfg.steps {
        let lr = one_cycle_lr(step, cfg.steps, cfg.max_lr, cfg.warmup_frac, cfg.final_lr_ratio);
        let batch: Vec<usize> = (0..cfg.batch_size)
            .map(|_| train_idx[rng.gen_range(0..train_idx.len())])
            .collect();
        let xs: Vec<Volume> = batch.iter().map(|&i| volumes[i].clone()).collect();
        let ys: Vec<f64> = batch.iter().map(|&i| z(targets[i])).collect();
        let (outputs, cache) = net.forward(&xs)?;
        let nb = outputs.len() as f64;
        let (loss, d_out): (f64, Vec<f64>) = match cfg.loss {
            Loss::Mse => {
                let l = outputs.iter().zip(&ys).map(|(p, y)| (p - y).powi(2)).sum::<f64>() / nb;
                let d = outputs.iter().zip(&ys).map(|(p, y)| 2.0 * (p - y) / nb).collect();
                (l, d)
            }
            Loss::Bce => {
                let mut l = 0.0;
                let mut d = Vec::with_capacity(outputs.len());
                for (&zv, &y) in outputs.iter().zip(&ys) {
                    // softplus(z) - y z, numerically stable
                    let sp = if zv > 0.0 { zv + (-zv).exp().ln_1p() } else { zv.exp().ln_1p() };
                    l += (sp - y * zv) / nb;
                    d.push((sigmoid(zv) - y) / nb);
                }
                (l, d)
            }
        };
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss at step {step}")));
        }
        let grads = net.backward(&cache, &d_out)?;
        let mut params = net.params_flat();
        adam.step(&mut params, &grads.params, lr);
        net.set_params_flat(&params);

        if step % eval_every == 0 || step + 1 == cfg.steps {
            let val_metric = if val_idx.is_empty() {
                f64::NAN
            } else {
                let vs: Vec<Volume> = val_idx.iter().map(|&i| volumes[i].clone()).collect();
                let pred = net.predict(&vs)?;
                match cfg.loss {
                    Loss::Mse => {
                        let truth: Vec<f64> = val_idx.iter().map(|&i| z(targets[i])).collect();
                        r_squared(&pred, &truth)
                    }
                    Loss::Bce => {
                        let correct = pred
                            .iter()
                            .zip(val_idx.iter().map(|&i| targets[i]))
                            .filter(|(&p, y)| (sigmoid(p) > 0.5) == (*y > 0.5))
                            .count();
                        correct as f64 / val_idx.len() as f64
                    }
                }
            };
            history.push(HistoryRow { step, lr, train_loss: loss, val_metric });
        }
    }
    net.set_eval(true);
    Ok(TrainOutcome { history, target_mean, target_sd, train_idx, val_idx, test_idx })
}

/// Held-out R^2 of a trained regression network, in z-scored target units.
pub fn test_r2(
    net: &Network,
    volumes: &[Volume],
    targets: &[f64],
    outcome: &TrainOutcome,
) -> Result<f64> {
    let vols: Vec<Volume> = outcome.test_idx.iter().map(|&i| volumes[i].clone()).collect();
    let truth: Vec<f64> = outcome
        .test_idx
        .iter()
        .map(|&i| (targets[i] - outcome.target_mean) / outcome.target_sd)
        .collect();
    let pred = net.predict(&vols)?;
    Ok(r_squared(&pred, &truth))
}

// --- Checkpoints -----------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"XCKP";

pub fn save_checkpoint<P: AsRef<Path>>(path: P, net: &Network, seed: u64, step: u64) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    let spec = serde_json::to_vec(&net.spec).map_err(|e| Error::Serde(e.to_string()))?;
    f.write_all(&(spec.len() as u64).to_le_bytes())?;
    f.write_all(&spec)?;
    f.write_all(&seed.to_le_bytes())?;
    f.write_all(&step.to_le_bytes())?;
    let state = net.state_flat();
    f.write_all(&(state.len() as u64).to_le_bytes())?;
    for v in state {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint<P: AsRef<Path>>(path: P) -> Result<(Network, u64, u64)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Format("bad checkpoint magic".into()));
    }
    let mut b8 = [0u8; 8];
    f.read_exact(&mut b8)?;
    let spec_len = u64::from_le_bytes(b8) as usize;
    let mut spec_bytes = vec![0u8; spec_len];
    f.read_exact(&mut spec_bytes)?;
    let spec: NetworkSpec =
        serde_json::from_slice(&spec_bytes).map_err(|e| Error::Serde(e.to_string()))?;
    f.read_exact(&mut b8)?;
    let seed = u64::from_le_bytes(b8);
    f.read_exact(&mut b8)?;
    let step = u64::from_le_bytes(b8);
    f.read_exact(&mut b8)?;
    let n = u64::from_le_bytes(b8) as usize;
    let mut state = Vec::with_capacity(n);
    for _ in 0..n {
        f.read_exact(&mut b8)?;
        state.push(f64::from_le_bytes(b8));
    }
    let mut net = Network::init(&spec, seed)?;
    net.set_state_flat(&state);
    net.set_eval(true);
    Ok((net, seed, step))
}

/// Content hash of a network's full state, used for provenance records.
pub fn network_hash(net: &Network) -> String {
    let mut h = Sha256::new();
    h.update(net.spec.hash().as_bytes());
    for v in net.state_flat() {
        h.update(v.to_le_bytes());
    }
    format!("{:x}", h.finalize())
}
