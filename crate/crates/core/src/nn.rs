//! Encoder with split output, decoder, and pair discriminator, built from
//! strided conv blocks on the autodiff tape.
//!
//! Block layout is conv → norm → activation. The encoder uses leaky ReLU,
//! the decoder ReLU, and the discriminator leaky ReLU with no normalization
//! on its first block. Every conv uses a 4×4 kernel, stride 2, padding 1.

use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{NormKind, Tape, Var, LEAKY_SLOPE};
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;

/// Standard deviation of initial weights.
pub const INIT_STD: f64 = 0.02;

/// Running-statistic momentum: `running = m * running + (1 - m) * batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    None,
    Batch,
    #[default]
    Instance,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub image_size: usize,
    pub channels: usize,
    pub dim_v: usize,
    pub dim_c: usize,
    pub norm: NormMode,
    /// Encoder block widths; the decoder mirrors them.
    pub enc_widths: Vec<usize>,
    pub dsc_widths: Vec<usize>,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 1,
            dim_v: 16,
            dim_c: 16,
            norm: NormMode::Instance,
            enc_widths: vec![32, 64, 128],
            dsc_widths: vec![32, 64, 128],
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let op = "net_config";
        if self.dim_v == 0 || self.dim_c == 0 {
            return Err(invalid(op, "dim_v and dim_c must be >= 1"));
        }
        if self.channels == 0 || self.enc_widths.is_empty() || self.dsc_widths.is_empty() {
            return Err(invalid(op, "channels and widths must be non-empty"));
        }
        if self.enc_widths.iter().chain(&self.dsc_widths).any(|&w| w == 0) {
            return Err(invalid(op, "widths must be >= 1"));
        }
        let depth = self.enc_widths.len().max(self.dsc_widths.len());
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << depth) {
            return Err(invalid(
                op,
                format!("image_size {} must be a multiple of 2^{depth}", self.image_size),
            ));
        }
        Ok(())
    }

    /// Discriminator blocks skip normalization at the input and at the last
    /// block, whose per-channel means feed the global average pool.
    fn dsc_normed(&self, i: usize) -> bool {
        self.norm != NormMode::None && i > 0 && i + 1 < self.dsc_widths.len()
    }

    fn base(&self) -> usize {
        self.image_size >> self.enc_widths.len()
    }

    fn norm_kind(&self) -> Option<NormKind> {
        match self.norm {
            NormMode::None => None,
            NormMode::Batch => Some(NormKind::Batch),
            NormMode::Instance => Some(NormKind::Instance),
        }
    }

    /// Shapes of every learnable tensor, by name.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let normed = self.norm != NormMode::None;
        let conv_block = |out: &mut Vec<(String, Vec<usize>)>, name: String, w: Vec<usize>, ch: usize, norm: bool| {
            out.push((format!("{name}.w"), w));
            if norm {
                out.push((format!("{name}.g"), vec![ch]));
                out.push((format!("{name}.b"), vec![ch]));
            } else {
                out.push((format!("{name}.bias"), vec![ch]));
            }
        };
        let base = self.base();
        let feat = self.dim_v + self.dim_c;

        let mut cin = self.channels;
        for (i, &w) in self.enc_widths.iter().enumerate() {
            conv_block(&mut out, format!("enc.conv{i}"), vec![w, cin, KERNEL, KERNEL], w, normed);
            cin = w;
        }
        out.push(("enc.fc.w".into(), vec![cin * base * base, feat]));
        out.push(("enc.fc.bias".into(), vec![feat]));

        let top = *self.enc_widths.last().expect("validated");
        out.push(("dec.fc.w".into(), vec![feat, top * base * base]));
        if normed {
            out.push(("dec.fc.g".into(), vec![top]));
            out.push(("dec.fc.b".into(), vec![top]));
        } else {
            out.push(("dec.fc.bias".into(), vec![top * base * base]));
        }
        let mut cin = top;
        let depth = self.enc_widths.len();
        for i in (0..depth).rev() {
            let last = i == 0;
            let cout = if last { self.channels } else { self.enc_widths[i - 1] };
            // Transposed-conv kernels are stored O×I×kh×kw with O = input channels.
            conv_block(
                &mut out,
                format!("dec.deconv{}", depth - 1 - i),
                vec![cin, cout, KERNEL, KERNEL],
                cout,
                normed && !last,
            );
            cin = cout;
        }

        let mut cin = 2 * self.channels;
        for (i, &w) in self.dsc_widths.iter().enumerate() {
            conv_block(&mut out, format!("dsc.conv{i}"), vec![w, cin, KERNEL, KERNEL], w, self.dsc_normed(i));
            cin = w;
        }
        out.push(("dsc.fc.w".into(), vec![cin, 1]));
        out.push(("dsc.fc.bias".into(), vec![1]));
        out
    }

    /// Names and per-channel sizes of batch-norm layers.
    fn norm_layers(&self) -> Vec<(String, usize)> {
        self.param_shapes()
            .into_iter()
            .filter_map(|(n, s)| n.strip_suffix(".g").map(|p| (p.to_string(), s[0])))
            .collect()
    }
}

/// Learnable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub tensors: BTreeMap<String, Tensor>,
    /// `<layer>.mean` / `<layer>.var` running statistics (batch mode only).
    pub buffers: BTreeMap<String, Tensor>,
}

impl ModelParams {
    /// Weights `~ N(0, 0.02)`, norm scale 1 and shift 0, biases 0.
    pub fn init(cfg: &NetConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut tensors = BTreeMap::new();
        for (name, shape) in cfg.param_shapes() {
            // One stream per tensor: changing one network leaves the others' draws intact.
            let t = if name.ends_with(".w") {
                let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fxhash(&name));
                let n = shape.iter().product();
                Tensor::new(&shape, (0..n).map(|_| normal.sample(&mut rng)).collect())?
            } else if name.ends_with(".g") {
                Tensor::full(&shape, 1.0)
            } else {
                Tensor::zeros(&shape)
            };
            tensors.insert(name, t);
        }
        let mut buffers = BTreeMap::new();
        if cfg.norm == NormMode::Batch {
            for (layer, ch) in cfg.norm_layers() {
                buffers.insert(format!("{layer}.mean"), Tensor::zeros(&[ch]));
                buffers.insert(format!("{layer}.var"), Tensor::full(&[ch], 1.0));
            }
        }
        Ok(Self { tensors, buffers })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| invalid("params", format!("missing parameter {name}")))
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().chain(self.buffers.values()).all(Tensor::all_finite)
    }

    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// FNV-1a, used to give each parameter its own deterministic RNG stream.
fn fxhash(s: &str) -> u64 {
    s.bytes()
        .fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Per-sample varying/common feature split of the encoder output.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature {
    pub n_v: Vec<f64>,
    pub n_c: Vec<f64>,
}

/// Which parameters a forward pass tracks for gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    Nothing,
    Generator,
    Discriminator,
    All,
}

impl Track {
    fn includes(self, name: &str) -> bool {
        match self {
            Track::Nothing => false,
            Track::Generator => name.starts_with("enc.") || name.starts_with("dec."),
            Track::Discriminator => name.starts_with("dsc."),
            Track::All => true,
        }
    }
}

/// Binds parameters onto a tape for one forward pass and collects
/// batch-norm statistics of the tracked layers.
pub struct Forward<'a, 't> {
    pub tape: &'t Tape,
    pub cfg: &'a NetConfig,
    params: &'a ModelParams,
    mode: Mode,
    track: Track,
    bound: HashMap<String, Var<'t>>,
    stats: Vec<(String, Vec<f64>, Vec<f64>)>,
}

impl<'a, 't> Forward<'a, 't> {
    pub fn new(tape: &'t Tape, cfg: &'a NetConfig, params: &'a ModelParams, mode: Mode, track: Track) -> Self {
        Self {
            tape,
            cfg,
            params,
            mode,
            track,
            bound: HashMap::new(),
            stats: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str) -> Result<Var<'t>> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let t = self.params.get(name)?.clone();
        let v = if self.track.includes(name) {
            self.tape.param(t)
        } else {
            self.tape.constant(t)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Binds `name` to an existing tape variable instead of the stored tensor.
    pub fn bind(&mut self, name: &str, var: Var<'t>) {
        self.bound.insert(name.to_string(), var);
    }

    /// Releases the parameter borrow, keeping the tape bindings and the
    /// batch statistics gathered during the pass.
    pub fn finish(self) -> (HashMap<String, Var<'t>>, BatchStats) {
        let track = self.track;
        let bound = self.bound.into_iter().filter(|(n, _)| track.includes(n)).collect();
        (bound, BatchStats(self.stats))
    }
}

/// Per-layer `(mean, variance)` batch statistics from a training pass.
#[derive(Debug, Default)]
pub struct BatchStats(Vec<(String, Vec<f64>, Vec<f64>)>);

impl BatchStats {
    /// Folds the statistics into the running buffers.
    pub fn commit(self, params: &mut ModelParams) {
        for (layer, means, vars) in self.0 {
            for (suffix, batch) in [("mean", means), ("var", vars)] {
                if let Some(buf) = params.buffers.get_mut(&format!("{layer}.{suffix}")) {
                    for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                        *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * b;
                    }
                }
            }
        }
    }
}

impl<'a, 't> Forward<'a, 't> {

    /// Normalization followed by the learned per-channel affine.
    pub fn norm(&mut self, layer: &str, x: Var<'t>) -> Result<Var<'t>> {
        let kind = self.cfg.norm_kind().ok_or_else(|| invalid("normalize", "norm mode is none"))?;
        let scale = self.param(&format!("{layer}.g"))?;
        let shift = self.param(&format!("{layer}.b"))?;
        let normed = match (kind, self.mode) {
            (NormKind::Batch, Mode::Eval) => {
                let mean = self.params.buffers.get(&format!("{layer}.mean"));
                let var = self.params.buffers.get(&format!("{layer}.var"));
                let (Some(mean), Some(var)) = (mean, var) else {
                    return Err(invalid("normalize", format!("missing running statistics for {layer}")));
                };
                let inv: Vec<f64> = var
                    .data()
                    .iter()
                    .map(|v| 1.0 / (v + crate::autodiff::NORM_EPS).sqrt())
                    .collect();
                let off: Vec<f64> = mean.data().iter().zip(&inv).map(|(m, i)| -m * i).collect();
                let s = self.tape.constant(Tensor::from_vec(inv));
                let o = self.tape.constant(Tensor::from_vec(off));
                x.affine(s, o)?
            }
            _ => {
                let (y, means, vars) = x.normalize(kind)?;
                if kind == NormKind::Batch && self.mode == Mode::Train && self.track.includes(layer) {
                    self.stats.push((layer.to_string(), means, vars));
                }
                y
            }
        };
        normed.affine(scale, shift)
    }

    fn block(&mut self, layer: &str, conv: Var<'t>, normed: bool) -> Result<Var<'t>> {
        if normed {
            self.norm(layer, conv)
        } else {
            conv.add_bias(self.param(&format!("{layer}.bias"))?)
        }
    }

    fn check_images(&self, op: &'static str, x: &Var<'t>, channels: usize) -> Result<usize> {
        let s = x.shape();
        let want = [s.first().copied().unwrap_or(0), channels, self.cfg.image_size, self.cfg.image_size];
        if s.len() != 4 || s[1..] != want[1..] || s[0] == 0 {
            return Err(Error::Shape {
                op,
                lhs: s,
                rhs: want.to_vec(),
            });
        }
        Ok(s[0])
    }

    /// `N×C×S×S` images to `(N×dim_v, N×dim_c)` features.
    pub fn encode(&mut self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let n = self.check_images("encode", &x, self.cfg.channels)?;
        let normed = self.cfg.norm != NormMode::None;
        let mut h = x;
        for i in 0..self.cfg.enc_widths.len() {
            let layer = format!("enc.conv{i}");
            let conv = h.conv2d(self.param(&format!("{layer}.w"))?, STRIDE, PAD)?;
            h = self.block(&layer, conv, normed)?.leaky_relu(LEAKY_SLOPE);
        }
        let flat = h.reshape(&[n, h.value().len() / n])?;
        let out = flat
            .matmul(self.param("enc.fc.w")?)?
            .add_bias(self.param("enc.fc.bias")?)?;
        Ok((out.slice(1, 0, self.cfg.dim_v)?, out.slice(1, self.cfg.dim_v, self.cfg.dim_c)?))
    }

    /// Features back to `N×C×S×S` images in `[0, 1]`.
    pub fn decode(&mut self, n_v: Var<'t>, n_c: Var<'t>) -> Result<Var<'t>> {
        let (sv, sc) = (n_v.shape(), n_c.shape());
        if sv.len() != 2 || sc.len() != 2 || sv[0] != sc[0] || sv[1] != self.cfg.dim_v || sc[1] != self.cfg.dim_c {
            return Err(Error::Shape {
                op: "decode",
                lhs: sv,
                rhs: sc,
            });
        }
        let n = sv[0];
        let normed = self.cfg.norm != NormMode::None;
        let base = self.cfg.base();
        let top = *self.cfg.enc_widths.last().expect("validated");
        let z = Var::concat(&[n_v, n_c], 1)?;
        let mut h = z.matmul(self.param("dec.fc.w")?)?;
        if !normed {
            h = h.add_bias(self.param("dec.fc.bias")?)?;
        }
        h = h.reshape(&[n, top, base, base])?;
        if normed {
            h = self.norm("dec.fc", h)?;
        }
        h = h.relu();
        let depth = self.cfg.enc_widths.len();
        for j in 0..depth {
            let layer = format!("dec.deconv{j}");
            let up = h.conv_transpose2d(self.param(&format!("{layer}.w"))?, STRIDE, PAD)?;
            if j + 1 == depth {
                return Ok(self.block(&layer, up, false)?.sigmoid());
            }
            h = self.block(&layer, up, normed)?.relu();
        }
        unreachable!("encoder depth is at least one")
    }

    /// Probability that the channel-concatenated pair `[xa, xb]` is real, `N×1`.
    pub fn discriminate(&mut self, xa: Var<'t>, xb: Var<'t>) -> Result<Var<'t>> {
        if xa.shape() != xb.shape() {
            return Err(Error::Shape {
                op: "discriminate",
                lhs: xa.shape(),
                rhs: xb.shape(),
            });
        }
        self.check_images("discriminate", &xa, self.cfg.channels)?;
        let mut h = Var::concat(&[xa, xb], 1)?;
        for i in 0..self.cfg.dsc_widths.len() {
            let layer = format!("dsc.conv{i}");
            let conv = h.conv2d(self.param(&format!("{layer}.w"))?, STRIDE, PAD)?;
            h = self.block(&layer, conv, self.cfg.dsc_normed(i))?.leaky_relu(LEAKY_SLOPE);
        }
        let pooled = h.global_avg_pool()?;
        Ok(pooled
            .matmul(self.param("dsc.fc.w")?)?
            .add_bias(self.param("dsc.fc.bias")?)?
            .sigmoid())
    }
}

/// Untracked convenience wrappers for evaluation.
pub struct Nets<'a> {
    pub cfg: &'a NetConfig,
    pub params: &'a ModelParams,
    pub mode: Mode,
}

impl<'a> Nets<'a> {
    pub fn new(cfg: &'a NetConfig, params: &'a ModelParams) -> Self {
        Self {
            cfg,
            params,
            mode: Mode::Eval,
        }
    }

    pub fn encode_batch(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, self.cfg, self.params, self.mode, Track::Nothing);
        let (v, c) = fw.encode(tape.constant(x.clone()))?;
        Ok(((*v.value()).clone(), (*c.value()).clone()))
    }

    pub fn encode(&self, x: &Tensor) -> Result<Vec<Feature>> {
        let (v, c) = self.encode_batch(x)?;
        let (dv, dc) = (self.cfg.dim_v, self.cfg.dim_c);
        Ok(v.data()
            .chunks(dv)
            .zip(c.data().chunks(dc))
            .map(|(a, b)| Feature {
                n_v: a.to_vec(),
                n_c: b.to_vec(),
            })
            .collect())
    }

    pub fn decode_batch(&self, n_v: &Tensor, n_c: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, self.cfg, self.params, self.mode, Track::Nothing);
        let out = fw.decode(tape.constant(n_v.clone()), tape.constant(n_c.clone()))?;
        Ok((*out.value()).clone())
    }

    pub fn decode(&self, features: &[Feature]) -> Result<Tensor> {
        let n = features.len();
        if n == 0 {
            return Err(invalid("decode", "no features"));
        }
        let mut v = Vec::with_capacity(n * self.cfg.dim_v);
        let mut c = Vec::with_capacity(n * self.cfg.dim_c);
        for f in features {
            if f.n_v.len() != self.cfg.dim_v || f.n_c.len() != self.cfg.dim_c {
                return Err(Error::Shape {
                    op: "decode",
                    lhs: vec![f.n_v.len(), f.n_c.len()],
                    rhs: vec![self.cfg.dim_v, self.cfg.dim_c],
                });
            }
            v.extend_from_slice(&f.n_v);
            c.extend_from_slice(&f.n_c);
        }
        self.decode_batch(
            &Tensor::new(&[n, self.cfg.dim_v], v)?,
            &Tensor::new(&[n, self.cfg.dim_c], c)?,
        )
    }

    pub fn discriminate(&self, xa: &Tensor, xb: &Tensor) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let mut fw = Forward::new(&tape, self.cfg, self.params, self.mode, Track::Nothing);
        let out = fw.discriminate(tape.constant(xa.clone()), tape.constant(xb.clone()))?;
        let v = out.value();
        Ok(v.data().to_vec())
    }
}
