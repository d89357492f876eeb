//! The representation network `f: [B, 3, L] -> [B, w]`.
//!
//! Layout of the full network:
//!
//! 1. a 1×1 convolution lifting the three phases to `d` channels;
//! 2. the periodicity block: for each of the sample's top-k periods, fold to
//!    `[d, rows, p]`, apply the 2-D multiscale layer, unfold and add the lifted
//!    signal back; the k results are averaged;
//! 3. ResNet-style 1-D stages, the first block of each stage halving the time
//!    axis;
//! 4. global average pooling.
//!
//! Two ablation front ends replace steps 1-2 (see [`Frontend`]).
//!
//! Parameters are kept as a flat list of tensors in a fixed order
//! (see [`ModelConfig::param_shapes`]). Number of parameters, with
//! `d = mscnn_channels`, stage widths `c_s` and `c_0 = d`:
//!
//! ```text
//! front end   Periodic: 4d + 35d² + 9d     Plain1d: 10d     Mscnn1d: 4d + 9d² + 9d
//! stage s     first block: 3c_s·c_{s-1} + 3c_s² + 4c_s + c_s·c_{s-1} + c_s
//!             each further block: 6c_s² + 4c_s
//! ```

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::periodicity::{dominant_periods, PeriodConvention};
use crate::seed;
use crate::tensor::{AdamConfig, AdamState, Graph, Padding, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Distance {
    SquaredEuclidean,
    /// `sqrt(squared distance + 1e-12)`; the offset keeps the gradient finite at zero.
    Euclidean,
}

/// What sits between the raw phases and the residual stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "snake_case"))]
pub enum Frontend {
    /// Lift, then period folding with the 2-D multiscale layer.
    Periodic,
    /// A single k=3 convolution from 3 to `d` channels.
    Plain1d,
    /// Lift, then 1-D multiscale convolutions (k = 1, 3, 5) with a residual, no folding.
    Mscnn1d,
}

impl Frontend {
    pub fn name(self) -> &'static str {
        match self {
            Frontend::Periodic => "periodic",
            Frontend::Plain1d => "plain1d",
            Frontend::Mscnn1d => "mscnn1d",
        }
    }
}

pub const MSCNN_KERNELS: [usize; 3] = [1, 3, 5];

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub mscnn_channels: usize,
    pub top_k: usize,
    pub stage_channels: Vec<usize>,
    pub blocks_per_stage: usize,
    pub embedding_dim: usize,
    pub distance: Distance,
    pub period_convention: PeriodConvention,
    pub frontend: Frontend,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            mscnn_channels: 32,
            top_k: 5,
            stage_channels: vec![64, 128, 256],
            blocks_per_stage: 2,
            embedding_dim: 256,
            distance: Distance::SquaredEuclidean,
            period_convention: PeriodConvention::BinIndex,
            frontend: Frontend::Periodic,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mscnn_channels == 0 || self.top_k == 0 || self.blocks_per_stage == 0 {
            return Err(Error::Config("mscnn_channels, top_k and blocks_per_stage must be positive".into()));
        }
        if self.stage_channels.is_empty() || self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must be a nonempty list of positive widths".into()));
        }
        if self.stage_channels.last() != Some(&self.embedding_dim) {
            return Err(Error::Config(format!(
                "embedding_dim {} must equal the last stage width {:?}",
                self.embedding_dim,
                self.stage_channels.last()
            )));
        }
        if !(self.norm_eps > 0.0 && self.norm_eps.is_finite()) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.mscnn_channels;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        match self.frontend {
            Frontend::Periodic => {
                push("lift.w".into(), vec![d, 3, 1]);
                push("lift.b".into(), vec![d]);
                for k in MSCNN_KERNELS {
                    push(format!("mscnn.k{k}.w"), vec![d, d, k, k]);
                    push(format!("mscnn.k{k}.b"), vec![d]);
                    push(format!("mscnn.k{k}.gamma"), vec![d]);
                    push(format!("mscnn.k{k}.beta"), vec![d]);
                }
            }
            Frontend::Plain1d => {
                push("front.w".into(), vec![d, 3, 3]);
                push("front.b".into(), vec![d]);
            }
            Frontend::Mscnn1d => {
                push("lift.w".into(), vec![d, 3, 1]);
                push("lift.b".into(), vec![d]);
                for k in MSCNN_KERNELS {
                    push(format!("mscnn1d.k{k}.w"), vec![d, d, k]);
                    push(format!("mscnn1d.k{k}.b"), vec![d]);
                    push(format!("mscnn1d.k{k}.gamma"), vec![d]);
                    push(format!("mscnn1d.k{k}.beta"), vec![d]);
                }
            }
        }
        let mut cin = d;
        for (s, &c) in self.stage_channels.iter().enumerate() {
            for b in 0..self.blocks_per_stage {
                let inp = if b == 0 { cin } else { c };
                let p = format!("stage{s}.block{b}");
                push(format!("{p}.conv1.w"), vec![c, inp, 3]);
                push(format!("{p}.norm1.gamma"), vec![c]);
                push(format!("{p}.norm1.beta"), vec![c]);
                push(format!("{p}.conv2.w"), vec![c, c, 3]);
                push(format!("{p}.norm2.gamma"), vec![c]);
                push(format!("{p}.norm2.beta"), vec![c]);
                if b == 0 {
                    push(format!("{p}.proj.w"), vec![c, inp, 1]);
                    push(format!("{p}.proj.b"), vec![c]);
                }
            }
            cin = c;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    /// Canonical `key=value` lines, used inside checkpoints.
    pub fn encode(&self) -> String {
        let stages: Vec<String> = self.stage_channels.iter().map(|c| format!("{c}")).collect();
        let distance = match self.distance {
            Distance::SquaredEuclidean => "squared_euclidean",
            Distance::Euclidean => "euclidean",
        };
        let convention = match self.period_convention {
            PeriodConvention::BinIndex => String::from("bin_index"),
            PeriodConvention::PaperLiteral { sample_rate_hz } => format!("paper_literal:{:016x}", sample_rate_hz.to_bits()),
        };
        format!(
            "mscnn_channels={}\ntop_k={}\nstage_channels={}\nblocks_per_stage={}\nembedding_dim={}\ndistance={}\nperiod_convention={}\nfrontend={}\nnorm_eps={:016x}\n",
            self.mscnn_channels,
            self.top_k,
            stages.join(","),
            self.blocks_per_stage,
            self.embedding_dim,
            distance,
            convention,
            self.frontend.name(),
            self.norm_eps.to_bits()
        )
    }

    pub fn decode(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("malformed config field {what}"));
        let mut cfg = ModelConfig::default();
        let mut seen = 0usize;
        for line in text.lines().filter(|l| !l.is_empty()) {
            let (key, value) = line.split_once('=').ok_or_else(|| bad(line))?;
            let int = |v: &str| v.parse::<usize>().map_err(|_| bad(key));
            let bits = |v: &str| u64::from_str_radix(v, 16).map(f64::from_bits).map_err(|_| bad(key));
            match key {
                "mscnn_channels" => cfg.mscnn_channels = int(value)?,
                "top_k" => cfg.top_k = int(value)?,
                "stage_channels" => {
                    cfg.stage_channels = value.split(',').map(int).collect::<Result<Vec<_>>>()?;
                }
                "blocks_per_stage" => cfg.blocks_per_stage = int(value)?,
                "embedding_dim" => cfg.embedding_dim = int(value)?,
                "distance" => {
                    cfg.distance = match value {
                        "squared_euclidean" => Distance::SquaredEuclidean,
                        "euclidean" => Distance::Euclidean,
                        _ => return Err(bad(key)),
                    }
                }
                "period_convention" => {
                    cfg.period_convention = match value.split_once(':') {
                        None if value == "bin_index" => PeriodConvention::BinIndex,
                        Some(("paper_literal", hz)) => PeriodConvention::PaperLiteral { sample_rate_hz: bits(hz)? },
                        _ => return Err(bad(key)),
                    }
                }
                "frontend" => {
                    cfg.frontend = match value {
                        "periodic" => Frontend::Periodic,
                        "plain1d" => Frontend::Plain1d,
                        "mscnn1d" => Frontend::Mscnn1d,
                        _ => return Err(bad(key)),
                    }
                }
                "norm_eps" => cfg.norm_eps = bits(value)?,
                _ => return Err(Error::Checkpoint(format!("unknown config field {key}"))),
            }
            seen += 1;
        }
        if seen != 9 {
            return Err(Error::Checkpoint(format!("config has {seen} fields, expected 9")));
        }
        cfg.validate().map_err(|e| Error::Checkpoint(format!("{e}")))?;
        Ok(cfg)
    }
}

/// Network parameters plus the Adam moments that go with them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: Vec<Tensor>,
    pub optimizer: AdamState,
}

const MAGIC: &[u8; 8] = b"TWPROTO\x01";
const FORMAT_VERSION: u32 = 1;

impl ModelState {
    /// Kaiming-uniform (fan-in) kernels, zero biases, unit/zero normalization affine.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(seed::derive(seed, &[seed::stream::INIT]));
        let params: Vec<Tensor> = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".w") {
                    let fan_in: usize = shape[1..].iter().product();
                    let bound = libm::sqrt(6.0 / fan_in as f64);
                    let n: usize = shape.iter().product();
                    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(&shape, data)
                } else if name.ends_with(".gamma") {
                    Ok(Tensor::full(&shape, 1.0))
                } else {
                    Ok(Tensor::zeros(&shape))
                }
            })
            .collect::<Result<_>>()?;
        let optimizer = AdamState::new(&params, AdamConfig::default());
        Ok(Self { config: config.clone(), params, optimizer })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Puts the parameters on `g`, as leaves if `g` records and constants otherwise.
    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        let record = g.is_recording();
        self.params.iter().map(|p| if record { g.leaf(p.clone()) } else { g.constant(p.clone()) }).collect()
    }

    /// Embeddings `[B, w]` without recording gradients.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::inference();
        let vars = self.bind(&mut g);
        let out = forward(&mut g, &vars, &self.config, x)?;
        Ok(g.value(out).clone())
    }

    /// Fresh optimizer moments, parameters untouched.
    pub fn reset_optimizer(&mut self) {
        self.optimizer = AdamState::new(&self.params, self.optimizer.config);
    }

    /// Checkpoint layout, all integers little-endian:
    ///
    /// ```text
    /// magic "TWPROTO\x01" | u32 version | u32 n + n bytes config text
    /// u64 tensor count | per tensor: u32 ndim, ndim × u64 dims, f64 data
    /// u64 adam step | f64 m data (all tensors) | f64 v data (all tensors)
    /// ```
    pub fn to_bytes(&self) -> Vec<u8> {
        let cfg = self.config.encode();
        let mut out = Vec::with_capacity(64 + cfg.len() + 24 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        out.extend_from_slice(cfg.as_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.ndim() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            p.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
        }
        out.extend_from_slice(&self.optimizer.step.to_le_bytes());
        for moments in [&self.optimizer.m, &self.optimizer.v] {
            for t in moments {
                t.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let n = r.u32()? as usize;
        let text = core::str::from_utf8(r.take(n)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
        let config = ModelConfig::decode(text)?;
        let expected = config.param_shapes();
        let count = r.u64()? as usize;
        if count != expected.len() {
            return Err(Error::Checkpoint(format!("{count} tensors stored, config implies {}", expected.len())));
        }
        let mut params = Vec::with_capacity(count);
        for (name, shape) in &expected {
            let ndim = r.u32()? as usize;
            let dims = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if &dims != shape {
                return Err(Error::Checkpoint(format!("{name}: stored shape {dims:?}, expected {shape:?}")));
            }
            params.push(Tensor::new(shape, r.f64s(shape.iter().product())?).map_err(|e| Error::Checkpoint(format!("{e}")))?);
        }
        let mut optimizer = AdamState::new(&params, AdamConfig::default());
        optimizer.step = r.u64()?;
        for moments in [&mut optimizer.m, &mut optimizer.v] {
            for t in moments.iter_mut() {
                let vals = r.f64s(t.len())?;
                t.copy_from_slice(&vals);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { config, params, optimizer })
    }

    /// [`ModelState::from_bytes`], rejecting checkpoints whose config differs from `expected`.
    pub fn from_bytes_checked(bytes: &[u8], expected: &ModelConfig) -> Result<Self> {
        let state = Self::from_bytes(bytes)?;
        if &state.config != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint config differs from the requested one:\n{}--- vs ---\n{}",
                state.config.encode(),
                expected.encode()
            )));
        }
        Ok(state)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

/// Counters filled in by [`forward_traced`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ForwardTrace {
    /// Number of spectra computed for period selection.
    pub spectra: usize,
    /// Periods used for each sample, in batch order.
    pub periods: Vec<Vec<usize>>,
}

pub fn forward(g: &mut Graph, params: &[Var], cfg: &ModelConfig, x: &Tensor) -> Result<Var> {
    forward_traced(g, params, cfg, x, &mut ForwardTrace::default())
}

/// Embeds `x: [B, 3, L]` into `[B, w]` using parameter handles from [`ModelState::bind`].
pub fn forward_traced(
    g: &mut Graph,
    params: &[Var],
    cfg: &ModelConfig,
    x: &Tensor,
    trace: &mut ForwardTrace,
) -> Result<Var> {
    let shapes = cfg.param_shapes();
    if params.len() != shapes.len() {
        return Err(Error::Dimension(format!("{} parameters bound, config needs {}", params.len(), shapes.len())));
    }
    let s = x.shape();
    if s.len() != 3 || s[1] != 3 {
        return Err(Error::Dimension(format!("forward expects [B, 3, L], got {s:?}")));
    }
    if !x.is_finite() {
        return Err(Error::Domain("non-finite input signal".into()));
    }
    let (batch, len) = (s[0], s[2]);
    let mut p = Params { vars: params, next: 0 };

    let front = match cfg.frontend {
        Frontend::Periodic => {
            let lift = (p.take(), p.take());
            let branches: Vec<Branch> = MSCNN_KERNELS.iter().map(|_| Branch::take(&mut p)).collect();
            let mut outs = Vec::with_capacity(batch);
            for b in 0..batch {
                let sample = &x.data()[b * 3 * len..(b + 1) * 3 * len];
                let phases: Vec<&[f64]> = sample.chunks_exact(len).collect();
                let set = dominant_periods(&phases, cfg.top_k, cfg.period_convention)?;
                trace.spectra += 1;
                let xs = g.constant(Tensor::new(&[1, 3, len], sample.to_vec())?);
                let lifted = tag(g.conv1d(xs, lift.0, Some(lift.1), 1, Padding::Same), "lift conv")?;
                let y = tag(periodicity_block(g, lifted, &set.periods, &branches, cfg.norm_eps), "periodicity block")?;
                trace.periods.push(set.periods);
                outs.push(y);
            }
            let y = g.concat_rows(&outs)?;
            check(g, y, "periodicity block")?
        }
        Frontend::Plain1d => {
            let (w, b) = (p.take(), p.take());
            let xs = g.constant(x.clone());
            let y = tag(g.conv1d(xs, w, Some(b), 1, Padding::Same), "front conv")?;
            check(g, y, "front conv")?
        }
        Frontend::Mscnn1d => {
            let lift = (p.take(), p.take());
            let branches: Vec<Branch> = MSCNN_KERNELS.iter().map(|_| Branch::take(&mut p)).collect();
            let xs = g.constant(x.clone());
            let lifted = tag(g.conv1d(xs, lift.0, Some(lift.1), 1, Padding::Same), "lift conv")?;
            let y = tag(mscnn_1d(g, lifted, &branches, cfg.norm_eps), "1-D multiscale block")?;
            check(g, y, "1-D multiscale block")?
        }
    };

    let mut h = front;
    for (s, _) in cfg.stage_channels.iter().enumerate() {
        for b in 0..cfg.blocks_per_stage {
            let layer = format!("stage {s} block {b}");
            h = tag(residual_block(g, &mut p, h, b == 0, cfg.norm_eps), &layer)?;
            check(g, h, &layer)?;
        }
    }
    let emb = tag(g.global_avg_pool(h), "global pooling")?;
    check(g, emb, "global pooling")
}

/// Prefixes numeric failures of graph ops with the layer they happened in.
fn tag<T>(r: Result<T>, layer: &str) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(msg) => Error::Numeric(format!("non-finite activation in {layer}: {msg}")),
        other => other,
    })
}

fn mscnn_1d(g: &mut Graph, lifted: Var, branches: &[Branch], eps: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for br in branches {
        let c = g.conv1d(lifted, br.w, Some(br.b), 1, Padding::Same)?;
        let n = g.instance_norm(c, br.gamma, br.beta, eps)?;
        let r = g.relu(n)?;
        acc = Some(match acc {
            None => r,
            Some(a) => g.add(a, r)?,
        });
    }
    let m = g.scale(acc.unwrap(), 1.0 / branches.len() as f64)?;
    g.add(m, lifted)
}

fn check(g: &Graph, v: Var, layer: &str) -> Result<Var> {
    if g.value(v).is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("non-finite activation after {layer}")))
    }
}

struct Params<'a> {
    vars: &'a [Var],
    next: usize,
}

impl Params<'_> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

/// Parameters of one multiscale branch: conv kernel, bias, norm affine.
#[derive(Debug, Clone, Copy)]
pub struct Branch {
    pub w: Var,
    pub b: Var,
    pub gamma: Var,
    pub beta: Var,
}

impl Branch {
    fn take(p: &mut Params) -> Self {
        Self { w: p.take(), b: p.take(), gamma: p.take(), beta: p.take() }
    }
}

/// `(relu(norm(conv_1(v))) + relu(norm(conv_3(v))) + relu(norm(conv_5(v)))) / 3`
/// over a folded view `[B, d, rows, p]`.
pub fn mscnn(g: &mut Graph, view: Var, branches: &[Branch], eps: f64) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for br in branches {
        let c = g.conv2d(view, br.w, Some(br.b))?;
        let n = g.instance_norm(c, br.gamma, br.beta, eps)?;
        let r = g.relu(n)?;
        acc = Some(match acc {
            None => r,
            Some(a) => g.add(a, r)?,
        });
    }
    let acc = acc.ok_or_else(|| Error::Argument("mscnn needs at least one branch".into()))?;
    g.scale(acc, 1.0 / branches.len() as f64)
}

/// `(1/k) Σ_i (unfold(mscnn(fold(x, p_i))) + x)` over `x: [B, d, L]`.
pub fn periodicity_block(g: &mut Graph, x: Var, periods: &[usize], branches: &[Branch], eps: f64) -> Result<Var> {
    if periods.is_empty() {
        return Err(Error::Argument("periodicity block needs at least one period".into()));
    }
    let len = g.shape(x)[2];
    let mut acc: Option<Var> = None;
    for &p in periods {
        let folded = g.fold_time(x, p)?;
        let m = mscnn(g, folded, branches, eps)?;
        let back = g.unfold_time(m, len)?;
        let r = g.add(back, x)?;
        acc = Some(match acc {
            None => r,
            Some(a) => g.add(a, r)?,
        });
    }
    g.scale(acc.unwrap(), 1.0 / periods.len() as f64)
}

/// `relu(norm(conv(relu(norm(conv(x))))) + skip(x))`; entry blocks use stride 2 and a 1×1 projection skip.
fn residual_block(g: &mut Graph, p: &mut Params, x: Var, entry: bool, eps: f64) -> Result<Var> {
    let stride = if entry { 2 } else { 1 };
    let (w1, g1, b1) = (p.take(), p.take(), p.take());
    let (w2, g2, b2) = (p.take(), p.take(), p.take());
    let c1 = g.conv1d(x, w1, None, stride, Padding::Same)?;
    let n1 = g.instance_norm(c1, g1, b1, eps)?;
    let r1 = g.relu(n1)?;
    let c2 = g.conv1d(r1, w2, None, 1, Padding::Same)?;
    let n2 = g.instance_norm(c2, g2, b2, eps)?;
    let skip = if entry {
        let (pw, pb) = (p.take(), p.take());
        g.conv1d(x, pw, Some(pb), 2, Padding::Same)?
    } else {
        x
    };
    let s = g.add(n2, skip)?;
    g.relu(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(frontend: Frontend) -> ModelConfig {
        ModelConfig {
            mscnn_channels: 4,
            top_k: 2,
            stage_channels: vec![8, 8, 8],
            blocks_per_stage: 2,
            embedding_dim: 8,
            frontend,
            ..Default::default()
        }
    }

    fn formula(cfg: &ModelConfig) -> usize {
        let d = cfg.mscnn_channels;
        let mut n = match cfg.frontend {
            Frontend::Periodic => 4 * d + 35 * d * d + 9 * d,
            Frontend::Plain1d => 10 * d,
            Frontend::Mscnn1d => 4 * d + 9 * d * d + 9 * d,
        };
        let mut prev = d;
        for &c in &cfg.stage_channels {
            n += 3 * c * prev + 3 * c * c + 4 * c + c * prev + c;
            n += (cfg.blocks_per_stage - 1) * (6 * c * c + 4 * c);
            prev = c;
        }
        n
    }

    #[test]
    fn parameter_count_matches_formula() {
        for f in [Frontend::Periodic, Frontend::Plain1d, Frontend::Mscnn1d] {
            for cfg in [small(f), ModelConfig { frontend: f, ..Default::default() }] {
                let st = ModelState::init(&cfg, 0).unwrap();
                assert_eq!(st.param_count(), formula(&cfg));
                assert_eq!(cfg.param_count(), formula(&cfg));
            }
        }
        let full = ModelConfig::default();
        let one_d = ModelConfig { frontend: Frontend::Mscnn1d, ..Default::default() };
        assert_eq!(full.param_count() - one_d.param_count(), 26 * 32 * 32);
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        c.embedding_dim = 128;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c = ModelConfig { top_k: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_encoding_round_trips() {
        let c = ModelConfig {
            period_convention: PeriodConvention::PaperLiteral { sample_rate_hz: 10240.0 },
            distance: Distance::Euclidean,
            ..small(Frontend::Mscnn1d)
        };
        assert_eq!(ModelConfig::decode(&c.encode()).unwrap(), c);
    }
}
