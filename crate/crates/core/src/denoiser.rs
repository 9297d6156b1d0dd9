//! Conditional noise-prediction networks.
//!
//! [`Denoiser`] takes the noisy image plus three conditionings: the input
//! image, a style exemplar, and an instruction id. Input and style images
//! enter through extra channels of the first convolution. A cross-attention
//! block forms per-pixel queries from the (input, style) pair and attends
//! over the instruction token, producing an attention map with the image's
//! spatial layout that is concatenated as a further channel group.
//!
//! Weights that read the style image (its slice of the first convolution
//! and its half of the query projection) start at zero, so a freshly
//! initialized network ignores the style image entirely.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamStore, ParamVars, Tensor, Var};
use crate::rng::{self, tags};
use crate::synth::{ImageSize, Instruction};

/// The three conditionings; `None` marks a null slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Conditioning {
    pub input: Option<Tensor>,
    pub style: Option<Tensor>,
    pub instruction: Option<Instruction>,
}

/// Null patterns. Only nested patterns exist: style requires input, and
/// the instruction requires both images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NullPattern {
    AllNull,
    InputOnly,
    InputStyle,
    Full,
}

impl NullPattern {
    pub const ALL: [NullPattern; 4] = [Self::AllNull, Self::InputOnly, Self::InputStyle, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::AllNull => "all-null",
            Self::InputOnly => "input-only",
            Self::InputStyle => "input-style",
            Self::Full => "full",
        }
    }
}

impl fmt::Display for NullPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NullPattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Conditioning(format!("invalid null pattern `{s}`")))
    }
}

impl Conditioning {
    pub fn full(input: Tensor, style: Tensor, instruction: Instruction) -> Self {
        Self {
            input: Some(input),
            style: Some(style),
            instruction: Some(instruction),
        }
    }

    /// The pattern of null slots, rejecting non-nested combinations.
    pub fn pattern(&self) -> Result<NullPattern> {
        match (self.input.is_some(), self.style.is_some(), self.instruction.is_some()) {
            (false, false, false) => Ok(NullPattern::AllNull),
            (true, false, false) => Ok(NullPattern::InputOnly),
            (true, true, false) => Ok(NullPattern::InputStyle),
            (true, true, true) => Ok(NullPattern::Full),
            (i, s, t) => Err(Error::Conditioning(format!(
                "non-nested null pattern (input: {i}, style: {s}, instruction: {t})"
            ))),
        }
    }

    /// Copy of `self` with the slots that `pattern` nulls set to `None`.
    pub fn null_of(&self, pattern: NullPattern) -> Conditioning {
        let (keep_in, keep_sty, keep_txt) = match pattern {
            NullPattern::AllNull => (false, false, false),
            NullPattern::InputOnly => (true, false, false),
            NullPattern::InputStyle => (true, true, false),
            NullPattern::Full => (true, true, true),
        };
        Conditioning {
            input: self.input.clone().filter(|_| keep_in),
            style: self.style.clone().filter(|_| keep_sty),
            instruction: self.instruction.filter(|_| keep_txt),
        }
    }
}

/// A noise-prediction network `ε_θ(x_t, t, c)`.
pub trait NoiseModel: Sync {
    fn image_size(&self) -> ImageSize;

    fn init_params(&self, seed: u64) -> ParamStore;

    /// Records the forward pass on `graph`. Returns a `[C, H, W]` estimate.
    fn forward(&self, graph: &Graph, params: &ParamVars, x_t: Var, t: usize, cond: &Conditioning) -> Result<Var>;

    /// Forward pass without keeping a tape.
    fn predict(&self, params: &ParamStore, x_t: &Tensor, t: usize, cond: &Conditioning) -> Result<Tensor> {
        let graph = Graph::new();
        let vars = ParamVars::register(&graph, params);
        let x = graph.constant(x_t.clone());
        let out = self.forward(&graph, &vars, x, t, cond)?;
        let v = graph.value(out).clone();
        Ok(v)
    }

    fn check_input(&self, x_t: &Tensor, cond: &Conditioning) -> Result<()> {
        let shape = self.image_size().shape();
        let bad = |what: &str, got: &[usize]| {
            Err(Error::Numerics(crate::numerics::NumericsError::ShapeMismatch {
                op: if what == "x_t" { "denoiser x_t" } else { "denoiser conditioning" },
                left: shape.to_vec(),
                right: got.to_vec(),
            }))
        };
        if x_t.shape() != shape {
            return bad("x_t", x_t.shape());
        }
        for img in [&cond.input, &cond.style].into_iter().flatten() {
            if img.shape() != shape {
                return bad("cond", img.shape());
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub hidden: usize,
    pub vocab: usize,
    pub embed_dim: usize,
    pub attn_dim: usize,
    pub attn_channels: usize,
    pub time_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            vocab: 5,
            embed_dim: 8,
            attn_dim: 8,
            attn_channels: 4,
            time_dim: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [self.hidden, self.embed_dim, self.attn_dim, self.attn_channels, self.time_dim];
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument("denoiser widths must be positive".into()));
        }
        if self.time_dim % 2 != 0 {
            return Err(Error::InvalidArgument("time_dim must be even".into()));
        }
        if self.vocab < crate::synth::Concept::ALL.len() || self.vocab <= Instruction::WOOD.0 {
            return Err(Error::InvalidArgument(format!(
                "vocabulary {} too small for the instruction registry",
                self.vocab
            )));
        }
        Ok(())
    }
}

/// Sinusoidal embedding of timestep `t` with `dim` entries.
pub fn timestep_embedding(t: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(1000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    Tensor::from_vec(out).reshape(&[1, dim]).expect("static shape")
}

/// The conditional denoiser.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Denoiser {
    pub size: ImageSize,
    pub config: DenoiserConfig,
}

impl Denoiser {
    pub fn new(size: ImageSize, config: DenoiserConfig) -> Result<Self> {
        size.validate()?;
        config.validate()?;
        Ok(Self { size, config })
    }

    /// Input channels of the first convolution: noisy image, input image,
    /// style image, attention output.
    pub fn conv_in_channels(&self) -> usize {
        3 * self.size.channels + self.config.attn_channels
    }

    /// Channel range of the first convolution that reads the style image.
    pub fn style_channels(&self) -> std::ops::Range<usize> {
        2 * self.size.channels..3 * self.size.channels
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut rng::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-bound..=bound)).collect()).expect("finite init")
}

impl NoiseModel for Denoiser {
    fn image_size(&self) -> ImageSize {
        self.size
    }

    fn init_params(&self, seed: u64) -> ParamStore {
        let c = self.size.channels;
        let cfg = self.config;
        let mut rng = rng::stream(seed, tags::INIT);
        let mut p = ParamStore::new();
        let mut put = |name: &str, t: Tensor| p.insert(name, t).expect("unique names");

        let fan = |n: usize| 1.0 / (n as f64).sqrt();

        let mut q = uniform(&[2 * c, cfg.attn_dim], fan(2 * c), &mut rng);
        for row in c..2 * c {
            q.data_mut()[row * cfg.attn_dim..(row + 1) * cfg.attn_dim].fill(0.0);
        }
        put("attn.q.w", q);
        put("attn.q.b", Tensor::zeros(&[cfg.attn_dim]));
        put("attn.k.w", uniform(&[cfg.embed_dim, cfg.attn_dim], fan(cfg.embed_dim), &mut rng));
        put("attn.v.w", uniform(&[cfg.embed_dim, cfg.attn_channels], fan(cfg.embed_dim), &mut rng));
        put("attn.sink.k", uniform(&[1, cfg.attn_dim], fan(cfg.attn_dim), &mut rng));
        put("attn.sink.v", uniform(&[1, cfg.attn_channels], fan(cfg.attn_channels), &mut rng));
        put("embed.instruction", uniform(&[cfg.vocab, cfg.embed_dim], 1.0, &mut rng));

        let cin = self.conv_in_channels();
        let mut k = uniform(&[cfg.hidden, cin, 3, 3], fan(cin * 9), &mut rng);
        for co in 0..cfg.hidden {
            for ci in self.style_channels() {
                let at = (co * cin + ci) * 9;
                k.data_mut()[at..at + 9].fill(0.0);
            }
        }
        put("conv_in.w", k);
        put("conv_in.b", Tensor::zeros(&[cfg.hidden]));
        put("time.w", uniform(&[cfg.time_dim, cfg.hidden], fan(cfg.time_dim), &mut rng));
        put("time.b", Tensor::zeros(&[cfg.hidden]));
        for name in ["conv_mid1", "conv_mid2"] {
            put(
                &format!("{name}.w"),
                uniform(&[cfg.hidden, cfg.hidden, 3, 3], fan(cfg.hidden * 9), &mut rng),
            );
            put(&format!("{name}.b"), Tensor::zeros(&[cfg.hidden]));
        }
        put("conv_out.w", uniform(&[c, cfg.hidden, 3, 3], fan(cfg.hidden * 9), &mut rng));
        put("conv_out.b", Tensor::zeros(&[c]));
        p
    }

    fn forward(&self, g: &Graph, p: &ParamVars, x_t: Var, t: usize, cond: &Conditioning) -> Result<Var> {
        let size = self.size;
        let (c, hw) = (size.channels, size.pixels());
        let cfg = self.config;
        self.check_input(&g.value(x_t), cond)?;
        let instruction = cond.instruction.unwrap_or(Instruction::NULL);
        if instruction.0 >= cfg.vocab {
            return Err(Error::Conditioning(format!("instruction id {} outside vocabulary", instruction.0)));
        }
        let zeros = || Tensor::zeros(&size.shape());
        let input = g.constant(cond.input.clone().unwrap_or_else(zeros));
        let style = g.constant(cond.style.clone().unwrap_or_else(zeros));

        // Cross-attention: per-pixel queries from the image pair; keys and
        // values from the instruction token and a learned sink token.
        let pair = g.concat(&[input, style])?;
        let pair = g.transpose(g.reshape(pair, &[2 * c, hw])?)?;
        let q = g.bias_last(g.matmul(pair, p["attn.q.w"])?, p["attn.q.b"])?;
        let token = g.select_row(p["embed.instruction"], instruction.0)?;
        let k = g.concat(&[g.matmul(token, p["attn.k.w"])?, p["attn.sink.k"]])?;
        let v = g.concat(&[g.matmul(token, p["attn.v.w"])?, p["attn.sink.v"]])?;
        let logits = g.scale(g.matmul(q, g.transpose(k)?)?, 1.0 / (cfg.attn_dim as f64).sqrt());
        let weights = g.softmax_rows(logits)?;
        let attended = g.matmul(weights, v)?;
        let attended = g.reshape(g.transpose(attended)?, &[cfg.attn_channels, size.height, size.width])?;

        let stacked = g.concat(&[x_t, input, style, attended])?;
        let h = g.silu(g.conv3x3(stacked, p["conv_in.w"], p["conv_in.b"])?);
        let temb = g.constant(timestep_embedding(t, cfg.time_dim));
        let temb = g.bias_last(g.matmul(temb, p["time.w"])?, p["time.b"])?;
        let mut h = g.bias_first(h, g.reshape(temb, &[cfg.hidden])?)?;
        for name in ["conv_mid1", "conv_mid2"] {
            let branch = g.silu(g.conv3x3(h, p[&*format!("{name}.w")], p[&*format!("{name}.b")])?);
            h = g.add(h, branch)?;
        }
        Ok(g.conv3x3(h, p["conv_out.w"], p["conv_out.b"])?)
    }
}

/// A four-parameter stand-in with the same interface, for checks that need
/// every coordinate of the gradient:
/// `ε = a·x_t + silu(b·input + c·style) + d·[instruction present]·t/T`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TinyDenoiser {
    pub size: ImageSize,
    pub steps: usize,
}

impl TinyDenoiser {
    fn scalar_times(g: &Graph, s: Var, x: Var, n: usize) -> Result<Var> {
        let col = g.reshape(x, &[n, 1])?;
        Ok(g.matmul(col, g.reshape(s, &[1, 1])?)?)
    }
}

impl NoiseModel for TinyDenoiser {
    fn image_size(&self) -> ImageSize {
        self.size
    }

    fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = rng::stream(seed, tags::INIT);
        ["a", "b", "c", "d"]
            .into_iter()
            .map(|n| (n.to_string(), Tensor::scalar(rng.random_range(-0.5..0.5))))
            .collect()
    }

    fn forward(&self, g: &Graph, p: &ParamVars, x_t: Var, t: usize, cond: &Conditioning) -> Result<Var> {
        self.check_input(&g.value(x_t), cond)?;
        let shape = self.size.shape();
        let n = shape.iter().product();
        let zeros = || Tensor::zeros(&shape);
        let input = g.constant(cond.input.clone().unwrap_or_else(zeros));
        let style = g.constant(cond.style.clone().unwrap_or_else(zeros));
        let lin = g.add(
            Self::scalar_times(g, p["b"], input, n)?,
            Self::scalar_times(g, p["c"], style, n)?,
        )?;
        let mut out = g.add(Self::scalar_times(g, p["a"], x_t, n)?, g.silu(lin))?;
        if cond.instruction.is_some() {
            let ramp = g.constant(Tensor::full(&[n], t as f64 / self.steps as f64));
            out = g.add(out, Self::scalar_times(g, p["d"], ramp, n)?)?;
        }
        Ok(g.reshape(out, &shape)?)
    }
}
