//! Transformer autoencoder with a mean-pooled bottleneck.
//!
//! The encoder turns a `D×T` window into `T` contextual vectors which are
//! averaged into a single vector `z`. Every decoder layer runs self-attention
//! over its own sequence and then cross-attends to `z` alone, so the only
//! information about the input that crosses from encoder to decoder is that
//! one `d`-vector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::substrate::nn::{positional_table, FeedForward, LayerNorm, Linear, MultiHeadAttention};
use crate::substrate::{Graph, ParameterSet, Real, Tensor, Var};

/// What the decoder's first self-attention layer reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderInput {
    /// The embedded input window plus positions. Lets the decoder copy
    /// anomalies straight through, so reconstruction error stops flagging them.
    Embedded,
    /// Positions only; the window enters solely through `z`.
    #[default]
    PositionOnly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AeConfig {
    pub dims: usize,
    pub window: usize,
    pub width: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_width: usize,
    pub decoder_input: DecoderInput,
    /// Add sinusoidal positions to the embeddings.
    pub positions: bool,
}

impl AeConfig {
    pub fn new(dims: usize, window: usize) -> Self {
        Self {
            dims,
            window,
            width: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_width: 128,
            decoder_input: DecoderInput::PositionOnly,
            positions: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims == 0 || self.window == 0 || self.width == 0 || self.ff_width == 0 {
            return Err(Error::config("autoencoder sizes must be positive"));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::config("autoencoder needs at least one encoder and decoder layer"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    att: MultiHeadAttention,
    ln1: LayerNorm,
    ff: FeedForward,
    ln2: LayerNorm,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    self_att: MultiHeadAttention,
    ln1: LayerNorm,
    cross: MultiHeadAttention,
    ln2: LayerNorm,
    ff: FeedForward,
    ln3: LayerNorm,
}

/// Intermediate values of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AeTrace {
    pub hidden: Var,
    pub z: Var,
    /// Head-merged output of the first decoder cross-attention, before its
    /// output projection.
    pub cross_context: Var,
    pub cross_values: Var,
    pub recon: Var,
}

#[derive(Clone, Debug)]
pub struct Autoencoder {
    pub config: AeConfig,
    prefix: String,
    input: Linear,
    output: Linear,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
}

impl Autoencoder {
    /// Parameters are named `{prefix}.…`.
    pub fn new(config: AeConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let (d, h, f) = (config.width, config.heads, config.ff_width);
        let encoder = (0..config.encoder_layers)
            .map(|i| {
                let n = format!("{prefix}.enc{i}");
                EncoderLayer {
                    att: MultiHeadAttention::new(format!("{n}.att"), d, h),
                    ln1: LayerNorm::new(format!("{n}.ln1"), d),
                    ff: FeedForward::new(&format!("{n}.ff"), d, f),
                    ln2: LayerNorm::new(format!("{n}.ln2"), d),
                }
            })
            .collect();
        let decoder = (0..config.decoder_layers)
            .map(|i| {
                let n = format!("{prefix}.dec{i}");
                DecoderLayer {
                    self_att: MultiHeadAttention::new(format!("{n}.self"), d, h),
                    ln1: LayerNorm::new(format!("{n}.ln1"), d),
                    cross: MultiHeadAttention::new(format!("{n}.cross"), d, h),
                    ln2: LayerNorm::new(format!("{n}.ln2"), d),
                    ff: FeedForward::new(&format!("{n}.ff"), d, f),
                    ln3: LayerNorm::new(format!("{n}.ln3"), d),
                }
            })
            .collect();
        Ok(Self {
            input: Linear::new(format!("{prefix}.in"), config.dims, d),
            output: Linear::new(format!("{prefix}.out"), d, config.dims),
            prefix: prefix.to_string(),
            encoder,
            decoder,
            config,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init<R: Real>(&self, ps: &mut ParameterSet<R>, rng: &mut Rng) {
        self.input.init(ps, rng);
        self.output.init(ps, rng);
        for l in &self.encoder {
            l.att.init(ps, rng);
            l.ln1.init(ps);
            l.ff.init(ps, rng);
            l.ln2.init(ps);
        }
        for l in &self.decoder {
            l.self_att.init(ps, rng);
            l.ln1.init(ps);
            l.cross.init(ps, rng);
            l.ln2.init(ps);
            l.ff.init(ps, rng);
            l.ln3.init(ps);
        }
    }

    pub fn init_params<R: Real>(&self, rng: &mut Rng) -> ParameterSet<R> {
        let mut ps = ParameterSet::new();
        self.init(&mut ps, rng);
        ps
    }

    fn check_input<R: Real>(&self, g: &Graph<R>, x: Var) -> Result<usize> {
        let s = g.shape(x);
        if s.len() != 3 || s[1] != self.config.dims || s[2] != self.config.window {
            return Err(Error::shape(format!(
                "autoencoder expects [B, {}, {}] windows, got {s:?}",
                self.config.dims, self.config.window
            )));
        }
        Ok(s[0])
    }

    fn positions<R: Real>(&self, g: &mut Graph<R>) -> Var {
        let t = positional_table::<R>(self.config.window, self.config.width);
        let t = t.reshape(&[1, self.config.window, self.config.width]).unwrap();
        g.constant(t)
    }

    /// `[B,D,T] -> [B,T,d]` projection plus positions.
    fn embed<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let seq = g.permute(x, &[0, 2, 1]);
        let e = self.input.forward(g, seq);
        if self.config.positions {
            let p = self.positions(g);
            g.add_broadcast(e, p)
        } else {
            e
        }
    }

    /// Contextual vectors `[B,T,d]`.
    pub fn encode<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        self.check_input(g, x)?;
        let mut h = self.embed(g, x);
        for l in &self.encoder {
            let a = l.att.forward(g, h, h);
            let r = g.add(h, a);
            h = l.ln1.forward(g, r);
            let f = l.ff.forward(g, h);
            let r = g.add(h, f);
            h = l.ln2.forward(g, r);
        }
        Ok(h)
    }

    /// Mean over timesteps: `[B,T,d] -> [B,1,d]`.
    pub fn bottleneck<R: Real>(&self, g: &mut Graph<R>, hidden: Var) -> Var {
        g.mean_axis(hidden, 1)
    }

    fn decoder_sequence<R: Real>(&self, g: &mut Graph<R>, x: Var, batch: usize) -> Var {
        match self.config.decoder_input {
            DecoderInput::Embedded => self.embed(g, x),
            DecoderInput::PositionOnly => {
                let (t, d) = (self.config.window, self.config.width);
                let pos = positional_table::<R>(t, d).into_data();
                let data = (0..batch).flat_map(|_| pos.iter().copied()).collect();
                g.constant(Tensor::new(&[batch, t, d], data).unwrap())
            }
        }
    }

    fn decode_traced<R: Real>(&self, g: &mut Graph<R>, x: Var, z: Var) -> Result<(Var, Var, Var)> {
        let b = self.check_input(g, x)?;
        if g.shape(z) != [b, 1, self.config.width] {
            return Err(Error::shape(format!(
                "bottleneck must be [{b}, 1, {}], got {:?}",
                self.config.width,
                g.shape(z)
            )));
        }
        let mut s = self.decoder_sequence(g, x, b);
        let mut first = None;
        for l in &self.decoder {
            let a = l.self_att.forward(g, s, s);
            let r = g.add(s, a);
            s = l.ln1.forward(g, r);
            let (ctx, c) = l.cross.forward_parts(g, s, z);
            if first.is_none() {
                first = Some((ctx, l.cross.project_values(g, z)));
            }
            let r = g.add(s, c);
            s = l.ln2.forward(g, r);
            let f = l.ff.forward(g, s);
            let r = g.add(s, f);
            s = l.ln3.forward(g, r);
        }
        let y = self.output.forward(g, s);
        let y = g.permute(y, &[0, 2, 1]);
        let (ctx, vals) = first.unwrap();
        Ok((y, ctx, vals))
    }

    /// Reconstruction `[B,D,T]` from the window and its bottleneck.
    pub fn decode<R: Real>(&self, g: &mut Graph<R>, x: Var, z: Var) -> Result<Var> {
        Ok(self.decode_traced(g, x, z)?.0)
    }

    pub fn forward_traced<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Result<AeTrace> {
        let hidden = self.encode(g, x)?;
        let z = self.bottleneck(g, hidden);
        let (recon, cross_context, cross_values) = self.decode_traced(g, x, z)?;
        Ok(AeTrace {
            hidden,
            z,
            cross_context,
            cross_values,
            recon,
        })
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Result<Var> {
        Ok(self.forward_traced(g, x)?.recon)
    }

    /// `(loss, recon)` with the mean-squared reconstruction error.
    pub fn loss<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Result<(Var, Var)> {
        let recon = self.forward(g, x)?;
        Ok((g.mse(recon, x), recon))
    }

    /// Reconstruct a batch without recording gradients.
    pub fn reconstruct<R: Real>(&self, params: &ParameterSet<R>, x: &Tensor<R>) -> Result<Tensor<R>> {
        let mut g = Graph::new();
        g.bind_frozen(params);
        let xv = g.constant(x.clone());
        let y = self.forward(&mut g, xv)?;
        Ok(g.value(y).clone())
    }
}

/// Per-timestep squared error `s_t = ||x_t - x̂_t||²` for each window of a
/// `[B,D,T]` pair.
pub fn ae_score<R: Real>(x: &Tensor<R>, recon: &Tensor<R>) -> Result<Vec<Vec<f64>>> {
    squared_error_columns(x, recon, 1.0)
}

pub(crate) fn squared_error_columns<R: Real>(x: &Tensor<R>, y: &Tensor<R>, scale: f64) -> Result<Vec<Vec<f64>>> {
    if x.shape() != y.shape() || x.shape().len() != 3 {
        return Err(Error::shape(format!(
            "score inputs {:?} and {:?} must be matching [B,D,T]",
            x.shape(),
            y.shape()
        )));
    }
    let (b, d, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (xs, ys) = (x.data(), y.data());
    Ok((0..b)
        .map(|i| {
            (0..t)
                .map(|j| {
                    let s: f64 = (0..d)
                        .map(|k| {
                            let o = (i * d + k) * t + j;
                            let e = xs[o].as_f64() - ys[o].as_f64();
                            e * e
                        })
                        .sum();
                    s * scale
                })
                .collect()
        })
        .collect())
}
