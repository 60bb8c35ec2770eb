//! Layer building blocks. Each layer knows its parameter names and shapes;
//! parameters themselves live in a [`ParameterSet`] bound to the [`Graph`].

use rand::Rng;

use super::kernels::{self, NormEps};
use super::{Graph, ParameterSet, Real, Tensor, Var};

/// Denominator offset used by [`standardize_weights`].
pub const WS_EPS: f64 = 1e-5;
const NORM_EPS: f64 = 1e-5;

/// Per output channel (leading axis), shift to zero mean and divide by
/// `std + 1e-5`.
pub fn standardize_weights<R: Real>(kernel: &Tensor<R>) -> Tensor<R> {
    let rows = kernel.shape()[0];
    let row = kernel.len() / rows;
    let (y, _, _) = kernels::normalize_rows(kernel.data(), row, NormEps::OnStd(WS_EPS));
    Tensor::from_parts(kernel.shape().to_vec(), y)
}

/// Interleaved sine/cosine encoding of a scalar position.
pub fn sinusoidal(position: f64, dim: usize) -> Vec<f64> {
    (0..dim)
        .map(|j| {
            let i = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * i / dim as f64);
            if j % 2 == 0 {
                (position * freq).sin()
            } else {
                (position * freq).cos()
            }
        })
        .collect()
}

/// `[len, dim]` table of [`sinusoidal`] rows for positions `0..len`.
pub fn positional_table<R: Real>(len: usize, dim: usize) -> Tensor<R> {
    let data: Vec<R> = (0..len)
        .flat_map(|t| sinusoidal(t as f64, dim))
        .map(R::lit)
        .collect();
    Tensor::from_parts(vec![len, dim], data)
}

fn fan_in_uniform<R: Real, G: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut G) -> Tensor<R> {
    Tensor::uniform(shape, 1.0 / (fan_in as f64).sqrt(), rng)
}

/// Broadcast a trailing-axis vector `v: [n]` against a tensor of rank `rank`.
fn as_trailing(g: &mut Graph<impl Real>, v: Var, rank: usize) -> Var {
    let n = g.shape(v)[0];
    let mut shape = vec![1; rank];
    shape[rank - 1] = n;
    g.reshape(v, &shape)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init<R: Real, G: Rng + ?Sized>(&self, ps: &mut ParameterSet<R>, rng: &mut G) {
        ps.insert(format!("{}.w", self.name), fan_in_uniform(&[self.din, self.dout], self.din, rng));
        ps.insert(format!("{}.b", self.name), fan_in_uniform(&[self.dout], self.din, rng));
    }

    /// `x: [..., din] -> [..., dout]`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let shape = g.shape(x).to_vec();
        assert_eq!(*shape.last().unwrap(), self.din, "{}: input width", self.name);
        let rows = g.value(x).len() / self.din;
        let x2 = g.reshape(x, &[rows, self.din]);
        let w = g.param(&format!("{}.w", self.name));
        let b = g.param(&format!("{}.b", self.name));
        let y = g.matmul(x2, w);
        let b2 = g.reshape(b, &[1, self.dout]);
        let y = g.add_broadcast(y, b2);
        let mut out = shape;
        *out.last_mut().unwrap() = self.dout;
        g.reshape(y, &out)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self {
            name: name.into(),
            dim,
        }
    }

    pub fn init<R: Real>(&self, ps: &mut ParameterSet<R>) {
        ps.insert(format!("{}.g", self.name), Tensor::full(&[self.dim], R::one()));
        ps.insert(format!("{}.b", self.name), Tensor::zeros(&[self.dim]));
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let rank = g.shape(x).len();
        let y = g.normalize(x, self.dim, NormEps::InsideSqrt(NORM_EPS));
        let gamma = g.param(&format!("{}.g", self.name));
        let beta = g.param(&format!("{}.b", self.name));
        let gamma = as_trailing(g, gamma, rank);
        let beta = as_trailing(g, beta, rank);
        let y = g.mul_broadcast(y, gamma);
        g.add_broadcast(y, beta)
    }
}

/// Multi-head scaled dot-product attention with input/output projections.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: impl Into<String>, dim: usize, heads: usize) -> Self {
        let name = name.into();
        assert!(heads > 0 && dim % heads == 0, "{name}: width {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim),
            v: Linear::new(format!("{name}.v"), dim, dim),
            o: Linear::new(format!("{name}.o"), dim, dim),
            name,
            dim,
            heads,
        }
    }

    pub fn init<R: Real, G: Rng + ?Sized>(&self, ps: &mut ParameterSet<R>, rng: &mut G) {
        for l in [&self.q, &self.k, &self.v, &self.o] {
            l.init(ps, rng);
        }
    }

    fn split_heads<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let (b, t) = (s[0], s[1]);
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[b, t, self.heads, dh]);
        let x = g.permute(x, &[0, 2, 1, 3]);
        g.reshape(x, &[b * self.heads, t, dh])
    }

    /// Returns `(context, output)`: the head-merged attention result before
    /// the output projection, and the projected output.
    ///
    /// `query: [B,Tq,d]`, `memory: [B,Tk,d]`.
    pub fn forward_parts<R: Real>(&self, g: &mut Graph<R>, query: Var, memory: Var) -> (Var, Var) {
        let (b, tq) = (g.shape(query)[0], g.shape(query)[1]);
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, query);
        let k = self.k.forward(g, memory);
        let v = self.v.forward(g, memory);
        let (q, k, v) = (self.split_heads(g, q), self.split_heads(g, k), self.split_heads(g, v));
        let scores = g.matmul_t(q, k, false, true);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let p = g.softmax(scores);
        let ctx = g.matmul(p, v);
        let ctx = g.reshape(ctx, &[b, self.heads, tq, dh]);
        let ctx = g.permute(ctx, &[0, 2, 1, 3]);
        let ctx = g.reshape(ctx, &[b, tq, self.dim]);
        let out = self.o.forward(g, ctx);
        (ctx, out)
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, query: Var, memory: Var) -> Var {
        self.forward_parts(g, query, memory).1
    }

    /// Value projection alone, for checking the single-key identity.
    pub fn project_values<R: Real>(&self, g: &mut Graph<R>, memory: Var) -> Var {
        self.v.forward(g, memory)
    }
}

/// Position-wise `Linear -> ReLU -> Linear`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    a: Linear,
    b: Linear,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        Self {
            a: Linear::new(format!("{name}.a"), dim, hidden),
            b: Linear::new(format!("{name}.b"), hidden, dim),
        }
    }

    pub fn init<R: Real, G: Rng + ?Sized>(&self, ps: &mut ParameterSet<R>, rng: &mut G) {
        self.a.init(ps, rng);
        self.b.init(ps, rng);
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let h = self.a.forward(g, x);
        let h = g.relu(h);
        self.b.forward(g, h)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    pub name: String,
    pub channels: usize,
    pub groups: usize,
}

impl GroupNorm {
    pub fn new(name: impl Into<String>, channels: usize, groups: usize) -> Self {
        let groups = groups.clamp(1, channels);
        let groups = (1..=groups).rev().find(|g| channels % g == 0).unwrap_or(1);
        Self {
            name: name.into(),
            channels,
            groups,
        }
    }

    pub fn init<R: Real>(&self, ps: &mut ParameterSet<R>) {
        ps.insert(format!("{}.g", self.name), Tensor::full(&[self.channels], R::one()));
        ps.insert(format!("{}.b", self.name), Tensor::zeros(&[self.channels]));
    }

    /// `x: [B,C,H,W]`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let s = g.shape(x).to_vec();
        let row = (self.channels / self.groups) * s[2] * s[3];
        let y = g.normalize(x, row, NormEps::InsideSqrt(NORM_EPS));
        let gamma = g.param(&format!("{}.g", self.name));
        let beta = g.param(&format!("{}.b", self.name));
        let gamma = g.reshape(gamma, &[1, self.channels, 1, 1]);
        let beta = g.reshape(beta, &[1, self.channels, 1, 1]);
        let y = g.mul_broadcast(y, gamma);
        g.add_broadcast(y, beta)
    }
}

/// Square-kernel stride-1 convolution, optionally weight standardized.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub standardized: bool,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            kernel,
            standardized: false,
        }
    }

    pub fn standardized(mut self) -> Self {
        // a single-element fan-in standardizes to zero
        self.standardized = self.cin * self.kernel * self.kernel > 1;
        self
    }

    pub fn init<R: Real, G: Rng + ?Sized>(&self, ps: &mut ParameterSet<R>, rng: &mut G) {
        let fan = self.cin * self.kernel * self.kernel;
        ps.insert(
            format!("{}.w", self.name),
            fan_in_uniform(&[self.cout, self.cin, self.kernel, self.kernel], fan, rng),
        );
        ps.insert(format!("{}.b", self.name), fan_in_uniform(&[self.cout], fan, rng));
    }

    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var) -> Var {
        let mut w = g.param(&format!("{}.w", self.name));
        if self.standardized {
            let row = self.cin * self.kernel * self.kernel;
            w = g.normalize(w, row, NormEps::OnStd(WS_EPS));
        }
        let b = g.param(&format!("{}.b", self.name));
        g.conv2d(x, w, Some(b), self.kernel / 2)
    }
}
