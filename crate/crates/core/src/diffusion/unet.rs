//! U-Net noise predictor over single-channel `D×T` images.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::substrate::nn::{sinusoidal, Conv2d, GroupNorm, Linear};
use crate::substrate::{Graph, ParameterSet, Real, Tensor, Var};

/// Dataset family, selecting the downsampling ladder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetClass {
    #[default]
    Synthetic,
    Real,
}

impl DatasetClass {
    /// Cumulative downsampling factor after each level.
    pub fn factors(self) -> Vec<usize> {
        match self {
            DatasetClass::Synthetic => vec![2, 4],
            DatasetClass::Real => vec![2, 4, 8],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub base_channels: usize,
    /// Cumulative downsampling factors, each twice the previous.
    pub factors: Vec<usize>,
    pub groups: usize,
    pub time_dim: usize,
}

impl UNetConfig {
    pub fn new(class: DatasetClass) -> Self {
        Self {
            base_channels: 32,
            factors: class.factors(),
            groups: 8,
            time_dim: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 {
            return Err(Error::config("U-Net widths must be positive and time_dim even"));
        }
        if self.factors.is_empty() {
            return Err(Error::config("U-Net needs at least one downsampling level"));
        }
        let mut expect = 2;
        for &f in &self.factors {
            if f != expect {
                return Err(Error::config(format!(
                    "downsampling factors {:?} must be 2, 4, 8, ...",
                    self.factors
                )));
            }
            expect *= 2;
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.factors.len()
    }

    /// Padded extent of an axis of length `n`.
    pub fn padded(&self, n: usize) -> usize {
        let m = self.factors.last().copied().unwrap_or(1);
        n.div_ceil(m) * m
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    conv1: Conv2d,
    gn1: GroupNorm,
    temb: Linear,
    conv2: Conv2d,
    gn2: GroupNorm,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new(name: &str, cin: usize, cout: usize, time_dim: usize, groups: usize) -> Self {
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), cin, cout, 3).standardized(),
            gn1: GroupNorm::new(format!("{name}.gn1"), cout, groups),
            temb: Linear::new(format!("{name}.temb"), time_dim, cout),
            conv2: Conv2d::new(format!("{name}.conv2"), cout, cout, 3).standardized(),
            gn2: GroupNorm::new(format!("{name}.gn2"), cout, groups),
            skip: (cin != cout).then(|| Conv2d::new(format!("{name}.skip"), cin, cout, 1)),
        }
    }

    fn init<R: Real>(&self, ps: &mut ParameterSet<R>, rng: &mut Rng) {
        self.conv1.init(ps, rng);
        self.gn1.init(ps);
        self.temb.init(ps, rng);
        self.conv2.init(ps, rng);
        self.gn2.init(ps);
        if let Some(s) = &self.skip {
            s.init(ps, rng);
        }
    }

    /// `x: [B,C,H,W]`, `t: [B,time_dim]` (already activated).
    fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var, t: Var) -> Var {
        let h = self.conv1.forward(g, x);
        let h = self.gn1.forward(g, h);
        let e = self.temb.forward(g, t);
        let b = g.shape(e)[0];
        let e = g.reshape(e, &[b, self.conv1.cout, 1, 1]);
        let h = g.add_broadcast(h, e);
        let h = g.silu(h);
        let h = self.conv2.forward(g, h);
        let h = self.gn2.forward(g, h);
        let h = g.silu(h);
        let r = match &self.skip {
            Some(s) => s.forward(g, x),
            None => x,
        };
        g.add(h, r)
    }
}

#[derive(Clone, Debug)]
struct Level {
    block: ResBlock,
    down: Conv2d,
    up: Conv2d,
    up_block: ResBlock,
}

/// Noise predictor `ε_θ(x, n)` with output shape equal to input shape.
#[derive(Clone, Debug)]
pub struct UNet {
    pub config: UNetConfig,
    prefix: String,
    time1: Linear,
    time2: Linear,
    stem: Conv2d,
    levels: Vec<Level>,
    mid: ResBlock,
    head: Conv2d,
}

impl UNet {
    pub fn new(config: UNetConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let td = config.time_dim;
        let gr = config.groups;
        let ch = |i: usize| c << i;
        let mut levels = Vec::new();
        let mut cin = c;
        for i in 0..config.levels() {
            let n = format!("{prefix}.l{i}");
            let co = ch(i);
            let deeper = if i + 1 < config.levels() { ch(i + 1) } else { ch(i) * 2 };
            levels.push(Level {
                block: ResBlock::new(&format!("{n}.down_block"), cin, co, td, gr),
                down: Conv2d::new(format!("{n}.down"), 4 * co, co, 1),
                up: Conv2d::new(format!("{n}.up"), deeper, co, 3),
                up_block: ResBlock::new(&format!("{n}.up_block"), 2 * co, co, td, gr),
            });
            cin = co;
        }
        let deepest = ch(config.levels() - 1);
        Ok(Self {
            time1: Linear::new(format!("{prefix}.time1"), td, td),
            time2: Linear::new(format!("{prefix}.time2"), td, td),
            stem: Conv2d::new(format!("{prefix}.stem"), 1, c, 3),
            mid: ResBlock::new(&format!("{prefix}.mid"), deepest, 2 * deepest, td, gr),
            head: Conv2d::new(format!("{prefix}.head"), c, 1, 1),
            prefix: prefix.to_string(),
            levels,
            config,
        })
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn init<R: Real>(&self, ps: &mut ParameterSet<R>, rng: &mut Rng) {
        self.time1.init(ps, rng);
        self.time2.init(ps, rng);
        self.stem.init(ps, rng);
        for l in &self.levels {
            l.block.init(ps, rng);
            l.down.init(ps, rng);
            l.up.init(ps, rng);
            l.up_block.init(ps, rng);
        }
        self.mid.init(ps, rng);
        self.head.init(ps, rng);
    }

    pub fn init_params<R: Real>(&self, rng: &mut Rng) -> ParameterSet<R> {
        let mut ps = ParameterSet::new();
        self.init(&mut ps, rng);
        ps
    }

    fn time_embedding<R: Real>(&self, g: &mut Graph<R>, levels: &[usize]) -> Var {
        let td = self.config.time_dim;
        let data: Vec<R> = levels
            .iter()
            .flat_map(|&n| sinusoidal(n as f64, td))
            .map(R::lit)
            .collect();
        let e = g.constant(Tensor::new(&[levels.len(), td], data).unwrap());
        let e = self.time1.forward(g, e);
        let e = g.silu(e);
        let e = self.time2.forward(g, e);
        g.silu(e)
    }

    /// Predict noise for `x: [B,D,T]` at noise levels `levels` (one per
    /// sample), returning `[B,D,T]`.
    pub fn forward<R: Real>(&self, g: &mut Graph<R>, x: Var, levels: &[usize]) -> Result<Var> {
        let s = g.shape(x).to_vec();
        if s.len() != 3 || s[0] != levels.len() {
            return Err(Error::shape(format!(
                "denoiser expects [B,D,T] with B = {} noise levels, got {s:?}",
                levels.len()
            )));
        }
        let (b, d, t) = (s[0], s[1], s[2]);
        let (hp, wp) = (self.config.padded(d), self.config.padded(t));
        let (top, left) = ((hp - d) / 2, (wp - t) / 2);
        let temb = self.time_embedding(g, levels);

        let x = g.reshape(x, &[b, 1, d, t]);
        let x = g.pad2d(x, (top, hp - d - top, left, wp - t - left));
        let mut h = self.stem.forward(g, x);
        let mut skips = Vec::with_capacity(self.levels.len());
        for l in &self.levels {
            h = l.block.forward(g, h, temb);
            skips.push(h);
            h = g.space_to_depth(h);
            h = l.down.forward(g, h);
        }
        h = self.mid.forward(g, h, temb);
        for (l, skip) in self.levels.iter().zip(skips).rev() {
            h = g.upsample2(h);
            h = l.up.forward(g, h);
            h = g.concat(h, skip, 1);
            h = l.up_block.forward(g, h, temb);
        }
        let y = self.head.forward(g, h);
        let y = g.crop2d(y, (top, left), (d, t));
        Ok(g.reshape(y, &[b, d, t]))
    }
}
