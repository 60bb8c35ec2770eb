//! Denoising diffusion over `D×T` windows: the noise schedule, closed-form
//! forward corruption, the noise-prediction loss, the reverse step and the
//! reconstruction score.

mod unet;

pub use unet::{DatasetClass, UNet, UNetConfig};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autoencoder::squared_error_columns;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::substrate::{Graph, ParameterSet, Real, Tensor, Var};

/// Linear-variance schedule tables, indexed by noise level `n = 1..=N`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    beta_tildes: Vec<f64>,
}

impl NoiseSchedule {
    /// `β_n = β_1 + (n-1)/(N-1) (β_N - β_1)`.
    pub fn linear(steps: usize, beta_1: f64, beta_n: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one noise level"));
        }
        if !(beta_1 > 0.0 && beta_1 <= beta_n && beta_n < 1.0) {
            return Err(Error::config(format!(
                "schedule needs 0 < beta_1 <= beta_N < 1, got ({beta_1}, {beta_n})"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_1
                } else {
                    beta_1 + i as f64 / (steps - 1) as f64 * (beta_n - beta_1)
                }
            })
            .collect();
        Ok(Self::from_betas(betas))
    }

    pub fn from_betas(betas: Vec<f64>) -> Self {
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let beta_tildes = (0..betas.len())
            .map(|i| {
                let prev = if i == 0 { 1.0 } else { alpha_bars[i - 1] };
                (1.0 - prev) / (1.0 - alpha_bars[i]) * betas[i]
            })
            .collect();
        Self {
            betas,
            alphas,
            alpha_bars,
            beta_tildes,
        }
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, n: usize) -> f64 {
        self.betas[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        self.alphas[n - 1]
    }

    pub fn alpha_bar(&self, n: usize) -> f64 {
        self.alpha_bars[n - 1]
    }

    pub fn beta_tilde(&self, n: usize) -> f64 {
        self.beta_tildes[n - 1]
    }
}

/// Coefficient on the fresh noise in the reverse step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseCoefficient {
    /// `β̃_n · z`.
    #[default]
    BetaTilde,
    /// `√β̃_n · z`.
    SqrtBetaTilde,
}

/// `x_n = √ᾱ_n x_0 + √(1-ᾱ_n) ε`; `n = 0` returns `x_0`.
pub fn q_sample<R: Real>(s: &NoiseSchedule, x0: &[R], n: usize, eps: &[R]) -> Vec<R> {
    if n == 0 {
        return x0.to_vec();
    }
    let (a, b) = (s.alpha_bar(n).sqrt(), (1.0 - s.alpha_bar(n)).sqrt());
    x0.iter()
        .zip(eps)
        .map(|(&x, &e)| R::lit(a * x.as_f64() + b * e.as_f64()))
        .collect()
}

/// One reverse step
/// `x_{n-1} = (x_n - β_n/√(1-ᾱ_n) ε̂) / √α_n + c_n z`, with `z` ignored at `n = 1`.
pub fn p_sample_step<R: Real>(
    s: &NoiseSchedule,
    x_n: &[R],
    eps_hat: &[R],
    n: usize,
    z: &[R],
    coef: NoiseCoefficient,
) -> Vec<R> {
    let k = s.beta(n) / (1.0 - s.alpha_bar(n)).sqrt();
    let inv = 1.0 / s.alpha(n).sqrt();
    let c = if n == 1 {
        0.0
    } else {
        match coef {
            NoiseCoefficient::BetaTilde => s.beta_tilde(n),
            NoiseCoefficient::SqrtBetaTilde => s.beta_tilde(n).sqrt(),
        }
    };
    x_n.iter()
        .zip(eps_hat)
        .enumerate()
        .map(|(i, (&x, &e))| {
            let zi = if c == 0.0 { 0.0 } else { z[i].as_f64() };
            R::lit((x.as_f64() - k * e.as_f64()) * inv + c * zi)
        })
        .collect()
}

pub fn standard_normal<R: Real>(len: usize, rng: &mut Rng) -> Vec<R> {
    (0..len)
        .map(|_| R::lit(StandardNormal.sample(rng)))
        .collect()
}

/// Per-timestep `(1/D) ||x_t - x̃_t||²` for each window of a `[B,D,T]` pair.
pub fn diff_score<R: Real>(x0: &Tensor<R>, recon: &Tensor<R>) -> Result<Vec<Vec<f64>>> {
    let d = x0.shape().get(1).copied().unwrap_or(1).max(1);
    squared_error_columns(x0, recon, 1.0 / d as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionConfig {
    /// Training noise levels `N`.
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Test-time noise levels to choose from.
    pub candidates: Vec<usize>,
    pub noise_coefficient: NoiseCoefficient,
    pub unet: UNetConfig,
}

impl DiffusionConfig {
    pub fn new(class: DatasetClass) -> Self {
        Self {
            steps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            candidates: vec![10, 20, 50, 60, 80],
            noise_coefficient: NoiseCoefficient::BetaTilde,
            unet: UNetConfig::new(class),
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule()?;
        self.unet.validate()?;
        if self.candidates.is_empty() {
            return Err(Error::config("no test-time noise levels given"));
        }
        if let Some(&m) = self.candidates.iter().find(|&&m| m == 0 || m > self.steps) {
            return Err(Error::config(format!(
                "test noise level {m} outside 1..={}",
                self.steps
            )));
        }
        Ok(())
    }
}

/// Noise-prediction loss over a batch: per-sample `||ε - ε̂||²` averaged over
/// the batch. `x0: [B,D,T]` may be a data constant or a model output.
pub fn noise_loss<R: Real>(
    g: &mut Graph<R>,
    net: &UNet,
    s: &NoiseSchedule,
    x0: Var,
    levels: &[usize],
    eps: &Tensor<R>,
) -> Result<Var> {
    let shape = g.shape(x0).to_vec();
    if eps.shape() != shape.as_slice() || levels.len() != shape[0] {
        return Err(Error::shape(format!(
            "noise {:?} and {} levels do not fit batch {shape:?}",
            eps.shape(),
            levels.len()
        )));
    }
    let b = shape[0];
    let per = eps.len() / b;
    let a: Vec<R> = levels.iter().map(|&n| R::lit(s.alpha_bar(n).sqrt())).collect();
    let scaled_eps: Vec<R> = eps
        .data()
        .iter()
        .enumerate()
        .map(|(i, &e)| R::lit(e.as_f64() * (1.0 - s.alpha_bar(levels[i / per])).sqrt()))
        .collect();
    let a = g.constant(Tensor::new(&[b, 1, 1], a)?);
    let noise = g.constant(Tensor::new(&shape, scaled_eps)?);
    let xs = g.mul_broadcast(x0, a);
    let xn = g.add(xs, noise);
    let pred = net.forward(g, xn, levels)?;
    let target = g.constant(eps.clone());
    let err = g.sub(target, pred);
    let sq = g.square(err);
    let total = g.sum_all(sq);
    Ok(g.scale(total, 1.0 / b as f64))
}

/// Uniform noise levels and standard-normal noise for a batch of `shape`.
pub fn draw_training_noise<R: Real>(steps: usize, shape: &[usize], rng: &mut Rng) -> (Vec<usize>, Tensor<R>) {
    use rand::Rng as _;
    let levels = (0..shape[0]).map(|_| rng.random_range(1..=steps)).collect();
    let n = shape.iter().product();
    (levels, Tensor::new(shape, standard_normal(n, rng)).unwrap())
}

/// Run the reverse chain from `x_m: [B,D,T]` down to level 0. Each window
/// draws its step noise from its own generator in `rngs`.
pub fn reverse_from<R: Real>(
    net: &UNet,
    params: &ParameterSet<R>,
    s: &NoiseSchedule,
    x_m: Tensor<R>,
    m: usize,
    coef: NoiseCoefficient,
    rngs: &mut [Rng],
) -> Result<Tensor<R>> {
    let shape = x_m.shape().to_vec();
    let b = shape[0];
    if rngs.len() != b {
        return Err(Error::shape(format!("{} generators for {b} windows", rngs.len())));
    }
    if m > s.steps() {
        return Err(Error::config(format!("noise level {m} above N = {}", s.steps())));
    }
    let per = x_m.len() / b;
    let mut x = x_m;
    for n in (1..=m).rev() {
        let mut g = Graph::new();
        g.bind_frozen(params);
        let xv = g.constant(x.clone());
        let pred = net.forward(&mut g, xv, &vec![n; b])?;
        let eps_hat = g.value(pred);
        let z: Vec<R> = if n > 1 {
            rngs.iter_mut().flat_map(|r| standard_normal::<R>(per, r)).collect()
        } else {
            vec![R::zero(); x.len()]
        };
        let next = p_sample_step(s, x.data(), eps_hat.data(), n, &z, coef);
        x = Tensor::new(&shape, next)?;
    }
    if !x.all_finite() {
        return Err(Error::NonFinite(format!("reverse chain from level {m} diverged")));
    }
    Ok(x)
}

/// Corrupt `start` to level `m` and denoise it back; `start` is the only
/// input the chain sees.
pub fn corrupt_and_denoise<R: Real>(
    net: &UNet,
    params: &ParameterSet<R>,
    s: &NoiseSchedule,
    start: &Tensor<R>,
    m: usize,
    coef: NoiseCoefficient,
    rngs: &mut [Rng],
) -> Result<Tensor<R>> {
    if m == 0 {
        return Ok(start.clone());
    }
    let b = start.shape()[0];
    let per = start.len() / b;
    let eps: Vec<R> = rngs.iter_mut().flat_map(|r| standard_normal::<R>(per, r)).collect();
    let xm = Tensor::new(start.shape(), q_sample(s, start.data(), m, &eps))?;
    reverse_from(net, params, s, xm, m, coef, rngs)
}

/// Evaluation generators: one per window, keyed by the window's index.
pub fn window_rngs(seed: u64, first: usize, count: usize) -> Vec<Rng> {
    (first..first + count)
        .map(|i| rng::stream(seed, rng::label("eval") ^ i as u64))
        .collect()
}

/// Pick the candidate with the highest score; ties go to the smaller level.
pub fn select_m(candidates: &[usize], mut score: impl FnMut(usize) -> Result<f64>) -> Result<(usize, Vec<(usize, f64)>)> {
    if candidates.is_empty() {
        return Err(Error::config("no noise levels to select from"));
    }
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let mut scan: Vec<(usize, f64)> = Vec::with_capacity(sorted.len());
    let mut best = 0;
    for (i, &m) in sorted.iter().enumerate() {
        let v = score(m)?;
        if i == 0 || v > scan[best].1 {
            best = i;
        }
        scan.push((m, v));
    }
    Ok((scan[best].0, scan))
}

/// Diffusion detector: a U-Net denoiser with its schedule.
#[derive(Clone, Debug)]
pub struct DiffusionModel {
    pub config: DiffusionConfig,
    pub unet: UNet,
    pub schedule: NoiseSchedule,
}

impl DiffusionModel {
    pub fn new(config: DiffusionConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            unet: UNet::new(config.unet.clone(), prefix)?,
            schedule: config.schedule()?,
            config,
        })
    }

    /// Loss graph for a batch of clean windows.
    pub fn loss<R: Real>(&self, g: &mut Graph<R>, x0: Var, rng: &mut Rng) -> Result<Var> {
        let shape = g.shape(x0).to_vec();
        let (levels, eps) = draw_training_noise(self.schedule.steps(), &shape, rng);
        noise_loss(g, &self.unet, &self.schedule, x0, &levels, &eps)
    }

    /// Denoised reconstructions of `x0: [B,D,T]` from level `m`.
    pub fn denoise<R: Real>(&self, params: &ParameterSet<R>, x0: &Tensor<R>, m: usize, rngs: &mut [Rng]) -> Result<Tensor<R>> {
        corrupt_and_denoise(
            &self.unet,
            params,
            &self.schedule,
            x0,
            m,
            self.config.noise_coefficient,
            rngs,
        )
    }

    pub fn score<R: Real>(&self, params: &ParameterSet<R>, x0: &Tensor<R>, m: usize, rngs: &mut [Rng]) -> Result<Vec<Vec<f64>>> {
        let rec = self.denoise(params, x0, m, rngs)?;
        diff_score(x0, &rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_step_products() {
        let s = NoiseSchedule::linear(2, 0.1, 0.2).unwrap();
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
        assert!((s.alpha_bar(2) - 0.72).abs() < 1e-15);
        assert_eq!(s.beta_tilde(1), 0.0);
        assert!(NoiseSchedule::linear(10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.1).is_err());
        assert!(NoiseSchedule::linear(10, 0.1, 1.0).is_err());
    }

    #[test]
    fn constant_beta_powers() {
        let s = NoiseSchedule::linear(7, 0.05, 0.05).unwrap();
        for n in 1..=7 {
            assert!((s.alpha_bar(n) - 0.95f64.powi(n as i32)).abs() < 1e-14);
        }
    }

    #[test]
    fn q_sample_cases() {
        let s = NoiseSchedule::linear(10, 1e-4, 0.02).unwrap();
        let x = [1.0, -2.0];
        let y = q_sample(&s, &x, 5, &[0.0, 0.0]);
        assert_eq!(y, vec![s.alpha_bar(5).sqrt(), -2.0 * s.alpha_bar(5).sqrt()]);
        let tiny = NoiseSchedule::linear(3, 1e-15, 1e-15).unwrap();
        let y = q_sample(&tiny, &x, 3, &[0.5, 0.5]);
        assert!((y[0] - 1.0).abs() < 1e-7 && (y[1] + 2.0).abs() < 1e-7);
    }

    #[test]
    fn select_m_rules() {
        assert_eq!(select_m(&[20], |_| Ok(0.3)).unwrap().0, 20);
        assert_eq!(select_m(&[50, 10, 20], |_| Ok(0.5)).unwrap().0, 10);
        let (m, scan) = select_m(&[10, 20, 50], |m| Ok(if m == 20 { 0.9 } else { 0.4 })).unwrap();
        assert_eq!(m, 20);
        assert_eq!(scan.len(), 3);
        assert!(select_m(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn diff_score_examples() {
        let x = Tensor::<f64>::new(&[1, 2, 1], vec![1.0, 1.0]).unwrap();
        let z = Tensor::<f64>::zeros(&[1, 2, 1]);
        assert_eq!(diff_score(&x, &z).unwrap(), vec![vec![1.0]]);
        assert_eq!(diff_score(&x, &x).unwrap(), vec![vec![0.0]]);
    }
}
