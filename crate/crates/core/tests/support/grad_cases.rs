//! Gradient checks shared by the unit tests and the acceptance run: each
//! case builds a small graph and compares reverse-mode gradients against
//! central differences in 64-bit.

use diffad::diffusion::{draw_training_noise, noise_loss, DiffusionModel};
use diffad::diffusion_ae::{DiffusionAe, DiffusionReduction, JointConfig};
use diffad::autoencoder::Autoencoder;
use diffad::rng;
use diffad::substrate::check::{check_gradients, GradCheck};
use diffad::substrate::nn::{Conv2d, FeedForward, GroupNorm, LayerNorm, Linear, MultiHeadAttention};
use diffad::substrate::{Graph, NormEps, ParameterSet, Tensor, Var};

use super::tiny::{tiny_ae, tiny_diffusion};

const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng::stream(seed, 0))
}

fn check(params: &ParameterSet<f64>, loss: &dyn Fn(&mut Graph<f64>) -> Var) -> GradCheck {
    check_gradients(params, loss, H, 40).unwrap()
}

/// Weighted sum so every output coordinate gets a distinct upstream gradient.
fn probe_loss(g: &mut Graph<f64>, y: Var, seed: u64) -> Var {
    let w = g.constant(randn(g.shape(y), seed + 1000));
    let p = g.mul(y, w);
    g.sum_all(p)
}

pub fn dense_layer() -> Vec<GradCheck> {
    let lin = Linear::new("lin", 4, 3);
    let mut ps = ParameterSet::new();
    lin.init(&mut ps, &mut rng::stream(1, 1));
    ps.insert("x", randn(&[2, 5, 4], 2));
    vec![check(&ps, &|g| {
        let x = g.param("x");
        let y = lin.forward(g, x);
        probe_loss(g, y, 3)
    })]
}

pub fn elementwise_and_broadcast_ops() -> Vec<GradCheck> {
    let mut ps = ParameterSet::new();
    ps.insert("a", randn(&[2, 3, 4], 4));
    ps.insert("b", randn(&[2, 3, 4], 5));
    ps.insert("row", randn(&[1, 1, 4], 6));
    ps.insert("col", randn(&[2, 3, 1], 7));
    vec![check(&ps, &|g| {
        let (a, b) = (g.param("a"), g.param("b"));
        let s = g.add(a, b);
        let d = g.sub(s, b);
        let m = g.mul(d, b);
        let r = g.mul_broadcast(m, g.param("row"));
        let c = g.add_broadcast(r, g.param("col"));
        let q = g.square(c);
        let q = g.scale(q, 0.3);
        let sl = g.silu(q);
        let t = g.add(sl, a);
        probe_loss(g, t, 8)
    })]
}

pub fn relu_away_from_kink() -> Vec<GradCheck> {
    let mut ps = ParameterSet::new();
    // keep every coordinate well away from zero
    let x = randn(&[3, 4], 9).map(|v| if v >= 0.0 { v + 0.5 } else { v - 0.5 });
    ps.insert("x", x);
    vec![check(&ps, &|g| {
        let y = g.relu(g.param("x"));
        probe_loss(g, y, 10)
    })]
}

pub fn matmul_all_transpositions() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let mut ps = ParameterSet::new();
        let sa = if ta { [2, 4, 3] } else { [2, 3, 4] };
        let sb = if tb { [2, 5, 4] } else { [2, 4, 5] };
        ps.insert("a", randn(&sa, 11));
        ps.insert("b", randn(&sb, 12));
        out.push(check(&ps, &|g| {
            let y = g.matmul_t(g.param("a"), g.param("b"), ta, tb);
            probe_loss(g, y, 13)
        }));
    }
    out
}

pub fn softmax_permute_reshape() -> Vec<GradCheck> {
    let mut ps = ParameterSet::new();
    ps.insert("x", randn(&[2, 3, 4, 5], 14));
    vec![check(&ps, &|g| {
        let x = g.param("x");
        let p = g.permute(x, &[0, 2, 1, 3]);
        let r = g.reshape(p, &[8, 15]);
        let s = g.softmax(r);
        probe_loss(g, s, 15)
    })]
}

pub fn layer_norm() -> Vec<GradCheck> {
    let ln = LayerNorm::new("ln", 6);
    let mut ps = ParameterSet::new();
    ln.init(&mut ps);
    // perturb affine parameters away from the identity
    ps.insert("ln.g", randn(&[6], 16));
    ps.insert("ln.b", randn(&[6], 17));
    ps.insert("x", randn(&[2, 4, 6], 18));
    vec![check(&ps, &|g| {
        let y = ln.forward(g, g.param("x"));
        probe_loss(g, y, 19)
    })]
}

pub fn weight_standardization_normalize() -> Vec<GradCheck> {
    let mut ps = ParameterSet::new();
    ps.insert("w", randn(&[3, 2, 3, 3], 20));
    vec![check(&ps, &|g| {
        let y = g.normalize(g.param("w"), 18, NormEps::OnStd(1e-5));
        probe_loss(g, y, 21)
    })]
}

pub fn group_norm() -> Vec<GradCheck> {
    let gn = GroupNorm::new("gn", 4, 2);
    let mut ps = ParameterSet::new();
    gn.init(&mut ps);
    ps.insert("gn.g", randn(&[4], 22));
    ps.insert("x", randn(&[2, 4, 3, 5], 23));
    vec![check(&ps, &|g| {
        let y = gn.forward(g, g.param("x"));
        probe_loss(g, y, 24)
    })]
}

pub fn convolution_padded_and_pointwise() -> Vec<GradCheck> {
    let mut out = Vec::new();
    for (k, ws) in [(3, false), (3, true), (1, false), (1, true)] {
        let mut conv = Conv2d::new("c", 3, 2, k);
        if ws {
            conv = conv.standardized();
        }
        let mut ps = ParameterSet::new();
        conv.init(&mut ps, &mut rng::stream(25, k as u64));
        ps.insert("x", randn(&[2, 3, 4, 5], 26));
        out.push(check(&ps, &|g| {
            let y = conv.forward(g, g.param("x"));
            probe_loss(g, y, 27)
        }));
    }
    out
}

pub fn spatial_resampling_ops() -> Vec<GradCheck> {
    let mut ps = ParameterSet::new();
    ps.insert("x", randn(&[2, 2, 3, 5], 28));
    ps.insert("s", randn(&[2, 1, 8, 6], 29));
    vec![check(&ps, &|g| {
        let x = g.param("x");
        let p = g.pad2d(x, (1, 0, 0, 1)); // [2,2,4,6]
        let d = g.space_to_depth(p); // [2,8,2,3]
        let u = g.upsample2(d); // [2,8,4,6]
        let c = g.crop2d(u, (0, 0), (4, 6));
        let s = g.param("s");
        let s = g.crop2d(s, (2, 0), (4, 6)); // [2,1,4,6]
        let cat = g.concat(c, s, 1); // [2,9,4,6]
        probe_loss(g, cat, 30)
    })]
}

pub fn mean_pool_over_time() -> Vec<GradCheck> {
    let mut ps = ParameterSet::new();
    ps.insert("h", randn(&[2, 7, 3], 31));
    vec![check(&ps, &|g| {
        let z = g.mean_axis(g.param("h"), 1);
        probe_loss(g, z, 32)
    })]
}

pub fn attention_self_and_cross() -> Vec<GradCheck> {
    let mha = MultiHeadAttention::new("att", 8, 2);
    let ff = FeedForward::new("ff", 8, 12);
    let mut ps = ParameterSet::new();
    mha.init(&mut ps, &mut rng::stream(33, 0));
    ff.init(&mut ps, &mut rng::stream(33, 1));
    ps.insert("q", randn(&[2, 5, 8], 34));
    ps.insert("m", randn(&[2, 3, 8], 35));
    vec![check(&ps, &|g| {
        let q = g.param("q");
        let s = mha.forward(g, q, q);
        let c = mha.forward(g, s, g.param("m"));
        let f = ff.forward(g, c);
        probe_loss(g, f, 36)
    })]
}

pub fn mse_loss() -> Vec<GradCheck> {
    let mut ps = ParameterSet::new();
    ps.insert("a", randn(&[3, 4], 37));
    let target = randn(&[3, 4], 38);
    vec![check(&ps, &|g| {
        let t = g.constant(target.clone());
        g.mse(g.param("a"), t)
    })]
}

pub fn autoencoder_loss() -> Vec<GradCheck> {
    let ae = Autoencoder::new(tiny_ae(3, 8), "ae").unwrap();
    let ps = ae.init_params::<f64>(&mut rng::stream(40, 0));
    let x = randn(&[2, 3, 8], 41);
    vec![check_gradients(&ps, &|g| {
        let xv = g.constant(x.clone());
        ae.loss(g, xv).unwrap().0
    }, H, 5)
    .unwrap()]
}

pub fn diffusion_loss() -> Vec<GradCheck> {
    let model = DiffusionModel::new(tiny_diffusion(), "unet").unwrap();
    let ps = model.unet.init_params::<f64>(&mut rng::stream(42, 0));
    let x = randn(&[2, 3, 8], 43);
    let (levels, eps) = draw_training_noise::<f64>(100, &[2, 3, 8], &mut rng::stream(44, 0));
    vec![check_gradients(&ps, &|g| {
        let xv = g.constant(x.clone());
        noise_loss(g, &model.unet, &model.schedule, xv, &levels, &eps).unwrap()
    }, H, 5)
    .unwrap()]
}

/// The joint loss with gradients reaching the autoencoder through the
/// reconstruction, for both reductions of the diffusion term.
pub fn joint_loss() -> Vec<GradCheck> {
    [DiffusionReduction::Sum, DiffusionReduction::Mean]
        .into_iter()
        .map(|reduction| {
            let m = DiffusionAe::new(
                tiny_ae(3, 8),
                tiny_diffusion(),
                JointConfig {
                    reduction,
                    ..JointConfig::default()
                },
            )
            .unwrap();
            let ps = m.init_params::<f64>(&mut rng::stream(11, 0), &mut rng::stream(12, 0));
            let x = randn(&[2, 3, 8], 45);
            let (levels, eps) = draw_training_noise::<f64>(100, &[2, 3, 8], &mut rng::stream(46, 0));
            check_gradients(&ps, &|g| {
                let xv = g.constant(x.clone());
                m.joint_loss_with(g, xv, &levels, &eps, 0.1).unwrap().total
            }, H, 5)
            .unwrap()
        })
        .collect()
}

pub type Case = (&'static str, fn() -> Vec<GradCheck>);

pub const LAYER_CASES: &[Case] = &[
    ("dense_layer", dense_layer),
    ("elementwise_and_broadcast_ops", elementwise_and_broadcast_ops),
    ("relu_away_from_kink", relu_away_from_kink),
    ("matmul_all_transpositions", matmul_all_transpositions),
    ("softmax_permute_reshape", softmax_permute_reshape),
    ("layer_norm", layer_norm),
    ("weight_standardization_normalize", weight_standardization_normalize),
    ("group_norm", group_norm),
    ("convolution_padded_and_pointwise", convolution_padded_and_pointwise),
    ("spatial_resampling_ops", spatial_resampling_ops),
    ("mean_pool_over_time", mean_pool_over_time),
    ("attention_self_and_cross", attention_self_and_cross),
    ("mse_loss", mse_loss),
];

pub const LOSS_CASES: &[Case] = &[
    ("autoencoder_loss", autoencoder_loss),
    ("diffusion_loss", diffusion_loss),
    ("joint_loss", joint_loss),
];
