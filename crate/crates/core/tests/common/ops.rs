//! Finite-difference checks for every tape operation and for the composite
//! graphs built from them. Each entry reports the worst relative error over
//! `FD_POINTS` random draws.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sganc::autodiff::{Graph, Var};
use sganc::entropy::{DensityModel, FactorizedModel, UniformModel};
use sganc::flow::{CouplingLayer, Direction, FlowConfig, FlowModel};
use sganc::latent::{LatentCode, StageLayout};
use sganc::nn::{Mlp, OutputActivation};
use sganc::tensor::Tensor;
use sganc::trainer::{inter_loss, intra_loss, LearnedModel, NoiseMode, TrainConfig};

use super::*;

type Sampler = Box<dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>>;
type Builder = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Var>;

fn uniform(shapes: &'static [(usize, usize)], lo: f64, hi: f64) -> Sampler {
    Box::new(move |r| shapes.iter().map(|&(a, b)| random_tensor(a, b, lo, hi, r)).collect())
}

fn kinked(shape: (usize, usize), lo: f64, hi: f64, kinks: &'static [f64]) -> Sampler {
    Box::new(move |r| {
        let v = (0..shape.0 * shape.1).map(|_| away_from(lo, hi, kinks, 1e-3, r)).collect();
        vec![Tensor::from_vec(shape.0, shape.1, v)]
    })
}

fn reduce(f: impl Fn(&mut Graph<f64>, &[Var]) -> Var + 'static) -> Builder {
    Box::new(move |g, v| {
        let out = f(g, v);
        weighted_sum(g, out, 7)
    })
}

fn primitive_cases() -> Vec<(&'static str, Sampler, Builder)> {
    vec![
        ("linear", uniform(&[(3, 4), (2, 4), (1, 2)], -1.0, 1.0), reduce(|g, v| g.linear(v[0], v[1], v[2]))),
        ("add", uniform(&[(2, 3), (2, 3)], -2.0, 2.0), reduce(|g, v| g.add(v[0], v[1]))),
        ("sub", uniform(&[(2, 3), (2, 3)], -2.0, 2.0), reduce(|g, v| g.sub(v[0], v[1]))),
        ("mul", uniform(&[(2, 3), (2, 3)], -2.0, 2.0), reduce(|g, v| g.mul(v[0], v[1]))),
        ("mul_row", uniform(&[(3, 4), (1, 4)], -2.0, 2.0), reduce(|g, v| g.mul_row(v[0], v[1]))),
        ("add_row", uniform(&[(3, 4), (1, 4)], -2.0, 2.0), reduce(|g, v| g.add_row(v[0], v[1]))),
        ("scale", uniform(&[(2, 3)], -2.0, 2.0), reduce(|g, v| g.scale(v[0], -1.7))),
        ("exp", uniform(&[(2, 3)], -3.0, 3.0), reduce(|g, v| g.exp(v[0]))),
        ("tanh", uniform(&[(2, 3)], -3.0, 3.0), reduce(|g, v| g.tanh(v[0]))),
        ("leaky_relu", kinked((2, 5), -2.0, 2.0, &[0.0]), reduce(|g, v| g.leaky_relu(v[0], 0.01))),
        ("softplus", uniform(&[(2, 3)], -8.0, 8.0), reduce(|g, v| g.softplus(v[0]))),
        ("sigmoid_diff", uniform(&[(2, 3), (2, 3)], -6.0, 6.0), reduce(|g, v| g.sigmoid_diff(v[0], v[1]))),
        ("clamp_min", kinked((2, 5), -1.0, 1.0, &[0.1]), reduce(|g, v| g.clamp_min(v[0], 0.1))),
        ("log2", uniform(&[(2, 3)], 0.05, 4.0), reduce(|g, v| g.log2(v[0]))),
        ("abs", kinked((2, 5), -2.0, 2.0, &[0.0]), reduce(|g, v| g.abs(v[0]))),
        ("square", uniform(&[(2, 3)], -2.0, 2.0), reduce(|g, v| g.square(v[0]))),
        ("sum", uniform(&[(3, 3)], -2.0, 2.0), Box::new(|g, v| {
            let s = g.sum(v[0]);
            g.square(s)
        })),
        ("gather_cols", uniform(&[(2, 5)], -2.0, 2.0), reduce(|g, v| g.gather_cols(v[0], &[4, 1, 1, 0]))),
        ("merge_cols", uniform(&[(2, 2), (2, 3)], -2.0, 2.0), reduce(|g, v| g.merge_cols(v[0], &[1, 3], v[1], &[0, 2, 4]))),
        ("slice_rows", uniform(&[(4, 3)], -2.0, 2.0), reduce(|g, v| g.slice_rows(v[0], 1, 3))),
        ("concat_rows", uniform(&[(1, 3), (2, 3)], -2.0, 2.0), reduce(|g, v| g.concat_rows(&[v[1], v[0], v[1]]))),
        ("reshape", uniform(&[(2, 6)], -2.0, 2.0), reduce(|g, v| g.reshape(v[0], 4, 3))),
        (
            "affine_clamp01",
            kinked((2, 5), -3.0, 3.0, &[-2.0, 2.0]),
            reduce(|g, v| g.affine_clamp01(v[0], 0.25, 0.5)),
        ),
    ]
}

fn mlp_case(seed: u64) -> (Mlp<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let mut m = Mlp::new(&[3, 5, 5, 2], OutputActivation::Tanh, &mut r);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    (m, random_tensor(4, 3, -2.0, 2.0, &mut r))
}

fn coupling_case(seed: u64) -> (CouplingLayer<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let mut layer = CouplingLayer::new(6, (seed % 2) as u8, 5, 3, &mut r).unwrap();
    for net in 0..2 {
        let m = if net == 0 { layer.scale_net_mut() } else { layer.translate_net_mut() };
        for p in m.params_mut() {
            for v in p.data_mut() {
                *v += r.random_range(-0.4..0.4);
            }
        }
    }
    (layer, random_tensor(3, 6, -2.0, 2.0, &mut r))
}

fn coupling_params(layer: &CouplingLayer<f64>) -> Vec<Tensor<f64>> {
    layer.scale_net().params().iter().chain(layer.translate_net().params()).cloned().collect()
}

fn flow_case(seed: u64) -> (FlowModel<f64>, Tensor<f64>) {
    let mut r = rng(seed);
    let cfg = FlowConfig { coupling_layers: 3, ..FlowConfig::default() };
    let mut f = FlowModel::new(6, 5, &cfg, &mut r).unwrap();
    for p in f.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    (f, random_tensor(3, 6, -2.0, 2.0, &mut r))
}

fn factorized_case(seed: u64) -> FactorizedModel<f64> {
    let mut r = rng(seed);
    let mut m = FactorizedModel::new(3);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.5..0.5);
        }
    }
    m
}

/// Checks a composite whose parameters are `params`, with `x` as an extra
/// leading input; `call` wires the vars into the model's tape method.
fn composite(
    x: Tensor<f64>,
    params: Vec<Tensor<f64>>,
    call: &dyn Fn(&mut Graph<f64>, Var, &[Var]) -> Var,
) -> f64 {
    let mut inputs = vec![x];
    inputs.extend(params);
    fd_check(&inputs, &|g, v| {
        let out = call(g, v[0], &v[1..]);
        weighted_sum(g, out, 11)
    })
    .max_rel
}

fn worst(f: impl Fn(u64) -> f64) -> f64 {
    (0..FD_POINTS as u64).map(f).fold(0.0, f64::max)
}

fn small_model(seed: u64, layers: usize, channels: usize) -> LearnedModel<f64> {
    let cfg = TrainConfig {
        flow: FlowConfig { coupling_layers: 2, hidden_width: Some(4), ..FlowConfig::default() },
        stages: Some(StageLayout::with_schedule(vec![0..1, 1..layers]).unwrap()),
        seed,
        ..TrainConfig::default()
    };
    let mut m = LearnedModel::new(layers, channels, &cfg).unwrap();
    let mut r = rng(seed ^ 0x77);
    for p in m.params_mut() {
        for v in p.data_mut() {
            *v += r.random_range(-0.3..0.3);
        }
    }
    m
}

/// Reverse-mode loss gradients versus central differences on a sample of
/// parameter coordinates. `loss` must be deterministic in the model.
fn loss_check(
    model: &LearnedModel<f64>,
    seed: u64,
    grads_of: &dyn Fn(&LearnedModel<f64>) -> (f64, Vec<Tensor<f64>>),
) -> f64 {
    let (f0, analytic) = grads_of(model);
    let mut r = rng(seed);
    let sizes: Vec<usize> = model.params().iter().map(|p| p.len()).collect();
    let mut max_rel = 0.0f64;
    for _ in 0..16 {
        let i = loop {
            let i = r.random_range(0..sizes.len());
            if sizes[i] > 0 {
                break i;
            }
        };
        let k = r.random_range(0..sizes[i]);
        let eval = |delta: f64| {
            let mut m = model.clone();
            m.params_mut()[i].data_mut()[k] += delta;
            grads_of(&m).0
        };
        let numeric = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        max_rel = max_rel.max(rel_err(analytic[i].data()[k], numeric, f0));
    }
    max_rel
}

/// Worst relative error for every checked operation, in a fixed order.
pub fn catalog() -> Vec<(String, f64)> {
    let mut out = Vec::new();
    for (k, (name, sample, build)) in primitive_cases().into_iter().enumerate() {
        out.push((name.to_string(), fd_check_points(100 + k as u64, &*sample, &*build)));
    }

    out.push((
        "mlp".into(),
        worst(|s| {
            let (m, x) = mlp_case(s);
            let mc = m.clone();
            composite(x, m.params().to_vec(), &|g, x, p| mc.forward_graph(g, x, p))
        }),
    ));
    for (name, dir) in [("coupling_forward", Direction::Forward), ("coupling_inverse", Direction::Inverse)] {
        out.push((
            name.into(),
            worst(|s| {
                let (l, x) = coupling_case(s);
                let params = coupling_params(&l);
                composite(x, params, &|g, x, p| l.apply_graph(g, x, p, dir))
            }),
        ));
    }
    for (name, dir) in [("flow_forward", Direction::Forward), ("flow_inverse", Direction::Inverse)] {
        out.push((
            name.into(),
            worst(|s| {
                let (f, x) = flow_case(s);
                let params: Vec<Tensor<f64>> = f.params().into_iter().cloned().collect();
                composite(x, params, &|g, x, p| f.graph(g, x, p, dir))
            }),
        ));
    }
    out.push((
        "factorized_logits".into(),
        worst(|s| {
            let m = factorized_case(s);
            let x = random_tensor(4, 3, -3.0, 3.0, &mut rng(s + 50));
            composite(x, m.params().to_vec(), &|g, x, p| m.logits_graph(g, x, p))
        }),
    ));
    out.push((
        "factorized_likelihood".into(),
        worst(|s| {
            let d = DensityModel::Factorized(factorized_case(s));
            let x = random_tensor(4, 3, -3.0, 3.0, &mut rng(s + 60));
            composite(x, d.params().to_vec(), &|g, x, p| {
                let l = d.likelihood_graph(g, x, p);
                g.log2(l)
            })
        }),
    ));
    out.push((
        "uniform_likelihood".into(),
        worst(|s| {
            let d = DensityModel::<f64>::Uniform(UniformModel { coords: 3, lo: -4.0, hi: 4.0 });
            let mut r = rng(s + 70);
            let v = (0..12).map(|_| away_from(-5.0, 5.0, &[-4.5, -3.5, 3.5, 4.5], 1e-3, &mut r)).collect();
            composite(Tensor::from_vec(4, 3, v), vec![], &|g, x, p| d.likelihood_graph(g, x, p))
        }),
    ));

    let cfg = TrainConfig { lambda: 1e-6, lambda_l1: 0.5, width: 64, height: 64, ..TrainConfig::default() };
    out.push((
        "intra_loss".into(),
        worst(|s| {
            let model = small_model(s, 3, 4);
            let mut r = rng(s + 80);
            let batch: Vec<LatentCode<f64>> = (0..3).map(|_| random_code(3, 4, 2.0, &mut r)).collect();
            let refs: Vec<&LatentCode<f64>> = batch.iter().collect();
            loss_check(&model, s, &|m| {
                let mut nr = rng(s + 90);
                let lg = intra_loss(&refs, m, &cfg, NoiseMode::Sampled(&mut nr)).unwrap();
                (lg.parts.loss, lg.gradients().unwrap())
            })
        }),
    ));
    out.push((
        "inter_loss".into(),
        worst(|s| {
            let model = small_model(s, 3, 4);
            let seq = ar1_sequence(3, 4, 0.9, 8, s);
            let windows: Vec<&[LatentCode<f64>]> = vec![&seq.frames()[0..4], &seq.frames()[4..8]];
            loss_check(&model, s, &|m| {
                let mut nr = rng(s + 95);
                let lg = inter_loss(&windows, m, &cfg, NoiseMode::Sampled(&mut nr)).unwrap();
                (lg.parts.loss, lg.gradients().unwrap())
            })
        }),
    ));
    out
}
