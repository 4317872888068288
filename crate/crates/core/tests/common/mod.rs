//! Helpers shared by the integration targets.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sganc::autodiff::{Graph, Var};
use sganc::latent::{LatentCode, LatentSequence};
use sganc::tensor::Tensor;

pub mod ops;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
pub const FD_POINTS: usize = 10;

/// Gradients smaller than `FD_ZERO · max(1, |f|)` sit at the roundoff floor
/// of a central difference (about `ε·|f|/h`) and are compared against that
/// floor instead of their own magnitude.
pub const FD_ZERO: f64 = 1e-6;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor<f64> {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect())
}

/// Draws from `[lo, hi)` while staying `gap` away from each of `kinks`.
pub fn away_from(lo: f64, hi: f64, kinks: &[f64], gap: f64, rng: &mut impl Rng) -> f64 {
    loop {
        let v = rng.random_range(lo..hi);
        if kinks.iter().all(|k| (v - k).abs() > gap) {
            return v;
        }
    }
}

pub fn random_code(l: usize, c: usize, scale: f64, rng: &mut impl Rng) -> LatentCode<f64> {
    LatentCode::new(l, c, (0..l * c).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

#[derive(Debug)]
pub struct FdReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose `±h` interval straddled a kink and were re-measured
    /// with a smaller step.
    pub kinks: usize,
}

/// Relative error of `a` against `n` for a function of magnitude `f`.
pub fn rel_err(a: f64, n: f64, f: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FD_ZERO * f.abs().max(1.0))
}

/// Central quotients at `h` and `h/2` agree to `O(h²)` on smooth functions;
/// a larger gap means `[x − h, x + h]` crosses a slope discontinuity.
pub const KINK_RATIO: f64 = 1e-5;

fn consistent(a: f64, b: f64) -> bool {
    (a - b).abs() <= KINK_RATIO * a.abs().max(b.abs()) + 1e-9
}

/// Compares reverse-mode gradients of the scalar built by `build` against
/// central differences in every input coordinate listed by `coords`
/// (`None` = all coordinates of every input).
pub fn fd_check_coords(
    inputs: &[Tensor<f64>],
    coords: Option<&[(usize, usize)]>,
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> FdReport {
    let eval = |ins: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &vars);
        g.value(out).get(0, 0)
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars);
    let grads = g.backward(out).expect("backward");
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt(v, &g)).collect();

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(i, t)| (0..t.len()).map(move |k| (i, k)))
                .collect();
            &all
        }
    };
    let shifted = |i: usize, k: usize, d: f64| {
        let mut v = inputs.to_vec();
        v[i].data_mut()[k] += d;
        eval(&v)
    };
    let central = |i: usize, k: usize, h: f64| (shifted(i, k, h) - shifted(i, k, -h)) / (2.0 * h);
    let f0 = eval(inputs);
    let (mut max_rel, mut kinks) = (0.0f64, 0usize);
    for &(i, k) in coords {
        let mut h = FD_STEP;
        let mut numeric = central(i, k, h);
        let mut half = central(i, k, h / 2.0);
        if !consistent(numeric, half) {
            kinks += 1;
            while !consistent(numeric, half) && h > 1e-8 {
                h /= 4.0;
                numeric = central(i, k, h);
                half = central(i, k, h / 2.0);
            }
        }
        max_rel = max_rel.max(rel_err(analytic[i].data()[k], numeric, f0));
    }
    FdReport { max_rel, checked: coords.len(), kinks }
}

pub fn fd_check(inputs: &[Tensor<f64>], build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var) -> FdReport {
    fd_check_coords(inputs, None, build)
}

/// Runs `fd_check` at `FD_POINTS` random input draws; returns the worst error.
pub fn fd_check_points(
    seed: u64,
    sample: &dyn Fn(&mut ChaCha8Rng) -> Vec<Tensor<f64>>,
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let mut r = rng(seed);
    (0..FD_POINTS)
        .map(|_| fd_check(&sample(&mut r), build).max_rel)
        .fold(0.0, f64::max)
}

/// Weighted sum of a graph node so non-scalar outputs reduce to a scalar
/// with every element contributing a distinct gradient.
pub fn weighted_sum(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
    let (r, c) = g.value(v).shape();
    let mut rr = rng(seed ^ 0xabcd);
    let w = g.constant(random_tensor(r, c, 0.5, 1.5, &mut rr));
    let p = g.mul(v, w);
    g.sum(p)
}

pub fn ar1_sequence(l: usize, c: usize, rho: f64, frames: usize, seed: u64) -> LatentSequence<f64> {
    sganc::synth::gen_video(&sganc::synth::SynthConfig {
        layers: l,
        channels: c,
        rho,
        frames,
        seed,
        ..Default::default()
    })
    .unwrap()
}
