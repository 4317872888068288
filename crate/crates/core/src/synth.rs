//! Synthetic latents for desk-scale experiments.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::latent::{LatentCode, LatentSequence, DESK_CHANNELS, DESK_LAYERS};
use crate::scalar::Scalar;

/// One mixture component; `mean` and `scale` hold either one value for all
/// coordinates or one value per coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Component {
    pub fn isotropic(weight: f64, mean: f64, scale: f64) -> Self {
        Self {
            weight,
            mean: vec![mean],
            scale: vec![scale],
        }
    }

    fn at(v: &[f64], i: usize) -> f64 {
        if v.len() == 1 {
            v[0]
        } else {
            v[i]
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub layers: usize,
    pub channels: usize,
    pub mixture: Vec<Component>,
    /// AR(1) coefficient of the video generator.
    pub rho: f64,
    pub frames: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            layers: DESK_LAYERS,
            channels: DESK_CHANNELS,
            mixture: vec![Component::isotropic(1.0, 0.0, 1.0)],
            rho: 0.99,
            frames: 100,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let coords = self.layers * self.channels;
        if coords == 0 {
            return Err(Error::Config("empty latent shape".into()));
        }
        if self.mixture.is_empty() {
            return Err(Error::Config("mixture needs a component".into()));
        }
        for (k, c) in self.mixture.iter().enumerate() {
            if !(c.weight > 0.0 && c.weight.is_finite()) {
                return Err(Error::Config(format!("component {k}: weight must be positive")));
            }
            for (name, v) in [("mean", &c.mean), ("scale", &c.scale)] {
                if v.len() != 1 && v.len() != coords {
                    return Err(Error::Config(format!(
                        "component {k}: {name} has {} values, expected 1 or {coords}",
                        v.len()
                    )));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Config(format!("component {k}: non-finite {name}")));
                }
            }
            if c.scale.iter().any(|&s| !(s > 0.0)) {
                return Err(Error::Config(format!("component {k}: scales must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::Config(format!("rho {} outside [0, 1)", self.rho)));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be at least 1".into()));
        }
        Ok(())
    }
}

/// `n` i.i.d. draws from the per-coordinate mixture.
pub fn gen_intra_set<T: Scalar>(n: usize, params: &SynthConfig) -> Result<Vec<LatentCode<T>>> {
    params.validate()?;
    if n == 0 {
        return Err(Error::Config("requested zero latents".into()));
    }
    let coords = params.layers * params.channels;
    let total: f64 = params.mixture.iter().map(|c| c.weight).sum();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    (0..n)
        .map(|_| {
            let data = (0..coords)
                .map(|i| {
                    let mut u = rng.random::<f64>() * total;
                    let mut comp = &params.mixture[params.mixture.len() - 1];
                    for c in &params.mixture {
                        if u < c.weight {
                            comp = c;
                            break;
                        }
                        u -= c.weight;
                    }
                    let z: f64 = StandardNormal.sample(&mut rng);
                    T::of(Component::at(&comp.mean, i) + Component::at(&comp.scale, i) * z)
                })
                .collect();
            LatentCode::new(params.layers, params.channels, data)
        })
        .collect()
}

/// Stationary AR(1) sequence with unit marginal variance. Frame `t` draws
/// its innovations from stream `t` of the seeded generator, so frames can be
/// produced independently of one another.
pub fn gen_video<T: Scalar>(params: &SynthConfig) -> Result<LatentSequence<T>> {
    params.validate()?;
    let coords = params.layers * params.channels;
    let innovation = (1.0 - params.rho * params.rho).sqrt();
    let mut prev: Vec<f64> = Vec::new();
    let mut frames = Vec::with_capacity(params.frames);
    for t in 0..params.frames {
        let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
        rng.set_stream(t as u64);
        let z: Vec<f64> = (0..coords).map(|_| StandardNormal.sample(&mut rng)).collect();
        let cur: Vec<f64> = if t == 0 {
            z
        } else {
            prev.iter().zip(&z).map(|(p, z)| params.rho * p + innovation * z).collect()
        };
        frames.push(LatentCode::new(
            params.layers,
            params.channels,
            cur.iter().map(|&v| T::of(v)).collect(),
        )?);
        prev = cur;
    }
    LatentSequence::new(frames)
}
