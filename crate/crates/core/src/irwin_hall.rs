//! Irwin-Hall law of the inter-frame residuals.
//!
//! Under the additive-noise relaxation a residual sent every `g` frames is
//! the sum of `n = g + 2` independent `U[-½, ½)` variables: the intra noise of
//! the last anchor, one noise term per difference, and the residual's own
//! noise. Its distribution is therefore known in closed form and needs no
//! learned model.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Signed, ToPrimitive, Zero};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::entropy::{EscapePolicy, PmfTable};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Largest order for which factorials stay exact in integer arithmetic.
pub const MAX_ORDER: u32 = 20;

/// Sum of `n` i.i.d. `U[0, 1]` variables; `shift = −n/2` centres it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IrwinHall {
    n: u32,
    factorial: u64,
    binomial: Vec<u64>,
}

impl IrwinHall {
    pub fn new(n: u32) -> Result<Self> {
        if n == 0 || n > MAX_ORDER {
            return Err(Error::Config(format!("irwin-hall order {n} outside 1..={MAX_ORDER}")));
        }
        let factorial = (1..=n as u64).product();
        let mut binomial = vec![1u64; n as usize + 1];
        for k in 1..=n as usize {
            binomial[k] = binomial[k - 1] * (n as u64 - k as u64 + 1) / k as u64;
        }
        Ok(Self {
            n,
            factorial,
            binomial,
        })
    }

    /// Residual law for residual gap `g`.
    pub fn for_gap(g: u32) -> Result<Self> {
        if g == 0 {
            return Err(Error::Config("residual gap must be at least 1".into()));
        }
        Self::new(g.checked_add(2).ok_or_else(|| Error::Config("gap too large".into()))?)
    }

    pub fn n(&self) -> u32 {
        self.n
    }

    pub fn shift(&self) -> f64 {
        -0.5 * self.n as f64
    }

    /// CDF on the unshifted support `[0, n]`.
    pub fn cdf<T: Scalar>(&self, x: T) -> T {
        let n = T::of(self.n as f64);
        if !(x > T::zero()) {
            return T::zero();
        }
        if x >= n {
            return T::one();
        }
        // the alternating sum cancels less on the lower half
        if x > n / T::of(2.0) {
            return T::one() - self.cdf(n - x);
        }
        let top = x.floor().as_f64() as usize;
        let mut acc = T::zero();
        for k in 0..=top {
            let term = T::of(self.binomial[k] as f64) * (x - T::of(k as f64)).powi(self.n as i32);
            acc = if k % 2 == 0 { acc + term } else { acc - term };
        }
        (acc / T::of(self.factorial as f64)).max(T::zero()).min(T::one())
    }

    /// CDF of the centred variable on `[−n/2, n/2]`.
    pub fn centered_cdf<T: Scalar>(&self, x: T) -> T {
        self.cdf(x - T::of(self.shift()))
    }

    /// Exact rational CDF on the unshifted support.
    pub fn exact_cdf(&self, x: &BigRational) -> BigRational {
        let n = BigRational::from_integer(BigInt::from(self.n));
        if !x.is_positive() {
            return BigRational::zero();
        }
        if *x >= n {
            return BigRational::one();
        }
        let top = x.floor().to_integer().to_usize().expect("bounded by n");
        let mut acc = BigRational::zero();
        for k in 0..=top {
            let base = x - BigRational::from_integer(BigInt::from(k));
            let term = BigRational::from_integer(BigInt::from(self.binomial[k])) * pow(&base, self.n);
            if k % 2 == 0 {
                acc += term;
            } else {
                acc -= term;
            }
        }
        acc / BigRational::from_integer(BigInt::from(self.factorial))
    }

    /// Largest |k| whose unit bin around the integer `k` carries mass.
    pub fn max_symbol(&self) -> i32 {
        (self.n / 2) as i32
    }

    /// Mass of the unit bin centred on integer `k` (centred variable).
    pub fn bin_probability(&self, k: i32) -> f64 {
        let k = k as f64;
        // the upper half of the range is mirrored so both halves lose the same precision
        if k > 0.0 {
            return self.bin_probability(-(k as i32));
        }
        self.centered_cdf(k + 0.5) - self.centered_cdf(k - 0.5)
    }

    pub fn exact_bin_probability(&self, k: i32) -> BigRational {
        let two = BigInt::from(2);
        let edge = |v: i64| BigRational::new(BigInt::from(v), two.clone());
        // (k ± ½) − shift = (2k ± 1 + n) / 2
        let upper = edge(2 * k as i64 + 1 + self.n as i64);
        let lower = edge(2 * k as i64 - 1 + self.n as i64);
        self.exact_cdf(&upper) - self.exact_cdf(&lower)
    }

    /// Entropy in bits of the discretized (integer-binned) law.
    pub fn discrete_entropy_bits(&self) -> f64 {
        let m = self.max_symbol();
        (-m..=m)
            .map(|k| self.bin_probability(k))
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.log2())
            .sum()
    }
}

fn pow(base: &BigRational, e: u32) -> BigRational {
    (0..e).fold(BigRational::one(), |acc, _| acc * base)
}

/// `F(x; n)` on `[0, n]`, 0 below and 1 above.
pub fn ih_cdf<T: Scalar>(x: T, n: u32) -> Result<T> {
    Ok(IrwinHall::new(n)?.cdf(x))
}

/// Smallest symmetric support holding every bin with nonzero mass.
pub fn default_residual_support(g: u32) -> Result<(i32, i32)> {
    let m = IrwinHall::for_gap(g)?.max_symbol();
    Ok((-m, m))
}

/// Bin masses of the residual law over an inclusive integer support.
pub fn residual_probabilities(g: u32, support: (i32, i32)) -> Result<Vec<f64>> {
    let law = IrwinHall::for_gap(g)?;
    let (lo, hi) = support;
    let m = law.max_symbol();
    let missing: Vec<i64> = (-m..=m)
        .filter(|k| *k < lo || *k > hi)
        .map(|k| k as i64)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Support { missing });
    }
    Ok((lo..=hi).map(|k| law.bin_probability(k)).collect())
}

/// Frozen coding table of the residual law.
pub fn residual_pmf(g: u32, support: (i32, i32), precision: u32, policy: EscapePolicy) -> Result<PmfTable> {
    let probs = residual_probabilities(g, support)?;
    // bins outside a support that covers every nonzero bin carry no mass
    PmfTable::from_probabilities(support.0, &probs, 0.0, precision, policy)
}

/// Residuals at `t = g` of `samples` independent scalar trajectories of the
/// noise-relaxed inter pipeline.
///
/// Trajectories follow a Gaussian random walk; the anchor frame is coded with
/// additive noise, each difference gets its own noise, and the residual is
/// taken against the open-loop prediction.
pub fn simulate_residuals(g: u32, samples: usize, seed: u64) -> Result<Vec<f64>> {
    if g == 0 {
        return Err(Error::Config("residual gap must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Uniform::new(-0.5, 0.5).expect("valid range");
    let start = Normal::new(0.0, 3.0).expect("valid normal");
    let step = Normal::new(0.0, 1.0).expect("valid normal");
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let mut w_prev: f64 = start.sample(&mut rng);
        let mut w_hat = w_prev + noise.sample(&mut rng);
        let mut residual = 0.0;
        for t in 1..=g {
            let w = w_prev + step.sample(&mut rng);
            let v_hat = (w - w_prev) + noise.sample(&mut rng);
            let w_bar = w_hat + v_hat;
            if t % g == 0 {
                residual = (w - w_bar) + noise.sample(&mut rng);
                w_hat = w_bar + residual;
            } else {
                w_hat = w_bar;
            }
            w_prev = w;
        }
        out.push(residual);
    }
    Ok(out)
}

/// Two-sided Kolmogorov-Smirnov distance between a sample and a CDF.
pub fn ks_statistic(samples: &mut [f64], cdf: impl Fn(f64) -> f64) -> f64 {
    samples.sort_by(f64::total_cmp);
    let n = samples.len() as f64;
    samples
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ResidualLawReport {
    pub g: u32,
    pub n: u32,
    pub samples: usize,
    pub ks: f64,
}

/// Monte Carlo check of the residual law for gap `g`.
pub fn verify_residual_law(g: u32, samples: usize, seed: u64) -> Result<ResidualLawReport> {
    let law = IrwinHall::for_gap(g)?;
    let mut residuals = simulate_residuals(g, samples, seed)?;
    let ks = ks_statistic(&mut residuals, |x| law.centered_cdf(x));
    Ok(ResidualLawReport {
        g,
        n: law.n(),
        samples,
        ks,
    })
}
