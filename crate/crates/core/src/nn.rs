//! Fully connected sub-networks used inside the coupling layers.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::scalar::Scalar;
use crate::tensor::{leaky_relu, Tensor};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputActivation {
    Identity,
    Tanh,
}

/// Three (or more) dense layers with LeakyReLU between them.
///
/// Parameters are held as `[w0, b0, w1, b1, ...]` with weights stored
/// `out × in` and biases as `1 × out` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    params: Vec<Tensor<T>>,
    output: OutputActivation,
}

impl<T: Scalar> Mlp<T> {
    /// Hidden layers get uniform(±1/√fan_in) weights; the output layer starts
    /// at zero so the network initially returns a constant.
    pub fn new(
        widths: &[usize],
        output: OutputActivation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "mlp needs input and output width");
        let mut params = Vec::with_capacity(2 * (widths.len() - 1));
        let last = widths.len() - 2;
        for (k, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let w = if k == last {
                Tensor::zeros(fan_out, fan_in)
            } else {
                let bound = 1.0 / (fan_in as f64).sqrt();
                Tensor::from_vec(
                    fan_out,
                    fan_in,
                    (0..fan_in * fan_out)
                        .map(|_| T::of(rng.random_range(-bound..bound)))
                        .collect(),
                )
            };
            params.push(w);
            params.push(Tensor::zeros(1, fan_out));
        }
        Self { params, output }
    }

    /// Rebuilds a network from its parameter list.
    pub fn from_params(params: Vec<Tensor<T>>, output: OutputActivation) -> Self {
        assert!(!params.is_empty() && params.len() % 2 == 0);
        Self { params, output }
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn output(&self) -> OutputActivation {
        self.output
    }

    pub fn input_width(&self) -> usize {
        self.params[0].cols()
    }

    pub fn output_width(&self) -> usize {
        self.params[self.params.len() - 2].rows()
    }

    /// Widths `[in, hidden.., out]`.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(self.params.chunks(2).map(|p| p[0].rows()));
        w
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let slope = T::of(LEAKY_SLOPE);
        let n = self.params.len() / 2;
        let mut h = x.clone();
        for k in 0..n {
            h = h.linear(&self.params[2 * k], &self.params[2 * k + 1]);
            if k + 1 < n {
                h = h.map(|v| leaky_relu(v, slope));
            }
        }
        match self.output {
            OutputActivation::Identity => h,
            OutputActivation::Tanh => h.map(T::tanh),
        }
    }

    /// Same computation on the tape; `params` are this network's leaves in
    /// [`Mlp::params`] order.
    pub fn forward_graph(&self, g: &mut Graph<T>, x: Var, params: &[Var]) -> Var {
        debug_assert_eq!(params.len(), self.params.len());
        let slope = T::of(LEAKY_SLOPE);
        let n = params.len() / 2;
        let mut h = x;
        for k in 0..n {
            h = g.linear(h, params[2 * k], params[2 * k + 1]);
            if k + 1 < n {
                h = g.leaky_relu(h, slope);
            }
        }
        match self.output {
            OutputActivation::Identity => h,
            OutputActivation::Tanh => g.tanh(h),
        }
    }
}
