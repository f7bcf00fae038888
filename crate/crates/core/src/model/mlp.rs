use rand::Rng;

use crate::numeric::{
    linear_backward_accumulate, linear_forward, Activation, LinearCache, Matrix, ParamBlock,
};

use super::ModelError;

/// Fully connected layer with weight `out × in` and bias `out × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: ParamBlock,
    pub bias: ParamBlock,
}

impl Dense {
    /// Uniform init in `±sqrt(1 / fan_in)` for weights and biases.
    pub fn init<R: Rng>(name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = (1.0 / fan_in as f64).sqrt();
        let mut sample = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.random_range(-bound..bound)).collect()
        };
        let w = Matrix::from_vec(fan_out, fan_in, sample(fan_out * fan_in)).expect("sized");
        let b = Matrix::column(&sample(fan_out));
        Self {
            weight: ParamBlock::new(format!("{name}.weight"), w),
            bias: ParamBlock::new(format!("{name}.bias"), b),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.rows()
    }
}

#[derive(Debug, Clone)]
struct LayerCache {
    linear: LinearCache,
    pre: Vec<f64>,
}

/// Forward intermediates of one [`Mlp`] evaluation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    layers: Vec<LayerCache>,
}

/// Multilayer perceptron: `activation` after every hidden layer, linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub activation: Activation,
}

impl Mlp {
    pub fn init<R: Rng>(
        name: &str,
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let sizes: Vec<usize> = std::iter::once(input)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output))
            .collect();
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Dense::init(&format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Self { layers, activation }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache), ModelError> {
        let last = self.layers.len() - 1;
        let mut h = x.to_vec();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (pre, linear) =
                linear_forward(&h, &layer.weight.value, layer.bias.value.as_slice())?;
            h = if i == last {
                pre.clone()
            } else {
                self.activation.forward(&pre)
            };
            caches.push(LayerCache { linear, pre });
        }
        Ok((h, MlpCache { layers: caches }))
    }

    /// Accumulates parameter gradients and returns the gradient w.r.t. the input.
    pub fn backward(&mut self, cache: &MlpCache, upstream: &[f64]) -> Result<Vec<f64>, ModelError> {
        let last = self.layers.len() - 1;
        let mut g = upstream.to_vec();
        for (i, (layer, lc)) in self.layers.iter_mut().zip(&cache.layers).enumerate().rev() {
            if i != last {
                g = self.activation.backward(&lc.pre, &g);
            }
            let Dense { weight, bias } = layer;
            g = linear_backward_accumulate(
                &lc.linear,
                &weight.value,
                &g,
                &mut weight.grad,
                bias.grad.as_mut_slice(),
            )?;
        }
        Ok(g)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }
}
