use ndarray::{Array1, Array2, Axis};
use rand::Rng;

/// Parameter values with the momentum buffer the optimizer keeps for them.
///
/// Gradients live in [`LayerGrad`] values returned by the backward pass, so a
/// model is never mutated by computing its gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub values: Array2<f64>,
    pub momentum: Array2<f64>,
}

impl ParamBlock {
    pub fn new(values: Array2<f64>) -> Self {
        let momentum = Array2::zeros(values.raw_dim());
        Self { values, momentum }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn reset_momentum(&mut self) {
        self.momentum.fill(0.0);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        if self == Activation::Tanh {
            z.mapv_inplace(f64::tanh);
        }
    }

    /// Derivative expressed through the activation output.
    fn scale_delta(self, out: &Array2<f64>, delta: &mut Array2<f64>) {
        if self == Activation::Tanh {
            ndarray::Zip::from(delta)
                .and(out)
                .for_each(|d, &a| *d *= 1.0 - a * a);
        }
    }
}

/// `y = act(x · W + b)` with `W` stored as `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: ParamBlock,
    pub bias: Option<ParamBlock>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weight: Array2<f64>,
    pub bias: Option<Array2<f64>>,
}

impl DenseLayer {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize, activation: Activation) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..=limit));
        Self {
            weight: ParamBlock::new(values),
            bias: Some(ParamBlock::new(Array2::zeros((1, fan_out)))),
            activation,
        }
    }

    pub fn from_values(weight: Array2<f64>, bias: Option<Array1<f64>>, activation: Activation) -> Self {
        Self {
            weight: ParamBlock::new(weight),
            bias: bias.map(|b| {
                let n = b.len();
                ParamBlock::new(b.into_shape_with_order((1, n)).expect("bias reshape"))
            }),
            activation,
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.values.nrows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.values.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, ParamBlock::len)
    }

    pub fn macs(&self) -> usize {
        self.weight.len()
    }

    pub(crate) fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut z = x.dot(&self.weight.values);
        if let Some(b) = &self.bias {
            z += &b.values;
        }
        self.activation.apply(&mut z);
        z
    }

    /// Given dL/d(output), returns the parameter gradient (if requested) and
    /// dL/d(input).
    pub(crate) fn backward(
        &self,
        input: &Array2<f64>,
        output: &Array2<f64>,
        mut delta: Array2<f64>,
        want_grad: bool,
        want_input_delta: bool,
    ) -> (Option<LayerGrad>, Option<Array2<f64>>) {
        self.activation.scale_delta(output, &mut delta);
        let grad = want_grad.then(|| LayerGrad {
            weight: input.t().dot(&delta),
            bias: self
                .bias
                .as_ref()
                .map(|_| delta.sum_axis(Axis(0)).insert_axis(Axis(0))),
        });
        let input_delta = want_input_delta.then(|| delta.dot(&self.weight.values.t()));
        (grad, input_delta)
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ParamBlock> {
        std::iter::once(&self.weight).chain(self.bias.iter())
    }

    pub(crate) fn blocks_mut(&mut self) -> impl Iterator<Item = &mut ParamBlock> {
        std::iter::once(&mut self.weight).chain(self.bias.iter_mut())
    }

    pub(crate) fn same_shape(&self, other: &DenseLayer) -> bool {
        self.weight.shape() == other.weight.shape()
            && self.bias.as_ref().map(ParamBlock::shape) == other.bias.as_ref().map(ParamBlock::shape)
            && self.activation == other.activation
    }
}

impl LayerGrad {
    pub(crate) fn matches(&self, layer: &DenseLayer) -> bool {
        self.weight.dim() == layer.weight.shape()
            && self.bias.as_ref().map(|b| b.dim()) == layer.bias.as_ref().map(ParamBlock::shape)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Array2<f64>> {
        std::iter::once(&self.weight).chain(self.bias.iter())
    }
}
