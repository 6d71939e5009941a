use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{NnError, Tensor2};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub enum Activation {
    Relu,
    Identity,
    Softmax,
}

impl Activation {
    fn apply(self, pre: &Tensor2) -> Tensor2 {
        match self {
            Activation::Identity => pre.clone(),
            Activation::Relu => {
                let mut out = pre.clone();
                out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
                out
            }
            Activation::Softmax => super::softmax_rows(pre),
        }
    }

    /// Map the gradient w.r.t. the activation output back to the pre-activation.
    fn backprop(self, pre: &Tensor2, out: &Tensor2, grad_out: &Tensor2) -> Tensor2 {
        match self {
            Activation::Identity => grad_out.clone(),
            Activation::Relu => {
                let mut g = grad_out.clone();
                for (gi, &z) in g.data_mut().iter_mut().zip(pre.data()) {
                    if z <= 0.0 {
                        *gi = 0.0;
                    }
                }
                g
            }
            Activation::Softmax => {
                let mut g = Tensor2::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let s = out.row(r);
                    let go = grad_out.row(r);
                    let dot: f64 = s.iter().zip(go).map(|(a, b)| a * b).sum();
                    for (j, gj) in g.row_mut(r).iter_mut().enumerate() {
                        *gj = s[j] * (go[j] - dot);
                    }
                }
                g
            }
        }
    }
}

/// One fully connected layer computing `act(x · W + b)`; `W` is `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weight: Tensor2, bias: Vec<f64>, activation: Activation) -> Result<Self, NnError> {
        if bias.len() != weight.cols() {
            return Err(NnError::Shape {
                op: "Layer::new",
                detail: format!("bias of {} for {} outputs", bias.len(), weight.cols()),
            });
        }
        Ok(Self {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    fn pre_activation(&self, input: &Tensor2) -> Result<Tensor2, NnError> {
        let mut z = input.matmul(&self.weight)?;
        z.add_row_broadcast(&self.bias)?;
        Ok(z)
    }
}

/// A stack of fully connected layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FcnnModel {
    layers: Vec<Layer>,
}

/// Per-layer activations recorded during [`FcnnModel::forward_cached`].
#[derive(Clone, Debug, Default)]
pub struct ForwardCache {
    inputs: Vec<Tensor2>,
    pre: Vec<Tensor2>,
    outputs: Vec<Tensor2>,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weight: Tensor2,
    pub bias: Vec<f64>,
}

/// Weight and bias gradients, one entry per layer of the owning model.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(model: &FcnnModel) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGrad {
                    weight: Tensor2::zeros(l.in_dim(), l.out_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight.scale(s);
            l.bias.iter_mut().for_each(|b| *b *= s);
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) -> Result<(), NnError> {
        if self.layers.len() != other.layers.len() {
            return Err(NnError::Shape {
                op: "GradientSet::add_assign",
                detail: format!("{} vs {} layers", self.layers.len(), other.layers.len()),
            });
        }
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight.add_assign(&b.weight)?;
            for (x, y) in a.bias.iter_mut().zip(&b.bias) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }
}

impl FcnnModel {
    pub fn new(layers: Vec<Layer>) -> Result<Self, NnError> {
        if layers.is_empty() {
            return Err(NnError::Input("model needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(NnError::Shape {
                    op: "FcnnModel::new",
                    detail: format!(
                        "layer {i} outputs {} but layer {} expects {}",
                        pair[0].out_dim(),
                        i + 1,
                        pair[1].in_dim()
                    ),
                });
            }
        }
        let last = layers.len() - 1;
        if layers[..last]
            .iter()
            .any(|l| l.activation == Activation::Softmax)
        {
            return Err(NnError::Input("softmax is only allowed on the final layer".into()));
        }
        Ok(Self { layers })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(
        dims: &[usize],
        hidden: Activation,
        output: Activation,
        seed: u64,
    ) -> Result<Self, NnError> {
        if dims.len() < 2 {
            return Err(NnError::Input(format!(
                "need at least input and output dims, got {dims:?}"
            )));
        }
        if dims.contains(&0) {
            return Err(NnError::Input(format!("zero-width layer in {dims:?}")));
        }
        let mut rng = rng::stream(seed, rng::STREAM_INIT);
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.random_range(-bound..=bound))
                    .collect();
                Layer {
                    weight: Tensor2::from_vec(fan_in, fan_out, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    activation: if i + 1 == n { output } else { hidden },
                }
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.in_dim()];
        d.extend(self.layers.iter().map(Layer::out_dim));
        d
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.in_dim() * l.out_dim() + l.out_dim())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn check_input(&self, input: &Tensor2) -> Result<(), NnError> {
        if input.cols() != self.in_dim() {
            return Err(NnError::Shape {
                op: "forward",
                detail: format!("input has {} columns, model expects {}", input.cols(), self.in_dim()),
            });
        }
        Ok(())
    }

    pub fn forward(&self, input: &Tensor2) -> Result<Tensor2, NnError> {
        self.check_input(input)?;
        let mut x = input.clone();
        for layer in &self.layers {
            x = layer.activation.apply(&layer.pre_activation(&x)?);
        }
        Ok(x)
    }

    pub fn forward_cached(&self, input: &Tensor2) -> Result<(Tensor2, ForwardCache), NnError> {
        self.check_input(input)?;
        let mut cache = ForwardCache::default();
        let mut x = input.clone();
        for layer in &self.layers {
            let z = layer.pre_activation(&x)?;
            let a = layer.activation.apply(&z);
            cache.inputs.push(x);
            cache.pre.push(z);
            cache.outputs.push(a.clone());
            x = a;
        }
        Ok((x, cache))
    }

    /// Backpropagate `upstream` (d loss / d output) through the cached pass.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: &Tensor2,
    ) -> Result<(GradientSet, Tensor2), NnError> {
        if cache.inputs.len() != self.layers.len() {
            return Err(NnError::MissingCache(format!(
                "cache holds {} layers, model has {}",
                cache.inputs.len(),
                self.layers.len()
            )));
        }
        let out = &cache.outputs[self.layers.len() - 1];
        if upstream.shape() != out.shape() {
            return Err(NnError::Shape {
                op: "backward",
                detail: format!("upstream {:?} vs output {:?}", upstream.shape(), out.shape()),
            });
        }
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut g = upstream.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let dz = layer
                .activation
                .backprop(&cache.pre[i], &cache.outputs[i], &g);
            let dw = cache.inputs[i].t_matmul(&dz)?;
            let db = dz.col_sums();
            g = dz.matmul_t(&layer.weight)?;
            grads.push(LayerGrad {
                weight: dw,
                bias: db,
            });
        }
        grads.reverse();
        Ok((GradientSet { layers: grads }, g))
    }

    /// Plain SGD: `θ ← θ − lr · ∇θ`.
    pub fn sgd_step(&mut self, grads: &GradientSet, lr: f64) -> Result<(), NnError> {
        if grads.layers.len() != self.layers.len() {
            return Err(NnError::Shape {
                op: "sgd_step",
                detail: format!("{} gradients for {} layers", grads.layers.len(), self.layers.len()),
            });
        }
        for (layer, g) in self.layers.iter_mut().zip(&grads.layers) {
            if g.weight.shape() != layer.weight.shape() || g.bias.len() != layer.bias.len() {
                return Err(NnError::Shape {
                    op: "sgd_step",
                    detail: "gradient shape does not mirror the model".into(),
                });
            }
            for (w, d) in layer.weight.data_mut().iter_mut().zip(g.weight.data()) {
                *w -= lr * d;
            }
            for (b, d) in layer.bias.iter_mut().zip(&g.bias) {
                *b -= lr * d;
            }
        }
        Ok(())
    }

    /// Split into `(layers[..at], layers[at..])`.
    pub fn split_at(&self, at: usize) -> Result<(FcnnModel, FcnnModel), NnError> {
        if at == 0 || at >= self.layers.len() {
            return Err(NnError::Input(format!(
                "split point {at} outside 1..{}",
                self.layers.len()
            )));
        }
        Ok((
            FcnnModel::new(self.layers[..at].to_vec())?,
            FcnnModel::new(self.layers[at..].to_vec())?,
        ))
    }
}

/// Dims-only convenience: ReLU hidden layers and an identity output.
pub fn init_model(dims: &[usize], seed: u64) -> Result<FcnnModel, NnError> {
    FcnnModel::init(dims, Activation::Relu, Activation::Identity, seed)
}
