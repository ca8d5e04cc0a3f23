//! Feedforward networks with cached forward passes and per-layer desired
//! updates.
//!
//! Samples are columns. For every layer `i` the cache keeps its output; for
//! a weighted layer that output is the pre-activation `A`, and the matching
//! goal `v[i]` is the per-sample negative gradient of the summed loss with
//! respect to it. No `1/n` factor is folded into the goals.

pub mod activation;
pub mod conv;
pub mod layer;
pub mod value;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::numerics::Matrix;

pub use activation::Activation;
pub use conv::{Conv2d, Unfolded};
pub use layer::{Dense, Layer};
pub use value::{with_bias_row, Shape, Tensor4, Value};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid network: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    /// `l = ||f - y||^2` per sample.
    Square,
    /// Softmax cross-entropy. If the final layer is a softmax its input is used
    /// as the logits; otherwise the network output itself is.
    CrossEntropy,
}

impl Loss {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "square" | "mse" => Some(Loss::Square),
            "cross_entropy" | "ce" | "crossentropy" => Some(Loss::CrossEntropy),
            _ => None,
        }
    }
}

/// Forward pass record: the input and every layer output.
#[derive(Debug, Clone, PartialEq)]
pub struct Cache {
    pub input: Value,
    pub outputs: Vec<Value>,
}

impl Cache {
    pub fn layer_input(&self, i: usize) -> &Value {
        if i == 0 {
            &self.input
        } else {
            &self.outputs[i - 1]
        }
    }

    pub fn output(&self) -> &Value {
        self.outputs.last().unwrap_or(&self.input)
    }

    /// Input of dense layer `i` with the constant-one row appended.
    pub fn dense_input_with_bias(&self, i: usize) -> Result<Matrix, NetError> {
        Ok(with_bias_row(self.layer_input(i).as_flat()?))
    }
}

/// Desired updates for every layer output plus the batch-mean loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Goals {
    pub loss: f64,
    pub v: Vec<Value>,
}

/// Ordered layers over a fixed input shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    input: Shape,
    layers: Vec<Layer>,
}

impl Network {
    pub fn new(input: Shape, layers: Vec<Layer>) -> Result<Self, NetError> {
        let net = Network { input, layers };
        net.validate()?;
        Ok(net)
    }

    fn validate(&self) -> Result<(), NetError> {
        let mut shape = self.input;
        for (i, layer) in self.layers.iter().enumerate() {
            shape = layer.output_shape(shape).map_err(|e| NetError::Shape(format!("layer {i}: {e}")))?;
            if !layer.is_finite() {
                return Err(NetError::Invalid(format!("layer {i} has non-finite weights")));
            }
            if let Layer::Activation(a) = layer {
                if *a == Activation::Softmax {
                    if i + 1 != self.layers.len() {
                        return Err(NetError::Invalid("softmax is only allowed as the final layer".into()));
                    }
                } else if a.eval(0.0).abs() >= 1e-12 {
                    return Err(NetError::Invalid(format!("activation {} does not vanish at 0", a.name())));
                }
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Shape {
        self.input
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Mutable access for in-place parameter edits that keep every shape.
    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Replace the layer list, re-validating all shapes.
    pub fn with_layers(&self, layers: Vec<Layer>) -> Result<Self, NetError> {
        Network::new(self.input, layers)
    }

    pub fn output_shapes(&self) -> Vec<Shape> {
        let mut s = self.input;
        self.layers
            .iter()
            .map(|l| {
                s = l.output_shape(s).expect("validated at construction");
                s
            })
            .collect()
    }

    pub fn layer_input_shape(&self, i: usize) -> Shape {
        if i == 0 {
            self.input
        } else {
            self.output_shapes()[i - 1]
        }
    }

    pub fn output_dim(&self) -> usize {
        self.output_shapes().last().copied().unwrap_or(self.input).numel()
    }

    /// Multilayer perceptron `input -> hidden... -> out` with one activation
    /// after every hidden dense layer and no output activation. Weights are
    /// `N(0, 1/fan_in)`, biases zero.
    pub fn mlp<R: Rng>(input: usize, hidden: &[usize], out: usize, act: Activation, rng: &mut R) -> Result<Self, NetError> {
        let mut layers = Vec::new();
        let mut prev = input;
        for &h in hidden {
            layers.push(Layer::Dense(random_dense(h, prev, rng)));
            layers.push(Layer::Activation(act));
            prev = h;
        }
        layers.push(Layer::Dense(random_dense(out, prev, rng)));
        Network::new(Shape::Flat(input), layers)
    }

    /// Indices `i` such that layers `i`, `i+2` are weighted layers of the same
    /// kind joined by one elementwise activation at `i+1`. New neurons are
    /// appended to the outputs of layer `i`.
    pub fn growable_positions(&self) -> Vec<usize> {
        (0..self.layers.len().saturating_sub(2))
            .filter(|&i| self.growable_activation(i).is_some())
            .collect()
    }

    pub fn growable_activation(&self, i: usize) -> Option<Activation> {
        let (a, b, c) = (self.layers.get(i)?, self.layers.get(i + 1)?, self.layers.get(i + 2)?);
        let act = match b {
            Layer::Activation(f) if f.is_elementwise() => *f,
            _ => return None,
        };
        match (a, c) {
            (Layer::Dense(_), Layer::Dense(_)) | (Layer::Conv2d(_), Layer::Conv2d(_)) => Some(act),
            _ => None,
        }
    }

    pub fn forward(&self, x: &Value) -> Result<Value, NetError> {
        self.run_range(0, self.layers.len(), x.clone())
    }

    /// Apply layers `start..end` to `v`.
    pub fn run_range(&self, start: usize, end: usize, mut v: Value) -> Result<Value, NetError> {
        for layer in &self.layers[start..end] {
            v = layer.forward(&v)?;
        }
        Ok(v)
    }

    pub fn forward_cached(&self, x: &Value) -> Result<Cache, NetError> {
        if x.sample_shape() != self.input {
            return Err(NetError::Shape(format!("input {:?} does not match network input {:?}", x.sample_shape(), self.input)));
        }
        let mut outputs: Vec<Value> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let next = layer.forward(outputs.last().unwrap_or(x))?;
            outputs.push(next);
        }
        Ok(Cache { input: x.clone(), outputs })
    }

    fn softmax_head(&self, loss: Loss) -> bool {
        loss == Loss::CrossEntropy && matches!(self.layers.last(), Some(Layer::Activation(Activation::Softmax)))
    }

    /// Summed loss over the batch given the output of layer `idx - 1` (or the
    /// input when `idx == 0`), running layers `idx..`.
    pub fn loss_sum_from(&self, idx: usize, v: Value, y: &Matrix, loss: Loss) -> Result<f64, NetError> {
        let len = self.layers.len();
        if self.softmax_head(loss) {
            if idx == len {
                // perturbing probabilities directly: -sum y ln p
                let p = v.as_flat()?;
                check_targets(p, y)?;
                return Ok(p.iter().zip(y.iter()).map(|(p, t)| if *t == 0.0 { 0.0 } else { -t * p.ln() }).sum());
            }
            let z = self.run_range(idx, len - 1, v)?;
            return summed_loss(&z.to_flat(), y, loss);
        }
        let out = self.run_range(idx, len, v)?;
        summed_loss(&out.to_flat(), y, loss)
    }

    /// Batch-mean loss of the network on `(x, y)`.
    pub fn loss(&self, x: &Value, y: &Matrix, loss: Loss) -> Result<f64, NetError> {
        let n = x.n_samples().max(1) as f64;
        Ok(self.loss_sum_from(0, x.clone(), y, loss)? / n)
    }

    pub fn loss_and_goals(&self, cache: &Cache, y: &Matrix, loss: Loss) -> Result<Goals, NetError> {
        let len = self.layers.len();
        if len == 0 {
            return Err(NetError::Invalid("empty network".into()));
        }
        let n = cache.input.n_samples();
        let mut v: Vec<Option<Value>> = vec![None; len];
        let (mut g, top, loss_sum);
        if self.softmax_head(loss) {
            let p = cache.outputs[len - 1].as_flat()?;
            let z = cache.layer_input(len - 1).to_flat();
            check_targets(&z, y)?;
            loss_sum = summed_loss(&z, y, loss)?;
            let mut vp = Matrix::zeros(p.nrows(), p.ncols());
            for (o, (pp, t)) in vp.iter_mut().zip(p.iter().zip(y.iter())) {
                *o = if *t == 0.0 { 0.0 } else { t / pp };
            }
            v[len - 1] = Some(Value::Flat(vp));
            let vz = logit_goal(&z, y);
            g = reshape_like(cache.layer_input(len - 1), vz)?;
            top = len - 1;
        } else {
            let f = cache.output().to_flat();
            check_targets(&f, y)?;
            loss_sum = summed_loss(&f, y, loss)?;
            let vf = match loss {
                Loss::Square => (y - &f) * 2.0,
                Loss::CrossEntropy => logit_goal(&f, y),
            };
            g = reshape_like(cache.output(), vf)?;
            top = len;
        }
        for i in (0..top).rev() {
            let next = self.layers[i].backward_input(cache.layer_input(i), &cache.outputs[i], &g)?;
            v[i] = Some(std::mem::replace(&mut g, next));
        }
        Ok(Goals {
            loss: loss_sum / n.max(1) as f64,
            v: v.into_iter().map(|x| x.expect("every layer visited")).collect(),
        })
    }

    /// One full-batch gradient step on the batch-mean loss. Returns the loss
    /// before the step.
    pub fn sgd_step(&mut self, x: &Value, y: &Matrix, lr: f64, loss: Loss) -> Result<f64, NetError> {
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(NetError::Invalid(format!("learning rate must be finite and >= 0, got {lr}")));
        }
        let cache = self.forward_cached(x)?;
        let goals = self.loss_and_goals(&cache, y, loss)?;
        if lr == 0.0 {
            return Ok(goals.loss);
        }
        let n = x.n_samples().max(1) as f64;
        let mut steps = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            steps.push(layer.weight_product(cache.layer_input(i), &goals.v[i])?);
        }
        for (layer, step) in self.layers.iter_mut().zip(steps) {
            if let Some(s) = step {
                layer.add_to_weights(&s, lr / n)?;
            }
        }
        Ok(goals.loss)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn macs_count(&self) -> usize {
        let mut s = self.input;
        let mut total = 0;
        for l in &self.layers {
            total += l.macs(s).expect("validated at construction");
            s = l.output_shape(s).expect("validated at construction");
        }
        total
    }
}

fn check_targets(f: &Matrix, y: &Matrix) -> Result<(), NetError> {
    if f.shape() != y.shape() {
        return Err(NetError::Shape(format!("targets {:?} do not match outputs {:?}", y.shape(), f.shape())));
    }
    Ok(())
}

fn summed_loss(f: &Matrix, y: &Matrix, loss: Loss) -> Result<f64, NetError> {
    check_targets(f, y)?;
    Ok(match loss {
        Loss::Square => f.iter().zip(y.iter()).map(|(a, b)| (a - b) * (a - b)).sum(),
        Loss::CrossEntropy => {
            let lse = activation::log_sum_exp_columns(f);
            let mut s = 0.0;
            for j in 0..f.ncols() {
                for i in 0..f.nrows() {
                    s += y[(i, j)] * (lse[j] - f[(i, j)]);
                }
            }
            s
        }
    })
}

/// `-d l / d z = y - p * sum(y)` for softmax cross-entropy on logits `z`.
fn logit_goal(z: &Matrix, y: &Matrix) -> Matrix {
    let p = activation::softmax_columns(z);
    let mut out = Matrix::zeros(z.nrows(), z.ncols());
    for j in 0..z.ncols() {
        let mass: f64 = y.column(j).sum();
        for i in 0..z.nrows() {
            out[(i, j)] = y[(i, j)] - p[(i, j)] * mass;
        }
    }
    out
}

fn reshape_like(like: &Value, m: Matrix) -> Result<Value, NetError> {
    match like {
        Value::Flat(_) => Ok(Value::Flat(m)),
        Value::Spatial(t) => Ok(Value::Spatial(Tensor4::from_matrix(&m, t.c, t.h, t.w)?)),
    }
}

/// Dense layer with `N(0, 1/fan_in)` weights and zero bias.
pub fn random_dense<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Dense {
    let sd = 1.0 / (inp.max(1) as f64).sqrt();
    let mut w = Matrix::zeros(out, inp + 1);
    for o in 0..out {
        for k in 0..inp {
            let z: f64 = StandardNormal.sample(rng);
            w[(o, k)] = sd * z;
        }
    }
    Dense { w }
}

/// Convolution with `N(0, 1/fan_in)` kernel entries and zero bias.
pub fn random_conv<R: Rng>(out: usize, inp: usize, k: usize, padding: usize, rng: &mut R) -> Conv2d {
    let sd = 1.0 / ((inp * k * k).max(1) as f64).sqrt();
    let mut c = Conv2d::zeros(out, inp, k, padding);
    for v in c.kernel.iter_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *v = sd * z;
    }
    c
}

/// Index of the largest entry of every column.
pub fn argmax_columns(m: &Matrix) -> Vec<usize> {
    m.column_iter()
        .map(|c| {
            let mut best = 0;
            for i in 1..c.len() {
                if c[i] > c[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_give_zero_preactivations_and_bias_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::mlp(3, &[4, 2], 2, Activation::Selu, &mut rng).unwrap();
        for l in net.layers_mut() {
            if let Layer::Dense(d) = l {
                d.w.fill(0.0);
            }
        }
        let x = Matrix::from_fn(3, 5, |i, j| (i + j) as f64 - 2.0);
        let cache = net.forward_cached(&Value::Flat(x)).unwrap();
        for v in &cache.outputs {
            assert!(v.as_slice().iter().all(|&a| a == 0.0));
        }
        let b = cache.dense_input_with_bias(2).unwrap();
        assert!(b.row(4).iter().all(|&a| a == 1.0));
        assert!(b.rows(0, 4).iter().all(|&a| a == 0.0));
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut w = Matrix::zeros(3, 4);
        w.view_mut((0, 0), (3, 3)).fill_with_identity();
        let net = Network::new(Shape::Flat(3), vec![Layer::Dense(Dense::new(w).unwrap()), Layer::Activation(Activation::Identity)]).unwrap();
        let x = Matrix::from_fn(3, 4, |i, j| (i * 7 + j) as f64 * 0.25);
        assert_eq!(net.forward(&Value::Flat(x.clone())).unwrap(), Value::Flat(x));
    }

    #[test]
    fn two_layer_forward_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = Network::mlp(3, &[5], 2, Activation::Selu, &mut rng).unwrap();
        let x = Matrix::from_fn(3, 6, |_, _| rng.random_range(-2.0..2.0));
        let out = net.forward(&Value::Flat(x.clone())).unwrap().to_flat();
        let (w1, w2) = match (&net.layers()[0], &net.layers()[2]) {
            (Layer::Dense(a), Layer::Dense(b)) => (a.w.clone(), b.w.clone()),
            _ => unreachable!(),
        };
        for s in 0..6 {
            let mut h = vec![0.0; 5];
            for (o, hv) in h.iter_mut().enumerate() {
                let z = (0..3).map(|k| w1[(o, k)] * x[(k, s)]).sum::<f64>() + w1[(o, 3)];
                *hv = Activation::Selu.eval(z);
            }
            for o in 0..2 {
                let f = (0..5).map(|k| w2[(o, k)] * h[k]).sum::<f64>() + w2[(o, 5)];
                assert!((f - out[(o, s)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_activation_not_vanishing_and_inner_softmax() {
        let bad = Network::new(
            Shape::Flat(2),
            vec![Layer::Activation(Activation::Softmax), Layer::Dense(Dense::zeros(1, 2))],
        );
        assert!(matches!(bad, Err(NetError::Invalid(_))));
        let shape = Network::new(Shape::Flat(2), vec![Layer::Dense(Dense::zeros(1, 3))]);
        assert!(matches!(shape, Err(NetError::Shape(_))));
    }

    #[test]
    fn square_loss_output_goal_is_twice_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = Network::mlp(1, &[3], 1, Activation::Selu, &mut rng).unwrap();
        let x = Matrix::from_row_slice(1, 4, &[0.0, 1.0, 2.0, 3.0]);
        let y = Matrix::from_row_slice(1, 4, &[1.0, -1.0, 0.5, 2.0]);
        let cache = net.forward_cached(&Value::Flat(x)).unwrap();
        let goals = net.loss_and_goals(&cache, &y, Loss::Square).unwrap();
        let f = cache.output().to_flat();
        let expect = (&y - &f) * 2.0;
        assert_eq!(goals.v[2].to_flat(), expect);
        let mean: f64 = (&f - &y).iter().map(|r| r * r).sum::<f64>() / 4.0;
        assert!((goals.loss - mean).abs() < 1e-15);

        let exact = net.loss_and_goals(&cache, &f, Loss::Square).unwrap();
        assert!(exact.v.iter().all(|v| v.as_slice().iter().all(|&a| a == 0.0)));
    }

    #[test]
    fn goals_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = Network::mlp(2, &[3], 2, Activation::Tanh, &mut rng).unwrap();
        let x = Value::Flat(Matrix::from_fn(2, 5, |i, j| (i as f64) - (j as f64) * 0.3));
        let y = Matrix::from_fn(2, 5, |i, j| ((i + j) % 2) as f64);
        let c1 = net.forward_cached(&x).unwrap();
        let c2 = net.forward_cached(&x).unwrap();
        assert_eq!(c1, c2);
        assert_eq!(net.loss_and_goals(&c1, &y, Loss::CrossEntropy).unwrap(), net.loss_and_goals(&c2, &y, Loss::CrossEntropy).unwrap());
    }

    #[test]
    fn sgd_examples() {
        // lr = 0 leaves the net unchanged
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = Network::mlp(2, &[3], 1, Activation::Selu, &mut rng).unwrap();
        let before = net.clone();
        let x = Value::Flat(Matrix::from_fn(2, 4, |i, j| (i * 4 + j) as f64 * 0.1));
        let y = Matrix::from_fn(1, 4, |_, j| j as f64);
        net.sgd_step(&x, &y, 0.0, Loss::Square).unwrap();
        assert_eq!(net, before);

        // one-dimensional least squares from w = 0: w <- lr * 2 * mean(x y)
        let mut lin = Network::new(Shape::Flat(1), vec![Layer::Dense(Dense::zeros(1, 1))]).unwrap();
        let xs = [0.5, -1.0, 2.0];
        let ys = [1.0, 0.5, -3.0];
        let x = Value::Flat(Matrix::from_row_slice(1, 3, &xs));
        let y = Matrix::from_row_slice(1, 3, &ys);
        lin.sgd_step(&x, &y, 0.1, Loss::Square).unwrap();
        let w = match &lin.layers()[0] {
            Layer::Dense(d) => d.w[(0, 0)],
            _ => unreachable!(),
        };
        let mean_xy: f64 = xs.iter().zip(&ys).map(|(a, b)| a * b).sum::<f64>() / 3.0;
        assert!((w - 0.1 * 2.0 * mean_xy).abs() < 1e-15);
    }

    #[test]
    fn small_step_decreases_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut net = Network::mlp(3, &[6, 4], 2, Activation::Tanh, &mut rng).unwrap();
        let x = Value::Flat(Matrix::from_fn(3, 20, |_, _| rng.random_range(-1.0..1.0)));
        let y = Matrix::from_fn(2, 20, |_, _| rng.random_range(-1.0..1.0));
        let l0 = net.sgd_step(&x, &y, 1e-4, Loss::Square).unwrap();
        let l1 = net.loss(&x, &y, Loss::Square).unwrap();
        assert!(l1 < l0);
    }

    #[test]
    fn parameter_and_mac_counts() {
        let d = Network::new(Shape::Flat(2), vec![Layer::Dense(Dense::zeros(3, 2))]).unwrap();
        assert_eq!(d.param_count(), 9);
        let c = Network::new(Shape::Image { c: 3, h: 8, w: 8 }, vec![Layer::Conv2d(Conv2d::zeros(4, 3, 3, 1))]).unwrap();
        assert_eq!(c.macs_count(), 6912);
        assert_eq!(c.param_count(), 4 * 27 + 4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Network::mlp(784, &[1, 1], 10, Activation::Selu, &mut rng).unwrap();
        assert_eq!(m.param_count(), 785 + 2 + 20);
        assert_eq!(m.macs_count(), 785 + 2 + 20);
    }

    #[test]
    fn growable_positions_of_mlp_and_cnn() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = Network::mlp(4, &[3, 3], 2, Activation::Relu, &mut rng).unwrap();
        assert_eq!(m.growable_positions(), vec![0, 2]);
        let cnn = Network::new(
            Shape::Image { c: 1, h: 4, w: 4 },
            vec![
                Layer::Conv2d(random_conv(2, 1, 3, 1, &mut rng)),
                Layer::Activation(Activation::Selu),
                Layer::Conv2d(random_conv(2, 2, 3, 1, &mut rng)),
                Layer::Activation(Activation::Selu),
                Layer::AvgPool2d(2),
                Layer::Flatten,
                Layer::Dense(random_dense(2, 8, &mut rng)),
            ],
        )
        .unwrap();
        assert_eq!(cnn.growable_positions(), vec![0]);
    }
}
