use crate::numerics::Matrix;

use super::activation::Activation;
use super::conv::{self, Conv2d};
use super::value::{with_bias_row, Shape, Tensor4, Value};
use super::NetError;

/// Fully-connected layer `a = W (b; 1)`; `w` is `out x (in + 1)` with the bias
/// in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Matrix,
}

impl Dense {
    pub fn new(w: Matrix) -> Result<Self, NetError> {
        if w.ncols() == 0 {
            return Err(NetError::Shape("dense weight needs a bias column".into()));
        }
        Ok(Dense { w })
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Dense { w: Matrix::zeros(out, inp + 1) }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols() - 1
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    /// Fixed summation order (inputs in index order, bias last) so that
    /// appending zero-weight inputs leaves every output bit-identical.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NetError> {
        let d = self.in_dim();
        if x.nrows() != d {
            return Err(NetError::Shape(format!("dense layer expects {d} inputs, got {}", x.nrows())));
        }
        let mut out = Matrix::zeros(self.out_dim(), x.ncols());
        for s in 0..x.ncols() {
            let col = x.column(s);
            for o in 0..self.out_dim() {
                let mut acc = 0.0;
                for k in 0..d {
                    acc += self.w[(o, k)] * col[k];
                }
                acc += self.w[(o, d)];
                out[(o, s)] = acc;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(Dense),
    Conv2d(Conv2d),
    Activation(Activation),
    /// Non-overlapping average pooling with the given window.
    AvgPool2d(usize),
    Flatten,
}

impl Layer {
    pub fn is_weighted(&self) -> bool {
        matches!(self, Layer::Dense(_) | Layer::Conv2d(_))
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Dense(_) => "dense",
            Layer::Conv2d(_) => "conv2d",
            Layer::Activation(_) => "activation",
            Layer::AvgPool2d(_) => "avgpool2d",
            Layer::Flatten => "flatten",
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape, NetError> {
        match (self, input) {
            (Layer::Dense(d), Shape::Flat(n)) if n == d.in_dim() => Ok(Shape::Flat(d.out_dim())),
            (Layer::Conv2d(c), Shape::Image { c: ch, h, w }) if ch == c.in_ch => {
                let (ho, wo) = c.out_size(h, w)?;
                Ok(Shape::Image { c: c.out_ch, h: ho, w: wo })
            }
            (Layer::Activation(Activation::Softmax), Shape::Flat(n)) => Ok(Shape::Flat(n)),
            (Layer::Activation(Activation::Softmax), _) => Err(NetError::Shape("softmax needs flat input".into())),
            (Layer::Activation(_), s) => Ok(s),
            (Layer::AvgPool2d(s), Shape::Image { c, h, w }) if *s > 0 && h % s == 0 && w % s == 0 => {
                Ok(Shape::Image { c, h: h / s, w: w / s })
            }
            (Layer::Flatten, s) => Ok(Shape::Flat(s.numel())),
            (layer, s) => Err(NetError::Shape(format!("{} layer cannot take input {s:?}", layer.kind()))),
        }
    }

    pub fn forward(&self, x: &Value) -> Result<Value, NetError> {
        match self {
            Layer::Dense(d) => Ok(Value::Flat(d.forward(x.as_flat()?)?)),
            Layer::Conv2d(c) => Ok(Value::Spatial(c.forward(x.as_spatial()?)?)),
            Layer::Activation(a) => a.forward(x),
            Layer::AvgPool2d(s) => Ok(Value::Spatial(conv::avg_pool_forward(x.as_spatial()?, *s)?)),
            Layer::Flatten => Ok(Value::Flat(x.to_flat())),
        }
    }

    /// Map a gradient w.r.t. this layer's output to one w.r.t. its input.
    pub fn backward_input(&self, x: &Value, out: &Value, g: &Value) -> Result<Value, NetError> {
        match self {
            Layer::Dense(d) => {
                let g = g.as_flat()?;
                let w = d.w.columns(0, d.in_dim());
                Ok(Value::Flat(w.transpose() * g))
            }
            Layer::Conv2d(c) => Ok(Value::Spatial(c.backward_input(x.as_spatial()?, g.as_spatial()?))),
            Layer::Activation(a) => a.backward(x, out, g),
            Layer::AvgPool2d(s) => Ok(Value::Spatial(conv::avg_pool_backward(x.as_spatial()?, g.as_spatial()?, *s))),
            Layer::Flatten => match x {
                Value::Flat(_) => Ok(g.clone()),
                Value::Spatial(t) => Ok(Value::Spatial(Tensor4::from_matrix(g.as_flat()?, t.c, t.h, t.w)?)),
            },
        }
    }

    /// `sum_i g_i (b_i; 1)^T` in the layout of the layer's weight matrix, or
    /// `None` for parameter-free layers.
    pub fn weight_product(&self, x: &Value, g: &Value) -> Result<Option<Matrix>, NetError> {
        match self {
            Layer::Dense(_) => Ok(Some(g.as_flat()? * with_bias_row(x.as_flat()?).transpose())),
            Layer::Conv2d(c) => Ok(Some(c.weight_gradient(x.as_spatial()?, g.as_spatial()?))),
            _ => Ok(None),
        }
    }

    /// Weight matrix (`Dense::w` or `Conv2d::weight_matrix`).
    pub fn weight_matrix(&self) -> Option<Matrix> {
        match self {
            Layer::Dense(d) => Some(d.w.clone()),
            Layer::Conv2d(c) => Some(c.weight_matrix()),
            _ => None,
        }
    }

    pub fn add_to_weights(&mut self, delta: &Matrix, scale: f64) -> Result<(), NetError> {
        match self {
            Layer::Dense(d) => {
                if d.w.shape() != delta.shape() {
                    return Err(NetError::Shape(format!("update {:?} does not match weight {:?}", delta.shape(), d.w.shape())));
                }
                d.w += delta * scale;
                Ok(())
            }
            Layer::Conv2d(c) => {
                let w = c.weight_matrix();
                if w.shape() != delta.shape() {
                    return Err(NetError::Shape(format!("update {:?} does not match weight {:?}", delta.shape(), w.shape())));
                }
                c.set_weight_matrix(&(w + delta * scale))
            }
            _ => Err(NetError::Shape(format!("{} layer has no weights", self.kind()))),
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Layer::Dense(d) => d.w.len(),
            Layer::Conv2d(c) => c.kernel.len() + c.bias.len(),
            _ => 0,
        }
    }

    /// Multiply-accumulates per sample for this layer given its input shape.
    pub fn macs(&self, input: Shape) -> Result<usize, NetError> {
        match (self, input) {
            (Layer::Dense(d), _) => Ok(d.w.len()),
            (Layer::Conv2d(c), Shape::Image { h, w, .. }) => {
                let (ho, wo) = c.out_size(h, w)?;
                Ok(c.out_ch * c.in_ch * c.k * c.k * ho * wo)
            }
            (Layer::Conv2d(_), s) => Err(NetError::Shape(format!("conv cannot take input {s:?}"))),
            _ => Ok(0),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Layer::Dense(d) => d.w.iter().all(|x| x.is_finite()),
            Layer::Conv2d(c) => c.kernel.iter().chain(&c.bias).all(|x| x.is_finite()),
            _ => true,
        }
    }
}
