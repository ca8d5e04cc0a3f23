//! Stride-1 square convolutions, their unfolded (im2col) form, and fixed
//! average pooling.

use crate::numerics::Matrix;

use super::value::Tensor4;
use super::NetError;

/// Convolution with kernel laid out `(out, in, row, col)`, stride 1 and
/// symmetric zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub out_ch: usize,
    pub in_ch: usize,
    pub k: usize,
    pub padding: usize,
    pub kernel: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv2d {
    pub fn zeros(out_ch: usize, in_ch: usize, k: usize, padding: usize) -> Self {
        Conv2d { out_ch, in_ch, k, padding, kernel: vec![0.0; out_ch * in_ch * k * k], bias: vec![0.0; out_ch] }
    }

    #[inline]
    pub fn kidx(&self, o: usize, c: usize, a: usize, b: usize) -> usize {
        ((o * self.in_ch + c) * self.k + a) * self.k + b
    }

    pub fn out_size(&self, h: usize, w: usize) -> Result<(usize, usize), NetError> {
        out_size(h, w, self.k, self.padding)
    }

    /// Flattened weights `out x (in*k*k + 1)`, last column the bias, rows
    /// indexed like `unfold` rows.
    pub fn weight_matrix(&self) -> Matrix {
        let kk = self.in_ch * self.k * self.k;
        Matrix::from_fn(self.out_ch, kk + 1, |o, j| if j < kk { self.kernel[o * kk + j] } else { self.bias[o] })
    }

    pub fn set_weight_matrix(&mut self, m: &Matrix) -> Result<(), NetError> {
        let kk = self.in_ch * self.k * self.k;
        if m.shape() != (self.out_ch, kk + 1) {
            return Err(NetError::Shape(format!("conv weight matrix must be {}x{}, got {:?}", self.out_ch, kk + 1, m.shape())));
        }
        for o in 0..self.out_ch {
            for j in 0..kk {
                self.kernel[o * kk + j] = m[(o, j)];
            }
            self.bias[o] = m[(o, kk)];
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4, NetError> {
        if x.c != self.in_ch {
            return Err(NetError::Shape(format!("conv expects {} channels, got {}", self.in_ch, x.c)));
        }
        let (ho, wo) = self.out_size(x.h, x.w)?;
        let p = self.padding as isize;
        let mut out = Tensor4::zeros(x.n, self.out_ch, ho, wo);
        for i in 0..x.n {
            for o in 0..self.out_ch {
                for y in 0..ho {
                    for xx in 0..wo {
                        let mut acc = 0.0;
                        for c in 0..self.in_ch {
                            for a in 0..self.k {
                                let sy = y as isize + a as isize - p;
                                if sy < 0 || sy >= x.h as isize {
                                    continue;
                                }
                                for b in 0..self.k {
                                    let sx = xx as isize + b as isize - p;
                                    if sx < 0 || sx >= x.w as isize {
                                        continue;
                                    }
                                    acc += self.kernel[self.kidx(o, c, a, b)] * x.at(i, c, sy as usize, sx as usize);
                                }
                            }
                        }
                        acc += self.bias[o];
                        let k = out.idx(i, o, y, xx);
                        out.data[k] = acc;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradient w.r.t. the input given the gradient `g` w.r.t. the output.
    pub fn backward_input(&self, x: &Tensor4, g: &Tensor4) -> Tensor4 {
        let p = self.padding as isize;
        let mut gi = Tensor4::zeros(x.n, x.c, x.h, x.w);
        for i in 0..g.n {
            for o in 0..self.out_ch {
                for y in 0..g.h {
                    for xx in 0..g.w {
                        let gv = g.at(i, o, y, xx);
                        if gv == 0.0 {
                            continue;
                        }
                        for c in 0..self.in_ch {
                            for a in 0..self.k {
                                let sy = y as isize + a as isize - p;
                                if sy < 0 || sy >= x.h as isize {
                                    continue;
                                }
                                for b in 0..self.k {
                                    let sx = xx as isize + b as isize - p;
                                    if sx < 0 || sx >= x.w as isize {
                                        continue;
                                    }
                                    let k = gi.idx(i, c, sy as usize, sx as usize);
                                    gi.data[k] += self.kernel[self.kidx(o, c, a, b)] * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        gi
    }

    /// Gradient w.r.t. the weight matrix (layout of `weight_matrix`).
    pub fn weight_gradient(&self, x: &Tensor4, g: &Tensor4) -> Matrix {
        let u = unfold(x, self.k, self.padding).expect("geometry validated by forward");
        let mut grad = Matrix::zeros(self.out_ch, self.in_ch * self.k * self.k + 1);
        let kk = self.in_ch * self.k * self.k;
        let hw = g.h * g.w;
        for i in 0..g.n {
            let bc = &u.per_sample[i];
            for o in 0..self.out_ch {
                for pix in 0..hw {
                    let gv = g.data[(i * g.c + o) * hw + pix];
                    if gv == 0.0 {
                        continue;
                    }
                    for j in 0..kk {
                        grad[(o, j)] += gv * bc[(j, pix)];
                    }
                    grad[(o, kk)] += gv;
                }
            }
        }
        grad
    }
}

pub fn out_size(h: usize, w: usize, k: usize, padding: usize) -> Result<(usize, usize), NetError> {
    let (hh, ww) = (h + 2 * padding, w + 2 * padding);
    if k == 0 || hh < k || ww < k {
        return Err(NetError::Shape(format!("kernel {k} does not fit a {h}x{w} image with padding {padding}")));
    }
    Ok((hh - k + 1, ww - k + 1))
}

/// Unfolded input: for each sample the matrix `B^c` of shape
/// `(C*k*k) x (H_out*W_out)` whose column `(y, x)` is the zero-padded patch
/// read by output pixel `(y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Unfolded {
    pub per_sample: Vec<Matrix>,
    pub h_out: usize,
    pub w_out: usize,
    pub channels: usize,
    pub k: usize,
}

pub fn unfold(x: &Tensor4, k: usize, padding: usize) -> Result<Unfolded, NetError> {
    let (ho, wo) = out_size(x.h, x.w, k, padding)?;
    let p = padding as isize;
    let rows = x.c * k * k;
    let mut per_sample = Vec::with_capacity(x.n);
    for i in 0..x.n {
        let mut m = Matrix::zeros(rows, ho * wo);
        for c in 0..x.c {
            for a in 0..k {
                for b in 0..k {
                    let r = (c * k + a) * k + b;
                    for y in 0..ho {
                        let sy = y as isize + a as isize - p;
                        if sy < 0 || sy >= x.h as isize {
                            continue;
                        }
                        for xx in 0..wo {
                            let sx = xx as isize + b as isize - p;
                            if sx < 0 || sx >= x.w as isize {
                                continue;
                            }
                            m[(r, y * wo + xx)] = x.at(i, c, sy as usize, sx as usize);
                        }
                    }
                }
            }
        }
        per_sample.push(m);
    }
    Ok(Unfolded { per_sample, h_out: ho, w_out: wo, channels: x.c, k })
}

impl Unfolded {
    pub fn patch_len(&self) -> usize {
        self.channels * self.k * self.k
    }

    /// All patches of all samples side by side: `(C*k*k) x (n*H_out*W_out)`.
    pub fn concat(&self) -> Matrix {
        let hw = self.h_out * self.w_out;
        let mut m = Matrix::zeros(self.patch_len(), self.per_sample.len() * hw);
        for (i, s) in self.per_sample.iter().enumerate() {
            m.view_mut((0, i * hw), (self.patch_len(), hw)).copy_from(s);
        }
        m
    }

    /// The matrix `B^t = T_j (B^c_i)^T` for a following convolution of kernel
    /// `k2` and padding `p2` evaluated at its output pixel `(y2, x2)`.
    ///
    /// Shape `(k2*k2) x (C*k*k)`; row `(a, b)` is the patch of the
    /// intermediate pixel `(y2 + a - p2, x2 + b - p2)`, zero outside.
    pub fn selector_patch(&self, sample: usize, y2: usize, x2: usize, k2: usize, p2: usize) -> Matrix {
        let bc = &self.per_sample[sample];
        let mut m = Matrix::zeros(k2 * k2, self.patch_len());
        for a in 0..k2 {
            let y = y2 as isize + a as isize - p2 as isize;
            if y < 0 || y >= self.h_out as isize {
                continue;
            }
            for b in 0..k2 {
                let x = x2 as isize + b as isize - p2 as isize;
                if x < 0 || x >= self.w_out as isize {
                    continue;
                }
                let col = y as usize * self.w_out + x as usize;
                for r in 0..self.patch_len() {
                    m[(a * k2 + b, r)] = bc[(r, col)];
                }
            }
        }
        m
    }
}

pub fn avg_pool_forward(x: &Tensor4, s: usize) -> Result<Tensor4, NetError> {
    if s == 0 || x.h % s != 0 || x.w % s != 0 {
        return Err(NetError::Shape(format!("pool size {s} does not tile {}x{}", x.h, x.w)));
    }
    let (ho, wo) = (x.h / s, x.w / s);
    let inv = 1.0 / (s * s) as f64;
    Ok(Tensor4::from_fn(x.n, x.c, ho, wo, |i, c, y, xx| {
        let mut acc = 0.0;
        for a in 0..s {
            for b in 0..s {
                acc += x.at(i, c, y * s + a, xx * s + b);
            }
        }
        acc * inv
    }))
}

pub fn avg_pool_backward(x: &Tensor4, g: &Tensor4, s: usize) -> Tensor4 {
    let inv = 1.0 / (s * s) as f64;
    Tensor4::from_fn(x.n, x.c, x.h, x.w, |i, c, y, xx| g.at(i, c, y / s, xx / s) * inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_conv(rng: &mut ChaCha8Rng, o: usize, c: usize, k: usize, p: usize) -> Conv2d {
        let mut conv = Conv2d::zeros(o, c, k, p);
        conv.kernel.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        conv.bias.iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        conv
    }

    #[test]
    fn one_by_one_selector_is_channel_vector() {
        let x = Tensor4::from_fn(1, 3, 2, 2, |_, c, y, xx| (c * 10 + y * 2 + xx) as f64);
        let u = unfold(&x, 1, 0).unwrap();
        let bt = u.selector_patch(0, 1, 0, 1, 0);
        assert_eq!(bt.shape(), (1, 3));
        for c in 0..3 {
            assert_eq!(bt[(0, c)], x.at(0, c, 1, 0));
        }
    }

    #[test]
    fn padded_corner_patch_has_four_ones() {
        let x = Tensor4::from_fn(1, 1, 5, 5, |_, _, _, _| 1.0);
        let u = unfold(&x, 3, 1).unwrap();
        let corner = u.per_sample[0].column(0);
        assert_eq!(corner.iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(corner.iter().filter(|&&v| v == 0.0).count(), 5);
    }

    #[test]
    fn unfolded_product_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let c = rng.random_range(1..=4);
            let o = rng.random_range(1..=4);
            let k = [1, 3][rng.random_range(0..2)];
            let p = rng.random_range(0..=k / 2);
            let h = rng.random_range(k.max(2)..=8);
            let w = rng.random_range(k.max(2)..=8);
            let conv = random_conv(&mut rng, o, c, k, p);
            let x = Tensor4::from_fn(2, c, h, w, |_, _, _, _| rng.random_range(-1.0..1.0));
            let direct = conv.forward(&x).unwrap();
            let u = unfold(&x, k, p).unwrap();
            let wm = conv.weight_matrix();
            let kk = c * k * k;
            for i in 0..2 {
                let via = wm.columns(0, kk) * &u.per_sample[i];
                for oo in 0..o {
                    for pix in 0..u.h_out * u.w_out {
                        let d = direct.at(i, oo, pix / u.w_out, pix % u.w_out);
                        assert!((via[(oo, pix)] + wm[(oo, kk)] - d).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn mac_example_output_size() {
        let conv = Conv2d::zeros(4, 3, 3, 1);
        assert_eq!(conv.out_size(8, 8).unwrap(), (8, 8));
        assert!(Conv2d::zeros(1, 1, 5, 0).out_size(3, 3).is_err());
    }

    #[test]
    fn pooling_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor4::from_fn(2, 2, 4, 6, |_, _, _, _| rng.random_range(-1.0..1.0));
        let g = Tensor4::from_fn(2, 2, 2, 3, |_, _, _, _| rng.random_range(-1.0..1.0));
        let y = avg_pool_forward(&x, 2).unwrap();
        let gx = avg_pool_backward(&x, &g, 2);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn conv_backward_is_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv = random_conv(&mut rng, 3, 2, 3, 1);
        let x = Tensor4::from_fn(2, 2, 5, 4, |_, _, _, _| rng.random_range(-1.0..1.0));
        let mut lin = conv.clone();
        lin.bias.iter_mut().for_each(|b| *b = 0.0);
        let y = lin.forward(&x).unwrap();
        let g = Tensor4::from_fn(y.n, y.c, y.h, y.w, |_, _, _, _| rng.random_range(-1.0..1.0));
        let gx = lin.backward_input(&x, &g);
        let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
