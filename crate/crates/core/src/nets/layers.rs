use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;

use super::{uniform_init, Mode};

/// 1-D convolution with "same"-style zero padding (left `(k-1)/2`).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv1d {
    /// `[out, in * kernel]`, row-major over `(in, kernel)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub in_channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

pub struct ConvCache {
    cols: Vec<Array2<f64>>,
    in_len: usize,
}

impl Conv1d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = in_channels * kernel;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = Array2::from_shape_vec(
            (out_channels, fan_in),
            uniform_init(rng, out_channels * fan_in, bound),
        )
        .unwrap();
        let bias = Array1::from(uniform_init(rng, out_channels, bound));
        Conv1d {
            weight,
            bias,
            in_channels,
            kernel,
            stride,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    fn pad_left(&self) -> usize {
        (self.kernel - 1) / 2
    }

    pub fn out_len(&self, in_len: usize) -> usize {
        (in_len.max(1) - 1) / self.stride + 1
    }

    fn im2col(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let l = x.ncols();
        let out_len = self.out_len(l);
        let pad = self.pad_left() as isize;
        let mut cols = Array2::zeros((self.in_channels * self.kernel, out_len));
        for ci in 0..self.in_channels {
            let row = x.row(ci);
            for k in 0..self.kernel {
                let mut dst = cols.row_mut(ci * self.kernel + k);
                for t in 0..out_len {
                    let src = (t * self.stride) as isize + k as isize - pad;
                    if src >= 0 && (src as usize) < l {
                        dst[t] = row[src as usize];
                    }
                }
            }
        }
        cols
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, ConvCache) {
        let (b, _, l) = x.dim();
        let out_len = self.out_len(l);
        let mut y = Array3::zeros((b, self.out_channels(), out_len));
        let mut cols_all = Vec::with_capacity(b);
        for (i, xi) in x.outer_iter().enumerate() {
            let cols = self.im2col(xi);
            let mut yi = self.weight.dot(&cols);
            for (mut row, &bb) in yi.outer_iter_mut().zip(self.bias.iter()) {
                row += bb;
            }
            y.index_axis_mut(Axis(0), i).assign(&yi);
            cols_all.push(cols);
        }
        (
            y,
            ConvCache {
                cols: cols_all,
                in_len: l,
            },
        )
    }

    /// Returns `dx`; accumulates parameter gradients into `grad` when given.
    pub fn backward(&self, cache: &ConvCache, dy: &Array3<f64>, grad: Option<&mut Conv1d>) -> Array3<f64> {
        let b = dy.dim().0;
        let mut dx = Array3::zeros((b, self.in_channels, cache.in_len));
        let pad = self.pad_left() as isize;
        let wt = self.weight.t();
        let mut grad = grad;
        for (i, dyi) in dy.outer_iter().enumerate() {
            if let Some(g) = grad.as_deref_mut() {
                g.weight += &dyi.dot(&cache.cols[i].t());
                g.bias += &dyi.sum_axis(Axis(1));
            }
            let dcols = wt.dot(&dyi);
            let mut dxi = dx.index_axis_mut(Axis(0), i);
            for ci in 0..self.in_channels {
                for k in 0..self.kernel {
                    let src_row = dcols.row(ci * self.kernel + k);
                    for (t, &v) in src_row.iter().enumerate() {
                        let src = (t * self.stride) as isize + k as isize - pad;
                        if src >= 0 && (src as usize) < cache.in_len {
                            dxi[[ci, src as usize]] += v;
                        }
                    }
                }
            }
        }
        dx
    }
}

/// Batch normalization over `(batch, time)` per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm1d {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

pub struct BnCache {
    xhat: Array3<f64>,
    inv_std: Array1<f64>,
    mode: Mode,
    batch_mean: Array1<f64>,
    batch_var_unbiased: Array1<f64>,
}

impl BatchNorm1d {
    pub fn new(channels: usize) -> Self {
        BatchNorm1d {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Array3<f64>, mode: Mode) -> (Array3<f64>, BnCache) {
        let (b, c, l) = x.dim();
        let m = (b * l) as f64;
        let (mean, var, var_unbiased) = match mode {
            Mode::Train => {
                let mut mean = Array1::zeros(c);
                let mut var = Array1::zeros(c);
                for ch in 0..c {
                    let view = x.slice(s![.., ch, ..]);
                    let mu = view.sum() / m;
                    let v = view.fold(0.0, |acc, &z| acc + (z - mu) * (z - mu)) / m;
                    mean[ch] = mu;
                    var[ch] = v;
                }
                let unbiased = if m > 1.0 { &var * (m / (m - 1.0)) } else { var.clone() };
                (mean, var, unbiased)
            }
            Mode::Eval => (
                self.running_mean.clone(),
                self.running_var.clone(),
                self.running_var.clone(),
            ),
        };
        let inv_std = var.mapv(|v| 1.0 / (v + self.eps).sqrt());
        let mut xhat = x.clone();
        let mut y = Array3::zeros((b, c, l));
        for ch in 0..c {
            let mut xs = xhat.slice_mut(s![.., ch, ..]);
            xs.mapv_inplace(|z| (z - mean[ch]) * inv_std[ch]);
            y.slice_mut(s![.., ch, ..])
                .assign(&xs.mapv(|z| self.gamma[ch] * z + self.beta[ch]));
        }
        (
            y,
            BnCache {
                xhat,
                inv_std,
                mode,
                batch_mean: mean,
                batch_var_unbiased: var_unbiased,
            },
        )
    }

    /// Folds a training-mode batch into the running statistics.
    pub fn absorb(&mut self, cache: &BnCache) {
        if cache.mode == Mode::Train {
            let mom = self.momentum;
            self.running_mean = &self.running_mean * (1.0 - mom) + &cache.batch_mean * mom;
            self.running_var = &self.running_var * (1.0 - mom) + &cache.batch_var_unbiased * mom;
        }
    }

    pub fn backward(&self, cache: &BnCache, dy: &Array3<f64>, grad: Option<&mut BatchNorm1d>) -> Array3<f64> {
        let (b, c, l) = dy.dim();
        let m = (b * l) as f64;
        let mut dx = Array3::zeros((b, c, l));
        let mut grad = grad;
        for ch in 0..c {
            let dys = dy.slice(s![.., ch, ..]);
            let xh = cache.xhat.slice(s![.., ch, ..]);
            let sum_dy = dys.sum();
            let sum_dy_xh = dys.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            if let Some(g) = grad.as_deref_mut() {
                g.gamma[ch] += sum_dy_xh;
                g.beta[ch] += sum_dy;
            }
            let scale = self.gamma[ch] * cache.inv_std[ch];
            let mut dxs = dx.slice_mut(s![.., ch, ..]);
            match cache.mode {
                Mode::Eval => dxs.assign(&dys.mapv(|v| v * scale)),
                Mode::Train => {
                    ndarray::Zip::from(&mut dxs)
                        .and(&dys)
                        .and(&xh)
                        .for_each(|d, &g, &h| {
                            *d = scale * (g - sum_dy / m - h * sum_dy_xh / m);
                        });
                }
            }
        }
        dx
    }
}

/// Affine map on the last axis: `y = x W^T + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Linear {
            weight: Array2::from_shape_vec((output, input), uniform_init(rng, output * input, bound))
                .unwrap(),
            bias: Array1::from(uniform_init(rng, output, bound)),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Linear {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }

    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: Option<&mut Linear>) -> Array2<f64> {
        if let Some(g) = grad {
            g.weight += &dy.t().dot(x);
            g.bias += &dy.sum_axis(Axis(0));
        }
        dy.dot(&self.weight)
    }
}

pub fn relu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn relu_backward(y: &Array3<f64>, dy: &Array3<f64>) -> Array3<f64> {
    let mut dx = dy.clone();
    ndarray::Zip::from(&mut dx).and(y).for_each(|d, &v| {
        if v <= 0.0 {
            *d = 0.0;
        }
    });
    dx
}

/// Max-pooling with window and stride 2; a trailing odd element is dropped.
pub fn max_pool2(x: &Array3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (b, c, l) = x.dim();
    let out_len = l / 2;
    let mut y = Array3::zeros((b, c, out_len));
    let mut arg = Vec::with_capacity(b * c * out_len);
    for i in 0..b {
        for ch in 0..c {
            for t in 0..out_len {
                let (a, bb) = (x[[i, ch, 2 * t]], x[[i, ch, 2 * t + 1]]);
                if bb > a {
                    y[[i, ch, t]] = bb;
                    arg.push(2 * t + 1);
                } else {
                    y[[i, ch, t]] = a;
                    arg.push(2 * t);
                }
            }
        }
    }
    (y, arg)
}

pub fn max_pool2_backward(arg: &[usize], dy: &Array3<f64>, in_len: usize) -> Array3<f64> {
    let (b, c, out_len) = dy.dim();
    let mut dx = Array3::zeros((b, c, in_len));
    let mut k = 0;
    for i in 0..b {
        for ch in 0..c {
            for t in 0..out_len {
                dx[[i, ch, arg[k]]] += dy[[i, ch, t]];
                k += 1;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn conv_same_padding_keeps_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let conv = Conv1d::new(3, 5, 8, 1, &mut rng);
        let x = Array3::ones((2, 3, 20));
        let (y, _) = conv.forward(&x);
        assert_eq!(y.dim(), (2, 5, 20));
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv1d::new(2, 3, 3, 1, &mut rng);
        let x = Array3::from_shape_fn((1, 2, 6), |(_, c, t)| (c * 6 + t) as f64 * 0.3 - 1.0);
        let (y, _) = conv.forward(&x);
        for o in 0..3 {
            for t in 0..6 {
                let mut acc = conv.bias[o];
                for c in 0..2 {
                    for k in 0..3 {
                        let src = t as isize + k as isize - 1;
                        if (0..6).contains(&src) {
                            acc += conv.weight[[o, c * 3 + k]] * x[[0, c, src as usize]];
                        }
                    }
                }
                assert!((y[[0, o, t]] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let bn = BatchNorm1d::new(1);
        let x = Array3::from_shape_vec((2, 1, 2), vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        let (y, cache) = bn.forward(&x, Mode::Train);
        assert!(y.sum().abs() < 1e-12);
        let mut bn2 = bn.clone();
        bn2.absorb(&cache);
        // batch mean 4, unbiased var 20/3
        assert!((bn2.running_mean[0] - 0.4).abs() < 1e-12);
        assert!((bn2.running_var[0] - (0.9 + 0.1 * 20.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn pool_picks_max() {
        let x = Array3::from_shape_vec((1, 1, 5), vec![1.0, 3.0, 2.0, 0.0, 9.0]).unwrap();
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.into_raw_vec_and_offset().0, vec![3.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
    }

    #[test]
    fn linear_forward() {
        let lin = Linear {
            weight: array![[1.0, 2.0], [0.0, -1.0]],
            bias: array![0.5, 0.0],
        };
        let y = lin.forward(&array![[1.0, 1.0]]);
        assert_eq!(y, array![[3.5, -1.0]]);
    }
}
