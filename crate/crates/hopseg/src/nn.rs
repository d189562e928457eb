//! Dense numeric primitives: channel-last grids, 3x3 convolutions with
//! explicit backward passes, stable softmax, and momentum SGD.
//!
//! Everything is `f64` with fixed loop orders, so identical inputs give
//! bitwise-identical results.

use rand_chacha::ChaCha8Rng;

use crate::seed::uniform_symmetric;

/// Channel-last feature map, row-major `[y][x][c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Grid {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    #[inline]
    pub fn idx(&self, y: usize, x: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[self.idx(y, x, c)]
    }

    pub fn locations(&self) -> usize {
        self.height * self.width
    }
}

/// In-place stable softmax: subtract the max, exponentiate, normalize.
/// Invariant under uniform shifts of the input up to rounding.
pub fn softmax_inplace(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Gradient of `softmax` given its output `p` and upstream `dp`:
/// `dlogit_i = p_i * (dp_i - sum_j dp_j p_j)`.
pub fn softmax_backward(p: &[f64], dp: &[f64], dlogit: &mut [f64]) {
    let dot: f64 = p.iter().zip(dp.iter()).map(|(a, b)| a * b).sum();
    for i in 0..p.len() {
        dlogit[i] = p[i] * (dp[i] - dot);
    }
}

#[inline]
pub fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

#[inline]
pub fn leaky_relu_grad(pre: f64, slope: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        slope
    }
}

/// 3x3 convolution, stride 1, zero padding 1; spatial size is preserved.
/// Weights are `[out][ky][kx][in]` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3x3 {
    pub in_ch: usize,
    pub out_ch: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Conv3x3 {
    /// Weights uniform in `(-1/sqrt(9*in), 1/sqrt(9*in))`, biases zero.
    pub fn init(in_ch: usize, out_ch: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / ((9 * in_ch) as f64).sqrt();
        let weight = (0..out_ch * 9 * in_ch)
            .map(|_| uniform_symmetric(rng, scale))
            .collect();
        Conv3x3 {
            in_ch,
            out_ch,
            weight,
            bias: vec![0.0; out_ch],
        }
    }

    pub fn grads(&self) -> ConvGrads {
        ConvGrads {
            weight: vec![0.0; self.weight.len()],
            bias: vec![0.0; self.out_ch],
        }
    }

    #[inline]
    fn widx(&self, co: usize, ky: usize, kx: usize, ci: usize) -> usize {
        ((co * 3 + ky) * 3 + kx) * self.in_ch + ci
    }

    pub fn forward(&self, input: &Grid) -> Grid {
        debug_assert_eq!(input.channels, self.in_ch);
        let (h, w) = (input.height, input.width);
        let mut out = Grid::zeros(h, w, self.out_ch);
        for y in 0..h {
            for x in 0..w {
                for co in 0..self.out_ch {
                    let mut acc = self.bias[co];
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let base_in = ((yy as usize) * w + xx as usize) * self.in_ch;
                            let base_w = self.widx(co, ky, kx, 0);
                            for ci in 0..self.in_ch {
                                acc += self.weight[base_w + ci] * input.data[base_in + ci];
                            }
                        }
                    }
                    out.data[(y * w + x) * self.out_ch + co] = acc;
                }
            }
        }
        out
    }

    /// Accumulate weight/bias gradients and return the input gradient.
    pub fn backward(&self, input: &Grid, gout: &Grid, grads: &mut ConvGrads) -> Grid {
        let (h, w) = (input.height, input.width);
        let mut din = Grid::zeros(h, w, self.in_ch);
        for y in 0..h {
            for x in 0..w {
                for co in 0..self.out_ch {
                    let g = gout.data[(y * w + x) * self.out_ch + co];
                    if g == 0.0 {
                        grads.bias[co] += g;
                        continue;
                    }
                    grads.bias[co] += g;
                    for ky in 0..3 {
                        let yy = y as isize + ky as isize - 1;
                        if yy < 0 || yy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let xx = x as isize + kx as isize - 1;
                            if xx < 0 || xx >= w as isize {
                                continue;
                            }
                            let base_in = ((yy as usize) * w + xx as usize) * self.in_ch;
                            let base_w = self.widx(co, ky, kx, 0);
                            for ci in 0..self.in_ch {
                                grads.weight[base_w + ci] += g * input.data[base_in + ci];
                                din.data[base_in + ci] += self.weight[base_w + ci] * g;
                            }
                        }
                    }
                }
            }
        }
        din
    }
}

/// Momentum SGD over a flat parameter vector. Entries where `frozen` is
/// true are skipped entirely, so their values and momenta never move.
pub fn sgd_momentum_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    frozen: &[bool],
    lr: f64,
    momentum: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    debug_assert_eq!(params.len(), frozen.len());
    for i in 0..params.len() {
        if frozen[i] {
            continue;
        }
        velocity[i] = momentum * velocity[i] + grads[i];
        params[i] -= lr * velocity[i];
    }
}

/// Polynomial decay: `base * (1 - iter/total)^power`. Reaches zero only
/// at `iter == total`, which is one past the last executed step.
pub fn poly_lr(base: f64, iter: usize, total: usize, power: f64) -> f64 {
    debug_assert!(iter <= total);
    if total == 0 {
        return base;
    }
    base * (1.0 - iter as f64 / total as f64).powf(power)
}
