//! Channels-last layers with hand-written backward passes.
//!
//! Trainable layers follow one pattern: `forward` runs in training mode and
//! caches what `backward` needs, `infer` is the cache-free evaluation path,
//! and `backward` accumulates into parameter gradients only when they exist.

use crate::param::{normal_init, Param};
use crate::tensor::{matmul, matmul_nt, matmul_tn, Real, Tensor};

pub fn conv_out_size(n: usize, k: usize, s: usize, p: usize) -> usize {
    assert!(n + 2 * p >= k, "kernel {k} larger than padded input {n}+2*{p}");
    (n + 2 * p - k) / s + 1
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    b: usize,
    h: usize,
    w: usize,
    c: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
}

impl Geometry {
    fn new(b: usize, h: usize, w: usize, c: usize, k: usize, s: usize, p: usize) -> Self {
        Self {
            b,
            h,
            w,
            c,
            k,
            s,
            p,
            ho: conv_out_size(h, k, s, p),
            wo: conv_out_size(w, k, s, p),
        }
    }

    fn rows(&self) -> usize {
        self.b * self.ho * self.wo
    }

    fn row_len(&self) -> usize {
        self.k * self.k * self.c
    }

    /// Calls `f(col_offset, input_offset)` for every in-bounds (window, tap) pair.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let g = *self;
        let row_len = g.row_len();
        for bi in 0..g.b {
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let row = ((bi * g.ho + oy) * g.wo + ox) * row_len;
                    for ky in 0..g.k {
                        let iy = (oy * g.s + ky) as isize - g.p as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.k {
                            let ix = (ox * g.s + kx) as isize - g.p as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let src = ((bi * g.h + iy as usize) * g.w + ix as usize) * g.c;
                            f(row + (ky * g.k + kx) * g.c, src);
                        }
                    }
                }
            }
        }
    }
}

fn im2col<T: Real>(x: &[T], g: &Geometry) -> Vec<T> {
    let mut cols = vec![T::zero(); g.rows() * g.row_len()];
    let c = g.c;
    g.for_each_tap(|dst, src| cols[dst..dst + c].copy_from_slice(&x[src..src + c]));
    cols
}

fn col2im<T: Real>(cols: &[T], g: &Geometry) -> Vec<T> {
    let mut x = vec![T::zero(); g.b * g.h * g.w * g.c];
    let c = g.c;
    g.for_each_tap(|col, dst| {
        for (a, &b) in x[dst..dst + c].iter_mut().zip(&cols[col..col + c]) {
            *a += b;
        }
    });
    x
}

fn add_bias<T: Real>(y: &mut [T], bias: &[T]) {
    let c = bias.len();
    for row in y.chunks_exact_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

fn accumulate_bias_grad<T: Real>(grad: &mut [T], dy: &[T]) {
    let c = grad.len();
    for row in dy.chunks_exact(c) {
        for (g, &d) in grad.iter_mut().zip(row) {
            *g += d;
        }
    }
}

/// Square-kernel convolution. Weight layout `[k, k, cin, cout]`.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Geometry, Vec<T>)>,
}

impl<T: Real> Conv2d<T> {
    /// Kaiming-normal (fan-out, ReLU gain) weights, zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        seed: u64,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Self {
        let std = (2.0 / (cout * kernel * kernel) as f64).sqrt();
        let weight = normal_init(seed, &format!("{name}.weight"), &[kernel, kernel, cin, cout], std);
        Self::from_parts(weight, bias.then(|| Param::filled(format!("{name}.bias"), &[cout], T::zero())), stride, pad)
    }

    pub fn from_parts(weight: Param<T>, bias: Option<Param<T>>, stride: usize, pad: usize) -> Self {
        let s = &weight.shape;
        assert_eq!(s.len(), 4);
        assert_eq!(s[0], s[1], "square kernels only");
        let (kernel, cin, cout) = (s[0], s[2], s[3]);
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn run(&self, x: &Tensor<T>) -> (Tensor<T>, Geometry, Vec<T>) {
        let (b, h, w, c) = x.dims4();
        assert_eq!(c, self.cin, "{}: expected {} input channels, got {c}", self.weight.name, self.cin);
        let g = Geometry::new(b, h, w, c, self.kernel, self.stride, self.pad);
        let cols = if self.pointwise() { x.data.clone() } else { im2col(&x.data, &g) };
        let mut y = vec![T::zero(); g.rows() * self.cout];
        matmul(&cols, &self.weight.value, &mut y, g.rows(), g.row_len(), self.cout, false);
        if let Some(bias) = &self.bias {
            add_bias(&mut y, &bias.value);
        }
        (Tensor::from_vec(&[b, g.ho, g.wo, self.cout], y), g, cols)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x).0
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, g, cols) = self.run(x);
        self.cache = Some((g, cols));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (g, cols) = self.cache.take().expect("backward without forward");
        let (rows, row_len) = (g.rows(), g.row_len());
        if let Some(gw) = self.weight.grad.as_mut() {
            matmul_tn(&cols, &dy.data, gw, row_len, rows, self.cout, true);
        }
        if let Some(gb) = self.bias.as_mut().and_then(|b| b.grad.as_mut()) {
            accumulate_bias_grad(gb, &dy.data);
        }
        if !need_dx {
            return None;
        }
        let mut dcols = vec![T::zero(); rows * row_len];
        matmul_nt(&dy.data, &self.weight.value, &mut dcols, rows, self.cout, row_len, false);
        let dx = if self.pointwise() { dcols } else { col2im(&dcols, &g) };
        Some(Tensor::from_vec(&[g.b, g.h, g.w, g.c], dx))
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        std::iter::once(&self.weight).chain(self.bias.as_ref())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        std::iter::once(&mut self.weight).chain(self.bias.as_mut())
    }
}

/// Transposed convolution (the adjoint of [`Conv2d`]). Weight layout `[cin, k, k, cout]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Geometry, Tensor<T>)>,
}

impl<T: Real> ConvTranspose2d<T> {
    pub fn new(name: &str, seed: u64, cin: usize, cout: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        // fan-in of each output pixel is roughly cin * (k/s)^2
        let taps = (kernel / stride).max(1);
        let std = (1.0 / (cin * taps * taps) as f64).sqrt();
        let weight = normal_init(seed, &format!("{name}.weight"), &[cin, kernel, kernel, cout], std);
        let bias = Param::filled(format!("{name}.bias"), &[cout], T::zero());
        Self {
            weight,
            bias,
            cin,
            cout,
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    pub fn out_size(&self, n: usize) -> usize {
        (n - 1) * self.stride + self.kernel - 2 * self.pad
    }

    fn run(&self, x: &Tensor<T>) -> (Tensor<T>, Geometry) {
        let (b, h, w, c) = x.dims4();
        assert_eq!(c, self.cin, "{}: expected {} input channels, got {c}", self.weight.name, self.cin);
        let (ho, wo) = (self.out_size(h), self.out_size(w));
        // Geometry of the forward convolution whose adjoint this is.
        let g = Geometry::new(b, ho, wo, self.cout, self.kernel, self.stride, self.pad);
        debug_assert_eq!((g.ho, g.wo), (h, w));
        let row_len = g.row_len();
        let mut cols = vec![T::zero(); b * h * w * row_len];
        matmul(&x.data, &self.weight.value, &mut cols, b * h * w, self.cin, row_len, false);
        let mut y = col2im(&cols, &g);
        add_bias(&mut y, &self.bias.value);
        (Tensor::from_vec(&[b, ho, wo, self.cout], y), g)
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x).0
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, g) = self.run(x);
        self.cache = Some((g, x.clone()));
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>, need_dx: bool) -> Option<Tensor<T>> {
        let (g, x) = self.cache.take().expect("backward without forward");
        let (rows, row_len) = (g.rows(), g.row_len());
        let dcols = im2col(&dy.data, &g);
        if let Some(gw) = self.weight.grad.as_mut() {
            matmul_tn(&x.data, &dcols, gw, self.cin, rows, row_len, true);
        }
        if let Some(gb) = self.bias.grad.as_mut() {
            accumulate_bias_grad(gb, &dy.data);
        }
        if !need_dx {
            return None;
        }
        let mut dx = vec![T::zero(); rows * self.cin];
        matmul_nt(&dcols, &self.weight.value, &mut dx, rows, row_len, self.cin, false);
        Some(Tensor::from_vec(&x.shape, dx))
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        [&self.weight, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        [&mut self.weight, &mut self.bias].into_iter()
    }
}

#[derive(Clone, Debug)]
struct NormCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    batch_stats: bool,
}

/// Batch normalization over all but the channel axis.
#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub running_mean: Param<T>,
    pub running_var: Param<T>,
    /// Normalize with batch statistics (and update the running estimates)
    /// in training mode. When off, training uses the stored statistics.
    pub update_stats: bool,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<NormCache<T>>,
}

impl<T: Real> BatchNorm2d<T> {
    pub fn new(name: &str, c: usize) -> Self {
        Self {
            weight: Param::filled(format!("{name}.weight"), &[c], T::one()),
            bias: Param::filled(format!("{name}.bias"), &[c], T::zero()),
            running_mean: Param::buffer(format!("{name}.running_mean"), &[c], vec![T::zero(); c]),
            running_var: Param::buffer(format!("{name}.running_var"), &[c], vec![T::one(); c]),
            update_stats: true,
            momentum: 0.1,
            eps: 1e-5,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.weight.value.len()
    }

    fn normalize(&self, x: &[T], mean: &[T], inv_std: &[T]) -> (Vec<T>, Vec<T>) {
        let c = self.channels();
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        for ((xr, hr), yr) in x.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
            for j in 0..c {
                let v = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = v;
                yr[j] = v * self.weight.value[j] + self.bias.value[j];
            }
        }
        (xhat, y)
    }

    fn running_inv_std(&self) -> Vec<T> {
        let eps = T::lit(self.eps);
        self.running_var.value.iter().map(|&v| T::one() / (v + eps).sqrt()).collect()
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let inv = self.running_inv_std();
        let (_, y) = self.normalize(&x.data, &self.running_mean.value, &inv);
        Tensor::from_vec(&x.shape, y)
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let c = self.channels();
        assert_eq!(*x.shape.last().unwrap(), c);
        let n = x.len() / c;
        let (mean, inv_std) = if self.update_stats {
            let mut mean = vec![T::zero(); c];
            for row in x.data.chunks_exact(c) {
                for j in 0..c {
                    mean[j] += row[j];
                }
            }
            let nn = T::of(n);
            mean.iter_mut().for_each(|m| *m /= nn);
            let mut var = vec![T::zero(); c];
            for row in x.data.chunks_exact(c) {
                for j in 0..c {
                    let d = row[j] - mean[j];
                    var[j] += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v /= nn);
            let m = T::lit(self.momentum);
            let unbias = if n > 1 { nn / T::of(n - 1) } else { T::one() };
            for j in 0..c {
                let rm = &mut self.running_mean.value[j];
                *rm = (T::one() - m) * *rm + m * mean[j];
                let rv = &mut self.running_var.value[j];
                *rv = (T::one() - m) * *rv + m * var[j] * unbias;
            }
            let eps = T::lit(self.eps);
            let inv = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
            (mean, inv)
        } else {
            (self.running_mean.value.clone(), self.running_inv_std())
        };
        let (xhat, y) = self.normalize(&x.data, &mean, &inv_std);
        self.cache = Some(NormCache {
            xhat,
            inv_std,
            batch_stats: self.update_stats,
        });
        Tensor::from_vec(&x.shape, y)
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("backward without forward");
        let c = self.channels();
        let n = dy.len() / c;
        let mut sum_dy = vec![T::zero(); c];
        let mut sum_dy_xhat = vec![T::zero(); c];
        for (dr, hr) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
            for j in 0..c {
                sum_dy[j] += dr[j];
                sum_dy_xhat[j] += dr[j] * hr[j];
            }
        }
        if let Some(g) = self.weight.grad.as_mut() {
            for j in 0..c {
                g[j] += sum_dy_xhat[j];
            }
        }
        if let Some(g) = self.bias.grad.as_mut() {
            for j in 0..c {
                g[j] += sum_dy[j];
            }
        }
        let gamma = &self.weight.value;
        let mut dx = vec![T::zero(); dy.len()];
        if cache.batch_stats {
            let nn = T::of(n);
            for ((dr, hr), xr) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)).zip(dx.chunks_exact_mut(c)) {
                for j in 0..c {
                    let k = gamma[j] * cache.inv_std[j] / nn;
                    xr[j] = k * (nn * dr[j] - sum_dy[j] - hr[j] * sum_dy_xhat[j]);
                }
            }
        } else {
            for (dr, xr) in dy.data.chunks_exact(c).zip(dx.chunks_exact_mut(c)) {
                for j in 0..c {
                    xr[j] = dr[j] * gamma[j] * cache.inv_std[j];
                }
            }
        }
        Tensor::from_vec(&dy.shape, dx)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        [&self.weight, &self.bias, &self.running_mean, &self.running_var].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        [&mut self.weight, &mut self.bias, &mut self.running_mean, &mut self.running_var].into_iter()
    }
}

/// Layer normalization over the last (channel) axis.
#[derive(Clone, Debug)]
pub struct LayerNorm<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub eps: f64,
    cache: Option<NormCache<T>>,
}

impl<T: Real> LayerNorm<T> {
    pub fn new(name: &str, c: usize, eps: f64) -> Self {
        Self {
            weight: Param::filled(format!("{name}.weight"), &[c], T::one()),
            bias: Param::filled(format!("{name}.bias"), &[c], T::zero()),
            eps,
            cache: None,
        }
    }

    fn run(&self, x: &Tensor<T>) -> (Tensor<T>, NormCache<T>) {
        let c = self.weight.value.len();
        assert_eq!(*x.shape.last().unwrap(), c, "{}: channel mismatch", self.weight.name);
        let eps = T::lit(self.eps);
        let cc = T::of(c);
        let mut xhat = vec![T::zero(); x.len()];
        let mut y = vec![T::zero(); x.len()];
        let mut inv_std = Vec::with_capacity(x.len() / c);
        for ((xr, hr), yr) in x.data.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(y.chunks_exact_mut(c)) {
            let mean = xr.iter().copied().sum::<T>() / cc;
            let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cc;
            let inv = T::one() / (var + eps).sqrt();
            for j in 0..c {
                hr[j] = (xr[j] - mean) * inv;
                yr[j] = hr[j] * self.weight.value[j] + self.bias.value[j];
            }
            inv_std.push(inv);
        }
        (
            Tensor::from_vec(&x.shape, y),
            NormCache {
                xhat,
                inv_std,
                batch_stats: true,
            },
        )
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x).0
    }

    pub fn forward(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, cache) = self.run(x);
        self.cache = Some(cache);
        y
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let cache = self.cache.take().expect("backward without forward");
        let c = self.weight.value.len();
        let cc = T::of(c);
        if let Some(g) = self.weight.grad.as_mut() {
            for (dr, hr) in dy.data.chunks_exact(c).zip(cache.xhat.chunks_exact(c)) {
                for j in 0..c {
                    g[j] += dr[j] * hr[j];
                }
            }
        }
        if let Some(g) = self.bias.grad.as_mut() {
            accumulate_bias_grad(g, &dy.data);
        }
        let w = &self.weight.value;
        let mut dx = vec![T::zero(); dy.len()];
        for (((dr, hr), xr), &inv) in dy
            .data
            .chunks_exact(c)
            .zip(cache.xhat.chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
            .zip(&cache.inv_std)
        {
            let mut s1 = T::zero();
            let mut s2 = T::zero();
            for j in 0..c {
                let g = dr[j] * w[j];
                s1 += g;
                s2 += g * hr[j];
            }
            for j in 0..c {
                xr[j] = inv / cc * (cc * dr[j] * w[j] - s1 - hr[j] * s2);
            }
        }
        Tensor::from_vec(&dy.shape, dx)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        [&self.weight, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        [&mut self.weight, &mut self.bias].into_iter()
    }
}

/// Fully connected layer over the last axis. Weight layout `[in, out]`.
#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Real> Linear<T> {
    pub fn new(name: &str, seed: u64, din: usize, dout: usize) -> Self {
        let std = (1.0 / din as f64).sqrt();
        Self {
            weight: normal_init(seed, &format!("{name}.weight"), &[din, dout], std),
            bias: Param::filled(format!("{name}.bias"), &[dout], T::zero()),
        }
    }

    pub fn infer(&self, x: &Tensor<T>) -> Tensor<T> {
        let (din, dout) = (self.weight.shape[0], self.weight.shape[1]);
        assert_eq!(*x.shape.last().unwrap(), din, "{}: width mismatch", self.weight.name);
        let rows = x.len() / din;
        let mut y = vec![T::zero(); rows * dout];
        matmul(&x.data, &self.weight.value, &mut y, rows, din, dout, false);
        add_bias(&mut y, &self.bias.value);
        let mut shape = x.shape.clone();
        *shape.last_mut().unwrap() = dout;
        Tensor::from_vec(&shape, y)
    }

    pub fn params(&self) -> impl Iterator<Item = &Param<T>> {
        [&self.weight, &self.bias].into_iter()
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        [&mut self.weight, &mut self.bias].into_iter()
    }
}

pub fn gelu<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    half * x * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}

pub fn gelu_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(&x.shape, x.data.iter().map(|&v| gelu(v)).collect())
}

/// `dy * gelu'(x)` where `x` is the pre-activation input.
pub fn gelu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(&x.shape, x.data.iter().zip(&dy.data).map(|(&v, &d)| d * gelu_grad(v)).collect())
}

pub fn relu_tensor<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(&x.shape, x.data.iter().map(|&v| v.max(T::zero())).collect())
}

/// `dy` masked by `y > 0` where `y` is the ReLU output.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    Tensor::from_vec(
        &y.shape,
        y.data
            .iter()
            .zip(&dy.data)
            .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
            .collect(),
    )
}

/// Max pooling with square window. Padding cells never win.
#[derive(Clone, Debug)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            kernel,
            stride,
            pad,
            cache: None,
        }
    }

    fn run<T: Real>(&self, x: &Tensor<T>) -> (Tensor<T>, Vec<usize>) {
        let (b, h, w, c) = x.dims4();
        let ho = conv_out_size(h, self.kernel, self.stride, self.pad);
        let wo = conv_out_size(w, self.kernel, self.stride, self.pad);
        let mut y = vec![T::neg_infinity(); b * ho * wo * c];
        let mut arg = vec![usize::MAX; y.len()];
        for bi in 0..b {
            for oy in 0..ho {
                for ox in 0..wo {
                    let dst = ((bi * ho + oy) * wo + ox) * c;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let src = ((bi * h + iy as usize) * w + ix as usize) * c;
                            for j in 0..c {
                                if x.data[src + j] > y[dst + j] || arg[dst + j] == usize::MAX {
                                    y[dst + j] = x.data[src + j];
                                    arg[dst + j] = src + j;
                                }
                            }
                        }
                    }
                }
            }
        }
        (Tensor::from_vec(&[b, ho, wo, c], y), arg)
    }

    pub fn infer<T: Real>(&self, x: &Tensor<T>) -> Tensor<T> {
        self.run(x).0
    }

    pub fn forward<T: Real>(&mut self, x: &Tensor<T>) -> Tensor<T> {
        let (y, arg) = self.run(x);
        self.cache = Some((x.shape.clone(), arg));
        y
    }

    pub fn backward<T: Real>(&mut self, dy: &Tensor<T>) -> Tensor<T> {
        let (shape, arg) = self.cache.take().expect("backward without forward");
        let mut dx = Tensor::zeros(&shape);
        for (&i, &d) in arg.iter().zip(&dy.data) {
            dx.data[i] += d;
        }
        dx
    }
}
