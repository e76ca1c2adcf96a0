//! Minimal feed-forward building blocks with hand-written backward passes.
//!
//! Parameters live in one flat vector described by a [`Layout`]; layers refer to
//! their tensors by offset. Convolutions use a channel-major `[C, N, H, W]`
//! activation layout so im2col products map straight onto GEMM.

use std::fmt::Debug;
use std::ops::{AddAssign, MulAssign, SubAssign};

use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, LinalgScalar, ScalarOperand};
use rand::Rng;

/// Floating-point element type for parameters and activations.
pub trait Real:
    num_traits::Float
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + std::iter::Sum
    + 'static
{
    /// Dtype code used in checkpoints.
    const DTYPE: u8;
    const BYTES: usize;
    fn of(v: f64) -> Self;
    fn f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: u8 = 1;
    const BYTES: usize = 4;
    fn of(v: f64) -> Self {
        v as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().unwrap())
    }
}

impl Real for f64 {
    const DTYPE: u8 = 2;
    const BYTES: usize = 8;
    fn of(v: f64) -> Self {
        v
    }
    fn f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().unwrap())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }

    pub fn apply<F: Real>(self, v: F) -> F {
        match self {
            Activation::Relu => v.max(F::zero()),
            Activation::Tanh => v.tanh(),
        }
    }

    /// Derivative expressed through the activation's output.
    pub fn grad_from_output<F: Real>(self, y: F) -> F {
        match self {
            Activation::Relu => {
                if y > F::zero() {
                    F::one()
                } else {
                    F::zero()
                }
            }
            Activation::Tanh => F::one() - y * y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Fan-in used for initialization; zero marks a bias.
    pub fan_in: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors packed into a flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    pub tensors: Vec<TensorInfo>,
    pub len: usize,
}

impl Layout {
    pub fn add(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        let offset = self.len;
        let info = TensorInfo {
            name,
            shape,
            offset,
            fan_in,
        };
        self.len += info.len();
        self.tensors.push(info);
        offset
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Uniform in `±sqrt(3 / fan_in)` for weights, zero for biases.
    pub fn init<F: Real, R: Rng + ?Sized>(&self, rng: &mut R, scale: f64) -> Vec<F> {
        let mut out = vec![F::zero(); self.len];
        for t in &self.tensors {
            if t.fan_in == 0 {
                continue;
            }
            let limit = scale * (3.0 / t.fan_in as f64).sqrt();
            for v in &mut out[t.offset..t.offset + t.len()] {
                *v = F::of(rng.random_range(-limit..limit));
            }
        }
        out
    }
}

pub fn mat<F: Real>(p: &[F], off: usize, rows: usize, cols: usize) -> ArrayView2<'_, F> {
    ArrayView2::from_shape((rows, cols), &p[off..off + rows * cols]).expect("layout shape")
}

pub fn mat_mut<F: Real>(p: &mut [F], off: usize, rows: usize, cols: usize) -> ArrayViewMut2<'_, F> {
    ArrayViewMut2::from_shape((rows, cols), &mut p[off..off + rows * cols]).expect("layout shape")
}

/// Fully connected layer `y = x·W + b` with `W` stored `[inputs, outputs]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub w: usize,
    pub b: usize,
    pub act: Option<Activation>,
}

impl Dense {
    pub fn register(layout: &mut Layout, name: &str, inputs: usize, outputs: usize, act: Option<Activation>) -> Self {
        let w = layout.add(format!("{name}.w"), vec![inputs, outputs], inputs);
        let b = layout.add(format!("{name}.b"), vec![outputs], 0);
        Self {
            inputs,
            outputs,
            w,
            b,
            act,
        }
    }

    pub fn forward<F: Real>(&self, p: &[F], x: &ArrayView2<F>) -> Array2<F> {
        let mut y = x.dot(&mat(p, self.w, self.inputs, self.outputs));
        let bias = &p[self.b..self.b + self.outputs];
        for mut row in y.rows_mut() {
            for (v, &b) in row.iter_mut().zip(bias) {
                *v += b;
            }
        }
        if let Some(a) = self.act {
            y.mapv_inplace(|v| a.apply(v));
        }
        y
    }

    /// Takes the gradient w.r.t. the layer output, accumulates parameter gradients
    /// and returns the gradient w.r.t. the input when requested.
    pub fn backward<F: Real>(
        &self,
        p: &[F],
        grad: &mut [F],
        x: &ArrayView2<F>,
        y: &Array2<F>,
        mut dy: Array2<F>,
        need_dx: bool,
    ) -> Option<Array2<F>> {
        if let Some(a) = self.act {
            dy.zip_mut_with(y, |d, &o| *d *= a.grad_from_output(o));
        }
        self.backward_linear(p, grad, x, &dy, need_dx)
    }

    /// Backward pass for gradients already taken through the activation.
    pub fn backward_linear<F: Real>(
        &self,
        p: &[F],
        grad: &mut [F],
        x: &ArrayView2<F>,
        dz: &Array2<F>,
        need_dx: bool,
    ) -> Option<Array2<F>> {
        let mut gw = mat_mut(grad, self.w, self.inputs, self.outputs);
        ndarray::linalg::general_mat_mul(F::one(), &x.t(), dz, F::one(), &mut gw);
        let gb = &mut grad[self.b..self.b + self.outputs];
        for row in dz.rows() {
            for (g, &d) in gb.iter_mut().zip(row) {
                *g += d;
            }
        }
        need_dx.then(|| dz.dot(&mat(p, self.w, self.inputs, self.outputs).t()))
    }
}

/// Square-kernel 2-D convolution with zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub h: usize,
    pub w: usize,
    pub ho: usize,
    pub wo: usize,
    pub wt: usize,
    pub b: usize,
    pub act: Activation,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn register(
        layout: &mut Layout,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        h: usize,
        w: usize,
        act: Activation,
    ) -> Self {
        let ho = (h + 2 * pad - kernel) / stride + 1;
        let wo = (w + 2 * pad - kernel) / stride + 1;
        let fan_in = cin * kernel * kernel;
        let wt = layout.add(format!("{name}.w"), vec![cout, cin, kernel, kernel], fan_in);
        let b = layout.add(format!("{name}.b"), vec![cout], 0);
        Self {
            cin,
            cout,
            kernel,
            stride,
            pad,
            h,
            w,
            ho,
            wo,
            wt,
            b,
            act,
        }
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.ho * self.wo
    }

    fn patch(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn im2col<F: Real>(&self, x: &[F], n: usize) -> Array2<F> {
        let cols = n * self.ho * self.wo;
        let mut out = Array2::<F>::zeros((self.patch(), cols));
        let k = self.kernel;
        let data = out.as_slice_mut().unwrap();
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut data[row * cols..(row + 1) * cols];
                    for s in 0..n {
                        let src = &x[(c * n + s) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let base = (s * self.ho + oy) * self.wo;
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst[base + ox] = src[iy as usize * self.w + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn col2im<F: Real>(&self, cols: &Array2<F>, n: usize) -> Vec<F> {
        let mut x = vec![F::zero(); self.cin * n * self.h * self.w];
        let k = self.kernel;
        let ncols = n * self.ho * self.wo;
        let data = cols.as_slice().expect("standard layout");
        for c in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &data[row * ncols..(row + 1) * ncols];
                    for s in 0..n {
                        let dst = &mut x[(c * n + s) * self.h * self.w..][..self.h * self.w];
                        for oy in 0..self.ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let base = (s * self.ho + oy) * self.wo;
                            for ox in 0..self.wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < self.w as isize {
                                    dst[iy as usize * self.w + ix as usize] += src[base + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        x
    }

    /// `x` is `[cin, n, h, w]`; returns the im2col matrix and the activated output
    /// `[cout, n·ho·wo]`.
    pub fn forward<F: Real>(&self, p: &[F], x: &[F], n: usize) -> (Array2<F>, Array2<F>) {
        let cols = self.im2col(x, n);
        let mut y = mat(p, self.wt, self.cout, self.patch()).dot(&cols);
        for (mut row, &b) in y.rows_mut().into_iter().zip(&p[self.b..self.b + self.cout]) {
            row.mapv_inplace(|v| self.act.apply(v + b));
        }
        (cols, y)
    }

    pub fn backward<F: Real>(
        &self,
        p: &[F],
        grad: &mut [F],
        cols: &Array2<F>,
        y: &Array2<F>,
        mut dy: Array2<F>,
        n: usize,
        need_dx: bool,
    ) -> Option<Vec<F>> {
        dy.zip_mut_with(y, |d, &o| *d *= self.act.grad_from_output(o));
        let patch = self.patch();
        let mut gw = mat_mut(grad, self.wt, self.cout, patch);
        ndarray::linalg::general_mat_mul(F::one(), &dy, &cols.t(), F::one(), &mut gw);
        for (g, row) in grad[self.b..self.b + self.cout].iter_mut().zip(dy.rows()) {
            *g += row.sum();
        }
        need_dx.then(|| {
            let dcols = mat(p, self.wt, self.cout, patch).t().dot(&dy);
            self.col2im(&dcols, n)
        })
    }
}

/// `[C, N, Q]` channel-major activations to `[N, C·Q]` rows.
pub fn channels_to_rows<F: Real>(x: &Array2<F>, n: usize) -> Array2<F> {
    let c = x.nrows();
    let q = x.ncols() / n;
    let mut out = Array2::<F>::zeros((n, c * q));
    for ch in 0..c {
        for s in 0..n {
            out.slice_mut(s![s, ch * q..(ch + 1) * q])
                .assign(&x.slice(s![ch, s * q..(s + 1) * q]));
        }
    }
    out
}

/// Inverse of [`channels_to_rows`].
pub fn rows_to_channels<F: Real>(x: &ArrayView2<F>, c: usize) -> Array2<F> {
    let n = x.nrows();
    let q = x.ncols() / c;
    let mut out = Array2::<F>::zeros((c, n * q));
    for ch in 0..c {
        for s in 0..n {
            out.slice_mut(s![ch, s * q..(s + 1) * q])
                .assign(&x.slice(s![s, ch * q..(ch + 1) * q]));
        }
    }
    out
}

/// Row-wise log-softmax.
pub fn log_softmax_rows<F: Real>(logits: &Array2<F>) -> Array2<F> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<F>().ln();
        row.mapv_inplace(|v| v - lse);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn conv_matches_direct_sum() {
        let mut layout = Layout::default();
        let conv = Conv::register(&mut layout, "c", 2, 3, 3, 2, 1, 5, 4, Activation::Tanh);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let p: Vec<f64> = layout.init(&mut rng, 1.0);
        let n = 2;
        let x: Vec<f64> = (0..2 * n * 20).map(|i| ((i * 7 % 11) as f64) / 11.0 - 0.4).collect();
        let (_, y) = conv.forward(&p, &x, n);
        assert_eq!((conv.ho, conv.wo), (3, 2));
        for co in 0..3 {
            for s in 0..n {
                for oy in 0..conv.ho {
                    for ox in 0..conv.wo {
                        let mut acc = 0.0;
                        for ci in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = (oy * 2 + ky) as isize - 1;
                                    let ix = (ox * 2 + kx) as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    let wv = p[conv.wt + ((co * 2 + ci) * 3 + ky) * 3 + kx];
                                    acc += wv * x[((ci * n + s) * 5 + iy as usize) * 4 + ix as usize];
                                }
                            }
                        }
                        let expect = acc.tanh();
                        let got = y[[co, (s * conv.ho + oy) * conv.wo + ox]];
                        assert!((got - expect).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn conv_and_dense_gradients_match_finite_differences() {
        let mut layout = Layout::default();
        let conv = Conv::register(&mut layout, "c", 1, 2, 3, 2, 1, 6, 6, Activation::Tanh);
        let dense = Dense::register(&mut layout, "d", conv.out_len(), 3, Some(Activation::Tanh));
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p: Vec<f64> = layout.init(&mut rng, 1.0);
        let n = 2;
        let x: Vec<f64> = (0..n * 36).map(|i| ((i * 5 % 13) as f64) / 13.0).collect();
        let target = [0.3, -0.2, 0.1];
        let loss = |p: &[f64]| {
            let (_, y) = conv.forward(p, &x, n);
            let rows = channels_to_rows(&y, n);
            let out = dense.forward(p, &rows.view());
            out.rows()
                .into_iter()
                .map(|r| r.iter().zip(target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum::<f64>())
                .sum::<f64>()
        };
        let (cols, y) = conv.forward(&p, &x, n);
        let rows = channels_to_rows(&y, n);
        let out = dense.forward(&p, &rows.view());
        let mut dy = out.clone();
        for mut r in dy.rows_mut() {
            for (v, t) in r.iter_mut().zip(target) {
                *v -= t;
            }
        }
        let mut grad = vec![0.0; layout.len];
        let drows = dense
            .backward(&p, &mut grad, &rows.view(), &out, dy, true)
            .unwrap();
        let dconv = rows_to_channels(&drows.view(), conv.cout);
        conv.backward(&p, &mut grad, &cols, &y, dconv, n, false);
        for k in 0..layout.len {
            let h = 1e-6;
            let mut a = p.clone();
            a[k] += h;
            let mut b = p.clone();
            b[k] -= h;
            let fd = (loss(&a) - loss(&b)) / (2.0 * h);
            assert!((fd - grad[k]).abs() <= 1e-6 * (1.0 + fd.abs()), "param {k}: {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn channel_row_round_trip() {
        let x = Array2::from_shape_fn((3, 8), |(i, j)| (i * 8 + j) as f64);
        let rows = channels_to_rows(&x, 2);
        assert_eq!(rows[[1, 0]], 4.0);
        assert_eq!(rows_to_channels(&rows.view(), 3), x);
    }

    #[test]
    fn log_softmax_normalizes() {
        let l = Array2::from_shape_vec((1, 3), vec![1.0f64, 2.0, 3.0]).unwrap();
        let ls = log_softmax_rows(&l);
        let total: f64 = ls.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    proptest::proptest! {
        #[test]
        fn log_softmax_rows_always_normalize(v in proptest::collection::vec(-60.0f64..60.0, 2..40)) {
            let l = Array2::from_shape_vec((1, v.len()), v).unwrap();
            let total: f64 = log_softmax_rows(&l).iter().map(|x| x.exp()).sum();
            proptest::prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
