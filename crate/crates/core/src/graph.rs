//! Tape-based reverse-mode differentiation over 2-D matrices.
//!
//! Image batches are stored one sample per row with channel-major
//! `C × H × W` columns, so 2-D convolution, batch normalization and pooling
//! live here next to the sequence ops used by the acoustic model.

use crate::mat::{gemm_into, Mat};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Spatial layout of an image batch row: `channels × height × width`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageGeom {
    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn plane(&self) -> usize {
        self.height * self.width
    }
}

/// Convolution hyper-parameters (square kernel).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
}

impl Conv2dSpec {
    /// Output geometry, or `None` when the kernel does not fit.
    pub fn output(&self, input: ImageGeom, out_channels: usize) -> Option<ImageGeom> {
        let h = input.height + 2 * self.padding;
        let w = input.width + 2 * self.padding;
        if h < self.kernel || w < self.kernel || self.stride == 0 {
            return None;
        }
        Some(ImageGeom {
            channels: out_channels,
            height: (h - self.kernel) / self.stride + 1,
            width: (w - self.kernel) / self.stride + 1,
        })
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        a: Var,
        row: Var,
    },
    MulRow {
        a: Var,
        row: Var,
    },
    Scale(Var, T),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        a: Var,
        rstd: Vec<T>,
    },
    Unfold {
        a: Var,
        kernel: usize,
    },
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    SliceCols {
        a: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        input: ImageGeom,
        output: ImageGeom,
        spec: Conv2dSpec,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        plane: usize,
        xhat: Mat<T>,
        scale: Vec<T>,
        train: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAbs {
        a: Var,
        target: Mat<T>,
    },
    MeanSq {
        a: Var,
        target: Mat<T>,
    },
}

struct Node<T> {
    value: Option<Mat<T>>,
    param: Option<ParamId>,
    op: Op<T>,
    needs_grad: bool,
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// One forward pass worth of computation. Parameters are borrowed from a
/// [`ParamStore`] and never copied.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node<T>>,
}

/// Gradients of every node reached by a backward pass.
pub struct Grads<T> {
    nodes: Vec<Option<Mat<T>>>,
    param_vars: Vec<Option<Var>>,
}

impl<T: Scalar> Grads<T> {
    pub fn of(&self, v: Var) -> Option<&Mat<T>> {
        self.nodes[v.0].as_ref()
    }

    /// Gradient of a parameter, `None` if it did not take part in the pass.
    pub fn param(&self, id: ParamId) -> Option<&Mat<T>> {
        self.param_vars.get(id.0).copied().flatten().and_then(|v| self.of(v))
    }

    /// Moves parameter gradients into a store shaped like `params`,
    /// substituting zeros for unused parameters.
    pub fn into_param_grads(mut self, params: &ParamStore<T>) -> ParamStore<T> {
        let mut out = params.zeros_like();
        for id in params.ids() {
            if let Some(v) = self.param_vars.get(id.0).copied().flatten() {
                if let Some(g) = self.nodes[v.0].take() {
                    *out.get_mut(id) = g;
                }
            }
        }
        out
    }
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            param_vars: vec![None; params.len()],
            nodes: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        let node = &self.nodes[v.0];
        match (&node.value, node.param) {
            (Some(m), _) => m,
            (None, Some(id)) => self.params.get(id),
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf bound to a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// Leaf that does not receive gradients.
    pub fn constant(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives gradients (for input-gradient checks).
    pub fn input(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = self.value(a).matmul_t(ta, self.value(b), tb);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(&p, &q)| p - q).collect();
        let out = Mat::from_vec(x.rows(), x.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub(a, b), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x.as_slice().iter().zip(y.as_slice()).map(|(&p, &q)| p * q).collect();
        let out = Mat::from_vec(x.rows(), x.cols(), data);
        let ng = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul(a, b), ng)
    }

    /// Adds a `1 × cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols()), r.shape(), "row broadcast shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o += b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::AddRow { a, row }, ng)
    }

    /// Multiplies every row of `a` by a `1 × cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert_eq!((1, x.cols()), r.shape(), "row broadcast shape mismatch");
        let mut out = x.clone();
        for i in 0..out.rows() {
            for (o, &b) in out.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o *= b;
            }
        }
        let ng = self.needs(a) || self.needs(row);
        self.push(out, Op::MulRow { a, row }, ng)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        let ng = self.needs(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v.max(T::zero()));
        let ng = self.needs(a);
        self.push(out, Op::Relu(a), ng)
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::Softmax(a), ng)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let x = self.value(a);
        let cols = T::of(x.cols() as f64);
        let mut out = x.clone();
        let mut rstd = Vec::with_capacity(x.rows());
        for i in 0..out.rows() {
            let row = out.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / cols;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cols;
            let r = T::one() / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * r;
            }
            rstd.push(r);
        }
        let ng = self.needs(a);
        self.push(out, Op::LayerNorm { a, rstd }, ng)
    }

    /// Time unfolding for 1-D "same" convolution: row `t` of the result holds
    /// rows `t - (k-1)/2 ..= t + (k-1)/2` of `a` side by side, zero padded.
    pub fn unfold(&mut self, a: Var, kernel: usize) -> Var {
        assert!(kernel % 2 == 1, "unfold kernel must be odd");
        let x = self.value(a);
        let (t, d) = x.shape();
        let half = kernel / 2;
        let mut out = Mat::zeros(t, kernel * d);
        for r in 0..t {
            for j in 0..kernel {
                let src = r as isize + j as isize - half as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                out.row_mut(r)[j * d..(j + 1) * d].copy_from_slice(x.row(src as usize));
            }
        }
        let ng = self.needs(a);
        self.push(out, Op::Unfold { a, kernel }, ng)
    }

    /// Row gather: output row `i` is row `index[i]` of `a`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>) -> Var {
        let x = self.value(a);
        let mut out = Mat::zeros(index.len(), x.cols());
        for (i, &src) in index.iter().enumerate() {
            out.row_mut(i).copy_from_slice(x.row(src));
        }
        let ng = self.needs(a);
        self.push(out, Op::Gather { a, index }, ng)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).cols_range(start, len);
        let ng = self.needs(a);
        self.push(out, Op::SliceCols { a, start }, ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols()].copy_from_slice(m.row(r));
            }
            off += m.cols();
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// 2-D convolution of a batch (`N × C·H·W`) with weights
    /// `C_out × C_in·k·k` and bias `1 × C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, input: ImageGeom, spec: Conv2dSpec) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        assert_eq!(xv.cols(), input.numel(), "conv2d input geometry mismatch");
        let k = spec.kernel;
        assert_eq!(wv.cols(), input.channels * k * k, "conv2d kernel shape mismatch");
        let cout = wv.rows();
        let output = spec
            .output(input, cout)
            .expect("conv2d kernel larger than padded input");
        let bv = self.value(b);
        assert_eq!(bv.shape(), (1, cout));
        let mut out = Mat::zeros(xv.rows(), output.numel());
        for n in 0..xv.rows() {
            let src = xv.row(n);
            let dst = out.row_mut(n);
            for co in 0..cout {
                let wrow = wv.row(co);
                let bias = bv.as_slice()[co];
                for oy in 0..output.height {
                    for ox in 0..output.width {
                        let mut acc = bias;
                        for ci in 0..input.channels {
                            let plane = &src[ci * input.plane()..(ci + 1) * input.plane()];
                            for ky in 0..k {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                if iy < 0 || iy >= input.height as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                    if ix < 0 || ix >= input.width as isize {
                                        continue;
                                    }
                                    acc +=
                                        wrow[(ci * k + ky) * k + kx] * plane[iy as usize * input.width + ix as usize];
                                }
                            }
                        }
                        dst[co * output.plane() + oy * output.width + ox] = acc;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(
            out,
            Op::Conv2d {
                x,
                w,
                b,
                input,
                output,
                spec,
            },
            ng,
        )
    }

    /// Training-mode batch normalization over the batch and spatial axes,
    /// per channel. Returns the node and the (biased) batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, geom: ImageGeom, eps: T) -> (Var, BatchStats<T>) {
        let xv = self.value(x);
        let plane = geom.plane();
        let count = T::of((xv.rows() * plane) as f64);
        let mut mean = vec![T::zero(); geom.channels];
        let mut var = vec![T::zero(); geom.channels];
        for n in 0..xv.rows() {
            let row = xv.row(n);
            for c in 0..geom.channels {
                mean[c] += row[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
            }
        }
        for m in &mut mean {
            *m /= count;
        }
        for n in 0..xv.rows() {
            let row = xv.row(n);
            for c in 0..geom.channels {
                var[c] += row[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&v| (v - mean[c]) * (v - mean[c]))
                    .sum::<T>();
            }
        }
        for v in &mut var {
            *v /= count;
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let v = self.batch_norm_apply(x, gamma, beta, plane, &mean, &rstd, true);
        (v, BatchStats { mean, var })
    }

    /// Inference-mode batch normalization with fixed statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        geom: ImageGeom,
        running_mean: &[T],
        running_var: &[T],
        eps: T,
    ) -> Var {
        let rstd: Vec<T> = running_var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        self.batch_norm_apply(x, gamma, beta, geom.plane(), running_mean, &rstd, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn batch_norm_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        plane: usize,
        mean: &[T],
        rstd: &[T],
        train: bool,
    ) -> Var {
        let xv = self.value(x);
        let g = self.value(gamma).as_slice();
        let bt = self.value(beta).as_slice();
        let channels = mean.len();
        assert_eq!(xv.cols(), channels * plane, "batch-norm geometry mismatch");
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        for n in 0..xv.rows() {
            let hrow = xhat.row_mut(n);
            for c in 0..channels {
                for v in &mut hrow[c * plane..(c + 1) * plane] {
                    *v = (*v - mean[c]) * rstd[c];
                }
            }
            let orow = out.row_mut(n);
            for c in 0..channels {
                for (o, &h) in orow[c * plane..(c + 1) * plane]
                    .iter_mut()
                    .zip(&hrow[c * plane..(c + 1) * plane])
                {
                    *o = g[c] * h + bt[c];
                }
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                plane,
                xhat,
                scale: rstd.to_vec(),
                train,
            },
            ng,
        )
    }

    /// 2×2 max pooling with stride 2 (odd trailing rows/columns dropped).
    pub fn max_pool2(&mut self, x: Var, geom: ImageGeom) -> (Var, ImageGeom) {
        let xv = self.value(x);
        assert_eq!(xv.cols(), geom.numel(), "max-pool geometry mismatch");
        let out_geom = ImageGeom {
            channels: geom.channels,
            height: geom.height / 2,
            width: geom.width / 2,
        };
        let mut out = Mat::zeros(xv.rows(), out_geom.numel());
        let mut argmax = Vec::with_capacity(xv.rows() * out_geom.numel());
        for n in 0..xv.rows() {
            let src = xv.row(n);
            for c in 0..geom.channels {
                for oy in 0..out_geom.height {
                    for ox in 0..out_geom.width {
                        let mut best = usize::MAX;
                        let mut best_v = T::neg_infinity();
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = c * geom.plane() + (2 * oy + dy) * geom.width + (2 * ox + dx);
                                if src[idx] > best_v || best == usize::MAX {
                                    best_v = src[idx];
                                    best = idx;
                                }
                            }
                        }
                        out[(n, c * out_geom.plane() + oy * out_geom.width + ox)] = best_v;
                        argmax.push(best);
                    }
                }
            }
        }
        let ng = self.needs(x);
        (self.push(out, Op::MaxPool { x, argmax }, ng), out_geom)
    }

    /// Mean absolute error against a constant target; `1 × 1` result.
    pub fn mean_abs(&mut self, a: Var, target: Mat<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape(), "L1 target shape mismatch");
        let n = T::of(x.len().max(1) as f64);
        let s: T = x
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(&p, &q)| (p - q).abs())
            .sum();
        let ng = self.needs(a);
        self.push(Mat::filled(1, 1, s / n), Op::MeanAbs { a, target }, ng)
    }

    /// Mean squared error against a constant target; `1 × 1` result.
    pub fn mean_sq(&mut self, a: Var, target: Mat<T>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape(), "MSE target shape mismatch");
        let n = T::of(x.len().max(1) as f64);
        let s: T = x
            .as_slice()
            .iter()
            .zip(target.as_slice())
            .map(|(&p, &q)| (p - q) * (p - q))
            .sum();
        let ng = self.needs(a);
        self.push(Mat::filled(1, 1, s / n), Op::MeanSq { a, target }, ng)
    }

    /// Backward pass from a `1 × 1` output.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        self.backward_with(loss, Mat::filled(1, 1, T::one()))
    }

    /// Backward pass seeded with an arbitrary upstream gradient.
    pub fn backward_with(&self, output: Var, upstream: Mat<T>) -> Grads<T> {
        assert_eq!(self.value(output).shape(), upstream.shape());
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(upstream);
        for i in (0..=output.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads {
            nodes: grads,
            param_vars: self.param_vars.clone(),
        }
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, f: impl FnOnce(&mut Mat<T>)) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            let (r, c) = self.value(v).shape();
            *slot = Some(Mat::zeros(r, c));
        }
        f(slot.as_mut().expect("slot initialized"));
    }

    fn backprop_node(&self, i: usize, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        let out = self.nodes[i].value.as_ref();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    if *ta {
                        gemm_into(bv, *tb, g, true, ga, T::one());
                    } else {
                        gemm_into(g, false, bv, !*tb, ga, T::one());
                    }
                });
                self.acc(grads, *b, |gb| {
                    if *tb {
                        gemm_into(g, true, av, *ta, gb, T::one());
                    } else {
                        gemm_into(av, !*ta, g, false, gb, T::one());
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *b, |gb| {
                    for (o, &d) in gb.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o -= d;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.acc(grads, *a, |ga| {
                    for ((o, &d), &y) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(bv.as_slice()) {
                        *o += d * y;
                    }
                });
                self.acc(grads, *b, |gb| {
                    for ((o, &d), &x) in gb.as_mut_slice().iter_mut().zip(g.as_slice()).zip(av.as_slice()) {
                        *o += d * x;
                    }
                });
            }
            Op::AddRow { a, row } => {
                self.acc(grads, *a, |ga| ga.add_assign(g));
                self.acc(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for (o, &d) in gr.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *o += d;
                        }
                    }
                });
            }
            Op::MulRow { a, row } => {
                let (av, rv) = (self.value(*a), self.value(*row));
                self.acc(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for ((o, &d), &s) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(rv.as_slice()) {
                            *o += d * s;
                        }
                    }
                });
                self.acc(grads, *row, |gr| {
                    for r in 0..g.rows() {
                        for ((o, &d), &x) in gr.as_mut_slice().iter_mut().zip(g.row(r)).zip(av.row(r)) {
                            *o += d * x;
                        }
                    }
                });
            }
            Op::Scale(a, s) => {
                self.acc(grads, *a, |ga| {
                    for (o, &d) in ga.as_mut_slice().iter_mut().zip(g.as_slice()) {
                        *o += d * *s;
                    }
                });
            }
            Op::Relu(a) => {
                let y = out.expect("relu output");
                self.acc(grads, *a, |ga| {
                    for ((o, &d), &v) in ga.as_mut_slice().iter_mut().zip(g.as_slice()).zip(y.as_slice()) {
                        if v > T::zero() {
                            *o += d;
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let y = out.expect("softmax output");
                self.acc(grads, *a, |ga| {
                    for r in 0..y.rows() {
                        let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&d, &p)| d * p).sum();
                        for ((o, &d), &p) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o += p * (d - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { a, rstd } => {
                let y = out.expect("layer-norm output");
                let cols = T::of(y.cols() as f64);
                self.acc(grads, *a, |ga| {
                    for (r, &s) in rstd.iter().enumerate() {
                        let gr = g.row(r);
                        let yr = y.row(r);
                        let mean_g = gr.iter().copied().sum::<T>() / cols;
                        let mean_gy = gr.iter().zip(yr).map(|(&d, &v)| d * v).sum::<T>() / cols;
                        for ((o, &d), &v) in ga.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o += s * (d - mean_g - v * mean_gy);
                        }
                    }
                });
            }
            Op::Unfold { a, kernel } => {
                let half = kernel / 2;
                self.acc(grads, *a, |ga| {
                    let (t, d) = ga.shape();
                    for r in 0..t {
                        for j in 0..*kernel {
                            let src = r as isize + j as isize - half as isize;
                            if src < 0 || src >= t as isize {
                                continue;
                            }
                            let gsrc = &g.row(r)[j * d..(j + 1) * d];
                            for (o, &v) in ga.row_mut(src as usize).iter_mut().zip(gsrc) {
                                *o += v;
                            }
                        }
                    }
                });
            }
            Op::Gather { a, index } => {
                self.acc(grads, *a, |ga| {
                    for (i, &src) in index.iter().enumerate() {
                        for (o, &v) in ga.row_mut(src).iter_mut().zip(g.row(i)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::SliceCols { a, start } => {
                let len = g.cols();
                self.acc(grads, *a, |ga| {
                    for r in 0..g.rows() {
                        for (o, &v) in ga.row_mut(r)[*start..*start + len].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    self.acc(grads, p, |gp| {
                        for r in 0..g.rows() {
                            for (o, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                                *o += v;
                            }
                        }
                    });
                    off += w;
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                input,
                output,
                spec,
            } => self.backprop_conv2d(g, grads, *x, *w, *b, *input, *output, *spec),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                plane,
                xhat,
                scale,
                train,
            } => {
                let channels = scale.len();
                let gv = self.value(*gamma).as_slice();
                let mut sum_g = vec![T::zero(); channels];
                let mut sum_gx = vec![T::zero(); channels];
                for n in 0..g.rows() {
                    for c in 0..channels {
                        let range = c * plane..(c + 1) * plane;
                        for (&d, &h) in g.row(n)[range.clone()].iter().zip(&xhat.row(n)[range]) {
                            sum_g[c] += d;
                            sum_gx[c] += d * h;
                        }
                    }
                }
                self.acc(grads, *gamma, |gg| {
                    for (o, &s) in gg.as_mut_slice().iter_mut().zip(&sum_gx) {
                        *o += s;
                    }
                });
                self.acc(grads, *beta, |gb| {
                    for (o, &s) in gb.as_mut_slice().iter_mut().zip(&sum_g) {
                        *o += s;
                    }
                });
                let count = T::of((g.rows() * plane) as f64);
                self.acc(grads, *x, |gx| {
                    for n in 0..g.rows() {
                        for c in 0..channels {
                            let k = gv[c] * scale[c];
                            let range = c * plane..(c + 1) * plane;
                            let hrow = &xhat.row(n)[range.clone()];
                            let grow = &g.row(n)[range.clone()];
                            for ((o, &d), &h) in gx.row_mut(n)[range].iter_mut().zip(grow).zip(hrow) {
                                if *train {
                                    *o += k * (d - sum_g[c] / count - h * sum_gx[c] / count);
                                } else {
                                    *o += k * d;
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxPool { x, argmax } => {
                let per_row = g.cols();
                self.acc(grads, *x, |gx| {
                    for n in 0..g.rows() {
                        for j in 0..per_row {
                            let src = argmax[n * per_row + j];
                            gx.row_mut(n)[src] += g.row(n)[j];
                        }
                    }
                });
            }
            Op::MeanAbs { a, target } => {
                let av = self.value(*a);
                let s = g.as_slice()[0] / T::of(av.len().max(1) as f64);
                self.acc(grads, *a, |ga| {
                    for ((o, &p), &q) in ga.as_mut_slice().iter_mut().zip(av.as_slice()).zip(target.as_slice()) {
                        let d = p - q;
                        if d > T::zero() {
                            *o += s;
                        } else if d < T::zero() {
                            *o -= s;
                        }
                    }
                });
            }
            Op::MeanSq { a, target } => {
                let av = self.value(*a);
                let s = g.as_slice()[0] * T::of(2.0) / T::of(av.len().max(1) as f64);
                self.acc(grads, *a, |ga| {
                    for ((o, &p), &q) in ga.as_mut_slice().iter_mut().zip(av.as_slice()).zip(target.as_slice()) {
                        *o += s * (p - q);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_conv2d(
        &self,
        g: &Mat<T>,
        grads: &mut [Option<Mat<T>>],
        x: Var,
        w: Var,
        b: Var,
        input: ImageGeom,
        output: ImageGeom,
        spec: Conv2dSpec,
    ) {
        let xv = self.value(x);
        let wv = self.value(w);
        let k = spec.kernel;
        let cout = output.channels;
        self.acc(grads, b, |gb| {
            for n in 0..g.rows() {
                for co in 0..cout {
                    gb.as_mut_slice()[co] += g.row(n)[co * output.plane()..(co + 1) * output.plane()]
                        .iter()
                        .copied()
                        .sum::<T>();
                }
            }
        });
        let need_w = self.needs(w);
        let need_x = self.needs(x);
        if !need_w && !need_x {
            return;
        }
        let mut gw = Mat::zeros(wv.rows(), wv.cols());
        let mut gx = Mat::zeros(xv.rows(), xv.cols());
        for n in 0..g.rows() {
            let src = xv.row(n);
            let grow = g.row(n);
            for co in 0..cout {
                let wrow = wv.row(co);
                for oy in 0..output.height {
                    for ox in 0..output.width {
                        let d = grow[co * output.plane() + oy * output.width + ox];
                        if d == T::zero() {
                            continue;
                        }
                        for ci in 0..input.channels {
                            for ky in 0..k {
                                let iy = (oy * spec.stride + ky) as isize - spec.padding as isize;
                                if iy < 0 || iy >= input.height as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (ox * spec.stride + kx) as isize - spec.padding as isize;
                                    if ix < 0 || ix >= input.width as isize {
                                        continue;
                                    }
                                    let xi = ci * input.plane() + iy as usize * input.width + ix as usize;
                                    let wi = (ci * k + ky) * k + kx;
                                    gw[(co, wi)] += d * src[xi];
                                    gx[(n, xi)] += d * wrow[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        self.acc(grads, w, |o| o.add_assign(&gw));
        self.acc(grads, x, |o| o.add_assign(&gx));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat<f64> {
        Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for a graph builder.
    fn check_input_grad(x0: Mat<f64>, build: impl Fn(&mut Graph<'_, f64>, Var) -> Var) {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(x0.clone());
        let out = build(&mut g, x);
        let grads = g.backward(out);
        let analytic = grads.of(x).cloned().unwrap_or_else(|| Mat::zeros(x0.rows(), x0.cols()));
        let eval = |m: Mat<f64>| {
            let mut g = Graph::new(&store);
            let x = g.input(m);
            let out = build(&mut g, x);
            g.value(out)[(0, 0)]
        };
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut p = x0.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x0.clone();
            m.as_mut_slice()[i] -= h;
            let fd = (eval(p) - eval(m)) / (2.0 * h);
            let an = analytic.as_slice()[i];
            assert!(
                (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                "coordinate {i}: finite difference {fd} vs analytic {an}"
            );
        }
    }

    fn weighted_sum(g: &mut Graph<'_, f64>, v: Var, seed: u64) -> Var {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (r, c) = g.value(v).shape();
        let w = rand_mat(&mut rng, r, c);
        let wv = g.constant(w);
        let p = g.mul(v, wv);
        let zeros = Mat::zeros(r, c);
        // mean of squares of a weighted copy keeps the loss smooth
        g.mean_sq(p, zeros)
    }

    #[test]
    fn softmax_layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        check_input_grad(rand_mat(&mut rng, 3, 5), |g, x| {
            let s = g.softmax(x);
            let l = g.layer_norm(s, 1e-5);
            weighted_sum(g, l, 2)
        });
    }

    #[test]
    fn matmul_transposed_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = rand_mat(&mut rng, 4, 6);
        check_input_grad(rand_mat(&mut rng, 4, 3), move |g, x| {
            let bv = g.constant(b.clone());
            let y = g.matmul_t(x, true, bv, false);
            let z = g.matmul_t(x, false, y, false);
            weighted_sum(g, z, 4)
        });
    }

    #[test]
    fn unfold_gather_concat_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        check_input_grad(rand_mat(&mut rng, 4, 3), |g, x| {
            let u = g.unfold(x, 3);
            let a = g.slice_cols(u, 2, 4);
            let r = g.gather(a, vec![0, 0, 3, 1, 1, 1]);
            let c = g.concat_cols(&[r, r]);
            let t = g.relu(c);
            weighted_sum(g, t, 6)
        });
    }

    #[test]
    fn conv_batch_norm_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let geom = ImageGeom {
            channels: 1,
            height: 4,
            width: 6,
        };
        let spec = Conv2dSpec {
            kernel: 3,
            padding: 1,
            stride: 1,
        };
        let w = rand_mat(&mut rng, 2, 9);
        check_input_grad(rand_mat(&mut rng, 3, geom.numel()), move |g, x| {
            let wv = g.constant(w.clone());
            let b = g.constant(Mat::from_vec(1, 2, vec![0.1, -0.2]));
            let y = g.conv2d(x, wv, b, geom, spec);
            let geom2 = ImageGeom { channels: 2, ..geom };
            let gamma = g.constant(Mat::from_vec(1, 2, vec![1.5, 0.5]));
            let beta = g.constant(Mat::from_vec(1, 2, vec![0.0, 0.3]));
            let (n, _) = g.batch_norm_train(y, gamma, beta, geom2, 1e-5);
            let (p, _) = g.max_pool2(n, geom2);
            weighted_sum(g, p, 8)
        });
    }

    #[test]
    fn losses_have_expected_values() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Mat::filled(2, 3, 1.0));
        let l1 = g.mean_abs(x, Mat::zeros(2, 3));
        let l2 = g.mean_sq(x, Mat::filled(2, 3, 3.0));
        assert_eq!(g.value(l1)[(0, 0)], 1.0);
        assert_eq!(g.value(l2)[(0, 0)], 4.0);
    }
}
