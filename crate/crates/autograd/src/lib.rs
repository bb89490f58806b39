//! Reverse-mode automatic differentiation on a flat tape.
//!
//! A [`Tape`] records every operation applied to its tensors; calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and
//! accumulates gradients for every node that requires them. The op set is
//! deliberately small: exactly what an encoder/decoder restoration network
//! with windowed attention and an SSIM objective needs, nothing more.
//!
//! Everything is generic over [`Element`] so the same network code runs in
//! `f32` for training and in `f64` for finite-difference gradient checks.

use ndarray::{Array1, Array2, Array3, ArrayD, Axis, IxDyn};
use rayon::prelude::*;

pub mod check;
mod conv;
pub mod windows;

/// Scalar types the tape can differentiate through.
pub trait Element:
    ndarray::LinalgScalar
    + ndarray::ScalarOperand
    + num_traits::Float
    + num_traits::NumAssignOps
    + std::fmt::Debug
    + std::fmt::Display
    + std::iter::Sum
    + Send
    + Sync
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c[m,n] += a[m,k] * b[k,n]` over contiguous row-major slices, with
    /// optional logical transposes of a and b.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_element {
    ($t:ty, $gemm:path, $conv:expr) => {
        impl Element for $t {
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            fn to_f64(self) -> f64 {
                self as f64
            }
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                trans_a: bool,
                b: &[Self],
                trans_b: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                debug_assert_eq!(a.len(), m * k);
                debug_assert_eq!(b.len(), k * n);
                debug_assert_eq!(c.len(), m * n);
                let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
                let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_element!(f32, matrixmultiply::sgemm, f32);
impl_element!(f64, matrixmultiply::dgemm, f64);

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node<T: Element> {
    value: ArrayD<T>,
    op: Op<T>,
    needs_grad: bool,
}

enum Op<T: Element> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    AddScalar(Var, T),
    MulScalar(Var, T),
    /// c - x
    ScalarSub(T, Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        pad: usize,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Array1<T>,
        var: Array1<T>,
        eps: T,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Array1<T>,
        var: Array1<T>,
        eps: T,
    },
    /// Layer norm over the last axis; `mean`/`rstd` cached per row.
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: ArrayD<T>,
        rstd: ArrayD<T>,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<u32>,
    },
    UpsampleBilinear2x(Var),
    ConcatCh(Var, Var),
    /// Global average pool [N,C,H,W] -> [N,C].
    Gap(Var),
    /// x[N,C,H,W] * s[N,C] with s broadcast over the spatial dims.
    MulChannel {
        x: Var,
        s: Var,
    },
    /// Batched matmul [B,M,K] x [B,K,N]; with `trans_b`, b is [B,N,K].
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    /// x[..., c_in] @ w[c_in, c_out] (+ b[c_out]).
    LinearLast {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    SoftmaxLast(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    /// Zero-pad bottom/right of the two trailing spatial dims.
    PadHw(Var),
    /// Keep the top-left h x w corner of the spatial dims.
    CropHw {
        x: Var,
        h: usize,
        w: usize,
    },
    /// Cyclic shift of the spatial dims.
    Roll {
        x: Var,
        sh: isize,
        sw: isize,
    },
    /// [N,C,H,W] -> [N*nw, win*win, C]; spatial dims must divide by win.
    WindowPartition {
        x: Var,
        win: usize,
    },
    /// Inverse of `WindowPartition` back to [N,C,H,W].
    WindowReverse {
        x: Var,
        win: usize,
    },
    /// scores[B*heads, T, T] + table[idx[i*T+j], head] with head = batch % heads.
    RelPosBias {
        x: Var,
        table: Var,
        idx: Vec<usize>,
        heads: usize,
    },
    /// scores[B*heads, T, T] + mask[(batch/heads) % nw, T, T] (constant mask).
    AddMask(Var),
    /// Depthwise separable valid convolution with a fixed symmetric 1-D kernel.
    BlurValid {
        x: Var,
        kernel: Vec<T>,
    },
    MeanAll(Var),
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Grads<T: Element> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Element> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&ArrayD<T>> {
        self.grads[v.0].as_ref()
    }
}

/// Operation tape. Nodes only reference earlier nodes, so reverse index
/// order is a valid topological order for backpropagation.
pub struct Tape<T: Element> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register an input tensor. Gradients are only tracked through nodes
    /// created with `needs_grad = true` (or derived from one).
    pub fn leaf(&mut self, value: ArrayD<T>, needs_grad: bool) -> Var {
        self.push(value, Op::Leaf, needs_grad)
    }

    pub fn value(&self, v: Var) -> &ArrayD<T> {
        &self.nodes[v.0].value
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().expect("scalar node")
    }

    fn push(&mut self, value: ArrayD<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: ArrayD<T>, op: Op<T>) -> Var {
        let needs = op_parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.push(value, op, needs)
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "add shapes");
        let v = self.value(a) + self.value(b);
        self.push_op(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "sub shapes");
        let v = self.value(a) - self.value(b);
        self.push_op(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "mul shapes");
        let v = self.value(a) * self.value(b);
        self.push_op(v, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).shape(), self.value(b).shape(), "div shapes");
        let v = self.value(a) / self.value(b);
        self.push_op(v, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| -x);
        self.push_op(v, Op::Neg(a))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x + c);
        self.push_op(v, Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).mapv(|x| x * c);
        self.push_op(v, Op::MulScalar(a, c))
    }

    /// c - x, elementwise.
    pub fn scalar_sub(&mut self, c: T, a: Var) -> Var {
        let v = self.value(a).mapv(|x| c - x);
        self.push_op(v, Op::ScalarSub(c, a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let z = T::zero();
        let v = self.value(a).mapv(|x| if x > z { x } else { z });
        self.push_op(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Var {
        let z = T::zero();
        let v = self.value(a).mapv(|x| if x > z { x } else { x * slope });
        self.push_op(v, Op::LeakyRelu(a, slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let v = self.value(a).mapv(|x| one / (one + (-x).exp()));
        self.push_op(v, Op::Sigmoid(a))
    }

    // ---- structured ops --------------------------------------------------

    /// 2-D convolution, stride 1. x: [N,Cin,H,W], w: [Cout,Cin,kh,kw].
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, pad: usize) -> Var {
        let v = conv::conv2d_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), pad);
        self.push_op(v, Op::Conv2d { x, w, b, pad })
    }

    /// Batch norm over (N,H,W) per channel with batch statistics.
    /// Returns the output plus the biased batch mean/var for running-stat updates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> (Var, Array1<T>, Array1<T>) {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv);
        let m = T::from_f64((n * h * w) as f64);
        let mut mean = Array1::zeros(c);
        let mut var = Array1::zeros(c);
        let xs = xv.as_slice().expect("standard layout");
        for ci in 0..c {
            let mut acc = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for &v in &xs[base..base + h * w] {
                    acc += v;
                }
            }
            let mu = acc / m;
            let mut vacc = T::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * h * w;
                for &v in &xs[base..base + h * w] {
                    let d = v - mu;
                    vacc += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = vacc / m;
        }
        let out = bn_apply(xv, &mean, &var, self.value(gamma), self.value(beta), eps);
        let v = self.push_op(
            out,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean: mean.clone(),
                var: var.clone(),
                eps,
            },
        );
        (v, mean, var)
    }

    /// Batch norm with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Array1<T>,
        var: Array1<T>,
        eps: T,
    ) -> Var {
        let out = bn_apply(
            self.value(x),
            &mean,
            &var,
            self.value(gamma),
            self.value(beta),
            eps,
        );
        self.push_op(
            out,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            },
        )
    }

    /// Layer norm over the last axis. gamma/beta: [C] where C is the last dim.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let c = *shape.last().expect("layer_norm needs >= 1 axis");
        let rows: usize = xv.len() / c;
        let mc = T::from_f64(c as f64);
        let g = self.value(gamma).as_slice().unwrap().to_vec();
        let bt = self.value(beta).as_slice().unwrap().to_vec();
        let xs = xv.as_slice().expect("standard layout");
        let mut out = vec![T::zero(); xs.len()];
        let mut means = vec![T::zero(); rows];
        let mut rstds = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xs[r * c..(r + 1) * c];
            let mu = row.iter().copied().sum::<T>() / mc;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / mc;
            let rstd = T::one() / (var + eps).sqrt();
            means[r] = mu;
            rstds[r] = rstd;
            for i in 0..c {
                out[r * c + i] = (row[i] - mu) * rstd * g[i] + bt[i];
            }
        }
        let row_shape: Vec<usize> = shape[..shape.len() - 1].to_vec();
        let mean = ArrayD::from_shape_vec(IxDyn(&row_shape), means).unwrap();
        let rstd = ArrayD::from_shape_vec(IxDyn(&row_shape), rstds).unwrap();
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.push_op(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
        )
    }

    /// 2x2 max pooling with stride 2; spatial dims must be even.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv);
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even dims");
        let (ho, wo) = (h / 2, w / 2);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); n * c * ho * wo];
        let mut argmax = vec![0u32; n * c * ho * wo];
        for nc in 0..n * c {
            let ib = nc * h * w;
            let ob = nc * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = xs[ib + (2 * oy) * w + 2 * ox];
                    let mut bidx = ib + (2 * oy) * w + 2 * ox;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let idx = ib + (2 * oy + dy) * w + (2 * ox + dx);
                            if xs[idx] > best {
                                best = xs[idx];
                                bidx = idx;
                            }
                        }
                    }
                    out[ob + oy * wo + ox] = best;
                    argmax[ob + oy * wo + ox] = bidx as u32;
                }
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap();
        self.push_op(out, Op::MaxPool2 { x, argmax })
    }

    /// Bilinear 2x upsampling (half-pixel centers, edges clamped).
    pub fn upsample_bilinear2x(&mut self, x: Var) -> Var {
        let v = upsample2x_forward(self.value(x));
        self.push_op(v, Op::UpsampleBilinear2x(x))
    }

    /// Concatenate along the channel axis of [N,C,H,W] tensors.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (n, ca, h, w) = dims4(av);
        let (nb, cb, hb, wb) = dims4(bv);
        assert_eq!((n, h, w), (nb, hb, wb), "concat spatial/batch shapes");
        let mut out = vec![T::zero(); n * (ca + cb) * h * w];
        let asl = av.as_slice().unwrap();
        let bsl = bv.as_slice().unwrap();
        let hw = h * w;
        for ni in 0..n {
            out[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw]
                .copy_from_slice(&asl[ni * ca * hw..(ni + 1) * ca * hw]);
            out[ni * (ca + cb) * hw + ca * hw..(ni + 1) * (ca + cb) * hw]
                .copy_from_slice(&bsl[ni * cb * hw..(ni + 1) * cb * hw]);
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, ca + cb, h, w]), out).unwrap();
        self.push_op(out, Op::ConcatCh(a, b))
    }

    /// Global average pooling: [N,C,H,W] -> [N,C].
    pub fn gap(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv);
        let m = T::from_f64((h * w) as f64);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); n * c];
        for nc in 0..n * c {
            let mut acc = T::zero();
            for &v in &xs[nc * h * w..(nc + 1) * h * w] {
                acc += v;
            }
            out[nc] = acc / m;
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c]), out).unwrap();
        self.push_op(out, Op::Gap(x))
    }

    /// x[N,C,H,W] * s[N,C], broadcasting s over the spatial dims.
    pub fn mul_channel(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let sv = self.value(s);
        let (n, c, h, w) = dims4(xv);
        assert_eq!(sv.shape(), &[n, c], "mul_channel scale shape");
        let xs = xv.as_slice().unwrap();
        let ss = sv.as_slice().unwrap();
        let mut out = vec![T::zero(); xs.len()];
        for nc in 0..n * c {
            let sc = ss[nc];
            for i in 0..h * w {
                out[nc * h * w + i] = xs[nc * h * w + i] * sc;
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        self.push_op(out, Op::MulChannel { x, s })
    }

    /// Batched matrix multiply. a: [B,M,K]; b: [B,K,N] (or [B,N,K] if `trans_b`).
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let (ba, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bb, d1, d2) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        assert_eq!(ba, bb, "matmul batch");
        let n = if trans_b {
            assert_eq!(k, d2, "matmul inner dim");
            d1
        } else {
            assert_eq!(k, d1, "matmul inner dim");
            d2
        };
        let asl = av.as_slice().unwrap();
        let bsl = bv.as_slice().unwrap();
        let mut out = vec![T::zero(); ba * m * n];
        let bstride = if trans_b { n * k } else { k * n };
        out.par_chunks_mut(m * n).enumerate().for_each(|(i, ci)| {
            gemm_dispatch(
                m,
                k,
                n,
                &asl[i * m * k..(i + 1) * m * k],
                false,
                &bsl[i * bstride..(i + 1) * bstride],
                trans_b,
                T::zero(),
                ci,
            );
        });
        let out = ArrayD::from_shape_vec(IxDyn(&[ba, m, n]), out).unwrap();
        self.push_op(out, Op::MatMul { a, b, trans_b })
    }

    /// x[..., c_in] @ w[c_in, c_out] + b.
    pub fn linear_last(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xv = self.value(x);
        let wv = as2(self.value(w));
        let (ci, co) = (wv.shape()[0], wv.shape()[1]);
        let shape = xv.shape().to_vec();
        assert_eq!(*shape.last().unwrap(), ci, "linear_last in dim");
        let rows = xv.len() / ci;
        let x2 = as2_view(xv, rows, ci);
        let mut y = x2.dot(&wv);
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), co, "linear_last bias dim");
            let bs = bv.as_slice().unwrap();
            for mut row in y.rows_mut() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v += bs[j];
                }
            }
        }
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = co;
        let out = y.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        self.push_op(out, Op::LinearLast { x, w, b })
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        let c = *shape.last().unwrap();
        let rows = xv.len() / c;
        let xs = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); xs.len()];
        let _ = rows;
        out.par_chunks_mut(c).enumerate().for_each(|(r, orow)| {
            let row = &xs[r * c..(r + 1) * c];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut sum = T::zero();
            for i in 0..c {
                let e = (row[i] - mx).exp();
                orow[i] = e;
                sum += e;
            }
            for v in orow.iter_mut() {
                *v = *v / sum;
            }
        });
        let out = ArrayD::from_shape_vec(IxDyn(&shape), out).unwrap();
        self.push_op(out, Op::SoftmaxLast(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape element count"
        );
        let out = xv
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        self.push_op(out, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Var {
        let xv = self.value(x);
        let out = xv
            .view()
            .permuted_axes(IxDyn(axes))
            .as_standard_layout()
            .to_owned();
        self.push_op(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
        )
    }

    /// Zero-pad bottom/right so the spatial dims grow by (ph, pw).
    pub fn pad_hw(&mut self, x: Var, ph: usize, pw: usize) -> Var {
        let xv = self.value(x);
        let (n, c, h, w) = dims4(xv);
        let (hp, wp) = (h + ph, w + pw);
        let xs = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); n * c * hp * wp];
        for nc in 0..n * c {
            for y in 0..h {
                let src = nc * h * w + y * w;
                let dst = nc * hp * wp + y * wp;
                out[dst..dst + w].copy_from_slice(&xs[src..src + w]);
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, hp, wp]), out).unwrap();
        self.push_op(out, Op::PadHw(x))
    }

    /// Keep the top-left (h, w) corner of the spatial dims.
    pub fn crop_hw(&mut self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (n, c, hp, wp) = dims4(xv);
        assert!(h <= hp && w <= wp, "crop exceeds input");
        let xs = xv.as_slice().unwrap();
        let mut out = vec![T::zero(); n * c * h * w];
        for nc in 0..n * c {
            for y in 0..h {
                let src = nc * hp * wp + y * wp;
                let dst = nc * h * w + y * w;
                out[dst..dst + w].copy_from_slice(&xs[src..src + w]);
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap();
        self.push_op(out, Op::CropHw { x, h, w })
    }

    /// Cyclic shift of the spatial dims by (sh, sw); positive shifts move
    /// content down/right.
    pub fn roll(&mut self, x: Var, sh: isize, sw: isize) -> Var {
        let v = roll_forward(self.value(x), sh, sw);
        self.push_op(v, Op::Roll { x, sh, sw })
    }

    /// Partition [N,C,H,W] into non-overlapping win x win windows:
    /// output [N*nw, win*win, C]. H and W must be divisible by win.
    pub fn window_partition(&mut self, x: Var, win: usize) -> Var {
        let v = windows::partition(self.value(x), win);
        self.push_op(v, Op::WindowPartition { x, win })
    }

    /// Inverse of [`Tape::window_partition`] for the given canvas geometry.
    pub fn window_reverse(&mut self, x: Var, n: usize, c: usize, h: usize, w: usize, win: usize) -> Var {
        let v = windows::reverse(self.value(x), n, c, h, w, win);
        self.push_op(v, Op::WindowReverse { x, win })
    }

    /// Add a learnable relative-position bias to attention scores.
    /// scores: [B*heads, T, T]; table: [L, heads]; idx: row-major [T*T] into L.
    pub fn rel_pos_bias(&mut self, scores: Var, table: Var, idx: Vec<usize>, heads: usize) -> Var {
        let sv = self.value(scores);
        let tv = self.value(table);
        let (bh, t, t2) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
        assert_eq!(t, t2, "square attention scores");
        assert_eq!(idx.len(), t * t, "bias index size");
        assert_eq!(tv.shape()[1], heads, "bias table heads");
        let ss = sv.as_slice().unwrap();
        let ts = tv.as_slice().unwrap();
        // gather the bias matrix once per head, then stream over the batch
        let mut bias = vec![T::zero(); heads * t * t];
        for hd in 0..heads {
            for ij in 0..t * t {
                bias[hd * t * t + ij] = ts[idx[ij] * heads + hd];
            }
        }
        let mut out = vec![T::zero(); ss.len()];
        out.par_chunks_mut(t * t).enumerate().for_each(|(b, orow)| {
            let base = b * t * t;
            let bm = &bias[(b % heads) * t * t..(b % heads + 1) * t * t];
            for ij in 0..t * t {
                orow[ij] = ss[base + ij] + bm[ij];
            }
        });
        let out = ArrayD::from_shape_vec(IxDyn(&[bh, t, t]), out).unwrap();
        self.push_op(
            out,
            Op::RelPosBias {
                x: scores,
                table,
                idx,
                heads,
            },
        )
    }

    /// Add a constant attention mask. scores: [B*heads, T, T] with
    /// B = N*nw; mask: [nw, T, T] selected by window index.
    pub fn add_mask(&mut self, scores: Var, mask: Array3<T>, heads: usize) -> Var {
        let sv = self.value(scores);
        let (bh, t, t2) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
        assert_eq!((t, t2), (mask.shape()[1], mask.shape()[2]), "mask shape");
        let nw = mask.shape()[0];
        let ss = sv.as_slice().unwrap();
        let ms = mask.as_slice().unwrap();
        let mut out = vec![T::zero(); ss.len()];
        for b in 0..bh {
            let wi = (b / heads) % nw;
            let sbase = b * t * t;
            let mbase = wi * t * t;
            for ij in 0..t * t {
                out[sbase + ij] = ss[sbase + ij] + ms[mbase + ij];
            }
        }
        let out = ArrayD::from_shape_vec(IxDyn(&[bh, t, t]), out).unwrap();
        self.push_op(out, Op::AddMask(scores))
    }

    /// Depthwise valid convolution with a fixed separable symmetric kernel
    /// (rows then columns). [N,C,H,W] -> [N,C,H-k+1,W-k+1].
    pub fn blur_valid(&mut self, x: Var, kernel: &[T]) -> Var {
        let v = blur_valid_forward(self.value(x), kernel);
        self.push_op(
            v,
            Op::BlurValid {
                x,
                kernel: kernel.to_vec(),
            },
        )
    }

    /// Mean over all elements; returns a 0-d node.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let m = T::from_f64(xv.len() as f64);
        let s = xv.iter().copied().sum::<T>() / m;
        let out = ArrayD::from_elem(IxDyn(&[]), s);
        self.push_op(out, Op::MeanAll(x))
    }

    // ---- backward --------------------------------------------------------

    /// Backpropagate from a scalar node, returning per-node gradients.
    pub fn backward(&self, loss: Var) -> Grads<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(Var(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    /// Like [`Tape::backward`] but also reports cumulative wall time and
    /// call counts per op kind, for performance diagnosis.
    pub fn backward_profiled(&self, loss: Var) -> (Grads<T>, Vec<(&'static str, f64, usize)>) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<ArrayD<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(ArrayD::from_elem(self.value(loss).raw_dim(), T::one()));
        let mut stats: std::collections::BTreeMap<&'static str, (f64, usize)> = Default::default();
        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            let started = std::time::Instant::now();
            self.accumulate(Var(i), &g, &mut grads);
            let entry = stats.entry(op_name(&self.nodes[i].op)).or_insert((0.0, 0));
            entry.0 += started.elapsed().as_secs_f64();
            entry.1 += 1;
            grads[i] = Some(g);
        }
        let mut out: Vec<(&'static str, f64, usize)> =
            stats.into_iter().map(|(k, (t, n))| (k, t, n)).collect();
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        (Grads { grads }, out)
    }

    fn accumulate(&self, node: Var, g: &ArrayD<T>, grads: &mut Vec<Option<ArrayD<T>>>) {
        let mut add_to = |v: Var, contrib: ArrayD<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => *acc += &contrib,
                slot @ None => *slot = Some(contrib),
            }
        };
        match &self.nodes[node.0].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(*a, g.clone());
                add_to(*b, g.clone());
            }
            Op::Sub(a, b) => {
                add_to(*a, g.clone());
                add_to(*b, g.mapv(|v| -v));
            }
            Op::Mul(a, b) => {
                add_to(*a, g * self.value(*b));
                add_to(*b, g * self.value(*a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                add_to(*a, g / bv);
                let y = self.value(node);
                let db = ndarray::Zip::from(g)
                    .and(y)
                    .and(bv)
                    .map_collect(|&gi, &yi, &bi| -gi * yi / bi);
                add_to(*b, db);
            }
            Op::Neg(a) => add_to(*a, g.mapv(|v| -v)),
            Op::AddScalar(a, _) => add_to(*a, g.clone()),
            Op::MulScalar(a, c) => add_to(*a, g.mapv(|v| v * *c)),
            Op::ScalarSub(_, a) => add_to(*a, g.mapv(|v| -v)),
            Op::Relu(a) => {
                let z = T::zero();
                let da = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&gi, &xi| if xi > z { gi } else { z });
                add_to(*a, da);
            }
            Op::LeakyRelu(a, s) => {
                let z = T::zero();
                let da = ndarray::Zip::from(g)
                    .and(self.value(*a))
                    .map_collect(|&gi, &xi| if xi > z { gi } else { gi * *s });
                add_to(*a, da);
            }
            Op::Sigmoid(a) => {
                let one = T::one();
                let da = ndarray::Zip::from(g)
                    .and(self.value(node))
                    .map_collect(|&gi, &yi| gi * yi * (one - yi));
                add_to(*a, da);
            }
            Op::Conv2d { x, w, b, pad } => {
                let (dx, dw, db) = conv::conv2d_backward(self.value(*x), self.value(*w), g, *pad);
                add_to(*x, dx);
                add_to(*w, dw);
                if let Some(b) = b {
                    add_to(*b, db.into_dyn());
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let (dx, dg, db) =
                    bn_train_backward(self.value(*x), g, mean, var, self.value(*gamma), *eps);
                add_to(*x, dx);
                add_to(*gamma, dg.into_dyn());
                add_to(*beta, db.into_dyn());
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                var,
                eps,
            } => {
                let xv = self.value(*x);
                let (n, c, h, w) = dims4(xv);
                let gs = self.value(*gamma).as_slice().unwrap().to_vec();
                let xs = xv.as_slice().unwrap();
                let gg = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); xs.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ni in 0..n {
                    for ci in 0..c {
                        let rstd = T::one() / (var[ci] + *eps).sqrt();
                        let base = (ni * c + ci) * h * w;
                        for i in base..base + h * w {
                            dx[i] = gg[i] * gs[ci] * rstd;
                            dgamma[ci] += gg[i] * (xs[i] - mean[ci]) * rstd;
                            dbeta[ci] += gg[i];
                        }
                    }
                }
                add_to(*x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap());
                add_to(*gamma, Array1::from_vec(dgamma).into_dyn());
                add_to(*beta, Array1::from_vec(dbeta).into_dyn());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let shape = xv.shape();
                let c = *shape.last().unwrap();
                let rows = xv.len() / c;
                let xs = xv.as_slice().unwrap();
                let gg = g.as_slice().unwrap();
                let gs = self.value(*gamma).as_slice().unwrap();
                let mus = mean.as_slice().unwrap();
                let rs = rstd.as_slice().unwrap();
                let mc = T::from_f64(c as f64);
                let mut dx = vec![T::zero(); xs.len()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    let (mu, rstd) = (mus[r], rs[r]);
                    let mut sum_dxhat = T::zero();
                    let mut sum_dxhat_xhat = T::zero();
                    for i in 0..c {
                        let xhat = (xs[r * c + i] - mu) * rstd;
                        let dxhat = gg[r * c + i] * gs[i];
                        dgamma[i] += gg[r * c + i] * xhat;
                        dbeta[i] += gg[r * c + i];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    for i in 0..c {
                        let xhat = (xs[r * c + i] - mu) * rstd;
                        let dxhat = gg[r * c + i] * gs[i];
                        dx[r * c + i] =
                            rstd * (dxhat - sum_dxhat / mc - xhat * sum_dxhat_xhat / mc);
                    }
                }
                add_to(*x, ArrayD::from_shape_vec(xv.raw_dim(), dx).unwrap());
                add_to(*gamma, Array1::from_vec(dgamma).into_dyn());
                add_to(*beta, Array1::from_vec(dbeta).into_dyn());
            }
            Op::MaxPool2 { x, argmax } => {
                let xv = self.value(*x);
                let mut dx = vec![T::zero(); xv.len()];
                let gg = g.as_slice().unwrap();
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src as usize] += gg[o];
                }
                add_to(*x, ArrayD::from_shape_vec(xv.raw_dim(), dx).unwrap());
            }
            Op::UpsampleBilinear2x(x) => {
                add_to(*x, upsample2x_backward(self.value(*x), g));
            }
            Op::ConcatCh(a, b) => {
                let (n, ca, h, w) = dims4(self.value(*a));
                let cb = dims4(self.value(*b)).1;
                let gg = g.as_slice().unwrap();
                let hw = h * w;
                let mut da = vec![T::zero(); n * ca * hw];
                let mut db = vec![T::zero(); n * cb * hw];
                for ni in 0..n {
                    let gb = ni * (ca + cb) * hw;
                    da[ni * ca * hw..(ni + 1) * ca * hw]
                        .copy_from_slice(&gg[gb..gb + ca * hw]);
                    db[ni * cb * hw..(ni + 1) * cb * hw]
                        .copy_from_slice(&gg[gb + ca * hw..gb + (ca + cb) * hw]);
                }
                add_to(*a, ArrayD::from_shape_vec(IxDyn(&[n, ca, h, w]), da).unwrap());
                add_to(*b, ArrayD::from_shape_vec(IxDyn(&[n, cb, h, w]), db).unwrap());
            }
            Op::Gap(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = dims4(xv);
                let m = T::from_f64((h * w) as f64);
                let gg = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); xv.len()];
                for nc in 0..n * c {
                    let gv = gg[nc] / m;
                    for i in 0..h * w {
                        dx[nc * h * w + i] = gv;
                    }
                }
                add_to(*x, ArrayD::from_shape_vec(xv.raw_dim(), dx).unwrap());
            }
            Op::MulChannel { x, s } => {
                let xv = self.value(*x);
                let sv = self.value(*s);
                let (n, c, h, w) = dims4(xv);
                let xs = xv.as_slice().unwrap();
                let ss = sv.as_slice().unwrap();
                let gg = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); xs.len()];
                let mut ds = vec![T::zero(); n * c];
                for nc in 0..n * c {
                    let sc = ss[nc];
                    let mut acc = T::zero();
                    for i in 0..h * w {
                        let idx = nc * h * w + i;
                        dx[idx] = gg[idx] * sc;
                        acc += gg[idx] * xs[idx];
                    }
                    ds[nc] = acc;
                }
                add_to(*x, ArrayD::from_shape_vec(xv.raw_dim(), dx).unwrap());
                add_to(*s, ArrayD::from_shape_vec(IxDyn(&[n, c]), ds).unwrap());
            }
            Op::MatMul { a, b, trans_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
                let asl = av.as_slice().unwrap();
                let bsl = bv.as_slice().unwrap();
                let gsl = g.as_slice().unwrap();
                let mut da = vec![T::zero(); asl.len()];
                let mut db = vec![T::zero(); bsl.len()];
                let bstride = bv.shape()[1] * bv.shape()[2];
                let _ = batch;
                da.par_chunks_mut(m * k).enumerate().for_each(|(i, dai)| {
                    let gi = &gsl[i * m * n..(i + 1) * m * n];
                    let bi = &bsl[i * bstride..(i + 1) * bstride];
                    if *trans_b {
                        // y = a b^T: da = g b
                        gemm_dispatch(m, n, k, gi, false, bi, false, T::zero(), dai);
                    } else {
                        // y = a b: da = g b^T
                        gemm_dispatch(m, n, k, gi, false, bi, true, T::zero(), dai);
                    }
                });
                db.par_chunks_mut(bstride).enumerate().for_each(|(i, dbi)| {
                    let gi = &gsl[i * m * n..(i + 1) * m * n];
                    let ai = &asl[i * m * k..(i + 1) * m * k];
                    if *trans_b {
                        // db = g^T a
                        gemm_dispatch(n, m, k, gi, true, ai, false, T::zero(), dbi);
                    } else {
                        // db = a^T g
                        gemm_dispatch(k, m, n, ai, true, gi, false, T::zero(), dbi);
                    }
                });
                add_to(*a, ArrayD::from_shape_vec(av.raw_dim(), da).unwrap());
                add_to(*b, ArrayD::from_shape_vec(bv.raw_dim(), db).unwrap());
            }
            Op::LinearLast { x, w, b } => {
                let xv = self.value(*x);
                let wv = as2(self.value(*w));
                let (ci, co) = (wv.shape()[0], wv.shape()[1]);
                let rows = xv.len() / ci;
                let x2 = as2_view(xv, rows, ci);
                let g2 = as2_view(g, rows, co);
                let dx = g2.dot(&wv.t());
                let dw = x2.t().dot(&g2);
                add_to(*x, dx.into_shape_with_order(xv.raw_dim()).unwrap());
                add_to(*w, dw.into_dyn());
                if let Some(b) = b {
                    let db = g2.sum_axis(Axis(0));
                    add_to(*b, db.into_dyn());
                }
            }
            Op::SoftmaxLast(x) => {
                let yv = self.value(node);
                let shape = yv.shape();
                let c = *shape.last().unwrap();
                let ys = yv.as_slice().unwrap();
                let gg = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); ys.len()];
                dx.par_chunks_mut(c).enumerate().for_each(|(r, drow)| {
                    let yrow = &ys[r * c..(r + 1) * c];
                    let grow = &gg[r * c..(r + 1) * c];
                    let mut dot = T::zero();
                    for i in 0..c {
                        dot += grow[i] * yrow[i];
                    }
                    for i in 0..c {
                        drow[i] = yrow[i] * (grow[i] - dot);
                    }
                });
                add_to(*x, ArrayD::from_shape_vec(yv.raw_dim(), dx).unwrap());
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                add_to(
                    *x,
                    g.to_owned().into_shape_with_order(xv.raw_dim()).unwrap(),
                );
            }
            Op::Permute { x, axes } => {
                let mut inv = vec![0usize; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inv[a] = i;
                }
                let dx = g
                    .view()
                    .permuted_axes(IxDyn(&inv))
                    .as_standard_layout()
                    .to_owned();
                add_to(*x, dx);
            }
            Op::PadHw(x) => {
                let (n, c, h, w) = dims4(self.value(*x));
                let (_, _, hp, wp) = dims4(g);
                let gg = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..h {
                        let src = nc * hp * wp + y * wp;
                        let dst = nc * h * w + y * w;
                        dx[dst..dst + w].copy_from_slice(&gg[src..src + w]);
                    }
                }
                add_to(*x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap());
            }
            Op::CropHw { x, h, w } => {
                let (n, c, hp, wp) = dims4(self.value(*x));
                let gg = g.as_slice().unwrap();
                let mut dx = vec![T::zero(); n * c * hp * wp];
                for nc in 0..n * c {
                    for y in 0..*h {
                        let src = nc * h * w + y * w;
                        let dst = nc * hp * wp + y * wp;
                        dx[dst..dst + w].copy_from_slice(&gg[src..src + w]);
                    }
                }
                add_to(*x, ArrayD::from_shape_vec(IxDyn(&[n, c, hp, wp]), dx).unwrap());
            }
            Op::Roll { x, sh, sw } => {
                add_to(*x, roll_forward(g, -sh, -sw));
            }
            Op::WindowPartition { x, win } => {
                let (n, c, h, w) = dims4(self.value(*x));
                add_to(*x, windows::reverse(g, n, c, h, w, *win));
            }
            Op::WindowReverse { x, win, .. } => {
                add_to(*x, windows::partition(g, *win));
            }
            Op::RelPosBias {
                x,
                table,
                idx,
                heads,
            } => {
                add_to(*x, g.clone());
                let tv = self.value(*table);
                let (bh, t) = (g.shape()[0], g.shape()[1]);
                let gg = g.as_slice().unwrap();
                // sum gradients over the batch per head, then scatter once
                let heads = *heads;
                let mut gsum = vec![T::zero(); heads * t * t];
                for b in 0..bh {
                    let hd = b % heads;
                    let base = b * t * t;
                    let acc = &mut gsum[hd * t * t..(hd + 1) * t * t];
                    for ij in 0..t * t {
                        acc[ij] += gg[base + ij];
                    }
                }
                let mut dt = vec![T::zero(); tv.len()];
                for hd in 0..heads {
                    for ij in 0..t * t {
                        dt[idx[ij] * heads + hd] += gsum[hd * t * t + ij];
                    }
                }
                add_to(*table, ArrayD::from_shape_vec(tv.raw_dim(), dt).unwrap());
            }
            Op::AddMask(x) => add_to(*x, g.clone()),
            Op::BlurValid { x, kernel } => {
                add_to(*x, blur_valid_backward(self.value(*x), g, kernel));
            }
            Op::MeanAll(x) => {
                let xv = self.value(*x);
                let scale = g.iter().next().copied().unwrap()
                    / T::from_f64(xv.len() as f64);
                add_to(*x, ArrayD::from_elem(xv.raw_dim(), scale));
            }
        }
    }
}

/// GEMM dispatch: plain loops when an inner dimension is tiny (attention
/// head width), where the packing overhead of a blocked GEMM dominates.
#[allow(clippy::too_many_arguments)]
fn gemm_dispatch<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    beta: T,
    c: &mut [T],
) {
    if k.min(n).min(m) > 8 {
        T::gemm(m, k, n, a, trans_a, b, trans_b, beta, c);
        return;
    }
    if beta == T::zero() {
        c.fill(T::zero());
    }
    match (trans_a, trans_b) {
        (false, false) => {
            // c[i,j] += sum_l a[i,l] b[l,j]
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for (l, &av) in arow.iter().enumerate() {
                    let brow = &b[l * n..(l + 1) * n];
                    for j in 0..n {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
        (false, true) => {
            // b stored [n,k]: c[i,j] += dot(a[i,:], b[j,:])
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                let crow = &mut c[i * n..(i + 1) * n];
                for (j, cj) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for l in 0..k {
                        acc += arow[l] * brow[l];
                    }
                    *cj += acc;
                }
            }
        }
        (true, false) => {
            // a stored [k,m]: c[i,j] += sum_l a[l,i] b[l,j]
            for l in 0..k {
                let arow = &a[l * m..(l + 1) * m];
                let brow = &b[l * n..(l + 1) * n];
                for (i, &av) in arow.iter().enumerate() {
                    let crow = &mut c[i * n..(i + 1) * n];
                    for j in 0..n {
                        crow[j] += av * brow[j];
                    }
                }
            }
        }
        (true, true) => {
            // a stored [k,m], b stored [n,k]
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for (j, cj) in crow.iter_mut().enumerate() {
                    let brow = &b[j * k..(j + 1) * k];
                    let mut acc = T::zero();
                    for l in 0..k {
                        acc += a[l * m + i] * brow[l];
                    }
                    *cj += acc;
                }
            }
        }
    }
}

fn op_name<T: Element>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Div(..) => "div",
        Op::Neg(..) => "neg",
        Op::AddScalar(..) => "add_scalar",
        Op::MulScalar(..) => "mul_scalar",
        Op::ScalarSub(..) => "scalar_sub",
        Op::Relu(..) => "relu",
        Op::LeakyRelu(..) => "leaky_relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Conv2d { .. } => "conv2d",
        Op::BatchNormTrain { .. } => "bn_train",
        Op::BatchNormEval { .. } => "bn_eval",
        Op::LayerNorm { .. } => "layer_norm",
        Op::MaxPool2 { .. } => "max_pool2",
        Op::UpsampleBilinear2x(..) => "upsample",
        Op::ConcatCh(..) => "concat",
        Op::Gap(..) => "gap",
        Op::MulChannel { .. } => "mul_channel",
        Op::MatMul { .. } => "matmul",
        Op::LinearLast { .. } => "linear_last",
        Op::SoftmaxLast(..) => "softmax",
        Op::Reshape(..) => "reshape",
        Op::Permute { .. } => "permute",
        Op::PadHw(..) => "pad_hw",
        Op::CropHw { .. } => "crop_hw",
        Op::Roll { .. } => "roll",
        Op::WindowPartition { .. } => "window_partition",
        Op::WindowReverse { .. } => "window_reverse",
        Op::RelPosBias { .. } => "rel_pos_bias",
        Op::AddMask(..) => "add_mask",
        Op::BlurValid { .. } => "blur_valid",
        Op::MeanAll(..) => "mean_all",
    }
}

fn op_parents<T: Element>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::ConcatCh(a, b) => vec![*a, *b],
        Op::Neg(a)
        | Op::AddScalar(a, _)
        | Op::MulScalar(a, _)
        | Op::ScalarSub(_, a)
        | Op::Relu(a)
        | Op::LeakyRelu(a, _)
        | Op::Sigmoid(a)
        | Op::UpsampleBilinear2x(a)
        | Op::Gap(a)
        | Op::SoftmaxLast(a)
        | Op::Reshape(a)
        | Op::MeanAll(a) => vec![*a],
        Op::Conv2d { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            if let Some(b) = b {
                v.push(*b);
            }
            v
        }
        Op::BatchNormTrain { x, gamma, beta, .. }
        | Op::BatchNormEval { x, gamma, beta, .. }
        | Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::MaxPool2 { x, .. }
        | Op::Permute { x, .. }
        | Op::PadHw(x)
        | Op::CropHw { x, .. }
        | Op::Roll { x, .. }
        | Op::WindowPartition { x, .. }
        | Op::WindowReverse { x, .. }
        | Op::AddMask(x)
        | Op::BlurValid { x, .. } => vec![*x],
        Op::MulChannel { x, s } => vec![*x, *s],
        Op::MatMul { a, b, .. } => vec![*a, *b],
        Op::LinearLast { x, w, b } => {
            let mut v = vec![*x, *w];
            if let Some(b) = b {
                v.push(*b);
            }
            v
        }
        Op::RelPosBias { x, table, .. } => vec![*x, *table],
    }
}

// ---- shared kernels -------------------------------------------------------

pub(crate) fn dims4<T>(a: &ArrayD<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected 4-d tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

fn as3<T: Element>(a: &ArrayD<T>) -> ndarray::ArrayView3<'_, T> {
    a.view().into_dimensionality().expect("3-d tensor")
}

fn as2<T: Element>(a: &ArrayD<T>) -> ndarray::ArrayView2<'_, T> {
    a.view().into_dimensionality().expect("2-d tensor")
}

fn as2_view<T: Element>(a: &ArrayD<T>, rows: usize, cols: usize) -> Array2<T> {
    a.to_owned()
        .into_shape_with_order((rows, cols))
        .expect("flatten to 2-d")
}

fn bn_apply<T: Element>(
    x: &ArrayD<T>,
    mean: &Array1<T>,
    var: &Array1<T>,
    gamma: &ArrayD<T>,
    beta: &ArrayD<T>,
    eps: T,
) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    assert_eq!(gamma.len(), c, "bn gamma dim");
    assert_eq!(beta.len(), c, "bn beta dim");
    let xs = x.as_slice().unwrap();
    let gs = gamma.as_slice().unwrap();
    let bs = beta.as_slice().unwrap();
    let mut out = vec![T::zero(); xs.len()];
    for ni in 0..n {
        for ci in 0..c {
            let rstd = T::one() / (var[ci] + eps).sqrt();
            let (mu, ga, be) = (mean[ci], gs[ci], bs[ci]);
            let base = (ni * c + ci) * h * w;
            for i in base..base + h * w {
                out[i] = (xs[i] - mu) * rstd * ga + be;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

fn bn_train_backward<T: Element>(
    x: &ArrayD<T>,
    g: &ArrayD<T>,
    mean: &Array1<T>,
    var: &Array1<T>,
    gamma: &ArrayD<T>,
    eps: T,
) -> (ArrayD<T>, Array1<T>, Array1<T>) {
    let (n, c, h, w) = dims4(x);
    let m = T::from_f64((n * h * w) as f64);
    let xs = x.as_slice().unwrap();
    let gg = g.as_slice().unwrap();
    let gs = gamma.as_slice().unwrap();
    let mut dx = vec![T::zero(); xs.len()];
    let mut dgamma = Array1::zeros(c);
    let mut dbeta = Array1::zeros(c);
    for ci in 0..c {
        let rstd = T::one() / (var[ci] + eps).sqrt();
        let mu = mean[ci];
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        let mut dg = T::zero();
        let mut db = T::zero();
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in base..base + h * w {
                let xhat = (xs[i] - mu) * rstd;
                let dxhat = gg[i] * gs[ci];
                sum_dxhat += dxhat;
                sum_dxhat_xhat += dxhat * xhat;
                dg += gg[i] * xhat;
                db += gg[i];
            }
        }
        dgamma[ci] = dg;
        dbeta[ci] = db;
        for ni in 0..n {
            let base = (ni * c + ci) * h * w;
            for i in base..base + h * w {
                let xhat = (xs[i] - mu) * rstd;
                let dxhat = gg[i] * gs[ci];
                dx[i] = rstd * (dxhat - sum_dxhat / m - xhat * sum_dxhat_xhat / m);
            }
        }
    }
    (
        ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap(),
        dgamma,
        dbeta,
    )
}

/// Sampling tables for one axis of half-pixel-center bilinear 2x upsampling.
fn upsample_taps<T: Element>(len_in: usize) -> Vec<(usize, usize, T)> {
    let half = T::from_f64(0.5);
    let quarter = T::from_f64(0.25);
    (0..2 * len_in)
        .map(|o| {
            // src = (o + 0.5)/2 - 0.5
            let src = T::from_f64(o as f64) * half - quarter;
            if src <= T::zero() {
                (0, 0, T::zero())
            } else {
                let i0 = src.floor().to_f64() as usize;
                if i0 + 1 >= len_in {
                    (len_in - 1, len_in - 1, T::zero())
                } else {
                    (i0, i0 + 1, src - T::from_f64(i0 as f64))
                }
            }
        })
        .collect()
}

fn upsample2x_forward<T: Element>(x: &ArrayD<T>) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    let ty = upsample_taps::<T>(h);
    let tx = upsample_taps::<T>(w);
    let xs = x.as_slice().unwrap();
    let one = T::one();
    let mut out = vec![T::zero(); n * c * 4 * h * w];
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * 4 * h * w;
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let v00 = xs[ib + y0 * w + x0];
                let v01 = xs[ib + y0 * w + x1];
                let v10 = xs[ib + y1 * w + x0];
                let v11 = xs[ib + y1 * w + x1];
                let top = v00 * (one - wx) + v01 * wx;
                let bot = v10 * (one - wx) + v11 * wx;
                out[ob + oy * 2 * w + ox] = top * (one - wy) + bot * wy;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, 2 * h, 2 * w]), out).unwrap()
}

fn upsample2x_backward<T: Element>(x: &ArrayD<T>, g: &ArrayD<T>) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    let ty = upsample_taps::<T>(h);
    let tx = upsample_taps::<T>(w);
    let gg = g.as_slice().unwrap();
    let one = T::one();
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        let ib = nc * h * w;
        let ob = nc * 4 * h * w;
        for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                let gv = gg[ob + oy * 2 * w + ox];
                dx[ib + y0 * w + x0] += gv * (one - wy) * (one - wx);
                dx[ib + y0 * w + x1] += gv * (one - wy) * wx;
                dx[ib + y1 * w + x0] += gv * wy * (one - wx);
                dx[ib + y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()
}

fn roll_forward<T: Element>(x: &ArrayD<T>, sh: isize, sw: isize) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    let sh = sh.rem_euclid(h as isize) as usize;
    let sw = sw.rem_euclid(w as isize) as usize;
    let xs = x.as_slice().unwrap();
    let mut out = vec![T::zero(); xs.len()];
    for nc in 0..n * c {
        let base = nc * h * w;
        for y in 0..h {
            let ny = (y + sh) % h;
            for xcol in 0..w {
                let nx = (xcol + sw) % w;
                out[base + ny * w + nx] = xs[base + y * w + xcol];
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), out).unwrap()
}

fn blur1d_valid<T: Element>(row: &[T], k: &[T], out: &mut [T]) {
    let klen = k.len();
    for (o, slot) in out.iter_mut().enumerate() {
        let mut acc = T::zero();
        for (i, &kv) in k.iter().enumerate() {
            acc += kv * row[o + i];
        }
        let _ = klen;
        *slot = acc;
    }
}

fn blur_valid_forward<T: Element>(x: &ArrayD<T>, k: &[T]) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    let klen = k.len();
    assert!(h >= klen && w >= klen, "blur kernel larger than input");
    let (ho, wo) = (h - klen + 1, w - klen + 1);
    let xs = x.as_slice().unwrap();
    // rows pass: convolve along W
    let mut tmp = vec![T::zero(); n * c * h * wo];
    for nc in 0..n * c {
        for y in 0..h {
            let src = &xs[nc * h * w + y * w..nc * h * w + (y + 1) * w];
            let dst = &mut tmp[nc * h * wo + y * wo..nc * h * wo + (y + 1) * wo];
            blur1d_valid(src, k, dst);
        }
    }
    // cols pass: convolve along H
    let mut out = vec![T::zero(); n * c * ho * wo];
    for nc in 0..n * c {
        for xcol in 0..wo {
            for oy in 0..ho {
                let mut acc = T::zero();
                for (i, &kv) in k.iter().enumerate() {
                    acc += kv * tmp[nc * h * wo + (oy + i) * wo + xcol];
                }
                out[nc * ho * wo + oy * wo + xcol] = acc;
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, ho, wo]), out).unwrap()
}

fn blur_valid_backward<T: Element>(x: &ArrayD<T>, g: &ArrayD<T>, k: &[T]) -> ArrayD<T> {
    let (n, c, h, w) = dims4(x);
    let klen = k.len();
    let (ho, wo) = (h - klen + 1, w - klen + 1);
    let gg = g.as_slice().unwrap();
    // adjoint of cols pass: scatter along H
    let mut dtmp = vec![T::zero(); n * c * h * wo];
    for nc in 0..n * c {
        for xcol in 0..wo {
            for oy in 0..ho {
                let gv = gg[nc * ho * wo + oy * wo + xcol];
                for (i, &kv) in k.iter().enumerate() {
                    dtmp[nc * h * wo + (oy + i) * wo + xcol] += gv * kv;
                }
            }
        }
    }
    // adjoint of rows pass: scatter along W
    let mut dx = vec![T::zero(); n * c * h * w];
    for nc in 0..n * c {
        for y in 0..h {
            for o in 0..wo {
                let gv = dtmp[nc * h * wo + y * wo + o];
                for (i, &kv) in k.iter().enumerate() {
                    dx[nc * h * w + y * w + o + i] += gv * kv;
                }
            }
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), dx).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn dyn4<T: Element>(v: Vec<T>, n: usize, c: usize, h: usize, w: usize) -> ArrayD<T> {
        ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), v).unwrap()
    }

    #[test]
    fn add_mul_backward() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn(), true);
        let b = t.leaf(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn(), true);
        let p = t.mul(a, b);
        let s = t.add(p, a);
        let l = t.mean_all(s);
        let g = t.backward(l);
        // d/da mean(a*b + a) = (b + 1)/4
        let da = g.get(a).unwrap();
        assert!((da[[0, 0]] - 6.0 / 4.0).abs() < 1e-12);
        assert!((da[[1, 1]] - 9.0 / 4.0).abs() < 1e-12);
        let db = g.get(b).unwrap();
        assert!((db[[0, 1]] - 2.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 3, 4]), (0..24).map(|i| i as f64 * 0.3).collect())
                .unwrap(),
            false,
        );
        let y = t.softmax_last(x);
        let v = t.value(y);
        for r in 0..6 {
            let sum: f64 = v.as_slice().unwrap()[r * 4..(r + 1) * 4].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn maxpool_picks_maximum() {
        let mut t = Tape::<f32>::new();
        let x = t.leaf(
            dyn4(vec![1.0, 2.0, 3.0, 4.0, -1.0, -2.0, -3.0, -4.0], 1, 2, 2, 2),
            false,
        );
        let y = t.max_pool2(x);
        assert_eq!(t.value(y).shape(), &[1, 2, 1, 1]);
        assert_eq!(t.value(y).as_slice().unwrap(), &[4.0, -1.0]);
    }

    #[test]
    fn upsample_doubles_and_keeps_constants() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(dyn4(vec![0.7; 2 * 3 * 4 * 4], 2, 3, 4, 4), false);
        let y = t.upsample_bilinear2x(x);
        assert_eq!(t.value(y).shape(), &[2, 3, 8, 8]);
        for &v in t.value(y).iter() {
            assert!((v - 0.7).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_preserves_linear_ramp_interior() {
        // f(x) = x on a row; bilinear with half-pixel centers reproduces the
        // ramp exactly away from the clamped borders.
        let w = 8usize;
        let mut t = Tape::<f64>::new();
        let data: Vec<f64> = (0..w).map(|i| i as f64).collect();
        let x = t.leaf(dyn4(data, 1, 1, 1, w).into_dyn(), false);
        // height 1 cannot interpolate vertically; use a 2-row copy instead
        let mut t2 = Tape::<f64>::new();
        let data2: Vec<f64> = (0..2 * w).map(|i| (i % w) as f64).collect();
        let x2 = t2.leaf(dyn4(data2, 1, 1, 2, w), false);
        let y = t2.upsample_bilinear2x(x2);
        let v = t2.value(y);
        for ox in 2..2 * w - 2 {
            let expect = (ox as f64 + 0.5) / 2.0 - 0.5;
            assert!(
                (v[[0, 0, 1, ox]] - expect).abs() < 1e-9,
                "ox={} got={} want={}",
                ox,
                v[[0, 0, 1, ox]],
                expect
            );
        }
        let _ = x;
    }

    #[test]
    fn roll_round_trip() {
        let mut t = Tape::<f32>::new();
        let data: Vec<f32> = (0..16).map(|i| i as f32).collect();
        let x = t.leaf(dyn4(data.clone(), 1, 1, 4, 4), false);
        let r = t.roll(x, -1, -2);
        let b = t.roll(r, 1, 2);
        assert_eq!(t.value(b).as_slice().unwrap(), &data[..]);
        assert_ne!(t.value(r).as_slice().unwrap(), &data[..]);
    }

    #[test]
    fn concat_then_split_grads() {
        let mut t = Tape::<f64>::new();
        let a = t.leaf(dyn4(vec![1.0; 4], 1, 1, 2, 2), true);
        let b = t.leaf(dyn4(vec![2.0; 8], 1, 2, 2, 2), true);
        let cat = t.concat_channels(a, b);
        assert_eq!(t.value(cat).shape(), &[1, 3, 2, 2]);
        let l = t.mean_all(cat);
        let g = t.backward(l);
        assert!((g.get(a).unwrap()[[0, 0, 0, 0]] - 1.0 / 12.0).abs() < 1e-12);
        assert!((g.get(b).unwrap()[[0, 1, 1, 1]] - 1.0 / 12.0).abs() < 1e-12);
    }

    #[test]
    fn linear_last_matches_manual() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[2, 2, 3]), (0..12).map(|i| i as f64).collect())
                .unwrap(),
            false,
        );
        let w = t.leaf(
            ArrayD::from_shape_vec(IxDyn(&[3, 2]), vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap(),
            false,
        );
        let b = t.leaf(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.5, -0.5]).unwrap(), false);
        let y = t.linear_last(x, w, Some(b));
        assert_eq!(t.value(y).shape(), &[2, 2, 2]);
        // row [0,1,2] -> [0*1+2*1, 1*1+2*1] + bias = [2.5, 2.5]
        assert!((t.value(y)[[0, 0, 0]] - 2.5).abs() < 1e-12);
        assert!((t.value(y)[[0, 0, 1]] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn pad_crop_inverse() {
        let mut t = Tape::<f32>::new();
        let data: Vec<f32> = (0..12).map(|i| i as f32).collect();
        let x = t.leaf(dyn4(data.clone(), 1, 1, 3, 4), false);
        let p = t.pad_hw(x, 2, 1);
        assert_eq!(t.value(p).shape(), &[1, 1, 5, 5]);
        let c = t.crop_hw(p, 3, 4);
        assert_eq!(t.value(c).as_slice().unwrap(), &data[..]);
    }
}
