//! Differentiable operations on [`Var`]s.
//!
//! Convolutions and group norms process one sample at a time, so a sample's
//! result never depends on how many other samples share the batch. The
//! anchor-frame contract relies on this.

use super::graph::{BackwardFn, Var};
use super::tensor::{gemm, MatRef, Scalar, Tensor};

fn t<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}

fn boxed<T: Scalar, F>(f: F) -> BackwardFn<T>
where
    F: Fn(&Tensor<T>) -> Vec<Option<Tensor<T>>> + 'static,
{
    Box::new(f)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "add shape mismatch");
        let out = a.zip_map(&b, |x, y| x + y);
        self.graph
            .push_op(out, &[self, other], || boxed(|g: &Tensor<T>| vec![Some(g.clone()), Some(g.clone())]))
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "sub shape mismatch");
        let out = a.zip_map(&b, |x, y| x - y);
        self.graph.push_op(out, &[self, other], || {
            boxed(|g: &Tensor<T>| vec![Some(g.clone()), Some(g.map(|v| -v))])
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        assert_eq!(a.shape(), b.shape(), "mul shape mismatch");
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.push_op(out, &[self, other], move || {
            boxed(move |g: &Tensor<T>| vec![Some(g.zip_map(&b, |u, y| u * y)), Some(g.zip_map(&a, |u, x| u * x))])
        })
    }

    pub fn square(self) -> Var<'g, T> {
        self.mul(self)
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s: T = t(s);
        let out = self.value().map(|x| x * s);
        self.graph
            .push_op(out, &[self], move || boxed(move |g: &Tensor<T>| vec![Some(g.map(|u| u * s))]))
    }

    pub fn add_scalar(self, s: f64) -> Var<'g, T> {
        let s: T = t(s);
        let out = self.value().map(|x| x + s);
        self.graph.push_op(out, &[self], || boxed(|g: &Tensor<T>| vec![Some(g.clone())]))
    }

    pub fn silu(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v * sigmoid(v));
        self.graph.push_op(out, &[self], move || {
            boxed(move |g: &Tensor<T>| {
                vec![Some(g.zip_map(&x, |u, v| {
                    let s = sigmoid(v);
                    u * s * (T::one() + v * (T::one() - s))
                }))]
            })
        })
    }

    /// Add `other`, whose shape is a suffix of `self`'s, broadcast over the
    /// leading axes.
    pub fn add_bcast(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let rank_b = b.shape().len();
        assert!(
            a.shape().len() >= rank_b && a.shape()[a.shape().len() - rank_b..] == *b.shape(),
            "add_bcast: {:?} is not a suffix of {:?}",
            b.shape(),
            a.shape()
        );
        let inner = b.numel();
        let mut out = (*a).clone();
        for chunk in out.data_mut().chunks_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(b.data()) {
                *o += v;
            }
        }
        let b_shape = b.shape().to_vec();
        self.graph.push_op(out, &[self, other], move || {
            boxed(move |g: &Tensor<T>| {
                let mut gb = Tensor::zeros(&b_shape);
                for chunk in g.data().chunks(inner) {
                    for (o, &v) in gb.data_mut().iter_mut().zip(chunk) {
                        *o += v;
                    }
                }
                vec![Some(g.clone()), Some(gb)]
            })
        })
    }

    /// `x[n, c, ...] + b[c]`.
    pub fn add_channel(self, bias: Var<'g, T>) -> Var<'g, T> {
        let (x, b) = (self.value(), bias.value());
        let (n, c) = (x.dim(0), x.dim(1));
        assert_eq!(b.shape(), &[c], "add_channel bias shape");
        let inner = x.numel() / (n * c);
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = b.data()[i % c];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.graph.push_op(out, &[self, bias], move || {
            boxed(move |g: &Tensor<T>| {
                let mut gb = Tensor::zeros(&[c]);
                for (i, chunk) in g.data().chunks(inner).enumerate() {
                    gb.data_mut()[i % c] += chunk.iter().copied().sum::<T>();
                }
                vec![Some(g.clone()), Some(gb)]
            })
        })
    }

    /// `x[n, c, ...] + e[n, c]`.
    pub fn add_sample_channel(self, e: Var<'g, T>) -> Var<'g, T> {
        let (x, ev) = (self.value(), e.value());
        let (n, c) = (x.dim(0), x.dim(1));
        assert_eq!(ev.shape(), &[n, c], "add_sample_channel shape");
        let inner = x.numel() / (n * c);
        let mut out = (*x).clone();
        for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bv = ev.data()[i];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
        self.graph.push_op(out, &[self, e], move || {
            boxed(move |g: &Tensor<T>| {
                let ge: Vec<T> = g.data().chunks(inner).map(|ch| ch.iter().copied().sum()).collect();
                vec![Some(g.clone()), Some(Tensor::from_vec(&[n, c], ge))]
            })
        })
    }

    /// Scale each slice along axis 0 by a constant weight.
    pub fn mul_rows(self, weights: &[T]) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.dim(0), weights.len(), "mul_rows length");
        let inner = x.numel() / weights.len().max(1);
        let w = weights.to_vec();
        let apply = move |src: &Tensor<T>, w: &[T]| {
            let mut out = src.clone();
            for (chunk, &wv) in out.data_mut().chunks_mut(inner).zip(w) {
                chunk.iter_mut().for_each(|v| *v *= wv);
            }
            out
        };
        let out = apply(&x, &w);
        self.graph
            .push_op(out, &[self], move || boxed(move |g: &Tensor<T>| vec![Some(apply(g, &w))]))
    }

    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.graph.push_op(out, &[self], move || {
            boxed(move |g: &Tensor<T>| vec![Some(g.clone().reshape(&old))])
        })
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g, T> {
        let out = self.value().permute(perm);
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        self.graph
            .push_op(out, &[self], move || boxed(move |g: &Tensor<T>| vec![Some(g.permute(&inv))]))
    }

    /// Gather slices along axis 0 (also serves as an embedding lookup).
    pub fn select0(self, indices: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let inner: usize = x.shape()[1..].iter().product();
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            assert!(i < x.dim(0), "select0 index {i} out of range {}", x.dim(0));
            data.extend_from_slice(&x.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = indices.len();
        let src_shape = x.shape().to_vec();
        let idx = indices.to_vec();
        self.graph.push_op(Tensor::from_vec(&shape, data), &[self], move || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = Tensor::zeros(&src_shape);
                for (row, &i) in idx.iter().enumerate() {
                    let dst = &mut gx.data_mut()[i * inner..(i + 1) * inner];
                    for (d, &v) in dst.iter_mut().zip(&g.data()[row * inner..(row + 1) * inner]) {
                        *d += v;
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// Concatenate along axis 1 (channels).
    pub fn concat_channels(self, other: Var<'g, T>) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let n = a.dim(0);
        assert_eq!(n, b.dim(0), "concat batch mismatch");
        assert_eq!(a.shape()[2..], b.shape()[2..], "concat spatial mismatch");
        let ia = a.numel() / n;
        let ib = b.numel() / n;
        let mut data = Vec::with_capacity(a.numel() + b.numel());
        for s in 0..n {
            data.extend_from_slice(&a.data()[s * ia..(s + 1) * ia]);
            data.extend_from_slice(&b.data()[s * ib..(s + 1) * ib]);
        }
        let mut shape = a.shape().to_vec();
        shape[1] += b.dim(1);
        let (sa, sb) = (a.shape().to_vec(), b.shape().to_vec());
        self.graph.push_op(Tensor::from_vec(&shape, data), &[self, other], move || {
            boxed(move |g: &Tensor<T>| {
                let mut ga = Vec::with_capacity(n * ia);
                let mut gb = Vec::with_capacity(n * ib);
                for chunk in g.data().chunks(ia + ib) {
                    ga.extend_from_slice(&chunk[..ia]);
                    gb.extend_from_slice(&chunk[ia..]);
                }
                vec![Some(Tensor::from_vec(&sa, ga)), Some(Tensor::from_vec(&sb, gb))]
            })
        })
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        self.graph.push_op(Tensor::scalar(x.sum()), &[self], move || {
            boxed(move |g: &Tensor<T>| vec![Some(Tensor::full(&shape, g.data()[0]))])
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Batched matmul: `self [B, M, K] @ other [B, K, N]`, or `other [B, N, K]`
    /// read transposed when `trans_b`.
    pub fn bmm(self, other: Var<'g, T>, trans_b: bool) -> Var<'g, T> {
        let (a, b) = (self.value(), other.value());
        let (bs, m, k) = (a.dim(0), a.dim(1), a.dim(2));
        assert_eq!(b.dim(0), bs, "bmm batch mismatch");
        let (n, kb) = if trans_b { (b.dim(1), b.dim(2)) } else { (b.dim(2), b.dim(1)) };
        assert_eq!(k, kb, "bmm inner mismatch");
        let (br, bc) = (b.dim(1), b.dim(2));
        let mut out = Tensor::zeros(&[bs, m, n]);
        for i in 0..bs {
            let am = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
            let bm = MatRef::new(&b.data()[i * br * bc..(i + 1) * br * bc], br, bc);
            let bm = if trans_b { bm.t() } else { bm };
            gemm(am, bm, &mut out.data_mut()[i * m * n..(i + 1) * m * n], false);
        }
        self.graph.push_op(out, &[self, other], move || {
            boxed(move |g: &Tensor<T>| {
                let mut ga = Tensor::zeros(a.shape());
                let mut gb = Tensor::zeros(b.shape());
                for i in 0..bs {
                    let gm = MatRef::new(&g.data()[i * m * n..(i + 1) * m * n], m, n);
                    let am = MatRef::new(&a.data()[i * m * k..(i + 1) * m * k], m, k);
                    let bm = MatRef::new(&b.data()[i * br * bc..(i + 1) * br * bc], br, bc);
                    let ga_i = &mut ga.data_mut()[i * m * k..(i + 1) * m * k];
                    if trans_b {
                        // C = A B^T: dA = G B, dB = G^T A
                        gemm(gm, bm, ga_i, false);
                        gemm(gm.t(), am, &mut gb.data_mut()[i * br * bc..(i + 1) * br * bc], false);
                    } else {
                        // C = A B: dA = G B^T, dB = A^T G
                        gemm(gm, bm.t(), ga_i, false);
                        gemm(am.t(), gm, &mut gb.data_mut()[i * br * bc..(i + 1) * br * bc], false);
                    }
                }
                vec![Some(ga), Some(gb)]
            })
        })
    }

    /// `x [..., in] @ w[out, in]^T + b[out]`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Var<'g, T> {
        let (x, wv) = (self.value(), w.value());
        let (out_f, in_f) = (wv.dim(0), wv.dim(1));
        let xs = x.shape().to_vec();
        assert_eq!(*xs.last().unwrap(), in_f, "linear input width");
        let rows = x.numel() / in_f;
        let mut out = vec![T::zero(); rows * out_f];
        gemm(
            MatRef::new(x.data(), rows, in_f),
            MatRef::new(wv.data(), out_f, in_f).t(),
            &mut out,
            false,
        );
        let mut shape = xs.clone();
        *shape.last_mut().unwrap() = out_f;
        let y = self.graph.push_op(Tensor::from_vec(&shape, out), &[self, w], move || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = vec![T::zero(); rows * in_f];
                gemm(
                    MatRef::new(g.data(), rows, out_f),
                    MatRef::new(wv.data(), out_f, in_f),
                    &mut gx,
                    false,
                );
                let mut gw = vec![T::zero(); out_f * in_f];
                gemm(
                    MatRef::new(g.data(), rows, out_f).t(),
                    MatRef::new(x.data(), rows, in_f),
                    &mut gw,
                    false,
                );
                vec![
                    Some(Tensor::from_vec(&xs, gx)),
                    Some(Tensor::from_vec(&[out_f, in_f], gw)),
                ]
            })
        });
        match b {
            Some(b) => y.add_bcast(b),
            None => y,
        }
    }

    pub fn softmax_last(self) -> Var<'g, T> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(d) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        let y = out.clone();
        self.graph.push_op(out, &[self], move || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = g.clone();
                for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for (gv, &yv) in grow.iter_mut().zip(yrow) {
                        *gv = yv * (*gv - dot);
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// 2-D convolution, `self [N, Cin, H, W]`, `w [Cout, Cin, k, k]`.
    pub fn conv2d(self, w: Var<'g, T>, bias: Option<Var<'g, T>>, stride: usize, pad: usize) -> Var<'g, T> {
        let (x, wv) = (self.value(), w.value());
        let geo = ConvGeom::new(x.shape(), wv.shape(), stride, pad);
        let mut out = Tensor::zeros(&[geo.n, geo.cout, geo.ho, geo.wo]);
        let mut cols = vec![T::zero(); geo.ckk() * geo.hwo()];
        let out_inner = geo.cout * geo.hwo();
        for s in 0..geo.n {
            let xs = geo.sample(x.data(), s);
            let colref = if geo.is_pointwise() {
                xs
            } else {
                geo.im2col(xs, &mut cols);
                &cols[..]
            };
            gemm(
                MatRef::new(wv.data(), geo.cout, geo.ckk()),
                MatRef::new(colref, geo.ckk(), geo.hwo()),
                &mut out.data_mut()[s * out_inner..(s + 1) * out_inner],
                false,
            );
        }
        let y = self.graph.push_op(out, &[self, w], move || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = Tensor::zeros(x.shape());
                let mut gw = Tensor::zeros(wv.shape());
                let mut cols = vec![T::zero(); geo.ckk() * geo.hwo()];
                let mut dcols = vec![T::zero(); geo.ckk() * geo.hwo()];
                let in_inner = geo.cin * geo.h * geo.w;
                for s in 0..geo.n {
                    let gs = MatRef::new(&g.data()[s * out_inner..(s + 1) * out_inner], geo.cout, geo.hwo());
                    let xs = geo.sample(x.data(), s);
                    let colref = if geo.is_pointwise() {
                        xs
                    } else {
                        geo.im2col(xs, &mut cols);
                        &cols[..]
                    };
                    gemm(gs, MatRef::new(colref, geo.ckk(), geo.hwo()).t(), gw.data_mut(), true);
                    let gxs = &mut gx.data_mut()[s * in_inner..(s + 1) * in_inner];
                    if geo.is_pointwise() {
                        gemm(MatRef::new(wv.data(), geo.cout, geo.ckk()).t(), gs, gxs, false);
                    } else {
                        gemm(MatRef::new(wv.data(), geo.cout, geo.ckk()).t(), gs, &mut dcols, false);
                        geo.col2im(&dcols, gxs);
                    }
                }
                vec![Some(gx), Some(gw)]
            })
        });
        match bias {
            Some(b) => y.add_channel(b),
            None => y,
        }
    }

    /// Nearest-neighbour 2x upsampling of `[N, C, H, W]`.
    pub fn upsample2x(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c, h, w) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        {
            let od = out.data_mut();
            for p in 0..n * c {
                for i in 0..2 * h {
                    for j in 0..2 * w {
                        od[(p * 2 * h + i) * 2 * w + j] = x.data()[(p * h + i / 2) * w + j / 2];
                    }
                }
            }
        }
        let shape = x.shape().to_vec();
        self.graph.push_op(out, &[self], move || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = Tensor::zeros(&shape);
                let gd = gx.data_mut();
                for p in 0..n * c {
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            gd[(p * h + i / 2) * w + j / 2] += g.data()[(p * 2 * h + i) * 2 * w + j];
                        }
                    }
                }
                vec![Some(gx)]
            })
        })
    }

    /// Group normalisation over `[N, C, ...]` with per-channel affine.
    pub fn group_norm(self, groups: usize, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let (n, c) = (x.dim(0), x.dim(1));
        assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
        let spatial = x.numel() / (n * c);
        let gsize = (c / groups) * spatial;
        let (gm, bt) = (gamma.value(), beta.value());
        let eps: T = t(eps);
        let mut xhat = (*x).clone();
        let mut inv_std = vec![T::zero(); n * groups];
        for (gi, chunk) in xhat.data_mut().chunks_mut(gsize).enumerate() {
            let cnt = T::from_usize(gsize).unwrap();
            let mean = chunk.iter().copied().sum::<T>() / cnt;
            let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let is = T::one() / (var + eps).sqrt();
            inv_std[gi] = is;
            chunk.iter_mut().for_each(|v| *v = (*v - mean) * is);
        }
        let mut out = xhat.clone();
        for (ci, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            let ch = ci % c;
            let (gv, bv) = (gm.data()[ch], bt.data()[ch]);
            chunk.iter_mut().for_each(|v| *v = *v * gv + bv);
        }
        self.graph.push_op(out, &[self, gamma, beta], move || {
            boxed(move |g: &Tensor<T>| {
                let mut ggamma = Tensor::zeros(&[c]);
                let mut gbeta = Tensor::zeros(&[c]);
                let mut dxhat = g.clone();
                for (ci, (gch, xch)) in dxhat
                    .data_mut()
                    .chunks_mut(spatial)
                    .zip(xhat.data().chunks(spatial))
                    .enumerate()
                {
                    let ch = ci % c;
                    let mut sg = T::zero();
                    let mut sgx = T::zero();
                    for (gv, &xv) in gch.iter_mut().zip(xch) {
                        sg += *gv;
                        sgx += *gv * xv;
                        *gv *= gm.data()[ch];
                    }
                    ggamma.data_mut()[ch] += sgx;
                    gbeta.data_mut()[ch] += sg;
                }
                let cnt = T::from_usize(gsize).unwrap();
                for (gi, (dch, xch)) in dxhat
                    .data_mut()
                    .chunks_mut(gsize)
                    .zip(xhat.data().chunks(gsize))
                    .enumerate()
                {
                    let m1 = dch.iter().copied().sum::<T>() / cnt;
                    let m2 = dch.iter().zip(xch).map(|(&d, &xv)| d * xv).sum::<T>() / cnt;
                    let is = inv_std[gi];
                    for (d, &xv) in dch.iter_mut().zip(xch) {
                        *d = is * (*d - m1 - xv * m2);
                    }
                }
                vec![Some(dxhat), Some(ggamma), Some(gbeta)]
            })
        })
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Var<'g, T> {
        let x = self.value();
        let d = *x.shape().last().unwrap();
        let (gm, bt) = (gamma.value(), beta.value());
        assert_eq!(gm.shape(), &[d], "layer_norm gamma width");
        let eps: T = t(eps);
        let cnt = T::from_usize(d).unwrap();
        let mut xhat = (*x).clone();
        let mut inv_std = Vec::with_capacity(x.numel() / d);
        for row in xhat.data_mut().chunks_mut(d) {
            let mean = row.iter().copied().sum::<T>() / cnt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / cnt;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
        }
        let mut out = xhat.clone();
        for row in out.data_mut().chunks_mut(d) {
            for ((v, &gv), &bv) in row.iter_mut().zip(gm.data()).zip(bt.data()) {
                *v = *v * gv + bv;
            }
        }
        self.graph.push_op(out, &[self, gamma, beta], move || {
            boxed(move |g: &Tensor<T>| {
                let mut ggamma = Tensor::zeros(&[d]);
                let mut gbeta = Tensor::zeros(&[d]);
                let mut dx = g.clone();
                for (ri, (grow, xrow)) in dx.data_mut().chunks_mut(d).zip(xhat.data().chunks(d)).enumerate() {
                    for j in 0..d {
                        ggamma.data_mut()[j] += grow[j] * xrow[j];
                        gbeta.data_mut()[j] += grow[j];
                        grow[j] *= gm.data()[j];
                    }
                    let m1 = grow.iter().copied().sum::<T>() / cnt;
                    let m2 = grow.iter().zip(xrow).map(|(&a, &b)| a * b).sum::<T>() / cnt;
                    let is = inv_std[ri];
                    for (gv, &xv) in grow.iter_mut().zip(xrow) {
                        *gv = is * (*gv - m1 - xv * m2);
                    }
                }
                vec![Some(dx), Some(ggamma), Some(gbeta)]
            })
        })
    }

    /// `[N, C, H, W] -> [N, C]` spatial mean.
    pub fn global_avg_pool(self) -> Var<'g, T> {
        let x = self.value();
        let (n, c) = (x.dim(0), x.dim(1));
        let spatial = x.numel() / (n * c);
        let inv = T::one() / T::from_usize(spatial).unwrap();
        let data: Vec<T> = x.data().chunks(spatial).map(|ch| ch.iter().copied().sum::<T>() * inv).collect();
        let shape = x.shape().to_vec();
        self.graph.push_op(Tensor::from_vec(&[n, c], data), &[self], move || {
            boxed(move |g: &Tensor<T>| {
                let mut gx = Tensor::zeros(&shape);
                for (ch, &gv) in gx.data_mut().chunks_mut(spatial).zip(g.data()) {
                    ch.iter_mut().for_each(|v| *v = gv * inv);
                }
                vec![Some(gx)]
            })
        })
    }

    /// Mean cross-entropy of `self [N, K]` logits against class labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let (n, k) = (x.dim(0), x.dim(1));
        assert_eq!(labels.len(), n, "cross_entropy label count");
        let mut probs = (*x).clone();
        let mut loss = T::zero();
        for (row, &lab) in probs.data_mut().chunks_mut(k).zip(labels) {
            assert!(lab < k, "label {lab} out of range {k}");
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            loss += lse - row[lab];
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let nn = T::from_usize(n).unwrap();
        let labels = labels.to_vec();
        self.graph.push_op(Tensor::scalar(loss / nn), &[self], move || {
            boxed(move |g: &Tensor<T>| {
                let scale = g.data()[0] / nn;
                let mut gx = probs.clone();
                for (row, &lab) in gx.data_mut().chunks_mut(k).zip(&labels) {
                    row[lab] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                vec![Some(gx)]
            })
        })
    }
}

/// Concatenate along axis 0.
pub fn cat0<'g, T: Scalar>(items: &[Var<'g, T>]) -> Var<'g, T> {
    assert!(!items.is_empty(), "cat0 of nothing");
    let values: Vec<_> = items.iter().map(|v| (*v.value()).clone()).collect();
    let sizes: Vec<(Vec<usize>, usize)> = values.iter().map(|v| (v.shape().to_vec(), v.numel())).collect();
    let out = Tensor::cat0(&values);
    items[0].graph.push_op(out, items, move || {
        boxed(move |g: &Tensor<T>| {
            let mut off = 0;
            sizes
                .iter()
                .map(|(shape, n)| {
                    let part = Tensor::from_vec(shape, g.data()[off..off + n].to_vec());
                    off += n;
                    Some(part)
                })
                .collect()
        })
    })
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(x: &[usize], w: &[usize], stride: usize, pad: usize) -> Self {
        assert_eq!(x.len(), 4, "conv2d input must be [N, C, H, W]");
        assert_eq!(w.len(), 4, "conv2d weight must be [Cout, Cin, k, k]");
        assert_eq!(x[1], w[1], "conv2d channel mismatch");
        assert_eq!(w[2], w[3], "square kernels only");
        let k = w[2];
        let ho = (x[2] + 2 * pad - k) / stride + 1;
        let wo = (x[3] + 2 * pad - k) / stride + 1;
        Self {
            n: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: w[0],
            k,
            stride,
            pad,
            ho,
            wo,
        }
    }

    fn ckk(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hwo(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn sample<'a, T>(&self, data: &'a [T], s: usize) -> &'a [T] {
        let inner = self.cin * self.h * self.w;
        &data[s * inner..(s + 1) * inner]
    }

    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let hwo = self.hwo();
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * hwo..(row + 1) * hwo];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < self.h && (ix as usize) < self.w {
                                x[(c * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                T::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        let hwo = self.hwo();
        x.iter_mut().for_each(|v| *v = T::zero());
        for c in 0..self.cin {
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * hwo..(row + 1) * hwo];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                x[(c * self.h + iy as usize) * self.w + ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
