//! Elementwise, reduction and shape operations on [`Var`].

use super::tensor::gemm;
use super::{Tensor, Var};

fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
            let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
            assert!(
                da == db || da == 1 || db == 1,
                "shapes {a:?} and {b:?} do not broadcast"
            );
            da.max(db)
        })
        .collect()
}

/// For every flat output index, the flat index into an input of `in_shape`.
fn broadcast_map(out_shape: &[usize], in_shape: &[usize]) -> Vec<usize> {
    let n_out: usize = out_shape.iter().product();
    let n_in: usize = in_shape.iter().product();
    if in_shape == out_shape {
        return (0..n_out).collect();
    }
    if n_in == 1 {
        return vec![0; n_out];
    }
    let nd = out_shape.len();
    let pad = nd - in_shape.len();
    let mut in_strides = vec![0usize; nd];
    let mut stride = 1;
    for i in (0..nd).rev() {
        let d = if i >= pad { in_shape[i - pad] } else { 1 };
        in_strides[i] = if d == 1 { 0 } else { stride };
        stride *= d;
    }
    let mut map = Vec::with_capacity(n_out);
    let mut idx = vec![0usize; nd];
    for _ in 0..n_out {
        map.push(idx.iter().zip(&in_strides).map(|(i, s)| i * s).sum());
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    map
}

fn reduce_to(grad: &Tensor, map: &[usize], in_shape: &[usize]) -> Tensor {
    if grad.shape() == in_shape {
        return grad.clone();
    }
    let mut out = Tensor::zeros(in_shape);
    let o = out.data_mut();
    for (g, &i) in grad.data().iter().zip(map) {
        o[i] += g;
    }
    out
}

impl<'t> Var<'t> {
    fn binary(
        &self,
        other: &Var<'t>,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64, f64) -> f64,
        db: fn(f64, f64, f64) -> f64,
    ) -> Var<'t> {
        let (a, b) = (self.value(), other.value());
        let out_shape = broadcast_shape(a.shape(), b.shape());
        let ma = broadcast_map(&out_shape, a.shape());
        let mb = broadcast_map(&out_shape, b.shape());
        let (ad, bd) = (a.data(), b.data());
        let data: Vec<f64> = ma.iter().zip(&mb).map(|(&i, &j)| f(ad[i], bd[j])).collect();
        let value = Tensor::new(&out_shape, data);
        self.op(
            value,
            &[*self, *other],
            Box::new(move |g, p, out| {
                let (a, b) = (p[0].data(), p[1].data());
                let o = out.data();
                let ga: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| gk * da(a[ma[k]], b[mb[k]], o[k]))
                    .collect();
                let gb: Vec<f64> = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, &gk)| gk * db(a[ma[k]], b[mb[k]], o[k]))
                    .collect();
                let ga = Tensor::new(out.shape(), ga);
                let gb = Tensor::new(out.shape(), gb);
                vec![
                    Some(reduce_to(&ga, &ma, p[0].shape())),
                    Some(reduce_to(&gb, &mb, p[1].shape())),
                ]
            }),
        )
    }

    /// Broadcasting addition.
    pub fn add(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Var<'t>) -> Var<'t> {
        self.binary(other, |a, b| a / b, |_, b, _| 1.0 / b, |a, b, _| -a / (b * b))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'t> {
        let value = self.value().map(f);
        self.op(
            value,
            &[*self],
            Box::new(move |g, p, out| {
                let x = p[0].data();
                let o = out.data();
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(k, gk)| gk * df(x[k], o[k]))
                    .collect();
                vec![Some(Tensor::new(out.shape(), data))]
            }),
        )
    }

    pub fn add_scalar(&self, s: f64) -> Var<'t> {
        self.unary(move |x| x + s, |_, _| 1.0)
    }

    pub fn mul_scalar(&self, s: f64) -> Var<'t> {
        let value = self.value().scale(s);
        self.op(
            value,
            &[*self],
            Box::new(move |g, _, _| vec![Some(g.scale(s))]),
        )
    }

    pub fn neg(&self) -> Var<'t> {
        self.mul_scalar(-1.0)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| if y > 0.0 { 0.5 / y } else { 0.0 })
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Var<'t> {
        let v = self.value();
        let shape = v.shape().to_vec();
        self.op(
            Tensor::scalar(v.sum()),
            &[*self],
            Box::new(move |g, _, _| vec![Some(Tensor::full(&shape, g.item()))]),
        )
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().mul_scalar(1.0 / n)
    }

    /// Sum over the trailing axis; `[.., c] -> [..]` (or `[1]` for 1-d input).
    pub fn sum_last(&self) -> Var<'t> {
        let v = self.value();
        let c = v.cols();
        let rows = v.rows();
        let data: Vec<f64> = (0..rows).map(|r| v.row(r).iter().sum()).collect();
        let shape = if v.shape().len() > 1 {
            v.shape()[..v.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        let in_shape = v.shape().to_vec();
        self.op(
            Tensor::new(&shape, data),
            &[*self],
            Box::new(move |g, _, _| {
                let mut out = Vec::with_capacity(rows * c);
                for &gr in g.data() {
                    out.extend(std::iter::repeat_n(gr, c));
                }
                vec![Some(Tensor::new(&in_shape, out))]
            }),
        )
    }

    /// Euclidean norm over the trailing axis, with zero gradient at the origin.
    pub fn norm_last(&self) -> Var<'t> {
        let v = self.value();
        let rows = v.rows();
        let data: Vec<f64> = (0..rows)
            .map(|r| v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        let shape = if v.shape().len() > 1 {
            v.shape()[..v.shape().len() - 1].to_vec()
        } else {
            vec![1]
        };
        self.op(
            Tensor::new(&shape, data),
            &[*self],
            Box::new(move |g, p, out| {
                let x = p[0];
                let c = x.cols();
                let mut gx = Tensor::zeros(x.shape());
                let gd = gx.data_mut();
                for r in 0..x.rows() {
                    let n = out.data()[r];
                    if n > 0.0 {
                        let s = g.data()[r] / n;
                        for j in 0..c {
                            gd[r * c + j] = s * x.data()[r * c + j];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var<'t> {
        let v = self.value();
        let in_shape = v.shape().to_vec();
        self.op(
            v.as_ref().clone().reshape(shape),
            &[*self],
            Box::new(move |g, _, _| vec![Some(g.clone().reshape(&in_shape))]),
        )
    }

    /// `[n, k] x [k, m] -> [n, m]`.
    pub fn matmul(&self, rhs: &Var<'t>) -> Var<'t> {
        let (a, b) = (self.value(), rhs.value());
        assert_eq!(a.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(b.shape().len(), 2, "matmul rhs must be 2-d");
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        assert_eq!(k, b.shape()[0], "matmul inner dims {:?} {:?}", a.shape(), b.shape());
        let mut out = vec![0.0; n * m];
        gemm(n, k, m, a.data(), false, b.data(), false, &mut out, 0.0);
        let (a_needs, b_needs) = (self.requires_grad(), rhs.requires_grad());
        self.op(
            Tensor::new(&[n, m], out),
            &[*self, *rhs],
            Box::new(move |g, p, _| {
                let ga = a_needs.then(|| {
                    let mut ga = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), false, p[1].data(), true, &mut ga, 0.0);
                    Tensor::new(&[n, k], ga)
                });
                let gb = b_needs.then(|| {
                    let mut gb = vec![0.0; k * m];
                    gemm(k, n, m, p[0].data(), true, g.data(), false, &mut gb, 0.0);
                    Tensor::new(&[k, m], gb)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Transpose of a 2-d tensor.
    pub fn transpose(&self) -> Var<'t> {
        let v = self.value();
        assert_eq!(v.shape().len(), 2, "transpose needs a 2-d tensor");
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let t = |d: &[f64], r: usize, c: usize| -> Vec<f64> {
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = d[i * c + j];
                }
            }
            out
        };
        self.op(
            Tensor::new(&[c, r], t(v.data(), r, c)),
            &[*self],
            Box::new(move |g, _, _| vec![Some(Tensor::new(&[r, c], t(g.data(), c, r)))]),
        )
    }

    /// Affine map `x w + b` with `x: [n, k]`, `w: [k, m]`, `b: [m]`.
    pub fn linear(&self, w: &Var<'t>, b: &Var<'t>) -> Var<'t> {
        let (x, wv, bv) = (self.value(), w.value(), b.value());
        let (n, k) = (x.rows(), x.cols());
        let m = wv.shape()[1];
        assert_eq!(wv.shape(), &[k, m], "linear weight shape");
        assert_eq!(bv.len(), m, "linear bias shape");
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bv.data());
        }
        gemm(n, k, m, x.data(), false, wv.data(), false, &mut out, 1.0);
        let x_shape = x.shape().to_vec();
        let (x_needs, w_needs, b_needs) = (self.requires_grad(), w.requires_grad(), b.requires_grad());
        let mut out_shape = x_shape.clone();
        *out_shape.last_mut().unwrap() = m;
        self.op(
            Tensor::new(&out_shape, out),
            &[*self, *w, *b],
            Box::new(move |g, p, _| {
                let gx = x_needs.then(|| {
                    let mut gx = vec![0.0; n * k];
                    gemm(n, m, k, g.data(), false, p[1].data(), true, &mut gx, 0.0);
                    Tensor::new(&x_shape, gx)
                });
                let gw = w_needs.then(|| {
                    let mut gw = vec![0.0; k * m];
                    gemm(k, n, m, p[0].data(), true, g.data(), false, &mut gw, 0.0);
                    Tensor::new(&[k, m], gw)
                });
                let gb = b_needs.then(|| {
                    let mut gb = vec![0.0; m];
                    for r in 0..n {
                        for (acc, v) in gb.iter_mut().zip(&g.data()[r * m..(r + 1) * m]) {
                            *acc += v;
                        }
                    }
                    Tensor::new(&[m], gb)
                });
                vec![gx, gw, gb]
            }),
        )
    }

    /// Columns `start..end` of the trailing axis.
    pub fn slice_last(&self, start: usize, end: usize) -> Var<'t> {
        let v = self.value();
        let c = v.cols();
        assert!(start < end && end <= c);
        let w = end - start;
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * w);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..end]);
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = w;
        let in_shape = v.shape().to_vec();
        self.op(
            Tensor::new(&shape, data),
            &[*self],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                let gd = gx.data_mut();
                for r in 0..rows {
                    gd[r * c + start..r * c + end].copy_from_slice(&g.data()[r * w..(r + 1) * w]);
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Concatenates along the trailing axis; leading dims must agree.
    pub fn concat_last(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let rows = values[0].rows();
        let widths: Vec<usize> = values.iter().map(|v| v.cols()).collect();
        for v in &values {
            assert_eq!(v.rows(), rows, "concat_last row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                data.extend_from_slice(v.row(r));
            }
        }
        let mut shape = values[0].shape().to_vec();
        *shape.last_mut().unwrap() = total;
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        parts[0].op(
            Tensor::new(&shape, data),
            parts,
            Box::new(move |g, _, _| {
                let mut outs: Vec<Vec<f64>> =
                    widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let row = &g.data()[r * total..(r + 1) * total];
                    let mut off = 0;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&row[off..off + w]);
                        off += w;
                    }
                }
                outs.into_iter()
                    .zip(&shapes)
                    .map(|(o, s)| Some(Tensor::new(s, o)))
                    .collect()
            }),
        )
    }

    /// Concatenates along the leading axis.
    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = values.iter().map(|v| v.as_ref()).collect();
        let out = Tensor::stack_rows(&refs);
        let sizes: Vec<usize> = values.iter().map(|v| v.len()).collect();
        let shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        parts[0].op(
            out,
            parts,
            Box::new(move |g, _, _| {
                let mut off = 0;
                sizes
                    .iter()
                    .zip(&shapes)
                    .map(|(&n, s)| {
                        let t = Tensor::new(s, g.data()[off..off + n].to_vec());
                        off += n;
                        Some(t)
                    })
                    .collect()
            }),
        )
    }

    /// Picks entries of the leading axis (repeats allowed).
    pub fn select_rows(&self, idx: &[usize]) -> Var<'t> {
        let v = self.value();
        let out = v.select_rows(idx);
        let idx = idx.to_vec();
        let in_shape = v.shape().to_vec();
        let inner: usize = in_shape[1..].iter().product();
        self.op(
            out,
            &[*self],
            Box::new(move |g, _, _| {
                let mut gx = Tensor::zeros(&in_shape);
                let gd = gx.data_mut();
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..inner {
                        gd[i * inner + j] += g.data()[k * inner + j];
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// `[r, c] -> [r * k, c]`, each row repeated `k` times consecutively.
    pub fn repeat_rows(&self, k: usize) -> Var<'t> {
        let v = self.value();
        let (rows, c) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(rows * k * c);
        for r in 0..rows {
            for _ in 0..k {
                data.extend_from_slice(v.row(r));
            }
        }
        self.op(
            Tensor::new(&[rows * k, c], data),
            &[*self],
            Box::new(move |g, p, _| {
                let mut gx = Tensor::zeros(p[0].shape());
                let gd = gx.data_mut();
                for r in 0..rows {
                    for i in 0..k {
                        let src = &g.data()[(r * k + i) * c..(r * k + i + 1) * c];
                        for (a, b) in gd[r * c..(r + 1) * c].iter_mut().zip(src) {
                            *a += b;
                        }
                    }
                }
                vec![Some(gx)]
            }),
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}
