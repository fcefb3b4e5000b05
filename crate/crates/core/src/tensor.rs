//! Dense row-major `f64` tensors and the forward kernels shared by the
//! autodiff graph and the standalone helpers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Contract(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn last_dim(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn get(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                debug_assert!(i < d);
                acc * d + i
            })
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape.to_vec(), self.data.clone())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn check_finite(self, op: &'static str) -> Result<Tensor> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(self)
        } else {
            Err(Error::NonFinite { op })
        }
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_zip(self, other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_zip(self, other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        broadcast_zip(self, other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&self) -> Result<Tensor> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::dim("transpose_last", &self.shape, &[]));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        permute(self, &perm)
    }
}

/// Numpy-style broadcast of two shapes (aligned on trailing axes).
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside the broadcast shape `out`; broadcast axes
/// get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let pad = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[pad + i] = if shape[i] == 1 && out[pad + i] != 1 {
            0
        } else {
            acc
        };
        acc *= shape[i];
    }
    strides
}

/// Walks every index of `shape` in row-major order, yielding the matching
/// linear offsets into two strided operands.
pub(crate) fn for_each_pair(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = shape.iter().product();
    if total == 0 {
        return;
    }
    let nd = shape.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for lin in 0..total {
        f(lin, oa, ob);
        let mut ax = nd;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            oa -= sa[ax] * shape[ax];
            ob -= sb[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
}

pub(crate) fn broadcast_zip(
    a: &Tensor,
    b: &Tensor,
    op: &'static str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor {
            shape: a.shape.clone(),
            data,
        }
        .check_finite(op);
    }
    let out = broadcast_shapes(&a.shape, &b.shape).ok_or_else(|| Error::dim(op, &a.shape, &b.shape))?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; out.iter().product()];
    for_each_pair(&out, &sa, &sb, |lin, ia, ib| {
        data[lin] = f(a.data[ia], b.data[ib]);
    });
    Tensor { shape: out, data }.check_finite(op)
}

/// Sums `grad` (shaped like a broadcast result) back down to `shape`.
pub(crate) fn reduce_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let strides = broadcast_strides(shape, &grad.shape);
    let zero = vec![0; grad.shape.len()];
    let mut data = vec![0.0; shape.iter().product()];
    for_each_pair(&grad.shape, &strides, &zero, |lin, o, _| {
        data[o] += grad.data[lin];
    });
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
    // SAFETY: slice lengths match the row-major extents and strides given.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0, a.as_ptr(), k as isize, 1, b.as_ptr(), n as isize, 1, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m,k] += g[m,n] · b[k,n]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(g.len() == m * n && b.len() == k * n && c.len() == m * k);
    // SAFETY: as above; `b` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0, g.as_ptr(), n as isize, 1, b.as_ptr(), 1, n as isize, 1.0, c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `c[k,n] += a[m,k]ᵀ · g[m,n]`
fn gemm_tn(a: &[f64], g: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    debug_assert!(a.len() == m * k && g.len() == m * n && c.len() == k * n);
    // SAFETY: as above; `a` is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0, a.as_ptr(), 1, k as isize, g.as_ptr(), n as isize, 1, 1.0, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

struct MatmulPlan {
    m: usize,
    k: usize,
    n: usize,
    batch: Vec<usize>,
    sa: Vec<usize>,
    sb: Vec<usize>,
    out_shape: Vec<usize>,
}

fn matmul_plan(a: &Tensor, b: &Tensor) -> Result<MatmulPlan> {
    let err = || Error::dim("matmul", &a.shape, &b.shape);
    if a.ndim() < 2 || b.ndim() < 2 {
        return Err(err());
    }
    let (m, k) = (a.shape[a.ndim() - 2], a.shape[a.ndim() - 1]);
    let (k2, n) = (b.shape[b.ndim() - 2], b.shape[b.ndim() - 1]);
    if k != k2 {
        return Err(err());
    }
    let ba = &a.shape[..a.ndim() - 2];
    let bb = &b.shape[..b.ndim() - 2];
    let batch = broadcast_shapes(ba, bb).ok_or_else(err)?;
    // Strides in units of whole matrices.
    let sa = broadcast_strides(ba, &batch);
    let sb = broadcast_strides(bb, &batch);
    let mut out_shape = batch.clone();
    out_shape.extend([m, n]);
    Ok(MatmulPlan {
        m,
        k,
        n,
        batch,
        sa,
        sb,
        out_shape,
    })
}

/// Batched matrix product `a[..., m, k] · b[..., k, n]` with broadcast batch axes.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let p = matmul_plan(a, b)?;
    let (m, k, n) = (p.m, p.k, p.n);
    let mut out = vec![0.0; p.out_shape.iter().product()];
    let batch_shape = if p.batch.is_empty() { vec![1] } else { p.batch.clone() };
    let (sa, sb) = if p.batch.is_empty() {
        (vec![0], vec![0])
    } else {
        (p.sa.clone(), p.sb.clone())
    };
    for_each_pair(&batch_shape, &sa, &sb, |bi, ia, ib| {
        gemm_nn(
            &a.data[ia * m * k..(ia + 1) * m * k],
            &b.data[ib * k * n..(ib + 1) * k * n],
            &mut out[bi * m * n..(bi + 1) * m * n],
            m,
            k,
            n,
        );
    });
    Tensor {
        shape: p.out_shape,
        data: out,
    }
    .check_finite("matmul")
}

/// Gradients of `matmul(a, b)` given the upstream gradient `g`.
pub(crate) fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    need_a: bool,
    need_b: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let p = matmul_plan(a, b).expect("validated in forward");
    let (m, k, n) = (p.m, p.k, p.n);
    let batch_shape = if p.batch.is_empty() { vec![1] } else { p.batch.clone() };
    let (sa, sb) = if p.batch.is_empty() {
        (vec![0], vec![0])
    } else {
        (p.sa.clone(), p.sb.clone())
    };
    let mut ga = need_a.then(|| vec![0.0; a.len()]);
    let mut gb = need_b.then(|| vec![0.0; b.len()]);
    for_each_pair(&batch_shape, &sa, &sb, |bi, ia, ib| {
        let gs = &g.data[bi * m * n..(bi + 1) * m * n];
        if let Some(ga) = ga.as_mut() {
            gemm_nt(
                gs,
                &b.data[ib * k * n..(ib + 1) * k * n],
                &mut ga[ia * m * k..(ia + 1) * m * k],
                m,
                k,
                n,
            );
        }
        if let Some(gb) = gb.as_mut() {
            gemm_tn(
                &a.data[ia * m * k..(ia + 1) * m * k],
                gs,
                &mut gb[ib * k * n..(ib + 1) * k * n],
                m,
                k,
                n,
            );
        }
    });
    (
        ga.map(|d| Tensor {
            shape: a.shape.clone(),
            data: d,
        }),
        gb.map(|d| Tensor {
            shape: b.shape.clone(),
            data: d,
        }),
    )
}

/// Max-shifted softmax over the last axis.
pub fn softmax_last_axis(x: &Tensor) -> Result<Tensor> {
    let d = x.last_dim();
    let mut out = x.data.clone();
    for row in out.chunks_mut(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
    .check_finite("softmax")
}

/// Per-slice mean and `sqrt(population variance + eps)` over the last axis.
/// Both outputs keep the leading shape with a trailing extent of 1.
pub fn mean_std_last_axis(x: &Tensor, eps: f64) -> Result<(Tensor, Tensor)> {
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("eps must be positive, got {eps}")));
    }
    let d = x.last_dim();
    let rows = x.len() / d;
    let mut mean = Vec::with_capacity(rows);
    let mut std = Vec::with_capacity(rows);
    for row in x.data.chunks(d) {
        let mu = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
        mean.push(mu);
        std.push((var + eps).sqrt());
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = 1;
    Ok((
        Tensor {
            shape: shape.clone(),
            data: mean,
        },
        Tensor { shape, data: std },
    ))
}

/// Standard layer normalization without an affine transform.
pub fn normalize_last_axis(x: &Tensor, eps: f64) -> Result<Tensor> {
    let (mean, std) = mean_std_last_axis(x, eps)?;
    let d = x.last_dim();
    let mut out = x.data.clone();
    for (r, row) in out.chunks_mut(d).enumerate() {
        for v in row.iter_mut() {
            *v = (*v - mean.data[r]) / std.data[r];
        }
    }
    Tensor {
        shape: x.shape.clone(),
        data: out,
    }
    .check_finite("normalize")
}

pub fn concat_last_axis(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
    let lead = &first.shape[..first.ndim() - 1];
    for p in parts {
        if &p.shape[..p.ndim() - 1] != lead {
            return Err(Error::dim("concat", &first.shape, &p.shape));
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| p.last_dim()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for (p, &w) in parts.iter().zip(&widths) {
            data.extend_from_slice(&p.data[r * w..(r + 1) * w]);
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Ok(Tensor { shape, data })
}

/// Columns `[start, start + len)` of the last axis.
pub fn slice_last_axis(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let d = x.last_dim();
    if len == 0 || start + len > d {
        return Err(Error::dim("slice", &x.shape, &[start, len]));
    }
    let mut data = Vec::with_capacity(x.len() / d * len);
    for row in x.data.chunks(d) {
        data.extend_from_slice(&row[start..start + len]);
    }
    let mut shape = x.shape.clone();
    *shape.last_mut().unwrap() = len;
    Ok(Tensor { shape, data })
}

pub fn permute(x: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let nd = x.ndim();
    let mut seen = vec![false; nd];
    if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::dim("permute", &x.shape, perm));
    }
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; nd];
    let mut data = vec![0.0; x.len()];
    for_each_pair(&out_shape, &strides, &zero, |lin, src, _| {
        data[lin] = x.data[src];
    });
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let a = t(&[2, 2], &[1., 2., 3., 4.]);
        assert_eq!(Tensor::eye(2).matmul(&a).unwrap(), a);
        let r = t(&[1, 2], &[1., 2.]).matmul(&t(&[2, 1], &[3., 4.])).unwrap();
        assert_eq!(r.data(), &[11.0]);
        let z = a.matmul(&Tensor::zeros(&[2, 3])).unwrap();
        assert_eq!(z, Tensor::zeros(&[2, 3]));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let e = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        match e {
            Error::Dimension { lhs, rhs, .. } => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let l = t(&[2, 2], &[0., 1., 1., 0.]);
        let x = Tensor::from_fn(&[3, 2, 2], |i| i as f64);
        let y = l.matmul(&x).unwrap();
        assert_eq!(y.shape(), &[3, 2, 2]);
        // row swap per batch
        assert_eq!(&y.data()[..4], &[2., 3., 0., 1.]);
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_last_axis(&t(&[2], &[0., 0.])).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_last_axis(&t(&[2], &[0., 3f64.ln()])).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        let a = softmax_last_axis(&t(&[2], &[1.5, 2.25])).unwrap();
        let b = softmax_last_axis(&t(&[2], &[101.5, 102.25])).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn mean_std_examples() {
        let (m, s) = mean_std_last_axis(&t(&[4], &[1., 2., 3., 4.]), 1e-300).unwrap();
        assert_eq!(m.data(), &[2.5]);
        assert!((s.data()[0] - 1.25f64.sqrt()).abs() < 1e-15);
        let (_, s) = mean_std_last_axis(&t(&[3], &[7., 7., 7.]), 1e-5).unwrap();
        assert!((s.data()[0] - 1e-5f64.sqrt()).abs() < 1e-18);
        let (m, s) = mean_std_last_axis(&t(&[1], &[-3.0]), 1e-5).unwrap();
        assert_eq!(m.data(), &[-3.0]);
        assert!((s.data()[0] - 1e-5f64.sqrt()).abs() < 1e-18);
        assert!(mean_std_last_axis(&t(&[1], &[1.0]), 0.0).is_err());
    }

    #[test]
    fn concat_and_slice_round_trip() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 5], |i| 100.0 + i as f64);
        assert_eq!(concat_last_axis(&[&a]).unwrap(), a);
        let c = concat_last_axis(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 8]);
        assert_eq!(slice_last_axis(&c, 0, 3).unwrap(), a);
        assert_eq!(slice_last_axis(&c, 3, 5).unwrap(), b);
        assert!(concat_last_axis(&[&a, &Tensor::zeros(&[3, 1])]).is_err());
    }

    #[test]
    fn broadcasting_and_reduction() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let alpha = Tensor::from_fn(&[2, 3, 1], |i| i as f64);
        let y = x.mul(&alpha).unwrap();
        assert_eq!(y.get(&[1, 2, 3]), x.get(&[1, 2, 3]) * 5.0);
        let r = reduce_to_shape(&Tensor::filled(&[2, 3, 4], 1.0), &[2, 3, 1]);
        assert!(r.data().iter().all(|&v| v == 4.0));
        let r = reduce_to_shape(&Tensor::filled(&[2, 3, 4], 1.0), &[4]);
        assert!(r.data().iter().all(|&v| v == 6.0));
        assert!(x.add(&Tensor::zeros(&[3, 3])).is_err());
    }

    #[test]
    fn permute_round_trip() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = permute(&x, &[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.get(&[3, 1, 2]), x.get(&[1, 2, 3]));
        let back = permute(&p, &inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn non_finite_is_surfaced() {
        let x = t(&[1], &[f64::MAX]);
        assert!(matches!(x.add(&x), Err(Error::NonFinite { .. })));
    }
}
