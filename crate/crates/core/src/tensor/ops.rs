//! Forward kernels shared by the tape and by gradient-free callers.
//!
//! The free functions taking [`Tensor`]s are plain evaluations with no
//! gradient bookkeeping; [`Graph`](super::Graph) wraps the same kernels.

use super::{gemm, Scalar, Tensor};
use crate::error::{Error, Result};

/// `sqrt(2/pi)` in the tanh form of GELU.
pub const GELU_C: f64 = 0.797_884_560_802_865_4;
/// Cubic coefficient in the tanh form of GELU.
pub const GELU_K: f64 = 0.044_715;
/// Layer-norm variance floor.
pub const LN_EPS: f64 = 1e-5;

pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    matmul_t(a, b, false)
}

/// `a · b` or, with `tb`, `a · bᵀ`.
pub fn matmul_t<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, tb: bool) -> Result<Tensor<S>> {
    let (m, k) = a.dims2("matmul")?;
    let (br, bc) = b.dims2("matmul")?;
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}{}", a.shape(), b.shape(), if tb { "ᵀ" } else { "" }),
        ));
    }
    let mut out = vec![S::zero(); m * n];
    gemm(false, tb, m, k, n, a.data(), b.data(), &mut out, false);
    Tensor::new(vec![m, n], out)
}

/// Softmax along `axis` with max subtraction.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    if axis >= x.rank() {
        return Err(Error::OutOfRange {
            op: "softmax",
            index: axis,
            len: x.rank(),
        });
    }
    let shape = x.shape();
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = x.clone();
    let data = out.data_mut();
    let mut buf = vec![S::zero(); n];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[idx(j)];
            }
            softmax_row(&mut buf, None);
            for (j, b) in buf.iter().enumerate() {
                data[idx(j)] = *b;
            }
        }
    }
    Ok(out)
}

/// In-place softmax of one row. Positions where `keep` is false get exactly 0.
pub(crate) fn softmax_row<S: Scalar>(row: &mut [S], keep: Option<&[bool]>) {
    let visible = |j: usize| keep.is_none_or(|k| k[j]);
    let mut max = S::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if visible(j) && v > max {
            max = v;
        }
    }
    if max == S::neg_infinity() {
        row.iter_mut().for_each(|v| *v = S::zero());
        return;
    }
    let mut sum = S::zero();
    for (j, v) in row.iter_mut().enumerate() {
        if visible(j) {
            *v = (*v - max).exp();
            sum = sum + *v;
        } else {
            *v = S::zero();
        }
    }
    let inv = S::one() / sum;
    row.iter_mut().for_each(|v| *v = *v * inv);
}

/// Normalizes each row over the last axis, then applies `gain` and `bias`
/// (each of last-axis length).
pub fn layer_norm<S: Scalar>(x: &Tensor<S>, gain: &Tensor<S>, bias: &Tensor<S>, eps: f64) -> Result<Tensor<S>> {
    let n = x.last_dim();
    if gain.numel() != n || bias.numel() != n {
        return Err(Error::shape(
            "layer_norm",
            format!("row {} vs gain {} / bias {}", n, gain.numel(), bias.numel()),
        ));
    }
    let mut out = x.clone();
    let mut rstd = vec![S::zero(); x.outer()];
    layer_norm_rows(out.data_mut(), n, S::from_f64(eps), &mut rstd);
    for row in out.data_mut().chunks_mut(n.max(1)) {
        for ((v, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *v = *v * g + b;
        }
    }
    Ok(out)
}

/// Normalizes rows in place to zero mean and unit variance; stores each row's
/// reciprocal standard deviation.
pub(crate) fn layer_norm_rows<S: Scalar>(data: &mut [S], n: usize, eps: S, rstd: &mut [S]) {
    if n == 0 {
        return;
    }
    let inv_n = S::one() / S::from_f64(n as f64);
    for (row, r) in data.chunks_mut(n).zip(rstd.iter_mut()) {
        let mean = row.iter().copied().sum::<S>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_n;
        let s = S::one() / (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) * s);
        *r = s;
    }
}

/// GELU, tanh approximation: `0.5·x·(1 + tanh(GELU_C·(x + GELU_K·x³)))`.
pub fn gelu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn gelu_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad_scalar<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let k = S::from_f64(GELU_K);
    let half = S::from_f64(0.5);
    let three = S::from_f64(3.0);
    let th = (c * (x + k * x * x * x)).tanh();
    half * (S::one() + th) + half * x * (S::one() - th * th) * c * (S::one() + three * k * x * x)
}

/// Gathers rows of `table` (`V×d`).
pub fn embedding_lookup<S: Scalar>(table: &Tensor<S>, ids: &[usize]) -> Result<Tensor<S>> {
    let (v, d) = table.dims2("embedding_lookup")?;
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::OutOfRange {
                op: "embedding_lookup",
                index: id,
                len: v,
            });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Tensor::new(vec![ids.len(), d], out)
}

/// Mean of squared differences, as a scalar tensor.
pub fn mse_loss<S: Scalar>(pred: &Tensor<S>, target: &Tensor<S>) -> Result<Tensor<S>> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    Ok(Tensor::scalar(mse_value(pred.data(), target.data())))
}

pub(crate) fn mse_value<S: Scalar>(pred: &[S], target: &[S]) -> S {
    if pred.is_empty() {
        return S::zero();
    }
    let sum: S = pred.iter().zip(target).map(|(&p, &t)| (p - t) * (p - t)).sum();
    sum / S::from_f64(pred.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows)
    }

    #[test]
    fn matmul_identity_and_hand_values() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let eye = t(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let col = t(&[&[5.0], &[6.0]]);
        assert_eq!(matmul(&a, &col).unwrap().data(), &[17.0, 39.0]);
        let z = Tensor::<f64>::zeros(vec![3, 2]);
        assert!(matmul(&z, &a).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error() {
        let a = t(&[&[1.0, 2.0]]);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&t(&[&[0.0, 0.0]]), 1).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[&[1000.0, 1000.0]]), 1).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax(&t(&[&[0.0, 3f64.ln()]]), 1).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-12 && (s.data()[1] - 0.75).abs() < 1e-12);
        // axis 0 of a 2x2 normalizes columns
        let s = softmax(&t(&[&[0.0, 1.0], &[0.0, 1.0]]), 0).unwrap();
        assert_eq!(s.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(softmax(&t(&[&[0.0]]), 2).is_err());
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::full(vec![4], 1.0);
        let zero = Tensor::zeros(vec![4]);
        let c = layer_norm(&Tensor::full(vec![1, 4], 7.0), &one, &zero, LN_EPS).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));

        let one2 = Tensor::full(vec![2], 1.0);
        let zero2 = Tensor::zeros(vec![2]);
        let y = layer_norm(&t(&[&[1.0, -1.0]]), &one2, &zero2, LN_EPS).unwrap();
        let expect = 1.0 / (1.0 + LN_EPS).sqrt();
        assert!((y.data()[0] - expect).abs() < 1e-12);
        assert!((y.data()[1] + expect).abs() < 1e-12);

        let b = Tensor::full(vec![2], 0.3);
        let y = layer_norm(&t(&[&[5.0, -2.0]]), &zero2, &b, LN_EPS).unwrap();
        assert_eq!(y.data(), &[0.3, 0.3]);
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0f64).abs() < 1e-6);
    }

    #[test]
    fn embedding_cases() {
        let table = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(embedding_lookup(&table, &[0]).unwrap().data(), &[1.0, 2.0]);
        let empty = embedding_lookup(&table, &[]).unwrap();
        assert_eq!(empty.shape(), &[0, 2]);
        assert!(matches!(embedding_lookup(&table, &[2]), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn mse_cases() {
        let a = t(&[&[1.0, 3.0]]);
        assert_eq!(mse_loss(&a, &a).unwrap().item(), 0.0);
        let z = Tensor::zeros(vec![1, 2]);
        assert_eq!(mse_loss(&a, &z).unwrap().item(), 5.0);
        let two = Tensor::new(vec![1], vec![2.0]).unwrap();
        let zero = Tensor::new(vec![1], vec![0.0]).unwrap();
        assert_eq!(mse_loss(&two, &zero).unwrap().item(), 4.0);
        assert!(mse_loss(&a, &two).is_err());
    }
}
