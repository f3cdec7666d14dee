//! Pure kernels shared by the graph's forward pass and the plain API.

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;

/// Order-independent sum: values are sorted before accumulation so any
/// permutation of the input gives a bitwise-identical result.
pub(crate) fn sorted_sum<T: Scalar>(values: &mut [T]) -> T {
    values.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite values"));
    values.iter().fold(T::zero(), |acc, &v| acc + v)
}

/// Row softmax with max subtraction, written into `out`.
pub(crate) fn softmax_row<T: Scalar>(x: &[T], out: &mut [T], scratch: &mut Vec<T>) {
    let max = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - max).exp();
    }
    scratch.clear();
    scratch.extend_from_slice(out);
    let sum = sorted_sum(scratch);
    for o in out.iter_mut() {
        *o = *o / sum;
    }
}

/// `C = op(A) · op(B)` for row-major 2-D operands.
///
/// Every output element accumulates over the inner dimension in the same
/// order regardless of its position, so permuting rows of `A` permutes rows
/// of `C` bitwise.
pub(crate) fn gemm<T: Scalar>(
    a: &[T],
    a_shape: (usize, usize),
    ta: bool,
    b: &[T],
    b_shape: (usize, usize),
    tb: bool,
) -> (Vec<T>, usize, usize) {
    let (m, k) = if ta { (a_shape.1, a_shape.0) } else { a_shape };
    let (k2, n) = if tb { (b_shape.1, b_shape.0) } else { b_shape };
    debug_assert_eq!(k, k2);
    let bt;
    let b = if tb {
        bt = transpose(b, b_shape.0, b_shape.1);
        &bt[..]
    } else {
        b
    };
    let mut c = vec![T::zero(); m * n];
    if ta {
        // A is stored k×m.
        for p in 0..k {
            let arow = &a[p * m..(p + 1) * m];
            let brow = &b[p * n..(p + 1) * n];
            for (i, &av) in arow.iter().enumerate() {
                let crow = &mut c[i * n..(i + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    } else {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, &bv) in crow.iter_mut().zip(brow) {
                    *cv += av * bv;
                }
            }
        }
    }
    (c, m, n)
}

pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn as_matrix<T: Scalar>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(Error::shape(op, format!("expected a matrix, got {s:?}"))),
    }
}

/// Matrix product with optional transposition of either operand.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, ta: bool, tb: bool) -> Result<Tensor<T>> {
    let sa = as_matrix(a, "matmul")?;
    let sb = as_matrix(b, "matmul")?;
    let ka = if ta { sa.0 } else { sa.1 };
    let kb = if tb { sb.1 } else { sb.0 };
    if ka != kb {
        return Err(Error::shape(
            "matmul",
            format!("{:?}{} x {:?}{}", a.shape(), if ta { "ᵀ" } else { "" }, b.shape(), if tb { "ᵀ" } else { "" }),
        ));
    }
    let (c, m, n) = gemm(a.data(), sa, ta, b.data(), sb, tb);
    Tensor::new(vec![m, n], c)
}

/// Softmax along `axis`.
pub fn softmax<T: Scalar>(v: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let shape = v.shape();
    if axis >= shape.len() {
        return Err(Error::contract(format!(
            "softmax axis {axis} out of range for shape {shape:?}"
        )));
    }
    if !v.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let extent = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut out = v.clone();
    let mut line = vec![T::zero(); extent];
    let mut res = vec![T::zero(); extent];
    let mut scratch = Vec::with_capacity(extent);
    for o in 0..outer {
        for i in 0..inner {
            let base = o * extent * inner + i;
            for (e, l) in line.iter_mut().enumerate() {
                *l = v.data()[base + e * inner];
            }
            softmax_row(&line, &mut res, &mut scratch);
            for (e, r) in res.iter().enumerate() {
                out.data_mut()[base + e * inner] = *r;
            }
        }
    }
    Ok(out)
}

/// Normalizes each row to zero mean / unit population variance, writing the
/// normalized values and per-row inverse standard deviations.
pub(crate) fn normalize_rows<T: Scalar>(
    x: &[T],
    cols: usize,
    eps: T,
    xhat: &mut [T],
    inv_std: &mut [T],
) {
    let n = T::of(cols as f64);
    for (r, row) in x.chunks_exact(cols).enumerate() {
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) / n;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[r] = is;
        for (h, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(row) {
            *h = (v - mean) * is;
        }
    }
}

/// Layer normalization over the last axis followed by `gain ⊙ n + bias`.
pub fn layer_norm<T: Scalar>(
    v: &Tensor<T>,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    let cols = v.cols();
    if gain.len() != cols || bias.len() != cols {
        return Err(Error::shape(
            "layer_norm",
            format!(
                "input last axis {cols}, gain {:?}, bias {:?}",
                gain.shape(),
                bias.shape()
            ),
        ));
    }
    let mut xhat = vec![T::zero(); v.len()];
    let mut inv = vec![T::zero(); v.rows()];
    normalize_rows(v.data(), cols, eps, &mut xhat, &mut inv);
    for row in xhat.chunks_exact_mut(cols) {
        for ((h, &g), &b) in row.iter_mut().zip(gain.data()).zip(bias.data()) {
            *h = g * *h + b;
        }
    }
    Tensor::new(v.shape().to_vec(), xhat)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let t = Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap();
        assert_eq!(softmax(&t, 0).unwrap().data(), &[0.5, 0.5]);

        let t = Tensor::<f64>::from_f64(&[3], &[1.0, 2.0, 3.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        for (got, want) in s.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((got - want).abs() < 1e-4);
        }

        let t = Tensor::<f32>::from_f64(&[4], &[0.3, -1.0, 20.3, 0.1]).unwrap();
        assert!(softmax(&t, 0).unwrap().data()[2] >= 0.999);
    }

    #[test]
    fn softmax_axis_and_errors() {
        let t = Tensor::<f64>::from_f64(&[2, 2], &[0.0, 1.0, 0.0, 3.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[1] + s.data()[3] - 1.0).abs() < 1e-12);
        assert!(matches!(softmax(&t, 2), Err(Error::Contract(_))));
    }

    #[test]
    fn softmax_is_permutation_invariant_bitwise() {
        let a = Tensor::<f32>::from_f64(&[4], &[0.1, 2.5, -3.0, 1.7]).unwrap();
        let b = Tensor::<f32>::from_f64(&[4], &[1.7, -3.0, 0.1, 2.5]).unwrap();
        let sa = softmax(&a, 0).unwrap();
        let sb = softmax(&b, 0).unwrap();
        assert_eq!(sa.data()[0].to_bits(), sb.data()[2].to_bits());
        assert_eq!(sa.data()[1].to_bits(), sb.data()[3].to_bits());
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::<f64>::full(&[3], 1.0);
        let zeros = Tensor::<f64>::zeros(&[3]);
        let v = Tensor::from_f64(&[3], &[5.0, 5.0, 5.0]).unwrap();
        assert_eq!(layer_norm(&v, &ones, &zeros, 1e-5).unwrap().data(), &[0.0; 3]);

        let v = Tensor::<f64>::from_f64(&[2], &[1.0, 3.0]).unwrap();
        let out = layer_norm(&v, &Tensor::full(&[2], 1.0), &Tensor::zeros(&[2]), 1e-12).unwrap();
        assert!((out.data()[0] + 1.0).abs() < 1e-9 && (out.data()[1] - 1.0).abs() < 1e-9);

        let g = Tensor::from_f64(&[2], &[2.0, -0.5]).unwrap();
        let b = Tensor::from_f64(&[2], &[0.25, 1.0]).unwrap();
        let affine = layer_norm(&v, &g, &b, 1e-12).unwrap();
        assert_eq!(affine.data()[0], 2.0 * out.data()[0] + 0.25);
        assert_eq!(affine.data()[1], -0.5 * out.data()[1] + 1.0);

        let bad = Tensor::<f64>::zeros(&[3]);
        assert!(matches!(
            layer_norm(&v, &bad, &bad, 1e-5),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn matmul_transposes_agree() {
        let a = Tensor::<f64>::from_f64(&[2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_f64(&[3, 2], &[1., 0., 0., 1., 1., 1.]).unwrap();
        let ab = matmul(&a, &b, false, false).unwrap();
        assert_eq!(ab.data(), &[4., 5., 10., 11.]);
        let at = Tensor::new(vec![3, 2], transpose(a.data(), 2, 3)).unwrap();
        let bt = Tensor::new(vec![2, 3], transpose(b.data(), 3, 2)).unwrap();
        assert_eq!(matmul(&at, &b, true, false).unwrap(), ab);
        assert_eq!(matmul(&a, &bt, false, true).unwrap(), ab);
        assert!(matmul(&a, &a, false, false).is_err());
    }
}
