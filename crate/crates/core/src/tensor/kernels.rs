//! Forward kernels. All inputs are treated as 2-D (`rows × cols`).

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2};

use super::{BitMatrix, PairRotation, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn view(t: &Tensor) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((t.rows(), t.cols()), t.data()).expect("contiguous 2-D view")
}

fn from_array(a: Array2<f64>) -> Tensor {
    let (r, c) = a.dim();
    let data = if a.is_standard_layout() {
        a.into_raw_vec_and_offset().0
    } else {
        a.iter().copied().collect()
    };
    Tensor::matrix(r, c, data).expect("shape matches")
}

fn gemm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Tensor {
    let mut c = Array2::<f64>::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut c);
    from_array(c)
}

/// `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.rows() {
        return Err(Error::dim("matmul", a.shape(), b.shape()));
    }
    Ok(gemm(view(a), view(b)))
}

/// `a · bᵀ`.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.cols() != b.cols() {
        return Err(Error::dim("matmul_bt", a.shape(), b.shape()));
    }
    Ok(gemm(view(a), view(b).t()))
}

/// `aᵀ · b`.
pub fn matmul_at(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rows() != b.rows() {
        return Err(Error::dim("matmul_at", a.shape(), b.shape()));
    }
    Ok(gemm(view(a).t(), view(b)))
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = (a.rows(), a.cols());
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::matrix(c, r, out).expect("shape matches")
}

fn zip_with(op: &'static str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    map(a, |x| s * x)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect()).expect("same shape")
}

fn check_row(op: &'static str, a: &Tensor, row: &Tensor) -> Result<()> {
    if row.numel() != a.cols() {
        return Err(Error::dim(op, a.shape(), row.shape()));
    }
    Ok(())
}

/// Adds a `1 × c` row to every row of `a`.
pub fn add_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    check_row("add_row", a, row)?;
    let c = a.cols();
    let r = row.data();
    let data = a.data().iter().enumerate().map(|(i, &x)| x + r[i % c]).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Multiplies every row of `a` elementwise by a `1 × c` row.
pub fn mul_row(a: &Tensor, row: &Tensor) -> Result<Tensor> {
    check_row("mul_row", a, row)?;
    let c = a.cols();
    let r = row.data();
    let data = a.data().iter().enumerate().map(|(i, &x)| x * r[i % c]).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Column sums as a `1 × c` row.
pub fn sum_rows(a: &Tensor) -> Tensor {
    let c = a.cols();
    let mut out = vec![0.0; c];
    for row in a.data().chunks(c) {
        for (o, &x) in out.iter_mut().zip(row) {
            *o += x;
        }
    }
    Tensor::matrix(1, c, out).expect("shape matches")
}

pub fn sum(a: &Tensor) -> f64 {
    a.data().iter().sum()
}

/// `x @ w + b` with `w: in × out` and `b: 1 × out`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    add_row(&matmul(x, w)?, b)
}

/// Per-row normalization to zero mean and unit variance (no affine).
pub fn layer_norm(x: &Tensor) -> Tensor {
    layer_norm_with_stats(x).0
}

/// Returns the normalized tensor and per-row reciprocal standard deviations.
pub(crate) fn layer_norm_with_stats(x: &Tensor) -> (Tensor, Vec<f64>) {
    let c = x.cols();
    let mut out = Vec::with_capacity(x.numel());
    let mut rstd = Vec::with_capacity(x.rows());
    for row in x.data().chunks(c) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
        out.extend(row.iter().map(|v| (v - mean) * r));
        rstd.push(r);
    }
    (Tensor::new(x.shape().to_vec(), out).expect("same shape"), rstd)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(a: &Tensor) -> Tensor {
    map(a, |x| x * sigmoid(x))
}

/// Row softmax restricted to allowed entries; disallowed entries are exactly 0.
pub fn masked_softmax_rows(logits: &Tensor, allow: &BitMatrix) -> Result<Tensor> {
    let (r, c) = (logits.rows(), logits.cols());
    if allow.rows() != r || allow.cols() != c {
        return Err(Error::dim(
            "masked_softmax_rows",
            logits.shape(),
            &[allow.rows(), allow.cols()],
        ));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = logits.row(i);
        let mut max = f64::NEG_INFINITY;
        let mut any = false;
        for (j, &v) in row.iter().enumerate() {
            if allow.get(i, j) {
                any = true;
                max = max.max(v);
            }
        }
        if !any {
            return Err(Error::DegenerateRow { row: i });
        }
        let dst = &mut out[i * c..(i + 1) * c];
        let mut total = 0.0;
        for (j, &v) in row.iter().enumerate() {
            if allow.get(i, j) {
                let e = (v - max).exp();
                dst[j] = e;
                total += e;
            }
        }
        for v in dst.iter_mut() {
            *v /= total;
        }
    }
    Tensor::matrix(r, c, out)
}

/// Stacks 2-D tensors with equal widths along the row (token) axis.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let c = parts.first().map_or(0, |p| p.cols());
    let mut data = Vec::new();
    let mut rows = 0;
    for p in parts {
        if p.cols() != c {
            return Err(Error::dim("concat_rows", &[c], p.shape()));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, c, data)
}

pub fn slice_rows(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if start + len > a.rows() {
        return Err(Error::dim("slice_rows", a.shape(), &[start, len]));
    }
    let c = a.cols();
    Tensor::matrix(len, c, a.data()[start * c..(start + len) * c].to_vec())
}

/// Joins 2-D tensors with equal heights along the column axis.
pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let r = parts.first().map_or(0, |p| p.rows());
    if let Some(bad) = parts.iter().find(|p| p.rows() != r) {
        return Err(Error::dim("concat_cols", &[r], bad.shape()));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Tensor::matrix(r, total, data)
}

pub fn slice_cols(a: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    if start + len > a.cols() {
        return Err(Error::dim("slice_cols", a.shape(), &[start, len]));
    }
    let mut data = Vec::with_capacity(a.rows() * len);
    for i in 0..a.rows() {
        data.extend_from_slice(&a.row(i)[start..start + len]);
    }
    Tensor::matrix(a.rows(), len, data)
}

/// Mean of squared differences over all elements.
pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mse", a.shape(), b.shape()));
    }
    let n = a.numel().max(1) as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Rotates adjacent channel pairs of each row; `inverse` applies the transpose.
pub fn rotate_pairs(a: &Tensor, rot: &PairRotation, inverse: bool) -> Result<Tensor> {
    let c = a.cols();
    let chunk = 2 * rot.pairs;
    if a.rows() != rot.rows || chunk == 0 || !c.is_multiple_of(chunk) {
        return Err(Error::dim("rotate_pairs", a.shape(), &[rot.rows, chunk]));
    }
    let sign = if inverse { -1.0 } else { 1.0 };
    let mut out = a.data().to_vec();
    for i in 0..a.rows() {
        let cs = &rot.cos[i * rot.pairs..(i + 1) * rot.pairs];
        let sn = &rot.sin[i * rot.pairs..(i + 1) * rot.pairs];
        let row = &mut out[i * c..(i + 1) * c];
        for head in row.chunks_mut(chunk) {
            for k in 0..rot.pairs {
                let (x0, x1) = (head[2 * k], head[2 * k + 1]);
                let s = sign * sn[k];
                head[2 * k] = x0 * cs[k] - x1 * s;
                head[2 * k + 1] = x0 * s + x1 * cs[k];
            }
        }
    }
    Tensor::new(a.shape().to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(i, p) * b.get(p, j);
                }
                out[i * n + j] = s;
            }
        }
        Tensor::matrix(m, n, out).unwrap()
    }

    fn naive_masked_softmax(logits: &Tensor, allow: &BitMatrix) -> Tensor {
        let (r, c) = (logits.rows(), logits.cols());
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let z: f64 = (0..c)
                .filter(|&j| allow.get(i, j))
                .map(|j| logits.get(i, j).exp())
                .sum();
            for j in 0..c {
                if allow.get(i, j) {
                    out[i * c + j] = logits.get(i, j).exp() / z;
                }
            }
        }
        Tensor::matrix(r, c, out).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_example() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &a).unwrap(), a);
        let ones = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = matmul(&a, &ones).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
        assert_eq!(c.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = Tensor::randn(&[7, 5], 1.0, &mut rng);
        let b = Tensor::randn(&[5, 3], 1.0, &mut rng);
        let fast = matmul(&a, &b).unwrap();
        assert!(fast.max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
        let bt = transpose(&b);
        assert!(matmul_bt(&a, &bt).unwrap().max_abs_diff(&fast) < 1e-12);
        let at = transpose(&a);
        assert!(matmul_at(&at, &b).unwrap().max_abs_diff(&fast) < 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn matmul_associative_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let c = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        assert!(left.max_abs_diff(&right) < 1e-10);
        assert!(matmul(&a, &Tensor::identity(4)).unwrap().max_abs_diff(&a) < 1e-10);
    }

    #[test]
    fn masked_softmax_examples() {
        let uniform = masked_softmax_rows(&Tensor::zeros(&[1, 3]), &BitMatrix::ones(1, 3)).unwrap();
        for v in uniform.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let logits = Tensor::from_rows(&[vec![5.0, 5.0]]).unwrap();
        let allow = BitMatrix::from_fn(1, 2, |_, c| c == 0);
        assert_eq!(masked_softmax_rows(&logits, &allow).unwrap().data(), &[1.0, 0.0]);
    }

    #[test]
    fn masked_softmax_matches_exp_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::randn(&[4, 4], 2.0, &mut rng);
        let allow = BitMatrix::from_fn(4, 4, |r, c| r == c || (r * 7 + c * 3) % 3 == 0);
        let got = masked_softmax_rows(&logits, &allow).unwrap();
        let want = naive_masked_softmax(&logits, &allow);
        assert!(got.max_abs_diff(&want) < 1e-12);
        for r in 0..4 {
            let s: f64 = got.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            for c in 0..4 {
                if !allow.get(r, c) {
                    assert_eq!(got.get(r, c), 0.0);
                }
            }
        }
    }

    #[test]
    fn masked_softmax_rejects_empty_row() {
        let allow = BitMatrix::from_fn(3, 2, |r, _| r != 1);
        match masked_softmax_rows(&Tensor::zeros(&[3, 2]), &allow) {
            Err(Error::DegenerateRow { row }) => assert_eq!(row, 1),
            other => panic!("expected degenerate row, got {other:?}"),
        }
    }

    #[test]
    fn rotate_pairs_inverse_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[3, 8], 1.0, &mut rng);
        let angles: Vec<f64> = (0..6).map(|i| 0.3 * i as f64).collect();
        let rot = PairRotation {
            rows: 3,
            pairs: 2,
            cos: angles.iter().map(|a| a.cos()).collect(),
            sin: angles.iter().map(|a| a.sin()).collect(),
        };
        let y = rotate_pairs(&x, &rot, false).unwrap();
        assert!((y.norm() - x.norm()).abs() < 1e-12);
        let back = rotate_pairs(&y, &rot, true).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-14);
    }

    #[test]
    fn concat_and_slice_are_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let ab = concat_rows(&[&a, &b]).unwrap();
        assert_eq!(slice_rows(&ab, 2, 4).unwrap(), b);
        let c = Tensor::randn(&[2, 5], 1.0, &mut rng);
        let ac = concat_cols(&[&a, &c]).unwrap();
        assert_eq!(slice_cols(&ac, 3, 5).unwrap(), c);
        assert!(slice_rows(&ab, 5, 2).is_err());
    }
}
