//! Pure tensor kernels. Every function here allocates its result and leaves
//! inputs untouched; the tape in [`super::tape`] composes them and supplies
//! the matching gradient rules.

use crate::error::{Error, Result};

use super::tensor::{gemm, MatRef, Real, Tensor};

/// Additive logit used for masked attention positions. Large enough that
/// `exp` underflows to exactly zero after the row-max shift.
pub const MASKED_LOGIT: f64 = -1.0e9;

/// Plain matrix product of two 2-D tensors.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_t(a, false, b, false)
}

/// `op(a) * op(b)` where `op` optionally transposes its argument.
pub fn matmul_t<T: Real>(a: &Tensor<T>, ta: bool, b: &Tensor<T>, tb: bool) -> Result<Tensor<T>> {
    a.dims2("matmul")?;
    b.dims2("matmul")?;
    let av = if ta { a.mat().t() } else { a.mat() };
    let bv = if tb { b.mat().t() } else { b.mat() };
    if av.cols != bv.rows {
        return Err(Error::shape(
            "matmul",
            format!("{}x{} times {}x{}", av.rows, av.cols, bv.rows, bv.cols),
        ));
    }
    let mut out = Tensor::zeros(&[av.rows, bv.cols]);
    gemm(T::one(), av, bv, T::zero(), out.mat_mut());
    Ok(out)
}

/// Numerically stable softmax of one row, in place.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = total.recip();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Softmax over the last dimension.
pub fn softmax_rows<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut out = x.clone();
    let cols = out.last_dim();
    for row in out.data_mut().chunks_mut(cols) {
        softmax_in_place(row);
    }
    out.check_finite("softmax_rows")
}

/// Log-sum-exp of a row with the max shift.
pub(crate) fn log_sum_exp<T: Real>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + total.ln()
}

/// Standard normal CDF.
pub fn normal_cdf<T: Real>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    half * (T::one() + (x * T::from_f64_lossy(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_scalar<T: Real>(x: T) -> T {
    x * normal_cdf(x)
}

/// d/dx of `x * Phi(x)` = `Phi(x) + x * phi(x)`.
pub fn gelu_grad_scalar<T: Real>(x: T) -> T {
    let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
    let pdf = inv_sqrt_2pi * (-(x * x) * T::from_f64_lossy(0.5)).exp();
    normal_cdf(x) + x * pdf
}

/// Exact (erf-based) GeLU applied elementwise.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(gelu_scalar)
}

/// Per-row statistics kept by layer normalization for its backward pass.
pub(crate) struct LayerNormCache<T> {
    pub normalized: Vec<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm_cached<T: Real>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, LayerNormCache<T>)> {
    if eps <= 0.0 {
        return Err(Error::InvalidArgument(format!("layer_norm eps must be positive, got {eps}")));
    }
    let d = x.last_dim();
    if gamma.len() != d || beta.len() != d {
        return Err(Error::shape(
            "layer_norm",
            format!("gamma/beta have {}/{} entries for width {d}", gamma.len(), beta.len()),
        ));
    }
    let eps = T::from_f64_lossy(eps);
    let n = T::from_usize(d).unwrap();
    let rows = x.n_rows();
    let mut out = Tensor::zeros(x.shape());
    let mut normalized = vec![T::zero(); x.len()];
    let mut rstd = Vec::with_capacity(rows);
    let (g, b) = (gamma.data(), beta.data());
    for r in 0..rows {
        let xs = x.row(r);
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = (var + eps).sqrt().recip();
        rstd.push(inv);
        let base = r * d;
        let out_row = &mut out.data_mut()[base..base + d];
        for j in 0..d {
            let xh = (xs[j] - mean) * inv;
            normalized[base + j] = xh;
            out_row[j] = xh * g[j] + b[j];
        }
    }
    Ok((out, LayerNormCache { normalized, rstd }))
}

/// Layer normalization over the last dimension, scaled by `gamma` and shifted by `beta`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    layer_norm_cached(x, gamma, beta, eps).map(|(out, _)| out)
}

/// Single-head scaled dot-product attention with an additive `(q_len x k_len)` mask.
pub fn scaled_dot_attention<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    attn_mask: &Tensor<T>,
) -> Result<Tensor<T>> {
    let probs = attention_probs(q, k, attn_mask)?;
    matmul(&probs, v).map_err(|_| {
        Error::shape("scaled_dot_attention", "keys and values differ in sequence length")
    })
}

/// Softmax attention weights `softmax(q k^T / sqrt(d_k) + mask)`.
pub fn attention_probs<T: Real>(q: &Tensor<T>, k: &Tensor<T>, attn_mask: &Tensor<T>) -> Result<Tensor<T>> {
    let (lq, dk) = q.dims2("scaled_dot_attention")?;
    let (lk, dk2) = k.dims2("scaled_dot_attention")?;
    if dk == 0 {
        return Err(Error::InvalidArgument("attention key width d_k is zero".into()));
    }
    if dk != dk2 {
        return Err(Error::shape("scaled_dot_attention", format!("query width {dk} vs key width {dk2}")));
    }
    if attn_mask.shape() != [lq, lk] {
        return Err(Error::shape(
            "scaled_dot_attention",
            format!("mask {:?} for {lq} queries and {lk} keys", attn_mask.shape()),
        ));
    }
    let scale = T::from_usize(dk).unwrap().sqrt().recip();
    let mut scores = matmul_t(q, false, k, true)?;
    for (s, &m) in scores.data_mut().iter_mut().zip(attn_mask.data()) {
        *s = *s * scale + m;
    }
    softmax_rows(&scores)
}

/// Mean negative log-likelihood over rows whose label differs from `ignore_index`.
pub fn cross_entropy_masked<T: Real>(logits: &Tensor<T>, labels: &[i64], ignore_index: i64) -> Result<T> {
    let (rows, vocab) = logits.dims2("cross_entropy_masked")?;
    if labels.len() != rows {
        return Err(Error::shape(
            "cross_entropy_masked",
            format!("{} labels for {rows} rows", labels.len()),
        ));
    }
    let mut total = T::zero();
    let mut count = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        if label == ignore_index {
            continue;
        }
        let idx = usize::try_from(label)
            .ok()
            .filter(|&i| i < vocab)
            .ok_or_else(|| Error::InvalidArgument(format!("label {label} outside vocabulary of {vocab}")))?;
        let row = logits.row(r);
        total += log_sum_exp(row) - row[idx];
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoLabels);
    }
    let loss = total / T::from_usize(count).unwrap();
    if loss.is_finite() {
        Ok(loss)
    } else {
        Err(Error::NonFinite("cross_entropy_masked".into()))
    }
}

/// Writes `block` at column offset of a row-major destination. Shared by the
/// concatenation ops.
pub(crate) fn copy_cols<T: Real>(dst: &mut [T], dst_cols: usize, src: &[T], src_cols: usize, col_offset: usize) {
    for (d_row, s_row) in dst.chunks_mut(dst_cols).zip(src.chunks(src_cols)) {
        d_row[col_offset..col_offset + src_cols].copy_from_slice(s_row);
    }
}

pub(crate) fn concat_cols<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != b.shape().len() || a.n_rows() != b.n_rows() {
        return Err(Error::shape(
            "concat_cols",
            format!("{:?} and {:?}", a.shape(), b.shape()),
        ));
    }
    let (ca, cb) = (a.last_dim(), b.last_dim());
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    let mut out = Tensor::zeros(&shape);
    copy_cols(out.data_mut(), ca + cb, a.data(), ca, 0);
    copy_cols(out.data_mut(), ca + cb, b.data(), cb, ca);
    Ok(out)
}

pub(crate) fn concat_rows<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, ca) = a.dims2("concat_rows")?;
    let (rb, cb) = b.dims2("concat_rows")?;
    if ca != cb {
        return Err(Error::shape("concat_rows", format!("{ra}x{ca} over {rb}x{cb}")));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(vec![ra + rb, ca], data)
}

/// Fixed-layout reference for a strided head block; used by the fused attention kernel.
pub(crate) fn head_block<T>(data: &[T], batch: usize, seq: usize, ld: usize, head: usize, width: usize) -> MatRef<'_, T> {
    MatRef::block(data, batch * seq * ld + head * width, seq, width, ld)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k) = a.dims2("t").unwrap();
        let (_, n) = b.dims2("t").unwrap();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.at(i, p) * b.at(p, j);
                }
            }
        }
        Tensor::new(vec![m, n], out).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let b = Tensor::<f64>::from_rows(&[&[3.0, 4.0], &[5.0, 6.0]]).unwrap();
        assert_eq!(matmul(&Tensor::identity(2), &b).unwrap(), b);
        let z = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::from_fn(&[3, 4], |i| i as f64 - 3.5);
        assert_eq!(matmul(&z, &b).unwrap(), Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| ((i * 7919) % 13) as f64 / 7.0 - 0.9);
        let b = Tensor::<f64>::from_fn(&[4, 2], |i| ((i * 104_729) % 11) as f64 / 5.0 - 1.1);
        let got = matmul(&a, &b).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)).unwrap() < 1e-12);
    }

    #[test]
    fn matmul_transposed_variants_agree() {
        let a = Tensor::<f64>::from_fn(&[3, 4], |i| (i as f64).sin());
        let b = Tensor::<f64>::from_fn(&[5, 4], |i| (i as f64 * 0.3).cos());
        let bt = Tensor::<f64>::from_fn(&[4, 5], |i| b.at(i % 5, i / 5));
        let direct = matmul(&a, &bt).unwrap();
        let strided = matmul_t(&a, false, &b, true).unwrap();
        assert!(direct.max_abs_diff(&strided).unwrap() < 1e-14);
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(matmul(&a, &a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_uniform_and_shift_invariant() {
        let x = Tensor::<f64>::zeros(&[1, 3]);
        let s = softmax_rows(&x).unwrap();
        for &v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let a = softmax_rows(&Tensor::<f64>::from_rows(&[&[1000.0, 1002.5]]).unwrap()).unwrap();
        let b = softmax_rows(&Tensor::<f64>::from_rows(&[&[0.0, 2.5]]).unwrap()).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let s = softmax_rows(&Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap()).unwrap();
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        for (i, &v) in s.data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        assert!((gelu_scalar(10.0f64) - 10.0).abs() < 1e-6);
        // Phi(1) = 0.5 * (1 + erf(1/sqrt 2)), erf(0.7071067811865476) = 0.6826894921370859
        let expected = 0.5 * (1.0 + 0.682_689_492_137_085_9);
        assert!((gelu_scalar(1.0f64) - expected).abs() < 1e-12);
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.2] {
            let h = 1e-5;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn layer_norm_cases() {
        let x = Tensor::<f64>::full(&[1, 4], 3.0);
        let out = layer_norm(&x, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-12).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let x = Tensor::<f64>::from_rows(&[&[0.3, -1.2, 2.0, 0.9]]).unwrap();
        let beta = Tensor::<f64>::from_slice_f64(&[4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let out = layer_norm(&x, &Tensor::zeros(&[4]), &beta, 1e-12).unwrap();
        assert_eq!(out.data(), beta.data());

        assert!(matches!(
            layer_norm(&x, &Tensor::ones(&[4]), &beta, 0.0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let vals = [0.3, -1.2, 2.0, 0.9, -0.4];
        let x = Tensor::<f64>::from_rows(&[&vals]).unwrap();
        let gamma = Tensor::<f64>::from_slice_f64(&[5], &[1.0, 0.5, -1.0, 2.0, 0.1]).unwrap();
        let beta = Tensor::<f64>::from_slice_f64(&[5], &[0.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let eps = 1e-5;
        let out = layer_norm(&x, &gamma, &beta, eps).unwrap();
        let mean = vals.iter().sum::<f64>() / 5.0;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for j in 0..5 {
            let want = (vals[j] - mean) / (var + eps).sqrt() * gamma.data()[j] + beta.data()[j];
            assert!((out.data()[j] - want).abs() < 1e-10);
        }
    }

    #[test]
    fn attention_single_position_and_identical_keys() {
        let q = Tensor::<f64>::from_rows(&[&[0.3, -0.2]]).unwrap();
        let k = Tensor::<f64>::from_rows(&[&[1.0, 2.0]]).unwrap();
        let v = Tensor::<f64>::from_rows(&[&[4.0, -5.0, 6.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, &Tensor::zeros(&[1, 1])).unwrap();
        assert_eq!(out, v);

        let q = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64);
        let k = Tensor::<f64>::from_rows(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]).unwrap();
        let v = Tensor::<f64>::from_rows(&[&[1.0, 0.0], &[2.0, 3.0], &[6.0, -3.0]]).unwrap();
        let out = scaled_dot_attention(&q, &k, &v, &Tensor::zeros(&[2, 3])).unwrap();
        for r in 0..2 {
            assert!((out.at(r, 0) - 3.0).abs() < 1e-12);
            assert!(out.at(r, 1).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_matches_hand_rolled_oracle() {
        let q = Tensor::<f64>::from_fn(&[3, 2], |i| (i as f64 * 1.3).sin());
        let k = Tensor::<f64>::from_fn(&[3, 2], |i| (i as f64 * 0.7).cos());
        let v = Tensor::<f64>::from_fn(&[3, 2], |i| i as f64 - 2.0);
        let mut mask = Tensor::<f64>::zeros(&[3, 3]);
        mask.data_mut()[2] = MASKED_LOGIT;
        let out = scaled_dot_attention(&q, &k, &v, &mask).unwrap();
        for i in 0..3 {
            let mut w = [0.0; 3];
            for j in 0..3 {
                let dot = q.at(i, 0) * k.at(j, 0) + q.at(i, 1) * k.at(j, 1);
                w[j] = if i == 0 && j == 2 { 0.0 } else { (dot / 2f64.sqrt()).exp() };
            }
            let z: f64 = w.iter().sum();
            for c in 0..2 {
                let want: f64 = (0..3).map(|j| w[j] / z * v.at(j, c)).sum();
                assert!((out.at(i, c) - want).abs() < 1e-10);
            }
        }
        let p = attention_probs(&q, &k, &mask).unwrap();
        assert_eq!(p.at(0, 2), 0.0);
    }

    #[test]
    fn attention_rejects_zero_width_and_bad_mask() {
        let q = Tensor::<f64>::zeros(&[2, 2]);
        assert!(scaled_dot_attention(&q, &q, &q, &Tensor::zeros(&[2, 3])).is_err());
    }

    #[test]
    fn cross_entropy_cases() {
        let logits = Tensor::<f64>::zeros(&[3, 7]);
        let loss = cross_entropy_masked(&logits, &[1, -100, 6], -100).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);

        let mut logits = Tensor::<f64>::zeros(&[1, 4]);
        logits.data_mut()[2] = 200.0;
        assert!(cross_entropy_masked(&logits, &[2], -100).unwrap() < 1e-12);

        assert!(matches!(
            cross_entropy_masked(&Tensor::<f64>::zeros(&[2, 3]), &[-100, -100], -100),
            Err(Error::NoLabels)
        ));
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp_oracle() {
        let logits = Tensor::<f64>::from_fn(&[2, 5], |i| ((i * 37) % 17) as f64 / 4.0 - 2.0);
        let labels = [3i64, 0];
        let got = cross_entropy_masked(&logits, &labels, -100).unwrap();
        let mut want = 0.0;
        for r in 0..2 {
            let row: Vec<f64> = (0..5).map(|c| logits.at(r, c)).collect();
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            want += -(row[labels[r] as usize].exp() / z).ln();
        }
        assert!((got - want / 2.0).abs() < 1e-10);
    }
}
