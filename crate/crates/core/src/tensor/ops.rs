//! Differentiable operations.
//!
//! Each op computes its forward result eagerly and, when recording, appends a
//! backward rule that captures exactly the activations it needs.

use super::graph::{record, record_tensor};
use super::kernels::{add_into, gemm, softmax_in_place, MatMut, MatRef};
use super::{Buffer, Tensor};
use crate::error::{Error, Result};

const GELU_C: f32 = 0.797_884_6; // sqrt(2 / pi)
const GELU_A: f32 = 0.044_715;

fn matrix_dims(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::contract(format!(
            "{op} expects a rank-2 tensor, got shape {:?}",
            t.shape()
        ))),
    }
}

fn last_dim(t: &Tensor) -> usize {
    *t.shape().last().expect("tensors have rank >= 1")
}

/// Matrix product `a · b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "matmul")?;
    let (k2, n) = matrix_dims(b, "matmul")?;
    if k != k2 {
        return Err(Error::dims("matmul", a.shape(), b.shape()));
    }
    let mut out = Buffer::zeros(m * n);
    gemm(
        1.0,
        MatRef::rows(a.data(), m, k),
        MatRef::rows(b.data(), k, n),
        0.0,
        MatMut::rows(&mut out, m, n),
    );
    let (sa, sb) = (a.clone(), b.clone());
    Ok(record(out, vec![m, n], &[a, b], move |g, needs| {
        let da = needs[0].then(|| {
            let mut d = Buffer::zeros(m * k);
            gemm(
                1.0,
                MatRef::rows(g, m, n),
                MatRef::rows(sb.data(), k, n).t(),
                0.0,
                MatMut::rows(&mut d, m, k),
            );
            d
        });
        let db = needs[1].then(|| {
            let mut d = Buffer::zeros(k * n);
            gemm(
                1.0,
                MatRef::rows(sa.data(), m, k).t(),
                MatRef::rows(g, m, n),
                0.0,
                MatMut::rows(&mut d, k, n),
            );
            d
        });
        vec![da, db]
    }))
}

/// Affine map `x · w + b` with `w` stored as `[in × out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (n, din) = matrix_dims(x, "linear")?;
    let (win, dout) = matrix_dims(w, "linear")?;
    if din != win {
        return Err(Error::dims("linear", x.shape(), w.shape()));
    }
    if b.numel() != dout {
        return Err(Error::dims("linear bias", w.shape(), b.shape()));
    }
    let mut out = Buffer::zeros(n * dout);
    for row in out.chunks_exact_mut(dout) {
        row.copy_from_slice(b.data());
    }
    gemm(
        1.0,
        MatRef::rows(x.data(), n, din),
        MatRef::rows(w.data(), din, dout),
        1.0,
        MatMut::rows(&mut out, n, dout),
    );
    let (sx, sw) = (x.clone(), w.clone());
    Ok(record(out, vec![n, dout], &[x, w, b], move |g, needs| {
        let dx = needs[0].then(|| {
            let mut d = Buffer::zeros(n * din);
            gemm(
                1.0,
                MatRef::rows(g, n, dout),
                MatRef::rows(sw.data(), din, dout).t(),
                0.0,
                MatMut::rows(&mut d, n, din),
            );
            d
        });
        let dw = needs[1].then(|| {
            let mut d = Buffer::zeros(din * dout);
            gemm(
                1.0,
                MatRef::rows(sx.data(), n, din).t(),
                MatRef::rows(g, n, dout),
                0.0,
                MatMut::rows(&mut d, din, dout),
            );
            d
        });
        let db = needs[2].then(|| {
            let mut d = Buffer::zeros(dout);
            for row in g.chunks_exact(dout) {
                add_into(&mut d, row);
            }
            d
        });
        vec![dx, dw, db]
    }))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dims("add", a.shape(), b.shape()));
    }
    let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(record(Buffer::from_vec(out), a.shape().to_vec(), &[a, b], |g, needs| {
        needs.iter().map(|&n| n.then(|| Buffer::from_vec(g.to_vec()))).collect()
    }))
}

/// Elementwise product.
pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::dims("mul", a.shape(), b.shape()));
    }
    let out: Vec<f32> = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (sa, sb) = (a.clone(), b.clone());
    Ok(record(Buffer::from_vec(out), a.shape().to_vec(), &[a, b], move |g, needs| {
        let prod = |other: &Tensor| {
            Buffer::from_vec(g.iter().zip(other.data()).map(|(x, y)| x * y).collect())
        };
        vec![needs[0].then(|| prod(&sb)), needs[1].then(|| prod(&sa))]
    }))
}

pub fn scale(a: &Tensor, s: f32) -> Tensor {
    let out: Vec<f32> = a.data().iter().map(|x| x * s).collect();
    record(Buffer::from_vec(out), a.shape().to_vec(), &[a], move |g, _| {
        vec![Some(Buffer::from_vec(g.iter().map(|x| x * s).collect()))]
    })
}

/// Sum of all elements as a one-element tensor.
pub fn sum(a: &Tensor) -> Tensor {
    let total: f64 = a.data().iter().map(|&x| x as f64).sum();
    let n = a.numel();
    record(Buffer::filled(1, total as f32), vec![1], &[a], move |g, _| {
        vec![Some(Buffer::filled(n, g[0]))]
    })
}

pub fn mean(a: &Tensor) -> Tensor {
    let n = a.numel();
    scale(&sum(a), 1.0 / n as f32)
}

/// Row-wise softmax over the last axis with max subtraction.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.data().iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("softmax_rows input"));
    }
    let c = last_dim(x);
    let mut out = Buffer::from_vec(x.data().to_vec());
    for row in out.chunks_exact_mut(c) {
        softmax_in_place(row);
    }
    let y = Tensor::from_parts(out, x.shape().to_vec(), Default::default());
    let saved = y.clone();
    Ok(record_tensor(y, &[x], move |g, _| {
        let mut dx = Buffer::zeros(g.len());
        for ((yr, gr), dr) in saved
            .data()
            .chunks_exact(c)
            .zip(g.chunks_exact(c))
            .zip(dx.chunks_exact_mut(c))
        {
            super::kernels::softmax_row_backward(yr, gr, dr);
        }
        vec![Some(dx)]
    }))
}

/// Layer normalization over the last axis followed by the affine map
/// `gamma ⊙ x̂ + beta`. Variance is the biased estimator.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f32) -> Result<Tensor> {
    let d = last_dim(x);
    if gamma.numel() != d || beta.numel() != d {
        return Err(Error::dims("layer_norm", x.shape(), gamma.shape()));
    }
    if eps <= 0.0 {
        return Err(Error::contract("layer_norm eps must be positive"));
    }
    let rows = x.numel() / d;
    let mut xhat = Buffer::zeros(x.numel());
    let mut rstd = Buffer::zeros(rows);
    for ((xr, hr), rs) in x
        .data()
        .chunks_exact(d)
        .zip(xhat.chunks_exact_mut(d))
        .zip(rstd.iter_mut())
    {
        let mean = xr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
        let var = xr.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + eps as f64).sqrt();
        for (h, &v) in hr.iter_mut().zip(xr) {
            *h = ((v as f64 - mean) * r) as f32;
        }
        *rs = r as f32;
    }
    let mut out = Buffer::zeros(x.numel());
    for (or, hr) in out.chunks_exact_mut(d).zip(xhat.chunks_exact(d)) {
        for ((o, &h), (&gm, &bt)) in or.iter_mut().zip(hr).zip(gamma.data().iter().zip(beta.data())) {
            *o = h * gm + bt;
        }
    }
    let sg = gamma.clone();
    Ok(record(out, x.shape().to_vec(), &[x, gamma, beta], move |g, needs| {
        let dx = needs[0].then(|| {
            let mut dx = Buffer::zeros(g.len());
            for (((gr, hr), dr), &r) in g
                .chunks_exact(d)
                .zip(xhat.chunks_exact(d))
                .zip(dx.chunks_exact_mut(d))
                .zip(rstd.iter())
            {
                let mut mean_dh = 0.0f64;
                let mut mean_dh_h = 0.0f64;
                for ((&gv, &h), &gm) in gr.iter().zip(hr).zip(sg.data()) {
                    let dh = (gv * gm) as f64;
                    mean_dh += dh;
                    mean_dh_h += dh * h as f64;
                }
                mean_dh /= d as f64;
                mean_dh_h /= d as f64;
                for (((o, &gv), &h), &gm) in dr.iter_mut().zip(gr).zip(hr).zip(sg.data()) {
                    let dh = (gv * gm) as f64;
                    *o = (r as f64 * (dh - mean_dh - h as f64 * mean_dh_h)) as f32;
                }
            }
            dx
        });
        let dgamma = needs[1].then(|| {
            let mut dg = Buffer::zeros(d);
            for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                for ((o, &gv), &h) in dg.iter_mut().zip(gr).zip(hr) {
                    *o += gv * h;
                }
            }
            dg
        });
        let dbeta = needs[2].then(|| {
            let mut db = Buffer::zeros(d);
            for gr in g.chunks_exact(d) {
                add_into(&mut db, gr);
            }
            db
        });
        vec![dx, dgamma, dbeta]
    }))
}

// libm's tanhf costs about four expf calls and dominated the MLP.
fn tanh(u: f32) -> f32 {
    if u.abs() > 10.0 {
        return u.signum();
    }
    1.0 - 2.0 / (super::kernels::exp(2.0 * u) + 1.0)
}

fn gelu_scalar(x: f32) -> f32 {
    let t = tanh(GELU_C * (x + GELU_A * x * x * x));
    0.5 * x * (1.0 + t)
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Tensor {
    let out: Vec<f32> = x.data().iter().map(|&v| gelu_scalar(v)).collect();
    let sx = x.clone();
    record(Buffer::from_vec(out), x.shape().to_vec(), &[x], move |g, _| {
        let d = g
            .iter()
            .zip(sx.data())
            .map(|(&gv, &v)| gv * gelu_grad_scalar(v))
            .collect();
        vec![Some(Buffer::from_vec(d))]
    })
}

/// Multi-head scaled dot-product attention.
///
/// `q` is `[n × D]`, `k` and `v` are `[m × D]`; head `h` occupies columns
/// `h·d_h .. (h+1)·d_h` and logits are scaled by `1/√d_h`. Returns the
/// concatenated head outputs `[n × D]` and, when `keep_probs` is set, the
/// post-softmax attention `[H × n × m]` as a detached tensor.
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    keep_probs: bool,
) -> Result<(Tensor, Option<Tensor>)> {
    let (n, dim) = matrix_dims(q, "attention")?;
    let (m, kdim) = matrix_dims(k, "attention")?;
    if kdim != dim {
        return Err(Error::dims("attention keys", q.shape(), k.shape()));
    }
    if v.shape() != k.shape() {
        return Err(Error::dims("attention values", k.shape(), v.shape()));
    }
    if heads == 0 || dim % heads != 0 {
        return Err(Error::dims("attention heads", q.shape(), &[heads]));
    }
    let dh = dim / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut probs = Buffer::zeros(heads * n * m);
    let mut out = Buffer::zeros(n * dim);
    for h in 0..heads {
        let p = &mut probs[h * n * m..(h + 1) * n * m];
        gemm(
            scale,
            MatRef::cols_of(q.data(), n, dim, h * dh, dh),
            MatRef::cols_of(k.data(), m, dim, h * dh, dh).t(),
            0.0,
            MatMut::rows(p, n, m),
        );
        for row in p.chunks_exact_mut(m) {
            softmax_in_place(row);
        }
        gemm(
            1.0,
            MatRef::rows(p, n, m),
            MatRef::cols_of(v.data(), m, dim, h * dh, dh),
            0.0,
            MatMut::cols_of(&mut out, n, dim, h * dh, dh),
        );
    }
    let probs = Tensor::from_parts(probs, vec![heads, n, m], Default::default());
    let returned = keep_probs.then(|| probs.clone());
    let (sq, sk, sv) = (q.clone(), k.clone(), v.clone());
    let output = record(out, vec![n, dim], &[q, k, v], move |g, needs| {
        let mut dq = needs[0].then(|| Buffer::zeros(n * dim));
        let mut dk = needs[1].then(|| Buffer::zeros(m * dim));
        let mut dv = needs[2].then(|| Buffer::zeros(m * dim));
        let mut ds = (needs[0] || needs[1]).then(|| Buffer::zeros(n * m));
        for h in 0..heads {
            let p = &probs.data()[h * n * m..(h + 1) * n * m];
            let g_h = MatRef::cols_of(g, n, dim, h * dh, dh);
            if let Some(dv) = dv.as_mut() {
                gemm(
                    1.0,
                    MatRef::rows(p, n, m).t(),
                    g_h,
                    0.0,
                    MatMut::cols_of(dv, m, dim, h * dh, dh),
                );
            }
            let Some(ds) = ds.as_mut() else { continue };
            gemm(
                1.0,
                g_h,
                MatRef::cols_of(sv.data(), m, dim, h * dh, dh).t(),
                0.0,
                MatMut::rows(ds, n, m),
            );
            for (dr, pr) in ds.chunks_exact_mut(m).zip(p.chunks_exact(m)) {
                let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
                for (d, &pv) in dr.iter_mut().zip(pr) {
                    *d = pv * (*d - dot);
                }
            }
            if let Some(dq) = dq.as_mut() {
                gemm(
                    scale,
                    MatRef::rows(ds, n, m),
                    MatRef::cols_of(sk.data(), m, dim, h * dh, dh),
                    0.0,
                    MatMut::cols_of(dq, n, dim, h * dh, dh),
                );
            }
            if let Some(dk) = dk.as_mut() {
                gemm(
                    scale,
                    MatRef::rows(ds, n, m).t(),
                    MatRef::cols_of(sq.data(), n, dim, h * dh, dh),
                    0.0,
                    MatMut::cols_of(dk, m, dim, h * dh, dh),
                );
            }
        }
        vec![dq, dk, dv]
    });
    Ok((output, returned))
}

/// Stacks rank-2 tensors with equal column counts along rows.
pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat_rows needs at least one tensor"))?;
    let (_, cols) = matrix_dims(first, "concat_rows")?;
    let mut row_counts = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = matrix_dims(p, "concat_rows")?;
        if c != cols {
            return Err(Error::dims("concat_rows", first.shape(), p.shape()));
        }
        row_counts.push(r);
    }
    let total: usize = row_counts.iter().sum();
    let mut out = Vec::with_capacity(total * cols);
    for p in parts {
        out.extend_from_slice(p.data());
    }
    Ok(record(Buffer::from_vec(out), vec![total, cols], parts, move |g, needs| {
        let mut offset = 0;
        row_counts
            .iter()
            .zip(needs)
            .map(|(&r, &need)| {
                let span = offset..offset + r * cols;
                offset += r * cols;
                need.then(|| Buffer::from_vec(g[span].to_vec()))
            })
            .collect()
    }))
}

/// Rows `start .. start + len` of a rank-2 tensor.
pub fn slice_rows(x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let (rows, cols) = matrix_dims(x, "slice_rows")?;
    if len == 0 || start + len > rows {
        return Err(Error::dims("slice_rows", x.shape(), &[start, len]));
    }
    let out = x.data()[start * cols..(start + len) * cols].to_vec();
    Ok(record(Buffer::from_vec(out), vec![len, cols], &[x], move |g, _| {
        let mut dx = Buffer::zeros(rows * cols);
        dx[start * cols..(start + len) * cols].copy_from_slice(g);
        vec![Some(dx)]
    }))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (`[b × c]`).
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = matrix_dims(logits, "cross_entropy")?;
    if labels.len() != b {
        return Err(Error::dims("cross_entropy labels", logits.shape(), &[labels.len()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::contract(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let mut probs = Buffer::from_vec(logits.data().to_vec());
    let mut total = 0.0f64;
    for (row, &label) in probs.chunks_exact_mut(c).zip(labels) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let lse = max as f64
            + row
                .iter()
                .map(|&v| ((v - max) as f64).exp())
                .sum::<f64>()
                .ln();
        total += lse - row[label] as f64;
        softmax_in_place(row);
    }
    let loss = (total / b as f64) as f32;
    let labels = labels.to_vec();
    Ok(record(Buffer::filled(1, loss), vec![1], &[logits], move |g, _| {
        let mut d = probs;
        let s = g[0] / b as f32;
        for (row, &label) in d.chunks_exact_mut(c).zip(&labels) {
            row[label] -= 1.0;
            row.iter_mut().for_each(|v| *v *= s);
        }
        vec![Some(d)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::graph::backward;

    fn t(data: &[f32], shape: &[usize]) -> Tensor {
        Tensor::new(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn identity_matmul() {
        let eye = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(matmul(&eye, &x).unwrap().data(), x.data());
    }

    #[test]
    fn one_by_one_matmul() {
        let c = matmul(&t(&[1.0, 2.0], &[1, 2]), &t(&[3.0, 4.0], &[2, 1])).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_names_both_shapes() {
        let err = matmul(&Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Dimension { .. }));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let y = softmax_rows(&t(&[0.0, 0.0, 0.0], &[1, 3])).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-7);
        }
        let y = softmax_rows(&t(&[1000.0, 0.0], &[1, 2])).unwrap();
        assert!((y.data()[0] as f64 - 1.0).abs() < 1e-12);
        assert!((y.data()[1] as f64).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_nan() {
        let err = softmax_rows(&t(&[f32::NAN, 0.0], &[1, 2])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn layer_norm_cases() {
        let one = Tensor::full(&[3], 1.0);
        let zero = Tensor::zeros(&[3]);
        let y = layer_norm(&t(&[5.0, 5.0, 5.0], &[1, 3]), &one, &zero, 1e-5).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);

        let one = Tensor::full(&[2], 1.0);
        let zero = Tensor::zeros(&[2]);
        let y = layer_norm(&t(&[1.0, 3.0], &[1, 2]), &one, &zero, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn gelu_fixed_points() {
        let y = gelu(&t(&[0.0, 10.0], &[2]));
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 10.0).abs() < 1e-4);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let w = t(&[0.5, -1.0, 2.0], &[3]).into_parameter();
        backward(&sum(&w)).unwrap();
        assert_eq!(w.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient() {
        let w = t(&[1.0, 2.0], &[2]).into_parameter();
        backward(&sum(&mul(&w, &w).unwrap())).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn backward_contract_errors() {
        let w = t(&[1.0, 2.0], &[2]).into_parameter();
        let y = scale(&w, 2.0);
        assert!(matches!(backward(&y), Err(Error::Contract(_))));
        let detached = sum(&y).detach();
        assert!(matches!(backward(&detached), Err(Error::Contract(_))));
        crate::tensor::graph::clear();
    }

    #[test]
    fn unreachable_leaf_keeps_no_grad() {
        let a = t(&[1.0], &[1]).into_parameter();
        let b = t(&[2.0], &[1]).into_parameter();
        let _unused = scale(&b, 3.0);
        backward(&sum(&a)).unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0]);
        assert!(b.grad().is_none());
    }

    #[test]
    fn cross_entropy_values() {
        let loss = cross_entropy(&t(&[0.0, 0.0], &[1, 2]), &[0]).unwrap();
        assert!((loss.item() - std::f32::consts::LN_2).abs() < 1e-6);
        let loss = cross_entropy(&t(&[100.0, 0.0], &[1, 2]), &[0]).unwrap();
        assert!(loss.item().abs() < 1e-6);
        assert!(cross_entropy(&t(&[0.0, 0.0], &[1, 2]), &[2]).is_err());
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let q = t(&[0.3, -0.2, 1.0, 0.5], &[2, 2]);
        let k = t(&[0.7, 0.1], &[1, 2]);
        let v = t(&[4.0, -3.0], &[1, 2]);
        let (out, probs) = attention(&q, &k, &v, 2, true).unwrap();
        assert_eq!(out.data(), &[4.0, -3.0, 4.0, -3.0]);
        assert!(probs.unwrap().data().iter().all(|&p| p == 1.0));
    }
}
