//! Dense forward kernels shared by every model component.
//!
//! All reductions run in a fixed sequential order so results are bit-stable.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Silu,
    /// Swish with beta = 1, identical to SiLU.
    Swish,
    Sigmoid,
    Softplus,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Layer,
    Rms,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp()
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of softplus for positive `y`.
pub fn softplus_inv(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu | Activation::Swish => x * sigmoid(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Relu => x.max(0.0),
        }
    }

    /// d/dx of `apply` at `x`. ReLU uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Silu | Activation::Swish => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Softplus => sigmoid(x),
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub fn activation(x: &Tensor, kind: Activation) -> Tensor {
    x.map(|v| kind.apply(v))
}

/// `a[.., M, K] x b[K, P] -> [.., M, P]`, contracting sequentially over K.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, p) = b.dims2()?;
    if a.last_dim() != k {
        return Err(dim_err!("matmul inner extents: {:?} x {:?}", a.shape(), b.shape()));
    }
    let rows = a.len() / k;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; rows * p];
    for (r, orow) in out.chunks_exact_mut(p).enumerate() {
        let arow = &ad[r * k..(r + 1) * k];
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * p..(kk + 1) * p];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = p;
    Ok(Tensor::from_raw(shape, out))
}

/// `a[.., M, P] x b[K, P]^T -> [.., M, K]`.
pub(crate) fn matmul_bt(a: &Tensor, b: &Tensor) -> Tensor {
    let (k, p) = (b.shape()[0], b.shape()[1]);
    let rows = a.len() / p;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; rows * k];
    for r in 0..rows {
        let arow = &ad[r * p..(r + 1) * p];
        for kk in 0..k {
            let brow = &bd[kk * p..(kk + 1) * p];
            out[r * k + kk] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = k;
    Tensor::from_raw(shape, out)
}

/// `a[rows, K]^T x g[rows, P] -> [K, P]`, flattening leading dims into rows.
pub(crate) fn matmul_at(a: &Tensor, g: &Tensor) -> Tensor {
    let k = a.last_dim();
    let p = g.last_dim();
    let rows = a.len() / k;
    let (ad, gd) = (a.data(), g.data());
    let mut out = vec![0.0; k * p];
    for r in 0..rows {
        let arow = &ad[r * k..(r + 1) * k];
        let grow = &gd[r * p..(r + 1) * p];
        for (kk, &av) in arow.iter().enumerate() {
            let orow = &mut out[kk * p..(kk + 1) * p];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::from_raw(vec![k, p], out)
}

/// Adds `bias[C]` to every row of `x[.., C]`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = x.last_dim();
    if bias.shape() != [c] {
        return Err(dim_err!("bias {:?} does not match last extent {c}", bias.shape()));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(c) {
        for (o, b) in row.iter_mut().zip(bias.data()) {
            *o += b;
        }
    }
    Ok(out)
}

/// Left padding applied before the first tap.
pub(crate) fn conv_left_pad(k: usize, causal: bool) -> usize {
    if causal {
        k - 1
    } else {
        (k - 1) / 2
    }
}

pub(crate) fn check_conv(x: &Tensor, w: &Tensor, bias: &Tensor, causal: bool) -> Result<(usize, usize, usize, usize)> {
    let (b, l, e) = x.dims3()?;
    let (we, k) = w.dims2()?;
    if we != e || bias.shape() != [e] {
        return Err(dim_err!(
            "depthwise conv channels: x {:?}, w {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            bias.shape()
        ));
    }
    if !causal && k % 2 == 0 {
        return Err(Error::Config(format!("non-causal conv needs an odd kernel, got {k}")));
    }
    Ok((b, l, e, k))
}

/// Per-channel 1-D cross-correlation over time.
///
/// `y[b,l,e] = bias[e] + sum_k w[e,k] * x[b, l - pad + k, e]` with zeros outside
/// `[0, L)`; `pad = K-1` when causal, `(K-1)/2` otherwise.
pub fn depthwise_conv1d(x: &Tensor, w: &Tensor, bias: &Tensor, causal: bool) -> Result<Tensor> {
    let (b, l, e, k) = check_conv(x, w, bias, causal)?;
    let pad = conv_left_pad(k, causal) as isize;
    let (xd, wd) = (x.data(), w.data());
    let mut out = vec![0.0; b * l * e];
    for bi in 0..b {
        for li in 0..l {
            let orow = &mut out[(bi * l + li) * e..(bi * l + li + 1) * e];
            orow.copy_from_slice(bias.data());
            for kk in 0..k {
                let src = li as isize - pad + kk as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                let xrow = &xd[(bi * l + src as usize) * e..(bi * l + src as usize + 1) * e];
                for ch in 0..e {
                    orow[ch] += wd[ch * k + kk] * xrow[ch];
                }
            }
        }
    }
    Ok(Tensor::from_raw(x.shape().to_vec(), out))
}

/// Normalizes every row of `x[.., D]`.
pub fn normalize(x: &Tensor, kind: NormKind, gain: &Tensor, bias: Option<&Tensor>, eps: f64) -> Result<Tensor> {
    let d = x.last_dim();
    if gain.shape() != [d] || bias.is_some_and(|b| b.shape() != [d]) {
        return Err(dim_err!("norm parameters do not match width {d}"));
    }
    if eps <= 0.0 {
        return Err(Error::Domain(format!("norm eps must be positive, got {eps}")));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        let (mean, inv) = row_stats(row, kind, eps);
        for (j, v) in row.iter_mut().enumerate() {
            let mut y = (*v - mean) * inv * gain.data()[j];
            if let Some(b) = bias {
                y += b.data()[j];
            }
            *v = y;
        }
    }
    Ok(out)
}

/// Returns `(center, 1/scale)` for one row.
pub(crate) fn row_stats(row: &[f64], kind: NormKind, eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    match kind {
        NormKind::Layer => {
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            (mean, 1.0 / (var + eps).sqrt())
        }
        NormKind::Rms => {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / n;
            (0.0, 1.0 / (ms + eps).sqrt())
        }
    }
}

/// Flips axis 1 of a `[B, L, ..]` tensor.
pub fn reverse_time(x: &Tensor) -> Tensor {
    let shape = x.shape();
    if shape.len() < 2 {
        let mut d = x.data().to_vec();
        d.reverse();
        return Tensor::from_raw(shape.to_vec(), d);
    }
    let (b, l) = (shape[0], shape[1]);
    let inner = x.len() / (b * l);
    let mut out = vec![0.0; x.len()];
    for bi in 0..b {
        for li in 0..l {
            let src = (bi * l + li) * inner;
            let dst = (bi * l + (l - 1 - li)) * inner;
            out[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
        }
    }
    Tensor::from_raw(shape.to_vec(), out)
}

/// Softmax over the last axis.
pub fn softmax(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(d) {
        softmax_in_place(row);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

/// Gated linear unit over the last axis: `a * sigmoid(b)` with `[a | b]` halves.
pub fn glu(x: &Tensor) -> Result<Tensor> {
    let c2 = x.last_dim();
    if c2 % 2 != 0 {
        return Err(dim_err!("GLU needs an even last extent, got {c2}"));
    }
    let c = c2 / 2;
    let rows = x.len() / c2;
    let mut out = Vec::with_capacity(rows * c);
    for row in x.data().chunks_exact(c2) {
        for j in 0..c {
            out.push(row[j] * sigmoid(row[c + j]));
        }
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().unwrap() = c;
    Ok(Tensor::from_raw(shape, out))
}

/// Mean over axis 1: `[B, L, D] -> [B, D]`.
pub fn mean_time(x: &Tensor) -> Result<Tensor> {
    let (b, l, d) = x.dims3()?;
    let mut out = vec![0.0; b * d];
    for bi in 0..b {
        for li in 0..l {
            let row = &x.data()[(bi * l + li) * d..(bi * l + li + 1) * d];
            for (o, v) in out[bi * d..(bi + 1) * d].iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    let inv = 1.0 / l as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_raw(vec![b, d], out))
}

pub(crate) fn check_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(usize, usize, usize, usize)> {
    let (b, l, d) = q.dims3()?;
    if k.shape() != q.shape() || v.shape() != q.shape() {
        return Err(dim_err!("attention q/k/v shapes differ"));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!("width {d} is not divisible by {heads} heads")));
    }
    Ok((b, l, d, d / heads))
}

/// Number of keys query `i` attends to.
pub(crate) fn attended(i: usize, l: usize, causal: bool) -> usize {
    if causal {
        i + 1
    } else {
        l
    }
}

/// Multi-head scaled dot-product attention over already-projected
/// `q, k, v: [B, L, D]`; head `h` owns columns `h*dh .. (h+1)*dh`.
///
/// Rows are processed one query at a time, so memory stays `O(L)` per head.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, causal: bool) -> Result<Tensor> {
    let (b, l, d, dh) = check_attention(q, k, v, heads)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; b * l * d];
    let mut p = vec![0.0; l];
    // per-head contiguous copies of K and V
    let mut kh = vec![0.0; l * dh];
    let mut vh = vec![0.0; l * dh];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    for bi in 0..b {
        for h in 0..heads {
            let off = h * dh;
            for j in 0..l {
                let src = (bi * l + j) * d + off;
                kh[j * dh..(j + 1) * dh].copy_from_slice(&kd[src..src + dh]);
                vh[j * dh..(j + 1) * dh].copy_from_slice(&vd[src..src + dh]);
            }
            for i in 0..l {
                let n = attended(i, l, causal);
                let qi = &qd[(bi * l + i) * d + off..(bi * l + i) * d + off + dh];
                for (pj, kj) in p[..n].iter_mut().zip(kh.chunks_exact(dh)) {
                    *pj = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                softmax_in_place(&mut p[..n]);
                let orow = &mut out[(bi * l + i) * d + off..(bi * l + i) * d + off + dh];
                for (&pj, vj) in p[..n].iter().zip(vh.chunks_exact(dh)) {
                    for (o, &vv) in orow.iter_mut().zip(vj) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, l, d], out))
}
