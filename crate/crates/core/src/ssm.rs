//! Discretization and the selective scan.
//!
//! The recurrence per batch element, channel `e` and state `n` is
//!
//! ```text
//! h[l,e,n] = exp(delta[l,e] * A[e,n]) * h[l-1,e,n] + delta[l,e] * B[l,n] * u[l,e]
//! y[l,e]   = sum_n C[l,n] * h[l,e,n] + D[e] * u[l,e]
//! ```
//!
//! with `h[-1] = 0`. `B` and `C` are shared across channels; `delta` is
//! per channel. Three evaluation strategies are provided: a fused sequential
//! loop, a chunked two-pass associative scan, and (for time-invariant
//! parameters) an explicit convolution kernel.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Parameter bundle of one selective-scan call.
#[derive(Clone, Debug)]
pub struct SsmInputs {
    /// `[B, L, E]`
    pub u: Tensor,
    /// `[B, L, E]`, strictly positive.
    pub delta: Tensor,
    /// `[E, N]`, strictly negative.
    pub a: Tensor,
    /// `[B, L, N]`
    pub b_sel: Tensor,
    /// `[B, L, N]`
    pub c_sel: Tensor,
    /// `[E]`
    pub d: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ScanDims {
    pub b: usize,
    pub l: usize,
    pub e: usize,
    pub n: usize,
}

impl SsmInputs {
    pub(crate) fn dims(&self) -> Result<ScanDims> {
        check_dims(&self.u, &self.delta, &self.a, &self.b_sel, &self.c_sel, &self.d)
    }

    /// Shape checks plus the positivity/negativity invariants.
    pub fn validate(&self) -> Result<()> {
        self.dims()?;
        if let Some(v) = self.delta.data().iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
            return Err(Error::Domain(format!("delta must be positive, found {v}")));
        }
        if let Some(v) = self.a.data().iter().find(|&&v| v >= 0.0 || !v.is_finite()) {
            return Err(Error::Domain(format!("A must be strictly negative, found {v}")));
        }
        Ok(())
    }
}

pub(crate) fn check_dims(u: &Tensor, delta: &Tensor, a: &Tensor, b_sel: &Tensor, c_sel: &Tensor, d: &Tensor) -> Result<ScanDims> {
    let (b, l, e) = u.dims3()?;
    let (ae, n) = a.dims2()?;
    if delta.shape() != u.shape() {
        return Err(dim_err!("delta {:?} must match u {:?}", delta.shape(), u.shape()));
    }
    if ae != e || d.shape() != [e] {
        return Err(dim_err!("A {:?} / D {:?} do not match E = {e}", a.shape(), d.shape()));
    }
    if b_sel.shape() != [b, l, n] || c_sel.shape() != [b, l, n] {
        return Err(dim_err!(
            "B {:?} / C {:?} must be [{b}, {l}, {n}]",
            b_sel.shape(),
            c_sel.shape()
        ));
    }
    Ok(ScanDims { b, l, e, n })
}

/// How the recurrence is evaluated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ScanMode {
    #[default]
    Sequential,
    Parallel { chunk: usize },
}

/// One element of the associative scan: the affine map `h -> a*h + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScanElement {
    /// `[E, N]` multiplicative part.
    pub a: Tensor,
    /// `[E, N]` additive part.
    pub b: Tensor,
}

impl ScanElement {
    pub fn identity(e: usize, n: usize) -> Self {
        Self { a: Tensor::ones(&[e, n]), b: Tensor::zeros(&[e, n]) }
    }

    /// Applies `self` first, then `next`.
    pub fn combine(&self, next: &ScanElement) -> Result<ScanElement> {
        scan_combine(self, next)
    }
}

/// `(x.a*y.a, y.a*x.b + y.b)`.
pub fn scan_combine(x: &ScanElement, y: &ScanElement) -> Result<ScanElement> {
    for t in [&x.b, &y.a, &y.b] {
        x.a.expect_same_shape(t)?;
    }
    let mut a = x.a.data().to_vec();
    let mut b = x.b.data().to_vec();
    combine_into(&mut a, &mut b, y.a.data(), y.b.data());
    let shape = x.a.shape().to_vec();
    Ok(ScanElement { a: Tensor::from_raw(shape.clone(), a), b: Tensor::from_raw(shape, b) })
}

/// `(acc_a, acc_b) <- combine((acc_a, acc_b), (a, b))`.
#[inline]
fn combine_into(acc_a: &mut [f64], acc_b: &mut [f64], a: &[f64], b: &[f64]) {
    for i in 0..acc_a.len() {
        acc_a[i] *= a[i];
        acc_b[i] = a[i] * acc_b[i] + b[i];
    }
}

/// Applies one element to a state: `h <- a*h + b`.
#[inline]
fn step_into(h: &mut [f64], a: &[f64], b: &[f64]) {
    for i in 0..h.len() {
        h[i] = a[i] * h[i] + b[i];
    }
}

/// Inclusive states of `h_i = a_i*h_{i-1} + b_i` from `h_{-1} = 0`, evaluated
/// left to right. `elem(i, a, b)` fills element `i`. Returns `len * width`.
pub(crate) fn sequential_scan(len: usize, width: usize, elem: impl Fn(usize, &mut [f64], &mut [f64])) -> Vec<f64> {
    let mut states = vec![0.0; len * width];
    let mut h = vec![0.0; width];
    let (mut a, mut b) = (vec![0.0; width], vec![0.0; width]);
    for i in 0..len {
        elem(i, &mut a, &mut b);
        step_into(&mut h, &a, &b);
        states[i * width..(i + 1) * width].copy_from_slice(&h);
    }
    states
}

/// Same result as [`sequential_scan`] via a chunked two-pass scan:
///
/// 1. each chunk reduces its elements to one aggregate (chunks in parallel);
/// 2. an exclusive scan over the aggregates yields each chunk's carry-in;
/// 3. each chunk replays its elements from the carry-in (chunks in parallel).
///
/// The combine tree depends only on `chunk`, so the output is deterministic
/// regardless of thread scheduling.
pub(crate) fn chunked_scan(
    len: usize,
    width: usize,
    chunk: usize,
    elem: impl Fn(usize, &mut [f64], &mut [f64]) + Sync,
) -> Vec<f64> {
    assert!(chunk >= 1);
    let n_chunks = len.div_ceil(chunk);
    let aggregates: Vec<(Vec<f64>, Vec<f64>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let (mut acc_a, mut acc_b) = (vec![1.0; width], vec![0.0; width]);
            let (mut a, mut b) = (vec![0.0; width], vec![0.0; width]);
            for i in c * chunk..((c + 1) * chunk).min(len) {
                elem(i, &mut a, &mut b);
                combine_into(&mut acc_a, &mut acc_b, &a, &b);
            }
            (acc_a, acc_b)
        })
        .collect();

    let mut carries = Vec::with_capacity(n_chunks);
    let mut h = vec![0.0; width];
    for (agg_a, agg_b) in &aggregates {
        carries.push(h.clone());
        step_into(&mut h, agg_a, agg_b);
    }

    let mut states = vec![0.0; len * width];
    states
        .par_chunks_mut(chunk * width)
        .zip(carries.into_par_iter())
        .enumerate()
        .for_each(|(c, (out, mut h))| {
            let (mut a, mut b) = (vec![0.0; width], vec![0.0; width]);
            for (k, row) in out.chunks_exact_mut(width).enumerate() {
                elem(c * chunk + k, &mut a, &mut b);
                step_into(&mut h, &a, &b);
                row.copy_from_slice(&h);
            }
        });
    states
}

/// Closure producing the discretized element at step `l` of batch `bi`.
pub(crate) fn element_fn<'a>(
    bi: usize,
    dims: ScanDims,
    u: &'a [f64],
    delta: &'a [f64],
    a_mat: &'a [f64],
    b_sel: &'a [f64],
) -> impl Fn(usize, &mut [f64], &mut [f64]) + Sync + 'a {
    let ScanDims { l: len, e, n, .. } = dims;
    move |l, a, b| {
        let row = (bi * len + l) * e;
        let brow = &b_sel[(bi * len + l) * n..(bi * len + l + 1) * n];
        for ch in 0..e {
            let dt = delta[row + ch];
            let du = dt * u[row + ch];
            for s in 0..n {
                a[ch * n + s] = (dt * a_mat[ch * n + s]).exp();
                b[ch * n + s] = du * brow[s];
            }
        }
    }
}

/// Hidden states `[B, L, E, N]` under the given evaluation strategy.
pub fn selective_scan_states(inp: &SsmInputs, mode: ScanMode) -> Result<Tensor> {
    inp.validate()?;
    let dims = inp.dims()?;
    Ok(states_unchecked(inp, dims, mode))
}

pub(crate) fn states_unchecked(inp: &SsmInputs, dims: ScanDims, mode: ScanMode) -> Tensor {
    let ScanDims { b, l, e, n } = dims;
    let width = e * n;
    let mut out = Vec::with_capacity(b * l * width);
    for bi in 0..b {
        let elem = element_fn(bi, dims, inp.u.data(), inp.delta.data(), inp.a.data(), inp.b_sel.data());
        let states = match mode {
            ScanMode::Sequential => sequential_scan(l, width, elem),
            ScanMode::Parallel { chunk } => chunked_scan(l, width, chunk, elem),
        };
        out.extend_from_slice(&states);
    }
    Tensor::from_raw(vec![b, l, e, n], out)
}

/// `y = C.h + D*u` from stored states.
pub(crate) fn readout(inp: &SsmInputs, dims: ScanDims, states: &[f64]) -> Tensor {
    let ScanDims { b, l, e, n } = dims;
    let (u, c, d) = (inp.u.data(), inp.c_sel.data(), inp.d.data());
    let mut y = vec![0.0; b * l * e];
    for row in 0..b * l {
        let crow = &c[row * n..(row + 1) * n];
        for ch in 0..e {
            let h = &states[(row * e + ch) * n..(row * e + ch + 1) * n];
            let mut acc = 0.0;
            for s in 0..n {
                acc += crow[s] * h[s];
            }
            y[row * e + ch] = acc + d[ch] * u[row * e + ch];
        }
    }
    Tensor::from_raw(vec![b, l, e], y)
}

/// `(Abar, Bbar)`, each `[B, L, E, N]`: `Abar = exp(delta*A)` and the
/// first-order `Bbar = delta*B`.
pub fn discretize(a: &Tensor, delta: &Tensor, b_sel: &Tensor) -> Result<(Tensor, Tensor)> {
    let (bs, l, e) = delta.dims3()?;
    let (ae, n) = a.dims2()?;
    if ae != e || b_sel.shape() != [bs, l, n] {
        return Err(dim_err!(
            "discretize: A {:?}, delta {:?}, B {:?}",
            a.shape(),
            delta.shape(),
            b_sel.shape()
        ));
    }
    if let Some(v) = delta.data().iter().find(|&&v| v <= 0.0) {
        return Err(Error::Domain(format!("delta must be positive, found {v}")));
    }
    let mut abar = Vec::with_capacity(bs * l * e * n);
    let mut bbar = Vec::with_capacity(bs * l * e * n);
    for row in 0..bs * l {
        for ch in 0..e {
            let dt = delta.data()[row * e + ch];
            for s in 0..n {
                abar.push((dt * a.data()[ch * n + s]).exp());
                bbar.push(dt * b_sel.data()[row * n + s]);
            }
        }
    }
    let shape = vec![bs, l, e, n];
    Ok((Tensor::from_raw(shape.clone(), abar), Tensor::from_raw(shape, bbar)))
}

/// Exact left-to-right recurrence with discretization fused into the loop.
pub fn selective_scan_sequential(inp: &SsmInputs) -> Result<Tensor> {
    inp.validate()?;
    let ScanDims { b, l, e, n } = inp.dims()?;
    let (u, delta, a, bs, cs, d) =
        (inp.u.data(), inp.delta.data(), inp.a.data(), inp.b_sel.data(), inp.c_sel.data(), inp.d.data());
    let mut y = vec![0.0; b * l * e];
    let mut h = vec![0.0; e * n];
    for bi in 0..b {
        h.iter_mut().for_each(|v| *v = 0.0);
        for li in 0..l {
            let row = bi * l + li;
            let (brow, crow) = (&bs[row * n..(row + 1) * n], &cs[row * n..(row + 1) * n]);
            for ch in 0..e {
                let dt = delta[row * e + ch];
                let du = dt * u[row * e + ch];
                let hs = &mut h[ch * n..(ch + 1) * n];
                let mut acc = 0.0;
                for s in 0..n {
                    hs[s] = (dt * a[ch * n + s]).exp() * hs[s] + du * brow[s];
                    acc += crow[s] * hs[s];
                }
                y[row * e + ch] = acc + d[ch] * u[row * e + ch];
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, l, e], y))
}

/// Chunked associative scan; `chunk` sets the segment length.
pub fn selective_scan_parallel(inp: &SsmInputs, chunk: usize) -> Result<Tensor> {
    if chunk == 0 {
        return Err(Error::Config("scan chunk must be at least 1".into()));
    }
    inp.validate()?;
    let dims = inp.dims()?;
    let states = states_unchecked(inp, dims, ScanMode::Parallel { chunk });
    Ok(readout(inp, dims, states.data()))
}

/// Runs the scan under `mode`.
pub fn selective_scan(inp: &SsmInputs, mode: ScanMode) -> Result<Tensor> {
    match mode {
        ScanMode::Sequential => selective_scan_sequential(inp),
        ScanMode::Parallel { chunk } => selective_scan_parallel(inp, chunk),
    }
}

/// Convolution kernel of a time-invariant SSM:
/// `K[e, j] = sum_n C[n] * Abar[e,n]^j * Bbar[e,n]`.
pub fn lti_kernel(abar: &Tensor, bbar: &Tensor, c: &Tensor, len: usize) -> Result<Tensor> {
    if len < 1 {
        return Err(Error::Domain("kernel length must be at least 1".into()));
    }
    let (e, n) = abar.dims2()?;
    abar.expect_same_shape(bbar)?;
    if c.shape() != [n] {
        return Err(dim_err!("C {:?} must be [{n}]", c.shape()));
    }
    let mut k = vec![0.0; e * len];
    for ch in 0..e {
        for s in 0..n {
            let a = abar.data()[ch * n + s];
            let mut p = c.data()[s] * bbar.data()[ch * n + s];
            for j in 0..len {
                k[ch * len + j] += p;
                p *= a;
            }
        }
    }
    Ok(Tensor::from_raw(vec![e, len], k))
}

/// Truncated causal convolution `y[b,l,e] = sum_{j<=l} K[e,j] * x[b,l-j,e]`.
pub fn lti_apply(x: &Tensor, k: &Tensor) -> Result<Tensor> {
    let (b, l, e) = x.dims3()?;
    if k.shape() != [e, l] {
        return Err(dim_err!("kernel {:?} must be [{e}, {l}]", k.shape()));
    }
    let mut y = vec![0.0; b * l * e];
    for bi in 0..b {
        for li in 0..l {
            for ch in 0..e {
                let mut acc = 0.0;
                for j in 0..=li {
                    acc += k.data()[ch * l + j] * x.data()[(bi * l + li - j) * e + ch];
                }
                y[(bi * l + li) * e + ch] = acc;
            }
        }
    }
    Ok(Tensor::from_raw(vec![b, l, e], y))
}

#[cfg(test)]
pub(crate) mod testing {
    use super::*;
    use rand::Rng;

    /// Random well-posed instance.
    pub fn random_inputs<R: Rng>(rng: &mut R, b: usize, l: usize, e: usize, n: usize) -> SsmInputs {
        SsmInputs {
            u: Tensor::randn(&[b, l, e], rng),
            delta: Tensor::uniform(&[b, l, e], 0.001, 0.5, rng),
            a: Tensor::uniform(&[e, n], -2.0, -0.05, rng),
            b_sel: Tensor::randn(&[b, l, n], rng),
            c_sel: Tensor::randn(&[b, l, n], rng),
            d: Tensor::randn(&[e], rng),
        }
    }

    /// Exact zero-order-hold input matrix for diagonal A: `(exp(dA) - 1) / A * B`.
    pub fn zoh_bbar_exact(a: f64, delta: f64, b: f64) -> f64 {
        (delta * a).exp_m1() / a * b
    }
}

#[cfg(test)]
mod tests {
    use super::testing::*;
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    fn el(a: f64, b: f64) -> ScanElement {
        ScanElement { a: Tensor::scalar(a).reshape(&[1, 1]).unwrap(), b: Tensor::scalar(b).reshape(&[1, 1]).unwrap() }
    }

    #[test]
    fn discretize_examples() {
        let (abar, _) = discretize(&t(&[1, 1], &[0.0]), &t(&[1, 1, 1], &[1.0]), &t(&[1, 1, 1], &[1.0])).unwrap();
        assert_eq!(abar.data(), &[1.0]);
        let (abar, _) = discretize(&t(&[1, 1], &[-1.0]), &t(&[1, 1, 1], &[2f64.ln()]), &t(&[1, 1, 1], &[1.0])).unwrap();
        assert!((abar.data()[0] - 0.5).abs() < 1e-15);
        let (_, bbar) = discretize(&t(&[1, 1], &[-1.0]), &t(&[1, 1, 1], &[0.1]), &t(&[1, 1, 1], &[2.0])).unwrap();
        assert!((bbar.data()[0] - 0.2).abs() < 1e-15);
        let r = discretize(&t(&[1, 1], &[-1.0]), &t(&[1, 1, 1], &[0.0]), &t(&[1, 1, 1], &[2.0]));
        assert!(matches!(r, Err(Error::Domain(_))));
    }

    #[test]
    fn first_order_input_matrix_gap_is_half_delta_a() {
        // Bbar_taylor / Bbar_zoh - 1 = dA / (exp(dA) - 1) - 1 ~ -dA/2 for small dA.
        for &(a, dt) in &[(-1.0, 1e-3), (-3.0, 1e-2), (-0.5, 0.1)] {
            let exact = zoh_bbar_exact(a, dt, 1.0);
            let gap = dt / exact - 1.0;
            let dta: f64 = a * dt;
            assert!((gap + dta / 2.0).abs() < dta * dta, "a={a} dt={dt} gap={gap}");
        }
    }

    #[test]
    fn sequential_scan_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut inp = random_inputs(&mut rng, 2, 5, 3, 4);
        inp.u = Tensor::zeros(&[2, 5, 3]);
        assert_eq!(selective_scan_sequential(&inp).unwrap().max_abs(), 0.0);

        let mut inp = random_inputs(&mut rng, 2, 5, 3, 4);
        inp.c_sel = Tensor::zeros(&[2, 5, 4]);
        let y = selective_scan_sequential(&inp).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, inp.d.data()[i % 3] * inp.u.data()[i]);
        }

        // Abar = 0.5, Bbar*u = 1 each step, C = 1, D = 0.
        let inp = SsmInputs {
            u: t(&[1, 3, 1], &[1.0, 1.0, 1.0]),
            delta: t(&[1, 3, 1], &[1.0, 1.0, 1.0]),
            a: t(&[1, 1], &[-(2f64.ln())]),
            b_sel: t(&[1, 3, 1], &[1.0, 1.0, 1.0]),
            c_sel: t(&[1, 3, 1], &[1.0, 1.0, 1.0]),
            d: t(&[1], &[0.0]),
        };
        let y = selective_scan_sequential(&inp).unwrap();
        for (got, want) in y.data().iter().zip([1.0, 1.5, 1.75]) {
            assert!((got - want).abs() < 1e-15);
        }
    }

    #[test]
    fn scan_rejects_invalid_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut inp = random_inputs(&mut rng, 1, 4, 2, 3);
        inp.delta.data_mut()[3] = -0.1;
        assert!(matches!(selective_scan_sequential(&inp), Err(Error::Domain(_))));
        let mut inp = random_inputs(&mut rng, 1, 4, 2, 3);
        inp.a.data_mut()[0] = 0.0;
        assert!(matches!(selective_scan_parallel(&inp, 2), Err(Error::Domain(_))));
        let mut inp = random_inputs(&mut rng, 1, 4, 2, 3);
        inp.b_sel = Tensor::zeros(&[1, 4, 2]);
        assert!(matches!(selective_scan_sequential(&inp), Err(Error::Dimension(_))));
        let inp = random_inputs(&mut rng, 1, 4, 2, 3);
        assert!(matches!(selective_scan_parallel(&inp, 0), Err(Error::Config(_))));
    }

    #[test]
    fn combine_examples() {
        let e = el(0.3, -1.2);
        let id = ScanElement::identity(1, 1);
        assert_eq!(scan_combine(&e, &id).unwrap(), e);
        assert_eq!(scan_combine(&id, &e).unwrap(), e);
        let c = scan_combine(&el(0.5, 1.0), &el(0.5, 1.0)).unwrap();
        assert_eq!(c, el(0.25, 1.5));
    }

    #[test]
    fn parallel_matches_sequential_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let inp = random_inputs(&mut rng, 2, 40, 3, 5);
        let seq = selective_scan_sequential(&inp).unwrap();
        let whole = selective_scan_parallel(&inp, 40).unwrap();
        assert!(whole.max_abs_diff(&seq).unwrap() < 1e-12);
        let ones = selective_scan_parallel(&inp, 1).unwrap();
        assert!(ones.max_abs_diff(&seq).unwrap() < 1e-10);

        let inp = random_inputs(&mut rng, 1, 257, 4, 4);
        let a = selective_scan_parallel(&inp, 16).unwrap();
        let b = selective_scan_parallel(&inp, 32).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn lti_kernel_examples() {
        let k = lti_kernel(&t(&[1, 1], &[0.5]), &t(&[1, 1], &[1.0]), &t(&[1], &[1.0]), 3).unwrap();
        assert_eq!(k.data(), &[1.0, 0.5, 0.25]);
        let k = lti_kernel(&t(&[1, 1], &[0.0]), &t(&[1, 1], &[2.0]), &t(&[1], &[3.0]), 4).unwrap();
        assert_eq!(k.data(), &[6.0, 0.0, 0.0, 0.0]);
        let k = lti_kernel(&t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]), &Tensor::ones(&[2, 2]), &Tensor::zeros(&[2]), 5).unwrap();
        assert_eq!(k.max_abs(), 0.0);
        assert!(matches!(
            lti_kernel(&t(&[1, 1], &[0.5]), &t(&[1, 1], &[1.0]), &t(&[1], &[1.0]), 0),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn lti_apply_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::randn(&[2, 6, 3], &mut rng);
        let mut delta_k = Tensor::zeros(&[3, 6]);
        for ch in 0..3 {
            delta_k.data_mut()[ch * 6] = 1.0;
        }
        assert_eq!(lti_apply(&x, &delta_k).unwrap(), x);

        let k = Tensor::randn(&[3, 6], &mut rng);
        let mut imp = Tensor::zeros(&[1, 6, 3]);
        imp.data_mut()[..3].copy_from_slice(&[1.0, 1.0, 1.0]);
        let y = lti_apply(&imp, &k).unwrap();
        for l in 0..6 {
            for ch in 0..3 {
                assert_eq!(y.data()[l * 3 + ch], k.data()[ch * 6 + l]);
            }
        }
        assert!(matches!(lti_apply(&x, &Tensor::zeros(&[3, 5])), Err(Error::Dimension(_))));
    }

    #[test]
    fn causality_of_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let inp = random_inputs(&mut rng, 1, 12, 3, 4);
        let y0 = selective_scan_sequential(&inp).unwrap();
        let mut p = inp.clone();
        p.u.data_mut()[7 * 3 + 1] += 0.5;
        let y1 = selective_scan_sequential(&p).unwrap();
        assert_eq!(&y0.data()[..7 * 3], &y1.data()[..7 * 3]);
        assert_ne!(y0.data()[7 * 3 + 1], y1.data()[7 * 3 + 1]);
    }

    proptest! {
        #[test]
        fn combine_is_associative(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| ScanElement {
                a: Tensor::uniform(&[3, 4], 0.0, 1.0, rng),
                b: Tensor::randn(&[3, 4], rng),
            };
            let (p, q, r) = (mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let left = scan_combine(&scan_combine(&p, &q).unwrap(), &r).unwrap();
            let right = scan_combine(&p, &scan_combine(&q, &r).unwrap()).unwrap();
            prop_assert!(left.a.max_abs_diff(&right.a).unwrap() < 1e-12);
            prop_assert!(left.b.max_abs_diff(&right.b).unwrap() < 1e-12);
        }

        #[test]
        fn states_respect_geometric_bound(seed in any::<u64>(), l in 1usize..64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inp = random_inputs(&mut rng, 1, l, 3, 4);
            let (abar, bbar) = discretize(&inp.a, &inp.delta, &inp.b_sel).unwrap();
            let mut sup_bu: f64 = 0.0;
            for row in 0..l {
                for ch in 0..3 {
                    for s in 0..4 {
                        let i = (row * 3 + ch) * 4 + s;
                        sup_bu = sup_bu.max((bbar.data()[i] * inp.u.data()[row * 3 + ch]).abs());
                    }
                }
            }
            let max_a = abar.data().iter().cloned().fold(0.0, f64::max);
            let bound = sup_bu / (1.0 - max_a);
            let h = selective_scan_states(&inp, ScanMode::Sequential).unwrap();
            prop_assert!(h.max_abs() <= bound * (1.0 + 1e-12));
        }

        #[test]
        fn chunk_size_does_not_change_result(seed in any::<u64>(), l in 1usize..80, chunk in 1usize..20) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inp = random_inputs(&mut rng, 1, l, 2, 3);
            let seq = selective_scan_sequential(&inp).unwrap();
            let par = selective_scan_parallel(&inp, chunk).unwrap();
            prop_assert!(par.max_abs_diff(&seq).unwrap() < 1e-10);
        }

        #[test]
        fn convolution_matches_recurrence(seed in any::<u64>(), l in 1usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (e, n) = (3, 4);
            let dt = Tensor::uniform(&[e], 0.01, 0.5, &mut rng);
            let bv = Tensor::randn(&[n], &mut rng);
            let cv = Tensor::randn(&[n], &mut rng);
            let inp = SsmInputs {
                u: Tensor::randn(&[1, l, e], &mut rng),
                delta: Tensor::from_raw(vec![1, l, e], (0..l).flat_map(|_| dt.data().to_vec()).collect()),
                a: Tensor::uniform(&[e, n], -2.0, -0.05, &mut rng),
                b_sel: Tensor::from_raw(vec![1, l, n], (0..l).flat_map(|_| bv.data().to_vec()).collect()),
                c_sel: Tensor::from_raw(vec![1, l, n], (0..l).flat_map(|_| cv.data().to_vec()).collect()),
                d: Tensor::zeros(&[e]),
            };
            let mut abar = vec![0.0; e * n];
            let mut bbar = vec![0.0; e * n];
            for ch in 0..e {
                for s in 0..n {
                    abar[ch * n + s] = (dt.data()[ch] * inp.a.data()[ch * n + s]).exp();
                    bbar[ch * n + s] = dt.data()[ch] * bv.data()[s];
                }
            }
            let k = lti_kernel(&Tensor::from_raw(vec![e, n], abar), &Tensor::from_raw(vec![e, n], bbar), &cv, l).unwrap();
            let conv = lti_apply(&inp.u, &k).unwrap();
            let rec = selective_scan_sequential(&inp).unwrap();
            prop_assert!(conv.max_abs_diff(&rec).unwrap() < 1e-8);
        }
    }
}
