use rand::Rng;

use crate::autodiff::Graph;
use crate::error::Result;
use crate::mamba::affine;
use crate::params::{impl_parameters, uniform_fan_in};
use crate::tensor::Tensor;

/// Query, key, value and output projections, each with a bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MhsaParams {
    pub w_q: Tensor,
    pub b_q: Tensor,
    pub w_k: Tensor,
    pub b_k: Tensor,
    pub w_v: Tensor,
    pub b_v: Tensor,
    pub w_o: Tensor,
    pub b_o: Tensor,
}

impl_parameters!(MhsaParams {
    w_q as "W_q",
    b_q,
    w_k as "W_k",
    b_k,
    w_v as "W_v",
    b_v,
    w_o as "W_o",
    b_o,
});

impl MhsaParams {
    pub fn init<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let mut w = || uniform_fan_in(&[d, d], d, rng);
        let (w_q, w_k, w_v, w_o) = (w(), w(), w(), w());
        let b = || Tensor::zeros(&[d]);
        Self { w_q, b_q: b(), w_k, b_k: b(), w_v, b_v: b(), w_o, b_o: b() }
    }
}

/// Scaled dot-product attention over `heads` column groups, then the output projection.
pub fn mhsa_forward<G: Graph>(g: &mut G, h: &G::T, p: &MhsaParams, heads: usize, causal: bool) -> Result<G::T> {
    let q = affine(g, h, &p.w_q, &p.b_q)?;
    let k = affine(g, h, &p.w_k, &p.b_k)?;
    let v = affine(g, h, &p.w_v, &p.b_v)?;
    let mixed = g.attention(&q, &k, &v, heads, causal)?;
    affine(g, &mixed, &p.w_o, &p.b_o)
}
