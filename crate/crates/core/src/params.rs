//! Named parameter traversal, initialization helpers and checkpoints.
//!
//! A checkpoint directory holds one `<name>.bin` per tensor in the binary
//! tensor format plus `manifest.json`: `{"config": .., "tensors": {name: shape}}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;

/// Anything that owns learnable tensors under stable names.
///
/// Traversal order is fixed; optimizers and flattening rely on it.
pub trait Parameters {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor));
    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor));

    fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }

    /// Number of learnable scalars.
    fn num_scalars(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.len());
        n
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    match (prefix.is_empty(), name.is_empty()) {
        (true, _) => name.to_string(),
        (_, true) => prefix.to_string(),
        _ => format!("{prefix}.{name}"),
    }
}

impl Parameters for Tensor {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f(String::new(), self)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f(String::new(), self)
    }
}

impl<P: Parameters> Parameters for Option<P> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        if let Some(p) = self {
            p.visit(f)
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        if let Some(p) = self {
            p.visit_mut(f)
        }
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&mut |n, t| f(join(&i.to_string(), &n), t));
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&mut |n, t| f(join(&i.to_string(), &n), t));
        }
    }
}

/// Implements [`Parameters`] for a struct by listing its fields in order.
/// `field as "name"` renames; `field suffix "_fwd"` appends to child names.
macro_rules! impl_parameters {
    ($ty:ty { $($field:ident $(as $name:literal)? $(suffix $sfx:literal)?),* $(,)? }) => {
        impl $crate::params::Parameters for $ty {
            fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a $crate::tensor::Tensor)) {
                $(
                    let label = impl_parameters!(@label $field $(as $name)?);
                    let sfx: Option<&str> = impl_parameters!(@sfx $($sfx)?);
                    self.$field.visit(&mut |n, t| f($crate::params::suffixed(label, &n, sfx), t));
                )*
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut $crate::tensor::Tensor)) {
                $(
                    let label = impl_parameters!(@label $field $(as $name)?);
                    let sfx: Option<&str> = impl_parameters!(@sfx $($sfx)?);
                    self.$field.visit_mut(&mut |n, t| f($crate::params::suffixed(label, &n, sfx), t));
                )*
            }
        }
    };
    (@label $field:ident as $name:literal) => { $name };
    (@label $field:ident) => { stringify!($field) };
    (@sfx $sfx:literal) => { Some($sfx) };
    (@sfx) => { None };
}
pub(crate) use impl_parameters;

/// Child naming: a suffix replaces the path prefix (`W_x` -> `W_x_fwd`;
/// `suffix ""` flattens), otherwise the label becomes a dotted prefix.
pub fn suffixed(label: &str, child: &str, sfx: Option<&str>) -> String {
    match sfx {
        Some(s) => format!("{child}{s}"),
        None => join(label, child),
    }
}

/// Copies all parameter values into one vector in traversal order.
pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit(&mut |_, t| out.extend_from_slice(t.data()));
    out
}

/// Inverse of [`flatten`].
pub fn unflatten<P: Parameters + ?Sized>(p: &mut P, theta: &[f64]) -> Result<()> {
    let mut off = 0;
    let mut short = false;
    p.visit_mut(&mut |_, t| {
        let n = t.len();
        if off + n <= theta.len() {
            t.data_mut().copy_from_slice(&theta[off..off + n]);
        } else {
            short = true;
        }
        off += n;
    });
    if short || off != theta.len() {
        return Err(dim_err!("parameter vector has {} values, model needs {off}", theta.len()));
    }
    Ok(())
}

/// Stable RNG stream for `(stream, seed)`.
pub fn seeded_rng(stream: &str, seed: u64) -> ChaCha8Rng {
    // FNV-1a over the stream name, mixed with the seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stream.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Uniform `+-1/sqrt(fan_in)` initialization.
pub fn uniform_fan_in<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

pub fn save_checkpoint<P: Parameters + ?Sized, C: Serialize>(dir: &Path, params: &P, config: &C) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut shapes = BTreeMap::new();
    for (name, t) in params.named() {
        if shapes.insert(name.clone(), t.shape().to_vec()).is_some() {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        t.write_binary(fs::File::create(dir.join(format!("{name}.bin")))?)?;
    }
    let manifest = serde_json::json!({ "config": config, "tensors": shapes });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Loads tensors into an already-shaped parameter set; every name must exist
/// with a matching shape.
pub fn load_checkpoint<P: Parameters + ?Sized>(dir: &Path, params: &mut P) -> Result<serde_json::Value> {
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut err = None;
    params.visit_mut(&mut |name, t| {
        if err.is_some() {
            return;
        }
        let loaded = fs::File::open(dir.join(format!("{name}.bin")))
            .map_err(Error::from)
            .and_then(Tensor::read_binary);
        match loaded {
            Ok(v) if v.shape() == t.shape() => *t = v,
            Ok(v) => err = Some(dim_err!("{name}: checkpoint shape {:?}, expected {:?}", v.shape(), t.shape())),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(manifest["config"].clone()),
    }
}
