//! Named weight tensors and the JSON checkpoint container.

use std::path::Path;

use indexmap::IndexMap;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::IcthConfig;
use crate::autograd::{Grads, Mat, Tape, Var};
use crate::{json, Error, Result};

/// Ordered collection of named matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    tensors: IndexMap<String, Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Mat) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Mat> {
        self.tensors.get_mut(name)
    }

    /// Like [`get`](Self::get) but panics on unknown names.
    pub fn tensor(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown tensor `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Mat)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Mat)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Mat::len).sum()
    }

    /// Records every tensor on `tape`, as parameters or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.param(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        Bound { vars }
    }

    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), Mat::zeros(v.raw_dim())))
                .collect(),
        }
    }

    pub(crate) fn check_finite(&self) -> Result<()> {
        for (k, v) in &self.tensors {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("tensor `{k}`")));
            }
        }
        Ok(())
    }
}

/// Tape handles of a bound [`ParamStore`].
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound tensor `{name}`"))
    }

    /// Gradients of every bound tensor, zero where none flowed.
    pub fn gradients(&self, grads: &Grads, store: &ParamStore) -> ParamStore {
        let mut out = ParamStore::new();
        for (name, &v) in &self.vars {
            out.insert(name.clone(), grads.get_or_zeros(v, store.tensor(name)));
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Zero,
    One,
    Normal(f64),
}

fn layout(c: &IcthConfig) -> Vec<(String, (usize, usize), Init)> {
    let d = c.d_m;
    let fan = |n: usize| Init::Normal(1.0 / (n as f64).sqrt());
    let mut out = Vec::new();
    let mut push = |name: String, shape: (usize, usize), init: Init| out.push((name, shape, init));
    for kind in ["duration", "count"] {
        push(format!("mask.{kind}.context_w"), (1, d), Init::Normal(1.0));
        push(format!("mask.{kind}.context_b"), (1, d), Init::Zero);
        push(format!("mask.{kind}.w"), (d, d), fan(d));
        push(format!("mask.{kind}.b"), (1, d), Init::Zero);
    }
    let positions = c.positions();
    for l in 0..c.n_layers {
        for h in 0..c.n_heads {
            push(format!("layers.{l}.heads.{h}.w_q"), (d, c.d_k), fan(d));
            push(format!("layers.{l}.heads.{h}.w_k"), (d, c.d_k), fan(d));
            push(format!("layers.{l}.heads.{h}.w_v"), (d, c.d_v), fan(d));
        }
        push(format!("layers.{l}.proj_e"), (c.linformer_k, positions), fan(c.linformer_k));
        push(format!("layers.{l}.proj_f"), (c.linformer_k, positions), fan(c.linformer_k));
        push(format!("layers.{l}.w_o"), (c.n_heads * c.d_v, d), fan(c.n_heads * c.d_v));
        push(format!("layers.{l}.norm1.gain"), (1, d), Init::One);
        push(format!("layers.{l}.norm1.bias"), (1, d), Init::Zero);
        push(format!("layers.{l}.ffn.w1"), (d, c.d_ff), fan(d));
        push(format!("layers.{l}.ffn.b1"), (1, c.d_ff), Init::Zero);
        push(format!("layers.{l}.ffn.w2"), (c.d_ff, d), fan(c.d_ff));
        push(format!("layers.{l}.ffn.b2"), (1, d), Init::Zero);
        push(format!("layers.{l}.norm2.gain"), (1, d), Init::One);
        push(format!("layers.{l}.norm2.bias"), (1, d), Init::Zero);
    }
    push("intensity.w".into(), (d, 1), fan(d));
    push("intensity.alpha".into(), (1, 1), Init::Zero);
    out
}

/// Names and shapes of every backbone tensor, in checkpoint order.
pub fn tensor_shapes(config: &IcthConfig) -> Vec<(String, (usize, usize))> {
    layout(config).into_iter().map(|(n, s, _)| (n, s)).collect()
}

pub(crate) fn initial(config: &IcthConfig, rng: &mut crate::rng::Rng) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape, init) in layout(config) {
        let m = match init {
            Init::Zero => Mat::zeros(shape),
            Init::One => Mat::ones(shape),
            Init::Normal(sd) => {
                let dist = Normal::new(0.0, sd).expect("positive std");
                Mat::from_shape_simple_fn(shape, || dist.sample(rng))
            }
        };
        store.insert(name, m);
    }
    store
}

pub(crate) fn zeros(config: &IcthConfig) -> ParamStore {
    let mut store = ParamStore::new();
    for (name, shape) in tensor_shapes(config) {
        store.insert(name, Mat::zeros(shape));
    }
    store
}

/// Fresh tensor with entries drawn from `N(0, sd²)`.
pub fn normal_tensor(rng: &mut crate::rng::Rng, shape: (usize, usize), sd: f64) -> Mat {
    Mat::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        sd * z
    })
}

pub const CHECKPOINT_FORMAT: &str = "icth-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: IcthConfig,
    tensors: Vec<TensorEntry>,
    #[serde(default)]
    extras: Vec<TensorEntry>,
}

fn entries(store: &ParamStore) -> Vec<TensorEntry> {
    store
        .iter()
        .map(|(name, m)| TensorEntry {
            name: name.clone(),
            shape: [m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        })
        .collect()
}

fn store_from(entries: Vec<TensorEntry>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for e in entries {
        let [r, c] = e.shape;
        if r.checked_mul(c) != Some(e.data.len()) {
            return Err(Error::Shape {
                name: e.name,
                expected: (r, c),
                found: (e.data.len(), 1),
            });
        }
        if store.get(&e.name).is_some() {
            return Err(Error::invalid(format!("duplicate tensor `{}`", e.name)));
        }
        let m = Mat::from_shape_vec((r, c), e.data).expect("length checked");
        store.insert(e.name, m);
    }
    store.check_finite()?;
    Ok(store)
}

pub(crate) fn encode(config: &IcthConfig, params: &ParamStore, extras: &ParamStore) -> Result<String> {
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: config.clone(),
        tensors: entries(params),
        extras: entries(extras),
    };
    json::to_line(&file)
}

pub(crate) fn decode(text: &str) -> Result<(IcthConfig, ParamStore, ParamStore)> {
    let file: CheckpointFile = serde_json::from_str(text)?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::invalid(format!("unknown checkpoint format `{}`", file.format)));
    }
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::invalid(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    file.config.check()?;
    let params = store_from(file.tensors)?;
    let expected = tensor_shapes(&file.config);
    if params.len() != expected.len() {
        return Err(Error::invalid(format!(
            "checkpoint holds {} tensors, config requires {}",
            params.len(),
            expected.len()
        )));
    }
    for ((name, shape), (found_name, m)) in expected.iter().zip(params.iter()) {
        if name != found_name {
            return Err(Error::invalid(format!("expected tensor `{name}`, found `{found_name}`")));
        }
        if m.dim() != *shape {
            return Err(Error::Shape {
                name: name.clone(),
                expected: *shape,
                found: m.dim(),
            });
        }
    }
    let extras = store_from(file.extras)?;
    Ok((file.config, params, extras))
}

pub(crate) fn read(path: &Path) -> Result<(IcthConfig, ParamStore, ParamStore)> {
    let text = json::read_to_string(path)?;
    decode(&text)
}
