//! Neural-network substrate: autodiff graph, parameter store, optimizer.

pub mod graph;
pub mod optim;

use crate::error::{Error, Result};
use graph::{Graph, Mat, Var};
use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Index of a parameter inside a [`ParamStore`].
pub type ParamId = usize;

/// Per-parameter gradients, indexed by [`ParamId`].
pub type Grads = Vec<Option<Mat>>;

/// Named, ordered collection of learnable parameters.
///
/// Insertion order is the canonical order used by checkpoints, so models must
/// define parameters deterministically.
#[derive(Clone)]
pub struct ParamStore {
    entries: IndexMap<String, Arc<Mat>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            entries: IndexMap::new(),
        }
    }

    pub fn define(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(
            !self.entries.contains_key(name),
            "parameter {name} defined twice"
        );
        self.entries.insert(name.to_string(), Arc::new(value));
        self.entries.len() - 1
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.entries
            .get_index_of(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        self.entries.get_index(id).expect("param id in range").0
    }

    pub fn value(&self, id: ParamId) -> &Arc<Mat> {
        self.entries.get_index(id).expect("param id in range").1
    }

    pub fn set(&mut self, id: ParamId, value: Mat) {
        let slot = self
            .entries
            .get_index_mut(id)
            .expect("param id in range")
            .1;
        *slot = Arc::new(value);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Arc<Mat>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar parameters.
    pub fn n_scalars(&self) -> usize {
        self.entries.values().map(|m| m.len()).sum()
    }

    /// Round every parameter to f32 precision. Keeping the live state on the
    /// f32 grid makes checkpoint round-trips bit-identical.
    pub fn quantize_f32(&mut self) {
        for (_, v) in self.entries.iter_mut() {
            let q = v.mapv(|x| x as f32 as f64);
            *v = Arc::new(q);
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in +-sqrt(1/fan_in), the usual dense-layer default.
    FanIn,
    Zeros,
    Const(f64),
}

pub fn init_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, init: Init) -> Mat {
    match init {
        Init::FanIn => {
            let bound = (1.0 / rows as f64).sqrt();
            Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
        }
        Init::Zeros => Mat::zeros((rows, cols)),
        Init::Const(c) => Mat::from_elem((rows, cols), c),
    }
}

/// Dense layer handle: a weight matrix (in x out) and an optional bias row.
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn define(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Linear {
        let w = store.define(&format!("{name}.w"), init_matrix(rng, din, dout, init));
        let b = Some(store.define(&format!("{name}.b"), Mat::zeros((1, dout))));
        Linear { w, b }
    }

    pub fn define_no_bias(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        din: usize,
        dout: usize,
        init: Init,
    ) -> Linear {
        let w = store.define(&format!("{name}.w"), init_matrix(rng, din, dout, init));
        Linear { w, b: None }
    }

    pub fn resolve(store: &ParamStore, name: &str, bias: bool) -> Result<Linear> {
        Ok(Linear {
            w: store.id(&format!("{name}.w"))?,
            b: if bias {
                Some(store.id(&format!("{name}.b"))?)
            } else {
                None
            },
        })
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param_leaf(store.value(self.w).clone(), self.w);
        let y = g.matmul(x, w);
        match self.b {
            Some(b) => {
                let bias = g.param_leaf(store.value(b).clone(), b);
                g.add_row(y, bias)
            }
            None => y,
        }
    }
}

/// Merge gradients element-wise (right into left), used for batch reduction.
pub fn merge_grads(into: &mut Grads, from: Grads) {
    if into.is_empty() {
        *into = from;
        return;
    }
    assert_eq!(into.len(), from.len());
    for (a, b) in into.iter_mut().zip(from) {
        match (a.as_mut(), b) {
            (Some(x), Some(y)) => *x += &y,
            (None, Some(y)) => *a = Some(y),
            _ => {}
        }
    }
}

/// Scale all gradients in place (e.g. 1/batch for averaging).
pub fn scale_grads(grads: &mut Grads, factor: f64) {
    for g in grads.iter_mut().flatten() {
        g.mapv_inplace(|v| v * factor);
    }
}

/// True when any gradient entry is non-finite.
pub fn grads_non_finite(grads: &Grads) -> bool {
    grads
        .iter()
        .flatten()
        .any(|g| g.iter().any(|v| !v.is_finite()))
}
