use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::array::{Array, Float};
use super::graph::{Gradients, Graph, Var};

/// Whether a network's parameters take part in the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Trainable,
    Frozen,
}

/// Named parameter arrays of one network. Every name is prefixed with the
/// network's scope when bound into a graph, e.g. `gen_tar/up0.w`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Float> {
    scope: String,
    tensors: BTreeMap<String, Arc<Array<T>>>,
}

impl<T: Float> ParamSet<T> {
    pub fn new(scope: impl Into<String>) -> Self {
        Self {
            scope: scope.into(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn scope(&self) -> &str {
        &self.scope
    }

    /// Same arrays under a different scope (used for warm starts).
    pub fn rescoped(&self, scope: impl Into<String>) -> Self {
        Self {
            scope: scope.into(),
            tensors: self.tensors.clone(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array<T>) {
        self.tensors.insert(name.into(), Arc::new(value));
    }

    /// He-normal weight for a layer with `fan_in` inputs.
    pub fn insert_he<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) {
        let std = (2.0 / fan_in as f64).sqrt();
        self.insert(name, Array::randn(shape, std, rng));
    }

    /// `self ← decay·self + (1 − decay)·other`, name by name.
    pub fn blend(&mut self, other: &ParamSet<T>, decay: T) {
        let keep = T::one() - decay;
        for (name, value) in &other.tensors {
            let slot = Arc::make_mut(self.tensors.get_mut(name).expect("same parameter names"));
            for (a, &b) in slot.data_mut().iter_mut().zip(value.data()) {
                *a = decay * *a + keep * b;
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array<T>> {
        self.tensors.get(name).map(|a| a.as_ref())
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array<T>> {
        self.tensors.get_mut(name).map(Arc::make_mut)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|a| a.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|a| a.all_finite())
    }

    pub fn qualified(&self, name: &str) -> String {
        format!("{}/{}", self.scope, name)
    }

    /// Binds `name` into `graph` as a trainable leaf or a constant.
    pub fn bind<'g>(&self, graph: &'g Graph<T>, name: &str, mode: Mode) -> Var<'g, T> {
        let value = self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter {} missing", self.qualified(name)));
        match mode {
            Mode::Trainable => graph.param(&self.qualified(name), value),
            Mode::Frozen => graph.constant_arc(value.clone()),
        }
    }

    /// True when `grads` holds an entry for any parameter of this set.
    pub fn has_gradient(&self, grads: &Gradients<T>) -> bool {
        self.tensors
            .keys()
            .any(|n| grads.get(&self.qualified(n)).is_some())
    }
}

/// Adaptive-moment optimizer state for one [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Float> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Array<T>>,
    second: BTreeMap<String, Array<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter of `params` that has a gradient.
    pub fn update(&mut self, params: &mut ParamSet<T>, grads: &Gradients<T>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let (one, eps) = (T::one(), T::lit(self.eps));
        let step_size = T::lit(self.lr / bc1);
        let bc2_sqrt = T::lit(bc2.sqrt());
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&params.qualified(&name)) else {
                continue;
            };
            let m = self
                .first
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            let v = self
                .second
                .entry(name.clone())
                .or_insert_with(|| Array::zeros(g.shape()));
            let p = params.get_mut(&name).expect("parameter present");
            for (((pv, mv), vv), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                *pv -= step_size * *mv / (vv.sqrt() / bc2_sqrt + eps);
            }
        }
    }

    /// Moment buffers as `(kind, name, array)` triples for serialization.
    pub fn moments(&self) -> impl Iterator<Item = (&'static str, &str, &Array<T>)> {
        self.first
            .iter()
            .map(|(k, v)| ("m", k.as_str(), v))
            .chain(self.second.iter().map(|(k, v)| ("v", k.as_str(), v)))
    }

    pub fn set_moment(&mut self, kind: &str, name: &str, value: Array<T>) {
        let map = if kind == "m" {
            &mut self.first
        } else {
            &mut self.second
        };
        map.insert(name.to_string(), value);
    }
}
