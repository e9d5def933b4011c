//! Named parameter arrays and their binding onto a [`Tape`].

use std::cell::RefCell;
use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Tape, Var};
use crate::tensor::Tensor;

/// Flat `name -> array` map holding every trainable parameter of a model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Names under a dotted prefix such as `"dp."`.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> + 'a {
        self.names().filter(move |n| n.starts_with(prefix))
    }

    /// Set every parameter to zero.
    pub fn zero_all(&mut self) {
        for t in self.params.values_mut() {
            t.data_mut().fill(0.0);
        }
    }
}

/// Initializers used by the model builders.
pub struct Init<'r> {
    rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn new(rng: &'r mut ChaCha8Rng) -> Self {
        Self { rng }
    }

    /// Normal(0, std) truncated to ±2·std by resampling.
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("valid std");
        Tensor::from_fn(shape, |_| loop {
            let v: f64 = normal.sample(self.rng);
            if v.abs() <= 2.0 * std {
                break v;
            }
        })
    }

    /// Normal(0, sqrt(2 / fan_out)) for a `[Cout, Cin/groups, k, k]` convolution.
    pub fn conv_fan_out(&mut self, shape: &[usize], groups: usize) -> Tensor {
        let fan_out = shape[0] * shape[2] * shape[3] / groups;
        let normal = Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("valid std");
        Tensor::from_fn(shape, |_| normal.sample(self.rng))
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), the usual default for small heads.
    pub fn uniform_fan_in(&mut self, shape: &[usize]) -> Tensor {
        let fan_in: usize = shape[1..].iter().product();
        let bound = 1.0 / (fan_in as f64).sqrt();
        Tensor::from_fn(shape, |_| self.rng.random_range(-bound..bound))
    }
}

/// Binds a [`ParamStore`] onto a tape. Each name becomes exactly one leaf,
/// so a parameter used twice (the Siamese encoder) accumulates both gradients.
pub struct Binder<'t, 'p> {
    tape: &'t Tape,
    store: &'p ParamStore,
    bound: RefCell<BTreeMap<String, Var<'t>>>,
    dropout: Option<(f64, RefCell<ChaCha8Rng>)>,
}

impl<'t, 'p> Binder<'t, 'p> {
    pub fn new(tape: &'t Tape, store: &'p ParamStore) -> Self {
        Self {
            tape,
            store,
            bound: RefCell::new(BTreeMap::new()),
            dropout: None,
        }
    }

    /// Enable dropout with the given rate, drawing masks from `rng`.
    pub fn with_dropout(mut self, rate: f64, rng: ChaCha8Rng) -> Self {
        if rate > 0.0 {
            self.dropout = Some((rate, RefCell::new(rng)));
        }
        self
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn store(&self) -> &'p ParamStore {
        self.store
    }

    /// The leaf for `name`.
    ///
    /// Panics when the name is unknown: model code only asks for names its
    /// own builder created.
    pub fn get(&self, name: &str) -> Var<'t> {
        if let Some(v) = self.bound.borrow().get(name) {
            return *v;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
            .clone();
        let var = self.tape.leaf(value);
        self.bound.borrow_mut().insert(name.to_string(), var);
        var
    }

    pub fn try_get(&self, name: &str) -> Option<Var<'t>> {
        self.store.contains(name).then(|| self.get(name))
    }

    /// Names bound so far, in sorted order.
    pub fn bound_names(&self) -> Vec<String> {
        self.bound.borrow().keys().cloned().collect()
    }

    pub fn dropout(&self, x: Var<'t>) -> Var<'t> {
        let Some((rate, rng)) = &self.dropout else {
            return x;
        };
        let keep = 1.0 - rate;
        let mut rng = rng.borrow_mut();
        let mask = Tensor::from_fn(&x.shape(), |_| {
            if rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        });
        x.mul_const(&mask)
    }

    /// Gradients of every bound parameter that the root depended on.
    pub fn gradients(&self, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.bound
            .borrow()
            .iter()
            .filter_map(|(name, var)| grads.get(*var).map(|g| (name.clone(), g.clone())))
            .collect()
    }
}
