use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Float;

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Normalization running statistics are stored but not optimized.
    pub trainable: bool,
}

/// Flat, named storage for every weight and buffer of a network.
///
/// Layers keep [`ParamId`]s; the store owns the arrays so the same layer
/// graph can be evaluated immutably (inference) or updated by the optimizer.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: String,
        shape: Vec<usize>,
        value: Vec<T>,
        trainable: bool,
    ) -> ParamId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = if trainable {
            vec![T::zero(); value.len()]
        } else {
            Vec::new()
        };
        self.entries.push(ParamEntry {
            name,
            shape,
            value,
            grad,
            trainable,
        });
        ParamId(self.entries.len() - 1)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].value
    }

    #[inline]
    pub fn grad_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].grad
    }

    /// Moves a gradient buffer out so it can be written while values are borrowed.
    pub fn take_grad(&mut self, id: ParamId) -> Vec<T> {
        std::mem::take(&mut self.entries[id.0].grad)
    }

    pub fn restore_grad(&mut self, id: ParamId, grad: Vec<T>) {
        self.entries[id.0].grad = grad;
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].grad
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    /// Number of trainable scalars (weights, biases, normalization affine terms).
    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Overwrites values from `(name, shape, data)` triples; every stored entry must be supplied.
    pub fn load_named<'a>(
        &mut self,
        arrays: impl IntoIterator<Item = (&'a str, &'a [usize], &'a [f32])>,
    ) -> Result<()> {
        let mut seen = vec![false; self.entries.len()];
        for (name, shape, data) in arrays {
            let id = self
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected array {name}")))?;
            let entry = &mut self.entries[id.0];
            if entry.shape != shape {
                return Err(Error::Checkpoint(format!(
                    "array {name} has shape {:?}, model expects {:?}",
                    shape, entry.shape
                )));
            }
            for (dst, &src) in entry.value.iter_mut().zip(data) {
                *dst = T::of(src as f64);
            }
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Checkpoint(format!(
                "array {} missing",
                self.entries[missing].name
            )));
        }
        Ok(())
    }
}

/// Registers parameters under a hierarchical name prefix while a network is assembled.
pub struct Builder<'a, T> {
    pub(crate) store: &'a mut ParamStore<T>,
    pub(crate) rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Float> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder {
            store,
            rng,
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    /// Runs `f` with `name` appended to the prefix.
    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push(name);
        let r = f(self);
        self.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    /// He-uniform initialization: U(-b, b) with b = sqrt(6 / fan_in).
    pub fn fan_in_uniform(&mut self, leaf: &str, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = (6.0 / fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let value = (0..n)
            .map(|_| T::of(self.rng.random_range(-bound..bound)))
            .collect();
        let name = self.full_name(leaf);
        self.store.add(name, shape, value, true)
    }

    pub fn constant(
        &mut self,
        leaf: &str,
        shape: Vec<usize>,
        value: f64,
        trainable: bool,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let name = self.full_name(leaf);
        self.store
            .add(name, shape, vec![T::of(value); n], trainable)
    }
}
