//! Named parameter storage and per-tape binding.

use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Which loss a parameter is optimized by.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    /// Shared encoder; receives both task gradients.
    Shared,
    /// Main (classification) branch only.
    Main,
    /// Self-supervised branch only.
    Ssl,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Mat,
    pub group: Group,
    /// Fixed 0/1 support; entries outside it are structurally zero.
    pub support: Option<Arc<Mat>>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

/// Triangular support patterns for square weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Support {
    Full,
    /// `(r, c)` allowed iff `r >= c`.
    Lower,
    /// `(r, c)` allowed iff `r <= c`.
    Upper,
}

impl Support {
    pub fn mask(self, rows: usize, cols: usize) -> Option<Arc<Mat>> {
        match self {
            Support::Full => None,
            Support::Lower => Some(Arc::new(Mat::from_fn(rows, cols, |r, c| {
                if r >= c {
                    1.0
                } else {
                    0.0
                }
            }))),
            Support::Upper => Some(Arc::new(Mat::from_fn(rows, cols, |r, c| {
                if r <= c {
                    1.0
                } else {
                    0.0
                }
            }))),
        }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat, group: Group, support: Support) -> ParamId {
        let support = support.mask(value.rows, value.cols);
        let mut value = value;
        if let Some(m) = &support {
            value = value.zip_map(m, |v, s| v * s);
        }
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
            group,
            support,
        });
        ParamId(self.entries.len() - 1)
    }

    /// Uniform `(-bound, bound)` initialization restricted to `support`.
    pub fn add_uniform<R: Rng>(
        &mut self,
        rng: &mut R,
        name: impl Into<String>,
        (rows, cols): (usize, usize),
        bound: f64,
        group: Group,
        support: Support,
    ) -> ParamId {
        let value = Mat::from_fn(rows, cols, |_, _| {
            if bound > 0.0 {
                rng.gen_range(-bound..bound)
            } else {
                0.0
            }
        });
        self.add(name, value, group, support)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Mat {
        &self.entries[id.0].value
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    /// Overwrite a value; entries off the support are forced back to zero.
    pub fn set(&mut self, id: ParamId, value: Mat) {
        let e = &mut self.entries[id.0];
        assert_eq!(e.value.shape(), value.shape(), "parameter {} shape change", e.name);
        e.value = match &e.support {
            Some(m) => value.zip_map(m, |v, s| v * s),
            None => value,
        };
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Mat> {
        self.entries.iter_mut().map(|e| &mut e.value)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|e| e.value.is_finite())
    }
}

/// A tape plus the mapping from parameters to the leaves that carry them.
pub struct Binder<'a> {
    pub tape: Tape,
    store: &'a ParamStore,
    leaves: Vec<Option<(Var, Var)>>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            leaves: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// The effective (support-masked) value of a parameter on this tape.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some((_, eff)) = self.leaves[id.0] {
            return eff;
        }
        let entry = self.store.entry(id);
        let leaf = self.tape.leaf(entry.value.clone());
        let eff = match &entry.support {
            Some(m) => self.tape.mul_const(leaf, m.clone()),
            None => leaf,
        };
        self.leaves[id.0] = Some((leaf, eff));
        eff
    }

    /// Bind every parameter to an existing leaf, in store order. Used when the
    /// caller owns the leaves (finite-difference checks).
    pub fn bind_external(&mut self, leaves: &[Var]) {
        assert_eq!(leaves.len(), self.store.len(), "one leaf per parameter");
        for (k, &leaf) in leaves.iter().enumerate() {
            let eff = match &self.store.entries[k].support {
                Some(m) => self.tape.mul_const(leaf, m.clone()),
                None => leaf,
            };
            self.leaves[k] = Some((leaf, eff));
        }
    }

    /// Per-parameter gradients from a backward sweep; unbound or untouched
    /// parameters get `None`.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Mat>> {
        self.leaves
            .iter()
            .map(|slot| slot.and_then(|(leaf, _)| grads.get(leaf).cloned()))
            .collect()
    }

    pub fn backward_params(&self, root: Var) -> Vec<Option<Mat>> {
        let g = self.tape.backward(root);
        self.param_grads(&g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn support_is_enforced_on_add_and_set() {
        let mut s = ParamStore::new();
        let id = s.add("w", Mat::filled(3, 3, 1.0), Group::Shared, Support::Lower);
        assert_eq!(s.get(id).get(0, 2), 0.0);
        assert_eq!(s.get(id).get(2, 0), 1.0);
        s.set(id, Mat::filled(3, 3, 5.0));
        assert_eq!(s.get(id).get(1, 2), 0.0);
        assert_eq!(s.find("w"), Some(id));
    }

    #[test]
    fn binder_masks_gradients() {
        let mut s = ParamStore::new();
        let id = s.add("w", Mat::filled(2, 2, 1.0), Group::Main, Support::Upper);
        let mut b = Binder::new(&s);
        let w = b.param(id);
        let again = b.param(id);
        assert_eq!(w, again);
        let sum = b.tape.sum(w);
        let g = b.backward_params(sum);
        let gw = g[0].as_ref().unwrap();
        assert_eq!(gw.data, vec![1.0, 1.0, 0.0, 1.0]);
    }
}
