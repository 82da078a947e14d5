//! Named trainable parameter storage shared by all models.
//!
//! Parameters persist across training epochs as plain matrices; each loss
//! evaluation binds them onto a fresh [`Graph`]. Frozen entries are bound as
//! constants so no gradient ever reaches them and their bits never change.

use alloc::string::String;
use alloc::string::ToString;
use alloc::vec::Vec;

use crate::graph::{Graph, Var};
use crate::matrix::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamRef(usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Matrix,
    pub trainable: bool,
}

/// Ordered collection of named parameters. Declaration order is the
/// serialization order of checkpoints.
#[derive(Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: &str, value: Matrix) -> ParamRef {
        self.push(name, value, true)
    }

    pub fn add_frozen(&mut self, name: &str, value: Matrix) -> ParamRef {
        self.push(name, value, false)
    }

    fn push(&mut self, name: &str, value: Matrix, trainable: bool) -> ParamRef {
        assert!(
            self.entries.iter().all(|e| e.name != name),
            "duplicate parameter name {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
        });
        ParamRef(self.entries.len() - 1)
    }

    pub fn freeze(&mut self, p: ParamRef) {
        self.entries[p.0].trainable = false;
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

    pub fn value(&self, p: ParamRef) -> &Matrix {
        &self.entries[p.0].value
    }

    pub fn set_value(&mut self, p: ParamRef, value: Matrix) {
        self.set_value_at(p.0, value);
    }

    pub(crate) fn set_value_at(&mut self, index: usize, value: Matrix) {
        assert_eq!(self.entries[index].value.shape(), value.shape());
        self.entries[index].value = value;
    }

    pub fn by_name(&self, name: &str) -> Option<ParamRef> {
        self.entries
            .iter()
            .position(|e| e.name == name)
            .map(ParamRef)
    }

    /// Bind every entry onto `g`: trainable entries as parameters, frozen
    /// ones as constants.
    pub fn bind(&self, g: &Graph) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    g.param(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Total scalar count across all entries.
    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// All parameter values flattened in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_scalars());
        for e in &self.entries {
            out.extend_from_slice(e.value.data());
        }
        out
    }

    /// Trainable entries only, flattened in declaration order.
    pub fn flatten_trainable(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for e in &self.entries {
            if e.trainable {
                out.extend_from_slice(e.value.data());
            }
        }
        out
    }

    /// Restore trainable entries from [`ParamStore::flatten_trainable`].
    pub fn load_flat_trainable(&mut self, flat: &[f64]) -> crate::Result<()> {
        let expected: usize = self
            .entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum();
        if flat.len() != expected {
            return Err(crate::Error::LengthMismatch {
                expected,
                got: flat.len(),
            });
        }
        let mut at = 0;
        for e in &mut self.entries {
            if !e.trainable {
                continue;
            }
            let n = e.value.len();
            let (r, c) = e.value.shape();
            e.value = Matrix::from_vec(r, c, flat[at..at + n].to_vec());
            at += n;
        }
        Ok(())
    }

    /// Restore values from a flat array produced by [`ParamStore::flatten`].
    pub fn load_flat(&mut self, flat: &[f64]) -> crate::Result<()> {
        if flat.len() != self.n_scalars() {
            return Err(crate::Error::LengthMismatch {
                expected: self.n_scalars(),
                got: flat.len(),
            });
        }
        let mut at = 0;
        for e in &mut self.entries {
            let n = e.value.len();
            let (r, c) = e.value.shape();
            e.value = Matrix::from_vec(r, c, flat[at..at + n].to_vec());
            at += n;
        }
        Ok(())
    }
}

/// Parameter handles bound to one graph.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, p: ParamRef) -> &Var {
        &self.vars[p.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
