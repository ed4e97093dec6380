use std::cell::RefCell;
use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::array::Array;
use crate::var::{Gradients, Var};

static NEXT_PARAM: AtomicU64 = AtomicU64::new(1);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(u64);

impl ParamId {
    fn fresh() -> Self {
        ParamId(NEXT_PARAM.fetch_add(1, Ordering::Relaxed))
    }
}

/// A named trainable tensor. Every instance, clones included, carries its
/// own id so that a forward context can tell parameters apart.
#[derive(Debug)]
pub struct Param {
    id: ParamId,
    name: String,
    value: Array,
}

impl Clone for Param {
    fn clone(&self) -> Self {
        Self {
            id: ParamId::fresh(),
            name: self.name.clone(),
            value: self.value.clone(),
        }
    }
}

impl Param {
    pub fn new(name: impl Into<String>, value: Array) -> Self {
        Self {
            id: ParamId::fresh(),
            name: name.into(),
            value,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Array {
        &mut self.value
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Per-forward bookkeeping: hands out one graph leaf per parameter and
/// records which parameters a computation read.
pub struct Ctx {
    track_grads: bool,
    loaded: RefCell<BTreeMap<ParamId, Var>>,
}

impl Default for Ctx {
    fn default() -> Self {
        Self::new()
    }
}

impl Ctx {
    /// Context whose parameter leaves receive gradients.
    pub fn new() -> Self {
        Self {
            track_grads: true,
            loaded: RefCell::new(BTreeMap::new()),
        }
    }

    /// Context for inference: parameters enter the graph as constants.
    pub fn no_grad() -> Self {
        Self {
            track_grads: false,
            loaded: RefCell::new(BTreeMap::new()),
        }
    }

    pub fn tracks_grads(&self) -> bool {
        self.track_grads
    }

    pub fn param(&self, p: &Param) -> Var {
        self.loaded
            .borrow_mut()
            .entry(p.id())
            .or_insert_with(|| {
                if self.track_grads {
                    Var::leaf(p.value().clone())
                } else {
                    Var::constant(p.value().clone())
                }
            })
            .clone()
    }

    /// Ids of every parameter read through this context, ascending.
    pub fn accessed(&self) -> Vec<ParamId> {
        self.loaded.borrow().keys().copied().collect()
    }

    pub fn grad(&self, grads: &Gradients, p: &Param) -> Option<Array> {
        self.loaded
            .borrow()
            .get(&p.id())
            .and_then(|v| grads.get(v))
            .cloned()
    }
}
