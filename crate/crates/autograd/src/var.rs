use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::array::Array;
use crate::error::{Result, TensorError};

static NEXT_NODE: AtomicU64 = AtomicU64::new(1);

/// Backward rule of an op: given the gradient of the op output, the output
/// value and the op inputs, return one optional gradient per input.
pub type BackwardFn = Box<dyn Fn(&Array, &Array, &[Var]) -> Vec<Option<Array>>>;

struct Op {
    parents: Vec<Var>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    value: Array,
    requires_grad: bool,
    op: Option<Op>,
}

/// A node of the computation graph. Cloning is cheap (reference counted).
///
/// Node ids grow monotonically, so every op's inputs carry smaller ids than
/// the op itself; backward visits nodes in descending id order.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.0.id)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

impl Var {
    fn make(value: Array, requires_grad: bool, op: Option<Op>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_NODE.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            op,
        }))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(value: Array) -> Self {
        Self::make(value, false, None)
    }

    /// Leaf that receives a gradient.
    pub fn leaf(value: Array) -> Self {
        Self::make(value, true, None)
    }

    /// Build an op node. When no input requires a gradient the backward
    /// rule is dropped and the result is a constant.
    pub fn from_op(
        value: Array,
        parents: Vec<Var>,
        backward: impl Fn(&Array, &Array, &[Var]) -> Vec<Option<Array>> + 'static,
    ) -> Self {
        if parents.iter().any(Var::requires_grad) {
            Self::make(
                value,
                true,
                Some(Op {
                    parents,
                    backward: Box::new(backward),
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn value(&self) -> &Array {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        self.0.value.dims4()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Scalar value of a one-element var.
    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self) -> Result<Gradients> {
        if self.0.value.len() != 1 {
            return Err(TensorError::NonScalarBackward(self.shape().to_vec()));
        }
        let mut grads: HashMap<u64, Array> = HashMap::new();
        let mut leaves: HashMap<u64, Array> = HashMap::new();
        if !self.requires_grad() {
            return Ok(Gradients { leaves });
        }

        let mut order: Vec<Var> = Vec::new();
        let mut seen: HashSet<u64> = HashSet::new();
        let mut stack = vec![self.clone()];
        while let Some(v) = stack.pop() {
            if !seen.insert(v.id()) {
                continue;
            }
            if let Some(op) = &v.0.op {
                for p in &op.parents {
                    if p.requires_grad() && !seen.contains(&p.id()) {
                        stack.push(p.clone());
                    }
                }
            }
            order.push(v);
        }
        order.sort_by_key(|v| std::cmp::Reverse(v.id()));

        grads.insert(self.id(), Array::ones(self.shape()));
        for v in order {
            let Some(g) = grads.remove(&v.id()) else {
                continue;
            };
            match &v.0.op {
                None => {
                    leaves.insert(v.id(), g);
                }
                Some(op) => {
                    let parent_grads = (op.backward)(&g, &v.0.value, &op.parents);
                    debug_assert_eq!(parent_grads.len(), op.parents.len());
                    for (p, pg) in op.parents.iter().zip(parent_grads) {
                        let Some(pg) = pg else { continue };
                        if !p.requires_grad() {
                            continue;
                        }
                        debug_assert_eq!(pg.shape(), p.shape());
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.add_assign(&pg),
                            None => {
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { leaves })
    }
}

/// Gradients of a scalar with respect to every reachable leaf.
#[derive(Debug, Default)]
pub struct Gradients {
    leaves: HashMap<u64, Array>,
}

impl Gradients {
    pub fn get(&self, leaf: &Var) -> Option<&Array> {
        self.leaves.get(&leaf.id())
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}
