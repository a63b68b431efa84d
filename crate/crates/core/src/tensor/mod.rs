//! Dense f64 reverse-mode automatic differentiation.
//!
//! [`Value`] is a shared handle to a node in an acyclic computation graph.
//! Every operation allocates a fresh output node whose backward rule is a
//! closure over the forward inputs; [`Value::backward`] walks the graph once
//! in reverse topological order, accumulating gradients additively into every
//! ancestor that requires them. Graph construction and backward are
//! single-threaded by design.
//!
//! Nodes built from inputs that do not require gradients carry no parent
//! links or rules, so inference-only forwards stay flat.

mod gradcheck;
pub mod ops;

pub use gradcheck::{finite_difference_gradient, max_rel_error};
pub use ops::{concat_cols, concat_scalars, embed_lookup, stack_rows, MASK_NEG};

use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn fresh_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Backward rule: upstream gradient of the output -> one gradient buffer per
/// parent, in parent order. An empty buffer marks a parent that needs none.
type BackwardRule = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    id: u64,
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    parents: Vec<Value>,
    rule: Option<BackwardRule>,
    backward_done: bool,
}

/// Handle to a tensor node. Cloning copies the handle, not the data.
#[derive(Clone)]
pub struct Value {
    inner: Rc<RefCell<Node>>,
}

impl std::fmt::Debug for Value {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let n = self.inner.borrow();
        f.debug_struct("Value")
            .field("id", &n.id)
            .field("shape", &n.shape)
            .field("requires_grad", &n.requires_grad)
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Value {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Value>,
        rule: Option<BackwardRule>,
    ) -> Value {
        debug_assert_eq!(numel_of(&shape), data.len());
        Value {
            inner: Rc::new(RefCell::new(Node {
                id: fresh_id(),
                shape,
                data,
                grad: None,
                requires_grad,
                parents,
                rule,
                backward_done: false,
            })),
        }
    }

    /// Leaf that participates in gradient computation (a parameter).
    pub fn param(data: Vec<f64>, shape: Vec<usize>) -> Value {
        assert_eq!(numel_of(&shape), data.len(), "data length must match shape");
        Value::new_node(shape, data, true, Vec::new(), None)
    }

    /// Leaf that never receives gradients.
    pub fn constant(data: Vec<f64>, shape: Vec<usize>) -> Value {
        assert_eq!(numel_of(&shape), data.len(), "data length must match shape");
        Value::new_node(shape, data, false, Vec::new(), None)
    }

    pub fn scalar(x: f64) -> Value {
        Value::constant(vec![x], vec![])
    }

    pub fn zeros(shape: Vec<usize>) -> Value {
        let n = numel_of(&shape);
        Value::constant(vec![0.0; n], shape)
    }

    /// Output node of an operation. Gradient linkage is dropped entirely when
    /// no parent requires it.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        parents: Vec<Value>,
        rule: impl Fn(&[f64]) -> Vec<Vec<f64>> + 'static,
    ) -> Value {
        let needs = parents.iter().any(Value::requires_grad);
        if needs {
            Value::new_node(shape, data, true, parents, Some(Box::new(rule)))
        } else {
            Value::new_node(shape, data, false, Vec::new(), None)
        }
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.borrow().shape)
    }

    pub fn ndim(&self) -> usize {
        self.inner.borrow().shape.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    /// Toggle gradient participation of a leaf. Used to freeze parameter
    /// groups between training stages.
    pub fn set_requires_grad(&self, flag: bool) {
        let mut n = self.inner.borrow_mut();
        assert!(
            n.parents.is_empty(),
            "requires_grad can only be toggled on leaves"
        );
        n.requires_grad = flag;
    }

    /// Borrow the raw data.
    pub fn data(&self) -> Ref<'_, [f64]> {
        Ref::map(self.inner.borrow(), |n| n.data.as_slice())
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.borrow().data.clone()
    }

    /// Scalar payload. Panics when the node is not a scalar.
    pub fn item(&self) -> f64 {
        let n = self.inner.borrow();
        assert_eq!(numel_of(&n.shape), 1, "item() on non-scalar {:?}", n.shape);
        n.data[0]
    }

    /// Overwrite leaf data in place (optimizer updates, finite differences).
    pub fn set_data(&self, data: &[f64]) {
        let mut n = self.inner.borrow_mut();
        assert_eq!(n.data.len(), data.len(), "set_data length mismatch");
        n.data.copy_from_slice(data);
    }

    pub(crate) fn set_data_at(&self, idx: usize, x: f64) {
        self.inner.borrow_mut().data[idx] = x;
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    /// Clear the accumulated gradient. Resets are explicit; no operation
    /// zeroes gradients implicitly.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Detached copy: same data, fresh constant leaf.
    pub fn detach(&self) -> Value {
        let n = self.inner.borrow();
        Value::constant(n.data.clone(), n.shape.clone())
    }

    fn accumulate_grad(&self, contrib: &[f64]) {
        let mut n = self.inner.borrow_mut();
        let len = n.data.len();
        debug_assert_eq!(contrib.len(), len);
        let g = n.grad.get_or_insert_with(|| vec![0.0; len]);
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi += ci;
        }
    }

    /// Reverse-mode sweep from a scalar root. Every ancestor with
    /// `requires_grad` ends up holding its partial derivative. Running
    /// backward twice on the same root is an error.
    pub fn backward(&self) -> Result<()> {
        {
            let mut root = self.inner.borrow_mut();
            if numel_of(&root.shape) != 1 {
                return Err(Error::NonScalarRoot {
                    shape: root.shape.clone(),
                });
            }
            if root.backward_done {
                return Err(Error::DoubleBackward);
            }
            root.backward_done = true;
        }

        // Iterative post-order DFS; `order` ends topologically sorted.
        let mut order: Vec<Value> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Value, bool)> = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            let id = v.id();
            if !visited.insert(id) {
                continue;
            }
            stack.push((v.clone(), true));
            let parents = v.inner.borrow().parents.clone();
            for p in parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p, false));
                }
            }
        }

        self.accumulate_grad(&[1.0]);

        for v in order.iter().rev() {
            let (grad, parents, has_rule) = {
                let n = v.inner.borrow();
                if n.rule.is_none() {
                    continue;
                }
                match &n.grad {
                    // Never reached through any consumer: contributes nothing.
                    None => continue,
                    Some(g) => (g.clone(), n.parents.clone(), true),
                }
            };
            debug_assert!(has_rule);
            let contribs = {
                let n = v.inner.borrow();
                (n.rule.as_ref().unwrap())(&grad)
            };
            debug_assert_eq!(contribs.len(), parents.len());
            for (parent, contrib) in parents.iter().zip(&contribs) {
                if parent.requires_grad() && !contrib.is_empty() {
                    parent.accumulate_grad(contrib);
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_backward_is_ones() {
        let x = Value::param(vec![1.0, 2.0, 3.0], vec![3]);
        let loss = x.sum();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_backward_at_three_is_six() {
        let x = Value::param(vec![3.0], vec![]);
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![6.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let x = Value::param(vec![1.0, 2.0], vec![2]);
        let y = x.scale(2.0);
        assert!(matches!(y.backward(), Err(Error::NonScalarRoot { .. })));
    }

    #[test]
    fn double_backward_rejected() {
        let x = Value::param(vec![2.0], vec![]);
        let loss = x.mul(&x).unwrap();
        loss.backward().unwrap();
        assert!(matches!(loss.backward(), Err(Error::DoubleBackward)));
    }

    #[test]
    fn gradients_accumulate_across_consumers() {
        let x = Value::param(vec![2.0], vec![]);
        let a = x.scale(3.0);
        let b = x.scale(5.0);
        let loss = a.add(&b).unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![8.0]);
    }

    #[test]
    fn constants_get_no_grad_and_no_graph() {
        let c = Value::constant(vec![1.0, 2.0], vec![2]);
        let y = c.scale(4.0);
        assert!(!y.requires_grad());
        let loss = y.sum();
        loss.backward().unwrap();
        assert!(c.grad().is_none());
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Value::param(vec![3.0], vec![]);
        let d = x.detach();
        let loss = d.mul(&d).unwrap();
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let run = || {
            let x = Value::param(vec![0.3, -1.7, 2.9, 0.01], vec![2, 2]);
            let y = Value::param(vec![1.5, 0.2, -0.8, 4.0], vec![2, 2]);
            let z = x.matmul(&y).unwrap().gelu().sum();
            z.item().to_bits()
        };
        assert_eq!(run(), run());
    }
}
