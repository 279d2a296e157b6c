//! Reverse-mode automatic differentiation over dynamic-rank f32 arrays.
//!
//! The design is a lightweight expression tape: every operation allocates a
//! node holding its value, its parent handles, and a backward closure that
//! maps the upstream gradient to per-parent gradients. Node ids are globally
//! monotone, so processing nodes in descending id order during [`backward`]
//! visits every node after all of its consumers — no explicit topological
//! sort is needed.
//!
//! Gradients flow only through nodes that (transitively) depend on a
//! parameter leaf. Constants built in inference mode keep no parents, so a
//! no-grad forward releases intermediate buffers as soon as they go out of
//! scope.

mod conv;
mod linalg;
mod norm;
mod ops;

pub use conv::{conv3d, upsample2x_hw};
pub use linalg::{bmm, matmul};
pub use norm::{group_norm, layer_norm, softmax_last, softmax_modality};
pub use ops::*;

use ndarray::ArrayD;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Backward closure: (upstream gradient, node output, parents) -> gradient per parent.
type BackwardFn = Box<dyn Fn(&ArrayD<f32>, &ArrayD<f32>, &[Tensor]) -> Vec<ArrayD<f32>>>;

struct Node {
    id: u64,
    value: ArrayD<f32>,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
    /// Parameter-store slot for leaf parameters.
    param_slot: Option<usize>,
}

/// Handle to a tape node. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl Tensor {
    /// A constant input; gradients never flow into it.
    pub fn constant(value: ArrayD<f32>) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value,
                parents: Vec::new(),
                backward: None,
                needs_grad: false,
                param_slot: None,
            }),
        }
    }

    /// A trainable leaf bound to a parameter-store slot.
    pub fn parameter(value: ArrayD<f32>, slot: usize) -> Self {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value,
                parents: Vec::new(),
                backward: None,
                needs_grad: true,
                param_slot: Some(slot),
            }),
        }
    }

    pub(crate) fn from_op(value: ArrayD<f32>, parents: Vec<Tensor>, backward: BackwardFn) -> Self {
        let needs_grad = parents.iter().any(|p| p.node.needs_grad);
        let (parents, backward) = if needs_grad {
            (parents, Some(backward))
        } else {
            // Inference mode: drop the subgraph so intermediates free eagerly.
            (Vec::new(), None)
        };
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value,
                parents,
                backward,
                needs_grad,
                param_slot: None,
            }),
        }
    }

    pub fn value(&self) -> &ArrayD<f32> {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn len(&self) -> usize {
        self.node.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.node.value.is_empty()
    }

    pub fn needs_grad(&self) -> bool {
        self.node.needs_grad
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar(&self) -> f32 {
        debug_assert_eq!(self.len(), 1, "scalar() on tensor of shape {:?}", self.shape());
        self.node.value.iter().copied().next().unwrap()
    }
}

/// Per-slot parameter gradients produced by [`backward`].
pub struct Gradients {
    slots: Vec<Option<ArrayD<f32>>>,
}

impl Gradients {
    pub fn get(&self, slot: usize) -> Option<&ArrayD<f32>> {
        self.slots.get(slot).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, slot: usize) -> Option<ArrayD<f32>> {
        self.slots.get_mut(slot).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

/// Runs reverse-mode differentiation from `root`, seeding with d(root)/d(root) = 1.
///
/// `n_slots` sizes the parameter gradient table; slots never reached stay `None`.
pub fn backward(root: &Tensor, n_slots: usize) -> Gradients {
    let mut slots: Vec<Option<ArrayD<f32>>> = (0..n_slots).map(|_| None).collect();
    if !root.node.needs_grad {
        return Gradients { slots };
    }

    // Collect the reachable grad-requiring subgraph.
    let mut reach: HashMap<u64, Tensor> = HashMap::new();
    let mut stack = vec![root.clone()];
    while let Some(t) = stack.pop() {
        if reach.contains_key(&t.node.id) {
            continue;
        }
        for p in &t.node.parents {
            if p.node.needs_grad {
                stack.push(p.clone());
            }
        }
        reach.insert(t.node.id, t);
    }

    let mut order: Vec<u64> = reach.keys().copied().collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let mut grads: HashMap<u64, ArrayD<f32>> = HashMap::new();
    grads.insert(root.node.id, ArrayD::ones(root.shape()));

    for id in order {
        let Some(grad) = grads.remove(&id) else {
            continue;
        };
        let node = &reach[&id].node;
        if let Some(slot) = node.param_slot {
            match &mut slots[slot] {
                Some(acc) => *acc += &grad,
                empty => *empty = Some(grad),
            }
            continue;
        }
        let Some(backward) = &node.backward else {
            continue;
        };
        let parent_grads = backward(&grad, &node.value, &node.parents);
        debug_assert_eq!(parent_grads.len(), node.parents.len());
        for (p, g) in node.parents.iter().zip(parent_grads) {
            if !p.node.needs_grad {
                continue;
            }
            debug_assert_eq!(
                g.shape(),
                p.shape(),
                "gradient shape mismatch flowing into node {}",
                p.node.id
            );
            match grads.get_mut(&p.node.id) {
                Some(acc) => *acc += &g,
                None => {
                    grads.insert(p.node.id, g);
                }
            }
        }
    }

    Gradients { slots }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use ndarray::ArrayD;
    use rand::Rng;
    use rand_chacha::ChaCha8Rng;

    pub fn random_array(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f32> {
        ArrayD::from_shape_fn(shape, |_| rng.random::<f32>() * 2.0 - 1.0)
    }

    /// Central-difference check of d(sum(weights * f(x)))/dx against autograd.
    ///
    /// `f` must be a pure function of its input tensor.
    pub fn check_grad<F>(f: F, x0: &ArrayD<f32>, rel_tol: f32, step: f32)
    where
        F: Fn(&Tensor) -> Tensor,
    {
        // Random but fixed projection weights make the loss a scalar.
        let mut wrng = crate::rng::stream(99);
        let probe = {
            let out = f(&Tensor::constant(x0.clone()));
            random_array(&mut wrng, out.shape())
        };
        let loss_of = |x: &ArrayD<f32>| -> f64 {
            let out = f(&Tensor::constant(x.clone()));
            out.value()
                .iter()
                .zip(probe.iter())
                .map(|(&v, &w)| v as f64 * w as f64)
                .sum()
        };

        // Analytic gradient: treat x as a parameter in slot 0.
        let x = Tensor::parameter(x0.clone(), 0);
        let out = f(&x);
        let loss = super::ops::sum_all(&super::ops::mul(&out, &Tensor::constant(probe.clone())));
        let mut grads = backward(&loss, 1);
        let analytic = grads.take(0).expect("no gradient reached the input");

        let mut checked = 0usize;
        for (idx, &g) in analytic.indexed_iter() {
            // Keep runtime bounded on larger inputs.
            if analytic.len() > 64 && checked >= 64 {
                break;
            }
            checked += 1;
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[&idx] += step;
            xm[&idx] -= step;
            let fd = ((loss_of(&xp) - loss_of(&xm)) / (2.0 * step as f64)) as f32;
            let denom = fd.abs().max(g.abs());
            if denom < 1e-4 {
                continue;
            }
            let rel = (fd - g).abs() / denom;
            assert!(
                rel <= rel_tol,
                "gradient mismatch at {idx:?}: fd={fd}, analytic={g}, rel={rel}"
            );
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::ArrayD;

    #[test]
    fn constant_graph_produces_no_gradients() {
        let a = Tensor::constant(ArrayD::ones(vec![2, 2]));
        let b = ops::mul(&a, &a);
        let grads = backward(&b, 0);
        assert!(grads.is_empty());
    }

    #[test]
    fn shared_parent_accumulates() {
        // y = x * x; dy/dx = 2x.
        let x0 = ArrayD::from_shape_vec(vec![3], vec![1.0f32, -2.0, 0.5]).unwrap();
        let x = Tensor::parameter(x0.clone(), 0);
        let y = ops::sum_all(&ops::mul(&x, &x));
        let mut grads = backward(&y, 1);
        let g = grads.take(0).unwrap();
        for (gi, xi) in g.iter().zip(x0.iter()) {
            assert!((gi - 2.0 * xi).abs() < 1e-6);
        }
    }

    #[test]
    fn inference_mode_keeps_no_parents() {
        let a = Tensor::constant(ArrayD::ones(vec![4]));
        let b = ops::relu(&a);
        assert!(b.node.parents.is_empty());
        assert!(!b.needs_grad());
    }
}
