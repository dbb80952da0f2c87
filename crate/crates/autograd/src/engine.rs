use std::collections::{HashMap, HashSet, VecDeque};
use std::rc::Rc;

use crate::error::AutogradError;
use crate::graph::{GraphNode, NodeKind};
use crate::ops::backward_op;
use crate::tensor::Tensor;

/// Run backpropagation from a scalar loss.
///
/// Every reachable parameter's grad is accumulated into (`+=`, so two
/// backward calls without clearing double the grad). Each leaf's
/// post-accumulation hooks fire right after its grad write, in
/// graph-completion order; a hook error aborts the pass and surfaces here.
pub fn backward(loss: &Tensor) -> Result<(), AutogradError> {
    let root = loss.node.clone().ok_or(AutogradError::DetachedBackward)?;
    if loss.numel() != 1 {
        return Err(AutogradError::NonScalarLoss(loss.shape().to_vec()));
    }

    // Count consumer edges per node so a node completes only after every
    // downstream gradient contribution has arrived.
    let mut pending: HashMap<u64, usize> = HashMap::new();
    let mut visited: HashSet<u64> = HashSet::new();
    visited.insert(root.id);
    let mut stack: Vec<Rc<GraphNode>> = vec![Rc::clone(&root)];
    while let Some(node) = stack.pop() {
        for input in node.inputs() {
            *pending.entry(input.id).or_insert(0) += 1;
            if visited.insert(input.id) {
                stack.push(Rc::clone(input));
            }
        }
    }

    let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
    grads.insert(root.id, vec![1.0]);
    let mut queue: VecDeque<Rc<GraphNode>> = VecDeque::new();
    queue.push_back(root);

    while let Some(node) = queue.pop_front() {
        let grad = grads
            .remove(&node.id)
            .expect("completed node must hold an accumulated gradient");
        match &node.kind {
            NodeKind::Accumulator { param, index } => {
                let param = param.upgrade().ok_or_else(|| {
                    AutogradError::Usage(format!(
                        "parameter {index} was dropped while its graph was still alive"
                    ))
                })?;
                let hooks = {
                    let mut inner = param.borrow_mut();
                    match &mut inner.grad {
                        Some(existing) => {
                            for (e, g) in existing.iter_mut().zip(&grad) {
                                *e += g;
                            }
                        }
                        None => inner.grad = Some(grad),
                    }
                    inner.hooks.clone()
                };
                // Borrow released: hooks may inspect the parameter freely.
                for hook in hooks {
                    hook(*index).map_err(|source| AutogradError::Hook {
                        param_index: *index,
                        source,
                    })?;
                }
            }
            kind => {
                for (input, contribution) in backward_op(kind, &grad) {
                    match grads.entry(input.id) {
                        std::collections::hash_map::Entry::Occupied(mut e) => {
                            for (acc, c) in e.get_mut().iter_mut().zip(&contribution) {
                                *acc += c;
                            }
                        }
                        std::collections::hash_map::Entry::Vacant(e) => {
                            e.insert(contribution);
                        }
                    }
                    let count = pending
                        .get_mut(&input.id)
                        .expect("every edge found during dependency counting");
                    *count -= 1;
                    if *count == 0 {
                        queue.push_back(input);
                    }
                }
            }
        }
    }
    Ok(())
}
