use std::cell::{Cell, RefCell};
use std::collections::{BTreeSet, HashSet};
use std::rc::{Rc, Weak};

use crate::param::ParamInner;
use crate::tensor::Tensor;

thread_local! {
    static NEXT_NODE_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_node_id() -> u64 {
    NEXT_NODE_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// An operand's upstream node, absent when the operand is a constant.
pub(crate) type OpInput = Option<Rc<GraphNode>>;

/// Autograd graph vertex. Op nodes save whatever the backward formula needs;
/// accumulator nodes point back at their owning parameter.
pub struct GraphNode {
    pub(crate) id: u64,
    pub(crate) kind: NodeKind,
}

pub(crate) enum NodeKind {
    Accumulator {
        param: Weak<RefCell<ParamInner>>,
        index: usize,
    },
    Matmul {
        a: OpInput,
        b: OpInput,
        a_data: Rc<Vec<f64>>,
        b_data: Rc<Vec<f64>>,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: OpInput,
        b: OpInput,
    },
    AddBias {
        x: OpInput,
        bias: OpInput,
        rows: usize,
        cols: usize,
    },
    Relu {
        x: OpInput,
        x_data: Rc<Vec<f64>>,
    },
    Scale {
        x: OpInput,
        factor: f64,
    },
    MseLoss {
        pred: OpInput,
        target: OpInput,
        pred_data: Rc<Vec<f64>>,
        target_data: Rc<Vec<f64>>,
    },
}

impl GraphNode {
    pub(crate) fn new(kind: NodeKind) -> Rc<GraphNode> {
        Rc::new(GraphNode {
            id: next_node_id(),
            kind,
        })
    }

    /// Upstream edges, one entry per operand that carries a node. An operand
    /// used twice contributes two edges.
    pub(crate) fn inputs(&self) -> Vec<&Rc<GraphNode>> {
        fn pick<'a>(inputs: &[&'a OpInput]) -> Vec<&'a Rc<GraphNode>> {
            inputs.iter().filter_map(|i| i.as_ref()).collect()
        }
        match &self.kind {
            NodeKind::Accumulator { .. } => Vec::new(),
            NodeKind::Matmul { a, b, .. } => pick(&[a, b]),
            NodeKind::Add { a, b } => pick(&[a, b]),
            NodeKind::AddBias { x, bias, .. } => pick(&[x, bias]),
            NodeKind::Relu { x, .. } => pick(&[x]),
            NodeKind::Scale { x, .. } => pick(&[x]),
            NodeKind::MseLoss { pred, target, .. } => pick(&[pred, target]),
        }
    }
}

/// Leaf parameters reachable backward from `outputs`: exactly the parameters
/// that would receive a gradient if a loss built on those outputs ran
/// backward. Shared upstream parameters appear once; an empty output list
/// yields the empty set.
pub fn traverse_reachable_params(outputs: &[Tensor]) -> BTreeSet<usize> {
    let mut reached = BTreeSet::new();
    let mut visited: HashSet<u64> = HashSet::new();
    let mut stack: Vec<Rc<GraphNode>> = outputs.iter().filter_map(|t| t.node.clone()).collect();
    while let Some(node) = stack.pop() {
        if !visited.insert(node.id) {
            continue;
        }
        if let NodeKind::Accumulator { index, .. } = &node.kind {
            reached.insert(*index);
        }
        for input in node.inputs() {
            stack.push(Rc::clone(input));
        }
    }
    reached
}
