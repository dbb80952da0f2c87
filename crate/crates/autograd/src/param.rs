use std::cell::RefCell;
use std::rc::Rc;

use crate::error::AutogradError;
use crate::graph::{GraphNode, NodeKind};
use crate::tensor::Tensor;

pub type HookResult = Result<(), Box<dyn std::error::Error + Send + Sync>>;

/// Post-accumulation hook. Receives the parameter index of the leaf whose
/// gradient was just written. Fires synchronously on the thread running
/// backward, after the grad write.
pub type HookFn = Rc<dyn Fn(usize) -> HookResult>;

pub(crate) struct ParamInner {
    pub value: Rc<Vec<f64>>,
    pub shape: Vec<usize>,
    pub grad: Option<Vec<f64>>,
    pub index: usize,
    pub is_buffer: bool,
    pub hooks: Vec<HookFn>,
    /// Gradient accumulator node, created lazily on first use in a forward
    /// pass and reused afterwards so a parameter used twice in one graph
    /// still accumulates into a single leaf.
    pub acc: Option<Rc<GraphNode>>,
}

/// A learnable tensor (or, with `is_buffer`, non-learnable model state such
/// as a running mean). Cloning yields another handle to the same storage.
#[derive(Clone)]
pub struct Parameter {
    inner: Rc<RefCell<ParamInner>>,
}

impl Parameter {
    fn new(shape: Vec<usize>, data: Vec<f64>, index: usize, is_buffer: bool) -> Parameter {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        Parameter {
            inner: Rc::new(RefCell::new(ParamInner {
                value: Rc::new(data),
                shape,
                grad: None,
                index,
                is_buffer,
                hooks: Vec::new(),
                acc: None,
            })),
        }
    }

    pub fn index(&self) -> usize {
        self.inner.borrow().index
    }

    pub fn is_buffer(&self) -> bool {
        self.inner.borrow().is_buffer
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.inner.borrow().value.as_ref().clone()
    }

    pub fn set_value(&self, data: Vec<f64>) -> Result<(), AutogradError> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.value.len() {
            return Err(AutogradError::Usage(format!(
                "set_value length {} != parameter size {}",
                data.len(),
                inner.value.len()
            )));
        }
        inner.value = Rc::new(data);
        Ok(())
    }

    /// In-place update `value[i] += scale * delta[i]`, used by optimizers.
    pub fn add_scaled(&self, delta: &[f64], scale: f64) -> Result<(), AutogradError> {
        let mut inner = self.inner.borrow_mut();
        if delta.len() != inner.value.len() {
            return Err(AutogradError::Usage(format!(
                "add_scaled length {} != parameter size {}",
                delta.len(),
                inner.value.len()
            )));
        }
        let value = Rc::make_mut(&mut inner.value);
        for (v, d) in value.iter_mut().zip(delta) {
            *v += scale * d;
        }
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn set_grad(&self, grad: Option<Vec<f64>>) -> Result<(), AutogradError> {
        let mut inner = self.inner.borrow_mut();
        if let Some(g) = &grad {
            if g.len() != inner.value.len() {
                return Err(AutogradError::Usage(format!(
                    "set_grad length {} != parameter size {}",
                    g.len(),
                    inner.value.len()
                )));
            }
        }
        inner.grad = grad;
        Ok(())
    }

    pub fn clear_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// The parameter as a leaf tensor for use in a forward pass. Learnable
    /// parameters carry their gradient accumulator; buffers come back as
    /// plain constants and never receive gradients.
    pub fn as_tensor(&self) -> Tensor {
        let mut inner = self.inner.borrow_mut();
        let node = if inner.is_buffer {
            None
        } else {
            if inner.acc.is_none() {
                inner.acc = Some(GraphNode::new(NodeKind::Accumulator {
                    param: Rc::downgrade(&self.inner),
                    index: inner.index,
                }));
            }
            inner.acc.clone()
        };
        Tensor::from_shared(inner.shape.clone(), Rc::clone(&inner.value), node)
    }

    /// The current value as a constant tensor (no graph participation).
    pub fn as_constant(&self) -> Tensor {
        let inner = self.inner.borrow();
        Tensor::from_shared(inner.shape.clone(), Rc::clone(&inner.value), None)
    }

    /// Register a post-accumulation hook. The same hook instance (by pointer
    /// identity) cannot be registered twice on one parameter; buffers have no
    /// accumulator to hook.
    pub fn register_post_accumulate_hook(&self, hook: HookFn) -> Result<(), AutogradError> {
        let mut inner = self.inner.borrow_mut();
        if inner.is_buffer {
            return Err(AutogradError::Usage(format!(
                "parameter {} is a buffer and has no gradient accumulator",
                inner.index
            )));
        }
        if inner.hooks.iter().any(|h| Rc::ptr_eq(h, &hook)) {
            return Err(AutogradError::DuplicateHook(inner.index));
        }
        inner.hooks.push(hook);
        Ok(())
    }

    pub fn same_storage(&self, other: &Parameter) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl std::fmt::Debug for Parameter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Parameter")
            .field("index", &inner.index)
            .field("shape", &inner.shape)
            .field("is_buffer", &inner.is_buffer)
            .field("has_grad", &inner.grad.is_some())
            .finish()
    }
}

/// Builder that hands out parameters with unique, contiguous indices in
/// registration order — the order bucketing and broadcast depend on.
#[derive(Default)]
pub struct ParameterSet {
    params: Vec<Parameter>,
}

impl ParameterSet {
    pub fn new() -> ParameterSet {
        ParameterSet::default()
    }

    pub fn add_param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Parameter {
        let p = Parameter::new(shape, data, self.params.len(), false);
        self.params.push(p.clone());
        p
    }

    pub fn add_buffer(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Parameter {
        let p = Parameter::new(shape, data, self.params.len(), true);
        self.params.push(p.clone());
        p
    }

    pub fn into_params(self) -> Vec<Parameter> {
        self.params
    }

    pub fn params(&self) -> Vec<Parameter> {
        self.params.clone()
    }
}

/// Anything trainable: an ordered parameter list plus a forward function.
/// `parameters()` must return every parameter (buffers included) in
/// registration order, stable across calls.
pub trait Model {
    fn parameters(&self) -> Vec<Parameter>;
    fn forward(&mut self, input: &Tensor) -> Result<Tensor, AutogradError>;
}

impl Model for Box<dyn Model> {
    fn parameters(&self) -> Vec<Parameter> {
        (**self).parameters()
    }

    fn forward(&mut self, input: &Tensor) -> Result<Tensor, AutogradError> {
        (**self).forward(input)
    }
}
