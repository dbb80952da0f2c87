use std::rc::Rc;

use crate::error::AutogradError;
use crate::graph::GraphNode;

/// Dense row-major fp64 n-d array. Values are immutable once created; cloning
/// shares the underlying storage.
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    pub(crate) node: Option<Rc<GraphNode>>,
}

impl Tensor {
    /// Construct from literal data. Rejects zero extents, length mismatches
    /// and non-finite elements; NaN produced later by ops propagates freely.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor, AutogradError> {
        if shape.contains(&0) {
            return Err(AutogradError::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(AutogradError::InvalidShape {
                shape,
                reason: format!("data length {} != product of extents {}", data.len(), numel),
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(AutogradError::NonFinite);
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Result<Tensor, AutogradError> {
        Tensor::new(vec![], vec![value])
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: Rc::new(vec![0.0; numel]),
            node: None,
        }
    }

    /// Internal constructor for op results; skips the finiteness check.
    pub(crate) fn from_op(
        shape: Vec<usize>,
        data: Vec<f64>,
        node: Option<Rc<GraphNode>>,
    ) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            shape,
            data: Rc::new(data),
            node,
        }
    }

    pub(crate) fn from_shared(
        shape: Vec<usize>,
        data: Rc<Vec<f64>>,
        node: Option<Rc<GraphNode>>,
    ) -> Tensor {
        Tensor { shape, data, node }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_rc(&self) -> Rc<Vec<f64>> {
        Rc::clone(&self.data)
    }

    /// Scalar extraction; errors unless the tensor holds exactly one element.
    pub fn item(&self) -> Result<f64, AutogradError> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(AutogradError::NonScalarLoss(self.shape.clone()))
        }
    }

    pub fn has_graph(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, detached from any recorded graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}
