use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tape;

/// Position of a recorded value on a particular tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct NodeRef {
    pub tape: u64,
    pub idx: usize,
}

/// Row-major dense array of `f64`.
///
/// Cloning is cheap: the buffer is shared. A tensor carries a node reference
/// only when it was produced while a tape was recording.
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Rc<Vec<f64>>,
    pub(crate) node: Option<NodeRef>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Constant tensor; never tracked.
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        if data.len() != numel(shape) {
            return Err(Error::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: Rc::new(vec![value]),
            node: None,
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Rc::new(vec![0.0; numel(shape)]),
            node: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: Rc::new(vec![value; numel(shape)]),
            node: None,
        }
    }

    /// Leaf whose gradient is wanted. Tracked only inside [`crate::record`];
    /// outside a recording scope this is the same as [`Tensor::new`].
    pub fn variable(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let mut t = Self::new(data, shape)?;
        t.node = tape::push_leaf(shape);
        Ok(t)
    }

    pub(crate) fn from_op(data: Vec<f64>, shape: Vec<usize>, node: Option<NodeRef>) -> Self {
        debug_assert_eq!(data.len(), numel(&shape));
        Self {
            shape,
            data: Rc::new(data),
            node,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::NonScalarRoot(self.shape.clone()));
        }
        Ok(self.data[0])
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same values, cut from the tape.
    pub fn detach(&self) -> Tensor {
        Self {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub(crate) fn is_scalar_like(&self) -> bool {
        self.numel() == 1 && self.rank() <= 1
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("tracked", &self.node.is_some())
            .finish()
    }
}
