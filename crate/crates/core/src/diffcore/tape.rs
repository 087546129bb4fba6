use std::cell::RefCell;
use std::rc::Rc;
use std::sync::Arc;

use super::{DiffError, Result};

/// Plain host-side tensor: no tape attachment, safe to move across threads.
/// Used for controller weights, optimizer state and checkpoints.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HostTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl HostTensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "host tensor shape/value mismatch"
        );
        HostTensor { shape, values }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        HostTensor { shape, values: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Backward rule of one recorded primitive: given the output cotangent,
/// produce one gradient buffer per parent (aligned with `Node::parents`).
type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>>>;

struct Node {
    parents: Vec<usize>,
    size: usize,
    backward: Option<BackwardFn>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
}

/// Wengert tape. Cloning is cheap (shared handle).
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn same_tape(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Register a leaf node (parameter or promoted constant).
    pub fn leaf(&self, shape: Vec<usize>, values: Vec<f64>) -> DTensor {
        let size = values.len();
        assert_eq!(shape.iter().product::<usize>(), size);
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node { parents: vec![], size, backward: None });
            inner.nodes.len() - 1
        };
        DTensor {
            shape,
            values: Arc::new(values),
            node: Some((self.clone(), id)),
        }
    }

    pub fn param(&self, t: &HostTensor) -> DTensor {
        self.leaf(t.shape.clone(), t.values.clone())
    }

    pub(super) fn record(
        &self,
        parents: Vec<usize>,
        shape: Vec<usize>,
        values: Vec<f64>,
        backward: BackwardFn,
    ) -> DTensor {
        let size = values.len();
        debug_assert_eq!(shape.iter().product::<usize>(), size);
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node { parents, size, backward: Some(backward) });
            inner.nodes.len() - 1
        };
        DTensor {
            shape,
            values: Arc::new(values),
            node: Some((self.clone(), id)),
        }
    }

    /// Reverse sweep from a scalar loss. Accumulation is the sum over all
    /// paths; a node is visited at most once.
    pub fn backward(&self, loss: &DTensor) -> Result<Gradients> {
        if !loss.shape.is_empty() {
            return Err(DiffError::NonScalarLoss(loss.shape.clone()));
        }
        let (tape, loss_id) = match &loss.node {
            Some((t, id)) if t.same_tape(self) => (t.clone(), *id),
            Some(_) => return Err(DiffError::TapeMismatch("backward")),
            None => return Err(DiffError::DeadTape),
        };
        let inner = tape.inner.borrow();
        let n = inner.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss_id] = Some(vec![1.0]);
        for id in (0..=loss_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &inner.nodes[id];
            if let Some(back) = &node.backward {
                let contribs = back(&g);
                debug_assert_eq!(contribs.len(), node.parents.len());
                for (pid, contrib) in node.parents.iter().zip(contribs) {
                    let slot = grads[*pid].get_or_insert_with(|| vec![0.0; inner.nodes[*pid].size]);
                    for (a, b) in slot.iter_mut().zip(&contrib) {
                        *a += b;
                    }
                }
            }
            grads[id] = Some(g);
        }
        Ok(Gradients { tape: tape.clone(), grads })
    }
}

/// Gradient map returned by [`Tape::backward`], keyed by node id.
pub struct Gradients {
    tape: Tape,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// d(loss)/d(tensor); zeros if the tensor did not influence the loss.
    pub fn wrt(&self, t: &DTensor) -> Result<DTensor> {
        let (tape, id) = t.node.as_ref().ok_or(DiffError::DeadTape)?;
        if !tape.same_tape(&self.tape) {
            return Err(DiffError::TapeMismatch("gradient lookup"));
        }
        let values = match &self.grads[*id] {
            Some(g) => g.clone(),
            None => vec![0.0; t.len()],
        };
        Ok(DTensor::constant(t.shape.clone(), values))
    }
}

/// Dense f64 tensor; scalars have shape `[]`. A tensor either carries a
/// tape node id or is a constant.
#[derive(Clone)]
pub struct DTensor {
    pub(super) shape: Vec<usize>,
    pub(super) values: Arc<Vec<f64>>,
    pub(super) node: Option<(Tape, usize)>,
}

impl DTensor {
    pub fn constant(shape: Vec<usize>, values: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "tensor shape/value mismatch"
        );
        DTensor { shape, values: Arc::new(values), node: None }
    }

    pub fn scalar(x: f64) -> Self {
        DTensor::constant(vec![], vec![x])
    }

    pub fn from_host(t: &HostTensor) -> Self {
        DTensor::constant(t.shape.clone(), t.values.clone())
    }

    pub fn to_host(&self) -> HostTensor {
        HostTensor::new(self.shape.clone(), self.values.as_ref().clone())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on non-scalar tensor");
        self.values[0]
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Tape node id, if attached; the handle used to promote constants.
    pub(super) fn node_on(&self, tape: &Tape) -> Result<usize> {
        match &self.node {
            Some((t, id)) if t.same_tape(tape) => Ok(*id),
            Some(_) => Err(DiffError::TapeMismatch("operand")),
            None => {
                // Promote constants to leaves so every parent has a node.
                let leaf = tape.leaf(self.shape.clone(), self.values.as_ref().clone());
                Ok(leaf.node.unwrap().1)
            }
        }
    }
}

impl std::fmt::Debug for DTensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DTensor")
            .field("shape", &self.shape)
            .field("values", &self.values)
            .field("on_tape", &self.node.is_some())
            .finish()
    }
}
