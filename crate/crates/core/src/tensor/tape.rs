use std::cell::{Cell, RefCell};
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Scalar, Tensor, TensorError};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

struct Node<T: Scalar> {
    out: Tensor<T>,
    back: Box<dyn Fn(&[T])>,
}

/// Records the forward pass as a sequence of nodes in execution order.
/// Reverse iteration is a valid topological order, so backward visits each
/// node exactly once and gradients of shared inputs accumulate additively.
pub struct Tape<T: Scalar> {
    id: u64,
    recording: bool,
    consumed: Cell<bool>,
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: true,
            consumed: Cell::new(false),
            nodes: RefCell::new(Vec::new()),
        }
    }

    /// A tape that records nothing; forward values are still computed.
    pub fn inference() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            recording: false,
            consumed: Cell::new(false),
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// True when an op with these inputs should record a backward closure.
    pub fn wants(&self, inputs: &[&Tensor<T>]) -> bool {
        self.recording && inputs.iter().any(|t| t.requires_grad())
    }

    /// Registers `out` as produced by a recorded op. `back` receives the
    /// gradient of the loss with respect to `out` and must accumulate into
    /// the op's inputs. Public so task heads can define custom ops with
    /// hand-written backward passes.
    pub fn record(&self, out: &Tensor<T>, back: impl Fn(&[T]) + 'static) {
        debug_assert!(self.recording, "record called on an inference tape");
        out.set_requires_grad(true);
        out.set_tape_id(self.id);
        self.nodes.borrow_mut().push(Node {
            out: out.clone(),
            back: Box::new(back),
        });
    }

    /// Seeds `loss` with gradient 1 and propagates through the recorded
    /// nodes in reverse. Consumes the tape: a second call is an error, as is
    /// a loss that never passed through this tape's ops.
    pub fn backward(&self, loss: &Tensor<T>) -> Result<(), TensorError> {
        if self.consumed.get() {
            return Err(TensorError::TapeConsumed);
        }
        if loss.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss.shape().to_vec()));
        }
        if loss.tape_id() != Some(self.id) {
            return Err(TensorError::DetachedLoss);
        }
        self.consumed.set(true);
        loss.accumulate_grad(&[T::one()]);
        let nodes = self.nodes.borrow();
        for node in nodes.iter().rev() {
            let grad = node.out.grad();
            if let Some(g) = grad {
                (node.back)(&g);
            }
        }
        Ok(())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}
