//! Dense multi-task network engine: shared trunk, one head per activity,
//! exact backpropagation and SGD with momentum.

mod batch;
pub mod gradcheck;
mod layer;
mod model;
mod optim;

pub use batch::{Batch, Targets};
pub use layer::{Activation, DenseLayer, LayerGrad, ParamBlock};
pub use model::{Cache, Gradients, Head, HeadSpec, LossKind, ModelShape, MultiTaskModel};
pub use optim::{poly_lr, sgd_step, HyperParams};

use std::fmt;

/// Identifier of one training activity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub struct ActivityId(pub u16);

impl fmt::Display for ActivityId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// Work spent by one or more passes, in scalar units.
///
/// `grad` counts per-example scalar parameter gradients, `forward` counts
/// per-example multiply-accumulates. A forward MAC is worth half a gradient.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Work {
    pub grad: u64,
    pub forward: u64,
}

impl Work {
    pub fn units(&self) -> f64 {
        self.grad as f64 + 0.5 * self.forward as f64
    }
}

impl std::ops::Add for Work {
    type Output = Work;
    fn add(self, o: Work) -> Work {
        Work {
            grad: self.grad + o.grad,
            forward: self.forward + o.forward,
        }
    }
}

impl std::ops::AddAssign for Work {
    fn add_assign(&mut self, o: Work) {
        self.grad += o.grad;
        self.forward += o.forward;
    }
}
