//! Inception-style convolutional classifier, trained from scratch with
//! Nesterov momentum SGD.
//!
//! The forward and backward passes are generic over the float type so the
//! same code runs in `f32` for training and `f64` for gradient checks.

mod arch;
mod checkpoint;
mod layers;
mod model;
mod optim;
mod params;
mod train;

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub use arch::{ArchitectureConfig, InceptionBlockSpec, OptimizerConfig};
pub use checkpoint::{checkpoint_sha256, Checkpoint, TrainingState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layers::Activations;
pub use model::{cross_entropy_loss, l2_penalty, Forward, Mode, Network};
pub use optim::{lookahead, nesterov_step, nesterov_update, Velocities};
pub use params::{ModelParameters, ParamKind, ParamTensor};
pub use train::{
    accuracy, evaluate, top_k, train, write_metrics, EpochMetrics, EvalResult, TrainOptions, TrainOutcome,
    CHECKPOINT_FILE, METRICS_FILE,
};

/// Float type the network can run in.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Default + Debug + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

#[inline]
pub(crate) fn real<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("representable constant")
}
