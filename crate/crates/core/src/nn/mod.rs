//! Dense neural-network substrate: encoder, classifier head, gradients,
//! momentum SGD, and checkpoint serialization.

pub mod backward;
pub mod checkpoint;
pub mod model;
pub mod sgd;

pub use backward::{backward, backward_with_loss, GradientSet, LayerGradient};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use model::{encode, loss_and_probs, Activation, ClassifierHead, EncoderModel, HeadSet, Layer};
pub use sgd::{sgd_step, SgdOptimizer};
