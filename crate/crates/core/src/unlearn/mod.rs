//! Parameter-side unlearning on a small feed-forward classifier: retain
//! cross-entropy plus a temperature-scaled KL pull toward a frozen random
//! reference on forget items.

pub mod loss;
pub mod model;
pub mod train;

pub use loss::{
    forget_target, grad_step, kl_divergence, loss_and_grad, loss_weight, maybe_entropy_fallback, temperature_softmax,
    Example, Flag, LossReport, ModelState,
};
pub use model::{encode, Features, Mlp};
pub use train::{accuracy, item_losses, mean_entropy, predict, pretrain, train_unlearn, EpochMetrics, TrainReport};
