//! MLP classifiers, SGD training and the DUQ centroid model.

mod checkpoint;
mod config;
mod duq;
mod mlp;
mod optim;

pub use checkpoint::{Checkpoint, Model};
pub use config::{DuqConfig, MlpConfig};
pub use duq::{duq_forward, DuqHead, DuqModel, DuqStepLoss};
pub use mlp::{cross_entropy, Classifier, ForwardOutput, Linear, Mode, TrainReport};
pub use optim::Sgd;

pub(crate) use mlp::{argmax, check_input};
