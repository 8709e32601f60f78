//! A small trainable parsing network on synthetic figures: data generation,
//! augmentation, training, multi-scale inference and a gradient-check harness.

pub mod data;
pub mod infer;
pub mod net;
pub mod optim;
pub mod suite;
pub mod train;

pub use data::{augment, synth_dataset, Augment, PartIds, Sample};
pub use infer::{argmax_labels, infer_multiscale_flip, multiscale_probs, predict, predict_probs};
pub use net::{NetOutput, NetSpec, ToyNet, OUTPUT_STRIDE};
pub use optim::{poly_lr, sgd_step, Sgd};
pub use suite::{gradcheck_problem, gradcheck_suite, GradCheckRow};
pub use train::{feature_distributions, train, train_with, EpochLog, TrainConfig};
