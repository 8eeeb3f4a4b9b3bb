//! Standard and adversarial training, SGD, and the freeze masks that
//! decide which parameters learn and whether batch-norm statistics adapt.

mod freeze;
mod sgd;
mod trainer;

pub use freeze::{make_freeze_mask, ConfigName, FreezeMask};
pub use sgd::Sgd;
pub use trainer::{
    clean_error, clean_loss, finetune_from_checkpoint, train, train_monitored, train_with_callback, EpochLog,
    LrSchedule, TrainConfig, TrainLog,
};
