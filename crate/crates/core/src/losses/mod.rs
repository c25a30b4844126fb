//! Loss components, the hybrid-random classification loss and the staged
//! training schedule.

pub mod check;
pub mod cls;
mod dual;
pub mod iou;
pub mod schedule;

pub use cls::{bce, focal, hrl, LossGrad, PredTargetBatch, EPS};
pub use iou::{box_iou, ciou_loss, giou_loss, l1_regulation, Box4, BoxLossGrad};
pub use schedule::{
    lr_at, lr_at_progress, stage_config, total_loss, ClsObjLoss, IouLoss, LossWeights, Regulation, StageConfig,
    TrainSchedule,
};
