//! Two-stage training.
//!
//! Stage one trains the full zero-latency fusion pipeline end to end on
//! synthetic scenes. Stage two freezes everything it produced and trains
//! only a derivative generator, self-supervised: predict a future feature
//! map from the recent past and score it by cosine similarity against the
//! extractor's actual output for that future frame. No labels are
//! involved in stage two.

mod stage1;
mod stage2;

pub use stage1::{train_stage1, Stage1Config, STAGE1_PREFIXES};
pub use stage2::{
    build_pairs, pair_forward, train_stage2, DerivativeKind, PairForward, PairIndex, Stage2Config,
};

/// Per-epoch training record. `cls`/`reg` stay zero for objectives
/// without a classification/regression split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub cls: f64,
    pub reg: f64,
}

/// Loss trajectory of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,loss,cls,reg\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", e.epoch, e.loss, e.cls, e.reg));
        }
        s
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss)
    }
}
