//! Datasets: the posture CSV format, leave-one-user-out splits and
//! synthetic corpora.

mod ambiguity;
mod posture;
mod split;
mod synth;

pub use ambiguity::{canonical_pair, convex_hull_2d, gen_ambiguous_pair, sigmoid_embedding, AMBIGUITY_EPS};
pub use posture::{load_posture_csv, read_posture_csv, write_posture_csv, write_posture_to, MAX_MARKERS};
pub use split::{make_louo_splits, make_louo_splits_with, SplitData, SplitPlan, PER_CLASS};
pub use synth::{gen_synthetic_task, synthetic_split, SyntheticTask};

use crate::numkit::Matrix;

/// One labeled point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    /// `n × dim`, millimeters for posture data.
    pub points: Matrix,
    /// One-based class label.
    pub class_label: usize,
    pub user_id: u32,
}

impl Instance {
    pub fn class_index(&self) -> usize {
        self.class_label - 1
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }
}

/// Number of classes needed to cover every label in `instances`.
pub fn class_count(instances: &[Instance]) -> usize {
    instances.iter().map(|i| i.class_label).max().unwrap_or(0)
}
