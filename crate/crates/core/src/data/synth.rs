//! Synthetic stand-in for the posture task.
//!
//! Every class is a fixed arrangement of Gaussian clusters (or a ring)
//! symmetric about the origin, so all classes share the same expected
//! centroid. Once each set is mean-centered, the raw sum of its points is
//! exactly zero and carries no class information; only the shape does.

use super::{Instance, SplitData};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub classes: usize,
    /// Sets per class per user.
    pub sets_per_class: usize,
    pub min_size: usize,
    pub max_size: usize,
    pub users: u32,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        SyntheticTask {
            classes: 5,
            sets_per_class: 200,
            min_size: 3,
            max_size: 12,
            users: 1,
        }
    }
}

const SPREAD: f64 = 80.0;
const TIGHT: f64 = 8.0;

enum Layout {
    Clusters { centers: Vec<[f64; 3]>, std: f64 },
    Ring { radius: f64, jitter: f64 },
}

fn layout(class: usize) -> Layout {
    let tri = |k: f64| {
        let a = std::f64::consts::FRAC_PI_2 + k * 2.0 * std::f64::consts::PI / 3.0;
        [70.0 * a.cos(), 70.0 * a.sin(), 0.0]
    };
    match class {
        0 => Layout::Clusters {
            centers: vec![[0.0; 3]],
            std: 25.0,
        },
        1 => Layout::Clusters {
            centers: vec![[SPREAD, 0.0, 0.0], [-SPREAD, 0.0, 0.0]],
            std: TIGHT,
        },
        2 => Layout::Clusters {
            centers: vec![[0.0, 0.0, SPREAD], [0.0, 0.0, -SPREAD]],
            std: TIGHT,
        },
        3 => Layout::Clusters {
            centers: vec![tri(0.0), tri(1.0), tri(2.0)],
            std: TIGHT,
        },
        _ => Layout::Ring {
            radius: SPREAD,
            jitter: 4.0,
        },
    }
}

impl SyntheticTask {
    pub fn generate(&self, rng: &mut Rng) -> Result<Vec<Instance>> {
        if self.classes == 0 || self.classes > 5 {
            return Err(Error::Config(format!(
                "synthetic task defines 1..=5 classes, asked for {}",
                self.classes
            )));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Config(format!(
                "bad size range [{}, {}]",
                self.min_size, self.max_size
            )));
        }
        let mut out = Vec::with_capacity(self.classes * self.sets_per_class * self.users as usize);
        for user in 1..=self.users {
            // users differ slightly in overall scale, like hands of different size
            let scale = if self.users > 1 { rng.uniform_in(0.9, 1.1) } else { 1.0 };
            for class in 0..self.classes {
                let lay = layout(class);
                for _ in 0..self.sets_per_class {
                    let n = rng.range_inclusive(self.min_size, self.max_size);
                    let mut data = Vec::with_capacity(3 * n);
                    match &lay {
                        Layout::Clusters { centers, std } => {
                            let start = rng.below(centers.len());
                            for j in 0..n {
                                let c = centers[(start + j) % centers.len()];
                                for v in c {
                                    data.push(scale * (v + std * rng.normal()));
                                }
                            }
                        }
                        Layout::Ring { radius, jitter } => {
                            for _ in 0..n {
                                let a = rng.uniform_in(0.0, 2.0 * std::f64::consts::PI);
                                let r = radius + jitter * rng.normal();
                                data.extend([
                                    scale * jitter * rng.normal(),
                                    scale * r * a.cos(),
                                    scale * r * a.sin(),
                                ]);
                            }
                        }
                    }
                    out.push(Instance {
                        points: Matrix::from_vec(n, 3, data)?,
                        class_label: class + 1,
                        user_id: user,
                    });
                }
            }
        }
        Ok(out)
    }
}

/// `classes` classes with `sets_per_class` sets each, sizes uniform in
/// `size_range`, all attributed to user 1.
pub fn gen_synthetic_task(
    rng: &mut Rng,
    classes: usize,
    sets_per_class: usize,
    size_range: (usize, usize),
) -> Result<Vec<Instance>> {
    SyntheticTask {
        classes,
        sets_per_class,
        min_size: size_range.0,
        max_size: size_range.1,
        users: 1,
    }
    .generate(rng)
}

/// Independently generated train/validation/test corpora of the default
/// task, with `train_per_class` and `held_per_class` sets per class.
pub fn synthetic_split(seed: u64, train_per_class: usize, held_per_class: usize) -> Result<SplitData> {
    let root = Rng::new(seed);
    let gen = |k: u64, per: usize| {
        SyntheticTask {
            sets_per_class: per,
            ..Default::default()
        }
        .generate(&mut root.fork(&[k]))
    };
    Ok(SplitData {
        train: gen(0, train_per_class)?,
        validation: gen(1, held_per_class)?,
        test: gen(2, held_per_class)?,
    })
}
