use std::collections::{BTreeMap, BTreeSet};

use super::Instance;
use crate::error::{Error, Result};
use crate::numkit::Rng;

/// Instances drawn per class per user for each split.
pub const PER_CLASS: usize = 75;

/// Index lists into a corpus. The three lists are pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitPlan {
    pub left_out_user: Option<u32>,
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

pub fn make_louo_splits(instances: &[Instance], left_out_user: u32, seed: u64) -> Result<SplitPlan> {
    make_louo_splits_with(instances, left_out_user, seed, PER_CLASS)
}

/// Leave-one-user-out plan: the test split is `per_class` instances of every
/// class from `left_out_user`; every other user contributes `per_class`
/// instances per class to training and another disjoint `per_class` to
/// validation. All draws are uniform without replacement.
pub fn make_louo_splits_with(
    instances: &[Instance],
    left_out_user: u32,
    seed: u64,
    per_class: usize,
) -> Result<SplitPlan> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let mut groups: BTreeMap<(u32, usize), Vec<usize>> = BTreeMap::new();
    let mut users = BTreeSet::new();
    let mut classes = BTreeSet::new();
    for (i, inst) in instances.iter().enumerate() {
        groups.entry((inst.user_id, inst.class_label)).or_default().push(i);
        users.insert(inst.user_id);
        classes.insert(inst.class_label);
    }
    if !users.contains(&left_out_user) {
        return Err(Error::Config(format!(
            "user {left_out_user} does not appear in the corpus (users: {users:?})"
        )));
    }
    let rng = Rng::new(seed);
    let mut plan = SplitPlan {
        left_out_user: Some(left_out_user),
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        seed,
    };
    let mut shortfalls = Vec::new();
    for &user in &users {
        let need = if user == left_out_user { per_class } else { 2 * per_class };
        for &class in &classes {
            let mut idx = groups.get(&(user, class)).cloned().unwrap_or_default();
            if idx.len() < need {
                shortfalls.push(format!(
                    "user {user} class {class}: have {}, need {need}",
                    idx.len()
                ));
                continue;
            }
            rng.fork(&[user as u64, class as u64]).shuffle(&mut idx);
            if user == left_out_user {
                plan.test.extend_from_slice(&idx[..per_class]);
            } else {
                plan.train.extend_from_slice(&idx[..per_class]);
                plan.validation.extend_from_slice(&idx[per_class..2 * per_class]);
            }
        }
    }
    if !shortfalls.is_empty() {
        return Err(Error::Insufficient(shortfalls));
    }
    Ok(plan)
}

impl SplitPlan {
    /// Plan over explicit index lists, e.g. independently generated corpora
    /// concatenated back to back.
    pub fn from_indices(train: Vec<usize>, validation: Vec<usize>, test: Vec<usize>, seed: u64) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for &i in train.iter().chain(&validation).chain(&test) {
            if !seen.insert(i) {
                return Err(Error::Construction(format!("index {i} appears in more than one split")));
            }
        }
        Ok(SplitPlan {
            left_out_user: None,
            train,
            validation,
            test,
            seed,
        })
    }
}

/// The instances a plan selects, materialized.
#[derive(Clone, Debug)]
pub struct SplitData {
    pub train: Vec<Instance>,
    pub validation: Vec<Instance>,
    pub test: Vec<Instance>,
}

impl SplitData {
    pub fn from_plan(corpus: &[Instance], plan: &SplitPlan) -> Result<Self> {
        let pick = |idx: &[usize]| -> Result<Vec<Instance>> {
            idx.iter()
                .map(|&i| {
                    corpus
                        .get(i)
                        .cloned()
                        .ok_or_else(|| Error::Domain(format!("index {i} outside corpus of {}", corpus.len())))
                })
                .collect()
        };
        Ok(SplitData {
            train: pick(&plan.train)?,
            validation: pick(&plan.validation)?,
            test: pick(&plan.test)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::Matrix;

    fn corpus(users: u32, classes: usize, per: usize) -> Vec<Instance> {
        let mut out = Vec::new();
        for u in 1..=users {
            for c in 1..=classes {
                for k in 0..per {
                    out.push(Instance {
                        points: Matrix::filled(3, 3, k as f64),
                        class_label: c,
                        user_id: u,
                    });
                }
            }
        }
        out
    }

    #[test]
    fn twelve_users_left_out_one() {
        let data = corpus(12, 5, 160);
        let plan = make_louo_splits(&data, 1, 7).unwrap();
        assert_eq!(plan.test.len(), 375);
        assert!(plan.test.iter().all(|&i| data[i].user_id == 1));
        assert_eq!(plan.train.len(), 11 * 5 * 75);
        assert_eq!(plan.validation.len(), 11 * 5 * 75);
        assert!(plan.train.iter().chain(&plan.validation).all(|&i| data[i].user_id != 1));
        for c in 1..=5 {
            assert_eq!(plan.test.iter().filter(|&&i| data[i].class_label == c).count(), 75);
        }
    }

    #[test]
    fn deterministic_and_disjoint() {
        let data = corpus(3, 5, 150);
        let a = make_louo_splits(&data, 2, 99).unwrap();
        assert_eq!(a, make_louo_splits(&data, 2, 99).unwrap());
        assert_ne!(a, make_louo_splits(&data, 2, 100).unwrap());
        let all: BTreeSet<usize> = a.train.iter().chain(&a.validation).chain(&a.test).copied().collect();
        assert_eq!(all.len(), a.train.len() + a.validation.len() + a.test.len());
    }

    #[test]
    fn shortfalls_are_listed() {
        let mut data = corpus(3, 2, 150);
        data.retain(|i| !(i.user_id == 3 && i.class_label == 2));
        match make_louo_splits(&data, 1, 0).unwrap_err() {
            Error::Insufficient(list) => {
                assert_eq!(list.len(), 1);
                assert!(list[0].contains("user 3 class 2"));
            }
            e => panic!("{e}"),
        }
        assert!(make_louo_splits(&data, 9, 0).is_err());
    }

    #[test]
    fn explicit_plan_rejects_overlap() {
        assert!(SplitPlan::from_indices(vec![0, 1], vec![1], vec![2], 0).is_err());
        let p = SplitPlan::from_indices(vec![0, 1], vec![2], vec![3], 0).unwrap();
        assert_eq!(p.left_out_user, None);
    }
}
