use std::collections::{HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{Dataset, LabelId, UserId};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_for};

/// Smallest class size kept by default; three users let every partition
/// receive at least one.
pub const DEFAULT_MIN_COUNT: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "[f64; 3]", from = "[f64; 3]")]
pub struct SplitRatios {
    pub train: f64,
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            dev: 0.15,
            test: 0.15,
        }
    }
}

impl From<SplitRatios> for [f64; 3] {
    fn from(r: SplitRatios) -> Self {
        [r.train, r.dev, r.test]
    }
}

impl From<[f64; 3]> for SplitRatios {
    fn from(a: [f64; 3]) -> Self {
        Self {
            train: a[0],
            dev: a[1],
            test: a[2],
        }
    }
}

impl SplitRatios {
    /// Per-class partition sizes: floor for train and dev, remainder to test,
    /// then every empty partition borrows one user from the largest.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        // The epsilon absorbs products such as 0.7 * 30 landing just below
        // an integer.
        let floor = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
        let train = floor(self.train).min(n);
        let dev = floor(self.dev).min(n - train);
        let mut c = [train, dev, n - train - dev];
        for i in 0..3 {
            if c[i] == 0 {
                // Ties resolve to the earliest partition (train, dev, test).
                let largest = (0..3).fold(0, |best, j| if c[j] > c[best] { j } else { best });
                if c[largest] > 1 {
                    c[largest] -= 1;
                    c[i] += 1;
                }
            }
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShotSubset {
    pub shots: usize,
    pub seed_index: usize,
    pub seed: u64,
    pub user_ids: Vec<UserId>,
}

/// A class that could not supply `shots` training users.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Shortfall {
    pub shots: usize,
    pub label_id: LabelId,
    pub available: usize,
}

/// Train/dev/test partition plus seeded s-shot subsets. Serializes as the
/// split manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotSplit {
    pub global_seed: u64,
    pub ratios: SplitRatios,
    pub dev_cap: usize,
    pub train_ids: Vec<UserId>,
    pub dev_ids: Vec<UserId>,
    pub test_ids: Vec<UserId>,
    /// Dev users removed by the per-class cap.
    #[serde(default)]
    pub dev_dropped_ids: Vec<UserId>,
    #[serde(default)]
    pub shot_subsets: Vec<ShotSubset>,
    #[serde(default)]
    pub shortfall_classes: Vec<Shortfall>,
}

impl FewShotSplit {
    pub fn subset(&self, shots: usize, seed_index: usize) -> Option<&ShotSubset> {
        self.shot_subsets
            .iter()
            .find(|s| s.shots == shots && s.seed_index == seed_index)
    }

    pub fn subsets_for(&self, shots: usize) -> Vec<&ShotSubset> {
        let mut v: Vec<_> = self
            .shot_subsets
            .iter()
            .filter(|s| s.shots == shots)
            .collect();
        v.sort_by_key(|s| s.seed_index);
        v
    }
}

/// Drops every class with fewer than `min_count` users.
pub fn filter_minority_classes(dataset: &Dataset, min_count: usize) -> Result<Dataset> {
    if min_count == 0 {
        return Err(Error::InvalidArgument("min_count must be at least 1".into()));
    }
    let counts = dataset.class_counts();
    let keep: HashSet<&LabelId> = counts
        .iter()
        .filter(|(_, c)| **c >= min_count)
        .map(|(l, _)| *l)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyDataset { min_count });
    }
    let labels = dataset
        .labels
        .iter()
        .filter(|l| keep.contains(&l.label_id))
        .cloned()
        .collect();
    let users = dataset
        .users
        .iter()
        .filter(|u| keep.contains(&u.label_id))
        .cloned()
        .collect();
    Ok(Dataset { users, labels })
}

/// Users of each label in dataset order, labels in dataset order.
fn users_by_class<'a>(dataset: &'a Dataset, ids: Option<&HashSet<&UserId>>) -> Vec<(&'a LabelId, Vec<&'a UserId>)> {
    let mut groups: Vec<(&LabelId, Vec<&UserId>)> =
        dataset.labels.iter().map(|l| (&l.label_id, Vec::new())).collect();
    let index = dataset.label_index();
    for u in &dataset.users {
        if ids.is_some_and(|set| !set.contains(&u.user_id)) {
            continue;
        }
        if let Some(&i) = index.get(&u.label_id) {
            groups[i].1.push(&u.user_id);
        }
    }
    groups
}

fn lower_median(values: &mut [usize]) -> usize {
    if values.is_empty() {
        return 0;
    }
    values.sort_unstable();
    values[(values.len() - 1) / 2]
}

fn in_dataset_order(dataset: &Dataset, ids: HashSet<&UserId>) -> Vec<UserId> {
    dataset
        .users
        .iter()
        .filter(|u| ids.contains(&u.user_id))
        .map(|u| u.user_id.clone())
        .collect()
}

/// Category-wise random split. `dev_cap = None` caps each class's dev share
/// at the median per-class dev count.
pub fn make_split(
    dataset: &Dataset,
    ratios: SplitRatios,
    global_seed: u64,
    dev_cap: Option<usize>,
) -> Result<FewShotSplit> {
    let groups = users_by_class(dataset, None);
    let mut rng = rng_for(global_seed, &[0x5911]);
    let mut assigned: Vec<[Vec<&UserId>; 3]> = Vec::with_capacity(groups.len());

    for (label, users) in &groups {
        if users.is_empty() {
            continue;
        }
        if users.len() < 3 {
            return Err(Error::ClassTooSmall {
                label: label.0.clone(),
                count: users.len(),
                required: 3,
            });
        }
        let mut shuffled = users.clone();
        shuffled.shuffle(&mut rng);
        let [train, dev, _] = ratios.counts(shuffled.len());
        let test = shuffled.split_off(train + dev);
        let dev_part = shuffled.split_off(train);
        assigned.push([shuffled, dev_part, test]);
    }

    let cap = dev_cap.unwrap_or_else(|| {
        let mut devs: Vec<usize> = assigned.iter().map(|a| a[1].len()).collect();
        lower_median(&mut devs)
    });
    let cap = cap.max(1);

    let mut train = HashSet::new();
    let mut dev = HashSet::new();
    let mut test = HashSet::new();
    let mut dropped = HashSet::new();
    for [tr, dv, te] in assigned {
        train.extend(tr);
        // Dev members are already in shuffled order; the cap keeps a prefix.
        for (i, u) in dv.into_iter().enumerate() {
            if i < cap {
                dev.insert(u);
            } else {
                dropped.insert(u);
            }
        }
        test.extend(te);
    }

    Ok(FewShotSplit {
        global_seed,
        ratios,
        dev_cap: cap,
        train_ids: in_dataset_order(dataset, train),
        dev_ids: in_dataset_order(dataset, dev),
        test_ids: in_dataset_order(dataset, test),
        dev_dropped_ids: in_dataset_order(dataset, dropped),
        shot_subsets: Vec::new(),
        shortfall_classes: Vec::new(),
    })
}

/// Draws one s-shot training subset per `(s, seed)` pair. Subsets for
/// different `s` are drawn independently.
pub fn make_shot_subsets(
    split: &FewShotSplit,
    dataset: &Dataset,
    shots: &[usize],
    seeds: &[u64; 3],
) -> Result<FewShotSplit> {
    if let Some(bad) = shots.iter().find(|s| !(1..=8).contains(*s)) {
        return Err(Error::InvalidArgument(format!(
            "shot count {bad} outside 1..=8"
        )));
    }
    let distinct: HashSet<_> = seeds.iter().collect();
    if distinct.len() != seeds.len() {
        return Err(Error::InvalidArgument("subset seeds must be distinct".into()));
    }

    let train: HashSet<&UserId> = split.train_ids.iter().collect();
    let groups = users_by_class(dataset, Some(&train));
    let mut out = split.clone();
    out.shot_subsets.retain(|s| !shots.contains(&s.shots));
    out.shortfall_classes.retain(|s| !shots.contains(&s.shots));

    for &s in shots {
        for (label, users) in &groups {
            if !users.is_empty() && users.len() < s {
                out.shortfall_classes.push(Shortfall {
                    shots: s,
                    label_id: (*label).clone(),
                    available: users.len(),
                });
            }
        }
        for (seed_index, &seed) in seeds.iter().enumerate() {
            let mut rng = rng_for(derive_seed(seed, &[s as u64]), &[]);
            let mut chosen = HashSet::new();
            for (_, users) in &groups {
                if users.len() <= s {
                    chosen.extend(users.iter().copied());
                } else {
                    for i in index::sample(&mut rng, users.len(), s) {
                        chosen.insert(users[i]);
                    }
                }
            }
            out.shot_subsets.push(ShotSubset {
                shots: s,
                seed_index,
                seed,
                user_ids: in_dataset_order(dataset, chosen),
            });
        }
    }
    out.shot_subsets
        .sort_by_key(|s| (s.shots, s.seed_index));
    Ok(out)
}

/// Per-class user counts of `ids`.
pub fn class_histogram<'a>(dataset: &'a Dataset, ids: &[UserId]) -> HashMap<&'a LabelId, usize> {
    let wanted: HashSet<&UserId> = ids.iter().collect();
    let mut h = HashMap::new();
    for u in &dataset.users {
        if wanted.contains(&u.user_id) {
            *h.entry(&u.label_id).or_insert(0) += 1;
        }
    }
    h
}
