use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Manifest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionName {
    Seen,
    UnseenObject,
    UnseenAffordance,
}

impl PartitionName {
    pub const ALL: [PartitionName; 3] = [Self::Seen, Self::UnseenObject, Self::UnseenAffordance];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Seen => "seen",
            Self::UnseenObject => "unseen_object",
            Self::UnseenAffordance => "unseen_affordance",
        }
    }
}

impl fmt::Display for PartitionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PartitionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown partition `{s}`")))
    }
}

/// One manifest entry: an (instance, affordance) annotation or an image.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryId {
    Point { instance: usize, affordance: String },
    Image(usize),
}

impl fmt::Display for EntryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EntryId::Point {
                instance,
                affordance,
            } => write!(f, "point:{instance}:{affordance}"),
            EntryId::Image(i) => write!(f, "image:{i}"),
        }
    }
}

impl EntryId {
    pub fn object<'m>(&self, m: &'m Manifest) -> &'m str {
        match self {
            EntryId::Point { instance, .. } => &m.points[*instance].object,
            EntryId::Image(i) => &m.images[*i].object,
        }
    }

    pub fn affordance<'e>(&'e self, m: &'e Manifest) -> &'e str {
        match self {
            EntryId::Point { affordance, .. } => affordance,
            EntryId::Image(i) => &m.images[*i].affordance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub name: PartitionName,
    pub train: Vec<EntryId>,
    pub test: Vec<EntryId>,
    pub held_out_objects: BTreeSet<String>,
    pub held_out_affordances: BTreeSet<String>,
}

impl PartitionSpec {
    pub fn train_categories(&self, m: &Manifest) -> (BTreeSet<String>, BTreeSet<String>) {
        categories(&self.train, m)
    }

    pub fn test_categories(&self, m: &Manifest) -> (BTreeSet<String>, BTreeSet<String>) {
        categories(&self.test, m)
    }

    /// Checks disjointness and the category-exclusion rule of this partition kind.
    pub fn check_invariants(&self, m: &Manifest) -> Result<()> {
        let train: BTreeSet<&EntryId> = self.train.iter().collect();
        if let Some(shared) = self.test.iter().find(|e| train.contains(e)) {
            return Err(Error::Validation(format!(
                "{}: entry {shared} is in both train and test",
                self.name
            )));
        }
        let (train_obj, train_aff) = self.train_categories(m);
        let (test_obj, test_aff) = self.test_categories(m);
        match self.name {
            PartitionName::Seen => {}
            PartitionName::UnseenObject => {
                if let Some(o) = test_obj.intersection(&train_obj).next() {
                    return Err(Error::Validation(format!(
                        "unseen_object: test object `{o}` appears in train"
                    )));
                }
                if let Some(a) = test_aff.difference(&train_aff).next() {
                    return Err(Error::Validation(format!(
                        "unseen_object: test affordance `{a}` missing from train"
                    )));
                }
            }
            PartitionName::UnseenAffordance => {
                if let Some(a) = test_aff.intersection(&train_aff).next() {
                    return Err(Error::Validation(format!(
                        "unseen_affordance: test affordance `{a}` appears in train"
                    )));
                }
            }
        }
        Ok(())
    }
}

fn categories(entries: &[EntryId], m: &Manifest) -> (BTreeSet<String>, BTreeSet<String>) {
    let objects = entries.iter().map(|e| e.object(m).to_string()).collect();
    let affordances = entries.iter().map(|e| e.affordance(m).to_string()).collect();
    (objects, affordances)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partitions {
    pub seen: PartitionSpec,
    pub unseen_object: PartitionSpec,
    pub unseen_affordance: PartitionSpec,
}

fn all_entries(m: &Manifest) -> Vec<EntryId> {
    let mut out = Vec::new();
    for (i, p) in m.points.iter().enumerate() {
        for aff in p.labels.keys() {
            out.push(EntryId::Point {
                instance: i,
                affordance: aff.clone(),
            });
        }
    }
    out.extend((0..m.images.len()).map(EntryId::Image));
    out
}

/// Number of items to hold out from `n` at the given train ratio; keeps at
/// least one item on each side whenever `n ≥ 2`.
fn test_count(n: usize, train_ratio: f64) -> usize {
    if n < 2 {
        return 0;
    }
    let t = ((n as f64) * (1.0 - train_ratio)).round() as usize;
    t.clamp(1, n - 1)
}

fn seen_split(m: &Manifest, seed: u64, train_ratio: f64) -> (Vec<EntryId>, Vec<EntryId>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut test = Vec::new();

    // Instances are split per object category; all of an instance's labels go together.
    let mut by_object: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in m.points.iter().enumerate() {
        by_object.entry(p.object.as_str()).or_default().push(i);
    }
    for (_, mut idx) in by_object {
        idx.shuffle(&mut rng);
        let k = test_count(idx.len(), train_ratio);
        for (pos, &i) in idx.iter().enumerate() {
            let side = if pos < k { &mut test } else { &mut train };
            for aff in m.points[i].labels.keys() {
                side.push(EntryId::Point {
                    instance: i,
                    affordance: aff.clone(),
                });
            }
        }
    }

    let mut by_cell: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, e) in m.images.iter().enumerate() {
        by_cell
            .entry((e.object.as_str(), e.affordance.as_str()))
            .or_default()
            .push(i);
    }
    for (_, mut idx) in by_cell {
        idx.shuffle(&mut rng);
        let k = test_count(idx.len(), train_ratio);
        for (pos, &i) in idx.iter().enumerate() {
            if pos < k {
                test.push(EntryId::Image(i));
            } else {
                train.push(EntryId::Image(i));
            }
        }
    }
    train.sort();
    test.sort();
    (train, test)
}

fn check_subset(kind: &str, held: &BTreeSet<String>, known: &[String]) -> Result<()> {
    if let Some(bad) = held.iter().find(|h| !known.contains(h)) {
        return Err(Error::Config(format!("held-out {kind} `{bad}` is not in the manifest")));
    }
    Ok(())
}

/// Builds one partition. `seen_train_ratio` is the per-category train fraction of the seen split.
pub fn make_partition(
    name: PartitionName,
    manifest: &Manifest,
    held_out_objects: &BTreeSet<String>,
    held_out_affordances: &BTreeSet<String>,
    seed: u64,
    seen_train_ratio: f64,
) -> Result<PartitionSpec> {
    check_subset("object", held_out_objects, &manifest.objects)?;
    check_subset("affordance", held_out_affordances, &manifest.affordances)?;
    if !(seen_train_ratio > 0.0 && seen_train_ratio < 1.0) {
        return Err(Error::Config(format!(
            "seen train ratio must be in (0, 1), got {seen_train_ratio}"
        )));
    }
    let entries = all_entries(manifest);
    let (train, test, objs, affs) = match name {
        PartitionName::Seen => {
            let (train, test) = seen_split(manifest, seed, seen_train_ratio);
            (train, test, BTreeSet::new(), BTreeSet::new())
        }
        PartitionName::UnseenObject => {
            if held_out_objects.is_empty() {
                return Err(Error::Config("unseen_object needs at least one held-out object".into()));
            }
            let (held, rest): (Vec<EntryId>, Vec<EntryId>) = entries
                .into_iter()
                .partition(|e| held_out_objects.contains(e.object(manifest)));
            let held_affs: BTreeSet<String> =
                held.iter().map(|e| e.affordance(manifest).to_string()).collect();
            let rest_affs: BTreeSet<String> =
                rest.iter().map(|e| e.affordance(manifest).to_string()).collect();
            let shared: BTreeSet<&String> = held_affs.intersection(&rest_affs).collect();
            let keep = |e: &EntryId| shared.contains(&e.affordance(manifest).to_string());
            let train: Vec<EntryId> = rest.iter().filter(|e| keep(e)).cloned().collect();
            let test: Vec<EntryId> = held.iter().filter(|e| keep(e)).cloned().collect();
            (train, test, held_out_objects.clone(), BTreeSet::new())
        }
        PartitionName::UnseenAffordance => {
            if held_out_affordances.is_empty() {
                return Err(Error::Config(
                    "unseen_affordance needs at least one held-out affordance".into(),
                ));
            }
            let (test, train): (Vec<EntryId>, Vec<EntryId>) = entries
                .into_iter()
                .partition(|e| held_out_affordances.contains(e.affordance(manifest)));
            (train, test, BTreeSet::new(), held_out_affordances.clone())
        }
    };
    let has_points = |v: &[EntryId]| v.iter().any(|e| matches!(e, EntryId::Point { .. }));
    let has_images = |v: &[EntryId]| v.iter().any(|e| matches!(e, EntryId::Image(_)));
    if !has_points(&train) || !has_images(&train) {
        return Err(Error::Config(format!(
            "{name}: the held-out categories leave no training data"
        )));
    }
    if !has_points(&test) {
        return Err(Error::Config(format!("{name}: the test side is empty")));
    }
    let spec = PartitionSpec {
        name,
        train,
        test,
        held_out_objects: objs,
        held_out_affordances: affs,
    };
    spec.check_invariants(manifest)?;
    Ok(spec)
}

/// Builds all three partitions.
pub fn make_partitions(
    manifest: &Manifest,
    held_out_objects: &BTreeSet<String>,
    held_out_affordances: &BTreeSet<String>,
    seed: u64,
    seen_train_ratio: f64,
) -> Result<Partitions> {
    let build = |name| {
        make_partition(
            name,
            manifest,
            held_out_objects,
            held_out_affordances,
            seed,
            seen_train_ratio,
        )
    };
    Ok(Partitions {
        seen: build(PartitionName::Seen)?,
        unseen_object: build(PartitionName::UnseenObject)?,
        unseen_affordance: build(PartitionName::UnseenAffordance)?,
    })
}
