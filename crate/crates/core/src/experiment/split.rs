use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_store::Dataset;
use crate::site_class::{classify, ClassBoundaries, SiteClass};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Train,
    Val,
    Test,
}

/// Station-level partition; records follow their station.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_station_ids: BTreeSet<String>,
    pub val_station_ids: BTreeSet<String>,
    pub test_station_ids: BTreeSet<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
}

impl SplitPlan {
    /// Fails if any station id appears in two sets.
    pub fn verify_disjoint(&self) -> Result<()> {
        let pairs = [
            ("train", &self.train_station_ids, "test", &self.test_station_ids),
            ("train", &self.train_station_ids, "val", &self.val_station_ids),
            ("val", &self.val_station_ids, "test", &self.test_station_ids),
        ];
        for (an, a, bn, b) in pairs {
            if let Some(id) = a.intersection(b).next() {
                return Err(Error::Disjointness(format!("station {id} is in both {an} and {bn}")));
            }
        }
        Ok(())
    }

    /// Disjointness plus coverage: every labeled station of `dataset` is in
    /// exactly one set and every listed station exists and is labeled.
    pub fn verify(&self, dataset: &Dataset) -> Result<()> {
        self.verify_disjoint()?;
        for id in self.all() {
            match dataset.station(id) {
                Some(s) if s.vs30.is_some() => {}
                Some(_) => return Err(Error::Disjointness(format!("station {id} has no Vs30 but is in the split"))),
                None => return Err(Error::Disjointness(format!("station {id} is not in the dataset"))),
            }
        }
        if let Some(s) = dataset.labeled_stations().find(|s| self.role(&s.station_id).is_none()) {
            return Err(Error::Disjointness(format!("labeled station {} is in no split", s.station_id)));
        }
        Ok(())
    }

    pub fn role(&self, station_id: &str) -> Option<Role> {
        if self.train_station_ids.contains(station_id) {
            Some(Role::Train)
        } else if self.val_station_ids.contains(station_id) {
            Some(Role::Val)
        } else if self.test_station_ids.contains(station_id) {
            Some(Role::Test)
        } else {
            None
        }
    }

    pub fn stations(&self, role: Role) -> &BTreeSet<String> {
        match role {
            Role::Train => &self.train_station_ids,
            Role::Val => &self.val_station_ids,
            Role::Test => &self.test_station_ids,
        }
    }

    fn all(&self) -> impl Iterator<Item = &String> {
        self.train_station_ids
            .iter()
            .chain(&self.val_station_ids)
            .chain(&self.test_station_ids)
    }

    /// Moves `fraction` of the train stations (rounded, at least one when
    /// the fraction is positive and two or more train stations exist) into
    /// the validation set.
    pub fn with_validation(mut self, fraction: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("val_fraction must be in [0, 1), got {fraction}")));
        }
        let mut train: Vec<String> = self.train_station_ids.iter().cloned().collect();
        let mut n_val = (train.len() as f64 * fraction).round() as usize;
        if fraction > 0.0 && train.len() >= 2 {
            n_val = n_val.max(1);
        }
        n_val = n_val.min(train.len().saturating_sub(1));
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c69);
        train.shuffle(&mut rng);
        let val: Vec<String> = train.drain(..n_val).collect();
        self.val_station_ids.extend(val);
        self.train_station_ids = train.into_iter().collect();
        Ok(self)
    }
}

/// Shuffles labeled stations by `seed` and gives `train_fraction` of each
/// site class (rounded) to training, the rest to test.
pub fn split_by_station(
    dataset: &Dataset,
    seed: u64,
    train_fraction: f64,
    bounds: &ClassBoundaries,
) -> Result<SplitPlan> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!("train_fraction must be in (0, 1), got {train_fraction}")));
    }
    let labeled: Vec<(String, f64)> = dataset
        .labeled_stations()
        .map(|s| (s.station_id.clone(), s.vs30.unwrap()))
        .collect();
    if labeled.len() < 2 {
        return Err(Error::EmptySplit(format!(
            "need at least 2 labeled stations, found {}",
            labeled.len()
        )));
    }
    let mut by_class: BTreeMap<SiteClass, Vec<String>> = BTreeMap::new();
    for (id, vs30) in &labeled {
        by_class.entry(classify(*vs30, bounds)?).or_default().push(id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plan = SplitPlan::default();
    let mut take = |mut ids: Vec<String>, plan: &mut SplitPlan| {
        ids.shuffle(&mut rng);
        let n_train = (ids.len() as f64 * train_fraction).round() as usize;
        let test = ids.split_off(n_train);
        plan.train_station_ids.extend(ids);
        plan.test_station_ids.extend(test);
    };
    if let Some((class, ids)) = by_class.iter().find(|(_, ids)| ids.len() < 2) {
        plan.warnings.push(format!(
            "site class {class} has {} station(s); split is not stratified",
            ids.len()
        ));
        take(labeled.into_iter().map(|(id, _)| id).collect(), &mut plan);
    } else {
        for ids in by_class.into_values() {
            take(ids, &mut plan);
        }
    }
    if plan.train_station_ids.is_empty() || plan.test_station_ids.is_empty() {
        return Err(Error::EmptySplit(format!(
            "fraction {train_fraction} leaves {} train / {} test stations",
            plan.train_station_ids.len(),
            plan.test_station_ids.len()
        )));
    }
    Ok(plan)
}
