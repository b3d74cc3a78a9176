use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::{seeds, Error, Result};

/// One creative's aggregated click log. Serialized as a JSONL line with keys
/// `product_id`, `background_tokens`, `exposures`, `clicks`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub product_id: u32,
    pub background_tokens: Vec<u32>,
    pub exposures: u64,
    pub clicks: u64,
}

impl ClickRecord {
    pub fn new(product_id: u32, background_tokens: Vec<u32>, exposures: u64, clicks: u64) -> Result<Self> {
        if clicks > exposures {
            return Err(Error::Label(format!("{clicks} clicks exceed {exposures} exposures")));
        }
        Ok(Self {
            product_id,
            background_tokens,
            exposures,
            clicks,
        })
    }

    /// Maximum-likelihood CTR, `clicks / exposures` (0 for no exposures).
    pub fn ctr(&self) -> f64 {
        if self.exposures == 0 {
            0.0
        } else {
            self.clicks as f64 / self.exposures as f64
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    LeftHigher,
    RightHigher,
}

impl PairLabel {
    /// Index of the winning side, matching the classification head layout.
    pub fn index(self) -> usize {
        match self {
            PairLabel::LeftHigher => 0,
            PairLabel::RightHigher => 1,
        }
    }

    pub fn one_hot(self) -> [f64; 2] {
        match self {
            PairLabel::LeftHigher => [1.0, 0.0],
            PairLabel::RightHigher => [0.0, 1.0],
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            PairLabel::LeftHigher => PairLabel::RightHigher,
            PairLabel::RightHigher => PairLabel::LeftHigher,
        }
    }

    /// Label of the larger value; `None` on an exact tie.
    pub fn from_values(left: f64, right: f64) -> Option<Self> {
        if left > right {
            Some(PairLabel::LeftHigher)
        } else if right > left {
            Some(PairLabel::RightHigher)
        } else {
            None
        }
    }
}

/// Two creatives of the same product with the label and the CTRs it was
/// derived from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairSample {
    pub product_id: u32,
    pub left: ClickRecord,
    pub right: ClickRecord,
    pub label: PairLabel,
    pub true_ctrs: (f64, f64),
}

impl PairSample {
    /// Same pair with sides exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            product_id: self.product_id,
            left: self.right.clone(),
            right: self.left.clone(),
            label: self.label.flipped(),
            true_ctrs: (self.true_ctrs.1, self.true_ctrs.0),
        }
    }
}

/// Minimum exposures per creative (E) and minimum relative CTR difference
/// (D) for a pair to be kept.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairThresholds {
    pub min_exposures: u64,
    pub min_relative_diff: f64,
}

impl PairThresholds {
    /// Training thresholds, E = 50 and D = 1%.
    pub const TRAIN: Self = Self {
        min_exposures: 50,
        min_relative_diff: 0.01,
    };
    /// Test thresholds, E = 1000 and D = 5%.
    pub const TEST: Self = Self {
        min_exposures: 1000,
        min_relative_diff: 0.05,
    };

    pub fn accepts(&self, a: &ClickRecord, b: &ClickRecord) -> bool {
        a.exposures >= self.min_exposures
            && b.exposures >= self.min_exposures
            && relative_ctr_difference(a.ctr(), b.ctr())
                .is_some_and(|d| d > self.min_relative_diff)
    }

    pub fn at_least_as_strict_as(&self, other: &Self) -> bool {
        self.min_exposures >= other.min_exposures && self.min_relative_diff >= other.min_relative_diff
    }
}

/// `|c1 - c2| / min(c1, c2)`, undefined when the smaller CTR is zero.
pub fn relative_ctr_difference(c1: f64, c2: f64) -> Option<f64> {
    let lo = c1.min(c2);
    if lo <= 0.0 {
        None
    } else {
        Some((c1 - c2).abs() / lo)
    }
}

/// Emits every same-product pair of records (in record order within each
/// product) that passes both thresholds.
///
/// `ctr_of` supplies the CTR each label is derived from: the hidden true CTR
/// when a ground-truth world is available, [`ClickRecord::ctr`] otherwise.
/// Pairs whose supplied CTRs tie exactly are dropped.
pub fn filter_pairs<F>(records: &[ClickRecord], thresholds: PairThresholds, ctr_of: F) -> Vec<PairSample>
where
    F: Fn(&ClickRecord) -> f64,
{
    let mut by_product: BTreeMap<u32, Vec<&ClickRecord>> = BTreeMap::new();
    for r in records {
        by_product.entry(r.product_id).or_default().push(r);
    }
    let mut out = Vec::new();
    for group in by_product.values() {
        for i in 0..group.len() {
            for j in i + 1..group.len() {
                let (a, b) = (group[i], group[j]);
                if !thresholds.accepts(a, b) {
                    continue;
                }
                let (ca, cb) = (ctr_of(a), ctr_of(b));
                let Some(label) = PairLabel::from_values(ca, cb) else {
                    continue;
                };
                out.push(PairSample {
                    product_id: a.product_id,
                    left: a.clone(),
                    right: b.clone(),
                    label,
                    true_ctrs: (ca, cb),
                });
            }
        }
    }
    out
}

/// Seeded split of product ids into `(train, test)` with
/// `round(test_fraction · n)` test products.
pub fn partition_products(ids: &[u32], test_fraction: f64, seed: u64) -> (BTreeSet<u32>, BTreeSet<u32>) {
    let mut ids: Vec<u32> = ids.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    ids.shuffle(&mut seeds::stream(seed, "split/products"));
    let n_test = ((ids.len() as f64) * test_fraction.clamp(0.0, 1.0)).round() as usize;
    let test = ids[..n_test].iter().copied().collect();
    let train = ids[n_test..].iter().copied().collect();
    (train, test)
}

/// Routes pairs by product id and re-applies each side's thresholds.
pub fn split_by_products(
    pairs: &[PairSample],
    train_thresholds: PairThresholds,
    test_thresholds: PairThresholds,
    test_ids: &BTreeSet<u32>,
) -> Result<(Vec<PairSample>, Vec<PairSample>)> {
    if !test_thresholds.at_least_as_strict_as(&train_thresholds) {
        return Err(Error::Config(format!(
            "test thresholds {test_thresholds:?} are looser than train thresholds {train_thresholds:?}"
        )));
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for p in pairs {
        if test_ids.contains(&p.product_id) {
            if test_thresholds.accepts(&p.left, &p.right) {
                test.push(p.clone());
            }
        } else if train_thresholds.accepts(&p.left, &p.right) {
            train.push(p.clone());
        }
    }
    let train_ids: BTreeSet<u32> = train.iter().map(|p| p.product_id).collect();
    if let Some(id) = test.iter().map(|p| p.product_id).find(|id| train_ids.contains(id)) {
        return Err(Error::Partition(format!("product {id} on both sides of the split")));
    }
    Ok((train, test))
}

/// Product-disjoint train/test split of `pairs`.
pub fn split_train_test(
    pairs: &[PairSample],
    train_thresholds: PairThresholds,
    test_thresholds: PairThresholds,
    test_fraction: f64,
    seed: u64,
) -> Result<(Vec<PairSample>, Vec<PairSample>)> {
    let ids: Vec<u32> = pairs.iter().map(|p| p.product_id).collect();
    let (_, test_ids) = partition_products(&ids, test_fraction, seed);
    split_by_products(pairs, train_thresholds, test_thresholds, &test_ids)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(pid: u32, bg: u32, exposures: u64, clicks: u64) -> ClickRecord {
        ClickRecord::new(pid, vec![bg], exposures, clicks).unwrap()
    }

    #[test]
    fn low_exposure_pair_rejected() {
        let records = [rec(0, 1, 40, 4), rec(0, 2, 2000, 400)];
        assert!(filter_pairs(&records, PairThresholds::TRAIN, ClickRecord::ctr).is_empty());
    }

    #[test]
    fn small_relative_difference_rejected() {
        // CTRs 0.020 and 0.0202: relative difference 1%.
        let records = [rec(0, 1, 10_000, 200), rec(0, 2, 10_000, 202)];
        assert!(filter_pairs(&records, PairThresholds::TEST, ClickRecord::ctr).is_empty());
        let loose = PairThresholds {
            min_exposures: 0,
            min_relative_diff: 0.005,
        };
        assert_eq!(filter_pairs(&records, loose, ClickRecord::ctr).len(), 1);
    }

    #[test]
    fn zero_ctr_pairs_excluded() {
        assert_eq!(relative_ctr_difference(0.0, 0.3), None);
        let records = [rec(0, 1, 5000, 0), rec(0, 2, 5000, 100)];
        assert!(filter_pairs(&records, PairThresholds::TRAIN, ClickRecord::ctr).is_empty());
    }

    #[test]
    fn clicks_cannot_exceed_exposures() {
        assert!(ClickRecord::new(0, vec![], 3, 4).is_err());
    }

    #[test]
    fn split_edge_cases() {
        let (train, test) =
            split_train_test(&[], PairThresholds::TRAIN, PairThresholds::TEST, 0.2, 1).unwrap();
        assert!(train.is_empty() && test.is_empty());
        let err = split_train_test(&[], PairThresholds::TEST, PairThresholds::TRAIN, 0.2, 1);
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn jsonl_keys() {
        let line = serde_json::to_string(&rec(3, 9, 10, 2)).unwrap();
        assert_eq!(
            line,
            r#"{"product_id":3,"background_tokens":[9],"exposures":10,"clicks":2}"#
        );
    }
}
