use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use serde::{Deserialize, Serialize};

use super::DomainTag;
use crate::error::{Error, Result};
use crate::rng;

/// What the splitter needs to know about a volume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeMeta {
    pub volume_id: String,
    pub domain: DomainTag,
    pub depth: usize,
}

/// One slice of one volume.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SliceRef {
    pub volume_id: String,
    pub slice: usize,
}

/// Labeled target volumes, used only by the upper-bound regime.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpperBoundSplit {
    pub train: usize,
    pub val: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StratifyConfig {
    /// Source volumes with sparse labels for training.
    pub source_train: usize,
    pub source_val: usize,
    pub source_test: usize,
    /// Extra source volumes used only as unlabeled contrastive data.
    #[serde(default)]
    pub source_unlabeled: usize,
    pub target_test: usize,
    /// Target volumes used as unlabeled data. `None` takes every target
    /// volume not claimed by a test or upper-bound partition.
    #[serde(default)]
    pub target_unlabeled: Option<usize>,
    #[serde(default)]
    pub upper_bound: Option<UpperBoundSplit>,
    /// Annotated slices per labeled training or validation volume.
    pub labeled_slices_per_volume: usize,
    /// Evaluated slices per test volume; `None` evaluates every slice.
    #[serde(default)]
    pub test_slices_per_volume: Option<usize>,
}

impl Default for StratifyConfig {
    fn default() -> Self {
        Self {
            source_train: 8,
            source_val: 2,
            source_test: 10,
            source_unlabeled: 20,
            target_test: 20,
            target_unlabeled: None,
            upper_bound: None,
            labeled_slices_per_volume: 4,
            test_slices_per_volume: None,
        }
    }
}

/// Volume-level partition plus the annotated slices of each labeled volume.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub labeled_train: Vec<SliceRef>,
    pub labeled_val: Vec<SliceRef>,
    pub unlabeled_source: Vec<String>,
    pub unlabeled_target: Vec<String>,
    pub test_source: Vec<SliceRef>,
    pub test_target: Vec<SliceRef>,
    #[serde(default)]
    pub upper_train: Vec<SliceRef>,
    #[serde(default)]
    pub upper_val: Vec<SliceRef>,
}

fn ids(refs: &[SliceRef]) -> BTreeSet<&str> {
    refs.iter().map(|r| r.volume_id.as_str()).collect()
}

impl DatasetSplit {
    /// Volume ids used for training or validation in any role.
    pub fn fit_volumes(&self) -> BTreeSet<&str> {
        let mut s = ids(&self.labeled_train);
        s.extend(ids(&self.labeled_val));
        s.extend(ids(&self.upper_train));
        s.extend(ids(&self.upper_val));
        s.extend(self.unlabeled_source.iter().map(String::as_str));
        s.extend(self.unlabeled_target.iter().map(String::as_str));
        s
    }

    pub fn test_volumes(&self) -> BTreeSet<&str> {
        let mut s = ids(&self.test_source);
        s.extend(ids(&self.test_target));
        s
    }

    /// Check that no volume is both fitted on and tested on.
    pub fn validate(&self) -> Result<()> {
        let fit = self.fit_volumes();
        if let Some(v) = self.test_volumes().into_iter().find(|v| fit.contains(v)) {
            return Err(Error::Invalid(format!("volume {v} is in both fit and test partitions")));
        }
        Ok(())
    }
}

/// Move the first `n` entries out of `pool`; callers check feasibility first.
fn take(pool: &mut Vec<VolumeMeta>, n: usize) -> Vec<VolumeMeta> {
    let rest = pool.split_off(n);
    std::mem::replace(pool, rest)
}

fn pick_slices(
    vols: &[VolumeMeta],
    per_volume: Option<usize>,
    r: &mut rng::Stream,
    what: &str,
) -> Result<Vec<SliceRef>> {
    let mut out = Vec::new();
    for v in vols {
        let all: Vec<usize> = (0..v.depth).collect();
        let mut chosen: Vec<usize> = match per_volume {
            None => all,
            Some(k) if k > v.depth => {
                return Err(Error::Infeasible {
                    what: format!("{what} slices of {}", v.volume_id),
                    required: k,
                    available: v.depth,
                })
            }
            Some(k) => all.choose_multiple(r, k).copied().collect(),
        };
        chosen.sort_unstable();
        out.extend(chosen.into_iter().map(|slice| SliceRef {
            volume_id: v.volume_id.clone(),
            slice,
        }));
    }
    Ok(out)
}

fn id_list(v: &[VolumeMeta]) -> Vec<String> {
    v.iter().map(|m| m.volume_id.clone()).collect()
}

/// Assign volumes to partitions and choose annotated slices.
///
/// Target labels only appear in `test_target` and, when requested, in the
/// upper-bound partitions.
pub fn stratify(volumes: &[VolumeMeta], cfg: &StratifyConfig, seed: u64) -> Result<DatasetSplit> {
    if cfg.labeled_slices_per_volume == 0 {
        return Err(Error::Config("labeled_slices_per_volume must be >= 1".into()));
    }
    if cfg.source_train == 0 || cfg.source_val == 0 {
        return Err(Error::Config("source_train and source_val must be >= 1".into()));
    }
    let mut r = rng::stream(seed, "stratify", 0);
    let mut by_domain = |d: DomainTag| {
        let mut v: Vec<VolumeMeta> = volumes.iter().filter(|m| m.domain == d).cloned().collect();
        v.sort_by(|a, b| a.volume_id.cmp(&b.volume_id));
        v.shuffle(&mut r);
        v
    };
    let mut src = by_domain(DomainTag::Source);
    let mut tgt = by_domain(DomainTag::Target);

    let s_need = cfg.source_train + cfg.source_val + cfg.source_test + cfg.source_unlabeled;
    let ub = cfg.upper_bound.clone().unwrap_or(UpperBoundSplit { train: 0, val: 0 });
    let t_need = cfg.target_test + ub.train + ub.val + cfg.target_unlabeled.unwrap_or(0);
    if src.len() < s_need {
        return Err(Error::Infeasible {
            what: "source volumes".into(),
            required: s_need,
            available: src.len(),
        });
    }
    if tgt.len() < t_need {
        return Err(Error::Infeasible {
            what: "target volumes".into(),
            required: t_need,
            available: tgt.len(),
        });
    }

    let s_train = take(&mut src, cfg.source_train);
    let s_val = take(&mut src, cfg.source_val);
    let s_test = take(&mut src, cfg.source_test);
    let s_unl = take(&mut src, cfg.source_unlabeled);
    let t_test = take(&mut tgt, cfg.target_test);
    let t_ub_train = take(&mut tgt, ub.train);
    let t_ub_val = take(&mut tgt, ub.val);
    let t_unl = match cfg.target_unlabeled {
        Some(n) => take(&mut tgt, n),
        None => std::mem::take(&mut tgt),
    };

    let k = Some(cfg.labeled_slices_per_volume);
    let labeled_train = pick_slices(&s_train, k, &mut r, "labeled train")?;
    let labeled_val = pick_slices(&s_val, k, &mut r, "labeled val")?;
    let test_source = pick_slices(&s_test, cfg.test_slices_per_volume, &mut r, "source test")?;
    let test_target = pick_slices(&t_test, cfg.test_slices_per_volume, &mut r, "target test")?;
    let upper_train = pick_slices(&t_ub_train, k, &mut r, "upper-bound train")?;
    let upper_val = pick_slices(&t_ub_val, k, &mut r, "upper-bound val")?;

    let mut unlabeled_source = id_list(&s_train);
    unlabeled_source.extend(id_list(&s_unl));
    unlabeled_source.sort();
    let mut unlabeled_target = id_list(&t_unl);
    unlabeled_target.extend(id_list(&t_ub_train));
    unlabeled_target.sort();

    let split = DatasetSplit {
        labeled_train,
        labeled_val,
        unlabeled_source,
        unlabeled_target,
        test_source,
        test_target,
        upper_train,
        upper_val,
    };
    split.validate()?;
    Ok(split)
}
