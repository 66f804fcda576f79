//! Evaluation protocols: known-material folds, leave-one-material-out
//! splits, presentation-score fusion, and TDR @ FDR metrics.
//!
//! FDR is the fraction of live presentations scored at or above the
//! threshold, TDR the fraction of spoofs. The operating threshold
//! maximizes TDR subject to FDR <= target, over the observed score values
//! plus +inf; ties prefer the larger threshold.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ingest::{Label, Manifest};

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("need at least {needed} live subjects for {folds} folds, found {found}")]
    TooFewSubjects {
        needed: usize,
        folds: usize,
        found: usize,
    },
    #[error("folds must be >= 2, got {0}")]
    BadFoldCount(usize),
    #[error("unknown material {0:?} (or no presentations carry it)")]
    UnknownMaterial(String),
    #[error("cannot fuse an empty score list")]
    EmptyScores,
    #[error("score table needs both live and spoof entries")]
    OneClassOnly,
    #[error("cannot aggregate zero folds")]
    NoReports,
    #[error("cannot split: no live subjects in manifest")]
    NoLiveSubjects,
}

/// A train/test partition of presentation ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitPlan {
    pub name: String,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
    pub fold_index: Option<usize>,
    pub held_out_material: Option<String>,
}

impl SplitPlan {
    pub fn is_disjoint(&self) -> bool {
        self.train_ids.is_disjoint(&self.test_ids)
    }
}

fn live_subjects_sorted(manifest: &Manifest) -> Vec<String> {
    let set: BTreeSet<String> = manifest
        .live_records()
        .map(|r| r.subject_id.clone())
        .collect();
    set.into_iter().collect()
}

/// Five-fold (or k-fold) known-material protocol: live subjects are
/// partitioned across folds, spoof presentations are partitioned
/// stratified by (material, variant), and fold i tests on its own
/// subjects' lives plus its own spoof share.
pub fn make_known_material_folds(
    manifest: &Manifest,
    k: usize,
    seed: u64,
) -> Result<Vec<SplitPlan>, EvalError> {
    if k < 2 {
        return Err(EvalError::BadFoldCount(k));
    }
    let mut subjects = live_subjects_sorted(manifest);
    if subjects.is_empty() {
        return Err(EvalError::NoLiveSubjects);
    }
    if subjects.len() < k {
        return Err(EvalError::TooFewSubjects {
            needed: k,
            folds: k,
            found: subjects.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let mut subject_fold: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in subjects.iter().enumerate() {
        subject_fold.insert(s, i % k);
    }

    // spoofs grouped by (material, variant), dealt round-robin per group
    let mut groups: BTreeMap<(String, String), Vec<String>> = BTreeMap::new();
    for rec in manifest.spoof_records() {
        let key = (
            rec.material.clone().unwrap_or_default(),
            rec.material_variant.clone().unwrap_or_default(),
        );
        groups.entry(key).or_default().push(rec.presentation_id.clone());
    }
    let mut spoof_fold: BTreeMap<String, usize> = BTreeMap::new();
    for ids in groups.values_mut() {
        ids.shuffle(&mut rng);
        for (j, id) in ids.iter().enumerate() {
            spoof_fold.insert(id.clone(), j % k);
        }
    }

    let mut folds = Vec::with_capacity(k);
    for fold in 0..k {
        let mut train_ids = BTreeSet::new();
        let mut test_ids = BTreeSet::new();
        for rec in &manifest.records {
            let in_test = match rec.label {
                Label::Live => subject_fold[rec.subject_id.as_str()] == fold,
                Label::Spoof => spoof_fold[&rec.presentation_id] == fold,
            };
            if in_test {
                test_ids.insert(rec.presentation_id.clone());
            } else {
                train_ids.insert(rec.presentation_id.clone());
            }
        }
        folds.push(SplitPlan {
            name: format!("known_material_fold_{fold}"),
            train_ids,
            test_ids,
            fold_index: Some(fold),
            held_out_material: None,
        });
    }
    Ok(folds)
}

/// Leave-one-material-out protocol: every presentation of the held-out
/// material (all variants) goes to test, along with 20% of live subjects;
/// the remaining lives and all other materials train.
pub fn make_cross_material_split(
    manifest: &Manifest,
    material: &str,
    seed: u64,
) -> Result<SplitPlan, EvalError> {
    let held_out: BTreeSet<String> = manifest
        .spoof_records()
        .filter(|r| r.material.as_deref() == Some(material))
        .map(|r| r.presentation_id.clone())
        .collect();
    if held_out.is_empty() {
        return Err(EvalError::UnknownMaterial(material.to_string()));
    }
    let mut subjects = live_subjects_sorted(manifest);
    if subjects.is_empty() {
        return Err(EvalError::NoLiveSubjects);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    subjects.shuffle(&mut rng);
    let n_test = ((subjects.len() as f64 * 0.2).round() as usize).clamp(1, subjects.len() - 1);
    let test_subjects: BTreeSet<&str> = subjects[..n_test].iter().map(String::as_str).collect();

    let mut train_ids = BTreeSet::new();
    let mut test_ids = BTreeSet::new();
    for rec in &manifest.records {
        let in_test = match rec.label {
            Label::Live => test_subjects.contains(rec.subject_id.as_str()),
            Label::Spoof => held_out.contains(&rec.presentation_id),
        };
        if in_test {
            test_ids.insert(rec.presentation_id.clone());
        } else if rec.label == Label::Live || !held_out.contains(&rec.presentation_id) {
            train_ids.insert(rec.presentation_id.clone());
        }
    }
    Ok(SplitPlan {
        name: format!("cross_material_{material}"),
        train_ids,
        test_ids,
        fold_index: None,
        held_out_material: Some(material.to_string()),
    })
}

/// Presentation-level fusion of patch-sequence scores: arithmetic mean.
pub fn fuse_scores(per_sequence: &[f64]) -> Result<f64, EvalError> {
    if per_sequence.is_empty() {
        return Err(EvalError::EmptyScores);
    }
    Ok(per_sequence.iter().sum::<f64>() / per_sequence.len() as f64)
}

/// One scored presentation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PresentationScore {
    pub presentation_id: String,
    pub label: Label,
    pub fused: f64,
    pub per_sequence: Vec<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ScoreTable {
    pub entries: Vec<PresentationScore>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fdr: f64,
    pub tdr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub fdr_target: f64,
    pub tdr: f64,
    pub fdr: f64,
    pub threshold: f64,
    pub n_live: usize,
    pub n_spoof: usize,
    pub roc: Vec<RocPoint>,
}

/// Sweep thresholds over the observed fused scores plus +inf and report
/// the maximal TDR with FDR <= target.
pub fn tdr_at_fdr(table: &ScoreTable, fdr_target: f64) -> Result<MetricsReport, EvalError> {
    let lives: Vec<f64> = table
        .entries
        .iter()
        .filter(|e| e.label == Label::Live)
        .map(|e| e.fused)
        .collect();
    let spoofs: Vec<f64> = table
        .entries
        .iter()
        .filter(|e| e.label == Label::Spoof)
        .map(|e| e.fused)
        .collect();
    if lives.is_empty() || spoofs.is_empty() {
        return Err(EvalError::OneClassOnly);
    }

    let mut thresholds: Vec<f64> = table.entries.iter().map(|e| e.fused).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).expect("finite scores"));
    thresholds.dedup();
    thresholds.insert(0, f64::INFINITY);

    let rates = |t: f64| -> (f64, f64) {
        let fa = lives.iter().filter(|&&s| s >= t).count() as f64 / lives.len() as f64;
        let td = spoofs.iter().filter(|&&s| s >= t).count() as f64 / spoofs.len() as f64;
        (fa, td)
    };

    let mut roc = Vec::with_capacity(thresholds.len());
    let mut best: Option<(f64, f64, f64)> = None; // (tdr, fdr, threshold)
    for &t in &thresholds {
        let (fdr, tdr) = rates(t);
        roc.push(RocPoint {
            threshold: t,
            fdr,
            tdr,
        });
        if fdr <= fdr_target {
            let better = match best {
                None => true,
                // thresholds descend, so on a TDR tie the earlier (larger)
                // threshold wins
                Some((bt, _, _)) => tdr > bt,
            };
            if better {
                best = Some((tdr, fdr, t));
            }
        }
    }
    let (tdr, fdr, threshold) = best.expect("+inf is always feasible");
    Ok(MetricsReport {
        fdr_target,
        tdr,
        fdr,
        threshold,
        n_live: lives.len(),
        n_spoof: spoofs.len(),
        roc,
    })
}

/// Mean and sample (n-1) standard deviation of fold TDRs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldAggregate {
    pub mean_tdr: f64,
    pub sd_tdr: f64,
    /// Set when only one fold was aggregated (sd reported as 0).
    pub single_fold: bool,
}

pub fn aggregate_folds(reports: &[MetricsReport]) -> Result<FoldAggregate, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::NoReports);
    }
    let n = reports.len() as f64;
    let mean = reports.iter().map(|r| r.tdr).sum::<f64>() / n;
    if reports.len() == 1 {
        return Ok(FoldAggregate {
            mean_tdr: mean,
            sd_tdr: 0.0,
            single_fold: true,
        });
    }
    let var = reports
        .iter()
        .map(|r| (r.tdr - mean) * (r.tdr - mean))
        .sum::<f64>()
        / (n - 1.0);
    Ok(FoldAggregate {
        mean_tdr: mean,
        sd_tdr: var.sqrt(),
        single_fold: false,
    })
}

/// O(n^2) reference sweep used by tests and the acceptance suite: evaluate
/// FDR/TDR independently at every candidate threshold.
pub fn tdr_at_fdr_bruteforce(table: &ScoreTable, fdr_target: f64) -> Option<(f64, f64, f64)> {
    let lives: Vec<f64> = table
        .entries
        .iter()
        .filter(|e| e.label == Label::Live)
        .map(|e| e.fused)
        .collect();
    let spoofs: Vec<f64> = table
        .entries
        .iter()
        .filter(|e| e.label == Label::Spoof)
        .map(|e| e.fused)
        .collect();
    if lives.is_empty() || spoofs.is_empty() {
        return None;
    }
    let mut candidates: Vec<f64> = table.entries.iter().map(|e| e.fused).collect();
    candidates.push(f64::INFINITY);
    let mut best: Option<(f64, f64, f64)> = None;
    for &t in &candidates {
        let fdr = lives.iter().filter(|&&s| s >= t).count() as f64 / lives.len() as f64;
        let tdr = spoofs.iter().filter(|&&s| s >= t).count() as f64 / spoofs.len() as f64;
        if fdr > fdr_target {
            continue;
        }
        best = match best {
            None => Some((tdr, fdr, t)),
            Some((bt, bf, bth)) => {
                if tdr > bt || (tdr == bt && t > bth) {
                    Some((tdr, fdr, t))
                } else {
                    Some((bt, bf, bth))
                }
            }
        };
    }
    best
}
