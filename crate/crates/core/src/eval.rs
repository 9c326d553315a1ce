//! Verification trials, multi-crop scoring, EER and the oracle one-best
//! baseline.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::FusionModel;
use crate::simulator::{Dataset, SyntheticUtterance};

/// An (enrollment, test) pair of utterance ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub enroll: u32,
    pub test: u32,
    pub same_speaker: bool,
}

/// Number of unordered pairs over `n` utterances.
pub fn trial_count(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

/// Every unordered pair of distinct utterances.
pub fn build_trials(ds: &Dataset) -> Vec<Trial> {
    let u = &ds.utterances;
    let mut out = Vec::with_capacity(trial_count(u.len() as u64) as usize);
    for i in 0..u.len() {
        for j in i + 1..u.len() {
            out.push(Trial {
                enroll: u[i].id,
                test: u[j].id,
                same_speaker: u[i].speaker == u[j].speaker,
            });
        }
    }
    out
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::contract(format!(
            "cosine of {}- and {}-dim vectors",
            a.len(),
            b.len()
        )));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::Numeric("zero-norm embedding in cosine".into()));
    }
    Ok(dot / (na * nb))
}

/// Mean cosine over the full cross product of enrollment and test crops.
pub fn trial_score(enroll: &[Vec<f64>], test: &[Vec<f64>]) -> Result<f64> {
    if enroll.is_empty() || test.is_empty() {
        return Err(Error::contract("trial scoring needs at least one crop per side"));
    }
    let mut total = 0.0;
    for a in enroll {
        for b in test {
            total += cosine(a, b)?;
        }
    }
    Ok(total / (enroll.len() * test.len()) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Eer {
    pub eer: f64,
    pub threshold: f64,
}

/// Equal error rate with accept rule `score >= threshold`.
///
/// Sweeps the threshold over every distinct score (plus one point above the
/// maximum where nothing is accepted) and linearly interpolates where the
/// false-accept and false-reject curves cross.
pub fn compute_eer(scores: &[f64], labels: &[bool]) -> Result<Eer> {
    if scores.len() != labels.len() {
        return Err(Error::contract("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("non-finite trial score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::contract(
            "EER needs at least one positive and one negative trial",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // (threshold, far, frr) at each distinct score, ascending
    let mut points = Vec::new();
    let mut pos_below = 0usize;
    let mut neg_below = 0usize;
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        let far = (n_neg - neg_below) as f64 / n_neg as f64;
        let frr = pos_below as f64 / n_pos as f64;
        points.push((t, far, frr));
        while i < order.len() && scores[order[i]] == t {
            if labels[order[i]] {
                pos_below += 1;
            } else {
                neg_below += 1;
            }
            i += 1;
        }
    }
    let top = scores[order[order.len() - 1]];
    points.push((top, 0.0, 1.0));

    for w in points.windows(2) {
        let (t0, far0, frr0) = w[0];
        let (t1, far1, frr1) = w[1];
        let d0 = far0 - frr0;
        let d1 = far1 - frr1;
        if d0 >= 0.0 && d1 <= 0.0 {
            if d0 == 0.0 {
                return Ok(Eer {
                    eer: far0,
                    threshold: t0,
                });
            }
            let alpha = d0 / (d0 - d1);
            return Ok(Eer {
                eer: far0 + alpha * (far1 - far0),
                threshold: t0 + alpha * (t1 - t0),
            });
        }
    }
    unreachable!("far - frr goes from 1 to -1 across the sweep")
}

/// Index of the channel closest to the source; ties go to the lowest index.
pub fn oracle_channel(utt: &SyntheticUtterance) -> Result<usize> {
    let c = utt.channels();
    if c == 0 || utt.embeddings.len() != c * utt.crops * utt.d_in {
        return Err(Error::contract(format!(
            "utterance {} lacks per-channel distance metadata",
            utt.id
        )));
    }
    if utt.distances.iter().any(|d| !d.is_finite()) {
        return Err(Error::contract(format!(
            "utterance {} has non-finite distances",
            utt.id
        )));
    }
    let mut best = 0;
    for (i, &d) in utt.distances.iter().enumerate() {
        if d < utt.distances[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per-crop embeddings of the physically closest channel.
pub fn oracle_one_best(utt: &SyntheticUtterance) -> Result<Vec<Vec<f64>>> {
    let ch = oracle_channel(utt)?;
    Ok((0..utt.crops)
        .map(|k| utt.embedding(ch, k).iter().map(|&v| v as f64).collect())
        .collect())
}

/// Per-crop fused embeddings of one utterance.
pub fn fusion_embeddings(model: &FusionModel, utt: &SyntheticUtterance) -> Result<Vec<Vec<f64>>> {
    (0..utt.crops)
        .map(|k| Ok(model.forward(&utt.crop_matrix(k))?.into_vec()))
        .collect()
}

/// Which system produced the per-utterance embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Fusion,
    OracleOneBest,
}

/// Scores for every trial of `ds` using per-utterance crop embeddings.
pub fn score_trials(
    ds: &Dataset,
    trials: &[Trial],
    embeddings: &[Vec<Vec<f64>>],
) -> Result<Vec<f64>> {
    let index: HashMap<u32, usize> = ds
        .utterances
        .iter()
        .enumerate()
        .map(|(i, u)| (u.id, i))
        .collect();
    let lookup = |id: u32| {
        index
            .get(&id)
            .copied()
            .ok_or_else(|| Error::contract(format!("trial references unknown utterance {id}")))
    };
    trials
        .par_iter()
        .map(|t| {
            let a = lookup(t.enroll)?;
            let b = lookup(t.test)?;
            if a == b {
                return Err(Error::contract("trial pairs an utterance with itself"));
            }
            trial_score(&embeddings[a], &embeddings[b])
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrialCounts {
    pub total: usize,
    pub positive: usize,
    pub negative: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialScoreReport {
    pub system: String,
    pub counts: TrialCounts,
    pub eer: f64,
    pub eer_threshold: f64,
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
}

/// Builds all trials of `ds`, scores them with the chosen system and
/// computes the EER.
pub fn evaluate(
    ds: &Dataset,
    baseline: Baseline,
    model: Option<&FusionModel>,
) -> Result<TrialScoreReport> {
    let embeddings: Vec<Vec<Vec<f64>>> = match baseline {
        Baseline::OracleOneBest => ds
            .utterances
            .par_iter()
            .map(oracle_one_best)
            .collect::<Result<_>>()?,
        Baseline::Fusion => {
            let model =
                model.ok_or_else(|| Error::Usage("fusion evaluation needs a model".into()))?;
            ds.utterances
                .par_iter()
                .map(|u| fusion_embeddings(model, u))
                .collect::<Result<_>>()?
        }
    };
    let trials = build_trials(ds);
    let scores = score_trials(ds, &trials, &embeddings)?;
    let labels: Vec<bool> = trials.iter().map(|t| t.same_speaker).collect();
    let eer = compute_eer(&scores, &labels)?;
    let positive = labels.iter().filter(|&&l| l).count();
    let system = match (baseline, model) {
        (Baseline::OracleOneBest, _) => "oracle-one-best".to_string(),
        (Baseline::Fusion, Some(m)) => format!("fusion-{}", m.config.mode),
        (Baseline::Fusion, None) => unreachable!(),
    };
    Ok(TrialScoreReport {
        system,
        counts: TrialCounts {
            total: labels.len(),
            positive,
            negative: labels.len() - positive,
        },
        eer: eer.eer,
        eer_threshold: eer.threshold,
        scores,
        labels,
    })
}

/// One row of the system comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub system: String,
    pub channels: [usize; 2],
    pub eer: f64,
    pub eer_threshold: f64,
}

/// The JSON report written by evaluation runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// SHA-256 over the canonical JSON of the configs that produced this.
    pub config_digest: String,
    pub system: String,
    pub trials: TrialCounts,
    pub eer: f64,
    pub eer_threshold: f64,
    pub comparison: Vec<ComparisonRow>,
    pub scores: Vec<f64>,
}

impl EvalReport {
    pub fn new(report: &TrialScoreReport, channels: [usize; 2], digest: String) -> Self {
        Self {
            config_digest: digest,
            system: report.system.clone(),
            trials: report.counts,
            eer: report.eer,
            eer_threshold: report.eer_threshold,
            comparison: vec![ComparisonRow {
                system: report.system.clone(),
                channels,
                eer: report.eer,
                eer_threshold: report.eer_threshold,
            }],
            scores: report.scores.clone(),
        }
    }
}

/// Hex SHA-256 of the serialized value.
pub fn config_digest<T: Serialize>(value: &T) -> Result<String> {
    let bytes = serde_json::to_vec(value)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

/// How the final attention treats noise-dominated channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    /// Utterances with at least one noise-dominated channel.
    pub utterances: usize,
    /// Of those, utterances where some fusion head gives every
    /// noise-dominated channel exactly zero weight from every query row.
    pub selected: usize,
    pub fraction: f64,
    /// Fusion-layer weights that point at a noise-dominated channel.
    pub noise_weights: usize,
    /// How many of those are exactly zero.
    pub zero_noise_weights: usize,
}

/// Measures channel selection on the first crop of every utterance.
pub fn channel_selection(model: &FusionModel, ds: &Dataset) -> Result<SelectionStats> {
    let per_utt: Vec<Option<(bool, usize, usize)>> = ds
        .utterances
        .par_iter()
        .map(|u| {
            let noisy: Vec<usize> = (0..u.channels()).filter(|&c| u.noise_mask[c]).collect();
            if noisy.is_empty() || u.crops == 0 {
                return Ok(None);
            }
            let trace = model.trace(&u.crop_matrix(0))?;
            let mut total = 0;
            let mut zeros = 0;
            let mut selected = false;
            for w in &trace.fusion_weights {
                let mut all_zero = true;
                for &c in &noisy {
                    for r in 0..w.rows() {
                        total += 1;
                        if w.get(r, c) == 0.0 {
                            zeros += 1;
                        } else {
                            all_zero = false;
                        }
                    }
                }
                selected |= all_zero;
            }
            Ok(Some((selected, total, zeros)))
        })
        .collect::<Result<_>>()?;
    let mut stats = SelectionStats {
        utterances: 0,
        selected: 0,
        fraction: 0.0,
        noise_weights: 0,
        zero_noise_weights: 0,
    };
    for (selected, total, zeros) in per_utt.into_iter().flatten() {
        stats.utterances += 1;
        stats.selected += selected as usize;
        stats.noise_weights += total;
        stats.zero_noise_weights += zeros;
    }
    if stats.utterances > 0 {
        stats.fraction = stats.selected as f64 / stats.utterances as f64;
    }
    Ok(stats)
}
