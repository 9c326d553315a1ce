//! Angular prototypical training of the fusion head.
//!
//! Each batch holds `N` distinct speakers with two utterances apiece: one
//! support utterance (the speaker's prototype) and one query. The loss is
//! the cross-entropy of every query against all prototypes under the
//! logits `w·cos(q_j, c_k) + b`.
//!
//! Gradients are computed per utterance in parallel and summed in a fixed
//! order, so a run is bitwise reproducible regardless of thread count.

use std::collections::BTreeMap;
use std::time::Instant;

use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::model::{EmbeddingProvider, FusionModel};
use crate::simulator::derive_seed;
use crate::tape::Tape;

/// Utterances per speaker in a batch: one support, one query.
pub const UTTERANCES_PER_SPEAKER: usize = 2;

/// Smallest value the loss scale `w` is allowed to take.
pub const MIN_LOSS_SCALE: f64 = 1e-6;

const STREAM_EPOCH: u64 = 3;

fn default_epochs() -> usize {
    200
}
fn default_batch_speakers() -> usize {
    32
}
fn default_max_utterances() -> usize {
    100
}
fn default_lr() -> f64 {
    0.001
}
fn default_decay() -> f64 {
    0.95
}
fn default_decay_every() -> usize {
    10
}

/// Training hyperparameters.
///
/// Batch size, utterances per speaker and the epoch count are not pinned
/// down by the reference recipe; the defaults here (32 speakers, 2
/// utterances each, 200 epochs) are reasonable guesses, not known values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Epochs to run in one call of [`train`].
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Speakers per batch (`N`).
    #[serde(default = "default_batch_speakers")]
    pub batch_speakers: usize,
    /// Cap on utterances drawn from one speaker per epoch.
    #[serde(default = "default_max_utterances")]
    pub max_utterances_per_speaker: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    /// Multiplicative LR decay applied every `decay_every` epochs.
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_decay_every")]
    pub decay_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_speakers: default_batch_speakers(),
            max_utterances_per_speaker: default_max_utterances(),
            learning_rate: default_lr(),
            lr_decay: default_decay(),
            decay_every: default_decay_every(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_speakers < 2 {
            return Err(Error::Config("batch_speakers must be at least 2".into()));
        }
        if self.max_utterances_per_speaker < UTTERANCES_PER_SPEAKER {
            return Err(Error::Config(format!(
                "max_utterances_per_speaker must be at least {UTTERANCES_PER_SPEAKER}"
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and >= 0".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config("lr_decay must lie in (0, 1]".into()));
        }
        if self.decay_every == 0 {
            return Err(Error::Config("decay_every must be at least 1".into()));
        }
        Ok(())
    }

    /// Step size for a (zero-based) epoch: `base · decay^⌊epoch / every⌋`.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.decay_every) as i32;
        self.learning_rate * self.lr_decay.powi(steps)
    }
}

// ---------------------------------------------------------------------------
// Batches

/// One crop of one utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub utterance: usize,
    pub crop: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpeakerGroup {
    pub speaker: u32,
    pub support: Sample,
    pub query: Sample,
}

/// `N` distinct speakers, two utterances each.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    groups: Vec<SpeakerGroup>,
}

impl TrainBatch {
    pub fn new(groups: Vec<SpeakerGroup>) -> Result<Self> {
        if groups.len() < 2 {
            return Err(Error::contract("a batch needs at least two speakers"));
        }
        let mut ids: Vec<u32> = groups.iter().map(|g| g.speaker).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::contract("speakers within a batch must be distinct"));
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[SpeakerGroup] {
        &self.groups
    }

    pub fn speakers(&self) -> usize {
        self.groups.len()
    }

    /// Support then query for every group, in group order.
    fn samples(&self) -> Vec<Sample> {
        self.groups.iter().flat_map(|g| [g.support, g.query]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub batches: Vec<TrainBatch>,
    /// Speakers left out for having fewer than two utterances.
    pub skipped: Vec<u32>,
}

/// Draws one epoch of batches.
///
/// Every speaker contributes at most `max_utterances_per_speaker` of its
/// utterances, shuffled and paired up. Pairs are dealt out round-robin over
/// speakers in a freshly shuffled order per round, so batches mix speakers
/// as evenly as the pool allows. A trailing batch smaller than `N` is kept
/// if it still has two speakers.
pub fn sample_epoch<P>(provider: &P, cfg: &TrainConfig, seed: u64) -> Result<EpochPlan>
where
    P: EmbeddingProvider + ?Sized,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut by_speaker: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for u in 0..provider.num_utterances() {
        by_speaker.entry(provider.speaker(u)).or_default().push(u);
    }

    let mut skipped = Vec::new();
    let mut pools: Vec<(u32, Vec<[usize; 2]>)> = Vec::new();
    for (speaker, mut utts) in by_speaker {
        if utts.len() < UTTERANCES_PER_SPEAKER {
            warn!("speaker {speaker} has {} utterance(s), skipping", utts.len());
            skipped.push(speaker);
            continue;
        }
        utts.shuffle(&mut rng);
        utts.truncate(cfg.max_utterances_per_speaker);
        let pairs = utts.chunks_exact(2).map(|p| [p[0], p[1]]).collect();
        pools.push((speaker, pairs));
    }
    if pools.len() < 2 {
        return Err(Error::contract(
            "training needs at least two speakers with two utterances each",
        ));
    }

    let rounds = pools.iter().map(|(_, p)| p.len()).max().unwrap_or(0);
    let mut order = Vec::new();
    for r in 0..rounds {
        let mut live: Vec<usize> = (0..pools.len()).filter(|&i| pools[i].1.len() > r).collect();
        live.shuffle(&mut rng);
        order.extend(live.into_iter().map(|i| (i, r)));
    }

    // Greedy fill; an entry whose speaker is already in the open batch
    // waits for the next one.
    let n = cfg.batch_speakers;
    let mut chosen: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut current: Vec<(usize, usize)> = Vec::new();
    let mut pending: Vec<(usize, usize)> = Vec::new();
    let mut entries = order.into_iter();
    loop {
        let mut i = 0;
        while current.len() < n && i < pending.len() {
            if current.iter().any(|c| c.0 == pending[i].0) {
                i += 1;
            } else {
                current.push(pending.remove(i));
            }
        }
        if current.len() == n {
            chosen.push(std::mem::take(&mut current));
            continue;
        }
        let Some(entry) = entries.next() else { break };
        if current.iter().any(|c| c.0 == entry.0) {
            pending.push(entry);
        } else {
            current.push(entry);
        }
    }
    if current.len() >= 2 {
        chosen.push(current);
    }

    let mut batches = Vec::with_capacity(chosen.len());
    for entries in chosen {
        let mut groups = Vec::with_capacity(entries.len());
        for (pool, round) in entries {
            let (speaker, pairs) = &pools[pool];
            let [a, b] = pairs[round];
            let mut sample = |utterance: usize| -> Result<Sample> {
                let crops = provider.num_crops(utterance);
                if crops == 0 {
                    return Err(Error::contract(format!("utterance {utterance} has no crops")));
                }
                Ok(Sample {
                    utterance,
                    crop: rng.random_range(0..crops),
                })
            };
            groups.push(SpeakerGroup {
                speaker: *speaker,
                support: sample(a)?,
                query: sample(b)?,
            });
        }
        batches.push(TrainBatch::new(groups)?);
    }
    Ok(EpochPlan { batches, skipped })
}

// ---------------------------------------------------------------------------
// Loss

/// Loss value plus its gradient with respect to the embeddings and `w`, `b`.
#[derive(Debug, Clone)]
pub struct EmbeddingLoss {
    pub loss: f64,
    pub d_queries: Matrix,
    pub d_prototypes: Matrix,
    pub d_scale: f64,
    pub d_bias: f64,
}

/// Angular prototypical loss over `N x E` query and prototype rows.
pub fn embedding_loss(
    queries: &Matrix,
    prototypes: &Matrix,
    scale: f64,
    bias: f64,
) -> Result<EmbeddingLoss> {
    if queries.shape() != prototypes.shape() {
        return Err(Error::contract(format!(
            "queries {:?} and prototypes {:?} differ in shape",
            queries.shape(),
            prototypes.shape()
        )));
    }
    if queries.rows() < 2 {
        return Err(Error::contract("the loss needs at least two speakers"));
    }
    if !(scale > 0.0) {
        return Err(Error::contract(format!("loss scale must be positive, got {scale}")));
    }
    let mut tape = Tape::new();
    let q = tape.leaf_ref(queries);
    let c = tape.leaf_ref(prototypes);
    let w = tape.leaf(Matrix::scalar(scale));
    let b = tape.leaf(Matrix::scalar(bias));
    let qn = tape.l2_normalize_rows(q)?;
    let cn = tape.l2_normalize_rows(c)?;
    let cos = tape.matmul_t(qn, cn)?;
    let logits = tape.scale_by(cos, w)?;
    let logits = tape.add_scalar(logits, b)?;
    let loss = tape.cross_entropy_diag(logits)?;
    let grads = tape.backward(loss)?;
    let (n, e) = queries.shape();
    Ok(EmbeddingLoss {
        loss: tape.value(loss).item()?,
        d_queries: grads.get_or_zeros(q, n, e),
        d_prototypes: grads.get_or_zeros(c, n, e),
        d_scale: grads.get_or_zeros(w, 1, 1).item()?,
        d_bias: grads.get_or_zeros(b, 1, 1).item()?,
    })
}

fn check_speakers<P>(provider: &P, batch: &TrainBatch) -> Result<()>
where
    P: EmbeddingProvider + ?Sized,
{
    for g in batch.groups() {
        for s in [g.support, g.query] {
            if s.utterance >= provider.num_utterances() {
                return Err(Error::contract(format!("no utterance {}", s.utterance)));
            }
            let actual = provider.speaker(s.utterance);
            if actual != g.speaker {
                return Err(Error::contract(format!(
                    "utterance {} belongs to speaker {actual}, not {}",
                    s.utterance, g.speaker
                )));
            }
        }
    }
    Ok(())
}

fn embed_all<P>(model: &FusionModel, provider: &P, samples: &[Sample]) -> Result<Vec<Matrix>>
where
    P: EmbeddingProvider + ?Sized,
{
    samples
        .par_iter()
        .map(|s| model.forward(&provider.channel_matrix(s.utterance, s.crop)?))
        .collect()
}

fn split_embeddings(embeddings: &[Matrix]) -> Result<(Matrix, Matrix)> {
    let supports: Vec<&Matrix> = embeddings.iter().step_by(2).collect();
    let queries: Vec<&Matrix> = embeddings.iter().skip(1).step_by(2).collect();
    Ok((Matrix::concat_rows(&queries)?, Matrix::concat_rows(&supports)?))
}

/// Loss of `model` on one batch.
pub fn angular_prototypical_loss<P>(
    model: &FusionModel,
    provider: &P,
    batch: &TrainBatch,
) -> Result<f64>
where
    P: EmbeddingProvider + ?Sized,
{
    check_speakers(provider, batch)?;
    let embeddings = embed_all(model, provider, &batch.samples())?;
    let (queries, prototypes) = split_embeddings(&embeddings)?;
    Ok(embedding_loss(&queries, &prototypes, model.scale(), model.bias())?.loss)
}

/// Loss and its gradient for every parameter, in canonical order.
pub fn loss_and_grads<P>(
    model: &FusionModel,
    provider: &P,
    batch: &TrainBatch,
) -> Result<(f64, Vec<Matrix>)>
where
    P: EmbeddingProvider + ?Sized,
{
    check_speakers(provider, batch)?;
    let samples = batch.samples();
    let embeddings = embed_all(model, provider, &samples)?;
    let (queries, prototypes) = split_embeddings(&embeddings)?;
    let head = embedding_loss(&queries, &prototypes, model.scale(), model.bias())?;

    // Upstream adjoint of each sample's embedding, same order as `samples`.
    let seeds: Vec<Matrix> = (0..samples.len())
        .map(|i| {
            let src = if i % 2 == 0 { &head.d_prototypes } else { &head.d_queries };
            Matrix::row_vector(src.row(i / 2))
        })
        .collect::<Result<_>>()?;

    let mut acc: Vec<Matrix> = model
        .params()
        .iter()
        .map(|p| Matrix::zeros(p.rows(), p.cols()))
        .collect();
    // Bounded chunks keep at most a few full gradient copies alive; the sum
    // itself runs strictly in sample order.
    let chunk = 2 * rayon::current_num_threads().max(1);
    let work: Vec<(Sample, Matrix)> = samples.into_iter().zip(seeds).collect();
    for block in work.chunks(chunk) {
        let grads: Vec<Vec<Option<Matrix>>> = block
            .par_iter()
            .map(|(s, seed)| utterance_grads(model, provider, *s, seed.clone()))
            .collect::<Result<_>>()?;
        for g in grads {
            for (a, gi) in acc.iter_mut().zip(g) {
                if let Some(gi) = gi {
                    a.add_assign(&gi)?;
                }
            }
        }
    }
    let n = acc.len();
    acc[n - 2] = Matrix::scalar(head.d_scale);
    acc[n - 1] = Matrix::scalar(head.d_bias);
    Ok((head.loss, acc))
}

fn utterance_grads<P>(
    model: &FusionModel,
    provider: &P,
    sample: Sample,
    seed: Matrix,
) -> Result<Vec<Option<Matrix>>>
where
    P: EmbeddingProvider + ?Sized,
{
    let x = provider.channel_matrix(sample.utterance, sample.crop)?;
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let xv = tape.constant(x);
    let nodes = model.forward_on(&mut tape, &vars, xv)?;
    let grads = tape.backward_with_seed(nodes.embedding, seed)?;
    Ok(vars.params().into_iter().map(|v| grads.get(v).cloned()).collect())
}

/// Mean batch loss over a fixed list of batches.
pub fn mean_loss<P>(model: &FusionModel, provider: &P, batches: &[TrainBatch]) -> Result<f64>
where
    P: EmbeddingProvider + ?Sized,
{
    if batches.is_empty() {
        return Err(Error::contract("no batches"));
    }
    let mut total = 0.0;
    for b in batches {
        total += angular_prototypical_loss(model, provider, b)?;
    }
    Ok(total / batches.len() as f64)
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with per-parameter first and second moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates applied so far.
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &[&Matrix]) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn for_model(model: &FusionModel) -> Self {
        Self::new(&model.params())
    }

    pub fn first_moments(&self) -> &[Matrix] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Matrix] {
        &self.v
    }

    /// One bias-corrected update. Nothing is modified if any gradient is
    /// non-finite or mis-shaped.
    pub fn update(&mut self, mut params: Vec<&mut Matrix>, grads: &[Matrix], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.m[i].shape() {
                return Err(Error::contract(format!("gradient {i} does not match its parameter")));
            }
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient in tensor {i}")));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let p = p.as_mut_slice();
            let m = m.as_mut_slice();
            let v = v.as_mut_slice();
            for (k, &gk) in g.as_slice().iter().enumerate() {
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let m_hat = m[k] / c1;
                let v_hat = v[k] / c2;
                p[k] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Adam step on every model parameter, then clamps `w` to stay positive.
pub fn adam_step(model: &mut FusionModel, grads: &[Matrix], state: &mut Adam, lr: f64) -> Result<()> {
    state.update(model.params_mut(), grads, lr)?;
    let w = &mut model.loss_scale.as_mut_slice()[0];
    *w = w.max(MIN_LOSS_SCALE);
    Ok(())
}

// ---------------------------------------------------------------------------
// Training loop

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// Zero-based epoch index, continuing across resumed runs.
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
    pub batches: usize,
    /// The only field that varies between otherwise identical runs.
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub history: Vec<EpochRecord>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|r| r.mean_loss).collect()
    }
}

/// Runs `cfg.epochs` epochs starting at epoch index `start_epoch`.
///
/// `on_epoch` sees every finished epoch together with the updated model,
/// which is where callers write log lines and checkpoints. A non-finite
/// loss or gradient aborts with [`Error::Diverged`] carrying the model as
/// it was at the start of the failing epoch.
pub fn train<P>(
    mut model: FusionModel,
    provider: &P,
    cfg: &TrainConfig,
    start_epoch: usize,
    mut on_epoch: impl FnMut(&EpochRecord, &FusionModel) -> Result<()>,
) -> Result<TrainOutcome>
where
    P: EmbeddingProvider + ?Sized,
{
    cfg.validate()?;
    if provider.num_utterances() == 0 {
        return Err(Error::contract("training set is empty"));
    }
    let mut adam = Adam::for_model(&model);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in start_epoch..start_epoch + cfg.epochs {
        let started = Instant::now();
        let last_good = model.clone();
        let lr = cfg.lr_for_epoch(epoch);
        let diverged = |reason: String| Error::Diverged {
            epoch,
            reason,
            last_good: Box::new(last_good.clone()),
        };

        let plan = sample_epoch(provider, cfg, derive_seed(cfg.seed, STREAM_EPOCH, epoch as u64))?;
        let mut total = 0.0;
        for (i, batch) in plan.batches.iter().enumerate() {
            let (loss, grads) = match loss_and_grads(&model, provider, batch) {
                Ok(v) => v,
                Err(Error::Numeric(reason)) => return Err(diverged(reason)),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(diverged(format!("loss is {loss} in batch {i}")));
            }
            match adam_step(&mut model, &grads, &mut adam, lr) {
                Ok(()) => {}
                Err(Error::Numeric(reason)) => return Err(diverged(reason)),
                Err(e) => return Err(e),
            }
            debug!("epoch {epoch} batch {i}: loss {loss:.6}");
            total += loss;
        }
        let record = EpochRecord {
            epoch,
            lr,
            mean_loss: total / plan.batches.len() as f64,
            batches: plan.batches.len(),
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        info!(
            "epoch {epoch}: loss {:.6}, lr {lr:.3e}, {} batches",
            record.mean_loss, record.batches
        );
        on_epoch(&record, &model)?;
        history.push(record);
    }
    Ok(TrainOutcome { model, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::simulator::{generate, ChannelCount, SimConfig};
    use rand_distr::{Distribution, StandardNormal};

    struct Speakers(Vec<u32>);

    impl EmbeddingProvider for Speakers {
        fn num_utterances(&self) -> usize {
            self.0.len()
        }
        fn speaker(&self, u: usize) -> u32 {
            self.0[u]
        }
        fn num_crops(&self, _: usize) -> usize {
            3
        }
        fn channel_matrix(&self, _: usize, _: usize) -> Result<Matrix> {
            Ok(Matrix::filled(2, 4, 1.0))
        }
    }

    fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn cfg(n: usize) -> TrainConfig {
        TrainConfig {
            batch_speakers: n,
            ..TrainConfig::default()
        }
    }

    /// Straight-line restatement of the loss.
    fn oracle_loss(q: &Matrix, c: &Matrix, w: f64, b: f64) -> f64 {
        let n = q.rows();
        let cosine = |a: &[f64], b: &[f64]| {
            let mut ab = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            for i in 0..a.len() {
                ab += a[i] * b[i];
                aa += a[i] * a[i];
                bb += b[i] * b[i];
            }
            ab / (aa.sqrt() * bb.sqrt())
        };
        let mut total = 0.0;
        for j in 0..n {
            let s: Vec<f64> = (0..n).map(|k| w * cosine(q.row(j), c.row(k)) + b).collect();
            let denom: f64 = s.iter().map(|v| v.exp()).sum();
            total -= (s[j].exp() / denom).ln();
        }
        total / n as f64
    }

    #[test]
    fn orthogonal_prototypes_give_closed_form() {
        let e = Matrix::identity(2);
        let out = embedding_loss(&e, &e, 1.0, 0.0).unwrap();
        assert!((out.loss - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        assert!((out.loss - 0.31326168751822286).abs() < 1e-12);
    }

    #[test]
    fn identical_embeddings_give_ln2() {
        let e = Matrix::filled(2, 3, 0.7);
        let out = embedding_loss(&e, &e, 10.0, -5.0).unwrap();
        assert!((out.loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn loss_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let q = randn(&mut rng, 4, 6);
            let c = randn(&mut rng, 4, 6);
            let w = rng.random_range(0.5..12.0);
            let b = rng.random_range(-6.0..2.0);
            let got = embedding_loss(&q, &c, w, b).unwrap().loss;
            assert!((got - oracle_loss(&q, &c, w, b)).abs() < 1e-10);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = randn(&mut rng, 3, 4);
        let c = randn(&mut rng, 3, 4);
        let (w, b) = (3.0, -1.0);
        let out = embedding_loss(&q, &c, w, b).unwrap();
        let h = 1e-5;
        for i in 0..q.len() {
            for (which, grad) in [(0, &out.d_queries), (1, &out.d_prototypes)] {
                let bump = |delta: f64| {
                    let (mut q2, mut c2) = (q.clone(), c.clone());
                    let t = if which == 0 { &mut q2 } else { &mut c2 };
                    t.as_mut_slice()[i] += delta;
                    oracle_loss(&q2, &c2, w, b)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!((fd - grad.as_slice()[i]).abs() < 1e-7, "{fd} vs {}", grad.as_slice()[i]);
            }
        }
        let fd_w = (oracle_loss(&q, &c, w + h, b) - oracle_loss(&q, &c, w - h, b)) / (2.0 * h);
        let fd_b = (oracle_loss(&q, &c, w, b + h) - oracle_loss(&q, &c, w, b - h)) / (2.0 * h);
        assert!((fd_w - out.d_scale).abs() < 1e-7);
        assert!(out.d_bias.abs() < 1e-12 && fd_b.abs() < 1e-7);
    }

    #[test]
    fn loss_is_rotation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let e = 6;
        // Gram–Schmidt on a random matrix.
        let a = randn(&mut rng, e, e);
        let mut basis: Vec<Vec<f64>> = Vec::new();
        for r in 0..e {
            let mut v = a.row(r).to_vec();
            for u in &basis {
                let d: f64 = v.iter().zip(u).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= d * y);
            }
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            basis.push(v);
        }
        let rot = Matrix::from_rows(&basis).unwrap();
        let q = randn(&mut rng, 5, e);
        let c = randn(&mut rng, 5, e);
        let before = embedding_loss(&q, &c, 10.0, -5.0).unwrap().loss;
        let after = embedding_loss(&q.matmul(&rot).unwrap(), &c.matmul(&rot).unwrap(), 10.0, -5.0)
            .unwrap()
            .loss;
        assert!((before - after).abs() < 1e-9);
    }

    #[test]
    fn zero_norm_embedding_is_a_numeric_error() {
        let mut q = Matrix::identity(2);
        q.set(1, 1, 0.0);
        let err = embedding_loss(&q, &Matrix::identity(2), 1.0, 0.0).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        assert_eq!(c.lr_for_epoch(0), 0.001);
        assert_eq!(c.lr_for_epoch(9), 0.001);
        assert!((c.lr_for_epoch(10) - 0.00095).abs() < 1e-18);
        assert!((c.lr_for_epoch(25) - 0.001 * 0.95 * 0.95).abs() < 1e-18);
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut p = Matrix::scalar(1.0);
        let mut adam = Adam::new(&[&p]);
        adam.update(vec![&mut p], &[Matrix::scalar(1.0)], 0.001).unwrap();
        assert!((p.item().unwrap() - (1.0 - 0.001)).abs() < 1e-10);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let mut p = Matrix::row_vector(&[0.5, -2.0]).unwrap();
        let mut adam = Adam::new(&[&p]);
        adam.update(vec![&mut p], &[Matrix::row_vector(&[1.0, 1.0]).unwrap()], 0.0).unwrap();
        let m1 = adam.first_moments()[0].clone();
        let before = p.clone();
        adam.update(vec![&mut p], &[Matrix::zeros(1, 2)], 0.0).unwrap();
        assert_eq!(p, before);
        assert_eq!(adam.first_moments()[0], m1.scale(0.9));

        let mut q = Matrix::row_vector(&[0.5, -2.0]).unwrap();
        let mut fresh = Adam::new(&[&q]);
        fresh.update(vec![&mut q], &[Matrix::zeros(1, 2)], 0.01).unwrap();
        assert_eq!(q.as_slice(), &[0.5, -2.0]);
    }

    #[test]
    fn vanishing_lr_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = randn(&mut rng, 3, 3);
        let before = p.clone();
        let mut adam = Adam::new(&[&p]);
        let g = randn(&mut rng, 3, 3);
        adam.update(vec![&mut p], &[g], 1e-30).unwrap();
        assert!(p.max_abs_diff(&before) <= 1e-15);
    }

    #[test]
    fn nan_gradient_aborts_without_touching_state() {
        let mut p = Matrix::scalar(1.0);
        let mut adam = Adam::new(&[&p]);
        let mut g = Matrix::scalar(0.0);
        g.as_mut_slice()[0] = f64::NAN;
        let err = adam.update(vec![&mut p], &[g], 0.1).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p.item().unwrap(), 1.0);
        assert_eq!(adam.step, 0);
    }

    fn tiny_model(seed: u64) -> FusionModel {
        let config = ModelConfig {
            d_in: 8,
            width: 8,
            heads: 2,
            layers: 1,
            ffn_hidden: 8,
            ..ModelConfig::default()
        };
        FusionModel::init(config, seed).unwrap()
    }

    #[test]
    fn loss_scale_is_clamped() {
        let mut model = tiny_model(1);
        let mut adam = Adam::for_model(&model);
        let mut grads: Vec<Matrix> = model
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        let n = grads.len();
        grads[n - 2] = Matrix::scalar(1.0);
        adam_step(&mut model, &grads, &mut adam, 100.0).unwrap();
        assert_eq!(model.scale(), MIN_LOSS_SCALE);
    }

    #[test]
    fn speaker_with_many_utterances_is_capped() {
        let mut ids = vec![0u32; 150];
        ids.extend(std::iter::repeat_n(1u32, 120));
        ids.extend(std::iter::repeat_n(2u32, 101));
        let provider = Speakers(ids);
        let plan = sample_epoch(&provider, &cfg(3), 1).unwrap();
        let mut used: Vec<usize> = plan
            .batches
            .iter()
            .flat_map(|b| b.groups().iter())
            .filter(|g| g.speaker == 0)
            .flat_map(|g| [g.support.utterance, g.query.utterance])
            .collect();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 100);
    }

    #[test]
    fn batches_hold_distinct_speakers() {
        let ids: Vec<u32> = (0..97).map(|i| (i * 7 % 11) as u32).collect();
        let provider = Speakers(ids);
        let plan = sample_epoch(&provider, &cfg(4), 9).unwrap();
        assert!(!plan.batches.is_empty());
        for b in &plan.batches {
            assert!(b.speakers() >= 2 && b.speakers() <= 4);
            for g in b.groups() {
                assert_ne!(g.support.utterance, g.query.utterance);
                assert_eq!(provider.speaker(g.support.utterance), g.speaker);
                assert_eq!(provider.speaker(g.query.utterance), g.speaker);
                assert!(g.support.crop < 3 && g.query.crop < 3);
            }
        }
        let mut all: Vec<usize> = plan
            .batches
            .iter()
            .flat_map(|b| b.groups().iter().flat_map(|g| [g.support.utterance, g.query.utterance]))
            .collect();
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n, "an utterance was used twice");
    }

    #[test]
    fn sampling_is_deterministic() {
        let provider = Speakers((0..60).map(|i| i % 6).collect());
        let a = sample_epoch(&provider, &cfg(3), 42).unwrap();
        let b = sample_epoch(&provider, &cfg(3), 42).unwrap();
        let c = sample_epoch(&provider, &cfg(3), 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn lonely_speaker_is_skipped() {
        let provider = Speakers(vec![0, 0, 1, 1, 2]);
        let plan = sample_epoch(&provider, &cfg(2), 0).unwrap();
        assert_eq!(plan.skipped, vec![2]);
        assert!(plan.batches.iter().all(|b| b.groups().iter().all(|g| g.speaker != 2)));
    }

    #[test]
    fn batch_rejects_duplicates_and_singletons() {
        let s = Sample { utterance: 0, crop: 0 };
        let g = |speaker| SpeakerGroup { speaker, support: s, query: s };
        assert!(TrainBatch::new(vec![g(1)]).is_err());
        assert!(TrainBatch::new(vec![g(1), g(1)]).is_err());
        assert!(TrainBatch::new(vec![g(1), g(2)]).is_ok());
    }

    fn toy_data(speakers: u32, seed: u64) -> crate::simulator::Dataset {
        let sim = SimConfig {
            d_in: 8,
            speakers,
            utterances_per_speaker: 10,
            channels: ChannelCount::Fixed(4),
            crops: 2,
            seed,
            ..SimConfig::default()
        };
        generate(&sim).unwrap()
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let data = toy_data(3, 2);
        let model = tiny_model(3);
        let plan = sample_epoch(&data, &cfg(3), 0).unwrap();
        let batch = &plan.batches[0];
        let (_, grads) = loss_and_grads(&model, &data, batch).unwrap();
        let h = 1e-5;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (pi, g) in grads.iter().enumerate() {
            for _ in 0..3 {
                let k = rng.random_range(0..g.len());
                let eval = |delta: f64| {
                    let mut m = model.clone();
                    m.params_mut()[pi].as_mut_slice()[k] += delta;
                    angular_prototypical_loss(&m, &data, batch).unwrap()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = g.as_slice()[k];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                assert!(err < 1e-4, "param {pi}[{k}]: fd {fd} vs analytic {an}");
            }
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let data = toy_data(2, 1);
        let model = tiny_model(4);
        let out = train(
            model.clone(),
            &data,
            &TrainConfig { epochs: 0, ..cfg(2) },
            0,
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(out.model, model);
        assert!(out.history.is_empty());
    }

    #[test]
    fn one_epoch_lowers_the_loss() {
        let data = toy_data(2, 7);
        let model = tiny_model(5);
        let c = TrainConfig { epochs: 1, ..cfg(2) };
        let plan = sample_epoch(&data, &c, 123).unwrap();
        let before = mean_loss(&model, &data, &plan.batches).unwrap();
        let out = train(model, &data, &c, 0, |_, _| Ok(())).unwrap();
        let after = mean_loss(&out.model, &data, &plan.batches).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn training_is_deterministic() {
        let data = toy_data(4, 3);
        let c = TrainConfig { epochs: 2, ..cfg(3) };
        let run = || train(tiny_model(6), &data, &c, 0, |_, _| Ok(())).unwrap();
        let (a, b) = (run(), run());
        assert_eq!(a.losses(), b.losses());
        assert_eq!(a.model, b.model);
        assert_eq!(a.history[1].epoch, 1);
    }

    #[test]
    fn resumed_epochs_continue_the_counter() {
        let data = toy_data(2, 3);
        let c = TrainConfig { epochs: 2, ..cfg(2) };
        let mut seen = Vec::new();
        train(tiny_model(6), &data, &c, 10, |r, _| {
            seen.push((r.epoch, r.lr));
            Ok(())
        })
        .unwrap();
        assert_eq!(seen.iter().map(|s| s.0).collect::<Vec<_>>(), vec![10, 11]);
        assert!((seen[0].1 - 0.00095).abs() < 1e-18);
    }

    #[test]
    fn overflow_reports_divergence_with_last_good_model() {
        let data = toy_data(2, 3);
        let mut model = tiny_model(7);
        model.adapter.as_mut_slice().iter_mut().for_each(|v| *v = 1e300);
        let err = train(model.clone(), &data, &TrainConfig { epochs: 3, ..cfg(2) }, 0, |_, _| Ok(()))
            .unwrap_err();
        match err {
            Error::Diverged { epoch, last_good, .. } => {
                assert_eq!(epoch, 0);
                assert_eq!(*last_good, model);
            }
            other => panic!("expected divergence, got {other}"),
        }
    }
}
