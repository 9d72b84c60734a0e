//! The partial-ordering likelihood, the combined loss with per-source
//! normalization and smoothing, and the reward-model training loop with its
//! dynamic stopping rule.
//!
//! For each item of each ordering, the model "chooses" that item out of a
//! set containing itself and everything strictly below it:
//!
//! ```text
//! P(<_j | t_i) = exp(b_j R(t_i)) / (exp(b_j R(t_i)) + sum_{t_k < t_i} exp(b_j R(t_k)))
//! ```
//!
//! Items with no predecessors contribute unity and are skipped. The total
//! negative log-likelihood decomposes by the source of the chosen fragment
//! (positive demo / negative demo / agent / preference). Each source's term
//! is divided by its batch normalising factor -- the summed fragment length
//! over informative terms, which bounds the gradient magnitude near unity --
//! and the normalized terms are combined with weights proportional to the
//! same factor evaluated on the whole dataset. The agent pool is in excess:
//! its dataset-level factor is pegged to the positive-demo factor rather
//! than its own size. A smoothness penalty (mean-squared first difference of
//! per-transition reward along full trajectories) is added on top.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

use crate::ordering::{
    demo_orderings, from_preference, FeedbackDatasets, OrderingError, PartialOrdering,
};
use crate::reward::{RewardError, RewardModel};
use crate::trajectory::{full_fragments, Fragment, Trajectory};

#[derive(Debug, Error, PartialEq)]
pub enum RrpoError {
    #[error("ordering item is not part of the batch fragment set")]
    ItemOutsideBatch,
    #[error("fragment has no source tag")]
    MissingTag,
    #[error("queried item is not in the ordering")]
    UnknownItem,
    #[error("smoothness needs fragments of length >= 2, got a fragment of length {0}")]
    DegenerateSmoothnessInput(usize),
    #[error("source {0:?} is present in the batch but its normalising factor is zero")]
    ZeroBatchFactor(SourceTag),
    #[error("no feedback: demo pools and preference set are all empty")]
    NoFeedback,
    #[error("non-finite loss at training step {step}")]
    NonFiniteLoss { step: usize },
    #[error(transparent)]
    Ordering(#[from] OrderingError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

/// Which dataset a fragment was drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    Pos,
    Neg,
    Agent,
    Pref,
}

pub const ALL_SOURCES: [SourceTag; 4] =
    [SourceTag::Pos, SourceTag::Neg, SourceTag::Agent, SourceTag::Pref];

/// One value per feedback source.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerSource {
    pub pos: f64,
    pub neg: f64,
    pub agent: f64,
    pub pref: f64,
}

impl PerSource {
    pub fn get(&self, tag: SourceTag) -> f64 {
        match tag {
            SourceTag::Pos => self.pos,
            SourceTag::Neg => self.neg,
            SourceTag::Agent => self.agent,
            SourceTag::Pref => self.pref,
        }
    }

    pub fn get_mut(&mut self, tag: SourceTag) -> &mut f64 {
        match tag {
            SourceTag::Pos => &mut self.pos,
            SourceTag::Neg => &mut self.neg,
            SourceTag::Agent => &mut self.agent,
            SourceTag::Pref => &mut self.pref,
        }
    }

    pub fn total(&self) -> f64 {
        self.pos + self.neg + self.agent + self.pref
    }
}

/// The fragment set D, per-fragment source tags, and the ordering set C of
/// one encoded batch.
#[derive(Debug, Clone)]
pub struct RrpoBatch {
    fragments: Vec<Fragment>,
    tags: HashMap<Fragment, SourceTag>,
    orderings: Vec<PartialOrdering>,
}

impl RrpoBatch {
    pub fn new(
        fragments: Vec<Fragment>,
        tags: HashMap<Fragment, SourceTag>,
        orderings: Vec<PartialOrdering>,
    ) -> Result<Self, RrpoError> {
        for o in &orderings {
            for item in o.items() {
                if !fragments.contains(item) {
                    return Err(RrpoError::ItemOutsideBatch);
                }
            }
        }
        for f in &fragments {
            if !tags.contains_key(f) {
                return Err(RrpoError::MissingTag);
            }
        }
        Ok(Self {
            fragments,
            tags,
            orderings,
        })
    }

    /// Batch over untagged synthetic fragments (all treated as agent data);
    /// used by the verification harness where sources do not matter.
    pub fn untagged(
        fragments: Vec<Fragment>,
        orderings: Vec<PartialOrdering>,
    ) -> Result<Self, RrpoError> {
        let tags = fragments
            .iter()
            .map(|f| (f.clone(), SourceTag::Agent))
            .collect();
        Self::new(fragments, tags, orderings)
    }

    pub fn fragments(&self) -> &[Fragment] {
        &self.fragments
    }

    pub fn orderings(&self) -> &[PartialOrdering] {
        &self.orderings
    }

    pub fn tag(&self, f: &Fragment) -> Option<SourceTag> {
        self.tags.get(f).copied()
    }
}

/// Encodes pools and preferences into the batch form: one ordering per
/// preference plus the demonstration ordering(s), fragments tagged by
/// source.
#[allow(clippy::too_many_arguments)]
pub fn encode_batch(
    pos: &[Arc<Trajectory>],
    neg: &[Arc<Trajectory>],
    agent: &[Arc<Trajectory>],
    prefs: &[(Fragment, Fragment)],
    rank_pos: Option<&PartialOrdering>,
    rank_neg: Option<&PartialOrdering>,
    split_mode: bool,
    betas: &Betas,
) -> Result<RrpoBatch, RrpoError> {
    let mut fragments = Vec::new();
    let mut tags = HashMap::new();
    let mut push = |f: Fragment, tag: SourceTag, fragments: &mut Vec<Fragment>| {
        if !tags.contains_key(&f) {
            tags.insert(f.clone(), tag);
            fragments.push(f);
        }
    };
    let pos_frags: Vec<Fragment> = pos.iter().map(Fragment::full).collect();
    let neg_frags: Vec<Fragment> = neg.iter().map(Fragment::full).collect();
    let agent_frags: Vec<Fragment> = agent.iter().map(Fragment::full).collect();
    for f in &pos_frags {
        push(f.clone(), SourceTag::Pos, &mut fragments);
    }
    for f in &neg_frags {
        push(f.clone(), SourceTag::Neg, &mut fragments);
    }
    for f in &agent_frags {
        push(f.clone(), SourceTag::Agent, &mut fragments);
    }
    for (a, b) in prefs {
        push(a.clone(), SourceTag::Pref, &mut fragments);
        push(b.clone(), SourceTag::Pref, &mut fragments);
    }

    let mut orderings = Vec::new();
    if !pos_frags.is_empty() || !neg_frags.is_empty() {
        orderings.extend(demo_orderings(
            &pos_frags,
            &neg_frags,
            &agent_frags,
            rank_pos,
            rank_neg,
            split_mode,
            betas.demo,
        )?);
    }
    for (preferred, other) in prefs {
        orderings.push(from_preference(preferred, other, betas.pref)?);
    }
    RrpoBatch::new(fragments, tags, orderings)
}

/// Rationality coefficients per feedback kind. Feedback of the same type and
/// source shares one coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Betas {
    pub demo: f64,
    pub pref: f64,
}

impl Default for Betas {
    fn default() -> Self {
        Self {
            demo: 1.0,
            pref: 1.0,
        }
    }
}

/// Log choice probability of `item` within ordering `o`: zero when the item
/// has no predecessors, otherwise computed through a max-shifted
/// log-sum-exp.
pub fn choice_log_prob(
    o: &PartialOrdering,
    item: &Fragment,
    m: &RewardModel,
) -> Result<f64, RrpoError> {
    let idx = o.index_of(item).ok_or(RrpoError::UnknownItem)?;
    let preds = o.predecessor_indices(idx);
    if preds.is_empty() {
        return Ok(0.0);
    }
    let r_item = m.reward_of_fragment(item)?;
    let mut scaled = Vec::with_capacity(preds.len() + 1);
    scaled.push(o.beta() * r_item);
    for &p in preds {
        scaled.push(o.beta() * m.reward_of_fragment(&o.items()[p])?);
    }
    Ok(scaled[0] - log_sum_exp(&scaled))
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Un-normalized, un-smoothed negative log-likelihood of the batch. Unity
/// terms (items without predecessors) are skipped.
pub fn rrpo_nll(b: &RrpoBatch, m: &RewardModel) -> Result<f64, RrpoError> {
    Ok(per_source_nll(b, m)?.total())
}

/// The negative log-likelihood split by the source of the chosen fragment.
pub fn per_source_nll(b: &RrpoBatch, m: &RewardModel) -> Result<PerSource, RrpoError> {
    let rewards = fragment_rewards(b, m)?;
    let mut out = PerSource::default();
    for o in b.orderings() {
        for (idx, item) in o.items().iter().enumerate() {
            let preds = o.predecessor_indices(idx);
            if preds.is_empty() {
                continue;
            }
            let mut scaled = Vec::with_capacity(preds.len() + 1);
            scaled.push(o.beta() * rewards[item]);
            for &p in preds {
                scaled.push(o.beta() * rewards[&o.items()[p]]);
            }
            let log_p = scaled[0] - log_sum_exp(&scaled);
            let tag = b.tag(item).ok_or(RrpoError::MissingTag)?;
            *out.get_mut(tag) -= log_p;
        }
    }
    Ok(out)
}

fn fragment_rewards(
    b: &RrpoBatch,
    m: &RewardModel,
) -> Result<HashMap<Fragment, f64>, RrpoError> {
    let mut rewards = HashMap::with_capacity(b.fragments().len());
    for f in b.fragments() {
        rewards.insert(f.clone(), m.reward_of_fragment(f)?);
    }
    Ok(rewards)
}

/// Mean-squared first difference of per-transition reward, averaged over
/// trajectories then over steps.
pub fn smoothness_loss(
    full_trajectories: &[Fragment],
    m: &RewardModel,
) -> Result<f64, RrpoError> {
    if full_trajectories.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for f in full_trajectories {
        if f.len() < 2 {
            return Err(RrpoError::DegenerateSmoothnessInput(f.len()));
        }
        let rs: Vec<f64> = f
            .transitions()
            .iter()
            .map(|t| m.reward_of_transition(t))
            .collect::<Result<_, _>>()?;
        let mut inner = 0.0;
        for k in 1..rs.len() {
            inner += (rs[k - 1] - rs[k]).powi(2);
        }
        total += inner / (rs.len() - 1) as f64;
    }
    Ok(total / full_trajectories.len() as f64)
}

/// Per-source normalising factor of the batch: for each source, the summed
/// length of its fragments over (item, ordering) pairs where the item has at
/// least one predecessor.
pub fn normalising_factor(b: &RrpoBatch) -> Result<PerSource, RrpoError> {
    let mut out = PerSource::default();
    for o in b.orderings() {
        for (idx, item) in o.items().iter().enumerate() {
            if o.predecessor_indices(idx).is_empty() {
                continue;
            }
            let tag = b.tag(item).ok_or(RrpoError::MissingTag)?;
            *out.get_mut(tag) += item.len() as f64;
        }
    }
    Ok(out)
}

/// Pure combination rule shared by the loss and its tests: normalized
/// per-source terms weighted by dataset-level factors, plus the smoothing
/// term.
pub fn combine_loss_terms(
    nll: &PerSource,
    batch_factors: &PerSource,
    dataset_factors: &PerSource,
    smoothness: f64,
    smooth_weight: f64,
) -> f64 {
    let weight_total = dataset_factors.total();
    let mut loss = 0.0;
    if weight_total > 0.0 {
        for tag in ALL_SOURCES {
            let w = dataset_factors.get(tag) / weight_total;
            let bf = batch_factors.get(tag);
            if w > 0.0 && bf > 0.0 {
                loss += w * nll.get(tag) / bf;
            }
        }
    }
    loss + smooth_weight * smoothness
}

/// Everything one loss evaluation produces.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub per_source_nll: PerSource,
    pub batch_factors: PerSource,
    pub smoothness: f64,
    pub raw_nll: f64,
    pub combined: f64,
}

/// The combined training loss of one batch: per-source NLL normalized by
/// batch factors, weighted by dataset-level factors, plus the smoothness
/// term over the batch's maximal non-preference fragments.
pub fn combined_loss(
    b: &RrpoBatch,
    m: &RewardModel,
    dataset_factors: &PerSource,
    smooth_weight: f64,
) -> Result<f64, RrpoError> {
    Ok(combined_loss_parts(b, m, dataset_factors, smooth_weight)?.combined)
}

pub fn combined_loss_parts(
    b: &RrpoBatch,
    m: &RewardModel,
    dataset_factors: &PerSource,
    smooth_weight: f64,
) -> Result<LossParts, RrpoError> {
    let nll = per_source_nll(b, m)?;
    let batch_factors = normalising_factor(b)?;
    check_batch_factors(b, dataset_factors, &batch_factors)?;
    let smoothness = smoothness_loss(&smoothing_set(b), m)?;
    let combined = combine_loss_terms(&nll, &batch_factors, dataset_factors, smoothness, smooth_weight);
    Ok(LossParts {
        per_source_nll: nll,
        batch_factors,
        smoothness,
        raw_nll: nll.total(),
        combined,
    })
}

/// A source with dataset weight and batch presence must have an informative
/// term to normalize by.
fn check_batch_factors(
    b: &RrpoBatch,
    dataset_factors: &PerSource,
    batch_factors: &PerSource,
) -> Result<(), RrpoError> {
    for tag in ALL_SOURCES {
        let present = b.fragments().iter().any(|f| b.tag(f) == Some(tag));
        if dataset_factors.get(tag) > 0.0 && present && batch_factors.get(tag) == 0.0 {
            return Err(RrpoError::ZeroBatchFactor(tag));
        }
    }
    Ok(())
}

/// The maximal fragments the smoothing term runs over. Preference fragments
/// are excluded: they are strict subsequences of pool trajectories, sampled
/// or not.
fn smoothing_set(b: &RrpoBatch) -> Vec<Fragment> {
    let non_pref: Vec<Fragment> = b
        .fragments()
        .iter()
        .filter(|f| b.tag(f) != Some(SourceTag::Pref))
        .cloned()
        .collect();
    full_fragments(&non_pref)
}

/// Stop when the relative loss change stays under `rel_tol` for
/// `consecutive_needed` steps in a row, or at the epoch cap.
pub fn should_stop(
    loss_history: &[f64],
    consecutive_needed: usize,
    rel_tol: f64,
    epoch_cap: usize,
) -> Option<StopReason> {
    if loss_history.len() >= epoch_cap {
        return Some(StopReason::EpochCap);
    }
    if loss_history.len() < consecutive_needed + 1 {
        return None;
    }
    let tail = &loss_history[loss_history.len() - consecutive_needed - 1..];
    let converged = tail
        .windows(2)
        .all(|w| (w[1] - w[0]).abs() < rel_tol * w[0]);
    if converged {
        Some(StopReason::Converged)
    } else {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Converged,
    EpochCap,
}

/// Optimizer and loop knobs for reward-model training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub smooth_weight: f64,
    /// Per-source minibatch cap.
    pub batch_max: usize,
    pub rel_tol: f64,
    pub consecutive_needed: usize,
    pub epoch_cap: usize,
    pub split_mode: bool,
    pub betas: Betas,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.1,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            smooth_weight: 1.0,
            batch_max: 16,
            rel_tol: 0.10,
            consecutive_needed: 3,
            epoch_cap: 256,
            split_mode: false,
            betas: Betas::default(),
        }
    }
}

/// Loss record of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub nll_pos: f64,
    pub nll_neg: f64,
    pub nll_agent: f64,
    pub nll_pref: f64,
    pub smoothness: f64,
    pub combined: f64,
}

/// Outcome of one reward-model training call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps_taken: usize,
    /// Final combined loss (normalized, with smoothing).
    pub final_loss: f64,
    /// Final combined loss without the smoothing term.
    pub final_loss_unsmoothed: f64,
    pub stop_reason: StopReason,
    pub steps: Vec<StepRecord>,
}

/// Dataset-level normalising factors: the batch formula evaluated on the
/// full dataset encoding, with the agent pool treated as in-excess (its
/// factor pegged to the positive-demo factor when it has informative terms
/// of its own).
pub fn dataset_factors(
    d: &FeedbackDatasets,
    split_mode: bool,
    betas: &Betas,
) -> Result<PerSource, RrpoError> {
    let pos: Vec<Arc<Trajectory>> = d.d_pos.trajectories().cloned().collect();
    let neg: Vec<Arc<Trajectory>> = d.d_neg.trajectories().cloned().collect();
    let agent: Vec<Arc<Trajectory>> = d.d_agent.trajectories().cloned().collect();
    let batch = encode_batch(
        &pos,
        &neg,
        &agent,
        &d.prefs,
        d.rank_pos.as_ref(),
        d.rank_neg.as_ref(),
        split_mode,
        betas,
    )?;
    let mut factors = normalising_factor(&batch)?;
    if factors.agent > 0.0 {
        // in excess: peg to the positive demos; fall back to the negative
        // pool's total length when there are no positive demos at all
        factors.agent = if factors.pos > 0.0 {
            factors.pos
        } else if !neg.is_empty() {
            neg.iter().map(|t| t.len() as f64).sum()
        } else {
            factors.agent
        };
    }
    Ok(factors)
}

/// Trains the reward model on independently sampled per-source minibatches
/// of `d` until the stopping rule fires, using adaptive-moment gradient
/// descent with decoupled weight decay.
pub fn train_reward_model(
    mut model: RewardModel,
    d: &FeedbackDatasets,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(RewardModel, TrainReport), RrpoError> {
    if !d.has_feedback() {
        return Err(RrpoError::NoFeedback);
    }
    let factors = dataset_factors(d, cfg.split_mode, &cfg.betas)?;
    let pos_all: Vec<Arc<Trajectory>> = d.d_pos.trajectories().cloned().collect();
    let neg_all: Vec<Arc<Trajectory>> = d.d_neg.trajectories().cloned().collect();
    let agent_all: Vec<Arc<Trajectory>> = d.d_agent.trajectories().cloned().collect();

    let n_params = model.param_len();
    let mut m1 = vec![0.0; n_params];
    let mut m2 = vec![0.0; n_params];
    let mut history: Vec<f64> = Vec::new();
    let mut records: Vec<StepRecord> = Vec::new();

    loop {
        let step = history.len() + 1;
        let pos_batch = sample_trajs(&pos_all, cfg.batch_max, rng);
        let neg_batch = sample_trajs(&neg_all, cfg.batch_max, rng);
        let agent_batch = sample_trajs(&agent_all, cfg.batch_max, rng);
        let pref_batch = sample_prefs(&d.prefs, cfg.batch_max, rng);
        // rankings restricted to the sampled demos stay transitively closed
        let rank_pos = d
            .rank_pos
            .as_ref()
            .map(|r| r.restrict(|f| pos_batch.iter().any(|t| t.id == f.trajectory_id())));
        let rank_neg = d
            .rank_neg
            .as_ref()
            .map(|r| r.restrict(|f| neg_batch.iter().any(|t| t.id == f.trajectory_id())));
        let batch = encode_batch(
            &pos_batch,
            &neg_batch,
            &agent_batch,
            &pref_batch,
            rank_pos.as_ref(),
            rank_neg.as_ref(),
            cfg.split_mode,
            &cfg.betas,
        )?;
        let (parts, grad) = loss_and_gradient(&batch, &model, &factors, cfg.smooth_weight)?;
        if !parts.combined.is_finite() {
            return Err(RrpoError::NonFiniteLoss { step });
        }
        // AdamW update with bias correction
        let t = step as f64;
        let params = model.params_mut();
        for i in 0..n_params {
            m1[i] = cfg.beta1 * m1[i] + (1.0 - cfg.beta1) * grad[i];
            m2[i] = cfg.beta2 * m2[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            let m_hat = m1[i] / (1.0 - cfg.beta1.powf(t));
            let v_hat = m2[i] / (1.0 - cfg.beta2.powf(t));
            params[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.eps)
                + cfg.learning_rate * cfg.weight_decay * params[i];
        }
        history.push(parts.combined);
        records.push(StepRecord {
            step,
            nll_pos: parts.per_source_nll.pos,
            nll_neg: parts.per_source_nll.neg,
            nll_agent: parts.per_source_nll.agent,
            nll_pref: parts.per_source_nll.pref,
            smoothness: parts.smoothness,
            combined: parts.combined,
        });
        if let Some(reason) = should_stop(
            &history,
            cfg.consecutive_needed,
            cfg.rel_tol,
            cfg.epoch_cap,
        ) {
            let report = TrainReport {
                steps_taken: history.len(),
                final_loss: parts.combined,
                final_loss_unsmoothed: parts.combined - cfg.smooth_weight * parts.smoothness,
                stop_reason: reason,
                steps: records,
            };
            return Ok((model, report));
        }
    }
}

fn sample_trajs(
    all: &[Arc<Trajectory>],
    cap: usize,
    rng: &mut impl Rng,
) -> Vec<Arc<Trajectory>> {
    if all.len() <= cap {
        return all.to_vec();
    }
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(rng);
    idx.truncate(cap);
    idx.sort_unstable(); // deterministic order within the batch
    idx.into_iter().map(|i| Arc::clone(&all[i])).collect()
}

fn sample_prefs(
    all: &[(Fragment, Fragment)],
    cap: usize,
    rng: &mut impl Rng,
) -> Vec<(Fragment, Fragment)> {
    if all.len() <= cap {
        return all.to_vec();
    }
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(rng);
    idx.truncate(cap);
    idx.sort_unstable();
    idx.into_iter().map(|i| all[i].clone()).collect()
}

/// Combined loss plus its exact reverse-mode gradient with respect to the
/// model parameters.
pub fn loss_and_gradient(
    b: &RrpoBatch,
    m: &RewardModel,
    dataset_factors: &PerSource,
    smooth_weight: f64,
) -> Result<(LossParts, Vec<f64>), RrpoError> {
    // forward: per-transition rewards per fragment
    let mut transition_rewards: HashMap<Fragment, Vec<f64>> =
        HashMap::with_capacity(b.fragments().len());
    for f in b.fragments() {
        let rs: Vec<f64> = f
            .transitions()
            .iter()
            .map(|t| m.reward_of_transition(t))
            .collect::<Result<_, _>>()?;
        transition_rewards.insert(f.clone(), rs);
    }
    let fragment_reward =
        |f: &Fragment| -> f64 { transition_rewards[f].iter().sum() };

    let mut nll = PerSource::default();
    let batch_factors = normalising_factor(b)?;
    check_batch_factors(b, dataset_factors, &batch_factors)?;
    let weight_total = dataset_factors.total();
    let scale = |tag: SourceTag| -> f64 {
        let bf = batch_factors.get(tag);
        if weight_total > 0.0 && bf > 0.0 {
            dataset_factors.get(tag) / weight_total / bf
        } else {
            0.0
        }
    };

    // dL/dR per fragment from the likelihood terms
    let mut frag_coeff: HashMap<Fragment, f64> = HashMap::new();
    for o in b.orderings() {
        let beta = o.beta();
        for (idx, item) in o.items().iter().enumerate() {
            let preds = o.predecessor_indices(idx);
            if preds.is_empty() {
                continue;
            }
            let tag = b.tag(item).ok_or(RrpoError::MissingTag)?;
            let mut scaled = Vec::with_capacity(preds.len() + 1);
            scaled.push(beta * fragment_reward(item));
            for &p in preds {
                scaled.push(beta * fragment_reward(&o.items()[p]));
            }
            let lse = log_sum_exp(&scaled);
            *nll.get_mut(tag) -= scaled[0] - lse;
            let s = scale(tag);
            if s > 0.0 {
                // q = softmax over {item} + predecessors
                let q0 = (scaled[0] - lse).exp();
                *frag_coeff.entry(item.clone()).or_insert(0.0) += s * (-beta) * (1.0 - q0);
                for (j, &p) in preds.iter().enumerate() {
                    let qj = (scaled[j + 1] - lse).exp();
                    *frag_coeff.entry(o.items()[p].clone()).or_insert(0.0) += s * beta * qj;
                }
            }
        }
    }

    // smoothness over the maximal non-preference fragments
    let smooth_frags = smoothing_set(b);
    let mut smoothness = 0.0;
    let mut smooth_coeffs: HashMap<Fragment, Vec<f64>> = HashMap::new();
    if !smooth_frags.is_empty() {
        let outer = smooth_frags.len() as f64;
        for f in &smooth_frags {
            if f.len() < 2 {
                return Err(RrpoError::DegenerateSmoothnessInput(f.len()));
            }
            let rs = &transition_rewards[f];
            let n1 = (rs.len() - 1) as f64;
            let mut inner = 0.0;
            let mut coeffs = vec![0.0; rs.len()];
            for k in 1..rs.len() {
                let diff = rs[k - 1] - rs[k];
                inner += diff * diff;
                coeffs[k - 1] += 2.0 * diff / n1 / outer * smooth_weight;
                coeffs[k] -= 2.0 * diff / n1 / outer * smooth_weight;
            }
            smoothness += inner / n1;
            smooth_coeffs.insert(f.clone(), coeffs);
        }
        smoothness /= outer;
    }

    let combined =
        combine_loss_terms(&nll, &batch_factors, dataset_factors, smoothness, smooth_weight);

    // backward: push per-transition coefficients through the model in a
    // fixed order
    let mut grad = vec![0.0; m.param_len()];
    for f in b.fragments() {
        let per_fragment = frag_coeff.get(f).copied().unwrap_or(0.0);
        let smooth = smooth_coeffs.get(f);
        if per_fragment == 0.0 && smooth.is_none() {
            continue;
        }
        for (k, t) in f.transitions().iter().enumerate() {
            let mut c = per_fragment;
            if let Some(sc) = smooth {
                c += sc[k];
            }
            if c != 0.0 {
                m.accumulate_transition_grad(t, c, &mut grad)?;
            }
        }
    }
    for (index, g) in grad.iter().enumerate() {
        if !g.is_finite() {
            return Err(RrpoError::Reward(RewardError::NonFinite { index }));
        }
    }

    Ok((
        LossParts {
            per_source_nll: nll,
            batch_factors,
            smoothness,
            raw_nll: nll.total(),
            combined,
        },
        grad,
    ))
}
