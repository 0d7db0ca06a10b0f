//! Leave-one-out ranking metrics and pooled AUC.

use std::fmt::Write as _;

use rand::seq::index::sample;
use serde::Serialize;

use crate::error::{KcanError, Result};
use crate::graph::{EntityId, UnifiedGraph};
use crate::model::KcanModel;
use crate::par::ExecPolicy;
use crate::rng::{stream, tag};

/// `1 + #{negatives scoring >= test}`: ties count against the test item.
pub fn rank_of(test: f64, negatives: &[f64]) -> usize {
    1 + negatives.iter().filter(|&&s| s >= test).count()
}

pub fn hit_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Mann-Whitney AUC, ties counted one half.
pub fn auc(pos: &[f64], neg: &[f64]) -> Result<f64> {
    if pos.is_empty() || neg.is_empty() {
        return Err(KcanError::Empty("AUC score set".into()));
    }
    if pos.iter().chain(neg).any(|s| s.is_nan()) {
        return Err(KcanError::NonFinite("AUC input contains NaN".into()));
    }
    let mut sorted = neg.to_vec();
    sorted.sort_unstable_by(f64::total_cmp);
    // Twice the Mann-Whitney count keeps the sum integral.
    let twice: u64 = pos
        .iter()
        .map(|&p| {
            let below = sorted.partition_point(|&n| n < p) as u64;
            let not_above = sorted.partition_point(|&n| n <= p) as u64;
            2 * below + (not_above - below)
        })
        .sum();
    Ok(twice as f64 / (2.0 * pos.len() as f64 * neg.len() as f64))
}

/// Anything that can score a `(user index, item entity)` pair.
pub trait PairScorer: Sync {
    fn score(&self, user: u32, item: EntityId) -> Result<f64>;
}

impl PairScorer for KcanModel<'_> {
    fn score(&self, user: u32, item: EntityId) -> Result<f64> {
        KcanModel::score(self, user, item)
    }
}

/// Options of [`evaluate`].
#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub negatives: usize,
    pub top_k: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub hit: f64,
    pub ndcg: f64,
    pub auc: f64,
    pub top_k: usize,
    pub users: usize,
    /// Users with fewer eligible negatives than requested.
    pub shortfall_users: usize,
    pub seed: u64,
    pub config_hash: String,
}

impl EvalReport {
    /// `metric,value,seed,config_hash` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,seed,config_hash\n");
        let k = self.top_k;
        for (name, value) in [
            (format!("hit@{k}"), self.hit),
            (format!("ndcg@{k}"), self.ndcg),
            ("auc".to_string(), self.auc),
            ("users".to_string(), self.users as f64),
            ("shortfall_users".to_string(), self.shortfall_users as f64),
        ] {
            writeln!(out, "{name},{value},{},{}", self.seed, self.config_hash).expect("write to String");
        }
        out
    }
}

struct UserResult {
    rank: usize,
    positive: f64,
    first_negative: Option<f64>,
    shortfall: bool,
}

/// Ranks each held-out item against sampled items the user never interacted with.
///
/// `seen[u]` lists every item of user `u` across train and test. AUC pools the
/// held-out scores with the first sampled negative of each user.
pub fn evaluate(
    scorer: &dyn PairScorer,
    graph: &UnifiedGraph,
    test_edges: &[(u32, u32)],
    seen: &[Vec<u32>],
    opts: &EvalOptions,
    exec: ExecPolicy,
) -> Result<EvalReport> {
    if test_edges.is_empty() {
        return Err(KcanError::Empty("test split".into()));
    }
    let n_items = graph.item_count() as u32;
    let results = exec.map(test_edges, |_, &(u, i)| -> Result<UserResult> {
        let empty = Vec::new();
        let seen_u = seen.get(u as usize).unwrap_or(&empty);
        let eligible: Vec<u32> = (0..n_items)
            .filter(|x| *x != i && seen_u.binary_search(x).is_err())
            .collect();
        let take = opts.negatives.min(eligible.len());
        let mut rng = stream(opts.seed, &[tag::EVAL_NEGATIVES, u as u64, i as u64]);
        let picks = sample(&mut rng, eligible.len(), take);
        let positive = scorer.score(u, graph.item_entity(i))?;
        let mut neg = Vec::with_capacity(take);
        for k in picks.iter() {
            neg.push(scorer.score(u, graph.item_entity(eligible[k]))?);
        }
        if !positive.is_finite() || neg.iter().any(|s| !s.is_finite()) {
            return Err(KcanError::NonFinite(format!("score for user {u}")));
        }
        Ok(UserResult {
            rank: rank_of(positive, &neg),
            positive,
            first_negative: neg.first().copied(),
            shortfall: take < opts.negatives,
        })
    });
    let mut hit = 0.0;
    let mut ndcg = 0.0;
    let mut pos = Vec::with_capacity(results.len());
    let mut neg = Vec::with_capacity(results.len());
    let mut shortfall_users = 0;
    for r in results {
        let r = r?;
        hit += hit_at_k(r.rank, opts.top_k);
        ndcg += ndcg_at_k(r.rank, opts.top_k);
        pos.push(r.positive);
        if let Some(n) = r.first_negative {
            neg.push(n);
        }
        shortfall_users += usize::from(r.shortfall);
    }
    let users = pos.len();
    Ok(EvalReport {
        hit: hit / users as f64,
        ndcg: ndcg / users as f64,
        auc: auc(&pos, &neg)?,
        top_k: opts.top_k,
        users,
        shortfall_users,
        seed: opts.seed,
        config_hash: opts.config_hash.clone(),
    })
}
