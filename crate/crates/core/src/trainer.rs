//! Alternating two-phase training loop and ablation runs.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::config::{Ablation, TrainConfig};
use crate::error::{KcanError, Result};
use crate::eval::{evaluate, EvalOptions, EvalReport};
use crate::graph::{sample_corrupt_tail, UnifiedGraph};
use crate::model::{cache_for, make_samples, target_loss_batch, BatchContext, KcanModel};
use crate::par::ExecPolicy;
use crate::params::{adam_step, add_l2_gradient, init_params, GradientSet, ParameterStore};
use crate::predictor::total_loss;
use crate::rng::{stream, tag};
use crate::transh::{kg_loss_batch, KgSample};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLosses {
    pub epoch: usize,
    /// Sample-weighted mean knowledge-graph loss of Phase I.
    pub kg: f64,
    /// Sample-weighted mean ranking loss of Phase II.
    pub target: f64,
    /// `kg + target + λ‖Θ‖²` after the epoch.
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LossTrace {
    pub epochs: Vec<EpochLosses>,
}

impl LossTrace {
    pub fn kg(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.kg).collect()
    }

    pub fn target(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.target).collect()
    }

    /// `epoch,phase,loss` with phases `kg`, `target` and `total`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,phase,loss\n");
        for e in &self.epochs {
            for (phase, v) in [("kg", e.kg), ("target", e.target), ("total", e.total)] {
                writeln!(out, "{},{phase},{v}", e.epoch).expect("write to String");
            }
        }
        out
    }
}

/// Trailing moving average over `window` points (shorter at the start).
pub fn smooth(values: &[f64], window: usize) -> Vec<f64> {
    let window = window.max(1);
    (0..values.len())
        .map(|k| {
            let lo = (k + 1).saturating_sub(window);
            let span = &values[lo..=k];
            span.iter().sum::<f64>() / span.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub store: ParameterStore,
    pub trace: LossTrace,
}

/// Freshly initialized parameters for `graph` under `cfg`.
pub fn init_store(cfg: &TrainConfig, graph: &UnifiedGraph) -> Result<ParameterStore> {
    cfg.validate()?;
    let dims = cfg.dims(graph.entity_count(), graph.relation_count());
    init_params(&dims, &mut stream(cfg.seed, &[tag::INIT]))
}

/// Per-tensor squared norms and finiteness, for non-finite-loss reports.
pub fn diagnose(store: &ParameterStore) -> String {
    let mut out = String::new();
    for &id in store.ids() {
        let t = store.get(id);
        let sq: f64 = t.data.iter().map(|x| x * x).sum();
        let bad = t.data.iter().filter(|x| !x.is_finite()).count();
        write!(out, "{}: |θ|²={sq:.6e} non_finite={bad}; ", id.name()).expect("write to String");
    }
    write!(out, "adam_step={}", store.step()).expect("write to String");
    out
}

fn with_context(e: KcanError, epoch: usize, phase: &str, batch: usize, store: &ParameterStore) -> KcanError {
    match e {
        KcanError::NonFinite(msg) => KcanError::NonFinite(format!(
            "{msg} (epoch {epoch}, {phase} batch {batch}); state: {}",
            diagnose(store)
        )),
        other => other,
    }
}

fn apply(
    store: &mut ParameterStore,
    mut grads: GradientSet,
    cfg: &TrainConfig,
    epoch: usize,
    phase: &str,
    batch: usize,
) -> Result<()> {
    add_l2_gradient(store, cfg.lambda, &mut grads);
    if !grads.is_finite() {
        return Err(with_context(
            KcanError::NonFinite("gradient".into()),
            epoch,
            phase,
            batch,
            store,
        ));
    }
    adam_step(store, &grads, &cfg.adam())
}

/// Triples `indices` of `graph`, each with its corrupted tail for `epoch`.
pub fn kg_samples(graph: &UnifiedGraph, indices: &[usize], seed: u64, epoch: usize) -> Result<Vec<KgSample>> {
    indices
        .iter()
        .map(|&k| {
            let t = graph.triples[k];
            let mut rng = stream(seed, &[tag::KG_NEGATIVE, epoch as u64, k as u64]);
            Ok(KgSample {
                head: t.head,
                relation: t.relation,
                tail: t.tail,
                corrupt_tail: sample_corrupt_tail(graph, t.head, t.relation, &mut rng)?,
            })
        })
        .collect()
}

/// The full objective `ℒ_kg + ℒ_T + λ‖Θ‖²` on every triple and every training
/// interaction, with negatives, subgraphs and dropout masks fixed as in epoch 0
/// and the attention cache taken from `store`. The L2 gradient covers the
/// entries the two losses touch.
pub fn composed_objective<'a>(
    cfg: &'a TrainConfig,
    graph: &'a UnifiedGraph,
    store: &ParameterStore,
    exec: ExecPolicy,
) -> Result<impl Fn(&ParameterStore) -> Result<(f64, GradientSet)> + 'a> {
    cfg.validate()?;
    let cache = cache_for(graph, store, cfg.ablation, 0, exec);
    let all: Vec<usize> = (0..graph.triple_count()).collect();
    let kg = kg_samples(graph, &all, cfg.seed, 0)?;
    let samples = make_samples(graph, graph.interactions(), cfg.seed, 0)?;
    let ctx = BatchContext::from_config(cfg, 0);
    Ok(move |st: &ParameterStore| {
        let (l_kg, mut grads) = kg_loss_batch(st, &kg, cfg.norm, exec)?;
        let (l_t, g_t) = target_loss_batch(st, graph, &cache, &samples, &ctx, exec)?;
        grads.merge(&g_t);
        add_l2_gradient(st, cfg.lambda, &mut grads);
        Ok((total_loss(l_kg, l_t, st, cfg.lambda), grads))
    })
}

/// Phase I over every triple of `graph`; returns the mean loss.
fn kg_phase(
    store: &mut ParameterStore,
    graph: &UnifiedGraph,
    cfg: &TrainConfig,
    epoch: usize,
    exec: ExecPolicy,
) -> Result<f64> {
    let mut order: Vec<usize> = (0..graph.triple_count()).collect();
    order.shuffle(&mut stream(cfg.seed, &[tag::KG_ORDER, epoch as u64]));
    let mut total = 0.0;
    for (b, chunk) in order.chunks(cfg.kg_batch).enumerate() {
        let batch = kg_samples(graph, chunk, cfg.seed, epoch)?;
        let (loss, grads) =
            kg_loss_batch(store, &batch, cfg.norm, exec).map_err(|e| with_context(e, epoch, "kg", b, store))?;
        total += loss * batch.len() as f64;
        apply(store, grads, cfg, epoch, "kg", b)?;
    }
    Ok(total / graph.triple_count().max(1) as f64)
}

/// Phase II over every training interaction of `graph`; returns the mean loss.
fn target_phase(
    store: &mut ParameterStore,
    graph: &UnifiedGraph,
    cfg: &TrainConfig,
    epoch: usize,
    exec: ExecPolicy,
) -> Result<f64> {
    let cache = cache_for(graph, store, cfg.ablation, epoch as u64, exec);
    let mut samples = make_samples(graph, graph.interactions(), cfg.seed, epoch as u64)?;
    samples.shuffle(&mut stream(cfg.seed, &[tag::TARGET_ORDER, epoch as u64]));
    let ctx = BatchContext::from_config(cfg, epoch as u64);
    let mut total = 0.0;
    for (b, batch) in samples.chunks(cfg.target_batch).enumerate() {
        let (loss, grads) = target_loss_batch(store, graph, &cache, batch, &ctx, exec)
            .map_err(|e| with_context(e, epoch, "target", b, store))?;
        total += loss * batch.len() as f64;
        apply(store, grads, cfg, epoch, "target", b)?;
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains from a fresh initialization.
pub fn train(cfg: &TrainConfig, graph: &UnifiedGraph, exec: ExecPolicy) -> Result<TrainOutcome> {
    let store = init_store(cfg, graph)?;
    train_from(cfg, graph, store, exec, |_| {})
}

/// Runs `cfg.epochs` epochs of Phase I then Phase II on `store`; `on_epoch`
/// sees each epoch's losses as soon as they are known.
pub fn train_from(
    cfg: &TrainConfig,
    graph: &UnifiedGraph,
    mut store: ParameterStore,
    exec: ExecPolicy,
    mut on_epoch: impl FnMut(&EpochLosses),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if graph.interactions().is_empty() {
        return Err(KcanError::Empty("training interactions".into()));
    }
    let mut trace = LossTrace::default();
    for epoch in 0..cfg.epochs {
        let kg = kg_phase(&mut store, graph, cfg, epoch, exec)?;
        let target = target_phase(&mut store, graph, cfg, epoch, exec)?;
        let total = total_loss(kg, target, &store, cfg.lambda);
        if !total.is_finite() {
            return Err(with_context(
                KcanError::NonFinite("total loss".into()),
                epoch,
                "end of",
                0,
                &store,
            ));
        }
        let rec = EpochLosses {
            epoch,
            kg,
            target,
            total,
        };
        on_epoch(&rec);
        trace.epochs.push(rec);
    }
    Ok(TrainOutcome { store, trace })
}

/// Held-out data for evaluation.
#[derive(Debug, Clone, Copy)]
pub struct EvalData<'a> {
    pub test_edges: &'a [(u32, u32)],
    /// Items of each user across train and test, sorted.
    pub seen: &'a [Vec<u32>],
}

pub fn eval_options(cfg: &TrainConfig) -> EvalOptions {
    EvalOptions {
        negatives: cfg.eval_negatives,
        top_k: cfg.top_k,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    }
}

/// Trains and evaluates one configuration.
pub fn train_and_evaluate(
    cfg: &TrainConfig,
    graph: &UnifiedGraph,
    data: EvalData<'_>,
    exec: ExecPolicy,
) -> Result<(TrainOutcome, EvalReport)> {
    let outcome = train(cfg, graph, exec)?;
    let model = KcanModel::new(graph, outcome.store.clone(), cfg.clone(), exec)?;
    let report = evaluate(&model, graph, data.test_edges, data.seen, &eval_options(cfg), exec)?;
    Ok((outcome, report))
}

/// Trains and evaluates every variant with the same seed and data.
pub fn run_ablation(
    cfg: &TrainConfig,
    graph: &UnifiedGraph,
    data: EvalData<'_>,
    exec: ExecPolicy,
) -> Result<Vec<(Ablation, EvalReport)>> {
    Ablation::ALL
        .iter()
        .map(|&a| {
            let (_, report) = train_and_evaluate(&cfg.with_ablation(a), graph, data, exec)?;
            Ok((a, report))
        })
        .collect()
}
