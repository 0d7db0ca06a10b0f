//! TransH projection, triple scoring and the knowledge-graph BPR loss.

use serde::{Deserialize, Serialize};

use crate::error::{KcanError, Result};
use crate::graph::{EntityId, RelationId};
use crate::linalg::{dot, sigmoid, softplus};
use crate::par::ExecPolicy;
use crate::params::{GradientSet, ParamId, ParameterStore};

/// Distance used by the triple score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreNorm {
    /// `(Σ|x|)²`
    #[default]
    L1Sq,
    /// `Σ x²`
    L2Sq,
}

impl ScoreNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreNorm::L1Sq => "l1_sq",
            ScoreNorm::L2Sq => "l2_sq",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "l1_sq" => Some(ScoreNorm::L1Sq),
            "l2_sq" => Some(ScoreNorm::L2Sq),
            _ => None,
        }
    }

    fn value(self, p: &[f64]) -> f64 {
        match self {
            ScoreNorm::L1Sq => {
                let s: f64 = p.iter().map(|x| x.abs()).sum();
                s * s
            }
            ScoreNorm::L2Sq => dot(p, p),
        }
    }

    /// `d f / d p` written into `out`; the subgradient of `|x|` at 0 is 0.
    fn grad(self, p: &[f64], out: &mut [f64]) {
        match self {
            ScoreNorm::L1Sq => {
                let s: f64 = p.iter().map(|x| x.abs()).sum();
                for (o, x) in out.iter_mut().zip(p) {
                    *o = if *x > 0.0 {
                        2.0 * s
                    } else if *x < 0.0 {
                        -2.0 * s
                    } else {
                        0.0
                    };
                }
            }
            ScoreNorm::L2Sq => {
                for (o, x) in out.iter_mut().zip(p) {
                    *o = 2.0 * x;
                }
            }
        }
    }
}

/// Projects `e` onto the hyperplane with unit normal `w`: `e − (wᵀe) w`.
pub fn project(e: &[f64], w: &[f64]) -> Vec<f64> {
    let mut out = e.to_vec();
    project_in_place(&mut out, w);
    out
}

pub fn project_in_place(e: &mut [f64], w: &[f64]) {
    let c = dot(w, e);
    for (x, wk) in e.iter_mut().zip(w) {
        *x -= c * wk;
    }
}

/// `e_{h⊥} + d_r − e_{t⊥}`.
fn residual(store: &ParameterStore, h: EntityId, r: RelationId, t: EntityId) -> Vec<f64> {
    let w = store.normal(r);
    let mut hp = project(store.entity(h), w);
    let tp = project(store.entity(t), w);
    for ((x, d), y) in hp.iter_mut().zip(store.translation(r)).zip(&tp) {
        *x += d - y;
    }
    hp
}

/// Triple distance `f_r(h, t)`; lower means more plausible.
pub fn score(store: &ParameterStore, h: EntityId, r: RelationId, t: EntityId, norm: ScoreNorm) -> f64 {
    norm.value(&residual(store, h, r, t))
}

/// Accumulates `coeff · ∂f_r(h,t)/∂θ` into `grads`.
fn score_backward(
    store: &ParameterStore,
    h: EntityId,
    r: RelationId,
    t: EntityId,
    norm: ScoreNorm,
    coeff: f64,
    grads: &mut GradientSet,
) {
    let p = residual(store, h, r, t);
    let mut gp = vec![0.0; p.len()];
    norm.grad(&p, &mut gp);
    gp.iter_mut().for_each(|g| *g *= coeff);

    let w = store.normal(r);
    let eh = store.entity(h);
    let et = store.entity(t);
    let w_gp = dot(w, &gp);
    let w_h = dot(w, eh);
    let w_t = dot(w, et);

    for (g, x) in grads
        .row_mut(ParamId::RelationTranslation, r as usize)
        .iter_mut()
        .zip(&gp)
    {
        *g += x;
    }
    {
        let gw = grads.row_mut(ParamId::RelationNormal, r as usize);
        for k in 0..gw.len() {
            gw[k] += -(w_h * gp[k] + w_gp * eh[k]) + (w_t * gp[k] + w_gp * et[k]);
        }
    }
    {
        let gh = grads.row_mut(ParamId::EntityEmbedding, h as usize);
        for k in 0..gh.len() {
            gh[k] += gp[k] - w_gp * w[k];
        }
    }
    let gt = grads.row_mut(ParamId::EntityEmbedding, t as usize);
    for k in 0..gt.len() {
        gt[k] -= gp[k] - w_gp * w[k];
    }
}

/// A positive triple with its corrupted tail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KgSample {
    pub head: EntityId,
    pub relation: RelationId,
    pub tail: EntityId,
    pub corrupt_tail: EntityId,
}

/// Per-pair BPR term `−ln σ(f_neg − f_pos)`.
pub fn kg_pair_loss(f_pos: f64, f_neg: f64) -> f64 {
    softplus(f_pos - f_neg)
}

const CHUNK: usize = 64;

/// Mean of `−ln σ(f_r(h,t') − f_r(h,t))` over the batch, with exact gradients.
pub fn kg_loss_batch(
    store: &ParameterStore,
    batch: &[KgSample],
    norm: ScoreNorm,
    exec: ExecPolicy,
) -> Result<(f64, GradientSet)> {
    let mut grads = GradientSet::for_store(store);
    if batch.is_empty() {
        return Ok((0.0, grads));
    }
    let inv_n = 1.0 / batch.len() as f64;
    let chunks: Vec<&[KgSample]> = batch.chunks(CHUNK).collect();
    let partials = exec.map(&chunks, |_, chunk| {
        let mut g = GradientSet::for_store(store);
        let mut loss = 0.0;
        for s in chunk.iter() {
            let f_pos = score(store, s.head, s.relation, s.tail, norm);
            let f_neg = score(store, s.head, s.relation, s.corrupt_tail, norm);
            loss += kg_pair_loss(f_pos, f_neg);
            // d/d f_pos softplus(f_pos - f_neg) = σ(f_pos - f_neg)
            let c = sigmoid(f_pos - f_neg) * inv_n;
            score_backward(store, s.head, s.relation, s.tail, norm, c, &mut g);
            score_backward(store, s.head, s.relation, s.corrupt_tail, norm, -c, &mut g);
        }
        (loss, g)
    });
    let mut loss = 0.0;
    for (l, g) in &partials {
        loss += l;
        grads.merge(g);
    }
    let loss = loss * inv_n;
    if !loss.is_finite() {
        return Err(KcanError::NonFinite("knowledge-graph loss".into()));
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::{adam_step, init_params, AdamConfig, ModelDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store(entities: usize, relations: usize, dim: usize, seed: u64) -> ParameterStore {
        let dims = ModelDims {
            entity_count: entities,
            relation_count: relations,
            embed_dim: dim,
            tower: vec![dim, 2],
            out_dim: 2,
        };
        init_params(&dims, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn projection_examples() {
        assert_eq!(project(&[1.0, 0.0], &[0.0, 1.0]), vec![1.0, 0.0]);
        assert_eq!(project(&[1.0, 1.0], &[0.0, 1.0]), vec![1.0, 0.0]);
        let w = [0.6, 0.8];
        let once = project(&[0.3, -2.0], &w);
        let twice = project(&once, &w);
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn set_2d(s: &mut ParameterStore, h: [f64; 2], t: [f64; 2], w: [f64; 2], d: [f64; 2]) {
        s.get_mut(ParamId::EntityEmbedding).row_mut(0).copy_from_slice(&h);
        s.get_mut(ParamId::EntityEmbedding).row_mut(1).copy_from_slice(&t);
        s.get_mut(ParamId::RelationNormal).row_mut(0).copy_from_slice(&w);
        s.get_mut(ParamId::RelationTranslation).row_mut(0).copy_from_slice(&d);
    }

    #[test]
    fn score_hand_example() {
        let mut s = store(2, 1, 2, 0);
        set_2d(&mut s, [1.0, 1.0], [2.0, 3.0], [0.0, 1.0], [0.5, 0.0]);
        // h⊥ = (1,0), t⊥ = (2,0): residual (1.5 − 2, 0) → L1² = 0.25
        assert!((score(&s, 0, 0, 1, ScoreNorm::L1Sq) - 0.25).abs() < 1e-12);
        assert!((score(&s, 0, 0, 1, ScoreNorm::L2Sq) - 0.25).abs() < 1e-12);
        set_2d(&mut s, [1.0, 5.0], [1.0, -2.0], [0.0, 1.0], [0.0, 0.0]);
        assert_eq!(score(&s, 0, 0, 1, ScoreNorm::L1Sq), 0.0);
    }

    #[test]
    fn equal_scores_give_ln2() {
        assert!((kg_pair_loss(1.3, 1.3) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(kg_pair_loss(0.0, 60.0) < 1e-20);
        assert!(kg_pair_loss(0.0, 60.0) > 0.0);
    }

    fn toy_batch() -> Vec<KgSample> {
        vec![
            KgSample {
                head: 0,
                relation: 0,
                tail: 1,
                corrupt_tail: 2,
            },
            KgSample {
                head: 1,
                relation: 1,
                tail: 2,
                corrupt_tail: 4,
            },
            KgSample {
                head: 2,
                relation: 0,
                tail: 3,
                corrupt_tail: 0,
            },
            KgSample {
                head: 3,
                relation: 1,
                tail: 4,
                corrupt_tail: 1,
            },
            KgSample {
                head: 4,
                relation: 0,
                tail: 0,
                corrupt_tail: 3,
            },
        ]
    }

    #[test]
    fn kg_loss_gradients_pass_grad_check() {
        let s = store(5, 2, 6, 11);
        for norm in [ScoreNorm::L1Sq, ScoreNorm::L2Sq] {
            let batch = toy_batch();
            let eval = |st: &ParameterStore| kg_loss_batch(st, &batch, norm, ExecPolicy::Sequential);
            let r = grad_check(eval, &s, 120, 1e-4, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
            assert!(r.max_rel_err <= 1e-4, "{norm:?}: {}", r.max_rel_err);
        }
    }

    #[test]
    fn kg_loss_policies_agree() {
        let s = store(5, 2, 6, 12);
        let batch: Vec<KgSample> = toy_batch().into_iter().cycle().take(300).collect();
        let a = kg_loss_batch(&s, &batch, ScoreNorm::L1Sq, ExecPolicy::Sequential).unwrap();
        let b = kg_loss_batch(&s, &batch, ScoreNorm::L1Sq, ExecPolicy::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kg_loss_decreases_on_toy_graph() {
        // 3 entities, 1 relation, fixed negatives.
        let mut s = store(3, 1, 4, 3);
        let batch = vec![
            KgSample {
                head: 0,
                relation: 0,
                tail: 1,
                corrupt_tail: 2,
            },
            KgSample {
                head: 1,
                relation: 0,
                tail: 2,
                corrupt_tail: 0,
            },
        ];
        let cfg = AdamConfig::with_lr(0.01);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let (l, g) = kg_loss_batch(&s, &batch, ScoreNorm::L1Sq, ExecPolicy::Sequential).unwrap();
            losses.push(l);
            adam_step(&mut s, &g, &cfg).unwrap();
        }
        let smooth: Vec<f64> = losses.windows(5).map(|w| w.iter().sum::<f64>() / 5.0).collect();
        assert!(smooth.windows(2).all(|w| w[1] < w[0]), "{smooth:?}");
    }
}
