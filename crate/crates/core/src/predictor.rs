//! Output head, pair scoring and the pairwise ranking objective.

use crate::error::{KcanError, Result};
use crate::linalg::{axpy, dot, matvec, matvec_t_acc, outer_acc, sigmoid, softplus};
use crate::params::{l2_penalty, GradientSet, ParamId, ParameterStore};

/// `e^o = W^o (global ‖ local) + b^o`; no activation.
pub fn output_repr(store: &ParameterStore, global: &[f64], local: &[f64]) -> Result<Vec<f64>> {
    let w = store.get(ParamId::OutWeight);
    let b = &store.get(ParamId::OutBias).data;
    if w.cols != global.len() + local.len() || b.len() != w.rows {
        return Err(KcanError::Shape(format!(
            "output head expects {} input features, got {}",
            w.cols,
            global.len() + local.len()
        )));
    }
    let mut input = Vec::with_capacity(w.cols);
    input.extend_from_slice(global);
    input.extend_from_slice(local);
    let mut out = b.clone();
    let mut z = vec![0.0; w.rows];
    matvec(&w.data, w.rows, w.cols, &input, &mut z);
    axpy(1.0, &z, &mut out);
    Ok(out)
}

/// Accumulates head gradients for `grad_out`; returns `(d global, d local)`.
pub fn output_repr_backward(
    store: &ParameterStore,
    global: &[f64],
    local: &[f64],
    grad_out: &[f64],
    grads: &mut GradientSet,
) -> (Vec<f64>, Vec<f64>) {
    let w = store.get(ParamId::OutWeight);
    let mut input = Vec::with_capacity(w.cols);
    input.extend_from_slice(global);
    input.extend_from_slice(local);
    outer_acc(grads.dense_mut(ParamId::OutWeight), w.rows, w.cols, grad_out, &input);
    axpy(1.0, grad_out, grads.dense_mut(ParamId::OutBias));
    let mut g_in = vec![0.0; w.cols];
    matvec_t_acc(&w.data, w.rows, w.cols, grad_out, &mut g_in);
    let g_local = g_in.split_off(global.len());
    (g_in, g_local)
}

/// `ŷ = e^o_u · e^o_i`.
pub fn pair_score(user_out: &[f64], item_out: &[f64]) -> f64 {
    dot(user_out, item_out)
}

/// `−ln σ(pos − neg)`.
pub fn bpr_loss(pos: f64, neg: f64) -> f64 {
    softplus(neg - pos)
}

/// `∂ bpr_loss / ∂ pos`; the derivative w.r.t. `neg` is its negation.
pub fn bpr_grad_pos(pos: f64, neg: f64) -> f64 {
    -sigmoid(neg - pos)
}

/// `ℒ_kg + ℒ_T + λ‖Θ‖²`, as reported per epoch.
pub fn total_loss(kg_part: f64, target_part: f64, store: &ParameterStore, lambda: f64) -> f64 {
    kg_part + target_part + l2_penalty(store, lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::params::{init_params, ModelDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store() -> ParameterStore {
        let dims = ModelDims {
            entity_count: 3,
            relation_count: 1,
            embed_dim: 4,
            tower: vec![4, 3],
            out_dim: 2,
        };
        init_params(&dims, &mut ChaCha8Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn zero_weight_gives_bias() {
        let mut s = store();
        s.get_mut(ParamId::OutWeight).data.fill(0.0);
        s.get_mut(ParamId::OutBias).data.copy_from_slice(&[0.5, -1.0]);
        let e = output_repr(&s, &[1.0; 4], &[2.0; 3]).unwrap();
        assert_eq!(e, vec![0.5, -1.0]);
        assert!(output_repr(&s, &[1.0; 4], &[2.0; 2]).is_err());
    }

    #[test]
    fn score_examples() {
        assert_eq!(pair_score(&[0.6, 0.8], &[0.6, 0.8]), 1.0);
        assert_eq!(pair_score(&[1.0, 0.0], &[0.0, 3.0]), 0.0);
        let (u, i) = ([0.3, -1.2], [2.0, 0.7]);
        assert!((pair_score(&[0.6, -2.4], &i) - 2.0 * pair_score(&u, &i)).abs() < 1e-12);
    }

    #[test]
    fn bpr_values() {
        assert!((bpr_loss(0.4, 0.4) - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(bpr_loss(50.0, 0.0) < 1e-20 && bpr_loss(50.0, 0.0) > 0.0);
        assert_eq!(bpr_grad_pos(1.0, 1.0), -0.5);
    }

    #[test]
    fn total_loss_examples() {
        let mut s = store();
        assert!((total_loss(0.5, 0.7, &s, 0.0) - 1.2).abs() < 1e-12);
        for id in s.ids().to_vec() {
            s.get_mut(id).data.fill(0.0);
        }
        assert_eq!(total_loss(0.5, 0.7, &s, 0.1), 1.2);
    }

    #[test]
    fn head_gradients_pass_grad_check() {
        let s = store();
        let (g, l) = ([0.3, -0.2, 0.5, 0.1], [0.7, -0.4, 0.2]);
        let (g2, l2) = ([-0.1, 0.4, 0.2, 0.6], [0.1, 0.3, -0.5]);
        let f = |st: &ParameterStore| {
            let eu = output_repr(st, &g, &l)?;
            let ei = output_repr(st, &g2, &l2)?;
            let y = pair_score(&eu, &ei);
            let loss = bpr_loss(y, 0.2);
            let gy = bpr_grad_pos(y, 0.2);
            let mut grads = GradientSet::for_store(st);
            let gu: Vec<f64> = ei.iter().map(|x| gy * x).collect();
            let gi: Vec<f64> = eu.iter().map(|x| gy * x).collect();
            output_repr_backward(st, &g, &l, &gu, &mut grads);
            output_repr_backward(st, &g2, &l2, &gi, &mut grads);
            Ok((loss, grads))
        };
        let r = grad_check(f, &s, 100, 1e-4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(r.passes(1e-4), "{}", r.max_rel_err);
    }
}
