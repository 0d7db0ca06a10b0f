//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::{KcanError, Result};
use crate::params::{GradientSet, ParamId, ParameterStore};

pub const DEFAULT_STEP: f64 = 1e-4;
const REL_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub param: ParamId,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<Probe>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Compares analytic gradients from `loss` against `(L(θ+h) − L(θ−h)) / 2h` for
/// `probe_count` scalars drawn from the entries the analytic gradient touches.
///
/// `loss` must be deterministic in the parameters: fixed batch, fixed negatives,
/// fixed dropout masks.
pub fn grad_check<F>(
    loss: F,
    store: &ParameterStore,
    probe_count: usize,
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<(f64, GradientSet)>,
{
    let (base, grads) = loss(store)?;
    if !base.is_finite() {
        return Err(KcanError::NonFinite("loss at the unperturbed point".into()));
    }
    let candidates = grads.entries(store.ids());
    let chosen: Vec<usize> = if candidates.len() <= probe_count {
        (0..candidates.len()).collect()
    } else {
        let mut idx = sample(rng, candidates.len(), probe_count).into_vec();
        idx.sort_unstable();
        idx
    };
    let mut work = store.clone();
    let mut probes = Vec::with_capacity(chosen.len());
    for c in chosen {
        let (param, index) = candidates[c];
        let original = work.get(param).data[index];
        work.get_mut(param).data[index] = original + h;
        let plus = loss(&work)?.0;
        work.get_mut(param).data[index] = original - h;
        let minus = loss(&work)?.0;
        work.get_mut(param).data[index] = original;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(KcanError::NonFinite(format!(
                "loss while probing {}[{index}]",
                param.name()
            )));
        }
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.value(param, index);
        let rel_err = (analytic - numeric).abs() / numeric.abs().max(REL_FLOOR);
        probes.push(Probe {
            param,
            index,
            analytic,
            numeric,
            rel_err,
        });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, probes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{init_params, ModelDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_store() -> ParameterStore {
        let dims = ModelDims {
            entity_count: 2,
            relation_count: 1,
            embed_dim: 2,
            tower: vec![2, 2],
            out_dim: 1,
        };
        let mut s = init_params(&dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        s.get_mut(ParamId::OutBias).data[0] = 1.0;
        s
    }

    fn square_loss(scale: f64) -> impl Fn(&ParameterStore) -> Result<(f64, GradientSet)> {
        move |s: &ParameterStore| {
            let theta = s.get(ParamId::OutBias).data[0];
            let mut g = GradientSet::for_store(s);
            g.dense_mut(ParamId::OutBias)[0] = scale * 2.0 * theta;
            Ok((theta * theta, g))
        }
    }

    #[test]
    fn square_at_one() {
        let s = tiny_store();
        let r = grad_check(square_loss(1.0), &s, 1, DEFAULT_STEP, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(r.probes.len(), 1);
        assert!((r.probes[0].numeric - 2.0).abs() < 1e-8);
        assert!(r.max_rel_err < 1e-6);
    }

    #[test]
    fn corrupted_gradient_is_caught() {
        let s = tiny_store();
        let r = grad_check(square_loss(2.0), &s, 1, DEFAULT_STEP, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!((r.max_rel_err - 1.0).abs() < 1e-6);
        assert!(!r.passes(1e-4));
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let s = tiny_store();
        let bad = |st: &ParameterStore| Ok((f64::NAN, GradientSet::for_store(st)));
        assert!(matches!(
            grad_check(bad, &s, 1, DEFAULT_STEP, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(KcanError::NonFinite(_))
        ));
    }
}
