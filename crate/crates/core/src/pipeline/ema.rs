//! Exponential moving average of model parameters.

use std::collections::BTreeMap;

use gdetr_autograd::Tensor;

use crate::error::{invalid_arg, Error, Result};
use crate::nn::ParamStore;

/// Shadow copy of every parameter, keyed by name.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub decay: f64,
    pub shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    /// Starts the shadow at the current parameter values.
    pub fn new(decay: f64, params: &ParamStore) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(invalid_arg!("EMA decay must lie in [0, 1], got {decay}"));
        }
        Ok(Self {
            decay,
            shadow: params.iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        })
    }

    /// A copy of `params` holding the shadow values. Live parameters are untouched.
    pub fn weights(&self, params: &ParamStore) -> Result<ParamStore> {
        self.check_keys(params)?;
        let mut out = params.clone();
        for id in params.ids() {
            *out.get_mut(id) = self.shadow[params.name(id)].clone();
        }
        Ok(out)
    }

    fn check_keys(&self, params: &ParamStore) -> Result<()> {
        let same = params.len() == self.shadow.len()
            && params
                .iter()
                .all(|(n, t)| self.shadow.get(n).is_some_and(|s| s.shape() == t.shape()));
        if !same {
            return Err(Error::InvalidState(
                "EMA shadow and model parameters differ in names or shapes".into(),
            ));
        }
        Ok(())
    }
}

/// `shadow = d * shadow + (1 - d) * params` for every parameter.
pub fn ema_update(state: &mut EmaState, params: &ParamStore) -> Result<()> {
    state.check_keys(params)?;
    let d = state.decay;
    for (name, p) in params.iter() {
        let s = state.shadow.get_mut(name).expect("keys checked");
        for (a, &b) in s.data_mut().iter_mut().zip(p.data()) {
            *a = d * *a + (1.0 - d) * b;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::full([2, 3], v));
        s.add("b", Tensor::full([4], -v));
        s
    }

    #[test]
    fn extreme_decays() {
        let mut keep = EmaState::new(1.0, &store(1.0)).unwrap();
        ema_update(&mut keep, &store(5.0)).unwrap();
        assert_eq!(keep.shadow["a.w"], Tensor::full([2, 3], 1.0));
        let mut copy = EmaState::new(0.0, &store(1.0)).unwrap();
        ema_update(&mut copy, &store(5.0)).unwrap();
        assert_eq!(copy.shadow["b"], Tensor::full([4], -5.0));
    }

    #[test]
    fn two_updates_closed_form() {
        let (s0, p, d) = (0.3, 2.0, 0.9);
        let mut e = EmaState::new(d, &store(s0)).unwrap();
        ema_update(&mut e, &store(p)).unwrap();
        ema_update(&mut e, &store(p)).unwrap();
        let want = d * d * s0 + (1.0 - d * d) * p;
        assert!(e.shadow["a.w"].data().iter().all(|v| (v - want).abs() < 1e-12));
    }

    #[test]
    fn key_mismatch_is_rejected() {
        let mut e = EmaState::new(0.5, &store(0.0)).unwrap();
        let mut other = ParamStore::new();
        other.add("c", Tensor::zeros([1]));
        assert!(matches!(ema_update(&mut e, &other), Err(Error::InvalidState(_))));
    }

    #[test]
    fn shadow_weights_leave_live_params() {
        let live = store(1.0);
        let mut e = EmaState::new(0.5, &live).unwrap();
        ema_update(&mut e, &store(3.0)).unwrap();
        let w = e.weights(&live).unwrap();
        assert_eq!(w.get_by_name("a.w").unwrap().data()[0], 2.0);
        assert_eq!(live.get_by_name("a.w").unwrap().data()[0], 1.0);
    }
}
