use std::collections::BTreeMap;

use super::{ModelError, ParamStore, Result};
use crate::tensor::Tensor;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// One update of every parameter named in `grads`.
    pub fn update(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads {
            let p = params.tensors.get_mut(name).ok_or_else(|| {
                ModelError::Config(format!("gradient for unknown parameter {name}"))
            })?;
            if p.shape() != g.shape() {
                return Err(ModelError::Config(format!(
                    "gradient shape mismatch for {name}"
                )));
            }
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let (mh, vh) = (*mi / c1, *vi / c2);
                *w -= self.lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut params = ParamStore::default();
        params
            .tensors
            .insert("a".into(), Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("a".into(), Tensor::new([3], vec![0.3, -4.0, 0.0]).unwrap());
        let mut opt = AdamW::new(0.1, 0.0);
        opt.update(&mut params, &grads).unwrap();
        let got = params.tensors["a"].data().to_vec();
        assert!((got[0] - 0.9).abs() < 1e-6);
        assert!((got[1] + 1.9).abs() < 1e-6);
        assert_eq!(got[2], 0.5);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let mut params = ParamStore::default();
        params
            .tensors
            .insert("a".into(), Tensor::new([1], vec![2.0]).unwrap());
        let mut grads = BTreeMap::new();
        grads.insert("a".into(), Tensor::zeros([1]));
        let mut opt = AdamW::new(0.1, 0.5);
        opt.update(&mut params, &grads).unwrap();
        assert!((params.tensors["a"].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn unknown_gradient_is_an_error() {
        let mut grads = BTreeMap::new();
        grads.insert("b".into(), Tensor::zeros([1]));
        assert!(AdamW::new(0.1, 0.0)
            .update(&mut ParamStore::default(), &grads)
            .is_err());
    }
}
