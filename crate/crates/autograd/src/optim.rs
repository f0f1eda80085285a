use std::collections::BTreeMap;

use crate::array::Array;
use crate::store::ParamStore;

/// Adam with bias correction. State is keyed by parameter name so it can be
/// checkpointed next to the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub step: u64,
    m: BTreeMap<String, Array<f32>>,
    v: BTreeMap<String, Array<f32>>,
}

impl Adam {
    pub fn new(lr: f32) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    pub fn update(&mut self, store: &mut ParamStore<f32>, grads: &BTreeMap<String, Array<f32>>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = store.get_mut(name).unwrap_or_else(|| panic!("gradient for unknown parameter `{name}`"));
            let m = self.m.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Array::zeros(g.shape()));
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mh = *mv / bc1;
                let vh = *vv / bc2;
                *pv -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }

    /// Moment buffers flattened into `adam.m/<name>` and `adam.v/<name>` entries.
    pub fn state_arrays(&self) -> ParamStore<f32> {
        let mut s = ParamStore::new();
        for (k, v) in &self.m {
            s.insert(format!("adam.m/{k}"), v.clone());
        }
        for (k, v) in &self.v {
            s.insert(format!("adam.v/{k}"), v.clone());
        }
        s
    }

    pub fn from_state_arrays(lr: f32, step: u64, state: &ParamStore<f32>) -> Self {
        let mut a = Adam::new(lr);
        a.step = step;
        for (k, v) in state.iter() {
            if let Some(n) = k.strip_prefix("adam.m/") {
                a.m.insert(n.to_string(), v.clone());
            } else if let Some(n) = k.strip_prefix("adam.v/") {
                a.v.insert(n.to_string(), v.clone());
            }
        }
        a
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_minimises_quadratic() {
        let mut store = ParamStore::new();
        store.insert("x", Array::from_vec(&[2], vec![3.0f32, -2.0]));
        let mut opt = Adam::new(0.1);
        for _ in 0..500 {
            let x = store.get("x").unwrap().clone();
            let g: BTreeMap<_, _> = [("x".to_string(), x.map(|v| 2.0 * v))].into();
            opt.update(&mut store, &g);
        }
        assert!(store.get("x").unwrap().data().iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn state_roundtrip_preserves_updates() {
        let mut store = ParamStore::new();
        store.insert("w", Array::from_vec(&[1], vec![1.0f32]));
        let g: BTreeMap<_, _> = [("w".to_string(), Array::from_vec(&[1], vec![0.5f32]))].into();
        let mut a = Adam::new(0.01);
        a.update(&mut store, &g);
        let mut b = Adam::from_state_arrays(0.01, a.step, &a.state_arrays());
        let mut s2 = store.clone();
        a.update(&mut store, &g);
        b.update(&mut s2, &g);
        assert_eq!(store, s2);
    }
}
