use super::{Gradients, ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Decoupled (AdamW-style) weight decay; 0 gives plain Adam.
    pub weight_decay: f32,
}

impl AdamConfig {
    pub fn adam(lr: f32, betas: (f32, f32)) -> Self {
        Self {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f32, betas: (f32, f32), weight_decay: f32) -> Self {
        Self {
            weight_decay,
            ..Self::adam(lr, betas)
        }
    }
}

/// Adam / AdamW with bias correction. Moments are kept per parameter index.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Option<Tensor<f32>>>,
    v: Vec<Option<Tensor<f32>>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<f32>, grads: &Gradients<f32>) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        if self.m.len() < store.len() {
            self.m.resize(store.len(), None);
            self.v.resize(store.len(), None);
        }
        for (id, g) in grads.params() {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let m = self.m[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v[id.0].get_or_insert_with(|| Tensor::zeros(g.shape()));
            let w = p.value.data_mut();
            for (((wi, &gi), mi), vi) in w
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                if c.weight_decay > 0.0 {
                    *wi -= c.lr * c.weight_decay * *wi;
                }
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
    }

    /// Moments as a parameter store (`m/<name>`, `v/<name>`, plus `step`),
    /// suitable for [`save_store`](super::io::save_store).
    pub fn state_store(&self, params: &ParamStore<f32>) -> Result<ParamStore<f32>> {
        let mut out = ParamStore::new();
        out.add("step", Tensor::scalar(self.step as f32))?;
        for (id, p) in params.iter() {
            if let Some(Some(m)) = self.m.get(id.0) {
                out.add(format!("m/{}", p.name), m.clone())?;
            }
            if let Some(Some(v)) = self.v.get(id.0) {
                out.add(format!("v/{}", p.name), v.clone())?;
            }
        }
        Ok(out)
    }

    pub fn from_state_store(
        cfg: AdamConfig,
        state: &ParamStore<f32>,
        params: &ParamStore<f32>,
    ) -> Result<Self> {
        let step = state.value(state.require("step")?).item()? as u64;
        let mut opt = Self::new(cfg);
        opt.step = step;
        opt.m = vec![None; params.len()];
        opt.v = vec![None; params.len()];
        for (_, p) in state.iter() {
            let (slot, name) = match p.name.split_once('/') {
                Some(("m", n)) => (&mut opt.m, n),
                Some(("v", n)) => (&mut opt.v, n),
                _ if p.name == "step" => continue,
                _ => {
                    return Err(Error::Format(format!(
                        "unexpected optimizer entry {}",
                        p.name
                    )))
                }
            };
            let id = params.require(name)?;
            slot[id.0] = Some(p.value.clone());
        }
        Ok(opt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Graph;

    fn quadratic_grads(store: &ParamStore<f32>) -> Gradients<f32> {
        let mut g = Graph::new();
        let id = store.require("x").unwrap();
        let x = g.param(store, id).unwrap();
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap()
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut store = ParamStore::new();
        store
            .add("x", Tensor::new(vec![2], vec![1.0, -3.0]).unwrap())
            .unwrap();
        let mut opt = Adam::new(AdamConfig::adam(0.1, (0.9, 0.999)));
        let grads = quadratic_grads(&store);
        opt.step(&mut store, &grads);
        let x = store.value(store.require("x").unwrap()).data();
        assert!((x[0] - 0.9).abs() < 1e-5);
        assert!((x[1] + 2.9).abs() < 1e-5);
    }

    #[test]
    fn state_round_trip_continues_identically() {
        let mut store = ParamStore::new();
        store
            .add("x", Tensor::new(vec![3], vec![1.0, -3.0, 0.5]).unwrap())
            .unwrap();
        let cfg = AdamConfig::adamw(0.05, (0.9, 0.95), 0.01);
        let mut opt = Adam::new(cfg);
        for _ in 0..3 {
            let g = quadratic_grads(&store);
            opt.step(&mut store, &g);
        }
        let saved = opt.state_store(&store).unwrap();
        let mut resumed = Adam::from_state_store(cfg, &saved, &store).unwrap();
        let mut store2 = store.clone();
        for _ in 0..3 {
            let g = quadratic_grads(&store);
            opt.step(&mut store, &g);
            let g2 = quadratic_grads(&store2);
            resumed.step(&mut store2, &g2);
        }
        assert_eq!(store, store2);
    }
}
