use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Global parameters plus per-parameter Adam moments.
///
/// The only mutator is [`SharedParams::apply`]; each successful call bumps
/// the version.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedParams {
    store: ParamStore,
    adam: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    /// Updates seen by each parameter, for bias correction.
    counts: Vec<u64>,
    version: u64,
}

impl SharedParams {
    pub fn new(store: ParamStore, adam: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Self {
            counts: vec![0; store.len()],
            first: zeros.clone(),
            second: zeros,
            store,
            adam,
            version: 0,
        }
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor], &[u64]) {
        (&self.first, &self.second, &self.counts)
    }

    /// Restores optimizer state saved alongside a checkpoint.
    pub fn restore(&mut self, first: Vec<Tensor>, second: Vec<Tensor>, counts: Vec<u64>, version: u64) -> Result<()> {
        let ok = first.len() == self.store.len()
            && second.len() == self.store.len()
            && counts.len() == self.store.len()
            && self
                .store
                .iter()
                .zip(first.iter().zip(&second))
                .all(|((_, _, p), (m, v))| p.shape() == m.shape() && p.shape() == v.shape());
        if !ok {
            return Err(Error::Checkpoint(
                "optimizer state does not match the parameters".into(),
            ));
        }
        self.first = first;
        self.second = second;
        self.counts = counts;
        self.version = version;
        Ok(())
    }

    pub fn into_store(self) -> ParamStore {
        self.store
    }

    /// One Adam update. Parameters without a gradient keep their values and
    /// moments. Non-finite gradients reject the whole step.
    pub fn apply(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        if grads.len() != self.store.len() {
            return Err(Error::Contract(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.store.len()
            )));
        }
        if !grads.is_finite() {
            return Err(Error::Divergence {
                step: self.version,
                detail: "non-finite gradient".into(),
            });
        }
        for id in self.store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            if g.shape() != self.store.get(id).shape() {
                return Err(Error::Contract(format!(
                    "gradient shape {:?} for parameter {} of shape {:?}",
                    g.shape(),
                    self.store.name(id),
                    self.store.get(id).shape()
                )));
            }
            self.counts[i] += 1;
            let t = self.counts[i] as i32;
            let AdamConfig { beta1, beta2, eps } = self.adam;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = self.store.get_mut(id).data_mut();
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g.data()[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g.data()[k] * g.data()[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
            }
        }
        self.version += 1;
        Ok(())
    }
}
