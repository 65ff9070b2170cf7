use std::collections::HashMap;

use rand::Rng;

use super::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Weight initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Glorot/Xavier uniform over `fan_in = rows`, `fan_out = cols`.
    XavierUniform,
    Uniform(f64),
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter gradients produced by one backward pass.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub(crate) fn with_len(n: usize) -> Self {
        Self {
            grads: vec![None; n],
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &Tensor) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }

    /// Gradient of a parameter; `None` when the loss does not reach it.
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn merge(&mut self, other: &Gradients) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }
}

/// Named trainable parameters together with their Adam state.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let zeros = || Tensor::new(value.shape().to_vec(), vec![0.0; value.len()]);
        let param = Param {
            grad: zeros()?,
            m: zeros()?,
            v: zeros()?,
            name: name.clone(),
            value,
        };
        let id = self.params.len();
        self.params.push(param);
        self.index.insert(name, id);
        Ok(ParamId(id))
    }

    pub fn add_init<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<ParamId> {
        let data = match init {
            Init::Zeros => vec![0.0; rows * cols],
            Init::Ones => vec![1.0; rows * cols],
            Init::XavierUniform => {
                let bound = (6.0 / (rows + cols).max(1) as f64).sqrt();
                (0..rows * cols)
                    .map(|_| rng.gen_range(-bound..=bound))
                    .collect()
            }
            Init::Uniform(bound) => (0..rows * cols)
                .map(|_| rng.gen_range(-bound..=bound))
                .collect(),
        };
        self.add(name, Tensor::matrix(rows, cols, data)?)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].grad
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                p.grad.add_assign(g);
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    /// One bias-corrected Adam update over every parameter, then clears
    /// the gradients.
    pub fn adam_step(&mut self, cfg: &AdamConfig) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for p in &mut self.params {
            let g = p.grad.data();
            let m = p.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = p.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let (m, v) = (p.m.data(), p.v.data());
            for ((w, mi), vi) in p.value.data_mut().iter_mut().zip(m).zip(v) {
                let m_hat = mi / c1;
                let v_hat = vi / c2;
                *w -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            p.grad.data_mut().fill(0.0);
        }
    }

    /// Replaces values from another store with identical names and shapes.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        for p in &other.params {
            let id = self.id(&p.name)?;
            let dst = &mut self.params[id.0].value;
            if dst.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    left: dst.shape().to_vec(),
                    right: p.value.shape().to_vec(),
                });
            }
            *dst = p.value.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(
            s.add("w", Tensor::scalar(2.0)),
            Err(TensorError::DuplicateParam(_))
        ));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::new();
        let id = s
            .add_init("w", 3, 4, Init::XavierUniform, &mut rng)
            .unwrap();
        let before = s.value(id).clone();
        s.adam_step(&AdamConfig::default());
        assert_eq!(s.value(id), &before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::row(&[0.5, -0.25, 2.0, 0.0])).unwrap();
        let mut g = Gradients::with_len(1);
        g.accumulate(id, &Tensor::row(&[3.0, -0.001, 1e-3, -40.0]));
        s.accumulate(&g);
        let cfg = AdamConfig::default();
        s.adam_step(&cfg);
        let expect = [0.5 - 1e-3, -0.25 + 1e-3, 2.0 - 1e-3, 0.0 + 1e-3];
        for (w, e) in s.value(id).data().iter().zip(expect) {
            assert!((w - e).abs() < 1e-7, "{w} vs {e}");
        }
        assert!(s.grad(id).data().iter().all(|&g| g == 0.0));
    }
}
