use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use super::matrix::Tensor2;

static NEXT_STORE: AtomicU64 = AtomicU64::new(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Tensor2,
    grad: Tensor2,
    m: Tensor2,
    v: Tensor2,
}

/// Named parameters with gradient accumulators and Adam moments.
///
/// Clones share the identity (`uid`) of the original, so a graph built against
/// a clone can deliver gradients into either.
#[derive(Debug, Clone)]
pub struct ParamStore {
    uid: u64,
    slots: Vec<Slot>,
    step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// Slots left untouched by an optimizer step because their gradient was not finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepReport {
    pub skipped: Vec<String>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self { uid: NEXT_STORE.fetch_add(1, Ordering::Relaxed), slots: Vec::new(), step: 0 }
    }

    pub fn uid(&self) -> u64 {
        self.uid
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor2) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter name {name}");
        let (r, c) = value.shape();
        self.slots.push(Slot {
            name,
            value,
            grad: Tensor2::zeros(r, c),
            m: Tensor2::zeros(r, c),
            v: Tensor2::zeros(r, c),
        });
        ParamId(self.slots.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor2 {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.slots[id.0].value
    }

    pub fn set_value(&mut self, id: ParamId, value: Tensor2) {
        let slot = &mut self.slots[id.0];
        assert_eq!(slot.value.shape(), value.shape(), "set_value shape for {}", slot.name);
        slot.value = value;
    }

    pub fn grad(&self, id: ParamId) -> &Tensor2 {
        &self.slots[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.slots[id.0].grad
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn accumulate(&mut self, id: ParamId, grad: &Tensor2) {
        self.slots[id.0].grad.add_assign(grad);
    }

    /// Adds a batch of gradients in the given order.
    pub fn accumulate_all<'a>(&mut self, grads: impl IntoIterator<Item = &'a (ParamId, Tensor2)>) {
        for (id, g) in grads {
            self.accumulate(*id, g);
        }
    }

    pub fn zero_grad(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().fill(0.0);
        }
    }

    pub fn scale_grads(&mut self, factor: f64) {
        for s in &mut self.slots {
            for g in s.grad.data_mut() {
                *g *= factor;
            }
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.slots.iter().map(|s| s.grad.data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt()
    }

    /// One Adam update over every slot, then clears gradients. A slot whose
    /// gradient has a non-finite entry keeps its value and moments.
    pub fn adam_step(&mut self, cfg: &AdamConfig) -> StepReport {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let mut report = StepReport::default();
        for s in &mut self.slots {
            if !s.grad.is_finite() {
                log::warn!("adam: skipping {} (non-finite gradient)", s.name);
                report.skipped.push(s.name.clone());
                s.grad.data_mut().fill(0.0);
                continue;
            }
            let g = s.grad.data();
            let m = s.m.data_mut();
            for (mi, gi) in m.iter_mut().zip(g) {
                *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            }
            let v = s.v.data_mut();
            for (vi, gi) in v.iter_mut().zip(g) {
                *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            }
            let m = s.m.data();
            let v = s.v.data();
            for ((w, mi), vi) in s.value.data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
            s.grad.data_mut().fill(0.0);
        }
        report
    }

    /// Clears Adam moments and the step counter, keeping values.
    pub fn reset_optimizer(&mut self) {
        self.step = 0;
        for s in &mut self.slots {
            s.m.data_mut().fill(0.0);
            s.v.data_mut().fill(0.0);
        }
    }

    /// Plain gradient descent, then clears gradients.
    pub fn sgd_step(&mut self, lr: f64) -> StepReport {
        self.step += 1;
        let mut report = StepReport::default();
        for s in &mut self.slots {
            if !s.grad.is_finite() {
                report.skipped.push(s.name.clone());
            } else {
                let g = s.grad.clone();
                s.value.axpy(-lr, &g);
            }
            s.grad.data_mut().fill(0.0);
        }
        report
    }

    /// Copies values (not optimizer state) from `other` for every slot name both share.
    pub fn load_values_from(&mut self, other: &ParamStore) {
        for s in &mut self.slots {
            if let Some(id) = other.find(&s.name) {
                let v = other.value(id);
                assert_eq!(v.shape(), s.value.shape(), "load_values_from: shape of {}", s.name);
                s.value = v.clone();
            }
        }
    }

    pub(crate) fn entries(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.slots.iter().map(|s| (s.name.as_str(), &s.value))
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| s.value.is_finite())
    }
}
