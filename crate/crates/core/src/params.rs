//! Flat registry of named learned tensors.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::error::{AfinError, Result};
use crate::tensor::Tensor;

pub type ParamId = usize;

/// How a freshly registered tensor is filled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` with `fan_in` = number of rows.
    FanInUniform,
    Zeros,
    Constant(f64),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamInfo {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamInfo {
    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

/// Learned network parameters. Values are reference counted so forward
/// passes on several threads can borrow them without copying.
#[derive(Clone, Default)]
pub struct ParameterStore {
    infos: Vec<ParamInfo>,
    values: Vec<Arc<Tensor>>,
    index: HashMap<String, ParamId>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        init: Init,
        rng: &mut impl Rng,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "parameter {name} registered twice"
        );
        let mut t = Tensor::zeros(rows, cols);
        match init {
            Init::Zeros => {}
            Init::Constant(v) => t.data_mut().iter_mut().for_each(|x| *x = v),
            Init::FanInUniform => {
                let bound = 1.0 / (rows.max(1) as f64).sqrt();
                for x in t.data_mut() {
                    *x = rng.random_range(-bound..bound);
                }
            }
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.infos.push(ParamInfo { name, rows, cols });
        self.values.push(Arc::new(t));
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id]
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id]
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id])
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id])
    }

    pub fn set_value(&mut self, id: ParamId, t: Tensor) -> Result<()> {
        let info = &self.infos[id];
        if t.shape() != (info.rows, info.cols) {
            return Err(AfinError::Shape(format!(
                "parameter {} expects {}x{}, got {}x{}",
                info.name,
                info.rows,
                info.cols,
                t.rows(),
                t.cols()
            )));
        }
        self.values[id] = Arc::new(t);
        Ok(())
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.infos.iter().map(ParamInfo::numel).sum()
    }

    /// Sum of scalar counts for every parameter whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.infos
            .iter()
            .filter(|i| i.name.starts_with(prefix))
            .map(ParamInfo::numel)
            .sum()
    }

    /// Overwrite every entry with `U(-scale, scale)`; used to move away from
    /// the structured initialization in gradient checks.
    pub fn randomize(&mut self, scale: f64, rng: &mut impl Rng) {
        for v in &mut self.values {
            for x in Arc::make_mut(v).data_mut() {
                *x = rng.random_range(-scale..scale);
            }
        }
    }

    /// Concatenation of all values in registry order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for v in &self.values {
            out.extend_from_slice(v.data());
        }
        out
    }

    pub fn zeros_like(&self) -> Vec<Tensor> {
        self.infos
            .iter()
            .map(|i| Tensor::zeros(i.rows, i.cols))
            .collect()
    }

    /// Flat index → (parameter, element).
    pub fn locate(&self, mut flat: usize) -> Option<(ParamId, usize)> {
        for (id, info) in self.infos.iter().enumerate() {
            if flat < info.numel() {
                return Some((id, flat));
            }
            flat -= info.numel();
        }
        None
    }
}

impl std::fmt::Debug for ParameterStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParameterStore")
            .field("tensors", &self.len())
            .field("numel", &self.numel())
            .finish()
    }
}

/// Gradient slots aligned with a [`ParameterStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    pub tensors: Vec<Tensor>,
}

impl GradBuffer {
    pub fn zeros(store: &ParameterStore) -> Self {
        Self {
            tensors: store.zeros_like(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradBuffer, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_scaled(b, scale);
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors
            .iter()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors.iter().map(Tensor::max_abs).fold(0.0, f64::max)
    }
}
