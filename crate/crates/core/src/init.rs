//! Seeded parameter registration shared by every layer constructor.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{ParamId, ParamStore, Result, RngState, Scalar, Tensor};

/// Registers named parameters with seeded initial values.
pub struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: RngState,
    prefix: String,
}

impl<'a, T: Scalar> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: RngState) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Runs `f` with `name.` appended to the parameter prefix.
    pub fn scope<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        let saved = self.prefix.clone();
        self.prefix = format!("{saved}{name}.");
        let out = f(self);
        self.prefix = saved;
        out
    }

    pub fn add(&mut self, name: &str, value: Tensor<T>) -> Result<ParamId> {
        self.store.add(format!("{}{name}", self.prefix), value)
    }

    /// Glorot-uniform `rows×cols` matrix.
    pub fn xavier(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| T::from_f64(self.rng.gen_range(-a..a)))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let dist = Normal::new(0.0, std).expect("positive std");
        let data = (0..rows * cols)
            .map(|_| T::from_f64(dist.sample(&mut self.rng)))
            .collect();
        self.add(name, Tensor::matrix(rows, cols, data))
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(rows, cols, T::from_f64(v)))
    }

    pub fn identity(&mut self, name: &str, n: usize) -> Result<ParamId> {
        let mut t = Tensor::zeros(n, n);
        for i in 0..n {
            t.row_mut(i)[i] = T::one();
        }
        self.add(name, t)
    }
}
