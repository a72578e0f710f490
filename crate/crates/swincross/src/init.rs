//! Seeded parameter construction. Parameters are registered in creation
//! order, which fixes both the enumeration order and the RNG consumption
//! sequence, so a given seed always yields bitwise identical weights.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{DType, Parameter, Storage, Tensor};

pub struct ParamBuilder {
    rng: ChaCha8Rng,
    dtype: DType,
    params: Vec<Parameter>,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> ParamBuilder {
        ParamBuilder {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            params: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn register(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let storage = match self.dtype {
            DType::F32 => Storage::F32(data.iter().map(|&v| v as f32).collect()),
            DType::F64 => Storage::F64(data),
        };
        let tensor = Tensor::leaf(shape, storage)?;
        self.params.push(Parameter::new(name, tensor.clone()));
        Ok(tensor)
    }

    /// Normal(0, std) resampled into [-2, 2].
    pub fn trunc_normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be positive");
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v: f64 = dist.sample(&mut self.rng);
            while !(-2.0..=2.0).contains(&v) {
                v = dist.sample(&mut self.rng);
            }
            data.push(v);
        }
        self.register(name, shape, data)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![0.0; n])
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.register(name, shape, vec![1.0; n])
    }

    pub fn into_params(self) -> Vec<Parameter> {
        self.params
    }
}
