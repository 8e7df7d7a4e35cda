//! Flat parameter storage.
//!
//! All learnable parameters of a network live in one flat vector; layers
//! hold `(offset, len)` handles into it. The optimizer, EMA tracking,
//! serialization, and finite-difference checks all operate on the flat
//! vector directly.

use ndarray::NdFloat;
use rand::Rng;

/// Element type of the network stack. f32 for production weights, f64 for
/// finite-difference gradient verification.
pub trait Scalar: NdFloat + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64_(self) -> f64;
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// Uniform in `(-bound, bound)`.
    fn sample_uniform_sym<R: Rng + ?Sized>(rng: &mut R, bound: Self) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64_(self) -> f64 {
        self as f64
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
    fn sample_uniform_sym<R: Rng + ?Sized>(rng: &mut R, bound: Self) -> Self {
        rng.gen_range(-bound..bound)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64_(self) -> f64 {
        self
    }
    fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample(rand_distr::StandardNormal)
    }
    fn sample_uniform_sym<R: Rng + ?Sized>(rng: &mut R, bound: Self) -> Self {
        rng.gen_range(-bound..bound)
    }
}

/// Handle to a contiguous parameter block.
#[derive(Debug, Clone, Copy)]
pub struct ParamId {
    pub offset: usize,
    pub len: usize,
}

/// Allocates parameter blocks during network construction. The allocation
/// order is part of the checkpoint format.
#[derive(Debug, Default)]
pub struct ParamBuilder {
    next: usize,
}

impl ParamBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn alloc(&mut self, len: usize) -> ParamId {
        let id = ParamId { offset: self.next, len };
        self.next += len;
        id
    }

    pub fn total(&self) -> usize {
        self.next
    }
}

/// Flat storage for parameters or their gradients.
#[derive(Debug, Clone)]
pub struct ParamStore<F> {
    data: Vec<F>,
}

impl<F: Scalar> ParamStore<F> {
    pub fn zeros(len: usize) -> Self {
        ParamStore { data: vec![F::zero(); len] }
    }

    pub fn from_vec(data: Vec<F>) -> Self {
        ParamStore { data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &[F] {
        &self.data[id.offset..id.offset + id.len]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [F] {
        &mut self.data[id.offset..id.offset + id.len]
    }

    pub fn as_slice(&self) -> &[F] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn fill_zero(&mut self) {
        self.data.fill(F::zero());
    }

    pub fn to_f32_vec(&self) -> Vec<f32> {
        self.data.iter().map(|v| v.to_f64_() as f32).collect()
    }
}

/// Fills a block with `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
pub fn init_uniform_fan_in<F: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<F>,
    id: ParamId,
    fan_in: usize,
    rng: &mut R,
) {
    let bound = F::from_f64((1.0 / fan_in as f64).sqrt());
    for v in store.get_mut(id) {
        *v = F::sample_uniform_sym(rng, bound);
    }
}

pub fn init_constant<F: Scalar>(store: &mut ParamStore<F>, id: ParamId, value: F) {
    for v in store.get_mut(id) {
        *v = value;
    }
}
