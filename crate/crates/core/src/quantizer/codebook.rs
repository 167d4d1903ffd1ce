use hvsr_tensor::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Vocabulary of `K` vectors in `R^{n_z}` with per-entry usage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    vectors: Tensor,
    usage: Vec<u64>,
}

impl Codebook {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.rank() != 2 || vectors.dim(0) < 2 || vectors.dim(1) == 0 {
            return Err(Error::Shape(format!("codebook must be [K>=2, n_z>=1], got {:?}", vectors.shape())));
        }
        vectors.check_finite()?;
        let k = vectors.dim(0);
        Ok(Self { vectors, usage: vec![0; k] })
    }

    /// Entries drawn from `N(0, scale²)`.
    pub fn random(size: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Result<Self> {
        Self::new(Tensor::from_fn(vec![size, dim], |_| scale * rng.sample::<f64, _>(StandardNormal)))
    }

    pub fn size(&self) -> usize {
        self.vectors.dim(0)
    }

    pub fn dim(&self) -> usize {
        self.vectors.dim(1)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn set_vectors(&mut self, vectors: Tensor) -> Result<()> {
        if vectors.shape() != self.vectors.shape() {
            return Err(Error::Shape(format!("codebook update {:?} vs {:?}", vectors.shape(), self.vectors.shape())));
        }
        vectors.check_finite()?;
        self.vectors = vectors;
        Ok(())
    }

    pub fn lookup(&self, index: usize) -> &[f64] {
        self.vectors.row(index)
    }

    /// Index of the nearest entry in Euclidean distance; the lowest index
    /// wins ties.
    pub fn nearest(&self, z: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size() {
            let d: f64 = self.lookup(k).iter().zip(z).map(|(r, z)| (r - z) * (r - z)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Quantizes every position of an `[n_z, h, w]` map; returns indices in
    /// row-major order and the looked-up map.
    pub fn quantize_map(&self, map: &Tensor) -> Result<(Vec<u32>, Tensor)> {
        let (c, h, w) = self.check_map(map)?;
        let hw = h * w;
        let mut z = vec![0.0; c];
        let mut idx = Vec::with_capacity(hw);
        for p in 0..hw {
            for (ch, v) in z.iter_mut().enumerate() {
                *v = map.data()[ch * hw + p];
            }
            idx.push(self.nearest(&z) as u32);
        }
        let looked = self.lookup_map(&idx, h, w)?;
        Ok((idx, looked))
    }

    /// `[n_z, h, w]` map of the entries selected by `indices`.
    pub fn lookup_map(&self, indices: &[u32], h: usize, w: usize) -> Result<Tensor> {
        if indices.len() != h * w {
            return Err(Error::Shape(format!("{} indices for a {h}x{w} grid", indices.len())));
        }
        let (c, hw) = (self.dim(), h * w);
        let mut out = vec![0.0; c * hw];
        for (p, &k) in indices.iter().enumerate() {
            let k = k as usize;
            if k >= self.size() {
                return Err(Error::InvalidArgument(format!("token {k} out of range for codebook of {}", self.size())));
            }
            for (ch, v) in self.lookup(k).iter().enumerate() {
                out[ch * hw + p] = *v;
            }
        }
        Ok(Tensor::new(vec![c, h, w], out)?)
    }

    fn check_map(&self, map: &Tensor) -> Result<(usize, usize, usize)> {
        if map.rank() != 3 || map.dim(0) != self.dim() {
            return Err(Error::Shape(format!("expected [{}, h, w] map, got {:?}", self.dim(), map.shape())));
        }
        Ok((map.dim(0), map.dim(1), map.dim(2)))
    }

    pub fn record_usage(&mut self, indices: &[u32]) {
        for &k in indices {
            self.usage[k as usize] += 1;
        }
    }

    pub fn usage(&self) -> &[u64] {
        &self.usage
    }

    pub fn reset_usage(&mut self) {
        self.usage.iter_mut().for_each(|u| *u = 0);
    }

    /// Entries never selected since the last usage reset.
    pub fn dead_entries(&self) -> Vec<usize> {
        self.usage.iter().enumerate().filter(|(_, &u)| u == 0).map(|(k, _)| k).collect()
    }

    /// Overwrites entry `index`.
    pub fn reseed(&mut self, index: usize, vector: &[f64]) -> Result<()> {
        if vector.len() != self.dim() || vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("reseed vector has wrong length or non-finite values".into()));
        }
        let d = self.dim();
        self.vectors.data_mut()[index * d..(index + 1) * d].copy_from_slice(vector);
        Ok(())
    }
}
