//! Dense (time, particle, component) storage.

use serde::{Deserialize, Serialize};

/// Row-major array indexed by time knot, particle and component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    times: usize,
    particles: usize,
    width: usize,
    data: Vec<f64>,
}

impl Cube {
    pub fn zeros(times: usize, particles: usize, width: usize) -> Self {
        Cube { times, particles, width, data: vec![0.0; times * particles * width] }
    }

    pub fn from_vec(times: usize, particles: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), times * particles * width, "cube data length mismatch");
        Cube { times, particles, width, data }
    }

    pub fn times(&self) -> usize {
        self.times
    }
    pub fn particles(&self) -> usize {
        self.particles
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// All particles at knot `k`, flattened.
    pub fn slab(&self, k: usize) -> &[f64] {
        let s = self.particles * self.width;
        &self.data[k * s..(k + 1) * s]
    }

    pub fn slab_mut(&mut self, k: usize) -> &mut [f64] {
        let s = self.particles * self.width;
        &mut self.data[k * s..(k + 1) * s]
    }

    pub fn at(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.particles + i) * self.width;
        &self.data[o..o + self.width]
    }

    pub fn at_mut(&mut self, k: usize, i: usize) -> &mut [f64] {
        let o = (k * self.particles + i) * self.width;
        &mut self.data[o..o + self.width]
    }

    /// Mutable view of slab `k` alongside a read-only view of slab `k - 1` or `k + 1`.
    pub fn slab_pair_mut(&mut self, read: usize, write: usize) -> (&[f64], &mut [f64]) {
        assert_ne!(read, write);
        let s = self.particles * self.width;
        if read < write {
            let (a, b) = self.data.split_at_mut(write * s);
            (&a[read * s..(read + 1) * s], &mut b[..s])
        } else {
            let (a, b) = self.data.split_at_mut(read * s);
            (&b[..s], &mut a[write * s..(write + 1) * s])
        }
    }

    /// `self += alpha * (other - self)`.
    pub fn relax_towards(&mut self, other: &Cube, alpha: f64) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * (b - *a);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexing_is_row_major() {
        let mut c = Cube::zeros(2, 3, 2);
        c.at_mut(1, 2)[1] = 5.0;
        assert_eq!(c.data()[11], 5.0);
        assert_eq!(c.slab(1)[5], 5.0);
    }

    #[test]
    fn slab_pair_borrows_disjoint_rows() {
        let mut c = Cube::from_vec(3, 1, 1, vec![1.0, 2.0, 3.0]);
        let (r, w) = c.slab_pair_mut(2, 1);
        w[0] = r[0] * 10.0;
        assert_eq!(c.data(), &[1.0, 30.0, 3.0]);
    }
}
