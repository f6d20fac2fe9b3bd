use alloc::vec::Vec;

use crate::error::{Error, Result};

/// A `T × F` matrix of frame features, row-major (one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Frames {
    num_frames: usize,
    dim: usize,
    data: Vec<f64>,
}

impl Frames {
    /// Validates shape and finiteness.
    pub fn new(num_frames: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if num_frames == 0 || dim == 0 {
            return Err(Error::Shape(alloc::format!("empty frame matrix {num_frames}x{dim}")));
        }
        if data.len() != num_frames * dim {
            return Err(Error::Shape(alloc::format!(
                "frame data has {} values, expected {}x{}",
                data.len(),
                num_frames,
                dim
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("frames"));
        }
        Ok(Self { num_frames, dim, data })
    }

    pub fn zeros(num_frames: usize, dim: usize) -> Self {
        Self { num_frames, dim, data: alloc::vec![0.0; num_frames * dim] }
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.dim)
    }

    /// Frames in reverse time order.
    pub fn reversed(&self) -> Self {
        let data = self.data.chunks(self.dim).rev().flat_map(|r| r.iter().copied()).collect();
        Self { num_frames: self.num_frames, dim: self.dim, data }
    }

    pub fn mean_squared_distance(&self, other: &Frames) -> Option<f64> {
        if self.num_frames != other.num_frames || self.dim != other.dim {
            return None;
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Some(s / self.data.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_finite_and_bad_shapes() {
        assert_eq!(Frames::new(1, 2, alloc::vec![0.0, f64::NAN]), Err(Error::NonFinite("frames")));
        assert!(matches!(Frames::new(2, 2, alloc::vec![0.0; 3]), Err(Error::Shape(_))));
        assert!(matches!(Frames::new(0, 2, alloc::vec![]), Err(Error::Shape(_))));
    }

    #[test]
    fn reverse_flips_rows() {
        let f = Frames::new(2, 2, alloc::vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(f.reversed().as_slice(), &[3.0, 4.0, 1.0, 2.0]);
        assert_eq!(f.reversed().reversed(), f);
    }
}
