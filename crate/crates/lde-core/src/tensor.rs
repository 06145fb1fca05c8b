//! Dense row-major f64 tensors and the flat binary dump format.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{LdeError, Result};

/// Dense N-dimensional array, row-major, always 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(LdeError::shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; numel] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    /// Identity matrix of side `d`.
    pub fn eye(d: usize) -> Self {
        let mut t = Tensor::zeros(&[d, d]);
        for i in 0..d {
            t.data[i * d + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        let mut off = 0;
        for (i, &ix) in index.iter().enumerate() {
            debug_assert!(ix < self.shape[i], "index {:?} out of shape {:?}", index, self.shape);
            off = off * self.shape[i] + ix;
        }
        off
    }

    /// Same data, new shape; element count must match.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(LdeError::shape(format!(
                "cannot reshape {:?} ({} elements) to {:?}",
                self.shape,
                self.data.len(),
                shape
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Writes the flat binary dump: rank u32 LE, extents u32 LE each, then
    /// the data as f64 LE.
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &e in &self.shape {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Tensor> {
        let mut u32buf = [0u8; 4];
        r.read_exact(&mut u32buf).map_err(|e| LdeError::data(format!("tensor dump: {e}")))?;
        let rank = u32::from_le_bytes(u32buf) as usize;
        if rank > 8 {
            return Err(LdeError::data(format!("tensor dump: implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut u32buf).map_err(|e| LdeError::data(format!("tensor dump: {e}")))?;
            shape.push(u32::from_le_bytes(u32buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0f64; numel];
        let mut f64buf = [0u8; 8];
        for v in data.iter_mut() {
            r.read_exact(&mut f64buf).map_err(|e| LdeError::data(format!("tensor dump: {e}")))?;
            *v = f64::from_le_bytes(f64buf);
        }
        Tensor::new(shape, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| LdeError::io(path.display().to_string(), e))?;
        self.write_to(&mut f).map_err(|e| LdeError::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        let mut f = std::fs::File::open(path).map_err(|e| LdeError::io(path.display().to_string(), e))?;
        Tensor::read_from(&mut f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains('5'), "{msg}");
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(vec![2, 3], (0..6).map(|v| v as f64).collect()).unwrap();
        assert_eq!(t.at(&[0, 0]), 0.0);
        assert_eq!(t.at(&[0, 2]), 2.0);
        assert_eq!(t.at(&[1, 0]), 3.0);
        assert_eq!(t.at(&[1, 2]), 5.0);
    }

    #[test]
    fn dump_round_trip() {
        let t = Tensor::new(vec![2, 2, 2], vec![1.0, -2.5, 3.0, 0.0, 1e-300, 7.25, -0.0, 9.0]).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        // header: rank + 3 extents, then 8 f64s
        assert_eq!(buf.len(), 4 + 3 * 4 + 8 * 8);
        let back = Tensor::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn dump_rejects_truncated_stream() {
        let t = Tensor::zeros(&[4]);
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(Tensor::read_from(&mut buf.as_slice()).is_err());
    }
}
