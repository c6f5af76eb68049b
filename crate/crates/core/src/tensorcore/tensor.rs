use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` with an optional gradient buffer.
///
/// Rank-3 tensors are laid out as `[height, width, channels]`, so the
/// channel vector of a pixel is contiguous.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// A `[height, width, channels]` tensor.
pub type FeatureMap = Tensor;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn3(h: usize, w: usize, c: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(h * w * c);
        for i in 0..h {
            for j in 0..w {
                for k in 0..c {
                    data.push(f(i, j, k));
                }
            }
        }
        Self {
            shape: vec![h, w, c],
            data,
            requires_grad: false,
            grad: None,
        }
    }

    /// Marks the tensor as trainable and allocates a zeroed gradient buffer.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self.grad = Some(vec![0.0; self.data.len()]);
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1 && self.shape.iter().all(|&d| d == 1)
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub(crate) fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&mut [f64]>) {
        (&mut self.data, self.grad.as_deref_mut())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    /// Returns `(h, w, c)` for a rank-3 tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [h, w, c] => Ok((h, w, c)),
            _ => Err(Error::shape(format!("expected rank 3, got {:?}", self.shape))),
        }
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f64 {
        let (_, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        self.data[(i * w + j) * c + k]
    }

    /// Channel vector at pixel `(i, j)` of a rank-3 tensor.
    pub fn pixel(&self, i: usize, j: usize) -> &[f64] {
        let (w, c) = (self.shape[1], self.shape[2]);
        &self.data[(i * w + j) * c..][..c]
    }

    /// Copies channels `[start, end)` of a rank-3 tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Result<Tensor> {
        let (h, w, c) = self.dims3()?;
        if start > end || end > c {
            return Err(Error::shape(format!("channel range {start}..{end} outside 0..{c}")));
        }
        let mut data = Vec::with_capacity(h * w * (end - start));
        for px in self.data.chunks_exact(c.max(1)).take(h * w) {
            data.extend_from_slice(&px[start..end]);
        }
        if c == 0 {
            data.clear();
        }
        Tensor::new(vec![h, w, end - start], data)
    }
}

/// Rank-2 grid of {0, 1}.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "mask {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![false; height * width],
        }
    }

    pub fn ones(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.data[i * self.width + j] = v;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn all(&self) -> bool {
        self.data.iter().all(|&b| b)
    }

    pub fn complement(&self) -> BinaryMask {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&b| !b).collect(),
        }
    }

    fn check_same(&self, other: &BinaryMask) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::shape(format!(
                "mask shapes differ: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(())
    }

    /// `self ∧ ¬other`
    pub fn subtract(&self, other: &BinaryMask) -> Result<BinaryMask> {
        self.check_same(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a && !b).collect(),
        })
    }

    pub fn intersects(&self, other: &BinaryMask) -> Result<bool> {
        self.check_same(other)?;
        Ok(self.data.iter().zip(&other.data).any(|(&a, &b)| a && b))
    }

    /// Nearest-neighbour resize to an arbitrary grid; each target pixel reads
    /// the source pixel under its centre.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMask {
        let src_row = |i: usize| ((2 * i + 1) * self.height) / (2 * height);
        let src_col = |j: usize| ((2 * j + 1) * self.width) / (2 * width);
        BinaryMask::from_fn(height, width, |i, j| self.get(src_row(i), src_col(j)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_lengths() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(BinaryMask::new(2, 2, vec![true; 3]).is_err());
    }

    #[test]
    fn zero_grad_clears_buffer() {
        let mut t = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap().with_grad();
        t.grad_mut().unwrap().copy_from_slice(&[4.0, 5.0, 6.0]);
        t.zero_grad();
        assert!(t.grad().unwrap().iter().all(|&g| g == 0.0));
        assert_eq!(t.grad().unwrap().len(), t.numel());
    }

    #[test]
    fn slice_channels_picks_columns() {
        let t = Tensor::from_fn3(2, 2, 3, |i, j, k| (i * 100 + j * 10 + k) as f64);
        let s = t.slice_channels(1, 3).unwrap();
        assert_eq!(s.shape(), &[2, 2, 2]);
        assert_eq!(s.at3(1, 0, 0), 101.0);
        assert_eq!(s.at3(1, 1, 1), 112.0);
    }

    #[test]
    fn subtract_and_complement() {
        let a = BinaryMask::from_fn(2, 2, |_, _| true);
        let b = BinaryMask::from_fn(2, 2, |i, _| i == 0);
        let d = a.subtract(&b).unwrap();
        assert_eq!(d, b.complement());
        assert!(!d.intersects(&b).unwrap());
    }
}
