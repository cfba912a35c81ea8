use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
///
/// The gradient buffer is optional and only allocated for tensors that take
/// part in differentiation (trainable parameters).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::config(format!("tensor shape {shape:?} has a zero extent")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    /// Allocates a zeroed gradient buffer if none is present.
    pub fn require_grad(&mut self) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Same values under a new shape with the same element count.
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    /// Slice along the leading axis, dropping it from the shape.
    pub fn index_outer(&self, i: usize) -> Tensor {
        assert!(self.shape.len() >= 2 && i < self.shape[0]);
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[i * inner..(i + 1) * inner].to_vec(),
            grad: None,
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::usage("cannot stack an empty list"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::config(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    t.shape, first.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Tensor::new(&shape, data)
    }

    /// Largest elementwise absolute difference; shapes must agree.
    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn planes_hw(&self) -> Result<(usize, usize, usize)> {
        let r = self.shape.len();
        if r < 2 {
            return Err(Error::usage(format!("expected a map of rank >= 2, got {:?}", self.shape)));
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        Ok((self.numel() / (h * w), h, w))
    }

    /// Bilinear (align-corners) resize of the last two axes.
    pub fn upsample_bilinear(&self, th: usize, tw: usize) -> Result<Tensor> {
        let (planes, h, w) = self.planes_hw()?;
        if th == 0 || tw == 0 {
            return Err(Error::usage("upsample target must be nonempty"));
        }
        let data = crate::autodiff::kernels::upsample_forward(planes, h, w, th, tw, &self.data);
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = th;
        shape[r - 1] = tw;
        Tensor::new(&shape, data)
    }

    /// Block average over `factor x factor` tiles of the last two axes.
    pub fn avg_pool(&self, factor: usize) -> Result<Tensor> {
        let (planes, h, w) = self.planes_hw()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::usage(format!("pool factor {factor} does not divide {h}x{w}")));
        }
        let data = crate::autodiff::kernels::avgpool_forward(planes, h, w, factor, &self.data);
        let mut shape = self.shape.clone();
        let r = shape.len();
        shape[r - 2] = h / factor;
        shape[r - 1] = w / factor;
        Tensor::new(&shape, data)
    }

    /// Mirrors the last axis: column `j` moves to `W - 1 - j`.
    pub fn flip_horizontal(&self) -> Tensor {
        let w = *self.shape.last().expect("nonempty shape");
        let mut data = self.data.clone();
        data.chunks_mut(w).for_each(|row| row.reverse());
        Tensor {
            shape: self.shape.clone(),
            data,
            grad: None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_length() {
        assert!(Tensor::new(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(Tensor::new(&[2, 3], vec![0.0; 5]), Err(Error::Config(_))));
        assert!(Tensor::new(&[0, 3], vec![]).is_err());
    }

    #[test]
    fn grad_has_same_length() {
        let mut t = Tensor::ones(&[2, 2]);
        assert!(t.grad().is_none());
        t.require_grad();
        assert_eq!(t.grad().unwrap().len(), 4);
    }

    #[test]
    fn stack_and_index_are_inverse() {
        let a = Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 1, 2]);
        assert_eq!(s.index_outer(1), b);
    }
}
