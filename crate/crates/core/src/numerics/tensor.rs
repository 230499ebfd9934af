use super::kernels::Real;
use crate::error::{Error, Result};

/// Dense row-major array with an optional gradient slot of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Config(format!("tensor extents must be positive, got {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![S::zero(); shape.iter().product()],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> S) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of the trailing axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    pub fn row(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    /// Adds `scale * g` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[S], scale: S) {
        debug_assert_eq!(g.len(), self.data.len());
        let slot = self.grad.get_or_insert_with(|| vec![S::zero(); g.len()]);
        for (s, &v) in slot.iter_mut().zip(g) {
            *s += scale * v;
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn take_grad(&mut self) -> Option<Vec<S>> {
        self.grad.take()
    }

    /// Fails on the first NaN or infinity in data or gradient.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        let bad = self.data.iter().any(|v| !v.is_finite())
            || self.grad.iter().flatten().any(|v| !v.is_finite());
        if bad {
            return Err(Error::NonFinite(what.to_string()));
        }
        Ok(())
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::from(*v).unwrap()).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|v| T::from(*v).unwrap()).collect()),
        }
    }

    /// Bitwise equality of shape and data (gradients ignored).
    pub fn bit_eq(&self, other: &Self) -> bool
    where
        S: ToBits,
    {
        self.shape == other.shape
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits_u64() == b.to_bits_u64())
    }
}

/// Raw bit access for bitwise comparisons and digests.
pub trait ToBits: Copy {
    fn to_bits_u64(self) -> u64;
    fn le_bytes(self, out: &mut Vec<u8>);
}

impl ToBits for f32 {
    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}

impl ToBits for f64 {
    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
    fn le_bytes(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
}
