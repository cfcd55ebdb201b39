use crate::element::Element;
use crate::error::{Result, TensorError};

/// Dense row-major tensor.
///
/// `grad` is only populated for tensors that take part in optimisation
/// (parameters); intermediate values live on a [`Tape`](crate::Tape).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T: Element = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    pub requires_grad: bool,
    pub grad: Option<Vec<T>>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Length {
                shape: shape.to_vec(),
                len: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Self::new(shape, vec![T::zero(); n])
    }

    pub fn filled(shape: &[usize], value: T) -> Result<Self> {
        check_shape(shape)?;
        let n = shape.iter().product();
        Self::new(shape, vec![value; n])
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// 1-D tensor over `data`; panics on an empty vector.
    pub fn vector(data: Vec<T>) -> Self {
        let n = data.len();
        Self::new(&[n], data).expect("vector must be non-empty")
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(TensorError::NotScalar(self.shape.clone()))
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::Shape {
                op: "reshape",
                left: self.shape,
                right: shape.to_vec(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// `(rows, cols)` of a rank-2 tensor; rank-1 tensors read as one row.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [r, c] => Ok((*r, *c)),
            _ => Err(TensorError::Invalid(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let cols = *self.shape.last().unwrap();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn at(&self, index: &[usize]) -> Result<T> {
        if index.len() != self.shape.len() {
            return Err(TensorError::Invalid(format!(
                "index {index:?} does not match shape {:?}",
                self.shape
            )));
        }
        let mut flat = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            if i >= d {
                return Err(TensorError::Index {
                    op: "at",
                    index: i,
                    len: d,
                });
            }
            flat = flat * d + i;
        }
        Ok(self.data[flat])
    }

    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = T::zero()),
            None => self.grad = Some(vec![T::zero(); self.data.len()]),
        }
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[T]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(TensorError::Length {
                shape: self.shape.clone(),
                len: g.len(),
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![T::zero(); g.len()]);
        for (a, &b) in grad.iter_mut().zip(g) {
            *a = *a + b;
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Elementwise conversion to another element type (gradient dropped).
    pub fn cast<U: Element>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.to_f64().unwrap()))
                .collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }

    /// Index of the largest element; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &x) in self.data.iter().enumerate() {
            if x > self.data[best] {
                best = i;
            }
        }
        best
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.contains(&0) {
        return Err(TensorError::EmptyDim(shape.to_vec()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch() {
        assert!(matches!(
            Tensor::<f32>::new(&[2, 3], vec![0.0; 5]),
            Err(TensorError::Length { .. })
        ));
    }

    #[test]
    fn rejects_zero_dims() {
        assert!(Tensor::<f32>::zeros(&[3, 0]).is_err());
        assert!(Tensor::<f32>::zeros(&[]).is_err());
    }

    #[test]
    fn indexing_is_row_major() {
        let t = Tensor::new(&[2, 3], vec![0., 1., 2., 3., 4., 5.]).unwrap();
        assert_eq!(t.at(&[1, 2]).unwrap(), 5.0);
        assert_eq!(t.row(1), &[3., 4., 5.]);
        assert!(t.at(&[2, 0]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        assert_eq!(Tensor::vector(vec![0.3f32, 0.7, 0.7]).argmax(), 1);
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::<f32>::zeros(&[2]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(t.grad.as_deref(), Some(&[2.0, 4.0][..]));
        t.zero_grad();
        assert_eq!(t.grad.as_deref(), Some(&[0.0, 0.0][..]));
    }
}
