//! Dense `f64` tensors that can participate in reverse-mode differentiation.
//!
//! A [`Tensor`] is a cheaply clonable handle to shared storage. Gradients
//! accumulate into the tensor's own `grad` buffer when a tape performing
//! [`crate::tape::Tape::backward`] has registered it as a trainable leaf.
//! Handles are not `Send`: a tensor and any tape using it stay on one thread.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Result, UniregError};

struct TensorData {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Shared dense array with optional gradient buffer.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<RefCell<TensorData>>,
}

fn check_finite(values: &[f64]) -> Result<()> {
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(UniregError::Domain(format!("non-finite tensor value {v}")));
    }
    Ok(())
}

impl Tensor {
    /// Constant tensor (no gradient tracking).
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let len: usize = shape.iter().product();
        if len != values.len() {
            return Err(UniregError::Dimension(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                len,
                values.len()
            )));
        }
        check_finite(&values)?;
        Ok(Tensor {
            inner: Rc::new(RefCell::new(TensorData { shape, values, requires_grad: false, grad: None })),
        })
    }

    /// Trainable tensor: gradients accumulate into it on backward passes.
    pub fn param(shape: Vec<usize>, values: Vec<f64>) -> Result<Tensor> {
        let t = Tensor::new(shape, values)?;
        t.inner.borrow_mut().requires_grad = true;
        Ok(t)
    }

    pub fn zeros(shape: Vec<usize>) -> Tensor {
        let len = shape.iter().product();
        Tensor::new(shape, vec![0.0; len]).expect("zeros is always well-formed")
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: f64) -> Result<Tensor> {
        Tensor::new(vec![], vec![v])
    }

    /// Row-major matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Tensor> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(UniregError::Dimension("ragged rows".into()));
        }
        Tensor::new(vec![n, d], rows.iter().flatten().copied().collect())
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// The single value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        let data = self.inner.borrow();
        if data.values.len() != 1 {
            return Err(UniregError::Contract(format!(
                "item() needs a scalar, shape is {:?}",
                data.shape
            )));
        }
        Ok(data.values[0])
    }

    pub fn values(&self) -> Vec<f64> {
        self.inner.borrow().values.clone()
    }

    pub fn with_values<R>(&self, f: impl FnOnce(&[f64]) -> R) -> R {
        f(&self.inner.borrow().values)
    }

    pub fn with_values_mut<R>(&self, f: impl FnOnce(&mut [f64]) -> R) -> R {
        f(&mut self.inner.borrow_mut().values)
    }

    /// Overwrite all values (shape unchanged).
    pub fn set_values(&self, values: &[f64]) -> Result<()> {
        check_finite(values)?;
        let mut data = self.inner.borrow_mut();
        if data.values.len() != values.len() {
            return Err(UniregError::Dimension(format!(
                "set_values length {} vs {}",
                values.len(),
                data.values.len()
            )));
        }
        data.values.copy_from_slice(values);
        Ok(())
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.borrow().grad.clone()
    }

    pub fn with_grad<R>(&self, f: impl FnOnce(Option<&[f64]>) -> R) -> R {
        f(self.inner.borrow().grad.as_deref())
    }

    /// Clear the gradient buffer.
    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Mutable values together with the current gradient, under one borrow.
    pub fn with_values_and_grad<R>(&self, f: impl FnOnce(&mut [f64], Option<&[f64]>) -> R) -> R {
        let mut data = self.inner.borrow_mut();
        let TensorData { values, grad, .. } = &mut *data;
        f(values, grad.as_deref())
    }

    pub(crate) fn accumulate_grad(&self, delta: &[f64]) {
        let mut data = self.inner.borrow_mut();
        debug_assert_eq!(data.values.len(), delta.len());
        match &mut data.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += d),
            None => data.grad = Some(delta.to_vec()),
        }
    }

    /// Identity of the shared storage; used for leaf deduplication on tapes
    /// and identity checks in parameter stores.
    pub(crate) fn storage_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as *const u8 as usize
    }

    /// True when both handles share storage.
    pub fn same_storage(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let data = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &data.shape)
            .field("requires_grad", &data.requires_grad)
            .finish()
    }
}
