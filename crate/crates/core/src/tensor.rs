//! Dense 3-D tensors.

use crate::error::{Error, Result};
use crate::scalar::{to_f64, Scalar};
use crate::shape::TensorShape;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    pub shape: TensorShape,
    pub data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: TensorShape, data: Vec<S>) -> Result<Self> {
        if shape.elems() != data.len() as u64 {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} does not match shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: TensorShape) -> Self {
        Tensor { shape, data: vec![S::zero(); shape.elems() as usize] }
    }

    pub fn from_fn(shape: TensorShape, mut f: impl FnMut(usize, usize, usize) -> S) -> Self {
        let mut data = Vec::with_capacity(shape.elems() as usize);
        for h in 0..shape.h {
            for w in 0..shape.w {
                for d in 0..shape.d {
                    data.push(f(h, w, d));
                }
            }
        }
        Tensor { shape, data }
    }

    pub fn at(&self, h: usize, w: usize, d: usize) -> S {
        self.data[self.shape.idx(h, w, d)]
    }

    pub fn set(&mut self, h: usize, w: usize, d: usize, v: S) {
        let i = self.shape.idx(h, w, d);
        self.data[i] = v;
    }

    /// Reinterpret as a 1x1xN vector. Row-major (h, w, d) flattening keeps
    /// the element order unchanged, so this is a pure shape change.
    pub fn flattened(&self) -> Tensor<S> {
        let n = self.data.len();
        Tensor {
            shape: TensorShape { h: 1, w: 1, d: n },
            data: self.data.clone(),
        }
    }

    /// Concatenate along the depth axis. All inputs must agree on h and w.
    pub fn concat_depth(parts: &[&Tensor<S>]) -> Result<Tensor<S>> {
        let first = parts.first().ok_or_else(|| {
            Error::ShapeMismatch("depth concat of zero tensors".to_string())
        })?;
        let (h, w) = (first.shape.h, first.shape.w);
        let mut d_total = 0;
        for p in parts {
            if p.shape.h != h || p.shape.w != w {
                return Err(Error::ShapeMismatch(format!(
                    "depth concat of {} with {}",
                    first.shape, p.shape
                )));
            }
            d_total += p.shape.d;
        }
        let shape = TensorShape::new(h, w, d_total)?;
        let mut out = Tensor::zeros(shape);
        for hh in 0..h {
            for ww in 0..w {
                let mut d_off = 0;
                for p in parts {
                    for dd in 0..p.shape.d {
                        out.set(hh, ww, d_off + dd, p.at(hh, ww, dd));
                    }
                    d_off += p.shape.d;
                }
            }
        }
        Ok(out)
    }
}

/// Largest relative error between two tensors, with an absolute floor of 1 on
/// the denominator so values near zero compare on an absolute scale.
pub fn max_rel_err<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> f64 {
    assert_eq!(a.shape, b.shape, "comparing tensors of different shapes");
    let mut worst = 0.0f64;
    for (x, y) in a.data.iter().zip(b.data.iter()) {
        worst = worst.max(rel_err(to_f64(*x), to_f64(*y)));
    }
    worst
}

pub fn rel_err(x: f64, y: f64) -> f64 {
    (x - y).abs() / x.abs().max(y.abs()).max(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flatten_preserves_element_order() {
        let shape = TensorShape::new(2, 2, 3).unwrap();
        let t = Tensor::from_fn(shape, |h, w, d| (h * 100 + w * 10 + d) as f64);
        let f = t.flattened();
        assert_eq!(f.shape, TensorShape { h: 1, w: 1, d: 12 });
        assert_eq!(f.data, t.data);
    }

    #[test]
    fn concat_depth_interleaves_per_position() {
        let a = Tensor::from_fn(TensorShape::new(1, 2, 2).unwrap(), |_, w, d| (w * 2 + d) as f64);
        let b = Tensor::from_fn(TensorShape::new(1, 2, 1).unwrap(), |_, w, _| 100.0 + w as f64);
        let c = Tensor::concat_depth(&[&a, &b]).unwrap();
        assert_eq!(c.shape, TensorShape { h: 1, w: 2, d: 3 });
        assert_eq!(c.data, vec![0.0, 1.0, 100.0, 2.0, 3.0, 101.0]);
    }

    #[test]
    fn rel_err_uses_absolute_floor_near_zero() {
        assert!(rel_err(1e-12, 0.0) < 1e-9);
        assert!(rel_err(2.0, 1.0) > 0.4);
    }
}
