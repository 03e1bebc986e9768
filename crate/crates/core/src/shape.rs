//! Tensor shapes and axis-aligned regions.
//!
//! Every tensor in the pipeline is a dense 3-D volume laid out row-major in
//! (height, width, depth) order: element (h, w, d) lives at flat index
//! `(h * width + w) * depth + d`. Batch size is always 1.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorShape {
    pub h: usize,
    pub w: usize,
    pub d: usize,
}

impl TensorShape {
    pub fn new(h: usize, w: usize, d: usize) -> Result<Self> {
        let s = TensorShape { h, w, d };
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::ShapeMismatch(format!("zero-sized shape {s}")));
        }
        // Reject volumes whose element count does not fit in u64 arithmetic.
        (h as u64)
            .checked_mul(w as u64)
            .and_then(|p| p.checked_mul(d as u64))
            .ok_or_else(|| Error::Overflow(format!("shape {h}x{w}x{d} element count")))?;
        Ok(s)
    }

    pub fn elems(&self) -> u64 {
        self.h as u64 * self.w as u64 * self.d as u64
    }

    pub fn idx(&self, h: usize, w: usize, d: usize) -> usize {
        debug_assert!(h < self.h && w < self.w && d < self.d);
        (h * self.w + w) * self.d + d
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.h, self.w, self.d)
    }
}

/// Half-open box `[h0, h0+h_len) x [w0, w0+w_len) x [d0, d0+d_len)` inside a
/// tensor. Used for slice working sets, strided reads and strided writes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Region {
    pub h0: usize,
    pub h_len: usize,
    pub w0: usize,
    pub w_len: usize,
    pub d0: usize,
    pub d_len: usize,
}

impl Region {
    pub fn full(shape: TensorShape) -> Self {
        Region { h0: 0, h_len: shape.h, w0: 0, w_len: shape.w, d0: 0, d_len: shape.d }
    }

    pub fn elems(&self) -> u64 {
        self.h_len as u64 * self.w_len as u64 * self.d_len as u64
    }

    pub fn shape(&self) -> Result<TensorShape> {
        TensorShape::new(self.h_len, self.w_len, self.d_len)
    }

    pub fn contains(&self, other: &Region) -> bool {
        other.h0 >= self.h0
            && other.h0 + other.h_len <= self.h0 + self.h_len
            && other.w0 >= self.w0
            && other.w0 + other.w_len <= self.w0 + self.w_len
            && other.d0 >= self.d0
            && other.d0 + other.d_len <= self.d0 + self.d_len
    }
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "[{}+{}, {}+{}, {}+{}]",
            self.h0, self.h_len, self.w0, self.w_len, self.d0, self.d_len
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_major_layout() {
        let s = TensorShape::new(2, 3, 4).unwrap();
        assert_eq!(s.idx(0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 3), 3);
        assert_eq!(s.idx(0, 1, 0), 4);
        assert_eq!(s.idx(1, 0, 0), 12);
        assert_eq!(s.idx(1, 2, 3), 23);
        assert_eq!(s.elems(), 24);
    }

    #[test]
    fn zero_dim_rejected() {
        assert!(TensorShape::new(0, 1, 1).is_err());
    }

    #[test]
    fn region_containment() {
        let outer = Region { h0: 0, h_len: 8, w0: 0, w_len: 8, d0: 0, d_len: 16 };
        let inner = Region { h0: 2, h_len: 3, w0: 0, w_len: 8, d0: 4, d_len: 4 };
        assert!(outer.contains(&inner));
        assert!(!inner.contains(&outer));
    }
}
