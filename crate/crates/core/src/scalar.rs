//! Float abstraction and a minimal row-major matrix.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Element type for all model arithmetic: `f32` by default, `f64` for
/// verification.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// `+1` for non-negative values, `-1` otherwise. Used by the epsilon rule
    /// so that a zero denominator is pushed away from zero.
    fn sign_pos(self) -> Self {
        if self >= Self::zero() {
            Self::one()
        } else {
            -Self::one()
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Clone, PartialEq)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Debug> Debug for Mat<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Mat({}x{})", self.rows, self.cols)
    }
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec shape");
        Self { rows, cols, data }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    pub fn cast<U: Scalar>(&self) -> Mat<U> {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| U::lit(x.as_f64())).collect(),
        }
    }

    /// `self (n×k) · rhs (k×m)`.
    pub fn matmul(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            let a = self.row(r);
            let o = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
            for (k, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                for (ov, &bv) in o.iter_mut().zip(rhs.row(k)) {
                    *ov += av * bv;
                }
            }
        }
        out
    }

    /// `self (n×k) · rhsᵀ` where `rhs` is `m×k`.
    pub fn matmul_t(&self, rhs: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, rhs.cols, "matmul_t inner dimension");
        let mut out = Mat::zeros(self.rows, rhs.rows);
        for r in 0..self.rows {
            let a = self.row(r);
            for c in 0..rhs.rows {
                out.data[r * rhs.rows + c] = dot(a, rhs.row(c));
            }
        }
        out
    }

    /// Accumulates `selfᵀ (k×n) · rhs (n×m)` into `acc` (k×m).
    pub fn t_matmul_into(&self, rhs: &Mat<T>, acc: &mut Mat<T>) {
        assert_eq!(self.rows, rhs.rows, "t_matmul rows");
        assert_eq!((acc.rows, acc.cols), (self.cols, rhs.cols), "t_matmul acc");
        for r in 0..self.rows {
            let a = self.row(r);
            let b = rhs.row(r);
            for (k, &av) in a.iter().enumerate() {
                if av == T::zero() {
                    continue;
                }
                let o = &mut acc.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (ov, &bv) in o.iter_mut().zip(b) {
                    *ov += av * bv;
                }
            }
        }
    }

    pub fn add_assign(&mut self, rhs: &Mat<T>) {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        for (a, &b) in self.data.iter_mut().zip(&rhs.data) {
            *a += b;
        }
    }

    pub fn row_sums(&self) -> Vec<T> {
        (0..self.rows).map(|r| self.row(r).iter().copied().sum()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable softmax.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    let exps: Vec<T> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits
        .iter()
        .copied()
        .fold(T::neg_infinity(), |m, x| if x > m { x } else { m });
    let lse = logits.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
    logits.iter().map(|&x| x - lse).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_variants_agree() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![1.0, 0.5, -1.0, 2.0, 0.0, 1.0]);
        let ab = a.matmul(&b);
        assert_eq!(ab.data, vec![-1.0, 7.5, -1.0, 18.0]);
        let bt = Mat::from_vec(2, 3, vec![1.0, -1.0, 0.0, 0.5, 2.0, 1.0]);
        assert_eq!(a.matmul_t(&bt).data, ab.data);
        let mut acc = Mat::zeros(3, 3);
        a.t_matmul_into(&a, &mut acc);
        assert_eq!(acc.at(0, 0), 17.0);
        assert_eq!(acc.at(2, 1), 3.0 * 2.0 + 6.0 * 5.0);
    }

    #[test]
    fn softmax_sums_to_one() {
        let p = softmax(&[1000.0f64, 999.0, -5.0]);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&[1.0f64, 2.0, 3.0]);
        let p2 = softmax(&[1.0f64, 2.0, 3.0]);
        for (a, b) in lp.iter().zip(&p2) {
            assert!((a.exp() - b).abs() < 1e-12);
        }
    }
}
