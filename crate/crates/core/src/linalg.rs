//! Small dense linear algebra: LU factorisation with partial pivoting.

use crate::scalar::Scalar;

/// Row-major square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix<T> {
    n: usize,
    data: Vec<T>,
}

impl<T: Scalar> DenseMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: vec![T::zero(); n * n],
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.n + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.n + c] = v;
    }

    #[inline]
    pub fn add(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.n + c] += v;
    }

    /// Solves `self · x = rhs` in place of a copy. Returns `None` when a pivot
    /// is exactly zero or not finite (singular or degenerate system).
    pub fn solve(&self, rhs: &[T]) -> Option<Vec<T>> {
        let n = self.n;
        assert_eq!(rhs.len(), n, "rhs length must match matrix dimension");
        let mut a = self.data.clone();
        let mut x = rhs.to_vec();

        for k in 0..n {
            let (mut piv, mut best) = (k, a[k * n + k].abs());
            for r in (k + 1)..n {
                let v = a[r * n + k].abs();
                if v > best {
                    piv = r;
                    best = v;
                }
            }
            if best == T::zero() || !best.is_finite() {
                return None;
            }
            if piv != k {
                for c in 0..n {
                    a.swap(k * n + c, piv * n + c);
                }
                x.swap(k, piv);
            }
            let d = a[k * n + k];
            for r in (k + 1)..n {
                let f = a[r * n + k] / d;
                if f == T::zero() {
                    continue;
                }
                a[r * n + k] = T::zero();
                for c in (k + 1)..n {
                    let akc = a[k * n + c];
                    a[r * n + c] -= f * akc;
                }
                let xk = x[k];
                x[r] -= f * xk;
            }
        }
        for k in (0..n).rev() {
            let mut s = x[k];
            for c in (k + 1)..n {
                s -= a[k * n + c] * x[c];
            }
            x[k] = s / a[k * n + k];
        }
        if x.iter().all(|v| v.is_finite()) {
            Some(x)
        } else {
            None
        }
    }
}
