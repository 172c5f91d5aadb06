use crate::error::{Error, Result};
use crate::numcore::Matrix;

/// Dense 3-way tensor.
///
/// Storage follows the vectorization used throughout the crate: the third
/// index varies fastest, then the second, then the first. With this layout
/// `(A ⊗ B ⊗ C) vec(T) == vec(T ×₁ A ×₂ B ×₃ C)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        let n = dims.iter().product::<usize>();
        if data.len() != n {
            return Err(Error::validation(format!(
                "tensor {dims:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor3 { dims, data })
    }

    pub fn zeros(dims: [usize; 3]) -> Self {
        Tensor3 {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.iter().product());
        for i in 0..dims[0] {
            for j in 0..dims[1] {
                for k in 0..dims[2] {
                    data.push(f(i, j, k));
                }
            }
        }
        Tensor3 { dims, data }
    }

    /// Stacks equally shaped matrices along the third index:
    /// `T[i][j][m] = slices[m][i][j]`.
    pub fn stack_frontal(slices: &[&Matrix]) -> Result<Self> {
        let Some(first) = slices.first() else {
            return Err(Error::Usage("cannot stack zero slices".into()));
        };
        let (r, c) = first.shape();
        for s in slices {
            if s.shape() != (r, c) {
                return Err(Error::Shape {
                    op: "stack_frontal",
                    lhs: (r, c),
                    rhs: s.shape(),
                });
            }
        }
        let m = slices.len();
        Ok(Tensor3::from_fn([r, c, m], |i, j, k| slices[k].get(i, j)))
    }

    /// Inverse of [`Tensor3::stack_frontal`].
    pub fn frontal_slice(&self, k: usize) -> Matrix {
        Matrix::from_fn(self.dims[0], self.dims[1], |i, j| self.get(i, j, k))
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    fn offset(&self, i: usize, j: usize, k: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.offset(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: f64) {
        let o = self.offset(i, j, k);
        self.data[o] = v;
    }

    pub fn inner(&self, other: &Tensor3) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&self, s: f64) -> Tensor3 {
        Tensor3 {
            dims: self.dims,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// Mode-`k` matricization (k in 1..=3). Row `j` holds every element whose
    /// k-th index equals `j`; the remaining two indices run in storage order
    /// (earlier index slower) across the columns.
    pub fn unfold(&self, k: usize) -> Result<Matrix> {
        let [d1, d2, d3] = self.dims;
        let m = match k {
            1 => Matrix::from_fn(d1, d2 * d3, |i, c| self.get(i, c / d3, c % d3)),
            2 => Matrix::from_fn(d2, d1 * d3, |j, c| self.get(c / d3, j, c % d3)),
            3 => Matrix::from_fn(d3, d1 * d2, |l, c| self.get(c / d2, c % d2, l)),
            _ => return Err(Error::Usage(format!("unfold mode must be 1, 2 or 3, got {k}"))),
        };
        Ok(m)
    }

    /// Rebuilds a tensor of shape `dims` from its mode-`k` matricization.
    pub fn refold(m: &Matrix, k: usize, dims: [usize; 3]) -> Result<Tensor3> {
        let [d1, d2, d3] = dims;
        let expect = match k {
            1 => (d1, d2 * d3),
            2 => (d2, d1 * d3),
            3 => (d3, d1 * d2),
            _ => return Err(Error::Usage(format!("refold mode must be 1, 2 or 3, got {k}"))),
        };
        if m.shape() != expect {
            return Err(Error::Shape {
                op: "refold",
                lhs: m.shape(),
                rhs: expect,
            });
        }
        let t = match k {
            1 => Tensor3::from_fn(dims, |i, j, l| m.get(i, j * d3 + l)),
            2 => Tensor3::from_fn(dims, |i, j, l| m.get(j, i * d3 + l)),
            _ => Tensor3::from_fn(dims, |i, j, l| m.get(l, i * d2 + j)),
        };
        Ok(t)
    }

    /// Mode-`k` product `T ×ₖ A`: the k-th index is contracted with the
    /// columns of `a`, so the k-th dimension becomes `a.rows()`.
    pub fn mode_product(&self, k: usize, a: &Matrix) -> Result<Tensor3> {
        let dk = *self
            .dims
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::Usage(format!("mode must be 1, 2 or 3, got {k}")))?;
        if a.cols() != dk {
            return Err(Error::Shape {
                op: "mode_product",
                lhs: a.shape(),
                rhs: (dk, dk),
            });
        }
        let unfolded = self.unfold(k)?;
        let prod = a.matmul(&unfolded)?;
        let mut dims = self.dims;
        dims[k - 1] = a.rows();
        Tensor3::refold(&prod, k, dims)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Tensor3 {
        Tensor3::new([2, 2, 2], (1..=8).map(f64::from).collect()).unwrap()
    }

    // Walks every element and places it by the definition of a mode-k
    // matricization, independent of the closed-form index maps above.
    fn brute_unfold(t: &Tensor3, k: usize) -> Vec<Vec<f64>> {
        let d = t.dims();
        let mut rows = vec![Vec::new(); d[k - 1]];
        for i in 0..d[0] {
            for j in 0..d[1] {
                for l in 0..d[2] {
                    let idx = [i, j, l];
                    rows[idx[k - 1]].push(t.get(i, j, l));
                }
            }
        }
        rows
    }

    #[test]
    fn unfold_matches_index_walk() {
        let t = sample();
        for k in 1..=3 {
            let m = t.unfold(k).unwrap();
            let expect = brute_unfold(&t, k);
            for (r, row) in expect.iter().enumerate() {
                assert_eq!(m.row(r), row.as_slice(), "mode {k} row {r}");
            }
        }
        // written out for the 1..8 tensor
        assert_eq!(t.unfold(1).unwrap().row(0), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t.unfold(2).unwrap().row(0), &[1.0, 2.0, 5.0, 6.0]);
        assert_eq!(t.unfold(3).unwrap().row(0), &[1.0, 3.0, 5.0, 7.0]);
    }

    #[test]
    fn unfold_shapes() {
        let t = Tensor3::zeros([3, 4, 5]);
        assert_eq!(t.unfold(1).unwrap().shape(), (3, 20));
        assert_eq!(t.unfold(2).unwrap().shape(), (4, 15));
        assert_eq!(t.unfold(3).unwrap().shape(), (5, 12));
        assert!(t.unfold(0).is_err());
        assert!(t.unfold(4).is_err());
    }

    #[test]
    fn mode_product_with_identity_is_noop() {
        let t = Tensor3::from_fn([2, 3, 4], |i, j, k| (i * 12 + j * 4 + k) as f64);
        for k in 1..=3 {
            let n = t.dims()[k - 1];
            assert_eq!(t.mode_product(k, &Matrix::identity(n)).unwrap(), t);
        }
    }

    #[test]
    fn frontal_stack_round_trip() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[5.0, 6.0], [7.0, 8.0]]);
        let t = Tensor3::stack_frontal(&[&a, &b]).unwrap();
        assert_eq!(t.get(1, 0, 1), 7.0);
        assert_eq!(t.frontal_slice(0), a);
        assert_eq!(t.frontal_slice(1), b);
    }

    proptest::proptest! {
        #[test]
        fn refold_inverts_unfold(d1 in 1usize..5, d2 in 1usize..5, d3 in 1usize..5, seed in 0u64..1000) {
            let t = Tensor3::from_fn([d1, d2, d3], |i, j, k| {
                ((i * 31 + j * 17 + k * 7) as f64 + seed as f64).sin()
            });
            for k in 1..=3 {
                let back = Tensor3::refold(&t.unfold(k).unwrap(), k, t.dims()).unwrap();
                proptest::prop_assert_eq!(&back, &t);
            }
        }
    }
}
