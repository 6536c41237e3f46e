//! Dense row-major tensors and the numeric kernels behind the autodiff ops.

use crate::parallel;
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Panics when `data.len()` disagrees with `shape`.
    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Self {
        Self::from_vec(shape, data.iter().map(|&v| T::lit(v)).collect())
    }

    pub fn scalar(v: T) -> Self {
        Self::from_vec(&[1], vec![v])
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        assert_eq!(self.shape, other.shape, "shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: T) {
        for a in &mut self.data {
            *a *= c;
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::lit(v.as_f64())).collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.as_f64()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// kernels

/// Rows per rayon task; keeps tiny matmuls on one thread.
const MIN_ROWS: usize = 4;

/// `a[n,k] * b[k,m]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![T::zero(); n * m];
    parallel::for_each_row(&mut out, m, MIN_ROWS, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    });
    out
}

/// `a[k,n]^T * b[k,m]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], k: usize, n: usize, m: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), k * n);
    debug_assert_eq!(b.len(), k * m);
    let mut out = vec![T::zero(); n * m];
    parallel::for_each_row(&mut out, m, MIN_ROWS, |i, row| {
        for p in 0..k {
            let api = a[p * n + i];
            if api == T::zero() {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += api * bv;
            }
        }
    });
    out
}

/// `a[n,k] * b[m,k]^T`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], n: usize, k: usize, m: usize) -> Vec<T> {
    let bt = transpose(b, m, k);
    matmul(a, &bt, n, k, m)
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Geometry of a 2D convolution over a `[channels, height, width]` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }
}

/// Unfolds `[c,h,w]` into `[c*k*k, oh*ow]` patch columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let cols = oh * ow;
    let k = g.kernel;
    let mut out = vec![T::zero(); g.col_rows() * cols];
    parallel::for_each_row(&mut out, cols, 16, |row, dst| {
        let c = row / (k * k);
        let ki = (row / k) % k;
        let kj = row % k;
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for oy in 0..oh {
            let iy = (oy * g.stride + ki) as isize - g.pad as isize;
            if iy < 0 || iy >= g.height as isize {
                continue;
            }
            let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
            let drow = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, d) in drow.iter_mut().enumerate() {
                let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                if ix >= 0 && (ix as usize) < g.width {
                    *d = src[ix as usize];
                }
            }
        }
    });
    out
}

/// Adjoint of [`im2col`]: scatters columns back onto a `[c,h,w]` image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let k = g.kernel;
    let hw = g.height * g.width;
    let mut out = vec![T::zero(); g.channels * hw];
    parallel::for_each_row(&mut out, hw, 1, |c, plane| {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let prow = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.width {
                            prow[ix as usize] += src[oy * ow + ox];
                        }
                    }
                }
            }
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    out[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_variants_agree_with_naive() {
        let (n, k, m) = (5, 7, 3);
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_matmul(&a, &b, n, k, m);
        let got = matmul(&a, &b, n, k, m);
        let got_tn = matmul_tn(&transpose(&a, n, k), &b, k, n, m);
        let got_nt = matmul_nt(&a, &transpose(&b, k, m), n, k, m);
        for i in 0..n * m {
            assert!((want[i] - got[i]).abs() < 1e-12);
            assert!((want[i] - got_tn[i]).abs() < 1e-12);
            assert!((want[i] - got_nt[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom {
            channels: 2,
            height: 6,
            width: 5,
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..g.channels * 30).map(|i| (i as f64).sin()).collect();
        let cols = im2col(&x, &g);
        let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let back = col2im(&y, &g);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn parallel_and_sequential_matmul_are_bitwise_equal() {
        let (n, k, m) = (64, 33, 17);
        let a: Vec<f32> = (0..n * k).map(|i| (i as f32 * 0.01).sin()).collect();
        let b: Vec<f32> = (0..k * m).map(|i| (i as f32 * 0.02).cos()).collect();
        let p = parallel::with_mode(true, || matmul(&a, &b, n, k, m));
        let s = parallel::with_mode(false, || matmul(&a, &b, n, k, m));
        assert_eq!(p, s);
    }
}
