//! Dense row-major tensors and the handful of kernels the engine needs.
//!
//! Every reduction accumulates in ascending index order on a single thread, so
//! repeated evaluation on identical inputs is bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major tensor of rank 1 to 4.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(Error::dim(format!("tensor rank must be 1..=4, got {}", shape.len())));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::dim(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self::new(shape, vec![T::zero(); len]).expect("valid rank")
    }

    pub fn from_fn(shape: Vec<usize>, mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Self::new(shape, (0..len).map(&mut f).collect()).expect("valid rank")
    }

    /// Builds a rank-2 tensor from equally long rows.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("ragged rows"));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::dim("cannot stack zero tensors"))?;
        if first.rank() == 4 {
            return Err(Error::dim("stacking rank-4 tensors exceeds rank 4"));
        }
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::dim(format!("cannot stack {:?} with {:?}", t.shape, first.shape)));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Self::new(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::dim(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape;
        Ok(self)
    }

    /// Number of entries along the leading axis.
    pub fn outer(&self) -> usize {
        self.shape[0]
    }

    /// Elements per slice of the leading axis.
    pub fn inner_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    /// Slice `n` of the leading axis.
    pub fn sample(&self, n: usize) -> &[T] {
        let k = self.inner_len();
        &self.data[n * k..(n + 1) * k]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [T] {
        let k = self.inner_len();
        &mut self.data[n * k..(n + 1) * k]
    }

    /// Copies slice `n` of the leading axis into its own tensor.
    pub fn slice_outer(&self, n: usize) -> Tensor<T> {
        let shape = if self.rank() == 1 { vec![1] } else { self.shape[1..].to_vec() };
        Tensor::new(shape, self.sample(n).to_vec()).expect("consistent")
    }

    /// Gathers the listed leading-axis slices into a new batch.
    pub fn gather(&self, indices: &[usize]) -> Tensor<T> {
        let mut data = Vec::with_capacity(indices.len() * self.inner_len());
        for &i in indices {
            data.extend_from_slice(self.sample(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor::new(shape, data).expect("consistent")
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise absolute value.
    pub fn abs(&self) -> Tensor<T> {
        self.map(T::abs)
    }

    pub fn frobenius_norm(&self) -> T {
        frobenius_norm(&self.data)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Elementwise absolute value of a tensor.
pub fn abs_elementwise<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    t.abs()
}

/// `sqrt(sum m_i^2)`, summed sequentially.
pub fn frobenius_norm<T: Scalar>(m: &[T]) -> T {
    let mut acc = T::zero();
    for &v in m {
        acc += v * v;
    }
    acc.sqrt()
}

/// `weights (m_out x m_in) * x`.
pub fn matvec<T: Scalar>(weights: &Tensor<T>, x: &[T]) -> Result<Vec<T>> {
    if weights.rank() != 2 || weights.shape()[1] != x.len() {
        return Err(Error::dim(format!(
            "matvec: weights {:?} against vector of length {}",
            weights.shape(),
            x.len()
        )));
    }
    let cols = x.len();
    let out = weights
        .data()
        .chunks_exact(cols.max(1))
        .take(weights.shape()[0])
        .map(|row| {
            let mut acc = T::zero();
            for (&w, &v) in row.iter().zip(x) {
                acc += w * v;
            }
            acc
        })
        .collect();
    Ok(out)
}

/// Stride and zero padding of a 2-D convolution, as (height, width) pairs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for ConvGeometry {
    fn default() -> Self {
        Self {
            stride: (1, 1),
            padding: (0, 0),
        }
    }
}

impl ConvGeometry {
    pub fn new(stride: (usize, usize), padding: (usize, usize)) -> Self {
        Self { stride, padding }
    }

    /// Output map size for an `h x w` input and an `r x r` kernel.
    pub fn output_hw(&self, h: usize, w: usize, r: usize) -> Result<(usize, usize)> {
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        if sh == 0 || sw == 0 {
            return Err(Error::dim("conv stride must be positive"));
        }
        if r == 0 || h + 2 * ph < r || w + 2 * pw < r {
            return Err(Error::dim(format!(
                "kernel {r}x{r} larger than padded input {}x{}",
                h + 2 * ph,
                w + 2 * pw
            )));
        }
        Ok(((h + 2 * ph - r) / sh + 1, (w + 2 * pw - r) / sw + 1))
    }
}

/// Cross-correlation of a `C_in x H x W` input with `C_out x C_in x r x r`
/// kernels plus a per-filter bias. Zero padding, no kernel flip.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &[T],
    geometry: ConvGeometry,
) -> Result<Tensor<T>> {
    if input.rank() != 3 || kernels.rank() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects CxHxW input and OxCxRxR kernels, got {:?} and {:?}",
            input.shape(),
            kernels.shape()
        )));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (c_out, kc, r, r2) = (
        kernels.shape()[0],
        kernels.shape()[1],
        kernels.shape()[2],
        kernels.shape()[3],
    );
    if kc != c_in || r != r2 || bias.len() != c_out {
        return Err(Error::dim(format!(
            "conv2d: input channels {c_in}, kernels {:?}, bias {}",
            kernels.shape(),
            bias.len()
        )));
    }
    let (oh, ow) = geometry.output_hw(h, w, r)?;
    let plane = oh * ow;
    let mut cols = vec![T::zero(); c_in * r * r * plane];
    im2col(input.data(), (c_in, h, w), r, geometry, (oh, ow), &mut cols);
    let mut out = vec![T::zero(); c_out * plane];
    gemm_acc(kernels.data(), &cols, &mut out, c_out, c_in * r * r, plane);
    for (map, &b) in out.chunks_exact_mut(plane).zip(bias) {
        for v in map {
            *v += b;
        }
    }
    Tensor::new(vec![c_out, oh, ow], out)
}

/// `c (m x n) += a (m x k) * b (k x n)`.
///
/// Each output element accumulates its `k` products in ascending order. Zero
/// entries of `a` are skipped, which is what makes pruned layers cheap.
pub fn gemm_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 || n == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        for (&aik, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if aik == T::zero() {
                continue;
            }
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

/// Transpose of a `rows x cols` row-major matrix.
pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Unfolds a `C x H x W` input into a `(C r r) x (oh ow)` patch matrix.
pub fn im2col<T: Scalar>(
    x: &[T],
    (c, h, w): (usize, usize, usize),
    r: usize,
    geometry: ConvGeometry,
    (oh, ow): (usize, usize),
    cols: &mut [T],
) {
    let (sh, sw) = geometry.stride;
    let (ph, pw) = geometry.padding;
    let plane = oh * ow;
    debug_assert_eq!(cols.len(), c * r * r * plane);
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for kh in 0..r {
            for kw in 0..r {
                let row = (ch * r + kh) * r + kw;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * sh + kh) as isize - ph as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src_line = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * sw + kw) as isize - pw as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src_line[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub fn col2im<T: Scalar>(
    cols: &[T],
    (c, h, w): (usize, usize, usize),
    r: usize,
    geometry: ConvGeometry,
    (oh, ow): (usize, usize),
    x: &mut [T],
) {
    let (sh, sw) = geometry.stride;
    let (ph, pw) = geometry.padding;
    let plane = oh * ow;
    for ch in 0..c {
        for kh in 0..r {
            for kw in 0..r {
                let row = (ch * r + kh) * r + kw;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..oh {
                    let iy = (oy * sh + kh) as isize - ph as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * sw + kw) as isize - pw as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[(ch * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
