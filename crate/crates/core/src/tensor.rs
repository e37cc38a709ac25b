//! Dense row-major tensors and the raw kernels the autodiff graph is built on.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional array, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    #[serde(default)]
    requires_grad: bool,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} holds {n} elements, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            requires_grad: false,
        }
    }

    /// Builds a tensor from `f64` values, converting to `T`.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), data.iter().map(|&x| T::lit(x)).collect())
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<T> {
        if self.data.len() != 1 {
            return Err(Error::shape("item", format!("expected one element, shape {:?}", self.shape)));
        }
        Ok(self.data[0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.contains(&0) {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
        })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
            requires_grad: false,
        }
    }

    /// Rows `[start, end)` along the leading axis.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let rows = self.shape[0];
        if start >= end || end > rows {
            return Err(Error::shape("slice_rows", format!("rows {start}..{end} of {rows}")));
        }
        let stride = self.data.len() / rows;
        let mut shape = self.shape.clone();
        shape[0] = end - start;
        Ok(Tensor {
            shape,
            data: self.data[start * stride..end * stride].to_vec(),
            requires_grad: false,
        })
    }

    /// Gathers the given rows along the leading axis.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let n = self.shape[0];
        let stride = self.data.len() / n;
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::shape("select_rows", format!("row {r} out of {n}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Tensor::new(shape, data)
    }

    /// Elements per leading-axis row.
    pub fn row_len(&self) -> usize {
        self.data.len() / self.shape[0]
    }

    pub fn row(&self, r: usize) -> &[T] {
        let stride = self.row_len();
        &self.data[r * stride..(r + 1) * stride]
    }

    /// Stacks equally shaped rows into a `[rows.len(), ..row_shape]` tensor.
    pub fn stack_rows(row_shape: &[usize], rows: &[&[T]]) -> Result<Self> {
        let stride: usize = row_shape.iter().product();
        let mut data = Vec::with_capacity(stride * rows.len());
        for r in rows {
            if r.len() != stride {
                return Err(Error::shape("stack_rows", format!("row of {} vs {stride}", r.len())));
            }
            data.extend_from_slice(r);
        }
        let mut shape = vec![rows.len()];
        shape.extend_from_slice(row_shape);
        Tensor::new(shape, data)
    }

    /// Index of the largest entry in each row of a 2-D tensor (first on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.shape[0])
            .map(|r| {
                let row = self.row(r);
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best
            })
            .collect()
    }
}

pub(crate) mod kernels {
    //! Raw loops shared by forward and backward passes.

    use crate::scalar::Scalar;

    /// `out[m,n] = a[m,k] * b[k,n]`, with optional transposes of the operands.
    pub fn gemm<T: Scalar>(
        a: &[T],
        b: &[T],
        m: usize,
        k: usize,
        n: usize,
        a_t: bool,
        b_t: bool,
    ) -> Vec<T> {
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = if a_t { a[p * m + i] } else { a[i * k + p] };
                if av == T::zero() {
                    continue;
                }
                if b_t {
                    for (j, o) in row.iter_mut().enumerate() {
                        *o += av * b[j * k + p];
                    }
                } else {
                    let brow = &b[p * n..(p + 1) * n];
                    for (o, &bv) in row.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        out
    }

    #[derive(Clone, Copy, Debug)]
    pub struct ConvDims {
        pub n: usize,
        pub c: usize,
        pub h: usize,
        pub w: usize,
        pub o: usize,
        pub kh: usize,
        pub kw: usize,
    }

    impl ConvDims {
        fn pad(&self) -> (isize, isize) {
            ((self.kh / 2) as isize, (self.kw / 2) as isize)
        }

        /// Calls `f(input_index, kernel_index, output_index)` for every
        /// multiply-accumulate of a stride-1, zero-padded "same" convolution.
        #[inline]
        fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
            let (ph, pw) = self.pad();
            let (h, w) = (self.h as isize, self.w as isize);
            for n in 0..self.n {
                for o in 0..self.o {
                    for y in 0..self.h {
                        for x in 0..self.w {
                            let out_idx = ((n * self.o + o) * self.h + y) * self.w + x;
                            for c in 0..self.c {
                                for i in 0..self.kh {
                                    let iy = y as isize + i as isize - ph;
                                    if iy < 0 || iy >= h {
                                        continue;
                                    }
                                    for j in 0..self.kw {
                                        let ix = x as isize + j as isize - pw;
                                        if ix < 0 || ix >= w {
                                            continue;
                                        }
                                        let in_idx = ((n * self.c + c) * self.h + iy as usize)
                                            * self.w
                                            + ix as usize;
                                        let k_idx = ((o * self.c + c) * self.kh + i) * self.kw + j;
                                        f(in_idx, k_idx, out_idx);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn conv2d<T: Scalar>(input: &[T], kernel: &[T], d: ConvDims) -> Vec<T> {
        let mut out = vec![T::zero(); d.n * d.o * d.h * d.w];
        d.for_each(|i, k, o| out[o] += input[i] * kernel[k]);
        out
    }

    pub fn conv2d_backward<T: Scalar>(
        input: &[T],
        kernel: &[T],
        grad_out: &[T],
        d: ConvDims,
    ) -> (Vec<T>, Vec<T>) {
        let mut g_in = vec![T::zero(); input.len()];
        let mut g_k = vec![T::zero(); kernel.len()];
        d.for_each(|i, k, o| {
            g_in[i] += grad_out[o] * kernel[k];
            g_k[k] += grad_out[o] * input[i];
        });
        (g_in, g_k)
    }

    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    const GELU_C: f64 = 0.044_715;

    /// GELU, tanh approximation.
    pub fn gelu<T: Scalar>(x: T) -> T {
        let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
        T::lit(0.5) * x * (T::one() + inner.tanh())
    }

    pub fn gelu_grad<T: Scalar>(x: T) -> T {
        let inner = T::lit(SQRT_2_OVER_PI) * (x + T::lit(GELU_C) * x * x * x);
        let t = inner.tanh();
        let d_inner = T::lit(SQRT_2_OVER_PI) * (T::one() + T::lit(3.0 * GELU_C) * x * x);
        T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * d_inner
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![0, 2], vec![]).is_err());
    }

    #[test]
    fn gemm_transposes_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let ab = kernels::gemm(&a, &b, 2, 3, 2, false, false);
        assert_eq!(ab, vec![5.0, 11.0, 14.0, 23.0]);
        // a^T stored as 3x2, b^T stored as 2x3
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let bt = [1.0, 2.0, 0.0, 0.0, 1.0, 3.0];
        assert_eq!(kernels::gemm(&at, &bt, 2, 3, 2, true, true), ab);
    }

    #[test]
    fn conv_identity_kernel() {
        let d = kernels::ConvDims { n: 1, c: 1, h: 3, w: 3, o: 1, kh: 3, kw: 3 };
        let input: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        assert_eq!(kernels::conv2d(&input, &k, d), input);
        // all-ones kernel sums the zero-padded 3x3 neighbourhood
        let out = kernels::conv2d(&input, &[1.0; 9], d);
        assert_eq!(out[0], 1.0 + 2.0 + 4.0 + 5.0);
        assert_eq!(out[4], 45.0);
    }

    #[test]
    fn argmax_first_on_ties() {
        let t = Tensor::<f64>::from_f64(&[2, 3], &[1.0, 3.0, 3.0, 0.0, -1.0, -2.0]).unwrap();
        assert_eq!(t.argmax_rows(), vec![1, 0]);
    }
}
