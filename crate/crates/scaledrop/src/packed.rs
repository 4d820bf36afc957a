//! Bit-packed {−1,+1} tensors and the XNOR/popcount arithmetic on them.
//!
//! Encoding: bit 1 ↔ +1, bit 0 ↔ −1, packed LSB-first into 64-bit words over
//! the row-major flattened index. Padding bits past the logical length are
//! kept at zero so popcounts over whole words are well-defined after masking.
//!
//! A dot product of two ±1 vectors of length n packed this way is
//! `2 * popcount(XNOR(a, b)) - n`, which is what the matmul and convolution
//! kernels below compute. They are bit-exact against float arithmetic on the
//! unpacked values; the tests hold them to zero tolerance.

use crate::error::{Error, Result};
use crate::tensor::RealTensor;

pub const WORD_BITS: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBinaryTensor {
    shape: Vec<usize>,
    words: Vec<u64>,
}

impl PackedBinaryTensor {
    /// Packs ±1 values given as `f64` signs: `v >= 0` encodes +1, else −1.
    ///
    /// This is the `sign(.)` binarization; zero maps to +1.
    pub fn from_signs(shape: Vec<usize>, values: &[f64]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if values.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "packing {} values into shape {:?}",
                values.len(),
                shape
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("sign binarization input".to_string()));
        }
        let mut words = vec![0u64; len.div_ceil(WORD_BITS)];
        for (i, v) in values.iter().enumerate() {
            if *v >= 0.0 {
                words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
            }
        }
        Ok(Self { shape, words })
    }

    /// Packs explicit bits (true ↔ +1).
    pub fn from_bits<I: IntoIterator<Item = bool>>(shape: Vec<usize>, bits: I) -> Result<Self> {
        let len: usize = shape.iter().product();
        let mut words = vec![0u64; len.div_ceil(WORD_BITS)];
        let mut count = 0usize;
        for (i, b) in bits.into_iter().enumerate() {
            if i >= len {
                return Err(Error::ShapeMismatch(format!(
                    "more than {len} bits for shape {shape:?}"
                )));
            }
            if b {
                words[i / WORD_BITS] |= 1u64 << (i % WORD_BITS);
            }
            count += 1;
        }
        if count != len {
            return Err(Error::ShapeMismatch(format!(
                "{count} bits for shape {shape:?} (need {len})"
            )));
        }
        Ok(Self { shape, words })
    }

    /// Builds from raw packed words, validating that padding bits are zero.
    pub fn from_words(shape: Vec<usize>, words: Vec<u64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        let need = len.div_ceil(WORD_BITS);
        if words.len() != need {
            return Err(Error::ShapeMismatch(format!(
                "{} words for shape {:?} (need {})",
                words.len(),
                shape,
                need
            )));
        }
        let tail = len % WORD_BITS;
        if tail != 0 && need > 0 {
            let mask = (1u64 << tail) - 1;
            if words[need - 1] & !mask != 0 {
                return Err(Error::InvalidArgument(
                    "packed tensor has nonzero padding bits".to_string(),
                ));
            }
        }
        Ok(Self { shape, words })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// Logical element at flat index `i` as +1 or −1.
    #[inline]
    pub fn get(&self, i: usize) -> i8 {
        debug_assert!(i < self.len());
        if (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1 {
            1
        } else {
            -1
        }
    }

    #[inline]
    pub fn get_bit(&self, i: usize) -> bool {
        (self.words[i / WORD_BITS] >> (i % WORD_BITS)) & 1 == 1
    }

    /// Unpacks to ±1.0 values in flat row-major order.
    pub fn unpack(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i) as f64).collect()
    }

    pub fn unpack_tensor(&self) -> RealTensor {
        RealTensor::new(self.shape.clone(), self.unpack()).expect("shape matches by construction")
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }
}

/// Row-aligned packed matrix: each row starts on a word boundary, tail bits
/// zero. This is the working layout for the XNOR kernels; `PackedBinaryTensor`
/// stays flat for storage.
#[derive(Debug, Clone)]
pub struct PackedRows {
    pub rows: usize,
    pub cols: usize,
    words_per_row: usize,
    words: Vec<u64>,
}

impl PackedRows {
    pub fn zeroed(rows: usize, cols: usize) -> Self {
        let words_per_row = cols.div_ceil(WORD_BITS).max(1);
        Self {
            rows,
            cols,
            words_per_row,
            words: vec![0u64; rows * words_per_row],
        }
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, plus_one: bool) {
        if plus_one {
            self.words[row * self.words_per_row + col / WORD_BITS] |= 1u64 << (col % WORD_BITS);
        }
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[u64] {
        &self.words[row * self.words_per_row..(row + 1) * self.words_per_row]
    }

    /// Builds from a flat packed matrix interpreted as `[rows, cols]`.
    pub fn from_matrix(t: &PackedBinaryTensor, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != t.len() {
            return Err(Error::ShapeMismatch(format!(
                "matrix view {}x{} over {} elements",
                rows,
                cols,
                t.len()
            )));
        }
        let mut out = Self::zeroed(rows, cols);
        for r in 0..rows {
            for c in 0..cols {
                out.set(r, c, t.get_bit(r * cols + c));
            }
        }
        Ok(out)
    }

    /// Builds from the columns of a flat packed matrix `[rows, cols]`:
    /// output row `j` holds column `j` of the input.
    pub fn from_matrix_columns(t: &PackedBinaryTensor, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != t.len() {
            return Err(Error::ShapeMismatch(format!(
                "matrix view {}x{} over {} elements",
                rows,
                cols,
                t.len()
            )));
        }
        let mut out = Self::zeroed(cols, rows);
        for c in 0..cols {
            for r in 0..rows {
                out.set(c, r, t.get_bit(r * cols + c));
            }
        }
        Ok(out)
    }

    /// ±1 dot product of row `i` of `self` with row `j` of `other`.
    #[inline]
    pub fn xnor_dot(&self, i: usize, other: &PackedRows, j: usize) -> i64 {
        debug_assert_eq!(self.cols, other.cols);
        let a = self.row(i);
        let b = other.row(j);
        let mut pop = 0u32;
        let full = self.cols / WORD_BITS;
        for w in 0..full {
            pop += (!(a[w] ^ b[w])).count_ones();
        }
        let tail = self.cols % WORD_BITS;
        if tail != 0 {
            let mask = (1u64 << tail) - 1;
            pop += (!(a[full] ^ b[full]) & mask).count_ones();
        }
        2 * pop as i64 - self.cols as i64
    }
}

/// `w [m,k] * x [k,n]` over ±1 values via XNOR/popcount. Output entries are
/// exact integers stored as `f64`.
pub fn xnor_popcount_matmul(w: &PackedBinaryTensor, x: &PackedBinaryTensor) -> Result<RealTensor> {
    let (m, kw) = matrix_dims(w, "lhs")?;
    let (kx, n) = matrix_dims(x, "rhs")?;
    if kw != kx {
        return Err(Error::ShapeMismatch(format!(
            "xnor matmul inner dims {kw} vs {kx}"
        )));
    }
    let lhs = PackedRows::from_matrix(w, m, kw)?;
    let rhs = PackedRows::from_matrix_columns(x, kx, n)?;
    Ok(xnor_matmul_rows(&lhs, &rhs))
}

/// Multiplies row-aligned packed operands: `lhs [m,k]` by `rhs` holding the
/// k-length columns of the logical right operand as rows (`rhs.rows = n`).
pub fn xnor_matmul_rows(lhs: &PackedRows, rhs: &PackedRows) -> RealTensor {
    assert_eq!(lhs.cols, rhs.cols, "xnor matmul inner dims");
    let m = lhs.rows;
    let n = rhs.rows;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            *o = lhs.xnor_dot(i, rhs, j) as f64;
        }
    }
    RealTensor::new(vec![m, n], out).expect("sized above")
}

fn matrix_dims(t: &PackedBinaryTensor, side: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch(format!(
            "xnor matmul {side} must be 2-d, got {s:?}"
        ))),
    }
}

/// Output spatial size for a conv dimension.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = input + 2 * padding;
    if kernel == 0 || stride == 0 || padded < kernel {
        return Err(Error::ShapeMismatch(format!(
            "conv dim: input {input}, kernel {kernel}, stride {stride}, padding {padding}"
        )));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Binary 2-d convolution.
///
/// `w` has shape `[kh, kw, c_in, c_out]`, `x` has shape `[n, h, w, c_in]`
/// (channels last). Out-of-bounds taps contribute −1 (bit 0), the packed
/// representation of the padding value. Output is `[n, oh, ow, c_out]` with
/// exact integer entries.
pub fn binary_conv2d(
    w: &PackedBinaryTensor,
    x: &PackedBinaryTensor,
    stride: usize,
    padding: usize,
) -> Result<RealTensor> {
    let [kh, kw, c_in, c_out] = *w.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "conv weight must be [k,k,c_in,c_out], got {:?}",
            w.shape()
        )));
    };
    let [n, h, wd, xc] = *x.shape() else {
        return Err(Error::ShapeMismatch(format!(
            "conv input must be [n,h,w,c], got {:?}",
            x.shape()
        )));
    };
    if xc != c_in {
        return Err(Error::ShapeMismatch(format!(
            "conv input channels {xc} vs weight c_in {c_in}"
        )));
    }
    let oh = conv_out_dim(h, kh, stride, padding)?;
    let ow = conv_out_dim(wd, kw, stride, padding)?;
    let k = kh * kw * c_in;

    // Patches as rows, one per output position.
    let mut patches = PackedRows::zeroed(n * oh * ow, k);
    let mut row = 0;
    for img in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut col = 0;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        let inside =
                            iy >= 0 && (iy as usize) < h && ix >= 0 && (ix as usize) < wd;
                        if inside {
                            let base =
                                ((img * h + iy as usize) * wd + ix as usize) * c_in;
                            for c in 0..c_in {
                                patches.set(row, col, x.get_bit(base + c));
                                col += 1;
                            }
                        } else {
                            col += c_in; // padding taps stay bit 0 = −1
                        }
                    }
                }
                row += 1;
            }
        }
    }

    // Kernels as rows: row c_out over (ky, kx, c_in).
    let mut kernels = PackedRows::zeroed(c_out, k);
    for co in 0..c_out {
        let mut col = 0;
        for ky in 0..kh {
            for kx in 0..kw {
                for c in 0..c_in {
                    let idx = ((ky * kw + kx) * c_in + c) * c_out + co;
                    kernels.set(co, col, w.get_bit(idx));
                    col += 1;
                }
            }
        }
    }

    xnor_matmul_rows(&patches, &kernels).reshape(vec![n, oh, ow, c_out])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_signs(rng: &mut StdRng, n: usize) -> Vec<f64> {
        (0..n).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect()
    }

    /// Oracle: float matmul over ±1 values, plain loops.
    fn float_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = acc;
            }
        }
        out
    }

    /// Oracle: direct float convolution, 7 nested loops, padding −1.
    #[allow(clippy::too_many_arguments)]
    fn float_conv(
        w: &[f64],
        x: &[f64],
        kh: usize,
        kw: usize,
        c_in: usize,
        c_out: usize,
        n: usize,
        h: usize,
        wd: usize,
        stride: usize,
        padding: usize,
    ) -> Vec<f64> {
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;
        let mut out = vec![0.0; n * oh * ow * c_out];
        for img in 0..n {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..c_out {
                        let mut acc = 0.0;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                for c in 0..c_in {
                                    let iy = (oy * stride + ky) as isize - padding as isize;
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    let xv = if iy >= 0
                                        && (iy as usize) < h
                                        && ix >= 0
                                        && (ix as usize) < wd
                                    {
                                        x[((img * h + iy as usize) * wd + ix as usize) * c_in + c]
                                    } else {
                                        -1.0
                                    };
                                    let wv = w[((ky * kw + kx) * c_in + c) * c_out + co];
                                    acc += wv * xv;
                                }
                            }
                        }
                        out[((img * oh + oy) * ow + ox) * c_out + co] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn aligned_vectors_give_n() {
        let ones = vec![1.0; 64];
        let w = PackedBinaryTensor::from_signs(vec![1, 64], &ones).unwrap();
        let x = PackedBinaryTensor::from_signs(vec![64, 1], &ones).unwrap();
        let out = xnor_popcount_matmul(&w, &x).unwrap();
        assert_eq!(out.data(), &[64.0]);
    }

    #[test]
    fn anti_aligned_vectors_give_minus_n() {
        let w = PackedBinaryTensor::from_signs(vec![1, 64], &vec![1.0; 64]).unwrap();
        let x = PackedBinaryTensor::from_signs(vec![64, 1], &vec![-1.0; 64]).unwrap();
        let out = xnor_popcount_matmul(&w, &x).unwrap();
        assert_eq!(out.data(), &[-64.0]);
    }

    #[test]
    fn matmul_matches_float_oracle_16x32x8() {
        let mut rng = StdRng::seed_from_u64(11);
        let (m, k, n) = (16, 32, 8);
        let a = random_signs(&mut rng, m * k);
        let b = random_signs(&mut rng, k * n);
        let pa = PackedBinaryTensor::from_signs(vec![m, k], &a).unwrap();
        let pb = PackedBinaryTensor::from_signs(vec![k, n], &b).unwrap();
        let got = xnor_popcount_matmul(&pa, &pb).unwrap();
        assert_eq!(got.data(), float_matmul(&a, &b, m, k, n).as_slice());
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let pa = PackedBinaryTensor::from_signs(vec![2, 3], &vec![1.0; 6]).unwrap();
        let pb = PackedBinaryTensor::from_signs(vec![4, 2], &vec![1.0; 8]).unwrap();
        assert!(xnor_popcount_matmul(&pa, &pb).is_err());
    }

    #[test]
    fn conv_all_plus_one_3x3_valid() {
        let w = PackedBinaryTensor::from_signs(vec![3, 3, 1, 1], &vec![1.0; 9]).unwrap();
        let x = PackedBinaryTensor::from_signs(vec![1, 5, 5, 1], &vec![1.0; 25]).unwrap();
        let out = binary_conv2d(&w, &x, 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 3, 3, 1]);
        assert!(out.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn conv_1x1_reduces_to_matmul() {
        let mut rng = StdRng::seed_from_u64(5);
        let (c_in, c_out, h, w_) = (7, 4, 3, 5);
        let wv = random_signs(&mut rng, c_in * c_out);
        let xv = random_signs(&mut rng, h * w_ * c_in);
        let w = PackedBinaryTensor::from_signs(vec![1, 1, c_in, c_out], &wv).unwrap();
        let x = PackedBinaryTensor::from_signs(vec![1, h, w_, c_in], &xv).unwrap();
        let conv = binary_conv2d(&w, &x, 1, 0).unwrap();

        let xm = PackedBinaryTensor::from_signs(vec![h * w_, c_in], &xv).unwrap();
        let wm = PackedBinaryTensor::from_signs(vec![c_in, c_out], &wv).unwrap();
        let mm = xnor_popcount_matmul(&xm, &wm).unwrap();
        assert_eq!(conv.data(), mm.data());
    }

    #[test]
    fn conv_matches_float_oracle_with_padding() {
        let mut rng = StdRng::seed_from_u64(99);
        let (kh, kw, c_in, c_out) = (3, 3, 2, 4);
        let (n, h, wd) = (2, 8, 8);
        let wv = random_signs(&mut rng, kh * kw * c_in * c_out);
        let xv = random_signs(&mut rng, n * h * wd * c_in);
        for (stride, padding) in [(1, 0), (1, 1), (2, 1)] {
            let w = PackedBinaryTensor::from_signs(vec![kh, kw, c_in, c_out], &wv).unwrap();
            let x = PackedBinaryTensor::from_signs(vec![n, h, wd, c_in], &xv).unwrap();
            let got = binary_conv2d(&w, &x, stride, padding).unwrap();
            let want = float_conv(&wv, &xv, kh, kw, c_in, c_out, n, h, wd, stride, padding);
            assert_eq!(got.data(), want.as_slice(), "stride {stride} padding {padding}");
        }
    }

    #[test]
    fn from_words_rejects_dirty_padding() {
        let words = vec![u64::MAX];
        assert!(PackedBinaryTensor::from_words(vec![10], words).is_err());
    }

    proptest! {
        /// Pack/unpack round-trip identity, all lengths 1..=512 including
        /// non-word-aligned ones, and padding bits stay zero.
        #[test]
        fn pack_unpack_roundtrip(len in 1usize..=512, seed in 0u64..1000) {
            let mut rng = StdRng::seed_from_u64(seed);
            let vals = random_signs(&mut rng, len);
            let packed = PackedBinaryTensor::from_signs(vec![len], &vals).unwrap();
            let unpacked = packed.unpack();
            prop_assert_eq!(&unpacked, &vals);
            prop_assert!(unpacked.iter().all(|&v| v == 1.0 || v == -1.0));
            let repacked = PackedBinaryTensor::from_signs(vec![len], &unpacked).unwrap();
            prop_assert_eq!(repacked.words(), packed.words());
            let tail = len % WORD_BITS;
            if tail != 0 {
                let mask = (1u64 << tail) - 1;
                prop_assert_eq!(packed.words().last().unwrap() & !mask, 0);
            }
        }

        /// Packed matmul equals the float ±1 oracle exactly for all shapes
        /// up to 64x64.
        #[test]
        fn matmul_equals_float_oracle(
            m in 1usize..=64,
            k in 1usize..=64,
            n in 1usize..=8,
            seed in 0u64..100,
        ) {
            let mut rng = StdRng::seed_from_u64(seed);
            let a = random_signs(&mut rng, m * k);
            let b = random_signs(&mut rng, k * n);
            let pa = PackedBinaryTensor::from_signs(vec![m, k], &a).unwrap();
            let pb = PackedBinaryTensor::from_signs(vec![k, n], &b).unwrap();
            let got = xnor_popcount_matmul(&pa, &pb).unwrap();
            let want = float_matmul(&a, &b, m, k, n);
            prop_assert_eq!(got.data(), want.as_slice());
        }
    }
}
