//! Dense real-valued tensors (row-major `f64`).
//!
//! This is deliberately minimal: shape + flat storage + the few helpers the
//! rest of the crate needs. Real values carry proxy weights, weighted sums
//! and logits; all heavy lifting on binary data lives in [`crate::packed`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RealTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl RealTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if data.len() != expect {
            return Err(Error::ShapeMismatch(format!(
                "tensor data length {} does not match shape {:?} (= {})",
                data.len(),
                shape,
                expect
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let len = shape.iter().product();
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Reinterprets the flat data under a new shape of the same volume.
    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != self.data.len() {
            return Err(Error::ShapeMismatch(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    /// Last dimension, used as the channel axis for activations.
    pub fn channels(&self) -> usize {
        *self.shape.last().unwrap_or(&0)
    }
}

/// out[i][j] = sum_k a[i][k] * b[k][j], plain triple loop.
pub fn matmul(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    let (m, ka) = dims2(a)?;
    let (kb, n) = dims2(b)?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner dims {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for k in 0..ka {
            let av = ad[i * ka + k];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[k * n..(k + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    RealTensor::new(vec![m, n], out)
}

/// out[i][j] = sum_k a[k][i] * b[k][j] (i.e. a^T * b).
pub fn matmul_tn(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    let (ka, m) = dims2(a)?;
    let (kb, n) = dims2(b)?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul_tn inner dims {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for k in 0..ka {
        let arow = &ad[k * m..(k + 1) * m];
        let brow = &bd[k * n..(k + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    RealTensor::new(vec![m, n], out)
}

/// out[i][j] = sum_k a[i][k] * b[j][k] (i.e. a * b^T).
pub fn matmul_nt(a: &RealTensor, b: &RealTensor) -> Result<RealTensor> {
    let (m, ka) = dims2(a)?;
    let (n, kb) = dims2(b)?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul_nt inner dims {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &bd[j * kb..(j + 1) * kb];
            let mut acc = 0.0;
            for k in 0..ka {
                acc += arow[k] * brow[k];
            }
            out[i * n + j] = acc;
        }
    }
    RealTensor::new(vec![m, n], out)
}

fn dims2(t: &RealTensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::ShapeMismatch(format!("expected 2-d tensor, got {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_volume() {
        assert!(RealTensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn matmul_small_known() {
        let a = RealTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = RealTensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = RealTensor::new(vec![3, 2], vec![1., -2., 0.5, 3., -1., 4.]).unwrap();
        let b = RealTensor::new(vec![2, 4], (0..8).map(|i| i as f64 - 3.0).collect()).unwrap();
        let c = matmul(&a, &b).unwrap();

        // a^T stored transposed, multiply with matmul_tn
        let mut at = vec![0.0; 6];
        for i in 0..3 {
            for k in 0..2 {
                at[k * 3 + i] = a.data()[i * 2 + k];
            }
        }
        let at = RealTensor::new(vec![2, 3], at).unwrap();
        let c2 = matmul_tn(&at, &b).unwrap();
        assert_eq!(c.data(), c2.data());

        // b^T stored transposed, multiply with matmul_nt
        let mut bt = vec![0.0; 8];
        for k in 0..2 {
            for j in 0..4 {
                bt[j * 2 + k] = b.data()[k * 4 + j];
            }
        }
        let bt = RealTensor::new(vec![4, 2], bt).unwrap();
        let c3 = matmul_nt(&a, &bt).unwrap();
        assert_eq!(c.data(), c3.data());
    }
}
