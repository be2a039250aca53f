//! Dense row-major tensors over `f64` with the small op set the network
//! engine needs: matrix product, 2-D cross-correlation, per-channel moments,
//! and broadcast elementwise arithmetic.
//!
//! Tensors are immutable after construction; every operation returns a new
//! value. Checked constructors reject non-finite data, so a `Tensor` always
//! holds finite numbers.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::normalization::NormStats;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements, got {got}")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("shape {shape:?} has a zero extent")]
    ZeroExtent { shape: Vec<usize> },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { value: f64, index: usize },
    #[error("expected rank {expected}, got shape {shape:?}")]
    RankMismatch { expected: usize, shape: Vec<usize> },
    #[error("inner extents differ: left shape {left:?}, right shape {right:?}")]
    DimMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("shapes {left:?} and {right:?} do not broadcast")]
    BroadcastMismatch { left: Vec<usize>, right: Vec<usize> },
    #[error("division by zero at flat index {index}")]
    DivisionByZero { index: usize },
    #[error("logarithm of non-positive value {value} at flat index {index}")]
    LogDomain { value: f64, index: usize },
    #[error("axis {axis} out of bounds for rank {rank}")]
    AxisOutOfBounds { axis: usize, rank: usize },
    #[error("reduction over an empty slice along axis {axis} of shape {shape:?}")]
    EmptyReduction { axis: usize, shape: Vec<usize> },
    #[error("channel mismatch: input has {input} channels, kernel expects {kernel}")]
    ChannelMismatch { input: usize, kernel: usize },
    #[error(
        "convolution output extent not positive: input {input:?}, kernel {kernel:?}, \
         stride {stride}, pad {pad}"
    )]
    EmptyConvOutput {
        input: Vec<usize>,
        kernel: Vec<usize>,
        stride: usize,
        pad: usize,
    },
    #[error("stride must be positive")]
    ZeroStride,
}

/// Dense multidimensional array, row-major, 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawTensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let raw = RawTensor::deserialize(deserializer)?;
        Tensor::new(raw.shape, raw.data).map_err(serde::de::Error::custom)
    }
}

fn check_shape(shape: &[usize]) -> Result<usize, TensorError> {
    if shape.iter().any(|&e| e == 0) {
        return Err(TensorError::ZeroExtent {
            shape: shape.to_vec(),
        });
    }
    Ok(shape.iter().product())
}

impl Tensor {
    /// Checked constructor: extents must be positive, data length must match,
    /// and every value must be finite.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected = check_shape(&shape)?;
        if data.len() != expected {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(TensorError::NonFinite { value, index });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("zero extent in shape");
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        let n = check_shape(shape).expect("zero extent in shape");
        Self {
            shape: shape.to_vec(),
            data: vec![1.0; n],
        }
    }

    /// Rank-2 tensor from row slices; rows must have equal lengths.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, TensorError> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(TensorError::LengthMismatch {
                    shape: vec![rows.len(), cols],
                    expected: cols,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
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

    /// Value at a multi-index; panics on out-of-range (test convenience).
    pub fn at(&self, index: &[usize]) -> f64 {
        assert_eq!(index.len(), self.rank(), "index rank mismatch");
        let mut flat = 0;
        for (i, (&ix, &extent)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < extent, "index {ix} out of range at axis {i}");
            flat = flat * extent + ix;
        }
        self.data[flat]
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Self, TensorError> {
        let expected = check_shape(&shape)?;
        if expected != self.data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                got: self.data.len(),
            });
        }
        Ok(Self {
            shape,
            data: self.data.clone(),
        })
    }

    fn expect_rank(&self, expected: usize) -> Result<(), TensorError> {
        if self.rank() != expected {
            return Err(TensorError::RankMismatch {
                expected,
                shape: self.shape.clone(),
            });
        }
        Ok(())
    }

    /// Rank-2 transpose.
    pub fn transpose(&self) -> Result<Self, TensorError> {
        self.expect_rank(2)?;
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data,
        })
    }

    /// Standard matrix product of two rank-2 tensors.
    pub fn matmul(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.expect_rank(2)?;
        other.expect_rank(2)?;
        if self.shape[1] != other.shape[0] {
            return Err(TensorError::DimMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                let row = &other.data[p * n..(p + 1) * n];
                let out = &mut data[i * n..(i + 1) * n];
                for (o, &b) in out.iter_mut().zip(row) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(vec![m, n], data)
    }

    /// Per-channel mean and biased (divide-by-count) variance over all
    /// non-channel axes.
    pub fn channel_moments(&self, channel_axis: usize) -> Result<NormStats, TensorError> {
        if channel_axis >= self.rank() {
            return Err(TensorError::AxisOutOfBounds {
                axis: channel_axis,
                rank: self.rank(),
            });
        }
        let channels = self.shape[channel_axis];
        let per_channel = self.data.len() / channels;
        if per_channel == 0 {
            return Err(TensorError::EmptyReduction {
                axis: channel_axis,
                shape: self.shape.clone(),
            });
        }
        let inner: usize = self.shape[channel_axis + 1..].iter().product();
        let mut mean = vec![0.0; channels];
        let mut var = vec![0.0; channels];
        for (flat, &v) in self.data.iter().enumerate() {
            let c = (flat / inner) % channels;
            mean[c] += v;
        }
        for m in &mut mean {
            *m /= per_channel as f64;
        }
        for (flat, &v) in self.data.iter().enumerate() {
            let c = (flat / inner) % channels;
            let d = v - mean[c];
            var[c] += d * d;
        }
        for v in &mut var {
            *v /= per_channel as f64;
        }
        NormStats::new(mean, var).map_err(|_| TensorError::EmptyReduction {
            axis: channel_axis,
            shape: self.shape.clone(),
        })
    }

    /// 2-D cross-correlation (no kernel flip) with zero padding.
    ///
    /// `self` is `[n, c_in, h, w]`, `kernel` is `[c_out, c_in, kh, kw]`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self, TensorError> {
        self.expect_rank(4)?;
        kernel.expect_rank(4)?;
        if stride == 0 {
            return Err(TensorError::ZeroStride);
        }
        let (n, c_in, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (c_out, kc, kh, kw) = (
            kernel.shape[0],
            kernel.shape[1],
            kernel.shape[2],
            kernel.shape[3],
        );
        if kc != c_in {
            return Err(TensorError::ChannelMismatch {
                input: c_in,
                kernel: kc,
            });
        }
        let h_span = h + 2 * pad;
        let w_span = w + 2 * pad;
        if h_span < kh || w_span < kw {
            return Err(TensorError::EmptyConvOutput {
                input: self.shape.clone(),
                kernel: kernel.shape.clone(),
                stride,
                pad,
            });
        }
        let h_out = (h_span - kh) / stride + 1;
        let w_out = (w_span - kw) / stride + 1;
        let mut data = vec![0.0; n * c_out * h_out * w_out];
        for b in 0..n {
            for o in 0..c_out {
                for oy in 0..h_out {
                    for ox in 0..w_out {
                        let mut acc = 0.0;
                        for ci in 0..c_in {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let xi = ((b * c_in + ci) * h + iy as usize) * w + ix as usize;
                                    let ki = ((o * c_in + ci) * kh + ky) * kw + kx;
                                    acc += self.data[xi] * kernel.data[ki];
                                }
                            }
                        }
                        data[((b * c_out + o) * h_out + oy) * w_out + ox] = acc;
                    }
                }
            }
        }
        Tensor::new(vec![n, c_out, h_out, w_out], data)
    }

    fn broadcast_zip(
        &self,
        other: &Tensor,
        op: impl Fn(f64, f64) -> f64,
    ) -> Result<Self, TensorError> {
        if self.shape == other.shape {
            let data = self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| op(a, b))
                .collect();
            return Tensor::new(self.shape.clone(), data);
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape).ok_or_else(|| {
            TensorError::BroadcastMismatch {
                left: self.shape.clone(),
                right: other.shape.clone(),
            }
        })?;
        let n: usize = out_shape.iter().product();
        let mut data = vec![0.0; n];
        let mut index = vec![0usize; out_shape.len()];
        for (flat, slot) in data.iter_mut().enumerate() {
            decompose(flat, &out_shape, &mut index);
            let a = self.data[broadcast_flat(&index, &self.shape)];
            let b = other.data[broadcast_flat(&index, &other.shape)];
            *slot = op(a, b);
        }
        Tensor::new(out_shape, data)
    }

    pub fn add(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.broadcast_zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.broadcast_zip(other, |a, b| a - b)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Self, TensorError> {
        self.broadcast_zip(other, |a, b| a * b)
    }

    pub fn div(&self, other: &Tensor) -> Result<Self, TensorError> {
        if let Some((index, &value)) = other
            .data
            .iter()
            .enumerate()
            .find(|(_, v)| **v == 0.0)
        {
            let _ = value;
            return Err(TensorError::DivisionByZero { index });
        }
        self.broadcast_zip(other, |a, b| a / b)
    }

    pub fn add_scalar(&self, s: f64) -> Result<Self, TensorError> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&a| a + s).collect())
    }

    pub fn mul_scalar(&self, s: f64) -> Result<Self, TensorError> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|&a| a * s).collect())
    }

    pub fn div_scalar(&self, s: f64) -> Result<Self, TensorError> {
        if s == 0.0 {
            return Err(TensorError::DivisionByZero { index: 0 });
        }
        Tensor::new(self.shape.clone(), self.data.iter().map(|&a| a / s).collect())
    }

    pub fn relu(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&a| a.max(0.0)).collect(),
        }
    }

    pub fn exp(&self) -> Result<Self, TensorError> {
        Tensor::new(self.shape.clone(), self.data.iter().map(|a| a.exp()).collect())
    }

    pub fn ln(&self) -> Result<Self, TensorError> {
        if let Some((index, &value)) = self.data.iter().enumerate().find(|(_, v)| **v <= 0.0) {
            return Err(TensorError::LogDomain { value, index });
        }
        Tensor::new(self.shape.clone(), self.data.iter().map(|a| a.ln()).collect())
    }
}

/// Right-aligned broadcast shape of two shapes, or `None` if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let ea = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let eb = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if ea == eb {
            ea
        } else if ea == 1 {
            eb
        } else if eb == 1 {
            ea
        } else {
            return None;
        };
    }
    Some(out)
}

fn decompose(mut flat: usize, shape: &[usize], index: &mut [usize]) {
    for i in (0..shape.len()).rev() {
        index[i] = flat % shape[i];
        flat /= shape[i];
    }
}

/// Flat offset of a (possibly longer) broadcast index into `shape`.
fn broadcast_flat(index: &[usize], shape: &[usize]) -> usize {
    let offset = index.len() - shape.len();
    let mut flat = 0;
    for (i, &extent) in shape.iter().enumerate() {
        let ix = if extent == 1 { 0 } else { index[offset + i] };
        flat = flat * extent + ix;
    }
    flat
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn constructor_rejects_bad_input() {
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![1.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(
            Tensor::new(vec![2], vec![1.0, f64::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
        assert!(matches!(
            Tensor::new(vec![0, 2], vec![]),
            Err(TensorError::ZeroExtent { .. })
        ));
    }

    #[test]
    fn matmul_identity() {
        let id = t2(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(id.matmul(&b).unwrap(), b);
    }

    #[test]
    fn matmul_hand_case() {
        let a = t2(&[&[1.0, 2.0]]);
        let b = t2(&[&[3.0], &[4.0]]);
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[1, 1]);
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_dim_error_names_both_shapes() {
        let a = t2(&[&[1.0, 2.0]]);
        let b = t2(&[&[3.0, 4.0]]);
        let err = a.matmul(&b).unwrap_err();
        match err {
            TensorError::DimMismatch { left, right } => {
                assert_eq!(left, vec![1, 2]);
                assert_eq!(right, vec![1, 2]);
            }
            other => panic!("unexpected error: {other:?}"),
        }
    }

    #[test]
    fn channel_moments_hand_cases() {
        // two samples, one channel
        let x = t2(&[&[1.0], &[3.0]]);
        let stats = x.channel_moments(1).unwrap();
        assert_eq!(stats.mean(), &[2.0]);
        assert_eq!(stats.var(), &[1.0]);

        // constant tensor has zero variance
        let c = Tensor::new(vec![3, 2], vec![7.0; 6]).unwrap();
        let stats = c.channel_moments(1).unwrap();
        assert_eq!(stats.mean(), &[7.0, 7.0]);
        assert_eq!(stats.var(), &[0.0, 0.0]);

        // per-channel separation
        let x = t2(&[&[1.0, 10.0], &[3.0, 10.0]]);
        let stats = x.channel_moments(1).unwrap();
        assert_eq!(stats.mean(), &[2.0, 10.0]);
        assert_eq!(stats.var(), &[1.0, 0.0]);
    }

    #[test]
    fn channel_moments_axis_out_of_bounds() {
        let x = t2(&[&[1.0, 2.0]]);
        assert!(matches!(
            x.channel_moments(5),
            Err(TensorError::AxisOutOfBounds { axis: 5, rank: 2 })
        ));
    }

    #[test]
    fn conv2d_scaling_kernel() {
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_hand_case() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn conv2d_channel_mismatch() {
        let x = Tensor::ones(&[1, 3, 4, 4]);
        let k = Tensor::ones(&[1, 2, 3, 3]);
        assert!(matches!(
            x.conv2d(&k, 1, 0),
            Err(TensorError::ChannelMismatch { input: 3, kernel: 2 })
        ));
    }

    #[test]
    fn conv2d_empty_output() {
        let x = Tensor::ones(&[1, 1, 2, 2]);
        let k = Tensor::ones(&[1, 1, 5, 5]);
        assert!(matches!(
            x.conv2d(&k, 1, 0),
            Err(TensorError::EmptyConvOutput { .. })
        ));
    }

    #[test]
    fn conv2d_padding_and_stride() {
        // 1x1x3x3 ones, 2x2 ones kernel, stride 2, pad 1: corners see one cell
        let x = Tensor::ones(&[1, 1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 2, 2]);
        let y = x.conv2d(&k, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[1.0, 2.0, 2.0, 4.0]);
    }

    #[test]
    fn elementwise_basics() {
        let r = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap().relu();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);

        let a = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);

        let zero = Tensor::zeros(&[2]);
        assert!(matches!(
            a.div(&zero),
            Err(TensorError::DivisionByZero { .. })
        ));
        assert!(matches!(a.div_scalar(0.0), Err(TensorError::DivisionByZero { .. })));
    }

    #[test]
    fn broadcast_trailing_axes() {
        let x = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let bias = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        let y = x.add(&bias).unwrap();
        assert_eq!(y.data(), &[11.0, 22.0, 13.0, 24.0]);

        let bad = Tensor::new(vec![3], vec![0.0; 3]).unwrap();
        assert!(matches!(
            x.add(&bad),
            Err(TensorError::BroadcastMismatch { .. })
        ));
    }

    #[test]
    fn ln_domain_check() {
        let x = Tensor::new(vec![2], vec![1.0, -1.0]).unwrap();
        assert!(matches!(x.ln(), Err(TensorError::LogDomain { .. })));
    }

    #[test]
    fn serde_round_trip_validates() {
        let x = t2(&[&[1.5, -2.25]]);
        let json = serde_json::to_string(&x).unwrap();
        let back: Tensor = serde_json::from_str(&json).unwrap();
        assert_eq!(back, x);

        let bad = r#"{"shape":[2],"data":[1.0]}"#;
        assert!(serde_json::from_str::<Tensor>(bad).is_err());
    }
}
