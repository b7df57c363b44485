//! Dense NCHW tensors and the convolution descriptor shared by kernels,
//! blocks and the cost ledger.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element precision selectable per run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F32,
    F64,
}

impl DType {
    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "f32",
            DType::F64 => "f64",
        }
    }

    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl std::str::FromStr for DType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(DType::F32),
            "f64" => Ok(DType::F64),
            other => Err(Error::config(format!("unknown dtype `{other}`"))),
        }
    }
}

/// Floating-point element type of a [`Tensor`].
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Send
    + Sync
    + fmt::Debug
    + fmt::Display
    + 'static
{
    const DTYPE: DType;

    fn of(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: DType = DType::F32;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: DType = DType::F64;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// (batch, channels, height, width).
pub type Shape = [usize; 4];

/// Dense row-major NCHW array with an optional gradient buffer of the same shape.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        let numel = numel(shape);
        if data.len() != numel {
            return Err(Error::config(format!(
                "tensor data length {} does not match shape {:?} ({} elements)",
                data.len(),
                shape,
                numel
            )));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; numel(shape)],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Builds a tensor by evaluating `f(n, c, h, w)` at every index.
    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(numel(shape));
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Tensor {
            shape,
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn height(&self) -> usize {
        self.shape[2]
    }

    pub fn width(&self) -> usize {
        self.shape[3]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::config(format!(
                "gradient length {} does not match tensor of shape {:?}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    /// Adds `delta` into the gradient buffer, creating it if needed.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        debug_assert_eq!(delta.len(), self.data.len());
        match &mut self.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(g, d)| *g += *d),
            None => self.grad = Some(delta.to_vec()),
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<T>> {
        self.grad.take()
    }

    #[inline]
    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + c) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::config(format!(
                "cannot reshape {:?} into {:?}",
                self.shape, shape
            )));
        }
        self.shape = shape;
        self.grad = None;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
            grad: None,
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| U::of(v.to_f64_lossy())).collect(),
            grad: None,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Copies batch item `n` into a new (1, C, H, W) tensor.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: [1, self.shape[1], self.shape[2], self.shape[3]],
            data: self.data[n * per..(n + 1) * per].to_vec(),
            grad: None,
        }
    }

    /// Concatenates tensors of identical (C, H, W) along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::config("cannot stack an empty list"))?;
        let [_, c, h, w] = first.shape;
        let mut data = Vec::with_capacity(items.iter().map(|t| t.numel()).sum());
        let mut n = 0;
        for t in items {
            if t.shape[1..] != [c, h, w] {
                return Err(Error::config(format!(
                    "cannot stack {:?} with {:?}",
                    first.shape, t.shape
                )));
            }
            n += t.shape[0];
            data.extend_from_slice(&t.data);
        }
        Tensor::new([n, c, h, w], data)
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64_lossy() - b.to_f64_lossy()).abs())
            .fold(0.0, f64::max)
    }
}

impl<T: Scalar> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("dtype", &T::DTYPE)
            .field("has_grad", &self.grad.is_some())
            .finish()
    }
}

pub fn numel(shape: Shape) -> usize {
    shape.iter().product()
}

/// Convolution hyper-parameters. Weights are laid out as
/// `(out_channels, in_channels / groups, kh, kw)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub has_bias: bool,
}

impl ConvSpec {
    /// Square `k`×`k` kernel, stride 1, same-style padding `k / 2`, no bias.
    pub fn new(in_channels: usize, out_channels: usize, k: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel: (k, k),
            stride: 1,
            padding: k / 2,
            groups: 1,
            has_bias: false,
        }
    }

    pub fn pointwise(in_channels: usize, out_channels: usize) -> Self {
        Self::new(in_channels, out_channels, 1)
    }

    pub fn depthwise(channels: usize, k: usize, stride: usize) -> Self {
        Self::new(channels, channels, k).stride(stride).groups(channels)
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn bias(mut self, has_bias: bool) -> Self {
        self.has_bias = has_bias;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (kh, kw) = self.kernel;
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return Err(Error::config(format!("conv with zero channels or groups: {self:?}")));
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return Err(Error::config(format!(
                "conv channels {}->{} not divisible by groups {}",
                self.in_channels, self.out_channels, self.groups
            )));
        }
        if kh == 0 || kw == 0 || self.stride == 0 {
            return Err(Error::config(format!("conv kernel and stride must be >= 1: {self:?}")));
        }
        Ok(())
    }

    pub fn weight_shape(&self) -> Shape {
        [
            self.out_channels,
            self.in_channels / self.groups,
            self.kernel.0,
            self.kernel.1,
        ]
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1)
    }

    /// floor((size + 2·padding − k) / stride) + 1 per axis.
    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel;
        let ph = h + 2 * self.padding;
        let pw = w + 2 * self.padding;
        if ph < kh || pw < kw {
            return Err(Error::config(format!(
                "input {h}x{w} (padding {}) smaller than kernel {kh}x{kw}",
                self.padding
            )));
        }
        Ok(((ph - kh) / self.stride + 1, (pw - kw) / self.stride + 1))
    }

    /// Multiply-accumulates per sample for an output of `h_out`×`w_out`.
    pub fn macs(&self, h_out: usize, w_out: usize) -> u64 {
        let (kh, kw) = self.kernel;
        (kh * kw * (self.in_channels / self.groups) * self.out_channels * h_out * w_out) as u64
    }

    pub fn param_count(&self) -> u64 {
        let w: usize = self.weight_shape().iter().product();
        (w + if self.has_bias { self.out_channels } else { 0 }) as u64
    }
}
