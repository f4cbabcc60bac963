use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    FanIn(usize),
    Zeros,
}

/// Supplies parameter tensors while a model is being built.
pub trait ParamSource {
    fn tensor(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor>;
}

pub struct RandomInit<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
}

impl ParamSource for RandomInit<'_> {
    fn tensor(&mut self, _name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::FanIn(fan_in) => {
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| self.rng.random_range(-bound..bound)).collect()
            }
        };
        Ok(Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?)
    }
}

/// Rebuilds a model from previously stored tensors, checking names and shapes.
pub struct StoredParams {
    pub tensors: HashMap<String, Tensor>,
    pub dtype: DType,
}

impl ParamSource for StoredParams {
    fn tensor(&mut self, name: &str, shape: &[usize], _init: Init) -> Result<Tensor> {
        let t = self
            .tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if t.dims() != shape {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {shape:?}",
                t.dims()
            )));
        }
        Ok(t.to_dtype(self.dtype)?)
    }
}

pub(crate) fn var(src: &mut dyn ParamSource, name: &str, shape: &[usize], init: Init) -> Result<Var> {
    Ok(Var::from_tensor(&src.tensor(name, shape, init)?)?)
}

pub type NamedVar = (String, Var);

#[derive(Debug, Clone)]
pub struct Linear {
    name: String,
    w: Var,
    b: Var,
}

impl Linear {
    pub fn build(src: &mut dyn ParamSource, name: &str, input: usize, output: usize, zero: bool) -> Result<Self> {
        let init = if zero { Init::Zeros } else { Init::FanIn(input) };
        Ok(Self {
            name: name.to_string(),
            w: var(src, &format!("{name}.weight"), &[output, input], init)?,
            b: var(src, &format!("{name}.bias"), &[output], init)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.w.t()?)?.broadcast_add(&self.b)?)
    }

    pub fn collect(&self, out: &mut Vec<NamedVar>) {
        out.push((format!("{}.weight", self.name), self.w.clone()));
        out.push((format!("{}.bias", self.name), self.b.clone()));
    }
}

/// Odd-kernel 1-D convolution with "same"-style padding, so the output length is
/// `ceil(len / stride)`.
#[derive(Debug, Clone)]
pub struct Conv1d {
    name: String,
    w: Var,
    b: Var,
    stride: usize,
}

impl Conv1d {
    pub fn build(
        src: &mut dyn ParamSource,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let init = Init::FanIn(input * kernel);
        Ok(Self {
            name: name.to_string(),
            w: var(src, &format!("{name}.weight"), &[output, input, kernel], init)?,
            b: var(src, &format!("{name}.bias"), &[output], init)?,
            stride,
        })
    }

    fn kernel(&self) -> usize {
        self.w.dims()[2]
    }

    /// im2col plus a matmul; candle's native conv1d backward returns wrong
    /// kernel gradients.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, cin, len) = x.dims3()?;
        let (cout, k) = (self.w.dims()[0], self.kernel());
        let pad = k / 2;
        let lout = conv_out_len(len, self.stride);
        let xp = x.pad_with_zeros(2, pad, pad)?;
        let idx: Vec<u32> = (0..lout)
            .flat_map(|t| (0..k).map(move |j| (t * self.stride + j) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, lout * k, x.device())?;
        let cols = xp
            .index_select(&idx, 2)?
            .reshape((b, cin, lout, k))?
            .permute((0, 2, 1, 3))?
            .reshape((b * lout, cin * k))?;
        let y = cols.matmul(&self.w.reshape((cout, cin * k))?.t()?)?;
        Ok(y.broadcast_add(&self.b)?.reshape((b, lout, cout))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn collect(&self, out: &mut Vec<NamedVar>) {
        out.push((format!("{}.weight", self.name), self.w.clone()));
        out.push((format!("{}.bias", self.name), self.b.clone()));
    }
}

/// Transposed convolution expressed as zero insertion followed by a stride-1
/// convolution, then cropped to `target_len`.
#[derive(Debug, Clone)]
pub struct UpConv1d {
    conv: Conv1d,
    factor: usize,
}

impl UpConv1d {
    pub fn build(
        src: &mut dyn ParamSource,
        name: &str,
        input: usize,
        output: usize,
        kernel: usize,
        factor: usize,
    ) -> Result<Self> {
        Ok(Self {
            conv: Conv1d::build(src, name, input, output, kernel, 1)?,
            factor,
        })
    }

    pub fn forward(&self, x: &Tensor, target_len: usize) -> Result<Tensor> {
        let (b, c, l) = x.dims3()?;
        let stuffed = if self.factor > 1 {
            let zeros = Tensor::zeros((b, c, l, self.factor - 1), x.dtype(), x.device())?;
            Tensor::cat(&[&x.unsqueeze(3)?, &zeros], 3)?.reshape((b, c, l * self.factor))?
        } else {
            x.clone()
        };
        let y = self.conv.forward(&stuffed)?;
        Ok(y.narrow(2, 0, target_len)?)
    }

    pub fn collect(&self, out: &mut Vec<NamedVar>) {
        self.conv.collect(out)
    }
}

pub fn conv_out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}
