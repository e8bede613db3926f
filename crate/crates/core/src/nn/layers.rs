use candle_core::{Tensor, Var, D};

use super::{Init, Mode, Scope};
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub bias: bool,
}

impl Conv2dSpec {
    /// Stride 1, "same" padding for odd kernels.
    pub fn same(kernel: usize) -> Self {
        Self { kernel, stride: 1, padding: kernel / 2, dilation: 1, bias: false }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.padding = dilation * (self.kernel / 2);
        self.dilation = dilation;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn with_bias(mut self) -> Self {
        self.bias = true;
        self
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Var,
    pub bias: Option<Var>,
    pub spec: Conv2dSpec,
}

impl Conv2d {
    /// He-normal (fan-out) weights, zero bias.
    pub fn new(vs: &Scope, c_in: usize, c_out: usize, spec: Conv2dSpec) -> Result<Self> {
        let k = spec.kernel;
        Self::with_std(vs, c_in, c_out, spec, (2.0 / (c_out * k * k) as f64).sqrt())
    }

    /// Normal weights with the given standard deviation, zero bias.
    pub fn with_std(vs: &Scope, c_in: usize, c_out: usize, spec: Conv2dSpec, std: f64) -> Result<Self> {
        let k = spec.kernel;
        let weight = vs.param("weight", (c_out, c_in, k, k), Init::Normal { std })?;
        let bias = if spec.bias { Some(vs.param("bias", c_out, Init::Zeros)?) } else { None };
        Ok(Self { weight, bias, spec })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let s = &self.spec;
        let y = x.conv2d(self.weight.as_tensor(), s.padding, s.stride, s.dilation, 1)?;
        match &self.bias {
            Some(b) => Ok(y.broadcast_add(&b.as_tensor().reshape((1, (), 1, 1))?)?),
            None => Ok(y),
        }
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub weight: Var,
    pub bias: Var,
    pub running_mean: Var,
    pub running_var: Var,
    eps: f64,
    momentum: f64,
}

impl BatchNorm2d {
    pub fn new(vs: &Scope, channels: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.param("weight", channels, Init::Ones)?,
            bias: vs.param("bias", channels, Init::Zeros)?,
            running_mean: vs.buffer("running_mean", channels, Init::Zeros)?,
            running_var: vs.buffer("running_var", channels, Init::Ones)?,
            eps: 1e-5,
            momentum: 0.1,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let shape4 = |t: &Tensor| t.reshape((1, (), 1, 1));
        let (b, _, h, w) = x.dims4()?;
        let (mean, var) = match mode {
            Mode::Train => {
                let mean = x.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let centered = x.broadcast_sub(&mean)?;
                let var = centered.sqr()?.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
                let n = (b * h * w) as f64;
                let unbiased = (var.detach() * (n / (n - 1.0).max(1.0)))?.flatten_all()?;
                let m = self.momentum;
                let rm = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean.detach().flatten_all()? * m)?)?;
                let rv = ((self.running_var.as_tensor() * (1.0 - m))? + (unbiased * m)?)?;
                self.running_mean.set(&rm)?;
                self.running_var.set(&rv)?;
                (mean, var)
            }
            Mode::Eval => (
                shape4(self.running_mean.as_tensor())?,
                shape4(self.running_var.as_tensor())?,
            ),
        };
        let xhat = x.broadcast_sub(&mean)?.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(&shape4(self.weight.as_tensor())?)?
            .broadcast_add(&shape4(self.bias.as_tensor())?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    /// `[out x in]`
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    /// Uniform `+-1/sqrt(in)` initialization.
    pub fn new(vs: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        let bound = 1.0 / (c_in as f64).sqrt();
        Ok(Self {
            weight: vs.param("weight", (c_out, c_in), Init::Uniform { bound })?,
            bias: vs.param("bias", c_out, Init::Uniform { bound })?,
        })
    }

    /// Applies to the last dimension of `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x
            .broadcast_matmul(&self.weight.as_tensor().t()?)?
            .broadcast_add(self.bias.as_tensor())?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Var,
    pub bias: Var,
    eps: f64,
}

impl LayerNorm {
    pub fn new(vs: &Scope, dim: usize) -> Result<Self> {
        Ok(Self {
            weight: vs.param("weight", dim, Init::Ones)?,
            bias: vs.param("bias", dim, Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let xhat = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(xhat
            .broadcast_mul(self.weight.as_tensor())?
            .broadcast_add(self.bias.as_tensor())?)
    }
}
