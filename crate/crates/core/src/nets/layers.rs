use candle_core::{Tensor, D};

use super::params::{Param, ParamStore};
use crate::error::Result;

/// Leaky ReLU, slope 0.2.
pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.2)?)?)
}

pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok((x.neg()?.exp()? + 1.0)?.recip()?)
}

fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let c = bias.dim(0)?;
    Ok(x.broadcast_add(&bias.reshape((1, c, 1, 1))?)?)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Param,
    bias: Param,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    /// He-initialized square convolution; `std_scale = 0` gives a zero kernel.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        std_scale: f64,
    ) -> Result<Self> {
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = ps.normal(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            std_scale * (2.0 / fan_in).sqrt(),
        )?;
        let bias = ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self {
            weight,
            bias,
            stride,
            padding: kernel / 2,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight.t(), self.padding, self.stride, 1, 1)?;
        add_channel_bias(&y, &self.bias.t())
    }
}

/// Kernel-4, stride-2 transpose convolution (exact 2x upsampling).
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    weight: Param,
    bias: Param,
}

impl ConvTranspose2d {
    pub fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        let fan_in = (c_in * 4) as f64;
        let weight = ps.normal(&format!("{name}.weight"), &[c_in, c_out, 4, 4], (2.0 / fan_in).sqrt())?;
        let bias = ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv_transpose2d(&self.weight.t(), 1, 0, 2, 1)?;
        add_channel_bias(&y, &self.bias.t())
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Param,
    bias: Param,
}

impl Linear {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        std_scale: f64,
        bias_init: f64,
    ) -> Result<Self> {
        let weight = ps.normal(
            &format!("{name}.weight"),
            &[d_out, d_in],
            std_scale / (d_in as f64).sqrt(),
        )?;
        let bias = ps.constant(&format!("{name}.bias"), &[d_out], bias_init)?;
        Ok(Self { weight, bias })
    }

    /// `(B, d_in) -> (B, d_out)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t().t()?)?.broadcast_add(&self.bias.t())?)
    }
}

/// Style-modulated convolution: per-sample input scaling by an affine map of
/// the latent row, shared kernel, then optional per-sample demodulation.
/// Equivalent to convolving with the per-sample kernel `w * s` normalized to
/// unit norm per output channel.
#[derive(Debug, Clone)]
pub struct ModConv {
    affine: Linear,
    weight: Param,
    bias: Param,
    demodulate: bool,
    upsample: bool,
    padding: usize,
}

impl ModConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        latent_width: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        demodulate: bool,
        upsample: bool,
    ) -> Result<Self> {
        let affine = Linear::new(ps, &format!("{name}.affine"), latent_width, c_in, 1.0, 1.0)?;
        let fan_in = (c_in * kernel * kernel) as f64;
        let weight = ps.normal(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            if demodulate { 1.0 } else { 1.0 / fan_in.sqrt() },
        )?;
        let bias = ps.constant(&format!("{name}.bias"), &[c_out], 0.0)?;
        Ok(Self {
            affine,
            weight,
            bias,
            demodulate,
            upsample,
            padding: kernel / 2,
        })
    }

    /// `x: (B, c_in, H, W)`, `w_row: (B, D)`.
    pub fn forward(&self, x: &Tensor, w_row: &Tensor) -> Result<Tensor> {
        let (b, c_in, h, w) = x.dims4()?;
        let x = if self.upsample {
            x.upsample_nearest2d(2 * h, 2 * w)?
        } else {
            x.clone()
        };
        let style = self.affine.forward(w_row)?;
        let x = x.broadcast_mul(&style.reshape((b, c_in, 1, 1))?)?;
        let weight = self.weight.t();
        let mut y = x.conv2d(&weight, self.padding, 1, 1, 1)?;
        if self.demodulate {
            // sum over (c_in, k, k) of (w * s)^2 = s^2 @ sum_k(w^2)^T
            let wsq = weight.sqr()?.sum((2, 3))?;
            let norm = style.sqr()?.matmul(&wsq.t()?)?;
            let demod = (norm + 1e-8)?.sqrt()?.recip()?;
            let c_out = demod.dim(D::Minus1)?;
            y = y.broadcast_mul(&demod.reshape((b, c_out, 1, 1))?)?;
        }
        add_channel_bias(&y, &self.bias.t())
    }
}

/// `log2(size)` stride-2 convolutions down to 1x1, then a linear map to one
/// latent row.
#[derive(Debug, Clone)]
pub struct MapToStyle {
    convs: Vec<Conv2d>,
    out: Linear,
}

impl MapToStyle {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        channels: usize,
        size: usize,
        latent_width: usize,
        zero_out: bool,
    ) -> Result<Self> {
        let steps = size.trailing_zeros() as usize;
        let convs = (0..steps)
            .map(|i| Conv2d::new(ps, &format!("{name}.conv{i}"), channels, channels, 3, 2, 1.0))
            .collect::<Result<Vec<_>>>()?;
        let scale = if zero_out { 0.0 } else { 1.0 };
        let out = Linear::new(ps, &format!("{name}.out"), channels, latent_width, scale, 0.0)?;
        Ok(Self { convs, out })
    }

    /// `(B, C, S, S) -> (B, D)`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = lrelu(&conv.forward(&h)?)?;
        }
        let b = h.dim(0)?;
        let c = h.dim(1)?;
        self.out.forward(&h.reshape((b, c))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    #[test]
    fn lrelu_matches_definition() {
        let x = Tensor::new(&[-2.0f64, -0.5, 0.0, 0.5, 3.0], &Device::Cpu).unwrap();
        let y = lrelu(&x).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-0.4, -0.1, 0.0, 0.5, 3.0]);
    }

    #[test]
    fn shapes() {
        let dev = Device::Cpu;
        let mut ps = ParamStore::new("t", 1, DType::F64, &dev);
        let x = Tensor::ones((2, 3, 8, 8), DType::F64, &dev).unwrap();
        let down = Conv2d::new(&mut ps, "down", 3, 5, 3, 2, 1.0).unwrap();
        assert_eq!(down.forward(&x).unwrap().dims(), &[2, 5, 4, 4]);
        let up = ConvTranspose2d::new(&mut ps, "up", 3, 4).unwrap();
        assert_eq!(up.forward(&x).unwrap().dims(), &[2, 4, 16, 16]);
        let w = Tensor::ones((2, 6), DType::F64, &dev).unwrap();
        let mc = ModConv::new(&mut ps, "mc", 6, 3, 7, 3, true, true).unwrap();
        assert_eq!(mc.forward(&x, &w).unwrap().dims(), &[2, 7, 16, 16]);
        let head = MapToStyle::new(&mut ps, "head", 3, 8, 6, false).unwrap();
        assert_eq!(head.forward(&x).unwrap().dims(), &[2, 6]);
    }
}
