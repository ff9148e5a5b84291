//! Convolutional building blocks, pooling and initialisation.

mod conv;
pub mod init;
mod pool;

pub use conv::{conv_output_dim, conv_transpose_output_dim};
pub use init::{derive_seed, xavier_init};
pub use pool::PoolKind;

use crate::error::{Error, Result};
use crate::graph::{Graph, ParamStore, Var};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: Padding,
    pub in_channels: usize,
    pub out_channels: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Square kernel, stride 1, same padding, with bias.
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        ConvSpec {
            kernel: (kernel, kernel),
            stride: (1, 1),
            padding: Padding::Same,
            in_channels,
            out_channels,
            bias: true,
        }
    }

    pub fn stride(mut self, s: usize) -> Self {
        self.stride = (s, s);
        self
    }

    pub fn padding(mut self, p: Padding) -> Self {
        self.padding = p;
        self
    }

    pub fn without_bias(mut self) -> Self {
        self.bias = false;
        self
    }

    fn validate_common(&self) -> Result<()> {
        if self.stride.0 == 0 || self.stride.1 == 0 {
            return Err(Error::config("stride", "must be >= 1"));
        }
        if self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::config("kernel", "must be >= 1"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("channels", "must be >= 1"));
        }
        Ok(())
    }

    /// Same padding is only exact for odd kernels.
    pub fn validate_conv(&self) -> Result<()> {
        self.validate_common()?;
        if self.padding == Padding::Same
            && (self.kernel.0.is_multiple_of(2) || self.kernel.1.is_multiple_of(2))
        {
            return Err(Error::config(
                "kernel",
                format!("{:?} must be odd with same padding", self.kernel),
            ));
        }
        Ok(())
    }

    pub fn validate_transposed(&self) -> Result<()> {
        self.validate_common()?;
        if self.padding == Padding::Same
            && (self.kernel.0 < self.stride.0 || self.kernel.1 < self.stride.1)
        {
            return Err(Error::config(
                "kernel",
                "transposed kernel must cover the stride",
            ));
        }
        Ok(())
    }

    /// Kernel for an upsampling transposed conv with stride `s`: `2s × 2s`.
    pub fn upsampling(in_channels: usize, out_channels: usize, s: usize) -> Self {
        ConvSpec::new(in_channels, out_channels, 2 * s).stride(s)
    }
}

/// A convolution whose weights live in a [`ParamStore`] under `prefix/w`
/// and `prefix/b`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub spec: ConvSpec,
    pub weight: String,
    pub bias: Option<String>,
}

impl Conv2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: ConvSpec,
        seed: u64,
    ) -> Result<Self> {
        spec.validate_conv()?;
        let shape = [
            spec.kernel.0,
            spec.kernel.1,
            spec.in_channels,
            spec.out_channels,
        ];
        let (weight, bias) = register(store, prefix, &shape, spec.bias, spec.out_channels, seed)?;
        Ok(Conv2d { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let cin = *g.shape(x).last().unwrap();
        if cin != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.spec.in_channels],
            });
        }
        let w = g.param_named(store, &self.weight)?;
        let b = self
            .bias
            .as_ref()
            .map(|b| g.param_named(store, b))
            .transpose()?;
        g.conv2d(x, w, b, self.spec.stride, self.spec.padding)
    }
}

/// A transposed convolution with weights `[kh, kw, out, in]`.
#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub spec: ConvSpec,
    pub weight: String,
    pub bias: Option<String>,
}

impl ConvTranspose2d {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: ConvSpec,
        seed: u64,
    ) -> Result<Self> {
        spec.validate_transposed()?;
        let shape = [
            spec.kernel.0,
            spec.kernel.1,
            spec.out_channels,
            spec.in_channels,
        ];
        let (weight, bias) = register(store, prefix, &shape, spec.bias, spec.out_channels, seed)?;
        Ok(ConvTranspose2d { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let cin = *g.shape(x).last().unwrap();
        if cin != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "conv_transpose2d",
                lhs: g.shape(x).to_vec(),
                rhs: vec![self.spec.in_channels],
            });
        }
        let w = g.param_named(store, &self.weight)?;
        let b = self
            .bias
            .as_ref()
            .map(|b| g.param_named(store, b))
            .transpose()?;
        g.conv_transpose2d(x, w, b, self.spec.stride, self.spec.padding)
    }
}

fn register<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    shape: &[usize],
    bias: bool,
    out_channels: usize,
    seed: u64,
) -> Result<(String, Option<String>)> {
    let weight = format!("{prefix}/w");
    store.insert(
        weight.clone(),
        xavier_init(shape, derive_seed(seed, &weight))?,
    )?;
    let bias = if bias {
        let b = format!("{prefix}/b");
        store.insert(b.clone(), Tensor::zeros([out_channels]))?;
        Some(b)
    } else {
        None
    };
    Ok((weight, bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_requires_odd_kernel() {
        assert!(ConvSpec::new(1, 1, 2).validate_conv().is_err());
        assert!(ConvSpec::new(1, 1, 3).validate_conv().is_ok());
        assert!(ConvSpec::new(1, 1, 2)
            .padding(Padding::Valid)
            .validate_conv()
            .is_ok());
        assert!(ConvSpec::new(1, 1, 3).stride(0).validate_conv().is_err());
    }

    #[test]
    fn layers_register_params() {
        let mut store = ParamStore::<f32>::new();
        let c = Conv2d::new(&mut store, "a", ConvSpec::new(3, 8, 3), 0).unwrap();
        let t = ConvTranspose2d::new(&mut store, "b", ConvSpec::upsampling(8, 4, 2), 0).unwrap();
        assert_eq!(store.get(&c.weight).unwrap().value.shape(), &[3, 3, 3, 8]);
        assert_eq!(store.get(&t.weight).unwrap().value.shape(), &[4, 4, 4, 8]);
        assert_eq!(store.len(), 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros([1, 4, 4, 3]));
        let y = c.forward(&mut g, &store, x).unwrap();
        let z = t.forward(&mut g, &store, y).unwrap();
        assert_eq!(g.shape(z), &[1, 8, 8, 4]);
        assert!(t.forward(&mut g, &store, x).is_err());
    }
}
