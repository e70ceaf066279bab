//! Parameterized layers built on the tape.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Shape;

/// Stride-1, shape-preserving 2-D convolution with bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Conv2d {
    /// Registers `{name}.weight` (fan-in uniform or zero) and a zero `{name}.bias`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        weight_init: Init,
    ) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!("{name}: kernel size {kernel} is even")));
        }
        let weight = store.add(
            &format!("{name}.weight"),
            Shape::new(out_channels, in_channels, kernel, kernel),
            weight_init,
        )?;
        let bias = store.add(
            &format!("{name}.bias"),
            Shape::new(1, out_channels, 1, 1),
            Init::Constant(0.0),
        )?;
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let c = tape.shape(x).c;
        if c != self.in_channels {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("expected {} input channels, got {c}", self.in_channels),
            });
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.conv2d(x, w, Some(b))
    }

    pub fn param_ids(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// Channel MLP `C -> C/r -> C` with a ReLU in between, applied to N×C×1×1
/// descriptors. Both maps are stored as 1×1 convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelMlp {
    pub reduce: Conv2d,
    pub expand: Conv2d,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelMlp {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || !channels.is_multiple_of(reduction) {
            return Err(Error::InvalidArgument(format!(
                "{name}: {channels} channels not divisible by reduction {reduction}"
            )));
        }
        let hidden = channels / reduction;
        Ok(ChannelMlp {
            reduce: Conv2d::new(store, &format!("{name}.fc1"), channels, hidden, 1, Init::FanInUniform)?,
            expand: Conv2d::new(store, &format!("{name}.fc2"), hidden, channels, 1, Init::FanInUniform)?,
            channels,
            reduction,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        if s.c != self.channels || s.h != 1 || s.w != 1 {
            return Err(Error::InvalidShape {
                op: "channel_mlp",
                msg: format!("expected N×{}×1×1, got {s}", self.channels),
            });
        }
        let h = self.reduce.forward(tape, store, x)?;
        let h = tape.relu(h);
        self.expand.forward(tape, store, h)
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        let [a, b] = self.reduce.param_ids();
        let [c, d] = self.expand.param_ids();
        [a, b, c, d]
    }
}

/// Fully connected projection over the channel vector at every location.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseHead {
    pub linear: Conv2d,
}

impl DenseHead {
    pub fn new(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize) -> Result<Self> {
        Ok(DenseHead {
            linear: Conv2d::new(store, name, in_features, out_features, 1, Init::FanInUniform)?,
        })
    }

    pub fn out_features(&self) -> usize {
        self.linear.out_channels
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.linear.forward(tape, store, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn identity_1x1_conv_passes_input_through() {
        let mut store = ParamStore::new(0);
        let conv = Conv2d::new(&mut store, "c", 3, 3, 1, Init::Constant(0.0)).unwrap();
        let w = store.tensor_mut(conv.weight).data_mut();
        for c in 0..3 {
            w[c * 3 + c] = 1.0;
        }
        let x = Tensor::from_fn(Shape::new(2, 3, 4, 5), |n, c, y, x| {
            (n * 60 + c * 20 + y * 5 + x) as f64 - 30.0
        });
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = conv.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn ones_kernel_on_constant_input() {
        let mut store = ParamStore::new(0);
        let conv = Conv2d::new(&mut store, "c", 1, 1, 3, Init::Constant(1.0)).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::full(Shape::new(1, 1, 5, 5), 2.5));
        let y = conv.forward(&mut tape, &store, xv).unwrap();
        let out = tape.value(y);
        assert_eq!(out.get(0, 0, 2, 2), 9.0 * 2.5);
        // Corners see only a 2×2 patch of the input.
        assert_eq!(out.get(0, 0, 0, 0), 4.0 * 2.5);
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut store = ParamStore::new(0);
        let conv = Conv2d::new(&mut store, "c", 2, 2, 3, Init::FanInUniform).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(Shape::new(1, 3, 4, 4)));
        assert!(conv.forward(&mut tape, &store, xv).is_err());
        assert!(Conv2d::new(&mut store, "even", 2, 2, 2, Init::FanInUniform).is_err());
    }

    #[test]
    fn channel_mlp_zero_weights_give_zero() {
        let mut store = ParamStore::new(0);
        let mlp = ChannelMlp::new(&mut store, "m", 4, 2).unwrap();
        for id in mlp.param_ids() {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::from_fn(Shape::new(2, 4, 1, 1), |n, c, _, _| {
            (n + c) as f64 - 2.0
        }));
        let y = mlp.forward(&mut tape, &store, xv).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn channel_mlp_identity_configuration() {
        let mut store = ParamStore::new(0);
        let mlp = ChannelMlp::new(&mut store, "m", 3, 1).unwrap();
        for conv in [mlp.reduce, mlp.expand] {
            let w = store.tensor_mut(conv.weight).data_mut();
            w.iter_mut().for_each(|v| *v = 0.0);
            for c in 0..3 {
                w[c * 3 + c] = 1.0;
            }
        }
        let x = Tensor::from_vec(Shape::new(1, 3, 1, 1), vec![0.0, 1.5, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = mlp.forward(&mut tape, &store, xv).unwrap();
        assert_eq!(tape.value(y).data(), x.data());
    }

    #[test]
    fn channel_mlp_checks_shape_and_ratio() {
        let mut store = ParamStore::new(0);
        assert!(ChannelMlp::new(&mut store, "bad", 6, 4).is_err());
        let mlp = ChannelMlp::new(&mut store, "m", 4, 4).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::zeros(Shape::new(1, 4, 2, 2)));
        assert!(mlp.forward(&mut tape, &store, xv).is_err());
    }
}
