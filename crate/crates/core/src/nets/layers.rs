use rand::Rng;

use crate::tensor::{Graph, Mode, ParamSet, Var};

pub const LEAK: f64 = 0.2;

/// Square-kernel convolution with bias; weights `[k*k*cin, cout]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(name: impl Into<String>, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            cin,
            cout,
            k: 3,
            stride,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet<f32>, rng: &mut R) {
        let fan_in = self.k * self.k * self.cin;
        params.insert_he(
            &format!("{}.w", self.name),
            &[fan_in, self.cout],
            fan_in,
            rng,
        );
        params.insert(
            format!("{}.b", self.name),
            crate::tensor::Array::zeros(&[self.cout]),
        );
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<f32>,
        params: &ParamSet<f32>,
        x: Var<'g, f32>,
        mode: Mode,
    ) -> Var<'g, f32> {
        let w = params.bind(g, &format!("{}.w", self.name), mode);
        let b = params.bind(g, &format!("{}.b", self.name), mode);
        x.conv2d(w, self.k, self.stride, self.k / 2).add_bias(b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Linear {
    pub name: String,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, din: usize, dout: usize) -> Self {
        Self {
            name: name.into(),
            din,
            dout,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet<f32>, rng: &mut R, gain: f64) {
        let std = gain * (1.0 / self.din as f64).sqrt();
        params.insert(
            format!("{}.w", self.name),
            crate::tensor::Array::randn(&[self.din, self.dout], std, rng),
        );
        params.insert(
            format!("{}.b", self.name),
            crate::tensor::Array::zeros(&[self.dout]),
        );
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<f32>,
        params: &ParamSet<f32>,
        x: Var<'g, f32>,
        mode: Mode,
    ) -> Var<'g, f32> {
        let w = params.bind(g, &format!("{}.w", self.name), mode);
        let b = params.bind(g, &format!("{}.b", self.name), mode);
        x.matmul(w).add_bias(b)
    }

    /// Zeroes weight and bias so the layer outputs 0 for every input.
    pub fn zero(&self, params: &mut ParamSet<f32>) {
        for suffix in ["w", "b"] {
            if let Some(a) = params.get_mut(&format!("{}.{suffix}", self.name)) {
                a.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
    }
}

/// Stride-2 convolution stack, `stages` deep, followed by a flatten.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Backbone {
    pub convs: Vec<Conv>,
    pub out_features: usize,
}

impl Backbone {
    pub fn new(in_channels: usize, widths: &[usize], image_size: usize) -> Self {
        let mut cin = in_channels;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv::new(format!("down{i}"), cin, w, 2);
                cin = w;
                c
            })
            .collect();
        let bottom = image_size >> widths.len();
        Self {
            convs,
            out_features: bottom * bottom * cin,
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParamSet<f32>, rng: &mut R) {
        for c in &self.convs {
            c.init(params, rng);
        }
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph<f32>,
        params: &ParamSet<f32>,
        x: Var<'g, f32>,
        mode: Mode,
    ) -> Var<'g, f32> {
        self.convs
            .iter()
            .fold(x, |h, c| c.forward(g, params, h, mode).leaky_relu(LEAK))
            .flatten()
    }
}
