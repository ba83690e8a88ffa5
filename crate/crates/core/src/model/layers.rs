//! Parameterised building blocks registered into a shared [`ParamStore`].

use normdiff_autograd::{ParamId, ParamStore, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub(crate) const NORM_EPS: f32 = 1e-5;

/// Registers parameters in a fixed order with seeded initialisation.
pub(crate) struct Builder<'s> {
    pub store: &'s mut ParamStore,
    pub rng: ChaCha8Rng,
}

impl Builder<'_> {
    fn uniform(&mut self, shape: &[usize], bound: f32) -> Tensor {
        Tensor::uniform(shape.to_vec(), -bound, bound, &mut self.rng)
    }

    pub fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Conv {
        let bound = (3.0 / (cin * k * k) as f32).sqrt();
        let w = self.uniform(&[cout, cin, k, k], bound);
        Conv {
            w: self.store.add(format!("{name}.w"), w),
            stride,
            pad: k / 2,
        }
    }

    pub fn norm(&mut self, name: &str, channels: usize, groups: usize) -> Norm {
        Norm {
            gamma: self
                .store
                .add(format!("{name}.gamma"), Tensor::full([channels], 1.0)),
            beta: self.store.add(format!("{name}.beta"), Tensor::zeros([channels])),
            groups,
        }
    }

    /// Dense layer with weights scaled by `gain` relative to the variance-preserving default.
    pub fn dense(&mut self, name: &str, fin: usize, fout: usize, gain: f32) -> Dense {
        let bound = gain * (3.0 / fin as f32).sqrt();
        let w = self.uniform(&[fin, fout], bound);
        Dense {
            w: self.store.add(format!("{name}.w"), w),
            b: self.store.add(format!("{name}.b"), Tensor::zeros([fout])),
        }
    }

    pub fn bias(&mut self, name: &str, channels: usize) -> ParamId {
        self.store.add(format!("{name}.b"), Tensor::zeros([channels]))
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ps: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        Ok(tape.conv2d(x, w, self.stride, self.pad)?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub groups: usize,
}

impl Norm {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ps: &'a ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(ps, self.gamma);
        let b = tape.param(ps, self.beta);
        Ok(tape.group_norm(x, self.groups, g, b, NORM_EPS)?)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Dense {
    pub w: ParamId,
    pub b: ParamId,
}

impl Dense {
    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ps: &'a ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(ps, self.w);
        let b = tape.param(ps, self.b);
        Ok(tape.linear(x, w, b)?)
    }
}

/// conv → group norm → SiLU.
#[derive(Clone, Debug)]
pub(crate) struct ConvNormAct {
    pub conv: Conv,
    pub norm: Norm,
}

impl ConvNormAct {
    pub fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, stride: usize, groups: usize) -> Self {
        Self {
            conv: b.conv(&format!("{name}.conv"), cin, cout, 3, stride),
            norm: b.norm(&format!("{name}.norm"), cout, groups),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ps: &'a ParamStore, x: Var) -> Result<Var> {
        let h = self.conv.forward(tape, ps, x)?;
        let h = self.norm.forward(tape, ps, h)?;
        Ok(tape.silu(h)?)
    }
}

/// Two-layer MLP applied to a fixed sinusoidal embedding.
#[derive(Clone, Debug)]
pub(crate) struct EmbedMlp {
    pub first: Dense,
    pub second: Dense,
}

impl EmbedMlp {
    pub fn new(b: &mut Builder<'_>, name: &str, fin: usize, width: usize) -> Self {
        Self {
            first: b.dense(&format!("{name}.0"), fin, width, 1.0),
            second: b.dense(&format!("{name}.1"), width, width, 1.0),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ps: &'a ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, ps, x)?;
        let h = tape.silu(h)?;
        self.second.forward(tape, ps, h)
    }
}

/// Transformer-style sinusoidal features of integer timesteps: `[N, dim]`.
pub(crate) fn timestep_embedding(ts: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(ts.len() * dim);
    for &t in ts {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).sin() as f32);
        }
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
            data.push((t as f64 * freq).cos() as f32);
        }
    }
    Tensor::new([ts.len(), dim], data).expect("embedding shape")
}

/// Fourier features of a standardised scalar with frequencies spaced
/// geometrically between 0.25 and 8 cycles per unit: `[N, dim]`.
pub(crate) fn scalar_embedding(values: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let (lo, hi) = (0.25f64, 8.0f64);
    let mut data = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for i in 0..half {
            let f = lo * (hi / lo).powf(i as f64 / (half.max(2) - 1) as f64);
            data.push((std::f64::consts::TAU * f * v).sin() as f32);
        }
        for i in 0..half {
            let f = lo * (hi / lo).powf(i as f64 / (half.max(2) - 1) as f64);
            data.push((std::f64::consts::TAU * f * v).cos() as f32);
        }
    }
    Tensor::new([values.len(), dim], data).expect("embedding shape")
}
