use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture shared by the semantic encoder and the noise predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Output channels per resolution level, finest first.
    pub channels: Vec<usize>,
    pub latent_dim: usize,
    /// Width of the sinusoidal timestep embedding and its MLP.
    pub time_embed_dim: usize,
    /// Width of the sinusoidal age embedding and its MLP.
    pub age_embed_dim: usize,
    pub groups: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: vec![32, 64, 128],
            latent_dim: 64,
            time_embed_dim: 64,
            age_embed_dim: 64,
            groups: 8,
        }
    }
}

fn conv3(cin: usize, cout: usize) -> usize {
    9 * cin * cout
}

fn dense(fin: usize, fout: usize) -> usize {
    fin * fout + fout
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.channels.is_empty() {
            return err("channels must not be empty".into());
        }
        if self.groups == 0 {
            return err("groups must be positive".into());
        }
        if let Some(c) = self.channels.iter().find(|&&c| c == 0 || c % self.groups != 0) {
            return err(format!(
                "channel width {c} is not a positive multiple of groups {}",
                self.groups
            ));
        }
        let factor = 1usize << (self.levels() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return err(format!(
                "image_size {} is not divisible by {factor}",
                self.image_size
            ));
        }
        if self.latent_dim == 0 {
            return err("latent_dim must be positive".into());
        }
        for (name, v) in [
            ("time_embed_dim", self.time_embed_dim),
            ("age_embed_dim", self.age_embed_dim),
        ] {
            if v < 2 || v % 2 != 0 {
                return err(format!("{name} must be an even number >= 2, got {v}"));
            }
        }
        Ok(())
    }

    /// Spatial size of the finest level after all downsampling.
    pub fn bottom_size(&self) -> usize {
        self.image_size >> (self.levels() - 1)
    }

    /// Side of the feature grid the heads read: the bottom map is
    /// average-pooled 2×2 until it is at most 4 wide (or odd).
    pub fn head_grid(&self) -> usize {
        let mut g = self.bottom_size();
        while g > 4 && g.is_multiple_of(2) {
            g /= 2;
        }
        g
    }

    /// Inputs to the linear heads of the encoder and the age regressor.
    pub fn head_inputs(&self) -> usize {
        self.channels.last().unwrap() * self.head_grid() * self.head_grid()
    }

    /// Scalars in the shared downward path without any conditioning.
    fn trunk_params(&self) -> usize {
        let c = &self.channels;
        let mut n = conv3(1, c[0]) + c[0];
        for l in 0..c.len() {
            n += conv3(c[l], c[l]) + 2 * c[l];
            if l + 1 < c.len() {
                n += conv3(c[l], c[l + 1]) + 2 * c[l + 1];
            }
        }
        n
    }

    /// Closed-form scalar count of the age-conditioned semantic encoder.
    pub fn encoder_param_count(&self) -> usize {
        let e = self.age_embed_dim;
        let age = 2 * dense(e, e) + self.channels.iter().map(|&c| dense(e, c)).sum::<usize>();
        self.trunk_params() + age + dense(self.head_inputs(), self.latent_dim)
    }

    /// Closed-form scalar count of the age-regression baseline.
    pub fn regressor_param_count(&self) -> usize {
        self.trunk_params() + dense(self.head_inputs(), 1)
    }

    /// Closed-form scalar count of the noise predictor.
    pub fn predictor_param_count(&self) -> usize {
        let c = &self.channels;
        let (d, e) = (self.latent_dim, self.time_embed_dim);
        let modulation = |ch: usize| 2 * dense(d, ch) + dense(e, ch);
        let block = |cin: usize, cout: usize| conv3(cin, cout) + 2 * cout + modulation(cout);
        let mut n = 2 * dense(e, e) + conv3(1, c[0]) + c[0];
        for l in 0..c.len() {
            n += block(c[l], c[l]);
            if l + 1 < c.len() {
                n += conv3(c[l], c[l + 1]) + 2 * c[l + 1];
                n += conv3(c[l + 1], c[l]) + 2 * c[l];
                n += block(2 * c[l], c[l]);
            }
        }
        let last = *c.last().unwrap();
        n += block(last, last);
        n + conv3(c[0], 1) + 1
    }
}
