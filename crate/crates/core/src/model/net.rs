//! Semantic encoder, age-regression baseline and U-Net noise predictor.

use normdiff_autograd::{ParamId, ParamStore, Tape, Var};

use super::config::ModelConfig;
use super::layers::{Builder, Conv, ConvNormAct, Dense, EmbedMlp, Norm};
use crate::error::Result;

/// conv → GN → additive per-channel age shift → SiLU.
#[derive(Clone, Debug)]
struct AgeBlock {
    conv: Conv,
    norm: Norm,
    shift: Dense,
}

/// The downward path: stem followed by one block per level and a stride-2
/// transition between levels.
#[derive(Clone, Debug)]
struct Trunk {
    stem: Conv,
    stem_bias: ParamId,
    downs: Vec<ConvNormAct>,
}

impl Trunk {
    fn new(b: &mut Builder<'_>, prefix: &str, cfg: &ModelConfig) -> Self {
        let c = &cfg.channels;
        let stem = b.conv(&format!("{prefix}.stem"), 1, c[0], 3, 1);
        let stem_bias = b.bias(&format!("{prefix}.stem"), c[0]);
        let downs = (0..c.len() - 1)
            .map(|l| ConvNormAct::new(b, &format!("{prefix}.down{l}"), c[l], c[l + 1], 2, cfg.groups))
            .collect();
        Self {
            stem,
            stem_bias,
            downs,
        }
    }

    fn stem<'a>(&self, tape: &mut Tape<'a>, ps: &'a ParamStore, x: Var) -> Result<Var> {
        let h = self.stem.forward(tape, ps, x)?;
        let b = tape.param(ps, self.stem_bias);
        Ok(tape.channel_bias(h, b)?)
    }
}

/// Average-pools the bottom feature map down to `grid`² cells and flattens it,
/// keeping coarse spatial layout for the head.
fn pool_to_grid<'a>(tape: &mut Tape<'a>, mut h: Var, grid: usize) -> Result<Var> {
    while tape.value(h).shape()[2] > grid {
        h = tape.avg_pool2x(h)?;
    }
    Ok(tape.flatten(h)?)
}

/// Age-conditioned semantic encoder: `[N,1,H,W]` and age features → `[N,d]`.
#[derive(Clone, Debug)]
pub(crate) struct Encoder {
    trunk: Trunk,
    age_mlp: EmbedMlp,
    blocks: Vec<AgeBlock>,
    head: Dense,
    grid: usize,
}

impl Encoder {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let e = cfg.age_embed_dim;
        let age_mlp = EmbedMlp::new(b, "enc.age", e, e);
        let trunk = Trunk::new(b, "enc", cfg);
        let blocks = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(l, &c)| AgeBlock {
                conv: b.conv(&format!("enc.block{l}.conv"), c, c, 3, 1),
                norm: b.norm(&format!("enc.block{l}.norm"), c, cfg.groups),
                shift: b.dense(&format!("enc.block{l}.age"), e, c, 1.0),
            })
            .collect();
        let head = b.dense("enc.head", cfg.head_inputs(), cfg.latent_dim, 1.0);
        Self {
            trunk,
            age_mlp,
            blocks,
            head,
            grid: cfg.head_grid(),
        }
    }

    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        ps: &'a ParamStore,
        x: Var,
        age_features: Var,
    ) -> Result<Var> {
        let a = self.age_mlp.forward(tape, ps, age_features)?;
        let a = tape.silu(a)?;
        let mut h = self.trunk.stem(tape, ps, x)?;
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.conv.forward(tape, ps, h)?;
            h = block.norm.forward(tape, ps, h)?;
            let shift = block.shift.forward(tape, ps, a)?;
            h = tape.scale_shift(h, None, shift)?;
            h = tape.silu(h)?;
            if let Some(down) = self.trunk.downs.get(l) {
                h = down.forward(tape, ps, h)?;
            }
        }
        let pooled = pool_to_grid(tape, h, self.grid)?;
        self.head.forward(tape, ps, pooled)
    }
}

/// Unconditioned downward path with a scalar head, regressing standardised age.
#[derive(Clone, Debug)]
pub(crate) struct AgeRegressorNet {
    trunk: Trunk,
    blocks: Vec<ConvNormAct>,
    head: Dense,
    grid: usize,
}

impl AgeRegressorNet {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let trunk = Trunk::new(b, "reg", cfg);
        let blocks = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(l, &c)| ConvNormAct::new(b, &format!("reg.block{l}"), c, c, 1, cfg.groups))
            .collect();
        let head = b.dense("reg.head", cfg.head_inputs(), 1, 1.0);
        Self {
            trunk,
            blocks,
            head,
            grid: cfg.head_grid(),
        }
    }

    pub fn forward<'a>(&self, tape: &mut Tape<'a>, ps: &'a ParamStore, x: Var) -> Result<Var> {
        let mut h = self.trunk.stem(tape, ps, x)?;
        for (l, block) in self.blocks.iter().enumerate() {
            h = block.forward(tape, ps, h)?;
            if let Some(down) = self.trunk.downs.get(l) {
                h = down.forward(tape, ps, h)?;
            }
        }
        let pooled = pool_to_grid(tape, h, self.grid)?;
        self.head.forward(tape, ps, pooled)
    }
}

/// conv → GN → `h·(1 + s(z)) + b(z) + b(t)` → SiLU.
#[derive(Clone, Debug)]
struct CondBlock {
    conv: Conv,
    norm: Norm,
    scale_z: Dense,
    shift_z: Dense,
    shift_t: Dense,
}

impl CondBlock {
    fn new(b: &mut Builder<'_>, name: &str, cin: usize, cout: usize, cfg: &ModelConfig) -> Self {
        Self {
            conv: b.conv(&format!("{name}.conv"), cin, cout, 3, 1),
            norm: b.norm(&format!("{name}.norm"), cout, cfg.groups),
            scale_z: b.dense(&format!("{name}.zscale"), cfg.latent_dim, cout, 0.1),
            shift_z: b.dense(&format!("{name}.zshift"), cfg.latent_dim, cout, 0.1),
            shift_t: b.dense(&format!("{name}.tshift"), cfg.time_embed_dim, cout, 1.0),
        }
    }

    fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        ps: &'a ParamStore,
        x: Var,
        z: Var,
        temb: Var,
    ) -> Result<Var> {
        let h = self.conv.forward(tape, ps, x)?;
        let h = self.norm.forward(tape, ps, h)?;
        let scale = self.scale_z.forward(tape, ps, z)?;
        let sz = self.shift_z.forward(tape, ps, z)?;
        let st = self.shift_t.forward(tape, ps, temb)?;
        let shift = tape.add(sz, st)?;
        let h = tape.scale_shift(h, Some(scale), shift)?;
        Ok(tape.silu(h)?)
    }
}

/// U-Net noise predictor `(x_t, t-features, z) → ε̂`.
#[derive(Clone, Debug)]
pub(crate) struct UNet {
    time_mlp: EmbedMlp,
    trunk: Trunk,
    down_blocks: Vec<CondBlock>,
    mid: CondBlock,
    up_convs: Vec<ConvNormAct>,
    up_blocks: Vec<CondBlock>,
    out: Conv,
    out_bias: ParamId,
}

impl UNet {
    pub fn new(b: &mut Builder<'_>, cfg: &ModelConfig) -> Self {
        let c = &cfg.channels;
        let e = cfg.time_embed_dim;
        let time_mlp = EmbedMlp::new(b, "unet.time", e, e);
        let trunk = Trunk::new(b, "unet", cfg);
        let down_blocks = (0..c.len())
            .map(|l| CondBlock::new(b, &format!("unet.block{l}"), c[l], c[l], cfg))
            .collect();
        let last = *c.last().unwrap();
        let mid = CondBlock::new(b, "unet.mid", last, last, cfg);
        let mut up_convs = Vec::new();
        let mut up_blocks = Vec::new();
        for l in (0..c.len() - 1).rev() {
            up_convs.push(ConvNormAct::new(b, &format!("unet.up{l}"), c[l + 1], c[l], 1, cfg.groups));
            up_blocks.push(CondBlock::new(b, &format!("unet.upblock{l}"), 2 * c[l], c[l], cfg));
        }
        let out = b.conv("unet.out", c[0], 1, 3, 1);
        let out_bias = b.bias("unet.out", 1);
        Self {
            time_mlp,
            trunk,
            down_blocks,
            mid,
            up_convs,
            up_blocks,
            out,
            out_bias,
        }
    }

    pub fn forward<'a>(
        &self,
        tape: &mut Tape<'a>,
        ps: &'a ParamStore,
        xt: Var,
        time_features: Var,
        z: Var,
    ) -> Result<Var> {
        let temb = self.time_mlp.forward(tape, ps, time_features)?;
        let temb = tape.silu(temb)?;
        let mut h = self.trunk.stem(tape, ps, xt)?;
        let mut skips = Vec::new();
        for (l, block) in self.down_blocks.iter().enumerate() {
            h = block.forward(tape, ps, h, z, temb)?;
            if let Some(down) = self.trunk.downs.get(l) {
                skips.push(h);
                h = down.forward(tape, ps, h)?;
            }
        }
        h = self.mid.forward(tape, ps, h, z, temb)?;
        for (up, block) in self.up_convs.iter().zip(&self.up_blocks) {
            h = tape.upsample2x(h)?;
            h = up.forward(tape, ps, h)?;
            let skip = skips.pop().expect("one skip per transition");
            h = tape.concat_channels(h, skip)?;
            h = block.forward(tape, ps, h, z, temb)?;
        }
        let out = self.out.forward(tape, ps, h)?;
        let bias = tape.param(ps, self.out_bias);
        Ok(tape.channel_bias(out, bias)?)
    }
}
