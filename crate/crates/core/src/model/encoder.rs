use rand_chacha::ChaCha8Rng;

use crate::numerics::{Graph, NumericsError, ParamRegistry, Tensor};
use crate::synthdata::BEVRaster;

use super::layers::{sinusoidal_pe_2d, EncoderBlock, LayerNormParams, Linear};
use super::ModelConfig;

type Result<T> = std::result::Result<T, NumericsError>;

/// BEV feature tokens with their spatial extent. Coordinates used to
/// sample this grid are normalized to [0,1]^2 over the map extent.
pub struct BEVFeatureGrid {
    /// (feat_h * feat_w) x hidden, row-major over (row, col).
    pub tokens: Tensor,
    pub width: usize,
    pub height: usize,
}

/// Cut a raster into non-overlapping patch vectors (zero-padded at the
/// right/bottom edges), row-major over patches, channel-major inside.
pub fn patchify(raster: &BEVRaster, patch: usize) -> (Vec<f64>, usize, usize) {
    let w = raster.grid.width_cells;
    let h = raster.grid.height_cells;
    let pw = w.div_ceil(patch);
    let ph = h.div_ceil(patch);
    let dim = raster.channels * patch * patch;
    let mut out = vec![0.0; pw * ph * dim];
    for pr in 0..ph {
        for pc in 0..pw {
            let base = (pr * pw + pc) * dim;
            for (c, channel) in raster.data.iter().enumerate() {
                for dy in 0..patch {
                    for dx in 0..patch {
                        let row = pr * patch + dy;
                        let col = pc * patch + dx;
                        if row < h && col < w {
                            out[base + c * patch * patch + dy * patch + dx] =
                                channel[row * w + col] as f64;
                        }
                    }
                }
            }
        }
    }
    (out, ph, pw)
}

pub struct Encoder {
    pub patch_embed: Linear,
    blocks: Vec<EncoderBlock>,
    final_norm: LayerNormParams,
}

impl Encoder {
    pub fn new(
        g: &Graph,
        reg: &mut ParamRegistry,
        cfg: &ModelConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let in_dim = cfg.raster_channels * cfg.patch * cfg.patch;
        Encoder {
            patch_embed: Linear::new(g, reg, "enc.patch_embed", in_dim, cfg.hidden, rng),
            blocks: (0..cfg.enc_layers)
                .map(|i| {
                    EncoderBlock::new(
                        g,
                        reg,
                        &format!("enc.block{i}"),
                        cfg.hidden,
                        cfg.heads,
                        cfg.ffn_mult,
                        cfg.dropout,
                        rng,
                    )
                })
                .collect(),
            final_norm: LayerNormParams::new(g, reg, "enc.final_norm", cfg.hidden),
        }
    }

    /// Patch embedding plus 2D sinusoidal positions, before any
    /// attention blocks.
    pub fn embed(&self, g: &Graph, cfg: &ModelConfig, raster: &BEVRaster) -> Result<Tensor> {
        if raster.channels != cfg.raster_channels
            || raster.grid.width_cells != cfg.grid.width_cells
            || raster.grid.height_cells != cfg.grid.height_cells
        {
            return Err(NumericsError::Shape {
                op: "bev_encode",
                detail: format!(
                    "raster {}x{}x{} does not match the configured grid",
                    raster.channels, raster.grid.height_cells, raster.grid.width_cells
                ),
            });
        }
        let (patches, ph, pw) = patchify(raster, cfg.patch);
        let in_dim = cfg.raster_channels * cfg.patch * cfg.patch;
        let x = g.constant(ph * pw, in_dim, patches);
        let embedded = self.patch_embed.forward(&x)?;
        let pe = g.constant(ph * pw, cfg.hidden, sinusoidal_pe_2d(ph, pw, cfg.hidden));
        embedded.add(&pe)
    }

    pub fn encode(
        &self,
        g: &Graph,
        cfg: &ModelConfig,
        raster: &BEVRaster,
    ) -> Result<BEVFeatureGrid> {
        let mut x = self.embed(g, cfg, raster)?;
        for block in &self.blocks {
            x = block.forward(g, &x)?;
        }
        let tokens = self.final_norm.forward(&x)?;
        Ok(BEVFeatureGrid {
            tokens,
            width: cfg.feat_w(),
            height: cfg.feat_h(),
        })
    }
}
