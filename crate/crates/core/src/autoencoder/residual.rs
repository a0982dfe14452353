use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::{Block, Init, Linear, Session};
use crate::numerics::{AttnLayout, ParamStore, Real, Rng, Var};
use crate::rope::mrope_table;

#[derive(Clone, Debug, PartialEq)]
pub struct ResidualEncoderConfig {
    /// Channels appended to the frozen features.
    pub extra_channels: usize,
    pub blocks: usize,
    pub dim: usize,
    pub heads: usize,
    /// 2-D rotary positions over the patch grid.
    pub rope: bool,
}

impl Default for ResidualEncoderConfig {
    fn default() -> Self {
        Self {
            extra_channels: 8,
            blocks: 2,
            dim: 32,
            heads: 2,
            rope: true,
        }
    }
}

/// Small trainable ViT over raw patches whose output channels carry the
/// detail the frozen features miss.
#[derive(Clone, Debug)]
pub struct ResidualEncoder {
    pub cfg: ResidualEncoderConfig,
    embed: Linear,
    blocks: Vec<Block>,
    out: Linear,
}

impl ResidualEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        cfg: &ResidualEncoderConfig,
        patch: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        if cfg.extra_channels == 0 {
            return Err(Error::invalid(
                "autoencoder",
                "residual branch needs at least one channel",
            ));
        }
        if cfg.heads == 0 || !cfg.dim.is_multiple_of(cfg.heads) {
            return Err(Error::invalid(
                "autoencoder",
                format!(
                    "residual dim {} is not divisible by {} heads",
                    cfg.dim, cfg.heads
                ),
            ));
        }
        let embed = Linear::new(
            store,
            &format!("{name}.embed"),
            3 * patch * patch,
            cfg.dim,
            true,
            Init::Fan(1.0),
            rng,
        )?;
        let blocks = (0..cfg.blocks)
            .map(|i| Block::new(store, &format!("{name}.block{i}"), cfg.dim, cfg.heads, rng))
            .collect::<Result<Vec<_>>>()?;
        let out = Linear::new(
            store,
            &format!("{name}.out"),
            cfg.dim,
            cfg.extra_channels,
            true,
            Init::Fan(1.0),
            rng,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            embed,
            blocks,
            out,
        })
    }

    /// `pixels` are centred patches `[tokens, 3 p^2]` of the images whose
    /// grids are listed in order; returns `[tokens, extra_channels]`.
    pub fn forward<T: Real>(
        &self,
        s: &mut Session<T>,
        pixels: Var,
        grids: &[(usize, usize)],
    ) -> Result<Var> {
        let mut segments = Vec::with_capacity(grids.len());
        let mut positions = Vec::new();
        for &(rows, cols) in grids {
            segments.push((positions.len(), rows * cols));
            for r in 0..rows {
                for c in 0..cols {
                    positions.push([0, r, c]);
                }
            }
        }
        let head_dim = self.cfg.dim / self.cfg.heads;
        let layout = Arc::new(AttnLayout {
            segments,
            heads: self.cfg.heads,
            kv_heads: self.cfg.heads,
            head_dim,
        });
        let table = if self.cfg.rope {
            Some(Arc::new(mrope_table::<T>(&positions, head_dim)?))
        } else {
            None
        };
        let mut x = self.embed.forward(s, pixels)?;
        for block in &self.blocks {
            x = block.forward(s, x, &layout, table.as_ref())?;
        }
        self.out.forward(s, x)
    }
}
