use candle_core::{Module, Tensor};
use candle_nn::Linear;

use super::layers::{Block, LayerNorm, ParamStore, Result};
use super::{BackboneConfig, Pooling};

/// 3D vision transformer over pre-extracted patch rows `[batch, tokens, patch³]`.
pub(crate) struct Vit {
    patch_embed: Linear,
    pos_embed: Tensor,
    cls_token: Option<Tensor>,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl Vit {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<Self> {
        let d = cfg.embed_dim;
        let tokens = cfg.token_count();
        let cls = cfg.pooling == Pooling::ClsToken;
        let patch_embed = store.linear("backbone.patch_embed", cfg.patch_voxels(), d, true)?;
        let pos_embed = store.normal("backbone.pos_embed", &[1, tokens + cls as usize, d], 0.02)?;
        let cls_token = if cls {
            Some(store.normal("backbone.cls_token", &[1, 1, d], 0.02)?)
        } else {
            None
        };
        let blocks = (0..cfg.depth)
            .map(|i| Block::new(store, &format!("backbone.blocks.{i}"), d, cfg.num_heads, cfg.mlp_ratio))
            .collect::<Result<_>>()?;
        let norm = store.layer_norm("backbone.norm", d)?;
        Ok(Vit {
            patch_embed,
            pos_embed,
            cls_token,
            blocks,
            norm,
        })
    }

    /// Token sequence after embedding and all blocks, before the final norm.
    pub fn tokens(&self, patches: &Tensor) -> Result<Tensor> {
        let b = patches.dim(0)?;
        let mut x = self.patch_embed.forward(patches)?;
        if let Some(cls) = &self.cls_token {
            let d = cls.dim(2)?;
            x = Tensor::cat(&[&cls.broadcast_as((b, 1, d))?, &x], 1)?;
        }
        x = x.broadcast_add(&self.pos_embed)?;
        for block in &self.blocks {
            x = block.forward(&x, None, None)?;
        }
        Ok(x)
    }

    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        let x = self.norm.forward(&self.tokens(patches)?)?;
        match self.cls_token {
            Some(_) => x.get_on_dim(1, 0),
            None => x.mean(1),
        }
    }
}
