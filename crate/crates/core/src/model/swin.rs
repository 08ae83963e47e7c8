//! Hierarchical shifted-window transformer on a 3D token grid.
//!
//! Tokens are stored flat in x-major order. Window partitioning, the cyclic
//! shift and patch merging are all token permutations, so each is a single
//! `index_select` with a precomputed index.

use candle_core::{Device, Module, Tensor};
use candle_nn::Linear;

use super::layers::{f32_tensor, u32_index, Block, LayerNorm, ParamStore, Result};
use super::BackboneConfig;

/// Blocks per stage: one with regular windows, one with shifted windows.
pub const BLOCKS_PER_STAGE: usize = 2;
const MASK_VALUE: f64 = -100.0;

fn flat(p: [usize; 3], grid: [usize; 3]) -> usize {
    (p[0] * grid[1] + p[1]) * grid[2] + p[2]
}

fn cells(extent: [usize; 3]) -> impl Iterator<Item = [usize; 3]> {
    (0..extent[0]).flat_map(move |x| (0..extent[1]).flat_map(move |y| (0..extent[2]).map(move |z| [x, y, z])))
}

/// Token order that groups the grid, cyclically shifted by `-shift`, into
/// consecutive windows of `window³` tokens.
pub(crate) fn window_order(grid: [usize; 3], window: usize, shift: [usize; 3]) -> Vec<usize> {
    let counts = grid.map(|g| g / window);
    let mut order = Vec::with_capacity(grid.iter().product());
    for w in cells(counts) {
        for i in cells([window; 3]) {
            let p = std::array::from_fn(|a| (w[a] * window + i[a] + shift[a]) % grid[a]);
            order.push(flat(p, grid));
        }
    }
    order
}

fn inverse_permutation(order: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; order.len()];
    for (k, &o) in order.iter().enumerate() {
        inv[o] = k;
    }
    inv
}

/// Attention mask `[windows, n, n]` that blocks attention between tokens that
/// were not neighbours before the cyclic shift.
pub(crate) fn shift_mask(grid: [usize; 3], window: usize, shift: [usize; 3]) -> Vec<f64> {
    let region = |a: usize, i: usize| -> usize {
        if shift[a] == 0 || i < grid[a] - window {
            0
        } else if i < grid[a] - shift[a] {
            1
        } else {
            2
        }
    };
    let counts = grid.map(|g| g / window);
    let n = window.pow(3);
    let mut mask = Vec::with_capacity(counts.iter().product::<usize>() * n * n);
    for w in cells(counts) {
        let labels: Vec<usize> = cells([window; 3])
            .map(|i| {
                let r: [usize; 3] = std::array::from_fn(|a| region(a, w[a] * window + i[a]));
                r[0] * 9 + r[1] * 3 + r[2]
            })
            .collect();
        for &li in &labels {
            for &lj in &labels {
                mask.push(if li == lj { 0.0 } else { MASK_VALUE });
            }
        }
    }
    mask
}

/// Index into the `(2w-1)³` relative-position table for every ordered token pair of a window.
pub(crate) fn relative_position_index(window: usize) -> Vec<usize> {
    let side = 2 * window - 1;
    let coords: Vec<[usize; 3]> = cells([window; 3]).collect();
    let mut idx = Vec::with_capacity(coords.len().pow(2));
    for a in &coords {
        for b in &coords {
            let d: [usize; 3] = std::array::from_fn(|k| a[k] + window - 1 - b[k]);
            idx.push((d[0] * side + d[1]) * side + d[2]);
        }
    }
    idx
}

/// Gather order that lists, for every 2×2×2 cell of the grid, its eight tokens.
pub(crate) fn merge_order(grid: [usize; 3]) -> Vec<usize> {
    let half = grid.map(|g| g / 2);
    let mut order = Vec::with_capacity(grid.iter().product());
    for o in cells(half) {
        for d in cells([2; 3]) {
            order.push(flat(std::array::from_fn(|a| 2 * o[a] + d[a]), grid));
        }
    }
    order
}

struct SwinBlock {
    block: Block,
    order: Tensor,
    inverse: Tensor,
    mask: Option<Tensor>,
    bias_table: Tensor,
    bias_index: Tensor,
    heads: usize,
}

impl SwinBlock {
    fn relative_bias(&self, n: usize) -> Result<Tensor> {
        self.bias_table
            .index_select(&self.bias_index, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()
    }
}

struct PatchMerging {
    order: Tensor,
    norm: LayerNorm,
    reduction: Linear,
}

struct Stage {
    blocks: Vec<SwinBlock>,
    merge: Option<PatchMerging>,
}

pub(crate) struct Swin {
    patch_embed: Linear,
    stages: Vec<Stage>,
    norm: LayerNorm,
    window: usize,
}

impl Swin {
    pub fn new(store: &mut ParamStore, cfg: &BackboneConfig, device: &Device) -> Result<Self> {
        let w = cfg.window_size;
        let n = w.pow(3);
        let patch_embed = store.linear("backbone.patch_embed", cfg.patch_voxels(), cfg.embed_dim, true)?;
        let mut stages = Vec::with_capacity(cfg.depth);
        for (s, shape) in cfg.stage_shapes().into_iter().enumerate() {
            let mut blocks = Vec::with_capacity(BLOCKS_PER_STAGE);
            for b in 0..BLOCKS_PER_STAGE {
                let path = format!("backbone.stages.{s}.blocks.{b}");
                let shift: [usize; 3] = if b % 2 == 1 {
                    shape.grid.map(|g| if g > w { w / 2 } else { 0 })
                } else {
                    [0; 3]
                };
                let order = window_order(shape.grid, w, shift);
                let mask = if shift.iter().any(|&v| v > 0) {
                    let windows = order.len() / n;
                    Some(f32_tensor(&shift_mask(shape.grid, w, shift), &[windows, n, n], device)?)
                } else {
                    None
                };
                blocks.push(SwinBlock {
                    block: Block::new(store, &path, shape.width, shape.heads, cfg.mlp_ratio)?,
                    inverse: u32_index(&inverse_permutation(&order), device)?,
                    order: u32_index(&order, device)?,
                    mask,
                    bias_table: store.normal(
                        &format!("{path}.relative_position_bias"),
                        &[(2 * w - 1).pow(3), shape.heads],
                        0.02,
                    )?,
                    bias_index: u32_index(&relative_position_index(w), device)?,
                    heads: shape.heads,
                });
            }
            let merge = if s + 1 < cfg.depth {
                let path = format!("backbone.stages.{s}.merge");
                Some(PatchMerging {
                    order: u32_index(&merge_order(shape.grid), device)?,
                    norm: store.layer_norm(&format!("{path}.norm"), 8 * shape.width)?,
                    reduction: store.linear(&format!("{path}.reduction"), 8 * shape.width, 2 * shape.width, false)?,
                })
            } else {
                None
            };
            stages.push(Stage { blocks, merge });
        }
        let last = cfg.output_dim();
        Ok(Swin {
            patch_embed,
            stages,
            norm: store.layer_norm("backbone.norm", last)?,
            window: w,
        })
    }

    /// Token tensors `[batch, tokens, width]` at the end of every stage, before merging.
    pub fn stage_outputs(&self, patches: &Tensor) -> Result<Vec<Tensor>> {
        let n = self.window.pow(3);
        let mut x = self.patch_embed.forward(patches)?;
        let mut outputs = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            for sb in &stage.blocks {
                let bias = sb.relative_bias(n)?;
                x = sb.block.forward_windowed(&x, &sb.order, &sb.inverse, n, Some(&bias), sb.mask.as_ref())?;
            }
            outputs.push(x.clone());
            if let Some(m) = &stage.merge {
                let (b, t, c) = x.dims3()?;
                let merged = x.index_select(&m.order, 1)?.reshape((b, t / 8, 8 * c))?;
                x = m.reduction.forward(&m.norm.forward(&merged)?)?;
            }
        }
        Ok(outputs)
    }

    pub fn forward(&self, patches: &Tensor) -> Result<Tensor> {
        let last = self.stage_outputs(patches)?.pop().expect("at least one stage");
        self.norm.forward(&last)?.mean(1)
    }
}
