use crate::error::{Error, Result};
use crate::graph::{Bound, Graph, Var};
use crate::patcher::{assemble_with_mask_tokens, positional_embeddings, MaskPlan};
use crate::tensor::{cast, Real};

use super::vocab::PAD_ID;
use super::{names, ModelConfig, StackConfig};

/// Which features feed the image projection head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImagePath {
    /// Encoder tokens through the bridge transformer.
    Bridge,
    /// Encoder tokens pooled directly (shared-encoder baseline).
    EncoderOnly,
}

fn linear<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{prefix}.weight"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, p.get(&format!("{prefix}.bias"))?)
}

fn norm<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    g.layer_norm(x, p.get(&format!("{prefix}.gamma"))?, p.get(&format!("{prefix}.beta"))?)
}

fn block<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, cfg: &StackConfig, x: Var, seq: usize) -> Result<Var> {
    let h = norm(g, p, &format!("{prefix}.norm1"), x)?;
    let qkv = linear(g, p, &format!("{prefix}.attn.qkv"), h)?;
    let a = g.attention(qkv, seq, cfg.heads)?;
    let a = linear(g, p, &format!("{prefix}.attn.proj"), a)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, p, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}

/// Pre-norm blocks followed by the stack's final layer norm.
fn stack<T: Real>(g: &mut Graph<T>, p: &Bound, prefix: &str, cfg: &StackConfig, mut x: Var, seq: usize) -> Result<Var> {
    for i in 0..cfg.depth {
        x = block(g, p, &format!("{prefix}.blocks.{i}"), cfg, x, seq)?;
    }
    norm(g, p, &format!("{prefix}.norm"), x)
}

fn check_cols<T: Real>(g: &Graph<T>, x: Var, cols: usize, op: &'static str) -> Result<usize> {
    let shape = g.shape(x);
    if shape[1] != cols {
        return Err(Error::ShapeMismatch {
            op,
            lhs: shape.to_vec(),
            rhs: vec![shape[0], cols],
        });
    }
    Ok(shape[0])
}

/// Shared image-encoder body: patch embedding, positional embedding at the
/// given grid positions, transformer stack.
fn encode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    patches: Var,
    positions: &[usize],
    seq: usize,
) -> Result<Var> {
    let grid = &cfg.grid;
    let pos_table = positional_embeddings::<T>(grid.grid_rows(), grid.grid_cols(), cfg.encoder.width)?;
    let pos_table = g.constant(pos_table);
    let x = linear(g, p, "encoder.patch_embed", patches)?;
    let pos = g.gather_rows(pos_table, positions)?;
    let x = g.add(x, pos)?;
    stack(g, p, "encoder", &cfg.encoder, x, seq)
}

/// Encode only the visible patches of each image. `patches_visible` stacks
/// the visible rows of every image in plan order.
pub fn encode_visible<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    patches_visible: Var,
    plans: &[MaskPlan],
) -> Result<Var> {
    let rows = check_cols(g, patches_visible, cfg.grid.patch_dim(), "encode_visible")?;
    let seq = plans.first().map_or(0, |pl| pl.visible.len());
    if seq == 0 || plans.iter().any(|pl| pl.visible.len() != seq) || rows != seq * plans.len() {
        return Err(Error::invalid(format!(
            "encode_visible: {rows} rows do not match {} plans with {seq} visible patches each",
            plans.len()
        )));
    }
    let positions: Vec<usize> = plans.iter().flat_map(|pl| pl.visible.iter().copied()).collect();
    encode(g, p, cfg, patches_visible, &positions, seq)
}

/// Encode every patch of each image (`B*N x D_px` in, `B*N x d` out).
pub fn encode_full<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, patches: Var) -> Result<Var> {
    let rows = check_cols(g, patches, cfg.grid.patch_dim(), "encode_full")?;
    let n = cfg.grid.num_patches();
    if rows == 0 || rows % n != 0 {
        return Err(Error::invalid(format!("encode_full: {rows} rows is not a multiple of {n} patches")));
    }
    let positions: Vec<usize> = (0..rows / n).flat_map(|_| 0..n).collect();
    encode(g, p, cfg, patches, &positions, n)
}

#[allow(clippy::too_many_arguments)]
fn decode<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    prefix: &str,
    stack_cfg: &StackConfig,
    mask_token: &str,
    latents_visible: Var,
    plans: &[MaskPlan],
) -> Result<Var> {
    check_cols(g, latents_visible, cfg.encoder.width, "decode")?;
    let grid = &cfg.grid;
    let x = linear(g, p, &format!("{prefix}.embed"), latents_visible)?;
    let pos = g.constant(positional_embeddings::<T>(grid.grid_rows(), grid.grid_cols(), stack_cfg.width)?);
    let token = p.get(mask_token)?;
    let x = assemble_with_mask_tokens(g, x, token, plans, pos)?;
    let x = stack(g, p, prefix, stack_cfg, x, grid.num_patches())?;
    linear(g, p, &format!("{prefix}.head"), x)
}

/// Pixel predictions for every patch position (`B*N x D_px`).
pub fn decode_pixels<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    latents_visible: Var,
    plans: &[MaskPlan],
) -> Result<Var> {
    if plans.iter().any(|pl| pl.num_patches() != cfg.grid.num_patches()) {
        return Err(Error::invalid("decode_pixels: mask plan does not match the patch grid"));
    }
    decode(g, p, cfg, "image_decoder", &cfg.image_decoder, names::IMAGE_MASK_TOKEN, latents_visible, plans)
}

/// Bridge-space feature predictions for every patch position (`B*N x d_bridge`).
pub fn decode_features<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    latents_visible: Var,
    plans: &[MaskPlan],
) -> Result<Var> {
    if plans.iter().any(|pl| pl.num_patches() != cfg.grid.num_patches()) {
        return Err(Error::invalid("decode_features: mask plan does not match the patch grid"));
    }
    decode(g, p, cfg, "feature_decoder", &cfg.feature_decoder, names::FEATURE_MASK_TOKEN, latents_visible, plans)
}

/// Bridge transformer over full encoder token sequences; no pooling.
pub fn bridge_features<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, encoder_seq: Var) -> Result<Var> {
    let rows = check_cols(g, encoder_seq, cfg.encoder.width, "bridge_features")?;
    let n = cfg.grid.num_patches();
    if rows % n != 0 {
        return Err(Error::invalid(format!("bridge_features: {rows} rows is not a multiple of {n}")));
    }
    stack(g, p, "bridge", &cfg.bridge, encoder_seq, n)
}

/// Unit-norm joint-space embedding of each full image (`B x d_joint`).
pub fn image_embedding<T: Real>(
    g: &mut Graph<T>,
    p: &Bound,
    cfg: &ModelConfig,
    patches: Var,
    path: ImagePath,
) -> Result<Var> {
    let enc = encode_full(g, p, cfg, patches)?;
    let feats = match path {
        ImagePath::Bridge => bridge_features(g, p, cfg, enc)?,
        ImagePath::EncoderOnly => enc,
    };
    let pooled = g.segment_mean(feats, cfg.grid.num_patches())?;
    let proj = g.matmul(pooled, p.get("image_proj.weight")?)?;
    g.l2_normalize(proj)
}

/// Unit-norm joint-space embedding of each token sequence (`B x d_joint`).
/// Every sequence must have length `max_text_len` and at least one non-pad id.
pub fn text_embedding<T: Real>(g: &mut Graph<T>, p: &Bound, cfg: &ModelConfig, token_ids: &[Vec<u32>]) -> Result<Var> {
    let len = cfg.max_text_len;
    if token_ids.is_empty() {
        return Err(Error::invalid("text_embedding: empty batch"));
    }
    let mut ids = Vec::with_capacity(token_ids.len() * len);
    let mut groups = Vec::with_capacity(token_ids.len());
    for (b, seq) in token_ids.iter().enumerate() {
        if seq.len() != len {
            return Err(Error::invalid(format!(
                "text_embedding: sequence of length {} (expected {len})",
                seq.len()
            )));
        }
        let real: Vec<usize> = (0..len).filter(|&i| seq[i] != PAD_ID).collect();
        if real.is_empty() {
            return Err(Error::invalid("text_embedding: sequence contains only padding"));
        }
        let w: T = cast(1.0 / real.len() as f64);
        groups.push(real.into_iter().map(|i| (b * len + i, w)).collect());
        for &id in seq {
            if id as usize >= cfg.vocab_size {
                return Err(Error::IndexOutOfRange {
                    op: "text_embedding",
                    index: id as usize,
                    len: cfg.vocab_size,
                });
            }
            ids.push(id as usize);
        }
    }
    let tok = g.gather_rows(p.get("text.token_embed")?, &ids)?;
    let pos_idx: Vec<usize> = (0..token_ids.len()).flat_map(|_| 0..len).collect();
    let pos = g.gather_rows(p.get("text.pos_embed")?, &pos_idx)?;
    let x = g.add(tok, pos)?;
    let x = stack(g, p, "text", &cfg.text, x, len)?;
    let pooled = g.row_pool(x, groups)?;
    let proj = g.matmul(pooled, p.get("text_proj.weight")?)?;
    g.l2_normalize(proj)
}
