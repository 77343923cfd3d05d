//! Image to patch-sequence conversion and random patch masking.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::tensor::{cast, Real, Tensor};

/// Geometry of a square-patch tiling of an `height x width x channels` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchGrid {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, channels: usize, patch: usize) -> Result<Self> {
        let grid = PatchGrid {
            height,
            width,
            channels,
            patch,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.channels == 0 {
            return Err(Error::invalid("patch size and channels must be positive"));
        }
        if !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::invalid(format!(
                "patch size {} does not divide image {}x{}",
                self.patch, self.height, self.width
            )));
        }
        if self.num_patches() < 2 {
            return Err(Error::invalid("a patch grid needs at least 2 patches"));
        }
        Ok(())
    }

    pub fn grid_rows(&self) -> usize {
        self.height / self.patch
    }

    pub fn grid_cols(&self) -> usize {
        self.width / self.patch
    }

    pub fn num_patches(&self) -> usize {
        self.grid_rows() * self.grid_cols()
    }

    /// Flattened length of one patch.
    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.height, self.width, self.channels]
    }

    /// Pixel coordinates `(y, x, c)` of element `k` of patch `i`.
    pub fn pixel_of(&self, i: usize, k: usize) -> (usize, usize, usize) {
        let (gy, gx) = (i / self.grid_cols(), i % self.grid_cols());
        let c = k % self.channels;
        let within = k / self.channels;
        let (py, px) = (within / self.patch, within % self.patch);
        (gy * self.patch + py, gx * self.patch + px, c)
    }
}

/// Row `i` is patch `i` (grid raster order) flattened row-major, channel-last.
pub fn patchify<T: Real>(image: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    if image.shape() != grid.image_shape() {
        return Err(Error::ShapeMismatch {
            op: "patchify",
            lhs: image.shape().to_vec(),
            rhs: grid.image_shape().to_vec(),
        });
    }
    let (n, dp) = (grid.num_patches(), grid.patch_dim());
    let src = image.data();
    let mut out = Vec::with_capacity(n * dp);
    let row_len = grid.patch * grid.channels;
    for i in 0..n {
        let (gy, gx) = (i / grid.grid_cols(), i % grid.grid_cols());
        for py in 0..grid.patch {
            let y = gy * grid.patch + py;
            let start = (y * grid.width + gx * grid.patch) * grid.channels;
            out.extend_from_slice(&src[start..start + row_len]);
        }
    }
    Tensor::new(vec![n, dp], out)
}

/// Exact inverse of [`patchify`].
pub fn unpatchify<T: Real>(patches: &Tensor<T>, grid: &PatchGrid) -> Result<Tensor<T>> {
    let expected = [grid.num_patches(), grid.patch_dim()];
    if patches.shape() != expected {
        return Err(Error::ShapeMismatch {
            op: "unpatchify",
            lhs: patches.shape().to_vec(),
            rhs: expected.to_vec(),
        });
    }
    let mut out = vec![T::zero(); grid.image_len()];
    let row_len = grid.patch * grid.channels;
    for (i, patch) in patches.data().chunks(grid.patch_dim()).enumerate() {
        let (gy, gx) = (i / grid.grid_cols(), i % grid.grid_cols());
        for (py, prow) in patch.chunks(row_len).enumerate() {
            let y = gy * grid.patch + py;
            let start = (y * grid.width + gx * grid.patch) * grid.channels;
            out[start..start + row_len].copy_from_slice(prow);
        }
    }
    Tensor::new(grid.image_shape().to_vec(), out)
}

/// Partition of patch indices into visible and masked sets, each ascending.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    /// Plan with every patch visible; masking disabled.
    pub fn all_visible(n: usize) -> Self {
        MaskPlan {
            visible: (0..n).collect(),
            masked: Vec::new(),
            ratio: 0.0,
        }
    }

    /// Plan from an explicit visible set.
    pub fn from_visible(n: usize, visible: &[usize]) -> Result<Self> {
        let mut is_visible = vec![false; n];
        for &v in visible {
            if v >= n {
                return Err(Error::IndexOutOfRange { op: "mask_plan", index: v, len: n });
            }
            is_visible[v] = true;
        }
        let visible: Vec<usize> = (0..n).filter(|&i| is_visible[i]).collect();
        let masked: Vec<usize> = (0..n).filter(|&i| !is_visible[i]).collect();
        Ok(MaskPlan {
            ratio: masked.len() as f64 / n as f64,
            visible,
            masked,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.visible.len() + self.masked.len()
    }
}

/// Number of visible patches kept at a given mask ratio.
pub fn visible_count(n: usize, ratio: f64) -> usize {
    (n as f64 * (1.0 - ratio)).floor() as usize
}

pub fn sample_mask(n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPlan> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::invalid(format!("mask ratio must lie in (0, 1), got {ratio}")));
    }
    let keep = visible_count(n, ratio);
    if keep == 0 || keep >= n {
        return Err(Error::invalid(format!(
            "mask ratio {ratio} leaves {keep} of {n} patches visible"
        )));
    }
    let perm = rng.shuffle(n);
    let mut visible = perm[..keep].to_vec();
    let mut masked = perm[keep..].to_vec();
    visible.sort_unstable();
    masked.sort_unstable();
    Ok(MaskPlan {
        visible,
        masked,
        ratio,
    })
}

fn check_plans(plans: &[MaskPlan], rows: usize) -> Result<usize> {
    let n = plans
        .first()
        .ok_or_else(|| Error::invalid("no mask plans"))?
        .num_patches();
    if plans.iter().any(|p| p.num_patches() != n) || rows != n * plans.len() {
        return Err(Error::invalid(format!(
            "sequence of {rows} rows does not match {} plans over {n} patches",
            plans.len()
        )));
    }
    Ok(n)
}

/// Rows of a stacked `(B*N) x d` sequence at each plan's visible indices.
pub fn select_visible<T: Real>(g: &mut Graph<T>, seq: Var, plans: &[MaskPlan]) -> Result<Var> {
    let n = check_plans(plans, g.shape(seq)[0])?;
    let idx: Vec<usize> = plans
        .iter()
        .enumerate()
        .flat_map(|(b, p)| p.visible.iter().map(move |&i| b * n + i))
        .collect();
    g.gather_rows(seq, &idx)
}

/// Same as [`select_visible`] on a plain tensor.
pub fn select_visible_rows<T: Real>(seq: &Tensor<T>, plans: &[MaskPlan]) -> Result<Tensor<T>> {
    let n = check_plans(plans, seq.rows())?;
    let c = seq.cols();
    let mut out = Vec::new();
    for (b, p) in plans.iter().enumerate() {
        for &i in &p.visible {
            out.extend_from_slice(seq.row(b * n + i));
        }
    }
    Tensor::new(vec![out.len() / c, c], out)
}

/// Rebuild full-length sequences: visible latents go back to their original
/// positions, masked positions receive `mask_token`, then `pos_embed`
/// (`N x d`) is added to every row.
pub fn assemble_with_mask_tokens<T: Real>(
    g: &mut Graph<T>,
    latent_visible: Var,
    mask_token: Var,
    plans: &[MaskPlan],
    pos_embed: Var,
) -> Result<Var> {
    let n = plans
        .first()
        .ok_or_else(|| Error::invalid("no mask plans"))?
        .num_patches();
    let total_visible: usize = plans.iter().map(|p| p.visible.len()).sum();
    let d = g.shape(latent_visible)[1];
    if g.shape(latent_visible)[0] != total_visible
        || g.shape(mask_token) != [1, d]
        || g.shape(pos_embed) != [n, d]
    {
        return Err(Error::ShapeMismatch {
            op: "assemble_with_mask_tokens",
            lhs: g.shape(latent_visible).to_vec(),
            rhs: g.shape(pos_embed).to_vec(),
        });
    }
    let mut idx = Vec::with_capacity(n * plans.len());
    let mut offset = 0;
    for p in plans {
        if p.num_patches() != n {
            return Err(Error::invalid("mask plans disagree on patch count"));
        }
        let mut slot = vec![total_visible; n];
        for (j, &v) in p.visible.iter().enumerate() {
            slot[v] = offset + j;
        }
        idx.extend(slot);
        offset += p.visible.len();
    }
    let pool = g.concat_rows(&[latent_visible, mask_token])?;
    let full = g.gather_rows(pool, &idx)?;
    let pos_idx: Vec<usize> = (0..plans.len()).flat_map(|_| 0..n).collect();
    let pos = g.gather_rows(pos_embed, &pos_idx)?;
    g.add(full, pos)
}

/// Fixed 2-D sine-cosine table for a `rows x cols` patch grid. The first half
/// of the columns encodes the grid row, the second half the grid column.
pub fn positional_embeddings<T: Real>(rows: usize, cols: usize, d: usize) -> Result<Tensor<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(Error::invalid(format!("embedding width {d} is not divisible by 4")));
    }
    let quarter = d / 4;
    let omega: Vec<f64> = (0..quarter)
        .map(|k| 1.0 / 10000f64.powf(k as f64 / quarter as f64))
        .collect();
    let mut out = Vec::with_capacity(rows * cols * d);
    for r in 0..rows {
        for c in 0..cols {
            for pos in [r as f64, c as f64] {
                out.extend(omega.iter().map(|w| cast::<T>((pos * w).sin())));
                out.extend(omega.iter().map(|w| cast::<T>((pos * w).cos())));
            }
        }
    }
    Tensor::new(vec![rows * cols, d], out)
}

/// Square-grid convenience form.
pub fn positional_embeddings_for<T: Real>(n_patches: usize, d: usize) -> Result<Tensor<T>> {
    let side = (n_patches as f64).sqrt().round() as usize;
    if side * side != n_patches {
        return Err(Error::invalid(format!("{n_patches} patches do not form a square grid")));
    }
    positional_embeddings(side, side, d)
}
