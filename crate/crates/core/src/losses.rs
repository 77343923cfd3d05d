//! Pixel reconstruction, label-guided contrastive and masked feature
//! distillation losses, plus the weighted overall objective.

use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::patcher::MaskPlan;
use crate::tensor::{cast, Real, Tensor};

/// How the pixel reconstruction error of one patch is measured.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MimOptions {
    /// Divide each patch's squared L2 error by the patch length.
    pub per_pixel_mean: bool,
    /// Standardise every target patch to zero mean and unit variance.
    pub normalize_target: bool,
}

impl Default for MimOptions {
    fn default() -> Self {
        MimOptions {
            per_pixel_mean: true,
            normalize_target: false,
        }
    }
}

/// Patches averaged over by the distillation loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillScope {
    /// Every patch position.
    #[default]
    AllPatches,
    /// Masked positions only.
    MaskedOnly,
}

fn patch_count(plans: &[MaskPlan]) -> Result<usize> {
    let n = plans
        .first()
        .ok_or_else(|| Error::invalid("no mask plans"))?
        .num_patches();
    if plans.iter().any(|p| p.num_patches() != n) {
        return Err(Error::invalid("mask plans disagree on patch count"));
    }
    Ok(n)
}

fn normalize_patches<T: Real>(target: &Tensor<T>) -> Tensor<T> {
    let c = target.cols();
    let mut out = target.clone();
    let eps: T = cast(1e-6);
    let cn: T = cast(c as f64);
    for row in out.data_mut().chunks_mut(c) {
        let mean = row.iter().copied().sum::<T>() / cn;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / cn;
        let sd = (var + eps).sqrt();
        row.iter_mut().for_each(|v| *v = (*v - mean) / sd);
    }
    out
}

/// Masked image modeling loss over a batch of images stacked as `B*N` patch
/// rows: per image, the mean over masked patches of the patch reconstruction
/// error, then the mean over images. Visible positions never contribute.
pub fn mim_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    plans: &[MaskPlan],
    options: MimOptions,
) -> Result<Var> {
    let n = patch_count(plans)?;
    if g.shape(pred) != target.shape() || target.rows() != n * plans.len() {
        return Err(Error::ShapeMismatch {
            op: "mim_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if plans.iter().any(|p| p.masked.is_empty()) {
        return Err(Error::invalid("mim_loss: a mask plan has no masked patches"));
    }
    let dp = target.cols();
    let target = if options.normalize_target {
        normalize_patches(target)
    } else {
        target.clone()
    };
    let mut idx = Vec::new();
    let mut weights = Vec::new();
    let batch = plans.len() as f64;
    let per_patch = if options.per_pixel_mean { dp as f64 } else { 1.0 };
    for (b, p) in plans.iter().enumerate() {
        let w: T = cast(1.0 / (batch * p.masked.len() as f64 * per_patch));
        for &i in &p.masked {
            idx.push(b * n + i);
            weights.extend(std::iter::repeat_n(w, dp));
        }
    }
    let target = g.constant(target);
    let diff = g.sub(pred, target)?;
    let masked = g.gather_rows(diff, &idx)?;
    let sq = g.mul(masked, masked)?;
    let w = g.constant(Tensor::new(vec![idx.len(), dp], weights)?);
    let weighted = g.mul(sq, w)?;
    g.sum(weighted)
}

/// Operands of the contrastive losses for one paired batch.
#[derive(Clone, Debug)]
pub struct ClipBatchFeatures<'a> {
    /// `B x d_joint` unit rows.
    pub image_embeds: Var,
    /// `B x d_joint` unit rows.
    pub text_embeds: Var,
    /// `1 x 1` inverse temperature.
    pub tau: Var,
    pub labels: &'a [Label],
}

impl<'a> ClipBatchFeatures<'a> {
    pub fn new<T: Real>(
        g: &Graph<T>,
        image_embeds: Var,
        text_embeds: Var,
        tau: Var,
        labels: &'a [Label],
    ) -> Result<Self> {
        let (si, st) = (g.shape(image_embeds), g.shape(text_embeds));
        if si != st || si[0] != labels.len() || si[0] == 0 {
            return Err(Error::ShapeMismatch {
                op: "clip_batch",
                lhs: si.to_vec(),
                rhs: st.to_vec(),
            });
        }
        for v in [image_embeds, text_embeds] {
            let t = g.value(v);
            for r in 0..t.rows() {
                let norm = t.row(r).iter().map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(Error::invalid(format!("embedding row {r} has norm {norm}, expected 1")));
                }
            }
        }
        if g.value(tau).len() != 1 || g.value(tau).item() <= T::zero() {
            return Err(Error::invalid("tau must be a positive scalar"));
        }
        Ok(ClipBatchFeatures {
            image_embeds,
            text_embeds,
            tau,
            labels,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.labels.len()
    }
}

/// Indices `j` whose label equals that of `anchor`; always contains `anchor`.
pub fn positives(labels: &[Label], anchor: usize) -> Vec<usize> {
    (0..labels.len()).filter(|&j| labels[j] == labels[anchor]).collect()
}

/// `W[i][j] = 1 / (B |P(i)|)` for `j` in `P(i)`, else 0.
fn positive_weights<T: Real>(labels: &[Label]) -> Tensor<T> {
    let b = labels.len();
    let mut w = vec![T::zero(); b * b];
    for i in 0..b {
        let pos = positives(labels, i);
        let v: T = cast(1.0 / (b as f64 * pos.len() as f64));
        for j in pos {
            w[i * b + j] = v;
        }
    }
    Tensor::new(vec![b, b], w).expect("square weights")
}

fn logits<T: Real>(g: &mut Graph<T>, f: &ClipBatchFeatures) -> Result<Var> {
    let txt_t = g.transpose(f.text_embeds)?;
    let sim = g.matmul(f.image_embeds, txt_t)?;
    g.scale_by(sim, f.tau)
}

fn weighted_nll<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[Label]) -> Result<Var> {
    let logp = g.log_softmax(logits)?;
    let w = g.constant(positive_weights::<T>(labels));
    let weighted = g.mul(logp, w)?;
    let total = g.sum(weighted)?;
    g.scale(total, -T::one())
}

/// Image anchors, softmax over the batch's texts, averaged over each
/// anchor's same-label positives.
pub fn image_to_text_loss<T: Real>(g: &mut Graph<T>, f: &ClipBatchFeatures) -> Result<Var> {
    let l = logits(g, f)?;
    weighted_nll(g, l, f.labels)
}

/// Text anchors, softmax over the batch's images.
pub fn text_to_image_loss<T: Real>(g: &mut Graph<T>, f: &ClipBatchFeatures) -> Result<Var> {
    let l = logits(g, f)?;
    let lt = g.transpose(l)?;
    weighted_nll(g, lt, f.labels)
}

#[derive(Clone, Copy, Debug)]
pub struct ClipLosses {
    pub i2t: Var,
    pub t2i: Var,
    /// `(i2t + t2i) / 2`
    pub combined: Var,
}

/// Both directional losses and their average, sharing one similarity matrix.
pub fn label_guided_clip_loss<T: Real>(g: &mut Graph<T>, f: &ClipBatchFeatures) -> Result<ClipLosses> {
    let l = logits(g, f)?;
    let i2t = weighted_nll(g, l, f.labels)?;
    let lt = g.transpose(l)?;
    let t2i = weighted_nll(g, lt, f.labels)?;
    let sum = g.add(i2t, t2i)?;
    let combined = g.scale(sum, cast(0.5))?;
    Ok(ClipLosses { i2t, t2i, combined })
}

/// Negative cosine similarity between predicted and target patch features,
/// averaged over patches (per `scope`) and then over images. `target` must
/// carry no gradient lineage.
pub fn masked_feature_distillation_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: &Tensor<T>,
    plans: &[MaskPlan],
    scope: DistillScope,
) -> Result<Var> {
    let n = patch_count(plans)?;
    if g.shape(pred) != target.shape() || target.rows() != n * plans.len() {
        return Err(Error::ShapeMismatch {
            op: "masked_feature_distillation_loss",
            lhs: g.shape(pred).to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let d = target.cols();
    let mut tn = g.constant(target.clone());
    tn = g.l2_normalize(tn)?;
    let batch = plans.len() as f64;
    let mut scaled = g.value(tn).clone();
    for (b, p) in plans.iter().enumerate() {
        let rows: Vec<usize> = match scope {
            DistillScope::AllPatches => (0..n).collect(),
            DistillScope::MaskedOnly => p.masked.clone(),
        };
        if rows.is_empty() {
            return Err(Error::invalid("distillation over an empty patch set"));
        }
        let w: T = cast(-1.0 / (batch * rows.len() as f64));
        let mut keep = vec![false; n];
        rows.iter().for_each(|&r| keep[r] = true);
        for (i, kept) in keep.iter().enumerate() {
            let row = &mut scaled.data_mut()[(b * n + i) * d..(b * n + i + 1) * d];
            if *kept {
                row.iter_mut().for_each(|v| *v *= w);
            } else {
                row.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }
    let weights = g.constant(scaled);
    let pn = g.l2_normalize(pred)?;
    let prod = g.mul(pn, weights)?;
    g.sum(prod)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lg_clip: f64,
    pub mfd: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lg_clip: 0.01,
            mfd: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lg_clip >= 0.0 && self.mfd >= 0.0) {
            return Err(Error::invalid(format!("loss weights must be non-negative: {self:?}")));
        }
        Ok(())
    }
}

/// Scalar values of every term; `total = mim + w_clip * lg_clip + w_mfd * mfd`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mim: f64,
    pub i2t: f64,
    pub t2i: f64,
    pub lg_clip: f64,
    pub mfd: f64,
    pub total: f64,
    pub weights: LossWeights,
}

pub fn total_loss(mim: f64, lg_clip: f64, mfd: f64, weights: LossWeights) -> Result<LossBreakdown> {
    weights.validate()?;
    Ok(LossBreakdown {
        mim,
        lg_clip,
        mfd,
        total: mim + weights.lg_clip * lg_clip + weights.mfd * mfd,
        weights,
        ..Default::default()
    })
}

/// Weighted sum of whichever terms are present. A term whose weight is zero is
/// left out of the graph entirely so no gradient flows from it.
pub fn combine_losses<T: Real>(
    g: &mut Graph<T>,
    mim: Option<Var>,
    lg_clip: Option<Var>,
    mfd: Option<Var>,
    weights: LossWeights,
) -> Result<Var> {
    weights.validate()?;
    let mut terms = Vec::new();
    if let Some(m) = mim {
        terms.push(m);
    }
    for (term, w) in [(lg_clip, weights.lg_clip), (mfd, weights.mfd)] {
        if let Some(t) = term {
            if w > 0.0 {
                terms.push(g.scale(t, cast(w))?);
            }
        }
    }
    let mut acc = match terms.first() {
        Some(t) => *t,
        None => return Ok(g.constant(Tensor::scalar(T::zero()))),
    };
    for t in &terms[1..] {
        acc = g.add(acc, *t)?;
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn unique(n: usize) -> Vec<Label> {
        (0..n as u64).map(Label::Unique).collect()
    }

    fn clip_value(img: &[Vec<f64>], txt: &[Vec<f64>], tau: f64, labels: &[Label]) -> (f64, f64, f64) {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(img).unwrap());
        let t = g.constant(Tensor::from_rows(txt).unwrap());
        let tau = g.constant(Tensor::scalar(tau));
        let f = ClipBatchFeatures::new(&g, i, t, tau, labels).unwrap();
        let l = label_guided_clip_loss(&mut g, &f).unwrap();
        (g.scalar_value(l.i2t), g.scalar_value(l.t2i), g.scalar_value(l.combined))
    }

    #[test]
    fn mim_hand_example() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor::new(vec![2, 2], vec![5.0, 5.0, 0.0, 0.0]).unwrap());
        let target = Tensor::new(vec![2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let plan = MaskPlan::from_visible(2, &[0]).unwrap();
        let l = mim_loss(&mut g, pred, &target, std::slice::from_ref(&plan), MimOptions::default()).unwrap();
        assert_eq!(g.scalar_value(l), 1.0);
        let literal = MimOptions {
            per_pixel_mean: false,
            ..Default::default()
        };
        let l = mim_loss(&mut g, pred, &target, &[plan], literal).unwrap();
        assert_eq!(g.scalar_value(l), 2.0);
    }

    #[test]
    fn mim_perfect_reconstruction_and_visible_insensitivity() {
        let mut rng = Rng::new(4);
        let target = Tensor::new(vec![8, 3], (0..24).map(|_| rng.next_normal()).collect()).unwrap();
        let plans = vec![
            MaskPlan::from_visible(4, &[1]).unwrap(),
            MaskPlan::from_visible(4, &[0, 3]).unwrap(),
        ];
        let mut g = Graph::new();
        let perfect = g.constant(target.clone());
        let l = mim_loss(&mut g, perfect, &target, &plans, MimOptions::default()).unwrap();
        assert_eq!(g.scalar_value(l), 0.0);

        let mut pred = target.clone();
        pred.data_mut().iter_mut().for_each(|v| *v += 0.5);
        let p1 = g.constant(pred.clone());
        let base = mim_loss(&mut g, p1, &target, &plans, MimOptions::default()).unwrap();
        // scramble visible rows only
        for (b, p) in plans.iter().enumerate() {
            for &i in &p.visible {
                pred.data_mut()[(b * 4 + i) * 3..(b * 4 + i + 1) * 3].copy_from_slice(&[9.0, -7.0, 3.0]);
            }
        }
        let p2 = g.constant(pred);
        let moved = mim_loss(&mut g, p2, &target, &plans, MimOptions::default()).unwrap();
        assert_eq!(g.scalar_value(base), g.scalar_value(moved));
    }

    #[test]
    fn mim_requires_masked_patches() {
        let mut g = Graph::<f64>::new();
        let pred = g.constant(Tensor::zeros(vec![2, 2]));
        let target = Tensor::zeros(vec![2, 2]);
        assert!(mim_loss(&mut g, pred, &target, &[MaskPlan::all_visible(2)], MimOptions::default()).is_err());
    }

    #[test]
    fn contrastive_singleton_batch_is_zero() {
        let (a, b, c) = clip_value(&[vec![1.0, 0.0]], &[vec![0.0, 1.0]], 3.0, &unique(1));
        assert_eq!((a, b, c), (0.0, 0.0, 0.0));
    }

    #[test]
    fn contrastive_two_way_orthogonal() {
        let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (i2t, t2i, comb) = clip_value(&e, &e, 1.0, &unique(2));
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((expected - 0.3133).abs() < 1e-4);
        for v in [i2t, t2i, comb] {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn contrastive_shared_label_symmetry() {
        let img = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let txt = vec![vec![0.6, 0.8], vec![0.6, 0.8]];
        let labels = [Label::Class(3), Label::Class(3)];
        let (i2t, _, _) = clip_value(&img, &txt, 5.0, &labels);
        assert!((i2t - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn combined_is_mean_of_directions() {
        let mut rng = Rng::new(8);
        let rows = |rng: &mut Rng| -> Vec<Vec<f64>> {
            (0..5)
                .map(|_| {
                    let v: Vec<f64> = (0..3).map(|_| rng.next_normal()).collect();
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                    v.iter().map(|x| x / n).collect()
                })
                .collect()
        };
        let (img, txt) = (rows(&mut rng), rows(&mut rng));
        let labels = [0, 1, 0, 2, 1].map(Label::Class);
        let (a, b, c) = clip_value(&img, &txt, 2.0, &labels);
        assert_eq!(c, 0.5 * (a + b));
        assert!(c >= 0.0);
    }

    #[test]
    fn rejects_non_unit_rows() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::from_rows(&[vec![2.0, 0.0]]).unwrap());
        let tau = g.constant(Tensor::scalar(1.0));
        let labels = unique(1);
        assert!(ClipBatchFeatures::new(&g, i, i, tau, &labels).is_err());
    }

    fn mfd_value(pred: Tensor<f64>, target: &Tensor<f64>, scope: DistillScope) -> f64 {
        let n = target.rows();
        let plan = MaskPlan::from_visible(n, &[0]).unwrap();
        let mut g = Graph::new();
        let p = g.constant(pred);
        let l = masked_feature_distillation_loss(&mut g, p, target, &[plan], scope).unwrap();
        g.scalar_value(l)
    }

    #[test]
    fn distillation_closed_forms() {
        let target = Tensor::new(vec![3, 2], vec![1.0, 2.0, -3.0, 0.5, 0.2, 0.2]).unwrap();
        assert!((mfd_value(target.clone(), &target, DistillScope::AllPatches) + 1.0).abs() < 1e-12);
        let mut tripled = target.clone();
        tripled.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        assert!((mfd_value(tripled, &target, DistillScope::AllPatches) + 1.0).abs() < 1e-12);
        let orth_pred = Tensor::new(vec![3, 2], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        let orth_target = Tensor::new(vec![3, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        assert_eq!(mfd_value(orth_pred, &orth_target, DistillScope::AllPatches), 0.0);
    }

    #[test]
    fn distillation_masked_only_ignores_visible_rows() {
        let target = Tensor::new(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0]).unwrap();
        // row 0 (visible) opposes its target, rows 1-2 (masked) match
        let pred = Tensor::new(vec![3, 2], vec![-1.0, 0.0, 0.0, 1.0, 0.0, 2.0]).unwrap();
        assert!((mfd_value(pred.clone(), &target, DistillScope::MaskedOnly) + 1.0).abs() < 1e-12);
        assert!((mfd_value(pred, &target, DistillScope::AllPatches) + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_arithmetic() {
        let b = total_loss(1.0, 2.0, -1.0, LossWeights::default()).unwrap();
        assert!((b.total - 1.01).abs() < 1e-12);
        let b = total_loss(0.7, 2.0, -1.0, LossWeights { lg_clip: 0.0, mfd: 0.0 }).unwrap();
        assert_eq!(b.total, 0.7);
        assert!(total_loss(1.0, 1.0, 1.0, LossWeights { lg_clip: -0.1, mfd: 0.0 }).is_err());
        assert_eq!(LossWeights::default(), LossWeights { lg_clip: 0.01, mfd: 0.01 });
    }

    #[test]
    fn zero_weight_severs_gradient() {
        let mut g = Graph::new();
        let a = g.param(std::sync::Arc::new(Tensor::scalar(2.0)));
        let b = g.param(std::sync::Arc::new(Tensor::scalar(3.0)));
        let c = g.param(std::sync::Arc::new(Tensor::scalar(4.0)));
        let total = combine_losses(&mut g, Some(a), Some(b), Some(c), LossWeights { lg_clip: 0.0, mfd: 0.5 }).unwrap();
        assert_eq!(g.scalar_value(total), 4.0);
        let grads = g.backward(total).unwrap();
        assert!(grads.get(b).is_none());
        assert_eq!(grads.get(c).unwrap().item(), 0.5);
    }
}
