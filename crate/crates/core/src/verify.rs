//! Self-contained verification suites: finite-difference gradient checks of
//! every loss through a randomly initialised model, and closed-form loss values.

use std::fmt;

use crate::data::Label;
use crate::error::{Error, Result};
use crate::gradcheck::{grad_check, grad_check_many, GradCheckOptions, GradCheckReport};
use crate::graph::{Bound, Graph, Var};
use crate::losses::{
    image_to_text_loss, label_guided_clip_loss, masked_feature_distillation_loss, mim_loss, text_to_image_loss,
    total_loss, ClipBatchFeatures, DistillScope, LossWeights, MimOptions,
};
use crate::model::{
    decode_features, decode_pixels, encode_visible, image_embedding, momentum_target, names, text_embedding,
    ImagePath, ModelConfig, ModelParams, MomentumParams,
};
use crate::patcher::{sample_mask, select_visible_rows, MaskPlan};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{objective, ObjectiveSpec, StepInputs, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossTerm {
    Mim,
    ImageToText,
    TextToImage,
    LabelGuidedClip,
    Mfd,
    Total,
}

impl LossTerm {
    pub const ALL: [LossTerm; 6] = [
        LossTerm::Mim,
        LossTerm::ImageToText,
        LossTerm::TextToImage,
        LossTerm::LabelGuidedClip,
        LossTerm::Mfd,
        LossTerm::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossTerm::Mim => "mim",
            LossTerm::ImageToText => "i2t",
            LossTerm::TextToImage => "t2i",
            LossTerm::LabelGuidedClip => "lg_clip",
            LossTerm::Mfd => "mfd",
            LossTerm::Total => "total",
        }
    }

    /// Parameter prefixes the term can reach. Everything else receives an
    /// exactly zero gradient, which the isolation tests cover separately.
    pub fn reach(self) -> &'static [&'static str] {
        match self {
            LossTerm::Mim => &[names::ENCODER, names::IMAGE_DECODER],
            LossTerm::Mfd => &[names::ENCODER, names::FEATURE_DECODER],
            LossTerm::ImageToText | LossTerm::TextToImage | LossTerm::LabelGuidedClip => &[
                names::ENCODER,
                names::BRIDGE,
                names::TEXT,
                names::IMAGE_PROJ,
                names::TEXT_PROJ,
                names::LOG_TAU,
            ],
            LossTerm::Total => &[""],
        }
    }
}

impl fmt::Display for LossTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A random model in 64-bit plus one batch of inputs, shared by all terms.
pub struct Probe {
    pub model: ModelParams<f64>,
    pub inputs: StepInputs<f64>,
    pub spec: ObjectiveSpec,
}

impl Probe {
    /// `paired` images carry captions and labels (the first two share a
    /// class); `unpaired` images only feed the masked branch.
    pub fn random(config: ModelConfig, paired: usize, unpaired: usize, mask_ratio: f64, seed: u64) -> Result<Self> {
        let mut rng = Rng::derive(seed, "verify", 0);
        let mut model = ModelParams::<f64>::init(config.clone(), &mut rng)?;
        // zero-initialised tensors would hide bugs in their gradients
        for (name, t) in model.params.iter_mut() {
            if name.ends_with("bias") || name.ends_with("beta") || name.ends_with("mask_token") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.next_normal());
            }
        }
        let grid = config.grid;
        let n = grid.num_patches();
        let images = paired + unpaired;
        let len = images * n * grid.patch_dim();
        let patches = Tensor::new(vec![images * n, grid.patch_dim()], (0..len).map(|_| rng.next_uniform()).collect())?;
        let plans = (0..images)
            .map(|_| sample_mask(n, mask_ratio, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let vocab = config.vocab_size as u64;
        let tokens = (0..paired)
            .map(|i| {
                let used = 1 + i % config.max_text_len;
                (0..config.max_text_len)
                    .map(|k| if k < used { 2 + rng.below(vocab - 2) as u32 } else { 0 })
                    .collect()
            })
            .collect();
        let labels = (0..paired).map(|i| Label::Class(if i < 2 { 0 } else { i as u32 })).collect();
        let mut momentum = MomentumParams::from_online(&model, 0.999);
        for (_, t) in momentum.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.01 * rng.next_normal());
        }
        let targets = momentum_target(&momentum, &config, &patches)?;
        let spec = ObjectiveSpec {
            variant: Variant::Maskedclip,
            weights: LossWeights { lg_clip: 0.5, mfd: 0.5 },
            mim: MimOptions::default(),
            distill_scope: DistillScope::AllPatches,
        };
        Ok(Probe {
            model,
            inputs: StepInputs {
                patches,
                num_paired: paired,
                tokens,
                labels,
                plans,
                targets: Some(targets),
            },
            spec,
        })
    }

    pub fn loss(&self, g: &mut Graph<f64>, b: &Bound, term: LossTerm) -> Result<Var> {
        let cfg = &self.model.config;
        let inp = &self.inputs;
        match term {
            LossTerm::Total => Ok(objective(g, b, cfg, inp, &self.spec)?.total),
            LossTerm::Mim | LossTerm::Mfd => {
                let vis = g.constant(select_visible_rows(&inp.patches, &inp.plans)?);
                let latent = encode_visible(g, b, cfg, vis, &inp.plans)?;
                if term == LossTerm::Mim {
                    let pred = decode_pixels(g, b, cfg, latent, &inp.plans)?;
                    mim_loss(g, pred, &inp.patches, &inp.plans, self.spec.mim)
                } else {
                    let pred = decode_features(g, b, cfg, latent, &inp.plans)?;
                    let target = inp.targets.as_ref().expect("built with targets");
                    masked_feature_distillation_loss(g, pred, target, &inp.plans, self.spec.distill_scope)
                }
            }
            _ => {
                let rows = inp.num_paired * cfg.grid.num_patches();
                let d = inp.patches.cols();
                let paired = Tensor::new(vec![rows, d], inp.patches.data()[..rows * d].to_vec())?;
                let x = g.constant(paired);
                let img = image_embedding(g, b, cfg, x, ImagePath::Bridge)?;
                let txt = text_embedding(g, b, cfg, &inp.tokens)?;
                let log_tau = b.get(names::LOG_TAU)?;
                let tau = g.exp(log_tau)?;
                let f = ClipBatchFeatures::new(g, img, txt, tau, &inp.labels)?;
                match term {
                    LossTerm::ImageToText => image_to_text_loss(g, &f),
                    LossTerm::TextToImage => text_to_image_loss(g, &f),
                    _ => Ok(label_guided_clip_loss(g, &f)?.combined),
                }
            }
        }
    }

    /// Finite-difference check of one term over the parameters it reaches.
    pub fn check(&self, term: LossTerm, options: &GradCheckOptions, seed: u64) -> Result<GradCheckReport> {
        let mut params = self.model.params.deep_clone();
        let mut opts = options.clone();
        if opts.include.is_none() {
            opts.include = Some(term.reach().iter().map(|s| s.to_string()).collect());
        }
        let mut rng = Rng::derive(seed, "verify.coords", term as u64);
        grad_check(|g, b| self.loss(g, b, term), &mut params, &opts, &mut rng)
    }

    /// Check every term at once over all parameters, reading the five losses
    /// and the weighted total off one objective graph per perturbation.
    pub fn check_all(&self, options: &GradCheckOptions, seed: u64) -> Result<Vec<(LossTerm, GradCheckReport)>> {
        let mut params = self.model.params.deep_clone();
        let mut rng = Rng::derive(seed, "verify.coords", u64::MAX);
        let reports = grad_check_many(
            |g, b| {
                let v = objective(g, b, &self.model.config, &self.inputs, &self.spec)?;
                let missing = || Error::invalid("objective skipped a term");
                let clip = v.clip.ok_or_else(missing)?;
                Ok(vec![
                    v.mim.ok_or_else(missing)?,
                    clip.i2t,
                    clip.t2i,
                    clip.combined,
                    v.mfd.ok_or_else(missing)?,
                    v.total,
                ])
            },
            &mut params,
            options,
            &mut rng,
        )?;
        Ok(LossTerm::ALL.into_iter().zip(reports).collect())
    }
}

/// One closed-form or oracle comparison.
#[derive(Clone, Debug)]
pub struct ValueCheck {
    pub name: String,
    pub got: f64,
    pub expected: f64,
    pub tolerance: f64,
}

impl ValueCheck {
    fn new(name: impl Into<String>, got: f64, expected: f64, tolerance: f64) -> Self {
        ValueCheck {
            name: name.into(),
            got,
            expected,
            tolerance,
        }
    }

    pub fn error(&self) -> f64 {
        (self.got - self.expected).abs()
    }

    pub fn passed(&self) -> bool {
        self.error() <= self.tolerance
    }
}

fn rows(data: &[&[f64]]) -> Result<Tensor<f64>> {
    let owned: Vec<Vec<f64>> = data.iter().map(|r| r.to_vec()).collect();
    Tensor::from_rows(&owned)
}

fn clip_pair(img: &[&[f64]], txt: &[&[f64]], tau: f64, labels: &[Label]) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let i = g.constant(rows(img)?);
    let t = g.constant(rows(txt)?);
    let tau = g.constant(Tensor::scalar(tau));
    let f = ClipBatchFeatures::new(&g, i, t, tau, labels)?;
    let a = image_to_text_loss(&mut g, &f)?;
    let b = text_to_image_loss(&mut g, &f)?;
    let c = label_guided_clip_loss(&mut g, &f)?.combined;
    Ok((g.scalar_value(a), g.scalar_value(b), g.scalar_value(c)))
}

/// Symmetric InfoNCE with the diagonal as the only positive, written with
/// plain loops and no graph.
pub fn vanilla_infonce(img: &[Vec<f64>], txt: &[Vec<f64>], tau: f64) -> f64 {
    let b = img.len();
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    let lse = |v: &[f64]| {
        let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
    };
    let s: Vec<Vec<f64>> = (0..b).map(|i| (0..b).map(|j| tau * dot(&img[i], &txt[j])).collect()).collect();
    let mut total = 0.0;
    for i in 0..b {
        let col: Vec<f64> = (0..b).map(|j| s[j][i]).collect();
        total += lse(&s[i]) - s[i][i] + lse(&col) - s[i][i];
    }
    total / (2 * b) as f64
}

fn unit_rows(rng: &mut Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.next_normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// Worst absolute gap between the label-guided loss with unique labels and
/// [`vanilla_infonce`] over `batches` random batches of size 1 to 16.
pub fn infonce_reduction_gap(batches: usize, seed: u64) -> Result<f64> {
    let mut rng = Rng::derive(seed, "verify.infonce", 0);
    let mut worst = 0f64;
    for k in 0..batches {
        let b = 1 + k % 16;
        let d = 2 + rng.below(15) as usize;
        let img = unit_rows(&mut rng, b, d);
        let txt = unit_rows(&mut rng, b, d);
        let tau = rng.range(1.0, 30.0);
        let labels: Vec<Label> = (0..b as u64).map(Label::Unique).collect();
        let ir: Vec<&[f64]> = img.iter().map(Vec::as_slice).collect();
        let tr: Vec<&[f64]> = txt.iter().map(Vec::as_slice).collect();
        let (_, _, ours) = clip_pair(&ir, &tr, tau, &labels)?;
        worst = worst.max((ours - vanilla_infonce(&img, &txt, tau)).abs());
    }
    Ok(worst)
}

/// Closed-form loss values and the vanilla-contrastive reduction.
pub fn value_suite(seed: u64) -> Result<Vec<ValueCheck>> {
    let mut out = Vec::new();
    let two = MaskPlan::from_visible(2, &[0])?;

    let target = rows(&[&[0.3, 0.7], &[1.0, 1.0]])?;
    let mut g = Graph::new();
    let p = g.constant(target.clone());
    let l = mim_loss(&mut g, p, &target, std::slice::from_ref(&two), MimOptions::default())?;
    out.push(ValueCheck::new("mim perfect reconstruction", g.scalar_value(l), 0.0, 0.0));
    let p = g.constant(rows(&[&[5.0, -2.0], &[0.0, 0.0]])?);
    let l = mim_loss(&mut g, p, &target, std::slice::from_ref(&two), MimOptions::default())?;
    out.push(ValueCheck::new("mim hand example", g.scalar_value(l), 1.0, 1e-6));

    let t = rows(&[&[0.2, -1.0], &[3.0, 0.5]])?;
    let all = MaskPlan::all_visible(2);
    for (name, pred, expected) in [
        ("mfd identical direction", t.clone(), -1.0),
        ("mfd scaled direction", Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| 3.0 * v).collect())?, -1.0),
    ] {
        let mut g = Graph::new();
        let p = g.constant(pred);
        let l = masked_feature_distillation_loss(&mut g, p, &t, std::slice::from_ref(&all), DistillScope::AllPatches)?;
        out.push(ValueCheck::new(name, g.scalar_value(l), expected, 1e-12));
    }
    let mut g = Graph::new();
    let p = g.constant(rows(&[&[1.0, 0.0], &[1.0, 0.0]])?);
    let orth = rows(&[&[0.0, 1.0], &[0.0, 1.0]])?;
    let l = masked_feature_distillation_loss(&mut g, p, &orth, std::slice::from_ref(&all), DistillScope::AllPatches)?;
    out.push(ValueCheck::new("mfd orthogonal", g.scalar_value(l), 0.0, 1e-12));

    let (a, b, c) = clip_pair(&[&[0.6, 0.8]], &[&[1.0, 0.0]], 5.0, &[Label::Class(0)])?;
    out.push(ValueCheck::new("contrastive batch of one", a.abs() + b.abs() + c.abs(), 0.0, 1e-12));
    let e = std::f64::consts::E;
    let two_way = -(e / (e + 1.0)).ln();
    let (a, b, c) = clip_pair(
        &[&[1.0, 0.0], &[0.0, 1.0]],
        &[&[1.0, 0.0], &[0.0, 1.0]],
        1.0,
        &[Label::Class(0), Label::Class(1)],
    )?;
    out.push(ValueCheck::new("i2t two-way softmax", a, two_way, 1e-6));
    out.push(ValueCheck::new("t2i two-way softmax", b, two_way, 1e-6));
    out.push(ValueCheck::new("lg_clip two-way softmax", c, two_way, 1e-6));
    let (a, _, _) = clip_pair(
        &[&[1.0, 0.0], &[0.0, 1.0]],
        &[&[0.6, 0.8], &[0.6, 0.8]],
        4.0,
        &[Label::Class(2), Label::Class(2)],
    )?;
    out.push(ValueCheck::new("shared label split mass", a, 2f64.ln(), 1e-6));
    let w = LossWeights { lg_clip: 0.01, mfd: 0.01 };
    out.push(ValueCheck::new("weighted total", total_loss(1.0, 2.0, -1.0, w)?.total, 1.01, 1e-12));
    out.push(ValueCheck::new(
        "unique labels reduce to vanilla InfoNCE",
        infonce_reduction_gap(50, seed)?,
        0.0,
        1e-6,
    ));
    Ok(out)
}
