//! Frozen-feature linear probe, full fine-tuning, and exact ROC/PR metrics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::{bridge_features, encode_full, ModelParams};
use crate::patcher::patchify;
use crate::rng::Rng;
use crate::tensor::{cast, Real, Tensor};
use crate::trainer::{adamw_step, is_decayed, lr_at, AdamHyper, AdamState};

/// Area under the ROC curve as `P(s+ > s-) + P(s+ = s-) / 2`, computed from
/// exact integer win and tie counts.
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count() as u64;
    let neg = labels.len() as u64 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc_auc needs both classes present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins, mut ties, mut neg_below) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u64, 0u64);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        wins += p * neg_below;
        ties += p * q;
        neg_below += q;
        i = j;
    }
    Ok((2 * wins + ties) as f64 / (2 * pos * neg) as f64)
}

/// Average precision: mean over positives of the precision at the threshold
/// equal to that positive's score.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::invalid("pr_auc needs at least one positive"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut sum) = (0usize, 0usize, 0.0f64);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let mut p = 0;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            p += usize::from(labels[order[j]]);
            j += 1;
        }
        tp += p;
        seen += j - i;
        let precision = tp as f64 / seen as f64;
        for _ in 0..p {
            sum += precision;
        }
        i = j;
    }
    Ok(sum / pos as f64)
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub per_class_roc_auc: Vec<f64>,
    pub macro_roc_auc: f64,
    pub per_class_pr_auc: Vec<f64>,
    pub macro_pr_auc: f64,
    pub accuracy: f64,
    pub train_size: usize,
    pub test_size: usize,
    pub label_fraction: f64,
}

/// One-vs-rest metrics from per-row class probabilities.
pub fn classification_metrics(
    probs: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
    train_size: usize,
    label_fraction: f64,
) -> Result<ProbeResult> {
    let mut roc = Vec::with_capacity(num_classes);
    let mut pr = Vec::with_capacity(num_classes);
    for k in 0..num_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[k]).collect();
        let binary: Vec<bool> = labels.iter().map(|&l| l == k).collect();
        roc.push(roc_auc(&scores, &binary)?);
        pr.push(pr_auc(&scores, &binary)?);
    }
    let correct = probs
        .iter()
        .zip(labels)
        .filter(|(p, &l)| argmax(p) == l)
        .count();
    Ok(ProbeResult {
        macro_roc_auc: roc.iter().sum::<f64>() / num_classes as f64,
        macro_pr_auc: pr.iter().sum::<f64>() / num_classes as f64,
        per_class_roc_auc: roc,
        per_class_pr_auc: pr,
        accuracy: correct as f64 / labels.len() as f64,
        train_size,
        test_size: labels.len(),
        label_fraction,
    })
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Which representation the probe reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    /// Image encoder tokens, mean-pooled.
    #[default]
    Encoder,
    /// Bridge outputs, mean-pooled.
    Bridge,
}

/// Mean-pooled features of each image (`images.len() x d`), computed in
/// chunks without gradient tracking.
pub fn extract_features<T: Real>(
    model: &ModelParams<T>,
    images: &[&Tensor<f32>],
    source: FeatureSource,
) -> Result<Tensor<f64>> {
    const CHUNK: usize = 64;
    let cfg = &model.config;
    let d = cfg.encoder.width;
    let mut out = Vec::with_capacity(images.len() * d);
    for chunk in images.chunks(CHUNK) {
        let mut rows = Vec::with_capacity(chunk.len() * cfg.grid.num_patches() * cfg.grid.patch_dim());
        for img in chunk {
            rows.extend(patchify(img, &cfg.grid)?.data().iter().map(|v| cast::<T>(*v as f64)));
        }
        let patches = Tensor::new(vec![chunk.len() * cfg.grid.num_patches(), cfg.grid.patch_dim()], rows)?;
        let mut g = Graph::new();
        let bound = g.bind(&model.params, false);
        let x = g.constant(patches);
        let mut feats = encode_full(&mut g, &bound, cfg, x)?;
        if source == FeatureSource::Bridge {
            feats = bridge_features(&mut g, &bound, cfg, feats)?;
        }
        let pooled = g.segment_mean(feats, cfg.grid.num_patches())?;
        out.extend(g.value(pooled).data().iter().map(|v| v.as_f64()));
    }
    Tensor::new(vec![images.len(), d], out)
}

/// Stratified train/test split of `labels`, then a stratified subsample of
/// `floor(label_fraction * n_train)` training rows.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class counts proportional to `sizes` summing to `total`, using largest
/// remainders; every class with members gets at least one row when possible.
fn allocate(sizes: &[usize], total: usize) -> Vec<usize> {
    let n: usize = sizes.iter().sum();
    if n == 0 {
        return vec![0; sizes.len()];
    }
    let mut alloc: Vec<usize> = sizes.iter().map(|&s| s * total / n).collect();
    let mut rema: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(k, &s)| (s * total % n, k)).collect();
    rema.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - alloc.iter().sum::<usize>();
    for &(_, k) in &rema {
        if left == 0 {
            break;
        }
        if alloc[k] < sizes[k] {
            alloc[k] += 1;
            left -= 1;
        }
    }
    // give empty allocations one row, taken from the largest class
    for k in 0..sizes.len() {
        if alloc[k] == 0 && sizes[k] > 0 && total >= sizes.iter().filter(|&&s| s > 0).count() {
            let donor = (0..sizes.len()).max_by_key(|&j| (alloc[j], std::cmp::Reverse(j))).unwrap();
            if alloc[donor] > 1 {
                alloc[donor] -= 1;
                alloc[k] = 1;
            }
        }
    }
    alloc
}

fn by_class(indices: &[usize], labels: &[usize], num_classes: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); num_classes];
    for &i in indices {
        groups[labels[i]].push(i);
    }
    groups
}

pub fn stratified_split(
    labels: &[usize],
    num_classes: usize,
    test_fraction: f64,
    label_fraction: f64,
    rng: &mut Rng,
) -> Result<Split> {
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::invalid(format!("label_fraction must be in (0, 1], got {label_fraction}")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::invalid(format!("test_fraction must be in (0, 1), got {test_fraction}")));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::IndexOutOfRange {
            op: "stratified_split",
            index: bad,
            len: num_classes,
        });
    }
    let all: Vec<usize> = (0..labels.len()).collect();
    let mut train = Vec::new();
    let mut test = Vec::new();
    for mut group in by_class(&all, labels, num_classes) {
        rng.shuffle_in_place(&mut group);
        let n_test = ((group.len() as f64) * test_fraction).round() as usize;
        test.extend_from_slice(&group[..n_test]);
        train.extend_from_slice(&group[n_test..]);
    }
    let groups = by_class(&train, labels, num_classes);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let want = (label_fraction * train.len() as f64 + 1e-9).floor() as usize;
    let alloc = allocate(&sizes, want);
    let mut chosen: Vec<usize> = groups
        .into_iter()
        .zip(alloc)
        .flat_map(|(g, k)| g.into_iter().take(k))
        .collect();
    chosen.sort_unstable();
    test.sort_unstable();
    let present = |idx: &[usize]| {
        let mut seen = vec![false; num_classes];
        idx.iter().for_each(|&i| seen[labels[i]] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if present(&chosen) < 2 {
        return Err(Error::invalid("training subset has fewer than two classes"));
    }
    if present(&test) < num_classes {
        return Err(Error::invalid("test split is missing a class"));
    }
    Ok(Split { train: chosen, test })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub iterations: usize,
    pub lr: f64,
    pub l2: f64,
    pub test_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            iterations: 500,
            lr: 0.1,
            l2: 1e-4,
            test_fraction: 0.3,
        }
    }
}

/// Softmax regression fitted by full-batch gradient descent from zero weights
/// on standardised features.
pub struct LinearClassifier {
    mean: Vec<f64>,
    std: Vec<f64>,
    weights: Vec<f64>,
    bias: Vec<f64>,
    classes: usize,
}

impl LinearClassifier {
    pub fn fit(x: &[&[f64]], y: &[usize], classes: usize, cfg: &ProbeConfig) -> Self {
        let n = x.len();
        let d = x.first().map_or(0, |r| r.len());
        let mut mean = vec![0.0; d];
        for r in x {
            mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v / n as f64);
        }
        let mut std = vec![0.0; d];
        for r in x {
            std.iter_mut().zip(r.iter().zip(&mean)).for_each(|(s, (v, m))| *s += (v - m).powi(2) / n as f64);
        }
        std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
        let mut clf = LinearClassifier {
            mean,
            std,
            weights: vec![0.0; d * classes],
            bias: vec![0.0; classes],
            classes,
        };
        let z: Vec<Vec<f64>> = x.iter().map(|r| clf.standardise(r)).collect();
        for _ in 0..cfg.iterations {
            let mut gw = vec![0.0; d * classes];
            let mut gb = vec![0.0; classes];
            for (zi, &yi) in z.iter().zip(y) {
                let mut p = clf.logits(zi);
                softmax_in_place(&mut p);
                p[yi] -= 1.0;
                for (j, zj) in zi.iter().enumerate() {
                    for k in 0..classes {
                        gw[j * classes + k] += zj * p[k];
                    }
                }
                gb.iter_mut().zip(&p).for_each(|(g, v)| *g += v);
            }
            for (w, g) in clf.weights.iter_mut().zip(&gw) {
                *w -= cfg.lr * (g / n as f64 + cfg.l2 * *w);
            }
            for (b, g) in clf.bias.iter_mut().zip(&gb) {
                *b -= cfg.lr * g / n as f64;
            }
        }
        clf
    }

    fn standardise(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.std).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn logits(&self, z: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (j, zj) in z.iter().enumerate() {
            for k in 0..self.classes {
                out[k] += zj * self.weights[j * self.classes + k];
            }
        }
        out
    }

    pub fn predict_proba(&self, row: &[f64]) -> Vec<f64> {
        let mut p = self.logits(&self.standardise(row));
        softmax_in_place(&mut p);
        p
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    v.iter_mut().for_each(|x| *x /= total);
}

/// Fit on a stratified training subset and report held-out metrics.
pub fn linear_probe(
    features: &Tensor<f64>,
    labels: &[usize],
    num_classes: usize,
    label_fraction: f64,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if features.rows() != labels.len() {
        return Err(Error::invalid(format!(
            "{} feature rows for {} labels",
            features.rows(),
            labels.len()
        )));
    }
    let mut rng = Rng::derive(seed, "probe.split", 0);
    let split = stratified_split(labels, num_classes, cfg.test_fraction, label_fraction, &mut rng)?;
    probe_on_split(features, labels, num_classes, &split, label_fraction, cfg)
}

pub fn probe_on_split(
    features: &Tensor<f64>,
    labels: &[usize],
    num_classes: usize,
    split: &Split,
    label_fraction: f64,
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    let x: Vec<&[f64]> = split.train.iter().map(|&i| features.row(i)).collect();
    let y: Vec<usize> = split.train.iter().map(|&i| labels[i]).collect();
    let clf = LinearClassifier::fit(&x, &y, num_classes, cfg);
    let probs: Vec<Vec<f64>> = split.test.iter().map(|&i| clf.predict_proba(features.row(i))).collect();
    let test_labels: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
    classification_metrics(&probs, &test_labels, num_classes, split.train.len(), label_fraction)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub lr: f64,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub test_fraction: f64,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        FineTuneConfig {
            epochs: 20,
            lr: 5e-4,
            warmup_epochs: 4,
            batch_size: 32,
            weight_decay: 0.05,
            test_fraction: 0.3,
        }
    }
}

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

/// Train the image encoder plus a linear head on mean-pooled tokens with
/// cross-entropy, then evaluate on the held-out split.
pub fn fine_tune(
    model: &ModelParams<f32>,
    images: &[&Tensor<f32>],
    labels: &[usize],
    num_classes: usize,
    label_fraction: f64,
    seed: u64,
    cfg: &FineTuneConfig,
) -> Result<(ProbeResult, ModelParams<f32>)> {
    if images.len() != labels.len() {
        return Err(Error::invalid("one label per image required"));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.warmup_epochs >= cfg.epochs {
        return Err(Error::invalid("fine-tune needs epochs > warmup_epochs and a positive batch size"));
    }
    let mut rng = Rng::derive(seed, "probe.split", 0);
    let split = stratified_split(labels, num_classes, cfg.test_fraction, label_fraction, &mut rng)?;
    let mc = &model.config;
    let d = mc.encoder.width;
    let mut params = model.params.subset(&["encoder."]).deep_clone();
    let mut init_rng = Rng::derive(seed, "finetune.head", 0);
    let head: Vec<f32> = (0..d * num_classes)
        .map(|_| init_rng.next_trunc_normal(crate::model::INIT_STD) as f32)
        .collect();
    params.insert(HEAD_WEIGHT, Tensor::new(vec![d, num_classes], head)?)?;
    params.insert(HEAD_BIAS, Tensor::zeros(vec![1, num_classes]))?;
    let mut adam = AdamState::new(&params);
    let hyper = AdamHyper {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let per_epoch = split.train.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let warmup = per_epoch * cfg.warmup_epochs;
    let mut step = 0;
    let patches_of = |idx: &[usize]| -> Result<Tensor<f32>> {
        let mut rows = Vec::new();
        for &i in idx {
            rows.extend_from_slice(patchify(images[i], &mc.grid)?.data());
        }
        Tensor::new(vec![idx.len() * mc.grid.num_patches(), mc.grid.patch_dim()], rows)
    };
    for epoch in 0..cfg.epochs {
        let mut order = split.train.clone();
        Rng::derive(seed, "finetune.epoch", epoch as u64).shuffle_in_place(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = Graph::new();
            let bound = g.bind(&params, true);
            let x = g.constant(patches_of(batch)?);
            let feats = encode_full(&mut g, &bound, mc, x)?;
            let pooled = g.segment_mean(feats, mc.grid.num_patches())?;
            let logits = g.matmul(pooled, bound.get(HEAD_WEIGHT)?)?;
            let logits = g.add_row(logits, bound.get(HEAD_BIAS)?)?;
            let logp = g.log_softmax(logits)?;
            let mut onehot = vec![0.0f32; batch.len() * num_classes];
            for (r, &i) in batch.iter().enumerate() {
                onehot[r * num_classes + labels[i]] = -1.0 / batch.len() as f32;
            }
            let w = g.constant(Tensor::new(vec![batch.len(), num_classes], onehot)?);
            let weighted = g.mul(logp, w)?;
            let loss = g.sum(weighted)?;
            let grads = g.backward(loss)?;
            let grads: BTreeMap<String, Tensor<f32>> = bound.collect(&grads);
            adamw_step(&mut params, &grads, &mut adam, &hyper, lr_at(cfg.lr, warmup, step, total))?;
            step += 1;
        }
    }
    debug_assert!(is_decayed(HEAD_WEIGHT) && !is_decayed(HEAD_BIAS));
    let mut tuned = model.clone();
    for (name, t) in params.iter() {
        if let Some(slot) = tuned.params.get_mut(name) {
            *slot = (**t).clone();
        }
    }
    let test_imgs: Vec<&Tensor<f32>> = split.test.iter().map(|&i| images[i]).collect();
    let feats = extract_features(&tuned, &test_imgs, FeatureSource::Encoder)?;
    let w = params.require(HEAD_WEIGHT)?;
    let b = params.require(HEAD_BIAS)?;
    let probs: Vec<Vec<f64>> = (0..feats.rows())
        .map(|r| {
            let mut z: Vec<f64> = (0..num_classes)
                .map(|k| {
                    b.data()[k] as f64
                        + feats.row(r).iter().enumerate().map(|(j, f)| f * w.data()[j * num_classes + k] as f64).sum::<f64>()
                })
                .collect();
            softmax_in_place(&mut z);
            z
        })
        .collect();
    let test_labels: Vec<usize> = split.test.iter().map(|&i| labels[i]).collect();
    let result = classification_metrics(&probs, &test_labels, num_classes, split.train.len(), label_fraction)?;
    Ok((result, tuned))
}

/// Structured record written by the `eval` command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub mode: String,
    pub checkpoint: String,
    pub bundle: String,
    pub seed: u64,
    pub label_fraction: f64,
    pub feature_source: FeatureSource,
    pub probe: Option<ProbeConfig>,
    pub finetune: Option<FineTuneConfig>,
    pub result: ProbeResult,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roc_examples() {
        let auc = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
        assert_eq!(auc, 0.75);
        assert_eq!(roc_auc(&[0.0, 0.1, 0.9, 1.0], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 5], &[true, false, true, false, false]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn pr_examples() {
        let ap = pr_auc(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(pr_auc(&[0.9, 0.8, 0.2, 0.1], &[true, true, false, false]).unwrap(), 1.0);
        assert!(pr_auc(&[0.1], &[false]).is_err());
    }

    #[test]
    fn allocation_is_exact() {
        assert_eq!(allocate(&[10, 10, 10], 9), vec![3, 3, 3]);
        assert_eq!(allocate(&[7, 7, 7, 7], 2).iter().sum::<usize>(), 2);
        assert_eq!(allocate(&[50, 2], 5), vec![4, 1]);
        for total in 0..=20 {
            assert_eq!(allocate(&[5, 9, 6], total).iter().sum::<usize>(), total);
        }
    }

    #[test]
    fn separable_probe_is_perfect() {
        let mut rng = Rng::new(2);
        let labels: Vec<usize> = (0..80).map(|i| i % 2).collect();
        let data: Vec<f64> = labels
            .iter()
            .flat_map(|&l| [l as f64 * 4.0 + rng.next_normal() * 0.3, rng.next_normal()])
            .collect();
        let x = Tensor::new(vec![80, 2], data).unwrap();
        let r = linear_probe(&x, &labels, 2, 1.0, 0, &ProbeConfig::default()).unwrap();
        assert_eq!(r.macro_roc_auc, 1.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class_roc_auc.len(), 2);
    }
}
