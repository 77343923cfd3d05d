//! Paired and unpaired datasets, synthetic fundus-like generation, joint
//! batch sampling and the bundle file format.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Vocab;
use crate::patcher::{patchify, PatchGrid};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Supervision attached to a paired example. Pairs without a categorical
/// label carry an identifier no other pair shares.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    Class(u32),
    Unique(u64),
}

impl Label {
    pub fn class(&self) -> Option<u32> {
        match self {
            Label::Class(c) => Some(*c),
            Label::Unique(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PairedTriplet {
    /// `H x W x C`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub text: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnpairedImage {
    pub image: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetBundle {
    pub grid: PatchGrid,
    pub paired: Vec<PairedTriplet>,
    pub unpaired: Vec<UnpairedImage>,
    pub vocab: Vocab,
    pub class_names: Vec<String>,
}

impl DatasetBundle {
    /// Builds the vocabulary from the paired captions.
    pub fn new(
        grid: PatchGrid,
        paired: Vec<PairedTriplet>,
        unpaired: Vec<UnpairedImage>,
        class_names: Vec<String>,
        max_text_len: usize,
    ) -> Result<Self> {
        grid.validate()?;
        let shape = grid.image_shape();
        let images = paired.iter().map(|p| &p.image).chain(unpaired.iter().map(|u| &u.image));
        for img in images {
            if img.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "dataset_bundle",
                    lhs: img.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
        }
        if max_text_len == 0 {
            return Err(Error::invalid("max_text_len must be positive"));
        }
        let vocab = Vocab::build(paired.iter().map(|p| p.text.as_str()), max_text_len);
        Ok(DatasetBundle {
            grid,
            paired,
            unpaired,
            vocab,
            class_names,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn paired_labels(&self) -> Vec<Label> {
        self.paired.iter().map(|p| p.label).collect()
    }

    /// Patch rows of the given images stacked into `B*N x D_px`.
    pub fn patches<'a>(&self, images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Result<Tensor<f32>> {
        let mut data = Vec::new();
        let mut count = 0;
        for img in images {
            data.extend_from_slice(patchify(img, &self.grid)?.data());
            count += 1;
        }
        if count == 0 {
            return Err(Error::invalid("no images to patchify"));
        }
        Tensor::new(vec![count * self.grid.num_patches(), self.grid.patch_dim()], data)
    }
}

const TEMPLATES: [&str; 4] = [
    "a fundus image showing {}",
    "retinal photograph with signs of {}",
    "color fundus photo of an eye with {}",
    "ophthalmic image consistent with {}",
];

pub const NUM_TEMPLATES: usize = TEMPLATES.len();

pub const DEFAULT_CLASS_NAMES: [&str; 8] = [
    "normal",
    "drusen",
    "exudates",
    "hemorrhage",
    "glaucoma",
    "cataract",
    "myopia",
    "occlusion",
];

/// Fills prompt template `template_id` with a class name.
pub fn make_caption(class_name: &str, template_id: usize) -> Result<String> {
    if class_name.trim().is_empty() {
        return Err(Error::invalid("class name must be nonempty"));
    }
    let template = TEMPLATES
        .get(template_id)
        .ok_or(Error::IndexOutOfRange {
            op: "make_caption",
            index: template_id,
            len: NUM_TEMPLATES,
        })?;
    Ok(template.replace("{}", class_name))
}

/// Geometry of the procedural images, derived from the image height.
struct Scene {
    h: usize,
    w: usize,
    c: usize,
}

impl Scene {
    fn render(&self, class: usize, rng: &mut Rng) -> Tensor<f32> {
        let (h, w) = (self.h as f64, self.w as f64);
        let radius = 0.4 * h;
        let cy = (h - 1.0) / 2.0 + rng.range(-2.0, 2.0);
        let cx = (w - 1.0) / 2.0 + rng.range(-2.0, 2.0);
        let mut plane = vec![0.0f64; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                if dy * dy + dx * dx <= radius * radius {
                    plane[y * self.w + x] = 0.5;
                }
            }
        }
        let intensity = if class.is_multiple_of(2) { 0.9 } else { 0.1 };
        for _ in 0..=class {
            let r = rng.range(2.0, 3.0);
            // blob centre uniform over the disc shrunk by the blob radius
            let reach = (radius - r).max(0.0);
            let rho = reach * rng.next_uniform().sqrt();
            let theta = rng.range(0.0, std::f64::consts::TAU);
            let (by, bx) = (cy + rho * theta.sin(), cx + rho * theta.cos());
            for y in 0..self.h {
                for x in 0..self.w {
                    let (dy, dx) = (y as f64 - by, x as f64 - bx);
                    if dy * dy + dx * dx <= r * r {
                        plane[y * self.w + x] = intensity;
                    }
                }
            }
        }
        let mut data = Vec::with_capacity(self.h * self.w * self.c);
        for v in plane {
            for _ in 0..self.c {
                let noisy = v + 0.05 * rng.next_normal();
                data.push(noisy.clamp(0.0, 1.0) as f32);
            }
        }
        Tensor::new(vec![self.h, self.w, self.c], data).expect("image shape")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_paired: usize,
    pub n_unpaired: usize,
    pub n_classes: usize,
    pub grid: PatchGrid,
    pub max_text_len: usize,
    pub seed: u64,
}

/// Procedural dataset: item `i` has class `i mod K` and draws its randomness
/// from a stream derived from `(seed, i)`, so generation order is irrelevant.
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetBundle> {
    if !(2..=DEFAULT_CLASS_NAMES.len()).contains(&cfg.n_classes) {
        return Err(Error::invalid(format!(
            "n_classes must be in [2, {}], got {}",
            DEFAULT_CLASS_NAMES.len(),
            cfg.n_classes
        )));
    }
    if cfg.n_paired == 0 && cfg.n_unpaired == 0 {
        return Err(Error::invalid("dataset must contain at least one image"));
    }
    cfg.grid.validate()?;
    let scene = Scene {
        h: cfg.grid.height,
        w: cfg.grid.width,
        c: cfg.grid.channels,
    };
    let k = cfg.n_classes;
    let class_names: Vec<String> = DEFAULT_CLASS_NAMES[..k].iter().map(|s| s.to_string()).collect();
    let paired = (0..cfg.n_paired)
        .map(|i| {
            let mut rng = Rng::derive(cfg.seed, "synth.paired", i as u64);
            let class = i % k;
            let template = rng.below(NUM_TEMPLATES as u64) as usize;
            let text = make_caption(&class_names[class], template)?;
            Ok(PairedTriplet {
                image: scene.render(class, &mut rng),
                text,
                label: Label::Class(class as u32),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let unpaired = (0..cfg.n_unpaired)
        .map(|i| {
            let mut rng = Rng::derive(cfg.seed, "synth.unpaired", i as u64);
            UnpairedImage {
                image: scene.render(i % k, &mut rng),
            }
        })
        .collect();
    DatasetBundle::new(cfg.grid, paired, unpaired, class_names, cfg.max_text_len)
}

/// Paired images with labels, used as the labelled evaluation pool.
pub fn labelled_images(bundle: &DatasetBundle) -> Result<(Vec<&Tensor<f32>>, Vec<usize>)> {
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for p in &bundle.paired {
        let class = p
            .label
            .class()
            .ok_or_else(|| Error::invalid("evaluation needs categorical labels"))?;
        images.push(&p.image);
        labels.push(class as usize);
    }
    Ok((images, labels))
}

/// Indices into the bundle for one optimisation step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct JointBatch {
    pub paired: Vec<usize>,
    pub unpaired: Vec<usize>,
    /// Labels of `paired`, in the same order.
    pub labels: Vec<Label>,
}

impl JointBatch {
    pub fn num_images(&self) -> usize {
        self.paired.len() + self.unpaired.len()
    }
}

/// Positions `j` in the paired subset with the same label as `anchor`.
pub fn positive_set(batch: &JointBatch, anchor: usize) -> Result<Vec<usize>> {
    if anchor >= batch.labels.len() {
        return Err(Error::IndexOutOfRange {
            op: "positive_set",
            index: anchor,
            len: batch.labels.len(),
        });
    }
    Ok(crate::losses::positives(&batch.labels, anchor))
}

/// One stream of indices cut into batches. A stream that runs out before the
/// epoch ends is reshuffled and continues; indices already drawn into the
/// straddling batch are pushed to the back of the fresh order so a batch
/// never repeats an index.
struct Stream {
    n: usize,
    size: usize,
    recycle: bool,
    order: Vec<usize>,
    pos: usize,
}

impl Stream {
    fn take(&mut self, rng: &mut Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.size);
        while out.len() < self.size {
            if self.pos == self.order.len() {
                if !self.recycle {
                    break;
                }
                let mut fresh = rng.shuffle(self.n);
                fresh.sort_by_key(|i| out.contains(i));
                self.order = fresh;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Number of steps in one epoch: `ceil(max(Np / bp, Nu / bu))` over the
/// nonempty streams.
pub fn batches_per_epoch(n_paired: usize, bp: usize, n_unpaired: usize, bu: usize) -> Result<usize> {
    let mut count = 0;
    for (n, b, what) in [(n_paired, bp, "paired"), (n_unpaired, bu, "unpaired")] {
        if n == 0 {
            continue;
        }
        if b == 0 {
            return Err(Error::invalid(format!("{what} batch size must be positive")));
        }
        if b > n {
            return Err(Error::invalid(format!("{what} batch size {b} exceeds dataset size {n}")));
        }
        count = count.max(n.div_ceil(b));
    }
    if count == 0 {
        return Err(Error::invalid("both data streams are empty"));
    }
    Ok(count)
}

/// One epoch of joint batches drawn from independent shuffles of the paired
/// and unpaired indices.
pub fn sample_epoch(bundle: &DatasetBundle, bp: usize, bu: usize, rng: &mut Rng) -> Result<Vec<JointBatch>> {
    let (np, nu) = (bundle.paired.len(), bundle.unpaired.len());
    let total = batches_per_epoch(np, bp, nu, bu)?;
    let make = |n: usize, size: usize, rng: &mut Rng| Stream {
        n,
        size: if n == 0 { 0 } else { size },
        recycle: n > 0 && n.div_ceil(size) < total,
        order: rng.shuffle(n),
        pos: 0,
    };
    let mut paired = make(np, bp, rng);
    let mut unpaired = make(nu, bu, rng);
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        let p = paired.take(rng);
        let u = unpaired.take(rng);
        let labels = p.iter().map(|&i| bundle.paired[i].label).collect();
        out.push(JointBatch {
            paired: p,
            unpaired: u,
            labels,
        });
    }
    Ok(out)
}

const BUNDLE_MAGIC: &[u8; 4] = b"MCDB";
pub const BUNDLE_VERSION: u8 = 1;

pub(crate) struct Writer(pub Vec<u8>);

impl Writer {
    pub fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    pub fn f32s(&mut self, data: &[f32]) {
        for v in data {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    pub fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }
    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
    pub fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.bytes(n)?.to_vec()).map_err(|e| Error::Format(format!("invalid UTF-8: {e}")))
    }
    pub fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.bytes(n.checked_mul(4).ok_or_else(|| Error::Format("length overflow".into()))?)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
    pub fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.buf.len() - self.pos)));
        }
        Ok(())
    }
}

pub fn bundle_to_bytes(bundle: &DatasetBundle) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(BUNDLE_MAGIC);
    w.u8(BUNDLE_VERSION);
    let g = &bundle.grid;
    for v in [g.height, g.width, g.channels, g.patch, bundle.vocab.max_len] {
        w.u32(v as u32);
    }
    w.u32(bundle.class_names.len() as u32);
    for name in &bundle.class_names {
        w.str(name);
    }
    w.u64(bundle.paired.len() as u64);
    w.u64(bundle.unpaired.len() as u64);
    for p in &bundle.paired {
        match p.label {
            Label::Class(c) => {
                w.u8(0);
                w.u64(c as u64);
            }
            Label::Unique(id) => {
                w.u8(1);
                w.u64(id);
            }
        }
        w.str(&p.text);
        w.f32s(p.image.data());
    }
    for u in &bundle.unpaired {
        w.f32s(u.image.data());
    }
    w.0
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<DatasetBundle> {
    let mut r = Reader::new(bytes);
    if r.bytes(4).map_err(|_| Error::Format("not a bundle file: too short".into()))? != BUNDLE_MAGIC {
        return Err(Error::Format("not a bundle file: bad magic".into()));
    }
    let version = r.u8()?;
    if version != BUNDLE_VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle version {version} (expected {BUNDLE_VERSION})"
        )));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let grid = PatchGrid::new(dims[0], dims[1], dims[2], dims[3])?;
    let n_classes = r.u32()? as usize;
    let class_names = (0..n_classes).map(|_| r.str()).collect::<Result<Vec<_>>>()?;
    let np = r.u64()? as usize;
    let nu = r.u64()? as usize;
    let len = grid.image_len();
    let shape = grid.image_shape().to_vec();
    let mut paired = Vec::with_capacity(np.min(1 << 20));
    for _ in 0..np {
        let label = match r.u8()? {
            0 => Label::Class(
                u32::try_from(r.u64()?).map_err(|_| Error::Format("class id out of range".into()))?,
            ),
            1 => Label::Unique(r.u64()?),
            k => return Err(Error::Format(format!("unknown label kind {k}"))),
        };
        let text = r.str()?;
        let image = Tensor::new(shape.clone(), r.f32s(len)?)?;
        paired.push(PairedTriplet { image, text, label });
    }
    let mut unpaired = Vec::with_capacity(nu.min(1 << 20));
    for _ in 0..nu {
        unpaired.push(UnpairedImage {
            image: Tensor::new(shape.clone(), r.f32s(len)?)?,
        });
    }
    r.finish()?;
    DatasetBundle::new(grid, paired, unpaired, class_names, dims[4])
}

pub fn save_bundle(bundle: &DatasetBundle, path: &Path) -> Result<()> {
    std::fs::write(path, bundle_to_bytes(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: &Path) -> Result<DatasetBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    bundle_from_bytes(&bytes)
}
