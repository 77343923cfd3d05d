use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;

use maskedclip::checkpoint;
use maskedclip::cli::ModelPreset;
use maskedclip::data::{labelled_images, load_bundle, save_bundle, synth_generate, DatasetBundle, SynthConfig};
use maskedclip::evalkit::{extract_features, linear_probe, FeatureSource, ProbeConfig, ProbeResult};
use maskedclip::gradcheck::GradCheckOptions;
use maskedclip::losses::LossBreakdown;
use maskedclip::patcher::PatchGrid;
use maskedclip::trainer::{TrainConfig, TrainState, Variant};
use maskedclip::verify::{value_suite, Probe};

fn py_err(e: maskedclip::Error) -> PyErr {
    match e {
        maskedclip::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn parse_variant(name: &str) -> PyResult<Variant> {
    Variant::ALL
        .into_iter()
        .find(|v| v.name() == name)
        .ok_or_else(|| PyValueError::new_err(format!("unknown variant {name:?}")))
}

fn parse_preset(name: &str) -> PyResult<ModelPreset> {
    match name {
        "desk" => Ok(ModelPreset::Desk),
        "compact" => Ok(ModelPreset::Compact),
        "tiny" => Ok(ModelPreset::Tiny),
        _ => Err(PyValueError::new_err(format!("unknown model preset {name:?}"))),
    }
}

fn losses_dict(l: &LossBreakdown) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("mim", l.mim),
        ("i2t", l.i2t),
        ("t2i", l.t2i),
        ("lg_clip", l.lg_clip),
        ("mfd", l.mfd),
        ("total", l.total),
    ])
}

fn probe_dict(r: &ProbeResult) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("macro_roc_auc", r.macro_roc_auc),
        ("macro_pr_auc", r.macro_pr_auc),
        ("accuracy", r.accuracy),
        ("train_size", r.train_size as f64),
        ("test_size", r.test_size as f64),
        ("label_fraction", r.label_fraction),
    ])
}

/// A synthetic image/caption dataset.
#[pyclass(name = "Bundle", unsendable)]
struct PyBundle {
    inner: DatasetBundle,
}

#[pymethods]
impl PyBundle {
    #[staticmethod]
    #[pyo3(signature = (paired, unpaired, classes=4, height=32, width=32, channels=3, patch=4, max_text_len=16, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn generate(
        paired: usize,
        unpaired: usize,
        classes: usize,
        height: usize,
        width: usize,
        channels: usize,
        patch: usize,
        max_text_len: usize,
        seed: u64,
    ) -> PyResult<Self> {
        let grid = PatchGrid::new(height, width, channels, patch).map_err(py_err)?;
        let inner = synth_generate(&SynthConfig {
            n_paired: paired,
            n_unpaired: unpaired,
            n_classes: classes,
            grid,
            max_text_len,
            seed,
        })
        .map_err(py_err)?;
        Ok(PyBundle { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyBundle {
            inner: load_bundle(&path).map_err(py_err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_bundle(&self.inner, &path).map_err(py_err)
    }

    #[getter]
    fn num_paired(&self) -> usize {
        self.inner.paired.len()
    }

    #[getter]
    fn num_unpaired(&self) -> usize {
        self.inner.unpaired.len()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn captions(&self) -> Vec<String> {
        self.inner.paired.iter().map(|p| p.text.clone()).collect()
    }
}

/// Pretraining run held in memory.
#[pyclass(name = "Trainer", unsendable)]
struct PyTrainer {
    state: TrainState,
}

#[pymethods]
impl PyTrainer {
    #[new]
    #[pyo3(signature = (bundle, variant="maskedclip", model="tiny", epochs=1, warmup_epochs=0, lr=1e-3, paired_batch=8, unpaired_batch=8, mask_ratio=0.75, seed=0))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        bundle: &PyBundle,
        variant: &str,
        model: &str,
        epochs: usize,
        warmup_epochs: usize,
        lr: f64,
        paired_batch: usize,
        unpaired_batch: usize,
        mask_ratio: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let b = &bundle.inner;
        let config = TrainConfig {
            epochs,
            warmup_epochs,
            base_lr: lr,
            paired_batch,
            unpaired_batch,
            mask_ratio,
            seed,
            variant: parse_variant(variant)?,
            ..Default::default()
        };
        let model_cfg = parse_preset(model)?.build(b.grid, b.vocab.size(), b.vocab.max_len);
        Ok(PyTrainer {
            state: TrainState::new(config, model_cfg).map_err(py_err)?,
        })
    }

    /// Runs one optimizer step; `None` once every epoch has been consumed.
    fn step(&mut self, bundle: &PyBundle) -> PyResult<Option<BTreeMap<&'static str, f64>>> {
        let rec = self.state.next_step(&bundle.inner).map_err(py_err)?;
        Ok(rec.map(|r| losses_dict(&r.losses)))
    }

    /// Runs to the end and returns the per-step total loss.
    fn run(&mut self, bundle: &PyBundle) -> PyResult<Vec<f64>> {
        let mut totals = Vec::new();
        while let Some(r) = self.state.next_step(&bundle.inner).map_err(py_err)? {
            totals.push(r.losses.total);
        }
        Ok(totals)
    }

    #[getter]
    fn steps_taken(&self) -> u64 {
        self.state.step
    }

    fn save_checkpoint(&self, path: PathBuf) -> PyResult<()> {
        self.state.save(&path).map_err(py_err)
    }

    fn save_model(&self, path: PathBuf) -> PyResult<()> {
        checkpoint::save_model(&path, &self.state.model).map_err(py_err)
    }

    #[staticmethod]
    fn resume(path: PathBuf) -> PyResult<Self> {
        Ok(PyTrainer {
            state: TrainState::load(&path).map_err(py_err)?,
        })
    }

    /// Linear probe on mean-pooled features of the bundle's paired images.
    #[pyo3(signature = (bundle, label_fraction=1.0, seed=0, features="encoder"))]
    fn probe(
        &self,
        bundle: &PyBundle,
        label_fraction: f64,
        seed: u64,
        features: &str,
    ) -> PyResult<BTreeMap<&'static str, f64>> {
        let source = match features {
            "encoder" => FeatureSource::Encoder,
            "bridge" => FeatureSource::Bridge,
            _ => return Err(PyValueError::new_err(format!("unknown feature source {features:?}"))),
        };
        let (images, labels) = labelled_images(&bundle.inner).map_err(py_err)?;
        let feats = extract_features(&self.state.model, &images, source).map_err(py_err)?;
        let r = linear_probe(
            &feats,
            &labels,
            bundle.inner.num_classes(),
            label_fraction,
            seed,
            &ProbeConfig::default(),
        )
        .map_err(py_err)?;
        Ok(probe_dict(&r))
    }
}

#[pyfunction]
fn roc_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    maskedclip::evalkit::roc_auc(&scores, &labels).map_err(py_err)
}

#[pyfunction]
fn pr_auc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    maskedclip::evalkit::pr_auc(&scores, &labels).map_err(py_err)
}

/// Closed-form loss checks as `(name, got, expected, passed)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn losscheck(seed: u64) -> PyResult<Vec<(String, f64, f64, bool)>> {
    Ok(value_suite(seed)
        .map_err(py_err)?
        .into_iter()
        .map(|c| {
            let ok = c.passed();
            (c.name, c.got, c.expected, ok)
        })
        .collect())
}

/// Finite-difference check of every loss on a tiny model, as
/// `(term, max relative error)`.
#[pyfunction]
#[pyo3(signature = (seed=0))]
fn gradcheck(seed: u64) -> PyResult<Vec<(String, f64)>> {
    let grid = PatchGrid::new(8, 8, 1, 4).map_err(py_err)?;
    let cfg = ModelPreset::Tiny.build(grid, 12, 4);
    let probe = Probe::random(cfg, 3, 2, 0.5, seed).map_err(py_err)?;
    let reports = probe.check_all(&GradCheckOptions::default(), seed).map_err(py_err)?;
    Ok(reports
        .into_iter()
        .map(|(t, r)| (t.name().to_string(), r.max_rel_error))
        .collect())
}

#[pymodule]
fn maskedclip_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBundle>()?;
    m.add_class::<PyTrainer>()?;
    m.add_function(wrap_pyfunction!(roc_auc, m)?)?;
    m.add_function(wrap_pyfunction!(pr_auc, m)?)?;
    m.add_function(wrap_pyfunction!(losscheck, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
