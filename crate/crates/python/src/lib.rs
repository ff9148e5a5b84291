//! Python bindings: network construction, training, prediction, scoring and
//! the loss functions, with arrays passed as flat NHWC lists.

use std::collections::BTreeMap;
use std::path::PathBuf;

use focus_unet::attention::{adaptive_kernel_channel, KERNEL_B, KERNEL_GAMMA};
use focus_unet::config::KeyValues;
use focus_unet::data::{self, make_batch};
use focus_unet::gradcheck::run_suite;
use focus_unet::losses::{self, LossConfig};
use focus_unet::metrics::{self, mean_scores, Mask, Scores};
use focus_unet::model::{self, FocusUNet as CoreNet, NetworkConfig as CoreConfig};
use focus_unet::trainer::{self, Checkpoint, TrainConfig};
use focus_unet::{Error, Graph, Tensor};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBool, PyDict};

fn py_err(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Config { .. }
        | Error::InvalidShape { .. }
        | Error::ShapeMismatch { .. }
        | Error::DimensionMismatch { .. }
        | Error::Dataset(_)
        | Error::Incompatible(_) => PyValueError::new_err(msg),
        Error::Io(_) | Error::MissingFile(_) | Error::Image(_) | Error::NotRgb { .. } => {
            PyIOError::new_err(msg)
        }
        _ => PyRuntimeError::new_err(msg),
    }
}

/// Maps a keyword (`depth`, `focal_gamma`) or a full key (`net.depth`) to
/// its full key.
pub fn resolve_key(known: &[&'static str], name: &str) -> Result<&'static str, String> {
    known
        .iter()
        .find(|k| **k == name || k.split_once('.').map(|(_, s)| s) == Some(name))
        .copied()
        .ok_or_else(|| {
            format!(
                "unknown option {name:?}; expected one of {}",
                known.join(", ")
            )
        })
}

fn option_text(value: &Bound<'_, PyAny>) -> PyResult<String> {
    if value.is_instance_of::<PyBool>() {
        Ok(value.extract::<bool>()?.to_string())
    } else {
        Ok(value.str()?.to_string())
    }
}

fn key_values(known: &[&'static str], kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<KeyValues> {
    let mut kv = KeyValues::new();
    if let Some(d) = kwargs {
        for (k, v) in d.iter() {
            let name: String = k.extract()?;
            let key = resolve_key(known, &name).map_err(PyValueError::new_err)?;
            kv.set(key, option_text(&v)?);
        }
    }
    Ok(kv)
}

fn scores_dict(s: &Scores) -> BTreeMap<&'static str, f64> {
    BTreeMap::from([
        ("dsc", s.dsc),
        ("iou", s.iou),
        ("recall", s.recall),
        ("precision", s.precision),
    ])
}

/// Network hyper-parameters. Keyword arguments override the defaults, e.g.
/// `NetworkConfig(depth=3, base_channels=8, gate="focus")`.
#[pyclass(
    name = "NetworkConfig",
    module = "focus_unet",
    frozen,
    skip_from_py_object
)]
#[derive(Clone)]
pub struct PyNetworkConfig {
    inner: CoreConfig,
}

#[pymethods]
impl PyNetworkConfig {
    #[new]
    #[pyo3(signature = (**kwargs))]
    fn new(kwargs: Option<&Bound<'_, PyDict>>) -> PyResult<Self> {
        let mut inner = CoreConfig::default();
        inner
            .apply(&key_values(&CoreConfig::KEYS, kwargs)?)
            .map_err(py_err)?;
        inner.validate().map_err(py_err)?;
        Ok(PyNetworkConfig { inner })
    }

    #[getter]
    fn depth(&self) -> usize {
        self.inner.depth
    }
    #[getter]
    fn base_channels(&self) -> usize {
        self.inner.base_channels
    }
    #[getter]
    fn height(&self) -> usize {
        self.inner.height
    }
    #[getter]
    fn width(&self) -> usize {
        self.inner.width
    }
    #[getter]
    fn focal_lambda(&self) -> f64 {
        self.inner.focal_lambda
    }
    #[getter]
    fn deep_supervision(&self) -> bool {
        self.inner.deep_supervision
    }
    #[getter]
    fn gate(&self) -> &'static str {
        self.inner.gate.as_str()
    }
    #[getter]
    fn short_skips(&self) -> bool {
        self.inner.short_skips
    }

    /// Parameter count implied by the configuration.
    fn parameter_count(&self) -> usize {
        self.inner.parameter_count()
    }

    fn to_dict(&self) -> BTreeMap<String, String> {
        let kv = self.inner.to_key_values();
        kv.keys()
            .map(|k| (k.to_string(), kv.get(k).unwrap_or_default().to_string()))
            .collect()
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "NetworkConfig(depth={}, base_channels={}, height={}, width={}, focal_lambda={}, \
             deep_supervision={}, gate={:?}, short_skips={})",
            c.depth,
            c.base_channels,
            c.height,
            c.width,
            c.focal_lambda,
            c.deep_supervision,
            c.gate.as_str(),
            c.short_skips
        )
    }
}

/// An RGB image (flat `[h, w, 3]`, values in `[0, 255]`) with its 0/1 mask
/// (flat `[h, w]`).
#[pyclass(name = "Sample", module = "focus_unet", frozen, skip_from_py_object)]
#[derive(Clone)]
pub struct PySample {
    inner: data::Sample,
}

#[pymethods]
impl PySample {
    #[new]
    fn new(
        id: String,
        height: usize,
        width: usize,
        image: Vec<f32>,
        mask: Vec<u8>,
    ) -> PyResult<Self> {
        let image = Tensor::new([height, width, 3], image).map_err(py_err)?;
        let mask = Mask::new(height, width, mask).map_err(py_err)?;
        let inner = data::Sample::new(id, image, mask).map_err(py_err)?;
        Ok(PySample { inner })
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }
    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }
    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }
    fn image(&self) -> Vec<f32> {
        self.inner.image.data().to_vec()
    }
    fn mask(&self) -> Vec<u8> {
        self.inner.mask.data.clone()
    }
    fn __repr__(&self) -> String {
        format!(
            "Sample({:?}, {}x{})",
            self.inner.id,
            self.height(),
            self.width()
        )
    }
}

fn core_samples(samples: &[PyRef<'_, PySample>]) -> Vec<data::Sample> {
    samples.iter().map(|s| s.inner.clone()).collect()
}

fn resized(samples: Vec<data::Sample>, cfg: &CoreConfig) -> PyResult<Vec<data::Sample>> {
    samples
        .into_iter()
        .map(|s| {
            if (s.height(), s.width()) == (cfg.height, cfg.width) {
                Ok(s)
            } else {
                data::resize(&s, cfg.height, cfg.width).map_err(py_err)
            }
        })
        .collect()
}

/// A Focus U-Net with `f32` parameters.
#[pyclass(name = "FocusUNet", module = "focus_unet")]
pub struct PyFocusUNet {
    inner: CoreNet<f32>,
}

#[pymethods]
impl PyFocusUNet {
    /// Builds a freshly initialised network; the same seed gives the same
    /// weights.
    #[new]
    #[pyo3(signature = (config, seed = 0))]
    fn new(config: PyRef<'_, PyNetworkConfig>, seed: u64) -> PyResult<Self> {
        let inner = CoreNet::build(config.inner.clone(), seed).map_err(py_err)?;
        Ok(PyFocusUNet { inner })
    }

    #[getter]
    fn config(&self) -> PyNetworkConfig {
        PyNetworkConfig {
            inner: self.inner.config.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.inner.num_parameters()
    }

    /// Raw forward pass on `n` z-scored images (flat `[n, h, w, 3]`).
    /// Returns the softmax output of every supervised level, deepest first,
    /// as `(data, shape)` pairs.
    fn forward(
        &self,
        py: Python<'_>,
        images: Vec<f32>,
        n: usize,
    ) -> PyResult<Vec<(Vec<f32>, Vec<usize>)>> {
        let c = &self.inner.config;
        let batch =
            Tensor::new([n, c.height, c.width, model::IN_CHANNELS], images).map_err(py_err)?;
        let outs = py.detach(|| self.inner.predict(&batch)).map_err(py_err)?;
        Ok(outs
            .into_iter()
            .map(|t| (t.data().to_vec(), t.shape().to_vec()))
            .collect())
    }

    /// Binary masks (flat `[h, w]`) for each sample, at the network
    /// resolution.
    #[pyo3(signature = (samples, batch_size = 8))]
    fn segment(
        &self,
        py: Python<'_>,
        samples: Vec<PyRef<'_, PySample>>,
        batch_size: usize,
    ) -> PyResult<Vec<Vec<u8>>> {
        let samples = resized(core_samples(&samples), &self.inner.config)?;
        py.detach(|| {
            let mut masks = Vec::with_capacity(samples.len());
            for chunk in samples.chunks(batch_size.max(1)) {
                let refs: Vec<&data::Sample> = chunk.iter().collect();
                let batch = make_batch::<f32>(&refs)?;
                let out = self.inner.predict(&batch.images)?;
                let last = out.last().expect("final output");
                masks.extend(metrics::binarize(last)?.into_iter().map(|m| m.data));
            }
            Ok(masks)
        })
        .map_err(py_err)
    }

    /// Mean DSC, IoU, recall and precision of the final output.
    #[pyo3(signature = (samples, batch_size = 8))]
    fn evaluate(
        &self,
        py: Python<'_>,
        samples: Vec<PyRef<'_, PySample>>,
        batch_size: usize,
    ) -> PyResult<BTreeMap<&'static str, f64>> {
        let samples = resized(core_samples(&samples), &self.inner.config)?;
        let per_image = py
            .detach(|| trainer::evaluate(&self.inner, &samples, batch_size))
            .map_err(py_err)?;
        Ok(scores_dict(&mean_scores(&per_image)))
    }

    /// Trains in place and keeps the parameters of the epoch with the lowest
    /// validation loss. Keywords set training options (`epochs`, `lr0`,
    /// `loss`, `focal_gamma`, ...). Returns the per-epoch log.
    #[pyo3(signature = (train, val, **kwargs))]
    fn train(
        &mut self,
        py: Python<'_>,
        train: Vec<PyRef<'_, PySample>>,
        val: Vec<PyRef<'_, PySample>>,
        kwargs: Option<&Bound<'_, PyDict>>,
    ) -> PyResult<Vec<BTreeMap<&'static str, f64>>> {
        let mut cfg = TrainConfig::default();
        cfg.apply(&key_values(&TrainConfig::KEYS, kwargs)?)
            .map_err(py_err)?;
        let train = resized(core_samples(&train), &self.inner.config)?;
        let val = resized(core_samples(&val), &self.inner.config)?;
        let model = &mut self.inner;
        let outcome = py
            .detach(|| {
                let outcome = trainer::train(model, &train, &val, &cfg)?;
                *model = outcome.best.clone().into_model()?;
                Ok(outcome)
            })
            .map_err(py_err)?;
        Ok(outcome
            .log
            .iter()
            .map(|e| {
                BTreeMap::from([
                    ("epoch", e.epoch as f64),
                    ("lr", e.lr),
                    ("train_loss", e.train_loss),
                    ("val_loss", e.val_loss),
                    ("val_mdsc", e.val_mdsc),
                ])
            })
            .collect())
    }

    #[pyo3(signature = (path, epoch = 0, best_val_loss = f64::NAN))]
    fn save(&self, path: PathBuf, epoch: usize, best_val_loss: f64) -> PyResult<()> {
        Checkpoint::from_model(&self.inner, epoch, best_val_loss)
            .save(&path)
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = Checkpoint::load(&path)
            .and_then(Checkpoint::into_model)
            .map_err(py_err)?;
        Ok(PyFocusUNet { inner })
    }

    fn __repr__(&self) -> String {
        format!("FocusUNet({} parameters)", self.inner.num_parameters())
    }
}

/// Reproducible synthetic polyp-like samples.
#[pyfunction]
#[pyo3(signature = (n, height = 64, width = 64, seed = 0))]
fn synth_dataset(n: usize, height: usize, width: usize, seed: u64) -> Vec<PySample> {
    data::synth_polyp_dataset(n, height, width, seed)
        .into_iter()
        .map(|inner| PySample { inner })
        .collect()
}

/// Reads `images/` and `masks/` PNG pairs from a directory.
#[pyfunction]
fn load_dataset(dir: PathBuf) -> PyResult<Vec<PySample>> {
    let samples = data::load_dataset_dir(&dir).map_err(py_err)?;
    Ok(samples
        .into_iter()
        .map(|inner| PySample { inner })
        .collect())
}

#[pyfunction]
fn save_dataset(samples: Vec<PyRef<'_, PySample>>, dir: PathBuf) -> PyResult<()> {
    data::save_dataset(&core_samples(&samples), &dir).map_err(py_err)
}

/// DSC, IoU, recall and precision of one predicted 0/1 mask.
#[pyfunction]
fn scores(
    pred: Vec<u8>,
    truth: Vec<u8>,
    height: usize,
    width: usize,
) -> PyResult<BTreeMap<&'static str, f64>> {
    let p = Mask::new(height, width, pred).map_err(py_err)?;
    let t = Mask::new(height, width, truth).map_err(py_err)?;
    let c = metrics::confusion(&p, &t).map_err(py_err)?;
    Ok(scores_dict(&Scores::from_counts(&c)))
}

const LOSS_KEYS: [&str; 6] = [
    "loss.tversky_alpha",
    "loss.tversky_beta",
    "loss.focal_alpha",
    "loss.focal_gamma",
    "loss.ftl_gamma",
    "loss.epsilon",
];

/// Evaluates a named loss on softmax probabilities (flat `[n, h, w, 2]`,
/// foreground in channel 1) against 0/1 targets (flat `[n, h, w]`).
///
/// Names: `dice_ce`, `hfl`, `non_focal`, `dice`, `tversky`,
/// `focal_tversky`, `cross_entropy`, `focal`.
#[pyfunction]
#[pyo3(signature = (name, probs, target, n, height, width, **kwargs))]
fn loss(
    name: &str,
    probs: Vec<f64>,
    target: Vec<f64>,
    n: usize,
    height: usize,
    width: usize,
    kwargs: Option<&Bound<'_, PyDict>>,
) -> PyResult<f64> {
    let kv = key_values(&LOSS_KEYS, kwargs)?;
    // TrainConfig owns the parsing of the loss keys.
    let mut tc = TrainConfig::default();
    tc.apply(&kv).map_err(py_err)?;
    let cfg: LossConfig = tc.loss_config;
    cfg.validate().map_err(py_err)?;

    let p = Tensor::new([n, height, width, model::CLASSES], probs).map_err(py_err)?;
    let t = Tensor::new([n, height, width, 1], target).map_err(py_err)?;
    let mut g = Graph::<f64>::new();
    let (pv, tv) = (g.constant(p), g.constant(t));
    let out = match name {
        "dice_ce" | "dsc_ce" => losses::dice_ce_loss(&mut g, pv, tv, &cfg),
        "hfl" | "hybrid_focal" => losses::hybrid_focal_loss(&mut g, pv, tv, &cfg),
        "non_focal" => losses::non_focal_loss(&mut g, pv, tv, &cfg),
        "dice" => losses::soft_dice(&mut g, pv, tv, cfg.epsilon),
        "tversky" => losses::tversky_loss(&mut g, pv, tv, &cfg),
        "focal_tversky" => losses::focal_tversky_loss(&mut g, pv, tv, &cfg, cfg.ftl_gamma),
        "cross_entropy" => losses::cross_entropy(&mut g, pv, tv, cfg.epsilon),
        "focal" => losses::focal_loss(
            &mut g,
            pv,
            tv,
            cfg.focal_alpha,
            cfg.focal_gamma,
            cfg.epsilon,
        ),
        other => return Err(PyValueError::new_err(format!("unknown loss {other:?}"))),
    }
    .map_err(py_err)?;
    g.value(out).item().map_err(py_err)
}

/// Polynomial learning-rate decay for a 0-based epoch.
#[pyfunction]
#[pyo3(signature = (epoch, epoch_max, lr0, power = trainer::POLY_POWER))]
fn poly_lr(epoch: usize, epoch_max: usize, lr0: f64, power: f64) -> f64 {
    trainer::poly_lr_with_power(epoch, epoch_max, lr0, power)
}

/// Loss weight of the supervision head `s` levels above the final output.
#[pyfunction]
fn deep_supervision_weight(s: usize) -> f64 {
    model::deep_supervision_weight(s)
}

/// Odd channel-attention kernel size for `channels` channels.
#[pyfunction]
#[pyo3(signature = (channels, b = KERNEL_B, gamma = KERNEL_GAMMA))]
fn channel_kernel_size(channels: usize, b: f64, gamma: f64) -> usize {
    adaptive_kernel_channel(channels, b, gamma)
}

/// `(case, max_rel_error, checked, excluded, passed)`
type CaseRow = (&'static str, f64, usize, usize, bool);

/// Runs the 64-bit finite-difference gradient suite. Returns
/// `(case, max_rel_error, checked, excluded, passed)` per case.
#[pyfunction]
#[pyo3(signature = (trials = 20, seed = 0, filter = None))]
fn gradcheck(
    py: Python<'_>,
    trials: usize,
    seed: u64,
    filter: Option<String>,
) -> PyResult<Vec<CaseRow>> {
    let results = py
        .detach(|| run_suite(trials, seed, filter.as_deref()))
        .map_err(py_err)?;
    Ok(results
        .iter()
        .map(|r| {
            let rep = r.report;
            (
                r.name,
                rep.max_rel_error,
                rep.checked,
                rep.excluded,
                r.passed(),
            )
        })
        .collect())
}

#[pymodule]
#[pyo3(name = "focus_unet")]
fn focus_unet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyNetworkConfig>()?;
    m.add_class::<PySample>()?;
    m.add_class::<PyFocusUNet>()?;
    m.add_function(wrap_pyfunction!(synth_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(scores, m)?)?;
    m.add_function(wrap_pyfunction!(loss, m)?)?;
    m.add_function(wrap_pyfunction!(poly_lr, m)?)?;
    m.add_function(wrap_pyfunction!(deep_supervision_weight, m)?)?;
    m.add_function(wrap_pyfunction!(channel_kernel_size, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn keywords_resolve_to_full_keys() {
        assert_eq!(resolve_key(&CoreConfig::KEYS, "depth"), Ok("net.depth"));
        assert_eq!(resolve_key(&CoreConfig::KEYS, "net.gate"), Ok("net.gate"));
        assert_eq!(
            resolve_key(&TrainConfig::KEYS, "focal_gamma"),
            Ok("loss.focal_gamma")
        );
        assert_eq!(resolve_key(&TrainConfig::KEYS, "loss"), Ok("train.loss"));
        assert!(resolve_key(&CoreConfig::KEYS, "layers").is_err());
    }

    #[test]
    fn keyword_suffixes_are_unambiguous() {
        for keys in [
            &CoreConfig::KEYS[..],
            &TrainConfig::KEYS[..],
            &LOSS_KEYS[..],
        ] {
            let mut suffixes: Vec<&str> =
                keys.iter().map(|k| k.split_once('.').unwrap().1).collect();
            suffixes.sort_unstable();
            let n = suffixes.len();
            suffixes.dedup();
            assert_eq!(suffixes.len(), n);
        }
    }

    #[test]
    fn error_classes() {
        Python::initialize();
        Python::attach(|py| {
            let e = py_err(Error::config("net.depth", "must be >= 1"));
            assert!(e.is_instance_of::<PyValueError>(py));
            let e = py_err(Error::MissingFile("x.png".into()));
            assert!(e.is_instance_of::<PyIOError>(py));
            let e = py_err(Error::BadMagic);
            assert!(e.is_instance_of::<PyRuntimeError>(py));
        });
    }
}
