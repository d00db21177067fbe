//! Python bindings: sketches, fusion, losses, retrieval metrics, configs,
//! synthetic data and the toy model. Tensors cross the boundary as flat
//! row-major lists plus a shape.

use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;
use serde::Serialize;

use ahbn::config::{ExperimentConfig, Profile};
use ahbn::experiment::{evaluate, run_gradcheck, sketch_statistics, train_variant, LoadedData};
use ahbn::losses::{attribute_bce_loss, id_cross_entropy, AttributeTarget, IdTarget};
use ahbn::model::checkpoint::{load_checkpoint, save_checkpoint};
use ahbn::model::{build_toy_model, Variant};
use ahbn::synth::{generate_dataset, SampleRecord};
use ahbn::{fusion, retrieval, sketch, tensor, Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::Io { .. } => PyOSError::new_err(e.to_string()),
        Error::Numerical(_) => PyArithmeticError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for ahbn::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

fn to_py_json(py: Python<'_>, value: &impl Serialize) -> PyResult<Py<PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    Ok(py.import("json")?.call_method1("loads", (text,))?.unbind())
}

fn tensor(shape: Vec<usize>, data: Vec<f64>) -> PyResult<Tensor> {
    Tensor::new(shape, data).py()
}

fn split_tensor(t: Tensor) -> (Vec<usize>, Vec<f64>) {
    (t.shape().to_vec(), t.into_data())
}

/// Count-sketch hash and sign tables for one input dimension.
#[pyclass(name = "SketchParams", module = "ahbn_py", skip_from_py_object)]
#[derive(Clone)]
struct PySketchParams(sketch::SketchParams);

#[pymethods]
impl PySketchParams {
    #[new]
    fn new(input_dim: usize, d: usize, seed: u64) -> PyResult<Self> {
        Ok(PySketchParams(sketch::make_sketch_params(input_dim, d, seed).py()?))
    }

    #[getter]
    fn input_dim(&self) -> usize {
        self.0.input_dim()
    }

    #[getter]
    fn d(&self) -> usize {
        self.0.d()
    }

    #[getter]
    fn hashes(&self) -> Vec<usize> {
        self.0.hashes().to_vec()
    }

    #[getter]
    fn signs(&self) -> Vec<i8> {
        self.0.signs().to_vec()
    }

    fn project(&self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        sketch::project(&x, &self.0).py()
    }

    fn __repr__(&self) -> String {
        format!("SketchParams(input_dim={}, d={}, seed={})", self.0.input_dim(), self.0.d(), self.0.seed())
    }
}

#[pyfunction]
fn cbp_vector(x1: Vec<f64>, x2: Vec<f64>, p1: &PySketchParams, p2: &PySketchParams) -> PyResult<Vec<f64>> {
    sketch::cbp_vector(&x1, &x2, &p1.0, &p2.0).py()
}

#[pyfunction]
fn outer_sketch_oracle(x1: Vec<f64>, x2: Vec<f64>, p1: &PySketchParams, p2: &PySketchParams) -> PyResult<Vec<f64>> {
    sketch::outer_sketch_oracle(&x1, &x2, &p1.0, &p2.0).py()
}

#[pyfunction]
fn circular_convolve(a: Vec<f64>, b: Vec<f64>) -> PyResult<Vec<f64>> {
    tensor::circular_convolve(&a, &b).py()
}

/// Returns `(re, im)`.
#[pyfunction]
fn dft(x: Vec<f64>) -> PyResult<(Vec<f64>, Vec<f64>)> {
    let c = tensor::dft(&x).py()?;
    Ok((c.re, c.im))
}

#[pyfunction]
fn idft_real(re: Vec<f64>, im: Vec<f64>) -> PyResult<Vec<f64>> {
    tensor::idft_real(&tensor::ComplexVector::new(re, im).py()?).py()
}

/// Spatial compact bilinear pooling of two `C×H×W` maps; returns `(shape, data)`.
#[pyfunction]
fn spatial_cbp(
    va_shape: Vec<usize>,
    va: Vec<f64>,
    vl_shape: Vec<usize>,
    vl: Vec<f64>,
    p1: &PySketchParams,
    p2: &PySketchParams,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    let fused = fusion::spatial_cbp(&tensor(va_shape, va)?, &tensor(vl_shape, vl)?, &p1.0, &p2.0).py()?;
    Ok(split_tensor(fused))
}

#[pyfunction]
fn full_bilinear(
    va_shape: Vec<usize>,
    va: Vec<f64>,
    vl_shape: Vec<usize>,
    vl: Vec<f64>,
) -> PyResult<(Vec<usize>, Vec<f64>)> {
    Ok(split_tensor(fusion::full_bilinear(&tensor(va_shape, va)?, &tensor(vl_shape, vl)?).py()?))
}

#[pyfunction]
#[pyo3(signature = (shape, data, eps = 1e-12))]
fn finalize_pre_fc(shape: Vec<usize>, data: Vec<f64>, eps: f64) -> PyResult<Vec<f64>> {
    Ok(fusion::finalize_pre_fc(&tensor(shape, data)?, eps).py()?.into_data())
}

#[pyfunction]
fn cross_entropy(logits: Vec<f64>, target: usize) -> PyResult<f64> {
    id_cross_entropy(&logits, IdTarget::new(target, logits.len()).py()?).py()
}

#[pyfunction]
fn attribute_bce(scores: Vec<f64>, targets: Vec<bool>) -> PyResult<f64> {
    Ok(attribute_bce_loss(&scores, &AttributeTarget::new(targets).py()?).py()?.value)
}

/// Gallery indices ordered by ascending squared distance, per query.
#[pyfunction]
fn rank_queries(queries: Vec<Vec<f64>>, gallery: Vec<Vec<f64>>) -> PyResult<Vec<Vec<usize>>> {
    let ids = (0..gallery.len()).collect();
    retrieval::rank_queries(&queries, &retrieval::Gallery::new(gallery, ids).py()?).py()
}

#[pyfunction]
#[pyo3(signature = (ranked, query_ids, gallery_ids, ks = retrieval::DEFAULT_KS.to_vec()))]
fn topk_accuracy(
    py: Python<'_>,
    ranked: Vec<Vec<usize>>,
    query_ids: Vec<usize>,
    gallery_ids: Vec<usize>,
    ks: Vec<usize>,
) -> PyResult<Py<PyAny>> {
    to_py_json(py, &retrieval::topk_accuracy(&ranked, &query_ids, &gallery_ids, &ks).py()?)
}

#[pyfunction]
fn attribute_map(py: Python<'_>, scores: Vec<Vec<f64>>, targets: Vec<Vec<bool>>) -> PyResult<Py<PyAny>> {
    to_py_json(py, &retrieval::attribute_map(&scores, &targets).py()?)
}

#[pyfunction]
#[pyo3(signature = (input_dim, d, trials, seed = 0))]
fn sketch_bench_row(py: Python<'_>, input_dim: usize, d: usize, trials: usize, seed: u64) -> PyResult<Py<PyAny>> {
    to_py_json(py, &sketch_statistics(input_dim, d, trials, seed).py()?)
}

/// Experiment configuration layered over a profile.
#[pyclass(name = "Config", module = "ahbn_py", skip_from_py_object)]
#[derive(Clone)]
struct PyConfig(ExperimentConfig);

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (toml = "", profile = None, seed = None))]
    fn new(toml: &str, profile: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let profile = profile.map(str::parse::<Profile>).transpose().py()?;
        Ok(PyConfig(ExperimentConfig::from_toml_str(toml, profile, seed).py()?))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.0.seed
    }

    #[getter]
    fn profile(&self) -> &'static str {
        self.0.profile.name()
    }

    fn to_toml(&self) -> PyResult<String> {
        self.0.to_toml().py()
    }

    fn config_hash(&self) -> String {
        self.0.config_hash()
    }

    fn __repr__(&self) -> String {
        format!("Config(profile={:?}, seed={})", self.0.profile.name(), self.0.seed)
    }
}

fn record_dict(py: Python<'_>, r: &SampleRecord) -> PyResult<Py<PyAny>> {
    let d = pyo3::types::PyDict::new(py);
    d.set_item("item_id", r.item_id)?;
    d.set_item("shape", r.image.shape().to_vec())?;
    d.set_item("image", r.image.data().to_vec())?;
    d.set_item("attributes", r.attributes.clone())?;
    d.set_item("landmarks", r.landmarks.iter().map(|k| (k.row, k.col, k.visible)).collect::<Vec<_>>())?;
    Ok(d.into_any().unbind())
}

/// Synthetic placement dataset generated from a config's synth section.
#[pyclass(name = "Dataset", module = "ahbn_py")]
struct PyDataset(ahbn::synth::Dataset);

impl PyDataset {
    fn split(&self, split: &str) -> PyResult<&[SampleRecord]> {
        match split {
            "train" => Ok(&self.0.train),
            "query" => Ok(&self.0.query),
            "gallery" => Ok(&self.0.gallery),
            _ => Err(PyValueError::new_err(format!("unknown split {split:?}"))),
        }
    }
}

#[pymethods]
impl PyDataset {
    #[new]
    fn new(config: &PyConfig) -> PyResult<Self> {
        Ok(PyDataset(generate_dataset(&config.0.synth).py()?))
    }

    #[getter]
    fn confusable_pairs(&self) -> Vec<(usize, usize)> {
        self.0.confusable_pairs.clone()
    }

    fn size(&self, split: &str) -> PyResult<usize> {
        Ok(self.split(split)?.len())
    }

    fn record(&self, py: Python<'_>, split: &str, index: usize) -> PyResult<Py<PyAny>> {
        let records = self.split(split)?;
        let r = records
            .get(index)
            .ok_or_else(|| PyValueError::new_err(format!("index {index} out of range for {split}")))?;
        record_dict(py, r)
    }
}

/// The two-branch toy network.
#[pyclass(name = "ToyModel", module = "ahbn_py")]
struct PyToyModel(ahbn::model::ToyModel);

fn parse_variant(variant: Option<&str>, config: &ExperimentConfig) -> PyResult<Variant> {
    variant.map_or(Ok(config.variant), |v| v.parse().py())
}

#[pymethods]
impl PyToyModel {
    /// Untrained model for `variant` (default: the config's variant).
    #[new]
    #[pyo3(signature = (config, variant = None))]
    fn new(config: &PyConfig, variant: Option<&str>) -> PyResult<Self> {
        let v = parse_variant(variant, &config.0)?;
        Ok(PyToyModel(build_toy_model(&config.0.variant_arch(v), config.0.seed).py()?))
    }

    /// Trains on the dataset's train split and returns the model plus the
    /// per-epoch losses.
    #[staticmethod]
    #[pyo3(signature = (config, dataset, variant = None))]
    fn train(
        py: Python<'_>,
        config: &PyConfig,
        dataset: &PyDataset,
        variant: Option<&str>,
    ) -> PyResult<(Self, Py<PyAny>)> {
        let v = parse_variant(variant, &config.0)?;
        let (model, log) = train_variant(&config.0, v, &dataset.0.train).py()?;
        Ok((PyToyModel(model), to_py_json(py, &log)?))
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(PyToyModel(load_checkpoint(path).py()?))
    }

    fn save(&self, path: &str) -> PyResult<()> {
        save_checkpoint(&self.0, path).py().map(|_| ())
    }

    #[getter]
    fn num_parameters(&self) -> usize {
        self.0.params().num_scalars()
    }

    /// Forward pass on a `3×S×S` image given as a flat list.
    fn embed(&self, py: Python<'_>, image: Vec<f64>) -> PyResult<Py<PyAny>> {
        let s = self.0.config().image_size;
        let out = self.0.forward_embed(&tensor(vec![3, s, s], image)?).py()?;
        let d = pyo3::types::PyDict::new(py);
        d.set_item("embedding", out.embedding.into_data())?;
        d.set_item("attr_scores", out.attr_scores.into_data())?;
        d.set_item("va_shape", out.va.shape().to_vec())?;
        if let Some(vl) = &out.vl {
            d.set_item("vl_shape", vl.shape().to_vec())?;
        }
        if let Some((a, l)) = out.alphas {
            d.set_item("alpha_a", a.into_data())?;
            d.set_item("alpha_l", l.into_data())?;
        }
        Ok(d.into_any().unbind())
    }

    /// Retrieval report of this model on the dataset's query and gallery splits.
    fn evaluate(&self, py: Python<'_>, config: &PyConfig, dataset: &PyDataset) -> PyResult<Py<PyAny>> {
        let data: LoadedData = dataset.0.clone().into();
        let report = evaluate(&self.0, &data, &config.0.eval, config.0.config_hash(), config.0.seed).py()?;
        to_py_json(py, &report)
    }
}

#[pyfunction]
fn gradcheck(py: Python<'_>, config: &PyConfig) -> PyResult<Py<PyAny>> {
    to_py_json(py, &run_gradcheck(&config.0).py()?)
}

#[pymodule]
fn ahbn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PySketchParams>()?;
    m.add_class::<PyConfig>()?;
    m.add_class::<PyDataset>()?;
    m.add_class::<PyToyModel>()?;
    m.add_function(wrap_pyfunction!(cbp_vector, m)?)?;
    m.add_function(wrap_pyfunction!(outer_sketch_oracle, m)?)?;
    m.add_function(wrap_pyfunction!(circular_convolve, m)?)?;
    m.add_function(wrap_pyfunction!(dft, m)?)?;
    m.add_function(wrap_pyfunction!(idft_real, m)?)?;
    m.add_function(wrap_pyfunction!(spatial_cbp, m)?)?;
    m.add_function(wrap_pyfunction!(full_bilinear, m)?)?;
    m.add_function(wrap_pyfunction!(finalize_pre_fc, m)?)?;
    m.add_function(wrap_pyfunction!(cross_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(attribute_bce, m)?)?;
    m.add_function(wrap_pyfunction!(rank_queries, m)?)?;
    m.add_function(wrap_pyfunction!(topk_accuracy, m)?)?;
    m.add_function(wrap_pyfunction!(attribute_map, m)?)?;
    m.add_function(wrap_pyfunction!(sketch_bench_row, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    Ok(())
}
