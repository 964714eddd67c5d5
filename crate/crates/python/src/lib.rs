//! Python bindings: recipe accounting, BLEU and checkpoint translation.

use graftmt::accounting::{memory_recipes, memory_table, params_report, recipe_layout};
use graftmt::freeze::RECIPES;
use graftmt::model::{checkpoint, ModelConfig, Profile, Seq2SeqModel};
use graftmt::pipeline::vocabs_from_meta;
use graftmt::tensor::Mode;
use graftmt::train::{self, decode_all};
use graftmt::data::Vocab;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

fn err(e: graftmt::Error) -> PyErr {
    match e {
        graftmt::Error::Config(_) | graftmt::Error::Contract(_) => PyValueError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn profile(name: &str) -> PyResult<(Profile, ModelConfig)> {
    let p: Profile = name.parse().map_err(err)?;
    // The toy profile is sized without a corpus here.
    Ok((p, ModelConfig::for_profile(p, 1000)))
}

fn tokens(lines: &[String]) -> Vec<Vec<String>> {
    lines.iter().map(|l| l.split_whitespace().map(str::to_string).collect()).collect()
}

/// Built-in freeze recipe names.
#[pyfunction]
fn recipes() -> Vec<&'static str> {
    RECIPES.to_vec()
}

/// Parameter counts of `recipe` on a profile's body.
#[pyfunction]
#[pyo3(signature = (recipe, profile_name = "bart"))]
fn params<'py>(py: Python<'py>, recipe: &str, profile_name: &str) -> PyResult<Bound<'py, PyDict>> {
    let (p, config) = profile(profile_name)?;
    let (layout, policy) = recipe_layout(&config, p, recipe, None).map_err(err)?;
    let r = params_report(&layout, &policy, recipe, config.d_model);
    let d = PyDict::new(py);
    d.set_item("recipe", r.recipe)?;
    d.set_item("total", r.total)?;
    d.set_item("trainable", r.trainable)?;
    d.set_item("trainable_bias_free", r.trainable_bias_free)?;
    d.set_item("first_encoder_self_attn_bias_free", r.first_encoder_self_attn_bias_free)?;
    d.set_item("layer_norm_trainable", r.layer_norm_trainable)?;
    d.set_item("layer_norm_nominal", r.layer_norm_nominal)?;
    d.set_item("subset_bias_free", r.subset_bias_free)?;
    let subtrees = PyDict::new(py);
    for s in r.subtrees {
        subtrees.set_item(s.name, (s.trainable, s.frozen))?;
    }
    d.set_item("subtrees", subtrees)?;
    Ok(d)
}

/// `(recipe, bytes_total, params_trainable)` rows, largest first.
#[pyfunction]
#[pyo3(signature = (profile_name = "mbart", recipes = None))]
fn memory(profile_name: &str, recipes: Option<Vec<String>>) -> PyResult<Vec<(String, usize, usize)>> {
    let (p, config) = profile(profile_name)?;
    let names: Vec<&str> = match &recipes {
        Some(r) => r.iter().map(String::as_str).collect(),
        None => memory_recipes(p).to_vec(),
    };
    let rows = memory_table(&config, p, &names).map_err(err)?;
    Ok(rows
        .into_iter()
        .map(|(n, m)| (n, m.bytes_total, m.params_trainable))
        .collect())
}

/// Corpus BLEU (0-100) of whitespace-tokenised lines.
#[pyfunction]
fn bleu(hyps: Vec<String>, refs: Vec<String>) -> PyResult<f64> {
    train::bleu_corpus(&tokens(&hyps), &tokens(&refs)).map_err(err)
}

/// Paired bootstrap p-value for system `a` against system `b`.
#[pyfunction]
#[pyo3(signature = (a, b, refs, n_resamples = 1000, seed = 0))]
fn paired_bootstrap(a: Vec<String>, b: Vec<String>, refs: Vec<String>, n_resamples: usize, seed: u64) -> PyResult<f64> {
    train::paired_bootstrap(&tokens(&a), &tokens(&b), &tokens(&refs), n_resamples, seed).map_err(err)
}

/// A trained checkpoint ready for decoding.
#[pyclass(module = "pygraftmt")]
struct Translator {
    model: Seq2SeqModel<f32>,
    source: Vocab,
    target: Vocab,
}

#[pymethods]
impl Translator {
    #[new]
    fn new(path: std::path::PathBuf) -> PyResult<Self> {
        let (mut model, header) = checkpoint::load::<f32>(&path).map_err(err)?;
        model.set_mode(Mode::Eval);
        let (source, target) = vocabs_from_meta(&header.meta).map_err(err)?;
        Ok(Translator { model, source, target })
    }

    #[getter]
    fn grafted(&self) -> bool {
        self.model.is_grafted()
    }

    #[pyo3(signature = (lines, beam = 5))]
    fn translate(&self, py: Python<'_>, lines: Vec<String>, beam: usize) -> PyResult<Vec<String>> {
        let sources: Vec<Vec<u32>> = lines.iter().map(|l| self.source.encode(l)).collect();
        let decoded = py.detach(|| decode_all(&self.model, &sources, beam)).map_err(err)?;
        Ok(decoded.iter().map(|d| self.target.decode(d.best.words())).collect())
    }
}

#[pymodule]
fn pygraftmt(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(recipes, m)?)?;
    m.add_function(wrap_pyfunction!(params, m)?)?;
    m.add_function(wrap_pyfunction!(memory, m)?)?;
    m.add_function(wrap_pyfunction!(bleu, m)?)?;
    m.add_function(wrap_pyfunction!(paired_bootstrap, m)?)?;
    m.add_class::<Translator>()?;
    Ok(())
}
