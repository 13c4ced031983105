//! Python bindings for the modgan crate: dataset synthesis, training,
//! plan execution, and evaluation, returning plain Python types.

use modgan::composer::{parse_plan, Composer};
use modgan::evaluator::{classification_error, AttrClassifier, ComposerTranslator};
use modgan::schema_data::{synthesize_colormnist, AttributeSchema, DatasetManifest, MnistSource};
use modgan::trainer::{Dataset, TrainConfig, Trainer};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use std::path::{Path, PathBuf};

fn err(e: modgan::ModGanError) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// The attribute names and value lists of the builtin colorized-digit schema.
#[pyfunction]
fn colormnist_schema() -> Vec<(String, Vec<String>)> {
    let schema = AttributeSchema::colormnist();
    schema
        .names()
        .iter()
        .map(|n| ((*n).to_string(), schema.values(n).expect("own name").to_vec()))
        .collect()
}

/// Synthesize the colorized-digit dataset; returns (train_root, test_root).
#[pyfunction]
#[pyo3(signature = (count, size, seed, out))]
fn synth_colormnist(count: usize, size: usize, seed: u64, out: PathBuf) -> PyResult<(String, String)> {
    let (train, test) =
        synthesize_colormnist(&MnistSource::Builtin, count, size, seed, &out).map_err(err)?;
    Ok((train.root.display().to_string(), test.root.display().to_string()))
}

/// Train on a dataset directory. `overrides` are dotted `key=value` pairs
/// with the same grammar as the CLI. Returns the checkpoints directory.
#[pyfunction]
#[pyo3(signature = (data, out, overrides = vec![]))]
fn train(data: PathBuf, out: PathBuf, overrides: Vec<String>) -> PyResult<String> {
    let config: TrainConfig =
        modgan::config::load_with_overrides(None, &overrides).map_err(err)?;
    let schema = AttributeSchema::colormnist();
    config.validate(&schema).map_err(err)?;
    let manifest = DatasetManifest::load(&data, &schema).map_err(err)?;
    let dataset = Dataset::load(&manifest, &schema, config.image_size).map_err(err)?;
    let mut trainer = Trainer::new(config, schema).map_err(err)?;
    trainer.train(&dataset, &out).map_err(err)?;
    Ok(out.join("checkpoints").display().to_string())
}

/// Execute a plan (`img:...` or `gen:...` grammar) against a checkpoint.
/// Returns (shape, flat_pixels in [-1, 1]); also writes `out_png` when given.
#[pyfunction]
#[pyo3(signature = (checkpoint, plan, seed = 0, out_png = None))]
fn run_plan(
    checkpoint: PathBuf,
    plan: &str,
    seed: u64,
    out_png: Option<PathBuf>,
) -> PyResult<((usize, usize, usize), Vec<f32>)> {
    let composer = Composer::from_checkpoint(&checkpoint).map_err(err)?;
    let parsed = parse_plan(plan, composer.schema()).map_err(err)?;
    let result = composer.execute(&parsed, seed).map_err(err)?;
    if let Some(path) = out_png {
        modgan::composer::image_to_rgb8(&result.image)
            .save(&path)
            .map_err(|e| PyValueError::new_err(e.to_string()))?;
    }
    let shape = result.image.dim();
    let (data, _) = result.image.into_raw_vec_and_offset();
    Ok((shape, data))
}

/// Score a checkpoint with a saved classifier; returns rows of
/// (combination_tag, error_percent). `combinations` uses the CLI grammar,
/// e.g. "color;color,style".
#[pyfunction]
#[pyo3(signature = (checkpoint, classifier, test_data, combinations, seed = 0, gate = 0.95))]
fn evaluate(
    checkpoint: PathBuf,
    classifier: PathBuf,
    test_data: PathBuf,
    combinations: &str,
    seed: u64,
    gate: f64,
) -> PyResult<Vec<(String, f64)>> {
    let composer = Composer::from_checkpoint(&checkpoint).map_err(err)?;
    let schema = composer.schema().clone();
    let clf = AttrClassifier::load(Path::new(&classifier)).map_err(err)?;
    let manifest = DatasetManifest::load(&test_data, &schema).map_err(err)?;
    let test = Dataset::load(&manifest, &schema, composer.config().image_size).map_err(err)?;
    let combos: Vec<Vec<String>> = combinations
        .split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|c| c.split(',').map(|a| a.trim().to_string()).collect())
        .collect();
    let translator = ComposerTranslator { composer: &composer, shuffle_order: false };
    let table = classification_error(&clf, &translator, &test, &schema, &combos, seed, gate)
        .map_err(err)?;
    Ok(table.rows)
}

#[pymodule]
fn modgan_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_function(wrap_pyfunction!(colormnist_schema, m)?)?;
    m.add_function(wrap_pyfunction!(synth_colormnist, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(run_plan, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
