//! Evaluation harness: an independent multi-head attribute classifier trained
//! on real images only, per-combination classification error of translated
//! images, ablation comparisons, and mask report grids.

use crate::composer::{aggregate_masks, image_to_rgb8, mask_to_gray, Composer, CompositionPlan, PlanSource, PlanStep};
use crate::error::{ModGanError, Result};
use crate::graph::{Graph, NodeId};
use crate::nets::{Binding, ParamSet};
use crate::objectives;
use crate::schema_data::{rgb8_to_pixels, AttributeSchema};
use crate::trainer::{AdamState, Dataset};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

// ---------------------------------------------------------------------------
// Classifier

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { width: 8, epochs: 5, batch_size: 32, lr: 0.001, seed: 0 }
    }
}

/// Compact residual convnet with one softmax head per schema attribute.
/// Three stride-2 stages with a residual block after the first two, global
/// average pooling, then a linear head per attribute.
pub struct AttrClassifier {
    pub schema: AttributeSchema,
    pub config: ClassifierConfig,
    pub params: ParamSet<f32>,
    /// Held-out accuracy per schema attribute, filled by training.
    pub holdout_accuracy: Vec<f64>,
}

struct LayerSpec {
    name: &'static str,
    in_c: usize,
    out_c: usize,
}

impl AttrClassifier {
    fn layers(width: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec { name: "c1", in_c: 3, out_c: width },
            LayerSpec { name: "r1", in_c: width, out_c: width },
            LayerSpec { name: "c2", in_c: width, out_c: 2 * width },
            LayerSpec { name: "r2", in_c: 2 * width, out_c: 2 * width },
            LayerSpec { name: "c3", in_c: 2 * width, out_c: 4 * width },
        ]
    }

    pub fn new(schema: AttributeSchema, config: ClassifierConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let mut init_conv = |name: &str, co: usize, ci: usize, k: usize| {
            let std = (2.0 / (ci * k * k) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid normal");
            let w = ArrayD::from_shape_fn(IxDyn(&[co, ci, k, k]), |_| dist.sample(&mut rng) as f32);
            params.insert(&format!("{name}.w"), w);
            params.insert(&format!("{name}.b"), ArrayD::zeros(IxDyn(&[1, co, 1, 1])));
        };
        for l in Self::layers(config.width) {
            init_conv(l.name, l.out_c, l.in_c, 3);
        }
        let feat = 4 * config.width;
        for ai in 0..schema.n() {
            init_conv(&format!("head.{}", schema.name(ai)), schema.c(ai), feat, 1);
        }
        AttrClassifier { schema, config, params, holdout_accuracy: vec![0.0; 0] }
    }

    /// Forward to one logits node per attribute, shapes `[n, c_i]`.
    pub fn forward_logits(
        &self,
        g: &mut Graph<f32>,
        bind: &Binding,
        x: NodeId,
    ) -> Vec<NodeId> {
        let conv = |g: &mut Graph<f32>, bind: &Binding, name: &str, x: NodeId, stride: usize| {
            let y = g.conv2d(x, bind.get(&format!("{name}.w")), stride, 1);
            let shape = g.shape(y).to_vec();
            let b = g.expand(bind.get(&format!("{name}.b")), &shape);
            g.add(y, b)
        };
        let mut h = conv(g, bind, "c1", x, 2);
        h = g.relu(h);
        let r = conv(g, bind, "r1", h, 1);
        let r = g.add(h, r);
        h = g.relu(r);
        h = conv(g, bind, "c2", h, 2);
        h = g.relu(h);
        let r = conv(g, bind, "r2", h, 1);
        let r = g.add(h, r);
        h = g.relu(r);
        h = conv(g, bind, "c3", h, 2);
        h = g.relu(h);
        // global average pool
        let pooled = g.mean_axes(h, &[2, 3]);
        let mut out = Vec::new();
        for ai in 0..self.schema.n() {
            let name = format!("head.{}", self.schema.name(ai));
            let logits = g.conv2d(pooled, bind.get(&format!("{name}.w")), 1, 0);
            let shape = g.shape(logits).to_vec();
            let b = g.expand(bind.get(&format!("{name}.b")), &shape);
            let logits = g.add(logits, b);
            let n = g.shape(logits)[0];
            out.push(g.reshape(logits, &[n, self.schema.c(ai)]));
        }
        out
    }

    /// Argmax predictions per attribute for a batch `[n,3,h,w]`.
    pub fn predict(&self, images: &ArrayD<f32>) -> Vec<Vec<usize>> {
        let g = &mut Graph::<f32>::new();
        let bind = self.params.bind(g, false);
        let x = g.constant(images.clone());
        let logits = self.forward_logits(g, &bind, x);
        logits
            .into_iter()
            .map(|l| {
                let v = g.value(l);
                (0..v.shape()[0])
                    .map(|i| {
                        let row = v.index_axis(ndarray::Axis(0), i);
                        row.iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                            .expect("non-empty row")
                            .0
                    })
                    .collect()
            })
            .collect()
    }

    /// Predictions for one `[3,h,w]` image: one value index per attribute.
    pub fn predict_single(&self, image: &Array3<f32>) -> Vec<usize> {
        let (c, h, w) = image.dim();
        let batch = image
            .clone()
            .into_shape_with_order(IxDyn(&[1, c, h, w]))
            .expect("adding a batch axis");
        self.predict(&batch).into_iter().map(|head| head[0]).collect()
    }

    /// Accuracy per attribute over a dataset.
    pub fn accuracy(&self, data: &Dataset) -> Vec<f64> {
        let mut correct = vec![0usize; self.schema.n()];
        let step = 32;
        let mut i = 0;
        while i < data.len() {
            let indices: Vec<usize> = (i..(i + step).min(data.len())).collect();
            let batch = data.batch(&indices);
            let preds = self.predict(&batch.images);
            for (ai, head) in preds.iter().enumerate() {
                for (bi, &p) in head.iter().enumerate() {
                    if p == batch.labels[bi][ai] {
                        correct[ai] += 1;
                    }
                }
            }
            i += step;
        }
        correct.iter().map(|&c| c as f64 / data.len() as f64).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| ModGanError::io(dir, e))?;
        #[derive(Serialize)]
        struct Manifest<'a> {
            schema_toml: String,
            config: &'a ClassifierConfig,
            holdout_accuracy: &'a [f64],
            params: Vec<(String, Vec<usize>)>,
        }
        let mut names = Vec::new();
        let mut blob = Vec::new();
        for (name, value) in self.params.iter() {
            names.push((name.to_string(), value.shape().to_vec()));
            for v in value.iter() {
                blob.write_f32::<LittleEndian>(*v).expect("vec write");
            }
        }
        let manifest = Manifest {
            schema_toml: self.schema.to_toml_string(),
            config: &self.config,
            holdout_accuracy: &self.holdout_accuracy,
            params: names,
        };
        let mpath = dir.join("classifier.json");
        std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).expect("serializes"))
            .map_err(|e| ModGanError::io(&mpath, e))?;
        let bpath = dir.join("classifier.bin");
        std::fs::write(&bpath, blob).map_err(|e| ModGanError::io(&bpath, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Manifest {
            schema_toml: String,
            config: ClassifierConfig,
            holdout_accuracy: Vec<f64>,
            params: Vec<(String, Vec<usize>)>,
        }
        let mpath = dir.join("classifier.json");
        let text = std::fs::read_to_string(&mpath).map_err(|e| ModGanError::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| ModGanError::Checkpoint(e.to_string()))?;
        let schema = AttributeSchema::from_toml_str(&manifest.schema_toml)?;
        let mut clf = AttrClassifier::new(schema, manifest.config);
        let bpath = dir.join("classifier.bin");
        let bytes = std::fs::read(&bpath).map_err(|e| ModGanError::io(&bpath, e))?;
        let mut r = std::io::Cursor::new(&bytes);
        for (name, shape) in &manifest.params {
            let count: usize = shape.iter().product();
            let mut data = Vec::with_capacity(count);
            for _ in 0..count {
                data.push(r.read_f32::<LittleEndian>().map_err(|e| ModGanError::io(&bpath, e))?);
            }
            *clf.params.get_mut(name) = ArrayD::from_shape_vec(IxDyn(shape), data)
                .map_err(|e| ModGanError::Checkpoint(e.to_string()))?;
        }
        clf.holdout_accuracy = manifest.holdout_accuracy;
        Ok(clf)
    }
}

/// Train the classifier on real labeled images; held-out accuracy per
/// attribute is measured on `holdout` and stored on the returned model.
pub fn train_classifier(
    train: &Dataset,
    holdout: &Dataset,
    schema: &AttributeSchema,
    config: &ClassifierConfig,
) -> Result<AttrClassifier> {
    if train.is_empty() || holdout.is_empty() {
        return Err(ModGanError::Evaluation("classifier needs non-empty train and holdout sets".into()));
    }
    // a head with a single observed label cannot be trained meaningfully
    for ai in 0..schema.n() {
        let mut seen = std::collections::BTreeSet::new();
        for i in 0..train.len() {
            seen.insert(train.labels_of(i)[ai]);
        }
        if seen.len() < 2 {
            return Err(ModGanError::Evaluation(format!(
                "degenerate label distribution: attribute {:?} has a single value in the training set",
                schema.name(ai)
            )));
        }
    }

    let mut clf = AttrClassifier::new(schema.clone(), config.clone());
    let mut opt = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(17));
    let iters = (train.len() / config.batch_size).max(1);
    for _epoch in 0..config.epochs {
        if std::env::var("MODGAN_CLF_TRACE").is_ok() {
            eprintln!("epoch {_epoch}: holdout {:?}", clf.accuracy(holdout));
        }
        // linear decay over the second half of training stabilizes convergence
        let progress = _epoch as f64 / config.epochs as f64;
        let lr = if progress < 0.5 { config.lr } else { config.lr * 2.0 * (1.0 - progress) };
        for _ in 0..iters {
            let batch = train.sample_batch(config.batch_size, &mut rng);
            let g = &mut Graph::<f32>::new();
            let bind = clf.params.bind(g, true);
            let x = g.constant(batch.images.clone());
            let logits = clf.forward_logits(g, &bind, x);
            let mut total: Option<NodeId> = None;
            for (ai, l) in logits.into_iter().enumerate() {
                let target = batch.one_hot(ai, schema.c(ai));
                let ce = objectives::cross_entropy(g, l, &target);
                total = Some(match total {
                    Some(t) => g.add(t, ce),
                    None => ce,
                });
            }
            let total = total.expect("at least one head");
            if !g.scalar(total).is_finite() {
                return Err(ModGanError::Numerical("non-finite classifier loss".into()));
            }
            let grads = g.backward(total);
            let mut gmap = BTreeMap::new();
            for (name, id) in bind.ids() {
                if let Some(gid) = grads.get(id) {
                    gmap.insert(name.to_string(), g.value(gid).clone());
                }
            }
            opt.step(&mut clf.params, &gmap, lr, 0.9, 0.999);
        }
    }
    clf.holdout_accuracy = clf.accuracy(holdout);
    Ok(clf)
}

// ---------------------------------------------------------------------------
// Translators

/// Anything that can map (image, targets) to a translated image. The real
/// implementation composes checkpointed modules; stubs exist for calibrating
/// the metric itself.
pub trait Translator {
    /// `targets` are (schema attribute index, target value index) pairs.
    fn translate(
        &self,
        image: &Array3<f32>,
        targets: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f32>>;
}

/// Returns the input unchanged; calibrates the ~100% error floor when targets
/// are forced to differ from source labels.
pub struct IdentityStub;

impl Translator for IdentityStub {
    fn translate(
        &self,
        image: &Array3<f32>,
        _targets: &[(usize, usize)],
        _rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f32>> {
        Ok(image.clone())
    }
}

/// Emits a real dataset image that already possesses the target labels;
/// calibrates the best achievable score (the classifier's own error).
pub struct PerfectStub<'a> {
    pub data: &'a Dataset,
}

impl Translator for PerfectStub<'_> {
    fn translate(
        &self,
        _image: &Array3<f32>,
        targets: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f32>> {
        let matches: Vec<usize> = (0..self.data.len())
            .filter(|&i| targets.iter().all(|&(ai, vi)| self.data.labels_of(i)[ai] == vi))
            .collect();
        let &pick = matches
            .get(rng.gen_range(0..matches.len().max(1)))
            .ok_or_else(|| {
                ModGanError::Evaluation("no dataset image matches the requested targets".into())
            })?;
        Ok(self.data.image(pick))
    }
}

/// The real thing: translate through a composed module chain in a fixed
/// attribute order, or a per-image shuffled order.
pub struct ComposerTranslator<'a> {
    pub composer: &'a Composer,
    pub shuffle_order: bool,
}

impl Translator for ComposerTranslator<'_> {
    fn translate(
        &self,
        image: &Array3<f32>,
        targets: &[(usize, usize)],
        rng: &mut ChaCha8Rng,
    ) -> Result<Array3<f32>> {
        let schema = self.composer.schema();
        // fixed default order: the model's configured attribute order
        let mut steps: Vec<PlanStep> = self
            .composer
            .config()
            .attributes
            .iter()
            .filter_map(|attr| {
                let ai = schema.index_of(attr).ok()?;
                targets.iter().find(|&&(t, _)| t == ai).map(|&(_, vi)| PlanStep {
                    attr: attr.clone(),
                    value: schema.values(attr).expect("attr exists")[vi].clone(),
                })
            })
            .collect();
        if steps.len() != targets.len() {
            return Err(ModGanError::Evaluation(
                "a target attribute has no transformer module in this checkpoint".into(),
            ));
        }
        if self.shuffle_order {
            for i in (1..steps.len()).rev() {
                let j = rng.gen_range(0..=i);
                steps.swap(i, j);
            }
        }
        Ok(self.composer.translate_pixels(image, &steps)?.image)
    }
}

// ---------------------------------------------------------------------------
// Tables

/// Error table keyed by combination tag, values in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<(String, f64)>,
}

impl EvalTable {
    pub fn get(&self, tag: &str) -> Option<f64> {
        self.rows.iter().find(|(t, _)| t == tag).map(|(_, v)| *v)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("combination,error_percent\n");
        for (tag, v) in &self.rows {
            out.push_str(&format!("{tag},{v}\n"));
        }
        out
    }

    pub fn to_text(&self) -> String {
        let width = self.rows.iter().map(|(t, _)| t.len()).max().unwrap_or(0).max(11);
        let mut out = format!("{:<width$}  error %\n", "combination");
        for (tag, v) in &self.rows {
            out.push_str(&format!("{tag:<width$}  {v:7.2}\n"));
        }
        out
    }
}

/// Tag for a combination: concatenated uppercase initials, e.g.
/// ["color","style"] -> "CS".
pub fn combination_tag(attrs: &[String]) -> String {
    attrs
        .iter()
        .map(|a| a.chars().next().expect("non-empty attribute name").to_ascii_uppercase())
        .collect()
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    // splitmix-style mixing keeps per-image streams independent
    let mut z = seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// For each combination, translate every test image to uniformly sampled
/// target values that differ from its source labels on exactly the listed
/// attributes, then score with the classifier. An image counts as wrong when
/// any targeted attribute is misclassified relative to its target.
///
/// Refuses to run when any held-out classifier accuracy is below `gate`
/// (default 0.95): scores would say more about the classifier than the model.
pub fn classification_error(
    classifier: &AttrClassifier,
    translator: &dyn Translator,
    test: &Dataset,
    schema: &AttributeSchema,
    combinations: &[Vec<String>],
    seed: u64,
    gate: f64,
) -> Result<EvalTable> {
    // Gate only the attribute heads that are actually judged below; heads for
    // attributes outside every combination do not influence the table.
    let mut gated: Vec<usize> = combinations
        .iter()
        .flat_map(|combo| combo.iter().map(|a| schema.index_of(a)))
        .collect::<Result<_>>()?;
    gated.sort_unstable();
    gated.dedup();
    for &ai in &gated {
        let acc = classifier.holdout_accuracy.get(ai).copied().unwrap_or(0.0);
        if acc < gate {
            return Err(ModGanError::Evaluation(format!(
                "classifier gate unmet: attribute {:?} held-out accuracy {acc} (need >= {gate})",
                schema.name(ai)
            )));
        }
    }
    if test.is_empty() {
        return Err(ModGanError::Evaluation("empty test set".into()));
    }
    let mut rows = Vec::new();
    for (ci, combo) in combinations.iter().enumerate() {
        let attr_indices: Vec<usize> =
            combo.iter().map(|a| schema.index_of(a)).collect::<Result<_>>()?;
        let mut wrong = 0usize;
        for i in 0..test.len() {
            let labels = test.labels_of(i).to_vec();
            let mut target_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, ci as u64, i as u64));
            let mut translate_rng =
                ChaCha8Rng::seed_from_u64(mix_seed(seed.wrapping_add(1), ci as u64, i as u64));
            let targets: Vec<(usize, usize)> = attr_indices
                .iter()
                .map(|&ai| {
                    let c = schema.c(ai);
                    // uniform over the c-1 values different from the source
                    let mut v = target_rng.gen_range(0..c - 1);
                    if v >= labels[ai] {
                        v += 1;
                    }
                    (ai, v)
                })
                .collect();
            let out = translator.translate(&test.image(i), &targets, &mut translate_rng)?;
            let preds = classifier.predict_single(&out);
            if targets.iter().any(|&(ai, vi)| preds[ai] != vi) {
                wrong += 1;
            }
        }
        rows.push((combination_tag(combo), 100.0 * wrong as f64 / test.len() as f64));
    }
    Ok(EvalTable { rows })
}

/// Classification-error tables for the ablation variants plus a
/// random-order run of the full model.
pub struct AblationModels<'a> {
    pub full: &'a Composer,
    pub no_mask: &'a Composer,
    pub no_cyclic: &'a Composer,
}

pub fn run_ablation(
    models: &AblationModels,
    classifier: &AttrClassifier,
    test: &Dataset,
    schema: &AttributeSchema,
    combinations: &[Vec<String>],
    seed: u64,
    gate: f64,
) -> Result<Vec<(String, EvalTable)>> {
    let variants: Vec<(&str, &Composer, bool)> = vec![
        ("full", models.full, false),
        ("no_mask", models.no_mask, false),
        ("no_cyclic", models.no_cyclic, false),
        ("full_random_order", models.full, true),
    ];
    let mut out = Vec::new();
    for (name, composer, shuffle) in variants {
        let translator = ComposerTranslator { composer, shuffle_order: shuffle };
        let table =
            classification_error(classifier, &translator, test, schema, combinations, seed, gate)?;
        out.push((name.to_string(), table));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Mask reports

/// Render one plan into a horizontal grid PNG: input (img sources), output,
/// one panel per step mask, and the aggregated mask when steps exist.
/// Returns the written paths, one per plan.
pub fn export_mask_report(
    composer: &Composer,
    plans: &[CompositionPlan],
    out_dir: &Path,
    seed: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| ModGanError::io(out_dir, e))?;
    let s = composer.config().image_size;
    let mut written = Vec::new();
    for (pi, plan) in plans.iter().enumerate() {
        let result = composer.execute(plan, seed)?;
        let mut panels: Vec<image::RgbImage> = Vec::new();
        if let PlanSource::Image(path) = &plan.source {
            let img = image::open(path)
                .map_err(|e| ModGanError::Ingestion(format!("{}: {e}", path.display())))?
                .to_rgb8();
            let pixels = rgb8_to_pixels(&img);
            panels.push(image_to_rgb8(&pixels));
        }
        panels.push(image_to_rgb8(&result.image));
        let masks: Vec<ndarray::Array2<f32>> = result.masks.iter().flatten().cloned().collect();
        for m in &masks {
            let up = aggregate_masks(std::slice::from_ref(m), s)?;
            let gray = mask_to_gray(&up);
            panels.push(gray_to_rgb(&gray));
        }
        if !masks.is_empty() {
            let agg = aggregate_masks(&masks, s)?;
            panels.push(gray_to_rgb(&mask_to_gray(&agg)));
        }

        let mut grid = image::RgbImage::new((panels.len() * s) as u32, s as u32);
        for (i, p) in panels.iter().enumerate() {
            image::imageops::replace(&mut grid, p, (i * s) as i64, 0);
        }
        let path = out_dir.join(format!("report_{pi:03}.png"));
        grid.save(&path).map_err(|e| ModGanError::Evaluation(e.to_string()))?;
        written.push(path);
    }
    Ok(written)
}

fn gray_to_rgb(gray: &image::GrayImage) -> image::RgbImage {
    image::RgbImage::from_fn(gray.width(), gray.height(), |x, y| {
        let v = gray.get_pixel(x, y).0[0];
        image::Rgb([v, v, v])
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::parse_plan;
    use crate::schema_data::{named_rgb, synthesize_colormnist, MnistSource};
    use crate::trainer::{TrainConfig, Trainer};
    use tempfile::tempdir;

    fn small_data(dir: &Path, count: usize, seed: u64) -> (Dataset, Dataset) {
        let schema = AttributeSchema::colormnist();
        let (train, test) =
            synthesize_colormnist(&MnistSource::Builtin, count, 64, seed, dir).unwrap();
        (
            Dataset::load(&train, &schema, 64).unwrap(),
            Dataset::load(&test, &schema, 64).unwrap(),
        )
    }

    /// Mean foreground RGB, where "foreground" is every pixel whose color is
    /// far from the most common (background) color — an independent check
    /// that color classes are separable before trusting a trained network.
    #[test]
    fn nearest_centroid_color_oracle() {
        let dir = tempdir().unwrap();
        let schema = AttributeSchema::colormnist();
        let (train, _) = small_data(dir.path(), 150, 2);
        let ai = schema.index_of("color").unwrap();
        let colors = schema.values("color").unwrap();
        let centroids: Vec<[f32; 3]> = colors
            .iter()
            .map(|c| {
                let rgb = named_rgb(c).unwrap();
                [
                    rgb[0] as f32 / 127.5 - 1.0,
                    rgb[1] as f32 / 127.5 - 1.0,
                    rgb[2] as f32 / 127.5 - 1.0,
                ]
            })
            .collect();
        let mut correct = 0;
        for i in 0..train.len() {
            let img = train.image(i);
            // nearest centroid over individual pixels, vote by count
            let mut votes = vec![0usize; colors.len()];
            for y in 0..64 {
                for x in 0..64 {
                    let px = [img[[0, y, x]], img[[1, y, x]], img[[2, y, x]]];
                    let (best, d) = centroids
                        .iter()
                        .enumerate()
                        .map(|(k, c)| {
                            let d: f32 =
                                (0..3).map(|j| (px[j] - c[j]) * (px[j] - c[j])).sum();
                            (k, d)
                        })
                        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
                        .unwrap();
                    // count only pixels that are actually close to a digit color
                    if d < 0.05 {
                        votes[best] += 1;
                    }
                }
            }
            let pred = votes.iter().enumerate().max_by_key(|(_, &v)| v).unwrap().0;
            if pred == train.labels_of(i)[ai] {
                correct += 1;
            }
        }
        let acc = correct as f64 / train.len() as f64;
        assert!(acc >= 0.99, "centroid oracle accuracy {acc}");
    }

    fn trained_classifier() -> &'static (AttrClassifier, Dataset, Dataset) {
        use std::sync::OnceLock;
        static CACHE: OnceLock<(AttrClassifier, Dataset, Dataset)> = OnceLock::new();
        CACHE.get_or_init(|| {
            let dir = tempdir().unwrap();
            let schema = AttributeSchema::colormnist();
            let (train, test) = small_data(dir.path(), 800, 4);
            let cfg = ClassifierConfig { epochs: 25, lr: 0.01, ..ClassifierConfig::default() };
            let clf = train_classifier(&train, &test, &schema, &cfg).unwrap();
            (clf, train, test)
        })
    }

    #[test]
    fn classifier_learns_colors_and_memorizes() {
        let (clf, train, _test) = trained_classifier();
        let schema = AttributeSchema::colormnist();
        let color_ai = schema.index_of("color").unwrap();
        let bg_ai = schema.index_of("bgcolor").unwrap();
        assert!(
            clf.holdout_accuracy[color_ai] >= 0.95,
            "color head held-out accuracy {} < 0.95",
            clf.holdout_accuracy[color_ai]
        );
        assert!(
            clf.holdout_accuracy[bg_ai] >= 0.95,
            "bgcolor head held-out accuracy {} < 0.95",
            clf.holdout_accuracy[bg_ai]
        );
        // memorization direction, with a small sampling tolerance
        let train_acc = clf.accuracy(&train);
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&train_acc) + 0.02 >= mean(&clf.holdout_accuracy),
            "train {train_acc:?} vs holdout {:?}",
            clf.holdout_accuracy
        );
    }

    #[test]
    fn classifier_save_load_round_trip() {
        let (clf, _, test) = trained_classifier();
        let preds_before = clf.predict(&test.batch(&[0, 1, 2]).images);
        let dir = tempdir().unwrap();
        let out = dir.path().join("clf");
        clf.save(&out).unwrap();
        let loaded = AttrClassifier::load(&out).unwrap();
        assert_eq!(loaded.holdout_accuracy, clf.holdout_accuracy);
        let preds_after = loaded.predict(&test.batch(&[0, 1, 2]).images);
        assert_eq!(preds_before, preds_after);
    }

    #[test]
    fn degenerate_labels_rejected() {
        let dir = tempdir().unwrap();
        let schema = AttributeSchema::colormnist();
        let (train_m, _) =
            synthesize_colormnist(&MnistSource::Builtin, 20, 64, 2, dir.path()).unwrap();
        // force a constant color column
        let text = std::fs::read_to_string(train_m.root.join("manifest.csv")).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        for line in lines.iter_mut().skip(1) {
            let mut parts: Vec<&str> = line.split(',').collect();
            parts[2] = "red";
            *line = parts.join(",");
        }
        std::fs::write(train_m.root.join("manifest.csv"), lines.join("\n") + "\n").unwrap();
        let train = Dataset::load(
            &crate::schema_data::DatasetManifest::load(&train_m.root, &schema).unwrap(),
            &schema,
            64,
        )
        .unwrap();
        let err = train_classifier(&train, &train, &schema, &ClassifierConfig::default());
        assert!(matches!(err, Err(ModGanError::Evaluation(_))));
    }

    #[test]
    fn identity_stub_scores_near_total_error() {
        let (clf, _, test) = trained_classifier();
        let schema = AttributeSchema::colormnist();
        let table = classification_error(
            &clf,
            &IdentityStub,
            &test,
            &schema,
            &[vec!["color".into()], vec!["bgcolor".into()]],
            7,
            0.95,
        )
        .unwrap();
        assert_eq!(table.rows.len(), 2);
        for (tag, v) in &table.rows {
            assert!((0.0..=100.0).contains(v));
            assert!(*v >= 90.0, "{tag}: identity stub should be nearly always wrong, got {v}");
        }
    }

    #[test]
    fn perfect_stub_scores_near_classifier_error() {
        let (clf, train, test) = trained_classifier();
        let schema = AttributeSchema::colormnist();
        let stub = PerfectStub { data: &train };
        let table = classification_error(
            &clf,
            &stub,
            &test,
            &schema,
            &[vec!["color".into()]],
            7,
            0.95,
        )
        .unwrap();
        let err = table.get("C").unwrap();
        let color_acc = clf.holdout_accuracy[schema.index_of("color").unwrap()];
        let expected = 100.0 * (1.0 - color_acc);
        assert!(
            (err - expected).abs() <= 5.0,
            "perfect stub error {err} should approximate classifier error {expected}"
        );
    }

    #[test]
    fn tables_deterministic_and_gated() {
        let (clf, _, test) = trained_classifier();
        let schema = AttributeSchema::colormnist();
        let combos = vec![vec!["color".to_string(), "style".to_string()]];
        let a = classification_error(&clf, &IdentityStub, &test, &schema, &combos, 3, 0.95)
            .unwrap();
        let b = classification_error(&clf, &IdentityStub, &test, &schema, &combos, 3, 0.95)
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a.rows[0].0, "CS");

        // gate refuses an untrained classifier
        let fresh = AttrClassifier::new(schema.clone(), ClassifierConfig::default());
        let err =
            classification_error(&fresh, &IdentityStub, &test, &schema, &combos, 3, 0.95);
        match err {
            Err(ModGanError::Evaluation(msg)) => assert!(msg.contains("gate")),
            other => panic!("expected gate refusal, got {other:?}"),
        }
    }

    #[test]
    fn ablation_single_step_shuffle_matches_fixed() {
        let (clf, _, test) = trained_classifier();
        let schema = AttributeSchema::colormnist();
        let cfg = TrainConfig {
            image_size: 64,
            width: 1,
            z_dim: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let composer =
            Composer::from_trainer(Trainer::new(cfg, schema.clone()).unwrap());
        let models =
            AblationModels { full: &composer, no_mask: &composer, no_cyclic: &composer };
        // single-attribute plan: shuffling one step changes nothing
        let combos = vec![vec!["color".to_string()]];
        let tables =
            run_ablation(&models, &clf, &test, &schema, &combos, 5, 0.95).unwrap();
        assert_eq!(tables.len(), 4);
        let fixed = tables.iter().find(|(n, _)| n == "full").unwrap();
        let shuffled = tables.iter().find(|(n, _)| n == "full_random_order").unwrap();
        assert_eq!(fixed.1, shuffled.1);
        for (_, t) in &tables {
            for (_, v) in &t.rows {
                assert!((0.0..=100.0).contains(v));
            }
        }
    }

    #[test]
    fn table_formats() {
        let t = EvalTable { rows: vec![("C".into(), 3.5), ("CSB".into(), 12.25)] };
        let csv = t.to_csv();
        assert!(csv.starts_with("combination,error_percent\n"));
        assert!(csv.contains("C,3.5\n"));
        assert!(csv.contains("CSB,12.25\n"));
        let text = t.to_text();
        assert!(text.contains("C") && text.contains("12.25"));
        assert_eq!(combination_tag(&["color".into(), "style".into()]), "CS");
    }

    #[test]
    fn mask_report_panel_counts_and_values() {
        let dir = tempdir().unwrap();
        let schema = AttributeSchema::colormnist();
        let (train_m, _) =
            synthesize_colormnist(&MnistSource::Builtin, 4, 64, 5, dir.path()).unwrap();
        let cfg = TrainConfig {
            image_size: 64,
            width: 1,
            z_dim: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let composer =
            Composer::from_trainer(Trainer::new(cfg, schema.clone()).unwrap());
        let img_path = train_m.images_dir().join(&train_m.rows[0].file);

        // 0 steps: input + reconstruction only
        let p0 = parse_plan(&format!("img:{} -> out", img_path.display()), &schema).unwrap();
        // 3 steps: input + output + 3 masks + aggregate = 6 panels
        let p3 = parse_plan(
            &format!(
                "img:{} -> color=red -> style=stroke -> bgcolor=cyan -> out",
                img_path.display()
            ),
            &schema,
        )
        .unwrap();
        let out = dir.path().join("reports");
        let paths = export_mask_report(&composer, &[p0.clone(), p3.clone()], &out, 0).unwrap();
        assert_eq!(paths.len(), 2);
        let g0 = image::open(&paths[0]).unwrap().to_rgb8();
        assert_eq!(g0.dimensions(), (2 * 64, 64));
        let g3 = image::open(&paths[1]).unwrap().to_rgb8();
        assert_eq!(g3.dimensions(), (6 * 64, 64));

        // mask PNG pixels must equal round(255 * g') recomputed from the raw mask
        let result = composer.execute(&p3, 0).unwrap();
        let mask0 = result.masks[0].as_ref().unwrap();
        let up = aggregate_masks(std::slice::from_ref(mask0), 64).unwrap();
        // third panel (index 2) is the first step mask
        for y in 0..64 {
            for x in 0..64 {
                let expected = (up[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
                let got = g3.get_pixel((2 * 64 + x) as u32, y as u32).0[0];
                assert_eq!(got, expected, "mask pixel ({y},{x})");
            }
        }
    }
}
