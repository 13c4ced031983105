//! Test-time composition: parse a plan like
//! `img:a.png -> color=red -> bgcolor=white -> out`, load a checkpointed
//! module set, and thread the feature map through the requested transformer
//! chain before reconstructing once at the end.

use crate::error::{ModGanError, Result};
use crate::graph::Graph;
use crate::nets::MaskMode;
use crate::schema_data::{rgb8_to_pixels, AttributeSchema};
use crate::trainer::{one_hot, TrainConfig, Trainer};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

/// Where the initial feature map comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum PlanSource {
    /// Encode an image from disk.
    Image(PathBuf),
    /// Generate from a latent with the given content class.
    Generate { digit: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanStep {
    pub attr: String,
    pub value: String,
}

/// A parsed, schema-validated composition plan. Step order is preserved
/// exactly as written; the same attribute may appear more than once.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionPlan {
    pub source: PlanSource,
    pub steps: Vec<PlanStep>,
}

fn parse_err(offset: usize, message: impl Into<String>) -> ModGanError {
    ModGanError::Parse { offset, message: message.into() }
}

/// Parse the plan grammar `[gen:<digit>|img:<path>] -> attr=value -> ... -> out`.
/// Errors carry the byte offset of the offending segment.
pub fn parse_plan(text: &str, schema: &AttributeSchema) -> Result<CompositionPlan> {
    // split on "->" while tracking each segment's offset in the input
    let mut segments: Vec<(usize, &str)> = Vec::new();
    let mut start = 0usize;
    let mut rest = text;
    loop {
        match rest.find("->") {
            Some(pos) => {
                segments.push((start, &rest[..pos]));
                start += pos + 2;
                rest = &rest[pos + 2..];
            }
            None => {
                segments.push((start, rest));
                break;
            }
        }
    }
    let segments: Vec<(usize, &str)> = segments
        .into_iter()
        .map(|(off, s)| {
            let trimmed_start = s.len() - s.trim_start().len();
            (off + trimmed_start, s.trim())
        })
        .collect();

    if segments.len() < 2 {
        return Err(parse_err(0, "plan needs at least a source and the `out` sink"));
    }

    let (src_off, src) = segments[0];
    let source = if let Some(path) = src.strip_prefix("img:") {
        if path.is_empty() {
            return Err(parse_err(src_off, "img: source needs a path"));
        }
        PlanSource::Image(PathBuf::from(path))
    } else if let Some(digit) = src.strip_prefix("gen:") {
        let d: usize = digit
            .parse()
            .map_err(|_| parse_err(src_off, format!("gen: wants a digit, got {digit:?}")))?;
        if d > 9 {
            return Err(parse_err(src_off, format!("gen: digit must be 0-9, got {d}")));
        }
        PlanSource::Generate { digit: d }
    } else {
        return Err(parse_err(
            src_off,
            format!("source must be img:<path> or gen:<digit>, got {src:?}"),
        ));
    };

    let (sink_off, sink) = *segments.last().expect("at least two segments");
    if sink != "out" {
        return Err(parse_err(sink_off, format!("plan must end with `out`, got {sink:?}")));
    }

    let mut steps = Vec::new();
    for &(off, seg) in &segments[1..segments.len() - 1] {
        let (attr, value) = seg
            .split_once('=')
            .ok_or_else(|| parse_err(off, format!("step {seg:?} is not attr=value")))?;
        let (attr, value) = (attr.trim(), value.trim());
        schema.index_of(attr).map_err(|_| {
            parse_err(off, format!("unknown attribute {attr:?}"))
        })?;
        schema.value_index(attr, value).map_err(|_| {
            parse_err(
                off,
                format!(
                    "value {value:?} not in attribute {attr:?} ({})",
                    schema.values(attr).expect("attr exists").join(", ")
                ),
            )
        })?;
        steps.push(PlanStep { attr: attr.to_string(), value: value.to_string() });
    }

    Ok(CompositionPlan { source, steps })
}

/// Output of one executed plan: the reconstructed image, one mask per step
/// (absent when the model was trained without masks), and per-step feature
/// norms as a cheap diagnostic.
#[derive(Debug, Clone)]
pub struct CompositionResult {
    /// `[3, h, w]` in [-1, 1].
    pub image: Array3<f32>,
    /// One entry per plan step; `[fh, fw]` in (0, 1) when present.
    pub masks: Vec<Option<Array2<f32>>>,
    /// Mean absolute value of the feature map after each step.
    pub feature_norms: Vec<f64>,
}

/// A loaded module set ready to execute plans. Execution is read-only.
pub struct Composer {
    trainer: Trainer,
}

impl Composer {
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let loaded = crate::trainer::Checkpoint::load(dir)?;
        Ok(Composer { trainer: loaded.into_trainer()? })
    }

    pub fn from_trainer(trainer: Trainer) -> Self {
        Composer { trainer }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.trainer.config
    }

    pub fn schema(&self) -> &AttributeSchema {
        &self.trainer.schema
    }

    /// Translate in-memory pixels (`[3, h, w]` in [-1, 1]) through a step
    /// chain without touching the filesystem.
    pub fn translate_pixels(
        &self,
        pixels: &Array3<f32>,
        steps: &[PlanStep],
    ) -> Result<CompositionResult> {
        let plan = CompositionPlan {
            source: PlanSource::Image(PathBuf::new()),
            steps: steps.to_vec(),
        };
        self.run(&plan, Some(pixels), 0)
    }

    /// Run a plan. `seed` drives the latent draw for `gen:` sources and is
    /// ignored for `img:` sources.
    pub fn execute(&self, plan: &CompositionPlan, seed: u64) -> Result<CompositionResult> {
        self.run(plan, None, seed)
    }

    fn run(
        &self,
        plan: &CompositionPlan,
        pixels_override: Option<&Array3<f32>>,
        seed: u64,
    ) -> Result<CompositionResult> {
        let cfg = &self.trainer.config;
        let g = &mut Graph::<f32>::new();
        let bindings: std::collections::BTreeMap<_, _> = self
            .trainer
            .modules
            .params
            .iter()
            .map(|(k, ps)| (k.clone(), ps.bind(g, false)))
            .collect();

        let mut f = match &plan.source {
            PlanSource::Image(path) => {
                let enc = self.trainer.modules.encoder.as_ref().ok_or_else(|| {
                    ModGanError::Checkpoint(
                        "plan uses an img: source but the checkpoint has no encoder".into(),
                    )
                })?;
                let pixels = match pixels_override {
                    Some(p) => p.clone(),
                    None => {
                        let img = image::open(path)
                            .map_err(|e| {
                                ModGanError::Ingestion(format!("{}: {e}", path.display()))
                            })?
                            .to_rgb8();
                        rgb8_to_pixels(&img)
                    }
                };
                let (c, h, w) = pixels.dim();
                if h != cfg.image_size || w != cfg.image_size {
                    return Err(ModGanError::Shape(format!(
                        "input image is {h}x{w}, model expects {0}x{0}",
                        cfg.image_size
                    )));
                }
                let x = g.constant(
                    pixels
                        .into_shape_with_order(IxDyn(&[1, c, cfg.image_size, cfg.image_size]))
                        .expect("adding a batch axis"),
                );
                enc.forward(g, &bindings["enc"], x)?
            }
            PlanSource::Generate { digit } => {
                let gen = self.trainer.modules.generator.as_ref().ok_or_else(|| {
                    ModGanError::Checkpoint(
                        "plan uses a gen: source but the checkpoint has no generator".into(),
                    )
                })?;
                let c0 = self
                    .trainer
                    .schema
                    .c(self.trainer.schema.index_of(&cfg.content_attr)?);
                if *digit >= c0 {
                    return Err(ModGanError::Argument(format!(
                        "content class {digit} out of range (c0 = {c0})"
                    )));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let z_val = ArrayD::from_shape_fn(IxDyn(&[1, cfg.z_dim]), |_| {
                    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = rng.gen::<f64>();
                    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
                });
                let z = g.constant(z_val);
                let a0 = g.constant(one_hot(&[*digit], c0));
                gen.forward(g, &bindings["gen"], z, a0)?
            }
        };

        let mode = if cfg.use_mask { MaskMode::Learned } else { MaskMode::Disabled };
        let mut masks = Vec::new();
        let mut feature_norms = Vec::new();
        for step in &plan.steps {
            let bi = cfg
                .attributes
                .iter()
                .position(|a| a == &step.attr)
                .ok_or_else(|| {
                    ModGanError::Checkpoint(format!(
                        "no transformer module for attribute {:?} in this checkpoint",
                        step.attr
                    ))
                })?;
            let (attr, t) = &self.trainer.modules.transformers[bi];
            let vi = self.trainer.schema.value_index(&step.attr, &step.value)?;
            let a = g.constant(one_hot(&[vi], t.condition_len()));
            let (f_t, mask) = t.forward(g, &bindings[&format!("t.{attr}")], f, a, mode)?;
            f = f_t;
            masks.push(mask.map(|m| {
                let v = g.value(m);
                let (fh, fw) = (v.shape()[2], v.shape()[3]);
                Array2::from_shape_fn((fh, fw), |(y, x)| v[[0, 0, y, x]])
            }));
            let fv = g.value(f);
            feature_norms
                .push(fv.iter().map(|v| v.abs() as f64).sum::<f64>() / fv.len() as f64);
        }

        let out = self
            .trainer
            .modules
            .reconstructor
            .forward(g, &bindings["rec"], f);
        let v = g.value(out);
        let (h, w) = (v.shape()[2], v.shape()[3]);
        let image = Array3::from_shape_fn((3, h, w), |(c, y, x)| v[[0, c, y, x]]);
        Ok(CompositionResult { image, masks, feature_norms })
    }
}

/// Elementwise sum of the step masks, clamped to [0, 1] and upsampled
/// (nearest) to `image_size` for export.
pub fn aggregate_masks(masks: &[Array2<f32>], image_size: usize) -> Result<Array2<f32>> {
    let first = masks
        .first()
        .ok_or_else(|| ModGanError::Argument("aggregate_masks needs at least one mask".into()))?;
    let dim = first.dim();
    let mut sum = Array2::<f32>::zeros(dim);
    for m in masks {
        if m.dim() != dim {
            return Err(ModGanError::Shape(format!(
                "mask shapes differ: {:?} vs {:?}",
                m.dim(),
                dim
            )));
        }
        sum += m;
    }
    sum.mapv_inplace(|v| v.clamp(0.0, 1.0));
    let (fh, fw) = dim;
    Ok(Array2::from_shape_fn((image_size, image_size), |(y, x)| {
        sum[[(y * fh) / image_size, (x * fw) / image_size]]
    }))
}

/// Export a mask (values in [0,1]) as a grayscale image with
/// `px = round(255 * clamp(g'))`.
pub fn mask_to_gray(mask: &Array2<f32>) -> image::GrayImage {
    let (h, w) = mask.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(mask[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Export a `[3,h,w]` image in [-1,1] as RGB.
pub fn image_to_rgb8(image: &Array3<f32>) -> image::RgbImage {
    let (_, h, w) = image.dim();
    image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            ((image[[c, y as usize, x as usize]] + 1.0) * 127.5)
                .round()
                .clamp(0.0, 255.0) as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    })
}
