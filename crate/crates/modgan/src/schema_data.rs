//! Attribute schemas, condition-vector encoding, the synthetic colored-digit
//! dataset, and CelebA ingestion.
//!
//! A dataset on disk is `<root>/images/NNNNNN.png` plus `<root>/manifest.csv`
//! with header `file,<attr1>,...,<attrn>`; a small `meta.toml` sidecar records
//! the split tag and the seed the dataset was created with.

use crate::error::{ModGanError, Result};
use byteorder::{BigEndian, ReadBytesExt};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Read};
use std::path::{Path, PathBuf};

/// Ordered attribute set: each attribute has a name and an ordered list of
/// possible values. Condition vectors and classifier heads index into these
/// lists, so the order is load-bearing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Attribute {
    name: String,
    values: Vec<String>,
}

impl AttributeSchema {
    pub fn new(attributes: Vec<(String, Vec<String>)>) -> Result<Self> {
        if attributes.is_empty() {
            return Err(ModGanError::Schema("schema needs at least one attribute".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for (name, values) in &attributes {
            if !seen.insert(name.clone()) {
                return Err(ModGanError::Schema(format!("duplicate attribute name {name:?}")));
            }
            if values.len() < 2 {
                return Err(ModGanError::Schema(format!(
                    "attribute {name:?} needs at least 2 values, got {}",
                    values.len()
                )));
            }
            let mut vseen = std::collections::BTreeSet::new();
            for v in values {
                if !vseen.insert(v.clone()) {
                    return Err(ModGanError::Schema(format!(
                        "attribute {name:?} has duplicate value {v:?}"
                    )));
                }
            }
        }
        Ok(AttributeSchema {
            attributes: attributes
                .into_iter()
                .map(|(name, values)| Attribute { name, values })
                .collect(),
        })
    }

    /// Number of attributes `n`.
    pub fn n(&self) -> usize {
        self.attributes.len()
    }

    pub fn names(&self) -> Vec<&str> {
        self.attributes.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn name(&self, i: usize) -> &str {
        &self.attributes[i].name
    }

    /// Value count `c_i` of attribute `i`.
    pub fn c(&self, i: usize) -> usize {
        self.attributes[i].values.len()
    }

    pub fn values(&self, attr: &str) -> Result<&[String]> {
        let i = self.index_of(attr)?;
        Ok(&self.attributes[i].values)
    }

    pub fn index_of(&self, attr: &str) -> Result<usize> {
        self.attributes
            .iter()
            .position(|a| a.name == attr)
            .ok_or_else(|| ModGanError::Schema(format!("unknown attribute {attr:?}")))
    }

    pub fn value_index(&self, attr: &str, value: &str) -> Result<usize> {
        let values = self.values(attr)?;
        values
            .iter()
            .position(|v| v == value)
            .ok_or_else(|| ModGanError::Schema(format!("unknown value {value:?} for attribute {attr:?}")))
    }

    /// Colored-digit schema: the digit identity plus the three rendered
    /// appearance attributes.
    pub fn colormnist() -> Self {
        AttributeSchema::new(vec![
            ("digit".into(), (0..10).map(|d| d.to_string()).collect()),
            ("color".into(), svec(&["red", "blue", "green", "purple", "brown"])),
            ("style".into(), svec(&["flat", "stroke"])),
            ("bgcolor".into(), svec(&["cyan", "yellow", "white", "silver", "salmon"])),
        ])
        .expect("builtin schema is valid")
    }

    /// Face-attribute schema used for CelebA.
    pub fn celeba() -> Self {
        AttributeSchema::new(vec![
            ("hair".into(), svec(&["black", "blond", "brown"])),
            ("gender".into(), svec(&["male", "female"])),
            ("smile".into(), svec(&["smile", "nosmile"])),
        ])
        .expect("builtin schema is valid")
    }

    pub fn to_toml_string(&self) -> String {
        #[derive(Serialize)]
        struct Doc<'a> {
            attribute: &'a [Attribute],
        }
        toml::to_string_pretty(&Doc { attribute: &self.attributes }).expect("schema serializes")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Doc {
            attribute: Vec<Attribute>,
        }
        let doc: Doc = toml::from_str(s).map_err(|e| ModGanError::Schema(e.to_string()))?;
        AttributeSchema::new(doc.attribute.into_iter().map(|a| (a.name, a.values)).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()).map_err(|e| ModGanError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| ModGanError::io(path, e))?;
        Self::from_toml_str(&s)
    }
}

fn svec(items: &[&str]) -> Vec<String> {
    items.iter().map(|s| s.to_string()).collect()
}

/// One-hot condition vector for one attribute. `attribute_index` 0 is
/// reserved for the content condition used by the generator; translation
/// attributes are indexed by their schema position.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionVector {
    pub attribute_index: usize,
    pub values: Vec<f32>,
}

impl ConditionVector {
    pub fn one_hot(attribute_index: usize, len: usize, hot: usize) -> Self {
        assert!(hot < len, "one_hot: index {hot} out of range {len}");
        let mut values = vec![0.0; len];
        values[hot] = 1.0;
        ConditionVector { attribute_index, values }
    }

    pub fn hot_index(&self) -> usize {
        self.values.iter().position(|&v| v == 1.0).expect("one-hot has a hot entry")
    }
}

/// One-hot encoding of `value` within `attr`'s value list.
pub fn encode_condition(schema: &AttributeSchema, attr: &str, value: &str) -> Result<ConditionVector> {
    let ai = schema.index_of(attr)?;
    let vi = schema.value_index(attr, value)?;
    Ok(ConditionVector::one_hot(ai, schema.c(ai), vi))
}

/// An image in CHW layout with pixels in [-1, 1] plus one label per schema
/// attribute.
#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub pixels: Array3<f32>,
    pub labels: BTreeMap<String, String>,
}

impl LabeledImage {
    pub fn to_rgb8(&self) -> image::RgbImage {
        let (_, h, w) = self.pixels.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| {
                let v = (self.pixels[[c, y as usize, x as usize]] + 1.0) * 127.5;
                v.round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }
}

/// Decode an RGB image into CHW pixels normalized to [-1, 1].
pub fn rgb8_to_pixels(img: &image::RgbImage) -> Array3<f32> {
    let (w, h) = img.dimensions();
    Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32).0[c] as f32 / 127.5 - 1.0
    })
}

/// Fixed RGB values for the named colors used by the colored-digit dataset.
pub fn named_rgb(name: &str) -> Result<[u8; 3]> {
    Ok(match name {
        "red" => [220, 20, 60],
        "blue" => [65, 105, 225],
        "green" => [34, 139, 34],
        "purple" => [128, 0, 128],
        "brown" => [139, 69, 19],
        "cyan" => [0, 255, 255],
        "yellow" => [255, 215, 0],
        "white" => [255, 255, 255],
        "silver" => [192, 192, 192],
        "salmon" => [250, 128, 114],
        _ => return Err(ModGanError::Schema(format!("unknown named color {name:?}"))),
    })
}

/// Foreground mask of a grayscale glyph: intensity strictly above half the
/// glyph's maximum. An all-zero glyph has an empty mask.
pub fn glyph_mask(glyph: &Array2<f32>) -> Array2<bool> {
    let max = glyph.iter().cloned().fold(0.0f32, f32::max);
    glyph.mapv(|v| max > 0.0 && v > 0.5 * max)
}

/// One-pixel morphological erosion with a full 3x3 structuring element;
/// out-of-bounds neighbors count as background.
pub fn erode(mask: &Array2<bool>) -> Array2<bool> {
    let (h, w) = mask.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if !mask[[y, x]] {
            return false;
        }
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                    return false;
                }
                if !mask[[ny as usize, nx as usize]] {
                    return false;
                }
            }
        }
        true
    })
}

/// Render a grayscale glyph as a colored digit over a colored background.
/// `flat` fills the whole thresholded glyph; `stroke` draws only its
/// one-pixel outline (mask minus erosion).
pub fn render_digit(
    glyph: &Array2<f32>,
    color: &str,
    style: &str,
    bgcolor: &str,
) -> Result<LabeledImage> {
    let fg = named_rgb(color)?;
    let bg = named_rgb(bgcolor)?;
    let mask = glyph_mask(glyph);
    let mask = match style {
        "flat" => mask,
        "stroke" => {
            let inner = erode(&mask);
            Array2::from_shape_fn(mask.dim(), |ix| mask[ix] && !inner[ix])
        }
        _ => return Err(ModGanError::Schema(format!("unknown style {style:?}"))),
    };
    let (h, w) = mask.dim();
    let pixels = Array3::from_shape_fn((3, h, w), |(c, y, x)| {
        let byte = if mask[[y, x]] { fg[c] } else { bg[c] };
        byte as f32 / 127.5 - 1.0
    });
    let mut labels = BTreeMap::new();
    labels.insert("color".to_string(), color.to_string());
    labels.insert("style".to_string(), style.to_string());
    labels.insert("bgcolor".to_string(), bgcolor.to_string());
    Ok(LabeledImage { pixels, labels })
}

/// Nearest-neighbor resize of a grayscale array.
pub fn resize_nearest(src: &Array2<f32>, h: usize, w: usize) -> Array2<f32> {
    let (sh, sw) = src.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let sy = (y * sh) / h;
        let sx = (x * sw) / w;
        src[[sy, sx]]
    })
}

// ---------------------------------------------------------------------------
// Glyph sources

/// Where digit glyphs come from: a pair of IDX files on disk, or the builtin
/// procedural font (hermetic, no downloads).
#[derive(Debug, Clone)]
pub enum MnistSource {
    Idx { images: PathBuf, labels: PathBuf },
    Builtin,
}

/// Parse an IDX image file (magic 0x00000803): `count` grayscale arrays with
/// intensities scaled to [0, 1].
pub fn load_idx_images(path: &Path) -> Result<Vec<Array2<f32>>> {
    let bytes = std::fs::read(path).map_err(|e| ModGanError::io(path, e))?;
    let mut r = std::io::Cursor::new(&bytes);
    let magic = r.read_u32::<BigEndian>().map_err(|e| ModGanError::io(path, e))?;
    if magic != 0x0000_0803 {
        return Err(ModGanError::Ingestion(format!(
            "{}: bad IDX image magic {magic:#010x}",
            path.display()
        )));
    }
    let count = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let h = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let w = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let mut out = Vec::with_capacity(count);
    let mut buf = vec![0u8; h * w];
    for _ in 0..count {
        r.read_exact(&mut buf).map_err(|e| ModGanError::io(path, e))?;
        out.push(Array2::from_shape_fn((h, w), |(y, x)| buf[y * w + x] as f32 / 255.0));
    }
    Ok(out)
}

/// Parse an IDX label file (magic 0x00000801).
pub fn load_idx_labels(path: &Path) -> Result<Vec<u8>> {
    let bytes = std::fs::read(path).map_err(|e| ModGanError::io(path, e))?;
    let mut r = std::io::Cursor::new(&bytes);
    let magic = r.read_u32::<BigEndian>().map_err(|e| ModGanError::io(path, e))?;
    if magic != 0x0000_0801 {
        return Err(ModGanError::Ingestion(format!(
            "{}: bad IDX label magic {magic:#010x}",
            path.display()
        )));
    }
    let count = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let mut labels = vec![0u8; count];
    r.read_exact(&mut labels).map_err(|e| ModGanError::io(path, e))?;
    Ok(labels)
}

/// 5x7 bitmap font for the ten digits, used by the builtin glyph source.
const DIGIT_FONT: [[&str; 7]; 10] = [
    [" ### ", "#   #", "#  ##", "# # #", "##  #", "#   #", " ### "],
    ["  #  ", " ##  ", "  #  ", "  #  ", "  #  ", "  #  ", " ### "],
    [" ### ", "#   #", "    #", "   # ", "  #  ", " #   ", "#####"],
    [" ### ", "#   #", "    #", "  ## ", "    #", "#   #", " ### "],
    ["   # ", "  ## ", " # # ", "#  # ", "#####", "   # ", "   # "],
    ["#####", "#    ", "#### ", "    #", "    #", "#   #", " ### "],
    [" ### ", "#    ", "#    ", "#### ", "#   #", "#   #", " ### "],
    ["#####", "    #", "   # ", "  #  ", "  #  ", " #   ", " #   "],
    [" ### ", "#   #", "#   #", " ### ", "#   #", "#   #", " ### "],
    [" ### ", "#   #", "#   #", " ####", "    #", "    #", " ### "],
];

/// Render one builtin 28x28 glyph for `digit` with a seeded random placement,
/// so samples of the same digit are not all pixel-identical.
pub fn builtin_glyph(digit: u8, rng: &mut impl Rng) -> Array2<f32> {
    assert!(digit < 10, "digit out of range: {digit}");
    let pattern = &DIGIT_FONT[digit as usize];
    let scale = 3usize;
    let (gh, gw) = (7 * scale, 5 * scale);
    let oy = rng.gen_range(0..=(28 - gh));
    let ox = rng.gen_range(0..=(28 - gw));
    let mut glyph = Array2::zeros((28, 28));
    for (py, row) in pattern.iter().enumerate() {
        for (px, ch) in row.chars().enumerate() {
            if ch == '#' {
                for dy in 0..scale {
                    for dx in 0..scale {
                        glyph[[oy + py * scale + dy, ox + px * scale + dx]] = 1.0;
                    }
                }
            }
        }
    }
    glyph
}

// ---------------------------------------------------------------------------
// Manifests

/// Per-image manifest row: a filename relative to `<root>/images/` and one
/// label per schema attribute, in schema order.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub file: String,
    pub labels: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: String,
    pub seed: u64,
    pub rows: Vec<ManifestRow>,
}

#[derive(Serialize, Deserialize)]
struct DatasetMeta {
    split: String,
    seed: u64,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    /// Write `manifest.csv` (header `file,<attr1>,...,<attrn>`) and the
    /// `meta.toml` sidecar under the manifest's root.
    pub fn save(&self, schema: &AttributeSchema) -> Result<()> {
        let path = self.root.join("manifest.csv");
        let mut wtr = csv::Writer::from_path(&path).map_err(|e| ModGanError::Ingestion(e.to_string()))?;
        let mut header = vec!["file".to_string()];
        header.extend(schema.names().iter().map(|s| s.to_string()));
        wtr.write_record(&header).map_err(|e| ModGanError::Ingestion(e.to_string()))?;
        for row in &self.rows {
            let mut rec = vec![row.file.clone()];
            rec.extend(row.labels.iter().cloned());
            wtr.write_record(&rec).map_err(|e| ModGanError::Ingestion(e.to_string()))?;
        }
        wtr.flush().map_err(|e| ModGanError::io(&path, e))?;
        let meta = DatasetMeta { split: self.split.clone(), seed: self.seed };
        let meta_path = self.root.join("meta.toml");
        std::fs::write(&meta_path, toml::to_string(&meta).expect("meta serializes"))
            .map_err(|e| ModGanError::io(&meta_path, e))?;
        Ok(())
    }

    /// Load and validate a manifest: the header must match the schema, every
    /// label must be in the schema's value list, and every file must exist.
    pub fn load(root: &Path, schema: &AttributeSchema) -> Result<Self> {
        let path = root.join("manifest.csv");
        let mut rdr = csv::Reader::from_path(&path)
            .map_err(|e| ModGanError::Ingestion(format!("{}: {e}", path.display())))?;
        let headers = rdr.headers().map_err(|e| ModGanError::Ingestion(e.to_string()))?.clone();
        let mut expected = vec!["file".to_string()];
        expected.extend(schema.names().iter().map(|s| s.to_string()));
        let got: Vec<String> = headers.iter().map(|s| s.to_string()).collect();
        if got != expected {
            return Err(ModGanError::Ingestion(format!(
                "{}: header {:?} does not match schema columns {:?}",
                path.display(),
                got,
                expected
            )));
        }
        let mut rows = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(|e| ModGanError::Ingestion(e.to_string()))?;
            let file = rec[0].to_string();
            let labels: Vec<String> = (1..rec.len()).map(|i| rec[i].to_string()).collect();
            for (i, label) in labels.iter().enumerate() {
                schema.value_index(schema.name(i), label)?;
            }
            if !root.join("images").join(&file).exists() {
                return Err(ModGanError::Ingestion(format!(
                    "manifest row references missing file {file:?}"
                )));
            }
            rows.push(ManifestRow { file, labels });
        }
        let meta_path = root.join("meta.toml");
        let (split, seed) = match std::fs::read_to_string(&meta_path) {
            Ok(s) => {
                let m: DatasetMeta =
                    toml::from_str(&s).map_err(|e| ModGanError::Ingestion(e.to_string()))?;
                (m.split, m.seed)
            }
            Err(_) => ("unknown".to_string(), 0),
        };
        Ok(DatasetManifest { root: root.to_path_buf(), split, seed, rows })
    }

    /// Load image `index` as CHW pixels in [-1, 1] with its labels.
    pub fn load_image(&self, schema: &AttributeSchema, index: usize) -> Result<LabeledImage> {
        let row = &self.rows[index];
        let path = self.images_dir().join(&row.file);
        let img = image::open(&path)
            .map_err(|e| ModGanError::Ingestion(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let mut labels = BTreeMap::new();
        for (i, label) in row.labels.iter().enumerate() {
            labels.insert(schema.name(i).to_string(), label.clone());
        }
        Ok(LabeledImage { pixels: rgb8_to_pixels(&img), labels })
    }

    /// Label of row `index` for a named attribute, as its value index.
    pub fn label_index(&self, schema: &AttributeSchema, index: usize, attr: &str) -> Result<usize> {
        let ai = schema.index_of(attr)?;
        schema.value_index(attr, &self.rows[index].labels[ai])
    }
}

// ---------------------------------------------------------------------------
// Colored-digit synthesis

/// Synthesize the colored-digit dataset under `<out>/train` and `<out>/test`
/// (a seeded 90/10 split). Each image is one digit glyph with independently
/// uniformly sampled color, style and background color; the digit label comes
/// from the glyph source. Deterministic given the seed.
pub fn synthesize_colormnist(
    source: &MnistSource,
    count: usize,
    image_size: usize,
    seed: u64,
    out: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    if image_size < 16 {
        return Err(ModGanError::Argument(format!(
            "image_size must be at least 16, got {image_size}"
        )));
    }
    let schema = AttributeSchema::colormnist();
    let pool = match source {
        MnistSource::Idx { images, labels } => {
            let imgs = load_idx_images(images)?;
            let labs = load_idx_labels(labels)?;
            if imgs.len() != labs.len() {
                return Err(ModGanError::Ingestion(format!(
                    "IDX image count {} does not match label count {}",
                    imgs.len(),
                    labs.len()
                )));
            }
            if imgs.is_empty() {
                return Err(ModGanError::Ingestion("IDX source is empty".into()));
            }
            Some((imgs, labs))
        }
        MnistSource::Builtin => None,
    };

    let colors = schema.values("color")?.to_vec();
    let styles = schema.values("style")?.to_vec();
    let bgcolors = schema.values("bgcolor")?.to_vec();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits: Vec<(PathBuf, Vec<ManifestRow>)> = vec![
        (out.join("train"), Vec::new()),
        (out.join("test"), Vec::new()),
    ];
    for (dir, _) in &splits {
        std::fs::create_dir_all(dir.join("images")).map_err(|e| ModGanError::io(dir, e))?;
    }

    for _ in 0..count {
        let (glyph, digit) = match &pool {
            Some((imgs, labs)) => {
                let i = rng.gen_range(0..imgs.len());
                (imgs[i].clone(), labs[i])
            }
            None => {
                let d = rng.gen_range(0..10u8);
                (builtin_glyph(d, &mut rng), d)
            }
        };
        let color = &colors[rng.gen_range(0..colors.len())];
        let style = &styles[rng.gen_range(0..styles.len())];
        let bgcolor = &bgcolors[rng.gen_range(0..bgcolors.len())];
        let is_test = rng.gen_range(0..10u8) == 0;

        let glyph = resize_nearest(&glyph, image_size, image_size);
        let img = render_digit(&glyph, color, style, bgcolor)?;

        let split = if is_test { &mut splits[1] } else { &mut splits[0] };
        let file = format!("{:06}.png", split.1.len());
        img.to_rgb8()
            .save(split.0.join("images").join(&file))
            .map_err(|e| ModGanError::Ingestion(e.to_string()))?;
        split.1.push(ManifestRow {
            file,
            labels: vec![
                digit.to_string(),
                color.clone(),
                style.clone(),
                bgcolor.clone(),
            ],
        });
    }

    let mut out_manifests = Vec::new();
    for (name, (dir, rows)) in ["train", "test"].iter().zip(splits) {
        let m = DatasetManifest { root: dir, split: name.to_string(), seed, rows };
        m.save(&schema)?;
        out_manifests.push(m);
    }
    let test = out_manifests.pop().expect("two splits");
    let train = out_manifests.pop().expect("two splits");
    Ok((train, test))
}

// ---------------------------------------------------------------------------
// CelebA ingestion

/// Ingest CelebA: center-crop each aligned image to 178x178, resize to
/// 128x128, map the annotation flags to the face schema, and hold out
/// `test_count` images chosen by a seeded shuffle. Images whose hair flags
/// are ambiguous (zero or multiple of black/blond/brown set) are excluded.
pub fn ingest_celeba(
    root: &Path,
    schema: &AttributeSchema,
    test_count: usize,
    seed: u64,
    out: &Path,
) -> Result<(DatasetManifest, DatasetManifest)> {
    let anno_path = root.join("list_attr_celeba.txt");
    let file = std::fs::File::open(&anno_path).map_err(|e| {
        ModGanError::Ingestion(format!("missing annotation file {}: {e}", anno_path.display()))
    })?;
    let mut lines = std::io::BufReader::new(file).lines();
    let _count_line = lines
        .next()
        .ok_or_else(|| ModGanError::Ingestion("annotation file is empty".into()))?
        .map_err(|e| ModGanError::io(&anno_path, e))?;
    let header = lines
        .next()
        .ok_or_else(|| ModGanError::Ingestion("annotation file has no header".into()))?
        .map_err(|e| ModGanError::io(&anno_path, e))?;
    let cols: Vec<&str> = header.split_whitespace().collect();
    let col = |name: &str| -> Result<usize> {
        cols.iter()
            .position(|c| *c == name)
            .ok_or_else(|| ModGanError::Ingestion(format!("annotation column {name:?} not found")))
    };
    let (black, blond, brown) = (col("Black_Hair")?, col("Blond_Hair")?, col("Brown_Hair")?);
    let male = col("Male")?;
    let smiling = col("Smiling")?;

    // candidate (filename, labels) pairs with unambiguous hair color
    let mut candidates: Vec<(String, Vec<String>)> = Vec::new();
    for line in lines {
        let line = line.map_err(|e| ModGanError::io(&anno_path, e))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        let name = fields[0].to_string();
        let flag = |i: usize| fields.get(i + 1).map(|v| *v == "1").unwrap_or(false);
        let hair_flags = [flag(black), flag(blond), flag(brown)];
        if hair_flags.iter().filter(|&&f| f).count() != 1 {
            continue;
        }
        let hair = ["black", "blond", "brown"][hair_flags.iter().position(|&f| f).unwrap()];
        let gender = if flag(male) { "male" } else { "female" };
        let smile = if flag(smiling) { "smile" } else { "nosmile" };
        candidates.push((name, vec![hair.into(), gender.into(), smile.into()]));
    }
    if candidates.len() < test_count {
        return Err(ModGanError::Ingestion(format!(
            "only {} eligible images but test_count is {test_count}",
            candidates.len()
        )));
    }

    // seeded shuffle decides the holdout
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..candidates.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }

    let img_dir = root.join("img_align_celeba");
    let img_dir = if img_dir.is_dir() { img_dir } else { root.join("images") };
    let mut splits: Vec<(PathBuf, Vec<ManifestRow>)> = vec![
        (out.join("train"), Vec::new()),
        (out.join("test"), Vec::new()),
    ];
    for (dir, _) in &splits {
        std::fs::create_dir_all(dir.join("images")).map_err(|e| ModGanError::io(dir, e))?;
    }

    for (rank, &idx) in order.iter().enumerate() {
        let (name, labels) = &candidates[idx];
        let src = img_dir.join(name);
        let img = image::open(&src)
            .map_err(|e| ModGanError::Ingestion(format!("{}: {e}", src.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        if w < 178 || h < 178 {
            return Err(ModGanError::Ingestion(format!(
                "{}: image {w}x{h} smaller than the 178x178 crop",
                src.display()
            )));
        }
        let cropped = image::imageops::crop_imm(&img, (w - 178) / 2, (h - 178) / 2, 178, 178).to_image();
        let resized = image::imageops::resize(&cropped, 128, 128, image::imageops::FilterType::Triangle);

        let split = if rank < test_count { &mut splits[1] } else { &mut splits[0] };
        let file = format!("{:06}.png", split.1.len());
        resized
            .save(split.0.join("images").join(&file))
            .map_err(|e| ModGanError::Ingestion(e.to_string()))?;
        split.1.push(ManifestRow { file, labels: labels.clone() });
    }

    let mut out_manifests = Vec::new();
    for (name, (dir, rows)) in ["train", "test"].iter().zip(splits) {
        let m = DatasetManifest { root: dir, split: name.to_string(), seed, rows };
        m.save(schema)?;
        out_manifests.push(m);
    }
    let test = out_manifests.pop().expect("two splits");
    let train = out_manifests.pop().expect("two splits");
    Ok((train, test))
}
