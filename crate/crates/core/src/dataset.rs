//! Dataset construction pipeline pieces.
//!
//! Raw images are aligned by a five-point similarity transform, upscaled,
//! annotated with conditions through pluggable extractors, captioned from
//! their attribute vectors by a template engine, translated, filtered, and
//! collected into a JSON-lines manifest. Every external model named by the
//! upstream tooling (upscaler, landmark detector, face parser, caption LLM,
//! translator) is an interface here with a deterministic stub behind it.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use faceforge_tensor::rng::{derive_seed, rng_from_seed};
use rand::Rng;

use crate::condition::{ConditionError, ConditionImage, LandmarkSet, SegmentationMap};
use crate::pixels::grayscale;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("degenerate anchors: {0}")]
    DegenerateAnchors(String),
    #[error("upscale factor must be >= 1, got {0}")]
    BadFactor(usize),
    #[error("unknown backend `{0}`")]
    UnknownBackend(String),
    #[error("need at least one caption, got {0}")]
    BadCaptionCount(usize),
    #[error("caption space exhausted: produced {got} distinct captions of {want}")]
    CaptionSpaceExhausted { want: usize, got: usize },
    #[error("invalid record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("attribute set mismatch: {0}")]
    BadAttributes(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json line {line}: {err}")]
    JsonLine { line: usize, err: String },
    #[error(transparent)]
    Condition(#[from] ConditionError),
}

// ---------------------------------------------------------------------------
// attributes
// ---------------------------------------------------------------------------

/// The forty CelebA attribute names, in their canonical order.
pub const ATTRIBUTE_NAMES: [&str; 40] = [
    "5_o_Clock_Shadow",
    "Arched_Eyebrows",
    "Attractive",
    "Bags_Under_Eyes",
    "Bald",
    "Bangs",
    "Big_Lips",
    "Big_Nose",
    "Black_Hair",
    "Blond_Hair",
    "Blurry",
    "Brown_Hair",
    "Bushy_Eyebrows",
    "Chubby",
    "Double_Chin",
    "Eyeglasses",
    "Goatee",
    "Gray_Hair",
    "Heavy_Makeup",
    "High_Cheekbones",
    "Male",
    "Mouth_Slightly_Open",
    "Mustache",
    "Narrow_Eyes",
    "No_Beard",
    "Oval_Face",
    "Pale_Skin",
    "Pointy_Nose",
    "Receding_Hairline",
    "Rosy_Cheeks",
    "Sideburns",
    "Smiling",
    "Straight_Hair",
    "Wavy_Hair",
    "Wearing_Earrings",
    "Wearing_Hat",
    "Wearing_Lipstick",
    "Wearing_Necklace",
    "Wearing_Necktie",
    "Young",
];

/// Exactly forty named boolean attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttributeVector {
    values: [bool; 40],
}

impl AttributeVector {
    pub fn new(values: [bool; 40]) -> Self {
        Self { values }
    }

    pub fn all_false() -> Self {
        Self { values: [false; 40] }
    }

    pub fn index_of(name: &str) -> Option<usize> {
        ATTRIBUTE_NAMES.iter().position(|&n| n == name)
    }

    pub fn from_map(map: &BTreeMap<String, bool>) -> Result<Self, DatasetError> {
        if map.len() != 40 {
            return Err(DatasetError::BadAttributes(format!(
                "need 40 attributes, got {}",
                map.len()
            )));
        }
        let mut values = [false; 40];
        for (name, &v) in map {
            let idx = Self::index_of(name).ok_or_else(|| {
                DatasetError::BadAttributes(format!("unknown attribute {name}"))
            })?;
            values[idx] = v;
        }
        Ok(Self { values })
    }

    pub fn to_map(&self) -> BTreeMap<String, bool> {
        ATTRIBUTE_NAMES
            .iter()
            .enumerate()
            .map(|(i, &n)| (n.to_string(), self.values[i]))
            .collect()
    }

    pub fn get(&self, name: &str) -> bool {
        self.values[Self::index_of(name).expect("known attribute")]
    }

    pub fn set(&mut self, name: &str, v: bool) {
        self.values[Self::index_of(name).expect("known attribute")] = v;
    }

    pub fn iter(&self) -> impl Iterator<Item = (&'static str, bool)> + '_ {
        ATTRIBUTE_NAMES
            .iter()
            .enumerate()
            .map(|(i, &n)| (n, self.values[i]))
    }

    pub fn count_true(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

// ---------------------------------------------------------------------------
// records and manifest
// ---------------------------------------------------------------------------

/// One corpus entry; `image`/`seg`/`landmarks` are paths relative to the
/// corpus root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceRecord {
    pub id: String,
    pub image: String,
    pub seg: String,
    pub landmarks: String,
    #[serde(
        serialize_with = "serialize_attrs",
        deserialize_with = "deserialize_attrs"
    )]
    pub attrs: AttributeVector,
    pub captions: BTreeMap<String, Vec<String>>,
}

fn serialize_attrs<S: serde::Serializer>(a: &AttributeVector, s: S) -> Result<S::Ok, S::Error> {
    use serde::Serialize;
    a.to_map().serialize(s)
}

fn deserialize_attrs<'de, D: serde::Deserializer<'de>>(d: D) -> Result<AttributeVector, D::Error> {
    let map = BTreeMap::<String, bool>::deserialize(d)?;
    AttributeVector::from_map(&map).map_err(serde::de::Error::custom)
}

impl FaceRecord {
    /// Type invariants: exactly three captions per language, relative refs.
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.captions.is_empty() {
            return Err(DatasetError::InvalidRecord {
                id: self.id.clone(),
                reason: "no captions".into(),
            });
        }
        for (lang, caps) in &self.captions {
            if caps.len() != 3 {
                return Err(DatasetError::InvalidRecord {
                    id: self.id.clone(),
                    reason: format!("{} captions for language {lang}, need 3", caps.len()),
                });
            }
        }
        for r in [&self.image, &self.seg, &self.landmarks] {
            let p = Path::new(r);
            if p.is_absolute() || r.split('/').any(|c| c == "..") {
                return Err(DatasetError::InvalidRecord {
                    id: self.id.clone(),
                    reason: format!("ref `{r}` escapes the corpus root"),
                });
            }
        }
        Ok(())
    }

    /// Validate and check that all refs exist under the corpus root.
    pub fn validate_refs(&self, root: &Path) -> Result<(), DatasetError> {
        self.validate()?;
        for r in [&self.image, &self.seg, &self.landmarks] {
            if !root.join(r).exists() {
                return Err(DatasetError::InvalidRecord {
                    id: self.id.clone(),
                    reason: format!("missing file {r}"),
                });
            }
        }
        Ok(())
    }
}

/// JSON-lines corpus index, one record per line, id-sorted on write.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<FaceRecord>,
}

impl Manifest {
    pub fn read(path: &Path) -> Result<Self, DatasetError> {
        let file = std::fs::File::open(path)?;
        let reader = std::io::BufReader::new(file);
        let mut records = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: FaceRecord =
                serde_json::from_str(&line).map_err(|e| DatasetError::JsonLine {
                    line: i + 1,
                    err: e.to_string(),
                })?;
            rec.validate()?;
            records.push(rec);
        }
        Ok(Self { records })
    }

    pub fn write(&self, path: &Path) -> Result<(), DatasetError> {
        let mut sorted = self.records.clone();
        sorted.sort_by(|a, b| a.id.cmp(&b.id));
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        for rec in &sorted {
            rec.validate()?;
            let line = serde_json::to_string(rec).expect("record serializes");
            writeln!(file, "{line}")?;
        }
        file.flush()?;
        Ok(())
    }

    pub fn ids(&self) -> Vec<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    pub fn get(&self, id: &str) -> Option<&FaceRecord> {
        self.records.iter().find(|r| r.id == id)
    }
}

/// Per-attribute occurrence ratios over a manifest.
pub fn attribute_stats(manifest: &Manifest) -> Result<Vec<(String, f64)>, DatasetError> {
    if manifest.records.is_empty() {
        return Err(DatasetError::EmptyManifest);
    }
    let n = manifest.records.len() as f64;
    Ok(ATTRIBUTE_NAMES
        .iter()
        .map(|&name| {
            let positives = manifest
                .records
                .iter()
                .filter(|r| r.attrs.get(name))
                .count();
            (name.to_string(), positives as f64 / n)
        })
        .collect())
}

/// CSV rendering of attribute stats: `attribute,ratio`.
pub fn stats_csv(stats: &[(String, f64)]) -> String {
    let mut out = String::from("attribute,ratio\n");
    for (name, ratio) in stats {
        out.push_str(&format!("{name},{ratio:.6}\n"));
    }
    out
}

// ---------------------------------------------------------------------------
// alignment
// ---------------------------------------------------------------------------

/// Canonical five-point template (left eye, right eye, nose, mouth corners)
/// on a 112x112 frame; scaled to the requested output size.
pub const ALIGN_TEMPLATE_112: [[f64; 2]; 5] = [
    [38.2946, 51.6963],
    [73.5318, 51.5014],
    [56.0252, 71.7366],
    [41.5493, 92.3655],
    [70.7299, 92.2041],
];

pub fn align_template(out_size: usize) -> [[f64; 2]; 5] {
    let s = out_size as f64 / 112.0;
    let mut t = ALIGN_TEMPLATE_112;
    for p in &mut t {
        p[0] *= s;
        p[1] *= s;
    }
    t
}

/// Least-squares similarity transform (scale, rotation, translation) mapping
/// `src` points onto `dst` points. Returns (a, b, tx, ty) of the matrix
/// `[[a, -b, tx], [b, a, ty]]`.
fn estimate_similarity(src: &[[f64; 2]], dst: &[[f64; 2]]) -> Result<[f64; 4], DatasetError> {
    let mut ata = [0.0f64; 16];
    let mut atb = [0.0f64; 4];
    for (s, d) in src.iter().zip(dst) {
        let r1 = [s[0], -s[1], 1.0, 0.0];
        let r2 = [s[1], s[0], 0.0, 1.0];
        for j in 0..4 {
            for k in 0..4 {
                ata[j * 4 + k] += r1[j] * r1[k] + r2[j] * r2[k];
            }
            atb[j] += r1[j] * d[0] + r2[j] * d[1];
        }
    }
    let x = solve4(&mut ata, &mut atb)
        .ok_or_else(|| DatasetError::DegenerateAnchors("singular normal equations".into()))?;
    let scale2 = x[0] * x[0] + x[1] * x[1];
    if scale2 < 1e-12 {
        return Err(DatasetError::DegenerateAnchors("zero scale".into()));
    }
    Ok(x)
}

fn solve4(a: &mut [f64; 16], b: &mut [f64; 4]) -> Option<[f64; 4]> {
    for col in 0..4 {
        let mut piv = col;
        for row in (col + 1)..4 {
            if a[row * 4 + col].abs() > a[piv * 4 + col].abs() {
                piv = row;
            }
        }
        if a[piv * 4 + col].abs() < 1e-12 {
            return None;
        }
        if piv != col {
            for k in 0..4 {
                a.swap(col * 4 + k, piv * 4 + k);
            }
            b.swap(col, piv);
        }
        for row in (col + 1)..4 {
            let f = a[row * 4 + col] / a[col * 4 + col];
            for k in col..4 {
                a[row * 4 + k] -= f * a[col * 4 + k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 4];
    for i in (0..4).rev() {
        let mut acc = b[i];
        for j in (i + 1)..4 {
            acc -= a[i * 4 + j] * x[j];
        }
        x[i] = acc / a[i * 4 + i];
    }
    Some(x)
}

/// Align a face: map the five anchors (pixel coordinates) onto the canonical
/// template and resample the image at `out_size` with bilinear interpolation.
pub fn align_crop(
    img: &ConditionImage,
    anchors: &[[f64; 2]; 5],
    out_size: usize,
) -> Result<ConditionImage, DatasetError> {
    // eyes and nose must span a real triangle
    let (e1, e2, nose) = (anchors[0], anchors[1], anchors[2]);
    let area = ((e2[0] - e1[0]) * (nose[1] - e1[1]) - (e2[1] - e1[1]) * (nose[0] - e1[0])).abs();
    let spread = (e2[0] - e1[0]).hypot(e2[1] - e1[1]);
    if spread < 1e-9 || area < 1e-6 * spread.max(1.0) {
        return Err(DatasetError::DegenerateAnchors(
            "eyes and nose are collinear or coincident".into(),
        ));
    }
    let template = align_template(out_size);
    let [a, b, tx, ty] = estimate_similarity(anchors, &template)?;
    // invert [[a,-b],[b,a]]
    let det = a * a + b * b;
    let (ia, ib) = (a / det, b / det);
    let mut out = ConditionImage::filled(out_size, out_size, [0, 0, 0]);
    for oy in 0..out_size {
        for ox in 0..out_size {
            let dx = ox as f64 - tx;
            let dy = oy as f64 - ty;
            let sx = ia * dx + ib * dy;
            let sy = -ib * dx + ia * dy;
            out.set(oy, ox, bilinear(img, sx, sy));
        }
    }
    Ok(out)
}

fn bilinear(img: &ConditionImage, x: f64, y: f64) -> [u8; 3] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let sample = |xi: i64, yi: i64| -> [f64; 3] {
        if xi < 0 || yi < 0 || xi >= img.width as i64 || yi >= img.height as i64 {
            [0.0, 0.0, 0.0]
        } else {
            let p = img.get(yi as usize, xi as usize);
            [p[0] as f64, p[1] as f64, p[2] as f64]
        }
    };
    let (x0i, y0i) = (x0 as i64, y0 as i64);
    let p00 = sample(x0i, y0i);
    let p10 = sample(x0i + 1, y0i);
    let p01 = sample(x0i, y0i + 1);
    let p11 = sample(x0i + 1, y0i + 1);
    let mut px = [0u8; 3];
    for c in 0..3 {
        let v = p00[c] * (1.0 - fx) * (1.0 - fy)
            + p10[c] * fx * (1.0 - fy)
            + p01[c] * (1.0 - fx) * fy
            + p11[c] * fx * fy;
        px[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    px
}

// ---------------------------------------------------------------------------
// upscaling
// ---------------------------------------------------------------------------

pub trait UpscaleBackend: Send + Sync {
    fn id(&self) -> &str;
    fn upscale(&self, img: &ConditionImage, factor: usize) -> Result<ConditionImage, DatasetError>;
}

/// Catmull-Rom bicubic resampler with center-aligned sampling. The stub
/// standing in for learned super-resolution backends.
pub struct BicubicUpscaler;

fn catmull_rom(x: f64) -> f64 {
    let x = x.abs();
    if x < 1.0 {
        1.5 * x * x * x - 2.5 * x * x + 1.0
    } else if x < 2.0 {
        -0.5 * x * x * x + 2.5 * x * x - 4.0 * x + 2.0
    } else {
        0.0
    }
}

impl UpscaleBackend for BicubicUpscaler {
    fn id(&self) -> &str {
        "bicubic"
    }

    fn upscale(&self, img: &ConditionImage, factor: usize) -> Result<ConditionImage, DatasetError> {
        if factor < 1 {
            return Err(DatasetError::BadFactor(factor));
        }
        let (h, w) = (img.height, img.width);
        let (oh, ow) = (h * factor, w * factor);
        // horizontal pass into f64, then vertical
        let mut tmp = vec![0.0f64; h * ow * 3];
        for y in 0..h {
            for ox in 0..ow {
                let sx = (ox as f64 + 0.5) / factor as f64 - 0.5;
                let base = sx.floor() as i64;
                let t = sx - base as f64;
                let mut acc = [0.0; 3];
                for k in -1..=2i64 {
                    let wgt = catmull_rom(t - k as f64);
                    if wgt == 0.0 {
                        continue;
                    }
                    let xi = (base + k).clamp(0, w as i64 - 1) as usize;
                    let p = img.get(y, xi);
                    for c in 0..3 {
                        acc[c] += wgt * p[c] as f64;
                    }
                }
                for c in 0..3 {
                    tmp[(y * ow + ox) * 3 + c] = acc[c];
                }
            }
        }
        let mut out = ConditionImage::filled(oh, ow, [0, 0, 0]);
        for oy in 0..oh {
            let sy = (oy as f64 + 0.5) / factor as f64 - 0.5;
            let base = sy.floor() as i64;
            let t = sy - base as f64;
            for ox in 0..ow {
                let mut acc = [0.0; 3];
                for k in -1..=2i64 {
                    let wgt = catmull_rom(t - k as f64);
                    if wgt == 0.0 {
                        continue;
                    }
                    let yi = (base + k).clamp(0, h as i64 - 1) as usize;
                    for c in 0..3 {
                        acc[c] += wgt * tmp[(yi * ow + ox) * 3 + c];
                    }
                }
                let mut px = [0u8; 3];
                for c in 0..3 {
                    px[c] = acc[c].round().clamp(0.0, 255.0) as u8;
                }
                out.set(oy, ox, px);
            }
        }
        Ok(out)
    }
}

#[derive(Default, Clone)]
pub struct UpscalerRegistry {
    backends: BTreeMap<String, Arc<dyn UpscaleBackend>>,
}

impl UpscalerRegistry {
    pub fn with_stub() -> Self {
        let mut r = Self::default();
        r.register(Arc::new(BicubicUpscaler));
        r
    }

    pub fn register(&mut self, backend: Arc<dyn UpscaleBackend>) {
        self.backends.insert(backend.id().to_string(), backend);
    }

    pub fn get(&self, id: &str) -> Result<&Arc<dyn UpscaleBackend>, DatasetError> {
        self.backends
            .get(id)
            .ok_or_else(|| DatasetError::UnknownBackend(id.to_string()))
    }
}

/// Upscale through a registered backend.
pub fn upscale(
    img: &ConditionImage,
    factor: usize,
    registry: &UpscalerRegistry,
    backend_id: &str,
) -> Result<ConditionImage, DatasetError> {
    if factor < 1 {
        return Err(DatasetError::BadFactor(factor));
    }
    registry.get(backend_id)?.upscale(img, factor)
}

// ---------------------------------------------------------------------------
// captions
// ---------------------------------------------------------------------------

enum Bucket {
    Subject,
    Adjective,
    With,
    Wearing,
    PhotoAdjective,
}

/// Phrase bank: every attribute has at least two phrasings.
const PHRASE_BANK: [(&str, Bucket, &[&str]); 40] = [
    ("5_o_Clock_Shadow", Bucket::With, &["a five o'clock shadow", "light stubble"]),
    ("Arched_Eyebrows", Bucket::With, &["arched eyebrows", "curved eyebrows"]),
    ("Attractive", Bucket::Adjective, &["attractive", "good-looking"]),
    ("Bags_Under_Eyes", Bucket::With, &["bags under the eyes", "tired-looking eyes"]),
    ("Bald", Bucket::Adjective, &["bald", "hairless"]),
    ("Bangs", Bucket::With, &["bangs", "a fringe"]),
    ("Big_Lips", Bucket::With, &["full lips", "big lips"]),
    ("Big_Nose", Bucket::With, &["a big nose", "a large nose"]),
    ("Black_Hair", Bucket::With, &["black hair", "jet-black hair"]),
    ("Blond_Hair", Bucket::With, &["blond hair", "golden hair"]),
    ("Blurry", Bucket::PhotoAdjective, &["blurry", "out-of-focus"]),
    ("Brown_Hair", Bucket::With, &["brown hair", "chestnut hair"]),
    ("Bushy_Eyebrows", Bucket::With, &["bushy eyebrows", "thick eyebrows"]),
    ("Chubby", Bucket::Adjective, &["chubby", "round-faced"]),
    ("Double_Chin", Bucket::With, &["a double chin", "a full chin"]),
    ("Eyeglasses", Bucket::With, &["eyeglasses", "glasses"]),
    ("Goatee", Bucket::With, &["a goatee", "a chin beard"]),
    ("Gray_Hair", Bucket::With, &["gray hair", "silver hair"]),
    ("Heavy_Makeup", Bucket::With, &["heavy makeup", "bold makeup"]),
    ("High_Cheekbones", Bucket::With, &["high cheekbones", "prominent cheekbones"]),
    ("Male", Bucket::Subject, &["a man", "a gentleman"]),
    ("Mouth_Slightly_Open", Bucket::With, &["a slightly open mouth", "parted lips"]),
    ("Mustache", Bucket::With, &["a mustache", "a moustache"]),
    ("Narrow_Eyes", Bucket::With, &["narrow eyes", "slender eyes"]),
    ("No_Beard", Bucket::With, &["a clean-shaven face", "no beard"]),
    ("Oval_Face", Bucket::With, &["an oval face", "an oval-shaped face"]),
    ("Pale_Skin", Bucket::With, &["pale skin", "fair skin"]),
    ("Pointy_Nose", Bucket::With, &["a pointy nose", "a sharp nose"]),
    ("Receding_Hairline", Bucket::With, &["a receding hairline", "a high hairline"]),
    ("Rosy_Cheeks", Bucket::With, &["rosy cheeks", "flushed cheeks"]),
    ("Sideburns", Bucket::With, &["sideburns", "long sideburns"]),
    ("Smiling", Bucket::Adjective, &["smiling", "cheerful"]),
    ("Straight_Hair", Bucket::With, &["straight hair", "sleek hair"]),
    ("Wavy_Hair", Bucket::With, &["wavy hair", "flowing hair"]),
    ("Wearing_Earrings", Bucket::Wearing, &["earrings", "ear jewelry"]),
    ("Wearing_Hat", Bucket::Wearing, &["a hat", "a cap"]),
    ("Wearing_Lipstick", Bucket::Wearing, &["lipstick", "lip color"]),
    ("Wearing_Necklace", Bucket::Wearing, &["a necklace", "a pendant"]),
    ("Wearing_Necktie", Bucket::Wearing, &["a necktie", "a tie"]),
    ("Young", Bucket::Adjective, &["young", "youthful"]),
];

const GENERIC_SUBJECTS: [&str; 2] = ["a person", "an individual"];
const SKELETONS: [&str; 3] = ["a portrait of", "a photo of", "a close-up of"];

/// All phrasings the bank holds for one attribute (for presence scans).
pub fn bank_phrases(attr: &str) -> &'static [&'static str] {
    PHRASE_BANK
        .iter()
        .find(|(name, _, _)| *name == attr)
        .map(|(_, _, p)| *p)
        .unwrap_or(&[])
}

pub trait CaptionEngine: Send + Sync {
    fn id(&self) -> &str;
    fn captions(
        &self,
        attrs: &AttributeVector,
        n: usize,
        seed: u64,
    ) -> Result<Vec<String>, DatasetError>;
}

/// Caption generation from sentence skeletons and per-attribute phrasings.
/// Every true attribute contributes exactly one phrase to every caption;
/// skeleton and phrasing choices vary with the seed. The LLM-backed engine
/// of the upstream pipeline plugs in behind the same trait.
pub struct TemplateCaptionEngine;

impl TemplateCaptionEngine {
    fn one_caption(attrs: &AttributeVector, rng: &mut faceforge_tensor::rng::SeededRng) -> String {
        let pick = |rng: &mut faceforge_tensor::rng::SeededRng, opts: &[&str]| -> String {
            opts[rng.gen_range(0..opts.len())].to_string()
        };
        let mut subject: Option<String> = None;
        let mut adjectives = Vec::new();
        let mut with = Vec::new();
        let mut wearing = Vec::new();
        let mut photo_adj: Option<String> = None;
        for (i, (name, bucket, phrasings)) in PHRASE_BANK.iter().enumerate() {
            debug_assert_eq!(ATTRIBUTE_NAMES[i], *name);
            if !attrs.get(name) {
                continue;
            }
            let phrase = pick(rng, phrasings);
            match bucket {
                Bucket::Subject => subject = Some(phrase),
                Bucket::Adjective => adjectives.push(phrase),
                Bucket::With => with.push(phrase),
                Bucket::Wearing => wearing.push(phrase),
                Bucket::PhotoAdjective => photo_adj = Some(phrase),
            }
        }
        let subject = subject.unwrap_or_else(|| pick(rng, &GENERIC_SUBJECTS));
        let skeleton = pick(rng, &SKELETONS);
        let mut caption = match photo_adj {
            // "a portrait of" -> "a blurry portrait of"
            Some(adj) => {
                let rest = skeleton.strip_prefix("a ").unwrap_or(&skeleton);
                format!("a {adj} {rest} {subject}")
            }
            None => format!("{skeleton} {subject}"),
        };
        if !adjectives.is_empty() {
            caption.push_str(&format!(" who is {}", join_natural(&adjectives)));
        }
        if !with.is_empty() {
            caption.push_str(&format!(", with {}", join_natural(&with)));
        }
        if !wearing.is_empty() {
            caption.push_str(&format!(", wearing {}", join_natural(&wearing)));
        }
        caption.push('.');
        caption
    }
}

fn join_natural(items: &[String]) -> String {
    match items.len() {
        0 => String::new(),
        1 => items[0].clone(),
        2 => format!("{} and {}", items[0], items[1]),
        _ => format!(
            "{} and {}",
            items[..items.len() - 1].join(", "),
            items[items.len() - 1]
        ),
    }
}

impl CaptionEngine for TemplateCaptionEngine {
    fn id(&self) -> &str {
        "template"
    }

    fn captions(
        &self,
        attrs: &AttributeVector,
        n: usize,
        seed: u64,
    ) -> Result<Vec<String>, DatasetError> {
        if n < 1 {
            return Err(DatasetError::BadCaptionCount(n));
        }
        let mut rng = rng_from_seed(derive_seed(seed, "captions"));
        let mut out: Vec<String> = Vec::with_capacity(n);
        let mut attempts = 0;
        while out.len() < n && attempts < 50 * n {
            let c = Self::one_caption(attrs, &mut rng);
            if !out.contains(&c) {
                out.push(c);
            }
            attempts += 1;
        }
        if out.len() < n {
            return Err(DatasetError::CaptionSpaceExhausted {
                want: n,
                got: out.len(),
            });
        }
        Ok(out)
    }
}

/// Generate `n` distinct captions through the chosen engine.
pub fn captions_from_attributes(
    attrs: &AttributeVector,
    n: usize,
    seed: u64,
    engine: &dyn CaptionEngine,
) -> Result<Vec<String>, DatasetError> {
    engine.captions(attrs, n, seed)
}

// ---------------------------------------------------------------------------
// translation
// ---------------------------------------------------------------------------

pub trait TranslationBackend: Send + Sync {
    fn id(&self) -> &str;
    fn translate(&self, caption: &str, lang: &str) -> Result<String, DatasetError>;
}

/// Deterministic stand-in for a translation model: tags the text with the
/// target language.
pub struct TaggedPassthroughTranslator;

impl TranslationBackend for TaggedPassthroughTranslator {
    fn id(&self) -> &str {
        "tagged-passthrough"
    }

    fn translate(&self, caption: &str, lang: &str) -> Result<String, DatasetError> {
        Ok(format!("[{lang}] {caption}"))
    }
}

#[derive(Debug, Clone)]
pub struct TranslationFailure {
    pub lang: String,
    pub index: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct TranslationOutcome {
    /// Complete caption sets per language; a language with any failed item
    /// is omitted here and reported in `failures`.
    pub by_lang: BTreeMap<String, Vec<String>>,
    pub failures: Vec<TranslationFailure>,
}

/// Translate all captions into each target language. Per-item failures are
/// recorded and the remaining work continues.
pub fn translate(
    captions: &[String],
    target_langs: &[String],
    backend: &dyn TranslationBackend,
) -> TranslationOutcome {
    let mut outcome = TranslationOutcome::default();
    for lang in target_langs {
        let mut translated = Vec::with_capacity(captions.len());
        let mut failed = false;
        for (index, caption) in captions.iter().enumerate() {
            match backend.translate(caption, lang) {
                Ok(t) => translated.push(t),
                Err(e) => {
                    failed = true;
                    outcome.failures.push(TranslationFailure {
                        lang: lang.clone(),
                        index,
                        message: e.to_string(),
                    });
                }
            }
        }
        if !failed {
            outcome.by_lang.insert(lang.clone(), translated);
        }
    }
    outcome
}

// ---------------------------------------------------------------------------
// filtering
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FilterRules {
    /// Records whose Laplacian variance falls below this are blurry.
    pub blur_threshold: f64,
    /// Horizontal nose offset over inter-ocular distance beyond this is an
    /// extreme pose.
    pub pose_ratio_threshold: f64,
}

impl Default for FilterRules {
    fn default() -> Self {
        Self {
            blur_threshold: 100.0,
            pose_ratio_threshold: 0.35,
        }
    }
}

pub struct FilterItem {
    pub id: String,
    pub image: ConditionImage,
    pub landmarks: LandmarkSet,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub occlusion: usize,
    pub blur: usize,
    pub extreme_pose: usize,
    pub kept: usize,
}

impl FilterReport {
    pub fn total(&self) -> usize {
        self.occlusion + self.blur + self.extreme_pose + self.kept
    }
}

/// Occlusion predicate stub: never rejects.
pub fn never_occluded(_: &FilterItem) -> bool {
    false
}

/// Variance of the 4-neighbour Laplacian over the interior of the image.
pub fn laplacian_variance(img: &ConditionImage) -> f64 {
    let gray = grayscale(img);
    let (h, w) = (img.height, img.width);
    if h < 3 || w < 3 {
        return 0.0;
    }
    let mut responses = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let v = gray[(y - 1) * w + x] + gray[(y + 1) * w + x] + gray[y * w + x - 1]
                + gray[y * w + x + 1]
                - 4.0 * gray[y * w + x];
            responses.push(v);
        }
    }
    let mean: f64 = responses.iter().sum::<f64>() / responses.len() as f64;
    responses.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / responses.len() as f64
}

/// Horizontal nose offset normalized by inter-ocular distance (dlib68).
pub fn pose_ratio(lms: &LandmarkSet) -> Option<f64> {
    if lms.convention != "dlib68" || lms.points.len() != 68 {
        return None;
    }
    let centroid = |range: std::ops::Range<usize>| -> [f64; 2] {
        let mut acc = [0.0, 0.0];
        let n = range.len() as f64;
        for i in range {
            acc[0] += lms.points[i][0];
            acc[1] += lms.points[i][1];
        }
        [acc[0] / n, acc[1] / n]
    };
    let left = centroid(36..42);
    let right = centroid(42..48);
    let dist = (right[0] - left[0]).hypot(right[1] - left[1]);
    if dist <= 0.0 {
        return None;
    }
    let mid_x = (left[0] + right[0]) / 2.0;
    let nose_x = lms.points[30][0];
    Some((nose_x - mid_x).abs() / dist)
}

/// Apply the rejection rules in order occlusion, blur, extreme pose.
/// Returns indices of kept items and the per-reason counts.
pub fn filter_records(
    items: &[FilterItem],
    rules: &FilterRules,
    occluded: &dyn Fn(&FilterItem) -> bool,
) -> (Vec<usize>, FilterReport) {
    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    for (i, item) in items.iter().enumerate() {
        if occluded(item) {
            report.occlusion += 1;
            continue;
        }
        if laplacian_variance(&item.image) < rules.blur_threshold {
            report.blur += 1;
            continue;
        }
        if let Some(ratio) = pose_ratio(&item.landmarks) {
            if ratio > rules.pose_ratio_threshold {
                report.extreme_pose += 1;
                continue;
            }
        }
        report.kept += 1;
        kept.push(i);
    }
    (kept, report)
}

// ---------------------------------------------------------------------------
// condition extractors (plug-ins standing in for learned models)
// ---------------------------------------------------------------------------

pub trait LandmarkExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn extract(
        &self,
        img: &ConditionImage,
        anchors: &[[f64; 2]; 5],
    ) -> Result<LandmarkSet, DatasetError>;
}

pub trait SegmentationExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn extract(
        &self,
        img: &ConditionImage,
        lms: &LandmarkSet,
    ) -> Result<SegmentationMap, DatasetError>;
}

/// Deterministic 68-point construction from the five anchors: jaw arc, brow
/// arcs, nose line, eye rings and mouth rings placed by face geometry.
pub struct GeometricLandmarkStub;

impl LandmarkExtractor for GeometricLandmarkStub {
    fn id(&self) -> &str {
        "geometric-stub"
    }

    fn extract(
        &self,
        img: &ConditionImage,
        anchors: &[[f64; 2]; 5],
    ) -> Result<LandmarkSet, DatasetError> {
        let (w, h) = (img.width as f64, img.height as f64);
        let norm = |p: [f64; 2]| [p[0] / w, p[1] / h];
        let eye_l = norm(anchors[0]);
        let eye_r = norm(anchors[1]);
        let nose = norm(anchors[2]);
        let mouth_l = norm(anchors[3]);
        let mouth_r = norm(anchors[4]);
        let mid_eye = [(eye_l[0] + eye_r[0]) / 2.0, (eye_l[1] + eye_r[1]) / 2.0];
        let iod = (eye_r[0] - eye_l[0]).hypot(eye_r[1] - eye_l[1]).max(1e-6);
        let mouth_c = [(mouth_l[0] + mouth_r[0]) / 2.0, (mouth_l[1] + mouth_r[1]) / 2.0];
        let chin = [mouth_c[0], (mouth_c[1] + iod * 0.9).min(1.0)];
        let mut pts = vec![[0.5, 0.5]; 68];
        // jaw 0..=16: half-ellipse from left temple through chin to right temple
        let half_w = iod * 1.55;
        for (i, p) in pts.iter_mut().enumerate().take(17) {
            let t = i as f64 / 16.0; // 0..1 left to right
            let ang = std::f64::consts::PI * (1.0 - t); // pi..0
            *p = [
                mid_eye[0] + half_w * ang.cos(),
                mid_eye[1] + (chin[1] - mid_eye[1]) * ang.sin(),
            ];
        }
        // brows 17..=21 and 22..=26: arcs above each eye
        for k in 0..5 {
            let t = k as f64 / 4.0 - 0.5;
            let lift = 0.35 * iod * (1.0 - (2.0 * t) * (2.0 * t) * 0.5);
            pts[17 + k] = [eye_l[0] + t * iod * 0.8, eye_l[1] - lift];
            pts[22 + k] = [eye_r[0] + t * iod * 0.8, eye_r[1] - lift];
        }
        // nose bridge 27..=30, base 31..=35
        for k in 0..4 {
            let t = (k + 1) as f64 / 4.0;
            pts[27 + k] = [
                mid_eye[0] + (nose[0] - mid_eye[0]) * t,
                mid_eye[1] + (nose[1] - mid_eye[1]) * t,
            ];
        }
        for k in 0..5 {
            let t = k as f64 / 4.0 - 0.5;
            pts[31 + k] = [nose[0] + t * iod * 0.5, nose[1] + 0.12 * iod];
        }
        // eyes 36..=41 (left) and 42..=47 (right): 6-point rings
        let eye_ring = |c: [f64; 2]| -> [[f64; 2]; 6] {
            let rx = 0.28 * iod;
            let ry = 0.14 * iod;
            let angles = [180.0f64, 120.0, 60.0, 0.0, 300.0, 240.0];
            let mut ring = [[0.0; 2]; 6];
            for (i, a) in angles.iter().enumerate() {
                let r = a.to_radians();
                ring[i] = [c[0] + rx * r.cos(), c[1] - ry * r.sin()];
            }
            ring
        };
        pts[36..42].copy_from_slice(&eye_ring(eye_l));
        pts[42..48].copy_from_slice(&eye_ring(eye_r));
        // mouth: outer ring 48..=59, inner ring 60..=67
        let mouth_w = (mouth_r[0] - mouth_l[0]).hypot(mouth_r[1] - mouth_l[1]).max(1e-6);
        let mouth_ring = |n: usize, rx: f64, ry: f64, start: f64| -> Vec<[f64; 2]> {
            (0..n)
                .map(|i| {
                    let a = start + 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                    [mouth_c[0] + rx * a.cos(), mouth_c[1] + ry * a.sin()]
                })
                .collect()
        };
        let outer = mouth_ring(12, mouth_w * 0.6, mouth_w * 0.32, std::f64::consts::PI);
        let inner = mouth_ring(8, mouth_w * 0.35, mouth_w * 0.16, std::f64::consts::PI);
        pts[48..60].copy_from_slice(&outer);
        pts[60..68].copy_from_slice(&inner);
        for p in &mut pts {
            p[0] = p[0].clamp(0.0, 1.0);
            p[1] = p[1].clamp(0.0, 1.0);
        }
        Ok(LandmarkSet::new("dlib68", pts)?)
    }
}

/// Deterministic face parser: paints palette-class regions (skin oval, hair
/// band, eyes, brows, nose, lips, neck) from the landmark geometry.
pub struct GeometricSegmentationStub;

impl SegmentationExtractor for GeometricSegmentationStub {
    fn id(&self) -> &str {
        "geometric-stub"
    }

    fn extract(
        &self,
        img: &ConditionImage,
        lms: &LandmarkSet,
    ) -> Result<SegmentationMap, DatasetError> {
        let (h, w) = (img.height, img.width);
        let mut seg = SegmentationMap::filled(h, w, 0);
        let pt = |i: usize| lms.points[i];
        let centroid = |r: std::ops::Range<usize>| -> [f64; 2] {
            let n = r.len() as f64;
            let mut acc = [0.0, 0.0];
            for i in r {
                acc[0] += pt(i)[0];
                acc[1] += pt(i)[1];
            }
            [acc[0] / n, acc[1] / n]
        };
        let eye_l = centroid(36..42);
        let eye_r = centroid(42..48);
        let mid = [(eye_l[0] + eye_r[0]) / 2.0, (eye_l[1] + eye_r[1]) / 2.0];
        let iod = (eye_r[0] - eye_l[0]).hypot(eye_r[1] - eye_l[1]).max(1e-6);
        let chin = pt(8);
        let mouth = centroid(48..60);
        let nose_tip = pt(30);
        let fill_ellipse = |seg: &mut SegmentationMap, c: [f64; 2], rx: f64, ry: f64, class: u8| {
            for y in 0..h {
                for x in 0..w {
                    let fx = (x as f64 + 0.5) / w as f64;
                    let fy = (y as f64 + 0.5) / h as f64;
                    let dx = (fx - c[0]) / rx;
                    let dy = (fy - c[1]) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        seg.set(y, x, class);
                    }
                }
            }
        };
        let face_c = [mid[0], (mid[1] + chin[1]) / 2.0];
        let face_ry = (chin[1] - mid[1]).abs() * 0.95 + 0.3 * iod;
        let face_rx = 1.6 * iod;
        // neck below the chin, then hair, then the face oval over it
        fill_ellipse(&mut seg, [chin[0], chin[1] + 0.25 * face_ry], face_rx * 0.5, face_ry * 0.5, 17);
        fill_ellipse(&mut seg, [face_c[0], face_c[1] - 0.55 * face_ry], face_rx * 1.15, face_ry * 1.05, 13);
        fill_ellipse(&mut seg, face_c, face_rx, face_ry, 1);
        // brows, eyes, nose, lips on top of skin
        let brow_l = centroid(17..22);
        let brow_r = centroid(22..27);
        fill_ellipse(&mut seg, brow_l, 0.45 * iod, 0.10 * iod, 6);
        fill_ellipse(&mut seg, brow_r, 0.45 * iod, 0.10 * iod, 7);
        fill_ellipse(&mut seg, eye_l, 0.30 * iod, 0.14 * iod, 4);
        fill_ellipse(&mut seg, eye_r, 0.30 * iod, 0.14 * iod, 5);
        fill_ellipse(&mut seg, [nose_tip[0], nose_tip[1] - 0.1 * iod], 0.22 * iod, 0.35 * iod, 2);
        fill_ellipse(&mut seg, [mouth[0], mouth[1] - 0.07 * iod], 0.45 * iod, 0.10 * iod, 11);
        fill_ellipse(&mut seg, [mouth[0], mouth[1] + 0.07 * iod], 0.45 * iod, 0.10 * iod, 12);
        fill_ellipse(&mut seg, mouth, 0.40 * iod, 0.06 * iod, 10);
        Ok(seg)
    }
}
