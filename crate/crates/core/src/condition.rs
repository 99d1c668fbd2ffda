//! Condition modalities and their rendered forms.
//!
//! Two modalities drive generation: per-pixel segmentation maps and ordered
//! facial landmark sets. Both render into an RGB [`ConditionImage`] before
//! entering the control branch. The default palette keeps left/right class
//! colors identical so horizontal flips are valid data augmentation, and
//! [`condition_to_seg`] snaps arbitrary RGB back onto the palette, repairing
//! invalid colors a generator may produce.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

const DEFAULT_PALETTE_JSON: &str = include_str!("../data/default_palette.json");
const CONVENTIONS_JSON: &str = include_str!("../data/landmark_conventions.json");

#[derive(Debug, thiserror::Error)]
pub enum ConditionError {
    #[error("invalid palette: {0}")]
    InvalidPalette(String),
    #[error("label {label} at pixel ({x},{y}) out of range for {classes} classes")]
    LabelOutOfRange {
        label: u8,
        x: usize,
        y: usize,
        classes: usize,
    },
    #[error("unknown landmark convention `{0}`")]
    UnknownConvention(String),
    #[error("convention {convention} wants {expected} points, got {got}")]
    WrongPointCount {
        convention: String,
        expected: usize,
        got: usize,
    },
    #[error("point {index} = ({x}, {y}) outside [0,1] or not finite")]
    BadCoordinate { index: usize, x: f64, y: f64 },
    #[error("render size {size} too small for radius {radius}")]
    RenderSizeTooSmall { size: usize, radius: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("replacement pool empty with replace probability {0}")]
    EmptyReplacementPool(f64),
    #[error("image io: {0}")]
    Image(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// palette
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PaletteClass {
    pub id: u8,
    pub name: String,
    pub rgb: [u8; 3],
    pub mirror_of: Option<u8>,
}

/// Ordered class palette with left/right mirror pairs sharing one color.
#[derive(Debug, Clone)]
pub struct SegmentationPalette {
    classes: Vec<PaletteClass>,
}

impl SegmentationPalette {
    pub fn new(classes: Vec<PaletteClass>) -> Result<Self, ConditionError> {
        let c = classes.len();
        if c == 0 || c > 256 {
            return Err(ConditionError::InvalidPalette(format!(
                "need 1..=256 classes, got {c}"
            )));
        }
        for (i, cls) in classes.iter().enumerate() {
            if cls.id as usize != i {
                return Err(ConditionError::InvalidPalette(format!(
                    "class ids must be contiguous from 0; slot {i} holds id {}",
                    cls.id
                )));
            }
        }
        // Mirror pairs must reference an earlier unpaired class and share its color.
        for cls in &classes {
            if let Some(m) = cls.mirror_of {
                if m >= cls.id {
                    return Err(ConditionError::InvalidPalette(format!(
                        "mirror_of {m} must point at a lower id than {}",
                        cls.id
                    )));
                }
                let target = &classes[m as usize];
                if target.mirror_of.is_some() {
                    return Err(ConditionError::InvalidPalette(format!(
                        "class {} mirrors {} which is itself a mirror",
                        cls.id, m
                    )));
                }
                if target.rgb != cls.rgb {
                    return Err(ConditionError::InvalidPalette(format!(
                        "mirror pair ({m}, {}) colors differ: {:?} vs {:?}",
                        cls.id, target.rgb, cls.rgb
                    )));
                }
            }
        }
        // One color per mirror group, all groups pairwise distinct.
        let mut seen: BTreeMap<[u8; 3], u8> = BTreeMap::new();
        for cls in &classes {
            match cls.mirror_of {
                Some(m) => {
                    if seen.get(&cls.rgb) != Some(&m) {
                        return Err(ConditionError::InvalidPalette(format!(
                            "mirror class {} reuses color {:?} of an unrelated class",
                            cls.id, cls.rgb
                        )));
                    }
                }
                None => {
                    if seen.contains_key(&cls.rgb) {
                        return Err(ConditionError::InvalidPalette(format!(
                            "color {:?} assigned to two unpaired classes",
                            cls.rgb
                        )));
                    }
                    seen.insert(cls.rgb, cls.id);
                }
            }
        }
        Ok(Self { classes })
    }

    pub fn from_json(json: &str) -> Result<Self, ConditionError> {
        let classes: Vec<PaletteClass> = serde_json::from_str(json)?;
        Self::new(classes)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConditionError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConditionError::InvalidPalette(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The 19-class face palette with eye/brow/ear pairs mirror-merged.
    pub fn default_face() -> Self {
        Self::from_json(DEFAULT_PALETTE_JSON).expect("embedded palette is valid")
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[PaletteClass] {
        &self.classes
    }

    pub fn rgb(&self, id: u8) -> [u8; 3] {
        self.classes[id as usize].rgb
    }

    pub fn mirror_pairs(&self) -> Vec<(u8, u8)> {
        self.classes
            .iter()
            .filter_map(|c| c.mirror_of.map(|m| (m, c.id)))
            .collect()
    }

    /// Distinct colors in the palette (mirror pairs count once).
    pub fn distinct_colors(&self) -> usize {
        self.classes
            .iter()
            .filter(|c| c.mirror_of.is_none())
            .count()
    }

    /// Class whose color is nearest in RGB space; ties go to the lowest id,
    /// so mirror-paired classes resolve to the lower member.
    pub fn nearest_class(&self, rgb: [u8; 3]) -> u8 {
        let mut best = 0u8;
        let mut best_d = u32::MAX;
        for cls in &self.classes {
            let d = color_dist2(cls.rgb, rgb);
            if d < best_d {
                best_d = d;
                best = cls.id;
            }
        }
        best
    }
}

fn color_dist2(a: [u8; 3], b: [u8; 3]) -> u32 {
    let mut acc = 0u32;
    for i in 0..3 {
        let d = a[i] as i32 - b[i] as i32;
        acc += (d * d) as u32;
    }
    acc
}

// ---------------------------------------------------------------------------
// segmentation map
// ---------------------------------------------------------------------------

/// H x W grid of class ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationMap {
    pub height: usize,
    pub width: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self, ConditionError> {
        if labels.len() != height * width {
            return Err(ConditionError::DimensionMismatch(format!(
                "{height}x{width} map needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn validate_for(&self, palette: &SegmentationPalette) -> Result<(), ConditionError> {
        let c = palette.num_classes();
        for y in 0..self.height {
            for x in 0..self.width {
                let label = self.get(y, x);
                if label as usize >= c {
                    return Err(ConditionError::LabelOutOfRange {
                        label,
                        x,
                        y,
                        classes: c,
                    });
                }
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// landmarks
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Deserialize)]
struct ConventionSpec {
    points: usize,
    mirror: Vec<usize>,
}

fn conventions() -> &'static BTreeMap<String, ConventionSpec> {
    use std::sync::OnceLock;
    static CONVENTIONS: OnceLock<BTreeMap<String, ConventionSpec>> = OnceLock::new();
    CONVENTIONS.get_or_init(|| {
        serde_json::from_str(CONVENTIONS_JSON).expect("embedded conventions are valid")
    })
}

pub const DEFAULT_CONVENTION: &str = "dlib68";

/// Ordered 2-d keypoints in normalized `[0,1]` coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub convention: String,
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(convention: &str, points: Vec<[f64; 2]>) -> Result<Self, ConditionError> {
        let spec = conventions()
            .get(convention)
            .ok_or_else(|| ConditionError::UnknownConvention(convention.to_string()))?;
        if points.len() != spec.points {
            return Err(ConditionError::WrongPointCount {
                convention: convention.to_string(),
                expected: spec.points,
                got: points.len(),
            });
        }
        for (index, p) in points.iter().enumerate() {
            let ok = p.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v));
            if !ok {
                return Err(ConditionError::BadCoordinate {
                    index,
                    x: p[0],
                    y: p[1],
                });
            }
        }
        Ok(Self {
            convention: convention.to_string(),
            points,
        })
    }

    pub fn from_json(json: &str) -> Result<Self, ConditionError> {
        #[derive(Deserialize)]
        struct Wire {
            convention: String,
            points: Vec<[f64; 2]>,
        }
        let w: Wire = serde_json::from_str(json)?;
        Self::new(&w.convention, w.points)
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({"convention": self.convention, "points": self.points}).to_string()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

// ---------------------------------------------------------------------------
// condition image
// ---------------------------------------------------------------------------

/// H x W x 3 RGB image, the common rendered form of both modalities.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConditionImage {
    pub height: usize,
    pub width: usize,
    pixels: Vec<u8>,
}

impl ConditionImage {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self, ConditionError> {
        if pixels.len() != height * width * 3 {
            return Err(ConditionError::DimensionMismatch(format!(
                "{height}x{width} rgb image needs {} bytes, got {}",
                height * width * 3,
                pixels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let mut pixels = Vec::with_capacity(height * width * 3);
        for _ in 0..height * width {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            height,
            width,
            pixels,
        }
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn get(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set(&mut self, y: usize, x: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mirrored_horizontal(&self) -> ConditionImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set(y, x, self.get(y, self.width - 1 - x));
            }
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ConditionError> {
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.pixels.clone())
            .expect("buffer length checked at construction");
        img.save(path)
            .map_err(|e| ConditionError::Image(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self, ConditionError> {
        let img = image::open(path)
            .map_err(|e| ConditionError::Image(format!("{}: {e}", path.display())))?
            .into_rgb8();
        Self::new(img.height() as usize, img.width() as usize, img.into_raw())
    }
}

// ---------------------------------------------------------------------------
// operations
// ---------------------------------------------------------------------------

/// Render a segmentation map with the palette colors.
pub fn seg_to_condition(
    seg: &SegmentationMap,
    palette: &SegmentationPalette,
) -> Result<ConditionImage, ConditionError> {
    seg.validate_for(palette)?;
    let mut pixels = Vec::with_capacity(seg.height * seg.width * 3);
    for &label in seg.labels() {
        pixels.extend_from_slice(&palette.rgb(label));
    }
    ConditionImage::new(seg.height, seg.width, pixels)
}

/// Snap every pixel to the nearest palette class. Total: arbitrary RGB input
/// is accepted, which is how out-of-palette generator colors get repaired.
pub fn condition_to_seg(img: &ConditionImage, palette: &SegmentationPalette) -> SegmentationMap {
    let mut labels = Vec::with_capacity(img.height * img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            labels.push(palette.nearest_class(img.get(y, x)));
        }
    }
    SegmentationMap {
        height: img.height,
        width: img.width,
        labels,
    }
}

/// How landmark points are drawn.
#[derive(Debug, Clone, Copy)]
pub struct RenderStyle {
    pub radius: usize,
}

impl Default for RenderStyle {
    fn default() -> Self {
        Self { radius: 2 }
    }
}

/// Draw each landmark as a filled white disc on black.
///
/// A point lands in the pixel whose cell contains it: `floor(x * size)`
/// clamped to the grid. Disc membership is `dx^2 + dy^2 <= radius^2`.
pub fn rasterize_landmarks(
    lms: &LandmarkSet,
    size: usize,
    style: &RenderStyle,
) -> Result<ConditionImage, ConditionError> {
    if size < 2 * style.radius {
        return Err(ConditionError::RenderSizeTooSmall {
            size,
            radius: style.radius,
        });
    }
    let mut img = ConditionImage::filled(size, size, [0, 0, 0]);
    let r = style.radius as isize;
    for p in &lms.points {
        let cx = ((p[0] * size as f64).floor() as isize).clamp(0, size as isize - 1);
        let cy = ((p[1] * size as f64).floor() as isize).clamp(0, size as isize - 1);
        for dy in -r..=r {
            for dx in -r..=r {
                if dx * dx + dy * dy > r * r {
                    continue;
                }
                let (x, y) = (cx + dx, cy + dy);
                if x >= 0 && y >= 0 && x < size as isize && y < size as isize {
                    img.set(y as usize, x as usize, [255, 255, 255]);
                }
            }
        }
    }
    Ok(img)
}

/// Mirror a segmentation map about the vertical axis.
///
/// Labels keep their class ids; mirror pairs sharing a color means the
/// rendering of the flipped map equals the flipped rendering.
pub fn hflip_seg(seg: &SegmentationMap) -> SegmentationMap {
    let mut out = seg.clone();
    for y in 0..seg.height {
        for x in 0..seg.width {
            out.set(y, x, seg.get(y, seg.width - 1 - x));
        }
    }
    out
}

/// Mirror landmarks: x -> 1-x and indices permuted by the convention's
/// mirror table (left eye points become right eye points and vice versa).
pub fn hflip_landmarks(lms: &LandmarkSet) -> Result<LandmarkSet, ConditionError> {
    let spec = conventions()
        .get(&lms.convention)
        .ok_or_else(|| ConditionError::UnknownConvention(lms.convention.clone()))?;
    let mut points = vec![[0.0, 0.0]; lms.points.len()];
    for (i, p) in lms.points.iter().enumerate() {
        points[spec.mirror[i]] = [1.0 - p[0], p[1]];
    }
    Ok(LandmarkSet {
        convention: lms.convention.clone(),
        points,
    })
}

// ---------------------------------------------------------------------------
// jitter
// ---------------------------------------------------------------------------

/// Condition-image training augmentation.
///
/// Ranges are (lo, hi) with identity at brightness 1, contrast 1 and hue
/// shift 0. `color_replace_prob` triggers an exact-color substitution per
/// source color, drawn from `replacement_colors`.
#[derive(Debug, Clone)]
pub struct JitterParams {
    pub brightness: (f64, f64),
    pub contrast: (f64, f64),
    pub hue_shift_deg: (f64, f64),
    pub color_replace_prob: f64,
    pub source_colors: Vec<[u8; 3]>,
    pub replacement_colors: Vec<[u8; 3]>,
}

impl Default for JitterParams {
    fn default() -> Self {
        Self {
            brightness: (1.0, 1.0),
            contrast: (1.0, 1.0),
            hue_shift_deg: (0.0, 0.0),
            color_replace_prob: 0.0,
            source_colors: Vec::new(),
            replacement_colors: Vec::new(),
        }
    }
}

impl JitterParams {
    /// The augmentation recipe used for control-branch training.
    pub fn training_default(palette: &SegmentationPalette) -> Self {
        Self {
            brightness: (0.9, 1.1),
            contrast: (0.9, 1.1),
            hue_shift_deg: (-15.0, 15.0),
            color_replace_prob: 0.1,
            source_colors: palette.classes().iter().map(|c| c.rgb).collect(),
            replacement_colors: vec![
                [250, 120, 40],
                [40, 250, 120],
                [120, 40, 250],
                [230, 230, 230],
            ],
        }
    }
}

/// Deterministically jitter a condition image.
///
/// Draw order is fixed: one uniform per source color (replacement trigger),
/// one pool index per triggered color, then brightness, contrast and hue.
/// Identity parameters return the input bytes unchanged.
pub fn jitter_condition(
    img: &ConditionImage,
    params: &JitterParams,
    seed: u64,
) -> Result<ConditionImage, ConditionError> {
    use rand::Rng;
    if params.color_replace_prob > 0.0 && params.replacement_colors.is_empty() {
        return Err(ConditionError::EmptyReplacementPool(params.color_replace_prob));
    }
    let mut rng = faceforge_tensor::rng::rng_from_seed(seed);
    let mut swaps: BTreeMap<[u8; 3], [u8; 3]> = BTreeMap::new();
    for &src in &params.source_colors {
        let u: f64 = rng.gen();
        if u < params.color_replace_prob {
            let idx = rng.gen_range(0..params.replacement_colors.len());
            swaps.insert(src, params.replacement_colors[idx]);
        }
    }
    let draw = |rng: &mut faceforge_tensor::rng::SeededRng, (lo, hi): (f64, f64)| -> f64 {
        let u: f64 = rng.gen();
        lo + (hi - lo) * u
    };
    let brightness = draw(&mut rng, params.brightness);
    let contrast = draw(&mut rng, params.contrast);
    let hue = draw(&mut rng, params.hue_shift_deg);

    let mut out = img.clone();
    if !swaps.is_empty() {
        for y in 0..out.height {
            for x in 0..out.width {
                if let Some(&rep) = swaps.get(&out.get(y, x)) {
                    out.set(y, x, rep);
                }
            }
        }
    }
    let identity_tone = brightness == 1.0 && contrast == 1.0 && hue == 0.0;
    if !identity_tone {
        for y in 0..out.height {
            for x in 0..out.width {
                let px = out.get(y, x);
                let mut rgb = [
                    px[0] as f64 / 255.0,
                    px[1] as f64 / 255.0,
                    px[2] as f64 / 255.0,
                ];
                if hue != 0.0 {
                    rgb = shift_hue(rgb, hue);
                }
                for v in &mut rgb {
                    *v = ((*v - 0.5) * contrast + 0.5) * brightness;
                }
                out.set(
                    y,
                    x,
                    [
                        (rgb[0] * 255.0).round().clamp(0.0, 255.0) as u8,
                        (rgb[1] * 255.0).round().clamp(0.0, 255.0) as u8,
                        (rgb[2] * 255.0).round().clamp(0.0, 255.0) as u8,
                    ],
                );
            }
        }
    }
    Ok(out)
}

fn shift_hue(rgb: [f64; 3], degrees: f64) -> [f64; 3] {
    let (h, s, v) = rgb_to_hsv(rgb);
    let h = (h + degrees).rem_euclid(360.0);
    hsv_to_rgb(h, s, v)
}

fn rgb_to_hsv([r, g, b]: [f64; 3]) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        60.0 * (((g - b) / delta).rem_euclid(6.0))
    } else if max == g {
        60.0 * ((b - r) / delta + 2.0)
    } else {
        60.0 * ((r - g) / delta + 4.0)
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0).rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h {
        h if h < 60.0 => (c, x, 0.0),
        h if h < 120.0 => (x, c, 0.0),
        h if h < 180.0 => (0.0, c, x),
        h if h < 240.0 => (0.0, x, c),
        h if h < 300.0 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}
