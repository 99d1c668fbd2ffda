//! Automatic evaluation metrics and human-evaluation tally aggregation.
//!
//! The Fréchet distance uses the symmetric form
//! `tr((Sa^1/2 Sb Sa^1/2)^1/2)` so only a symmetric eigensolver is needed;
//! tiny negative eigenvalues from rounding are clamped to zero. Feature
//! extraction is pluggable; desk-scale tests use a fixed random linear
//! projection so the metric pipeline needs no pretrained network.

use faceforge_tensor::rng::{derive_seed, rng_from_seed, standard_normal_vec};

use crate::condition::{ConditionImage, LandmarkSet, SegmentationMap};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("need at least 2 samples per side, got {0}")]
    TooFewSamples(usize),
    #[error("zero vector in {0}")]
    ZeroVector(String),
    #[error("zero delta on the {0} side")]
    ZeroDelta(&'static str),
    #[error("covariance not symmetric: |a[{i},{j}] - a[{j},{i}]| = {diff}")]
    NotSymmetric { i: usize, j: usize, diff: f64 },
    #[error("landmark conventions differ: {a} vs {b}")]
    ConventionMismatch { a: String, b: String },
    #[error("empty tally")]
    EmptyTally,
}

/// Gaussian fit of a feature distribution.
#[derive(Debug, Clone)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major d x d covariance.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self, MetricError> {
        let d = mean.len();
        if cov.len() != d * d {
            return Err(MetricError::DimMismatch(format!(
                "mean dim {d} vs cov len {}",
                cov.len()
            )));
        }
        if mean.iter().any(|v| !v.is_finite()) || cov.iter().any(|v| !v.is_finite()) {
            return Err(MetricError::NonFinite("gaussian stats".into()));
        }
        for i in 0..d {
            for j in (i + 1)..d {
                let diff = (cov[i * d + j] - cov[j * d + i]).abs();
                if diff > 1e-9 {
                    return Err(MetricError::NotSymmetric { i, j, diff });
                }
            }
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Unbiased (n-1) mean/covariance fit; diagonal shrinkage of 1e-6 when
    /// there are fewer samples than dimensions.
    pub fn fit(features: &[Vec<f64>]) -> Result<Self, MetricError> {
        let n = features.len();
        if n < 2 {
            return Err(MetricError::TooFewSamples(n));
        }
        let d = features[0].len();
        for f in features {
            if f.len() != d {
                return Err(MetricError::DimMismatch(format!(
                    "feature rows of length {} and {d}",
                    f.len()
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(MetricError::NonFinite("feature row".into()));
            }
        }
        let mut mean = vec![0.0; d];
        for f in features {
            for (m, v) in mean.iter_mut().zip(f) {
                *m += v;
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        let mut cov = vec![0.0; d * d];
        for f in features {
            for i in 0..d {
                let di = f[i] - mean[i];
                for j in i..d {
                    cov[i * d + j] += di * (f[j] - mean[j]);
                }
            }
        }
        let denom = (n - 1) as f64;
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] /= denom;
                cov[j * d + i] = cov[i * d + j];
            }
        }
        if n < d {
            for i in 0..d {
                cov[i * d + i] += 1e-6;
            }
        }
        Self::new(mean, cov)
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Returns eigenvalues and row-major V whose columns are eigenvectors.
fn jacobi_eigen(a: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let mut m = a.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-14 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for p in 0..d {
            for q in (p + 1)..d {
                off = off.max(m[p * d + q].abs());
            }
        }
        if off <= tol {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = m[p * d + q];
                if apq.abs() <= tol {
                    continue;
                }
                let app = m[p * d + p];
                let aqq = m[q * d + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = m[k * d + p];
                    let akq = m[k * d + q];
                    m[k * d + p] = c * akp - s * akq;
                    m[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = m[p * d + k];
                    let aqk = m[q * d + k];
                    m[p * d + k] = c * apk - s * aqk;
                    m[q * d + k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - s * vkq;
                    v[k * d + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig = (0..d).map(|i| m[i * d + i]).collect();
    (eig, v)
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// from rounding are clamped to zero.
fn psd_sqrt(a: &[f64], d: usize) -> Vec<f64> {
    let (eig, v) = jacobi_eigen(a, d);
    let roots: Vec<f64> = eig.iter().map(|&l| l.max(0.0).sqrt()).collect();
    // V diag(roots) V^T
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut acc = 0.0;
            for k in 0..d {
                acc += v[i * d + k] * roots[k] * v[j * d + k];
            }
            out[i * d + j] = acc;
        }
    }
    out
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Fréchet distance between two Gaussians:
/// `||mu_a - mu_b||^2 + tr(Sa + Sb - 2 (Sa Sb)^1/2)`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64, MetricError> {
    let d = a.dim();
    if b.dim() != d {
        return Err(MetricError::DimMismatch(format!("{} vs {}", d, b.dim())));
    }
    let mean_term: f64 = a
        .mean
        .iter()
        .zip(&b.mean)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let tr_a: f64 = (0..d).map(|i| a.cov[i * d + i]).sum();
    let tr_b: f64 = (0..d).map(|i| b.cov[i * d + i]).sum();
    // tr((Sa Sb)^1/2) = tr((Sa^1/2 Sb Sa^1/2)^1/2), which is symmetric PSD
    let sqrt_a = psd_sqrt(&a.cov, d);
    let inner = matmul_sq(&matmul_sq(&sqrt_a, &b.cov, d), &sqrt_a, d);
    // symmetrize rounding drift before the eigensolve
    let mut sym = inner.clone();
    for i in 0..d {
        for j in 0..d {
            sym[i * d + j] = 0.5 * (inner[i * d + j] + inner[j * d + i]);
        }
    }
    let (eig, _) = jacobi_eigen(&sym, d);
    let tr_sqrt: f64 = eig.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let value = mean_term + tr_a + tr_b - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// Fit Gaussians to both feature sets and take their Fréchet distance.
pub fn fid(features_a: &[Vec<f64>], features_b: &[Vec<f64>]) -> Result<f64, MetricError> {
    let a = GaussianStats::fit(features_a)?;
    let b = GaussianStats::fit(features_b)?;
    frechet_distance(&a, &b)
}

/// Cosine similarity of L2-normalized embeddings, in [-1, 1].
pub fn clip_score(image_emb: &[f64], text_emb: &[f64]) -> Result<f64, MetricError> {
    if image_emb.len() != text_emb.len() {
        return Err(MetricError::DimMismatch(format!(
            "{} vs {}",
            image_emb.len(),
            text_emb.len()
        )));
    }
    let na = norm(image_emb);
    let nb = norm(text_emb);
    if na == 0.0 {
        return Err(MetricError::ZeroVector("image embedding".into()));
    }
    if nb == 0.0 {
        return Err(MetricError::ZeroVector("text embedding".into()));
    }
    let dot: f64 = image_emb.iter().zip(text_emb).map(|(a, b)| a * b).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between the image-embedding delta and the caption-embedding delta
/// of an edit.
pub fn directional_similarity(
    img0: &[f64],
    img1: &[f64],
    txt0: &[f64],
    txt1: &[f64],
) -> Result<f64, MetricError> {
    let di: Vec<f64> = img1.iter().zip(img0).map(|(a, b)| a - b).collect();
    let dt: Vec<f64> = txt1.iter().zip(txt0).map(|(a, b)| a - b).collect();
    if norm(&di) == 0.0 {
        return Err(MetricError::ZeroDelta("image"));
    }
    if norm(&dt) == 0.0 {
        return Err(MetricError::ZeroDelta("text"));
    }
    clip_score(&di, &dt)
}

/// Pixel-accuracy of a predicted segmentation against ground truth.
pub fn seg_consistency(pred: &SegmentationMap, gt: &SegmentationMap) -> Result<f64, MetricError> {
    if pred.height != gt.height || pred.width != gt.width {
        return Err(MetricError::DimMismatch(format!(
            "{}x{} vs {}x{}",
            pred.height, pred.width, gt.height, gt.width
        )));
    }
    let equal = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(a, b)| a == b)
        .count();
    Ok(equal as f64 / pred.labels().len() as f64)
}

/// Mean Euclidean distance between corresponding landmarks (normalized
/// coordinates); lower is better.
pub fn landmark_consistency(pred: &LandmarkSet, gt: &LandmarkSet) -> Result<f64, MetricError> {
    if pred.convention != gt.convention {
        return Err(MetricError::ConventionMismatch {
            a: pred.convention.clone(),
            b: gt.convention.clone(),
        });
    }
    let total: f64 = pred
        .points
        .iter()
        .zip(&gt.points)
        .map(|(p, q)| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
        .sum();
    Ok(total / pred.points.len() as f64)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

// ---------------------------------------------------------------------------
// human evaluation tally
// ---------------------------------------------------------------------------

/// Per-method preference counts from human raters.
#[derive(Debug, Clone, Default)]
pub struct TallySheet {
    pub counts: Vec<(String, u64)>,
}

impl TallySheet {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|(_, c)| c).sum()
    }
}

/// Preference percentages per method; they sum to 100 up to rounding.
pub fn tally(sheet: &TallySheet) -> Result<Vec<(String, f64)>, MetricError> {
    let total = sheet.total();
    if total == 0 {
        return Err(MetricError::EmptyTally);
    }
    Ok(sheet
        .counts
        .iter()
        .map(|(m, c)| (m.clone(), 100.0 * *c as f64 / total as f64))
        .collect())
}

// ---------------------------------------------------------------------------
// pluggable feature extraction
// ---------------------------------------------------------------------------

/// Image-to-feature backend used by the FID and CLIP-score pipelines.
pub trait ImageFeatureExtractor: Send + Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn features(&self, img: &ConditionImage) -> Vec<f64>;
}

/// Fixed seeded Gaussian projection of unit-scaled pixels. Model-free, so
/// metric plumbing is testable without any pretrained network.
pub struct RandomProjectionExtractor {
    pub seed: u64,
    pub out_dim: usize,
}

impl RandomProjectionExtractor {
    pub fn new(seed: u64, out_dim: usize) -> Self {
        Self { seed, out_dim }
    }
}

impl ImageFeatureExtractor for RandomProjectionExtractor {
    fn id(&self) -> &str {
        "random-projection"
    }

    fn dim(&self) -> usize {
        self.out_dim
    }

    fn features(&self, img: &ConditionImage) -> Vec<f64> {
        let in_dim = img.height * img.width * 3;
        let mut rng = rng_from_seed(derive_seed(self.seed, &format!("proj{in_dim}")));
        let scale = 1.0 / (in_dim as f64).sqrt();
        let mut out = vec![0.0; self.out_dim];
        for o in out.iter_mut() {
            let row = standard_normal_vec(&mut rng, in_dim);
            let mut acc = 0.0;
            for (w, &px) in row.iter().zip(img.pixels()) {
                acc += w * (px as f64 / 255.0);
            }
            *o = acc * scale;
        }
        out
    }
}

// ---------------------------------------------------------------------------
// report emitter
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct MetricRow {
    pub method: String,
    pub fid: Option<f64>,
    pub text: Option<f64>,
    pub mask: Option<f64>,
    pub human: Option<f64>,
}

impl MetricRow {
    pub fn new(method: &str) -> Self {
        Self {
            method: method.to_string(),
            fid: None,
            text: None,
            mask: None,
            human: None,
        }
    }
}

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.2}"),
        None => "-".to_string(),
    }
}

/// Fixed-width table with the generation-results column layout.
pub fn render_table(rows: &[MetricRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<18} {:>8} {:>8} {:>8} {:>8}\n",
        "Method", "FID v", "Text ^", "Mask ^", "Human ^"
    ));
    for r in rows {
        out.push_str(&format!(
            "{:<18} {:>8} {:>8} {:>8} {:>8}\n",
            r.method,
            fmt_cell(r.fid),
            fmt_cell(r.text),
            fmt_cell(r.mask),
            fmt_cell(r.human)
        ));
    }
    out
}

pub fn render_csv(rows: &[MetricRow]) -> String {
    let mut out = String::from("method,fid,text,mask,human\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.method,
            fmt_cell(r.fid),
            fmt_cell(r.text),
            fmt_cell(r.mask),
            fmt_cell(r.human)
        ));
    }
    out
}

/// Published reference rows, kept as fixtures for report formatting only.
/// They are never test targets: reproducing them needs full-scale training.
pub mod fixtures {
    use super::MetricRow;

    pub fn generation_reference() -> Vec<MetricRow> {
        let mut rows = Vec::new();
        for (m, fid, text, mask, human) in [
            ("TediGAN", 58.49, None, Some(0.90), Some(19.02)),
            ("CollabDiff", 38.20, Some(24.80), Some(0.90), Some(23.64)),
            ("Ours", 30.16, Some(27.86), Some(0.93), Some(57.34)),
            ("SD-v1.5", 67.29, Some(26.82), None, Some(8.22)),
            ("GCDP", 53.45, Some(27.15), None, Some(10.32)),
            ("Ours (Mask)", 39.14, Some(27.28), None, Some(23.93)),
            ("Ours (Landmark)", 36.31, Some(27.65), None, Some(57.53)),
        ] {
            rows.push(MetricRow {
                method: m.to_string(),
                fid: Some(fid),
                text,
                mask,
                human,
            });
        }
        rows
    }

    pub fn editing_reference() -> Vec<MetricRow> {
        vec![
            MetricRow {
                method: "CollabDiff".into(),
                fid: None,
                text: Some(0.04),
                mask: Some(0.91),
                human: Some(19.80),
            },
            MetricRow {
                method: "Ours (Mask)".into(),
                fid: None,
                text: Some(0.09),
                mask: Some(0.94),
                human: Some(80.20),
            },
            MetricRow {
                method: "Ours (Landmark)".into(),
                fid: None,
                text: Some(0.10),
                mask: Some(0.87),
                human: None,
            },
        ]
    }

    pub fn multilingual_reference() -> Vec<MetricRow> {
        let rows = [
            ("English", 30.16, 27.86, 0.93),
            ("Spanish", 30.51, 27.31, 0.93),
            ("French", 33.66, 27.26, 0.93),
            ("Italian", 32.93, 27.35, 0.93),
            ("German", 31.77, 27.15, 0.93),
        ];
        rows.iter()
            .map(|(m, fid, text, mask)| MetricRow {
                method: m.to_string(),
                fid: Some(*fid),
                text: Some(*text),
                mask: Some(*mask),
                human: None,
            })
            .collect()
    }
}
