//! Conversions between RGB byte images and f64 tensors.

use faceforge_tensor::Tensor;

use crate::condition::ConditionImage;

/// `[3,H,W]` tensor scaled to `[0,1]`.
pub fn image_to_unit_tensor(img: &ConditionImage) -> Tensor {
    let (h, w) = (img.height, img.width);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get(y, x);
            for c in 0..3 {
                data[(c * h + y) * w + x] = px[c] as f64 / 255.0;
            }
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// `[3,H,W]` tensor scaled to [-1,1], the diffusion model's working range.
pub fn image_to_signed_tensor(img: &ConditionImage) -> Tensor {
    let t = image_to_unit_tensor(img);
    t.map(|v| v * 2.0 - 1.0)
}

pub fn unit_tensor_to_image(t: &Tensor) -> ConditionImage {
    let s = t.shape();
    assert_eq!(s.len(), 3);
    assert_eq!(s[0], 3, "expected rgb channels first");
    let (h, w) = (s[1], s[2]);
    let mut img = ConditionImage::filled(h, w, [0, 0, 0]);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = t.data()[(c * h + y) * w + x];
                px[c] = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            img.set(y, x, px);
        }
    }
    img
}

pub fn signed_tensor_to_image(t: &Tensor) -> ConditionImage {
    unit_tensor_to_image(&t.map(|v| (v + 1.0) / 2.0))
}

/// Luma channel in `[0,255]` scale, for blur metrics.
pub fn grayscale(img: &ConditionImage) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.height * img.width);
    for y in 0..img.height {
        for x in 0..img.width {
            let [r, g, b] = img.get(y, x);
            out.push(0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64);
        }
    }
    out
}
