use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub enabled: bool,
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec {
            enabled: true,
            max_rotation_deg: 15.0,
            flip_prob: 0.5,
            scale_min: 0.9,
            scale_max: 1.0,
        }
    }
}

impl AugmentationSpec {
    pub fn identity() -> Self {
        AugmentationSpec {
            enabled: false,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_rotation_deg >= 0.0) {
            return Err(Error::Config("augmentation.max_rotation_deg must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config("augmentation.flip_prob must lie in [0, 1]".into()));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.5) {
            return Err(Error::Config(
                "augmentation scale range must satisfy 0 < min <= max <= 1.5".into(),
            ));
        }
        Ok(())
    }
}

/// Random rotation, horizontal flip and isotropic scaling about the image
/// centre, resampled bilinearly with zero fill. Draws are taken in a fixed
/// order (angle, flip, scale) so the stream advances identically for every
/// enabled spec.
pub fn augment(image: &Tensor, spec: &AugmentationSpec, rng: &mut RngStream) -> Tensor {
    if !spec.enabled {
        return image.clone();
    }
    let theta = rng.uniform(-spec.max_rotation_deg, spec.max_rotation_deg).to_radians();
    let flip = rng.bernoulli(spec.flip_prob);
    let scale = rng.uniform(spec.scale_min, spec.scale_max);

    let s = image.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let src = image.data();
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            // inverse map: output → source
            let (u, v) = ((x as f64 - cx) / scale, (y as f64 - cy) / scale);
            let mut su = cos * u + sin * v;
            let sv = -sin * u + cos * v;
            if flip {
                su = -su;
            }
            let (fx, fy) = (su + cx, sv + cy);
            if fx < 0.0 || fy < 0.0 || fx > (w - 1) as f64 || fy > (h - 1) as f64 {
                continue;
            }
            let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (fx - x0 as f64, fy - y0 as f64);
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] + tx * (p[y0 * w + x1] - p[y0 * w + x0]);
                let bot = p[y1 * w + x0] + tx * (p[y1 * w + x1] - p[y1 * w + x0]);
                out[(ch * h + y) * w + x] = top + ty * (bot - top);
            }
        }
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}
