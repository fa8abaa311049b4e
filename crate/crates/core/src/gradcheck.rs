//! Central finite differences of the total loss, used as an independent
//! oracle for the analytic pixel gradient.
//!
//! The numeric side only calls [`EncoderBackend::encode_image`]; it never
//! touches the backend's reverse pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::{encode_prompts, EncoderBackend, ImageTensor, PromptSet, UnitEmbedding};
use crate::losses::{breakdown_for, loss_and_pixel_grad, Bounds, LossWeights};
use crate::rng::{self, Stream};
use crate::Result;

/// Central difference `(f(x + eps e_k) - f(x - eps e_k)) / 2 eps` for every
/// component `k`.
pub fn central_difference<F>(x: &ImageTensor, eps: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&ImageTensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        let orig = probe.as_slice()[k];
        probe.as_mut_slice()[k] = orig + eps;
        let plus = f(&probe)?;
        probe.as_mut_slice()[k] = orig - eps;
        let minus = f(&probe)?;
        probe.as_mut_slice()[k] = orig;
        out.push((plus - minus) / (2.0 * eps));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|)` in the L2 norm; 0 when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()).max(norm(&mut b.iter().copied()));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub images: usize,
    pub eps: f64,
    pub per_image_rel_error: Vec<f64>,
    pub max_rel_error: f64,
}

/// Random image whose components stay at least `margin` away from both
/// bounds, so central differences never straddle a pixel-guard kink.
pub fn random_check_image<R: Rng>(
    rng: &mut R,
    height: usize,
    width: usize,
    bounds: &Bounds,
    margin: f64,
) -> ImageTensor {
    let span = bounds.upper - bounds.lower;
    let lo = bounds.lower - 0.25 * span.max(0.5);
    let hi = bounds.upper + 0.25 * span.max(0.5);
    let data = (0..height * width * 3)
        .map(|_| loop {
            let v = rng.random_range(lo..hi);
            if (v - bounds.lower).abs() > margin && (v - bounds.upper).abs() > margin {
                break v;
            }
        })
        .collect();
    ImageTensor::new(height, width, data).expect("finite values")
}

/// Relative error between the analytic pixel gradient of the total loss and
/// central differences at one image.
pub fn check_image(
    backend: &dyn EncoderBackend,
    x: &ImageTensor,
    text: &[UnitEmbedding],
    bounds: &Bounds,
    weights: &LossWeights,
    eps: f64,
) -> Result<f64> {
    let (_, analytic) = loss_and_pixel_grad(backend, x, text, bounds, weights)?;
    let numeric = central_difference(x, eps, |img| {
        Ok(breakdown_for(&backend.encode_image(img)?, text, img, bounds, weights)?.total)
    })?;
    Ok(relative_error(analytic.as_slice(), &numeric))
}

/// Check `images` random images drawn from the gradient-check stream of `seed`.
pub fn run(
    backend: &dyn EncoderBackend,
    prompts: &PromptSet,
    bounds: &Bounds,
    weights: &LossWeights,
    images: usize,
    eps: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let text = encode_prompts(backend, prompts)?;
    let res = backend.descriptor().resolution;
    let mut rng = rng::stream(seed, Stream::GradCheck);
    let mut errors = Vec::with_capacity(images);
    for _ in 0..images {
        let x = random_check_image(&mut rng, res, res, bounds, 2.0 * eps);
        errors.push(check_image(backend, &x, &text, bounds, weights, eps)?);
    }
    let max_rel_error = errors.iter().cloned().fold(0.0, f64::max);
    Ok(GradCheckReport {
        images,
        eps,
        per_image_rel_error: errors,
        max_rel_error,
    })
}
