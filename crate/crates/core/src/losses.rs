//! Alignment, variance and pixel-guard losses, their weighted total and
//! analytic gradients.
//!
//! With `s_i = <g_hat, f_hat_i>` the total objective is
//!
//! ```text
//! L = -mean(s_i) + alpha * popvar(s_i) + beta * mean(relu(x - upper) + relu(lower - x))
//! ```
//!
//! and its pixel gradient is assembled in [`loss_and_pixel_grad`] from the
//! embedding-space gradient pulled back through the backend.

use serde::{Deserialize, Serialize};

use crate::embedding::{clip_score, dot, normalize, Embedding, EncoderBackend, ImageTensor, UnitEmbedding};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the variance loss.
    pub alpha: f64,
    /// Weight on the pixel-guard loss.
    pub beta: f64,
}

impl LossWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        let w = Self { alpha, beta };
        let errs = w.validate();
        if errs.is_empty() {
            Ok(w)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            errs.push(format!("alpha must be finite and >= 0, got {}", self.alpha));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            errs.push(format!("beta must be finite and >= 0, got {}", self.beta));
        }
        errs
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 10.0 }
    }
}

/// Soft pixel box `[lower, upper]` in model space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lower: f64,
    pub upper: f64,
}

impl Bounds {
    pub fn new(lower: f64, upper: f64) -> Result<Self> {
        let b = Self { lower, upper };
        let errs = b.validate();
        if errs.is_empty() {
            Ok(b)
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn validate(&self) -> Vec<String> {
        if !(self.lower.is_finite() && self.upper.is_finite()) {
            vec![format!("bounds must be finite, got [{}, {}]", self.lower, self.upper)]
        } else if self.lower > self.upper {
            vec![format!("bounds lower {} exceeds upper {}", self.lower, self.upper)]
        } else {
            Vec::new()
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        (self.lower..=self.upper).contains(&v)
    }

    /// Distance of `v` outside the box, 0 inside.
    pub fn excess(&self, v: f64) -> f64 {
        (v - self.upper).max(0.0) + (self.lower - v).max(0.0)
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Self { lower: 0.0, upper: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub var: f64,
    pub pixel: f64,
    pub total: f64,
    pub per_prompt_sims: Vec<f64>,
}

impl LossBreakdown {
    /// Assemble a breakdown; `total` is always `align + alpha*var + beta*pixel`.
    pub fn combine(align: f64, var: f64, pixel: f64, w: &LossWeights, sims: Vec<f64>) -> Self {
        Self {
            align,
            var,
            pixel,
            total: align + w.alpha * var + w.beta * pixel,
            per_prompt_sims: sims,
        }
    }

    pub fn mean_sim(&self) -> f64 {
        mean(&self.per_prompt_sims)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn check_dims(reference: usize, others: impl IntoIterator<Item = usize>) -> Result<()> {
    for d in others {
        if d != reference {
            return Err(Error::ShapeMismatch {
                expected: format!("dim {reference}"),
                got: format!("dim {d}"),
            });
        }
    }
    Ok(())
}

/// `-(1/N) sum_i cos(g, f_i)`.
pub fn alignment_loss(g: &Embedding, text_embs: &[Embedding]) -> Result<f64> {
    if text_embs.is_empty() {
        return Err(Error::InvalidInput("alignment loss needs at least one prompt".into()));
    }
    check_dims(g.dim(), text_embs.iter().map(Embedding::dim))?;
    let g_hat = normalize(g)?;
    let sims = text_embs
        .iter()
        .map(|f| clip_score(&g_hat, &normalize(f)?))
        .collect::<Result<Vec<_>>>()?;
    Ok(-mean(&sims))
}

/// Population variance (divides by N). Exactly 0 when all sims are equal;
/// an empty list also yields 0.
pub fn variance_loss(sims: &[f64]) -> f64 {
    let Some(&first) = sims.first() else {
        return 0.0;
    };
    if sims.iter().all(|&s| s == first) {
        return 0.0;
    }
    let m = mean(sims);
    sims.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / sims.len() as f64
}

/// Mean over every `H*W*3` component of `relu(x - upper) + relu(lower - x)`.
pub fn pixel_guard_loss(x: &ImageTensor, b: &Bounds) -> f64 {
    x.as_slice().iter().map(|&v| b.excess(v)).sum::<f64>() / x.len() as f64
}

/// Subgradient of [`pixel_guard_loss`]: `+1/n` above the box, `-1/n` below,
/// 0 inside and on the bounds themselves.
pub fn pixel_guard_grad(x: &ImageTensor, b: &Bounds) -> ImageTensor {
    let inv_n = 1.0 / x.len() as f64;
    let data = x
        .as_slice()
        .iter()
        .map(|&v| {
            if v > b.upper {
                inv_n
            } else if v < b.lower {
                -inv_n
            } else {
                0.0
            }
        })
        .collect();
    ImageTensor::new(x.height(), x.width(), data).expect("same shape as input")
}

/// Loss breakdown from raw embeddings.
pub fn total_loss(
    g: &Embedding,
    text_embs: &[Embedding],
    x: &ImageTensor,
    b: &Bounds,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let text: Vec<UnitEmbedding> = text_embs.iter().map(normalize).collect::<Result<_>>()?;
    breakdown_for(g, &text, x, b, w)
}

/// Loss breakdown when the text side is already normalized.
pub fn breakdown_for(
    g: &Embedding,
    text: &[UnitEmbedding],
    x: &ImageTensor,
    b: &Bounds,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if text.is_empty() {
        return Err(Error::InvalidInput("loss needs at least one prompt".into()));
    }
    check_dims(g.dim(), text.iter().map(UnitEmbedding::dim))?;
    let g_hat = normalize(g)?;
    let sims = text.iter().map(|f| clip_score(&g_hat, f)).collect::<Result<Vec<_>>>()?;
    Ok(LossBreakdown::combine(
        -mean(&sims),
        variance_loss(&sims),
        pixel_guard_loss(x, b),
        w,
        sims,
    ))
}

/// Riemannian gradient of `-<g_hat, f_bar>` on the unit sphere:
/// `-f_bar + <g_hat, f_bar> g_hat`, orthogonal to `g_hat`.
pub fn alignment_grad_tangent(g_hat: &UnitEmbedding, f_bar: &Embedding) -> Result<Embedding> {
    check_dims(g_hat.dim(), [f_bar.dim()])?;
    let g = g_hat.as_slice();
    let f = f_bar.as_slice();
    let proj = dot(g, f);
    Embedding::new(g.iter().zip(f).map(|(gi, fi)| -fi + proj * gi).collect())
}

/// `(2/N) sum_i (s_i - s_bar) grad s_i`.
pub fn variance_grad(sims: &[f64], sim_grads: &[Embedding]) -> Result<Embedding> {
    if sims.len() != sim_grads.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} similarity gradients", sims.len()),
            got: format!("{}", sim_grads.len()),
        });
    }
    let Some(first) = sim_grads.first() else {
        return Err(Error::InvalidInput(
            "variance gradient needs at least one prompt".into(),
        ));
    };
    check_dims(first.dim(), sim_grads.iter().map(Embedding::dim))?;
    let n = sims.len() as f64;
    let s_bar = mean(sims);
    let mut out = vec![0.0; first.dim()];
    for (s, grad) in sims.iter().zip(sim_grads) {
        let coef = 2.0 / n * (s - s_bar);
        for (o, gv) in out.iter_mut().zip(grad.as_slice()) {
            *o += coef * gv;
        }
    }
    Embedding::new(out)
}

/// Gradient of the alignment and variance terms with respect to the raw
/// image embedding `g`, plus the per-prompt sims at `g`.
pub fn embedding_grad(g: &Embedding, text: &[UnitEmbedding], w: &LossWeights) -> Result<(Vec<f64>, Embedding)> {
    check_dims(g.dim(), text.iter().map(UnitEmbedding::dim))?;
    let norm = g.norm();
    let g_hat = normalize(g)?;
    let sims = text.iter().map(|f| clip_score(&g_hat, f)).collect::<Result<Vec<_>>>()?;

    let n = text.len() as f64;
    let mut f_bar = vec![0.0; g.dim()];
    for f in text {
        for (a, b) in f_bar.iter_mut().zip(f.as_slice()) {
            *a += b / n;
        }
    }
    let tangent = alignment_grad_tangent(&g_hat, &Embedding::new(f_bar)?)?;

    // d s_i / d g = (f_hat_i - s_i g_hat) / |g|
    let sim_grads = text
        .iter()
        .zip(&sims)
        .map(|(f, s)| {
            Embedding::new(
                f.as_slice()
                    .iter()
                    .zip(g_hat.as_slice())
                    .map(|(fi, gi)| (fi - s * gi) / norm)
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let var = variance_grad(&sims, &sim_grads)?;

    let grad = tangent
        .as_slice()
        .iter()
        .zip(var.as_slice())
        .map(|(t, v)| t / norm + w.alpha * v)
        .collect();
    Ok((sims, Embedding::new(grad)?))
}

/// Loss breakdown and full pixel gradient of the weighted total at `x`.
pub fn loss_and_pixel_grad(
    backend: &dyn EncoderBackend,
    x: &ImageTensor,
    text: &[UnitEmbedding],
    b: &Bounds,
    w: &LossWeights,
) -> Result<(LossBreakdown, ImageTensor)> {
    let g = backend.encode_image(x)?;
    let (sims, grad_g) = embedding_grad(&g, text, w)?;
    let (_, mut grad) = backend.image_vjp(x, grad_g.as_slice())?;
    let guard = pixel_guard_grad(x, b);
    for (p, q) in grad.as_mut_slice().iter_mut().zip(guard.as_slice()) {
        *p += w.beta * q;
    }
    let breakdown = LossBreakdown::combine(-mean(&sims), variance_loss(&sims), pixel_guard_loss(x, b), w, sims);
    Ok((breakdown, grad))
}
