//! Encoder backends, embeddings and the cosine image-text score.
//!
//! An [`ImageTensor`] lives in the backend's model pixel space (raw `[0,1]`
//! values after the per-channel shift/scale of its [`Preprocessing`]).
//! Grayscale conversion is defined in the raw domain, see [`grayscale`].

mod backend;
mod image_io;
mod toy;

pub use backend::{load_backend, BackendDescriptor, EncoderBackend, Preprocessing};
pub use image_io::{grayscale, grayscale_model, load_png, preprocess, save_png, to_rgb8};
pub use toy::ToyEncoder;

use crate::{Error, Result};

/// Norms at or below this are treated as degenerate by [`normalize`].
pub const NORM_FLOOR: f64 = 1e-12;

/// An `H x W x 3` image, stored row-major with interleaved channels.
///
/// Values are not clamped; pixel bounds are enforced softly by the
/// pixel-guard loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidInput(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        let expected = height * width * Self::CHANNELS;
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                expected: format!("{expected} values ({height}x{width}x3)"),
                got: format!("{} values", data.len()),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite pixel component at index {i}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height > 0 && width > 0 && value.is_finite());
        Self {
            height,
            width,
            data: vec![value; height * width * Self::CHANNELS],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Total number of scalar components, `H * W * 3`.
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `[r, g, b]` at row `y`, column `x`.
    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * Self::CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}x3", self.height, self.width)
    }
}

/// A raw feature vector `g(x)` or `f(c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("embedding must have dim >= 1".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("embedding has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

/// An embedding with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl From<UnitEmbedding> for Embedding {
    fn from(u: UnitEmbedding) -> Self {
        Embedding(u.0)
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(e: &Embedding) -> Result<UnitEmbedding> {
    let norm = e.norm();
    if norm.is_nan() || norm <= NORM_FLOOR {
        return Err(Error::DegenerateEmbedding {
            norm,
            floor: NORM_FLOOR,
        });
    }
    Ok(UnitEmbedding(e.0.iter().map(|v| v / norm).collect()))
}

/// Cosine score of two unit embeddings, in `[-1, 1]`.
///
/// The result is clamped to `[-1, 1]` only to absorb rounding in the dot
/// product of two unit vectors.
pub fn clip_score(g_hat: &UnitEmbedding, f_hat: &UnitEmbedding) -> Result<f64> {
    if g_hat.dim() != f_hat.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("dim {}", g_hat.dim()),
            got: format!("dim {}", f_hat.dim()),
        });
    }
    Ok(dot(&g_hat.0, &f_hat.0).clamp(-1.0, 1.0))
}

/// Canonical form of a prompt: surrounding whitespace trimmed, case kept.
pub fn normalize_prompt(prompt: &str) -> Result<&str> {
    let trimmed = prompt.trim();
    if trimmed.is_empty() {
        return Err(Error::InvalidInput("prompt is empty".into()));
    }
    Ok(trimmed)
}

/// Ordered, non-empty list of unique prompts.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct PromptSet(Vec<String>);

impl PromptSet {
    pub fn new<I, S>(prompts: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out: Vec<String> = Vec::new();
        for p in prompts {
            let p = normalize_prompt(p.as_ref())?;
            if out.iter().any(|q| q == p) {
                return Err(Error::InvalidInput(format!("duplicate prompt {p:?}")));
            }
            out.push(p.to_owned());
        }
        if out.is_empty() {
            return Err(Error::InvalidInput("prompt set is empty".into()));
        }
        Ok(Self(out))
    }

    /// Parse a prompt file: one prompt per line, `#` starts a comment line,
    /// blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        Self::new(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.0.iter().map(String::as_str)
    }

    pub fn as_slice(&self) -> &[String] {
        &self.0
    }
}

impl TryFrom<Vec<String>> for PromptSet {
    type Error = Error;

    fn try_from(v: Vec<String>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<PromptSet> for Vec<String> {
    fn from(p: PromptSet) -> Self {
        p.0
    }
}

/// Encode and normalize every prompt of a set, index-aligned with it.
pub fn encode_prompts(backend: &dyn EncoderBackend, prompts: &PromptSet) -> Result<Vec<UnitEmbedding>> {
    prompts.iter().map(|p| normalize(&backend.encode_text(p)?)).collect()
}

/// Per-prompt scores `s(x, c_i)` for an image.
pub fn prompt_scores(backend: &dyn EncoderBackend, x: &ImageTensor, text: &[UnitEmbedding]) -> Result<Vec<f64>> {
    let g_hat = normalize(&backend.encode_image(x)?)?;
    text.iter().map(|f| clip_score(&g_hat, f)).collect()
}
