use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Embedding, ImageTensor, ToyEncoder};
use crate::{Error, Result};

/// Per-channel mapping from raw `[0,1]` pixels to model space:
/// `model = (raw - shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub shift: [f64; 3],
    pub scale: [f64; 3],
}

impl Preprocessing {
    pub const IDENTITY: Preprocessing = Preprocessing {
        shift: [0.0; 3],
        scale: [1.0; 3],
    };

    pub fn to_model(&self, raw: f64, channel: usize) -> f64 {
        (raw - self.shift[channel]) / self.scale[channel]
    }

    pub fn to_raw(&self, model: f64, channel: usize) -> f64 {
        model * self.scale[channel] + self.shift[channel]
    }

    fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for c in 0..3 {
            if !self.shift[c].is_finite() {
                errs.push(format!("shift[{c}] is not finite"));
            }
            if !self.scale[c].is_finite() || self.scale[c] == 0.0 {
                errs.push(format!("scale[{c}] must be finite and nonzero"));
            }
        }
        errs
    }
}

impl Default for Preprocessing {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Backend descriptor file: `{id, dim, resolution, shift[3], scale[3], seed}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub id: String,
    pub dim: usize,
    /// Square input side length in pixels.
    pub resolution: usize,
    pub shift: [f64; 3],
    pub scale: [f64; 3],
    #[serde(default)]
    pub seed: u64,
}

impl BackendDescriptor {
    /// The default desk-scale toy encoder: 8x8 inputs, 32-d embeddings,
    /// identity preprocessing.
    pub fn toy() -> Self {
        Self {
            id: "toy-v1".into(),
            dim: 32,
            resolution: 8,
            shift: [0.0; 3],
            scale: [1.0; 3],
            seed: 0,
        }
    }

    pub fn preprocessing(&self) -> Preprocessing {
        Preprocessing {
            shift: self.shift,
            scale: self.scale,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.id.trim().is_empty() {
            errs.push("backend id is empty".into());
        }
        if self.dim == 0 {
            errs.push("backend dim must be positive".into());
        }
        if self.resolution == 0 {
            errs.push("backend resolution must be positive".into());
        }
        errs.extend(self.preprocessing().validate());
        errs
    }
}

/// An image/text encoder pair that can differentiate its image tower.
///
/// Implementations must be deterministic. Pretrained checkpoints plug in by
/// implementing this trait; the toy encoder is the only built-in one.
pub trait EncoderBackend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    fn encode_image(&self, x: &ImageTensor) -> Result<Embedding>;

    fn encode_text(&self, prompt: &str) -> Result<Embedding>;

    /// Returns `g(x)` and the pixel gradient of `<cotangent, g(x)>`.
    ///
    /// By the chain rule this yields the pixel gradient of any scalar
    /// function of `g(x)` when `cotangent` is that function's gradient.
    fn image_vjp(&self, x: &ImageTensor, cotangent: &[f64]) -> Result<(Embedding, ImageTensor)>;

    /// Backends that cannot serve concurrent inference return true; callers
    /// then serialize their runs.
    fn exclusive(&self) -> bool {
        false
    }

    fn check_image(&self, x: &ImageTensor) -> Result<()> {
        let r = self.descriptor().resolution;
        if x.height() != r || x.width() != r {
            return Err(Error::ShapeMismatch {
                expected: format!("{r}x{r}x3"),
                got: x.shape_str(),
            });
        }
        if !x.is_finite() {
            return Err(Error::InvalidInput("image has non-finite pixels".into()));
        }
        Ok(())
    }
}

/// Instantiate the backend named by a descriptor.
pub fn load_backend(desc: &BackendDescriptor) -> Result<Box<dyn EncoderBackend>> {
    let errs = desc.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    if desc.id.starts_with("toy") {
        Ok(Box::new(ToyEncoder::new(desc.clone())?))
    } else {
        Err(Error::InvalidInput(format!(
            "no adapter available for backend {:?}",
            desc.id
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_json_round_trip() {
        let json = r#"{"id":"toy-v1","dim":32,"resolution":8,"shift":[0,0,0],"scale":[1,1,1],"seed":3}"#;
        let d: BackendDescriptor = serde_json::from_str(json).unwrap();
        assert_eq!(d.seed, 3);
        assert_eq!(d.preprocessing(), Preprocessing::IDENTITY);
        assert!(d.validate().is_empty());
    }

    #[test]
    fn descriptor_validation_lists_every_problem() {
        let mut d = BackendDescriptor::toy();
        d.dim = 0;
        d.resolution = 0;
        d.scale[1] = 0.0;
        assert_eq!(d.validate().len(), 3);
    }

    #[test]
    fn unknown_backend_is_rejected() {
        let mut d = BackendDescriptor::toy();
        d.id = "ViT-L/14@336px".into();
        assert!(load_backend(&d).is_err());
    }
}
