//! Deterministic, differentiable stand-in encoder for desk-scale work.
//!
//! Image tower: a bank of 3x3 convolutions (zero padding, stride 1) over the
//! three channels, `tanh`, global average pooling, then an affine projection
//! to `dim`. Text tower: byte trigrams hashed into 256 bins, L2-normalized
//! counts, then a linear projection to `dim`. All weights are drawn once
//! from the descriptor seed.

use rand_distr::{Distribution, Normal};

use super::{normalize_prompt, BackendDescriptor, Embedding, EncoderBackend, ImageTensor};
use crate::rng::{self, Stream};
use crate::{Error, Result};

const FILTERS: usize = 8;
const KERNEL: usize = 3;
const TEXT_BINS: usize = 256;

const KERNEL_STD: f64 = 0.5;
const CONV_BIAS_STD: f64 = 0.1;
const PROJ_BIAS_STD: f64 = 0.05;

pub struct ToyEncoder {
    desc: BackendDescriptor,
    /// `[filter][ky][kx][channel]`
    kernels: Vec<f64>,
    conv_bias: [f64; FILTERS],
    /// `dim x FILTERS`, row-major.
    proj: Vec<f64>,
    proj_bias: Vec<f64>,
    /// `dim x TEXT_BINS`, row-major.
    text_proj: Vec<f64>,
}

impl ToyEncoder {
    pub fn new(desc: BackendDescriptor) -> Result<Self> {
        let errs = desc.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = rng::stream(desc.seed, Stream::EncoderWeights);
        let mut draw = |n: usize, std: f64| -> Vec<f64> {
            let dist = Normal::new(0.0, std).expect("positive std");
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let dim = desc.dim;
        let kernels = draw(FILTERS * KERNEL * KERNEL * 3, KERNEL_STD);
        let conv_bias: [f64; FILTERS] = draw(FILTERS, CONV_BIAS_STD).try_into().unwrap();
        let proj = draw(dim * FILTERS, 1.0 / (FILTERS as f64).sqrt());
        let proj_bias = draw(dim, PROJ_BIAS_STD);
        let text_proj = draw(dim * TEXT_BINS, 1.0);
        Ok(Self {
            desc,
            kernels,
            conv_bias,
            proj,
            proj_bias,
            text_proj,
        })
    }

    fn kernel(&self, f: usize, ky: usize, kx: usize, c: usize) -> f64 {
        self.kernels[((f * KERNEL + ky) * KERNEL + kx) * 3 + c]
    }

    /// Activations `tanh(conv)` as `[pixel][filter]`.
    fn activations(&self, x: &ImageTensor) -> Vec<[f64; FILTERS]> {
        let (h, w) = (x.height(), x.width());
        let data = x.as_slice();
        let mut out = vec![[0.0; FILTERS]; h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut pre = self.conv_bias;
                for ky in 0..KERNEL {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..KERNEL {
                        let Some(sx) = (xx + kx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        let base = (sy * w + sx) * 3;
                        for (f, p) in pre.iter_mut().enumerate() {
                            for c in 0..3 {
                                *p += self.kernel(f, ky, kx, c) * data[base + c];
                            }
                        }
                    }
                }
                for (f, p) in pre.iter().enumerate() {
                    out[y * w + xx][f] = p.tanh();
                }
            }
        }
        out
    }

    fn project(&self, pooled: &[f64; FILTERS]) -> Vec<f64> {
        (0..self.desc.dim)
            .map(|d| {
                let row = &self.proj[d * FILTERS..(d + 1) * FILTERS];
                self.proj_bias[d] + row.iter().zip(pooled).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    fn pool(acts: &[[f64; FILTERS]]) -> [f64; FILTERS] {
        let mut pooled = [0.0; FILTERS];
        for a in acts {
            for (p, v) in pooled.iter_mut().zip(a) {
                *p += v;
            }
        }
        let n = acts.len() as f64;
        pooled.iter_mut().for_each(|p| *p /= n);
        pooled
    }

    fn trigram_counts(text: &str) -> [f64; TEXT_BINS] {
        let bytes = text.as_bytes();
        let mut counts = [0.0; TEXT_BINS];
        let grams: Vec<&[u8]> = if bytes.len() < 3 {
            vec![bytes]
        } else {
            bytes.windows(3).collect()
        };
        for g in grams {
            counts[(fnv1a(g) % TEXT_BINS as u64) as usize] += 1.0;
        }
        let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
        counts.iter_mut().for_each(|c| *c /= norm);
        counts
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl EncoderBackend for ToyEncoder {
    fn descriptor(&self) -> &BackendDescriptor {
        &self.desc
    }

    fn encode_image(&self, x: &ImageTensor) -> Result<Embedding> {
        self.check_image(x)?;
        let acts = self.activations(x);
        Embedding::new(self.project(&Self::pool(&acts)))
    }

    fn encode_text(&self, prompt: &str) -> Result<Embedding> {
        let prompt = normalize_prompt(prompt)?;
        let counts = Self::trigram_counts(prompt);
        let values = (0..self.desc.dim)
            .map(|d| {
                let row = &self.text_proj[d * TEXT_BINS..(d + 1) * TEXT_BINS];
                row.iter().zip(&counts).map(|(a, b)| a * b).sum()
            })
            .collect();
        Embedding::new(values)
    }

    fn image_vjp(&self, x: &ImageTensor, cotangent: &[f64]) -> Result<(Embedding, ImageTensor)> {
        self.check_image(x)?;
        if cotangent.len() != self.desc.dim {
            return Err(Error::ShapeMismatch {
                expected: format!("cotangent of dim {}", self.desc.dim),
                got: format!("dim {}", cotangent.len()),
            });
        }
        let (h, w) = (x.height(), x.width());
        let acts = self.activations(x);
        let g = Embedding::new(self.project(&Self::pool(&acts)))?;

        // d<cot, g>/d pooled_f = (W^T cot)_f; pooling spreads it evenly.
        let mut d_pooled = [0.0; FILTERS];
        for (d, c) in cotangent.iter().enumerate() {
            for (f, dp) in d_pooled.iter_mut().enumerate() {
                *dp += self.proj[d * FILTERS + f] * c;
            }
        }
        let inv_n = 1.0 / (h * w) as f64;

        let mut grad = vec![0.0; x.len()];
        for y in 0..h {
            for xx in 0..w {
                let a = &acts[y * w + xx];
                let mut d_pre = [0.0; FILTERS];
                for f in 0..FILTERS {
                    d_pre[f] = d_pooled[f] * inv_n * (1.0 - a[f] * a[f]);
                }
                for ky in 0..KERNEL {
                    let Some(sy) = (y + ky).checked_sub(1).filter(|&v| v < h) else {
                        continue;
                    };
                    for kx in 0..KERNEL {
                        let Some(sx) = (xx + kx).checked_sub(1).filter(|&v| v < w) else {
                            continue;
                        };
                        let base = (sy * w + sx) * 3;
                        for (f, dp) in d_pre.iter().enumerate() {
                            for c in 0..3 {
                                grad[base + c] += dp * self.kernel(f, ky, kx, c);
                            }
                        }
                    }
                }
            }
        }
        Ok((g, ImageTensor::new(h, w, grad)?))
    }
}
