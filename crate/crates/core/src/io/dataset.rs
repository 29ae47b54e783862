//! Labeled u8 image datasets and the synthetic texture generator.
//!
//! File layout (little-endian):
//!
//! ```text
//! magic "SITD" | version u32 | count u32 | height u16 | width u16 |
//! channels u8 | classes u16 | count × (H·W·ch u8 pixels, u16 label)
//! ```

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, SitError};
use crate::scalar::Scalar;
use crate::tensor::{std_normal, Tensor};

pub const MAGIC: &[u8; 4] = b"SITD";
pub const VERSION: u32 = 1;
pub const HEADER_LEN: usize = 4 + 4 + 4 + 2 + 2 + 1 + 2;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub classes: usize,
    pixels: Vec<u8>,
    labels: Vec<u16>,
}

impl Dataset {
    pub fn new(
        height: usize,
        width: usize,
        channels: usize,
        classes: usize,
        pixels: Vec<u8>,
        labels: Vec<u16>,
    ) -> Result<Self> {
        if pixels.len() != labels.len() * height * width * channels {
            return Err(SitError::Format(
                "pixel buffer does not match sample count".into(),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(SitError::Format(format!("label {bad} ≥ classes {classes}")));
        }
        Ok(Dataset {
            height,
            width,
            channels,
            classes,
            pixels,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    pub fn pixels(&self, i: usize) -> &[u8] {
        let n = self.sample_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    /// `H × W × ch` tensor with pixels mapped to `[-1, 1]`.
    pub fn image<T: Scalar>(&self, i: usize) -> Tensor<T> {
        let data = self
            .pixels(i)
            .iter()
            .map(|&p| T::lit(p as f64 / 127.5 - 1.0))
            .collect();
        Tensor::new(&[self.height, self.width, self.channels], data).expect("sample size")
    }

    /// Exact byte length implied by a header.
    pub fn encoded_len(count: usize, height: usize, width: usize, channels: usize) -> usize {
        HEADER_LEN + count * (height * width * channels + 2)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::encoded_len(
            self.len(),
            self.height,
            self.width,
            self.channels,
        ));
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        out.extend_from_slice(&(self.height as u16).to_le_bytes());
        out.extend_from_slice(&(self.width as u16).to_le_bytes());
        out.push(self.channels as u8);
        out.extend_from_slice(&(self.classes as u16).to_le_bytes());
        for i in 0..self.len() {
            out.extend_from_slice(self.pixels(i));
            out.extend_from_slice(&self.labels[i].to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| SitError::Format(format!("dataset: {m}"));
        if bytes.len() < HEADER_LEN || &bytes[..4] != MAGIC {
            return Err(bad("missing SITD header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let version = u32_at(4);
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let count = u32_at(8) as usize;
        let (h, w) = (u16_at(12) as usize, u16_at(14) as usize);
        let ch = bytes[16] as usize;
        let classes = u16_at(17) as usize;
        let expect = Self::encoded_len(count, h, w, ch);
        if bytes.len() != expect {
            return Err(bad(&format!(
                "length {} does not match header ({expect})",
                bytes.len()
            )));
        }
        let n = h * w * ch;
        let mut pixels = Vec::with_capacity(count * n);
        let mut labels = Vec::with_capacity(count);
        for rec in bytes[HEADER_LEN..].chunks_exact(n + 2) {
            pixels.extend_from_slice(&rec[..n]);
            labels.push(u16::from_le_bytes([rec[n], rec[n + 1]]));
        }
        Dataset::new(h, w, ch, classes, pixels, labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&super::read_file(path)?)
    }
}

/// Parameters of the synthetic texture task.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub samples_per_class: usize,
    pub size: usize,
    pub channels: usize,
    /// Standard deviation of additive pixel noise, in units of the full
    /// `[0, 1]` intensity range.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            classes: 10,
            samples_per_class: 500,
            size: 32,
            channels: 3,
            noise: 0.25,
            seed: 0,
        }
    }
}

/// Generates class-conditional oriented gratings. Classes differ in
/// orientation (half of them) and spatial frequency (the other half); each
/// sample draws its own phase, contrast, channel tint, small orientation and
/// frequency jitter, and Gaussian pixel noise. Samples cycle through the
/// classes in order.
pub fn gen_synth(spec: &SynthSpec) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (s, ch) = (spec.size, spec.channels);
    let orientations = spec.classes.div_ceil(2);
    let count = spec.classes * spec.samples_per_class;
    let mut pixels = Vec::with_capacity(count * s * s * ch);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let k = i % spec.classes;
        let theta = std::f64::consts::PI * (k % orientations) as f64 / orientations as f64
            + rng.gen_range(-0.25..0.25);
        let cycles = if k < orientations { 3.0 } else { 5.5 } * rng.gen_range(0.8..1.2);
        let phase = rng.gen_range(0.0..std::f64::consts::TAU);
        let contrast = rng.gen_range(0.5..1.0);
        let tint: Vec<f64> = (0..ch).map(|_| rng.gen_range(0.6..1.0)).collect();
        let (dx, dy) = (theta.cos(), theta.sin());
        let omega = std::f64::consts::TAU * cycles / s as f64;
        for y in 0..s {
            for x in 0..s {
                let wave = (omega * (x as f64 * dx + y as f64 * dy) + phase).sin();
                for &t in &tint {
                    let v = 0.5 + 0.5 * contrast * t * wave + spec.noise * std_normal(&mut rng);
                    pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
                }
            }
        }
        labels.push(k as u16);
    }
    Dataset::new(s, s, ch, spec.classes, pixels, labels).expect("generator invariants")
}
