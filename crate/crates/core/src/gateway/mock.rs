//! Deterministic stand-in for the generator, embedder and agent.
//!
//! Every image in the mock world is a PNG carrying a vector (see
//! [`payload`](super::payload)). Text queries written by the mock agent are
//! serialized vectors tagged with the dialog round:
//!
//! ```text
//! mock r=3: 0.1 -0.25 ...
//! ```
//!
//! Any other text maps to a pseudo-random direction derived from its hash, so
//! hand-typed queries work too. With `c` the query's vector, `r` its round and
//! `σ_r = σ₀ · decay^r`:
//!
//! * `generate_image(q, seed)` encodes `c + σ_r · n(seed)`;
//! * `embed_image(b)` returns the encoded vector;
//! * `embed_text(q)` returns `c + text_sigma · decay^r · n(q)`, the cross-modal
//!   channel being noisier than the visual one;
//! * `initial_query(target v)` describes `v + description_sigma · n(v)`;
//! * `refine_query` moves the previous query `p` toward the target:
//!   `(1 − α)(p − α·e) + α·v`, where `e` is the discrepancy perceived in the
//!   feedback image (`feedback − p`; zero in verbal mode).
//!
//! All operations are pure functions of their arguments and the config.

use serde::{Deserialize, Serialize};

use super::payload::{decode_vector_png, encode_vector_png, format_vector, parse_vector};
use super::{DialogHistory, GatewayError, ImageBlob, ImageOrigin, ModelBackend, RefineMode};
use crate::index::ImageRecord;
use crate::rng::{gaussian_direction, stable_hash64};

pub const MOCK_QUERY_PREFIX: &str = "mock r=";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MockWorldConfig {
    pub dim: usize,
    /// Generator noise at round 0.
    pub noise_sigma_0: f64,
    /// Per-round multiplicative decay of both channel noises, in (0, 1].
    pub noise_decay: f64,
    pub seed: u64,
    /// Agent blend toward the target per refinement, in [0, 1].
    pub blend_alpha: f64,
    /// Error in the agent's initial description of the target.
    pub description_sigma: f64,
    /// Cross-modal (text embedding) noise at round 0.
    pub text_sigma: f64,
}

impl Default for MockWorldConfig {
    fn default() -> Self {
        Self {
            dim: 256,
            noise_sigma_0: 0.8,
            noise_decay: 0.8,
            seed: 0,
            blend_alpha: 0.5,
            description_sigma: 0.8,
            text_sigma: 1.2,
        }
    }
}

impl MockWorldConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.dim == 0 {
            return Err("dim must be positive".into());
        }
        let non_neg = [
            ("noise_sigma_0", self.noise_sigma_0),
            ("description_sigma", self.description_sigma),
            ("text_sigma", self.text_sigma),
        ];
        for (name, v) in non_neg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be a non-negative finite number"));
            }
        }
        if !(self.noise_decay > 0.0 && self.noise_decay <= 1.0) {
            return Err("noise_decay must lie in (0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.blend_alpha) {
            return Err("blend_alpha must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct MockWorld {
    config: MockWorldConfig,
}

impl MockWorld {
    pub fn new(config: MockWorldConfig) -> Result<Self, String> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &MockWorldConfig {
        &self.config
    }

    fn direction(&self, domain: &str, material: &[u8]) -> Vec<f32> {
        let seed = stable_hash64(&[
            b"genir-mock",
            &self.config.seed.to_le_bytes(),
            domain.as_bytes(),
            material,
        ]);
        gaussian_direction(seed, self.config.dim)
    }

    pub fn database_id(i: usize) -> String {
        format!("img_{i:06}")
    }

    /// Unit-norm-in-expectation vector of the `i`-th database image.
    pub fn database_vector(&self, i: usize) -> Vec<f32> {
        self.direction("db", &(i as u64).to_le_bytes())
    }

    /// `n` database records with ids `img_000000..`.
    pub fn database_records(&self, n: usize) -> Vec<ImageRecord<f32>> {
        (0..n)
            .map(|i| ImageRecord::new(Self::database_id(i), self.database_vector(i)))
            .collect()
    }

    pub fn sigma_at(&self, base: f64, round: u32) -> f64 {
        base * self.config.noise_decay.powi(round as i32)
    }

    pub fn query_text(round: u32, v: &[f32]) -> String {
        format!("{MOCK_QUERY_PREFIX}{round}: {}", format_vector(v))
    }

    /// Round and vector a text stands for.
    pub fn decode_query(&self, text: &str) -> (u32, Vec<f32>) {
        if let Some((round, v)) = parse_mock_query(text) {
            if v.len() == self.config.dim {
                return (round, v);
            }
        }
        (0, self.direction("text", text.as_bytes()))
    }

    fn decode_image(&self, blob: &ImageBlob) -> Result<Vec<f32>, GatewayError> {
        let v = decode_vector_png(blob)?;
        if v.len() != self.config.dim {
            return Err(GatewayError::InvalidImage(format!(
                "image encodes {} components, world dim is {}",
                v.len(),
                self.config.dim
            )));
        }
        Ok(v)
    }

    /// Noiseless generation of `text` (σ = 0).
    pub fn clean_image(&self, text: &str) -> ImageBlob {
        encode_vector_png(&self.decode_query(text).1, ImageOrigin::Generated)
    }
}

fn parse_mock_query(text: &str) -> Option<(u32, Vec<f32>)> {
    let rest = text.strip_prefix(MOCK_QUERY_PREFIX)?;
    let (round, body) = rest.split_once(':')?;
    Some((round.parse().ok()?, parse_vector(body)?))
}

fn add_scaled(base: &[f32], scale: f64, noise: &[f32]) -> Vec<f32> {
    base.iter()
        .zip(noise)
        .map(|(&b, &n)| (b as f64 + scale * n as f64) as f32)
        .collect()
}

impl ModelBackend for MockWorld {
    fn generate_image(&self, prompt: &str, seed: u64) -> Result<ImageBlob, GatewayError> {
        let (round, concept) = self.decode_query(prompt);
        let sigma = self.sigma_at(self.config.noise_sigma_0, round);
        let noise = self.direction("generate", &seed.to_le_bytes());
        Ok(encode_vector_png(
            &add_scaled(&concept, sigma, &noise),
            ImageOrigin::Generated,
        ))
    }

    fn embed_image(&self, blob: &ImageBlob) -> Result<Vec<f32>, GatewayError> {
        self.decode_image(blob)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let (round, concept) = self.decode_query(text);
        let sigma = self.sigma_at(self.config.text_sigma, round);
        let noise = self.direction("embed-text", text.as_bytes());
        Ok(add_scaled(&concept, sigma, &noise))
    }

    fn initial_query(&self, target: &ImageBlob) -> Result<String, GatewayError> {
        let v = self.decode_image(target)?;
        let bits: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
        let noise = self.direction("describe", &bits);
        let described = add_scaled(&v, self.config.description_sigma, &noise);
        Ok(Self::query_text(0, &described))
    }

    fn refine_query(
        &self,
        target: &ImageBlob,
        feedback: Option<&ImageBlob>,
        history: &DialogHistory,
        mode: RefineMode,
    ) -> Result<String, GatewayError> {
        let last = history
            .last()
            .ok_or_else(|| GatewayError::InvalidHistory("history is empty".into()))?;
        let target = self.decode_image(target)?;
        let (_, prev) = self.decode_query(&last.query);
        let seen = match (mode, feedback) {
            (RefineMode::Verbal, _) | (_, None) => None,
            (_, Some(f)) => Some(self.decode_image(f)?),
        };
        let alpha = self.config.blend_alpha;
        let next: Vec<f32> = (0..self.config.dim)
            .map(|i| {
                let p = prev[i] as f64;
                let e = seen.as_ref().map_or(0.0, |s| s[i] as f64 - p);
                ((1.0 - alpha) * (p - alpha * e) + alpha * target[i] as f64) as f32
            })
            .collect();
        Ok(Self::query_text(history.len() as u32, &next))
    }
}
