//! Prompt-conditioned image generation: embeds a [`PromptRep`] (optionally with
//! per-token weights) and drives the denoiser's samplers.

use std::sync::Arc;

use crate::diffusion::{self, Conditioning, Denoiser, Trajectory};
use crate::embedder::EmbeddingModel;
use crate::error::Result;
use crate::explicit::PromptRep;
use crate::scene::Image;

/// Frozen embedder + denoiser snapshot. Cheap to clone; sampling is reentrant.
#[derive(Debug, Clone)]
pub struct Generator {
    pub embedder: Arc<EmbeddingModel>,
    pub denoiser: Arc<Denoiser>,
    pub ddim_steps: usize,
    pub clip_denoised: bool,
}

impl Generator {
    pub fn new(embedder: Arc<EmbeddingModel>, denoiser: Arc<Denoiser>, ddim_steps: usize) -> Self {
        Generator { embedder, denoiser, ddim_steps, clip_denoised: true }
    }

    pub fn conditioning(&self, prompt: &PromptRep, weights: Option<&[f64]>) -> Result<Conditioning> {
        Ok(Conditioning {
            tokens: prompt.tokens.clone(),
            weights: weights.map(<[f64]>::to_vec),
            vector: self.embedder.embed_text(&prompt.tokens, weights)?,
        })
    }

    pub fn sample_ddim(&self, prompt: &PromptRep, weights: Option<&[f64]>, seed: u64) -> Result<Image> {
        let c = self.conditioning(prompt, weights)?;
        let pixels = diffusion::sample_ddim(self.denoiser.as_ref(), &c.vector, self.ddim_steps, seed, self.clip_denoised)?;
        Image::from_clamped(pixels)
    }

    pub fn sample_ancestral(&self, prompt: &PromptRep, weights: Option<&[f64]>, seed: u64) -> Result<(Image, Trajectory)> {
        let c = self.conditioning(prompt, weights)?;
        let (pixels, traj) = diffusion::sample_ancestral(self.denoiser.as_ref(), c, seed)?;
        Ok((Image::from_clamped(pixels)?, traj))
    }

    /// Default user-facing generation: unweighted DDIM.
    pub fn generate(&self, prompt: &PromptRep, seed: u64) -> Result<Image> {
        self.sample_ddim(prompt, None, seed)
    }
}
