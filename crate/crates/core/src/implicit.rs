//! Implicit optimisation pathway: prompt/caption ambiguity, clarification
//! questions and the attend-and-excite refinement loop.

use std::cell::Cell;

use serde::{Deserialize, Serialize};

use crate::embedder::{similarity, EmbeddingModel};
use crate::error::{Error, Result};
use crate::explicit::PromptRep;
use crate::generator::Generator;
use crate::scene::{self, CaptionSet, Image, Slot};

/// Per-thread invocation counts of the implicit modules.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImplicitCalls {
    pub ambiguity: u64,
    pub clarify: u64,
    pub attend_excite: u64,
    pub d3po: u64,
}

impl ImplicitCalls {
    pub fn total(&self) -> u64 {
        self.ambiguity + self.clarify + self.attend_excite + self.d3po
    }
}

thread_local! {
    static CALLS: Cell<ImplicitCalls> = Cell::new(ImplicitCalls::default());
}

/// Snapshot of this thread's counters.
pub fn implicit_calls() -> ImplicitCalls {
    CALLS.with(Cell::get)
}

pub(crate) fn count(f: impl FnOnce(&mut ImplicitCalls)) {
    CALLS.with(|c| {
        let mut v = c.get();
        f(&mut v);
        c.set(v);
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguityReport {
    pub delta: f64,
    pub per_caption_sims: Vec<f64>,
    pub tau: f64,
    pub triggered: bool,
    pub question: Option<String>,
    pub target_slot: Option<Slot>,
}

/// `1 - mean(sims)`.
pub fn delta_from_sims(sims: &[f64]) -> f64 {
    1.0 - sims.iter().sum::<f64>() / sims.len() as f64
}

/// Prompt-to-caption similarities and the resulting ambiguity `delta` in [0, 2].
pub fn ambiguity(prompt: &PromptRep, captions: &CaptionSet, model: &EmbeddingModel) -> Result<(f64, Vec<f64>)> {
    count(|c| c.ambiguity += 1);
    if captions.is_empty() {
        return Err(Error::InvalidArgument("caption set is empty".into()));
    }
    let p = model.embed_text(&prompt.tokens, None)?;
    let sims = captions
        .captions
        .iter()
        .map(|c| Ok(similarity(&p, &model.embed_text(&scene::tokenize(c), None)?)))
        .collect::<Result<Vec<f64>>>()?;
    Ok((delta_from_sims(&sims), sims))
}

/// "Which color do you want: red, green, blue, or yellow?"
pub fn question_for(slot: Slot) -> String {
    let values = slot.values();
    let listed = match values.len() {
        1 => values[0].to_string(),
        2 => format!("{} or {}", values[0], values[1]),
        n => format!("{}, or {}", values[..n - 1].join(", "), values[n - 1]),
    };
    format!("Which {slot} do you want: {listed}?")
}

/// Chooses the clarification target when `delta > tau`: the first unspecified
/// slot of the prompt, otherwise the slot whose caption is least similar to it.
/// `sims[i]` belongs to caption `i`, captions being in slot order.
pub fn clarify(prompt: &PromptRep, sims: &[f64], delta: f64, tau: f64) -> Option<(Slot, String)> {
    count(|c| c.clarify += 1);
    if delta <= tau {
        return None;
    }
    let slot = prompt.slots.unspecified_slots().first().copied().or_else(|| {
        sims.iter()
            .zip(Slot::ALL)
            .min_by(|a, b| a.0.total_cmp(b.0))
            .map(|(_, s)| s)
    })?;
    Some((slot, question_for(slot)))
}

/// Runs [`ambiguity`] then [`clarify`] and packages the report.
pub fn assess(prompt: &PromptRep, captions: &CaptionSet, model: &EmbeddingModel, tau: f64) -> Result<AmbiguityReport> {
    let (delta, sims) = ambiguity(prompt, captions, model)?;
    let q = clarify(prompt, &sims, delta, tau);
    Ok(AmbiguityReport {
        delta,
        tau,
        triggered: delta > tau,
        target_slot: q.as_ref().map(|(s, _)| *s),
        question: q.map(|(_, q)| q),
        per_caption_sims: sims,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AeConfig {
    /// Stop once image/prompt similarity reaches this value.
    pub k: f64,
    pub n_max: usize,
    /// Weight given to every activated token.
    pub gamma: f64,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig { k: 0.70, n_max: 5, gamma: 2.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationState {
    /// Activated token positions in selection order.
    pub activation_list: Vec<usize>,
    /// Similarity of every evaluated image, starting with the input image.
    pub sims: Vec<f64>,
    pub best_image: Image,
    pub best_sim: f64,
    /// Index into `sims` of the returned image.
    pub best_index: usize,
    /// Images scored, counting the input image: `activation_list.len() + 1`.
    pub iterations_used: usize,
    pub exhausted: bool,
    pub reached_threshold: bool,
}

impl ActivationState {
    pub fn initial_sim(&self) -> f64 {
        self.sims[0]
    }
}

/// Token weights: `gamma` on activated positions, 1 elsewhere.
pub fn activation_weights(n_tokens: usize, activated: &[usize], gamma: f64) -> Vec<f64> {
    let mut w = vec![1.0; n_tokens];
    for &i in activated {
        w[i] = gamma;
    }
    w
}

/// Iterative refinement. Each iteration scores the current image against the
/// prompt; below `k` it activates the not-yet-activated token whose embedding
/// gradient of `1 - Sim` is largest and resamples with the same DDIM seed under
/// the amplified weights. The best-scoring image seen is returned.
pub fn attend_excite(
    prompt: &PromptRep,
    first_image: &Image,
    cfg: &AeConfig,
    generator: &Generator,
    seed: u64,
) -> Result<ActivationState> {
    count(|c| c.attend_excite += 1);
    if !(cfg.k > -1.0 && cfg.k < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold k must lie in (-1, 1), got {}", cfg.k)));
    }
    if cfg.n_max == 0 {
        return Err(Error::InvalidArgument("n_max must be at least 1".into()));
    }
    if !(cfg.gamma > 0.0) {
        return Err(Error::InvalidArgument("gamma must be positive".into()));
    }
    let model = generator.embedder.as_ref();
    let text = model.embed_text(&prompt.tokens, None)?;
    let score = |img: &Image| -> (Vec<f64>, f64) {
        let e = model.embed_image(img);
        let s = similarity(&e, &text);
        (e, s)
    };

    let mut activated: Vec<usize> = Vec::new();
    let mut image = first_image.clone();
    let (mut img_emb, first) = score(&image);
    let mut sims = vec![first];
    let mut best = (first, 0, image.clone());
    let mut exhausted = false;
    let mut reached = first >= cfg.k;

    while !reached && activated.len() < cfg.n_max {
        let grad = model.similarity_loss_grad(&prompt.tokens, None, &img_emb)?;
        let norms = grad.token_grad_norms();
        let pick = norms
            .iter()
            .enumerate()
            .filter(|(i, _)| !activated.contains(i))
            .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
            .map(|(i, _)| i);
        let Some(i_star) = pick else {
            exhausted = true;
            break;
        };
        activated.push(i_star);
        let weights = activation_weights(prompt.tokens.len(), &activated, cfg.gamma);
        image = generator.sample_ddim(prompt, Some(&weights), seed)?;
        let (e, s) = score(&image);
        img_emb = e;
        sims.push(s);
        if s > best.0 {
            best = (s, sims.len() - 1, image.clone());
        }
        reached = s >= cfg.k;
        if !reached && activated.len() == prompt.tokens.len() {
            exhausted = true;
            break;
        }
    }

    let iterations_used = sims.len();
    Ok(ActivationState {
        activation_list: activated,
        sims,
        best_sim: best.0,
        best_index: best.1,
        best_image: best.2,
        iterations_used,
        exhausted,
        reached_threshold: reached,
    })
}
