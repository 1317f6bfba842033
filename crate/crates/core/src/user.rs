//! Synthetic users with a hidden target scene, and the multi-round dialogue
//! traces built from them.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::explicit::{summarize, DialogueHistory, PromptRep};
use crate::scene::{match_score, Image, Position, SceneSpec, Slot, SlotValue};

/// Said when the user has nothing new to add.
pub const VAGUE_UTTERANCES: [&str; 3] = ["hmm, not quite", "try another one", "that is not what I had in mind"];

/// An utterance that discloses exactly `value`.
pub fn utterance_for(value: SlotValue) -> String {
    match value {
        SlotValue::Color(c) => format!("make it {c}"),
        SlotValue::Shape(s) => format!("a {s}"),
        SlotValue::Position(Position::Center) => "put it in the center".to_string(),
        SlotValue::Position(p) => format!("put it on the {p}"),
        SlotValue::Background(b) => format!("{b} background"),
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticUser {
    pub target: SceneSpec,
    /// Order in which unprompted disclosures happen.
    pub order: Vec<Slot>,
    pub disclosed: Vec<Slot>,
    pub satisfaction: f64,
    pub vague_probability: f64,
    rng: ChaCha8Rng,
}

impl SyntheticUser {
    pub fn new(target: SceneSpec, order: Vec<Slot>, satisfaction: f64, vague_probability: f64, seed: u64) -> Self {
        SyntheticUser { target, order, disclosed: Vec::new(), satisfaction, vague_probability, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Random target and disclosure order.
    pub fn sample(rng: &mut impl Rng, satisfaction: f64, vague_probability: f64) -> Self {
        let target = SceneSpec::random(rng);
        let mut order = Slot::ALL.to_vec();
        order.shuffle(rng);
        Self::new(target, order, satisfaction, vague_probability, rng.gen())
    }

    fn disclose(&mut self, slot: Slot) -> String {
        if !self.disclosed.contains(&slot) {
            self.disclosed.push(slot);
        }
        utterance_for(self.target.value(slot))
    }

    pub fn next_undisclosed(&self) -> Option<Slot> {
        self.order.iter().copied().find(|s| !self.disclosed.contains(s))
    }

    /// First utterance: a single slot.
    pub fn opening(&mut self) -> String {
        let slot = self.order[0];
        self.disclose(slot)
    }

    /// Answers a clarification question truthfully; unprompted, the user is
    /// vague with `vague_probability`, otherwise discloses the next slot.
    pub fn respond(&mut self, question: Option<Slot>) -> String {
        if let Some(slot) = question {
            return self.disclose(slot);
        }
        let vague = self.vague_probability > 0.0 && self.rng.gen::<f64>() < self.vague_probability;
        match self.next_undisclosed() {
            Some(slot) if !vague => self.disclose(slot),
            _ => VAGUE_UTTERANCES[self.rng.gen_range(0..VAGUE_UTTERANCES.len())].to_string(),
        }
    }

    pub fn is_satisfied(&self, image: &Image) -> bool {
        match_score(&self.target, image) >= self.satisfaction
    }
}

/// One simulated dialogue: each utterance discloses one more slot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub id: usize,
    pub target: SceneSpec,
    pub order: Vec<Slot>,
    pub utterances: Vec<String>,
}

impl Trace {
    /// Summarized prompt after each utterance.
    pub fn prompts(&self) -> Vec<PromptRep> {
        let mut history = DialogueHistory::new();
        let mut out = Vec::with_capacity(self.utterances.len());
        for w in &self.utterances {
            let p = summarize(&history, w);
            history.push(w.clone(), crate::explicit::template_response(&p));
            out.push(p);
        }
        out
    }

    pub fn user(&self, satisfaction: f64, seed: u64) -> SyntheticUser {
        SyntheticUser::new(self.target, self.order.clone(), satisfaction, 0.0, seed)
    }
}

/// `n` traces of `rounds` utterances each. Rounds beyond the slot count
/// repeat the full description.
pub fn build_traces(n: usize, rounds: usize, seed: u64) -> Vec<Trace> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| {
            let mut user = SyntheticUser::sample(&mut rng, 1.0, 0.0);
            let mut utterances = vec![user.opening()];
            while utterances.len() < rounds {
                match user.next_undisclosed() {
                    Some(_) => utterances.push(user.respond(None)),
                    None => utterances.push(
                        Slot::ALL.iter().map(|&s| utterance_for(user.target.value(s))).collect::<Vec<_>>().join(", "),
                    ),
                }
            }
            Trace { id, target: user.target, order: user.order, utterances }
        })
        .collect()
}

pub fn write_traces<W: Write>(traces: &[Trace], mut out: W) -> Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces<R: BufRead>(input: R) -> Result<Vec<Trace>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}
