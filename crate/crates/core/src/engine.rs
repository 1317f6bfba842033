//! Interactive sessions. Inference rounds run the explicit pathway only;
//! training rounds also sample a pair and score ambiguity.

use std::fs::OpenOptions;
use std::io::Write;
use std::sync::Arc;

use crate::d3po::PairRecord;
use crate::error::{Error, Result};
use crate::explicit::{template_response, Summarizer};
use crate::generator::Generator;
use crate::implicit::{assess, implicit_calls};
use crate::nn::mix_seed;
use crate::scene::{oracle_caption, Image};
use crate::session::{Choice, RoundRecord, SessionMode, SessionRecord, SessionStore};

/// Reply to one user message.
#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub round: usize,
    pub response: String,
    /// Relative image references, one per candidate.
    pub images: Vec<String>,
    pub question: Option<String>,
}

pub struct Engine {
    pub generator: Generator,
    pub summarizer: Arc<dyn Summarizer>,
    pub tau: f64,
    pub store: SessionStore,
    /// Recorded with every preference pair so it can be replayed.
    pub checkpoint: String,
}

impl Engine {
    pub fn candidate_seed(session: &SessionRecord, round: usize, index: usize) -> u64 {
        mix_seed(session.seed, &[round as u64, index as u64])
    }

    pub fn create_session(&self, id: &str, mode: SessionMode, seed: u64) -> Result<SessionRecord> {
        let s = SessionRecord::new(id, mode, seed);
        self.store.persist(&s)?;
        Ok(s)
    }

    /// Record, summarize, generate. Fails if any implicit module ran.
    pub fn infer_round(&self, session: &mut SessionRecord, w: &str) -> Result<(String, Image)> {
        if session.mode != SessionMode::Inference {
            return Err(Error::InvalidArgument(format!("session {} is not in inference mode", session.id)));
        }
        let before = implicit_calls();
        let round = session.next_round();
        let prompt = self.summarizer.summarize(&session.history(), w);
        let seed = Self::candidate_seed(session, round, 0);
        let image = self.generator.generate(&prompt, seed)?;
        let response = template_response(&prompt);
        let rel = self.store.save_image(&session.id, round, 0, &image)?;
        session.push_round(RoundRecord {
            round,
            user_input: w.to_string(),
            response: response.clone(),
            prompt,
            images: vec![rel],
            seeds: vec![seed],
            ambiguity: None,
            preference: None,
        })?;
        self.store.persist(session)?;
        let after = implicit_calls();
        if after != before {
            return Err(Error::InferencePurity(format!("{before:?} -> {after:?}")));
        }
        Ok((response, image))
    }

    /// Two ancestral candidates (so a later preference yields a usable pair)
    /// and an ambiguity report on candidate A.
    pub fn training_round(&self, session: &mut SessionRecord, w: &str) -> Result<(Turn, [Image; 2])> {
        if session.mode != SessionMode::Training {
            return Err(Error::InvalidArgument(format!("session {} is not in training mode", session.id)));
        }
        let round = session.next_round();
        let prompt = self.summarizer.summarize(&session.history(), w);
        let seeds = [Self::candidate_seed(session, round, 0), Self::candidate_seed(session, round, 1)];
        let (a, _) = self.generator.sample_ancestral(&prompt, None, seeds[0])?;
        let (b, _) = self.generator.sample_ancestral(&prompt, None, seeds[1])?;
        let report = assess(&prompt, &oracle_caption(&a), &self.generator.embedder, self.tau)?;
        let response = template_response(&prompt);
        let images = vec![self.store.save_image(&session.id, round, 0, &a)?, self.store.save_image(&session.id, round, 1, &b)?];
        let question = report.question.clone();
        session.push_round(RoundRecord {
            round,
            user_input: w.to_string(),
            response: response.clone(),
            prompt,
            images: images.clone(),
            seeds: seeds.to_vec(),
            ambiguity: Some(report),
            preference: None,
        })?;
        self.store.persist(session)?;
        Ok((Turn { round, response, images, question }, [a, b]))
    }

    pub fn message(&self, session: &mut SessionRecord, w: &str) -> Result<Turn> {
        match session.mode {
            SessionMode::Inference => {
                let (response, _) = self.infer_round(session, w)?;
                let last = session.rounds.last().expect("round was just pushed");
                Ok(Turn { round: last.round, response, images: last.images.clone(), question: None })
            }
            SessionMode::Training => Ok(self.training_round(session, w)?.0),
        }
    }

    /// Stores the choice and appends the pair to the store's pair log.
    pub fn record_preference(&self, session: &mut SessionRecord, round: usize, choice: Choice) -> Result<PairRecord> {
        if session.mode == SessionMode::Inference {
            return Err(Error::Conflict(format!("session {} is in inference mode", session.id)));
        }
        let id = session.id.clone();
        let r = session
            .rounds
            .get_mut(round.wrapping_sub(1))
            .ok_or_else(|| Error::InvalidArgument(format!("session {id} has no round {round}")))?;
        if r.preference.is_some() {
            return Err(Error::Conflict(format!("round {round} of session {id} already has a preference")));
        }
        r.preference = Some(choice);
        let (w, l) = (choice.index(), 1 - choice.index());
        let record = PairRecord {
            session: id,
            round,
            winner_seed: r.seeds[w],
            loser_seed: r.seeds[l],
            prompt: r.prompt.clone(),
            weights: None,
            tied: false,
            checkpoint: self.checkpoint.clone(),
        };
        self.store.persist(session)?;
        let mut f = OpenOptions::new().create(true).append(true).open(self.store.root().join("pairs.jsonl"))?;
        serde_json::to_writer(&mut f, &record)?;
        f.write_all(b"\n")?;
        Ok(record)
    }
}
