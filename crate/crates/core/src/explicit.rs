//! Explicit dialogue pathway: history bookkeeping, the prompt summarizer and
//! per-round candidate generation.

use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::embedder::NULL_TOKEN;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::mix_seed;
use crate::scene::{self, Image, PartialSceneSpec, PhraseStyle, Slot, SlotValue};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub round: usize,
    pub user_input: String,
    pub system_response: String,
}

/// Append-only record of completed turns; rounds run 1, 2, 3, ...
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueHistory {
    turns: Vec<DialogueTurn>,
}

impl DialogueHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn turns(&self) -> &[DialogueTurn] {
        &self.turns
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn next_round(&self) -> usize {
        self.turns.len() + 1
    }

    /// Appends the next turn and returns its round index.
    pub fn push(&mut self, user_input: impl Into<String>, system_response: impl Into<String>) -> usize {
        let round = self.next_round();
        self.turns.push(DialogueTurn {
            round,
            user_input: user_input.into(),
            system_response: system_response.into(),
        });
        round
    }

    /// Rebuilds a history, rejecting non-contiguous round numbers.
    pub fn from_turns(turns: Vec<DialogueTurn>) -> Result<Self> {
        for (i, t) in turns.iter().enumerate() {
            if t.round != i + 1 {
                return Err(Error::InvalidArgument(format!("turn {i} has round {}, expected {}", t.round, i + 1)));
            }
        }
        Ok(DialogueHistory { turns })
    }
}

/// Prompt representation handed to the generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRep {
    pub slots: PartialSceneSpec,
    pub tokens: Vec<String>,
    pub source_round: usize,
}

impl PromptRep {
    /// Tokens are the verbose phrase of `slots`, or the single null token when empty.
    pub fn new(slots: PartialSceneSpec, source_round: usize) -> Self {
        let tokens = match scene::phrase(&slots, PhraseStyle::Verbose) {
            Ok(text) => scene::tokenize(&text),
            Err(_) => vec![NULL_TOKEN.to_string()],
        };
        PromptRep { slots, tokens, source_round }
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// Keyword grammar: every slot word sets its slot, later words win.
pub fn parse_utterance(w: &str) -> PartialSceneSpec {
    let mut spec = PartialSceneSpec::default();
    for token in scene::tokenize(w) {
        if let Some(v) = SlotValue::from_word(&token) {
            spec.set(v);
        }
    }
    spec
}

/// Grammar merge of every user input in order, then `w`.
pub fn summarize(history: &DialogueHistory, w: &str) -> PromptRep {
    let mut slots = PartialSceneSpec::default();
    for turn in history.turns() {
        slots = slots.merged_with(&parse_utterance(&turn.user_input));
    }
    slots = slots.merged_with(&parse_utterance(w));
    PromptRep::new(slots, history.next_round())
}

/// Maps the dialogue so far plus the current utterance to a prompt.
pub trait Summarizer: Send + Sync {
    fn summarize(&self, history: &DialogueHistory, w: &str) -> PromptRep;
}

/// Deterministic keyword-grammar summarizer.
#[derive(Debug, Clone, Copy, Default)]
pub struct GrammarSummarizer;

impl Summarizer for GrammarSummarizer {
    fn summarize(&self, history: &DialogueHistory, w: &str) -> PromptRep {
        summarize(history, w)
    }
}

#[derive(Serialize)]
struct SummaryRequest<'a> {
    history: &'a [DialogueTurn],
    current_input: &'a str,
}

#[derive(Deserialize)]
struct SummaryResponse {
    summary_text: String,
}

/// Remote summarizer speaking `{history, current_input} -> {summary_text}` as
/// JSON over HTTP. The summary is parsed with [`parse_utterance`]; any
/// transport or decoding failure falls back to the grammar merge.
pub struct ExternalSummarizer {
    url: String,
    client: reqwest::blocking::Client,
}

impl ExternalSummarizer {
    pub fn new(url: impl Into<String>, timeout: Duration) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| Error::Summarizer(e.to_string()))?;
        Ok(ExternalSummarizer { url: url.into(), client })
    }

    /// The remote summary text, without fallback.
    pub fn request(&self, history: &DialogueHistory, w: &str) -> Result<String> {
        let body = SummaryRequest { history: history.turns(), current_input: w };
        let resp = self
            .client
            .post(&self.url)
            .json(&body)
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::Summarizer(e.to_string()))?;
        let parsed: SummaryResponse = resp.json().map_err(|e| Error::Summarizer(e.to_string()))?;
        Ok(parsed.summary_text)
    }
}

impl Summarizer for ExternalSummarizer {
    fn summarize(&self, history: &DialogueHistory, w: &str) -> PromptRep {
        match self.request(history, w) {
            Ok(text) => PromptRep::new(parse_utterance(&text), history.next_round()),
            Err(_) => summarize(history, w),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoundMode {
    Single,
    Pair,
}

impl RoundMode {
    pub fn candidates(self) -> usize {
        match self {
            RoundMode::Single => 1,
            RoundMode::Pair => 2,
        }
    }
}

/// Dialogue state owned by one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExplicitSession {
    pub history: DialogueHistory,
    pub seed: u64,
}

impl ExplicitSession {
    pub fn new(seed: u64) -> Self {
        ExplicitSession { history: DialogueHistory::new(), seed }
    }

    /// Sampling seed of candidate `index` in `round`.
    pub fn candidate_seed(&self, round: usize, index: usize) -> u64 {
        mix_seed(self.seed, &[round as u64, index as u64])
    }
}

#[derive(Debug, Clone)]
pub struct RoundOutput {
    pub round: usize,
    pub response: String,
    pub candidates: Vec<Image>,
    pub seeds: Vec<u64>,
    pub prompt: PromptRep,
}

/// Fixed acknowledgement naming the current slot interpretation.
pub fn template_response(prompt: &PromptRep) -> String {
    let s = &prompt.slots;
    if s.is_empty() {
        return "Nothing specified yet; generating an open scene.".to_string();
    }
    let known: Vec<String> = s
        .specified_slots()
        .into_iter()
        .map(|slot| format!("{slot} {}", s.get(slot).expect("specified").word()))
        .collect();
    let open: Vec<&str> = s.unspecified_slots().into_iter().map(Slot::name).collect();
    if open.is_empty() {
        format!("Generating with {}.", known.join(", "))
    } else {
        format!("Generating with {}; open: {}.", known.join(", "), open.join(", "))
    }
}

/// Summarize, generate one or two DDIM candidates with distinct seeds, then
/// append the turn.
pub fn run_round(
    session: &mut ExplicitSession,
    generator: &Generator,
    summarizer: &dyn Summarizer,
    w: &str,
    mode: RoundMode,
) -> Result<RoundOutput> {
    let prompt = summarizer.summarize(&session.history, w);
    let round = session.history.next_round();
    let seeds: Vec<u64> = (0..mode.candidates()).map(|i| session.candidate_seed(round, i)).collect();
    let candidates = seeds
        .iter()
        .map(|&s| generator.generate(&prompt, s))
        .collect::<Result<Vec<_>>>()?;
    let response = template_response(&prompt);
    session.history.push(w, response.clone());
    Ok(RoundOutput { round, response, candidates, seeds, prompt })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{Background, Color, Position, Shape};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    #[test]
    fn parse_examples() {
        let p = parse_utterance("a red circle");
        assert_eq!(p.color, Some(Color::Red));
        assert_eq!(p.shape, Some(Shape::Circle));
        assert_eq!(p.position, None);
        assert_eq!(parse_utterance("make it blue instead"), PartialSceneSpec { color: Some(Color::Blue), ..Default::default() });
        assert!(parse_utterance("hello there").is_empty());
        assert_eq!(parse_utterance("put it in the middle").position, Some(Position::Center));
    }

    #[test]
    fn summarize_overrides_earlier_constraints() {
        let mut h = DialogueHistory::new();
        h.push("a red circle", "ok");
        let p = summarize(&h, "actually green");
        assert_eq!(p.slots.color, Some(Color::Green));
        assert_eq!(p.slots.shape, Some(Shape::Circle));
        assert_eq!(p.source_round, 2);
        assert_eq!(p, summarize(&h, "actually green"));
    }

    #[test]
    fn prompt_tokens_follow_verbose_phrase() {
        let slots = parse_utterance("blue square on the right, gradient background");
        let p = PromptRep::new(slots, 1);
        assert_eq!(p.text(), "an image showing the blue square placed right on a gradient background");
        assert_eq!(PromptRep::new(PartialSceneSpec::default(), 1).tokens, vec![NULL_TOKEN.to_string()]);
        assert_eq!(p.slots.background, Some(Background::Gradient));
    }

    #[test]
    fn history_rounds_are_contiguous() {
        let mut h = DialogueHistory::new();
        assert_eq!(h.push("a", "b"), 1);
        assert_eq!(h.push("c", "d"), 2);
        assert!(DialogueHistory::from_turns(h.turns().to_vec()).is_ok());
        let mut bad = h.turns().to_vec();
        bad[1].round = 5;
        assert!(DialogueHistory::from_turns(bad).is_err());
    }

    #[test]
    fn template_names_interpretation() {
        let p = PromptRep::new(parse_utterance("red circle"), 1);
        assert_eq!(template_response(&p), "Generating with color red, shape circle; open: position, background.");
    }

    fn serve_once(body: &'static str) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
                if line == "\r\n" {
                    break;
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let req: serde_json::Value = serde_json::from_slice(&buf).unwrap();
            assert!(req.get("history").is_some() && req.get("current_input").is_some());
            let resp = format!(
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\n\r\n{}",
                body.len(),
                body
            );
            stream.write_all(resp.as_bytes()).unwrap();
        });
        format!("http://{addr}/summarize")
    }

    #[test]
    fn external_summary_is_parsed() {
        let url = serve_once(r#"{"summary_text": "a yellow triangle on the left"}"#);
        let s = ExternalSummarizer::new(url, Duration::from_secs(5)).unwrap();
        let p = s.summarize(&DialogueHistory::new(), "something vague");
        assert_eq!(p.slots.color, Some(Color::Yellow));
        assert_eq!(p.slots.shape, Some(Shape::Triangle));
        assert_eq!(p.slots.position, Some(Position::Left));
    }

    #[test]
    fn external_failure_falls_back_to_grammar() {
        // nothing listens on this port once the listener is dropped
        let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
        let s = ExternalSummarizer::new(format!("http://127.0.0.1:{port}/"), Duration::from_millis(300)).unwrap();
        let mut h = DialogueHistory::new();
        h.push("a red circle", "ok");
        assert_eq!(s.summarize(&h, "on the right"), summarize(&h, "on the right"));

        let url = serve_once(r#"{"unexpected": 1}"#);
        let s = ExternalSummarizer::new(url, Duration::from_secs(5)).unwrap();
        assert_eq!(s.summarize(&h, "green"), summarize(&h, "green"));
    }
}
