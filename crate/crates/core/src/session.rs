//! Session records and their on-disk store: one JSONL file per session plus
//! PNG candidates referenced by relative path.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explicit::{DialogueHistory, DialogueTurn, PromptRep};
use crate::implicit::AmbiguityReport;
use crate::scene::Image;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionMode {
    Inference,
    Training,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Satisfied,
    Abandoned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

impl Choice {
    pub fn index(self) -> usize {
        match self {
            Choice::A => 0,
            Choice::B => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub user_input: String,
    pub response: String,
    pub prompt: PromptRep,
    /// Candidate images relative to the store's image directory.
    pub images: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ambiguity: Option<AmbiguityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preference: Option<Choice>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SessionHeader {
    id: String,
    mode: SessionMode,
    status: SessionStatus,
    seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub id: String,
    pub mode: SessionMode,
    pub status: SessionStatus,
    pub seed: u64,
    pub rounds: Vec<RoundRecord>,
}

impl SessionRecord {
    pub fn new(id: impl Into<String>, mode: SessionMode, seed: u64) -> Self {
        SessionRecord { id: id.into(), mode, status: SessionStatus::Active, seed, rounds: Vec::new() }
    }

    pub fn history(&self) -> DialogueHistory {
        let turns = self
            .rounds
            .iter()
            .map(|r| DialogueTurn { round: r.round, user_input: r.user_input.clone(), system_response: r.response.clone() })
            .collect();
        DialogueHistory::from_turns(turns).expect("rounds are validated on append")
    }

    pub fn next_round(&self) -> usize {
        self.rounds.len() + 1
    }

    pub fn push_round(&mut self, record: RoundRecord) -> Result<()> {
        if record.round != self.next_round() {
            return Err(Error::InvalidArgument(format!("expected round {}, got {}", self.next_round(), record.round)));
        }
        self.rounds.push(record);
        self.validate()
    }

    /// Round numbering is contiguous from 1; inference records hold no
    /// ambiguity reports or preferences.
    pub fn validate(&self) -> Result<()> {
        for (i, r) in self.rounds.iter().enumerate() {
            if r.round != i + 1 {
                return Err(Error::InvalidArgument(format!("round {} at position {}", r.round, i + 1)));
            }
            if self.mode == SessionMode::Inference && (r.ambiguity.is_some() || r.preference.is_some()) {
                return Err(Error::InvalidArgument(format!("inference round {} carries implicit data", r.round)));
            }
            if r.images.len() != r.seeds.len() {
                return Err(Error::InvalidArgument(format!("round {} has {} images for {} seeds", r.round, r.images.len(), r.seeds.len())));
            }
        }
        Ok(())
    }
}

/// Directory layout: `sessions/<id>.jsonl` and `images/<id>/<round>_<k>.png`.
#[derive(Debug, Clone)]
pub struct SessionStore {
    root: PathBuf,
}

impl SessionStore {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(root.join("sessions"))?;
        fs::create_dir_all(root.join("images"))?;
        Ok(SessionStore { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn check_id(id: &str) -> Result<()> {
        if id.is_empty() || !id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_') {
            return Err(Error::InvalidArgument(format!("bad session id {id:?}")));
        }
        Ok(())
    }

    fn session_path(&self, id: &str) -> PathBuf {
        self.root.join("sessions").join(format!("{id}.jsonl"))
    }

    pub fn exists(&self, id: &str) -> bool {
        Self::check_id(id).is_ok() && self.session_path(id).exists()
    }

    /// Header line then one line per round; written to a temporary file and
    /// renamed so readers never see a partial record.
    pub fn persist(&self, session: &SessionRecord) -> Result<()> {
        Self::check_id(&session.id)?;
        session.validate()?;
        let mut buf = Vec::new();
        let header = SessionHeader { id: session.id.clone(), mode: session.mode, status: session.status, seed: session.seed };
        serde_json::to_writer(&mut buf, &header)?;
        buf.push(b'\n');
        for r in &session.rounds {
            serde_json::to_writer(&mut buf, r)?;
            buf.push(b'\n');
        }
        let path = self.session_path(&session.id);
        let tmp = path.with_extension("jsonl.tmp");
        fs::File::create(&tmp)?.write_all(&buf)?;
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(&self, id: &str) -> Result<SessionRecord> {
        Self::check_id(id)?;
        let file = fs::File::open(self.session_path(id)).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::SessionNotFound(id.to_string()),
            _ => e.into(),
        })?;
        let mut lines = BufReader::new(file).lines();
        let header: SessionHeader = match lines.next() {
            Some(line) => serde_json::from_str(&line?)?,
            None => return Err(Error::InvalidArgument(format!("session {id} file is empty"))),
        };
        let mut session = SessionRecord::new(header.id, header.mode, header.seed);
        session.status = header.status;
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                session.rounds.push(serde_json::from_str(&line)?);
            }
        }
        session.validate()?;
        Ok(session)
    }

    pub fn list(&self) -> Result<Vec<String>> {
        let mut ids: Vec<String> = fs::read_dir(self.root.join("sessions"))?
            .filter_map(|e| e.ok())
            .filter_map(|e| e.file_name().to_str().and_then(|n| n.strip_suffix(".jsonl")).map(str::to_string))
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// Writes a candidate PNG and returns its relative reference.
    pub fn save_image(&self, id: &str, round: usize, index: usize, image: &Image) -> Result<String> {
        Self::check_id(id)?;
        let rel = format!("{id}/{round}_{index}.png");
        let path = self.root.join("images").join(&rel);
        fs::create_dir_all(path.parent().expect("image path has a parent"))?;
        fs::write(path, image.to_png()?)?;
        Ok(rel)
    }

    /// Resolves a relative image reference, refusing anything that escapes
    /// the image directory.
    pub fn image_path(&self, rel: &str) -> Result<PathBuf> {
        let p = Path::new(rel);
        if rel.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
            return Err(Error::InvalidArgument(format!("bad image path {rel:?}")));
        }
        Ok(self.root.join("images").join(p))
    }

    pub fn load_image(&self, rel: &str) -> Result<Vec<u8>> {
        Ok(fs::read(self.image_path(rel)?)?)
    }
}
