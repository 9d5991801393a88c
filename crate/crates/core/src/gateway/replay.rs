//! Transcript recording and replay.
//!
//! A transcript is a JSON-lines file, one completed request per line. Replay
//! looks entries up by request fingerprint, so any drift in prompts, model
//! or temperature surfaces as a replay miss instead of a silent mismatch.

use std::collections::HashMap;
use std::fs::OpenOptions;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{fingerprint, ChatTurn, Completion, CompletionParams, Conversation, GatewayError, Provider, Usage};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub fingerprint: String,
    pub model: String,
    pub temperature: f64,
    pub turns: Vec<ChatTurn>,
    pub response: String,
    pub usage: Usage,
}

impl TranscriptEntry {
    pub fn new(conv: &Conversation, params: &CompletionParams, completion: &Completion) -> Self {
        Self {
            fingerprint: fingerprint(&params.model_id, params.temperature, &conv.turns),
            model: params.model_id.clone(),
            temperature: params.temperature,
            turns: conv.turns.clone(),
            response: completion.text.clone(),
            usage: completion.usage,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    index: HashMap<String, usize>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, fingerprint: &str) -> Option<&TranscriptEntry> {
        self.index.get(fingerprint).map(|&i| &self.entries[i])
    }

    /// Adds an entry. Returns `false` (and leaves the transcript unchanged)
    /// when its fingerprint is already present.
    pub fn push(&mut self, entry: TranscriptEntry) -> Result<bool, GatewayError> {
        let expected = fingerprint(&entry.model, entry.temperature, &entry.turns);
        if expected != entry.fingerprint {
            return Err(GatewayError::Transcript(format!(
                "entry fingerprint {} does not match its request ({expected})",
                entry.fingerprint
            )));
        }
        if self.index.contains_key(&entry.fingerprint) {
            return Ok(false);
        }
        self.index.insert(entry.fingerprint.clone(), self.entries.len());
        self.entries.push(entry);
        Ok(true)
    }

    /// Parses JSON lines. A repeated fingerprint is skipped when its response
    /// and usage are identical to the first occurrence and rejected otherwise.
    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, GatewayError> {
        let mut t = Transcript::new();
        for (n, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| GatewayError::Transcript(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry =
                serde_json::from_str(&line).map_err(|e| GatewayError::Transcript(format!("line {}: {e}", n + 1)))?;
            let fp = entry.fingerprint.clone();
            let (response, usage) = (entry.response.clone(), entry.usage);
            if !t.push(entry)? {
                let first = t.get(&fp).expect("present after a rejected push");
                if first.response != response || first.usage != usage {
                    return Err(GatewayError::Transcript(format!(
                        "line {}: conflicting entry for fingerprint {fp}",
                        n + 1
                    )));
                }
            }
        }
        Ok(t)
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let f = std::fs::File::open(path).map_err(|e| GatewayError::Transcript(format!("{}: {e}", path.display())))?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("entry serializes") + "\n")
            .collect()
    }
}

pub struct ReplayProvider {
    transcript: Transcript,
}

impl ReplayProvider {
    pub fn new(transcript: Transcript) -> Self {
        Self { transcript }
    }
}

impl Provider for ReplayProvider {
    fn complete(&self, conv: &Conversation, params: &CompletionParams) -> Result<Completion, GatewayError> {
        let fp = fingerprint(&params.model_id, params.temperature, &conv.turns);
        let entry = self.transcript.get(&fp).ok_or(GatewayError::ReplayMiss { fingerprint: fp })?;
        Ok(Completion {
            text: entry.response.clone(),
            usage: entry.usage,
        })
    }
}

/// Wraps a provider and records every completion, optionally appending each
/// new entry to a JSON-lines file as it arrives.
pub struct RecordingProvider<P> {
    inner: P,
    state: Mutex<(Transcript, Option<PathBuf>)>,
}

impl<P: Provider> RecordingProvider<P> {
    pub fn new(inner: P, sink: Option<PathBuf>) -> Self {
        Self {
            inner,
            state: Mutex::new((Transcript::new(), sink)),
        }
    }

    pub fn transcript(&self) -> Transcript {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).0.clone()
    }
}

impl<P: Provider> Provider for RecordingProvider<P> {
    fn complete(&self, conv: &Conversation, params: &CompletionParams) -> Result<Completion, GatewayError> {
        let completion = self.inner.complete(conv, params)?;
        let entry = TranscriptEntry::new(conv, params, &completion);
        let mut state = self.state.lock().unwrap_or_else(|e| e.into_inner());
        let line = serde_json::to_string(&entry).expect("entry serializes");
        if state.0.push(entry)? {
            if let Some(path) = &state.1 {
                let mut f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| GatewayError::Transcript(format!("{}: {e}", path.display())))?;
                writeln!(f, "{line}").map_err(|e| GatewayError::Transcript(e.to_string()))?;
            }
        }
        Ok(completion)
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Rule, ScriptedProvider};
    use super::*;

    fn recorded() -> (Transcript, Conversation, CompletionParams) {
        let rec = RecordingProvider::new(
            ScriptedProvider::new(vec![Rule::contains("expert", ["1. a\n2. b\n3. c\n4. d\n5. e"])]),
            None,
        );
        let conv = Conversation::single("Simulate three expert teachers");
        let params = CompletionParams::default();
        rec.complete(&conv, &params).unwrap();
        rec.complete(&conv, &params).unwrap();
        (rec.transcript(), conv, params)
    }

    #[test]
    fn replay_returns_recorded_text_and_usage() {
        let (t, conv, params) = recorded();
        assert_eq!(t.len(), 1);
        let replay = ReplayProvider::new(Transcript::from_reader(t.to_jsonl().as_bytes()).unwrap());
        let c = replay.complete(&conv, &params).unwrap();
        assert_eq!(c.text, t.entries()[0].response);
        assert_eq!(c.usage, t.entries()[0].usage);
    }

    #[test]
    fn altered_temperature_misses() {
        let (t, conv, params) = recorded();
        let replay = ReplayProvider::new(t);
        let hot = CompletionParams {
            temperature: 0.7,
            ..params
        };
        assert!(matches!(replay.complete(&conv, &hot), Err(GatewayError::ReplayMiss { .. })));
    }

    #[test]
    fn rejects_conflicts_and_tampering() {
        let (t, _, _) = recorded();
        let line = t.to_jsonl();
        let dup = format!("{line}{line}");
        assert_eq!(Transcript::from_reader(dup.as_bytes()).unwrap().len(), 1);
        let mut other = t.entries()[0].clone();
        other.response = "something else".into();
        let conflict = format!("{line}{}\n", serde_json::to_string(&other).unwrap());
        assert!(Transcript::from_reader(conflict.as_bytes()).is_err());
        let tampered = line.replace("Simulate", "Stimulate");
        assert!(Transcript::from_reader(tampered.as_bytes()).is_err());
    }

    #[test]
    fn recording_appends_to_sink() {
        let dir = std::env::temp_dir().join(format!("kcforge-rec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.jsonl");
        let _ = std::fs::remove_file(&path);
        let rec = RecordingProvider::new(ScriptedProvider::new(vec![Rule::any(["r"])]), Some(path.clone()));
        for p in ["a", "b", "a"] {
            rec.complete(&Conversation::single(p), &CompletionParams::default()).unwrap();
        }
        let loaded = Transcript::load(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
