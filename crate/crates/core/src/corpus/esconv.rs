//! JSON dataset reading and writing.
//!
//! The file is an array of dialogues:
//!
//! ```json
//! [{"id": "d1", "utterances": [
//!     {"speaker": "seeker", "text": "I lost my job.", "emotion": "sadness"},
//!     {"speaker": "supporter", "text": "That sounds hard.", "strategy": "reflection_of_feelings",
//!      "keywords": ["hard"]}
//! ]}]
//! ```
//!
//! The raw ESConv spellings (`dialog`, `content`, `annotation.strategy`,
//! `usr`/`sys`, display-case strategy names) are accepted as well.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Emotion, Speaker, Strategy, Utterance};
use crate::error::{Error, Result};

#[derive(Deserialize)]
struct RawDialogue {
    id: Option<String>,
    #[serde(alias = "dialog")]
    utterances: Vec<RawUtterance>,
}

#[derive(Deserialize)]
struct RawUtterance {
    speaker: String,
    #[serde(alias = "content")]
    text: String,
    strategy: Option<String>,
    emotion: Option<String>,
    keywords: Option<Vec<String>>,
    annotation: Option<RawAnnotation>,
}

#[derive(Deserialize)]
struct RawAnnotation {
    strategy: Option<String>,
}

#[derive(Serialize)]
struct OutDialogue<'a> {
    id: &'a str,
    utterances: Vec<OutUtterance<'a>>,
}

#[derive(Serialize)]
struct OutUtterance<'a> {
    speaker: &'static str,
    text: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    strategy: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    emotion: Option<&'static str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    keywords: Option<&'a [String]>,
}

pub fn load_esconv(path: &Path) -> Result<Vec<Dialogue>> {
    let text = fs::read_to_string(path)?;
    parse_esconv(&text)
}

pub fn parse_esconv(text: &str) -> Result<Vec<Dialogue>> {
    let raw: Vec<RawDialogue> = serde_json::from_str(text).map_err(|e| Error::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    raw.into_iter()
        .enumerate()
        .map(|(i, d)| convert(i, d))
        .collect()
}

fn convert(index: usize, raw: RawDialogue) -> Result<Dialogue> {
    let id = raw.id.unwrap_or_else(|| format!("dialogue-{index}"));
    let mut utterances = Vec::with_capacity(raw.utterances.len());
    for (turn, u) in raw.utterances.into_iter().enumerate() {
        let at = |e: Error| match e {
            Error::Validation(m) => Error::Validation(format!("{id} turn {turn}: {m}")),
            other => other,
        };
        let speaker: Speaker = u.speaker.parse().map_err(at)?;
        let strategy_name = u.strategy.or(u.annotation.and_then(|a| a.strategy));
        let strategy = strategy_name
            .map(|s| s.parse::<Strategy>())
            .transpose()
            .map_err(at)?;
        let emotion = u.emotion.map(|s| s.parse::<Emotion>()).transpose().map_err(at)?;
        let utt = Utterance {
            speaker,
            text: u.text,
            strategy,
            emotion,
            keywords: u.keywords,
        };
        utt.validate().map_err(at)?;
        utterances.push(utt);
    }
    Ok(Dialogue { id, utterances })
}

pub fn to_json(dialogues: &[Dialogue]) -> Result<String> {
    let out: Vec<OutDialogue> = dialogues
        .iter()
        .map(|d| OutDialogue {
            id: &d.id,
            utterances: d
                .utterances
                .iter()
                .map(|u| OutUtterance {
                    speaker: u.speaker.as_str(),
                    text: &u.text,
                    strategy: u.strategy.map(Strategy::as_str),
                    emotion: u.emotion.map(Emotion::as_str),
                    keywords: u.keywords.as_deref(),
                })
                .collect(),
        })
        .collect();
    Ok(serde_json::to_string_pretty(&out)?)
}

pub fn save_esconv(path: &Path, dialogues: &[Dialogue]) -> Result<()> {
    let mut s = to_json(dialogues)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}
