//! Dataset ingestion, preprocessing, annotation and example construction.

pub mod cache;
pub mod esconv;
pub mod example;
mod labels;
pub mod lexicon;
pub mod preprocess;
pub mod synthetic;
pub mod vocab;
pub mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use esconv::{load_esconv, parse_esconv, save_esconv};
pub use example::{annotate, prepare_context, prepare_example, NodeSpec, PrepareOptions, PreparedExample};
pub use labels::{Emotion, Speaker, Strategy};
pub use preprocess::{truncate_and_split, Segmentation, Split};
pub use synthetic::synthetic_corpus;
pub use vocab::{TokenId, Vocab, VocabOptions};
pub use window::{make_window, window_over, TransitionWindow};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
    pub strategy: Option<Strategy>,
    pub emotion: Option<Emotion>,
    /// Annotated keywords as surface tokens; `None` until annotation.
    pub keywords: Option<Vec<String>>,
}

impl Utterance {
    pub fn seeker(text: impl Into<String>) -> Self {
        Utterance {
            speaker: Speaker::Seeker,
            text: text.into(),
            strategy: None,
            emotion: None,
            keywords: None,
        }
    }

    pub fn supporter(text: impl Into<String>, strategy: Strategy) -> Self {
        Utterance {
            speaker: Speaker::Supporter,
            text: text.into(),
            strategy: Some(strategy),
            emotion: None,
            keywords: None,
        }
    }

    pub fn with_emotion(mut self, emotion: Emotion) -> Self {
        self.emotion = Some(emotion);
        self
    }

    /// Strategy labels only on supporter turns, emotion labels only on seeker turns.
    pub fn validate(&self) -> Result<()> {
        if self.strategy.is_some() && self.speaker != Speaker::Supporter {
            return Err(Error::Validation(format!(
                "strategy {} on a {} turn",
                self.strategy.unwrap(),
                self.speaker
            )));
        }
        if self.emotion.is_some() && self.speaker != Speaker::Seeker {
            return Err(Error::Validation(format!(
                "emotion {} on a {} turn",
                self.emotion.unwrap(),
                self.speaker
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub id: String,
    pub utterances: Vec<Utterance>,
}
