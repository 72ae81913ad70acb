//! Four-prompt reasoning chain: an object head (which part interacts, and
//! why geometrically) and an affordance head (the observed interaction plus
//! two analogous ones).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::InteractionImage;
use crate::error::{Error, Result};
use crate::mllm::{cache_get, cache_put, check_answers, ChatBackend};

/// Default prompt templates; `{object}` is replaced by the object category.
pub const PROMPT_TEMPLATES: [&str; 4] = [
    "Point out which part of the {object} in the image interacts with the person.",
    "Explain why this part can interact from the geometric structure of the {object}.",
    "Describe the interaction between {object} and the person.",
    "List two interactions that describe additional common interactions that the {object} can interact with people.",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PromptTemplates(pub [String; 4]);

impl Default for PromptTemplates {
    fn default() -> Self {
        Self(PROMPT_TEMPLATES.map(String::from))
    }
}

impl PromptTemplates {
    pub fn build(&self, object_category: &str) -> Result<Vec<String>> {
        if object_category.trim().is_empty() {
            return Err(Error::Argument("object category is empty".into()));
        }
        Ok(self
            .0
            .iter()
            .map(|t| t.replace("{object}", object_category))
            .collect())
    }
}

/// The default four prompts for `object_category`.
pub fn build_prompt_chain(object_category: &str) -> Result<Vec<String>> {
    PromptTemplates::default().build(object_category)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub prompt: String,
    pub answer: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReasoningTranscript {
    pub image_id: String,
    pub object_category: String,
    pub turns: Vec<Turn>,
}

impl ReasoningTranscript {
    pub fn validate(&self) -> Result<()> {
        if self.turns.len() != 4 {
            return Err(Error::Validation(format!(
                "transcript `{}` has {} turns, expected 4",
                self.image_id,
                self.turns.len()
            )));
        }
        if let Some(i) = self
            .turns
            .iter()
            .position(|t| t.prompt.trim().is_empty() || t.answer.trim().is_empty())
        {
            return Err(Error::Validation(format!(
                "transcript `{}` turn {} is incomplete",
                self.image_id,
                i + 1
            )));
        }
        Ok(())
    }
}

/// Parsed knowledge for one image.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub image_id: String,
    /// Interacting part and its geometric attributes.
    pub object_text: String,
    /// The observed interaction followed by two analogous ones.
    pub affordance_texts: [String; 3],
}

/// Returns the cached transcript for `image`, or converses and caches one.
/// Nothing is cached unless all four answers arrived.
pub fn run_chain(
    image: &InteractionImage,
    backend: &dyn ChatBackend,
    templates: &PromptTemplates,
    cache_dir: &Path,
) -> Result<ReasoningTranscript> {
    if let Some(t) = cache_get(&image.id, cache_dir) {
        return Ok(t);
    }
    let prompts = templates.build(&image.object_category)?;
    let answers = backend.converse(image, &prompts)?;
    check_answers(&answers, prompts.len())?;
    let transcript = ReasoningTranscript {
        image_id: image.id.clone(),
        object_category: image.object_category.clone(),
        turns: prompts
            .into_iter()
            .zip(answers)
            .map(|(prompt, answer)| Turn { prompt, answer })
            .collect(),
    };
    cache_put(&transcript, cache_dir)?;
    Ok(transcript)
}

/// Splits "1. a 2. b" style enumerations. Markers must count up from 1 and
/// sit at the start of the text or after whitespace.
fn split_numbered(text: &str) -> Vec<String> {
    let bytes = text.as_bytes();
    let mut markers = Vec::new(); // (marker start, content start)
    let mut expected = 1u32;
    let mut i = 0;
    while i < bytes.len() {
        let at_boundary = i == 0 || bytes[i - 1].is_ascii_whitespace();
        if at_boundary && bytes[i].is_ascii_digit() {
            let mut j = i;
            while j < bytes.len() && bytes[j].is_ascii_digit() {
                j += 1;
            }
            let followed = j + 1 < bytes.len()
                && (bytes[j] == b'.' || bytes[j] == b')')
                && bytes[j + 1].is_ascii_whitespace();
            if followed && text[i..j].parse::<u32>().ok() == Some(expected) {
                markers.push((i, j + 1));
                expected += 1;
                i = j + 1;
                continue;
            }
        }
        i += 1;
    }
    let mut items = Vec::new();
    for (k, &(_, start)) in markers.iter().enumerate() {
        let end = markers.get(k + 1).map(|m| m.0).unwrap_or(text.len());
        let item = text[start..end].trim();
        if !item.is_empty() {
            items.push(item.to_string());
        }
    }
    items
}

fn split_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(|l| {
            l.trim()
                .trim_start_matches(['-', '*', '•', '·'])
                .trim()
                .to_string()
        })
        .filter(|l| !l.is_empty())
        .collect()
}

fn split_semicolons(text: &str) -> Vec<String> {
    text.split(';')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

/// Extracts the two listed interactions from the fourth answer, trying
/// numbered markers, then bullet/newline lists, then semicolons.
pub fn split_interactions(answer: &str) -> Result<[String; 2]> {
    for strategy in [split_numbered, split_lines, split_semicolons] {
        let items = strategy(answer);
        if items.len() >= 2 {
            let mut it = items.into_iter();
            return Ok([it.next().unwrap(), it.next().unwrap()]);
        }
    }
    Err(Error::TranscriptParse {
        msg: "could not find two listed interactions".into(),
        raw: answer.to_string(),
    })
}

pub fn parse_transcript(t: &ReasoningTranscript) -> Result<KnowledgeRecord> {
    t.validate()?;
    let a = |i: usize| t.turns[i].answer.trim();
    let [item1, item2] = split_interactions(&t.turns[3].answer)?;
    Ok(KnowledgeRecord {
        image_id: t.image_id.clone(),
        object_text: format!("{} {}", a(0), a(1)),
        affordance_texts: [a(2).to_string(), item1, item2],
    })
}
