//! Dual-role dialogue synthesis and parsing of the generator's script.

use std::sync::OnceLock;

use persona_core::chat::{ChatClient, DecodeParams};
use persona_core::corpus::{DialogueRecord, Speaker, Turn};
use regex::Regex;

use crate::error::{PipelineError, Result};
use crate::prompts::{synthesis_system, synthesis_user};
use crate::topics::SeedTopic;

fn marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^\s*[*_]*\s*(character\s*1|character\s*2|q|a)\s*[*_]*\s*:\s*[*_]*\s*(.*?)\s*$").unwrap()
    })
}

fn parse_error(line: usize, message: impl Into<String>) -> PipelineError {
    PipelineError::DialogueParse { line, message: message.into() }
}

/// Splits a generated script into turns. `Character1:`/`Q:` lines open a
/// questioner turn and `Character2:`/`A:` lines a discloser turn; other
/// non-blank lines continue the open turn, and text before the first
/// marker is ignored. The script must start with the questioner and
/// alternate speakers.
pub fn parse_dialogue(text: &str) -> Result<Vec<Turn>> {
    let mut turns: Vec<(usize, Turn)> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let n = i + 1;
        if let Some(c) = marker_re().captures(line) {
            let tag = c[1].to_lowercase().replace(char::is_whitespace, "");
            let speaker = if tag == "character1" || tag == "q" { Speaker::Questioner } else { Speaker::Discloser };
            match turns.last() {
                None if speaker == Speaker::Discloser => {
                    return Err(parse_error(n, "dialogue opens with Character2 instead of a question"))
                }
                Some((_, prev)) if prev.speaker == speaker => {
                    let who = if speaker == Speaker::Questioner { "Character1" } else { "Character2" };
                    return Err(parse_error(n, format!("two consecutive {who} turns")));
                }
                _ => {}
            }
            turns.push((n, Turn { speaker, text: c[2].to_string() }));
        } else if let Some((_, turn)) = turns.last_mut() {
            let extra = line.trim();
            if !extra.is_empty() {
                if !turn.text.is_empty() {
                    turn.text.push(' ');
                }
                turn.text.push_str(extra);
            }
        }
    }
    if let Some((n, _)) = turns.iter().find(|(_, t)| t.text.trim().is_empty()) {
        return Err(parse_error(*n, "empty turn"));
    }
    if turns.len() < 2 {
        return Err(parse_error(text.lines().count(), format!("found {} turn(s), need at least 2", turns.len())));
    }
    Ok(turns.into_iter().map(|(_, t)| t).collect())
}

/// Asks the generator for a dialogue on the topic and parses it.
pub fn synthesize_dialogue(topic: &SeedTopic, client: &dyn ChatClient, params: &DecodeParams) -> Result<DialogueRecord> {
    if topic.is_neutral() {
        return Err(PipelineError::Config(format!("topic {} is neutral", topic.source_ref)));
    }
    let reply = client.complete(&synthesis_system(topic.trait_id), &synthesis_user(topic.trait_id, &topic.sentence), params)?;
    let record = DialogueRecord { trait_id: topic.trait_id, topic: topic.sentence.clone(), turns: parse_dialogue(&reply)? };
    record.validate().map_err(|m| parse_error(0, m))?;
    Ok(record)
}

/// `Character1: ..` / `Character2: ..` lines, the layout the validation
/// prompt expects.
pub fn render_dialogue(record: &DialogueRecord) -> String {
    record
        .turns
        .iter()
        .map(|t| {
            let who = if t.speaker == Speaker::Questioner { "Character1" } else { "Character2" };
            format!("{who}: {}", t.text)
        })
        .collect::<Vec<_>>()
        .join("\n")
}
