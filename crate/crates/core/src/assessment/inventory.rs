use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::persona::Dimension;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InventoryItem {
    pub id: String,
    pub dimension: Dimension,
    pub text: String,
    #[serde(default)]
    pub reverse_scored: bool,
}

impl InventoryItem {
    /// Maps a judged score onto the dimension's direction (`s ↦ 6 − s` for
    /// reverse-scored items).
    pub fn orient(&self, s: u8) -> u8 {
        if self.reverse_scored {
            6 - s
        } else {
            s
        }
    }
}

/// Reads a JSON list of items; ids must be unique.
pub fn load_inventory(path: &Path) -> Result<Vec<InventoryItem>> {
    let items: Vec<InventoryItem> = serde_json::from_str(&fs::read_to_string(path)?)?;
    let mut ids: Vec<&str> = items.iter().map(|i| i.id.as_str()).collect();
    ids.sort_unstable();
    if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
        return Err(Error::Assessment(format!("duplicate item id {}", w[0])));
    }
    if items.is_empty() {
        return Err(Error::Assessment("inventory is empty".into()));
    }
    Ok(items)
}

/// Twenty prompts, four per dimension, half of them reverse-scored. They
/// drive the closed loop on synthetic corpora; real instruments are
/// supplied through [`load_inventory`].
pub fn standard_inventory() -> Vec<InventoryItem> {
    let raw: [(Dimension, &str, bool); 20] = [
        (Dimension::Openness, "Tell me about an idea you keep coming back to.", false),
        (Dimension::Openness, "What would you try if nothing held you back?", false),
        (Dimension::Openness, "Do you prefer doing things the usual way?", true),
        (Dimension::Openness, "How do you feel about abstract discussions?", true),
        (Dimension::Conscientiousness, "How do you plan a busy week?", false),
        (Dimension::Conscientiousness, "What happens when you make a promise?", false),
        (Dimension::Conscientiousness, "Do chores tend to pile up for you?", true),
        (Dimension::Conscientiousness, "How often do you lose track of things?", true),
        (Dimension::Extraversion, "What is your ideal Saturday night?", false),
        (Dimension::Extraversion, "How do you act when meeting new people?", false),
        (Dimension::Extraversion, "Do you need time alone after a party?", true),
        (Dimension::Extraversion, "How do you feel about speaking up in groups?", true),
        (Dimension::Agreeableness, "How do you respond when a friend asks for help?", false),
        (Dimension::Agreeableness, "What do you do after an argument?", false),
        (Dimension::Agreeableness, "Do people's problems interest you?", true),
        (Dimension::Agreeableness, "How do you handle someone you disagree with?", true),
        (Dimension::Neuroticism, "How do you feel before a big deadline?", false),
        (Dimension::Neuroticism, "What goes through your mind when plans change?", false),
        (Dimension::Neuroticism, "How do you stay calm under pressure?", true),
        (Dimension::Neuroticism, "How quickly do you recover from a setback?", true),
    ];
    raw.iter()
        .enumerate()
        .map(|(i, (d, text, rev))| InventoryItem {
            id: format!("{}{}", d.letter(), i % 4 + 1),
            dimension: *d,
            text: (*text).to_string(),
            reverse_scored: *rev,
        })
        .collect()
}
