//! Byte-level tokenizer with four reserved ids.

use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueRecord, Speaker};
use crate::error::{Error, Result};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const SEP: usize = 258;
pub const PAD: usize = 259;
pub const VOCAB_SIZE: usize = 260;

/// Token ids plus a mask marking discloser-turn positions (the positions
/// whose token the LM loss is asked to predict).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Next-token targets and loss mask for positions `0..len-1`.
    pub fn shifted(&self) -> (Vec<usize>, Vec<bool>) {
        (self.ids[1..].to_vec(), self.mask[1..].to_vec())
    }

    pub fn masked_count(&self) -> usize {
        self.mask.iter().skip(1).filter(|&&m| m).count()
    }

    /// Keeps the first `max_len` tokens.
    pub fn truncate(&mut self, max_len: usize) {
        self.ids.truncate(max_len);
        self.mask.truncate(max_len);
    }
}

/// `[BOS, bytes.., EOS]` with an all-false mask.
pub fn encode(text: &str) -> TokenSeq {
    encode_bytes(text.as_bytes())
}

pub fn encode_bytes(bytes: &[u8]) -> TokenSeq {
    let mut ids = Vec::with_capacity(bytes.len() + 2);
    ids.push(BOS);
    ids.extend(bytes.iter().map(|&b| b as usize));
    ids.push(EOS);
    let mask = vec![false; ids.len()];
    TokenSeq { ids, mask }
}

/// Bytes of the non-special ids; `SEP` becomes a newline, `BOS`, `EOS` and
/// `PAD` are dropped.
pub fn decode_bytes(ids: &[usize]) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(ids.len());
    for &id in ids {
        match id {
            0..=255 => out.push(id as u8),
            SEP => out.push(b'\n'),
            BOS | EOS | PAD => {}
            _ => return Err(Error::Tokenizer(format!("id {id} outside vocabulary of {VOCAB_SIZE}"))),
        }
    }
    Ok(out)
}

pub fn decode(ids: &[usize]) -> Result<String> {
    Ok(String::from_utf8_lossy(&decode_bytes(ids)?).into_owned())
}

/// Encodes a dialogue as `BOS [tag] turn SEP turn SEP .. turn EOS`.
/// Discloser text bytes and the separator closing each discloser turn are
/// masked in. The optional tag is plain unmasked text right after `BOS`.
pub fn encode_dialogue(record: &DialogueRecord, tag: Option<&str>) -> TokenSeq {
    let mut ids = vec![BOS];
    let mut mask = vec![false];
    if let Some(tag) = tag {
        for b in tag.bytes() {
            ids.push(b as usize);
            mask.push(false);
        }
    }
    let last = record.turns.len().saturating_sub(1);
    for (i, turn) in record.turns.iter().enumerate() {
        let on = turn.speaker == Speaker::Discloser;
        for b in turn.text.bytes() {
            ids.push(b as usize);
            mask.push(on);
        }
        ids.push(if i == last { EOS } else { SEP });
        mask.push(on);
    }
    TokenSeq { ids, mask }
}

/// Textual trait tag used by the single-adapter baseline, e.g. `"[N+] "`.
pub fn trait_tag(t: crate::persona::TraitId) -> String {
    format!("[{}] ", t.code())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Turn;
    use crate::persona::TraitId;

    #[test]
    fn empty_and_ascii() {
        assert_eq!(encode("").ids, vec![BOS, EOS]);
        assert_eq!(encode("ab").ids, vec![BOS, 97, 98, EOS]);
        assert_eq!(decode(&encode("héllo").ids).unwrap(), "héllo");
        assert!(decode(&[300]).is_err());
    }

    #[test]
    fn dialogue_mask_covers_discloser_turns() {
        let rec = DialogueRecord {
            trait_id: "E+".parse::<TraitId>().unwrap(),
            topic: "t".into(),
            turns: vec![
                Turn { speaker: Speaker::Questioner, text: "hi".into() },
                Turn { speaker: Speaker::Discloser, text: "yo".into() },
            ],
        };
        let seq = encode_dialogue(&rec, None);
        assert_eq!(seq.ids, vec![BOS, 104, 105, SEP, 121, 111, EOS]);
        assert_eq!(seq.mask, vec![false, false, false, false, true, true, true]);
        let (targets, m) = seq.shifted();
        assert_eq!(targets.len(), 6);
        assert_eq!(m.iter().filter(|&&b| b).count(), 3);
        let tagged = encode_dialogue(&rec, Some("[E+] "));
        assert_eq!(tagged.len(), seq.len() + 5);
        assert_eq!(decode(&tagged.ids).unwrap(), "[E+] hi\nyo");
    }
}
