use crate::chat::{ChatClient, DecodeParams};
use crate::corpus::{total_variation, unigram, StyleSpec, ALPHABET};
use crate::error::{Error, Result};
use crate::persona::{Level, TraitId};

use super::InventoryItem;

/// Rates how strongly a response agrees with an item, 1 to 5.
pub trait LikertJudge: Send + Sync {
    fn judge(&self, item: &InventoryItem, response: &str) -> Result<u8>;
}

/// Judge for synthetic corpora. The item's agreeing style is the
/// dimension's high style (low style for reverse-scored items). The score
/// falls affinely from 5 to 1 as the total-variation distance between the
/// response's symbol distribution and that style grows from the sampling
/// noise floor to the distance between the dimension's two styles.
pub struct StyleJudge {
    spec: StyleSpec,
}

impl StyleJudge {
    pub fn new(spec: StyleSpec) -> Self {
        Self { spec }
    }

    fn styles(&self, item: &InventoryItem) -> Result<(&[f64], &[f64])> {
        let (agree, other) = if item.reverse_scored { (Level::Low, Level::High) } else { (Level::High, Level::Low) };
        let get = |l| {
            self.spec
                .style(TraitId::new(item.dimension, l))
                .ok_or_else(|| Error::Assessment(format!("no style for {}", TraitId::new(item.dimension, l))))
        };
        Ok((get(agree)?, get(other)?))
    }

    /// Unrounded score in `[1, 5]`.
    pub fn raw_score(&self, item: &InventoryItem, response: &str) -> Result<f64> {
        let (target, anti) = self.styles(item)?;
        let dist = unigram(response)
            .ok_or_else(|| Error::Assessment("response contains no scorable symbols".into()))?;
        let n = response.bytes().filter(|b| ALPHABET.contains(b)).count();
        let floor = expected_sampling_tv(target, n);
        let span = (total_variation(target, anti) - floor).max(1e-12);
        let x = ((total_variation(&dist, target) - floor) / span).clamp(0.0, 1.0);
        Ok(5.0 - 4.0 * x)
    }
}

impl LikertJudge for StyleJudge {
    fn judge(&self, item: &InventoryItem, response: &str) -> Result<u8> {
        Ok(self.raw_score(item, response)?.round() as u8)
    }
}

/// Expected TV distance between `p` and the empirical distribution of `n`
/// draws from it: `½ Σ_i E|X_i/n − p_i|` with `X_i ~ Bin(n, p_i)`.
pub fn expected_sampling_tv(p: &[f64], n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let nf = n as f64;
    let mut total = 0.0;
    for &pi in p {
        if pi <= 0.0 || pi >= 1.0 {
            continue;
        }
        // Binomial pmf by recurrence in log space.
        let (lp, lq) = (pi.ln(), (1.0 - pi).ln());
        let mut log_c = 0.0;
        for k in 0..=n {
            if k > 0 {
                log_c += ((n - k + 1) as f64).ln() - (k as f64).ln();
            }
            let pmf = (log_c + k as f64 * lp + (n - k) as f64 * lq).exp();
            total += pmf * (k as f64 / nf - pi).abs();
        }
    }
    0.5 * total
}

/// Judge backed by a chat endpoint; the reply must contain a digit 1–5.
pub struct ChatJudge<C> {
    client: C,
    params: DecodeParams,
}

impl<C: ChatClient> ChatJudge<C> {
    pub fn new(client: C) -> Self {
        Self { client, params: DecodeParams { temperature: 0.0 } }
    }

    pub fn prompts(item: &InventoryItem, response: &str) -> (String, String) {
        let system = "You rate how well a response agrees with a personality statement. \
                      Reply with one digit from 1 (strongly disagree) to 5 (strongly agree)."
            .to_string();
        let user = format!(
            "Dimension: {}\nStatement: {}\nResponse: {}\nScore:",
            item.dimension.name(),
            item.text,
            response
        );
        (system, user)
    }
}

/// First decimal digit in the reply; anything outside 1..=5 violates the
/// judge contract.
pub fn parse_likert(reply: &str) -> Result<u8> {
    let d = reply
        .chars()
        .find(|c| c.is_ascii_digit())
        .ok_or_else(|| Error::Assessment(format!("judge reply has no score: {reply:?}")))?;
    let v = d as u8 - b'0';
    if (1..=5).contains(&v) {
        Ok(v)
    } else {
        Err(Error::Assessment(format!("judge score {v} outside 1..5")))
    }
}

impl<C: ChatClient> LikertJudge for ChatJudge<C> {
    fn judge(&self, item: &InventoryItem, response: &str) -> Result<u8> {
        let (s, u) = Self::prompts(item, response);
        parse_likert(&self.client.complete(&s, &u, &self.params)?)
    }
}
