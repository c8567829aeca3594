//! Prompt templates. Recommendation prompts read
//!
//! ```text
//! will user like target ? user <User_ID> : liked T1 , T2 ; disliked none ; target T <Item_ID> <Warm_ID> ; answer :
//! ```
//!
//! where each placeholder is present only when requested; dropping all three
//! gives the text-only prompt used for supervised fine-tuning. Item prompts
//! read `describe item : T ; it is`.

use serde::{Deserialize, Serialize};

use crate::data::InteractionDataset;
use crate::error::{Error, Result};

use super::tokenizer::{Tokenizer, ITEM_ID, USER_ID, WARM_ID};

pub const INSTRUCTION: &str = "will user like target ?";
pub const EMPTY_SLOT: &str = "none";
pub const UNKNOWN_TITLE: &str = "unknown";
const ITEM_HEAD: &str = "describe item :";
const ITEM_TAIL: &str = "; it is";

/// Which placeholders a prompt carries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slots {
    pub user: bool,
    pub item: bool,
    pub warm: bool,
}

impl Slots {
    pub const NONE: Slots = Slots {
        user: false,
        item: false,
        warm: false,
    };
    pub const ALL: Slots = Slots {
        user: true,
        item: true,
        warm: true,
    };

    pub fn count(&self) -> usize {
        self.user as usize + self.item as usize + self.warm as usize
    }
}

/// Words used by the templates, for vocabulary construction.
pub fn template_corpus() -> Vec<String> {
    let rec = render(&[], &[], "", Slots::NONE);
    vec![rec, format!("{ITEM_HEAD} {UNKNOWN_TITLE} {ITEM_TAIL}"), ", none".into()]
}

fn render(liked: &[&str], disliked: &[&str], target: &str, slots: Slots) -> String {
    let list = |v: &[&str]| if v.is_empty() { EMPTY_SLOT.to_string() } else { v.join(" , ") };
    let mut s = format!("{INSTRUCTION} user");
    if slots.user {
        s.push(' ');
        s.push_str(USER_ID);
    }
    s.push_str(&format!(" : liked {} ; disliked {} ; target {target}", list(liked), list(disliked)));
    if slots.item {
        s.push(' ');
        s.push_str(ITEM_ID);
    }
    if slots.warm {
        s.push(' ');
        s.push_str(WARM_ID);
    }
    s.push_str(" ; answer :");
    s
}

/// Recommendation prompt from `(title, label)` history (oldest first) and
/// the target title.
pub fn recommendation_text(history: &[(&str, u8)], target: &str, slots: Slots) -> String {
    let liked: Vec<&str> = history.iter().filter(|h| h.1 == 1).map(|h| h.0).collect();
    let disliked: Vec<&str> = history.iter().filter(|h| h.1 != 1).map(|h| h.0).collect();
    render(&liked, &disliked, target, slots)
}

/// Token ids plus placeholder positions of an encoded recommendation prompt.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedPrompt {
    pub ids: Vec<usize>,
    pub user_pos: Option<usize>,
    pub item_pos: Option<usize>,
    pub warm_pos: Option<usize>,
}

impl EncodedPrompt {
    fn locate(tok: &Tokenizer, ids: Vec<usize>) -> Self {
        let r = tok.reserved();
        let find = |id: usize| ids.iter().position(|&x| x == id);
        Self {
            user_pos: find(r.user),
            item_pos: find(r.item),
            warm_pos: find(r.warm),
            ids,
        }
    }
}

/// Encodes the prompt for interaction `k`, keeping the `k_hist` most recent
/// earlier interactions of the user and dropping the oldest of them until
/// the prompt fits in `max_len`.
pub fn encode_interaction(
    tok: &Tokenizer,
    ds: &InteractionDataset,
    k: usize,
    k_hist: usize,
    slots: Slots,
    max_len: usize,
) -> Result<EncodedPrompt> {
    let it = &ds.interactions[k];
    let hist: Vec<(&str, u8)> = ds
        .history_before(k, k_hist)
        .iter()
        .map(|&h| (ds.title(ds.interactions[h].item), ds.interactions[h].label))
        .collect();
    let target = ds.title(it.item);
    let target = if target.is_empty() { UNKNOWN_TITLE } else { target };
    for start in 0..=hist.len() {
        let ids = tok.encode(&recommendation_text(&hist[start..], target, slots));
        if ids.len() <= max_len {
            return Ok(EncodedPrompt::locate(tok, ids));
        }
    }
    Err(Error::Overlength {
        len: tok.encode(&recommendation_text(&[], target, slots)).len(),
        max_len,
    })
}

/// Item-description prompt; long titles lose their leading words so the
/// prompt fits in `max_len`.
pub fn item_prompt(tok: &Tokenizer, title: &str, max_len: usize) -> Result<Vec<usize>> {
    let head = tok.encode(ITEM_HEAD);
    let tail = tok.encode(ITEM_TAIL);
    let budget = max_len.checked_sub(head.len() + tail.len()).filter(|&b| b > 0).ok_or(Error::Overlength {
        len: head.len() + tail.len() + 1,
        max_len,
    })?;
    let mut body = tok.encode(title);
    if body.is_empty() {
        body = tok.encode(UNKNOWN_TITLE);
    }
    let body = &body[body.len().saturating_sub(budget)..];
    Ok([head.as_slice(), body, tail.as_slice()].concat())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        let mut corpus = template_corpus();
        corpus.push("amber saga m1".into());
        corpus.push("north road m2".into());
        Tokenizer::build(corpus.iter().map(String::as_str))
    }

    #[test]
    fn empty_history_renders_none() {
        let s = recommendation_text(&[], "amber saga m1", Slots::NONE);
        assert_eq!(s, "will user like target ? user : liked none ; disliked none ; target amber saga m1 ; answer :");
    }

    #[test]
    fn placeholders_only_add_tokens() {
        let t = tok();
        let hist = [("amber saga m1", 1), ("north road m2", 0)];
        let plain = t.encode(&recommendation_text(&hist, "amber saga m1", Slots::NONE));
        let full = t.encode(&recommendation_text(&hist, "amber saga m1", Slots::ALL));
        assert_eq!(full.len(), plain.len() + 3);
        let r = t.reserved();
        let stripped: Vec<usize> = full.iter().copied().filter(|&i| i != r.user && i != r.item && i != r.warm).collect();
        assert_eq!(stripped, plain);
        let e = EncodedPrompt::locate(&t, full);
        assert!(e.user_pos.is_some() && e.item_pos.is_some() && e.warm_pos.is_some());
        assert_eq!(t.decode(&e.ids), recommendation_text(&hist, "amber saga m1", Slots::ALL));
    }

    #[test]
    fn item_prompt_truncates_from_left() {
        let t = tok();
        let full = item_prompt(&t, "amber saga m1", 64).unwrap();
        assert_eq!(t.decode(&full), "describe item : amber saga m1 ; it is");
        let short = item_prompt(&t, "amber saga m1", 8).unwrap();
        assert_eq!(t.decode(&short), "describe item : saga m1 ; it is");
        assert_eq!(t.decode(&item_prompt(&t, "", 64).unwrap()), "describe item : unknown ; it is");
        assert!(item_prompt(&t, "amber", 6).is_err());
    }
}
