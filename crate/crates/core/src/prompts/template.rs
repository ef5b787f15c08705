use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PromptError;
use crate::corpus::{ItemId, RelationId, UserId};

pub const USER_SLOT: &str = "{user}";
pub const HISTORY_SLOT: &str = "{history}";
pub const MASK_SLOT: &str = "{mask}";
pub const HEAD_SLOT: &str = "[X]";
pub const TAIL_SLOT: &str = "[Y]";

/// Literal text of the cloze slot in a rendered MPP.
pub const MASK_TOKEN: &str = "[mask]";

fn default_separator() -> String {
    ", ".to_owned()
}

/// A masked personalized prompt template, e.g.
/// `User {user} has previously watched {history}, and is going to watch {mask} next.`
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MppTemplate {
    pub id: u32,
    pub pattern: String,
    #[serde(default = "default_separator")]
    pub history_separator: String,
}

impl MppTemplate {
    pub fn new(id: u32, pattern: impl Into<String>) -> Result<Self, PromptError> {
        let t = Self {
            id,
            pattern: pattern.into(),
            history_separator: default_separator(),
        };
        t.validate()?;
        Ok(t)
    }

    pub fn with_separator(mut self, sep: impl Into<String>) -> Self {
        self.history_separator = sep.into();
        self
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        for slot in [USER_SLOT, HISTORY_SLOT, MASK_SLOT] {
            let n = self.pattern.matches(slot).count();
            if n != 1 {
                return Err(PromptError::Template(format!(
                    "MPP template {} must contain `{slot}` exactly once (found {n})",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

/// Reads a JSON array of `{id, pattern[, history_separator]}`.
pub fn load_mpp_templates(path: &Path) -> Result<Vec<MppTemplate>, PromptError> {
    let text = std::fs::read_to_string(path).map_err(|e| PromptError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let templates: Vec<MppTemplate> = serde_json::from_str(&text)
        .map_err(|e| PromptError::Template(format!("{}: {e}", path.display())))?;
    if templates.is_empty() {
        return Err(PromptError::Template(format!(
            "{}: no MPP templates",
            path.display()
        )));
    }
    for t in &templates {
        t.validate()?;
    }
    Ok(templates)
}

/// `[X]`/`[Y]` pattern verbalizing one relation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationTemplate {
    pub relation: RelationId,
    pub pattern: String,
}

impl RelationTemplate {
    pub fn new(relation: RelationId, pattern: String) -> Result<Self, PromptError> {
        for slot in [HEAD_SLOT, TAIL_SLOT] {
            let n = pattern.matches(slot).count();
            if n != 1 {
                return Err(PromptError::Template(format!(
                    "relation template for `{relation}` must contain `{slot}` exactly once (found {n})"
                )));
            }
        }
        Ok(Self { relation, pattern })
    }
}

/// Character span of one history item inside a rendered prompt.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemSpan {
    pub item: ItemId,
    pub start: usize,
    pub end: usize,
}

/// Rendered prompt text with byte spans for item mentions and the cloze
/// slot. Triple prompts carry neither.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptText {
    pub text: String,
    pub item_spans: Vec<ItemSpan>,
    pub mask_span: Option<(usize, usize)>,
}

enum Slot {
    User,
    History,
    Mask,
}

/// Fills an MPP template. Items are written as `item_<id>` in
/// chronological order; the user as `user_<id>`.
pub fn render_mpp(
    template: &MppTemplate,
    user: &UserId,
    history: &[ItemId],
) -> Result<PromptText, PromptError> {
    if history.is_empty() {
        return Err(PromptError::EmptyHistory);
    }
    template.validate()?;

    let mut slots: Vec<(usize, Slot)> = vec![
        (template.pattern.find(USER_SLOT).unwrap(), Slot::User),
        (template.pattern.find(HISTORY_SLOT).unwrap(), Slot::History),
        (template.pattern.find(MASK_SLOT).unwrap(), Slot::Mask),
    ];
    slots.sort_by_key(|(pos, _)| *pos);

    let mut text = String::with_capacity(template.pattern.len() + 16 * history.len());
    let mut item_spans = Vec::with_capacity(history.len());
    let mut mask_span = None;
    let mut cursor = 0;
    for (pos, slot) in slots {
        text.push_str(&template.pattern[cursor..pos]);
        let width = match slot {
            Slot::User => {
                text.push_str(&user.surface());
                USER_SLOT.len()
            }
            Slot::History => {
                for (i, item) in history.iter().enumerate() {
                    if i > 0 {
                        text.push_str(&template.history_separator);
                    }
                    let start = text.len();
                    text.push_str(&item.surface());
                    item_spans.push(ItemSpan {
                        item: item.clone(),
                        start,
                        end: text.len(),
                    });
                }
                HISTORY_SLOT.len()
            }
            Slot::Mask => {
                let start = text.len();
                text.push_str(MASK_TOKEN);
                mask_span = Some((start, text.len()));
                MASK_SLOT.len()
            }
        };
        cursor = pos + width;
    }
    text.push_str(&template.pattern[cursor..]);
    Ok(PromptText {
        text,
        item_spans,
        mask_span,
    })
}

/// Verbalizes a triple by substituting the head and tail names.
pub fn render_triple(template: &RelationTemplate, head_name: &str, tail_name: &str) -> PromptText {
    let p = &template.pattern;
    // Positions are looked up in the pattern, not the partially filled
    // output, so names containing `[X]`/`[Y]` cannot be re-substituted.
    let hx = p.find(HEAD_SLOT).expect("validated template");
    let ty = p.find(TAIL_SLOT).expect("validated template");
    let mut text = String::with_capacity(p.len() + head_name.len() + tail_name.len());
    let (first, first_name, second, second_name) = if hx < ty {
        (hx, head_name, ty, tail_name)
    } else {
        (ty, tail_name, hx, head_name)
    };
    text.push_str(&p[..first]);
    text.push_str(first_name);
    text.push_str(&p[first + 3..second]);
    text.push_str(second_name);
    text.push_str(&p[second + 3..]);
    PromptText {
        text,
        item_spans: Vec::new(),
        mask_span: None,
    }
}
