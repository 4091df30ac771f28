//! Semantics-enriched prompt construction: an LLM instruction built from an
//! entity's selected facts, with a deterministic template fallback.

use serde::{Deserialize, Serialize};

use crate::backends::{sanitize_reply, LanguageModel};
use crate::kg::EntityId;

pub const DEFAULT_WORD_CAP: usize = 60;

/// Bumped whenever the instruction wording changes; recorded in manifests.
pub const INSTRUCTION_VERSION: &str = "visual-description/v1";

const ENTITY_LINE: &str = "Entity: ";
const FACT_BULLET: &str = "- ";

/// Turns a relation identifier into lowercase words: `playsFor` → `plays for`,
/// `birth_place` → `birth place`. URI prefixes are dropped.
pub fn naturalize_relation(label: &str) -> String {
    let local = label.rsplit(['/', '#']).next().unwrap_or(label);
    let chars: Vec<char> = local.chars().collect();
    let mut out = String::with_capacity(local.len() + 4);
    for (i, &c) in chars.iter().enumerate() {
        if c == '_' || c == '-' || c.is_whitespace() {
            out.push(' ');
            continue;
        }
        if c.is_uppercase() && i > 0 {
            let prev = chars[i - 1];
            let next_lower = chars.get(i + 1).is_some_and(|n| n.is_lowercase());
            if prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower) {
                out.push(' ');
            }
        }
        out.extend(c.to_lowercase());
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// `"<relation words> <tail>"`, e.g. `starred in The Man Without Nerves`.
pub fn verbalize_fact(relation_label: &str, tail_name: &str) -> String {
    format!("{} {}", naturalize_relation(relation_label), tail_name)
}

/// The LLM instruction for one entity. Facts are listed verbatim in order.
pub fn build_instruction(label: &str, facts: &[String], word_cap: usize) -> String {
    let mut s = String::new();
    if facts.is_empty() {
        s.push_str(&format!(
            "Write one sentence of at most {word_cap} words describing what a typical photograph of the entity below would show.\n"
        ));
    } else {
        s.push_str(&format!(
            "Write one sentence of at most {word_cap} words describing what a photograph of the entity below would show.\n\
             Ground the description in the listed facts. If a fact is known to be wrong, correct it instead of repeating it.\n"
        ));
    }
    s.push_str("Reply with the sentence only.\n");
    s.push_str(ENTITY_LINE);
    s.push_str(label);
    s.push('\n');
    if !facts.is_empty() {
        s.push_str("Facts:\n");
        for f in facts {
            s.push_str(FACT_BULLET);
            s.push_str(f);
            s.push('\n');
        }
    }
    s
}

/// Recovers `(label, facts)` from an instruction made by [`build_instruction`].
pub fn parse_instruction(instruction: &str) -> Option<(String, Vec<String>)> {
    let mut label = None;
    let mut facts = Vec::new();
    let mut in_facts = false;
    for line in instruction.lines() {
        if let Some(l) = line.strip_prefix(ENTITY_LINE) {
            label = Some(l.to_owned());
        } else if line == "Facts:" {
            in_facts = true;
        } else if in_facts {
            if let Some(f) = line.strip_prefix(FACT_BULLET) {
                facts.push(f.to_owned());
            }
        }
    }
    label.map(|l| (l, facts))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Llm,
    Template,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptRecord {
    pub entity: EntityId,
    pub label: String,
    pub facts: Vec<String>,
    pub instruction: String,
    pub prompt: String,
    pub source: PromptSource,
    pub word_count: usize,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub truncated: bool,
    /// Set when an LLM was configured but the prompt fell back to the template.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub downgraded: Option<String>,
}

fn clean_template_text(s: &str) -> String {
    s.chars().map(|c| if c.is_control() { ' ' } else { c }).collect::<String>().trim().to_owned()
}

/// `"A photo of <label>, <fact₁>; <fact₂>; …"`, capped at `word_cap` words.
pub fn template_prompt(label: &str, facts: &[String], word_cap: usize) -> (String, bool) {
    let mut s = format!("A photo of {}", clean_template_text(label));
    if !facts.is_empty() {
        let joined: Vec<String> = facts.iter().map(|f| clean_template_text(f)).collect();
        s.push_str(", ");
        s.push_str(&joined.join("; "));
    }
    let words: Vec<&str> = s.split(' ').filter(|w| !w.is_empty()).collect();
    if words.len() > word_cap {
        (words[..word_cap].join(" "), true)
    } else {
        (s, false)
    }
}

/// Produces the prompt for one entity, via the LLM when available.
pub fn gen_prompt(
    entity: EntityId,
    label: &str,
    facts: Vec<String>,
    llm: Option<&dyn LanguageModel>,
    word_cap: usize,
) -> PromptRecord {
    let instruction = build_instruction(label, &facts, word_cap);
    let mut downgraded = None;
    // an entity without selected facts gets the name-only template
    if let (Some(llm), false) = (llm, facts.is_empty()) {
        match llm.complete(&instruction) {
            Ok(reply) => {
                let (prompt, truncated) = sanitize_reply(&reply, word_cap);
                if !prompt.is_empty() {
                    return PromptRecord {
                        entity,
                        label: label.to_owned(),
                        word_count: prompt.split_whitespace().count(),
                        facts,
                        instruction,
                        prompt,
                        source: PromptSource::Llm,
                        truncated,
                        downgraded: None,
                    };
                }
                downgraded = Some("empty reply".to_owned());
            }
            Err(e) => {
                tracing::warn!(entity = label, error = %e, "LLM failed, using template prompt");
                downgraded = Some(e.to_string());
            }
        }
    }
    let (prompt, truncated) = template_prompt(label, &facts, word_cap);
    PromptRecord {
        entity,
        label: label.to_owned(),
        word_count: prompt.split_whitespace().count(),
        facts,
        instruction,
        prompt,
        source: PromptSource::Template,
        truncated,
        downgraded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backends::{BackendError, BackendResult};

    #[test]
    fn naturalization_rules() {
        assert_eq!(naturalize_relation("playsFor"), "plays for");
        assert_eq!(naturalize_relation("starredIn"), "starred in");
        assert_eq!(naturalize_relation("birth_place"), "birth place");
        assert_eq!(naturalize_relation("won"), "won");
        assert_eq!(naturalize_relation("http://dbpedia.org/ontology/birthPlace"), "birth place");
        assert_eq!(naturalize_relation("isPartOfUSAState"), "is part of usa state");
    }

    #[test]
    fn instruction_lists_facts_in_order() {
        let facts = vec!["starred in Tramps".to_string(), "born in Hampstead".to_string()];
        let s = build_instruction("Julian Glover", &facts, 60);
        let a = s.find("starred in Tramps").unwrap();
        let b = s.find("born in Hampstead").unwrap();
        assert!(a < b);
        assert!(s.contains("Julian Glover"));
        assert_eq!(parse_instruction(&s), Some(("Julian Glover".to_string(), facts)));
    }

    #[test]
    fn instruction_without_facts_asks_for_generic_description() {
        let s = build_instruction("Aimee Mann", &[], 60);
        assert!(s.contains("typical photograph"));
        assert!(!s.contains("Facts:"));
        assert_eq!(parse_instruction(&s), Some(("Aimee Mann".to_string(), vec![])));
    }

    #[test]
    fn template_expansion() {
        let r = gen_prompt(EntityId(0), "X", vec!["starred in Y".into()], None, 60);
        assert_eq!(r.prompt, "A photo of X, starred in Y");
        assert_eq!(r.source, PromptSource::Template);
        let r = gen_prompt(EntityId(0), "X", vec![], None, 60);
        assert_eq!(r.prompt, "A photo of X");
        let r = gen_prompt(EntityId(0), "X", vec!["a".into(), "b".into()], None, 60);
        assert_eq!(r.prompt, "A photo of X, a; b");
    }

    struct Wordy;
    impl LanguageModel for Wordy {
        fn complete(&self, _: &str) -> BackendResult<String> {
            Ok(format!("\"{}\"", "lovely ".repeat(300)))
        }
    }

    struct Down;
    impl LanguageModel for Down {
        fn complete(&self, _: &str) -> BackendResult<String> {
            Err(BackendError::Timeout)
        }
    }

    #[test]
    fn long_llm_reply_is_truncated() {
        let r = gen_prompt(EntityId(1), "X", vec!["won Y".into()], Some(&Wordy), 60);
        assert_eq!(r.word_count, 60);
        assert!(r.truncated);
        assert_eq!(r.source, PromptSource::Llm);
        assert!(!r.prompt.contains('"'));
    }

    #[test]
    fn no_facts_skips_the_llm() {
        let r = gen_prompt(EntityId(1), "X", vec![], Some(&Wordy), 60);
        assert_eq!(r.source, PromptSource::Template);
        assert_eq!(r.prompt, "A photo of X");
        assert!(r.downgraded.is_none());
    }

    #[test]
    fn failing_llm_downgrades_to_template() {
        let r = gen_prompt(EntityId(1), "X", vec!["won Z".into()], Some(&Down), 60);
        assert_eq!(r.source, PromptSource::Template);
        assert_eq!(r.prompt, "A photo of X, won Z");
        assert!(r.downgraded.is_some());
    }

    #[test]
    fn template_is_capped() {
        let facts: Vec<String> = (0..40).map(|i| format!("fact number {i}")).collect();
        let (p, t) = template_prompt("X", &facts, 60);
        assert!(t);
        assert_eq!(p.split_whitespace().count(), 60);
    }
}
