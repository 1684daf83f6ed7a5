//! System prompt handling and byte-exact user prompt construction.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Article, ExemplarArticle, FewShotPool, STAR_LEVELS};
use crate::seed;

/// Opening of every user prompt.
pub const ZERO_SHOT_HEADER: &str = "Score this article:\n";
/// Sits between a title and its abstract.
pub const ABSTRACT_MARKER: &str = "\nAbstract\n";
/// Terminates each few-shot example block.
pub const EXAMPLE_SEPARATOR: &str = "\n###\n";
/// Required opening of a system prompt template.
pub const SYSTEM_PROMPT_OPENING: &str = "You are an academic expert";

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("article {0:?} has an empty title")]
    EmptyTitle(String),
    #[error("article {0:?} has an empty abstract")]
    EmptyAbstract(String),
    #[error("system prompt must begin with {SYSTEM_PROMPT_OPENING:?}")]
    BadSystemPrompt,
    #[error("cannot read system prompt {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("unit {0} has no few-shot exemplars")]
    UnitNotInPool(u8),
    #[error("few-shot selection is for unit {selection}, article is in unit {article}")]
    SelectionUnitMismatch { selection: u8, article: u8 },
}

/// Assessor instructions sent as the system prompt (or folded into the user
/// prompt for models without a system role).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SystemPromptTemplate {
    text: String,
}

impl SystemPromptTemplate {
    pub fn new(text: impl Into<String>) -> Result<Self, PromptError> {
        let text = text.into();
        if !text.starts_with(SYSTEM_PROMPT_OPENING) {
            return Err(PromptError::BadSystemPrompt);
        }
        Ok(Self { text })
    }

    /// Reads a UTF-8 template file verbatim.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PromptError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::new(text)
    }

    pub fn text(&self) -> &str {
        &self.text
    }
}

fn check_article(article: &Article) -> Result<(), PromptError> {
    if article.title.is_empty() {
        return Err(PromptError::EmptyTitle(article.id.clone()));
    }
    if article.abstract_text.is_empty() {
        return Err(PromptError::EmptyAbstract(article.id.clone()));
    }
    Ok(())
}

/// `Score this article:\n{title}\nAbstract\n{abstract}`, nothing else.
pub fn build_zero_shot_user(article: &Article) -> Result<String, PromptError> {
    check_article(article)?;
    let mut s = String::with_capacity(
        ZERO_SHOT_HEADER.len() + article.title.len() + ABSTRACT_MARKER.len() + article.abstract_text.len(),
    );
    s.push_str(ZERO_SHOT_HEADER);
    s.push_str(&article.title);
    s.push_str(ABSTRACT_MARKER);
    s.push_str(&article.abstract_text);
    Ok(s)
}

/// One exemplar per star level, ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotSelection {
    pub uoa: u8,
    pub exemplars: [ExemplarArticle; 4],
    pub seed: u64,
    pub call_index: u64,
}

impl FewShotSelection {
    /// Ids of the chosen exemplars, 1* first.
    pub fn ids(&self) -> [&str; 4] {
        [0, 1, 2, 3].map(|i| self.exemplars[i].article.id.as_str())
    }
}

/// Picks one of the two exemplars at each star level for the article's
/// unit. The draw depends only on `(seed, call_index)`, so every regenerated
/// prompt gets a fresh, reproducible combination.
pub fn select_fewshot(
    article: &Article,
    pool: &FewShotPool,
    seed: u64,
    call_index: u64,
) -> Result<FewShotSelection, PromptError> {
    let mut rng = seed::rng(seed::derive(seed, &[call_index]));
    let mut picks = Vec::with_capacity(4);
    for star in STAR_LEVELS {
        let cell = pool
            .cell(article.uoa, star)
            .ok_or(PromptError::UnitNotInPool(article.uoa))?;
        let which = usize::from(rng.gen_bool(0.5));
        picks.push(cell[which].clone());
    }
    let exemplars: [ExemplarArticle; 4] = picks.try_into().expect("four star levels");
    Ok(FewShotSelection {
        uoa: article.uoa,
        exemplars,
        seed,
        call_index,
    })
}

/// Four `This article scores {n}*:` example blocks, each closed by the
/// `###` separator, followed by the zero-shot prompt for `article`.
pub fn build_few_shot_user(article: &Article, sel: &FewShotSelection) -> Result<String, PromptError> {
    if sel.uoa != article.uoa {
        return Err(PromptError::SelectionUnitMismatch {
            selection: sel.uoa,
            article: article.uoa,
        });
    }
    let mut s = String::new();
    for ex in &sel.exemplars {
        check_article(&ex.article)?;
        s.push_str(&format!("This article scores {}*:\n", ex.star));
        s.push_str(&ex.article.title);
        s.push_str(ABSTRACT_MARKER);
        s.push_str(&ex.article.abstract_text);
        s.push_str(EXAMPLE_SEPARATOR);
    }
    s.push_str(&build_zero_shot_user(article)?);
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// At most one system message followed by exactly one user message.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageSequence(Vec<Message>);

impl MessageSequence {
    pub fn messages(&self) -> &[Message] {
        &self.0
    }

    /// Content of the user message.
    pub fn user(&self) -> &str {
        &self.0.last().expect("sequence has a user message").content
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Sends the template as a system message when the model supports one;
/// otherwise prepends it to the user prompt, separated by a newline.
pub fn compose_messages(system: &SystemPromptTemplate, user: &str, supports_system_role: bool) -> MessageSequence {
    if supports_system_role {
        MessageSequence(vec![
            Message {
                role: Role::System,
                content: system.text.clone(),
            },
            Message {
                role: Role::User,
                content: user.to_string(),
            },
        ])
    } else {
        let mut content = String::with_capacity(system.text.len() + 1 + user.len());
        content.push_str(&system.text);
        content.push('\n');
        content.push_str(user);
        MessageSequence(vec![Message {
            role: Role::User,
            content,
        }])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{parse_fewshot_pool, ArticleSet};
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn article(title: &str, abs: &str) -> Article {
        Article {
            id: "t".into(),
            uoa: 2,
            doi: None,
            title: title.into(),
            abstract_text: abs.into(),
        }
    }

    fn pool(identical: bool) -> FewShotPool {
        let mut lines = Vec::new();
        for uoa in [1u8, 2] {
            for star in 1..=4u8 {
                for k in 0..2 {
                    let text = if identical { "same".to_string() } else { format!("{uoa}-{star}-{k}") };
                    lines.push(
                        serde_json::json!({
                            "id": format!("e{uoa}{star}{k}"), "uoa": uoa, "doi": null,
                            "title": format!("T{text}"), "abstract": format!("A{text}"), "star": star
                        })
                        .to_string(),
                    );
                }
            }
        }
        parse_fewshot_pool(lines, &ArticleSet::default()).unwrap()
    }

    #[test]
    fn zero_shot_exact_bytes() {
        assert_eq!(
            build_zero_shot_user(&article("T", "A")).unwrap(),
            "Score this article:\nT\nAbstract\nA"
        );
    }

    #[test]
    fn scaffolding_is_thirty_bytes() {
        let p = build_zero_shot_user(&article("x", "y")).unwrap();
        assert_eq!(ZERO_SHOT_HEADER.len(), 20);
        assert_eq!(ABSTRACT_MARKER.len(), 10);
        assert_eq!(p.len() - 2, 30);
    }

    #[test]
    fn multiline_title_verbatim() {
        let p = build_zero_shot_user(&article("Line one\nline two", "Body")).unwrap();
        assert_eq!(p, "Score this article:\nLine one\nline two\nAbstract\nBody");
    }

    #[test]
    fn empty_parts_rejected() {
        assert!(matches!(build_zero_shot_user(&article("", "A")), Err(PromptError::EmptyTitle(_))));
        assert!(matches!(build_zero_shot_user(&article("T", "")), Err(PromptError::EmptyAbstract(_))));
    }

    #[test]
    fn system_prompt_opening_enforced() {
        assert!(SystemPromptTemplate::new("You are an academic expert, assessing...").is_ok());
        assert!(matches!(SystemPromptTemplate::new("Hello"), Err(PromptError::BadSystemPrompt)));
    }

    #[test]
    fn degenerate_pool_forces_selection() {
        let p = pool(true);
        let a = article("T", "A");
        let first = select_fewshot(&a, &p, 0, 0).unwrap();
        for s in 0..20 {
            let sel = select_fewshot(&a, &p, s, s * 3).unwrap();
            let texts: Vec<_> = sel.exemplars.iter().map(|e| e.article.abstract_text.clone()).collect();
            let base: Vec<_> = first.exemplars.iter().map(|e| e.article.abstract_text.clone()).collect();
            assert_eq!(texts, base);
        }
    }

    #[test]
    fn selection_seeded_by_call_index() {
        let p = pool(false);
        let a = article("T", "A");
        assert_eq!(select_fewshot(&a, &p, 5, 1).unwrap(), select_fewshot(&a, &p, 5, 1).unwrap());
        let distinct: std::collections::BTreeSet<_> = (0..16)
            .map(|i| select_fewshot(&a, &p, 5, i).unwrap().ids().map(String::from))
            .collect();
        assert!(distinct.len() > 1);
    }

    #[test]
    fn all_exemplars_appear_over_200_regenerations() {
        let p = pool(false);
        let a = article("T", "A");
        let seen: std::collections::BTreeSet<String> = (0..200)
            .flat_map(|i| select_fewshot(&a, &p, 11, i).unwrap().ids().map(String::from))
            .collect();
        assert_eq!(seen.len(), 8);
    }

    #[test]
    fn marginal_frequency_near_half() {
        let p = pool(false);
        let a = article("T", "A");
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for i in 0..10_000 {
            for id in select_fewshot(&a, &p, 2024, i).unwrap().ids() {
                *counts.entry(id.to_string()).or_default() += 1;
            }
        }
        for (id, c) in counts {
            let f = c as f64 / 10_000.0;
            assert!((0.45..=0.55).contains(&f), "{id}: {f}");
        }
    }

    #[test]
    fn unit_absent_from_pool() {
        let p = pool(false);
        let mut a = article("T", "A");
        a.uoa = 5;
        assert!(matches!(select_fewshot(&a, &p, 0, 0), Err(PromptError::UnitNotInPool(5))));
    }

    #[test]
    fn few_shot_layout() {
        let p = pool(false);
        let a = article("Target", "Body");
        let sel = select_fewshot(&a, &p, 1, 1).unwrap();
        let s = build_few_shot_user(&a, &sel).unwrap();
        let positions: Vec<usize> = (1..=4)
            .map(|n| s.find(&format!("This article scores {n}*:\n")).unwrap())
            .collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(s.matches("###\n").count(), 4);
        assert!(s.ends_with(&build_zero_shot_user(&a).unwrap()));
        assert!(s.starts_with("This article scores 1*:\n"));
    }

    #[test]
    fn few_shot_rejects_foreign_selection() {
        let p = pool(false);
        let a = article("T", "A");
        let sel = select_fewshot(&a, &p, 1, 1).unwrap();
        let mut other = a.clone();
        other.uoa = 1;
        assert!(build_few_shot_user(&other, &sel).is_err());
    }

    #[test]
    fn compose_both_branches() {
        let sys = SystemPromptTemplate::new("You are an academic expert.\nRules…").unwrap();
        let two = compose_messages(&sys, "Score this article:\nT", true);
        assert_eq!(two.len(), 2);
        assert_eq!(two.messages()[0].role, Role::System);
        assert_eq!(two.messages()[0].content, sys.text());
        assert_eq!(two.messages()[1].role, Role::User);
        assert_eq!(two.user(), "Score this article:\nT");

        let one = compose_messages(&sys, "Score this article:\nT", false);
        assert_eq!(one.len(), 1);
        assert_eq!(one.messages()[0].role, Role::User);
        assert_eq!(one.user(), "You are an academic expert.\nRules…\nScore this article:\nT");
    }

    #[test]
    fn messages_serialise_as_wire_objects() {
        let sys = SystemPromptTemplate::new("You are an academic expert.").unwrap();
        let v = serde_json::to_value(compose_messages(&sys, "u", true)).unwrap();
        assert_eq!(v, serde_json::json!([{"role":"system","content":"You are an academic expert."},{"role":"user","content":"u"}]));
    }

    proptest! {
        #[test]
        fn zero_shot_round_trip(title in "[^\u{0}]{1,40}", abs in "[^\u{0}]{1,80}") {
            let p = build_zero_shot_user(&article(&title, &abs)).unwrap();
            let rest = p.strip_prefix(ZERO_SHOT_HEADER).unwrap();
            prop_assert_eq!(&rest[..title.len()], title.as_str());
            prop_assert_eq!(&rest[title.len()..title.len() + ABSTRACT_MARKER.len()], ABSTRACT_MARKER);
            prop_assert_eq!(&rest[title.len() + ABSTRACT_MARKER.len()..], abs.as_str());
            prop_assert_eq!(p.len(), title.len() + abs.len() + 30);
        }
    }
}
