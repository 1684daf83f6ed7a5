//! Score extraction from free-form model reports.
//!
//! Reports arrive in many shapes: plain structured reviews, `<think>`
//! deliberations followed by a verdict, per-dimension scores without an
//! overall, and (for confused few-shot calls) score lists covering every
//! example article. Parsing recognises, case-insensitively:
//!
//! * labelled overall scores: `Score: 3*`, `Score: 3`, `Overall score: 3.5/4`,
//!   with any `*`/`_` markup around the label or number;
//! * level descriptors: `3* (Internationally Excellent)`, `4* World leading`,
//!   used only when no labelled overall score is present;
//! * dimension scores: `Originality (3*)`, `Significance: 3*`, `Rigour: 3/4`.
//!
//! The last match of each kind wins. Fractions over a denominator other than
//! 4 (such as `8/10`) are ignored.

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::gateway::{RawRecord, Status, TaskKey};

const THINK_OPEN: &str = "<think>";
const THINK_CLOSE: &str = "</think>";

static LABELLED_OVERALL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(?:score|overall(?:[ \t]+(?:quality|rating|assessment))?)\b[*_ \t]*[:：][*_\s]*(\d{1,2}(?:\.\d+)?)[ \t]*(\*|/[ \t]*(\d+))?",
    )
    .unwrap()
});

static DESCRIPTOR_OVERALL: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(r"(?i)(\d{1,2}(?:\.\d+)?)[ \t]*\*[*_ \t]*\(?[*_ \t]*(?:nationally|internationally|world)\b").unwrap()
});

static DIMENSION: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\b(originality|significance|rigou?r)\b(?:[ \t]+score)?[*_ \t]*(?:\([*_ \t]*(\d{1,2}(?:\.\d+)?)[ \t]*\*?[*_ \t]*\)|[:：][*_\s]*(\d{1,2}(?:\.\d+)?)[ \t]*(\*|/[ \t]*(\d+))?)",
    )
    .unwrap()
});

static ENUMERATED_ARTICLE: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"(?i)\barticle[*_ \t]*(\d{1,2})[*_ \t]*(?:[:：\-–]|\()[*_ \t]*(?:score[*_ \t]*[:：]?[*_ \t]*)?(\d(?:\.\d+)?)[ \t]*(?:\*|/[ \t]*4\b)",
    )
    .unwrap()
});

/// A report split into its deliberation and its final text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportSections {
    pub thinking: Option<String>,
    pub report: String,
}

/// Separates the first `<think>…</think>` span from the report.
///
/// With no closing tag, everything after `<think>` is thinking and the
/// report is the prefix. A closing tag with no opening tag (some chat
/// templates strip the opener) marks everything before it as thinking.
pub fn split_reasoning(text: &str) -> ReportSections {
    match (text.find(THINK_OPEN), text.find(THINK_CLOSE)) {
        (Some(open), _) => {
            let body_start = open + THINK_OPEN.len();
            match text[body_start..].find(THINK_CLOSE) {
                Some(rel) => {
                    let close = body_start + rel;
                    let mut report = String::with_capacity(text.len());
                    report.push_str(&text[..open]);
                    report.push_str(&text[close + THINK_CLOSE.len()..]);
                    ReportSections {
                        thinking: Some(text[body_start..close].to_string()),
                        report,
                    }
                }
                None => ReportSections {
                    thinking: Some(text[body_start..].to_string()),
                    report: text[..open].to_string(),
                },
            }
        }
        (None, Some(close)) => ReportSections {
            thinking: Some(text[..close].to_string()),
            report: text[close + THINK_CLOSE.len()..].to_string(),
        },
        (None, None) => ReportSections {
            thinking: None,
            report: text.to_string(),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    MultiArticle,
    NoScoreFound,
    OutOfRangeClamped,
    SubscoreFallback,
}

impl Flag {
    pub fn as_str(self) -> &'static str {
        match self {
            Flag::MultiArticle => "multi_article",
            Flag::NoScoreFound => "no_score_found",
            Flag::OutOfRangeClamped => "out_of_range_clamped",
            Flag::SubscoreFallback => "subscore_fallback",
        }
    }
}

/// Scores found in one report, each on the 1 to 4 star scale.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParsedScore {
    pub overall: Option<f64>,
    pub originality: Option<f64>,
    pub significance: Option<f64>,
    pub rigour: Option<f64>,
    pub flags: BTreeSet<Flag>,
}

impl ParsedScore {
    pub fn subscores(&self) -> impl Iterator<Item = f64> + '_ {
        [self.originality, self.significance, self.rigour].into_iter().flatten()
    }
}

fn denominator_ok(m: Option<regex::Match<'_>>) -> bool {
    m.map_or(true, |d| d.as_str().parse::<u32>() == Ok(4))
}

fn clamp_star(v: f64, flags: &mut BTreeSet<Flag>) -> f64 {
    if (1.0..=4.0).contains(&v) {
        v
    } else {
        flags.insert(Flag::OutOfRangeClamped);
        v.clamp(1.0, 4.0)
    }
}

/// True when the text just before `at` names a dimension, so a following
/// `Score:` belongs to that dimension rather than to the overall verdict.
fn preceded_by_dimension(text: &str, at: usize) -> bool {
    let before = text[..at].trim_end_matches(|c: char| c == '*' || c == '_' || c == ' ' || c == '\t');
    let lower = before.to_lowercase();
    ["originality", "significance", "rigour", "rigor"]
        .iter()
        .any(|d| lower.ends_with(d))
}

/// Pattern pass over a report (normally the part after any `<think>` span).
pub fn parse_scores(report: &str) -> ParsedScore {
    let mut flags = BTreeSet::new();

    let labelled = LABELLED_OVERALL
        .captures_iter(report)
        .filter(|c| denominator_ok(c.get(3)))
        .filter(|c| !preceded_by_dimension(report, c.get(0).unwrap().start()))
        .filter_map(|c| c[1].parse::<f64>().ok())
        .last();
    let overall = labelled.or_else(|| {
        DESCRIPTOR_OVERALL
            .captures_iter(report)
            .filter_map(|c| c[1].parse::<f64>().ok())
            .last()
    });
    let overall = overall.map(|v| clamp_star(v, &mut flags));

    let mut dims: [Option<f64>; 3] = [None; 3];
    for c in DIMENSION.captures_iter(report) {
        let value = match (c.get(2), c.get(3)) {
            (Some(v), _) => v.as_str(),
            (None, Some(v)) if denominator_ok(c.get(5)) => v.as_str(),
            _ => continue,
        };
        let Ok(v) = value.parse::<f64>() else { continue };
        let slot = match c[1].to_ascii_lowercase().as_str() {
            "originality" => 0,
            "significance" => 1,
            _ => 2,
        };
        dims[slot] = Some(v);
    }
    let [originality, significance, rigour] = dims.map(|d| d.map(|v| clamp_star(v, &mut flags)));

    if overall.is_none() && dims.iter().all(Option::is_none) {
        flags.insert(Flag::NoScoreFound);
    }
    ParsedScore {
        overall,
        originality,
        significance,
        rigour,
        flags,
    }
}

/// True when the report scores two or more enumerated articles, as happens
/// when a model treats the few-shot examples as part of the task.
pub fn detect_multi_article(report: &str) -> bool {
    let numbers: BTreeSet<&str> = ENUMERATED_ARTICLE
        .captures_iter(report)
        .map(|c| c.get(1).unwrap().as_str())
        .collect();
    numbers.len() >= 2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveScore {
    pub value: Option<f64>,
    pub flags: BTreeSet<Flag>,
}

/// The scalar used for averaging: the overall score, else the mean of the
/// dimension scores present. Multi-article reports yield nothing.
pub fn effective_score(parsed: &ParsedScore, multi: bool) -> EffectiveScore {
    let mut flags = parsed.flags.clone();
    if multi {
        flags.insert(Flag::MultiArticle);
        return EffectiveScore { value: None, flags };
    }
    if let Some(o) = parsed.overall {
        return EffectiveScore { value: Some(o), flags };
    }
    let subs: Vec<f64> = parsed.subscores().collect();
    if subs.is_empty() {
        return EffectiveScore { value: None, flags };
    }
    flags.insert(Flag::SubscoreFallback);
    EffectiveScore {
        value: Some(subs.iter().sum::<f64>() / subs.len() as f64),
        flags,
    }
}

/// Every extraction step applied to one raw report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportAnalysis {
    pub sections: ReportSections,
    pub parsed: ParsedScore,
    pub multi_article: bool,
    pub effective: EffectiveScore,
}

pub fn analyse_report(text: &str) -> ReportAnalysis {
    let sections = split_reasoning(text);
    let parsed = parse_scores(&sections.report);
    let multi_article = detect_multi_article(&sections.report);
    let effective = effective_score(&parsed, multi_article);
    ReportAnalysis {
        sections,
        parsed,
        multi_article,
        effective,
    }
}

/// A parsed response joined to its task key; one JSONL line of the
/// extraction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    #[serde(flatten)]
    pub key: TaskKey,
    pub status: Status,
    pub overall: Option<f64>,
    pub originality: Option<f64>,
    pub significance: Option<f64>,
    pub rigour: Option<f64>,
    pub effective: Option<f64>,
    pub has_thinking: bool,
    pub flags: Vec<Flag>,
}

impl ScoreRecord {
    pub fn is_usable(&self) -> bool {
        self.status == Status::Ok && self.effective.is_some() && !self.flags.contains(&Flag::MultiArticle)
    }
}

pub fn extract_record(raw: &RawRecord) -> ScoreRecord {
    if raw.status != Status::Ok {
        return ScoreRecord {
            key: raw.key.clone(),
            status: raw.status,
            overall: None,
            originality: None,
            significance: None,
            rigour: None,
            effective: None,
            has_thinking: false,
            flags: Vec::new(),
        };
    }
    let a = analyse_report(&raw.raw_text);
    ScoreRecord {
        key: raw.key.clone(),
        status: raw.status,
        overall: a.parsed.overall,
        originality: a.parsed.originality,
        significance: a.parsed.significance,
        rigour: a.parsed.rigour,
        effective: a.effective.value,
        has_thinking: a.sections.thinking.is_some(),
        flags: a.effective.flags.into_iter().collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{simulate_completion, simulated_score, ReportStyle, Strategy, ALL_STYLES};
    use proptest::prelude::*;

    #[test]
    fn split_without_tags() {
        let s = split_reasoning("Score: 3*");
        assert_eq!(s.thinking, None);
        assert_eq!(s.report, "Score: 3*");
    }

    #[test]
    fn split_simple() {
        let s = split_reasoning("<think>X</think>Y");
        assert_eq!(s.thinking.as_deref(), Some("X"));
        assert_eq!(s.report, "Y");
    }

    #[test]
    fn split_unclosed() {
        let s = split_reasoning("pre<think>never finished");
        assert_eq!(s.thinking.as_deref(), Some("never finished"));
        assert_eq!(s.report, "pre");
    }

    #[test]
    fn split_only_first_span() {
        let s = split_reasoning("<think>a</think>b<think>c</think>d");
        assert_eq!(s.thinking.as_deref(), Some("a"));
        assert_eq!(s.report, "b<think>c</think>d");
    }

    #[test]
    fn split_orphan_close() {
        let s = split_reasoning("musing about 4* </think>\n**Score: 3***");
        assert_eq!(s.thinking.as_deref(), Some("musing about 4* "));
        assert_eq!(parse_scores(&s.report).overall, Some(3.0));
    }

    #[test]
    fn thinking_candidates_do_not_leak() {
        let text = "<think>maybe 4*? Score: 4* would be generous. So 3*.</think>\n\n****Score: 3****\n\n****Reasoning:****";
        let a = analyse_report(text);
        assert_eq!(a.parsed.overall, Some(3.0));
        assert!(a.sections.report.starts_with("\n\n****Score: 3****"));
    }

    #[test]
    fn structured_report_after_think() {
        let p = parse_scores("****Score: 3*****\n\n****Reasoning:****\n\n**Originality (3*)** The study identifies a new mechanism.");
        assert_eq!(p.overall, Some(3.0));
        assert_eq!(p.originality, Some(3.0));
        assert_eq!(p.significance, None);
        assert!(p.flags.is_empty());
    }

    #[test]
    fn decorated_descriptor() {
        let p = parse_scores("***Score: 3* (Internationally Excellent)**");
        assert_eq!(p.overall, Some(3.0));
    }

    #[test]
    fn descriptor_without_label() {
        assert_eq!(parse_scores("Overall this is a 4* World leading piece.").overall, Some(4.0));
        assert_eq!(parse_scores("I rate it 2* (Internationally recognised).").overall, Some(2.0));
    }

    #[test]
    fn label_beats_descriptor() {
        let p = parse_scores("**Score: 3***\n\nScale: 1* Nationally recognised ... 4* World leading");
        assert_eq!(p.overall, Some(3.0));
    }

    #[test]
    fn subscore_fraction_only() {
        let p = parse_scores("**Originality: 3/4**");
        assert_eq!(p.originality, Some(3.0));
        assert_eq!(p.overall, None);
        assert!(p.flags.is_empty());
    }

    #[test]
    fn last_overall_wins() {
        let p = parse_scores("Initial score: 2*. After reflection...\n**Final Score: 3.5***");
        assert_eq!(p.overall, Some(3.5));
    }

    #[test]
    fn other_scales_unparsed() {
        let p = parse_scores("Score: 8/10\nRigour: 7/10");
        assert_eq!(p.overall, None);
        assert_eq!(p.rigour, None);
        assert!(p.flags.contains(&Flag::NoScoreFound));
    }

    #[test]
    fn dimension_scores_are_not_overall() {
        let p = parse_scores("Originality Score: 4*\nRigour score: 2*");
        assert_eq!(p.overall, None);
        assert_eq!(p.originality, Some(4.0));
        assert_eq!(p.rigour, Some(2.0));
    }

    #[test]
    fn american_spelling_and_colon_forms() {
        let p = parse_scores("Significance: 2*\n**Rigor:** 4*");
        assert_eq!(p.significance, Some(2.0));
        assert_eq!(p.rigour, Some(4.0));
    }

    #[test]
    fn clamps_out_of_range() {
        let p = parse_scores("Score: 5*");
        assert_eq!(p.overall, Some(4.0));
        assert!(p.flags.contains(&Flag::OutOfRangeClamped));
        let p = parse_scores("Score: 0");
        assert_eq!(p.overall, Some(1.0));
    }

    #[test]
    fn nothing_found() {
        let p = parse_scores("A thoughtful article with no verdict.");
        assert_eq!(p, ParsedScore {
            flags: BTreeSet::from([Flag::NoScoreFound]),
            ..Default::default()
        });
    }

    #[test]
    fn scoring_prose_is_not_a_score() {
        let p = parse_scores("I wouldn't score it a 4 because the design is narrow. Scores range from 1* to 4*.");
        assert_eq!(p.overall, None);
    }

    #[test]
    fn multi_article_lists() {
        assert!(detect_multi_article(
            "**Final Scores:** - Article 1: 2* - Article 2: 3* - Article 3: 3* - Article 4: 4*"
        ));
        assert!(detect_multi_article(
            "Summary of Scores -\n\nArticle 1 : Score 1* - **Article 2** : Score 2* - **Article 3** : Score 3* - **Article 4** : Score 4**"
        ));
        assert!(detect_multi_article("**Originality: 3/4** (Article 1: 2/4, Article 2: 2.5/4, Article 3: 3.5/4)"));
        assert!(!detect_multi_article("**Score: 3* (Internationally Excellent)**"));
        assert!(!detect_multi_article("Compared with Article 1 in the examples, this is stronger. Score: 3*"));
    }

    #[test]
    fn effective_rules() {
        let p = parse_scores("Score: 3*");
        assert_eq!(effective_score(&p, false).value, Some(3.0));

        let p = parse_scores("Originality: 3*\nSignificance: 3*\nRigour: 4*");
        let e = effective_score(&p, false);
        assert!((e.value.unwrap() - 10.0 / 3.0).abs() < 1e-12);
        assert!(e.flags.contains(&Flag::SubscoreFallback));

        let e = effective_score(&parse_scores("Score: 3*"), true);
        assert_eq!(e.value, None);
        assert!(e.flags.contains(&Flag::MultiArticle));

        assert_eq!(effective_score(&parse_scores("nothing"), false).value, None);
    }

    #[test]
    fn confused_few_shot_report_is_excluded() {
        let text = "<think> Four articles to score here. </think>\n\n**Final Scores:**\n- Article 1: 2*\n- Article 2: 3*\n- Article 3: 3*\n- Article 4: 4*";
        let a = analyse_report(text);
        assert!(a.multi_article);
        assert_eq!(a.effective.value, None);
    }

    #[test]
    fn failed_record_has_no_score() {
        let raw = RawRecord {
            key: TaskKey { article_id: "a".into(), model: "m".into(), strategy: Strategy::Zero, iteration: 1 },
            status: Status::Failed,
            raw_text: String::new(),
            latency_ms: 0,
            attempts: 5,
            error: Some("x".into()),
        };
        let r = extract_record(&raw);
        assert!(!r.is_usable());
        assert_eq!(r.effective, None);
    }

    #[test]
    fn flags_serialise_as_strings() {
        let raw = RawRecord {
            key: TaskKey { article_id: "a".into(), model: "m".into(), strategy: Strategy::Few, iteration: 2 },
            status: Status::Ok,
            raw_text: "Originality: 3/4".into(),
            latency_ms: 0,
            attempts: 1,
            error: None,
        };
        let v = serde_json::to_value(extract_record(&raw)).unwrap();
        assert_eq!(v["flags"], serde_json::json!(["subscore_fallback"]));
        assert_eq!(v["strategy"], "few");
        assert_eq!(v["effective"], 3.0);
    }

    #[test]
    fn simulated_reports_recovered() {
        for seed in 0..50u64 {
            for style in ALL_STYLES {
                let text = simulate_completion(2.6, 0.7, seed, style);
                let a = analyse_report(&text);
                let want = simulated_score(2.6, 0.7, seed);
                match style {
                    ReportStyle::MultiArticle => assert!(a.multi_article, "{text}"),
                    _ => assert_eq!(a.effective.value, Some(want), "{text}"),
                }
            }
        }
    }

    proptest! {
        #[test]
        fn parsed_values_in_range(text in "(Score|Originality|Rigour|Significance)?[:*( ]{0,3}[0-9]{1,2}(\\.[0-9])?[*/]?[0-9]?\\)?.{0,10}") {
            let p = parse_scores(&text);
            for v in [p.overall, p.originality, p.significance, p.rigour].into_iter().flatten() {
                prop_assert!((1.0..=4.0).contains(&v));
            }
        }

        #[test]
        fn split_reconstructs(pre in "[^<]{0,20}", think in "[^<]{0,30}", post in "[^<]{0,20}") {
            let text = format!("{pre}<think>{think}</think>{post}");
            let s = split_reasoning(&text);
            let t = s.thinking.clone().unwrap();
            let rebuilt = format!("{}<think>{}</think>{}", &s.report[..pre.len()], t, &s.report[pre.len()..]);
            prop_assert_eq!(rebuilt, text);
        }

        #[test]
        fn effective_shifts_with_overall(n in 1u8..=3, tail in "[a-z ]{0,20}") {
            let a = effective_score(&parse_scores(&format!("Originality (2*)\nScore: {n}*{tail}")), false);
            let b = effective_score(&parse_scores(&format!("Originality (2*)\nScore: {}*{tail}", n + 1)), false);
            prop_assert_eq!(b.value.unwrap() - a.value.unwrap(), 1.0);
        }
    }
}
