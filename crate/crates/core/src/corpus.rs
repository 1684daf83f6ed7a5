//! Article sets, eligibility filtering, sampling, gold standards and the
//! few-shot exemplar pool.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::BufRead;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::seed;

/// Star levels used by the quality scale, lowest first.
pub const STAR_LEVELS: [u8; 4] = [1, 2, 3, 4];

/// Default per-unit sample size.
pub const DEFAULT_SAMPLE_PER_UOA: usize = 500;

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate article id {id:?} on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("article {0:?} is not in the article set")]
    UnknownArticle(String),
    #[error("article {0:?} has an empty submission score list")]
    EmptySubmissions(String),
    #[error("score {score} for article {id:?} is outside [{lo}, {hi}]")]
    ScoreOutOfRange { id: String, score: f64, lo: f64, hi: f64 },
    #[error("target mean {target} for unit {uoa} is outside [1, 4]")]
    TargetOutOfRange { uoa: u8, target: f64 },
    #[error("no target mean configured for unit {0}")]
    MissingTarget(u8),
    #[error("few-shot pool cell (uoa {uoa}, {star}*) has {count} exemplars, expected 2")]
    PoolCellCount { uoa: u8, star: u8, count: usize },
    #[error("few-shot exemplar {0:?} also appears in the evaluation set")]
    PoolOverlap(String),
    #[error("gold file {path}: {message}")]
    Gold { path: String, message: String },
}

/// One article submitted for scoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Article {
    pub id: String,
    pub uoa: u8,
    pub doi: Option<String>,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: String,
}

#[derive(Deserialize)]
struct ArticleLine {
    id: String,
    uoa: u8,
    #[serde(default)]
    doi: Option<String>,
    title: String,
    #[serde(rename = "abstract", default)]
    abstract_text: Option<String>,
}

#[derive(Deserialize)]
struct ExemplarLine {
    #[serde(flatten)]
    article: ArticleLine,
    star: u8,
}

impl ArticleLine {
    fn into_article(self, line: usize) -> Result<Article, CorpusError> {
        if self.id.is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: "empty id".into(),
            });
        }
        if self.title.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line,
                message: format!("article {:?} has an empty title", self.id),
            });
        }
        if self.uoa == 0 {
            return Err(CorpusError::Malformed {
                line,
                message: format!("article {:?} has unit of assessment 0", self.id),
            });
        }
        Ok(Article {
            id: self.id,
            uoa: self.uoa,
            doi: self.doi,
            title: self.title,
            abstract_text: self.abstract_text.unwrap_or_default(),
        })
    }
}

/// An ordered collection of articles with unique ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArticleSet {
    articles: Vec<Article>,
    // set once the eligibility stage has run; the decile cut is relative to
    // the population it was applied to
    eligibility_applied: bool,
}

impl ArticleSet {
    /// Builds a set, rejecting duplicate ids.
    pub fn new(articles: Vec<Article>) -> Result<Self, CorpusError> {
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for (i, a) in articles.iter().enumerate() {
            if let Some(first) = seen.insert(a.id.as_str(), i + 1) {
                return Err(CorpusError::DuplicateId {
                    id: a.id.clone(),
                    first,
                    second: i + 1,
                });
            }
        }
        Ok(Self {
            articles,
            eligibility_applied: false,
        })
    }

    pub fn len(&self) -> usize {
        self.articles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.articles.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Article> {
        self.articles.iter()
    }

    pub fn articles(&self) -> &[Article] {
        &self.articles
    }

    pub fn get(&self, id: &str) -> Option<&Article> {
        self.articles.iter().find(|a| a.id == id)
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.articles.iter().map(|a| a.id.as_str()).collect()
    }

    /// Units present in the set, ascending.
    pub fn units(&self) -> BTreeSet<u8> {
        self.articles.iter().map(|a| a.uoa).collect()
    }

    /// Article id to unit map.
    pub fn unit_map(&self) -> BTreeMap<String, u8> {
        self.articles.iter().map(|a| (a.id.clone(), a.uoa)).collect()
    }

    pub fn is_eligibility_filtered(&self) -> bool {
        self.eligibility_applied
    }

    /// Serialises the set as JSONL in the ingestion schema.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for a in &self.articles {
            out.push_str(&serde_json::to_string(a).expect("article serialises"));
            out.push('\n');
        }
        out
    }
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let file = std::fs::File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    std::io::BufReader::new(file)
        .lines()
        .collect::<Result<_, _>>()
        .map_err(|source| CorpusError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Parses JSONL article records. Blank lines are skipped; line numbers in
/// errors are 1-based.
pub fn parse_articles<I, S>(lines: I) -> Result<ArticleSet, CorpusError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut articles = Vec::new();
    let mut line_of: HashMap<String, usize> = HashMap::new();
    for (i, raw) in lines.into_iter().enumerate() {
        let line = i + 1;
        let raw = raw.as_ref().trim();
        if raw.is_empty() {
            continue;
        }
        let rec: ArticleLine = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        let article = rec.into_article(line)?;
        if let Some(&first) = line_of.get(&article.id) {
            return Err(CorpusError::DuplicateId {
                id: article.id,
                first,
                second: line,
            });
        }
        line_of.insert(article.id.clone(), line);
        articles.push(article);
    }
    ArticleSet::new(articles)
}

/// Loads an article JSONL file.
pub fn load_articles(path: impl AsRef<Path>) -> Result<ArticleSet, CorpusError> {
    parse_articles(read_lines(path.as_ref())?)
}

fn has_doi(a: &Article) -> bool {
    a.doi.as_deref().is_some_and(|d| !d.trim().is_empty())
}

/// Removes articles without a DOI or abstract, then per unit drops the
/// articles strictly shorter (in characters) than the article at the 10%
/// rank. Ties at the cutoff are kept, so the result does not depend on input
/// order. A set that has already been through this stage is returned as is.
pub fn filter_eligible(set: &ArticleSet) -> ArticleSet {
    if set.eligibility_applied {
        return set.clone();
    }
    let with_text: Vec<&Article> = set
        .iter()
        .filter(|a| has_doi(a) && !a.abstract_text.trim().is_empty())
        .collect();

    let mut cutoff: BTreeMap<u8, usize> = BTreeMap::new();
    for uoa in with_text.iter().map(|a| a.uoa).collect::<BTreeSet<_>>() {
        let mut lens: Vec<usize> = with_text
            .iter()
            .filter(|a| a.uoa == uoa)
            .map(|a| a.abstract_text.chars().count())
            .collect();
        lens.sort_unstable();
        let drop = lens.len() / 10;
        cutoff.insert(uoa, lens[drop]);
    }

    let articles = with_text
        .into_iter()
        .filter(|a| a.abstract_text.chars().count() >= cutoff[&a.uoa])
        .cloned()
        .collect();
    ArticleSet {
        articles,
        eligibility_applied: true,
    }
}

/// Uniform sample of `min(n, available)` articles per unit, kept in input
/// order. Each unit draws from its own substream of `seed`.
pub fn sample_per_uoa(set: &ArticleSet, n: usize, seed: u64) -> ArticleSet {
    let mut keep = vec![false; set.len()];
    for uoa in set.units() {
        let positions: Vec<usize> = set
            .iter()
            .enumerate()
            .filter(|(_, a)| a.uoa == uoa)
            .map(|(i, _)| i)
            .collect();
        if n >= positions.len() {
            positions.iter().for_each(|&i| keep[i] = true);
            continue;
        }
        let mut rng = seed::rng(seed::derive(seed, &[u64::from(uoa)]));
        for j in index::sample(&mut rng, positions.len(), n) {
            keep[positions[j]] = true;
        }
    }
    ArticleSet {
        articles: set
            .iter()
            .zip(keep)
            .filter(|(_, k)| *k)
            .map(|(a, _)| a.clone())
            .collect(),
        eligibility_applied: set.eligibility_applied,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldKind {
    DepartmentalProxy,
    Individual,
}

impl GoldKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GoldKind::DepartmentalProxy => "departmental_proxy",
            GoldKind::Individual => "individual",
        }
    }
}

impl std::fmt::Display for GoldKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Reference quality scores on the 1 to 4 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct GoldStandard {
    pub kind: GoldKind,
    pub scores: BTreeMap<String, f64>,
}

impl GoldStandard {
    pub fn get(&self, id: &str) -> Option<f64> {
        self.scores.get(id).copied()
    }

    /// Checks the gold ids against `set` and the score range.
    pub fn validate(&self, set: &ArticleSet) -> Result<(), CorpusError> {
        let ids = set.ids();
        for (id, &s) in &self.scores {
            if !ids.contains(id.as_str()) {
                return Err(CorpusError::UnknownArticle(id.clone()));
            }
            if !(1.0..=4.0).contains(&s) {
                return Err(CorpusError::ScoreOutOfRange {
                    id: id.clone(),
                    score: s,
                    lo: 1.0,
                    hi: 4.0,
                });
            }
        }
        Ok(())
    }

    /// Drops ids that are not in `set`.
    pub fn restricted_to(&self, set: &ArticleSet) -> GoldStandard {
        let ids = set.ids();
        GoldStandard {
            kind: self.kind,
            scores: self
                .scores
                .iter()
                .filter(|(id, _)| ids.contains(id.as_str()))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        }
    }
}

/// Reads an `article_id,score` CSV into a multimap, keeping every row so
/// repeated submissions of one article survive.
pub fn read_score_csv(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<f64>>, CorpusError> {
    let path = path.as_ref();
    let gold_err = |message: String| CorpusError::Gold {
        path: path.display().to_string(),
        message,
    };
    let mut rdr = csv::Reader::from_path(path).map_err(|e| gold_err(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| gold_err(e.to_string()))?.clone();
    if headers.len() < 2 || &headers[0] != "article_id" || &headers[1] != "score" {
        return Err(gold_err(format!(
            "expected header `article_id,score`, found `{}`",
            headers.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut out: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| gold_err(e.to_string()))?;
        let score: f64 = row[1]
            .trim()
            .parse()
            .map_err(|_| gold_err(format!("line {}: bad score {:?}", i + 2, &row[1])))?;
        out.entry(row[0].trim().to_string()).or_default().push(score);
    }
    Ok(out)
}

/// Loads a gold CSV whose scores are already on the 1 to 4 scale. An
/// article listed more than once takes the mean of its rows.
pub fn load_gold(path: impl AsRef<Path>, kind: GoldKind) -> Result<GoldStandard, CorpusError> {
    let rows = read_score_csv(path)?;
    let scores = rows
        .into_iter()
        .map(|(id, v)| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            (id, m)
        })
        .collect();
    Ok(GoldStandard { kind, scores })
}

/// Result of building the departmental proxy: the gold map plus the ids in
/// the set that had no submission scores.
#[derive(Debug, Clone)]
pub struct ProxyGold {
    pub gold: GoldStandard,
    pub missing: Vec<String>,
}

/// Each article inherits the mean of the departmental means of the
/// submissions that included it.
pub fn build_proxy_gold(
    set: &ArticleSet,
    submissions: &BTreeMap<String, Vec<f64>>,
) -> Result<ProxyGold, CorpusError> {
    let ids = set.ids();
    let mut scores = BTreeMap::new();
    for (id, list) in submissions {
        if !ids.contains(id.as_str()) {
            return Err(CorpusError::UnknownArticle(id.clone()));
        }
        if list.is_empty() {
            return Err(CorpusError::EmptySubmissions(id.clone()));
        }
        let mean = list.iter().sum::<f64>() / list.len() as f64;
        if !(1.0..=4.0).contains(&mean) {
            return Err(CorpusError::ScoreOutOfRange {
                id: id.clone(),
                score: mean,
                lo: 1.0,
                hi: 4.0,
            });
        }
        scores.insert(id.clone(), mean);
    }
    let missing: Vec<String> = set
        .iter()
        .filter(|a| !submissions.contains_key(&a.id))
        .map(|a| a.id.clone())
        .collect();
    for id in &missing {
        log::warn!("article {id} has no departmental score; excluded from the proxy gold standard");
    }
    Ok(ProxyGold {
        gold: GoldStandard {
            kind: GoldKind::DepartmentalProxy,
            scores,
        },
        missing,
    })
}

/// Maps a nine-point score linearly onto [1, 4].
pub fn nine_to_four(s: f64) -> f64 {
    1.0 + (s - 1.0) * 3.0 / 8.0
}

/// Norm-references nine-point scores: affine map onto [1, 4], then a
/// per-unit additive shift so each unit's mean hits its target, clamped to
/// [1, 4].
pub fn norm_reference(
    set: &ArticleSet,
    raw: &BTreeMap<String, f64>,
    targets: &BTreeMap<u8, f64>,
) -> Result<GoldStandard, CorpusError> {
    for (&uoa, &t) in targets {
        if !(1.0..=4.0).contains(&t) {
            return Err(CorpusError::TargetOutOfRange { uoa, target: t });
        }
    }
    let mut by_unit: BTreeMap<u8, Vec<(&str, f64)>> = BTreeMap::new();
    for (id, &s) in raw {
        let a = set
            .get(id)
            .ok_or_else(|| CorpusError::UnknownArticle(id.clone()))?;
        if !(1.0..=9.0).contains(&s) {
            return Err(CorpusError::ScoreOutOfRange {
                id: id.clone(),
                score: s,
                lo: 1.0,
                hi: 9.0,
            });
        }
        by_unit.entry(a.uoa).or_default().push((id, nine_to_four(s)));
    }
    let mut scores = BTreeMap::new();
    for (uoa, mapped) in by_unit {
        let target = *targets.get(&uoa).ok_or(CorpusError::MissingTarget(uoa))?;
        let mean = mapped.iter().map(|(_, v)| v).sum::<f64>() / mapped.len() as f64;
        let shift = target - mean;
        for (id, v) in mapped {
            scores.insert(id.to_string(), (v + shift).clamp(1.0, 4.0));
        }
    }
    Ok(GoldStandard {
        kind: GoldKind::Individual,
        scores,
    })
}

/// An article with a known star level, used as a few-shot example.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarArticle {
    pub article: Article,
    pub star: u8,
}

/// Two exemplars for every (unit, star) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct FewShotPool {
    cells: BTreeMap<(u8, u8), [ExemplarArticle; 2]>,
}

impl FewShotPool {
    /// Validates and builds a pool. Every unit that appears must fill all
    /// four star cells with exactly two exemplars, and no exemplar may be in
    /// `eval_set`.
    pub fn new(exemplars: Vec<ExemplarArticle>, eval_set: &ArticleSet) -> Result<Self, CorpusError> {
        let eval_ids = eval_set.ids();
        let mut grouped: BTreeMap<(u8, u8), Vec<ExemplarArticle>> = BTreeMap::new();
        for e in exemplars {
            if eval_ids.contains(e.article.id.as_str()) {
                return Err(CorpusError::PoolOverlap(e.article.id));
            }
            grouped.entry((e.article.uoa, e.star)).or_default().push(e);
        }
        let units: BTreeSet<u8> = grouped.keys().map(|(u, _)| *u).collect();
        let mut cells = BTreeMap::new();
        for uoa in units {
            for star in STAR_LEVELS {
                let list = grouped.remove(&(uoa, star)).unwrap_or_default();
                let count = list.len();
                let pair: [ExemplarArticle; 2] = list
                    .try_into()
                    .map_err(|_| CorpusError::PoolCellCount { uoa, star, count })?;
                cells.insert((uoa, star), pair);
            }
        }
        Ok(Self { cells })
    }

    pub fn cell(&self, uoa: u8, star: u8) -> Option<&[ExemplarArticle; 2]> {
        self.cells.get(&(uoa, star))
    }

    pub fn units(&self) -> BTreeSet<u8> {
        self.cells.keys().map(|(u, _)| *u).collect()
    }

    pub fn len(&self) -> usize {
        self.cells.len() * 2
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }
}

/// Parses few-shot pool JSONL (article keys plus `star`).
pub fn parse_fewshot_pool<I, S>(lines: I, eval_set: &ArticleSet) -> Result<FewShotPool, CorpusError>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut exemplars = Vec::new();
    let mut line_of: HashMap<String, usize> = HashMap::new();
    for (i, raw) in lines.into_iter().enumerate() {
        let line = i + 1;
        let raw = raw.as_ref().trim();
        if raw.is_empty() {
            continue;
        }
        let rec: ExemplarLine = serde_json::from_str(raw).map_err(|e| CorpusError::Malformed {
            line,
            message: e.to_string(),
        })?;
        if !STAR_LEVELS.contains(&rec.star) {
            return Err(CorpusError::Malformed {
                line,
                message: format!("star {} is not in 1..=4", rec.star),
            });
        }
        let star = rec.star;
        let article = rec.article.into_article(line)?;
        if let Some(&first) = line_of.get(&article.id) {
            return Err(CorpusError::DuplicateId {
                id: article.id,
                first,
                second: line,
            });
        }
        line_of.insert(article.id.clone(), line);
        exemplars.push(ExemplarArticle { article, star });
    }
    FewShotPool::new(exemplars, eval_set)
}

pub fn load_fewshot_pool(path: impl AsRef<Path>, eval_set: &ArticleSet) -> Result<FewShotPool, CorpusError> {
    parse_fewshot_pool(read_lines(path.as_ref())?, eval_set)
}
