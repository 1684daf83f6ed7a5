//! Word association analysis between two report corpora: per-term document
//! containment compared by 2×2 chi-square with Benjamini-Hochberg
//! adjustment, plus keyword-in-context samples.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::seed;

pub const DEFAULT_MIN_DF: usize = 5;
pub const DEFAULT_Q: f64 = 0.05;

/// Rules applied before testing; written at the top of every output.
pub const ASSUMPTIONS: &[&str] = &[
    "terms are lowercased runs of alphanumeric characters; every other character separates terms",
    "terms shorter than 2 characters are dropped; no stop-word list is applied",
    "each document contributes presence only, not counts",
    "terms are tested when present in at least {min_df} documents across both corpora",
    "chi-square on the 2x2 presence table, 1 degree of freedom, no continuity correction",
    "q values are Benjamini-Hochberg adjusted over all tested terms (false discovery rate control)",
];

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum WataError {
    #[error("corpus {0} is empty")]
    EmptyCorpus(&'static str),
    #[error("kwic sample size must be at least 1")]
    ZeroSample,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedDoc {
    pub id: String,
    pub terms: BTreeSet<String>,
}

/// Distinct terms of a text.
pub fn terms(text: &str) -> BTreeSet<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| t.chars().count() >= 2)
        .map(str::to_lowercase)
        .collect()
}

pub fn tokenize(id: &str, text: &str) -> TokenizedDoc {
    TokenizedDoc {
        id: id.to_string(),
        terms: terms(text),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    A,
    B,
    /// Equal containment rates.
    Neither,
}

impl Direction {
    fn flip(self) -> Self {
        match self {
            Direction::A => Direction::B,
            Direction::B => Direction::A,
            Direction::Neither => Direction::Neither,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::A => "a",
            Direction::B => "b",
            Direction::Neither => "neither",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TermStat {
    pub term: String,
    pub df_a: usize,
    pub df_b: usize,
    pub n_a: usize,
    pub n_b: usize,
    pub chi2: f64,
    pub p: f64,
    pub q: f64,
    pub direction: Direction,
}

impl TermStat {
    pub fn pct_a(&self) -> f64 {
        100.0 * self.df_a as f64 / self.n_a as f64
    }

    pub fn pct_b(&self) -> f64 {
        100.0 * self.df_b as f64 / self.n_b as f64
    }

    /// The same statistic with the corpora swapped.
    pub fn swapped(&self) -> Self {
        Self {
            df_a: self.df_b,
            df_b: self.df_a,
            n_a: self.n_b,
            n_b: self.n_a,
            direction: self.direction.flip(),
            ..self.clone()
        }
    }
}

/// Pearson chi-square of the presence table
/// `[[df_a, n_a − df_a], [df_b, n_b − df_b]]`, no continuity correction.
/// The numerator and denominator are formed in exact integer arithmetic.
pub fn chi_square_2x2(df_a: usize, n_a: usize, df_b: usize, n_b: usize) -> f64 {
    let (a, b, c, d) = (df_a as i128, (n_a - df_a) as i128, df_b as i128, (n_b - df_b) as i128);
    let n = a + b + c + d;
    let den = (a + b) * (c + d) * (a + c) * (b + d);
    if den == 0 {
        return 0.0;
    }
    let diff = a * d - b * c;
    (n as f64) * (diff as f64) * (diff as f64) / den as f64
}

/// Upper tail of the chi-square distribution with one degree of freedom.
pub fn chi2_sf_1df(x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else {
        erfc((x / 2.0).sqrt())
    }
}

/// Benjamini-Hochberg adjusted values, returned in input order. Ties in p
/// keep their input order, so the result is a pure function of the
/// (p, position) list.
pub fn bh_adjust(p: &[f64]) -> Vec<f64> {
    let m = p.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
    let mut q = vec![0.0; m];
    let mut running = 1.0f64;
    for (rank, &i) in order.iter().enumerate().rev() {
        running = running.min(p[i] * (m as f64 / (rank + 1) as f64));
        q[i] = running.min(1.0);
    }
    q
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WataOptions {
    pub q_threshold: f64,
    pub min_df: usize,
}

impl Default for WataOptions {
    fn default() -> Self {
        Self {
            q_threshold: DEFAULT_Q,
            min_df: DEFAULT_MIN_DF,
        }
    }
}

fn doc_freq(corpus: &[TokenizedDoc]) -> BTreeMap<&str, usize> {
    let mut df = BTreeMap::new();
    for d in corpus {
        for t in &d.terms {
            *df.entry(t.as_str()).or_insert(0) += 1;
        }
    }
    df
}

/// Statistics for every term meeting the document-frequency floor, in term
/// order, with q adjusted over exactly this set.
pub fn test_terms(a: &[TokenizedDoc], b: &[TokenizedDoc], min_df: usize) -> Result<Vec<TermStat>, WataError> {
    if a.is_empty() {
        return Err(WataError::EmptyCorpus("a"));
    }
    if b.is_empty() {
        return Err(WataError::EmptyCorpus("b"));
    }
    let (fa, fb) = (doc_freq(a), doc_freq(b));
    let vocab: BTreeSet<&str> = fa.keys().chain(fb.keys()).copied().collect();
    let (n_a, n_b) = (a.len(), b.len());
    let mut out: Vec<TermStat> = vocab
        .into_iter()
        .filter_map(|t| {
            let (df_a, df_b) = (fa.get(t).copied().unwrap_or(0), fb.get(t).copied().unwrap_or(0));
            if df_a + df_b < min_df {
                return None;
            }
            let chi2 = chi_square_2x2(df_a, n_a, df_b, n_b);
            let direction = match (df_a * n_b).cmp(&(df_b * n_a)) {
                std::cmp::Ordering::Greater => Direction::A,
                std::cmp::Ordering::Less => Direction::B,
                std::cmp::Ordering::Equal => Direction::Neither,
            };
            Some(TermStat {
                term: t.to_string(),
                df_a,
                df_b,
                n_a,
                n_b,
                chi2,
                p: chi2_sf_1df(chi2),
                q: f64::NAN,
                direction,
            })
        })
        .collect();
    let p: Vec<f64> = out.iter().map(|s| s.p).collect();
    for (s, q) in out.iter_mut().zip(bh_adjust(&p)) {
        s.q = q;
    }
    Ok(out)
}

/// Significant terms (q at or below the threshold), strongest first.
pub fn compare(a: &[TokenizedDoc], b: &[TokenizedDoc], opts: &WataOptions) -> Result<Vec<TermStat>, WataError> {
    let mut sig: Vec<TermStat> = test_terms(a, b, opts.min_df)?
        .into_iter()
        .filter(|s| s.q <= opts.q_threshold)
        .collect();
    sig.sort_by(|x, y| y.chi2.total_cmp(&x.chi2).then_with(|| x.term.cmp(&y.term)));
    Ok(sig)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KwicLine {
    pub doc_id: String,
    pub left: String,
    pub term: String,
    pub right: String,
}

fn flatten_ws(s: &str) -> String {
    s.chars().map(|c| if c.is_whitespace() { ' ' } else { c }).collect()
}

/// Seeded sample of up to `k` occurrences of `term` as a whole token, with
/// `window` characters of context either side. Occurrences are returned in
/// corpus order.
pub fn kwic(
    term: &str,
    corpus: &[(String, String)],
    k: usize,
    window: usize,
    seed: u64,
) -> Result<Vec<KwicLine>, WataError> {
    if k == 0 {
        return Err(WataError::ZeroSample);
    }
    let term = term.to_lowercase();
    let mut hits: Vec<(usize, usize, usize)> = Vec::new();
    for (di, (_, text)) in corpus.iter().enumerate() {
        let mut start = None;
        for (pos, c) in text.char_indices().chain(std::iter::once((text.len(), ' '))) {
            match (c.is_alphanumeric(), start) {
                (true, None) => start = Some(pos),
                (false, Some(s)) => {
                    if text[s..pos].to_lowercase() == term {
                        hits.push((di, s, pos));
                    }
                    start = None;
                }
                _ => {}
            }
        }
    }
    let chosen: Vec<usize> = if hits.len() <= k {
        (0..hits.len()).collect()
    } else {
        let mut rng = seed::rng(seed::derive(seed, &[seed::stage::KWIC, seed::hash_str(&term)]));
        let mut v = index::sample(&mut rng, hits.len(), k).into_vec();
        v.sort_unstable();
        v
    };
    Ok(chosen
        .into_iter()
        .map(|h| {
            let (di, s, e) = hits[h];
            let text = &corpus[di].1;
            let before: Vec<char> = text[..s].chars().collect();
            let left: String = before[before.len().saturating_sub(window)..].iter().collect();
            let right: String = text[e..].chars().take(window).collect();
            KwicLine {
                doc_id: corpus[di].0.clone(),
                left: flatten_ws(&left),
                term: text[s..e].to_string(),
                right: flatten_ws(&right),
            }
        })
        .collect())
}

fn header(opts: &WataOptions) -> String {
    ASSUMPTIONS
        .iter()
        .map(|a| format!("# {}\n", a.replace("{min_df}", &opts.min_df.to_string())))
        .collect()
}

/// Term table as CSV with the tokenisation assumptions as leading comments.
pub fn term_stats_csv(stats: &[TermStat], opts: &WataOptions, label_a: &str, label_b: &str) -> String {
    let mut out = header(opts);
    out.push_str(&format!("# corpus a = {label_a}; corpus b = {label_b}; q threshold {}\n", opts.q_threshold));
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["term", "df_a", "n_a", "pct_a", "df_b", "n_b", "pct_b", "chi2", "p", "q", "direction"])
        .expect("in-memory write");
    for s in stats {
        w.write_record([
            s.term.clone(),
            s.df_a.to_string(),
            s.n_a.to_string(),
            format!("{:.1}", s.pct_a()),
            s.df_b.to_string(),
            s.n_b.to_string(),
            format!("{:.1}", s.pct_b()),
            format!("{:.6}", s.chi2),
            format!("{:.6e}", s.p),
            format!("{:.6e}", s.q),
            s.direction.as_str().to_string(),
        ])
        .expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf8"));
    out
}

/// Plain-text keyword-in-context report grouped by term.
pub fn kwic_report(groups: &[(TermStat, Vec<KwicLine>)], opts: &WataOptions) -> String {
    let mut out = header(opts);
    for (s, lines) in groups {
        out.push_str(&format!(
            "\n== {} (a {:.1}%, b {:.1}%, chi2 {:.2}, q {:.3e}) ==\n",
            s.term,
            s.pct_a(),
            s.pct_b(),
            s.chi2,
            s.q
        ));
        for l in lines {
            out.push_str(&format!("[{}] ...{}[{}]{}...\n", l.doc_id, l.left, l.term, l.right));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn docs(prefix: &str, n: usize, with: usize, term: &str) -> Vec<TokenizedDoc> {
        (0..n)
            .map(|i| {
                let text = if i < with { format!("common {term} words") } else { "common words".to_string() };
                tokenize(&format!("{prefix}{i}"), &text)
            })
            .collect()
    }

    fn set(xs: &[&str]) -> BTreeSet<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn tokenizer_rules() {
        assert!(terms("").is_empty());
        assert_eq!(terms("Score: 3* (score!)"), set(&["score"]));
        assert_eq!(terms("Let's think"), set(&["let", "think"]));
        assert_eq!(terms("Rigour, RIGOUR; rigour-based 4/4"), set(&["rigour", "based"]));
    }

    /// Sum of (O − E)² / E over the four cells.
    fn oracle_chi2(df_a: f64, n_a: f64, df_b: f64, n_b: f64) -> f64 {
        let n = n_a + n_b;
        let col = [df_a + df_b, n - df_a - df_b];
        let obs = [[df_a, n_a - df_a], [df_b, n_b - df_b]];
        let rows = [n_a, n_b];
        let mut s = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let e = rows[i] * col[j] / n;
                s += (obs[i][j] - e).powi(2) / e;
            }
        }
        s
    }

    #[test]
    fn planted_term_statistic() {
        let a = docs("a", 200, 180, "evaluation");
        let b = docs("b", 200, 20, "evaluation");
        assert_eq!(chi_square_2x2(180, 200, 20, 200), 256.0);
        assert_eq!(oracle_chi2(180.0, 200.0, 20.0, 200.0), 256.0);
        let sig = compare(&a, &b, &WataOptions::default()).unwrap();
        assert_eq!(sig.len(), 1);
        assert_eq!(sig[0].term, "evaluation");
        assert_eq!(sig[0].direction, Direction::A);
        assert_eq!((sig[0].pct_a(), sig[0].pct_b()), (90.0, 10.0));
        assert!(sig[0].q <= 0.05 && sig[0].q >= sig[0].p);
    }

    #[test]
    fn identical_corpora_give_nothing() {
        let a = docs("a", 50, 25, "maybe");
        let sig = compare(&a, &a, &WataOptions { q_threshold: 0.99, ..Default::default() }).unwrap();
        assert!(sig.is_empty());
        for s in test_terms(&a, &a, 5).unwrap() {
            assert_eq!(s.chi2, 0.0);
            assert_eq!(s.direction, Direction::Neither);
        }
    }

    #[test]
    fn empty_corpus_errors() {
        let a = docs("a", 5, 1, "x1");
        assert_eq!(compare(&[], &a, &WataOptions::default()), Err(WataError::EmptyCorpus("a")));
        assert_eq!(compare(&a, &[], &WataOptions::default()), Err(WataError::EmptyCorpus("b")));
    }

    #[test]
    fn min_df_floor() {
        let a = docs("a", 10, 2, "rare");
        let b = docs("b", 10, 2, "other");
        let tested: Vec<String> = test_terms(&a, &b, 5).unwrap().into_iter().map(|s| s.term).collect();
        assert_eq!(tested, vec!["common", "words"]);
    }

    #[test]
    fn chi_square_oracle_grid() {
        for (na, nb) in [(10, 10), (7, 13), (40, 25)] {
            for da in 0..=na {
                for db in 0..=nb {
                    let got = chi_square_2x2(da, na, db, nb);
                    if da + db == 0 || da + db == na + nb {
                        assert_eq!(got, 0.0);
                        continue;
                    }
                    let want = oracle_chi2(da as f64, na as f64, db as f64, nb as f64);
                    assert!((got - want).abs() <= 1e-9 * want.max(1.0), "{da}/{na} {db}/{nb}");
                    assert_eq!(got == 0.0, da * nb == db * na);
                }
            }
        }
    }

    #[test]
    fn survival_function_values() {
        assert_eq!(chi2_sf_1df(0.0), 1.0);
        assert!((chi2_sf_1df(3.841_458_820_694_124) - 0.05).abs() < 1e-10);
        assert!((chi2_sf_1df(6.634_896_601_021_214) - 0.01).abs() < 1e-10);
    }

    #[test]
    fn bh_hand_example() {
        let q = bh_adjust(&[0.01, 0.04, 0.03, 0.5]);
        // sorted p: .01 .03 .04 .5 → .04, .06, .0533, .5 → cumulative min from the top
        let want = [0.04, 0.053_333_333_333_333_33, 0.053_333_333_333_333_33, 0.5];
        for (g, w) in q.iter().zip(want) {
            assert!((g - w).abs() < 1e-15);
        }
    }

    #[test]
    fn kwic_behaviour() {
        let corpus = vec![
            ("d1".to_string(), "The method is novel.\nA novel approach, truly Novel!".to_string()),
            ("d2".to_string(), "Nothing here; novelty is not the word.".to_string()),
        ];
        assert!(kwic("absent", &corpus, 5, 10, 1).unwrap().is_empty());
        let all = kwic("novel", &corpus, 10, 6, 1).unwrap();
        assert_eq!(all.len(), 3);
        assert_eq!(all[0].left, "od is ");
        assert_eq!(all[0].right, ". A no");
        assert_eq!(all[2].term, "Novel");
        let two = kwic("novel", &corpus, 2, 6, 9).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two, kwic("novel", &corpus, 2, 6, 9).unwrap());
        assert_eq!(kwic("novel", &corpus, 0, 6, 9), Err(WataError::ZeroSample));
    }

    #[test]
    fn csv_header_lists_assumptions() {
        let a = docs("a", 200, 180, "evaluation");
        let b = docs("b", 200, 20, "evaluation");
        let sig = compare(&a, &b, &WataOptions::default()).unwrap();
        let csv = term_stats_csv(&sig, &WataOptions::default(), "zero", "few");
        assert_eq!(csv.lines().filter(|l| l.starts_with('#')).count(), ASSUMPTIONS.len() + 1);
        assert!(csv.contains("at least 5 documents"));
        assert!(csv.contains("\nevaluation,180,200,90.0,20,200,10.0,256.000000,"));
    }

    fn corpus_strategy() -> impl proptest::strategy::Strategy<Value = Vec<Vec<u8>>> {
        prop::collection::vec(prop::collection::vec(0u8..12, 0..6), 1..25)
    }

    fn build(prefix: &str, raw: &[Vec<u8>]) -> Vec<TokenizedDoc> {
        raw.iter()
            .enumerate()
            .map(|(i, ts)| {
                let text: Vec<String> = ts.iter().map(|t| format!("t{}", t)).collect();
                tokenize(&format!("{}{}", prefix, i), &text.join(" "))
            })
            .collect()
    }

    proptest! {
        #[test]
        fn swap_symmetry(ra in corpus_strategy(), rb in corpus_strategy()) {
            let (a, b) = (build("a", &ra), build("b", &rb));
            let ab = test_terms(&a, &b, 1).unwrap();
            let ba = test_terms(&b, &a, 1).unwrap();
            prop_assert_eq!(ab.len(), ba.len());
            for (x, y) in ab.iter().zip(&ba) {
                prop_assert_eq!(&x.swapped(), y);
            }
            let opts = WataOptions { q_threshold: 0.5, min_df: 1 };
            let sa: Vec<TermStat> = compare(&a, &b, &opts).unwrap().iter().map(TermStat::swapped).collect();
            prop_assert_eq!(sa, compare(&b, &a, &opts).unwrap());
        }

        #[test]
        fn bh_properties(p in prop::collection::vec(0.0f64..=1.0, 1..60)) {
            let q = bh_adjust(&p);
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.sort_by(|&i, &j| p[i].total_cmp(&p[j]).then(i.cmp(&j)));
            for w in idx.windows(2) {
                let (q0, q1) = (q[w[0]], q[w[1]]);
                prop_assert!(q0 <= q1);
            }
            for (pi, qi) in p.iter().zip(&q) {
                prop_assert!(qi >= pi && *qi <= 1.0);
            }
        }
    }
}
