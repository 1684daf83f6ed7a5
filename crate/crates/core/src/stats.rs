//! Iteration averaging, Spearman correlation, bootstrap intervals,
//! cross-unit aggregation and exact sign tests.

use std::collections::BTreeMap;

use num_bigint::BigUint;
use num_rational::BigRational;
use num_traits::{One, ToPrimitive, Zero};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::extract::ScoreRecord;
use crate::gateway::Strategy;
use crate::seed;

pub const DEFAULT_BOOTSTRAP_REPS: usize = 1000;
pub const DEFAULT_ALPHA: f64 = 0.05;
/// Redraws allowed for a single replicate before the input is declared
/// too degenerate to bootstrap.
const MAX_REDRAWS: usize = 100;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum StatsError {
    #[error("vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {min} observations, have {n}")]
    TooFew { n: usize, min: usize },
    #[error("correlation undefined: a vector is constant")]
    Constant,
    #[error("non-finite value in input")]
    NonFinite,
    #[error("{degenerate} of {reps} bootstrap resamples were constant; input too degenerate")]
    TooDegenerate { degenerate: usize, reps: usize },
    #[error("{0}")]
    BadParameter(String),
}

/// A score column: one model under one prompting strategy.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ColumnId {
    pub model: String,
    pub strategy: Strategy,
}

impl ColumnId {
    pub fn new(model: impl Into<String>, strategy: Strategy) -> Self {
        Self {
            model: model.into(),
            strategy,
        }
    }
}

impl std::fmt::Display for ColumnId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.model, self.strategy)
    }
}

/// Mean over usable iterations for one article in one column.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Cell {
    pub mean: Option<f64>,
    /// Iterations that contributed.
    pub k: usize,
}

/// Per-article means over the usable records of one column: status ok, a
/// score extracted, not a multi-article response.
pub fn mean_over_iterations<'a>(records: impl IntoIterator<Item = &'a ScoreRecord>) -> BTreeMap<String, Cell> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in records {
        let slot = acc.entry(r.key.article_id.clone()).or_insert((0.0, 0));
        if r.is_usable() {
            slot.0 += r.effective.expect("usable records have a score");
            slot.1 += 1;
        }
    }
    acc.into_iter()
        .map(|(id, (sum, k))| {
            let mean = (k > 0).then(|| sum / k as f64);
            (id, Cell { mean, k })
        })
        .collect()
}

/// Articles × columns grid of iteration-averaged scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    articles: Vec<String>,
    columns: BTreeMap<ColumnId, Vec<Cell>>,
}

impl ScoreMatrix {
    /// Assembles the matrix over `articles` (row order kept) from extracted
    /// records. Records for articles outside `articles` are ignored.
    pub fn from_records(articles: &[String], records: &[ScoreRecord]) -> Self {
        let mut by_col: BTreeMap<ColumnId, Vec<&ScoreRecord>> = BTreeMap::new();
        for r in records {
            by_col
                .entry(ColumnId::new(r.key.model.clone(), r.key.strategy))
                .or_default()
                .push(r);
        }
        let columns = by_col
            .into_iter()
            .map(|(col, recs)| {
                let cells = mean_over_iterations(recs);
                let column = articles
                    .iter()
                    .map(|a| cells.get(a).copied().unwrap_or_default())
                    .collect();
                (col, column)
            })
            .collect();
        Self {
            articles: articles.to_vec(),
            columns,
        }
    }

    /// Builds a matrix directly from column vectors (all of `articles` length).
    pub fn from_columns(articles: Vec<String>, columns: BTreeMap<ColumnId, Vec<Option<f64>>>) -> Self {
        let columns = columns
            .into_iter()
            .map(|(c, v)| {
                assert_eq!(v.len(), articles.len(), "column {c} length");
                let cells = v
                    .into_iter()
                    .map(|m| Cell {
                        mean: m,
                        k: usize::from(m.is_some()),
                    })
                    .collect();
                (c, cells)
            })
            .collect();
        Self { articles, columns }
    }

    pub fn articles(&self) -> &[String] {
        &self.articles
    }

    pub fn n_rows(&self) -> usize {
        self.articles.len()
    }

    pub fn column_ids(&self) -> impl Iterator<Item = &ColumnId> {
        self.columns.keys()
    }

    pub fn n_columns(&self) -> usize {
        self.columns.len()
    }

    pub fn cells(&self, col: &ColumnId) -> Option<&[Cell]> {
        self.columns.get(col).map(Vec::as_slice)
    }

    pub fn values(&self, col: &ColumnId) -> Option<Vec<Option<f64>>> {
        self.columns.get(col).map(|c| c.iter().map(|x| x.mean).collect())
    }

    /// Values of every column for row `i`, in column order.
    pub fn row(&self, i: usize) -> Vec<Option<f64>> {
        self.columns.values().map(|c| c[i].mean).collect()
    }

    /// Rows whose article id satisfies `keep`, order preserved.
    pub fn filter_rows(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        let idx: Vec<usize> = (0..self.articles.len()).filter(|&i| keep(&self.articles[i])).collect();
        Self {
            articles: idx.iter().map(|&i| self.articles[i].clone()).collect(),
            columns: self
                .columns
                .iter()
                .map(|(c, v)| (c.clone(), idx.iter().map(|&i| v[i]).collect()))
                .collect(),
        }
    }

    /// Keeps only the named columns.
    pub fn select_columns(&self, keep: impl Fn(&ColumnId) -> bool) -> Self {
        Self {
            articles: self.articles.clone(),
            columns: self
                .columns
                .iter()
                .filter(|(c, _)| keep(c))
                .map(|(c, v)| (c.clone(), v.clone()))
                .collect(),
        }
    }
}

fn check_finite(v: &[f64]) -> Result<(), StatsError> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(StatsError::NonFinite)
    }
}

/// 1-based ranks with ties given the mean of the positions they span.
pub fn mid_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::Constant);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

fn is_constant(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[0] == w[1])
}

/// Spearman rank correlation: Pearson correlation of mid-ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 3 {
        return Err(StatsError::TooFew { n: x.len(), min: 3 });
    }
    check_finite(x)?;
    check_finite(y)?;
    if is_constant(x) || is_constant(y) {
        return Err(StatsError::Constant);
    }
    pearson(&mid_ranks(x), &mid_ranks(y))
}

/// Drops pairs where either side is missing.
pub fn complete_pairs(x: &[Option<f64>], y: &[Option<f64>]) -> (Vec<f64>, Vec<f64>) {
    x.iter()
        .zip(y)
        .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
        .unzip()
}

/// Linear-interpolation quantile of sorted data (the "type 7" rule).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of empty data");
    let h = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub low: f64,
    pub high: f64,
    pub reps: usize,
    /// Constant resamples that were redrawn.
    pub degenerate: usize,
}

/// Percentile bootstrap interval for Spearman's rho, resampling pairs with
/// replacement. Replicate `i` draws from substream `(seed, i)`, so the
/// result does not depend on thread scheduling.
pub fn bootstrap_ci(x: &[f64], y: &[f64], reps: usize, alpha: f64, seed: u64) -> Result<BootstrapCi, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFew { n, min: 3 });
    }
    if reps < 100 {
        return Err(StatsError::BadParameter(format!("bootstrap needs at least 100 replicates, got {reps}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::BadParameter(format!("alpha {alpha} outside (0, 1)")));
    }
    check_finite(x)?;
    check_finite(y)?;

    let draws: Vec<Option<(f64, usize)>> = (0..reps)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed, &[i as u64]));
            let mut xs = vec![0.0; n];
            let mut ys = vec![0.0; n];
            for redraws in 0..=MAX_REDRAWS {
                for j in 0..n {
                    let k = rng.gen_range(0..n);
                    xs[j] = x[k];
                    ys[j] = y[k];
                }
                if !is_constant(&xs) && !is_constant(&ys) {
                    let rho = pearson(&mid_ranks(&xs), &mid_ranks(&ys)).expect("non-constant resample");
                    return Some((rho, redraws));
                }
            }
            None
        })
        .collect();

    let mut degenerate = 0;
    let mut rhos = Vec::with_capacity(reps);
    for d in &draws {
        match d {
            Some((rho, redraws)) => {
                degenerate += redraws;
                rhos.push(*rho);
            }
            None => degenerate += MAX_REDRAWS + 1,
        }
    }
    if rhos.len() < reps || degenerate * 2 > reps {
        return Err(StatsError::TooDegenerate { degenerate, reps });
    }
    rhos.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        low: quantile_sorted(&rhos, alpha / 2.0),
        high: quantile_sorted(&rhos, 1.0 - alpha / 2.0),
        reps,
        degenerate,
    })
}

/// Spearman rho with its bootstrap interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub rho: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n: usize,
    pub b_reps: usize,
}

/// Correlates two partially observed vectors over their complete pairs.
pub fn correlate(
    x: &[Option<f64>],
    y: &[Option<f64>],
    reps: usize,
    alpha: f64,
    seed: u64,
) -> Result<CorrelationResult, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let (a, b) = complete_pairs(x, y);
    let rho = spearman(&a, &b)?;
    let ci = bootstrap_ci(&a, &b, reps, alpha, seed)?;
    Ok(CorrelationResult {
        rho,
        ci_low: ci.low,
        ci_high: ci.high,
        n: a.len(),
        b_reps: reps,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnitAggregate {
    pub mean: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub m: usize,
}

/// Mean of per-unit correlations with a t interval,
/// `mean ± t(0.975, m−1)·sd/√m`, clipped to [−1, 1].
pub fn aggregate_across_units(rhos: &[f64]) -> Result<UnitAggregate, StatsError> {
    let m = rhos.len();
    if m < 2 {
        return Err(StatsError::TooFew { n: m, min: 2 });
    }
    check_finite(rhos)?;
    let mean = rhos.iter().sum::<f64>() / m as f64;
    let var = rhos.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1) as f64;
    let t = StudentsT::new(0.0, 1.0, (m - 1) as f64)
        .expect("positive degrees of freedom")
        .inverse_cdf(0.975);
    let half = t * var.sqrt() / (m as f64).sqrt();
    Ok(UnitAggregate {
        mean,
        ci_low: (mean - half).clamp(-1.0, 1.0),
        ci_high: (mean + half).clamp(-1.0, 1.0),
        m,
    })
}

fn binomial(n: u64, k: u64) -> BigUint {
    let k = k.min(n - k);
    let mut c = BigUint::one();
    for i in 0..k {
        c = c * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    c
}

/// Exact `P(X ≥ k)` for `X ~ Binomial(n, 1/2)` as a rational.
pub fn binomial_tail_exact(k: u64, n: u64) -> BigRational {
    assert!(k <= n, "k = {k} exceeds n = {n}");
    let mut num = BigUint::zero();
    for i in k..=n {
        num += binomial(n, i);
    }
    let den = BigUint::one() << n as usize;
    BigRational::new(num.into(), den.into())
}

/// Exact upper-tail probability of the fair-coin binomial.
pub fn binomial_tail(k: u64, n: u64) -> f64 {
    binomial_tail_exact(k, n).to_f64().expect("probability fits in f64")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignTestResult {
    pub k: u64,
    pub n: u64,
    pub p_value: f64,
}

/// Counts contexts where `a` beats `b` strictly and returns the one-sided
/// exact binomial p-value of that many wins.
pub fn sign_test(a: &[f64], b: &[f64]) -> Result<SignTestResult, StatsError> {
    if a.len() != b.len() {
        return Err(StatsError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(StatsError::TooFew { n: 0, min: 1 });
    }
    let k = a.iter().zip(b).filter(|(x, y)| x > y).count() as u64;
    let n = a.len() as u64;
    Ok(SignTestResult {
        k,
        n,
        p_value: binomial_tail(k, n),
    })
}
