//! Fused predictors built from several score columns: row mean, row median,
//! mean rank, and non-negative weighted sums fit by differential evolution.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::GoldStandard;
use crate::seed;
use crate::stats::{self, ColumnId, ScoreMatrix, StatsError};

pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum FusionError {
    #[error("matrix has no score columns")]
    NoColumns,
    #[error("weighted fusion needs at least 2 columns, have {0}")]
    TooFewColumns(usize),
    #[error("need at least {min} fully scored articles, have {n}")]
    TooFewRows { n: usize, min: usize },
    #[error("objective undefined for every candidate (constant gold or scores)")]
    DegenerateObjective,
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: StatsError },
    #[error("gold has {gold} entries but matrix has {rows} rows")]
    GoldLength { gold: usize, rows: usize },
    #[error("invalid differential evolution parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

/// Scores of one matrix row that are present, in column order.
fn present(row: &[Option<f64>]) -> Vec<f64> {
    row.iter().flatten().copied().collect()
}

/// Per-article mean over available columns.
pub fn mean_fusion(m: &ScoreMatrix) -> Result<Vec<Option<f64>>, FusionError> {
    if m.n_columns() == 0 {
        return Err(FusionError::NoColumns);
    }
    Ok((0..m.n_rows())
        .map(|i| {
            let v = present(&m.row(i));
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect())
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    })
}

/// Per-article median over available columns.
pub fn median_fusion(m: &ScoreMatrix) -> Result<Vec<Option<f64>>, FusionError> {
    if m.n_columns() == 0 {
        return Err(FusionError::NoColumns);
    }
    Ok((0..m.n_rows()).map(|i| median(&mut present(&m.row(i)))).collect())
}

/// Mid-ranks of the present entries; absent entries stay absent.
pub fn ranks_of_present(v: &[Option<f64>]) -> Vec<Option<f64>> {
    let idx: Vec<usize> = (0..v.len()).filter(|&i| v[i].is_some()).collect();
    let vals: Vec<f64> = idx.iter().map(|&i| v[i].unwrap()).collect();
    let r = stats::mid_ranks(&vals);
    let mut out = vec![None; v.len()];
    for (k, &i) in idx.iter().enumerate() {
        out[i] = Some(r[k]);
    }
    out
}

/// Ranks each column over its scored articles, then averages an article's
/// available ranks.
pub fn rank_average_fusion(m: &ScoreMatrix) -> Result<Vec<Option<f64>>, FusionError> {
    if m.n_columns() == 0 {
        return Err(FusionError::NoColumns);
    }
    let ranked: Vec<Vec<Option<f64>>> = m
        .column_ids()
        .map(|c| ranks_of_present(&m.values(c).expect("listed column")))
        .collect();
    Ok((0..m.n_rows())
        .map(|i| {
            let v: Vec<f64> = ranked.iter().filter_map(|c| c[i]).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect())
}

/// Gold values aligned with the matrix rows.
pub fn gold_column(m: &ScoreMatrix, gold: &GoldStandard) -> Vec<Option<f64>> {
    m.articles().iter().map(|a| gold.get(a)).collect()
}

/// `Σ w_j · column_j` over rows with every column present; other rows absent.
pub fn weighted_sum(m: &ScoreMatrix, w: &[f64]) -> Vec<Option<f64>> {
    assert_eq!(w.len(), m.n_columns(), "one weight per column");
    (0..m.n_rows())
        .map(|i| {
            let row = m.row(i);
            row.iter()
                .zip(w)
                .try_fold(0.0, |acc, (x, wj)| x.map(|x| acc + wj * x))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DeParams {
    pub population: usize,
    pub f: f64,
    pub cr: f64,
    pub generations: usize,
    pub lower: f64,
    pub upper: f64,
}

impl Default for DeParams {
    fn default() -> Self {
        Self {
            population: 40,
            f: 0.8,
            cr: 0.9,
            generations: 200,
            lower: 0.0,
            upper: 1.0,
        }
    }
}

impl DeParams {
    pub fn validate(&self) -> Result<(), FusionError> {
        let bad = |m: &str| Err(FusionError::BadParams(m.to_string()));
        if self.population < 4 {
            return bad("population must be at least 4");
        }
        if !(self.f > 0.0 && self.f <= 2.0) {
            return bad("F must lie in (0, 2]");
        }
        if !(0.0..=1.0).contains(&self.cr) {
            return bad("CR must lie in [0, 1]");
        }
        if !(self.lower >= 0.0 && self.upper > self.lower) {
            return bad("bounds must satisfy 0 <= lower < upper");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionWeights {
    pub columns: Vec<ColumnId>,
    pub w: Vec<f64>,
    /// Spearman correlation of the weighted sum with gold on the fitting rows.
    pub objective: f64,
    /// Best objective after initialisation and after each generation.
    pub history: Vec<f64>,
}

/// Rows with every column and the gold value present, flattened row-major.
struct Design {
    x: Vec<f64>,
    gold: Vec<f64>,
    d: usize,
}

impl Design {
    fn new(m: &ScoreMatrix, gold: &[Option<f64>], rows: Option<&[usize]>) -> Self {
        let d = m.n_columns();
        let mut x = Vec::new();
        let mut g = Vec::new();
        let all: Vec<usize>;
        let rows = match rows {
            Some(r) => r,
            None => {
                all = (0..m.n_rows()).collect();
                &all
            }
        };
        for &i in rows {
            let row = m.row(i);
            if let (Some(gv), true) = (gold[i], row.iter().all(Option::is_some)) {
                x.extend(row.into_iter().flatten());
                g.push(gv);
            }
        }
        Self { x, gold: g, d }
    }

    fn n(&self) -> usize {
        self.gold.len()
    }

    fn fused(&self, w: &[f64]) -> Vec<f64> {
        self.x
            .chunks_exact(self.d)
            .map(|r| r.iter().zip(w).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn objective(&self, w: &[f64]) -> f64 {
        stats::spearman(&self.fused(w), &self.gold).unwrap_or(f64::NEG_INFINITY)
    }
}

/// Indices of rows where every column and gold are present.
pub fn complete_rows(m: &ScoreMatrix, gold: &[Option<f64>]) -> Vec<usize> {
    (0..m.n_rows())
        .filter(|&i| gold[i].is_some() && m.row(i).iter().all(Option::is_some))
        .collect()
}

/// Fits non-negative column weights maximising the Spearman correlation of
/// the weighted sum with gold, by DE/rand/1/bin.
pub fn de_optimize(
    m: &ScoreMatrix,
    gold: &[Option<f64>],
    params: &DeParams,
    seed: u64,
) -> Result<FusionWeights, FusionError> {
    de_optimize_rows(m, gold, None, params, seed)
}

fn de_optimize_rows(
    m: &ScoreMatrix,
    gold: &[Option<f64>],
    rows: Option<&[usize]>,
    params: &DeParams,
    seed: u64,
) -> Result<FusionWeights, FusionError> {
    params.validate()?;
    if gold.len() != m.n_rows() {
        return Err(FusionError::GoldLength { gold: gold.len(), rows: m.n_rows() });
    }
    let d = m.n_columns();
    if d < 2 {
        return Err(FusionError::TooFewColumns(d));
    }
    let design = Design::new(m, gold, rows);
    if design.n() < 10 {
        return Err(FusionError::TooFewRows { n: design.n(), min: 10 });
    }
    let np = params.population;
    let span = params.upper - params.lower;

    let mut pop: Vec<Vec<f64>> = (0..np)
        .map(|i| {
            let mut rng = seed::rng(seed::derive(seed, &[0, i as u64]));
            (0..d).map(|_| params.lower + span * rng.gen::<f64>()).collect()
        })
        .collect();
    let mut fit: Vec<f64> = pop.par_iter().map(|w| design.objective(w)).collect();

    let best_of = |fit: &[f64]| {
        fit.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bf), (i, &f)| if f > bf { (i, f) } else { (bi, bf) })
    };
    let mut history = vec![best_of(&fit).1];

    for g in 1..=params.generations {
        let trials: Vec<Vec<f64>> = (0..np)
            .map(|i| {
                let mut rng = seed::rng(seed::derive(seed, &[g as u64, i as u64]));
                let mut pick = (0..np).filter(|&k| k != i).collect::<Vec<_>>();
                pick.shuffle(&mut rng);
                let (a, b, c) = (&pop[pick[0]], &pop[pick[1]], &pop[pick[2]]);
                let jrand = rng.gen_range(0..d);
                (0..d)
                    .map(|j| {
                        if j == jrand || rng.gen::<f64>() < params.cr {
                            (a[j] + params.f * (b[j] - c[j])).clamp(params.lower, params.upper)
                        } else {
                            pop[i][j]
                        }
                    })
                    .collect()
            })
            .collect();
        let trial_fit: Vec<f64> = trials.par_iter().map(|w| design.objective(w)).collect();
        for (i, (t, tf)) in trials.into_iter().zip(trial_fit).enumerate() {
            if tf >= fit[i] {
                pop[i] = t;
                fit[i] = tf;
            }
        }
        history.push(best_of(&fit).1);
    }

    let (bi, bf) = best_of(&fit);
    if bf == f64::NEG_INFINITY {
        return Err(FusionError::DegenerateObjective);
    }
    Ok(FusionWeights {
        columns: m.column_ids().cloned().collect(),
        w: pop[bi].clone(),
        objective: bf,
        history,
    })
}

/// Article → fold index in `1..=folds`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: usize,
    pub fold_of: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.folds];
        for &f in self.fold_of.values() {
            s[f - 1] += 1;
        }
        s
    }
}

/// Seeded shuffle within each stratum, then round-robin dealing that carries
/// on across strata, so overall fold sizes differ by at most one and each
/// fold mirrors the stratum proportions.
pub fn assign_folds(
    ids: &[String],
    strata: Option<&BTreeMap<String, u8>>,
    folds: usize,
    seed: u64,
) -> FoldAssignment {
    assert!(folds >= 1, "at least one fold");
    let mut groups: BTreeMap<u8, Vec<&String>> = BTreeMap::new();
    for id in ids {
        let s = strata.and_then(|m| m.get(id).copied()).unwrap_or(0);
        groups.entry(s).or_default().push(id);
    }
    let mut fold_of = BTreeMap::new();
    let mut next = 0usize;
    for (s, mut members) in groups {
        members.sort();
        let mut rng = seed::rng(seed::derive(seed, &[seed::stage::FOLDS, u64::from(s)]));
        members.shuffle(&mut rng);
        for id in members {
            fold_of.insert(id.clone(), next % folds + 1);
            next += 1;
        }
    }
    FoldAssignment { folds, fold_of }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldFit {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub rho: f64,
    pub weights: FusionWeights,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub mean_rho: f64,
    pub folds: Vec<FoldFit>,
}

impl CvResult {
    pub fn fold_rhos(&self) -> Vec<f64> {
        self.folds.iter().map(|f| f.rho).collect()
    }
}

/// K-fold cross-validated weighted fusion: fit on the other folds, score the
/// held-out fold, average the held-out correlations.
pub fn cv_fusion(
    m: &ScoreMatrix,
    gold: &[Option<f64>],
    folds: usize,
    strata: Option<&BTreeMap<String, u8>>,
    params: &DeParams,
    seed: u64,
) -> Result<CvResult, FusionError> {
    if gold.len() != m.n_rows() {
        return Err(FusionError::GoldLength { gold: gold.len(), rows: m.n_rows() });
    }
    if folds < 2 {
        return Err(FusionError::BadParams(format!("need at least 2 folds, got {folds}")));
    }
    let rows = complete_rows(m, gold);
    if rows.len() < folds * 3 {
        return Err(FusionError::TooFewRows { n: rows.len(), min: folds * 3 });
    }
    let ids: Vec<String> = rows.iter().map(|&i| m.articles()[i].clone()).collect();
    let assignment = assign_folds(&ids, strata, folds, seed);
    let fold_rows = |f: usize, held: bool| -> Vec<usize> {
        rows.iter()
            .copied()
            .filter(|&i| (assignment.fold_of[&m.articles()[i]] == f) == held)
            .collect()
    };

    let fits: Vec<Result<FoldFit, FusionError>> = (1..=folds)
        .into_par_iter()
        .map(|f| {
            let train = fold_rows(f, false);
            let test = fold_rows(f, true);
            let weights = de_optimize_rows(m, gold, Some(&train), params, seed::derive(seed, &[f as u64]))
                .map_err(|e| match e {
                    FusionError::Stats(source) => FusionError::Fold { fold: f, source },
                    other => other,
                })?;
            let held = Design::new(m, gold, Some(&test));
            let rho = stats::spearman(&held.fused(&weights.w), &held.gold)
                .map_err(|source| FusionError::Fold { fold: f, source })?;
            Ok(FoldFit {
                fold: f,
                n_train: train.len(),
                n_test: test.len(),
                rho,
                weights,
            })
        })
        .collect();
    let folds_out = fits.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mean_rho = folds_out.iter().map(|f| f.rho).sum::<f64>() / folds_out.len() as f64;
    Ok(CvResult {
        mean_rho,
        folds: folds_out,
    })
}

/// Column with the highest Spearman correlation with gold. Equal
/// correlations go to the lexicographically smallest column label.
pub fn best_single(m: &ScoreMatrix, gold: &[Option<f64>]) -> Result<(ColumnId, f64), FusionError> {
    if m.n_columns() == 0 {
        return Err(FusionError::NoColumns);
    }
    let mut best: Option<(ColumnId, f64)> = None;
    let mut last_err = None;
    for c in m.column_ids() {
        let (x, y) = stats::complete_pairs(&m.values(c).expect("listed column"), gold);
        match stats::spearman(&x, &y) {
            Ok(r) => {
                let better = match &best {
                    None => true,
                    Some((bc, br)) => r > *br || (r == *br && c.to_string() < bc.to_string()),
                };
                if better {
                    best = Some((c.clone(), r));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    best.ok_or_else(|| FusionError::Stats(last_err.expect("at least one column")))
}

fn rho_of(fused: &[Option<f64>], gold: &[Option<f64>]) -> Result<f64, FusionError> {
    let (x, y) = stats::complete_pairs(fused, gold);
    Ok(stats::spearman(&x, &y)?)
}

/// One line of the fusion table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionRow {
    pub uoa: String,
    pub mean: f64,
    pub median: f64,
    pub best_single: f64,
    pub best_column: ColumnId,
    pub rank_average: f64,
    pub cv_mean: f64,
    pub n: usize,
    pub cv: CvResult,
}

pub struct FusionSettings<'a> {
    pub params: DeParams,
    pub folds: usize,
    pub seed: u64,
    pub strata: Option<&'a BTreeMap<String, u8>>,
}

pub fn fusion_row(
    label: &str,
    m: &ScoreMatrix,
    gold: &[Option<f64>],
    settings: &FusionSettings<'_>,
) -> Result<FusionRow, FusionError> {
    let (best_column, best) = best_single(m, gold)?;
    let cv = cv_fusion(m, gold, settings.folds, settings.strata, &settings.params, settings.seed)?;
    Ok(FusionRow {
        uoa: label.to_string(),
        mean: rho_of(&mean_fusion(m)?, gold)?,
        median: rho_of(&median_fusion(m)?, gold)?,
        best_single: best,
        best_column,
        rank_average: rho_of(&rank_average_fusion(m)?, gold)?,
        cv_mean: cv.mean_rho,
        n: complete_rows(m, gold).len(),
        cv,
    })
}

/// Replaces every column and the gold vector by within-unit normalised
/// ranks `(r − 0.5) / n_u`, making units with different score levels
/// comparable before pooling.
pub fn normalize_within_units(
    m: &ScoreMatrix,
    gold: &[Option<f64>],
    units: &BTreeMap<String, u8>,
) -> (ScoreMatrix, Vec<Option<f64>>) {
    let unit_of: Vec<Option<u8>> = m.articles().iter().map(|a| units.get(a).copied()).collect();
    let norm = |v: &[Option<f64>]| -> Vec<Option<f64>> {
        let mut out = vec![None; v.len()];
        let mut seen: Vec<u8> = unit_of.iter().flatten().copied().collect();
        seen.sort_unstable();
        seen.dedup();
        for u in seen {
            let idx: Vec<usize> = (0..v.len()).filter(|&i| unit_of[i] == Some(u)).collect();
            let sub: Vec<Option<f64>> = idx.iter().map(|&i| v[i]).collect();
            let n = sub.iter().flatten().count() as f64;
            for (k, r) in ranks_of_present(&sub).into_iter().enumerate() {
                out[idx[k]] = r.map(|r| (r - 0.5) / n);
            }
        }
        out
    };
    let columns = m
        .column_ids()
        .map(|c| (c.clone(), norm(&m.values(c).expect("listed column"))))
        .collect();
    (ScoreMatrix::from_columns(m.articles().to_vec(), columns), norm(gold))
}

pub const ALL_ROW_NOTE: &str =
    "All row: articles pooled across units after per-unit rank normalisation";

/// Fusion table as CSV, column order uoa, mean, median, best-single,
/// rank-average, cv-mean. A leading comment line describes the pooled row.
pub fn fusion_csv(rows: &[FusionRow]) -> String {
    let mut out = format!("# {ALL_ROW_NOTE}\n");
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["uoa", "mean", "median", "best_single", "rank_average", "cv_mean"])
        .expect("in-memory write");
    for r in rows {
        w.write_record([
            r.uoa.clone(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.median),
            format!("{:.6}", r.best_single),
            format!("{:.6}", r.rank_average),
            format!("{:.6}", r.cv_mean),
        ])
        .expect("in-memory write");
    }
    out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf8"));
    out
}

#[derive(Serialize)]
struct SidecarRow<'a> {
    uoa: &'a str,
    n: usize,
    best_column: String,
    folds: Vec<SidecarFold>,
}

#[derive(Serialize)]
struct SidecarFold {
    fold: usize,
    n_train: usize,
    n_test: usize,
    rho: f64,
    objective: f64,
    weights: BTreeMap<String, f64>,
}

/// Fitted weights per row and fold as pretty JSON.
pub fn weights_json(rows: &[FusionRow]) -> String {
    let out: Vec<SidecarRow<'_>> = rows
        .iter()
        .map(|r| SidecarRow {
            uoa: &r.uoa,
            n: r.n,
            best_column: r.best_column.to_string(),
            folds: r
                .cv
                .folds
                .iter()
                .map(|f| SidecarFold {
                    fold: f.fold,
                    n_train: f.n_train,
                    n_test: f.n_test,
                    rho: f.rho,
                    objective: f.weights.objective,
                    weights: f
                        .weights
                        .columns
                        .iter()
                        .zip(&f.weights.w)
                        .map(|(c, w)| (c.to_string(), *w))
                        .collect(),
                })
                .collect(),
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&serde_json::json!({ "note": ALL_ROW_NOTE, "rows": out }))
        .expect("serialise");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::Strategy;
    use proptest::prelude::*;
    use proptest::strategy::Strategy as _;
    use rand_distr::{Distribution, Normal};

    fn col(name: &str) -> ColumnId {
        ColumnId::new(name, Strategy::Zero)
    }

    fn matrix(cols: &[(&str, Vec<Option<f64>>)]) -> ScoreMatrix {
        let n = cols[0].1.len();
        let ids = (0..n).map(|i| format!("a{i:04}")).collect();
        ScoreMatrix::from_columns(ids, cols.iter().map(|(c, v)| (col(c), v.clone())).collect())
    }

    fn dense(v: &[f64]) -> Vec<Option<f64>> {
        v.iter().copied().map(Some).collect()
    }

    #[test]
    fn mean_and_median_examples() {
        let m = matrix(&[("a", dense(&[3.0, 3.0, 4.0])), ("b", dense(&[3.4, 4.0, 4.0])), ("c", dense(&[3.2, 4.0, 1.0]))]);
        let mean = mean_fusion(&m).unwrap();
        assert!((mean[0].unwrap() - 3.2).abs() < 1e-12);
        let med = median_fusion(&m).unwrap();
        assert_eq!(med[1], Some(4.0));
        assert_eq!(median(&mut [3.0, 4.0]), Some(3.5));

        let single = matrix(&[("a", vec![Some(1.0), None, Some(2.5)])]);
        assert_eq!(mean_fusion(&single).unwrap(), vec![Some(1.0), None, Some(2.5)]);
        assert_eq!(median_fusion(&single).unwrap(), vec![Some(1.0), None, Some(2.5)]);
        assert_eq!(rank_average_fusion(&single).unwrap(), vec![Some(1.0), None, Some(2.0)]);
    }

    #[test]
    fn rank_average_of_monotone_pair() {
        let a = [1.0, 3.0, 2.0, 2.0, 5.0];
        let b: Vec<f64> = a.iter().map(|x: &f64| x.exp()).collect();
        let m = matrix(&[("a", dense(&a)), ("b", dense(&b))]);
        let fused = rank_average_fusion(&m).unwrap();
        assert_eq!(fused, dense(&stats::mid_ranks(&a)));
    }

    #[test]
    fn empty_matrix_errors() {
        let m = ScoreMatrix::from_columns(vec!["x".into()], BTreeMap::new());
        assert_eq!(mean_fusion(&m), Err(FusionError::NoColumns));
        assert_eq!(best_single(&m, &[Some(1.0)]), Err(FusionError::NoColumns));
    }

    fn synthetic(n: usize, seed: u64) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut rng = seed::rng(seed);
        let nd = Normal::new(0.0, 1.0).unwrap();
        let latent: Vec<f64> = (0..n).map(|_| nd.sample(&mut rng)).collect();
        let a: Vec<f64> = latent.iter().map(|l| l + 0.9 * nd.sample(&mut rng)).collect();
        let noise: Vec<f64> = (0..n).map(|_| nd.sample(&mut rng)).collect();
        let weak: Vec<f64> = latent.iter().map(|l| l + 3.0 * nd.sample(&mut rng)).collect();
        (latent, a, noise, weak)
    }

    #[test]
    fn de_favours_informative_column() {
        let (latent, a, noise, _) = synthetic(300, 3);
        let m = matrix(&[("info", dense(&a)), ("noise", dense(&noise))]);
        let gold = dense(&latent);
        let fit = de_optimize(&m, &gold, &DeParams { generations: 60, ..DeParams::default() }, 9).unwrap();
        let single = stats::spearman(&a, &latent).unwrap();
        assert!(fit.objective >= single - 0.02, "{} vs {}", fit.objective, single);
        assert!(fit.w[0] > fit.w[1]);
        assert!(fit.history.windows(2).all(|h| h[1] >= h[0]));
        assert!(fit.w.iter().all(|w| (0.0..=1.0).contains(w)));

        let again = de_optimize(&m, &gold, &DeParams { generations: 60, ..DeParams::default() }, 9).unwrap();
        assert_eq!(fit, again);
    }

    #[test]
    fn de_identical_columns_reach_single_rho() {
        let (latent, a, _, _) = synthetic(100, 4);
        let m = matrix(&[("x", dense(&a)), ("y", dense(&a))]);
        let fit = de_optimize(&m, &dense(&latent), &DeParams { generations: 5, ..DeParams::default() }, 1).unwrap();
        assert!((fit.objective - stats::spearman(&a, &latent).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn de_scaling_invariance() {
        let (latent, a, _, weak) = synthetic(200, 5);
        let m = matrix(&[("a", dense(&a)), ("w", dense(&weak))]);
        let gold = dense(&latent);
        let fit = de_optimize(&m, &gold, &DeParams { generations: 20, ..DeParams::default() }, 2).unwrap();
        for c in [0.5, 3.0, 1e3] {
            let scaled: Vec<f64> = fit.w.iter().map(|w| w * c).collect();
            assert_eq!(rho_of(&weighted_sum(&m, &scaled), &gold).unwrap(), fit.objective);
        }
    }

    #[test]
    fn de_degenerate_gold() {
        let (_, a, b, _) = synthetic(30, 6);
        let m = matrix(&[("a", dense(&a)), ("b", dense(&b))]);
        let r = de_optimize(&m, &dense(&[2.0; 30]), &DeParams { generations: 3, ..DeParams::default() }, 0);
        assert_eq!(r, Err(FusionError::DegenerateObjective));
        let small = matrix(&[("a", dense(&a[..5])), ("b", dense(&b[..5]))]);
        assert!(matches!(de_optimize(&small, &dense(&a[..5]), &DeParams::default(), 0), Err(FusionError::TooFewRows { .. })));
        let one = matrix(&[("a", dense(&a))]);
        assert_eq!(de_optimize(&one, &dense(&a), &DeParams::default(), 0), Err(FusionError::TooFewColumns(1)));
    }

    #[test]
    fn folds_balanced_and_stratified() {
        let ids: Vec<String> = (0..103).map(|i| format!("id{i}")).collect();
        let strata: BTreeMap<String, u8> = ids.iter().enumerate().map(|(i, id)| (id.clone(), (i % 3) as u8 + 1)).collect();
        let a = assign_folds(&ids, Some(&strata), 10, 42);
        let s = a.sizes();
        assert!(s.iter().max().unwrap() - s.iter().min().unwrap() <= 1);
        assert_eq!(a, assign_folds(&ids, Some(&strata), 10, 42));
        for f in 1..=10 {
            for u in 1..=3u8 {
                let k = a.fold_of.iter().filter(|(id, &ff)| ff == f && strata[*id] == u).count();
                assert!((3..=4).contains(&k), "fold {f} unit {u}: {k}");
            }
        }
    }

    #[test]
    fn cv_rejects_tiny_folds() {
        let (latent, a, b, _) = synthetic(20, 7);
        let m = matrix(&[("a", dense(&a)), ("b", dense(&b))]);
        let r = cv_fusion(&m, &dense(&latent), 20, None, &DeParams::default(), 0);
        assert!(matches!(r, Err(FusionError::TooFewRows { n: 20, min: 60 })));
    }

    #[test]
    fn cv_mean_is_mean_of_folds() {
        let (latent, a, _, weak) = synthetic(120, 8);
        let m = matrix(&[("a", dense(&a)), ("w", dense(&weak))]);
        let cv = cv_fusion(&m, &dense(&latent), 4, None, &DeParams { generations: 10, ..DeParams::default() }, 3).unwrap();
        let rhos = cv.fold_rhos();
        assert_eq!(rhos.len(), 4);
        assert!(rhos.iter().all(|r| (-1.0..=1.0).contains(r)));
        let mean = rhos.iter().sum::<f64>() / 4.0;
        assert!((cv.mean_rho - mean).abs() < 1e-12);
        assert_eq!(cv.folds.iter().map(|f| f.n_test).sum::<usize>(), 120);
    }

    #[test]
    fn cv_names_failing_fold() {
        // gold constant inside the held-out rows of some fold
        let n = 30;
        let a: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let b: Vec<f64> = (0..n).map(|i| ((i * 7) % 11) as f64).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("a{i:04}")).collect();
        let assignment = assign_folds(&ids, None, 3, 0);
        let gold: Vec<Option<f64>> = ids.iter().enumerate().map(|(i, id)| Some(if assignment.fold_of[id] == 2 { 1.0 } else { i as f64 })).collect();
        let m = matrix(&[("a", dense(&a)), ("b", dense(&b))]);
        let r = cv_fusion(&m, &gold, 3, None, &DeParams { generations: 3, ..DeParams::default() }, 0);
        assert_eq!(r.unwrap_err(), FusionError::Fold { fold: 2, source: StatsError::Constant });
    }

    #[test]
    fn best_single_choice_and_ties() {
        let (latent, a, _, weak) = synthetic(200, 9);
        let gold = dense(&latent);
        let m = matrix(&[("weak", dense(&weak)), ("strong", dense(&a))]);
        assert_eq!(best_single(&m, &gold).unwrap().0, col("strong"));
        let tie = matrix(&[("zeta", dense(&a)), ("alpha", dense(&a))]);
        assert_eq!(best_single(&tie, &gold).unwrap().0, col("alpha"));
        let one = matrix(&[("only", dense(&weak))]);
        assert_eq!(best_single(&one, &gold).unwrap().0, col("only"));
    }

    #[test]
    fn normalized_ranks_within_units() {
        let m = matrix(&[("a", dense(&[10.0, 20.0, 1.0, 2.0]))]);
        let units: BTreeMap<String, u8> = [("a0000", 1), ("a0001", 1), ("a0002", 2), ("a0003", 2)].into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        let (n, g) = normalize_within_units(&m, &dense(&[1.0, 2.0, 4.0, 3.0]), &units);
        assert_eq!(n.values(&col("a")).unwrap(), dense(&[0.25, 0.75, 0.25, 0.75]));
        assert_eq!(g, dense(&[0.25, 0.75, 0.75, 0.25]));
    }

    #[test]
    fn csv_column_order() {
        let (latent, a, _, weak) = synthetic(60, 10);
        let m = matrix(&[("a", dense(&a)), ("w", dense(&weak))]);
        let settings = FusionSettings { params: DeParams { generations: 5, ..DeParams::default() }, folds: 3, seed: 1, strata: None };
        let row = fusion_row("3", &m, &dense(&latent), &settings).unwrap();
        let csv = fusion_csv(&[row.clone()]);
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("# "));
        assert_eq!(lines.next().unwrap(), "uoa,mean,median,best_single,rank_average,cv_mean");
        assert!(lines.next().unwrap().starts_with("3,"));
        let json: serde_json::Value = serde_json::from_str(&weights_json(&[row])).unwrap();
        assert_eq!(json["rows"][0]["folds"].as_array().unwrap().len(), 3);
    }

    fn oracle_rank_average(cols: &[Vec<f64>]) -> Vec<f64> {
        let n = cols[0].len();
        let ranks: Vec<Vec<f64>> = cols
            .iter()
            .map(|c| {
                c.iter()
                    .map(|&x| {
                        let less = c.iter().filter(|&&y| y < x).count() as f64;
                        let eq = c.iter().filter(|&&y| y == x).count() as f64;
                        less + (eq + 1.0) / 2.0
                    })
                    .collect()
            })
            .collect();
        (0..n).map(|i| ranks.iter().map(|r| r[i]).sum::<f64>() / cols.len() as f64).collect()
    }

    fn small_matrix() -> impl proptest::strategy::Strategy<Value = Vec<Vec<f64>>> {
        (1usize..6, 2usize..12).prop_flat_map(|(d, n)| {
            prop::collection::vec(prop::collection::vec((2i32..9).prop_map(|v| f64::from(v) / 2.0), n), d)
        })
    }

    fn to_matrix(cols: &[Vec<f64>]) -> ScoreMatrix {
        let named: Vec<(String, Vec<Option<f64>>)> = cols.iter().enumerate().map(|(j, c)| (format!("c{}", j), dense(c))).collect();
        let refs: Vec<(&str, Vec<Option<f64>>)> = named.iter().map(|(n, v)| (n.as_str(), v.clone())).collect();
        matrix(&refs)
    }

    proptest! {
        #[test]
        fn mean_matches_row_oracle(cols in small_matrix()) {
            let fused = mean_fusion(&to_matrix(&cols)).unwrap();
            for (i, f) in fused.iter().enumerate() {
                let want = cols.iter().map(|c| c[i]).sum::<f64>() / cols.len() as f64;
                let got = f.unwrap();
                prop_assert!((got - want).abs() < 1e-12);
            }
        }

        #[test]
        fn fused_within_row_range(cols in small_matrix()) {
            let m = to_matrix(&cols);
            let mean = mean_fusion(&m).unwrap();
            let med = median_fusion(&m).unwrap();
            for i in 0..cols[0].len() {
                let lo = cols.iter().map(|c| c[i]).fold(f64::INFINITY, f64::min);
                let hi = cols.iter().map(|c| c[i]).fold(f64::NEG_INFINITY, f64::max);
                let (a, b) = (mean[i].unwrap(), med[i].unwrap());
                prop_assert!(lo - 1e-12 <= a && a <= hi + 1e-12);
                prop_assert!(lo <= b && b <= hi);
            }
        }

        #[test]
        fn rank_average_matches_oracle(cols in small_matrix()) {
            let got = rank_average_fusion(&to_matrix(&cols)).unwrap();
            let want = oracle_rank_average(&cols);
            for (g, w) in got.iter().zip(&want) {
                let g = g.unwrap();
                prop_assert!((g - w).abs() < 1e-12);
            }
        }

        #[test]
        fn rank_average_transform_invariant(cols in small_matrix()) {
            let cubed: Vec<Vec<f64>> = cols.iter().map(|c| c.iter().map(|x| x.powi(3) + 7.0).collect()).collect();
            let a = rank_average_fusion(&to_matrix(&cols)).unwrap();
            let b = rank_average_fusion(&to_matrix(&cubed)).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
