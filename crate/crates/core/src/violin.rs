//! Distribution of predicted scores per integer gold level, with a Gaussian
//! kernel density for violin plots and a standalone SVG renderer.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::stats::quantile_sorted;

pub const GRID_POINTS: usize = 101;
pub const GRID_LO: f64 = 1.0;
pub const GRID_HI: f64 = 4.0;

#[derive(Debug, thiserror::Error)]
pub enum ViolinError {
    #[error("no article has an integer gold score in 1..=4")]
    NoIntegerGold,
    #[error("violin summary has no groups")]
    Empty,
    #[error("writing {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolinGroup {
    pub level: u8,
    pub count: usize,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub q1: f64,
    pub q3: f64,
    pub bandwidth: Option<f64>,
    /// `(score, density)` on the grid; empty when the group has no spread.
    pub density: Vec<(f64, f64)>,
}

impl ViolinGroup {
    pub fn is_degenerate(&self) -> bool {
        self.density.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViolinSummary {
    pub groups: Vec<ViolinGroup>,
    /// Pairs dropped because the gold score was not a whole star level.
    pub discarded: usize,
}

fn integer_level(g: f64) -> Option<u8> {
    (g.fract() == 0.0 && (1.0..=4.0).contains(&g)).then_some(g as u8)
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

/// `0.9 · min(sd, IQR/1.34) · n^(−1/5)`, falling back to the sd term when the
/// IQR is zero. `None` when the data has no spread.
pub fn silverman_bandwidth(sorted: &[f64]) -> Option<f64> {
    if sorted.len() < 2 {
        return None;
    }
    let sd = sample_sd(sorted);
    if sd == 0.0 {
        return None;
    }
    let iqr = quantile_sorted(sorted, 0.75) - quantile_sorted(sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    Some(0.9 * spread * (sorted.len() as f64).powf(-0.2))
}

pub fn grid() -> Vec<f64> {
    (0..GRID_POINTS)
        .map(|i| GRID_LO + (GRID_HI - GRID_LO) * i as f64 / (GRID_POINTS - 1) as f64)
        .collect()
}

pub fn trapezoid(curve: &[(f64, f64)]) -> f64 {
    curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum()
}

/// Gaussian KDE on the grid, rescaled so the trapezoid integral over the
/// grid is one.
pub fn kde(data: &[f64], h: f64) -> Vec<(f64, f64)> {
    let norm = 1.0 / (data.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let raw: Vec<(f64, f64)> = grid()
        .into_iter()
        .map(|x| {
            let d = data.iter().map(|&xi| (-0.5 * ((x - xi) / h).powi(2)).exp()).sum::<f64>();
            (x, d * norm)
        })
        .collect();
    let area = trapezoid(&raw);
    raw.into_iter().map(|(x, d)| (x, d / area)).collect()
}

/// Groups `(score, gold)` pairs by integer gold level, discarding the rest.
pub fn violin_summary(pairs: &[(f64, f64)]) -> Result<ViolinSummary, ViolinError> {
    let mut by_level: [Vec<f64>; 4] = Default::default();
    let mut discarded = 0;
    for &(s, g) in pairs {
        match integer_level(g) {
            Some(l) => by_level[usize::from(l) - 1].push(s),
            None => discarded += 1,
        }
    }
    let groups: Vec<ViolinGroup> = by_level
        .into_iter()
        .enumerate()
        .filter(|(_, v)| !v.is_empty())
        .map(|(i, mut v)| {
            v.sort_by(f64::total_cmp);
            let bandwidth = silverman_bandwidth(&v);
            ViolinGroup {
                level: i as u8 + 1,
                count: v.len(),
                median: quantile_sorted(&v, 0.5),
                min: v[0],
                max: v[v.len() - 1],
                q1: quantile_sorted(&v, 0.25),
                q3: quantile_sorted(&v, 0.75),
                density: bandwidth.map(|h| kde(&v, h)).unwrap_or_default(),
                bandwidth,
            }
        })
        .collect();
    if groups.is_empty() {
        return Err(ViolinError::NoIntegerGold);
    }
    Ok(ViolinSummary { groups, discarded })
}

/// Group statistics as CSV (no density samples).
pub fn summary_csv(label: &str, s: &ViolinSummary) -> String {
    let mut out = String::from("# quartiles by linear interpolation between order statistics\n");
    out.push_str("column,gold_level,count,min,q1,median,q3,max,bandwidth\n");
    for g in &s.groups {
        let bw = g.bandwidth.map(|b| format!("{b:.6}")).unwrap_or_default();
        let _ = writeln!(
            out,
            "{label},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{bw}",
            g.level, g.count, g.min, g.q1, g.median, g.q3, g.max
        );
    }
    out
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Standalone SVG with one violin per gold level.
pub fn render_svg(s: &ViolinSummary, title: &str) -> Result<String, ViolinError> {
    if s.groups.is_empty() {
        return Err(ViolinError::Empty);
    }
    const SLOT: f64 = 110.0;
    const LEFT: f64 = 60.0;
    const TOP: f64 = 40.0;
    const PLOT_H: f64 = 300.0;
    const HALF_W: f64 = 45.0;
    let width = LEFT + SLOT * 4.0 + 20.0;
    let height = TOP + PLOT_H + 60.0;
    let y = |v: f64| TOP + PLOT_H * (GRID_HI - v.clamp(GRID_LO, GRID_HI)) / (GRID_HI - GRID_LO);
    let cx = |level: u8| LEFT + SLOT * (f64::from(level) - 0.5);

    let mut o = String::new();
    let _ = writeln!(
        o,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width:.0}" height="{height:.0}" viewBox="0 0 {width:.0} {height:.0}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(o, r#"<title>{}</title>"#, esc(title));
    let _ = writeln!(o, r#"<text x="{:.1}" y="20" text-anchor="middle" font-size="14">{}</text>"#, width / 2.0, esc(title));
    // axes
    let _ = writeln!(o, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{:.1}" stroke="black"/>"#, TOP + PLOT_H);
    let _ = writeln!(o, r#"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"#, TOP + PLOT_H, LEFT + SLOT * 4.0, TOP + PLOT_H);
    for t in 0..=6 {
        let v = 1.0 + 0.5 * f64::from(t);
        let _ = writeln!(o, r#"<line x1="{:.1}" y1="{:.2}" x2="{LEFT}" y2="{:.2}" stroke="black"/>"#, LEFT - 5.0, y(v), y(v));
        let _ = writeln!(o, r#"<text x="{:.1}" y="{:.2}" text-anchor="end">{v:.1}</text>"#, LEFT - 8.0, y(v) + 4.0);
    }
    for level in 1..=4u8 {
        let _ = writeln!(o, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{level}*</text>"#, cx(level), TOP + PLOT_H + 18.0);
    }
    let _ = writeln!(o, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">Gold score</text>"#, LEFT + SLOT * 2.0, TOP + PLOT_H + 42.0);
    let _ = writeln!(
        o,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">Predicted score</text>"#,
        TOP + PLOT_H / 2.0,
        TOP + PLOT_H / 2.0
    );

    for g in &s.groups {
        let c = cx(g.level);
        let _ = writeln!(o, r#"<g class="violin" data-level="{}" data-count="{}">"#, g.level, g.count);
        if g.is_degenerate() {
            let _ = writeln!(o, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="steelblue" stroke-width="3"/>"#, c - HALF_W / 2.0, y(g.median), c + HALF_W / 2.0, y(g.median));
        } else {
            let peak = g.density.iter().map(|p| p.1).fold(0.0, f64::max);
            let scale = if peak > 0.0 { HALF_W / peak } else { 0.0 };
            let mut pts: Vec<String> = g.density.iter().map(|&(v, d)| format!("{:.2},{:.2}", c + d * scale, y(v))).collect();
            pts.extend(g.density.iter().rev().map(|&(v, d)| format!("{:.2},{:.2}", c - d * scale, y(v))));
            let _ = writeln!(o, r#"<polygon points="{}" fill="lightsteelblue" stroke="steelblue"/>"#, pts.join(" "));
        }
        let _ = writeln!(o, r#"<line x1="{c:.2}" y1="{:.2}" x2="{c:.2}" y2="{:.2}" stroke="black"/>"#, y(g.min), y(g.max));
        let _ = writeln!(o, r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black" stroke-width="2"/>"#, c - 12.0, y(g.median), c + 12.0, y(g.median));
        let _ = writeln!(o, "</g>");
    }
    o.push_str("</svg>\n");
    Ok(o)
}

pub fn emit_violin_svg(s: &ViolinSummary, title: &str, path: &Path) -> Result<(), ViolinError> {
    let svg = render_svg(s, title)?;
    crate::io::write_atomic(path, svg.as_bytes()).map_err(|source| ViolinError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Percentile by explicit order statistics: position p·(n−1), blended.
    fn oracle_quantile(data: &[f64], p: f64) -> f64 {
        let mut v = data.to_vec();
        v.sort_by(f64::total_cmp);
        let pos = p * (v.len() - 1) as f64;
        let below = pos.floor();
        let frac = pos - below;
        let i = below as usize;
        if i + 1 < v.len() {
            v[i] * (1.0 - frac) + v[i + 1] * frac
        } else {
            v[i]
        }
    }

    #[test]
    fn constant_group() {
        let s = violin_summary(&[(3.0, 2.0), (3.0, 2.0), (3.0, 2.0)]).unwrap();
        let g = &s.groups[0];
        assert_eq!((g.level, g.count, g.median, g.min, g.max), (2, 3, 3.0, 3.0, 3.0));
        assert!(g.is_degenerate());
        let svg = render_svg(&s, "c").unwrap();
        roxmltree::Document::parse(&svg).unwrap();
    }

    #[test]
    fn non_integer_gold_discarded() {
        let s = violin_summary(&[(2.0, 2.0), (2.5, 2.5), (3.0, 3.0)]).unwrap();
        assert_eq!(s.discarded, 1);
        assert_eq!(s.groups.iter().map(|g| g.level).collect::<Vec<_>>(), vec![2, 3]);
        assert!(matches!(violin_summary(&[(2.0, 2.5), (1.0, 3.3)]), Err(ViolinError::NoIntegerGold)));
    }

    #[test]
    fn quartiles() {
        let s = violin_summary(&[(1.0, 4.0), (2.0, 4.0), (3.0, 4.0), (4.0, 4.0)]).unwrap();
        let g = &s.groups[0];
        assert_eq!((g.q1, g.median, g.q3), (1.75, 2.5, 3.25));
        for p in [0.25, 0.5, 0.75] {
            assert_eq!(quantile_sorted(&[1.0, 2.0, 3.0, 4.0], p), oracle_quantile(&[4.0, 2.0, 1.0, 3.0], p));
        }
    }

    #[test]
    fn bandwidth_by_hand() {
        // sd = 1.2910, IQR/1.34 = 1.5/1.34 = 1.1194 → 0.9 · 1.1194 · 4^−0.2
        let h = silverman_bandwidth(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!((h - 0.9 * (1.5 / 1.34) * 4f64.powf(-0.2)).abs() < 1e-12);
        assert_eq!(silverman_bandwidth(&[2.0]), None);
        // IQR zero but spread present: falls back to sd
        let v = [1.0, 3.0, 3.0, 3.0, 3.0, 3.0, 4.0];
        let sd = sample_sd(&v);
        assert!((silverman_bandwidth(&v).unwrap() - 0.9 * sd * 7f64.powf(-0.2)).abs() < 1e-12);
    }

    #[test]
    fn svg_is_well_formed_with_one_violin_per_level() {
        let pairs: Vec<(f64, f64)> = (0..40).map(|i| (1.0 + (i % 7) as f64 * 0.5, f64::from(1 + (i % 4) as u8))).collect();
        let s = violin_summary(&pairs).unwrap();
        let svg = render_svg(&s, "model <x> & y").unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        let violins = doc.descendants().filter(|n| n.attribute("class") == Some("violin")).count();
        assert_eq!(violins, 4);
        let texts: Vec<&str> = doc.descendants().filter_map(|n| n.text()).collect();
        assert!(texts.contains(&"Gold score") && texts.contains(&"Predicted score"));

        let one = violin_summary(&[(2.0, 3.0), (2.5, 3.0)]).unwrap();
        let doc_svg = render_svg(&one, "one").unwrap();
        let d = roxmltree::Document::parse(&doc_svg).unwrap();
        assert_eq!(d.descendants().filter(|n| n.attribute("class") == Some("violin")).count(), 1);
    }

    #[test]
    fn emit_writes_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub/v.svg");
        let s = violin_summary(&[(2.0, 3.0), (2.5, 3.0)]).unwrap();
        emit_violin_svg(&s, "t", &p).unwrap();
        assert!(std::fs::read_to_string(&p).unwrap().starts_with("<svg"));
    }

    proptest! {
        #[test]
        fn density_integrates_to_one(v in prop::collection::vec((2i32..9).prop_map(|x| f64::from(x) / 2.0), 2..60), level in 1u8..5) {
            let pairs: Vec<(f64, f64)> = v.iter().map(|&s| (s, f64::from(level))).collect();
            let s = violin_summary(&pairs).unwrap();
            let g = &s.groups[0];
            prop_assert_eq!(g.count, v.len());
            if !g.is_degenerate() {
                prop_assert_eq!(g.density.len(), GRID_POINTS);
                prop_assert!(g.density.iter().all(|p| p.1 >= 0.0));
                let area = trapezoid(&g.density);
                prop_assert!((area - 1.0).abs() < 1e-3);
            }
        }

        #[test]
        fn counts_sum(pairs in prop::collection::vec(((2i32..9).prop_map(|x| f64::from(x) / 2.0), (2i32..9).prop_map(|x| f64::from(x) / 2.0)), 1..80)) {
            let integer = pairs.iter().filter(|p| p.1.fract() == 0.0).count();
            match violin_summary(&pairs) {
                Ok(s) => {
                    let total: usize = s.groups.iter().map(|g| g.count).sum();
                    prop_assert_eq!(total, integer);
                    prop_assert_eq!(s.discarded, pairs.len() - integer);
                }
                Err(_) => prop_assert_eq!(integer, 0),
            }
        }
    }
}
