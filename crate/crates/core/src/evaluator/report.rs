//! Breakdown of evaluation results by query length and match type, the
//! embedding-space inspections (top images per dimension, word neighbours),
//! and plain-text SVG bar charts.

use std::fmt::Write as _;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{CsmError, Result};
use crate::model::CsmModel;
use crate::retrieval::{neighbors, ImageIndex};
use crate::seed;

use super::{by_score_then_id, EvalResults, MatchType};

pub const BUCKET_LABELS: [&str; 4] = ["1", "2", "3", "4+"];

fn bucket_of(word_count: usize) -> usize {
    word_count.clamp(1, 4) - 1
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub label: String,
    pub count: usize,
    pub mean_model: f64,
    pub mean_ideal: f64,
    pub mean_random: f64,
    pub exact: usize,
    pub partial: usize,
    pub none: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DimensionTop {
    pub dim: usize,
    /// `(image id, F(I)[dim])`, descending.
    pub images: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WordNeighbors {
    pub word: String,
    pub words: Vec<(String, f64)>,
    pub images: Vec<(u32, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Inspection {
    pub dimensions: Vec<DimensionTop>,
    pub neighbors: Vec<WordNeighbors>,
}

/// Top-`k` images on `num_dims` seeded-sampled embedding dimensions, and
/// nearest words and images for each of `words` (words outside the
/// vocabulary are skipped).
pub fn inspect(
    model: &CsmModel<f32>,
    index: &ImageIndex,
    num_dims: usize,
    k: usize,
    words: &[String],
    seed: u64,
) -> Result<Inspection> {
    let d = index.dim();
    let mut rng = seed::rng(seed, &[seed::STREAM_RANDOM_RANKING, u64::MAX]);
    let mut dims = index::sample(&mut rng, d, num_dims.min(d)).into_vec();
    dims.sort_unstable();
    let dimensions = dims
        .into_iter()
        .map(|dim| {
            let mut scored: Vec<(u32, f64)> =
                (0..index.len()).map(|r| (index.ids()[r], f64::from(index.embedding(r)[dim]))).collect();
            scored.sort_by(by_score_then_id);
            scored.truncate(k);
            DimensionTop { dim, images: scored }
        })
        .collect();
    let mut nbrs = Vec::new();
    for w in words {
        match neighbors(model, index, w, k) {
            Ok(n) => nbrs.push(WordNeighbors { word: w.clone(), words: n.words, images: n.images }),
            Err(CsmError::OutOfVocabulary(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(Inspection { dimensions, neighbors: nbrs })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub total_queries: usize,
    pub mean_model: f64,
    pub mean_ideal: f64,
    pub mean_random: f64,
    pub exact: usize,
    pub partial: usize,
    pub none: usize,
    pub buckets: Vec<LengthBucket>,
    pub inspection: Inspection,
}

/// Groups per-query results into word-count buckets {1, 2, 3, 4+}.
pub fn analysis_report(results: &EvalResults, inspection: Option<&Inspection>) -> AnalysisReport {
    let mut buckets: Vec<LengthBucket> =
        BUCKET_LABELS.iter().map(|l| LengthBucket { label: (*l).to_string(), ..Default::default() }).collect();
    for r in &results.per_query {
        let b = &mut buckets[bucket_of(r.word_count)];
        b.count += 1;
        b.mean_model += r.model;
        b.mean_ideal += r.ideal;
        b.mean_random += r.random;
        match r.match_type {
            MatchType::Exact => b.exact += 1,
            MatchType::Partial => b.partial += 1,
            MatchType::None => b.none += 1,
        }
    }
    for b in &mut buckets {
        if b.count > 0 {
            let n = b.count as f64;
            b.mean_model /= n;
            b.mean_ideal /= n;
            b.mean_random /= n;
        }
    }
    AnalysisReport {
        total_queries: results.per_query.len(),
        mean_model: results.mean_model,
        mean_ideal: results.mean_ideal,
        mean_random: results.mean_random,
        exact: buckets.iter().map(|b| b.exact).sum(),
        partial: buckets.iter().map(|b| b.partial).sum(),
        none: buckets.iter().map(|b| b.none).sum(),
        buckets,
        inspection: inspection.cloned().unwrap_or_default(),
    }
}

const W: f64 = 480.0;
const H: f64 = 300.0;
const LEFT: f64 = 50.0;
const BOTTOM: f64 = 40.0;
const TOP: f64 = 30.0;

fn svg_open(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, W / 2.0, title);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, H - BOTTOM, W - 10.0, H - BOTTOM);
    let _ = writeln!(s, r#"<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{}" stroke="black"/>"#, H - BOTTOM);
    s
}

fn y_of(v: f64, max: f64) -> f64 {
    let span = H - BOTTOM - TOP;
    H - BOTTOM - span * (v / max).clamp(0.0, 1.0)
}

fn legend(s: &mut String, items: &[(&str, &str)]) {
    for (i, (label, color)) in items.iter().enumerate() {
        let x = LEFT + 10.0 + i as f64 * 100.0;
        let _ = writeln!(s, r#"<rect x="{x}" y="{}" width="10" height="10" fill="{color}"/>"#, TOP - 4.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{label}</text>"#, x + 14.0, TOP + 5.0);
    }
}

/// Grouped bars: mean DCG of model, ideal and random rankers per length bucket.
fn dcg_chart(report: &AnalysisReport) -> String {
    let mut s = svg_open("Mean DCG by query length");
    let series = [("model", "#1f77b4"), ("ideal", "#2ca02c"), ("random", "#7f7f7f")];
    let group_w = (W - LEFT - 20.0) / report.buckets.len() as f64;
    let bar_w = group_w / 4.0;
    for t in 0..=4 {
        let v = t as f64 * 0.25;
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.2}</text>"#, LEFT - 4.0, y_of(v, 1.0) + 4.0);
    }
    for (g, b) in report.buckets.iter().enumerate() {
        let x0 = LEFT + 10.0 + g as f64 * group_w;
        for (k, (v, (_, color))) in [b.mean_model, b.mean_ideal, b.mean_random].iter().zip(series).enumerate() {
            let y = y_of(*v, 1.0);
            let _ = writeln!(
                s,
                r#"<rect x="{:.1}" y="{y:.1}" width="{bar_w:.1}" height="{:.1}" fill="{color}"/>"#,
                x0 + k as f64 * bar_w,
                H - BOTTOM - y
            );
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{} (n={})</text>"#,
            x0 + 1.5 * bar_w,
            H - BOTTOM + 16.0,
            b.label,
            b.count
        );
    }
    legend(&mut s, &series);
    s.push_str("</svg>\n");
    s
}

/// Stacked bars: share of exact / partial / none matches per length bucket.
fn match_chart(report: &AnalysisReport) -> String {
    let mut s = svg_open("Match type by query length");
    let series = [("exact", "#2ca02c"), ("partial", "#ff7f0e"), ("none", "#d62728")];
    let group_w = (W - LEFT - 20.0) / report.buckets.len() as f64;
    let bar_w = group_w * 0.6;
    for (g, b) in report.buckets.iter().enumerate() {
        let x = LEFT + 10.0 + g as f64 * group_w;
        let total = b.count.max(1) as f64;
        let mut acc = 0.0;
        for (n, (_, color)) in [b.exact, b.partial, b.none].iter().zip(series) {
            let frac = *n as f64 / total;
            let (y_top, y_bot) = (y_of(acc + frac, 1.0), y_of(acc, 1.0));
            let _ = writeln!(
                s,
                r#"<rect x="{x:.1}" y="{y_top:.1}" width="{bar_w:.1}" height="{:.1}" fill="{color}"/>"#,
                y_bot - y_top
            );
            acc += frac;
        }
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{} (n={})</text>"#,
            x + bar_w / 2.0,
            H - BOTTOM + 16.0,
            b.label,
            b.count
        );
    }
    legend(&mut s, &series);
    s.push_str("</svg>\n");
    s
}

/// `(file name, svg text)` for each chart.
pub fn render_svg_charts(report: &AnalysisReport) -> Vec<(&'static str, String)> {
    vec![("dcg_by_length.svg", dcg_chart(report)), ("match_types.svg", match_chart(report))]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluator::QueryResult;

    fn result(words: usize, m: MatchType, model: f64) -> QueryResult {
        QueryResult {
            query_id: words as u32,
            text: vec!["w"; words].join(" "),
            word_count: words,
            match_type: m,
            oov: m == MatchType::None,
            model,
            ideal: 1.0,
            random: 0.2,
        }
    }

    #[test]
    fn buckets_partition_queries() {
        let per_query = vec![
            result(1, MatchType::Exact, 0.9),
            result(2, MatchType::Partial, 0.5),
            result(2, MatchType::Exact, 0.7),
            result(5, MatchType::None, 0.1),
            result(7, MatchType::Partial, 0.3),
        ];
        let res = EvalResults { n: 25, gamma: 0.1, seed: 0, mean_model: 0.5, mean_ideal: 1.0, mean_random: 0.2, per_query };
        let rep = analysis_report(&res, None);
        assert_eq!(rep.buckets.iter().map(|b| b.count).sum::<usize>(), 5);
        assert_eq!(rep.exact + rep.partial + rep.none, 5);
        assert_eq!(rep.buckets[3].count, 2);
        assert!((rep.buckets[1].mean_model - 0.6).abs() < 1e-12);
        for (name, svg) in render_svg_charts(&rep) {
            assert!(name.ends_with(".svg"));
            assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        }
    }
}
