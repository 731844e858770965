//! Metrics and report emission: Top-k error, accuracy tables and SVG curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};
use crate::network::{argmax, Network, NUM_CLASSES};

const EVAL_CHUNK: usize = 500;

/// Note attached to patch reports: with ten classes Top-5 is a much weaker
/// criterion than on a thousand-class problem.
pub const TOP5_CAVEAT: &str = "top-5 over 10 classes is far weaker than top-5 over 1000 classes";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReportRow {
    /// Epsilon or patch side length.
    pub setting: f64,
    pub correct: usize,
    pub total: usize,
}

impl ReportRow {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Per-setting counts in the shape of an epsilon (or patch size) table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    pub attack: String,
    /// Header name of the setting column.
    pub setting_name: String,
    pub seed: u64,
    pub checkpoint: String,
    pub notes: Vec<String>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn new(attack: impl Into<String>, setting_name: impl Into<String>) -> Self {
        Self {
            attack: attack.into(),
            setting_name: setting_name.into(),
            ..Self::default()
        }
    }

    pub fn push(&mut self, setting: f64, correct: usize, total: usize) -> Result<()> {
        if correct > total {
            return Err(Error::invalid(
                "report",
                format!("{correct} correct out of {total}"),
            ));
        }
        self.rows.push(ReportRow {
            setting,
            correct,
            total,
        });
        Ok(())
    }

    pub fn accuracies(&self) -> Vec<f64> {
        self.rows.iter().map(ReportRow::accuracy).collect()
    }

    pub fn accuracy_at(&self, setting: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| (r.setting - setting).abs() < 1e-12)
            .map(ReportRow::accuracy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("{},correct,total,accuracy\n", self.setting_name);
        for r in &self.rows {
            writeln!(
                s,
                "{:.3},{},{},{:.4}",
                r.setting,
                r.correct,
                r.total,
                r.accuracy()
            )
            .expect("string write");
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path.as_ref(), self.to_csv().as_bytes())
    }

    /// Parses the CSV layout written by [`EvalReport::to_csv`].
    pub fn parse_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::Malformed("empty report".into()))?;
        let setting_name = header
            .strip_suffix(",correct,total,accuracy")
            .ok_or_else(|| Error::Malformed(format!("bad report header `{header}`")))?;
        let mut report = Self::new("", setting_name);
        for line in lines.filter(|l| !l.is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Malformed(format!("bad report row `{line}`"));
            if cols.len() != 4 {
                return Err(bad());
            }
            let setting = cols[0].parse().map_err(|_| bad())?;
            let correct = cols[1].parse().map_err(|_| bad())?;
            let total = cols[2].parse().map_err(|_| bad())?;
            report.push(setting, correct, total)?;
        }
        Ok(report)
    }

    /// Accuracy-vs-setting line plot as a standalone SVG document. The output
    /// depends only on the report contents.
    pub fn render_svg(&self) -> Result<String> {
        render_series(&self.title(), &self.setting_name, &[("", self)])
    }

    pub fn render_curve(&self, path: impl AsRef<Path>) -> Result<()> {
        let svg = self.render_svg()?;
        write_atomic(path.as_ref(), svg.as_bytes())
    }

    fn title(&self) -> String {
        if self.attack.is_empty() {
            "accuracy".to_string()
        } else {
            format!("{}: accuracy vs {}", self.attack, self.setting_name)
        }
    }
}

const SERIES_COLORS: [&str; 4] = ["steelblue", "firebrick", "seagreen", "darkorange"];

/// Several reports over the same setting axis in one plot, with a legend.
pub fn render_comparison(title: &str, series: &[(&str, &EvalReport)]) -> Result<String> {
    if series.is_empty() || series.len() > SERIES_COLORS.len() {
        return Err(Error::invalid(
            "render_comparison",
            format!(
                "between 1 and {} series, got {}",
                SERIES_COLORS.len(),
                series.len()
            ),
        ));
    }
    let setting = &series[0].1.setting_name;
    render_series(title, setting, series)
}

fn render_series(
    title: &str,
    setting_name: &str,
    series: &[(&str, &EvalReport)],
) -> Result<String> {
    if let Some((_, r)) = series.iter().find(|(_, r)| r.rows.len() < 2) {
        return Err(Error::invalid(
            "render_curve",
            format!("need at least 2 rows, got {}", r.rows.len()),
        ));
    }
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let (xmin, xmax) = series
        .iter()
        .flat_map(|(_, r)| r.rows.iter().map(|row| row.setting))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| {
            (a.min(x), b.max(x))
        });
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| left + (x - xmin) / span * pw;
    let py = |acc: f64| top + (1.0 - acc) * ph;

    let mut s = String::new();
    let mut line = |text: String| {
        s.push_str(&text);
        s.push('\n');
    };
    line(format!(
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    ));
    line(format!(r#"<rect width="{w}" height="{h}" fill="white"/>"#));
    line(format!(
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(title)
    ));
    // axes
    line(format!(
        r#"<path d="M{left} {top} L{left} {} L{} {}" stroke="black" fill="none"/>"#,
        top + ph,
        left + pw,
        top + ph
    ));
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        line(format!(
            r#"<text class="ytick" x="{}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{acc:.1}</text>"#,
            left - 6.0,
            py(acc) + 4.0
        ));
    }
    let mut ticks: Vec<f64> = series
        .iter()
        .flat_map(|(_, r)| r.rows.iter().map(|row| row.setting))
        .collect();
    ticks.sort_by(f64::total_cmp);
    ticks.dedup();
    for x in ticks {
        line(format!(
            r#"<text class="xtick" x="{:.2}" y="{}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            px(x),
            top + ph + 16.0,
            trim_float(x)
        ));
    }
    line(format!(
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        h - 18.0,
        escape(setting_name)
    ));
    line(format!(
        r#"<text x="18" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 18 {})">accuracy</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    ));
    for (k, (label, report)) in series.iter().enumerate() {
        let color = SERIES_COLORS[k];
        let points: Vec<String> = report
            .rows
            .iter()
            .map(|r| format!("{:.2},{:.2}", px(r.setting), py(r.accuracy())))
            .collect();
        line(format!(
            r#"<polyline points="{}" stroke="{color}" stroke-width="2" fill="none"/>"#,
            points.join(" ")
        ));
        for r in &report.rows {
            line(format!(
                r#"<circle class="marker" cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#,
                px(r.setting),
                py(r.accuracy())
            ));
        }
        if !label.is_empty() {
            let y = top + 16.0 + 18.0 * k as f64;
            line(format!(
                r#"<rect x="{}" y="{}" width="14" height="4" fill="{color}"/>"#,
                left + pw - 150.0,
                y - 4.0
            ));
            line(format!(
                r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="12">{}</text>"#,
                left + pw - 130.0,
                escape(label)
            ));
        }
    }
    s.push_str("</svg>\n");
    Ok(s)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

fn trim_float(v: f64) -> String {
    let s = format!("{v:.3}");
    let s = s.trim_end_matches('0').trim_end_matches('.');
    if s.is_empty() {
        "0".into()
    } else {
        s.to_string()
    }
}

/// Class indices ordered by descending score; ties by lower index.
pub fn ranking(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

/// Whether `label` is among the `k` highest entries of `row`.
pub fn in_top_k(row: &[f64], label: usize, k: usize) -> bool {
    // rank = number of classes that beat `label` under the tie rule
    let beaten_by = row
        .iter()
        .enumerate()
        .filter(|&(c, &v)| v > row[label] || (v == row[label] && c < label))
        .count();
    beaten_by < k
}

/// Fraction of rows of a `B×C` score matrix whose label is not in the top `k`.
pub fn top_k_error(scores: &[f64], classes: usize, labels: &[usize], k: usize) -> Result<f64> {
    if k == 0 || k > classes {
        return Err(Error::invalid(
            "top_k_error",
            format!("k = {k} outside 1..={classes}"),
        ));
    }
    if scores.len() != labels.len() * classes || labels.is_empty() {
        return Err(Error::shape(
            "top_k_error",
            format!("{} scores for {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange {
            index,
            label,
            classes,
        });
    }
    let misses = scores
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| !in_top_k(row, y, k))
        .count();
    Ok(misses as f64 / labels.len() as f64)
}

/// Number of correctly classified examples (eval mode, temperature 1).
pub fn count_correct(net: &Network, data: &LabeledDataset) -> Result<usize> {
    let mut correct = 0;
    for idx in data.chunks(EVAL_CHUNK) {
        let (x, labels) = data.gather(&idx);
        let lp = net.predict(&x, 1.0)?;
        correct += lp
            .data()
            .chunks_exact(NUM_CLASSES)
            .zip(&labels)
            .filter(|(row, &y)| argmax(row) == y)
            .count();
    }
    Ok(correct)
}

pub fn accuracy(net: &Network, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(count_correct(net, data)? as f64 / data.len() as f64)
}
