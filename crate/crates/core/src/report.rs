//! Experiment outputs: CSV/JSON bundles and SVG charts.
//!
//! Every emitter is a pure function of its input, so identical bundles give
//! identical bytes. CSV floats use six significant digits; JSON keeps full
//! precision so that a bundle survives a round trip unchanged.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributionGrid;
use crate::error::{MieError, Result};
use crate::model::HeadId;
use crate::runner::{BaselineRun, Heatmap, SweepReport};
use crate::svd_lens::SvdTokenReport;

/// Bumped whenever a CSV column is added, removed or reordered.
pub const CSV_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub model_id: String,
    pub dataset_id: String,
    pub seed: u64,
    pub invocation: Vec<String>,
    /// Seconds since the epoch, from `SOURCE_DATE_EPOCH` (0 when unset).
    pub timestamp: u64,
}

impl Metadata {
    pub fn new(model_id: impl Into<String>, dataset_id: impl Into<String>, seed: u64, invocation: Vec<String>) -> Self {
        Metadata {
            model_id: model_id.into(),
            dataset_id: dataset_id.into(),
            seed,
            invocation,
            timestamp: source_date_epoch(),
        }
    }
}

pub fn source_date_epoch() -> u64 {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse().ok())
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InductionScores {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Layer-major.
    pub scores: Vec<f64>,
}

impl InductionScores {
    pub fn best(&self) -> Option<(HeadId, f64)> {
        self.scores
            .iter()
            .enumerate()
            .fold(None, |best: Option<(usize, f64)>, (i, &s)| match best {
                Some((_, b)) if b >= s => best,
                _ => Some((i, s)),
            })
            .map(|(i, s)| (HeadId::new(i / self.n_heads, i % self.n_heads), s))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "data", rename_all = "snake_case")]
pub enum Payload {
    Sweep(SweepReport),
    Baseline(Vec<BaselineRun>),
    Attribution(AttributionGrid),
    Heatmap(Heatmap),
    Svd(SvdTokenReport),
    Induction(InductionScores),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Sweep(_) => "sweep",
            Payload::Baseline(_) => "baseline",
            Payload::Attribution(_) => "attribution",
            Payload::Heatmap(_) => "heatmap",
            Payload::Svd(_) => "svd",
            Payload::Induction(_) => "induction",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportBundle {
    pub metadata: Metadata,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    Csv,
    Json,
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "json",
        }
    }
}

/// `%.6g`-style rendering.
pub fn sig6(x: f64) -> String {
    if x.is_nan() {
        return "NaN".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    // Rounding can carry into the next decade, so take the exponent from
    // the rounded scientific form.
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        trim_zeros(&format!("{x:.decimals$}"))
    } else {
        format!("{}e{}{:02}", trim_zeros(mantissa), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s.to_string()
    }
}

pub fn to_json(bundle: &ReportBundle) -> Result<String> {
    let mut s = serde_json::to_string_pretty(bundle)?;
    s.push('\n');
    Ok(s)
}

pub fn from_json(text: &str) -> Result<ReportBundle> {
    Ok(serde_json::from_str(text)?)
}

pub fn to_csv(bundle: &ReportBundle) -> Result<String> {
    let (header, rows) = csv_rows(&bundle.payload);
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    let csv_err = |e: csv::Error| MieError::Format(e.to_string());
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(&r).map_err(csv_err)?;
    }
    let body = w.into_inner().map_err(|e| MieError::Format(e.to_string()))?;
    let mut out = format!("# mie {} csv v{CSV_SCHEMA_VERSION}\n", bundle.payload.kind());
    out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
    Ok(out)
}

fn csv_rows(payload: &Payload) -> (&'static [&'static str], Vec<Vec<String>>) {
    match payload {
        Payload::Sweep(rep) => (
            &["alpha", "factual", "counterfactual", "other", "n_total"],
            rep.results
                .iter()
                .map(|r| {
                    vec![
                        sig6(r.alpha as f64),
                        r.counts.factual.to_string(),
                        r.counts.counterfactual.to_string(),
                        r.counts.other.to_string(),
                        r.n_total.to_string(),
                    ]
                })
                .collect(),
        ),
        Payload::Baseline(runs) => (
            &["seed", "heads", "alpha", "factual", "counterfactual", "other", "n_total"],
            runs.iter()
                .flat_map(|run| {
                    let heads = run.heads.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(" ");
                    run.sweep.results.iter().map(move |r| {
                        vec![
                            run.seed.to_string(),
                            heads.clone(),
                            sig6(r.alpha as f64),
                            r.counts.factual.to_string(),
                            r.counts.counterfactual.to_string(),
                            r.counts.other.to_string(),
                            r.n_total.to_string(),
                        ]
                    })
                })
                .collect(),
        ),
        Payload::Attribution(grid) => (
            &["layer", "head", "mean_delta", "std_delta", "n"],
            grid.cells
                .iter()
                .map(|c| {
                    vec![
                        c.head.layer.to_string(),
                        c.head.head.to_string(),
                        sig6(c.mean_delta),
                        sig6(c.std_delta),
                        c.n.to_string(),
                    ]
                })
                .collect(),
        ),
        Payload::Heatmap(hm) => (
            &["layer", "head", "category", "mean_delta", "std_delta", "n"],
            hm.cells
                .iter()
                .zip(&hm.heads)
                .flat_map(|(row, h)| {
                    row.iter().zip(&hm.categories).map(move |(c, cat)| {
                        vec![
                            h.layer.to_string(),
                            h.head.to_string(),
                            cat.clone(),
                            sig6(c.mean_delta),
                            sig6(c.std_delta),
                            c.n.to_string(),
                        ]
                    })
                })
                .collect(),
        ),
        Payload::Svd(rep) => (
            &["layer", "head", "vector", "singular_value", "rank", "token_id", "logit"],
            rep.top_tokens
                .iter()
                .zip(&rep.singular_values)
                .enumerate()
                .flat_map(|(i, (toks, s))| {
                    toks.iter().enumerate().map(move |(r, (t, l))| {
                        vec![
                            rep.head.layer.to_string(),
                            rep.head.head.to_string(),
                            i.to_string(),
                            sig6(*s),
                            r.to_string(),
                            t.to_string(),
                            sig6(*l),
                        ]
                    })
                })
                .collect(),
        ),
        Payload::Induction(ind) => (
            &["layer", "head", "score"],
            ind.scores
                .iter()
                .enumerate()
                .map(|(i, s)| vec![(i / ind.n_heads).to_string(), (i % ind.n_heads).to_string(), sig6(*s)])
                .collect(),
        ),
    }
}

pub fn render(bundle: &ReportBundle, format: Format) -> Result<String> {
    match format {
        Format::Csv => to_csv(bundle),
        Format::Json => to_json(bundle),
    }
}

pub fn emit(bundle: &ReportBundle, format: Format, path: &Path) -> Result<()> {
    write_text(path, &render(bundle, format)?)
}

pub fn load_json(path: &Path) -> Result<ReportBundle> {
    let text = std::fs::read_to_string(path).map_err(|e| MieError::io(path, e))?;
    from_json(&text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| MieError::io(path, e))
}

/// Diverging blue–white–red scale; `t` is clamped to `[-1, 1]`.
pub fn diverging_color(t: f64) -> (u8, u8, u8) {
    let t = if t.is_finite() { t.clamp(-1.0, 1.0) } else { 0.0 };
    let fade = (255.0 * (1.0 - t.abs())).round() as u8;
    if t >= 0.0 {
        (255, fade, fade)
    } else {
        (fade, fade, 255)
    }
}

const CELL_W: usize = 72;
const CELL_H: usize = 28;
const LABEL_W: usize = 110;
const LABEL_H: usize = 30;

/// Heatmap with a scale symmetric around zero: positive cells are red,
/// negative cells blue, and every cell carries its value.
pub fn render_heatmap(matrix: &[Vec<f64>], row_labels: &[String], col_labels: &[String]) -> Result<String> {
    let n_rows = matrix.len();
    let n_cols = matrix.first().map_or(0, Vec::len);
    if n_rows == 0 || n_cols == 0 {
        return Err(MieError::contract("cannot render an empty heatmap"));
    }
    if matrix.iter().any(|r| r.len() != n_cols) {
        return Err(MieError::contract("heatmap rows have different lengths"));
    }
    if row_labels.len() != n_rows || col_labels.len() != n_cols {
        return Err(MieError::contract(format!(
            "{} row and {} column labels for a {n_rows}x{n_cols} matrix",
            row_labels.len(),
            col_labels.len()
        )));
    }
    if matrix.iter().flatten().any(|v| !v.is_finite()) {
        return Err(MieError::contract("heatmap values must be finite"));
    }
    let scale = matrix.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let width = LABEL_W + n_cols * CELL_W;
    let height = LABEL_H + n_rows * CELL_H;
    let mut svg = svg_open(width, height);
    for (c, label) in col_labels.iter().enumerate() {
        let x = LABEL_W + c * CELL_W + CELL_W / 2;
        let _ = writeln!(svg, r#"<text x="{x}" y="{}" text-anchor="middle">{}</text>"#, LABEL_H - 10, escape(label));
    }
    for (r, (row, label)) in matrix.iter().zip(row_labels).enumerate() {
        let y = LABEL_H + r * CELL_H;
        let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, LABEL_W - 6, y + 18, escape(label));
        for (c, v) in row.iter().enumerate() {
            let x = LABEL_W + c * CELL_W;
            let (red, green, blue) = diverging_color(if scale > 0.0 { v / scale } else { 0.0 });
            let _ = writeln!(
                svg,
                r##"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="#{red:02x}{green:02x}{blue:02x}" stroke="#999999"/>"##
            );
            let _ = writeln!(
                svg,
                r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
                x + CELL_W / 2,
                y + 18,
                sig6(round_for_label(*v))
            );
        }
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn round_for_label(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Factual / counterfactual / other shares of each sweep point.
pub fn sweep_fractions(report: &SweepReport) -> Result<Vec<[f64; 3]>> {
    report
        .results
        .iter()
        .map(|r| {
            if r.n_total == 0 {
                return Err(MieError::contract(format!("sweep point α={} has no entries", r.alpha)));
            }
            let n = r.n_total as f64;
            Ok([
                r.counts.factual as f64 / n,
                r.counts.counterfactual as f64 / n,
                r.counts.other as f64 / n,
            ])
        })
        .collect()
}

pub const BAND_COLORS: [&str; 3] = ["#2b8cbe", "#e34a33", "#bdbdbd"];
pub const BAND_NAMES: [&str; 3] = ["factual", "counterfactual", "other"];

/// Stacked-area chart of outcome shares over the α grid, one band per
/// label, evenly spaced along x in the order of the sweep.
pub fn render_sweep_area(report: &SweepReport) -> Result<String> {
    let fr = sweep_fractions(report)?;
    if fr.is_empty() {
        return Err(MieError::contract("cannot chart an empty sweep"));
    }
    let (w, h, left, top) = (480.0, 240.0, 50.0, 20.0);
    let step = if fr.len() > 1 { w / (fr.len() - 1) as f64 } else { 0.0 };
    let x = |i: usize| left + step * i as f64;
    let y = |share: f64| top + h * (1.0 - share);
    let mut svg = svg_open((left + w + 130.0) as usize, (top + h + 40.0) as usize);
    let mut lower = vec![0.0; fr.len()];
    for band in 0..3 {
        let upper: Vec<f64> = lower.iter().zip(&fr).map(|(lo, f)| lo + f[band]).collect();
        let mut pts: Vec<String> = Vec::new();
        let single = fr.len() == 1;
        for (i, u) in upper.iter().enumerate() {
            pts.push(format!("{:.2},{:.2}", x(i), y(*u)));
            if single {
                pts.push(format!("{:.2},{:.2}", x(i) + w, y(*u)));
            }
        }
        for (i, l) in lower.iter().enumerate().rev() {
            if single {
                pts.push(format!("{:.2},{:.2}", x(i) + w, y(*l)));
            }
            pts.push(format!("{:.2},{:.2}", x(i), y(*l)));
        }
        let _ = writeln!(
            svg,
            r#"<polygon class="{}" points="{}" fill="{}"/>"#,
            BAND_NAMES[band],
            pts.join(" "),
            BAND_COLORS[band]
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.0}" y="{:.0}">{}</text>"#,
            left + w + 10.0,
            top + 20.0 + 20.0 * band as f64,
            BAND_NAMES[band]
        );
        lower = upper;
    }
    for (i, r) in report.results.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.0}" text-anchor="middle">α={}</text>"#,
            x(i),
            top + h + 20.0,
            sig6(r.alpha as f64)
        );
    }
    svg.push_str("</svg>\n");
    Ok(svg)
}

fn svg_open(width: usize, height: usize) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::AttributionCell;
    use crate::runner::{Counts, SweepResult};

    fn meta() -> Metadata {
        Metadata {
            model_id: "toy".into(),
            dataset_id: "toy-200".into(),
            seed: 3,
            invocation: vec!["mie".into(), "sweep".into()],
            timestamp: 0,
        }
    }

    fn sweep() -> SweepReport {
        let pt = |alpha: f32, f, c, o| SweepResult {
            alpha,
            counts: Counts {
                factual: f,
                counterfactual: c,
                other: o,
            },
            n_total: f + c + o,
        };
        SweepReport {
            results: vec![pt(0.0, 2, 7, 1), pt(1.0, 1, 9, 0), pt(10.0, 6, 2, 2)],
            excluded: vec![(4, "anchor `cofa` cannot be resolved".into())],
            outcomes: None,
        }
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(sig6(0.0), "0");
        assert_eq!(sig6(1.0), "1");
        assert_eq!(sig6(-0.3152749), "-0.315275");
        assert_eq!(sig6(123456.7), "123457");
        assert_eq!(sig6(1234567.0), "1.23457e+06");
        assert_eq!(sig6(0.0001234567), "0.000123457");
        assert_eq!(sig6(0.00001234567), "1.23457e-05");
        assert_eq!(sig6(999999.6), "1e+06");
        assert_eq!(sig6(100.0), "100");
        assert_eq!(sig6(f64::NAN), "NaN");
    }

    #[test]
    fn empty_sweep_is_header_only() {
        let b = ReportBundle {
            metadata: meta(),
            payload: Payload::Sweep(SweepReport::default()),
        };
        assert_eq!(to_csv(&b).unwrap(), "# mie sweep csv v1\nalpha,factual,counterfactual,other,n_total\n");
    }

    #[test]
    fn sweep_csv_rows() {
        let b = ReportBundle {
            metadata: meta(),
            payload: Payload::Sweep(sweep()),
        };
        let csv = to_csv(&b).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 5);
        assert_eq!(lines[4], "10,6,2,2,10");
    }

    #[test]
    fn json_round_trip_and_determinism() {
        let grid = AttributionGrid {
            n_layers: 1,
            n_heads: 2,
            cells: vec![
                AttributionCell {
                    head: HeadId::new(0, 0),
                    mean_delta: -0.1 / 3.0,
                    std_delta: 1e-17,
                    n: 3,
                },
                AttributionCell {
                    head: HeadId::new(0, 1),
                    mean_delta: 2.5,
                    std_delta: 0.0,
                    n: 3,
                },
            ],
        };
        for payload in [Payload::Sweep(sweep()), Payload::Attribution(grid)] {
            let b = ReportBundle {
                metadata: meta(),
                payload,
            };
            let j = to_json(&b).unwrap();
            assert_eq!(j, to_json(&b).unwrap());
            assert_eq!(from_json(&j).unwrap(), b);
            assert!(j.contains(&format!("\"kind\": \"{}\"", b.payload.kind())));
        }
    }

    #[test]
    fn csv_quotes_awkward_categories() {
        let cell = |h| AttributionCell {
            head: h,
            mean_delta: 0.5,
            std_delta: 0.1,
            n: 4,
        };
        let h = HeadId::new(1, 2);
        let b = ReportBundle {
            metadata: meta(),
            payload: Payload::Heatmap(Heatmap {
                heads: vec![h],
                categories: vec!["city, town".into()],
                cells: vec![vec![cell(h)]],
                category_std: vec![0.0],
            }),
        };
        assert!(to_csv(&b).unwrap().ends_with("1,2,\"city, town\",0.5,0.1,4\n"));
    }

    #[test]
    fn emit_writes_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let b = ReportBundle {
            metadata: meta(),
            payload: Payload::Induction(InductionScores {
                n_layers: 1,
                n_heads: 2,
                scores: vec![0.25, 0.75],
            }),
        };
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        emit(&b, Format::Csv, &p1).unwrap();
        emit(&b, Format::Csv, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let p3 = dir.path().join("a.json");
        emit(&b, Format::Json, &p3).unwrap();
        assert_eq!(load_json(&p3).unwrap(), b);
        assert_eq!(
            InductionScores {
                n_layers: 1,
                n_heads: 2,
                scores: vec![0.25, 0.75]
            }
            .best(),
            Some((HeadId::new(0, 1), 0.75))
        );
    }

    #[test]
    fn zero_cell_is_the_centre_colour() {
        let svg = render_heatmap(&[vec![0.0]], &["L0H0".into()], &["all".into()]).unwrap();
        assert!(svg.contains("fill=\"#ffffff\""));
        assert!(svg.contains(">0</text>"));
    }

    #[test]
    fn sign_flip_mirrors_colours() {
        for t in [-1.0, -0.6, -0.2, 0.0, 0.3, 1.0] {
            let (r, g, b) = diverging_color(t);
            assert_eq!(diverging_color(-t), (b, g, r));
        }
        let m = vec![vec![1.5, -0.5], vec![0.25, -1.5]];
        let neg: Vec<Vec<f64>> = m.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
        let rows = vec!["a".to_string(), "b".to_string()];
        let cols = vec!["x".to_string(), "y".to_string()];
        let fills = |svg: &str| -> Vec<String> {
            svg.split("fill=\"#").skip(1).map(|s| s[..6].to_string()).collect()
        };
        let a = fills(&render_heatmap(&m, &rows, &cols).unwrap());
        let b = fills(&render_heatmap(&neg, &rows, &cols).unwrap());
        let swap = |c: &str| format!("{}{}{}", &c[4..6], &c[2..4], &c[0..2]);
        assert_eq!(a.iter().map(|c| swap(c)).collect::<Vec<_>>(), b);
    }

    #[test]
    fn heatmap_rejects_bad_input() {
        assert!(render_heatmap(&[], &[], &[]).is_err());
        assert!(render_heatmap(&[vec![f64::NAN]], &["a".into()], &["b".into()]).is_err());
        assert!(render_heatmap(&[vec![1.0]], &[], &["b".into()]).is_err());
    }

    #[test]
    fn area_bands_sum_to_one() {
        let rep = sweep();
        for f in sweep_fractions(&rep).unwrap() {
            assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let svg = render_sweep_area(&rep).unwrap();
        assert_eq!(svg.matches("<polygon").count(), 3);
        assert_eq!(svg, render_sweep_area(&rep).unwrap());
        // the top band ends on the 100% line at every α
        let other = svg.lines().find(|l| l.contains("class=\"other\"")).unwrap();
        let pts = other.split("points=\"").nth(1).unwrap();
        assert!(pts.split(' ').take(rep.results.len()).all(|p| p.ends_with(",20.00")));
    }
}
