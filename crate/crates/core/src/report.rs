//! SVG figures and rounds-lasted tables built from experiment histories.
//!
//! Every renderer is a pure function of its input and formats numbers with
//! a fixed number of decimals, so output bytes are stable across platforms.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::DatasetKind;
use crate::engine::ExperimentHistory;
use crate::error::{Error, Result};
use crate::experiments::{median, StrategyRuns, SweepGroup};
use crate::similarity::{embed_clients, ClusterModel, SimilarityMatrix};

const PALETTE: [&str; 10] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
    "#bcbd22", "#17becf",
];

fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

/// Fixed-decimal formatting without a negative zero.
fn num(v: f64) -> String {
    let s = format!("{v:.2}");
    if s == "-0.00" {
        "0.00".into()
    } else {
        s
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn svg_open(out: &mut String, width: f64, height: f64) {
    let _ = writeln!(
        out,
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" font-family=\"sans-serif\" font-size=\"12\">",
        w = num(width),
        h = num(height)
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"#ffffff\"/>");
}

/// A named set of runs plotted as one series.
#[derive(Debug, Clone)]
pub struct HistoryGroup {
    pub name: String,
    pub histories: Vec<ExperimentHistory>,
}

/// Per-round accuracy statistics of one group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoundBand {
    pub round: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Groups of histories that are comparable: same client count, client
/// fraction and dataset.
#[derive(Debug, Clone)]
pub struct ComparisonSet {
    pub title: String,
    pub groups: Vec<HistoryGroup>,
}

impl ComparisonSet {
    pub fn new(title: impl Into<String>, groups: Vec<HistoryGroup>) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::ComparisonInvalid("no groups to compare".into()));
        }
        let mut first: Option<(usize, f64, DatasetKind)> = None;
        for g in &groups {
            if g.histories.is_empty() {
                return Err(Error::ComparisonInvalid(format!("group {} has no runs", g.name)));
            }
            for h in &g.histories {
                let key = (h.config.client_count, h.config.fraction, h.config.dataset);
                match first {
                    None => first = Some(key),
                    Some(f) if f != key => {
                        return Err(Error::ComparisonInvalid(format!(
                            "group {} mixes (K={}, C={}, dataset={:?}) with (K={}, C={}, dataset={:?})",
                            g.name, key.0, key.1, key.2, f.0, f.1, f.2
                        )))
                    }
                    Some(_) => {}
                }
            }
        }
        Ok(Self {
            title: title.into(),
            groups,
        })
    }

    pub fn from_runs(title: impl Into<String>, runs: &[StrategyRuns]) -> Result<Self> {
        let groups = runs
            .iter()
            .map(|r| HistoryGroup {
                name: r.strategy.display_name().to_string(),
                histories: r.histories.clone(),
            })
            .collect();
        Self::new(title, groups)
    }

    pub fn from_sweep(title: impl Into<String>, sweep: &[SweepGroup]) -> Result<Self> {
        let groups = sweep
            .iter()
            .map(|g| HistoryGroup {
                name: format!("k={}", g.k),
                histories: g.runs.histories.clone(),
            })
            .collect();
        Self::new(title, groups)
    }

    pub fn histories(&self) -> impl Iterator<Item = &ExperimentHistory> {
        self.groups.iter().flat_map(|g| g.histories.iter())
    }

    /// Mean and min/max test accuracy per round over the runs that reached
    /// that round.
    pub fn bands(&self, group: usize) -> Vec<RoundBand> {
        let hs = &self.groups[group].histories;
        let longest = hs.iter().map(|h| h.rounds.len()).max().unwrap_or(0);
        (0..longest)
            .map(|r| {
                let accs: Vec<f64> = hs
                    .iter()
                    .filter_map(|h| h.rounds.get(r).map(|x| x.test_accuracy))
                    .collect();
                RoundBand {
                    round: r + 1,
                    mean: accs.iter().sum::<f64>() / accs.len() as f64,
                    min: accs.iter().copied().fold(f64::INFINITY, f64::min),
                    max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                }
            })
            .collect()
    }
}

/// Round step between labelled x ticks.
fn tick_step(max_round: usize) -> usize {
    [1, 2, 5, 10, 20, 25, 50, 100, 200, 250, 500]
        .into_iter()
        .find(|&s| max_round / s <= 10)
        .unwrap_or(max_round.div_ceil(10).max(1))
}

/// Seed-mean accuracy per round for each group, with a shaded min–max band.
pub fn render_accuracy_chart(set: &ComparisonSet) -> String {
    let (w, h) = (720.0, 440.0);
    let (left, right, top, bottom) = (60.0, 160.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let bands: Vec<Vec<RoundBand>> = (0..set.groups.len()).map(|g| set.bands(g)).collect();
    let max_round = bands.iter().map(Vec::len).max().unwrap_or(0).max(1);
    let x = |round: usize| {
        if max_round == 1 {
            left + pw / 2.0
        } else {
            left + pw * (round - 1) as f64 / (max_round - 1) as f64
        }
    };
    let y = |acc: f64| top + ph * (1.0 - acc.clamp(0.0, 1.0));

    let mut out = String::new();
    svg_open(&mut out, w, h);
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{}</text>",
        num(left + pw / 2.0),
        escape(&set.title)
    );

    // axes and grid
    let _ = writeln!(out, "<g class=\"axes\" stroke=\"#000000\" stroke-width=\"1\">");
    let _ = writeln!(
        out,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\"/>\n<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\"/>",
        l = num(left),
        r = num(left + pw),
        t = num(top),
        b = num(top + ph)
    );
    let _ = writeln!(out, "</g>");
    let _ = writeln!(out, "<g class=\"ticks\" text-anchor=\"middle\">");
    for i in 0..=5 {
        let acc = i as f64 / 5.0;
        let _ = writeln!(
            out,
            "<line x1=\"{l}\" y1=\"{yy}\" x2=\"{r}\" y2=\"{yy}\" stroke=\"#dddddd\"/><text x=\"{tx}\" y=\"{ty}\" text-anchor=\"end\">{}</text>",
            num(acc),
            l = num(left),
            r = num(left + pw),
            yy = num(y(acc)),
            tx = num(left - 6.0),
            ty = num(y(acc) + 4.0)
        );
    }
    let step = tick_step(max_round);
    let mut round = 1;
    while round <= max_round {
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\">{round}</text>",
            num(x(round)),
            num(top + ph + 18.0)
        );
        round = if round == 1 && step > 1 { step } else { round + step };
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">round</text>",
        num(left + pw / 2.0),
        num(h - 10.0)
    );
    let _ = writeln!(
        out,
        "<text x=\"16\" y=\"{yy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {yy})\">test accuracy</text>",
        yy = num(top + ph / 2.0)
    );

    for (g, band) in bands.iter().enumerate() {
        if band.is_empty() {
            continue;
        }
        let upper = band.iter().map(|b| format!("{},{}", num(x(b.round)), num(y(b.max))));
        let lower = band
            .iter()
            .rev()
            .map(|b| format!("{},{}", num(x(b.round)), num(y(b.min))));
        let _ = writeln!(
            out,
            "<polygon class=\"band\" fill=\"{}\" fill-opacity=\"0.18\" stroke=\"none\" points=\"{}\"/>",
            color(g),
            upper.chain(lower).collect::<Vec<_>>().join(" ")
        );
    }
    for (g, band) in bands.iter().enumerate() {
        if band.is_empty() {
            continue;
        }
        let pts: Vec<String> = band
            .iter()
            .map(|b| format!("{},{}", num(x(b.round)), num(y(b.mean))))
            .collect();
        let _ = writeln!(
            out,
            "<polyline class=\"series\" fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>",
            color(g),
            pts.join(" ")
        );
        if band.len() == 1 {
            let _ = writeln!(
                out,
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{}\"/>",
                num(x(band[0].round)),
                num(y(band[0].mean)),
                color(g)
            );
        }
    }

    let _ = writeln!(out, "<g class=\"legend\">");
    for (g, group) in set.groups.iter().enumerate() {
        let ly = top + 10.0 + 20.0 * g as f64;
        let lx = left + pw + 16.0;
        let _ = writeln!(
            out,
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{} (n={})</text>",
            num(lx),
            num(lx + 20.0),
            color(g),
            num(lx + 26.0),
            num(ly + 4.0),
            escape(&group.name),
            group.histories.len(),
            y = num(ly)
        );
    }
    let _ = writeln!(out, "</g>\n</svg>");
    out
}

fn lerp_color(t: f64) -> String {
    const LOW: [f64; 3] = [247.0, 251.0, 255.0];
    const HIGH: [f64; 3] = [8.0, 48.0, 107.0];
    let c: Vec<String> = (0..3)
        .map(|i| format!("{:02x}", (LOW[i] + (HIGH[i] - LOW[i]) * t).round() as u8))
        .collect();
    format!("#{}", c.concat())
}

/// `K x K` color grid scaled linearly over the off-diagonal range.
pub fn render_similarity_heatmap(matrix: &SimilarityMatrix) -> String {
    let k = matrix.size();
    let off = matrix.off_diagonal();
    let (lo, hi) = if off.is_empty() {
        (matrix.get(0, 0), matrix.get(0, 0))
    } else {
        (
            off.iter().copied().fold(f64::INFINITY, f64::min),
            off.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    };
    let cell = (480.0 / k as f64).clamp(4.0, 40.0);
    let (left, top) = (40.0, 40.0);
    let side = cell * k as f64;
    let (w, h) = (left + side + 20.0, top + side + 40.0);
    let mut out = String::new();
    svg_open(&mut out, w, h);
    let _ = writeln!(out, "<g class=\"cells\">");
    for i in 0..k {
        for j in 0..k {
            let t = if hi > lo {
                ((matrix.get(i, j) - lo) / (hi - lo)).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let _ = writeln!(
                out,
                "<rect x=\"{}\" y=\"{}\" width=\"{c}\" height=\"{c}\" fill=\"{}\"/>",
                num(left + cell * j as f64),
                num(top + cell * i as f64),
                lerp_color(t),
                c = num(cell)
            );
        }
    }
    let _ = writeln!(out, "</g>\n<g class=\"ticks\" font-size=\"8\" text-anchor=\"middle\">");
    for i in 0..k {
        let mid = cell * i as f64 + cell / 2.0;
        let _ = writeln!(
            out,
            "<text x=\"{}\" y=\"{}\">{i}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{i}</text>",
            num(left + mid),
            num(top - 4.0),
            num(left - 4.0),
            num(top + mid + 3.0)
        );
    }
    let _ = writeln!(out, "</g>");
    let _ = writeln!(
        out,
        "<text class=\"scale\" x=\"{}\" y=\"{}\">{:?} scale: min={:.6} max={:.6}</text>\n</svg>",
        num(left),
        num(top + side + 24.0),
        matrix.metric,
        lo,
        hi
    );
    out
}

/// One marker per client at its 2-D embedding, colored by cluster label;
/// the anchor pair, when given, is annotated.
pub fn render_embedding_scatter(
    points: &[[f64; 2]],
    labels: &[usize],
    anchors: Option<(usize, usize)>,
) -> Result<String> {
    if points.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} points but {} labels",
            points.len(),
            labels.len()
        )));
    }
    let (w, h) = (520.0, 520.0);
    let (left, top, plot) = (60.0, 30.0, 420.0);
    let range = |axis: usize| {
        let lo = points.iter().map(|p| p[axis]).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(|p| p[axis]).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() || hi <= lo {
            let c = if lo.is_finite() { lo } else { 0.0 };
            (c - 0.5, c + 0.5)
        } else {
            let pad = (hi - lo) * 0.05;
            (lo - pad, hi + pad)
        }
    };
    let (x0, x1) = range(0);
    let (y0, y1) = range(1);
    let sx = |v: f64| left + plot * (v - x0) / (x1 - x0);
    let sy = |v: f64| top + plot * (1.0 - (v - y0) / (y1 - y0));

    let mut out = String::new();
    svg_open(&mut out, w, h);
    let _ = writeln!(
        out,
        "<rect x=\"{l}\" y=\"{t}\" width=\"{p}\" height=\"{p}\" fill=\"none\" stroke=\"#000000\"/>",
        l = num(left),
        t = num(top),
        p = num(plot)
    );
    let _ = writeln!(
        out,
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">similarity to α</text>\n<text x=\"16\" y=\"{yy}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {yy})\">similarity to β</text>",
        num(left + plot / 2.0),
        num(top + plot + 36.0),
        yy = num(top + plot / 2.0)
    );
    let _ = writeln!(
        out,
        "<g class=\"ticks\" font-size=\"10\"><text x=\"{}\" y=\"{}\">{:.4}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.4}</text></g>",
        num(left),
        num(top + plot + 14.0),
        x0,
        num(left + plot),
        num(top + plot + 14.0),
        x1,
        num(left - 4.0),
        num(top + plot),
        y0,
        num(left - 4.0),
        num(top + 10.0),
        y1
    );
    let _ = writeln!(out, "<g class=\"markers\">");
    for (i, (p, &label)) in points.iter().zip(labels).enumerate() {
        let _ = writeln!(
            out,
            "<circle class=\"marker\" data-client=\"{i}\" data-cluster=\"{label}\" cx=\"{}\" cy=\"{}\" r=\"5\" fill=\"{}\" fill-opacity=\"0.8\"/>",
            num(sx(p[0])),
            num(sy(p[1])),
            color(label)
        );
    }
    let _ = writeln!(out, "</g>");
    if let Some((alpha, beta)) = anchors {
        for (name, id) in [("α", alpha), ("β", beta)] {
            if let Some(p) = points.get(id) {
                let _ = writeln!(
                    out,
                    "<text class=\"anchor\" x=\"{}\" y=\"{}\" font-weight=\"bold\">{name}={id}</text>",
                    num(sx(p[0]) + 7.0),
                    num(sy(p[1]) - 7.0)
                );
            }
        }
    }
    let _ = writeln!(out, "</svg>");
    Ok(out)
}

/// Scatter of a fitted clustering in the lowest-pair embedding of `matrix`,
/// whatever space the clustering itself used.
pub fn render_clusters(matrix: &SimilarityMatrix, model: &ClusterModel) -> Result<String> {
    let (alpha, beta) = model.anchor_pair;
    let points = embed_clients(matrix, alpha, beta);
    render_embedding_scatter(&points, &model.labels, Some(model.anchor_pair))
}

/// One row of the rounds-lasted table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    /// Dataset and model, e.g. `synthetic/mlp-32`.
    pub setup: String,
    pub low_power_fraction: f64,
    /// Median rounds lasted per strategy column; `None` when not run.
    pub cells: Vec<Option<f64>>,
}

/// Median rounds lasted by setup and low-power fraction (rows) and
/// strategy (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct RoundsTable {
    /// Strategy names (config spelling), in column order.
    pub strategies: Vec<String>,
    pub rows: Vec<TableRow>,
}

fn setup_label(h: &ExperimentHistory) -> String {
    let dataset = match h.config.dataset {
        DatasetKind::Synthetic => "synthetic",
        DatasetKind::Mnist => "mnist",
    };
    let mut model = String::from("mlp");
    for w in &h.config.hidden_layers {
        let _ = write!(model, "-{w}");
    }
    format!("{dataset}/{model}")
}

/// Key that orders fractions numerically in the row map.
fn fraction_key(f: f64) -> u64 {
    (f * 1e6).round() as u64
}

impl RoundsTable {
    pub fn from_histories<'a>(
        histories: impl IntoIterator<Item = &'a ExperimentHistory>,
    ) -> Result<Self> {
        let mut strategies = Vec::new();
        let mut cells: BTreeMap<(String, u64), (f64, BTreeMap<String, Vec<f64>>)> = BTreeMap::new();
        for h in histories {
            let name = h.config.strategy.name().to_string();
            if !strategies.contains(&name) {
                strategies.push(name.clone());
            }
            let f = h.config.low_power_fraction;
            cells
                .entry((setup_label(h), fraction_key(f)))
                .or_insert_with(|| (f, BTreeMap::new()))
                .1
                .entry(name)
                .or_default()
                .push(h.rounds_lasted as f64);
        }
        if cells.is_empty() {
            return Err(Error::InvalidInput("rounds table needs at least one history".into()));
        }
        // canonical column order
        strategies.sort_by_key(|s| {
            crate::selection::Strategy::ALL
                .iter()
                .position(|st| st.name() == s)
                .unwrap_or(usize::MAX)
        });
        let rows = cells
            .into_iter()
            .map(|((setup, _), (f, by_strategy))| TableRow {
                setup,
                low_power_fraction: f,
                cells: strategies
                    .iter()
                    .map(|s| by_strategy.get(s).map(|r| median(r)))
                    .collect(),
            })
            .collect();
        Ok(Self { strategies, rows })
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("setup,low_power_fraction,{}\n", self.strategies.join(","));
        for row in &self.rows {
            let cells: Vec<String> = row
                .cells
                .iter()
                .map(|c| c.map_or(String::new(), |v| v.to_string()))
                .collect();
            let _ = writeln!(out, "{},{},{}", row.setup, row.low_power_fraction, cells.join(","));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Format {
            field: format!("rounds table line {line}"),
            reason: why.to_string(),
        };
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad(1, "empty"))?.split(',').collect();
        if header.len() < 3 || header[0] != "setup" || header[1] != "low_power_fraction" {
            return Err(bad(1, "expected header setup,low_power_fraction,<strategies>"));
        }
        let strategies: Vec<String> = header[2..].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for (i, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != header.len() {
                return Err(bad(i + 2, "wrong number of fields"));
            }
            let low_power_fraction = fields[1]
                .parse()
                .map_err(|_| bad(i + 2, "low_power_fraction is not a number"))?;
            let cells = fields[2..]
                .iter()
                .map(|c| {
                    if c.is_empty() {
                        Ok(None)
                    } else {
                        c.parse().map(Some).map_err(|_| bad(i + 2, "cell is not a number"))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(TableRow {
                setup: fields[0].to_string(),
                low_power_fraction,
                cells,
            });
        }
        Ok(Self { strategies, rows })
    }

    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let display = |s: &str| {
            crate::selection::Strategy::ALL
                .iter()
                .find(|st| st.name() == s)
                .map_or(s.to_string(), |st| st.display_name().to_string())
        };
        let mut grid: Vec<Vec<String>> = vec![std::iter::once("setup".to_string())
            .chain(std::iter::once("low-power".to_string()))
            .chain(self.strategies.iter().map(|s| display(s)))
            .collect()];
        for row in &self.rows {
            grid.push(
                [
                    row.setup.clone(),
                    format!("{}%", (row.low_power_fraction * 100.0).round()),
                ]
                .into_iter()
                .chain(row.cells.iter().map(|c| c.map_or("-".into(), |v| v.to_string())))
                .collect(),
            );
        }
        let widths: Vec<usize> = (0..grid[0].len())
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

/// Rounds-lasted table of every history in the set, as text.
pub fn render_rounds_table(set: &ComparisonSet) -> Result<String> {
    Ok(RoundsTable::from_histories(set.histories())?.to_text())
}
