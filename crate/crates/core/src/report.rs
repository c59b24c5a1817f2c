//! Exporters: metric tables, Pareto documents, SVG scatter plots and run
//! manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::{axis, AxisRegistry, Direction, GroupId, MetricAxis, MetricPoint, ModelError};
use crate::pareto::{self, ParetoError, ParetoResult};

pub const ENGINE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Pareto(#[from] ParetoError),
    #[error("no objective pair has all of its axes registered")]
    NoPairs,
    #[error("pair `{0}` is not in the pareto document")]
    UnknownPair(String),
}

impl ReportError {
    pub fn is_io(&self) -> bool {
        matches!(self, Self::Io { .. })
    }
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> ReportError + '_ {
    move |source| ReportError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), ReportError> {
    fs::write(path, contents).map_err(io_err(path))
}

pub fn read_file(path: &Path) -> Result<String, ReportError> {
    fs::read_to_string(path).map_err(io_err(path))
}

/// 17 significant digits, enough to round-trip any binary64.
pub fn format_value(v: f64) -> String {
    format!("{v:.16e}")
}

pub const CSV_HEADER: [&str; 7] = [
    "config_id",
    "group_id",
    "axis",
    "direction",
    "value",
    "status",
    "note",
];

/// One row per config, group and registered axis.
pub fn metrics_csv(points: &[MetricPoint], registry: &AxisRegistry) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let row_err = "writing to memory cannot fail";
    w.write_record(CSV_HEADER).expect(row_err);
    for p in points {
        for a in registry.axes() {
            let (value, status, note) = match p.scores.get(&a.name) {
                Some(v) => match p.notes.get(&a.name) {
                    Some(n) => (format_value(*v), "partial", n.clone()),
                    None => (format_value(*v), "ok", String::new()),
                },
                None => (
                    String::new(),
                    "missing",
                    p.missing
                        .get(&a.name)
                        .cloned()
                        .unwrap_or_else(|| "not computed".into()),
                ),
            };
            w.write_record([
                p.config_id.as_str(),
                p.group_id.as_str(),
                &a.name,
                &a.direction.to_string(),
                &value,
                status,
                &note,
            ])
            .expect(row_err);
        }
    }
    String::from_utf8(w.into_inner().expect(row_err)).expect("csv output is utf-8")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub engine_version: String,
    pub axes: Vec<MetricAxis>,
    pub points: Vec<MetricPoint>,
}

impl MetricsDoc {
    pub fn new(registry: &AxisRegistry, points: Vec<MetricPoint>) -> Self {
        Self {
            engine_version: ENGINE_VERSION.to_string(),
            axes: registry.axes().to_vec(),
            points,
        }
    }

    pub fn registry(&self) -> Result<AxisRegistry, ReportError> {
        Ok(AxisRegistry::new(self.axes.clone())?)
    }

    pub fn read(path: &Path) -> Result<Self, ReportError> {
        serde_json::from_str(&read_file(path)?).map_err(|e| ReportError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("metrics serialize");
        s.push('\n');
        s
    }
}

/// Axis chosen to stand for each objective.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectiveAxes {
    pub consistency: String,
    pub diversity: String,
    pub realism: String,
}

impl Default for ObjectiveAxes {
    fn default() -> Self {
        Self {
            consistency: axis::DSG_CONSISTENCY.into(),
            diversity: axis::COND_DIVERSITY.into(),
            realism: axis::COND_REALISM.into(),
        }
    }
}

impl ObjectiveAxes {
    /// The three bi-objective pairs followed by the full triple.
    pub fn canonical(&self) -> Vec<(String, Vec<String>)> {
        let (c, d, r) = (&self.consistency, &self.diversity, &self.realism);
        vec![
            ("consistency-diversity".into(), vec![c.clone(), d.clone()]),
            ("realism-diversity".into(), vec![r.clone(), d.clone()]),
            ("consistency-realism".into(), vec![c.clone(), r.clone()]),
            (
                "consistency-diversity-realism".into(),
                vec![c.clone(), d.clone(), r.clone()],
            ),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFronts {
    pub name: String,
    pub axes: Vec<String>,
    pub groups: BTreeMap<GroupId, ParetoResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoDoc {
    pub axes: Vec<MetricAxis>,
    pub fronts: Vec<PairFronts>,
    /// Pairs left out because an axis is not registered.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub skipped: Vec<String>,
}

impl ParetoDoc {
    pub fn build(metrics: &MetricsDoc, objectives: &ObjectiveAxes) -> Result<Self, ReportError> {
        let registry = metrics.registry()?;
        let mut fronts = Vec::new();
        let mut skipped = Vec::new();
        for (name, axes) in objectives.canonical() {
            if !axes.iter().all(|a| registry.contains(a)) {
                skipped.push(name);
                continue;
            }
            let refs: Vec<&str> = axes.iter().map(String::as_str).collect();
            let groups = pareto::fronts_by_group(&metrics.points, &refs, &registry)?;
            fronts.push(PairFronts { name, axes, groups });
        }
        if fronts.is_empty() {
            return Err(ReportError::NoPairs);
        }
        Ok(Self {
            axes: metrics.axes.clone(),
            fronts,
            skipped,
        })
    }

    pub fn read(path: &Path) -> Result<Self, ReportError> {
        serde_json::from_str(&read_file(path)?).map_err(|e| ReportError::Malformed {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("pareto serialize");
        s.push('\n');
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlotSpec {
    pub width: u32,
    pub height: u32,
}

impl Default for PlotSpec {
    fn default() -> Self {
        Self {
            width: 640,
            height: 480,
        }
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&apos;"),
            c => out.push(c),
        }
    }
    out
}

fn span(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        (lo.min(v), hi.max(v))
    });
    if hi > lo {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn axis_label(name: &str, dir: Direction) -> String {
    let word = match dir {
        Direction::Maximize => "higher is better",
        Direction::Minimize => "lower is better",
    };
    format!("{name} ({} {word})", dir.arrow())
}

/// Scatter of one two-axis front: every complete point as a circle, front
/// points filled, labelled and joined by a polyline in front order.
pub fn render_svg(
    result: &ParetoResult,
    points: &[MetricPoint],
    registry: &AxisRegistry,
    spec: PlotSpec,
) -> Result<String, ReportError> {
    let [xa, ya] = [&result.axes[0], &result.axes[1]];
    let dir_x = registry.direction(xa)?;
    let dir_y = registry.direction(ya)?;
    let on_front: BTreeSet<&str> = result.front.iter().map(|e| e.config_id.as_str()).collect();
    let dominated: BTreeSet<&str> = result.dominated.iter().map(|c| c.as_str()).collect();
    let mut plotted: Vec<(&MetricPoint, f64, f64)> = points
        .iter()
        .filter(|p| p.group_id == result.group_id)
        .filter(|p| on_front.contains(p.config_id.as_str()) || dominated.contains(p.config_id.as_str()))
        .filter_map(|p| Some((p, *p.scores.get(xa.as_str())?, *p.scores.get(ya.as_str())?)))
        .collect();
    plotted.sort_by(|a, b| a.0.config_id.cmp(&b.0.config_id));

    let (w, h) = (f64::from(spec.width), f64::from(spec.height));
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 60.0);
    let (x0, x1) = span(plotted.iter().map(|p| p.1));
    let (y0, y1) = span(plotted.iter().map(|p| p.2));
    let px = |v: f64| left + (v - x0) / (x1 - x0) * (w - left - right);
    let py = |v: f64| top + (1.0 - (v - y0) / (y1 - y0)) * (h - top - bottom);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{}" height="{}" viewBox="0 0 {} {}">"#,
        spec.width, spec.height, spec.width, spec.height
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#, spec.width, spec.height);
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="20" font-family="sans-serif" font-size="14" text-anchor="middle">{}</text>"#,
        w / 2.0,
        escape(&format!("group: {}", result.group_id))
    );
    let (bx, by) = (h - bottom, left);
    let _ = writeln!(
        s,
        r#"<line x1="{left:.2}" y1="{bx:.2}" x2="{:.2}" y2="{bx:.2}" stroke="black"/>"#,
        w - right
    );
    let _ = writeln!(s, r#"<line x1="{by:.2}" y1="{top:.2}" x2="{by:.2}" y2="{bx:.2}" stroke="black"/>"#);
    for (v, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="{anchor}">{v:.4}</text>"#,
            px(v),
            bx + 14.0
        );
    }
    for v in [y0, y1] {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.4}</text>"#,
            by - 4.0,
            py(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        left + (w - left - right) / 2.0,
        h - 20.0,
        escape(&axis_label(xa, dir_x))
    );
    let _ = writeln!(
        s,
        r#"<text x="20" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 20 {:.2})">{}</text>"#,
        top + (h - top - bottom) / 2.0,
        top + (h - top - bottom) / 2.0,
        escape(&axis_label(ya, dir_y))
    );

    let line: Vec<String> = result
        .front
        .iter()
        .map(|e| format!("{:.2},{:.2}", px(e.scores[xa.as_str()]), py(e.scores[ya.as_str()])))
        .collect();
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="crimson" stroke-width="1.5"/>"#,
        line.join(" ")
    );
    for (p, x, y) in &plotted {
        if on_front.contains(p.config_id.as_str()) {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="5" fill="crimson" stroke="black"/>"#,
                px(*x),
                py(*y)
            );
        } else {
            let _ = writeln!(
                s,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="none" stroke="gray"/>"#,
                px(*x),
                py(*y)
            );
        }
    }
    for e in &result.front {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10">{}</text>"#,
            px(e.scores[xa.as_str()]) + 7.0,
            py(e.scores[ya.as_str()]) - 7.0,
            escape(e.config_id.as_str())
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// File-name-safe form of an id.
pub fn file_stem(s: &str) -> String {
    s.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

pub fn sha256_file(path: &Path) -> Result<String, ReportError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

/// What a metrics run read and where it wrote.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub engine_version: String,
    pub axes: Vec<MetricAxis>,
    pub sweep: String,
    pub output_dir: String,
    pub inputs: Vec<InputDigest>,
}

impl RunManifest {
    pub fn new(registry: &AxisRegistry, sweep: &Path, output_dir: &Path) -> Self {
        Self {
            engine_version: ENGINE_VERSION.to_string(),
            axes: registry.axes().to_vec(),
            sweep: sweep.display().to_string(),
            output_dir: output_dir.display().to_string(),
            inputs: Vec::new(),
        }
    }

    pub fn add_input(&mut self, role: &str, path: &Path) -> Result<(), ReportError> {
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    /// Inputs whose current digest differs from the recorded one.
    pub fn stale_inputs(&self) -> Result<Vec<&InputDigest>, ReportError> {
        let mut stale = Vec::new();
        for i in &self.inputs {
            if sha256_file(Path::new(&i.path))? != i.sha256 {
                stale.push(i);
            }
        }
        Ok(stale)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialize");
        s.push('\n');
        s
    }
}
