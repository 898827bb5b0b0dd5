//! Run telemetry: line-delimited JSON metrics with a canonical field order
//! and a versioned header line, plus deterministic SVG curve rendering.

use serde::{Deserialize, Serialize};
use std::io::Write as IoWrite;
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("non-finite value in field {field}")]
    NonFinite { field: &'static str },
    #[error("step {step} does not increase over previous step {previous}")]
    StepOrder { step: u64, previous: u64 },
    #[error("log has schema_version {found}, expected {SCHEMA_VERSION}")]
    SchemaVersion { found: u32 },
    #[error("unparseable log line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("no data")]
    NoData,
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

/// One row of the training log. Serialization follows declaration order,
/// which is the canonical field order of the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub mean_intrinsic_return: f64,
    /// nats per token
    pub mean_sc_text: f64,
    /// nats per token
    pub mean_sc_image: f64,
    pub mean_oracle_reward: f64,
    /// nats
    pub mean_color_entropy: f64,
    pub clip_fraction: f64,
    /// nats
    pub mean_kl_to_ref: f64,
    pub grad_norm: f64,
    pub degenerate_group_fraction: f64,
    pub wall_ms: u64,
}

/// The real-valued metric fields, in canonical order, with their units.
pub const METRIC_FIELDS: [(&str, &str); 10] = [
    ("mean_intrinsic_return", ""),
    ("mean_sc_text", "nats/token"),
    ("mean_sc_image", "nats/token"),
    ("mean_oracle_reward", ""),
    ("mean_color_entropy", "nats"),
    ("clip_fraction", ""),
    ("mean_kl_to_ref", "nats"),
    ("grad_norm", ""),
    ("degenerate_group_fraction", ""),
    ("wall_ms", "ms"),
];

impl MetricsRecord {
    pub fn validate(&self) -> Result<(), TelemetryError> {
        let checks: [(&'static str, f64); 9] = [
            ("mean_intrinsic_return", self.mean_intrinsic_return),
            ("mean_sc_text", self.mean_sc_text),
            ("mean_sc_image", self.mean_sc_image),
            ("mean_oracle_reward", self.mean_oracle_reward),
            ("mean_color_entropy", self.mean_color_entropy),
            ("clip_fraction", self.clip_fraction),
            ("mean_kl_to_ref", self.mean_kl_to_ref),
            ("grad_norm", self.grad_norm),
            ("degenerate_group_fraction", self.degenerate_group_fraction),
        ];
        for (field, value) in checks {
            if !value.is_finite() {
                return Err(TelemetryError::NonFinite { field });
            }
        }
        Ok(())
    }

    /// Field value by schema name. Integer fields are widened to f64 for
    /// plotting.
    pub fn field(&self, name: &str) -> f64 {
        match name {
            "mean_intrinsic_return" => self.mean_intrinsic_return,
            "mean_sc_text" => self.mean_sc_text,
            "mean_sc_image" => self.mean_sc_image,
            "mean_oracle_reward" => self.mean_oracle_reward,
            "mean_color_entropy" => self.mean_color_entropy,
            "clip_fraction" => self.clip_fraction,
            "mean_kl_to_ref" => self.mean_kl_to_ref,
            "grad_norm" => self.grad_norm,
            "degenerate_group_fraction" => self.degenerate_group_fraction,
            "wall_ms" => self.wall_ms as f64,
            _ => panic!("unknown metric field {name}"),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    schema_version: u32,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TelemetryError + '_ {
    move |source| TelemetryError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Appending writer for one metrics log. Creating it writes the header line.
pub struct MetricsWriter {
    file: std::fs::File,
    path: PathBuf,
    last_step: Option<u64>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, TelemetryError> {
        let mut file = std::fs::File::create(path).map_err(io_err(path))?;
        let header = serde_json::to_string(&LogHeader {
            schema_version: SCHEMA_VERSION,
        })
        .expect("serializable header");
        writeln!(file, "{header}").map_err(io_err(path))?;
        file.sync_data().map_err(io_err(path))?;
        Ok(MetricsWriter {
            file,
            path: path.to_path_buf(),
            last_step: None,
        })
    }

    pub fn append(&mut self, record: &MetricsRecord) -> Result<(), TelemetryError> {
        record.validate()?;
        if let Some(previous) = self.last_step {
            if record.step <= previous {
                return Err(TelemetryError::StepOrder {
                    step: record.step,
                    previous,
                });
            }
        }
        let line = serde_json::to_string(record).expect("serializable record");
        writeln!(self.file, "{line}").map_err(io_err(&self.path))?;
        self.file.sync_data().map_err(io_err(&self.path))?;
        self.last_step = Some(record.step);
        Ok(())
    }
}

/// Append one record to an existing log (opened, written, synced, closed).
pub fn append_record(record: &MetricsRecord, log_path: &Path) -> Result<(), TelemetryError> {
    record.validate()?;
    let mut file = std::fs::OpenOptions::new()
        .append(true)
        .open(log_path)
        .map_err(io_err(log_path))?;
    let line = serde_json::to_string(record).expect("serializable record");
    writeln!(file, "{line}").map_err(io_err(log_path))?;
    file.sync_data().map_err(io_err(log_path))
}

/// Parse a metrics log back into records, checking the header and step order.
pub fn parse_log(log_path: &Path) -> Result<Vec<MetricsRecord>, TelemetryError> {
    let text = std::fs::read_to_string(log_path).map_err(io_err(log_path))?;
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(TelemetryError::NoData)?;
    let header: LogHeader =
        serde_json::from_str(header_line).map_err(|e| TelemetryError::Parse {
            line: 1,
            message: e.to_string(),
        })?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(TelemetryError::SchemaVersion {
            found: header.schema_version,
        });
    }
    let mut records = Vec::new();
    let mut last_step: Option<u64> = None;
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let record: MetricsRecord =
            serde_json::from_str(line).map_err(|e| TelemetryError::Parse {
                line: idx + 1,
                message: e.to_string(),
            })?;
        if let Some(previous) = last_step {
            if record.step <= previous {
                return Err(TelemetryError::StepOrder {
                    step: record.step,
                    previous,
                });
            }
        }
        last_step = Some(record.step);
        records.push(record);
    }
    Ok(records)
}

const SVG_WIDTH: f64 = 640.0;
const SVG_HEIGHT: f64 = 400.0;
const MARGIN_LEFT: f64 = 70.0;
const MARGIN_RIGHT: f64 = 20.0;
const MARGIN_TOP: f64 = 40.0;
const MARGIN_BOTTOM: f64 = 50.0;

fn fmt(x: f64) -> String {
    // fixed 6-decimal coordinates keep the output byte-stable
    format!("{x:.6}")
}

/// Render one metric series as a self-contained SVG line chart.
pub fn render_curve_svg(records: &[MetricsRecord], field: &str, unit: &str) -> String {
    let xs: Vec<f64> = records.iter().map(|r| r.step as f64).collect();
    let ys: Vec<f64> = records.iter().map(|r| r.field(field)).collect();
    let (x_min, x_max) = (
        xs.iter().cloned().fold(f64::INFINITY, f64::min),
        xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let (y_min, y_max) = (
        ys.iter().cloned().fold(f64::INFINITY, f64::min),
        ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
    );
    let x_span = if x_max > x_min { x_max - x_min } else { 1.0 };
    let y_span = if y_max > y_min { y_max - y_min } else { 1.0 };
    let plot_w = SVG_WIDTH - MARGIN_LEFT - MARGIN_RIGHT;
    let plot_h = SVG_HEIGHT - MARGIN_TOP - MARGIN_BOTTOM;
    let px = |x: f64| MARGIN_LEFT + (x - x_min) / x_span * plot_w;
    let py = |y: f64| MARGIN_TOP + plot_h - (y - y_min) / y_span * plot_h;

    let points: Vec<String> = xs
        .iter()
        .zip(&ys)
        .map(|(&x, &y)| format!("{},{}", fmt(px(x)), fmt(py(y))))
        .collect();

    let title = if unit.is_empty() {
        field.to_string()
    } else {
        format!("{field} ({unit})")
    };
    let axis_y = MARGIN_TOP + plot_h;
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SVG_WIDTH}\" height=\"{SVG_HEIGHT}\" viewBox=\"0 0 {SVG_WIDTH} {SVG_HEIGHT}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        fmt(SVG_WIDTH / 2.0)
    ));
    svg.push_str(&format!(
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{l}\" y1=\"{t}\" x2=\"{l}\" y2=\"{b}\" stroke=\"black\"/>\n",
        l = fmt(MARGIN_LEFT),
        r = fmt(SVG_WIDTH - MARGIN_RIGHT),
        t = fmt(MARGIN_TOP),
        b = fmt(axis_y),
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">step</text>\n",
        fmt(MARGIN_LEFT + plot_w / 2.0),
        fmt(SVG_HEIGHT - 12.0)
    ));
    // axis extent labels
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{x_min}</text>\n",
        fmt(MARGIN_LEFT),
        fmt(axis_y + 16.0)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"middle\">{x_max}</text>\n",
        fmt(SVG_WIDTH - MARGIN_RIGHT),
        fmt(axis_y + 16.0)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{y_min}</text>\n",
        fmt(MARGIN_LEFT - 6.0),
        fmt(axis_y)
    ));
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{y_max}</text>\n",
        fmt(MARGIN_LEFT - 6.0),
        fmt(MARGIN_TOP + 4.0)
    ));
    svg.push_str(&format!(
        "<polyline fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\" points=\"{}\"/>\n",
        points.join(" ")
    ));
    svg.push_str("</svg>\n");
    svg
}

/// Render one SVG per metric field into `out_dir`, returning the paths.
pub fn render_curves(log_path: &Path, out_dir: &Path) -> Result<Vec<PathBuf>, TelemetryError> {
    let records = parse_log(log_path)?;
    if records.is_empty() {
        return Err(TelemetryError::NoData);
    }
    std::fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut paths = Vec::new();
    for (field, unit) in METRIC_FIELDS {
        let svg = render_curve_svg(&records, field, unit);
        let path = out_dir.join(format!("{field}.svg"));
        std::fs::write(&path, svg).map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}
