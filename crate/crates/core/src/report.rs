//! Report types and their markdown / CSV / JSON renderings.
//!
//! Every rendering is a pure function of the report value, and reports carry
//! no wall-clock data unless a timestamp was set explicitly.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::Serialize;

use crate::datasets::BenchmarkName;
use crate::error::{Error, ErrorKind};
use crate::eval::Aggregation;
use crate::pooling::PoolingRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Markdown,
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(OutputFormat::Markdown),
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::Config(format!("unknown output format `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportMetadata {
    pub tool: String,
    pub model_id: String,
    pub backend_fingerprint: String,
    pub aggregation: Aggregation,
    pub benchmarks: Vec<BenchmarkName>,
    pub config_digest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generated_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellStatus {
    Ok,
    Failed { kind: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SubsetScore {
    pub name: String,
    pub n: usize,
    pub dropped: usize,
    /// `None` when the subset is too small or constant to rank.
    pub spearman_x100: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkCell {
    pub benchmark: BenchmarkName,
    #[serde(flatten)]
    pub status: CellStatus,
    pub spearman_x100: Option<f64>,
    pub pearson_x100: Option<f64>,
    pub n: usize,
    pub dropped: usize,
    pub subsets: Vec<SubsetScore>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TemplateRow {
    pub template_id: String,
    pub display_name: String,
    pub layer: i32,
    pub rule: PoolingRule,
    pub normalize: bool,
    pub cells: Vec<BenchmarkCell>,
    /// Mean of the cell scores at full precision; `None` if any cell failed.
    pub average_x100: Option<f64>,
    pub flags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<TemplateRow>,
}

impl EvalReport {
    pub fn failures(&self) -> impl Iterator<Item = (&TemplateRow, &BenchmarkCell)> {
        self.rows
            .iter()
            .flat_map(|r| r.cells.iter().map(move |c| (r, c)))
            .filter(|(_, c)| c.status != CellStatus::Ok)
    }

    /// Exit code implied by the first failed cell, or 0.
    pub fn exit_code(&self) -> i32 {
        self.failures().next().map_or(0, |(_, c)| match &c.status {
            CellStatus::Failed { kind, .. } => match kind.as_str() {
                "config" => ErrorKind::Config.exit_code(),
                "backend" => ErrorKind::Backend.exit_code(),
                _ => ErrorKind::Data.exit_code(),
            },
            CellStatus::Ok => 0,
        })
    }

    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Markdown => self.to_markdown(),
            OutputFormat::Csv => self.to_csv(),
            OutputFormat::Json => to_json(self),
        }
    }

    /// Columns follow the benchmark order STS-12 … SICK-R, then Avg.
    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        header(&mut out, "STS evaluation (Spearman x100)", &self.metadata);
        let columns = ordered(&self.metadata.benchmarks);
        out.push_str("| Template | Layer | Pooling | Norm |");
        for b in &columns {
            let _ = write!(out, " {} |", b.column());
        }
        out.push_str(" Avg. |\n|---|---:|---|---|");
        for _ in &columns {
            out.push_str("---:|");
        }
        out.push_str("---:|\n");
        for row in &self.rows {
            let _ = write!(
                out,
                "| {} | {} | {} | {} |",
                row.display_name,
                row.layer,
                row.rule,
                yes_no(row.normalize)
            );
            for b in &columns {
                let cell = row.cells.iter().find(|c| c.benchmark == *b);
                let _ = write!(out, " {} |", display(cell.and_then(|c| c.spearman_x100)));
            }
            let _ = writeln!(out, " {} |", display(row.average_x100));
        }
        let notes: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| {
                let failures = r.cells.iter().filter_map(move |c| match &c.status {
                    CellStatus::Failed { kind, message } => {
                        Some(format!("{} on {}: {kind} error: {message}", r.template_id, c.benchmark))
                    }
                    CellStatus::Ok => None,
                });
                let flags = r.flags.iter().map(move |f| format!("{}: {f}", r.template_id));
                failures.chain(flags)
            })
            .collect();
        let dropped: Vec<String> = ordered_cells(&self.rows)
            .filter(|c| c.dropped > 0)
            .map(|c| format!("{}: {} pairs without a gold score dropped", c.benchmark, c.dropped))
            .collect();
        if !notes.is_empty() || !dropped.is_empty() {
            out.push('\n');
            for n in notes.iter().chain(dedup(dropped).iter()) {
                let _ = writeln!(out, "- {n}");
            }
        }
        out
    }

    /// One line per (template, benchmark), plus an `avg` line per template.
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "template",
            "layer",
            "rule",
            "normalize",
            "aggregation",
            "benchmark",
            "status",
            "n",
            "spearman_x100",
            "pearson_x100",
        ])
        .expect("in-memory csv");
        for row in &self.rows {
            let common = [
                row.template_id.clone(),
                row.layer.to_string(),
                row.rule.to_string(),
                row.normalize.to_string(),
                self.metadata.aggregation.as_str().to_string(),
            ];
            for cell in &row.cells {
                let status = match &cell.status {
                    CellStatus::Ok => "ok",
                    CellStatus::Failed { .. } => "failed",
                };
                let mut rec = common.to_vec();
                rec.extend([
                    cell.benchmark.as_str().to_string(),
                    status.to_string(),
                    cell.n.to_string(),
                    csv_num(cell.spearman_x100),
                    csv_num(cell.pearson_x100),
                ]);
                w.write_record(&rec).expect("in-memory csv");
            }
            let status = if row.average_x100.is_some() { "ok" } else { "failed" };
            let mut rec = common.to_vec();
            rec.extend([
                "avg".to_string(),
                status.to_string(),
                String::new(),
                csv_num(row.average_x100),
                String::new(),
            ]);
            w.write_record(&rec).expect("in-memory csv");
        }
        String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignUniformRow {
    pub template_id: String,
    pub display_name: String,
    pub layer: i32,
    pub spearman_x100: Option<f64>,
    pub alignment: f64,
    pub uniformity: f64,
    pub sentences: usize,
    pub aligned_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignUniformReport {
    pub metadata: ReportMetadata,
    pub threshold: f64,
    pub normalized: bool,
    pub rows: Vec<AlignUniformRow>,
}

impl AlignUniformReport {
    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Markdown => {
                let mut out = String::new();
                header(&mut out, "Alignment and uniformity (STS-B test)", &self.metadata);
                let _ = writeln!(
                    out,
                    "Alignment pairs: gold >= {}; embeddings L2-normalized: {}\n",
                    self.threshold,
                    yes_no(self.normalized)
                );
                out.push_str("| Template | Layer | Avg. STS | Alignment | Uniformity |\n|---|---:|---:|---:|---:|\n");
                for r in &self.rows {
                    let _ = writeln!(
                        out,
                        "| {} | {} | {} | {:.4} | {:.4} |",
                        r.display_name,
                        r.layer,
                        display(r.spearman_x100),
                        r.alignment,
                        r.uniformity
                    );
                }
                out
            }
            OutputFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record([
                    "template",
                    "layer",
                    "avg_spearman_x100",
                    "alignment",
                    "uniformity",
                    "sentences",
                    "aligned_pairs",
                    "threshold",
                ])
                .expect("in-memory csv");
                for r in &self.rows {
                    w.write_record([
                        r.template_id.clone(),
                        r.layer.to_string(),
                        csv_num(r.spearman_x100),
                        r.alignment.to_string(),
                        r.uniformity.to_string(),
                        r.sentences.to_string(),
                        r.aligned_pairs.to_string(),
                        self.threshold.to_string(),
                    ])
                    .expect("in-memory csv");
                }
                String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
            }
            OutputFormat::Json => to_json(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mask_count: usize,
    pub eos: String,
    pub template_id: String,
    pub spearman_x100: Option<f64>,
    pub outside_sweep: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepReport {
    pub metadata: ReportMetadata,
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn render(&self, format: OutputFormat) -> String {
        match format {
            OutputFormat::Markdown => {
                let mut out = String::new();
                header(
                    &mut out,
                    "Mask template sweep (STS-B dev, Spearman x100)",
                    &self.metadata,
                );
                out.push_str("| Template | [MASK] count | EOS | STS-B dev |\n|---|---:|---|---:|\n");
                for r in &self.rows {
                    let flag = if r.outside_sweep { " (outside 1-4)" } else { "" };
                    let _ = writeln!(
                        out,
                        "| {} | {}{} | {} | {} |",
                        r.template_id,
                        r.mask_count,
                        flag,
                        r.eos,
                        display(r.spearman_x100)
                    );
                }
                let errors: Vec<&SweepRow> = self.rows.iter().filter(|r| r.error.is_some()).collect();
                if !errors.is_empty() {
                    out.push('\n');
                    for r in errors {
                        let _ = writeln!(out, "- {}: {}", r.template_id, r.error.as_deref().unwrap_or_default());
                    }
                }
                out
            }
            OutputFormat::Csv => {
                let mut w = csv::Writer::from_writer(Vec::new());
                w.write_record(["template", "mask_count", "eos", "spearman_x100", "outside_sweep"])
                    .expect("in-memory csv");
                for r in &self.rows {
                    w.write_record([
                        r.template_id.clone(),
                        r.mask_count.to_string(),
                        r.eos.clone(),
                        csv_num(r.spearman_x100),
                        r.outside_sweep.to_string(),
                    ])
                    .expect("in-memory csv");
                }
                String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf-8")
            }
            OutputFormat::Json => to_json(self),
        }
    }
}

fn header(out: &mut String, title: &str, meta: &ReportMetadata) {
    let _ = writeln!(out, "# {title}\n");
    let _ = writeln!(out, "- model: {}", meta.model_id);
    let _ = writeln!(out, "- backend: {}", meta.backend_fingerprint);
    let _ = writeln!(out, "- aggregation: {}", meta.aggregation.as_str());
    let _ = writeln!(out, "- config digest: {}", meta.config_digest);
    if let Some(t) = meta.generated_at {
        let _ = writeln!(out, "- generated at: {t}");
    }
    let _ = writeln!(out, "- tool: {}\n", meta.tool);
}

fn ordered(benchmarks: &[BenchmarkName]) -> Vec<BenchmarkName> {
    let mut v = benchmarks.to_vec();
    v.sort();
    v.dedup();
    v
}

fn ordered_cells(rows: &[TemplateRow]) -> impl Iterator<Item = &BenchmarkCell> {
    rows.iter().flat_map(|r| r.cells.iter())
}

fn dedup(mut v: Vec<String>) -> Vec<String> {
    let mut seen = std::collections::HashSet::new();
    v.retain(|s| seen.insert(s.clone()));
    v
}

fn yes_no(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Two-decimal display value; failures show as `n/a`.
pub fn display(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}"))
}

fn csv_num(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.2}")).unwrap_or_default()
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(benchmarks: Vec<BenchmarkName>) -> ReportMetadata {
        ReportMetadata {
            tool: "peb test".into(),
            model_id: "m".into(),
            backend_fingerprint: "f".into(),
            aggregation: Aggregation::All,
            benchmarks,
            config_digest: "abc".into(),
            generated_at: None,
        }
    }

    fn cell(b: BenchmarkName, s: Option<f64>) -> BenchmarkCell {
        BenchmarkCell {
            benchmark: b,
            status: if s.is_some() {
                CellStatus::Ok
            } else {
                CellStatus::Failed {
                    kind: "data".into(),
                    message: "missing".into(),
                }
            },
            spearman_x100: s,
            pearson_x100: s,
            n: 10,
            dropped: 0,
            subsets: vec![],
        }
    }

    fn row(id: &str, cells: Vec<BenchmarkCell>, avg: Option<f64>) -> TemplateRow {
        TemplateRow {
            template_id: id.into(),
            display_name: id.into(),
            layer: -1,
            rule: PoolingRule::LastToken,
            normalize: false,
            cells,
            average_x100: avg,
            flags: vec![],
        }
    }

    #[test]
    fn markdown_columns_follow_table_order() {
        let r = EvalReport {
            metadata: meta(vec![
                BenchmarkName::SickR,
                BenchmarkName::Sts12,
                BenchmarkName::StsbTest,
            ]),
            rows: vec![row(
                "a",
                vec![
                    cell(BenchmarkName::SickR, Some(1.0)),
                    cell(BenchmarkName::Sts12, Some(2.0)),
                    cell(BenchmarkName::StsbTest, Some(3.0)),
                ],
                Some(2.0),
            )],
        };
        let md = r.to_markdown();
        assert!(md.contains("| STS-12 | STS-B | SICK-R | Avg. |"), "{md}");
        assert!(md.contains("| 2.00 | 3.00 | 1.00 | 2.00 |"), "{md}");
        assert_eq!(r.exit_code(), 0);
    }

    #[test]
    fn failures_are_reported_and_set_exit_code() {
        let r = EvalReport {
            metadata: meta(vec![BenchmarkName::Sts12, BenchmarkName::Sts13]),
            rows: vec![row(
                "a",
                vec![cell(BenchmarkName::Sts12, Some(50.0)), cell(BenchmarkName::Sts13, None)],
                None,
            )],
        };
        let md = r.to_markdown();
        assert!(md.contains("| 50.00 | n/a | n/a |"), "{md}");
        assert!(md.contains("a on STS13: data error: missing"), "{md}");
        assert_eq!(r.exit_code(), 4);
        let csv = r.to_csv();
        assert!(csv.contains("a,-1,last_token,false,all,STS13,failed,10,,"), "{csv}");
        let json = r.render(OutputFormat::Json);
        assert!(json.contains("\"status\": \"failed\""), "{json}");
    }

    #[test]
    fn display_rounds_to_two_decimals() {
        assert_eq!(display(Some(12.345678)), "12.35");
        assert_eq!(display(Some(1.0 / 3.0)), "0.33");
        assert_eq!(display(None), "n/a");
    }

    #[test]
    fn formats_parse() {
        assert_eq!("md".parse::<OutputFormat>().unwrap(), OutputFormat::Markdown);
        assert_eq!("JSON".parse::<OutputFormat>().unwrap(), OutputFormat::Json);
        assert!("xml".parse::<OutputFormat>().is_err());
    }
}
