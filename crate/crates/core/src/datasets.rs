//! STS benchmark loading.
//!
//! Two on-disk layouts are understood:
//!
//! * the SentEval `data/downstream` tree (`STS/STS1x-en-test/STS.{input,gs}.*.txt`,
//!   `STS/STSBenchmark/sts-{dev,test}.csv`, `SICK/SICK_test_annotated.txt`);
//! * the normalized layout, `<root>/<BENCHMARK>/<subset>.tsv` with lines
//!   `sentence1<TAB>sentence2<TAB>gold`, which `peb import` produces.
//!
//! Pairs with a blank gold score are dropped and counted. Text is passed
//! through byte for byte apart from trimming the line ending.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

/// Environment variable naming the normalized dataset root.
pub const ENV_DATA_DIR: &str = "PEB_DATA_DIR";
pub const GOLD_MIN: f64 = 0.0;
pub const GOLD_MAX: f64 = 5.0;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: {reason}")]
    MalformedLine { file: PathBuf, line: usize, reason: String },
    #[error("{file}:{line}: gold score {value} outside [0, 5]")]
    GoldOutOfRange { file: PathBuf, line: usize, value: f64 },
    #[error("threshold {0} outside [0, 5]")]
    ThresholdOutOfRange(f64),
    #[error("benchmark {0} has no pairs")]
    EmptyBenchmark(BenchmarkName),
    #[error("unknown benchmark `{0}`")]
    UnknownBenchmark(String),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            DatasetError::MissingFile(path.to_path_buf())
        } else {
            DatasetError::Io {
                path: path.to_path_buf(),
                source,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum BenchmarkName {
    #[serde(rename = "STS12")]
    Sts12,
    #[serde(rename = "STS13")]
    Sts13,
    #[serde(rename = "STS14")]
    Sts14,
    #[serde(rename = "STS15")]
    Sts15,
    #[serde(rename = "STS16")]
    Sts16,
    #[serde(rename = "STSB-dev")]
    StsbDev,
    #[serde(rename = "STSB-test")]
    StsbTest,
    #[serde(rename = "SICKR")]
    SickR,
}

impl BenchmarkName {
    /// The seven benchmarks averaged in evaluation reports, in table order.
    pub const SEVEN: [BenchmarkName; 7] = [
        BenchmarkName::Sts12,
        BenchmarkName::Sts13,
        BenchmarkName::Sts14,
        BenchmarkName::Sts15,
        BenchmarkName::Sts16,
        BenchmarkName::StsbTest,
        BenchmarkName::SickR,
    ];

    pub const ALL: [BenchmarkName; 8] = [
        BenchmarkName::Sts12,
        BenchmarkName::Sts13,
        BenchmarkName::Sts14,
        BenchmarkName::Sts15,
        BenchmarkName::Sts16,
        BenchmarkName::StsbDev,
        BenchmarkName::StsbTest,
        BenchmarkName::SickR,
    ];

    /// Directory name in the normalized layout.
    pub fn as_str(self) -> &'static str {
        match self {
            BenchmarkName::Sts12 => "STS12",
            BenchmarkName::Sts13 => "STS13",
            BenchmarkName::Sts14 => "STS14",
            BenchmarkName::Sts15 => "STS15",
            BenchmarkName::Sts16 => "STS16",
            BenchmarkName::StsbDev => "STSB-dev",
            BenchmarkName::StsbTest => "STSB-test",
            BenchmarkName::SickR => "SICKR",
        }
    }

    /// Column header in report tables.
    pub fn column(self) -> &'static str {
        match self {
            BenchmarkName::Sts12 => "STS-12",
            BenchmarkName::Sts13 => "STS-13",
            BenchmarkName::Sts14 => "STS-14",
            BenchmarkName::Sts15 => "STS-15",
            BenchmarkName::Sts16 => "STS-16",
            BenchmarkName::StsbDev => "STS-B dev",
            BenchmarkName::StsbTest => "STS-B",
            BenchmarkName::SickR => "SICK-R",
        }
    }
}

impl fmt::Display for BenchmarkName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for BenchmarkName {
    type Err = DatasetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        Ok(match key.as_str() {
            "sts12" => BenchmarkName::Sts12,
            "sts13" => BenchmarkName::Sts13,
            "sts14" => BenchmarkName::Sts14,
            "sts15" => BenchmarkName::Sts15,
            "sts16" => BenchmarkName::Sts16,
            "stsbdev" => BenchmarkName::StsbDev,
            "stsbtest" | "stsb" => BenchmarkName::StsbTest,
            "sickr" | "sick" => BenchmarkName::SickR,
            _ => return Err(DatasetError::UnknownBenchmark(s.to_string())),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentencePair {
    pub sentence1: String,
    pub sentence2: String,
    pub gold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Subset {
    pub name: String,
    pub pairs: Vec<SentencePair>,
    /// Pairs skipped because their gold score was blank.
    pub dropped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Benchmark {
    pub name: BenchmarkName,
    pub subsets: Vec<Subset>,
}

impl Benchmark {
    pub fn len(&self) -> usize {
        self.subsets.iter().map(|s| s.pairs.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dropped(&self) -> usize {
        self.subsets.iter().map(|s| s.dropped).sum()
    }

    pub fn pairs(&self) -> impl Iterator<Item = &SentencePair> {
        self.subsets.iter().flat_map(|s| s.pairs.iter())
    }

    fn checked(self) -> Result<Self, DatasetError> {
        if self.subsets.is_empty() || self.subsets.iter().any(|s| s.pairs.is_empty()) {
            return Err(DatasetError::EmptyBenchmark(self.name));
        }
        Ok(self)
    }
}

/// Pairs with `gold >= threshold`, in their original order.
pub fn filter_similar(pairs: &[SentencePair], threshold: f64) -> Result<Vec<SentencePair>, DatasetError> {
    if !(GOLD_MIN..=GOLD_MAX).contains(&threshold) {
        return Err(DatasetError::ThresholdOutOfRange(threshold));
    }
    Ok(pairs.iter().filter(|p| p.gold >= threshold).cloned().collect())
}

fn read_lines(path: &Path) -> Result<Vec<String>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
        .collect())
}

fn parse_gold(raw: &str, file: &Path, line: usize) -> Result<Option<f64>, DatasetError> {
    let raw = raw.trim();
    if raw.is_empty() {
        return Ok(None);
    }
    let value: f64 = raw.parse().map_err(|_| DatasetError::MalformedLine {
        file: file.to_path_buf(),
        line,
        reason: format!("gold score `{raw}` is not a number"),
    })?;
    if !(GOLD_MIN..=GOLD_MAX).contains(&value) {
        return Err(DatasetError::GoldOutOfRange {
            file: file.to_path_buf(),
            line,
            value,
        });
    }
    Ok(Some(value))
}

fn make_pair(s1: &str, s2: &str, gold: f64, file: &Path, line: usize) -> Result<SentencePair, DatasetError> {
    if s1.trim().is_empty() || s2.trim().is_empty() {
        return Err(DatasetError::MalformedLine {
            file: file.to_path_buf(),
            line,
            reason: "empty sentence".into(),
        });
    }
    Ok(SentencePair {
        sentence1: s1.to_string(),
        sentence2: s2.to_string(),
        gold,
    })
}

fn too_few_columns(file: &Path, line: usize, needed: usize, got: usize) -> DatasetError {
    DatasetError::MalformedLine {
        file: file.to_path_buf(),
        line,
        reason: format!("expected at least {needed} tab-separated columns, found {got}"),
    }
}

/// Loads one benchmark from a SentEval `data/downstream` directory.
pub fn load_senteval_sts(root: &Path, name: BenchmarkName) -> Result<Benchmark, DatasetError> {
    let subsets = match name {
        BenchmarkName::Sts12 => load_sts_year(&root.join("STS/STS12-en-test"))?,
        BenchmarkName::Sts13 => load_sts_year(&root.join("STS/STS13-en-test"))?,
        BenchmarkName::Sts14 => load_sts_year(&root.join("STS/STS14-en-test"))?,
        BenchmarkName::Sts15 => load_sts_year(&root.join("STS/STS15-en-test"))?,
        BenchmarkName::Sts16 => load_sts_year(&root.join("STS/STS16-en-test"))?,
        BenchmarkName::StsbDev => vec![load_stsb(&root.join("STS/STSBenchmark/sts-dev.csv"), "dev")?],
        BenchmarkName::StsbTest => vec![load_stsb(&root.join("STS/STSBenchmark/sts-test.csv"), "test")?],
        BenchmarkName::SickR => vec![load_sick(&root.join("SICK/SICK_test_annotated.txt"))?],
    };
    Benchmark { name, subsets }.checked()
}

/// `STS.input.<subset>.txt` / `STS.gs.<subset>.txt` pairs, subsets sorted by name.
fn load_sts_year(dir: &Path) -> Result<Vec<Subset>, DatasetError> {
    let entries = fs::read_dir(dir).map_err(io_err(dir))?;
    let mut names: Vec<String> = entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let file = e.file_name().into_string().ok()?;
            Some(file.strip_prefix("STS.input.")?.strip_suffix(".txt")?.to_string())
        })
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(DatasetError::MissingFile(dir.join("STS.input.*.txt")));
    }
    names
        .into_iter()
        .map(|subset| {
            let input = dir.join(format!("STS.input.{subset}.txt"));
            let gs = dir.join(format!("STS.gs.{subset}.txt"));
            let inputs = read_lines(&input)?;
            let golds = read_lines(&gs)?;
            if inputs.len() != golds.len() {
                return Err(DatasetError::MalformedLine {
                    file: gs.clone(),
                    line: golds.len().min(inputs.len()) + 1,
                    reason: format!("{} gold lines for {} input lines", golds.len(), inputs.len()),
                });
            }
            let mut pairs = Vec::new();
            let mut dropped = 0;
            for (i, (text, gold)) in inputs.iter().zip(&golds).enumerate() {
                let Some(gold) = parse_gold(gold, &gs, i + 1)? else {
                    dropped += 1;
                    continue;
                };
                let cols: Vec<&str> = text.split('\t').collect();
                if cols.len() < 2 {
                    return Err(too_few_columns(&input, i + 1, 2, cols.len()));
                }
                pairs.push(make_pair(cols[0], cols[1], gold, &input, i + 1)?);
            }
            Ok(Subset {
                name: subset,
                pairs,
                dropped,
            })
        })
        .collect()
}

/// STS Benchmark csv: genre, file, year, id, score, sentence1, sentence2[, ...].
fn load_stsb(path: &Path, subset: &str) -> Result<Subset, DatasetError> {
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 7 {
            return Err(too_few_columns(path, i + 1, 7, cols.len()));
        }
        match parse_gold(cols[4], path, i + 1)? {
            Some(gold) => pairs.push(make_pair(cols[5], cols[6], gold, path, i + 1)?),
            None => dropped += 1,
        }
    }
    Ok(Subset {
        name: subset.to_string(),
        pairs,
        dropped,
    })
}

/// SICK: header, then pair_ID, sentence_A, sentence_B, relatedness_score, ...
fn load_sick(path: &Path) -> Result<Subset, DatasetError> {
    let mut pairs = Vec::new();
    let mut dropped = 0;
    for (i, line) in read_lines(path)?.iter().enumerate() {
        if (i == 0 && line.starts_with("pair_ID")) || line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 4 {
            return Err(too_few_columns(path, i + 1, 4, cols.len()));
        }
        match parse_gold(cols[3], path, i + 1)? {
            Some(gold) => pairs.push(make_pair(cols[1], cols[2], gold, path, i + 1)?),
            None => dropped += 1,
        }
    }
    Ok(Subset {
        name: "test".into(),
        pairs,
        dropped,
    })
}

/// Loads `<root>/<NAME>/*.tsv`, subsets sorted by file name.
pub fn load_normalized(root: &Path, name: BenchmarkName) -> Result<Benchmark, DatasetError> {
    let dir = root.join(name.as_str());
    let entries = fs::read_dir(&dir).map_err(io_err(&dir))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "tsv"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(DatasetError::MissingFile(dir.join("*.tsv")));
    }
    let subsets = files
        .iter()
        .map(|path| {
            let mut pairs = Vec::new();
            let mut dropped = 0;
            for (i, line) in read_lines(path)?.iter().enumerate() {
                if line.is_empty() {
                    continue;
                }
                let cols: Vec<&str> = line.split('\t').collect();
                if cols.len() != 3 {
                    return Err(DatasetError::MalformedLine {
                        file: path.clone(),
                        line: i + 1,
                        reason: format!("expected 3 tab-separated columns, found {}", cols.len()),
                    });
                }
                match parse_gold(cols[2], path, i + 1)? {
                    Some(gold) => pairs.push(make_pair(cols[0], cols[1], gold, path, i + 1)?),
                    None => dropped += 1,
                }
            }
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok(Subset { name, pairs, dropped })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Benchmark { name, subsets }.checked()
}

/// Writes a benchmark in the normalized layout, replacing existing subset files.
pub fn write_normalized(root: &Path, benchmark: &Benchmark) -> Result<(), DatasetError> {
    let dir = root.join(benchmark.name.as_str());
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    for subset in &benchmark.subsets {
        let path = dir.join(format!("{}.tsv", subset.name));
        let mut out = Vec::new();
        for p in &subset.pairs {
            for s in [&p.sentence1, &p.sentence2] {
                if s.contains(['\t', '\n']) {
                    return Err(DatasetError::MalformedLine {
                        file: path.clone(),
                        line: 0,
                        reason: "sentence contains a tab or newline".into(),
                    });
                }
            }
            writeln!(out, "{}\t{}\t{}", p.sentence1, p.sentence2, p.gold).expect("write to Vec");
        }
        fs::write(&path, out).map_err(io_err(&path))?;
    }
    Ok(())
}

/// Outcome of importing one benchmark.
#[derive(Debug)]
pub struct ImportOutcome {
    pub name: BenchmarkName,
    pub result: Result<(usize, usize), DatasetError>,
}

/// Converts every benchmark found under a SentEval tree into the normalized
/// layout. Benchmarks whose files are absent are reported, not fatal.
pub fn import_senteval(src: &Path, dst: &Path) -> Vec<ImportOutcome> {
    BenchmarkName::ALL
        .into_iter()
        .map(|name| {
            let result =
                load_senteval_sts(src, name).and_then(|b| write_normalized(dst, &b).map(|()| (b.len(), b.dropped())));
            ImportOutcome { name, result }
        })
        .collect()
}
