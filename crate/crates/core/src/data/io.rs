use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::records::{validate_record, CompanyRecord, MatchExample, SolutionRecord};
use super::schema::FieldSchema;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub solutions: Vec<SolutionRecord>,
    pub companies: Vec<CompanyRecord>,
    pub examples: Vec<MatchExample>,
    pub split: Split,
}

impl Dataset {
    pub fn solution(&self, id: &str) -> Option<&SolutionRecord> {
        self.solutions.iter().find(|s| s.id == id)
    }

    pub fn company(&self, id: &str) -> Option<&CompanyRecord> {
        self.companies.iter().find(|c| c.id == id)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExampleLine {
    solution_id: String,
    company_id: String,
    label: u8,
    split: Split,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Solution(SolutionRecord),
    Company(CompanyRecord),
    Example(ExampleLine),
}

/// Writes one JSON object per line: solutions, then companies, then examples
/// tagged with the dataset's split.
pub fn store_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |line: &Line| -> Result<()> {
        serde_json::to_writer(&mut w, line)
            .map_err(|e| Error::invalid(format!("serialising {}: {e}", path.display())))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))
    };
    for s in &dataset.solutions {
        emit(&Line::Solution(s.clone()))?;
    }
    for c in &dataset.companies {
        if c.numeric.values().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "company `{}` has a non-finite numeric value",
                c.id
            )));
        }
        emit(&Line::Company(c.clone()))?;
    }
    for e in &dataset.examples {
        emit(&Line::Example(ExampleLine {
            solution_id: e.solution_id.clone(),
            company_id: e.company_id.clone(),
            label: e.label,
            split: dataset.split,
        }))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    load(path, None)
}

/// As [`load_dataset`], additionally rejecting any record whose field names
/// or values violate `schema`; the error names the offending line.
pub fn load_dataset_checked(path: &Path, schema: &FieldSchema) -> Result<Dataset> {
    load(path, Some(schema))
}

fn load(path: &Path, schema: Option<&FieldSchema>) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ds = Dataset::default();
    let mut split: Option<Split> = None;
    for (i, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let line: Line = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        let report = match (&line, schema) {
            (Line::Solution(s), Some(schema)) => Some(validate_record(s, schema)),
            (Line::Company(c), Some(schema)) => Some(validate_record(c, schema)),
            _ => None,
        };
        if let Some(report) = report {
            if let Some(issue) = report.errors.first() {
                return Err(err(issue.to_string()));
            }
        }
        match line {
            Line::Solution(s) => ds.solutions.push(s),
            Line::Company(c) => ds.companies.push(c),
            Line::Example(e) => {
                if e.label > 1 {
                    return Err(err(format!("label {} is not 0 or 1", e.label)));
                }
                match split {
                    Some(s) if s != e.split => {
                        return Err(err(format!("example split `{}` differs from `{s}`", e.split)))
                    }
                    _ => split = Some(e.split),
                }
                ds.examples.push(MatchExample::new(e.solution_id, e.company_id, e.label));
            }
        }
    }
    ds.split = split.unwrap_or_default();
    Ok(ds)
}
