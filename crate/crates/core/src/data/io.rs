//! On-disk dataset directory: split CSVs, `schema.json` and group JSONL files.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::data::groups::RankingGroup;
use crate::data::ledger::csv_err;
use crate::data::record::{Dataset, FeatureSchema, TraderRecord};
use crate::error::{Error, Result};

const FIXED_HEAD: [&str; 3] = ["account_id", "period", "market"];
const FIXED_TAIL: [&str; 4] = ["next_total_pl", "next_profit_20", "future_return", "label"];

fn header(schema: &FeatureSchema) -> Vec<String> {
    FIXED_HEAD
        .iter()
        .map(|s| s.to_string())
        .chain(schema.continuous.iter().cloned())
        .chain(schema.categorical.iter().map(|c| c.name.clone()))
        .chain(FIXED_TAIL.iter().map(|s| s.to_string()))
        .collect()
}

/// `{:?}` prints the shortest string that parses back to the same f64.
fn f(v: f64) -> String {
    format!("{v:?}")
}

pub fn write_records_csv(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header(&dataset.schema)).map_err(|e| csv_err(path, e))?;
    for r in &dataset.records {
        let row: Vec<String> = [r.account_id.to_string(), r.period.to_string(), r.market.to_string()]
            .into_iter()
            .chain(r.continuous.iter().map(|&v| f(v)))
            .chain(r.categorical.iter().map(|v| v.to_string()))
            .chain([f(r.next_total_pl), f(r.next_profit_20), f(r.future_return), r.label.to_string()])
            .collect();
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records_csv(path: &Path, schema: &FeatureSchema) -> Result<Dataset> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let expected = header(schema);
    let got: Vec<String> = r.headers().map_err(|e| csv_err(path, e))?.iter().map(String::from).collect();
    if got != expected {
        let missing = expected.iter().find(|h| !got.contains(h));
        return Err(Error::Data(match missing {
            Some(m) => format!("{}: missing column {m}", path.display()),
            None => format!("{}: columns do not match schema order", path.display()),
        }));
    }
    let (nc, nk) = (schema.n_continuous(), schema.n_categorical());
    let mut records = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let bad = |c: usize| Error::Data(format!("{}: row {line}: cannot parse {}", path.display(), expected[c]));
        let float = |c: usize| row[c].parse::<f64>().map_err(|_| bad(c));
        let int = |c: usize| row[c].parse::<u64>().map_err(|_| bad(c));
        let t = 3 + nc + nk;
        let rec = TraderRecord {
            account_id: int(0)?,
            period: int(1)? as u32,
            market: int(2)? as u32,
            continuous: (3..3 + nc).map(float).collect::<Result<_>>()?,
            categorical: (3 + nc..t).map(|c| int(c).map(|v| v as u32)).collect::<Result<_>>()?,
            next_total_pl: float(t)?,
            next_profit_20: float(t + 1)?,
            future_return: float(t + 2)?,
            label: int(t + 3)? as u8,
        };
        schema.validate_record(&rec)?;
        records.push(rec);
    }
    Ok(Dataset {
        schema: schema.clone(),
        records,
    })
}

pub fn write_schema(path: &Path, schema: &FeatureSchema) -> Result<()> {
    let text = serde_json::to_string_pretty(schema).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_schema(path: &Path) -> Result<FeatureSchema> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

pub fn write_groups(path: &Path, groups: &[RankingGroup]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for g in groups {
        let line = serde_json::to_string(g).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_groups(path: &Path) -> Result<Vec<RankingGroup>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Data(format!("{}: line {}: {e}", path.display(), i + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitName {
    Train,
    Valid,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Valid, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Valid => "valid",
            SplitName::Test => "test",
        }
    }
}

/// Layout of a dataset directory.
#[derive(Debug, Clone)]
pub struct DatasetDir {
    pub root: PathBuf,
}

impl DatasetDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetDir { root: root.into() }
    }

    pub fn create(root: impl Into<PathBuf>) -> Result<Self> {
        let d = Self::new(root);
        fs::create_dir_all(&d.root).map_err(|e| Error::io(&d.root, e))?;
        Ok(d)
    }

    pub fn schema_path(&self) -> PathBuf {
        self.root.join("schema.json")
    }

    pub fn records_path(&self) -> PathBuf {
        self.root.join("records.csv")
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.root.join("ledger.csv")
    }

    pub fn split_path(&self, s: SplitName) -> PathBuf {
        self.root.join(format!("{}.csv", s.as_str()))
    }

    pub fn groups_path(&self, s: SplitName) -> PathBuf {
        self.root.join(format!("groups_{}.jsonl", s.as_str()))
    }

    pub fn schema(&self) -> Result<FeatureSchema> {
        read_schema(&self.schema_path())
    }

    pub fn load_split(&self, s: SplitName) -> Result<Dataset> {
        read_records_csv(&self.split_path(s), &self.schema()?)
    }

    pub fn load_groups(&self, s: SplitName) -> Result<Vec<RankingGroup>> {
        read_groups(&self.groups_path(s))
    }
}
