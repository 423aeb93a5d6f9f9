//! Config-driven CSV ingestion for public tabular datasets.
//!
//! Rows become records directly. A profit-proxy column (e.g. a transaction
//! amount) stands in for the forward P&L and, unless an explicit label column
//! is configured, the top α% of it is labelled positive.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::labels::assign_labels;
use crate::data::ledger::csv_err;
use crate::data::record::{CategoricalFeature, Dataset, FeatureSchema, TraderRecord};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoricalColumn {
    pub name: String,
    /// Vocabulary size; inferred as `max + 1` over the file when absent.
    #[serde(default)]
    pub vocab: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSchema {
    pub continuous: Vec<String>,
    #[serde(default)]
    pub categorical: Vec<CategoricalColumn>,
    /// Column ranked to produce labels and used as the ranking weight.
    pub proxy_column: String,
    /// Column for the hedged P&L metric; defaults to the proxy.
    #[serde(default)]
    pub hedge_column: Option<String>,
    /// Pre-existing 0/1 labels; overrides top-α labelling.
    #[serde(default)]
    pub label_column: Option<String>,
    #[serde(default)]
    pub id_column: Option<String>,
    #[serde(default)]
    pub period_column: Option<String>,
    #[serde(default)]
    pub market_column: Option<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    1.0
}

impl IngestSchema {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("ingest schema: {e}")))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

pub fn ingest_csv(path: &Path, schema: &IngestSchema) -> Result<Dataset> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let headers = reader.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    let index: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let col = |name: &str| -> Result<usize> {
        index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Data(format!("{}: missing column {name}", path.display())))
    };
    let opt = |name: &Option<String>| name.as_deref().map(col).transpose();
    let cont: Vec<usize> = schema.continuous.iter().map(|n| col(n)).collect::<Result<_>>()?;
    let cat: Vec<usize> = schema.categorical.iter().map(|c| col(&c.name)).collect::<Result<_>>()?;
    let proxy = col(&schema.proxy_column)?;
    let hedge = opt(&schema.hedge_column)?;
    let label = opt(&schema.label_column)?;
    let id = opt(&schema.id_column)?;
    let period = opt(&schema.period_column)?;
    let market = opt(&schema.market_column)?;

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| csv_err(path, e))?;
        let line = i + 2;
        let cell = |c: usize| -> &str { row.get(c).unwrap_or("").trim() };
        let float = |c: usize| -> Result<f64> {
            cell(c)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| unparseable(path, line, &headers[c], cell(c)))
        };
        let int = |c: usize| -> Result<u64> {
            cell(c).parse::<u64>().map_err(|_| unparseable(path, line, &headers[c], cell(c)))
        };
        let value = float(proxy)?;
        records.push(TraderRecord {
            account_id: id.map(int).transpose()?.unwrap_or(i as u64),
            period: period.map(int).transpose()?.unwrap_or(0) as u32,
            market: market.map(int).transpose()?.unwrap_or(0) as u32,
            continuous: cont.iter().map(|&c| float(c)).collect::<Result<_>>()?,
            categorical: cat.iter().map(|&c| int(c).map(|v| v as u32)).collect::<Result<_>>()?,
            next_total_pl: value,
            next_profit_20: hedge.map(float).transpose()?.unwrap_or(value),
            future_return: value,
            label: match label {
                Some(c) => match int(c)? {
                    v @ (0 | 1) => v as u8,
                    _ => return Err(unparseable(path, line, &headers[c], cell(c))),
                },
                None => 0,
            },
        });
    }
    if records.is_empty() {
        return Err(Error::Data(format!("{}: empty file", path.display())));
    }
    if label.is_none() {
        let keyed: Vec<_> = records.iter().map(|r| (r.key(), r.future_return)).collect();
        for (r, l) in records.iter_mut().zip(assign_labels(&keyed, schema.alpha)?) {
            r.label = l;
        }
    }
    let categorical = schema
        .categorical
        .iter()
        .enumerate()
        .map(|(j, c)| CategoricalFeature {
            name: c.name.clone(),
            vocab: c
                .vocab
                .unwrap_or_else(|| records.iter().map(|r| r.categorical[j] + 1).max().unwrap_or(1)),
        })
        .collect();
    let dataset = Dataset {
        schema: FeatureSchema::new(schema.continuous.clone(), categorical),
        records,
    };
    dataset.validate()?;
    Ok(dataset)
}

fn unparseable(path: &Path, line: usize, column: &str, value: &str) -> Error {
    Error::Data(format!(
        "{}: row {line}: cannot parse column {column} value {value:?}",
        path.display()
    ))
}
