//! Per-account trade history and forward returns.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trade {
    pub pnl: f64,
    /// Margin requirement of the trade, strictly positive.
    pub margin: f64,
}

/// Trades per account, trade `k` (1-based) stored at position `k - 1`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TradeLedger {
    accounts: BTreeMap<u64, Vec<Trade>>,
}

impl TradeLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, account_id: u64, trade: Trade) -> Result<()> {
        if !(trade.margin > 0.0) || !trade.pnl.is_finite() {
            return Err(Error::Data(format!(
                "account {account_id}: margin must be positive and pnl finite ({trade:?})"
            )));
        }
        self.accounts.entry(account_id).or_default().push(trade);
        Ok(())
    }

    pub fn insert_account(&mut self, account_id: u64, trades: Vec<Trade>) -> Result<()> {
        if let Some(t) = trades.iter().find(|t| !(t.margin > 0.0) || !t.pnl.is_finite()) {
            return Err(Error::Data(format!("account {account_id}: invalid trade {t:?}")));
        }
        self.accounts.insert(account_id, trades);
        Ok(())
    }

    pub fn trades(&self, account_id: u64) -> Option<&[Trade]> {
        self.accounts.get(&account_id).map(|v| v.as_slice())
    }

    pub fn accounts(&self) -> impl Iterator<Item = (u64, &[Trade])> {
        self.accounts.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn n_trades(&self) -> usize {
        self.accounts.values().map(|v| v.len()).sum()
    }

    /// Sum of P&L over trades `j+1 ..= j+window`.
    pub fn forward_pnl(&self, account_id: u64, j: usize, window: usize) -> Result<f64> {
        Ok(self.window(account_id, j, window)?.iter().map(|t| t.pnl).sum())
    }

    fn window(&self, account_id: u64, j: usize, window: usize) -> Result<&[Trade]> {
        let trades = self
            .trades(account_id)
            .ok_or_else(|| Error::Data(format!("unknown account {account_id}")))?;
        if window == 0 || j + window > trades.len() {
            return Err(Error::Data(format!(
                "account {account_id}: need {window} trades after index {j}, have {}",
                trades.len().saturating_sub(j)
            )));
        }
        Ok(&trades[j..j + window])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["account_id", "trade", "pnl", "margin"])
            .map_err(|e| csv_err(path, e))?;
        for (acc, trades) in &self.accounts {
            for (k, t) in trades.iter().enumerate() {
                w.write_record(&[
                    acc.to_string(),
                    (k + 1).to_string(),
                    format!("{:?}", t.pnl),
                    format!("{:?}", t.margin),
                ])
                .map_err(|e| csv_err(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut ledger = TradeLedger::new();
        for (row, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let field = |i: usize, name: &str| -> Result<&str> {
                rec.get(i)
                    .ok_or_else(|| Error::Data(format!("{}: row {}: missing {name}", path.display(), row + 2)))
            };
            let parse = |i: usize, name: &str| -> Result<f64> {
                field(i, name)?.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!("{}: row {}: cannot parse {name}", path.display(), row + 2))
                })
            };
            let acc: u64 = field(0, "account_id")?.trim().parse().map_err(|_| {
                Error::Data(format!("{}: row {}: cannot parse account_id", path.display(), row + 2))
            })?;
            ledger.push(
                acc,
                Trade {
                    pnl: parse(2, "pnl")?,
                    margin: parse(3, "margin")?,
                },
            )?;
        }
        Ok(ledger)
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

/// Forward return of `account_id` after trade `j`: summed P&L over summed
/// margin for trades `j+1 ..= j+window`.
pub fn compute_return(ledger: &TradeLedger, account_id: u64, j: usize, window: usize) -> Result<f64> {
    let trades = ledger.window(account_id, j, window)?;
    let pnl: f64 = trades.iter().map(|t| t.pnl).sum();
    let margin: f64 = trades.iter().map(|t| t.margin).sum();
    if margin <= 0.0 {
        return Err(Error::Data(format!("account {account_id}: zero total margin")));
    }
    Ok(pnl / margin)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(pnls: &[f64], margins: &[f64]) -> TradeLedger {
        let mut l = TradeLedger::new();
        for (&p, &m) in pnls.iter().zip(margins) {
            l.push(7, Trade { pnl: p, margin: m }).unwrap();
        }
        l
    }

    #[test]
    fn return_examples() {
        let l = ledger(&[10.0, -5.0, 15.0], &[100.0; 3]);
        assert!((compute_return(&l, 7, 0, 3).unwrap() - 20.0 / 300.0).abs() < 1e-15);
        let l = ledger(&[0.0; 4], &[50.0; 4]);
        assert_eq!(compute_return(&l, 7, 1, 3).unwrap(), 0.0);
        let l = ledger(&[-50.0], &[200.0]);
        assert_eq!(compute_return(&l, 7, 0, 1).unwrap(), -0.25);
    }

    #[test]
    fn insufficient_future_is_an_error() {
        let l = ledger(&[1.0, 2.0], &[1.0, 1.0]);
        assert!(compute_return(&l, 7, 1, 2).is_err());
        assert!(compute_return(&l, 8, 0, 1).is_err());
    }

    #[test]
    fn non_positive_margin_rejected() {
        let mut l = TradeLedger::new();
        assert!(l.push(1, Trade { pnl: 1.0, margin: 0.0 }).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let l = ledger(&[10.0, -5.25, 1e-3], &[100.0, 50.5, 7.0]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.csv");
        l.write_csv(&p).unwrap();
        assert_eq!(TradeLedger::read_csv(&p).unwrap(), l);
    }
}
