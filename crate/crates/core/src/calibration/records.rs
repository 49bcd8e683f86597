use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One firm-year of balance-sheet totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankRecord {
    #[serde(rename = "firm_id")]
    pub id: u64,
    pub name: String,
    pub year: i32,
    pub total_assets: f64,
    pub total_liabilities: f64,
}

impl BankRecord {
    fn check(&self) -> Result<()> {
        for (field, v) in [
            ("total_assets", self.total_assets),
            ("total_liabilities", self.total_liabilities),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(
                    field,
                    format!("firm {} ({}) has {v}", self.id, self.year),
                ));
            }
        }
        Ok(())
    }
}

/// Reads `firm_id,name,year,total_assets,total_liabilities` rows.
pub fn read_records<R: Read>(reader: R) -> Result<Vec<BankRecord>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let expected = ["firm_id", "name", "year", "total_assets", "total_liabilities"];
    if headers.iter().ne(expected) {
        return Err(Error::Input(format!(
            "bank CSV header must be `{}`",
            expected.join(",")
        )));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        let rec: BankRecord = rec?;
        rec.check()?;
        out.push(rec);
    }
    Ok(out)
}

pub fn read_records_file(path: &Path) -> Result<Vec<BankRecord>> {
    read_records(std::fs::File::open(path)?)
}

/// Records of one year ordered by firm id; duplicate ids are an error.
pub fn records_for_year(records: &[BankRecord], year: i32) -> Result<Vec<BankRecord>> {
    let mut rows: Vec<BankRecord> = records.iter().filter(|r| r.year == year).cloned().collect();
    if rows.is_empty() {
        return Err(Error::Input(format!("no bank records for {year}")));
    }
    rows.sort_by_key(|r| r.id);
    if let Some(w) = rows.windows(2).find(|w| w[0].id == w[1].id) {
        return Err(Error::Input(format!("firm {} appears twice in {year}", w[0].id)));
    }
    Ok(rows)
}

/// Earliest year present.
pub fn first_year(records: &[BankRecord]) -> Option<i32> {
    records.iter().map(|r| r.year).min()
}
