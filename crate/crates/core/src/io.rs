//! Delimited text format for trial datasets.
//!
//! Header: `id,z,d,y_cost,y_effect,x_base`, with an optional `imputation_id`
//! column after `id` for stacked imputed copies. An empty field is a missing
//! value. A covariate column that is absent or empty on every row reads back
//! as "no covariate".

use crate::model::{ModelError, TrialDataset};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

pub const HEADER: [&str; 6] = ["id", "z", "d", "y_cost", "y_effect", "x_base"];

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("missing required column `{0}`")]
    MissingColumn(&'static str),
    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: column `{column}` may not be empty")]
    Required { row: usize, column: &'static str },
}

struct Columns {
    z: usize,
    d: usize,
    y_cost: usize,
    y_effect: usize,
    x_base: Option<usize>,
    imputation: Option<usize>,
}

impl Columns {
    fn locate(headers: &csv::StringRecord) -> Result<Self, IoError> {
        let find = |name: &str| headers.iter().position(|h| h.trim() == name);
        let need = |name: &'static str| find(name).ok_or(IoError::MissingColumn(name));
        Ok(Self {
            z: need("z")?,
            d: need("d")?,
            y_cost: need("y_cost")?,
            y_effect: need("y_effect")?,
            x_base: find("x_base"),
            imputation: find("imputation_id"),
        })
    }
}

#[derive(Default)]
struct Builder {
    z: Vec<u8>,
    d: Vec<u8>,
    y_cost: Vec<Option<f64>>,
    y_effect: Vec<Option<f64>>,
    x_base: Vec<Option<f64>>,
}

impl Builder {
    fn finish(self, has_covariate: bool) -> Result<TrialDataset, IoError> {
        let x = (has_covariate && self.x_base.iter().any(Option::is_some)).then_some(self.x_base);
        Ok(TrialDataset::new(self.z, self.d, self.y_cost, self.y_effect, x)?)
    }
}

fn parse_binary(record: &csv::StringRecord, idx: usize, row: usize, column: &'static str) -> Result<u8, IoError> {
    match record.get(idx).map(str::trim) {
        Some("0") => Ok(0),
        Some("1") => Ok(1),
        Some("") | None => Err(IoError::Required { row, column }),
        Some(other) => Err(IoError::Parse {
            row,
            column,
            value: other.to_string(),
        }),
    }
}

fn parse_optional(
    record: &csv::StringRecord,
    idx: usize,
    row: usize,
    column: &'static str,
) -> Result<Option<f64>, IoError> {
    let raw = record.get(idx).map(str::trim).unwrap_or("");
    if raw.is_empty() || raw.eq_ignore_ascii_case("na") {
        return Ok(None);
    }
    raw.parse::<f64>().map(Some).map_err(|_| IoError::Parse {
        row,
        column,
        value: raw.to_string(),
    })
}

fn read_groups<R: Read>(reader: R) -> Result<BTreeMap<u64, TrialDataset>, IoError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let cols = Columns::locate(rdr.headers()?)?;
    let mut groups: BTreeMap<u64, Builder> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 1;
        let group = match cols.imputation {
            Some(idx) => {
                let raw = rec.get(idx).unwrap_or("").trim();
                raw.parse::<u64>().map_err(|_| IoError::Parse {
                    row,
                    column: "imputation_id",
                    value: raw.to_string(),
                })?
            }
            None => 0,
        };
        let b = groups.entry(group).or_default();
        b.z.push(parse_binary(&rec, cols.z, row, "z")?);
        b.d.push(parse_binary(&rec, cols.d, row, "d")?);
        b.y_cost.push(parse_optional(&rec, cols.y_cost, row, "y_cost")?);
        b.y_effect.push(parse_optional(&rec, cols.y_effect, row, "y_effect")?);
        b.x_base.push(match cols.x_base {
            Some(idx) => parse_optional(&rec, idx, row, "x_base")?,
            None => None,
        });
    }
    if groups.is_empty() {
        return Err(ModelError::Empty.into());
    }
    groups
        .into_iter()
        .map(|(k, b)| Ok((k, b.finish(cols.x_base.is_some())?)))
        .collect()
}

pub fn read_dataset<R: Read>(reader: R) -> Result<TrialDataset, IoError> {
    let groups = read_groups(reader)?;
    Ok(groups.into_values().next().expect("non-empty"))
}

pub fn read_dataset_file(path: impl AsRef<Path>) -> Result<TrialDataset, IoError> {
    read_dataset(std::fs::File::open(path)?)
}

/// Reads stacked imputed copies, ordered by `imputation_id`.
pub fn read_imputed<R: Read>(reader: R) -> Result<Vec<(u64, TrialDataset)>, IoError> {
    Ok(read_groups(reader)?.into_iter().collect())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_rows<W: Write>(wtr: &mut csv::Writer<W>, data: &TrialDataset, imputation: Option<u64>) -> Result<(), IoError> {
    for i in 0..data.len() {
        let mut rec = vec![(i + 1).to_string()];
        if let Some(m) = imputation {
            rec.push(m.to_string());
        }
        rec.push(data.z()[i].to_string());
        rec.push(data.d()[i].to_string());
        rec.push(fmt_opt(data.y_cost()[i]));
        rec.push(fmt_opt(data.y_effect()[i]));
        rec.push(fmt_opt(data.x_base().and_then(|x| x[i])));
        wtr.write_record(&rec)?;
    }
    Ok(())
}

pub fn write_dataset<W: Write>(writer: W, data: &TrialDataset) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(HEADER)?;
    write_rows(&mut wtr, data, None)?;
    wtr.flush()?;
    Ok(())
}

pub fn write_dataset_file(path: impl AsRef<Path>, data: &TrialDataset) -> Result<(), IoError> {
    write_dataset(std::fs::File::create(path)?, data)
}

/// Writes completed copies stacked with an `imputation_id` column (1-based).
pub fn write_imputed<W: Write>(writer: W, copies: &[TrialDataset]) -> Result<(), IoError> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(["id", "imputation_id", "z", "d", "y_cost", "y_effect", "x_base"])?;
    for (m, data) in copies.iter().enumerate() {
        write_rows(&mut wtr, data, Some(m as u64 + 1))?;
    }
    wtr.flush()?;
    Ok(())
}
