use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use super::TabularDataset;
use crate::error::{Error, Result};

pub fn read_csv(path: impl AsRef<Path>) -> Result<TabularDataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv_from(file)
}

/// Parse a headed numeric CSV. Rows are numbered from 1 (the first data row).
pub fn read_csv_from<R: Read>(reader: R) -> Result<TabularDataset> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| parse_error(0, "", e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if headers.is_empty() || headers.iter().all(String::is_empty) {
        return Err(parse_error(0, "", "missing header row".into()));
    }
    let mut seen = HashSet::new();
    for h in &headers {
        if h.is_empty() {
            return Err(parse_error(0, h, "empty column name".into()));
        }
        if !seen.insert(h.as_str()) {
            return Err(parse_error(0, h, "duplicate column name".into()));
        }
    }

    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); headers.len()];
    for (i, record) in rdr.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| parse_error(row, "", e.to_string()))?;
        if record.len() != headers.len() {
            return Err(parse_error(
                row,
                "",
                format!("expected {} fields, found {}", headers.len(), record.len()),
            ));
        }
        for (j, cell) in record.iter().enumerate() {
            let value: f64 = cell
                .parse()
                .map_err(|_| parse_error(row, &headers[j], format!("non-numeric cell '{cell}'")))?;
            if !value.is_finite() {
                return Err(parse_error(
                    row,
                    &headers[j],
                    format!("non-finite cell '{cell}'"),
                ));
            }
            columns[j].push(value);
        }
    }
    TabularDataset::new(headers, columns)
}

pub fn write_csv(dataset: &TabularDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(dataset, std::io::BufWriter::new(file))
}

/// Values are written in shortest round-trip form, so read-after-write is exact.
pub fn write_csv_to<W: Write>(dataset: &TabularDataset, writer: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    wtr.write_record(dataset.names()).map_err(csv_io_error)?;
    let cols: Vec<&[f64]> = dataset
        .names()
        .iter()
        .map(|n| dataset.column(n))
        .collect::<Result<_>>()?;
    let mut buf: Vec<String> = Vec::with_capacity(cols.len());
    for r in 0..dataset.n_rows() {
        buf.clear();
        buf.extend(cols.iter().map(|c| c[r].to_string()));
        wtr.write_record(&buf).map_err(csv_io_error)?;
    }
    wtr.flush()?;
    Ok(())
}

fn parse_error(row: usize, column: &str, message: String) -> Error {
    Error::Parse {
        row,
        column: column.to_owned(),
        message,
    }
}

fn csv_io_error(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
