//! CSV embedding sources: one row per image, `id,f1,...,fd`. A header row
//! is allowed when its second column is not a number.

use std::io::{Read, Write};

use thiserror::Error;

use genir_core::ImageRecord;

#[derive(Debug, Error)]
pub enum CsvError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("no rows")]
    Empty,
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn parse_err(line: u64, message: impl Into<String>) -> CsvError {
    CsvError::Parse {
        line,
        message: message.into(),
    }
}

/// Reads all rows. When `dim` is `None` the first row fixes it.
pub fn read_embeddings<R: Read>(
    r: R,
    dim: Option<usize>,
) -> Result<(Vec<ImageRecord>, usize), CsvError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(r);
    let mut dim = dim;
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row?;
        let line = row.position().map_or(i as u64 + 1, |p| p.line());
        let id = row.get(0).unwrap_or_default();
        if id.is_empty() {
            return Err(parse_err(line, "empty id"));
        }
        let fields: Vec<&str> = row.iter().skip(1).collect();
        if i == 0 && fields.first().is_some_and(|f| f.parse::<f32>().is_err()) {
            continue;
        }
        let values = fields
            .iter()
            .enumerate()
            .map(|(col, f)| {
                f.parse::<f32>()
                    .map_err(|_| parse_err(line, format!("column {}: {f:?} is not a number", col + 2)))
            })
            .collect::<Result<Vec<f32>, _>>()?;
        let expected = *dim.get_or_insert(values.len());
        if values.len() != expected {
            return Err(parse_err(
                line,
                format!("expected {expected} values, found {}", values.len()),
            ));
        }
        if expected == 0 {
            return Err(parse_err(line, "row has no values"));
        }
        out.push(ImageRecord::new(id, values));
    }
    match dim {
        Some(d) if !out.is_empty() => Ok((out, d)),
        _ => Err(CsvError::Empty),
    }
}

pub fn write_embeddings<W: Write>(w: W, records: &[ImageRecord]) -> Result<(), CsvError> {
    let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for r in records {
        let mut row = vec![r.id.clone()];
        row.extend(r.embedding.iter().map(f32::to_string));
        writer.write_record(&row)?;
    }
    writer.flush().map_err(csv::Error::from)?;
    Ok(())
}
