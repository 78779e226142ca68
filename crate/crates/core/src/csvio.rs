//! Plain CSV helpers shared by the serializers.
//!
//! Floats are written in Rust's shortest round-trip form so files re-read
//! bit-for-bit and identical runs produce identical bytes.

use std::io::Write;

use crate::error::Result;

pub(crate) fn fmt(x: f64) -> String {
    format!("{x:?}")
}

pub(crate) fn numbered(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |k| format!("{prefix}_{k}"))
}

/// Writes a header row then one record per row of numbers. Columns listed in
/// `int_cols` hold indices and are written without a fractional part.
pub(crate) fn write_table<W, I>(out: W, header: &[String], int_cols: &[usize], rows: I) -> Result<()>
where
    W: Write,
    I: IntoIterator<Item = Vec<f64>>,
{
    let mut w = csv::Writer::from_writer(out);
    w.write_record(header)?;
    for row in rows {
        w.write_record(row.into_iter().enumerate().map(|(c, x)| {
            if int_cols.contains(&c) {
                format!("{}", x as i64)
            } else {
                fmt(x)
            }
        }))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a table with a header row into numeric records.
pub(crate) fn read_table<R: std::io::Read>(input: R) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_reader(input);
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|s| {
                s.trim().parse::<f64>().map_err(|e| {
                    crate::error::Error::Config(format!(
                        "bad number {s:?} at line {}: {e}",
                        rec.position().map_or(0, |p| p.line())
                    ))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}
