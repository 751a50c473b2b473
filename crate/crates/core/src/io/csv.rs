//! Header-checked CSV tables.
//!
//! Every table the toolkit emits has a fixed header; readers reject files
//! whose header or column count differs.

use std::path::Path;

use crate::error::{Error, Result};
use crate::netcore::Tensor;

pub const SAMPLES_HEADER: &[&str] = &["sample_id", "t", "dim0", "dim1"];
pub const LOSS_HEADER: &[&str] = &["step", "loss", "moving_average"];

/// Rows of string cells under a fixed header.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn render(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).map_err(csv_err)?;
        for r in &self.rows {
            if r.len() != self.header.len() {
                return Err(Error::Csv(format!(
                    "row has {} cells, header has {}",
                    r.len(),
                    self.header.len()
                )));
            }
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Csv(e.to_string()))
    }

    /// Parses `text` and checks that its header equals `header`.
    pub fn parse(text: &str, header: &[&str]) -> Result<Table> {
        let mut r = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(text.as_bytes());
        let got: Vec<String> = r
            .headers()
            .map_err(csv_err)?
            .iter()
            .map(String::from)
            .collect();
        if got != header {
            return Err(Error::Csv(format!(
                "expected header {:?}, found {:?}",
                header.join(","),
                got.join(",")
            )));
        }
        let mut table = Table::new(header);
        for rec in r.records() {
            let rec = rec.map_err(csv_err)?;
            table.rows.push(rec.iter().map(String::from).collect());
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        super::checkpoint::write_atomic(path, self.render()?.as_bytes())
    }

    pub fn load(path: &Path, header: &[&str]) -> Result<Table> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Table::parse(&text, header)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Csv(e.to_string())
}

/// Parses one cell, naming the row and column on failure.
pub fn cell<T: std::str::FromStr>(table: &Table, row: usize, col: usize) -> Result<T> {
    let v = &table.rows[row][col];
    v.parse().map_err(|_| {
        Error::Csv(format!(
            "row {}: cannot parse {:?} in column {}",
            row + 1,
            v,
            table.header[col]
        ))
    })
}

/// One `(sample_id, t, point)` row per recorded state.
pub fn samples_table(rows: impl IntoIterator<Item = (usize, usize, [f32; 2])>) -> Table {
    let mut table = Table::new(SAMPLES_HEADER);
    for (id, t, p) in rows {
        table.push(vec![
            id.to_string(),
            t.to_string(),
            p[0].to_string(),
            p[1].to_string(),
        ]);
    }
    table
}

/// Final samples (`t = 0`) of a `[n, 2]` tensor.
pub fn final_samples_table(x: &Tensor<f32>) -> Result<Table> {
    if x.cols() != 2 {
        return Err(Error::Shape(format!(
            "sample CSV needs 2 columns, got {}",
            x.cols()
        )));
    }
    Ok(samples_table(
        (0..x.rows()).map(|i| (i, 0, [x.row(i)[0], x.row(i)[1]])),
    ))
}

/// Reads the points of a samples table. When `t` is given only rows with
/// that timestep are kept.
pub fn points_from_samples(table: &Table, t: Option<usize>) -> Result<Tensor<f32>> {
    let mut data = Vec::new();
    for i in 0..table.rows.len() {
        let ti: usize = cell(table, i, 1)?;
        if t.is_some_and(|want| want != ti) {
            continue;
        }
        data.push(cell::<f32>(table, i, 2)?);
        data.push(cell::<f32>(table, i, 3)?);
    }
    let n = data.len() / 2;
    Tensor::new(vec![n, 2], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_mismatch_rejected() {
        let text = "sample_id,t,dim0\n0,0,1\n";
        assert!(Table::parse(text, SAMPLES_HEADER).is_err());
        let text = "sample_id,t,dim0,dim1\n0,0,1\n";
        assert!(Table::parse(text, SAMPLES_HEADER).is_err());
    }

    #[test]
    fn samples_round_trip_bit_exact() {
        let x = Tensor::new(vec![3, 2], vec![0.1f32, -0.0, 1e-40, 3.5, -7.25, f32::MAX]).unwrap();
        let text = final_samples_table(&x).unwrap().render().unwrap();
        assert!(text.starts_with("sample_id,t,dim0,dim1\n"));
        let back =
            points_from_samples(&Table::parse(&text, SAMPLES_HEADER).unwrap(), None).unwrap();
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&x));
    }

    #[test]
    fn timestep_filter() {
        let t = samples_table(vec![
            (0, 10, [1.0, 2.0]),
            (0, 0, [3.0, 4.0]),
            (1, 0, [5.0, 6.0]),
        ]);
        let p = points_from_samples(&t, Some(0)).unwrap();
        assert_eq!(p.data(), &[3.0, 4.0, 5.0, 6.0]);
    }
}
