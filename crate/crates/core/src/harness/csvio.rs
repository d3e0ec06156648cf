//! Minimal CSV writing and parsing. Fields never contain commas or quotes,
//! so no escaping is needed; floats use the shortest round-trip formatting.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Csv {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidArgument(format!("csv has no column `{name}`")))
    }

    pub fn f64_at(&self, row: usize, col: usize) -> Result<f64> {
        self.rows[row][col]
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("`{}` is not a number", self.rows[row][col])))
    }
}

pub fn write_csv<I>(path: &Path, header: &[&str], rows: I) -> Result<()>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: &Path) -> Result<Csv> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: empty csv", path.display())))?
        .split(',')
        .map(String::from)
        .collect();
    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<String> = line.split(',').map(String::from).collect();
        if row.len() != header.len() {
            return Err(Error::InvalidArgument(format!(
                "{}: row {} has {} fields, header has {}",
                path.display(),
                idx + 2,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok(Csv { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_rows_and_nan() {
        let dir = std::env::temp_dir().join("cosearch-csv-test");
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        write_csv(
            &path,
            &["a", "b"],
            vec![
                vec![fmt_f64(1.5), fmt_f64(f64::NAN)],
                vec![fmt_f64(-0.25), fmt_f64(0.1)],
            ],
        )
        .unwrap();
        let csv = read_csv(&path).unwrap();
        assert_eq!(csv.header, vec!["a", "b"]);
        assert_eq!(csv.rows.len(), 2);
        assert!(csv.f64_at(0, 1).unwrap().is_nan());
        assert_eq!(csv.f64_at(1, csv.column("a").unwrap()).unwrap(), -0.25);
        fs::remove_dir_all(&dir).ok();
    }
}
