use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::error::{Error, Result};

/// One daily series as read from a corpus; `None` marks a missing day.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSeries {
    pub id: String,
    pub values: Vec<Option<f64>>,
}

impl RawSeries {
    pub fn gaps(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }
}

fn looks_like_date(s: &str) -> bool {
    let b = s.trim().as_bytes();
    b.len() == 10
        && b[4] == b'-'
        && b[7] == b'-'
        && b.iter().enumerate().all(|(i, c)| i == 4 || i == 7 || c.is_ascii_digit())
}

/// Reads a wide CSV (one row per series, one column per day).
///
/// When the first header cell is not a `YYYY-MM-DD` date, the first column
/// is taken as the series id. Only the first `limit` rows are kept.
pub fn load_csv(path: &Path, limit: Option<usize>) -> Result<Vec<RawSeries>> {
    let file = File::open(path)?;
    parse_csv(file, limit)
}

pub fn parse_csv<R: Read>(reader: R, limit: Option<usize>) -> Result<Vec<RawSeries>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let header = rdr.headers()?.clone();
    let has_id = header.get(0).is_some_and(|h| !looks_like_date(h));
    let skip = usize::from(has_id);
    let mut out = Vec::new();
    for (i, record) in rdr.records().enumerate() {
        if limit.is_some_and(|n| out.len() >= n) {
            break;
        }
        let record = record?;
        let line = i + 2;
        let id = if has_id { record.get(0).unwrap_or_default().to_string() } else { format!("series{i}") };
        let mut values = Vec::with_capacity(record.len().saturating_sub(skip));
        for (j, cell) in record.iter().enumerate().skip(skip) {
            let cell = cell.trim();
            if cell.is_empty() {
                values.push(None);
                continue;
            }
            let v: f64 = cell
                .parse()
                .map_err(|e| Error::Parse { row: line, col: j + 1, msg: format!("`{cell}`: {e}") })?;
            if !v.is_finite() {
                return Err(Error::Parse { row: line, col: j + 1, msg: format!("`{cell}` is not finite") });
            }
            values.push(Some(v));
        }
        out.push(RawSeries { id, values });
    }
    if let Some(n) = limit {
        if out.len() < n {
            return Err(Error::Data(format!("requested {n} series but the corpus has {}", out.len())));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_row() {
        let s = parse_csv("2020-01-01,2020-01-02\n1,2\n".as_bytes(), None).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].values, vec![Some(1.0), Some(2.0)]);
        assert_eq!(s[0].gaps(), 0);
    }

    #[test]
    fn id_column_and_gaps() {
        let text = "Page,2020-01-01,2020-01-02,2020-01-03,2020-01-04\nfoo,1,,,4\nbar,5,6,7,8\n";
        let s = parse_csv(text.as_bytes(), Some(1)).unwrap();
        assert_eq!(s[0].id, "foo");
        assert_eq!(s[0].gaps(), 2);
    }

    #[test]
    fn limit_beyond_rows_is_an_error() {
        let text = "2020-01-01\n1\n";
        assert!(matches!(parse_csv(text.as_bytes(), Some(3)), Err(Error::Data(_))));
    }

    #[test]
    fn malformed_cell_reports_position() {
        let text = "id,2020-01-01,2020-01-02\na,1,2\nb,3,x7\n";
        match parse_csv(text.as_bytes(), None) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (3, 3)),
            other => panic!("unexpected {other:?}"),
        }
    }
}
