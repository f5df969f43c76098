//! CSV ingestion.

use std::path::Path;

use mono_gp::gp::{duplicate_rows, Dataset, Point};

use crate::error::CliError;

struct Table {
    header: Vec<String>,
    rows: Vec<Vec<f64>>,
    lines: Vec<u64>,
}

fn read_table(path: &Path) -> Result<Table, CliError> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file);
    let parse_err = |line: u64, message: String| CliError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| parse_err(e.position().map_or(1, |p| p.line()), e.to_string()))?
        .iter()
        .map(str::to_owned)
        .collect();
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let row = rec
            .iter()
            .enumerate()
            .map(|(col, field)| {
                let v: f64 = field
                    .parse()
                    .map_err(|_| parse_err(line, format!("column {}: cannot parse {field:?} as a number", col + 1)))?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(parse_err(line, format!("column {}: non-finite value {field:?}", col + 1)))
                }
            })
            .collect::<Result<Vec<f64>, _>>()?;
        rows.push(row);
        lines.push(line);
    }
    if rows.is_empty() {
        return Err(CliError::EmptyData {
            path: path.to_path_buf(),
        });
    }
    Ok(Table { header, rows, lines })
}

/// Reads a CSV with a header row: `d` input columns followed by the
/// response column.
pub fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    let table = read_table(path)?;
    if table.header.len() < 2 {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: "need at least one input column and one response column".into(),
        });
    }
    let inputs: Vec<Point> = table.rows.iter().map(|r| r[..r.len() - 1].to_vec()).collect();
    let outputs: Vec<f64> = table.rows.iter().map(|r| r[r.len() - 1]).collect();
    let dups = duplicate_rows(&inputs);
    if !dups.is_empty() {
        return Err(CliError::DuplicateRows {
            path: path.to_path_buf(),
            lines: dups.iter().map(|&(i, j)| (table.lines[i], table.lines[j])).collect(),
        });
    }
    Dataset::new(inputs, outputs).map_err(|e| CliError::Config {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Reads a CSV of input points (header row, one column per dimension).
pub fn load_points(path: &Path) -> Result<Vec<Point>, CliError> {
    Ok(read_table(path)?.rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn reads_and_validates() {
        let f = file("x1,x2,y\n0.1,0.2,3\n0.3,0.4,5\n");
        let d = load_dataset(f.path()).unwrap();
        assert_eq!((d.len(), d.dims()), (2, 2));
        assert_eq!(d.outputs(), &[3.0, 5.0]);

        let f = file("x,y\n0.1,1\n0.2,abc\n");
        match load_dataset(f.path()) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let f = file("x,y\n0.1,1\n0.2,2\n0.1,3\n");
        assert!(matches!(
            load_dataset(f.path()),
            Err(CliError::DuplicateRows { lines, .. }) if lines == vec![(2, 4)]
        ));
        assert!(matches!(load_dataset(file("x,y\n").path()), Err(CliError::EmptyData { .. })));
        assert!(matches!(load_dataset(file("x,y\n0.1,NaN\n").path()), Err(CliError::Parse { .. })));
    }
}
