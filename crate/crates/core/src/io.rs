//! Dense CSV and Matrix Market (coordinate, real) matrix files.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    /// Comma-separated rows, no header.
    Csv,
    MatrixMarket,
}

impl MatrixFormat {
    /// `.mtx` and `.mm` are Matrix Market, anything else CSV.
    pub fn from_path(path: &Path) -> MatrixFormat {
        match path.extension().and_then(|e| e.to_str()) {
            Some("mtx") | Some("mm") => MatrixFormat::MatrixMarket,
            _ => MatrixFormat::Csv,
        }
    }
}

pub fn load_matrix(path: &Path, format: Option<MatrixFormat>) -> Result<DMatrix<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    match format.unwrap_or_else(|| MatrixFormat::from_path(path)) {
        MatrixFormat::Csv => parse_csv(&text),
        MatrixFormat::MatrixMarket => parse_matrix_market(&text),
    }
}

pub fn write_matrix(path: &Path, a: &DMatrix<f64>, format: MatrixFormat) -> Result<()> {
    let text = match format {
        MatrixFormat::Csv => to_csv(a),
        MatrixFormat::MatrixMarket => to_matrix_market(a),
    };
    fs::write(path, text)?;
    Ok(())
}

fn parse_value(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok.trim().parse().map_err(|_| Error::ParseError {
        line,
        msg: format!("not a number: '{}'", tok.trim()),
    })?;
    if !v.is_finite() {
        return Err(Error::ParseError {
            line,
            msg: format!("non-finite value '{}'", tok.trim()),
        });
    }
    Ok(v)
}

/// Blank lines are skipped; every other line is one row.
pub fn parse_csv(text: &str) -> Result<DMatrix<f64>> {
    let mut rows: Vec<Vec<f64>> = vec![];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|t| parse_value(t, i + 1))
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::ShapeError(format!(
                    "line {} has {} fields, expected {}",
                    i + 1,
                    row.len(),
                    first.len()
                )));
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::ShapeError("empty matrix file".into()));
    }
    let (r, c) = (rows.len(), rows[0].len());
    Ok(DMatrix::from_fn(r, c, |i, j| rows[i][j]))
}

pub fn parse_matrix_market(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::ParseError {
        line: 1,
        msg: "empty file".into(),
    })?;
    let fields: Vec<String> = header.split_whitespace().map(|s| s.to_ascii_lowercase()).collect();
    if fields.len() != 5 || fields[0] != "%%matrixmarket" || fields[1] != "matrix" {
        return Err(Error::ParseError {
            line: 1,
            msg: "expected '%%MatrixMarket matrix coordinate real general|symmetric'".into(),
        });
    }
    if fields[2] != "coordinate" || fields[3] != "real" {
        return Err(Error::ParseError {
            line: 1,
            msg: format!("unsupported storage '{} {}'", fields[2], fields[3]),
        });
    }
    let symmetric = match fields[4].as_str() {
        "general" => false,
        "symmetric" => true,
        other => {
            return Err(Error::ParseError {
                line: 1,
                msg: format!("unsupported symmetry '{other}'"),
            })
        }
    };
    let mut body = lines.filter(|(_, l)| !l.trim_start().starts_with('%') && !l.trim().is_empty());
    let (size_idx, size_line) = body.next().ok_or(Error::ParseError {
        line: 2,
        msg: "missing size line".into(),
    })?;
    let size: Vec<usize> = size_line
        .split_whitespace()
        .map(|t| t.parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::ParseError {
            line: size_idx + 1,
            msg: "size line must be 'rows cols entries'".into(),
        })?;
    if size.len() != 3 {
        return Err(Error::ParseError {
            line: size_idx + 1,
            msg: "size line must be 'rows cols entries'".into(),
        });
    }
    let (r, c, nnz) = (size[0], size[1], size[2]);
    if symmetric && r != c {
        return Err(Error::ShapeError(format!("symmetric storage needs a square matrix, got {r}x{c}")));
    }
    let mut a = DMatrix::zeros(r, c);
    let mut seen = 0;
    for (idx, line) in body {
        let lineno = idx + 1;
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 3 {
            return Err(Error::ParseError {
                line: lineno,
                msg: "entry must be 'row col value'".into(),
            });
        }
        let index = |t: &str, bound: usize| -> Result<usize> {
            let v: usize = t.parse().map_err(|_| Error::ParseError {
                line: lineno,
                msg: format!("bad index '{t}'"),
            })?;
            if v == 0 || v > bound {
                return Err(Error::ParseError {
                    line: lineno,
                    msg: format!("index {v} outside 1..={bound}"),
                });
            }
            Ok(v - 1)
        };
        let (i, j) = (index(toks[0], r)?, index(toks[1], c)?);
        let v = parse_value(toks[2], lineno)?;
        a[(i, j)] = v;
        if symmetric {
            a[(j, i)] = v;
        }
        seen += 1;
    }
    if seen != nnz {
        return Err(Error::ParseError {
            line: size_idx + 1,
            msg: format!("declared {nnz} entries, found {seen}"),
        });
    }
    Ok(a)
}

/// Values are written with Rust's shortest round-trip representation.
pub fn to_csv(a: &DMatrix<f64>) -> String {
    let mut s = String::new();
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols()).map(|j| a[(i, j)].to_string()).collect();
        s.push_str(&row.join(","));
        s.push('\n');
    }
    s
}

/// General coordinate storage of the nonzero entries.
pub fn to_matrix_market(a: &DMatrix<f64>) -> String {
    let mut entries = vec![];
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            if a[(i, j)] != 0.0 {
                entries.push(format!("{} {} {}", i + 1, j + 1, a[(i, j)]));
            }
        }
    }
    let mut s = format!(
        "%%MatrixMarket matrix coordinate real general\n{} {} {}\n",
        a.nrows(),
        a.ncols(),
        entries.len()
    );
    for e in entries {
        s.push_str(&e);
        s.push('\n');
    }
    s
}
