//! File helpers shared by the CLI: CSV matrices, PGM images, JSON, hashing
//! and dataset directory discovery.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::RealMatrix;

/// Writes one matrix row per line, comma separated, with an optional header.
pub fn write_matrix_csv<W: Write>(mut w: W, m: &RealMatrix, header: Option<&[String]>) -> std::io::Result<()> {
    if let Some(h) = header {
        writeln!(w, "{}", h.join(","))?;
    }
    let mut line = String::new();
    for i in 0..m.nrows() {
        line.clear();
        for j in 0..m.ncols() {
            if j > 0 {
                line.push(',');
            }
            line.push_str(&m[(i, j)].to_string());
        }
        writeln!(w, "{line}")?;
    }
    w.flush()
}

pub fn save_matrix_csv(path: &Path, m: &RealMatrix, header: Option<&[String]>) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_matrix_csv(BufWriter::new(f), m, header).map_err(|e| Error::io(path, e))
}

/// Parses a numeric CSV matrix. Blank lines and lines starting with `#` are
/// skipped; a non-numeric first line is treated as a header.
pub fn read_matrix_csv<R: Read>(r: R, path: &Path) -> Result<RealMatrix> {
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0usize;
    let mut seen_content = false;
    for (idx, line) in BufReader::new(r).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let first = !seen_content;
        seen_content = true;
        let parsed: std::result::Result<Vec<f64>, _> = trimmed.split(',').map(|f| f.trim().parse::<f64>()).collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if first => continue,
            Err(e) => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("not a number: {e}"),
                })
            }
        };
        if let Some(pos) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                message: format!("non-finite value in column {}", pos + 1),
            });
        }
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("expected {c} columns, found {}", row.len()),
                })
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: "no numeric rows".into(),
    })?;
    Ok(RealMatrix::from_row_slice(rows, cols, &values))
}

pub fn load_matrix_csv(path: &Path) -> Result<RealMatrix> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_matrix_csv(f, path)
}

/// Binary (P5) 8-bit greyscale image, `pixels` in row-major order.
pub fn write_pgm<W: Write>(mut w: W, width: usize, height: usize, pixels: &[u8]) -> std::io::Result<()> {
    assert_eq!(pixels.len(), width * height, "pixel buffer does not match image size");
    write!(w, "P5\n{width} {height}\n255\n")?;
    w.write_all(pixels)?;
    w.flush()
}

pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

/// One `<root>/<label>/<id>.csif` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetEntry {
    pub label: String,
    pub id: String,
    pub path: PathBuf,
}

/// Lists a dataset directory, sorted by label then sample id.
pub fn list_dataset(root: &Path) -> Result<Vec<DatasetEntry>> {
    let mut out = Vec::new();
    let dirs = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    for dir in dirs {
        let dir = dir.map_err(|e| Error::io(root, e))?;
        let label_path = dir.path();
        if !label_path.is_dir() {
            continue;
        }
        let label = dir.file_name().to_string_lossy().into_owned();
        for file in fs::read_dir(&label_path).map_err(|e| Error::io(&label_path, e))? {
            let file = file.map_err(|e| Error::io(&label_path, e))?;
            let path = file.path();
            if path.extension().and_then(|e| e.to_str()) != Some("csif") {
                continue;
            }
            let id = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            out.push(DatasetEntry {
                label: label.clone(),
                id,
                path,
            });
        }
    }
    out.sort_by(|a, b| (&a.label, &a.id).cmp(&(&b.label, &b.id)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let m = RealMatrix::from_row_slice(2, 3, &[0.1, -2.5e-300, 3.0, 1.0 / 3.0, 7e12, -0.0]);
        let mut buf = Vec::new();
        write_matrix_csv(&mut buf, &m, Some(&["a".into(), "b".into(), "c".into()])).unwrap();
        let back = read_matrix_csv(&buf[..], Path::new("m.csv")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn csv_errors_name_file_and_line() {
        let text = "1,2\n3,4\n5,x\n";
        let err = read_matrix_csv(text.as_bytes(), Path::new("in.csv")).unwrap_err();
        assert_eq!(err.to_string(), "in.csv:3: not a number: invalid float literal");
        let err = read_matrix_csv("1,2\n\n3\n".as_bytes(), Path::new("in.csv")).unwrap_err();
        assert!(err.to_string().starts_with("in.csv:3: expected 2 columns"));
        assert!(read_matrix_csv("# only comments\n".as_bytes(), Path::new("e.csv")).is_err());
    }

    #[test]
    fn pgm_header() {
        let mut buf = Vec::new();
        write_pgm(&mut buf, 2, 1, &[0, 255]).unwrap();
        assert_eq!(buf, b"P5\n2 1\n255\n\x00\xff");
    }

    #[test]
    fn dataset_listing_is_sorted() {
        let dir = tempfile::tempdir().unwrap();
        for (label, id) in [("walk", "b"), ("sit", "z"), ("walk", "a")] {
            fs::create_dir_all(dir.path().join(label)).unwrap();
            File::create(dir.path().join(label).join(format!("{id}.csif"))).unwrap();
        }
        File::create(dir.path().join("walk").join("notes.txt")).unwrap();
        let got: Vec<_> = list_dataset(dir.path()).unwrap().into_iter().map(|e| (e.label, e.id)).collect();
        assert_eq!(got, vec![("sit".into(), "z".into()), ("walk".into(), "a".into()), ("walk".into(), "b".into())]);
    }

    #[test]
    fn sha256_known_value() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("abc");
        fs::write(&p, b"abc").unwrap();
        assert_eq!(
            sha256_file(&p).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
