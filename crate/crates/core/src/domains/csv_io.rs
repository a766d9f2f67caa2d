//! CSV persistence: header `label,f0,...,f{m-1}`, one sample per line.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

pub fn write_csv<W: Write>(dataset: &Dataset, out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out);
    let mut header = vec!["label".to_string()];
    header.extend((0..dataset.dim()).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..dataset.len() {
        let mut rec = Vec::with_capacity(dataset.dim() + 1);
        rec.push(dataset.label(i).to_string());
        rec.extend(dataset.row(i).iter().map(|x| format!("{x:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let f = File::create(path)?;
    write_csv(dataset, BufWriter::new(f))
}

/// Parses a dataset; `num_classes` defaults to `max(label) + 1`.
pub fn read_csv<R: Read>(input: R, num_classes: Option<usize>) -> Result<Dataset> {
    let mut r = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("label") {
        return Err(Error::Parse {
            line: 1,
            message: "header must start with `label`".into(),
        });
    }
    let dim = header.len() - 1;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != dim + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", dim + 1, rec.len()),
            });
        }
        let label: usize = rec[0].trim().parse().map_err(|_| Error::Parse {
            line,
            message: format!("label `{}` is not a non-negative integer", &rec[0]),
        })?;
        labels.push(label);
        for field in rec.iter().skip(1) {
            let x: f64 = field.trim().parse().map_err(|_| Error::Parse {
                line,
                message: format!("feature `{field}` is not a number"),
            })?;
            if !x.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("feature `{field}` is not finite"),
                });
            }
            features.push(x);
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let inferred = labels.iter().max().map_or(1, |m| m + 1);
    let classes = num_classes.unwrap_or(inferred);
    Dataset::new(features, dim, labels, classes)
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    read_csv(BufReader::new(File::open(path)?), None)
}

fn csv_err(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domains::generate_gaussian_mixture;

    #[test]
    fn round_trip_is_exact() {
        let d = generate_gaussian_mixture(3, 4, 10, 2.5, 4).unwrap();
        let mut buf = Vec::new();
        write_csv(&d, &mut buf).unwrap();
        let back = read_csv(buf.as_slice(), Some(3)).unwrap();
        assert_eq!(back, d);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("label,f0,f1,f2,f3\n"));
        assert!(!text.contains('\r'));
    }

    #[test]
    fn header_only_is_empty() {
        let err = read_csv("label,f0\n".as_bytes(), None).unwrap_err();
        assert_eq!(err.to_string(), "empty dataset");
    }

    #[test]
    fn nan_reports_line() {
        let err = read_csv("label,f0\n0,1.0\n1,NaN\n".as_bytes(), None).unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            e => panic!("{e}"),
        }
    }

    #[test]
    fn malformed_rows() {
        assert!(matches!(
            read_csv("label,f0\n0,1.0,2.0\n".as_bytes(), None),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_csv("label,f0\n0.5,1.0\n".as_bytes(), None),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            read_csv("label,f0\n-1,1.0\n".as_bytes(), None),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        let d = generate_gaussian_mixture(2, 3, 4, 1.0, 1).unwrap();
        save_csv(&d, &p).unwrap();
        assert_eq!(load_csv(&p).unwrap(), d);
    }
}
