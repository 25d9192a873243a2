use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Dataset, RowId};
use crate::error::{Error, Result};

/// Column roles of an input CSV file.
///
/// `features = None` takes every column not claimed by another role, in file
/// order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ColumnSchema {
    #[serde(default)]
    pub id: Option<String>,
    #[serde(default)]
    pub label: Option<String>,
    #[serde(default)]
    pub accepted: Option<String>,
    #[serde(default)]
    pub features: Option<Vec<String>>,
}

impl ColumnSchema {
    pub fn standard() -> Self {
        ColumnSchema {
            id: Some("id".into()),
            label: Some("y".into()),
            accepted: Some("a".into()),
            features: None,
        }
    }
}

impl FromStr for RowId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("row id {s:?} is not an unsigned integer"));
        match s.split_once('#') {
            Some((base, draw)) => Ok(RowId {
                base: base.trim().parse().map_err(|_| bad())?,
                draw: Some(draw.trim().parse().map_err(|_| bad())?),
            }),
            None => Ok(RowId::new(s.trim().parse().map_err(|_| bad())?)),
        }
    }
}

/// Reads a comma-separated file with one header row.
///
/// Row numbers in errors count data rows from 1. A label column named in the
/// schema but absent from the file yields an unlabeled dataset. A file
/// carrying labels on rejected rows is flagged as ground truth.
pub fn load_csv(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<Dataset> {
    read_table(path.as_ref(), schema, false).map(|(d, _)| d)
}

/// Reads observed application data and returns `(accepts, rejects)`:
/// accepts keep their labels, rejects are unlabeled. Label cells of
/// rejected rows may be blank; any values present there are dropped.
pub fn load_observed(path: impl AsRef<Path>, schema: &ColumnSchema) -> Result<(Dataset, Dataset)> {
    let path = path.as_ref();
    let (d, blanks) = read_table(path, schema, true)?;
    let acc = d
        .accepted()
        .ok_or_else(|| Error::Schema("observed data needs an accepted column".into()))?
        .to_vec();
    if d.labels().is_none() {
        return Err(Error::Schema("observed data needs a label column".into()));
    }
    if blanks == 0 && acc.contains(&0) {
        log::info!("{}: labels on rejected rows are ignored", path.display());
    }
    let ai: Vec<usize> = (0..d.n_rows()).filter(|&i| acc[i] == 1).collect();
    let ri: Vec<usize> = (0..d.n_rows()).filter(|&i| acc[i] == 0).collect();
    let accepts = d.select(&ai);
    let rejects = d.select(&ri).without_labels();
    // rebuilt so the ground-truth flag of the whole file does not carry over
    let accepts = Dataset::from_parts(
        accepts.features().clone(),
        accepts.labels().map(<[u8]>::to_vec),
        accepts.accepted().map(<[u8]>::to_vec),
        accepts.ids().to_vec(),
        Some(accepts.feature_names().to_vec()),
    )?;
    Ok((accepts, rejects))
}

/// Parses the file; with `blank_reject_labels`, empty label cells on
/// rejected rows read as 0 and are counted.
fn read_table(
    path: &Path,
    schema: &ColumnSchema,
    blank_reject_labels: bool,
) -> Result<(Dataset, usize)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers: Vec<String> = reader.headers()?.iter().map(str::to_string).collect();
    let find = |name: &str| headers.iter().position(|h| h == name);

    let id_col = match &schema.id {
        Some(name) => {
            Some(find(name).ok_or_else(|| Error::Schema(format!("id column {name:?} not found")))?)
        }
        None => None,
    };
    let label_col = schema.label.as_deref().and_then(find);
    let accepted_col = schema.accepted.as_deref().and_then(find);
    let feature_cols: Vec<usize> = match &schema.features {
        Some(names) => names
            .iter()
            .map(|n| {
                find(n).ok_or_else(|| Error::Schema(format!("feature column {n:?} not found")))
            })
            .collect::<Result<_>>()?,
        None => (0..headers.len())
            .filter(|c| Some(*c) != id_col && Some(*c) != label_col && Some(*c) != accepted_col)
            .collect(),
    };
    if feature_cols.is_empty() {
        return Err(Error::Schema("no feature columns".into()));
    }

    let mut values = Vec::new();
    let mut labels = label_col.map(|_| Vec::new());
    let mut accepted = accepted_col.map(|_| Vec::new());
    let mut ids = Vec::new();
    let mut blanks = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let row = i + 1;
        for &c in &feature_cols {
            let cell = record.get(c).unwrap_or("");
            if cell.is_empty() {
                return Err(Error::MissingValue {
                    row,
                    column: headers[c].clone(),
                });
            }
            let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
                row,
                column: headers[c].clone(),
                value: cell.to_string(),
            })?;
            if !v.is_finite() {
                return Err(Error::NonNumeric {
                    row,
                    column: headers[c].clone(),
                    value: cell.to_string(),
                });
            }
            values.push(v);
        }
        let flag = match accepted_col {
            Some(c) => Some(parse_flag(&record, c, row, &headers)?),
            None => None,
        };
        if let (Some(c), Some(out)) = (label_col, labels.as_mut()) {
            if blank_reject_labels && flag == Some(0) && record.get(c).unwrap_or("").is_empty() {
                blanks += 1;
                out.push(0);
            } else {
                out.push(parse_flag(&record, c, row, &headers).map_err(|e| match e {
                    Error::AcceptedOutOfRange { row } => Error::LabelOutOfRange { row },
                    other => other,
                })?);
            }
        }
        if let (Some(v), Some(out)) = (flag, accepted.as_mut()) {
            out.push(v);
        }
        ids.push(match id_col {
            Some(c) => record.get(c).unwrap_or("").parse::<RowId>()?,
            None => RowId::new(i as u64),
        });
    }

    let n = ids.len();
    let k = feature_cols.len();
    let features = DMatrix::from_row_slice(n, k, &values);
    let names = feature_cols.iter().map(|&c| headers[c].clone()).collect();
    let d = Dataset::from_parts(features, labels, accepted, ids, Some(names))?;
    if d.check_label_visibility().is_err() {
        return Ok((d.into_ground_truth(), blanks));
    }
    Ok((d, blanks))
}

fn parse_flag(
    record: &csv::StringRecord,
    col: usize,
    row: usize,
    headers: &[String],
) -> Result<u8> {
    let cell = record.get(col).unwrap_or("");
    if cell.is_empty() {
        return Err(Error::MissingValue {
            row,
            column: headers[col].clone(),
        });
    }
    let v: f64 = cell.parse().map_err(|_| Error::NonNumeric {
        row,
        column: headers[col].clone(),
        value: cell.to_string(),
    })?;
    if v == 0.0 {
        Ok(0)
    } else if v == 1.0 {
        Ok(1)
    } else {
        Err(Error::AcceptedOutOfRange { row })
    }
}

/// Writes `d` as `id,<features>,y,a` (label and flag columns only when
/// present). Floats use the shortest representation that round-trips.
pub fn write_csv(d: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        let mut header = vec!["id".to_string()];
        header.extend(d.feature_names().iter().cloned());
        if d.labels().is_some() {
            header.push("y".into());
        }
        if d.accepted().is_some() {
            header.push("a".into());
        }
        w.write_record(&header)?;
        for r in 0..d.n_rows() {
            let mut rec = vec![d.ids()[r].to_string()];
            rec.extend(d.features().row(r).iter().map(|v| v.to_string()));
            if let Some(y) = d.labels() {
                rec.push(y[r].to_string());
            }
            if let Some(a) = d.accepted() {
                rec.push(a[r].to_string());
            }
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io(path.as_ref(), e))?;
    }
    write_atomic(path.as_ref(), &buf)
}

/// Writes through a temporary sibling file and renames it into place.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn parses_roles() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "f1,f2,y,a\n1,2,0,1\n3,4.5,1,1\n-1,0,0,1\n");
        let d = load_csv(
            &p,
            &ColumnSchema {
                id: None,
                ..ColumnSchema::standard()
            },
        )
        .unwrap();
        assert_eq!(d.n_rows(), 3);
        assert_eq!(d.n_features(), 2);
        assert_eq!(d.labels().unwrap(), &[0, 1, 0]);
        assert_eq!(d.accepted().unwrap(), &[1, 1, 1]);
        assert_eq!(d.feature_names(), &["f1", "f2"]);
        assert_eq!(d.row(1), vec![3.0, 4.5]);
    }

    #[test]
    fn label_column_optional() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "f1,f2\n1,2\n3,4\n");
        let d = load_csv(
            &p,
            &ColumnSchema {
                id: None,
                ..ColumnSchema::standard()
            },
        )
        .unwrap();
        assert!(d.labels().is_none());
        assert!(d.accepted().is_none());
    }

    #[test]
    fn label_out_of_range_reports_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "f1,y\n1,0\n1,1\n1,0\n1,1\n1,2\n");
        let err = load_csv(
            &p,
            &ColumnSchema {
                id: None,
                ..ColumnSchema::standard()
            },
        )
        .unwrap_err();
        assert_eq!(err.to_string(), "label outside {0,1} at row 5");
    }

    #[test]
    fn errors() {
        let dir = tempfile::tempdir().unwrap();
        let schema = ColumnSchema::standard();
        assert!(matches!(
            load_csv(dir.path().join("missing.csv"), &schema),
            Err(Error::Io { .. })
        ));
        let p = write(&dir, "b.csv", "id,f1\n1,abc\n");
        assert!(matches!(
            load_csv(&p, &schema),
            Err(Error::NonNumeric { row: 1, .. })
        ));
        let p = write(&dir, "c.csv", "id,f1\n1,0.5\n1,0.7\n");
        assert!(matches!(load_csv(&p, &schema), Err(Error::DuplicateId(_))));
        let p = write(&dir, "d.csv", "id,f1\n1,\n");
        assert!(matches!(
            load_csv(&p, &schema),
            Err(Error::MissingValue { .. })
        ));
    }

    #[test]
    fn write_then_load_is_identity() {
        let dir = tempfile::tempdir().unwrap();
        let x = DMatrix::from_row_slice(2, 2, &[0.1, -2.5e-7, 3.0, 1.0 / 3.0]);
        let d = Dataset::new(x, Some(vec![1, 0]))
            .unwrap()
            .with_accepted(Some(vec![1, 0]))
            .unwrap();
        let p = dir.path().join("out.csv");
        write_csv(&d, &p).unwrap();
        let back = load_csv(&p, &ColumnSchema::standard()).unwrap();
        assert_eq!(back.features(), d.features());
        assert_eq!(back.ids(), d.ids());
        assert!(back.is_ground_truth());
    }

    #[test]
    fn observed_data_with_blank_reject_labels() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "o.csv",
            "id,f1,a,y\n1,0.5,1,0\n2,0.7,0,\n3,0.1,1,1\n4,0.9,0,\n",
        );
        assert!(matches!(
            load_csv(&p, &ColumnSchema::standard()),
            Err(Error::MissingValue { .. })
        ));
        let (acc, rej) = load_observed(&p, &ColumnSchema::standard()).unwrap();
        assert_eq!(acc.labels(), Some(&[0u8, 1][..]));
        assert!(!acc.is_ground_truth());
        assert_eq!(rej.n_rows(), 2);
        assert!(rej.labels().is_none());
        // a blank label on an accepted row is still an error
        let p = write(&dir, "p.csv", "id,f1,a,y\n1,0.5,1,\n2,0.7,0,\n");
        assert!(matches!(
            load_observed(&p, &ColumnSchema::standard()),
            Err(Error::MissingValue { .. })
        ));
    }
}
