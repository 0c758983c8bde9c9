//! Loading real tabular data from CSV into train/test task splits.

use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{Dataset, DatasetKind};
use crate::error::{Error, Result};

/// Fraction of rows that go to the training split.
const TRAIN_FRACTION: f64 = 0.6;

/// How to interpret a CSV file.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct CsvSchema {
    /// Header name of the label column; None for unsupervised data.
    #[serde(default)]
    pub label_column: Option<String>,
    pub kind: DatasetKind,
    #[serde(default = "default_delimiter")]
    pub delimiter: char,
}

fn default_delimiter() -> char {
    ','
}

/// A loaded file, already normalized and split.
#[derive(Clone, Debug)]
pub struct LoadedCsv {
    pub train: Dataset,
    pub test: Dataset,
    /// Rows dropped because a cell was empty, "na", or "nan".
    pub dropped_rows: usize,
}

/// Load a headered CSV, normalize it, and split it 60/40 with a seeded
/// shuffle.
///
/// Features are standardized to mean 0 and variance 1 per column over the
/// whole file before splitting (constant columns become zeros); regression
/// labels are min-max scaled to [0, 1]; classification labels may be any
/// strings and are mapped to indices by sorted order of the distinct
/// values. Rows with missing cells are dropped and counted; any other
/// non-numeric cell is a parse error that names its line.
pub fn load_csv_dataset(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    seed: u64,
) -> Result<LoadedCsv> {
    let path = path.as_ref();
    if schema.kind == DatasetKind::Unsupervised && schema.label_column.is_some() {
        return Err(Error::Config(
            "unsupervised data cannot name a label column".into(),
        ));
    }
    if schema.kind != DatasetKind::Unsupervised && schema.label_column.is_none() {
        return Err(Error::Config(format!(
            "{:?} data needs a label column",
            schema.kind
        )));
    }

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(schema.delimiter as u8)
        .from_path(path)
        .map_err(csv_error)?;
    let headers = reader.headers().map_err(csv_error)?.clone();
    let label_idx = match &schema.label_column {
        Some(name) => Some(
            headers
                .iter()
                .position(|h| h == name)
                .ok_or_else(|| Error::Config(format!("no column named {name:?} in header")))?,
        ),
        None => None,
    };
    let n_features = headers.len() - usize::from(label_idx.is_some());
    if n_features == 0 {
        return Err(Error::Config("file has no feature columns".into()));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut raw_labels: Vec<String> = Vec::new();
    let mut dropped_rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(csv_error)?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        let mut features = Vec::with_capacity(n_features);
        let mut label = None;
        let mut missing = false;
        for (idx, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if cell.is_empty() || cell.eq_ignore_ascii_case("na") || cell.eq_ignore_ascii_case("nan")
            {
                missing = true;
                break;
            }
            if Some(idx) == label_idx {
                label = Some(cell.to_string());
            } else {
                match cell.parse::<f64>() {
                    Ok(v) if v.is_finite() => features.push(v),
                    _ => {
                        return Err(Error::Parse {
                            line,
                            msg: format!("cell {cell:?} is not a finite number"),
                        })
                    }
                }
            }
        }
        if missing {
            dropped_rows += 1;
            continue;
        }
        if features.len() != n_features {
            return Err(Error::Parse {
                line,
                msg: format!("expected {} cells, found {}", headers.len(), record.len()),
            });
        }
        if let Some(l) = label {
            raw_labels.push(l);
        }
        rows.push(features);
    }
    if rows.len() < 2 {
        return Err(Error::Contract(format!(
            "need at least 2 usable rows to split, got {}",
            rows.len()
        )));
    }

    let n = rows.len();
    let mut x = Array2::zeros((n, n_features));
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            x[[i, j]] = v;
        }
    }
    standardize_columns(&mut x);

    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train_len =
        ((n as f64 * TRAIN_FRACTION).round() as usize).clamp(1, n - 1);

    let take = |idxs: &[usize]| -> Array2<f64> {
        let mut out = Array2::zeros((idxs.len(), n_features));
        for (r, &i) in idxs.iter().enumerate() {
            out.row_mut(r).assign(&x.row(i));
        }
        out
    };
    let (train_idx, test_idx) = order.split_at(train_len);
    let x_train = take(train_idx);
    let x_test = take(test_idx);

    let (train, test) = match schema.kind {
        DatasetKind::Unsupervised => {
            (Dataset::unsupervised(x_train)?, Dataset::unsupervised(x_test)?)
        }
        DatasetKind::Regression => {
            let values = parse_regression_labels(&raw_labels)?;
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let scale = |v: f64| if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
            let pick = |idxs: &[usize]| {
                Array1::from_iter(idxs.iter().map(|&i| scale(values[i])))
            };
            (
                Dataset::regression(x_train, pick(train_idx))?,
                Dataset::regression(x_test, pick(test_idx))?,
            )
        }
        DatasetKind::Classification => {
            let (indices, num_classes) = index_class_labels(&raw_labels);
            let pick =
                |idxs: &[usize]| idxs.iter().map(|&i| indices[i]).collect::<Vec<_>>();
            (
                Dataset::classification(x_train, pick(train_idx), num_classes)?,
                Dataset::classification(x_test, pick(test_idx), num_classes)?,
            )
        }
    };
    Ok(LoadedCsv { train, test, dropped_rows })
}

fn csv_error(e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!("is_io_error guarantees the Io kind"),
        }
    } else {
        let line = e.position().map_or(0, |p| p.line() as usize);
        Error::Parse { line, msg: e.to_string() }
    }
}

fn standardize_columns(x: &mut Array2<f64>) {
    let n = x.nrows() as f64;
    for mut col in x.columns_mut() {
        let mean = col.sum() / n;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        if std > 1e-12 {
            col.mapv_inplace(|v| (v - mean) / std);
        } else {
            col.fill(0.0);
        }
    }
}

fn parse_regression_labels(raw: &[String]) -> Result<Array1<f64>> {
    raw.iter()
        .map(|s| {
            s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                Error::Contract(format!("regression label {s:?} is not a finite number"))
            })
        })
        .collect()
}

fn index_class_labels(raw: &[String]) -> (Vec<usize>, usize) {
    let mut distinct: Vec<&String> = raw.iter().collect();
    distinct.sort();
    distinct.dedup();
    let indices = raw
        .iter()
        .map(|l| distinct.binary_search(&l).expect("label came from this list"))
        .collect();
    (indices, distinct.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    fn regression_schema() -> CsvSchema {
        CsvSchema {
            label_column: Some("target".into()),
            kind: DatasetKind::Regression,
            delimiter: ',',
        }
    }

    #[test]
    fn splits_sixty_forty() {
        let f = write_csv(
            "a,target\n1,0\n2,1\n3,2\n4,3\n5,4\n6,5\n7,6\n8,7\n9,8\n10,9\n",
        );
        let loaded = load_csv_dataset(f.path(), &regression_schema(), 0).unwrap();
        assert_eq!(loaded.train.len(), 6);
        assert_eq!(loaded.test.len(), 4);
        assert_eq!(loaded.dropped_rows, 0);
    }

    #[test]
    fn normalization_has_exact_population_statistics() {
        let f = write_csv("a,b,target\n1,10,5\n2,20,7\n3,30,9\n4,40,11\n");
        let loaded = load_csv_dataset(f.path(), &regression_schema(), 3).unwrap();
        let all_x = ndarray::concatenate(
            ndarray::Axis(0),
            &[loaded.train.x.view(), loaded.test.x.view()],
        )
        .unwrap();
        for col in all_x.columns() {
            let mean = col.mean().unwrap();
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-12);
        }
        let mut ys: Vec<f64> = loaded
            .train
            .y
            .as_ref()
            .unwrap()
            .iter()
            .chain(loaded.test.y.as_ref().unwrap().iter())
            .cloned()
            .collect();
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(ys, vec![0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0]);
    }

    #[test]
    fn constant_feature_becomes_zeros() {
        let f = write_csv("a,b,target\n5,1,0\n5,2,1\n5,3,2\n5,4,3\n");
        let loaded = load_csv_dataset(f.path(), &regression_schema(), 1).unwrap();
        assert!(loaded.train.x.column(0).iter().all(|&v| v == 0.0));
        assert!(loaded.test.x.column(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn missing_cells_drop_the_row_and_count_it() {
        let f = write_csv("a,target\n1,0\n,1\n3,NA\n4,nan\n5,4\n6,5\n");
        let loaded = load_csv_dataset(f.path(), &regression_schema(), 2).unwrap();
        assert_eq!(loaded.dropped_rows, 3);
        assert_eq!(loaded.train.len() + loaded.test.len(), 3);
    }

    #[test]
    fn garbage_cell_is_a_parse_error_with_its_line() {
        let f = write_csv("a,target\n1,0\n2,1\nbogus,2\n");
        match load_csv_dataset(f.path(), &regression_schema(), 0) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 4);
                assert!(msg.contains("bogus"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn missing_label_column_is_a_config_error() {
        let f = write_csv("a,b\n1,2\n3,4\n");
        let err = load_csv_dataset(f.path(), &regression_schema(), 0).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err:?}");
    }

    #[test]
    fn class_labels_map_to_sorted_indices() {
        let f = write_csv(
            "a,target\n1,dog\n2,ant\n3,dog\n4,cat\n5,ant\n6,cat\n7,dog\n8,ant\n9,cat\n10,dog\n",
        );
        let schema = CsvSchema {
            label_column: Some("target".into()),
            kind: DatasetKind::Classification,
            delimiter: ',',
        };
        let loaded = load_csv_dataset(f.path(), &schema, 5).unwrap();
        assert_eq!(loaded.train.num_classes, 3);
        let all: Vec<usize> = loaded
            .train
            .labels
            .as_ref()
            .unwrap()
            .iter()
            .chain(loaded.test.labels.as_ref().unwrap().iter())
            .cloned()
            .collect();
        assert!(all.iter().all(|&l| l < 3));
        // Sorted distinct labels are [ant, cat, dog] with counts 3, 3, 4.
        let counts: Vec<usize> =
            (0..3).map(|class| all.iter().filter(|&&l| l == class).count()).collect();
        assert_eq!(counts, vec![3, 3, 4]);
    }

    #[test]
    fn split_is_deterministic_in_the_seed_and_sensitive_to_it() {
        let content = "a,target\n1,0\n2,1\n3,2\n4,3\n5,4\n6,5\n7,6\n8,7\n";
        let f = write_csv(content);
        let a = load_csv_dataset(f.path(), &regression_schema(), 7).unwrap();
        let b = load_csv_dataset(f.path(), &regression_schema(), 7).unwrap();
        assert_eq!(a.train.x, b.train.x);
        let c = load_csv_dataset(f.path(), &regression_schema(), 8).unwrap();
        assert_ne!(a.train.x, c.train.x);
    }

    #[test]
    fn unsupervised_files_load_without_labels() {
        let f = write_csv("a,b\n1,2\n3,4\n5,6\n7,8\n9,10\n");
        let schema = CsvSchema {
            label_column: None,
            kind: DatasetKind::Unsupervised,
            delimiter: ',',
        };
        let loaded = load_csv_dataset(f.path(), &schema, 0).unwrap();
        assert_eq!(loaded.train.len(), 3);
        assert!(loaded.train.y.is_none());
        assert!(loaded.train.labels.is_none());
    }
}
