//! CSV persistence for cohorts and datasets.
//!
//! Header `id,t,s,x0,...,x{d-1},y`, one row per (individual, step), steps
//! numbered from 1. Floats carry 17 significant digits so reads are bit-exact.

use std::collections::BTreeMap;
use std::path::Path;

use super::{Cohort, TimeSeriesDataset};
use crate::error::{Error, Result};
use crate::io::write_atomic;

pub(crate) fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(d: usize) -> Vec<String> {
    let mut h = vec!["id".to_string(), "t".into(), "s".into()];
    h.extend((0..d).map(|j| format!("x{j}")));
    h.push("y".into());
    h
}

fn write_rows(
    path: &Path,
    d: usize,
    rows: impl Iterator<Item = (usize, usize, u8, Vec<f64>, Option<u8>)>,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(d))?;
    for (id, t, s, x, y) in rows {
        let mut rec = vec![id.to_string(), t.to_string(), s.to_string()];
        rec.extend(x.into_iter().map(fmt_f64));
        rec.push(y.map(|v| v.to_string()).unwrap_or_default());
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn write_dataset_csv(path: impl AsRef<Path>, ds: &TimeSeriesDataset) -> Result<()> {
    let rows = (0..ds.n()).flat_map(|i| {
        (0..ds.horizon()).map(move |k| (i, k + 1, ds.s()[i], ds.features(i, k).to_vec(), Some(ds.decision(i, k))))
    });
    write_rows(path.as_ref(), ds.d(), rows)
}

pub fn write_cohort_csv(path: impl AsRef<Path>, cohort: &Cohort) -> Result<()> {
    let rows = (0..cohort.n()).map(|i| (i, 1, cohort.s()[i], cohort.row(i).to_vec(), cohort.y1().map(|y| y[i])));
    write_rows(path.as_ref(), cohort.d(), rows)
}

struct Row {
    line: usize,
    id: usize,
    t: usize,
    s: u8,
    x: Vec<f64>,
    y: Option<u8>,
}

fn read_rows(path: &Path) -> Result<(usize, Vec<Row>)> {
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(file);
    let hdr = rdr.headers()?.clone();
    let names: Vec<&str> = hdr.iter().map(str::trim).collect();
    let n_cols = names.len();
    if n_cols < 5 || names[..3] != ["id", "t", "s"] || names[n_cols - 1] != "y" {
        return Err(parse_err(
            1,
            format!("expected header id,t,s,x0..,y, got {}", names.join(",")),
        ));
    }
    let d = n_cols - 4;
    for (j, name) in names[3..n_cols - 1].iter().enumerate() {
        if *name != format!("x{j}") {
            return Err(parse_err(1, format!("feature column {j} is named `{name}`")));
        }
    }

    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != n_cols {
            return Err(parse_err(
                line,
                format!("expected {n_cols} fields, found {}", rec.len()),
            ));
        }
        let field = |k: usize| rec[k].trim();
        let int = |k: usize| {
            field(k)
                .parse::<usize>()
                .map_err(|_| parse_err(line, format!("column `{}`: `{}` is not an integer", names[k], field(k))))
        };
        let id = int(0)?;
        let t = int(1)?;
        let s = match field(2) {
            "0" => 0,
            "1" => 1,
            other => {
                return Err(parse_err(
                    line,
                    format!("sensitive attribute must be 0 or 1, found `{other}`"),
                ))
            }
        };
        let x = (3..3 + d)
            .map(|k| {
                field(k).parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    parse_err(
                        line,
                        format!("column `{}`: `{}` is not a finite number", names[k], field(k)),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let y = match field(n_cols - 1) {
            "" => None,
            "0" => Some(0),
            "1" => Some(1),
            other => return Err(parse_err(line, format!("decision must be 0 or 1, found `{other}`"))),
        };
        if t == 0 {
            return Err(parse_err(line, "time steps start at 1".into()));
        }
        rows.push(Row { line, id, t, s, x, y });
    }
    Ok((d, rows))
}

/// Reads the `t = 1` rows of a cohort or dataset file; `d` comes from the header.
pub fn load_initial_cohort_csv(path: impl AsRef<Path>) -> Result<Cohort> {
    let path = path.as_ref();
    let (d, rows) = read_rows(path)?;
    let mut by_id: BTreeMap<usize, Row> = BTreeMap::new();
    for row in rows.into_iter().filter(|r| r.t == 1) {
        if let Some(prev) = by_id.get(&row.id) {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: row.line,
                reason: format!("id {} already defined on line {}", row.id, prev.line),
            });
        }
        by_id.insert(row.id, row);
    }
    if by_id.is_empty() {
        return Err(Error::invalid("cohort", format!("{} has no t=1 rows", path.display())));
    }
    let all_labeled = by_id.values().all(|r| r.y.is_some());
    let s = by_id.values().map(|r| r.s).collect();
    let x1 = by_id.values().flat_map(|r| r.x.iter().copied()).collect();
    let y1 = all_labeled.then(|| by_id.values().map(|r| r.y.unwrap()).collect());
    Cohort::new(d, s, x1, y1)
}

/// Reads a full dataset; every individual must have steps `1..=horizon` with decisions.
pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<TimeSeriesDataset> {
    let path = path.as_ref();
    let (d, rows) = read_rows(path)?;
    let mut by_id: BTreeMap<usize, BTreeMap<usize, Row>> = BTreeMap::new();
    for row in rows {
        let err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: row.line,
            reason,
        };
        if row.y.is_none() {
            return Err(err("missing decision".into()));
        }
        let steps = by_id.entry(row.id).or_default();
        if let Some((_, first)) = steps.iter().next() {
            if first.s != row.s {
                return Err(err(format!("sensitive attribute of id {} changes over time", row.id)));
            }
        }
        if steps.contains_key(&row.t) {
            return Err(err(format!("duplicate step {} for id {}", row.t, row.id)));
        }
        steps.insert(row.t, row);
    }
    let horizon = by_id.values().next().map_or(0, BTreeMap::len);
    if horizon == 0 {
        return Err(Error::invalid("dataset", format!("{} has no rows", path.display())));
    }
    let mut s = Vec::new();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (id, steps) in &by_id {
        let expected: Vec<usize> = (1..=horizon).collect();
        if steps.keys().copied().collect::<Vec<_>>() != expected {
            return Err(Error::invalid(
                "dataset",
                format!("id {id} does not cover steps 1..={horizon}"),
            ));
        }
        s.push(steps[&1].s);
        for row in steps.values() {
            x.extend_from_slice(&row.x);
            y.push(row.y.unwrap());
        }
    }
    TimeSeriesDataset::new(d, horizon, s, x, y)
}
