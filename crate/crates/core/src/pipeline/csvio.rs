use std::fs;
use std::path::{Path, PathBuf};

use super::{LabeledSeries, ScoreSeries};
use crate::error::{Error, Result};
use crate::synthgen::{Dataset, SPLIT_NAMES};

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line as usize,
        msg: msg.into(),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => parse_err(path, line, format!("{kind:?}")),
    }
}

fn parse_label(path: &Path, line: u64, cell: &str) -> Result<bool> {
    match cell.trim() {
        "0" => Ok(false),
        "1" => Ok(true),
        other => Err(parse_err(path, line, format!("label `{other}` is not 0 or 1"))),
    }
}

fn parse_t(path: &Path, line: u64, cell: &str, prev: Option<i64>) -> Result<i64> {
    let t: i64 = cell
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("timestep `{cell}` is not an integer")))?;
    if prev.is_some_and(|p| t <= p) {
        return Err(parse_err(path, line, "timestep column is not increasing"));
    }
    Ok(t)
}

/// Read a dataset CSV with header `t,f1,...,fD,label`.
pub fn load_csv(path: impl AsRef<Path>) -> Result<LabeledSeries> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let cols: Vec<&str> = header.iter().map(str::trim).collect();
    if cols.len() < 3 || cols[0] != "t" {
        return Err(parse_err(path, 1, "header must be `t,f1,...,fD,label`"));
    }
    if cols[cols.len() - 1] != "label" {
        return Err(parse_err(path, 1, "missing `label` column"));
    }
    let dims = cols.len() - 2;
    let mut columns: Vec<Vec<f64>> = vec![Vec::new(); dims];
    let mut labels = Vec::new();
    let mut prev = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        prev = Some(parse_t(path, line, &rec[0], prev)?);
        for (d, col) in columns.iter_mut().enumerate() {
            let cell = &rec[d + 1];
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(path, line, format!("value `{cell}` is not numeric")))?;
            if !v.is_finite() {
                return Err(parse_err(path, line, format!("value `{cell}` is not finite")));
            }
            col.push(v);
        }
        labels.push(parse_label(path, line, &rec[dims + 1])?);
    }
    if labels.is_empty() {
        return Err(parse_err(path, 1, "no data rows"));
    }
    LabeledSeries::new(dims, columns.concat(), labels)
}

/// Write a dataset CSV; floats use the shortest representation that reads
/// back to the same value.
pub fn write_csv(path: impl AsRef<Path>, series: &LabeledSeries) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["t".to_string()];
    header.extend((1..=series.dims()).map(|d| format!("f{d}")));
    header.push("label".into());
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    let mut row = Vec::with_capacity(series.dims() + 2);
    for t in 0..series.len() {
        row.clear();
        row.push(t.to_string());
        row.extend((0..series.dims()).map(|d| format!("{}", series.at(d, t))));
        row.push((series.labels[t] as u8).to_string());
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_scores_csv(path: impl AsRef<Path>, scores: &ScoreSeries) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["t", "score", "label"]).map_err(|e| csv_err(path, e))?;
    for (t, (s, l)) in scores.scores.iter().zip(&scores.labels).enumerate() {
        w.write_record([t.to_string(), format!("{s}"), (*l as u8).to_string()])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scores_csv(path: impl AsRef<Path>) -> Result<ScoreSeries> {
    let path = path.as_ref();
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["t", "score", "label"] {
        return Err(parse_err(path, 1, "header must be `t,score,label`"));
    }
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut prev = None;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        prev = Some(parse_t(path, line, &rec[0], prev)?);
        let s: f64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| parse_err(path, line, format!("score `{}` is not numeric", &rec[1])))?;
        scores.push(s);
        labels.push(parse_label(path, line, &rec[2])?);
    }
    ScoreSeries::new(scores, labels)
}

fn split_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.csv"))
}

/// Write `train.csv`, `val.csv`, `test.csv` and `meta.json` into `dir`.
pub fn save_dataset_dir(dir: impl AsRef<Path>, data: &Dataset) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    for (name, split) in data.splits() {
        write_csv(split_path(dir, name), split)?;
    }
    let meta = serde_json::to_string_pretty(&data.meta)?;
    fs::write(dir.join("meta.json"), meta + "\n")?;
    Ok(())
}

/// Read the three split CSVs of a dataset directory.
pub fn load_dataset_dir(dir: impl AsRef<Path>) -> Result<[LabeledSeries; 3]> {
    let dir = dir.as_ref();
    let [a, b, c] = SPLIT_NAMES.map(|n| split_path(dir, n));
    let out = [load_csv(a)?, load_csv(b)?, load_csv(c)?];
    if out.iter().any(|s| s.dims() != out[0].dims()) {
        return Err(Error::data(format!(
            "splits in {} disagree on the feature count",
            dir.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, body: &str) -> PathBuf {
        let p = dir.join("d.csv");
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn header_and_two_rows() {
        let dir = tempfile::tempdir().unwrap();
        let s = load_csv(write(dir.path(), "t,f1,f2,label\n0,1.5,2,0\n1,-3,4e-2,1\n")).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.dims(), 2);
        assert_eq!(s.dim(1), &[2.0, 0.04]);
        assert_eq!(s.labels, vec![false, true]);
    }

    #[test]
    fn malformed_inputs_report_lines() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            ("t,f1,label\n0,1,0\n1,x,0\n", 3),
            ("t,f1,label\n0,1,2\n", 2),
            ("t,f1,label\n0,1,0\n1,2\n", 3),
            ("t,f1,label\n1,1,0\n1,2,0\n", 3),
        ];
        for (body, line) in cases {
            match load_csv(write(dir.path(), body)) {
                Err(Error::Parse { line: l, .. }) => assert_eq!(l, line, "{body}"),
                other => panic!("expected parse error for {body:?}, got {other:?}"),
            }
        }
        assert!(matches!(
            load_csv(write(dir.path(), "t,f1,f2\n0,1,0\n")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let values = vec![0.1, 1.0 / 3.0, -2.718281828459045, 1e-17, 123456.789, -0.0];
        let s = LabeledSeries::new(2, values, vec![true, false, true]).unwrap();
        let p = dir.path().join("r.csv");
        write_csv(&p, &s).unwrap();
        assert_eq!(load_csv(&p).unwrap(), s);

        let sc = ScoreSeries::new(vec![0.25, 1.0 / 7.0], vec![false, true]).unwrap();
        let q = dir.path().join("s.csv");
        write_scores_csv(&q, &sc).unwrap();
        assert_eq!(read_scores_csv(&q).unwrap(), sc);
    }
}
