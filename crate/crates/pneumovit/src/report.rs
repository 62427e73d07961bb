//! CSV, JSON and aligned-text renderings of runs and analyses.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use pneumovit_core::analysis::{ComplexityRow, GeneralizationBound, ScalingStep, TimingPoint};
use pneumovit_core::metrics::MetricsReport;
use pneumovit_core::training::History;
use pneumovit_core::Real;
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

/// Seed column value of aggregated rows.
pub const MEAN_SEED: &str = "mean";

/// One line of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub fraction: Real,
    pub seed: String,
    pub accuracy: Real,
    pub precision: Real,
    pub recall: Real,
    pub f1: Real,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
    pub train_seconds: Real,
    pub timestamp: String,
}

impl ResultRow {
    pub fn new(
        model: &str,
        fraction: Real,
        seed: String,
        r: &MetricsReport,
        timestamp: String,
    ) -> Self {
        ResultRow {
            model: model.to_string(),
            fraction,
            seed,
            accuracy: r.accuracy,
            precision: r.precision,
            recall: r.recall,
            f1: r.f1,
            tp: r.matrix.tp,
            fp: r.matrix.fp,
            fn_: r.matrix.fn_,
            tn: r.matrix.tn,
            train_seconds: r.wall_time_s,
            timestamp,
        }
    }
}

pub fn now_timestamp() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

fn ensure_parent(path: &Path) -> AppResult<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e)),
        None => Ok(()),
    }
}

fn csv_err(path: &Path, e: csv::Error) -> AppError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => AppError::io(path, io),
        other => AppError::Runtime(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> AppResult<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| AppError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> AppResult<()> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| AppError::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| AppError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> AppResult<()> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| AppError::io(path, e))
}

pub fn read_results(path: &Path) -> AppResult<Vec<ResultRow>> {
    let mut r = csv::Reader::from_path(path)
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .collect::<Result<_, _>>()
        .map_err(|e| AppError::Data(format!("{}: {e}", path.display())))
}

#[derive(Serialize)]
struct HistoryRow {
    epoch: usize,
    lr: Real,
    train_loss: Real,
    val_loss: Real,
    seconds: f64,
}

pub fn write_history(path: &Path, h: &History) -> AppResult<()> {
    let rows: Vec<HistoryRow> = h
        .epochs
        .iter()
        .map(|e| HistoryRow {
            epoch: e.epoch,
            lr: e.lr,
            train_loss: e.train_loss,
            val_loss: e.val_loss,
            seconds: e.seconds,
        })
        .collect();
    write_csv(path, &rows)
}

/// Reads `model,fraction,seconds` rows. A results file is accepted too:
/// its `mean` rows supply `train_seconds`.
pub fn read_timings(path: &Path) -> AppResult<Vec<TimingPoint>> {
    let schema = |detail: String| AppError::Data(format!("{}: {detail}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| schema(e.to_string()))?;
    let headers = r.headers().map_err(|e| schema(e.to_string()))?.clone();
    let col = |n: &str| headers.iter().position(|h| h.trim() == n);
    let model = col("model").ok_or_else(|| schema("missing column 'model'".into()))?;
    let fraction = col("fraction").ok_or_else(|| schema("missing column 'fraction'".into()))?;
    let (seconds, seed) = match (col("seconds"), col("train_seconds"), col("seed")) {
        (Some(s), _, _) => (s, None),
        (None, Some(s), Some(seed)) => (s, Some(seed)),
        _ => return Err(schema("missing column 'seconds'".into())),
    };
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| schema(e.to_string()))?;
        if seed.is_some_and(|c| rec.get(c).map(str::trim) != Some(MEAN_SEED)) {
            continue;
        }
        let num = |c: usize, name: &str| -> AppResult<Real> {
            let raw = rec.get(c).unwrap_or("").trim();
            raw.parse()
                .map_err(|_| schema(format!("row {}: {name} '{raw}' is not a number", i + 2)))
        };
        out.push(TimingPoint {
            model: rec.get(model).unwrap_or("").trim().to_string(),
            fraction: num(fraction, "fraction")?,
            seconds: num(seconds, "seconds")?,
        });
    }
    if out.is_empty() {
        return Err(schema("no timing rows".into()));
    }
    Ok(out)
}

/// Left-aligned first column, right-aligned rest.
pub fn render_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut width: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in width.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| {
        let mut s = String::new();
        for (i, (c, w)) in cells.zip(&width).enumerate() {
            if i == 0 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "  {c:>w$}");
            }
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(&mut header.iter().copied());
    out += &(width
        .iter()
        .map(|&w| "-".repeat(w))
        .collect::<Vec<_>>()
        .join("  ")
        + "\n");
    for r in rows {
        out += &line(&mut r.iter().map(String::as_str));
    }
    out
}

pub fn results_table(rows: &[ResultRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                format!("{:.0}%", r.fraction * 100.0),
                r.seed.clone(),
                format!("{:.4}", r.accuracy),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.recall),
                format!("{:.4}", r.f1),
                format!("{}/{}/{}/{}", r.tp, r.fp, r.fn_, r.tn),
                format!("{:.1}", r.train_seconds),
            ]
        })
        .collect();
    render_table(
        &[
            "Model",
            "Data",
            "Seed",
            "Accuracy",
            "Precision",
            "Recall",
            "F1",
            "TP/FP/FN/TN",
            "Time (s)",
        ],
        &body,
    )
}

pub fn complexity_text(rows: &[ComplexityRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.input.clone(),
                r.n.to_string(),
                r.n_squared.to_string(),
                format!("{}x", r.relative),
                format!("{}x", r.sequence_ratio),
                format!("{:.1}x", r.scaled_relative),
            ]
        })
        .collect();
    render_table(
        &[
            "Model",
            "Input",
            "Seq. Length (N)",
            "N^2",
            "Rel. Comp.",
            "Seq. Ratio",
            "Scaled Rel.",
        ],
        &body,
    )
}

fn pct(f: Real) -> String {
    format!("{:.0}%", f * 100.0)
}

pub fn powerlaw_text(steps: &[ScalingStep]) -> String {
    let body: Vec<Vec<String>> = steps
        .iter()
        .map(|s| {
            vec![
                s.model.clone(),
                format!("{}->{}", pct(s.from), pct(s.to)),
                format!("{:.2}", s.fit.b),
                format!("{:.3}", s.fit.a),
                s.fit.regime.label().to_string(),
            ]
        })
        .collect();
    render_table(
        &["Model", "Data Increase", "Exponent b", "Scale a", "Scaling"],
        &body,
    )
}

#[derive(Serialize)]
struct PowerLawRow<'a> {
    model: &'a str,
    from: Real,
    to: Real,
    b: Real,
    a: Real,
    regime: &'static str,
}

pub fn write_powerlaw_csv(path: &Path, steps: &[ScalingStep]) -> AppResult<()> {
    let rows: Vec<PowerLawRow> = steps
        .iter()
        .map(|s| PowerLawRow {
            model: &s.model,
            from: s.from,
            to: s.to,
            b: s.fit.b,
            a: s.fit.a,
            regime: s.fit.regime.label(),
        })
        .collect();
    write_csv(path, &rows)
}

pub fn bound_text(b: &GeneralizationBound) -> String {
    format!(
        "generalization bound: vc={} delta={} n={} epsilon={:.6}\n",
        b.vc, b.delta, b.n, b.epsilon
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use pneumovit_core::metrics::{derive, ConfusionMatrix};

    #[test]
    fn table_alignment() {
        let t = render_table(&["a", "bb"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    bb\n---  --\nxyz   1\n");
    }

    #[test]
    fn results_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = derive(ConfusionMatrix {
            tp: 3,
            fp: 1,
            fn_: 0,
            tn: 4,
        })
        .unwrap();
        let rows = vec![
            ResultRow::new("cnn", 0.7, "42".into(), &m, "t0".into()),
            ResultRow::new("cnn", 0.7, MEAN_SEED.into(), &m, "t1".into()),
        ];
        let p = dir.path().join("r.csv");
        write_csv(&p, &rows).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        assert!(text.starts_with(
            "model,fraction,seed,accuracy,precision,recall,f1,tp,fp,fn,tn,train_seconds,timestamp\n"
        ));
        assert_eq!(read_results(&p).unwrap(), rows);
        let t = read_timings(&p).unwrap();
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].model, "cnn");
    }

    #[test]
    fn timing_schema_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        fs::write(&p, "model,frac,seconds\ncnn,1,2\n").unwrap();
        assert!(read_timings(&p)
            .unwrap_err()
            .to_string()
            .contains("fraction"));
        fs::write(&p, "model,fraction,seconds\ncnn,1,abc\n").unwrap();
        let e = read_timings(&p).unwrap_err();
        assert!(e.to_string().contains("row 2"), "{e}");
        assert_eq!(e.exit_code(), 3);
    }
}
