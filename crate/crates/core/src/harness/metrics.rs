//! CSV output of a [`MetricsLog`].

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::train::{EpochRecord, MetricsLog, StepRecord};

pub const LOSS_FILE: &str = "loss.csv";
pub const ACCURACY_FILE: &str = "accuracy.csv";

/// Nine significant digits in scientific notation.
pub fn fmt_float(v: f64) -> String {
    format!("{v:.8e}")
}

fn write(path: &Path, body: String) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::WriteFailed(format!("{}: {e}", path.display())))
}

/// Write `loss.csv` (`step,loss,lr`) and `accuracy.csv` (`epoch,top1,top5`)
/// into `dir`, creating it if needed. Returns the two paths.
pub fn write_metrics(log: &MetricsLog, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir).map_err(|e| Error::WriteFailed(format!("{}: {e}", dir.display())))?;
    let mut loss = String::from("step,loss,lr\n");
    for s in &log.steps {
        loss += &format!("{},{},{}\n", s.step, fmt_float(s.loss), fmt_float(s.lr));
    }
    let mut acc = String::from("epoch,top1,top5\n");
    for e in &log.epochs {
        acc += &format!("{},{},{}\n", e.epoch, fmt_float(e.top1), fmt_float(e.top5));
    }
    let (lp, ap) = (dir.join(LOSS_FILE), dir.join(ACCURACY_FILE));
    write(&lp, loss)?;
    write(&ap, acc)?;
    Ok((lp, ap))
}

fn parse_rows(text: &str, header: &str) -> Result<Vec<(u64, f64, f64)>> {
    let bad = |what: String| Error::InvalidConfig(format!("metrics csv: {what}"));
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(bad(format!("expected header `{header}`")));
    }
    lines
        .map(|line| {
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != 3 {
                return Err(bad(format!("row `{line}`")));
            }
            let f = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("value `{s}`")));
            let i = cols[0].parse::<u64>().map_err(|_| bad(format!("index `{}`", cols[0])))?;
            Ok((i, f(cols[1])?, f(cols[2])?))
        })
        .collect()
}

/// Read back the two CSVs written by [`write_metrics`].
pub fn read_metrics(dir: &Path) -> Result<(Vec<StepRecord>, Vec<EpochRecord>)> {
    let steps = parse_rows(&fs::read_to_string(dir.join(LOSS_FILE))?, "step,loss,lr")?
        .into_iter()
        .map(|(step, loss, lr)| StepRecord { step, loss, lr })
        .collect();
    let epochs = parse_rows(&fs::read_to_string(dir.join(ACCURACY_FILE))?, "epoch,top1,top5")?
        .into_iter()
        .map(|(epoch, top1, top5)| EpochRecord { epoch, top1, top5 })
        .collect();
    Ok((steps, epochs))
}

/// Round `v` to the precision used in the CSVs.
pub fn at_printed_precision(v: f64) -> f64 {
    fmt_float(v).parse().expect("formatted float parses")
}
