//! BOP results CSV: `scene_id,im_id,obj_id,score,R,t,time` with `R` as nine
//! space-separated row-major values and `t` in millimeters.

use std::path::Path;

use anyhow::{bail, Context, Result};
use corrpose::Pose;

#[derive(Clone, Debug, PartialEq)]
pub struct BopRow {
    pub scene_id: u64,
    pub im_id: u64,
    pub obj_id: u64,
    pub score: f64,
    pub pose: Pose,
    /// Seconds, or -1 when not recorded.
    pub time: f64,
}

const HEADER: [&str; 7] = ["scene_id", "im_id", "obj_id", "score", "R", "t", "time"];

fn join(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v}")).collect::<Vec<_>>().join(" ")
}

pub fn write(path: &Path, rows: &[BopRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("cannot create {}", path.display()))?;
    w.write_record(HEADER)?;
    for r in rows {
        let (rot, t) = r.pose.to_row_major();
        let t_mm = t.map(|v| v * 1000.0);
        w.write_record([
            r.scene_id.to_string(),
            r.im_id.to_string(),
            r.obj_id.to_string(),
            format!("{}", r.score),
            join(&rot),
            join(&t_mm),
            format!("{}", r.time),
        ])?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}

fn floats<const N: usize>(field: &str, what: &str, line: u64) -> Result<[f64; N]> {
    let v: Vec<f64> = field
        .split_whitespace()
        .map(|s| s.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .with_context(|| format!("line {line}: {what} is not numeric"))?;
    v.try_into()
        .map_err(|v: Vec<f64>| anyhow::anyhow!("line {line}: {what} has {} values, expected {N}", v.len()))
}

pub fn read(path: &Path) -> Result<Vec<BopRow>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("cannot read {}", path.display()))?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != HEADER {
        bail!("{}: expected header {}", path.display(), HEADER.join(","));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let line = i as u64 + 2;
        let rec = rec.with_context(|| format!("{}: line {line}", path.display()))?;
        let int = |j: usize| -> Result<u64> {
            rec[j]
                .trim()
                .parse()
                .with_context(|| format!("line {line}: {} is not an integer", HEADER[j]))
        };
        let num = |j: usize| -> Result<f64> {
            rec[j]
                .trim()
                .parse()
                .with_context(|| format!("line {line}: {} is not numeric", HEADER[j]))
        };
        let rot: [f64; 9] = floats(&rec[4], "R", line)?;
        let t: [f64; 3] = floats(&rec[5], "t", line)?;
        let mut m = [0.0; 16];
        for row in 0..3 {
            m[4 * row..4 * row + 3].copy_from_slice(&rot[3 * row..3 * row + 3]);
            m[4 * row + 3] = t[row] / 1000.0;
        }
        m[15] = 1.0;
        rows.push(BopRow {
            scene_id: int(0)?,
            im_id: int(1)?,
            obj_id: int(2)?,
            score: num(3)?,
            pose: Pose::from_matrix4_row_major(&m),
            time: num(6)?,
        });
    }
    Ok(rows)
}
