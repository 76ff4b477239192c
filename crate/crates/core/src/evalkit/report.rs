//! Report emission: CSV and Markdown summaries, JSONL records, overlays.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use super::{Stat, Summary, SUCCESS_IOU};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::imaging::Image;

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub level: String,
    pub summary: Summary,
}

fn f(v: f64) -> String {
    format!("{v:.4}")
}

fn opt(s: Option<Stat>, pick: fn(Stat) -> f64) -> String {
    s.map_or_else(|| "--".to_string(), |s| f(pick(s)))
}

/// Accuracy columns only, so reports are byte-identical across runs with
/// the same seed; wall-clock times go to the Markdown table and timing
/// files.
pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut out = String::from(
        "method,level,count,loc_err_mean,loc_err_median,scale_err_mean,scale_err_median,\
         rot_err_mean,rot_err_median,miou,succ_pct,n_matched,matched_loc_err_mean,\
         matched_scale_err_mean,matched_rot_err_mean\n",
    );
    for r in rows {
        let s = &r.summary;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.level,
            s.count,
            f(s.loc_err.mean),
            f(s.loc_err.median),
            opt(s.scale_err, |s| s.mean),
            opt(s.scale_err, |s| s.median),
            f(s.rot_err.mean),
            f(s.rot_err.median),
            f(s.miou),
            format!("{:.2}", 100.0 * s.success_rate),
            s.n_matched,
            opt(s.matched_loc_err, |s| s.mean),
            opt(s.matched_scale_err, |s| s.mean),
            opt(s.matched_rot_err, |s| s.mean),
        );
    }
    out
}

/// Table with the usual column order: errors, mIoU, time, success.
pub fn markdown_table(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "Success: rotated IoU >= {SUCCESS_IOU}. Errors are mean (median) over all samples; \
         matched-only means in the last columns.\n\n\
         | Method | Level | Loc.Err | ScaleErr | Rot.Err | mIoU | Time(ms) | Succ.(%) | Loc.Err (matched) | Rot.Err (matched) |\n\
         |---|---|---|---|---|---|---|---|---|---|\n"
    );
    for r in rows {
        let s = &r.summary;
        let pair = |st: Stat| format!("{:.2} ({:.2})", st.mean, st.median);
        let _ = writeln!(
            out,
            "| {} | {} | {} | {} | {} | {:.3} | {:.1} | {:.1} | {} | {} |",
            r.method,
            r.level,
            pair(s.loc_err),
            s.scale_err.map_or_else(|| "--".into(), |v| format!("{:.3} ({:.3})", v.mean, v.median)),
            pair(s.rot_err),
            s.miou,
            s.time_ms.median,
            100.0 * s.success_rate,
            s.matched_loc_err.map_or_else(|| "--".into(), |v| format!("{:.2}", v.mean)),
            s.matched_rot_err.map_or_else(|| "--".into(), |v| format!("{:.2}", v.mean)),
        );
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Parses a JSONL file. Blank lines are ignored; malformed lines are
/// returned separately as `(1-based line, message)`.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<(Vec<T>, Vec<(usize, String)>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut items = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(v) => items.push(v),
            Err(e) => bad.push((i + 1, e.to_string())),
        }
    }
    Ok((items, bad))
}

/// Search image with ground-truth footprints in red and predictions in
/// green.
pub fn draw_overlay(search: &Image, gts: &[Pose], preds: &[Pose], template_size: (usize, usize)) -> Image {
    let mut img = search.to_rgb();
    let (w, h) = template_size;
    let mut draw = |p: &Pose, color: [f32; 3]| {
        img.draw_polygon(&p.footprint(w, h).corners(), &color);
    };
    for g in gts {
        draw(g, [1.0, 0.0, 0.0]);
    }
    for p in preds {
        draw(p, [0.0, 1.0, 0.0]);
    }
    img
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalkit::{evaluate, EvalRecord, Timings};

    fn rows() -> Vec<SummaryRow> {
        let g = Pose::new(40.0, 40.0, 5.0, 1.0, 1.0).unwrap();
        let p = Pose::new(42.0, 40.0, 8.0, 1.0, 1.0).unwrap();
        let recs = [
            EvalRecord::new(g, g, (36, 36), Timings::default()),
            EvalRecord::new(g, p, (36, 36), Timings::default()),
        ];
        vec![SummaryRow {
            method: "ncc".into(),
            level: "S1".into(),
            summary: evaluate(&recs, false).unwrap(),
        }]
    }

    #[test]
    fn csv_and_markdown() {
        let csv = summary_csv(&rows());
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[1].starts_with("ncc,S1,2,1.0000,1.0000,--,--,1.5000"));
        let md = markdown_table(&rows());
        assert!(md.contains("| ncc | S1 |") && md.contains("IoU >= 0.5"));
    }

    #[test]
    fn jsonl_round_trip_and_bad_lines() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.jsonl");
        write_jsonl(&p, &[1, 2, 3]).unwrap();
        let (v, bad): (Vec<i32>, _) = read_jsonl(&p).unwrap();
        assert_eq!((v, bad.len()), (vec![1, 2, 3], 0));
        std::fs::write(&p, "1\n\nnope\n4\n").unwrap();
        let (v, bad): (Vec<i32>, _) = read_jsonl(&p).unwrap();
        assert_eq!(v, vec![1, 4]);
        assert_eq!(bad[0].0, 3);
    }

    #[test]
    fn overlay_colors() {
        let img = Image::filled(100, 100, 1, 0.5);
        let g = Pose::new(50.0, 50.0, 0.0, 1.0, 1.0).unwrap();
        let p = Pose::new(30.0, 30.0, 0.0, 1.0, 1.0).unwrap();
        let o = draw_overlay(&img, &[g], &[p], (20, 20));
        assert_eq!(o.channels(), 3);
        let red = o.data().chunks(3).filter(|c| c == &[1.0, 0.0, 0.0]).count();
        let green = o.data().chunks(3).filter(|c| c == &[0.0, 1.0, 0.0]).count();
        assert!(red > 40 && green > 40);
    }
}
