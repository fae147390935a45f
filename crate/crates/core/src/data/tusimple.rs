//! TuSimple label files: one JSON object per line with `lanes` (x lists,
//! -2 for absent points), `h_samples` (the shared y list) and `raw_file`.

use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{RgbImage, Sample};
use crate::error::{Error, Result};
use crate::geometry::{Lane, YGrid, INVALID_X};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TusimpleRecord {
    pub lanes: Vec<Vec<f64>>,
    pub h_samples: Vec<f64>,
    pub raw_file: String,
}

/// Parses one record; `line_no` is only used for error context.
pub fn parse_tusimple_record(line: &str, line_no: usize) -> Result<TusimpleRecord> {
    let record: TusimpleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
        line: line_no,
        msg: e.to_string(),
    })?;
    let fail = |msg: String| {
        Err(Error::Parse {
            line: line_no,
            msg,
        })
    };
    for (i, lane) in record.lanes.iter().enumerate() {
        if lane.len() != record.h_samples.len() {
            return fail(format!(
                "lane {i} has {} points but there are {} h_samples",
                lane.len(),
                record.h_samples.len()
            ));
        }
    }
    if record.h_samples.windows(2).any(|w| w[1] <= w[0]) {
        return fail("h_samples must be strictly increasing".into());
    }
    Ok(record)
}

impl TusimpleRecord {
    /// Resamples every lane onto `grid` after scaling source coordinates by
    /// `(sx, sy)`. Lanes without any valid grid row are dropped.
    ///
    /// A grid row is valid when it falls between two valid source rows (or
    /// exactly on one); x is linearly interpolated between them.
    pub fn to_lanes(&self, grid: &YGrid, scale: (f64, f64)) -> Vec<Lane> {
        let (sx, sy) = scale;
        let hs: Vec<f64> = self.h_samples.iter().map(|h| h * sy).collect();
        self.lanes
            .iter()
            .map(|xs| {
                let mut out_x = Vec::with_capacity(grid.n_points());
                let mut out_v = Vec::with_capacity(grid.n_points());
                for &y in grid.ys() {
                    match interpolate(&hs, xs, sx, y) {
                        Some(x) => {
                            out_x.push(x);
                            out_v.push(true);
                        }
                        None => {
                            out_x.push(INVALID_X);
                            out_v.push(false);
                        }
                    }
                }
                Lane {
                    xs: out_x,
                    valid: out_v,
                    score: 1.0,
                }
            })
            .filter(|l| l.num_valid() > 0)
            .collect()
    }

    /// A record with `h_samples` equal to the grid rows; invalid rows are -2.
    pub fn from_lanes(lanes: &[Lane], grid: &YGrid, raw_file: impl Into<String>) -> Self {
        Self {
            lanes: lanes
                .iter()
                .map(|l| {
                    l.xs.iter()
                        .zip(&l.valid)
                        .map(|(x, v)| if *v { *x } else { INVALID_X })
                        .collect()
                })
                .collect(),
            h_samples: grid.ys().to_vec(),
            raw_file: raw_file.into(),
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

fn is_present(x: f64) -> bool {
    x >= 0.0
}

fn interpolate(hs: &[f64], xs: &[f64], sx: f64, y: f64) -> Option<f64> {
    // rows that coincide with a sample up to rescaling round-off use it as is
    let tol = 1e-9 * y.abs().max(1.0);
    if let Some(k) = hs.iter().position(|h| (h - y).abs() <= tol) {
        return is_present(xs[k]).then(|| xs[k] * sx);
    }
    let k = hs.partition_point(|h| *h < y);
    if k == 0 || k == hs.len() {
        return None;
    }
    let (x0, x1) = (xs[k - 1], xs[k]);
    if !(is_present(x0) && is_present(x1)) {
        return None;
    }
    let t = (y - hs[k - 1]) / (hs[k] - hs[k - 1]);
    Some((x0 + (x1 - x0) * t) * sx)
}

/// Reads every record of a label file.
pub fn read_label_file(path: &Path) -> Result<Vec<TusimpleRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_tusimple_record(l, i + 1))
        .collect()
}

pub fn write_label_file(path: &Path, records: &[TusimpleRecord]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", r.to_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Loads a labelled dataset: images are read relative to `root`, resized to
/// `(img_height, img_width)` and labels rescaled accordingly.
pub fn load_dataset(
    label_file: &Path,
    root: &Path,
    grid: &YGrid,
    img_height: usize,
    img_width: usize,
) -> Result<Vec<Sample>> {
    read_label_file(label_file)?
        .into_iter()
        .map(|rec| {
            let path = root.join(&rec.raw_file);
            let image = RgbImage::load(&path)?;
            let scale = (
                img_width as f64 / image.width as f64,
                img_height as f64 / image.height as f64,
            );
            Ok(Sample {
                gt_lanes: rec.to_lanes(grid, scale),
                image: image.resized(img_height, img_width),
                meta: rec.raw_file,
            })
        })
        .collect()
}

/// Writes images as PNG under `dir/images/` and one `labels.json` in this
/// schema.
pub fn export_dataset(samples: &[Sample], grid: &YGrid, dir: &Path) -> Result<()> {
    let mut records = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let raw_file = format!("images/{i:05}.png");
        s.image.save(&dir.join(&raw_file))?;
        records.push(TusimpleRecord::from_lanes(&s.gt_lanes, grid, raw_file));
    }
    write_label_file(&dir.join("labels.json"), &records)
}
