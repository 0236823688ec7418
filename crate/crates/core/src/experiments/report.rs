//! Run reports and decision-grid files.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub const REPORT_SCHEMA: u32 = 1;

/// Deterministic run output. Wall-clock measurements never go in here; they
/// are written separately by [`write_timings`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub seed: u64,
    pub config: Value,
    pub metrics: BTreeMap<String, Value>,
    pub passed: bool,
    pub notes: Vec<String>,
}

impl RunReport {
    pub fn new(command: &str, seed: u64, config: Value) -> Self {
        Self {
            schema_version: REPORT_SCHEMA,
            command: command.to_string(),
            seed,
            config,
            metrics: BTreeMap::new(),
            passed: true,
            notes: Vec::new(),
        }
    }

    pub fn metric(&mut self, name: impl Into<String>, v: impl Serialize) {
        self.metrics.insert(name.into(), serde_json::to_value(v).expect("serializable metric"));
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializable report");
        s.push('\n');
        s
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.json"), self.to_json())?;
        Ok(())
    }
}

pub fn write_timings(dir: &Path, timings: &BTreeMap<String, f64>) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("timings.json"), serde_json::to_string_pretty(timings)? + "\n")?;
    Ok(())
}

/// One point of a decision grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub pred: u8,
    pub score: f64,
}

pub fn write_grid_csv(path: &Path, grid: &[GridPoint]) -> Result<()> {
    let mut out = String::from("x,y,pred,score\n");
    for p in grid {
        out.push_str(&format!("{},{},{},{}\n", p.x, p.y, p.pred, p.score));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_grid_csv(path: &Path) -> Result<Vec<GridPoint>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,pred,score") {
        return Err(Error::Config(format!("{} is not a decision-grid CSV", path.display())));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let bad = || Error::Config(format!("grid row {}: cannot parse {line:?}", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(GridPoint {
                x: f[0].parse().map_err(|_| bad())?,
                y: f[1].parse().map_err(|_| bad())?,
                pred: f[2].parse().map_err(|_| bad())?,
                score: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

/// Renders a square grid (row-major over y, then x) as a binary PPM, each
/// point a `scale`-pixel square shaded by its score.
pub fn render_ppm(grid: &[GridPoint], scale: usize) -> Result<Vec<u8>> {
    let side = (grid.len() as f64).sqrt().round() as usize;
    if side == 0 || side * side != grid.len() {
        return Err(Error::Config(format!("grid of {} points is not square", grid.len())));
    }
    if scale == 0 {
        return Err(Error::Config("pixel_scale must be at least 1".into()));
    }
    let px = side * scale;
    let mut out = Vec::new();
    write!(out, "P6\n{px} {px}\n255\n")?;
    // image rows top to bottom = decreasing y
    for row in (0..px).rev() {
        for col in 0..px {
            let p = grid[(row / scale) * side + col / scale];
            let s = p.score.clamp(0.0, 1.0);
            let (r, b) = ((255.0 * s).round() as u8, (255.0 * (1.0 - s)).round() as u8);
            out.extend_from_slice(&[r, 64, b]);
        }
    }
    Ok(out)
}
