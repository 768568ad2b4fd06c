//! File output: 16-bit PGM images with JSON sidecars, CSV traces, curves and
//! masks, and movie directories.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::calibration::PhaseMask;
use crate::error::{Error, Result};
use crate::focal::IntensityGrid;
use crate::time::{Movie, TimeTrace};

/// Sampling metadata written next to every image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageSidecar {
    pub dx: f64,
    pub dy: f64,
    pub origin: (f64, f64),
    pub z: f64,
    /// Intensity represented by the grey level 65535.
    pub scale: f64,
}

/// Shortest round-trip decimal text of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

/// Binary 16-bit PGM: one image row per y sample, x increasing along the
/// row, normalised to `scale` (the grid maximum when `None`).
pub fn write_pgm_to(mut w: impl Write, grid: &IntensityGrid, scale: Option<f64>) -> Result<f64> {
    let (nx, ny) = grid.values.dim();
    let scale = scale.unwrap_or_else(|| grid.max());
    write!(w, "P5\n{nx} {ny}\n65535\n")?;
    let mut buf = Vec::with_capacity(2 * nx * ny);
    for iy in 0..ny {
        for ix in 0..nx {
            let v = if scale > 0.0 {
                grid.values[[ix, iy]] / scale
            } else {
                0.0
            };
            let q = (v.clamp(0.0, 1.0) * 65535.0).round() as u16;
            buf.extend_from_slice(&q.to_be_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(scale)
}

/// Writes `path` (PGM) and `path` with a `.json` extension (sidecar).
pub fn write_pgm(path: impl AsRef<Path>, grid: &IntensityGrid) -> Result<()> {
    write_pgm_scaled(path, grid, None)
}

pub fn write_pgm_scaled(path: impl AsRef<Path>, grid: &IntensityGrid, scale: Option<f64>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path)?;
    let scale = write_pgm_to(&mut f, grid, scale)?;
    let side = ImageSidecar {
        dx: grid.dx,
        dy: grid.dy,
        origin: grid.origin,
        z: grid.plane_z,
        scale,
    };
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&side)? + "\n")?;
    Ok(())
}

/// Reads a 16-bit PGM back as grey levels indexed `[x, y]`.
pub fn read_pgm(path: impl AsRef<Path>) -> Result<Array2<u16>> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut header = Vec::new();
    while header.len() < 4 {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Argument("truncated PGM header".into()));
        }
        let line = line.split('#').next().unwrap_or("");
        header.extend(line.split_whitespace().map(str::to_owned));
    }
    if header[0] != "P5" || header[3] != "65535" {
        return Err(Error::Argument("only 16-bit binary PGM is supported".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|e| Error::Argument(format!("bad PGM size: {e}")))
    };
    let (nx, ny) = (parse(&header[1])?, parse(&header[2])?);
    let mut data = vec![0u8; 2 * nx * ny];
    r.read_exact(&mut data)?;
    Ok(Array2::from_shape_fn((nx, ny), |(ix, iy)| {
        let k = 2 * (iy * nx + ix);
        u16::from_be_bytes([data[k], data[k + 1]])
    }))
}

pub fn write_trace_csv(mut w: impl Write, trace: &TimeTrace) -> Result<()> {
    writeln!(w, "t_s,intensity")?;
    for (k, v) in trace.values.iter().enumerate() {
        writeln!(w, "{},{}", fmt_f64(trace.time(k)), fmt_f64(*v))?;
    }
    Ok(())
}

/// CSV with the given header and one row per record.
pub fn write_rows_csv(mut w: impl Write, header: &[&str], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Shape(format!(
                "row of {} values under {} columns",
                row.len(),
                header.len()
            )));
        }
        let text: Vec<String> = row.into_iter().map(fmt_f64).collect();
        writeln!(w, "{}", text.join(","))?;
    }
    Ok(())
}

/// `separation,value` rows.
pub fn write_curve_csv(w: impl Write, points: &[(f64, f64)]) -> Result<()> {
    write_rows_csv(w, &["separation", "value"], points.iter().map(|p| vec![p.0, p.1]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskMetadata {
    pub reference_index: (usize, usize),
    pub geometry_hash: String,
    pub shape: (usize, usize),
}

/// Mask as a CSV matrix (row i, column j, radians) plus a JSON sidecar.
pub fn write_mask(path: impl AsRef<Path>, mask: &PhaseMask, geometry_hash: &str) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path)?;
    for row in mask.per_beam_correction.rows() {
        let text: Vec<String> = row.iter().map(|v| fmt_f64(*v)).collect();
        writeln!(f, "{}", text.join(","))?;
    }
    let meta = MaskMetadata {
        reference_index: mask.reference_index,
        geometry_hash: geometry_hash.to_owned(),
        shape: mask.per_beam_correction.dim(),
    };
    fs::write(path.with_extension("json"), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

pub fn read_mask_csv(path: impl AsRef<Path>) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path)?;
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split(',')
                .map(|v| {
                    v.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Argument(format!("bad mask value {v:?}: {e}")))
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let ny = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ny) {
        return Err(Error::Shape("ragged mask matrix".into()));
    }
    Ok(Array2::from_shape_fn((rows.len(), ny), |(i, j)| rows[i][j]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovieManifest {
    pub dt: f64,
    pub dx: f64,
    pub frame_times: Vec<f64>,
    pub frames: Vec<String>,
    /// Intensity of grey level 65535, shared by every frame.
    pub scale: f64,
}

/// Numbered PGM frames on a common intensity scale plus `manifest.json`.
pub fn write_movie(dir: impl AsRef<Path>, movie: &Movie) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let scale = movie.frames.iter().map(|(_, g)| g.max()).fold(0.0, f64::max);
    let mut names = Vec::with_capacity(movie.frames.len());
    for (k, (_, grid)) in movie.frames.iter().enumerate() {
        let name = format!("frame_{k:04}.pgm");
        write_pgm_scaled(dir.join(&name), grid, Some(scale))?;
        names.push(name);
    }
    let times: Vec<f64> = movie.frames.iter().map(|f| f.0).collect();
    let dt = if times.len() > 1 {
        (times[times.len() - 1] - times[0]) / (times.len() - 1) as f64
    } else {
        0.0
    };
    let manifest = MovieManifest {
        dt,
        dx: movie.resolution,
        frame_times: times,
        frames: names,
        scale,
    };
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(path)
}
