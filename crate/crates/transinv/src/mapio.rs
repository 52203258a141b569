//! On-disk formats for maps and profiles: CSV grids with JSON metadata
//! sidecars, radial-profile CSVs, and P2 (ASCII) PGM images for visual
//! inspection. Values round-trip exactly through the shortest-decimal
//! float formatting.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::Tap;
use crate::sensitivity::{Metric, RadialProfile, SensitivityMap};

#[derive(Debug, Error)]
pub enum MapIoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: metadata: {source}")]
    Meta {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("maps in {dir} disagree on {field}")]
    Inconsistent { dir: PathBuf, field: &'static str },
    #[error("no map files found in {0}")]
    EmptyDir(PathBuf),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> MapIoError + '_ {
    move |source| MapIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Sidecar metadata stored next to each map CSV.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct MapMeta {
    pub class_id: u8,
    pub tap: Tap,
    pub metric: Metric,
    pub vector_dim: usize,
    pub sample_count: usize,
    pub max_shift: u32,
    pub degenerate_pairs: usize,
    pub post_softmax: bool,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub seed: Option<u64>,
}

fn meta_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("meta.json")
}

/// Write `class<k>.csv` (header `dx,dy,value`) plus `class<k>.meta.json`.
pub fn write_map(
    map: &SensitivityMap,
    csv_path: &Path,
    post_softmax: bool,
    seed: Option<u64>,
) -> Result<(), MapIoError> {
    let s = map.max_shift as i32;
    let mut out = String::from("dx,dy,value\n");
    for dy in -s..=s {
        for dx in -s..=s {
            out.push_str(&format!("{dx},{dy},{}\n", map.at(dx, dy)));
        }
    }
    fs::write(csv_path, out).map_err(io_err(csv_path))?;
    let meta = MapMeta {
        class_id: map.class_id,
        tap: map.tap,
        metric: map.metric,
        vector_dim: map.vector_dim,
        sample_count: map.sample_count,
        max_shift: map.max_shift,
        degenerate_pairs: map.degenerate_pairs,
        post_softmax,
        seed,
    };
    let mp = meta_path(csv_path);
    fs::write(&mp, serde_json::to_vec_pretty(&meta).expect("meta serializes"))
        .map_err(io_err(&mp))?;
    Ok(())
}

pub fn read_map(csv_path: &Path) -> Result<(SensitivityMap, MapMeta), MapIoError> {
    let mp = meta_path(csv_path);
    let meta: MapMeta = serde_json::from_slice(&fs::read(&mp).map_err(io_err(&mp))?)
        .map_err(|source| MapIoError::Meta { path: mp, source })?;
    let text = fs::read_to_string(csv_path).map_err(io_err(csv_path))?;
    let side = 2 * meta.max_shift as usize + 1;
    let mut grid = vec![f64::NAN; side * side];
    let mut seen = 0usize;
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 {
            if line.trim() != "dx,dy,value" {
                return Err(MapIoError::Format {
                    path: csv_path.to_path_buf(),
                    detail: format!("unexpected header `{line}`"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let bad = |detail: String| MapIoError::Format {
            path: csv_path.to_path_buf(),
            detail,
        };
        let dx: i32 = parts
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad dx", lineno + 1)))?;
        let dy: i32 = parts
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad dy", lineno + 1)))?;
        let value: f64 = parts
            .next()
            .and_then(|v| v.trim().parse().ok())
            .ok_or_else(|| bad(format!("line {}: bad value", lineno + 1)))?;
        let shift = meta.max_shift as i32;
        if dx.abs() > shift || dy.abs() > shift {
            return Err(bad(format!("line {}: shift out of range", lineno + 1)));
        }
        grid[((dy + shift) as usize) * side + (dx + shift) as usize] = value;
        seen += 1;
    }
    if seen != side * side {
        return Err(MapIoError::Format {
            path: csv_path.to_path_buf(),
            detail: format!("expected {} data rows, found {seen}", side * side),
        });
    }
    Ok((
        SensitivityMap {
            grid,
            max_shift: meta.max_shift,
            class_id: meta.class_id,
            tap: meta.tap,
            metric: meta.metric,
            sample_count: meta.sample_count,
            vector_dim: meta.vector_dim,
            degenerate_pairs: meta.degenerate_pairs,
        },
        meta,
    ))
}

/// Read every `class*.csv` map in a directory, sorted by class id, and
/// demand consistent tap/metric/grid metadata.
pub fn read_map_dir(dir: &Path) -> Result<Vec<(SensitivityMap, MapMeta)>, MapIoError> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.extension().is_some_and(|x| x == "csv")
                && p.file_stem()
                    .and_then(|s| s.to_str())
                    .is_some_and(|s| s.starts_with("class"))
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(MapIoError::EmptyDir(dir.to_path_buf()));
    }
    let mut maps = Vec::new();
    for p in entries {
        maps.push(read_map(&p)?);
    }
    maps.sort_by_key(|(m, _)| m.class_id);
    let first = &maps[0].1;
    for (_, meta) in &maps {
        if meta.tap != first.tap {
            return Err(MapIoError::Inconsistent {
                dir: dir.to_path_buf(),
                field: "tap",
            });
        }
        if meta.metric != first.metric {
            return Err(MapIoError::Inconsistent {
                dir: dir.to_path_buf(),
                field: "metric",
            });
        }
        if meta.max_shift != first.max_shift {
            return Err(MapIoError::Inconsistent {
                dir: dir.to_path_buf(),
                field: "max_shift",
            });
        }
        if meta.post_softmax != first.post_softmax {
            return Err(MapIoError::Inconsistent {
                dir: dir.to_path_buf(),
                field: "post_softmax",
            });
        }
    }
    Ok(maps)
}

/// CSV `radius,mean,count`.
pub fn write_profile(profile: &RadialProfile, path: &Path) -> Result<(), MapIoError> {
    let mut out = String::from("radius,mean,count\n");
    for ((r, v), c) in profile
        .radii
        .iter()
        .zip(&profile.values)
        .zip(&profile.counts)
    {
        out.push_str(&format!("{r},{v},{c}\n"));
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn read_profile(path: &Path) -> Result<RadialProfile, MapIoError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut radii = Vec::new();
    let mut values = Vec::new();
    let mut counts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if lineno == 0 || line.trim().is_empty() {
            continue;
        }
        let mut parts = line.split(',');
        let bad = || MapIoError::Format {
            path: path.to_path_buf(),
            detail: format!("line {}: malformed", lineno + 1),
        };
        radii.push(parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?);
        values.push(parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?);
        counts.push(parts.next().and_then(|v| v.trim().parse().ok()).ok_or_else(bad)?);
    }
    Ok(RadialProfile {
        radii,
        values,
        counts,
    })
}

/// ASCII PGM (P2) with [vmin, vmax] of the data mapped onto 0..255.
pub fn write_pgm(values: &[f64], width: usize, height: usize, path: &Path) -> Result<(), MapIoError> {
    assert_eq!(values.len(), width * height);
    let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if vmax > vmin { vmax - vmin } else { 1.0 };
    let mut out = format!("P2\n{width} {height}\n255\n");
    for row in values.chunks(width) {
        let mut first = true;
        for v in row {
            if !first {
                out.push(' ');
            }
            first = false;
            let level = (((v - vmin) / span) * 255.0).round().clamp(0.0, 255.0) as u32;
            out.push_str(&level.to_string());
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

pub fn map_pgm(map: &SensitivityMap, path: &Path) -> Result<(), MapIoError> {
    write_pgm(&map.grid, map.side(), map.side(), path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_map(metric: Metric, class_id: u8, shift: u32) -> SensitivityMap {
        let side = 2 * shift as usize + 1;
        SensitivityMap {
            grid: (0..side * side)
                .map(|i| (i as f64 * 0.731).sin() / 3.0 + 0.5)
                .collect(),
            max_shift: shift,
            class_id,
            tap: Tap::FcOut,
            metric,
            sample_count: 17,
            vector_dim: 10,
            degenerate_pairs: 1,
        }
    }

    #[test]
    fn map_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let map = sample_map(Metric::Cosine, 3, 10);
        let p = dir.path().join("class3.csv");
        write_map(&map, &p, false, Some(42)).unwrap();
        let (back, meta) = read_map(&p).unwrap();
        assert_eq!(back, map);
        assert_eq!(meta.seed, Some(42));
        assert_eq!(meta.sample_count, 17);
    }

    #[test]
    fn csv_has_header_and_441_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("class0.csv");
        write_map(&sample_map(Metric::Cosine, 0, 10), &p, false, None).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "dx,dy,value");
        assert_eq!(lines.len(), 1 + 441);
    }

    #[test]
    fn mixed_metadata_in_a_directory_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_map(
            &sample_map(Metric::Cosine, 0, 10),
            &dir.path().join("class0.csv"),
            false,
            None,
        )
        .unwrap();
        write_map(
            &sample_map(Metric::Euclidean, 1, 10),
            &dir.path().join("class1.csv"),
            false,
            None,
        )
        .unwrap();
        assert!(matches!(
            read_map_dir(dir.path()),
            Err(MapIoError::Inconsistent { field: "metric", .. })
        ));
    }

    #[test]
    fn profile_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prof = RadialProfile {
            radii: (0..=14).collect(),
            values: (0..=14).map(|i| 1.0 / (1.0 + i as f64)).collect(),
            counts: vec![1, 8, 12, 16, 32, 28, 40, 40, 48, 68, 56, 44, 24, 20, 4],
        };
        let p = dir.path().join("radial_mean.csv");
        write_profile(&prof, &p).unwrap();
        assert_eq!(read_profile(&p).unwrap(), prof);
    }

    #[test]
    fn pgm_has_the_promised_shape_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("map.pgm");
        write_pgm(&[0.0, 0.5, 1.0, 0.25], 2, 2, &p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "P2");
        assert_eq!(lines[1], "2 2");
        assert_eq!(lines[2], "255");
        assert_eq!(lines[3], "0 128");
        assert_eq!(lines[4], "255 64");
    }
}
