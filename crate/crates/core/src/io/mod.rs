//! Plain-text point-cloud file formats (XYZ, OFF, ASCII PLY), correspondence
//! files, synthetic deformable families, and the run configuration format.
//!
//! Coordinates are printed with 9 significant digits, which round-trips
//! f32 exactly and f64 to about 1e-9 relative.

mod runconfig;
mod synth;

pub use runconfig::RunConfig;
pub use synth::{generate_family, BaseShape, SynthFamilyConfig};

use std::fs;
use std::path::Path;

use crate::error::Error;
use crate::geometry::{CorrespondenceMap, PointCloud};
use crate::scalar::Scalar;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    /// One point per line: `x y z [label]`, whitespace separated.
    Xyz,
    /// Object File Format; vertices are used, faces are ignored.
    Off,
    /// ASCII PLY with float x/y/z properties (extra properties skipped,
    /// an integer `label` property is honored).
    AsciiPly,
}

impl CloudFormat {
    pub fn from_extension(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("xyz") | Some("txt") => Ok(CloudFormat::Xyz),
            Some("off") => Ok(CloudFormat::Off),
            Some("ply") => Ok(CloudFormat::AsciiPly),
            other => Err(Error::Format(format!(
                "unknown cloud format for {:?} (extension {:?}); expected .xyz, .off, or .ply",
                path, other
            ))),
        }
    }
}

fn fmt_coord<T: Scalar>(v: T) -> String {
    format!("{:.8e}", v.as_f64())
}

fn parse_coord<T: Scalar>(s: &str, path: &Path, line: usize) -> Result<T> {
    s.parse::<f64>()
        .map(T::from_f64)
        .map_err(|_| Error::Format(format!("{}:{}: bad coordinate {s:?}", path.display(), line)))
}

/// Reads a cloud, guessing the format from the extension.
pub fn load_cloud<T: Scalar>(path: impl AsRef<Path>) -> Result<PointCloud<T>> {
    let path = path.as_ref();
    load_cloud_as(path, CloudFormat::from_extension(path)?)
}

pub fn load_cloud_as<T: Scalar>(path: impl AsRef<Path>, format: CloudFormat) -> Result<PointCloud<T>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    if text.trim().is_empty() {
        return Err(Error::Format(format!(
            "{}: empty file is not a point cloud",
            path.display()
        )));
    }
    match format {
        CloudFormat::Xyz => parse_xyz(&text, path),
        CloudFormat::Off => parse_off(&text, path),
        CloudFormat::AsciiPly => parse_ply(&text, path),
    }
}

pub fn save_cloud<T: Scalar>(
    pc: &PointCloud<T>,
    path: impl AsRef<Path>,
    format: CloudFormat,
) -> Result<()> {
    let text = match format {
        CloudFormat::Xyz => write_xyz(pc),
        CloudFormat::Off => write_off(pc),
        CloudFormat::AsciiPly => write_ply(pc),
    };
    fs::write(path, text)?;
    Ok(())
}

// ── XYZ ───────────────────────────────────────────────────────────────

fn parse_xyz<T: Scalar>(text: &str, path: &Path) -> Result<PointCloud<T>> {
    let mut points = Vec::new();
    let mut labels: Vec<usize> = Vec::new();
    let mut saw_label = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(Error::Format(format!(
                "{}:{}: expected 3 or 4 fields, got {}",
                path.display(),
                idx + 1,
                fields.len()
            )));
        }
        let has_label = fields.len() == 4;
        match saw_label {
            None => saw_label = Some(has_label),
            Some(expected) if expected != has_label => {
                return Err(Error::Format(format!(
                    "{}:{}: inconsistent label column",
                    path.display(),
                    idx + 1
                )));
            }
            _ => {}
        }
        for f in &fields[..3] {
            points.push(parse_coord::<T>(f, path, idx + 1)?);
        }
        if has_label {
            labels.push(fields[3].parse().map_err(|_| {
                Error::Format(format!(
                    "{}:{}: bad label {:?}",
                    path.display(),
                    idx + 1,
                    fields[3]
                ))
            })?);
        }
    }
    let labels = (!labels.is_empty()).then_some(labels);
    PointCloud::new(points, labels)
}

fn write_xyz<T: Scalar>(pc: &PointCloud<T>) -> String {
    let mut out = String::new();
    for (i, p) in pc.points().chunks_exact(3).enumerate() {
        out.push_str(&fmt_coord(p[0]));
        out.push(' ');
        out.push_str(&fmt_coord(p[1]));
        out.push(' ');
        out.push_str(&fmt_coord(p[2]));
        if let Some(labels) = pc.labels() {
            out.push(' ');
            out.push_str(&labels[i].to_string());
        }
        out.push('\n');
    }
    out
}

// ── OFF ───────────────────────────────────────────────────────────────

fn parse_off<T: Scalar>(text: &str, path: &Path) -> Result<PointCloud<T>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: missing OFF header", path.display())))?;
    if header != "OFF" {
        return Err(Error::Format(format!(
            "{}: expected OFF header, got {header:?}",
            path.display()
        )));
    }
    let (counts_line, counts) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: missing OFF counts", path.display())))?;
    let nums: Vec<&str> = counts.split_whitespace().collect();
    if nums.len() < 2 {
        return Err(Error::Format(format!(
            "{}:{}: OFF counts need vertices and faces",
            path.display(),
            counts_line
        )));
    }
    let nv: usize = nums[0].parse().map_err(|_| {
        Error::Format(format!("{}:{}: bad vertex count", path.display(), counts_line))
    })?;
    let mut points = Vec::with_capacity(nv * 3);
    for _ in 0..nv {
        let (lineno, line) = lines.next().ok_or_else(|| {
            Error::Format(format!(
                "{}: vertex count {} does not match file contents",
                path.display(),
                nv
            ))
        })?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 3 {
            return Err(Error::Format(format!(
                "{}:{}: vertex needs 3 coordinates",
                path.display(),
                lineno
            )));
        }
        for f in &fields[..3] {
            points.push(parse_coord::<T>(f, path, lineno)?);
        }
    }
    // remaining lines are faces; ignored
    PointCloud::new(points, None)
}

fn write_off<T: Scalar>(pc: &PointCloud<T>) -> String {
    let mut out = format!("OFF\n{} 0 0\n", pc.len());
    for p in pc.points().chunks_exact(3) {
        out.push_str(&format!(
            "{} {} {}\n",
            fmt_coord(p[0]),
            fmt_coord(p[1]),
            fmt_coord(p[2])
        ));
    }
    out
}

// ── ASCII PLY ─────────────────────────────────────────────────────────

fn parse_ply<T: Scalar>(text: &str, path: &Path) -> Result<PointCloud<T>> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (_, first) = lines
        .next()
        .ok_or_else(|| Error::Format(format!("{}: empty PLY", path.display())))?;
    if first != "ply" {
        return Err(Error::Format(format!(
            "{}: expected 'ply' magic, got {first:?}",
            path.display()
        )));
    }

    let mut vertex_count: Option<usize> = None;
    let mut in_vertex_element = false;
    let mut properties: Vec<String> = Vec::new();
    let mut element_order: Vec<(String, usize)> = Vec::new();
    for (lineno, line) in lines.by_ref() {
        if line == "end_header" {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        match fields.as_slice() {
            ["format", "ascii", _] => {}
            ["format", other, ..] => {
                return Err(Error::Format(format!(
                    "{}:{}: only ascii PLY is supported, got {other:?}",
                    path.display(),
                    lineno
                )));
            }
            ["comment", ..] => {}
            ["element", name, count] => {
                let count: usize = count.parse().map_err(|_| {
                    Error::Format(format!("{}:{}: bad element count", path.display(), lineno))
                })?;
                in_vertex_element = *name == "vertex";
                if in_vertex_element {
                    vertex_count = Some(count);
                }
                element_order.push((name.to_string(), count));
            }
            ["property", _ty, name] if in_vertex_element => {
                properties.push(name.to_string());
            }
            ["property", ..] => {}
            [] => {}
            _ => {
                return Err(Error::Format(format!(
                    "{}:{}: unrecognized header line {line:?}",
                    path.display(),
                    lineno
                )));
            }
        }
    }
    let vertex_count = vertex_count.ok_or_else(|| {
        Error::Format(format!("{}: PLY has no vertex element", path.display()))
    })?;
    let idx_of = |name: &str| -> Result<usize> {
        properties.iter().position(|p| p == name).ok_or_else(|| {
            Error::Format(format!(
                "{}: PLY vertex element lacks property {name:?}",
                path.display()
            ))
        })
    };
    let (xi, yi, zi) = (idx_of("x")?, idx_of("y")?, idx_of("z")?);
    let label_idx = properties.iter().position(|p| p == "label");

    let mut points = Vec::with_capacity(vertex_count * 3);
    let mut labels = Vec::new();
    let mut read = 0usize;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        // elements are laid out in declaration order; only the vertex
        // block is consumed, everything after (faces etc.) is ignored
        if read == vertex_count {
            break;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < properties.len() {
            return Err(Error::Format(format!(
                "{}:{}: vertex row has {} of {} properties",
                path.display(),
                lineno,
                fields.len(),
                properties.len()
            )));
        }
        points.push(parse_coord::<T>(fields[xi], path, lineno)?);
        points.push(parse_coord::<T>(fields[yi], path, lineno)?);
        points.push(parse_coord::<T>(fields[zi], path, lineno)?);
        if let Some(li) = label_idx {
            labels.push(fields[li].parse().map_err(|_| {
                Error::Format(format!("{}:{}: bad label", path.display(), lineno))
            })?);
        }
        read += 1;
    }
    if read != vertex_count {
        return Err(Error::Format(format!(
            "{}: header declares {vertex_count} vertices, found {read}",
            path.display()
        )));
    }
    let labels = (!labels.is_empty()).then_some(labels);
    PointCloud::new(points, labels)
}

fn write_ply<T: Scalar>(pc: &PointCloud<T>) -> String {
    let mut out = String::from("ply\nformat ascii 1.0\n");
    out.push_str(&format!("element vertex {}\n", pc.len()));
    out.push_str("property float x\nproperty float y\nproperty float z\n");
    if pc.labels().is_some() {
        out.push_str("property int label\n");
    }
    out.push_str("end_header\n");
    for (i, p) in pc.points().chunks_exact(3).enumerate() {
        out.push_str(&format!(
            "{} {} {}",
            fmt_coord(p[0]),
            fmt_coord(p[1]),
            fmt_coord(p[2])
        ));
        if let Some(labels) = pc.labels() {
            out.push_str(&format!(" {}", labels[i]));
        }
        out.push('\n');
    }
    out
}

// ── correspondence files ──────────────────────────────────────────────

/// Two whitespace-separated columns per line: source index, target index.
pub fn save_correspondence(map: &CorrespondenceMap, path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for (i, &t) in map.target_of().iter().enumerate() {
        out.push_str(&format!("{i} {t}\n"));
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_correspondence(path: impl AsRef<Path>, target_size: usize) -> Result<CorrespondenceMap> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Format(format!(
                "{}:{}: expected two indices",
                path.display(),
                idx + 1
            )));
        }
        let s: usize = fields[0].parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad source index", path.display(), idx + 1))
        })?;
        let t: usize = fields[1].parse().map_err(|_| {
            Error::Format(format!("{}:{}: bad target index", path.display(), idx + 1))
        })?;
        pairs.push((s, t));
    }
    if pairs.is_empty() {
        return Err(Error::Format(format!(
            "{}: empty correspondence file",
            path.display()
        )));
    }
    pairs.sort_by_key(|&(s, _)| s);
    for (expect, &(s, _)) in pairs.iter().enumerate() {
        if s != expect {
            return Err(Error::Format(format!(
                "{}: source indices must cover 0..n contiguously (missing or duplicate {expect})",
                path.display()
            )));
        }
    }
    CorrespondenceMap::new(pairs.into_iter().map(|(_, t)| t).collect(), target_size)
}

/// Loads every recognized cloud file in a directory, sorted by file name.
pub fn load_cloud_dir<T: Scalar>(dir: impl AsRef<Path>) -> Result<Vec<PointCloud<T>>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| CloudFormat::from_extension(p).is_ok())
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Format(format!(
            "{}: no cloud files (.xyz/.off/.ply) found",
            dir.display()
        )));
    }
    paths.into_iter().map(load_cloud).collect()
}
