use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::PointCloud;
use crate::error::{Error, Result};

const BIN_MAGIC: &[u8; 4] = b"MKPC";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CloudFormat {
    XyzAscii,
    PlyAscii,
    BinF32,
}

impl CloudFormat {
    /// Guess from the file extension (`.xyz`, `.ply`, `.bin`).
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()? {
            "xyz" | "txt" => Some(CloudFormat::XyzAscii),
            "ply" => Some(CloudFormat::PlyAscii),
            "bin" | "mkpc" => Some(CloudFormat::BinF32),
            _ => None,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            CloudFormat::XyzAscii => "xyz",
            CloudFormat::PlyAscii => "ply",
            CloudFormat::BinF32 => "bin",
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xyz-ascii" | "xyz" => Ok(CloudFormat::XyzAscii),
            "ply-ascii" | "ply" => Ok(CloudFormat::PlyAscii),
            "bin-f32" | "bin" => Ok(CloudFormat::BinF32),
            other => Err(Error::InvalidArgument(format!(
                "unknown cloud format `{other}` (expected xyz-ascii, ply-ascii or bin-f32)"
            ))),
        }
    }
}

fn sidecar(path: &Path, ext: &str) -> PathBuf {
    path.with_extension(ext)
}

/// Read a point cloud. Label and correspondence side-cars (`<stem>.labels`,
/// `<stem>.corr`) are picked up when present next to the file.
pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let coords = match format {
        CloudFormat::BinF32 => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            parse_bin(path, &bytes)?
        }
        CloudFormat::XyzAscii => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_xyz(path, &text)?
        }
        CloudFormat::PlyAscii => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            parse_ply(path, &text)?
        }
    };
    if coords.is_empty() {
        return Err(Error::parse(
            path,
            "end of file".into(),
            "point cloud is empty",
        ));
    }
    let n = coords.len();
    let labels = read_sidecar::<u32>(&sidecar(path, "labels"), n)?;
    let corr = read_sidecar::<i64>(&sidecar(path, "corr"), n)?;
    let cloud = PointCloud {
        coords,
        features: None,
        labels,
        corr,
    };
    cloud.validate(None)?;
    Ok(cloud)
}

/// Write a point cloud plus side-cars for whatever per-point data it carries.
///
/// `bin-f32` stores single precision, so coordinates round-trip bit-exactly
/// only when they are representable as `f32`. The ASCII formats use the
/// shortest round-trip decimal representation of each `f64`.
pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    cloud.validate(None)?;
    match format {
        CloudFormat::BinF32 => {
            let n = u32::try_from(cloud.len())
                .map_err(|_| Error::InvalidArgument("too many points for bin-f32".into()))?;
            let mut buf = Vec::with_capacity(8 + 12 * cloud.len());
            buf.extend_from_slice(BIN_MAGIC);
            buf.extend_from_slice(&n.to_le_bytes());
            for p in &cloud.coords {
                for v in p {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            fs::write(path, buf).map_err(|e| Error::io(path, e))?;
        }
        CloudFormat::XyzAscii => {
            let mut out = String::with_capacity(cloud.len() * 40);
            for p in &cloud.coords {
                let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))?;
        }
        CloudFormat::PlyAscii => {
            let mut out = String::with_capacity(cloud.len() * 40 + 128);
            out.push_str("ply\nformat ascii 1.0\n");
            let _ = writeln!(out, "element vertex {}", cloud.len());
            out.push_str("property double x\nproperty double y\nproperty double z\nend_header\n");
            for p in &cloud.coords {
                let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
            }
            fs::write(path, out).map_err(|e| Error::io(path, e))?;
        }
    }
    if let Some(labels) = &cloud.labels {
        write_sidecar(&sidecar(path, "labels"), labels)?;
    }
    if let Some(corr) = &cloud.corr {
        write_sidecar(&sidecar(path, "corr"), corr)?;
    }
    Ok(())
}

fn write_sidecar<T: std::fmt::Display>(path: &Path, values: &[T]) -> Result<()> {
    let mut out = String::with_capacity(values.len() * 6);
    for v in values {
        let _ = writeln!(out, "{v}");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

fn read_sidecar<T: FromStr>(path: &Path, n: usize) -> Result<Option<Vec<T>>> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut values = Vec::with_capacity(n);
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v = line.parse::<T>().map_err(|_| {
            Error::parse(
                path,
                format!("line {}", lineno + 1),
                format!("not an integer: `{line}`"),
            )
        })?;
        values.push(v);
    }
    if values.len() != n {
        return Err(Error::parse(
            path,
            "end of file".into(),
            format!("expected {n} entries, found {}", values.len()),
        ));
    }
    Ok(Some(values))
}

fn parse_triple(path: &Path, lineno: usize, fields: &[&str]) -> Result<[f64; 3]> {
    let mut p = [0.0; 3];
    for (slot, tok) in p.iter_mut().zip(fields) {
        *slot = tok.parse::<f64>().map_err(|_| {
            Error::parse(
                path,
                format!("line {lineno}"),
                format!("not a number: `{tok}`"),
            )
        })?;
    }
    Ok(p)
}

fn parse_xyz(path: &Path, text: &str) -> Result<Vec<[f64; 3]>> {
    let mut coords = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                format!("line {}", i + 1),
                format!("expected 3 values, found {}", fields.len()),
            ));
        }
        coords.push(parse_triple(path, i + 1, &fields)?);
    }
    Ok(coords)
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
}

fn parse_ply(path: &Path, text: &str) -> Result<Vec<[f64; 3]>> {
    let mut lines = text.lines().enumerate();
    let err = |line: usize, msg: &str| Error::parse(path, format!("line {line}"), msg);
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(err(1, "missing `ply` magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_done = false;
    for (i, line) in lines.by_ref() {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", ..] => {}
            ["format", ..] => return Err(err(i + 1, "only ascii PLY is supported")),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let count = count.parse().map_err(|_| err(i + 1, "bad element count"))?;
                elements.push(PlyElement {
                    name: name.to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            ["property", .., name] => match elements.last_mut() {
                Some(el) => el.properties.push(name.to_string()),
                None => return Err(err(i + 1, "property before any element")),
            },
            ["end_header"] => {
                header_done = true;
                break;
            }
            _ => return Err(err(i + 1, "unrecognized header line")),
        }
    }
    if !header_done {
        return Err(err(1, "missing end_header"));
    }
    let mut coords = Vec::new();
    for el in &elements {
        if el.name != "vertex" {
            for _ in 0..el.count {
                if lines.next().is_none() {
                    return Err(err(0, "truncated body"));
                }
            }
            continue;
        }
        let pos = |axis: &str| {
            el.properties.iter().position(|p| p == axis).ok_or_else(|| {
                Error::parse(path, "header".into(), format!("vertex lacks `{axis}`"))
            })
        };
        let (ix, iy, iz) = (pos("x")?, pos("y")?, pos("z")?);
        coords.reserve(el.count);
        for _ in 0..el.count {
            let (i, line) = lines
                .next()
                .ok_or_else(|| Error::parse(path, "end of file".into(), "truncated vertex list"))?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() < el.properties.len() {
                return Err(err(i + 1, "too few vertex properties"));
            }
            coords.push(parse_triple(path, i + 1, &[toks[ix], toks[iy], toks[iz]])?);
        }
        break;
    }
    Ok(coords)
}

fn parse_bin(path: &Path, bytes: &[u8]) -> Result<Vec<[f64; 3]>> {
    if bytes.len() < 8 || &bytes[..4] != BIN_MAGIC {
        return Err(Error::parse(path, "byte 0".into(), "missing MKPC header"));
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let expected = 8 + 12 * n;
    if bytes.len() != expected {
        return Err(Error::parse(
            path,
            format!("byte {}", bytes.len().min(expected)),
            format!(
                "payload length {} does not match {n} points",
                bytes.len() - 8
            ),
        ));
    }
    let coords = bytes[8..]
        .chunks_exact(12)
        .map(|rec| {
            let f =
                |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes")) as f64;
            [f(0), f(4), f(8)]
        })
        .collect();
    Ok(coords)
}
