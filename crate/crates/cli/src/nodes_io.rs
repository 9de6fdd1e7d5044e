//! Files exchanged by `infer` and `fuse`.
//!
//! Node file (binary): `DLONODES`, u32 version 1, u32 count M, then M x 3
//! little-endian f64 coordinates. XYZ text: `#`-prefixed header lines, then
//! one `x y z` line per point. Visibility text: `#`-prefixed header lines,
//! then one value per line. Floats in text files use shortest round-trip
//! formatting, so every file reads back bit-exactly.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dlo::dataset::Frame;
use dlo::{NodeSequence, PointCloud, Vec3};

pub const NODES_MAGIC: &[u8; 8] = b"DLONODES";
pub const NODES_VERSION: u32 = 1;

pub fn encode_nodes(nodes: &NodeSequence) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 24 * nodes.len());
    buf.extend_from_slice(NODES_MAGIC);
    buf.extend_from_slice(&NODES_VERSION.to_le_bytes());
    buf.extend_from_slice(&(nodes.len() as u32).to_le_bytes());
    for p in &nodes.0 {
        for c in p.iter() {
            buf.extend_from_slice(&c.to_le_bytes());
        }
    }
    buf
}

pub fn decode_nodes(data: &[u8]) -> Result<NodeSequence> {
    if data.len() < 16 || &data[..8] != NODES_MAGIC {
        bail!("not a node file (bad magic)");
    }
    let u = |k: usize| u32::from_le_bytes([data[k], data[k + 1], data[k + 2], data[k + 3]]);
    if u(8) != NODES_VERSION {
        bail!("unsupported node file version {}", u(8));
    }
    let m = u(12) as usize;
    if data.len() != 16 + 24 * m {
        bail!("node file holds {} bytes, expected {} for {m} nodes", data.len(), 16 + 24 * m);
    }
    let f = |k: usize| f64::from_le_bytes(data[k..k + 8].try_into().expect("8 bytes"));
    Ok(NodeSequence(
        (0..m).map(|j| {
            let b = 16 + 24 * j;
            Vec3::new(f(b), f(b + 8), f(b + 16))
        })
        .collect(),
    ))
}

pub fn xyz_text(points: &[Vec3], header: &[String]) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    for p in points {
        let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
    }
    s
}

pub fn parse_xyz(text: &str) -> Result<Vec<Vec3>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .with_context(|| format!("line {}: `{line}`", i + 1))?;
        if v.len() != 3 {
            bail!("line {}: expected 3 coordinates, found {}", i + 1, v.len());
        }
        out.push(Vec3::new(v[0], v[1], v[2]));
    }
    Ok(out)
}

pub fn visibility_text(v: &[f64], header: &[String]) -> String {
    let mut s = String::new();
    for h in header {
        let _ = writeln!(s, "# {h}");
    }
    for x in v {
        let _ = writeln!(s, "{x}");
    }
    s
}

pub fn parse_visibility(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse::<f64>().with_context(|| format!("visibility value `{l}`")))
        .collect()
}

/// Reads a node sequence from a binary node file or an XYZ text file.
pub fn read_nodes(path: &Path) -> Result<NodeSequence> {
    let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if data.starts_with(NODES_MAGIC) {
        return decode_nodes(&data).with_context(|| path.display().to_string());
    }
    let text = String::from_utf8(data).with_context(|| format!("{} is neither a node file nor text", path.display()))?;
    Ok(NodeSequence(parse_xyz(&text).with_context(|| path.display().to_string())?))
}

pub fn read_visibility(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_visibility(&text).with_context(|| path.display().to_string())
}

/// A cloud from a dataset frame record or an XYZ text file. The frame comes
/// back as well when the file is a frame record.
pub fn read_cloud(path: &Path) -> Result<(PointCloud, Option<Frame>)> {
    let data = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if data.starts_with(dlo::dataset::FRAME_MAGIC) {
        let f = Frame::decode(&data).with_context(|| path.display().to_string())?;
        return Ok((f.cloud.clone(), Some(f)));
    }
    let text = String::from_utf8(data).with_context(|| format!("{} is neither a frame record nor text", path.display()))?;
    Ok((PointCloud(parse_xyz(&text).with_context(|| path.display().to_string())?), None))
}
