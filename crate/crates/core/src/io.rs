//! Bit-specified file formats: Middlebury `.flo`, PFM, binary PGM/PPM, and
//! the plain-text pose, seed and intrinsics formats.
//!
//! Every format has a byte-level `encode_*`/`decode_*` pair and path-based
//! `write_*`/`read_*` wrappers.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Intrinsics, PoseSE3};
use crate::matching::{Seed, SeedSet};
use crate::raster::{DepthMap, FlowField, Image, ValidityMask};
use nalgebra::{Matrix3, Vector3};

const FLO_MAGIC: &[u8; 4] = b"PIEH";

fn parse_err(what: &str, msg: impl std::fmt::Display) -> Error {
    Error::Parse(format!("{what}: {msg}"))
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    Ok(std::fs::read(path)?)
}

fn read_text(path: &Path) -> Result<String> {
    Ok(std::fs::read_to_string(path)?)
}

// ── .flo ────────────────────────────────────────────────────────────────

/// Components are stored as `f32`; values not representable in `f32` are rounded.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = flow.dims();
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for v in flow.data() {
        out.extend_from_slice(&(v[0] as f32).to_le_bytes());
        out.extend_from_slice(&(v[1] as f32).to_le_bytes());
    }
    out
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_i32(b: &[u8]) -> i32 {
    i32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    if bytes.len() < 12 || &bytes[..4] != FLO_MAGIC {
        return Err(parse_err("flo", "missing PIEH magic"));
    }
    let (w, h) = (le_i32(&bytes[4..8]), le_i32(&bytes[8..12]));
    if w <= 0 || h <= 0 {
        return Err(parse_err("flo", format!("bad dimensions {w}x{h}")));
    }
    let (w, h) = (w as usize, h as usize);
    let body = &bytes[12..];
    if body.len() != 8 * w * h {
        return Err(parse_err(
            "flo",
            format!("expected {} payload bytes, got {}", 8 * w * h, body.len()),
        ));
    }
    let data = body
        .chunks_exact(8)
        .map(|c| [le_f32(&c[..4]) as f64, le_f32(&c[4..]) as f64])
        .collect();
    FlowField::new(w, h, data).map_err(|e| parse_err("flo", e))
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    Ok(std::fs::write(path, encode_flo(flow))?)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&read_bytes(path.as_ref())?)
}

// ── Netpbm header parsing ───────────────────────────────────────────────

/// Splits off `count` whitespace-separated header tokens (skipping `#`
/// comments) and the single whitespace byte that ends the header.
fn header_tokens(bytes: &[u8], count: usize) -> Result<(Vec<String>, &[u8])> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(parse_err("header", "truncated"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return Err(parse_err("header", "missing separator before payload"));
    }
    Ok((tokens, &bytes[i + 1..]))
}

fn parse_dim(s: &str, what: &str) -> Result<usize> {
    match s.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(parse_err(what, format!("bad dimension {s:?}"))),
    }
}

// ── PFM ─────────────────────────────────────────────────────────────────

/// Little-endian PFM (`Pf` for one channel, `PF` for three). Rows are stored
/// bottom-to-top as the format requires.
pub fn encode_pfm(width: usize, height: usize, channels: usize, data: &[f64]) -> Result<Vec<u8>> {
    let magic = match channels {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::InvalidInput(format!(
                "PFM supports 1 or 3 channels, got {c}"
            )))
        }
    };
    if data.len() != width * height * channels {
        return Err(Error::InvalidInput("PFM payload size mismatch".into()));
    }
    let mut out = format!("{magic}\n{width} {height}\n-1.0\n").into_bytes();
    let row = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Returns `(width, height, channels, row-major top-to-bottom data)`.
pub fn decode_pfm(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f64>)> {
    let (tok, body) = header_tokens(bytes, 4)?;
    let channels = match tok[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(parse_err("pfm", format!("bad magic {m:?}"))),
    };
    let (w, h) = (parse_dim(&tok[1], "pfm")?, parse_dim(&tok[2], "pfm")?);
    let scale: f64 = tok[3].parse().map_err(|_| parse_err("pfm", "bad scale"))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(parse_err("pfm", "bad scale"));
    }
    let little = scale < 0.0;
    let row = w * channels;
    if body.len() != 4 * row * h {
        return Err(parse_err(
            "pfm",
            format!("expected {} payload bytes, got {}", 4 * row * h, body.len()),
        ));
    }
    let mut data = vec![0.0; row * h];
    for (k, c) in body.chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (file_row, col) = (k / row, k % row);
        data[(h - 1 - file_row) * row + col] = v as f64;
    }
    Ok((w, h, channels, data))
}

pub fn write_depth_pfm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let (w, h) = depth.dims();
    Ok(std::fs::write(path, encode_pfm(w, h, 1, depth.data())?)?)
}

pub fn read_depth_pfm(path: impl AsRef<Path>) -> Result<DepthMap> {
    let (w, h, c, data) = decode_pfm(&read_bytes(path.as_ref())?)?;
    if c != 1 {
        return Err(parse_err("pfm", "depth must be single-channel"));
    }
    DepthMap::new(w, h, data).map_err(|e| parse_err("pfm", e))
}

// ── PGM / PPM ───────────────────────────────────────────────────────────

/// Binary PGM (1 channel) or PPM (3 channels). Values in `[0, 1]` are
/// quantized to `maxval` (255 or 65535); 16-bit samples are big-endian.
pub fn encode_pnm(img: &Image, maxval: u16) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::InvalidInput(format!(
                "PNM supports 1 or 3 channels, got {c}"
            )))
        }
    };
    if maxval != 255 && maxval != 65535 {
        return Err(Error::InvalidInput(format!(
            "maxval must be 255 or 65535, got {maxval}"
        )));
    }
    let mut out = format!("{magic}\n{} {}\n{maxval}\n", img.width(), img.height()).into_bytes();
    let m = maxval as f64;
    for v in img.data() {
        let q = (v.clamp(0.0, 1.0) * m).round() as u16;
        if maxval == 255 {
            out.push(q as u8);
        } else {
            out.extend_from_slice(&q.to_be_bytes());
        }
    }
    Ok(out)
}

/// Raw integer samples of a binary PGM/PPM plus its `maxval`.
pub fn decode_pnm_raw(bytes: &[u8]) -> Result<(usize, usize, usize, u16, Vec<u16>)> {
    let (tok, body) = header_tokens(bytes, 4)?;
    let channels = match tok[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(parse_err("pnm", format!("unsupported magic {m:?}"))),
    };
    let (w, h) = (parse_dim(&tok[1], "pnm")?, parse_dim(&tok[2], "pnm")?);
    let maxval: u16 = match tok[3].parse() {
        Ok(v) if v > 0 => v,
        _ => return Err(parse_err("pnm", "bad maxval")),
    };
    let n = w * h * channels;
    let samples: Vec<u16> = if maxval < 256 {
        if body.len() != n {
            return Err(parse_err(
                "pnm",
                format!("expected {n} payload bytes, got {}", body.len()),
            ));
        }
        body.iter().map(|&b| b as u16).collect()
    } else {
        if body.len() != 2 * n {
            return Err(parse_err(
                "pnm",
                format!("expected {} payload bytes, got {}", 2 * n, body.len()),
            ));
        }
        body.chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    };
    if samples.iter().any(|&s| s > maxval) {
        return Err(parse_err("pnm", "sample exceeds maxval"));
    }
    Ok((w, h, channels, maxval, samples))
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Image> {
    let (w, h, c, maxval, samples) = decode_pnm_raw(bytes)?;
    let m = maxval as f64;
    Image::new(w, h, c, samples.iter().map(|&s| s as f64 / m).collect())
}

pub fn write_image(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    Ok(std::fs::write(path, encode_pnm(img, 255)?)?)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Image> {
    decode_pnm(&read_bytes(path.as_ref())?)
}

/// Writes depth as a 16-bit PGM in millimeters. Depths above 65.535 are
/// rejected.
pub fn write_depth_mm(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let (w, h) = depth.dims();
    let mut out = format!("P5\n{w} {h}\n65535\n").into_bytes();
    for &d in depth.data() {
        let mm = (d * 1000.0).round();
        if mm > 65535.0 {
            return Err(Error::InvalidInput(format!(
                "depth {d} exceeds the 16-bit millimeter range"
            )));
        }
        out.extend_from_slice(&(mm as u16).to_be_bytes());
    }
    Ok(std::fs::write(path, out)?)
}

/// Reads a 16-bit millimeter depth PGM. Zero samples mark missing depth:
/// they are reported invalid in the mask and filled with the median valid
/// depth so the result stays a valid [`DepthMap`].
pub fn read_depth_mm(path: impl AsRef<Path>) -> Result<(DepthMap, ValidityMask)> {
    let (w, h, c, _, samples) = decode_pnm_raw(&read_bytes(path.as_ref())?)?;
    if c != 1 {
        return Err(parse_err("depth pgm", "depth must be single-channel"));
    }
    let mask: Vec<bool> = samples.iter().map(|&s| s > 0).collect();
    let mut valid: Vec<u16> = samples.iter().copied().filter(|&s| s > 0).collect();
    if valid.is_empty() {
        return Err(parse_err("depth pgm", "no valid depth samples"));
    }
    valid.sort_unstable();
    let fill = valid[valid.len() / 2];
    let data = samples
        .iter()
        .map(|&s| if s > 0 { s } else { fill } as f64 / 1000.0)
        .collect();
    Ok((DepthMap::new(w, h, data)?, ValidityMask::new(w, h, mask)?))
}

// ── Text formats ────────────────────────────────────────────────────────

fn numbers(line: &str, what: &str) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| parse_err(what, format!("bad number {t:?}")))
        })
        .collect()
}

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

/// One pose per line: 12 numbers, row-major `[R | t]`. Numbers use the
/// shortest representation that parses back to the same `f64`.
pub fn encode_poses(poses: &[PoseSE3]) -> String {
    let mut out = String::new();
    for p in poses {
        let r = &p.rotation;
        let t = &p.translation;
        let vals = [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ];
        let line: Vec<String> = vals.iter().map(|v| format!("{v}")).collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn decode_poses(text: &str) -> Result<Vec<PoseSE3>> {
    content_lines(text)
        .map(|(n, line)| {
            let v = numbers(line, "pose")?;
            if v.len() != 12 {
                return Err(parse_err(
                    "pose",
                    format!("line {n}: expected 12 numbers, got {}", v.len()),
                ));
            }
            let r = Matrix3::new(v[0], v[1], v[2], v[4], v[5], v[6], v[8], v[9], v[10]);
            let t = Vector3::new(v[3], v[7], v[11]);
            PoseSE3::new(r, t).map_err(|e| parse_err("pose", format!("line {n}: {e}")))
        })
        .collect()
}

pub fn write_poses(path: impl AsRef<Path>, poses: &[PoseSE3]) -> Result<()> {
    Ok(std::fs::write(path, encode_poses(poses))?)
}

pub fn read_poses(path: impl AsRef<Path>) -> Result<Vec<PoseSE3>> {
    decode_poses(&read_text(path.as_ref())?)
}

/// One seed per line: `x y u v`. The first line is a `# width height`
/// header so the image size survives the round trip.
pub fn encode_seeds(seeds: &SeedSet) -> String {
    let mut out = format!("# {} {}\n", seeds.width(), seeds.height());
    for s in seeds.entries() {
        let _ = writeln!(out, "{} {} {} {}", s.x, s.y, s.flow[0], s.flow[1]);
    }
    out
}

/// Parses seed text. `dims` supplies the image size when the file has no
/// `# width height` header.
pub fn decode_seeds(text: &str, dims: Option<(usize, usize)>) -> Result<SeedSet> {
    let header = text.lines().next().and_then(|l| {
        let rest = l.trim().strip_prefix('#')?;
        let v: Vec<usize> = rest
            .split_whitespace()
            .map(|t| t.parse().ok())
            .collect::<Option<_>>()?;
        (v.len() == 2).then(|| (v[0], v[1]))
    });
    let (w, h) = dims
        .or(header)
        .ok_or_else(|| parse_err("seeds", "image size unknown: no header and none supplied"))?;
    let mut entries = Vec::new();
    for (n, line) in content_lines(text) {
        let tok: Vec<&str> = line.split_whitespace().collect();
        if tok.len() != 4 {
            return Err(parse_err("seeds", format!("line {n}: expected 4 fields")));
        }
        let x = tok[0]
            .parse()
            .map_err(|_| parse_err("seeds", format!("line {n}: bad x")))?;
        let y = tok[1]
            .parse()
            .map_err(|_| parse_err("seeds", format!("line {n}: bad y")))?;
        let u: f64 = tok[2]
            .parse()
            .map_err(|_| parse_err("seeds", format!("line {n}: bad u")))?;
        let v: f64 = tok[3]
            .parse()
            .map_err(|_| parse_err("seeds", format!("line {n}: bad v")))?;
        if !u.is_finite() || !v.is_finite() {
            return Err(parse_err("seeds", format!("line {n}: non-finite flow")));
        }
        entries.push(Seed { x, y, flow: [u, v] });
    }
    SeedSet::new(w, h, entries).map_err(|e| parse_err("seeds", e))
}

pub fn write_seeds(path: impl AsRef<Path>, seeds: &SeedSet) -> Result<()> {
    Ok(std::fs::write(path, encode_seeds(seeds))?)
}

pub fn read_seeds(path: impl AsRef<Path>, dims: Option<(usize, usize)>) -> Result<SeedSet> {
    decode_seeds(&read_text(path.as_ref())?, dims)
}

/// `fx fy cx cy` on one line.
pub fn encode_intrinsics(k: &Intrinsics) -> String {
    format!("{} {} {} {}\n", k.fx, k.fy, k.cx, k.cy)
}

pub fn decode_intrinsics(text: &str) -> Result<Intrinsics> {
    let (_, line) = content_lines(text)
        .next()
        .ok_or_else(|| parse_err("intrinsics", "empty file"))?;
    let v = numbers(line, "intrinsics")?;
    if v.len() != 4 {
        return Err(parse_err(
            "intrinsics",
            format!("expected 4 numbers, got {}", v.len()),
        ));
    }
    Intrinsics::new(v[0], v[1], v[2], v[3]).map_err(|e| parse_err("intrinsics", e))
}

pub fn write_intrinsics(path: impl AsRef<Path>, k: &Intrinsics) -> Result<()> {
    Ok(std::fs::write(path, encode_intrinsics(k))?)
}

pub fn read_intrinsics(path: impl AsRef<Path>) -> Result<Intrinsics> {
    decode_intrinsics(&read_text(path.as_ref())?)
}
