//! File formats: PLY point and surfel clouds, D4DD depth and D4DF feature
//! rasters, PNG images and masks.
//!
//! PLY files are written as `binary_little_endian` with `double` properties
//! so that write → read is lossless. The reader also accepts ASCII files and
//! any scalar property type; integer color channels are scaled from 0–255.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Cursor, Read, Write};
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};
use nalgebra::{Quaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::pointcloud::PointCloud;
use crate::raster::{Mask, Raster};
use crate::surfel::{Provenance, Surfel, SurfelCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return Err(Error::format(format!("unknown PLY scalar type `{s}`"))),
        })
    }

    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }

    fn read_le(self, r: &mut impl Read) -> Result<f64> {
        macro_rules! rd {
            ($t:ty) => {{
                let mut b = [0u8; std::mem::size_of::<$t>()];
                r.read_exact(&mut b)
                    .map_err(|_| Error::format("PLY body ended early"))?;
                <$t>::from_le_bytes(b) as f64
            }};
        }
        Ok(match self {
            Scalar::I8 => rd!(i8),
            Scalar::U8 => rd!(u8),
            Scalar::I16 => rd!(i16),
            Scalar::U16 => rd!(u16),
            Scalar::I32 => rd!(i32),
            Scalar::U32 => rd!(u32),
            Scalar::F32 => rd!(f32),
            Scalar::F64 => rd!(f64),
        })
    }
}

#[derive(Debug)]
struct PlyTable {
    names: Vec<String>,
    types: Vec<Scalar>,
    rows: Vec<Vec<f64>>,
}

impl PlyTable {
    fn column(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.column(name)
            .ok_or_else(|| Error::format(format!("PLY vertex element lacks property `{name}`")))
    }
}

fn read_vertex_table(r: impl Read) -> Result<PlyTable> {
    let mut r = BufReader::new(r);
    let mut line = String::new();
    let next_line = |r: &mut BufReader<_>, line: &mut String| -> Result<()> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(Error::format("PLY header ended early"));
        }
        Ok(())
    };
    next_line(&mut r, &mut line)?;
    if line.trim() != "ply" {
        return Err(Error::format("missing `ply` magic"));
    }
    let mut ascii = None;
    let mut elements: Vec<(String, usize)> = Vec::new();
    let mut names = Vec::new();
    let mut types = Vec::new();
    loop {
        next_line(&mut r, &mut line)?;
        let tok: Vec<&str> = line.split_whitespace().collect();
        match tok.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => ascii = Some(true),
            ["format", "binary_little_endian", _] => ascii = Some(false),
            ["format", other, _] => return Err(Error::format(format!("unsupported PLY format `{other}`"))),
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => {
                let n = count
                    .parse()
                    .map_err(|_| Error::format(format!("bad element count `{count}`")))?;
                elements.push((name.to_string(), n));
            }
            ["property", "list", ..] => {
                if elements.last().is_some_and(|e| e.0 == "vertex") {
                    return Err(Error::format("list properties on vertices are not supported"));
                }
            }
            ["property", ty, name] => {
                if elements.last().is_some_and(|e| e.0 == "vertex") {
                    types.push(Scalar::parse(ty)?);
                    names.push(name.to_string());
                }
            }
            _ => return Err(Error::format(format!("unexpected PLY header line `{}`", line.trim()))),
        }
    }
    let ascii = ascii.ok_or_else(|| Error::format("PLY header has no format line"))?;
    let Some(pos) = elements.iter().position(|e| e.0 == "vertex") else {
        return Err(Error::format("PLY has no vertex element"));
    };
    if pos != 0 {
        return Err(Error::format("vertex must be the first PLY element"));
    }
    let count = elements[0].1;
    let mut rows = Vec::with_capacity(count);
    if ascii {
        for _ in 0..count {
            next_line(&mut r, &mut line)?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| Error::format(format!("bad PLY value `{t}`"))))
                .collect::<Result<_>>()?;
            if vals.len() < names.len() {
                return Err(Error::format("PLY vertex row has too few values"));
            }
            rows.push(vals[..names.len()].to_vec());
        }
    } else {
        for _ in 0..count {
            let row = types.iter().map(|t| t.read_le(&mut r)).collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
    }
    Ok(PlyTable { names, types, rows })
}

fn write_table(w: impl Write, names: &[String], rows: impl Iterator<Item = Vec<f64>>, count: usize, uchar: &[&str]) -> Result<()> {
    let mut w = BufWriter::new(w);
    writeln!(w, "ply\nformat binary_little_endian 1.0\nelement vertex {count}")?;
    for n in names {
        let ty = if uchar.contains(&n.as_str()) { "uchar" } else { "double" };
        writeln!(w, "property {ty} {n}")?;
    }
    writeln!(w, "end_header")?;
    for row in rows {
        for (n, v) in names.iter().zip(row) {
            if uchar.contains(&n.as_str()) {
                w.write_all(&[v as u8])?;
            } else {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn color_scale(t: &PlyTable, col: usize) -> f64 {
    if t.types[col].is_integer() {
        1.0 / 255.0
    } else {
        1.0
    }
}

pub fn write_point_ply(pc: &PointCloud, w: impl Write) -> Result<()> {
    let mut names: Vec<String> = ["x", "y", "z", "red", "green", "blue"].map(String::from).to_vec();
    if pc.normals().is_some() {
        names.extend(["nx", "ny", "nz"].map(String::from));
    }
    names.push("mass".into());
    let rows = (0..pc.len()).map(|i| {
        let mut row: Vec<f64> = pc.positions()[i].iter().chain(pc.colors()[i].iter()).copied().collect();
        if let Some(ns) = pc.normals() {
            row.extend(ns[i].iter());
        }
        row.push(pc.masses()[i]);
        row
    });
    write_table(w, &names, rows, pc.len(), &[])
}

/// Reads `x, y, z` plus optional `red/green/blue`, `nx/ny/nz` and `mass`.
/// Missing colors default to mid gray, missing masses to uniform.
pub fn read_point_ply(r: impl Read) -> Result<PointCloud> {
    let t = read_vertex_table(r)?;
    let (x, y, z) = (t.require("x")?, t.require("y")?, t.require("z")?);
    let positions: Vec<Vector3<f64>> = t.rows.iter().map(|r| Vector3::new(r[x], r[y], r[z])).collect();
    if positions.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
        return Err(Error::format("non-finite point coordinate"));
    }
    let colors = match (t.column("red"), t.column("green"), t.column("blue")) {
        (Some(r), Some(g), Some(b)) => {
            let s = color_scale(&t, r);
            t.rows.iter().map(|row| Vector3::new(row[r], row[g], row[b]) * s).collect()
        }
        _ => vec![Vector3::repeat(0.5); positions.len()],
    };
    let mut pc = PointCloud::new(positions, colors)?;
    if let (Some(a), Some(b), Some(c)) = (t.column("nx"), t.column("ny"), t.column("nz")) {
        let ns = t.rows.iter().map(|r| Vector3::new(r[a], r[b], r[c])).collect();
        pc = pc.with_normals(ns)?;
    }
    if let Some(m) = t.column("mass") {
        pc = pc.with_masses(t.rows.iter().map(|r| r[m]).collect())?;
    }
    Ok(pc)
}

pub fn write_surfel_ply(cloud: &SurfelCloud, w: impl Write) -> Result<()> {
    let f = cloud.feature_dim();
    let mut names: Vec<String> = [
        "x", "y", "z", "red", "green", "blue", "qw", "qx", "qy", "qz", "s1", "s2", "opacity",
    ]
    .map(String::from)
    .to_vec();
    names.extend((0..f).map(|k| format!("feature_{k}")));
    names.push("provenance".into());
    let rows = cloud.surfels.iter().zip(&cloud.provenance).map(|(s, p)| {
        let q = &s.rotation;
        let mut row: Vec<f64> = s.position.iter().chain(s.color.iter()).copied().collect();
        row.extend([q.w, q.i, q.j, q.k, s.scales.x, s.scales.y, s.opacity]);
        row.extend(&s.feature);
        row.push(p.as_u8() as f64);
        row
    });
    write_table(w, &names, rows, cloud.len(), &["provenance"])
}

pub fn read_surfel_ply(r: impl Read) -> Result<SurfelCloud> {
    let t = read_vertex_table(r)?;
    let cols: Vec<usize> = [
        "x", "y", "z", "red", "green", "blue", "qw", "qx", "qy", "qz", "s1", "s2", "opacity",
    ]
    .iter()
    .map(|n| t.require(n))
    .collect::<Result<_>>()?;
    let mut feat = Vec::new();
    while let Some(c) = t.column(&format!("feature_{}", feat.len())) {
        feat.push(c);
    }
    let prov = t.column("provenance");
    let cscale = color_scale(&t, cols[3]);
    let mut surfels = Vec::with_capacity(t.rows.len());
    let mut provenance = Vec::with_capacity(t.rows.len());
    for row in &t.rows {
        let v = |k: usize| row[cols[k]];
        surfels.push(Surfel {
            position: Vector3::new(v(0), v(1), v(2)),
            color: Vector3::new(v(3), v(4), v(5)) * cscale,
            rotation: Quaternion::new(v(6), v(7), v(8), v(9)),
            scales: Vector2::new(v(10), v(11)),
            opacity: v(12),
            feature: feat.iter().map(|&c| row[c]).collect(),
        });
        provenance.push(match prov {
            Some(c) => Provenance::from_u8(row[c] as u8)?,
            None => Provenance::Scene,
        });
    }
    SurfelCloud::new(surfels, provenance).map_err(|e| Error::format(format!("invalid surfel PLY: {e}")))
}

const DEPTH_MAGIC: &[u8; 4] = b"D4DD";
const FEATURE_MAGIC: &[u8; 4] = b"D4DF";

fn dim_u16(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::domain(format!("{what} {v} exceeds the 16-bit header field")))
}

/// `"D4DD"`, u16 width, u16 height, then row-major f32 depths.
pub fn write_depth(depth: &Raster, mut w: impl Write) -> Result<()> {
    if depth.channels() != 1 {
        return Err(Error::shape("depth raster must have one channel"));
    }
    w.write_all(DEPTH_MAGIC)?;
    w.write_all(&dim_u16(depth.width(), "width")?.to_le_bytes())?;
    w.write_all(&dim_u16(depth.height(), "height")?.to_le_bytes())?;
    write_f32s(depth.data(), w)
}

fn write_f32s(data: &[f64], mut w: impl Write) -> Result<()> {
    let mut buf = Vec::with_capacity(data.len() * 4);
    for &v in data {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_f32s(mut r: impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 4];
    r.read_exact(&mut buf)
        .map_err(|_| Error::format(format!("raster body shorter than {n} values")))?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect())
}

fn read_u16(r: &mut impl Read) -> Result<usize> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b).map_err(|_| Error::format("raster header truncated"))?;
    Ok(u16::from_le_bytes(b) as usize)
}

fn read_magic(r: &mut impl Read, magic: &[u8; 4]) -> Result<()> {
    let mut m = [0u8; 4];
    r.read_exact(&mut m).map_err(|_| Error::format("raster header truncated"))?;
    if &m != magic {
        return Err(Error::format(format!(
            "expected magic {:?}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&m)
        )));
    }
    Ok(())
}

pub fn read_depth(mut r: impl Read) -> Result<Raster> {
    read_magic(&mut r, DEPTH_MAGIC)?;
    let w = read_u16(&mut r)?;
    let h = read_u16(&mut r)?;
    Raster::from_vec(w, h, 1, read_f32s(r, w * h)?)
}

/// `"D4DF"`, u16 width, u16 height, u16 channels, then f32 values in
/// row-major, channel-interleaved order.
pub fn write_features(features: &Raster, mut w: impl Write) -> Result<()> {
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&dim_u16(features.width(), "width")?.to_le_bytes())?;
    w.write_all(&dim_u16(features.height(), "height")?.to_le_bytes())?;
    w.write_all(&dim_u16(features.channels(), "channel count")?.to_le_bytes())?;
    write_f32s(features.data(), w)
}

pub fn read_features(mut r: impl Read) -> Result<Raster> {
    read_magic(&mut r, FEATURE_MAGIC)?;
    let w = read_u16(&mut r)?;
    let h = read_u16(&mut r)?;
    let f = read_u16(&mut r)?;
    Raster::from_vec(w, h, f, read_f32s(r, w * h * f)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes a 3-channel raster in `[0, 1]` (1-channel rasters as gray) as an
/// 8-bit PNG.
pub fn encode_png(img: &Raster) -> Result<Vec<u8>> {
    let (w, h) = (img.width() as u32, img.height() as u32);
    let mut out = Cursor::new(Vec::new());
    match img.channels() {
        3 => {
            let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
            RgbImage::from_raw(w, h, buf)
                .expect("buffer sized from raster")
                .write_to(&mut out, ImageFormat::Png)?;
        }
        1 => {
            let buf: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
            GrayImage::from_raw(w, h, buf)
                .expect("buffer sized from raster")
                .write_to(&mut out, ImageFormat::Png)?;
        }
        c => return Err(Error::shape(format!("PNG export needs 1 or 3 channels, got {c}"))),
    }
    Ok(out.into_inner())
}

/// Decodes any PNG to a 3-channel raster in `[0, 1]`.
pub fn decode_png(bytes: &[u8]) -> Result<Raster> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
    let rgb = img.to_rgb32f();
    let (w, h) = rgb.dimensions();
    Raster::from_vec(w as usize, h as usize, 3, rgb.into_raw().into_iter().map(|v| v as f64).collect())
}

pub fn encode_mask_png(mask: &Mask) -> Result<Vec<u8>> {
    let (w, h) = mask.dims();
    let buf = mask.data().iter().map(|&b| if b { 255 } else { 0 }).collect();
    let mut out = Cursor::new(Vec::new());
    GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized from mask")
        .write_to(&mut out, ImageFormat::Png)?;
    Ok(out.into_inner())
}

/// Pixels brighter than mid gray are set.
pub fn decode_mask_png(bytes: &[u8]) -> Result<Mask> {
    let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?.to_luma8();
    let (w, h) = img.dimensions();
    Mask::from_vec(w as usize, h as usize, img.into_raw().into_iter().map(|v| v > 127).collect())
}

fn create(path: &Path) -> Result<File> {
    Ok(File::create(path)?)
}

fn open(path: &Path) -> Result<File> {
    Ok(File::open(path)?)
}

pub fn save_point_ply(pc: &PointCloud, path: impl AsRef<Path>) -> Result<()> {
    write_point_ply(pc, create(path.as_ref())?)
}

pub fn load_point_ply(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_point_ply(open(path.as_ref())?)
}

pub fn save_surfel_ply(cloud: &SurfelCloud, path: impl AsRef<Path>) -> Result<()> {
    write_surfel_ply(cloud, create(path.as_ref())?)
}

pub fn load_surfel_ply(path: impl AsRef<Path>) -> Result<SurfelCloud> {
    read_surfel_ply(open(path.as_ref())?)
}

pub fn save_depth(depth: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(create(path.as_ref())?);
    write_depth(depth, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_depth(path: impl AsRef<Path>) -> Result<Raster> {
    read_depth(BufReader::new(open(path.as_ref())?))
}

pub fn save_features(features: &Raster, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(create(path.as_ref())?);
    write_features(features, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_features(path: impl AsRef<Path>) -> Result<Raster> {
    read_features(BufReader::new(open(path.as_ref())?))
}

pub fn save_png(img: &Raster, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_png(img)?)?;
    Ok(())
}

pub fn load_png(path: impl AsRef<Path>) -> Result<Raster> {
    decode_png(&std::fs::read(path)?)
}

pub fn save_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_mask_png(mask)?)?;
    Ok(())
}

pub fn load_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    decode_mask_png(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_ply_with_uchar_colors() {
        let text = "ply\nformat ascii 1.0\ncomment hand-written\nelement vertex 2\n\
                    property float x\nproperty float y\nproperty float z\n\
                    property uchar red\nproperty uchar green\nproperty uchar blue\n\
                    element face 0\nproperty list uchar int vertex_indices\nend_header\n\
                    0 1 2 255 0 51\n-1 0.5 3 0 255 0\n";
        let pc = read_point_ply(text.as_bytes()).unwrap();
        assert_eq!(pc.len(), 2);
        assert_eq!(pc.positions()[1], Vector3::new(-1.0, 0.5, 3.0));
        assert_eq!(pc.colors()[0], Vector3::new(1.0, 0.0, 0.2));
        assert!(pc.normals().is_none());
        assert_eq!(pc.masses(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(read_point_ply(&b"not a ply"[..]), Err(Error::Format(_))));
        let missing_z = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nend_header\n0 0\n";
        assert!(matches!(read_point_ply(missing_z.as_bytes()), Err(Error::Format(_))));
        let short = "ply\nformat binary_little_endian 1.0\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nend_header\n";
        assert!(matches!(read_point_ply(short.as_bytes()), Err(Error::Format(_))));
        assert!(matches!(read_depth(&b"D4DFxxxx"[..]), Err(Error::Format(_))));
        assert!(matches!(read_depth(&b"D4DD\x02\x00\x02\x00"[..]), Err(Error::Format(_))));
    }

    #[test]
    fn depth_header_layout() {
        let d = Raster::from_vec(3, 2, 1, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.5]).unwrap();
        let mut buf = Vec::new();
        write_depth(&d, &mut buf).unwrap();
        assert_eq!(&buf[..8], b"D4DD\x03\x00\x02\x00");
        assert_eq!(buf.len(), 8 + 6 * 4);
        assert_eq!(read_depth(&buf[..]).unwrap(), d);
    }

    #[test]
    fn png_round_trip_on_8bit_values() {
        let img = Raster::from_fn(4, 3, 3, |x, y, px| {
            px[0] = (x * 40) as f64 / 255.0;
            px[1] = (y * 70) as f64 / 255.0;
            px[2] = 1.0;
        });
        let back = decode_png(&encode_png(&img).unwrap()).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let mut m = Mask::new(5, 2);
        m.set(3, 1, true);
        assert_eq!(decode_mask_png(&encode_mask_png(&m).unwrap()).unwrap(), m);
    }
}
