//! Reading and writing point clouds: XYZ text, PLY (ASCII and binary little-endian),
//! OBJ vertices, and the `.labels` sidecar.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::cloud::{Point3, PointCloud, UnitVector3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    Ply,
    Obj,
}

impl CloudFormat {
    /// Guesses the format from the file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        let ext = path.extension()?.to_str()?.to_ascii_lowercase();
        match ext.as_str() {
            "xyz" | "txt" | "pts" => Some(CloudFormat::Xyz),
            "ply" => Some(CloudFormat::Ply),
            "obj" => Some(CloudFormat::Obj),
            _ => None,
        }
    }
}

impl FromStr for CloudFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "xyz" => Ok(CloudFormat::Xyz),
            "ply" => Ok(CloudFormat::Ply),
            "obj" => Ok(CloudFormat::Obj),
            other => Err(Error::InvalidArgument(format!("unknown cloud format `{other}`"))),
        }
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Xyz => parse_xyz(&text(&bytes)?),
        CloudFormat::Ply => parse_ply(&bytes),
        CloudFormat::Obj => parse_obj(&text(&bytes)?)?.into_cloud(),
    }
}

/// Writes the cloud; labels, when present, go to the `.labels` sidecar next to `path`.
pub fn save_cloud(cloud: &PointCloud, path: &Path, format: CloudFormat) -> Result<()> {
    let body = match format {
        CloudFormat::Xyz => format_xyz(cloud),
        CloudFormat::Ply => format_ply_ascii(cloud),
        CloudFormat::Obj => {
            return Err(Error::InvalidArgument("OBJ output is not supported".into()));
        }
    };
    fs::write(path, body).map_err(|e| Error::io(path, e))?;
    if let Some(labels) = cloud.labels() {
        let indices: Vec<usize> = labels
            .iter()
            .enumerate()
            .filter_map(|(i, &l)| l.then_some(i))
            .collect();
        write_labels(&labels_sidecar_path(path), &indices)?;
    }
    Ok(())
}

/// Loads a cloud and attaches labels from its sidecar when one exists.
pub fn load_cloud_with_labels(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let cloud = load_cloud(path, format)?;
    let sidecar = labels_sidecar_path(path);
    if sidecar.exists() {
        let indices = read_labels(&sidecar, cloud.len())?;
        let mut mask = vec![false; cloud.len()];
        for i in indices {
            mask[i] = true;
        }
        cloud.with_labels(mask)
    } else {
        Ok(cloud)
    }
}

pub fn labels_sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("labels")
}

fn text(bytes: &[u8]) -> Result<String> {
    String::from_utf8(bytes.to_vec()).map_err(|e| Error::parse(0, format!("not UTF-8: {e}")))
}

fn parse_number(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid number `{tok}`")))?;
    if !v.is_finite() {
        return Err(Error::NonFinite { line });
    }
    Ok(v)
}

fn normal_from(nx: f64, ny: f64, nz: f64, line: usize) -> Result<UnitVector3> {
    UnitVector3::from_components(nx, ny, nz)
        .ok_or_else(|| Error::parse(line, "zero-length normal"))
}

/// Parses `x y z` or `x y z nx ny nz` lines. Blank lines and `#` comments are skipped.
pub fn parse_xyz(src: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut columns = None;
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals = body
            .split_whitespace()
            .map(|t| parse_number(t, line))
            .collect::<Result<Vec<_>>>()?;
        if vals.len() != 3 && vals.len() != 6 {
            return Err(Error::parse(
                line,
                format!("expected 3 or 6 columns, found {}", vals.len()),
            ));
        }
        match columns {
            None => columns = Some(vals.len()),
            Some(c) if c != vals.len() => {
                return Err(Error::parse(line, format!("expected {c} columns like earlier lines")));
            }
            _ => {}
        }
        points.push(Point3::new(vals[0], vals[1], vals[2]));
        if vals.len() == 6 {
            normals.push(normal_from(vals[3], vals[4], vals[5], line)?);
        }
    }
    if points.is_empty() {
        return Err(Error::EmptyFile);
    }
    let cloud = PointCloud::new(points)?;
    if normals.is_empty() {
        Ok(cloud)
    } else {
        cloud.with_normals(normals)
    }
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    for (i, p) in cloud.points().iter().enumerate() {
        // `{}` on f64 prints the shortest representation that round-trips exactly.
        let _ = write!(out, "{} {} {}", p.x, p.y, p.z);
        if let Some(n) = cloud.normals() {
            let _ = write!(out, " {} {} {}", n[i].x(), n[i].y(), n[i].z());
        }
        out.push('\n');
    }
    out
}

pub fn format_ply_ascii(cloud: &PointCloud) -> String {
    let mut out = String::new();
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    if cloud.normals().is_some() {
        out.push_str("property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.push_str("end_header\n");
    out.push_str(&format_xyz(cloud));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyScalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyScalar {
    fn parse(s: &str, line: usize) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => PlyScalar::I8,
            "uchar" | "uint8" => PlyScalar::U8,
            "short" | "int16" => PlyScalar::I16,
            "ushort" | "uint16" => PlyScalar::U16,
            "int" | "int32" => PlyScalar::I32,
            "uint" | "uint32" => PlyScalar::U32,
            "float" | "float32" => PlyScalar::F32,
            "double" | "float64" => PlyScalar::F64,
            other => return Err(Error::parse(line, format!("unknown PLY type `{other}`"))),
        })
    }

    fn size(self) -> usize {
        match self {
            PlyScalar::I8 | PlyScalar::U8 => 1,
            PlyScalar::I16 | PlyScalar::U16 => 2,
            PlyScalar::I32 | PlyScalar::U32 | PlyScalar::F32 => 4,
            PlyScalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            PlyScalar::I8 => b[0] as i8 as f64,
            PlyScalar::U8 => b[0] as f64,
            PlyScalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyScalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyScalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyScalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyScalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            PlyScalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

#[derive(Debug, Clone)]
enum PlyProperty {
    Scalar { name: String, ty: PlyScalar },
    List { count: PlyScalar, item: PlyScalar },
}

#[derive(Debug, Clone)]
struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

/// Parses a PLY file, reading x,y,z and (when all present) nx,ny,nz from the vertex element.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Option<(usize, String)> {
        if *pos >= bytes.len() {
            return None;
        }
        let end = bytes[*pos..]
            .iter()
            .position(|&b| b == b'\n')
            .map_or(bytes.len(), |e| *pos + e);
        let s = String::from_utf8_lossy(&bytes[*pos..end]).trim().to_string();
        *pos = (end + 1).min(bytes.len());
        line_no += 1;
        Some((line_no, s))
    };

    match next_line(&mut pos) {
        Some((_, s)) if s == "ply" => {}
        _ => return Err(Error::parse(1, "missing `ply` magic")),
    }
    let mut encoding = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut header_lines = 1;
    loop {
        let (ln, l) = next_line(&mut pos).ok_or_else(|| Error::parse(header_lines, "unterminated header"))?;
        header_lines = ln;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.first().copied() {
            Some("format") => {
                encoding = Some(match toks.get(1).copied() {
                    Some("ascii") => PlyEncoding::Ascii,
                    Some("binary_little_endian") => PlyEncoding::BinaryLittleEndian,
                    other => {
                        return Err(Error::parse(ln, format!("unsupported PLY format {other:?}")));
                    }
                });
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(Error::parse(ln, "malformed element line"));
                }
                let count = toks[2]
                    .parse()
                    .map_err(|_| Error::parse(ln, "bad element count"))?;
                elements.push(PlyElement {
                    name: toks[1].to_string(),
                    count,
                    properties: Vec::new(),
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(ln, "property before element"))?;
                if toks.get(1) == Some(&"list") {
                    if toks.len() != 5 {
                        return Err(Error::parse(ln, "malformed list property"));
                    }
                    el.properties.push(PlyProperty::List {
                        count: PlyScalar::parse(toks[2], ln)?,
                        item: PlyScalar::parse(toks[3], ln)?,
                    });
                } else {
                    if toks.len() != 3 {
                        return Err(Error::parse(ln, "malformed property"));
                    }
                    el.properties.push(PlyProperty::Scalar {
                        name: toks[2].to_string(),
                        ty: PlyScalar::parse(toks[1], ln)?,
                    });
                }
            }
            Some("end_header") => break,
            Some("comment") | Some("obj_info") | None => {}
            Some(other) => return Err(Error::parse(ln, format!("unexpected header keyword `{other}`"))),
        }
    }
    let encoding = encoding.ok_or_else(|| Error::parse(header_lines, "missing format line"))?;
    let vertex_idx = elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or_else(|| Error::parse(header_lines, "no vertex element"))?;
    let vertex = &elements[vertex_idx];
    let find = |n: &str| {
        vertex
            .properties
            .iter()
            .position(|p| matches!(p, PlyProperty::Scalar { name, .. } if name == n))
    };
    let (xi, yi, zi) = match (find("x"), find("y"), find("z")) {
        (Some(x), Some(y), Some(z)) => (x, y, z),
        _ => return Err(Error::parse(header_lines, "vertex element lacks x/y/z")),
    };
    let normal_idx = match (find("nx"), find("ny"), find("nz")) {
        (Some(a), Some(b), Some(c)) => Some((a, b, c)),
        _ => None,
    };
    if vertex.count == 0 {
        return Err(Error::EmptyFile);
    }

    let mut points = Vec::with_capacity(vertex.count);
    let mut normals = Vec::new();
    let mut emit = |vals: &[f64], line: usize| -> Result<()> {
        let p = Point3::new(vals[xi], vals[yi], vals[zi]);
        if !p.is_finite() {
            return Err(Error::NonFinite { line });
        }
        points.push(p);
        if let Some((a, b, c)) = normal_idx {
            normals.push(normal_from(vals[a], vals[b], vals[c], line)?);
        }
        Ok(())
    };

    match encoding {
        PlyEncoding::Ascii => {
            let body = String::from_utf8_lossy(&bytes[pos..]);
            let mut lines = body
                .lines()
                .enumerate()
                .map(|(i, l)| (header_lines + 1 + i, l))
                .filter(|(_, l)| !l.trim().is_empty());
            for (ei, el) in elements.iter().enumerate() {
                for _ in 0..el.count {
                    let (ln, l) = lines
                        .next()
                        .ok_or_else(|| Error::parse(header_lines, "truncated PLY body"))?;
                    if ei != vertex_idx {
                        continue;
                    }
                    let vals = l
                        .split_whitespace()
                        .take(el.properties.len())
                        .map(|t| parse_number(t, ln))
                        .collect::<Result<Vec<_>>>()?;
                    if vals.len() < el.properties.len() {
                        return Err(Error::parse(ln, "too few vertex properties"));
                    }
                    emit(&vals, ln)?;
                }
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let data = &bytes[pos..];
            let mut off = 0usize;
            let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
                let s = data
                    .get(*off..*off + n)
                    .ok_or_else(|| Error::Format("truncated binary PLY body".into()))?;
                *off += n;
                Ok(s)
            };
            let mut vals = Vec::new();
            for (ei, el) in elements.iter().enumerate() {
                for row in 0..el.count {
                    vals.clear();
                    for prop in &el.properties {
                        match prop {
                            PlyProperty::Scalar { ty, .. } => {
                                vals.push(ty.read_le(take(&mut off, ty.size())?));
                            }
                            PlyProperty::List { count, item } => {
                                let n = count.read_le(take(&mut off, count.size())?) as usize;
                                take(&mut off, n * item.size())?;
                                vals.push(f64::NAN);
                            }
                        }
                    }
                    if ei == vertex_idx {
                        emit(&vals, header_lines + 1 + row)?;
                    }
                }
            }
        }
    }
    let cloud = PointCloud::new(points)?;
    if normal_idx.is_some() {
        cloud.with_normals(normals)
    } else {
        Ok(cloud)
    }
}

/// Encodes a cloud as binary little-endian PLY with f32 properties.
pub fn format_ply_binary(cloud: &PointCloud) -> Vec<u8> {
    let mut header = String::from("ply\nformat binary_little_endian 1.0\n");
    let _ = writeln!(header, "element vertex {}", cloud.len());
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.normals().is_some() {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    for (i, p) in cloud.points().iter().enumerate() {
        for v in [p.x, p.y, p.z] {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        if let Some(n) = cloud.normals() {
            for v in [n[i].x(), n[i].y(), n[i].z()] {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

/// Vertices, vertex normals and polygonal faces of an OBJ file, in file order.
#[derive(Debug, Clone, Default)]
pub struct ObjMesh {
    pub vertices: Vec<Point3>,
    pub normals: Vec<Point3>,
    /// Zero-based vertex indices per face.
    pub faces: Vec<Vec<usize>>,
}

impl ObjMesh {
    /// Vertex positions in file order; `vn` entries become normals only when
    /// there is exactly one per vertex.
    pub fn into_cloud(self) -> Result<PointCloud> {
        if self.vertices.is_empty() {
            return Err(Error::EmptyFile);
        }
        let n = self.vertices.len();
        let cloud = PointCloud::new(self.vertices)?;
        if self.normals.len() == n {
            let normals = self
                .normals
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    UnitVector3::normalize(*v)
                        .ok_or_else(|| Error::InvalidCloud(format!("zero normal for vertex {i}")))
                })
                .collect::<Result<Vec<_>>>()?;
            cloud.with_normals(normals)
        } else {
            Ok(cloud)
        }
    }
}

pub fn parse_obj(src: &str) -> Result<ObjMesh> {
    let mut mesh = ObjMesh::default();
    for (i, raw) in src.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        let mut toks = body.split_whitespace();
        match toks.next() {
            Some("v") => {
                let vals = toks
                    .take(3)
                    .map(|t| parse_number(t, line))
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() != 3 {
                    return Err(Error::parse(line, "vertex needs 3 coordinates"));
                }
                mesh.vertices.push(Point3::new(vals[0], vals[1], vals[2]));
            }
            Some("vn") => {
                let vals = toks
                    .take(3)
                    .map(|t| parse_number(t, line))
                    .collect::<Result<Vec<_>>>()?;
                if vals.len() != 3 {
                    return Err(Error::parse(line, "normal needs 3 components"));
                }
                mesh.normals.push(Point3::new(vals[0], vals[1], vals[2]));
            }
            Some("f") => {
                let mut face = Vec::new();
                for t in toks {
                    let v = t.split('/').next().unwrap_or("");
                    let idx: i64 = v
                        .parse()
                        .map_err(|_| Error::parse(line, format!("bad face index `{t}`")))?;
                    let n = mesh.vertices.len() as i64;
                    let resolved = if idx > 0 { idx - 1 } else { n + idx };
                    if idx == 0 || resolved < 0 || resolved >= n {
                        return Err(Error::parse(line, format!("face index {idx} out of range")));
                    }
                    face.push(resolved as usize);
                }
                if face.len() < 3 {
                    return Err(Error::parse(line, "face needs at least 3 vertices"));
                }
                mesh.faces.push(face);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

pub fn load_obj_mesh(path: &Path) -> Result<ObjMesh> {
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_obj(&src)
}

/// Writes one index per line.
pub fn write_labels(path: &Path, indices: &[usize]) -> Result<()> {
    fs::write(path, format_labels(indices)).map_err(|e| Error::io(path, e))
}

pub fn format_labels(indices: &[usize]) -> String {
    let mut out = String::with_capacity(indices.len() * 6);
    for i in indices {
        let _ = writeln!(out, "{i}");
    }
    out
}

/// Reads a `.labels` file; indices are validated against `n` and returned sorted and unique.
pub fn read_labels(path: &Path, n: usize) -> Result<Vec<usize>> {
    let src = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&src, n)
}

pub fn parse_labels(src: &str, n: usize) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for (i, raw) in src.lines().enumerate() {
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let idx: usize = t
            .parse()
            .map_err(|_| Error::parse(i + 1, format!("invalid index `{t}`")))?;
        if idx >= n {
            return Err(Error::parse(i + 1, format!("index {idx} out of range for {n} points")));
        }
        out.push(idx);
    }
    out.sort_unstable();
    out.dedup();
    Ok(out)
}
