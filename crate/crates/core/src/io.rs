//! File formats: PLY point clouds, raw planes, PPM images, JSON checkpoints,
//! SOGMM exports and the on-disk dataset layout.
//!
//! Every writer is deterministic: the same value always produces the same bytes.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Quaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{PanopticImage, SyntheticScene};
use crate::losses::Model;
use crate::panoptic::{AttentionWeights, InstanceQuery};
use crate::sogmm::{SogmmComponent, SogmmConfig, SogmmModel};
use crate::types::{validate_scene, Camera, FrameBundle, InstanceMask, Plane, PointCloud, SceneMap, Surfel, IGNORE_LABEL};

pub const CHECKPOINT_FORMAT: &str = "psimap-scene";
pub const SOGMM_FORMAT: &str = "psimap-sogmm";
pub const DATASET_FORMAT: &str = "psimap-dataset";
pub const FORMAT_VERSION: u32 = 1;

const PLANE_MAGIC: &[u8; 4] = b"PSPL";

// ---------------------------------------------------------------- PLY

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlyFormat {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(name: &str) -> Option<Scalar> {
        Some(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar(Scalar, String),
    List(Scalar, Scalar),
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    props: Vec<Property>,
}

struct Header {
    format: PlyFormat,
    elements: Vec<Element>,
    body: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let mut pos = 0;
    let next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| Error::parse(start as u64, "unterminated header"))?;
        *pos = end + 1;
        let line = std::str::from_utf8(&bytes[start..end])
            .map_err(|_| Error::parse(start as u64, "header is not valid UTF-8"))?;
        Ok((start, line.trim_end_matches('\r').to_string()))
    };
    let (at, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(Error::parse(at as u64, "missing `ply` magic"));
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (at, line) = next_line(&mut pos)?;
        let at = at as u64;
        let mut words = line.split_whitespace();
        match words.next() {
            Some("format") => {
                format = Some(match words.next() {
                    Some("ascii") => PlyFormat::Ascii,
                    Some("binary_little_endian") => PlyFormat::BinaryLittleEndian,
                    Some("binary_big_endian") => {
                        return Err(Error::Format("big-endian PLY is not supported".into()))
                    }
                    _ => return Err(Error::parse(at, "unknown PLY format")),
                });
            }
            Some("element") => {
                let name = words.next().ok_or_else(|| Error::parse(at, "element without name"))?;
                let count = words
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| Error::parse(at, "element without a valid count"))?;
                elements.push(Element {
                    name: name.to_string(),
                    count,
                    props: vec![],
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(at, "property before any element"))?;
                let ty = words.next().ok_or_else(|| Error::parse(at, "property without type"))?;
                let prop = if ty == "list" {
                    let n = words.next().and_then(Scalar::parse);
                    let v = words.next().and_then(Scalar::parse);
                    match (n, v) {
                        (Some(n), Some(v)) if !matches!(n, Scalar::F32 | Scalar::F64) => Property::List(n, v),
                        _ => return Err(Error::parse(at, "bad list property types")),
                    }
                } else {
                    let s = Scalar::parse(ty).ok_or_else(|| Error::parse(at, format!("unknown type `{ty}`")))?;
                    let name = words.next().ok_or_else(|| Error::parse(at, "property without name"))?;
                    Property::Scalar(s, name.to_string())
                };
                el.props.push(prop);
            }
            Some("comment") | Some("obj_info") | None => {}
            Some("end_header") => break,
            Some(other) => return Err(Error::parse(at, format!("unexpected header keyword `{other}`"))),
        }
    }
    let format = format.ok_or_else(|| Error::parse(0, "header has no format line"))?;
    Ok(Header {
        format,
        elements,
        body: pos,
    })
}

/// Which vertex columns feed the point cloud.
struct VertexLayout {
    xyz: [usize; 3],
    intensity: Option<usize>,
    rgb: Option<([usize; 3], f64)>,
}

fn vertex_layout(el: &Element) -> Result<VertexLayout> {
    let find = |n: &str| {
        el.props
            .iter()
            .position(|p| matches!(p, Property::Scalar(_, name) if name == n))
    };
    let axis = |n: &str| find(n).ok_or_else(|| Error::Format(format!("vertex element has no `{n}` property")));
    let xyz = [axis("x")?, axis("y")?, axis("z")?];
    let intensity = find("intensity").or_else(|| find("scalar_intensity"));
    let rgb = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => {
            let scale = match &el.props[r] {
                Property::Scalar(Scalar::U8, _) => 255.0,
                Property::Scalar(Scalar::U16, _) => 65535.0,
                _ => 1.0,
            };
            Some(([r, g, b], scale))
        }
        _ => None,
    };
    Ok(VertexLayout { xyz, intensity, rgb })
}

impl VertexLayout {
    fn point(&self, row: &[f64]) -> (Vector3<f64>, f64) {
        let p = Vector3::new(row[self.xyz[0]], row[self.xyz[1]], row[self.xyz[2]]);
        let g = match (self.intensity, self.rgb) {
            (Some(i), _) => row[i],
            (None, Some((c, s))) => (row[c[0]] + row[c[1]] + row[c[2]]) / (3.0 * s),
            _ => 0.0,
        };
        (p, g)
    }
}

/// Parses an ASCII or binary little-endian PLY file into a point cloud.
///
/// Points come from the `vertex` element; intensity is taken from an
/// `intensity` property, else the mean of `red/green/blue`, else zero.
/// Other elements are skipped.
pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let header = parse_header(bytes)?;
    let mut points = Vec::new();
    let mut intensities = Vec::new();
    let mut pos = header.body;
    let mut saw_vertex = false;
    match header.format {
        PlyFormat::Ascii => {
            let mut tokens = AsciiTokens { bytes, pos };
            for el in &header.elements {
                let layout = if el.name == "vertex" {
                    saw_vertex = true;
                    Some(vertex_layout(el)?)
                } else {
                    None
                };
                let mut row = Vec::with_capacity(el.props.len());
                for _ in 0..el.count {
                    row.clear();
                    for p in &el.props {
                        match p {
                            Property::Scalar(..) => row.push(tokens.number()?),
                            Property::List(..) => {
                                let (at, n) = (tokens.pos, tokens.number()?);
                                if n < 0.0 || n.fract() != 0.0 {
                                    return Err(Error::parse(at as u64, "invalid list length"));
                                }
                                for _ in 0..n as usize {
                                    tokens.number()?;
                                }
                                row.push(f64::NAN);
                            }
                        }
                    }
                    if let Some(l) = &layout {
                        let (p, g) = l.point(&row);
                        points.push(p);
                        intensities.push(g);
                    }
                }
            }
            pos = tokens.pos;
        }
        PlyFormat::BinaryLittleEndian => {
            let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
                if *pos + n > bytes.len() {
                    return Err(Error::parse(*pos as u64, "unexpected end of data"));
                }
                let s = &bytes[*pos..*pos + n];
                *pos += n;
                Ok(s)
            };
            for el in &header.elements {
                let layout = if el.name == "vertex" {
                    saw_vertex = true;
                    Some(vertex_layout(el)?)
                } else {
                    None
                };
                let mut row = Vec::with_capacity(el.props.len());
                for _ in 0..el.count {
                    row.clear();
                    for p in &el.props {
                        match *p {
                            Property::Scalar(s, _) => row.push(s.read_le(take(&mut pos, s.size())?)),
                            Property::List(n, v) => {
                                let at = pos;
                                let len = n.read_le(take(&mut pos, n.size())?);
                                if len < 0.0 {
                                    return Err(Error::parse(at as u64, "negative list length"));
                                }
                                take(&mut pos, len as usize * v.size())?;
                                row.push(f64::NAN);
                            }
                        }
                    }
                    if let Some(l) = &layout {
                        let at = pos;
                        let (p, g) = l.point(&row);
                        if !(p.iter().all(|c| c.is_finite()) && g.is_finite()) {
                            return Err(Error::parse(at as u64, "non-finite vertex value"));
                        }
                        points.push(p);
                        intensities.push(g);
                    }
                }
            }
        }
    }
    if !saw_vertex {
        return Err(Error::Format("PLY file has no vertex element".into()));
    }
    if header.format == PlyFormat::BinaryLittleEndian && pos != bytes.len() {
        return Err(Error::parse(pos as u64, "trailing bytes after the last element"));
    }
    PointCloud::new(points, intensities)
}

struct AsciiTokens<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl AsciiTokens<'_> {
    fn number(&mut self) -> Result<f64> {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::parse(start as u64, "unexpected end of data"));
        }
        let tok = std::str::from_utf8(&self.bytes[start..self.pos]).unwrap_or("");
        match tok.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::parse(start as u64, format!("invalid number `{tok}`"))),
        }
    }
}

pub fn read_ply(path: &Path) -> Result<PointCloud> {
    parse_ply(&fs::read(path)?)
}

/// Serializes `cloud` with double `x y z intensity` vertex properties.
pub fn ply_bytes(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let name = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {name} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty double intensity\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    for (p, g) in cloud.points.iter().zip(&cloud.intensities) {
        match format {
            PlyFormat::Ascii => out.extend(format!("{} {} {} {}\n", p.x, p.y, p.z, g).bytes()),
            PlyFormat::BinaryLittleEndian => {
                for v in [p.x, p.y, p.z, *g] {
                    out.extend(v.to_le_bytes());
                }
            }
        }
    }
    out
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<()> {
    fs::write(path, ply_bytes(cloud, format))?;
    Ok(())
}

// ---------------------------------------------------------------- planes and images

/// Raw plane: `PSPL`, then width, height, channels as u32 LE, then f64 LE samples.
pub fn plane_bytes(plane: &Plane) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * plane.data.len());
    out.extend(PLANE_MAGIC);
    for d in [plane.width, plane.height, plane.channels] {
        out.extend((d as u32).to_le_bytes());
    }
    for v in &plane.data {
        out.extend(v.to_le_bytes());
    }
    out
}

pub fn parse_plane(bytes: &[u8]) -> Result<Plane> {
    if bytes.len() < 16 {
        return Err(Error::parse(bytes.len() as u64, "plane header is truncated"));
    }
    if &bytes[..4] != PLANE_MAGIC {
        return Err(Error::parse(0, "missing plane magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (w, h, c) = (dim(0), dim(1), dim(2));
    let n = w
        .checked_mul(h)
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::parse(4, "plane dimensions overflow"))?;
    let expected = n.checked_mul(8).and_then(|v| v.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(Error::parse(
            bytes.len().min(16) as u64,
            format!("expected {n} samples, found {} bytes of data", bytes.len() - 16),
        ));
    }
    let data = bytes[16..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Plane::from_data(w, h, c, data)
}

pub fn write_plane(path: &Path, plane: &Plane) -> Result<()> {
    fs::write(path, plane_bytes(plane))?;
    Ok(())
}

pub fn read_plane(path: &Path) -> Result<Plane> {
    parse_plane(&fs::read(path)?)
}

/// Label plane with one channel; [`IGNORE_LABEL`] is stored as `-1`.
pub fn label_plane(width: usize, height: usize, labels: &[u32]) -> Plane {
    let data = labels
        .iter()
        .map(|&l| if l == IGNORE_LABEL { -1.0 } else { l as f64 })
        .collect();
    Plane {
        width,
        height,
        channels: 1,
        data,
    }
}

pub fn plane_labels(plane: &Plane) -> Result<Vec<u32>> {
    if plane.channels != 1 {
        return Err(Error::invalid("label plane must have one channel"));
    }
    plane
        .data
        .iter()
        .map(|&v| {
            if v == -1.0 {
                Ok(IGNORE_LABEL)
            } else if v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64 {
                Ok(v as u32)
            } else {
                Err(Error::invalid(format!("label plane holds non-label value {v}")))
            }
        })
        .collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PPM (`P6`) for three channels, PGM (`P5`) for one. Values are clamped to `[0, 1]`.
pub fn ppm_bytes(plane: &Plane) -> Result<Vec<u8>> {
    let magic = match plane.channels {
        3 => "P6",
        1 => "P5",
        c => return Err(Error::invalid(format!("cannot write a {c}-channel plane as PPM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", plane.width, plane.height).into_bytes();
    out.extend(plane.data.iter().map(|&v| to_byte(v)));
    Ok(out)
}

pub fn write_ppm(path: &Path, plane: &Plane) -> Result<()> {
    fs::write(path, ppm_bytes(plane)?)?;
    Ok(())
}

/// Stable pseudo-random color per id; `u32::MAX` maps to black.
pub fn id_color(id: u32) -> [f64; 3] {
    if id == u32::MAX {
        return [0.0; 3];
    }
    let mut h = (id as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= h >> 29;
    let c = |s: u32| 0.25 + 0.75 * ((h >> s) & 0xff) as f64 / 255.0;
    [c(0), c(8), c(16)]
}

pub fn colorize_ids(width: usize, height: usize, ids: &[u32]) -> Plane {
    Plane {
        width,
        height,
        channels: 3,
        data: ids.iter().flat_map(|&i| id_color(i)).collect(),
    }
}

// ---------------------------------------------------------------- records

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    pub translation: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub near: f64,
    pub far: f64,
}

fn mat_rows(m: &Matrix3<f64>) -> [f64; 9] {
    let mut out = [0.0; 9];
    for r in 0..3 {
        for c in 0..3 {
            out[3 * r + c] = m[(r, c)];
        }
    }
    out
}

fn mat_from_rows(v: &[f64; 9]) -> Matrix3<f64> {
    Matrix3::from_row_slice(v)
}

impl From<&Camera> for CameraRecord {
    fn from(c: &Camera) -> Self {
        CameraRecord {
            rotation: mat_rows(&c.rotation),
            translation: c.translation.into(),
            fx: c.fx,
            fy: c.fy,
            cx: c.cx,
            cy: c.cy,
            width: c.width,
            height: c.height,
            near: c.near,
            far: c.far,
        }
    }
}

impl CameraRecord {
    pub fn to_camera(&self) -> Result<Camera> {
        Camera::new(
            mat_from_rows(&self.rotation),
            Vector3::from(self.translation),
            self.fx,
            self.fy,
            self.cx,
            self.cy,
            self.width,
            self.height,
            self.near,
            self.far,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SurfelRecord {
    center: [f64; 3],
    /// `[w, x, y, z]`.
    rotation: [f64; 4],
    scales: [f64; 2],
    opacity: f64,
    color: [f64; 3],
    sem: Vec<f64>,
    ins: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct QueryRecord {
    feature: Vec<f64>,
    mean: [f64; 3],
    cov: [f64; 9],
    class_logits: Vec<f64>,
    assign_count: u64,
    alive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AttentionRecord {
    channels: usize,
    head_dim: usize,
    bands: usize,
    w_q: Vec<f64>,
    w_k: Vec<f64>,
    w_v: Vec<f64>,
    pos_proj: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointRecord {
    format: String,
    version: u32,
    vocabulary: Vec<String>,
    surfels: Vec<SurfelRecord>,
    queries: Vec<QueryRecord>,
    attention: AttentionRecord,
}

fn check_tag(format: &str, version: u32, expected: &str) -> Result<()> {
    if format != expected {
        return Err(Error::Format(format!("expected a `{expected}` file, found `{format}`")));
    }
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported {expected} version {version}")));
    }
    Ok(())
}

/// Pretty JSON of the full model: surfels, queries and attention weights.
pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let scene = &model.scene;
    let a = &model.attention;
    let rec = CheckpointRecord {
        format: CHECKPOINT_FORMAT.into(),
        version: FORMAT_VERSION,
        vocabulary: scene.vocabulary.clone(),
        surfels: scene
            .surfels
            .iter()
            .map(|s| SurfelRecord {
                center: s.center.into(),
                rotation: [s.rotation.w, s.rotation.i, s.rotation.j, s.rotation.k],
                scales: s.scales,
                opacity: s.opacity,
                color: s.color.into(),
                sem: s.sem.clone(),
                ins: s.ins.clone(),
            })
            .collect(),
        queries: scene
            .queries
            .iter()
            .map(|q| QueryRecord {
                feature: q.feature.clone(),
                mean: q.mean.into(),
                cov: mat_rows(&q.cov),
                class_logits: q.class_logits.clone(),
                assign_count: q.assign_count,
                alive: q.alive,
            })
            .collect(),
        attention: AttentionRecord {
            channels: a.channels,
            head_dim: a.head_dim,
            bands: a.bands,
            w_q: a.w_q.clone(),
            w_k: a.w_k.clone(),
            w_v: a.w_v.clone(),
            pos_proj: a.pos_proj.clone(),
        },
    };
    let mut out = serde_json::to_vec_pretty(&rec)?;
    out.push(b'\n');
    Ok(out)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Model> {
    let rec: CheckpointRecord = serde_json::from_slice(bytes)?;
    check_tag(&rec.format, rec.version, CHECKPOINT_FORMAT)?;
    let surfels = rec
        .surfels
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            let [w, x, y, z] = s.rotation;
            Surfel::new(
                Vector3::from(s.center),
                Quaternion::new(w, x, y, z),
                s.scales,
                s.opacity,
                Vector3::from(s.color),
                s.sem,
                s.ins,
            )
            .map_err(|e| Error::invalid(format!("surfel {i}: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let queries = rec
        .queries
        .into_iter()
        .map(|q| InstanceQuery {
            feature: q.feature,
            mean: Vector3::from(q.mean),
            cov: mat_from_rows(&q.cov),
            class_logits: q.class_logits,
            assign_count: q.assign_count,
            alive: q.alive,
        })
        .collect();
    let scene = SceneMap {
        surfels,
        vocabulary: rec.vocabulary,
        queries,
    };
    if let Some(v) = validate_scene(&scene).first() {
        return Err(Error::invalid(format!("checkpoint scene is invalid: {v}")));
    }
    let a = rec.attention;
    let (c, d, enc) = (a.channels, a.head_dim, 6 * a.bands);
    if a.w_q.len() != c * d || a.w_k.len() != c * d || a.w_v.len() != c * c || a.pos_proj.len() != enc * c {
        return Err(Error::invalid("attention weight shapes do not match their dimensions"));
    }
    if scene.ins_dim() != 0 && scene.ins_dim() != c {
        return Err(Error::invalid("attention width differs from the instance feature width"));
    }
    Ok(Model {
        scene,
        attention: AttentionWeights {
            channels: c,
            head_dim: d,
            bands: a.bands,
            w_q: a.w_q,
            w_k: a.w_k,
            w_v: a.w_v,
            pos_proj: a.pos_proj,
        },
    })
}

pub fn write_checkpoint(path: &Path, model: &Model) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Model> {
    parse_checkpoint(&fs::read(path)?)
}

// ---------------------------------------------------------------- SOGMM

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ComponentRecord {
    weight: f64,
    mean: [f64; 3],
    cov: [f64; 9],
    /// Descending.
    eigenvalues: [f64; 3],
    normal: [f64; 3],
    intensity_mean: f64,
    intensity_var: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SogmmConfigRecord {
    planarity_threshold: f64,
    min_points: usize,
    max_depth: usize,
    em_iters: usize,
    viewpoints: Vec<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SogmmRecord {
    format: String,
    version: u32,
    config: SogmmConfigRecord,
    log_likelihood: Vec<f64>,
    components: Vec<ComponentRecord>,
}

pub fn sogmm_bytes(model: &SogmmModel) -> Result<Vec<u8>> {
    let c = &model.config;
    let rec = SogmmRecord {
        format: SOGMM_FORMAT.into(),
        version: FORMAT_VERSION,
        config: SogmmConfigRecord {
            planarity_threshold: c.planarity_threshold,
            min_points: c.min_points,
            max_depth: c.max_depth,
            em_iters: c.em_iters,
            viewpoints: c.viewpoints.iter().map(|v| (*v).into()).collect(),
        },
        log_likelihood: model.log_likelihood.clone(),
        components: model
            .components
            .iter()
            .map(|k| ComponentRecord {
                weight: k.weight,
                mean: k.mean.into(),
                cov: mat_rows(&k.cov),
                eigenvalues: k.frame.values,
                normal: k.normal().into(),
                intensity_mean: k.intensity_mean,
                intensity_var: k.intensity_var,
            })
            .collect(),
    };
    let mut out = serde_json::to_vec_pretty(&rec)?;
    out.push(b'\n');
    Ok(out)
}

/// Rebuilds a mixture; normals keep the stored orientation.
pub fn parse_sogmm(bytes: &[u8]) -> Result<SogmmModel> {
    let rec: SogmmRecord = serde_json::from_slice(bytes)?;
    check_tag(&rec.format, rec.version, SOGMM_FORMAT)?;
    let components = rec
        .components
        .iter()
        .map(|k| {
            let mean = Vector3::from(k.mean);
            let mut c = SogmmComponent::new(k.weight, mean, mat_from_rows(&k.cov), Some(mean + Vector3::from(k.normal)))?;
            c.intensity_mean = k.intensity_mean;
            c.intensity_var = k.intensity_var;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let c = rec.config;
    Ok(SogmmModel {
        components,
        config: SogmmConfig {
            planarity_threshold: c.planarity_threshold,
            min_points: c.min_points,
            max_depth: c.max_depth,
            em_iters: c.em_iters,
            viewpoints: c.viewpoints.into_iter().map(Vector3::from).collect(),
        },
        log_likelihood: rec.log_likelihood,
    })
}

pub fn write_sogmm(path: &Path, model: &SogmmModel) -> Result<()> {
    fs::write(path, sogmm_bytes(model)?)?;
    Ok(())
}

pub fn read_sogmm(path: &Path) -> Result<SogmmModel> {
    parse_sogmm(&fs::read(path)?)
}

// ---------------------------------------------------------------- dataset

/// A posed RGB sequence with pseudo-labels and optional clean labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub vocabulary: Vec<String>,
    pub cloud: PointCloud,
    pub frames: Vec<FrameBundle>,
    pub held_out: Vec<bool>,
    /// Clean panoptic labels per frame, when known.
    pub truth: Vec<Option<PanopticImage>>,
}

impl Dataset {
    pub fn from_synthetic(scene: &SyntheticScene) -> Self {
        Dataset {
            vocabulary: scene.spec.vocabulary.clone(),
            cloud: scene.cloud.clone(),
            frames: scene.frames.clone(),
            held_out: scene.held_out.clone(),
            truth: scene.truth.iter().map(|t| Some(t.panoptic.clone())).collect(),
        }
    }

    pub fn train_frames(&self) -> Vec<FrameBundle> {
        self.frames
            .iter()
            .zip(&self.held_out)
            .filter(|(_, &h)| !h)
            .map(|(f, _)| f.clone())
            .collect()
    }

    pub fn held_out_indices(&self) -> Vec<usize> {
        (0..self.frames.len()).filter(|&i| self.held_out[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameRecord {
    dir: String,
    camera: CameraRecord,
    held_out: bool,
    /// Class of each channel of `masks.plane`.
    mask_classes: Vec<u32>,
    ground_truth: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ManifestRecord {
    format: String,
    version: u32,
    vocabulary: Vec<String>,
    cloud: String,
    frames: Vec<FrameRecord>,
}

/// Writes `manifest.json`, `cloud.ply` and one `frames/NNNN` directory per
/// frame holding `rgb.plane`, `rgb.ppm`, `classes.plane` (semantic
/// pseudo-labels), `masks.plane` (one channel per instance mask) and, when
/// known, `ids.plane` / `gt_classes.plane` with the clean panoptic labels.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    if data.held_out.len() != data.frames.len() || data.truth.len() != data.frames.len() {
        return Err(Error::invalid("dataset tables disagree on the frame count"));
    }
    fs::create_dir_all(dir.join("frames"))?;
    write_ply(&dir.join("cloud.ply"), &data.cloud, PlyFormat::BinaryLittleEndian)?;
    let mut records = Vec::with_capacity(data.frames.len());
    for (i, f) in data.frames.iter().enumerate() {
        let rel = format!("frames/{i:04}");
        let fd = dir.join(&rel);
        fs::create_dir_all(&fd)?;
        let (w, h) = (f.camera.width as usize, f.camera.height as usize);
        write_plane(&fd.join("rgb.plane"), &f.rgb)?;
        write_ppm(&fd.join("rgb.ppm"), &f.rgb)?;
        write_plane(&fd.join("classes.plane"), &label_plane(w, h, &f.semantic))?;
        let m = f.instances.len();
        let mut masks = Plane::new(w, h, m);
        for (k, inst) in f.instances.iter().enumerate() {
            for (p, &on) in inst.mask.iter().enumerate() {
                masks.data[p * m + k] = if on { 1.0 } else { 0.0 };
            }
        }
        write_plane(&fd.join("masks.plane"), &masks)?;
        if let Some(t) = &data.truth[i] {
            write_plane(&fd.join("ids.plane"), &label_plane(w, h, &t.ids))?;
            write_plane(&fd.join("gt_classes.plane"), &label_plane(w, h, &t.classes))?;
        }
        records.push(FrameRecord {
            dir: rel,
            camera: (&f.camera).into(),
            held_out: data.held_out[i],
            mask_classes: f.instances.iter().map(|m| m.class_id).collect(),
            ground_truth: data.truth[i].is_some(),
        });
    }
    let manifest = ManifestRecord {
        format: DATASET_FORMAT.into(),
        version: FORMAT_VERSION,
        vocabulary: data.vocabulary.clone(),
        cloud: "cloud.ply".into(),
        frames: records,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest)?;
    bytes.push(b'\n');
    fs::write(dir.join("manifest.json"), bytes)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: ManifestRecord = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    check_tag(&manifest.format, manifest.version, DATASET_FORMAT)?;
    let cloud = read_ply(&dir.join(&manifest.cloud))?;
    let classes = manifest.vocabulary.len();
    let mut frames = Vec::new();
    let mut held_out = Vec::new();
    let mut truth = Vec::new();
    for rec in &manifest.frames {
        let fd = dir.join(&rec.dir);
        let camera = rec.camera.to_camera()?;
        let (w, h) = (camera.width as usize, camera.height as usize);
        let shape = |p: &Plane, c: usize, name: &str| {
            if p.width != w || p.height != h || p.channels != c {
                return Err(Error::invalid(format!("{}: {name} has the wrong shape", rec.dir)));
            }
            Ok(())
        };
        let rgb = read_plane(&fd.join("rgb.plane"))?;
        let semantic = plane_labels(&read_plane(&fd.join("classes.plane"))?)?;
        let masks = read_plane(&fd.join("masks.plane"))?;
        let m = rec.mask_classes.len();
        shape(&masks, m, "masks.plane")?;
        let instances = rec
            .mask_classes
            .iter()
            .enumerate()
            .map(|(k, &class_id)| InstanceMask {
                class_id,
                mask: (0..w * h).map(|p| masks.data[p * m + k] > 0.5).collect(),
            })
            .collect();
        frames.push(FrameBundle::new(camera, rgb, semantic, instances, classes)?);
        held_out.push(rec.held_out);
        truth.push(if rec.ground_truth {
            let ids = read_plane(&fd.join("ids.plane"))?;
            let cls = read_plane(&fd.join("gt_classes.plane"))?;
            shape(&ids, 1, "ids.plane")?;
            shape(&cls, 1, "gt_classes.plane")?;
            Some(PanopticImage::new(w, h, plane_labels(&ids)?, plane_labels(&cls)?)?)
        } else {
            None
        });
    }
    Ok(Dataset {
        vocabulary: manifest.vocabulary,
        cloud,
        frames,
        held_out,
        truth,
    })
}
