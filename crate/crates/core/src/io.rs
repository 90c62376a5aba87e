//! File formats: binary rasters, sparse depth CSV, camera and config key-value files,
//! ascii PLY meshes, OBJ export, frame manifests and network weights.
//!
//! Parse errors carry the byte offset of the offending token; semantic violations are
//! validation errors naming the record.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::mesh::TriMesh;
use crate::raster::Raster;
use crate::refine::GcnWeights;
use crate::scalar::Real;
use crate::sparse::{SparseDepth, SparseDepthSet};

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse { offset, message: message.into() }
}

/// Lines of `text` with the byte offset of each line start, comments and blank
/// lines removed.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, usize, &str)> {
    let mut offset = 0;
    text.split_inclusive('\n').enumerate().filter_map(move |(i, raw)| {
        let start = offset;
        offset += raw.len();
        let line = raw.split('#').next().unwrap_or("").trim_end();
        (!line.trim().is_empty()).then_some((i + 1, start, line))
    })
}

/// Whitespace-separated tokens of a line with their absolute byte offsets.
fn tokens(line: &str, base: usize) -> Vec<(usize, &str)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, c) in line.char_indices() {
        if c.is_whitespace() || c == ',' {
            if let Some(s) = start.take() {
                out.push((base + s, &line[s..i]));
            }
        } else if start.is_none() {
            start = Some(i);
        }
    }
    if let Some(s) = start {
        out.push((base + s, &line[s..]));
    }
    out
}

fn parse_f64(tok: (usize, &str)) -> Result<f64> {
    tok.1.parse::<f64>().map_err(|_| parse_err(tok.0, format!("expected a number, found '{}'", tok.1)))
}

fn parse_usize(tok: (usize, &str)) -> Result<usize> {
    tok.1.parse::<usize>().map_err(|_| parse_err(tok.0, format!("expected a non-negative integer, found '{}'", tok.1)))
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, bytes)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

// ---------------------------------------------------------------- rasters

pub const RASTER_MAGIC: &str = "TMRAST";

/// `TMRAST W H C\n` followed by W·H·C little-endian f32 values, row-major with
/// interleaved channels.
pub fn encode_raster<T: Real>(raster: &Raster<T>) -> Vec<u8> {
    let (w, h, c) = raster.dims();
    let mut out = format!("{RASTER_MAGIC} {w} {h} {c}\n").into_bytes();
    out.reserve(w * h * c * 4);
    for v in raster.as_slice() {
        out.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
    }
    out
}

pub fn decode_raster<T: Real>(bytes: &[u8]) -> Result<Raster<T>> {
    let end = bytes
        .iter()
        .take(256)
        .position(|&b| b == b'\n')
        .ok_or_else(|| parse_err(bytes.len().min(256), "raster header is not terminated"))?;
    let header =
        std::str::from_utf8(&bytes[..end]).map_err(|e| parse_err(e.valid_up_to(), "raster header is not text"))?;
    let toks = tokens(header, 0);
    if toks.first().map(|t| t.1) != Some(RASTER_MAGIC) {
        return Err(parse_err(0, format!("expected magic '{RASTER_MAGIC}'")));
    }
    if toks.len() != 4 {
        return Err(parse_err(end, "raster header needs width, height and channels"));
    }
    let (w, h, c) = (parse_usize(toks[1])?, parse_usize(toks[2])?, parse_usize(toks[3])?);
    let payload = &bytes[end + 1..];
    let expected = w
        .checked_mul(h)
        .and_then(|n| n.checked_mul(c))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| parse_err(toks[1].0, "raster dimensions overflow"))?;
    if payload.len() < expected {
        let offset = end + 1 + payload.len() / 4 * 4;
        return Err(parse_err(offset, format!("truncated payload: {} of {expected} bytes", payload.len())));
    }
    if payload.len() > expected {
        return Err(parse_err(end + 1 + expected, "trailing bytes after raster payload"));
    }
    let data = payload.chunks_exact(4).map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)).collect();
    Raster::from_vec(w, h, c, data)
}

pub fn load_raster<T: Real>(path: &Path) -> Result<Raster<T>> {
    decode_raster(&read_bytes(path)?)
}

pub fn save_raster<T: Real>(path: &Path, raster: &Raster<T>) -> Result<()> {
    write_file(path, &encode_raster(raster))
}

// ---------------------------------------------------------------- sparse depth

/// `u,v,depth` lines; `#` starts a comment.
pub fn parse_sparse<T: Real>(text: &str, width: usize, height: usize) -> Result<SparseDepthSet<T>> {
    let mut records = Vec::new();
    let mut lines = Vec::new();
    let mut seen = std::collections::HashMap::new();
    for (line_no, start, line) in content_lines(text) {
        let toks = tokens(line, start);
        if toks.len() != 3 {
            return Err(parse_err(start, format!("line {line_no}: expected 'u,v,depth'")));
        }
        let r = SparseDepth {
            u: T::lit(parse_f64(toks[0])?),
            v: T::lit(parse_f64(toks[1])?),
            depth: T::lit(parse_f64(toks[2])?),
        };
        if r.u >= T::zero() && r.v >= T::zero() {
            if let Some(first) = seen.insert(r.pixel(), line_no) {
                return Err(Error::Validation(format!(
                    "line {line_no}: duplicate measurement on pixel {:?} (first on line {first})",
                    r.pixel()
                )));
            }
        }
        records.push(r);
        lines.push(line_no);
    }
    SparseDepthSet::new(records, width, height).map_err(|e| match e {
        Error::Validation(msg) => {
            let rewritten = msg
                .strip_prefix("record ")
                .and_then(|rest| rest.split_once(':'))
                .and_then(|(idx, tail)| idx.parse::<usize>().ok().map(|i| format!("line {}:{tail}", lines[i])));
            Error::Validation(rewritten.unwrap_or(msg))
        }
        other => other,
    })
}

pub fn format_sparse<T: Real>(set: &SparseDepthSet<T>) -> String {
    let mut s = String::from("# u,v,depth\n");
    for r in set.records() {
        let _ = writeln!(s, "{:?},{:?},{:?}", r.u, r.v, r.depth);
    }
    s
}

pub fn load_sparse<T: Real>(path: &Path, width: usize, height: usize) -> Result<SparseDepthSet<T>> {
    parse_sparse(&read_text(path)?, width, height)
}

// ---------------------------------------------------------------- key-value files

/// `key value...` lines; `#` starts a comment. Keys are unique.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    entries: Vec<(String, Vec<String>, usize)>,
}

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, Vec<String>, usize)> = Vec::new();
        for (line_no, start, line) in content_lines(text) {
            let toks = tokens(
                line.trim_start_matches(|c: char| c.is_whitespace()),
                start + line.len() - line.trim_start().len(),
            );
            let key = toks[0].1.trim_end_matches(['=', ':']).to_string();
            let values: Vec<String> = toks[1..].iter().map(|t| t.1).filter(|v| *v != "=").map(String::from).collect();
            if entries.iter().any(|e| e.0 == key) {
                return Err(Error::Validation(format!("line {line_no}: duplicate key '{key}'")));
            }
            entries.push((key, values, line_no));
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read_text(path)?)
    }

    pub fn insert(&mut self, key: &str, values: Vec<String>) {
        match self.entries.iter_mut().find(|e| e.0 == key) {
            Some(e) => e.1 = values,
            None => self.entries.push((key.to_string(), values, 0)),
        }
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.0.as_str())
    }

    pub fn get(&self, key: &str) -> Option<&[String]> {
        self.entries.iter().find(|e| e.0 == key).map(|e| e.1.as_slice())
    }

    fn line(&self, key: &str) -> usize {
        self.entries.iter().find(|e| e.0 == key).map_or(0, |e| e.2)
    }

    fn bad(&self, key: &str, what: &str) -> Error {
        Error::Validation(format!("line {}: key '{key}' {what}", self.line(key)))
    }

    pub fn numbers(&self, key: &str, count: usize) -> Result<Option<Vec<f64>>> {
        let Some(values) = self.get(key) else { return Ok(None) };
        if values.len() != count {
            return Err(self.bad(key, &format!("needs {count} value(s), found {}", values.len())));
        }
        values
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| self.bad(key, &format!("has non-numeric value '{v}'"))))
            .collect::<Result<Vec<_>>>()
            .map(Some)
    }

    pub fn number(&self, key: &str) -> Result<Option<f64>> {
        Ok(self.numbers(key, 1)?.map(|v| v[0]))
    }

    pub fn integer(&self, key: &str) -> Result<Option<usize>> {
        match self.string(key)? {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| self.bad(key, &format!("has non-integer value '{v}'"))),
        }
    }

    pub fn string(&self, key: &str) -> Result<Option<&str>> {
        match self.get(key) {
            None => Ok(None),
            Some([v]) => Ok(Some(v.as_str())),
            Some(_) => Err(self.bad(key, "needs exactly one value")),
        }
    }

    pub fn boolean(&self, key: &str) -> Result<Option<bool>> {
        match self.string(key)? {
            None => Ok(None),
            Some("true" | "1" | "yes") => Ok(Some(true)),
            Some("false" | "0" | "no") => Ok(Some(false)),
            Some(v) => Err(self.bad(key, &format!("has non-boolean value '{v}'"))),
        }
    }

    fn require(&self, key: &str, count: usize) -> Result<Vec<f64>> {
        self.numbers(key, count)?.ok_or_else(|| Error::Validation(format!("missing key '{key}'")))
    }
}

// ---------------------------------------------------------------- cameras

/// Intrinsics plus the world-to-camera extrinsics `rotation` (9 values, row-major)
/// and `translation` (3 values).
pub fn format_camera<T: Real>(cam: &CameraModel<T>) -> String {
    let mut s = String::new();
    for (k, v) in [("fx", cam.fx), ("fy", cam.fy), ("cx", cam.cx), ("cy", cam.cy)] {
        let _ = writeln!(s, "{k} {v:?}");
    }
    let _ = writeln!(s, "width {}", cam.width);
    let _ = writeln!(s, "height {}", cam.height);
    let r: Vec<String> = cam.rotation.iter().flatten().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(s, "rotation {}", r.join(" "));
    let t: Vec<String> = cam.translation.iter().map(|v| format!("{v:?}")).collect();
    let _ = writeln!(s, "translation {}", t.join(" "));
    s
}

pub fn parse_camera<T: Real>(text: &str) -> Result<CameraModel<T>> {
    let kv = KeyValues::parse(text)?;
    let one = |k: &str| -> Result<T> { Ok(T::lit(kv.require(k, 1)?[0])) };
    let size =
        |k: &str| -> Result<usize> { kv.integer(k)?.ok_or_else(|| Error::Validation(format!("missing key '{k}'"))) };
    let r = kv.require("rotation", 9)?;
    let t = kv.require("translation", 3)?;
    let rotation = [0, 1, 2].map(|i| [0, 1, 2].map(|j| T::lit(r[3 * i + j])));
    CameraModel::new(
        one("fx")?,
        one("fy")?,
        one("cx")?,
        one("cy")?,
        size("width")?,
        size("height")?,
        rotation,
        [T::lit(t[0]), T::lit(t[1]), T::lit(t[2])],
    )
}

pub fn load_camera<T: Real>(path: &Path) -> Result<CameraModel<T>> {
    parse_camera(&read_text(path)?)
}

// ---------------------------------------------------------------- meshes

/// Ascii PLY with `x y z score_0..score_{s-1} label` vertices and triangle faces.
pub fn format_ply<T: Real>(mesh: &TriMesh<T>) -> String {
    let s = mesh.classes();
    let mut out = String::with_capacity(64 * mesh.vertex_count());
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", mesh.vertex_count());
    out.push_str("property double x\nproperty double y\nproperty double z\n");
    for c in 0..s {
        let _ = writeln!(out, "property double score_{c}");
    }
    out.push_str("property uchar label\n");
    let _ = writeln!(out, "element face {}", mesh.face_count());
    out.push_str("property list uchar int vertex_indices\nend_header\n");
    let labels = mesh.labels();
    for (i, v) in mesh.vertices.iter().enumerate() {
        let _ = write!(out, "{:?} {:?} {:?}", v[0], v[1], v[2]);
        for c in 0..s {
            let _ = write!(out, " {:?}", mesh.semantics[(i, c)]);
        }
        let _ = writeln!(out, " {}", labels[i]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "3 {} {} {}", f[0], f[1], f[2]);
    }
    out
}

pub fn parse_ply<T: Real>(text: &str) -> Result<TriMesh<T>> {
    let mut offset = 0;
    let mut lines = text.split_inclusive('\n').map(|l| {
        let start = offset;
        offset += l.len();
        (start, l.trim_end())
    });
    let mut next = |what: &str| {
        lines.next().ok_or_else(|| parse_err(text.len(), format!("unexpected end of file, expected {what}")))
    };
    let (o, magic) = next("'ply'")?;
    if magic != "ply" {
        return Err(parse_err(o, "expected 'ply'"));
    }
    let (o, fmt) = next("format line")?;
    if fmt != "format ascii 1.0" {
        return Err(parse_err(o, "only 'format ascii 1.0' is supported"));
    }
    let (mut nv, mut nf) = (None, None);
    let mut vprops: Vec<String> = Vec::new();
    let mut in_vertex = false;
    loop {
        let (o, line) = next("'end_header'")?;
        let toks = tokens(line, o);
        match toks.first().map(|t| t.1) {
            Some("end_header") => break,
            Some("comment" | "obj_info") | None => {}
            Some("element") if toks.len() == 3 => {
                let n = parse_usize(toks[2])?;
                match toks[1].1 {
                    "vertex" => {
                        nv = Some(n);
                        in_vertex = true;
                    }
                    "face" => {
                        nf = Some(n);
                        in_vertex = false;
                    }
                    other => return Err(parse_err(toks[1].0, format!("unsupported element '{other}'"))),
                }
            }
            Some("property") if in_vertex && toks.len() == 3 => vprops.push(toks[2].1.to_string()),
            Some("property") if !in_vertex => {}
            _ => return Err(parse_err(o, format!("unrecognized header line '{line}'"))),
        }
    }
    let (nv, nf) = (nv.ok_or_else(|| parse_err(0, "missing vertex element"))?, nf.unwrap_or(0));
    if vprops.len() < 3 || vprops[..3] != ["x", "y", "z"] {
        return Err(parse_err(0, "vertex properties must start with x y z"));
    }
    let classes = vprops.iter().filter(|p| p.starts_with("score_")).count();
    for (c, p) in vprops[3..3 + classes].iter().enumerate() {
        if *p != format!("score_{c}") {
            return Err(parse_err(0, format!("expected property score_{c}, found {p}")));
        }
    }
    let mut vertices = Vec::with_capacity(nv);
    let mut scores = Vec::with_capacity(nv * classes);
    for i in 0..nv {
        let (o, line) = next("vertex record")?;
        let toks = tokens(line, o);
        if toks.len() != vprops.len() {
            return Err(parse_err(o, format!("vertex {i}: expected {} values", vprops.len())));
        }
        vertices.push([T::lit(parse_f64(toks[0])?), T::lit(parse_f64(toks[1])?), T::lit(parse_f64(toks[2])?)]);
        for t in &toks[3..3 + classes] {
            scores.push(T::lit(parse_f64(*t)?));
        }
    }
    let mut faces = Vec::with_capacity(nf);
    for i in 0..nf {
        let (o, line) = next("face record")?;
        let toks = tokens(line, o);
        if toks.len() != 4 || toks[0].1 != "3" {
            return Err(parse_err(o, format!("face {i}: expected '3 a b c'")));
        }
        faces.push([parse_usize(toks[1])?, parse_usize(toks[2])?, parse_usize(toks[3])?]);
    }
    let classes_or_default = if classes == 0 { crate::mesh::DEFAULT_CLASSES } else { classes };
    let mesh = TriMesh::new(vertices, faces, classes_or_default)?;
    Ok(if classes == 0 { mesh } else { mesh.with_semantics(Matrix::from_vec(nv, classes, scores)) })
}

/// Wavefront OBJ with geometry only.
pub fn format_obj<T: Real>(mesh: &TriMesh<T>) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:?} {:?} {:?}", v[0], v[1], v[2]);
    }
    for f in mesh.faces() {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn load_mesh<T: Real>(path: &Path) -> Result<TriMesh<T>> {
    parse_ply(&read_text(path)?)
}

pub fn save_mesh<T: Real>(path: &Path, mesh: &TriMesh<T>) -> Result<()> {
    write_file(path, format_ply(mesh).as_bytes())
}

// ---------------------------------------------------------------- manifests

/// One keyframe of a manifest; paths are resolved against the manifest directory.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub frame_id: usize,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub sem: PathBuf,
    pub sparse: PathBuf,
    pub camera: PathBuf,
    pub segfeat: Option<PathBuf>,
}

/// `frame_id rgb depth sem sparse camera [segfeat]` per line.
pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out: Vec<ManifestEntry> = Vec::new();
    for (line_no, start, line) in content_lines(text) {
        let toks = tokens(line, start);
        if !(6..=7).contains(&toks.len()) {
            return Err(parse_err(start, format!("line {line_no}: expected 6 or 7 fields")));
        }
        let frame_id = parse_usize(toks[0])?;
        if out.iter().any(|e| e.frame_id == frame_id) {
            return Err(Error::Validation(format!("line {line_no}: duplicate frame id {frame_id}")));
        }
        let p = |i: usize| base.join(toks[i].1);
        out.push(ManifestEntry {
            frame_id,
            rgb: p(1),
            depth: p(2),
            sem: p(3),
            sparse: p(4),
            camera: p(5),
            segfeat: (toks.len() == 7).then(|| p(6)),
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyInput("manifest lists no frames".into()));
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry], base: &Path) -> String {
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut s = String::new();
    for e in entries {
        let _ = write!(
            s,
            "{} {} {} {} {} {}",
            e.frame_id,
            rel(&e.rgb),
            rel(&e.depth),
            rel(&e.sem),
            rel(&e.sparse),
            rel(&e.camera)
        );
        if let Some(f) = &e.segfeat {
            let _ = write!(s, " {}", rel(f));
        }
        s.push('\n');
    }
    s
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    parse_manifest(&read_text(path)?, path.parent().unwrap_or(Path::new(".")))
}

// ---------------------------------------------------------------- weights

pub const WEIGHTS_MAGIC: &str = "TMGCN1";

/// `TMGCN1 <count>\n`, then per tensor `<name> <rows> <cols>\n` followed by rows·cols
/// little-endian f64 values.
pub fn encode_weights<T: Real>(weights: &GcnWeights<T>) -> Vec<u8> {
    let tensors = weights.serialized_tensors();
    let mut out = format!("{WEIGHTS_MAGIC} {}\n", tensors.len()).into_bytes();
    for (name, m) in tensors {
        out.extend_from_slice(format!("{name} {} {}\n", m.rows(), m.cols()).as_bytes());
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_f64_lossy().to_le_bytes());
        }
    }
    out
}

pub fn decode_weights<T: Real>(bytes: &[u8]) -> Result<GcnWeights<T>> {
    let mut pos = 0;
    let header = |pos: &mut usize| -> Result<(usize, Vec<(usize, String)>)> {
        let start = *pos;
        let end = bytes[start..]
            .iter()
            .take(512)
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(start, "unterminated header line"))?;
        let line =
            std::str::from_utf8(&bytes[start..start + end]).map_err(|_| parse_err(start, "header line is not text"))?;
        *pos = start + end + 1;
        Ok((start, tokens(line, start).into_iter().map(|(o, t)| (o, t.to_string())).collect()))
    };
    let (o, first) = header(&mut pos)?;
    if first.len() != 2 || first[0].1 != WEIGHTS_MAGIC {
        return Err(parse_err(o, format!("expected '{WEIGHTS_MAGIC} <count>'")));
    }
    let count = parse_usize((first[1].0, &first[1].1))?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let (o, t) = header(&mut pos)?;
        if t.len() != 3 {
            return Err(parse_err(o, "expected '<name> <rows> <cols>'"));
        }
        let (rows, cols) = (parse_usize((t[1].0, &t[1].1))?, parse_usize((t[2].0, &t[2].1))?);
        let len = rows.checked_mul(cols).and_then(|n| n.checked_mul(8)).unwrap_or(usize::MAX);
        if bytes.len() - pos < len {
            return Err(parse_err(bytes.len() / 8 * 8, format!("tensor '{}' is truncated", t[0].1)));
        }
        let data = bytes[pos..pos + len]
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap_or([0; 8]))))
            .collect();
        pos += len;
        tensors.push((t[0].1.clone(), Matrix::from_vec(rows, cols, data)));
    }
    if pos != bytes.len() {
        return Err(parse_err(pos, "trailing bytes after the last tensor"));
    }
    GcnWeights::from_named(tensors)
}

pub fn load_weights<T: Real>(path: &Path) -> Result<GcnWeights<T>> {
    decode_weights(&read_bytes(path)?)
}

pub fn save_weights<T: Real>(path: &Path, weights: &GcnWeights<T>) -> Result<()> {
    write_file(path, &encode_weights(weights))
}
