//! Text formats: XYZ and ASCII PLY clouds, OBJ and OFF meshes, PGM images,
//! CSV loss logs and metric reports.
//!
//! Coordinates are written with 17 significant digits so that a save/load
//! round trip reproduces every `f64` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, TriangleMesh};
use crate::metrics::{PointToMesh, REPORT_SCALE};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloudFormat {
    Xyz,
    PlyAscii,
}

impl CloudFormat {
    /// Picks the format from a file extension (`.xyz`, `.txt`, `.pts`, `.ply`).
    pub fn from_path(path: &Path) -> Result<Self> {
        match extension(path).as_deref() {
            Some("xyz" | "txt" | "pts") => Ok(CloudFormat::Xyz),
            Some("ply") => Ok(CloudFormat::PlyAscii),
            _ => Err(Error::invalid(format!(
                "cannot tell the point cloud format of {}",
                path.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshFormat {
    Obj,
    Off,
}

impl MeshFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match extension(path).as_deref() {
            Some("obj") => Ok(MeshFormat::Obj),
            Some("off") => Ok(MeshFormat::Off),
            _ => Err(Error::invalid(format!("cannot tell the mesh format of {}", path.display()))),
        }
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase())
}

fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn parse_f64(tok: &str, line: usize) -> Result<f64> {
    let v: f64 = tok
        .parse()
        .map_err(|_| Error::parse(line, format!("not a number: {tok:?}")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("non-finite coordinate {tok:?}")));
    }
    Ok(v)
}

fn parse_usize(tok: &str, line: usize) -> Result<usize> {
    tok.parse()
        .map_err(|_| Error::parse(line, format!("not a non-negative integer: {tok:?}")))
}

fn parse_point(toks: &[&str], line: usize) -> Result<Point3> {
    Ok([
        parse_f64(toks[0], line)?,
        parse_f64(toks[1], line)?,
        parse_f64(toks[2], line)?,
    ])
}

/// One `x y z` triple per line. Blank lines and `#` comments are skipped;
/// extra columns (normals, colours) are ignored.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::parse(i + 1, "expected three coordinates"));
        }
        points.push(parse_point(&toks, i + 1)?);
    }
    Ok(PointCloud::new(points))
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72);
    for p in &cloud.points {
        let _ = writeln!(out, "{} {} {}", fmt_f64(p[0]), fmt_f64(p[1]), fmt_f64(p[2]));
    }
    out
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<String>,
    has_list: bool,
}

/// ASCII PLY. Only the `vertex` element is kept; every other element's rows
/// are skipped, and the number of body rows must match the header.
pub fn parse_ply(text: &str) -> Result<PointCloud> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, l)) if l.trim() == "ply" => {}
        _ => return Err(Error::parse(1, "missing 'ply' magic")),
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    let mut saw_format = false;
    loop {
        let (i, raw) = lines
            .next()
            .ok_or_else(|| Error::parse(text.lines().count(), "header has no end_header"))?;
        let no = i + 1;
        let toks: Vec<&str> = raw.split_whitespace().collect();
        match toks.first().copied() {
            None | Some("comment") | Some("obj_info") => {}
            Some("format") => {
                if toks.get(1) != Some(&"ascii") {
                    return Err(Error::parse(no, "only ASCII PLY is supported"));
                }
                saw_format = true;
            }
            Some("element") => {
                if toks.len() != 3 {
                    return Err(Error::parse(no, "malformed element line"));
                }
                elements.push(PlyElement {
                    name: toks[1].to_string(),
                    count: parse_usize(toks[2], no)?,
                    properties: Vec::new(),
                    has_list: false,
                });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(no, "property before any element"))?;
                let name = toks.last().filter(|_| toks.len() >= 3).ok_or_else(|| Error::parse(no, "malformed property line"))?;
                if toks[1] == "list" {
                    el.has_list = true;
                }
                el.properties.push(name.to_string());
            }
            Some("end_header") => break,
            Some(other) => return Err(Error::parse(no, format!("unknown header keyword {other:?}"))),
        }
    }
    if !saw_format {
        return Err(Error::parse(1, "header has no format line"));
    }
    let mut points = Vec::new();
    let mut found_vertex = false;
    let mut last_line = 0;
    for el in &elements {
        let columns = if el.name == "vertex" {
            found_vertex = true;
            if el.has_list {
                return Err(Error::parse(0, "list properties on vertices are not supported"));
            }
            let col = |axis: &str| {
                el.properties
                    .iter()
                    .position(|p| p == axis)
                    .ok_or_else(|| Error::parse(0, format!("vertex element has no {axis} property")))
            };
            Some([col("x")?, col("y")?, col("z")?])
        } else {
            None
        };
        let mut read = 0;
        while read < el.count {
            let (i, raw) = lines.next().ok_or_else(|| {
                Error::parse(
                    last_line + 1,
                    format!("element {} declares {} rows but the file ends after {read}", el.name, el.count),
                )
            })?;
            last_line = i + 1;
            let toks: Vec<&str> = raw.split_whitespace().collect();
            if toks.is_empty() {
                continue;
            }
            if let Some(cols) = columns {
                if toks.len() != el.properties.len() {
                    return Err(Error::parse(i + 1, "vertex row has the wrong number of values"));
                }
                points.push([
                    parse_f64(toks[cols[0]], i + 1)?,
                    parse_f64(toks[cols[1]], i + 1)?,
                    parse_f64(toks[cols[2]], i + 1)?,
                ]);
            }
            read += 1;
        }
    }
    if !found_vertex {
        return Err(Error::parse(0, "no vertex element"));
    }
    if let Some((i, _)) = lines.find(|(_, l)| !l.trim().is_empty()) {
        return Err(Error::parse(i + 1, "more rows than the header declares"));
    }
    Ok(PointCloud::new(points))
}

pub fn format_ply(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 72 + 128);
    let _ = write!(
        out,
        "ply\nformat ascii 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        cloud.len()
    );
    out.push_str(&format_xyz(cloud));
    out
}

pub fn parse_cloud(text: &str, format: CloudFormat) -> Result<PointCloud> {
    let cloud = match format {
        CloudFormat::Xyz => parse_xyz(text)?,
        CloudFormat::PlyAscii => parse_ply(text)?,
    };
    if cloud.is_empty() {
        return Err(Error::invalid("point cloud file contains no points"));
    }
    Ok(cloud)
}

pub fn format_cloud(cloud: &PointCloud, format: CloudFormat) -> String {
    match format {
        CloudFormat::Xyz => format_xyz(cloud),
        CloudFormat::PlyAscii => format_ply(cloud),
    }
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    parse_cloud(&fs::read_to_string(path)?, format)
}

pub fn save_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    fs::write(path, format_cloud(cloud, format))?;
    Ok(())
}

/// Triangulates a polygon as a fan around its first vertex.
fn fan(poly: &[usize]) -> impl Iterator<Item = [usize; 3]> + '_ {
    (1..poly.len() - 1).map(move |i| [poly[0], poly[i], poly[i + 1]])
}

/// Wavefront OBJ: `v` and `f` records only. Face indices are 1-based;
/// negative indices count back from the latest vertex. `v/vt/vn` forms are
/// accepted and only the position index is used.
pub fn parse_obj(text: &str) -> Result<TriangleMesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.first().copied() {
            Some("v") => {
                if toks.len() < 4 {
                    return Err(Error::parse(no, "vertex needs three coordinates"));
                }
                vertices.push(parse_point(&toks[1..], no)?);
            }
            Some("f") => {
                if toks.len() < 4 {
                    return Err(Error::parse(no, "face needs at least three vertices"));
                }
                let mut poly = Vec::with_capacity(toks.len() - 1);
                for tok in &toks[1..] {
                    let head = tok.split('/').next().unwrap_or("");
                    let idx: i64 = head
                        .parse()
                        .map_err(|_| Error::parse(no, format!("bad face index {tok:?}")))?;
                    let n = vertices.len() as i64;
                    let resolved = match idx {
                        0 => return Err(Error::parse(no, "face index 0 is not valid (indices are 1-based)")),
                        k if k > 0 && k <= n => k - 1,
                        k if k < 0 && -k <= n => n + k,
                        _ => return Err(Error::parse(no, format!("face index {idx} out of range"))),
                    };
                    poly.push(resolved as usize);
                }
                for tri in fan(&poly) {
                    if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                        return Err(Error::parse(no, "face repeats a vertex"));
                    }
                    faces.push(tri);
                }
            }
            _ => {}
        }
    }
    TriangleMesh::new(vertices, faces)
}

/// OFF: `OFF`, then `V F E` counts, V vertex rows and F face rows of the
/// form `n i_1 … i_n` with 0-based indices.
pub fn parse_off(text: &str) -> Result<TriangleMesh> {
    let mut rows = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    let (no, first) = rows.next().ok_or_else(|| Error::parse(1, "empty file"))?;
    // the counts may share the magic line
    let rest = first
        .strip_prefix("OFF")
        .ok_or_else(|| Error::parse(no, "missing 'OFF' magic"))?
        .trim();
    let (no, counts) = if rest.is_empty() {
        rows.next().ok_or_else(|| Error::parse(no, "missing counts"))?
    } else {
        (no, rest)
    };
    let toks: Vec<&str> = counts.split_whitespace().collect();
    if toks.len() < 2 {
        return Err(Error::parse(no, "expected vertex and face counts"));
    }
    let nv = parse_usize(toks[0], no)?;
    let nf = parse_usize(toks[1], no)?;
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let (no, l) = rows.next().ok_or_else(|| Error::parse(no, "file ends inside the vertex list"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        if toks.len() < 3 {
            return Err(Error::parse(no, "vertex needs three coordinates"));
        }
        vertices.push(parse_point(&toks, no)?);
    }
    let mut faces = Vec::with_capacity(nf);
    for _ in 0..nf {
        let (no, l) = rows.next().ok_or_else(|| Error::parse(no, "file ends inside the face list"))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let k = parse_usize(toks[0], no)?;
        if k < 3 || toks.len() < k + 1 {
            return Err(Error::parse(no, "face needs a count of at least 3 and that many indices"));
        }
        let poly = toks[1..=k]
            .iter()
            .map(|t| {
                let v = parse_usize(t, no)?;
                if v >= nv {
                    return Err(Error::parse(no, format!("face index {v} out of range")));
                }
                Ok(v)
            })
            .collect::<Result<Vec<_>>>()?;
        for tri in fan(&poly) {
            if tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::parse(no, "face repeats a vertex"));
            }
            faces.push(tri);
        }
    }
    TriangleMesh::new(vertices, faces)
}

pub fn parse_mesh(text: &str, format: MeshFormat) -> Result<TriangleMesh> {
    match format {
        MeshFormat::Obj => parse_obj(text),
        MeshFormat::Off => parse_off(text),
    }
}

pub fn load_mesh(path: &Path, format: MeshFormat) -> Result<TriangleMesh> {
    parse_mesh(&fs::read_to_string(path)?, format)
}

/// Binary 8-bit PGM of a row-major image with values in `[0, 1]`.
pub fn encode_pgm(image: &[f64], height: usize, width: usize) -> Result<Vec<u8>> {
    if image.len() != height * width {
        return Err(Error::invalid("image size does not match its dimensions"));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(image.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn write_pgm(path: &Path, image: &[f64], height: usize, width: usize) -> Result<()> {
    fs::write(path, encode_pgm(image, height, width)?)?;
    Ok(())
}

/// File name for the debug image of view `index`.
pub fn view_file_name(index: usize) -> String {
    format!("view_{index}.pgm")
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub iter_t: usize,
    pub recon: f64,
    pub render: f64,
    pub total: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,iter_t,recon,render,total";

pub fn format_loss_rows(rows: &[LossRow]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step,
            r.iter_t,
            fmt_f64(r.recon),
            fmt_f64(r.render),
            fmt_f64(r.total)
        );
    }
    out
}

pub fn parse_loss_rows(text: &str) -> Result<Vec<LossRow>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == LOSS_CSV_HEADER => {}
        _ => return Err(Error::parse(1, "unexpected loss log header")),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.trim().split(',').collect();
            if f.len() != 5 {
                return Err(Error::parse(i + 1, "expected five columns"));
            }
            Ok(LossRow {
                step: parse_usize(f[0], i + 1)?,
                iter_t: parse_usize(f[1], i + 1)?,
                recon: parse_f64(f[2], i + 1)?,
                render: parse_f64(f[3], i + 1)?,
                total: parse_f64(f[4], i + 1)?,
            })
        })
        .collect()
}

/// Evaluation output: raw values and values multiplied by [`REPORT_SCALE`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub chamfer: f64,
    pub p2m: Option<PointToMesh>,
}

impl MetricReport {
    /// Tab-separated `name value` lines.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut line = |name: &str, v: f64| {
            let _ = writeln!(out, "{name}\t{v:.10e}");
            let _ = writeln!(out, "{name}_x1e5\t{:.6}", v * REPORT_SCALE);
        };
        line("cd", self.chamfer);
        if let Some(p) = self.p2m {
            line("p2f", p.p2f);
            line("f2p", p.f2p);
            line("p2m", p.total());
        }
        out
    }
}
