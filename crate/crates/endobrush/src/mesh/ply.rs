//! PLY reader (ASCII and binary little-endian) and binary colored writer.
//!
//! The reader handles arbitrary extra properties by skipping what it does not
//! understand; it extracts float x/y/z positions, optional uchar red/green/blue
//! colors, and triangle index lists.

use std::io::Write;
use std::path::Path;

use nalgebra::Point3;

use super::{MeshError, RawMesh};

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

    fn read_binary(self, bytes: &[u8]) -> f64 {
        match self {
            Scalar::I8 => bytes[0] as i8 as f64,
            Scalar::U8 => bytes[0] as f64,
            Scalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, kind: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Ascii,
    BinaryLe,
}

struct Header {
    format: Format,
    elements: Vec<Element>,
    body_offset: usize,
}

pub(super) fn parse(path: &Path) -> Result<RawMesh, MeshError> {
    let bytes = std::fs::read(path)
        .map_err(|source| MeshError::Io { path: path.display().to_string(), source })?;
    let perr = |detail: String| MeshError::Parse { path: path.display().to_string(), detail };
    let header = parse_header(&bytes).map_err(|d| perr(d))?;
    let body = &bytes[header.body_offset..];
    match header.format {
        Format::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| perr("ascii body is not valid UTF-8".into()))?;
            let mut tokens = text.split_ascii_whitespace();
            read_elements(&header, &mut AsciiSource { tokens: &mut tokens }, path)
        }
        Format::BinaryLe => read_elements(&header, &mut BinarySource { bytes: body, pos: 0 }, path),
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header, String> {
    let end_marker = b"end_header";
    let end = bytes
        .windows(end_marker.len())
        .position(|w| w == end_marker)
        .ok_or("missing end_header")?;
    let newline = bytes[end..]
        .iter()
        .position(|&b| b == b'\n')
        .ok_or("no newline after end_header")?;
    let body_offset = end + newline + 1;
    let text = std::str::from_utf8(&bytes[..body_offset]).map_err(|_| "header is not UTF-8")?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err("file does not start with 'ply'".into());
    }
    let mut format = None;
    let mut elements: Vec<Element> = Vec::new();
    for line in lines {
        let mut parts = line.split_ascii_whitespace();
        match parts.next() {
            Some("format") => {
                format = Some(match parts.next() {
                    Some("ascii") => Format::Ascii,
                    Some("binary_little_endian") => Format::BinaryLe,
                    Some(other) => return Err(format!("unsupported format '{other}'")),
                    None => return Err("format line missing type".into()),
                });
            }
            Some("comment") | Some("obj_info") => {}
            Some("element") => {
                let name = parts.next().ok_or("element line missing name")?.to_string();
                let count: usize = parts
                    .next()
                    .ok_or("element line missing count")?
                    .parse()
                    .map_err(|_| format!("bad element count for '{name}'"))?;
                elements.push(Element { name, count, properties: Vec::new() });
            }
            Some("property") => {
                let elem = elements.last_mut().ok_or("property before any element")?;
                let first = parts.next().ok_or("property line missing type")?;
                if first == "list" {
                    let count = parts
                        .next()
                        .and_then(Scalar::parse)
                        .ok_or("bad list count type")?;
                    let item =
                        parts.next().and_then(Scalar::parse).ok_or("bad list item type")?;
                    let name = parts.next().ok_or("list property missing name")?.to_string();
                    elem.properties.push(Property::List { name, count, item });
                } else {
                    let kind = Scalar::parse(first)
                        .ok_or_else(|| format!("unknown property type '{first}'"))?;
                    let name = parts.next().ok_or("property missing name")?.to_string();
                    elem.properties.push(Property::Scalar { name, kind });
                }
            }
            Some("end_header") => break,
            Some(other) => return Err(format!("unknown header keyword '{other}'")),
            None => {}
        }
    }
    Ok(Header { format: format.ok_or("missing format line")?, elements, body_offset })
}

/// One scalar or list read at a time, from either body encoding.
trait Source {
    fn scalar(&mut self, kind: Scalar) -> Result<f64, String>;
    fn list(&mut self, count: Scalar, item: Scalar) -> Result<Vec<f64>, String>;
}

struct AsciiSource<'a, 'b> {
    tokens: &'b mut std::str::SplitAsciiWhitespace<'a>,
}

impl Source for AsciiSource<'_, '_> {
    fn scalar(&mut self, _kind: Scalar) -> Result<f64, String> {
        let tok = self.tokens.next().ok_or("unexpected end of ascii body")?;
        tok.parse::<f64>().map_err(|_| format!("bad numeric token '{tok}'"))
    }

    fn list(&mut self, count: Scalar, item: Scalar) -> Result<Vec<f64>, String> {
        let n = self.scalar(count)? as usize;
        (0..n).map(|_| self.scalar(item)).collect()
    }
}

struct BinarySource<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Source for BinarySource<'_> {
    fn scalar(&mut self, kind: Scalar) -> Result<f64, String> {
        let size = kind.size();
        if self.pos + size > self.bytes.len() {
            return Err("unexpected end of binary body".into());
        }
        let v = kind.read_binary(&self.bytes[self.pos..]);
        self.pos += size;
        Ok(v)
    }

    fn list(&mut self, count: Scalar, item: Scalar) -> Result<Vec<f64>, String> {
        let n = self.scalar(count)? as usize;
        (0..n).map(|_| self.scalar(item)).collect()
    }
}

fn read_elements(header: &Header, src: &mut dyn Source, path: &Path) -> Result<RawMesh, MeshError> {
    let perr = |detail: String| MeshError::Parse { path: path.display().to_string(), detail };
    let mut vertices: Vec<Point3<f64>> = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut has_colors = false;
    let mut faces: Vec<[u32; 3]> = Vec::new();

    for elem in &header.elements {
        if elem.name == "vertex" {
            let pos_of = |want: &str| {
                elem.properties.iter().position(
                    |p| matches!(p, Property::Scalar { name, .. } if name == want),
                )
            };
            let (px, py, pz) = match (pos_of("x"), pos_of("y"), pos_of("z")) {
                (Some(a), Some(b), Some(c)) => (a, b, c),
                _ => return Err(perr("vertex element lacks x/y/z properties".into())),
            };
            let color_idx = match (pos_of("red"), pos_of("green"), pos_of("blue")) {
                (Some(r), Some(g), Some(b)) => Some((r, g, b)),
                _ => None,
            };
            has_colors = color_idx.is_some();
            let mut row = vec![0.0f64; elem.properties.len()];
            for _ in 0..elem.count {
                for (pi, prop) in elem.properties.iter().enumerate() {
                    match prop {
                        Property::Scalar { kind, .. } => {
                            row[pi] = src.scalar(*kind).map_err(&perr)?;
                        }
                        Property::List { count, item, .. } => {
                            src.list(*count, *item).map_err(&perr)?;
                        }
                    }
                }
                vertices.push(Point3::new(row[px], row[py], row[pz]));
                if let Some((r, g, b)) = color_idx {
                    colors.push([row[r] / 255.0, row[g] / 255.0, row[b] / 255.0]);
                }
            }
        } else if elem.name == "face" {
            let list_pos = elem.properties.iter().position(|p| {
                matches!(p, Property::List { name, .. }
                    if name == "vertex_indices" || name == "vertex_index")
            });
            let list_pos =
                list_pos.ok_or_else(|| perr("face element lacks a vertex index list".into()))?;
            for fi in 0..elem.count {
                let mut indices: Option<Vec<f64>> = None;
                for (pi, prop) in elem.properties.iter().enumerate() {
                    match prop {
                        Property::Scalar { kind, .. } => {
                            src.scalar(*kind).map_err(&perr)?;
                        }
                        Property::List { count, item, .. } => {
                            let values = src.list(*count, *item).map_err(&perr)?;
                            if pi == list_pos {
                                indices = Some(values);
                            }
                        }
                    }
                }
                let indices = indices.expect("list position found above");
                if indices.len() != 3 {
                    return Err(MeshError::NonTriangleFace { face: fi, arity: indices.len() });
                }
                let mut f = [0u32; 3];
                for (k, v) in indices.iter().enumerate() {
                    if *v < 0.0 || v.fract() != 0.0 || *v > u32::MAX as f64 {
                        return Err(perr(format!("face {fi} has invalid index {v}")));
                    }
                    f[k] = *v as u32;
                }
                faces.push(f);
            }
        } else {
            // consume and discard unknown elements
            for _ in 0..elem.count {
                for prop in &elem.properties {
                    match prop {
                        Property::Scalar { kind, .. } => {
                            src.scalar(*kind).map_err(&perr)?;
                        }
                        Property::List { count, item, .. } => {
                            src.list(*count, *item).map_err(&perr)?;
                        }
                    }
                }
            }
        }
    }
    Ok(RawMesh { vertices, colors: has_colors.then_some(colors), faces })
}

/// Binary little-endian PLY with float32 positions and uchar colors.
pub(super) fn write_colored(
    path: &Path,
    vertices: &[Point3<f64>],
    colors: &[[f64; 3]],
    faces: &[[u32; 3]],
) -> Result<(), MeshError> {
    write_binary(path, vertices, Some(colors), faces)
}

/// Binary little-endian PLY with float32 positions only (no color properties).
pub(super) fn write_plain(
    path: &Path,
    vertices: &[Point3<f64>],
    faces: &[[u32; 3]],
) -> Result<(), MeshError> {
    write_binary(path, vertices, None, faces)
}

fn write_binary(
    path: &Path,
    vertices: &[Point3<f64>],
    colors: Option<&[[f64; 3]]>,
    faces: &[[u32; 3]],
) -> Result<(), MeshError> {
    let ioerr = |source| MeshError::Io { path: path.display().to_string(), source };
    let mut out = Vec::with_capacity(128 + vertices.len() * 15 + faces.len() * 13);
    let color_props = if colors.is_some() {
        "property uchar red\nproperty uchar green\nproperty uchar blue\n"
    } else {
        ""
    };
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\n{}element face {}\nproperty list uchar uint vertex_indices\nend_header\n",
        vertices.len(),
        color_props,
        faces.len()
    )
    .expect("write to Vec cannot fail");
    for (vi, v) in vertices.iter().enumerate() {
        for k in 0..3 {
            out.extend_from_slice(&(v[k] as f32).to_le_bytes());
        }
        if let Some(cs) = colors {
            for k in 0..3 {
                out.push((cs[vi][k] * 255.0).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    for f in faces {
        out.push(3u8);
        for idx in f {
            out.extend_from_slice(&idx.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(ioerr)
}

#[cfg(test)]
mod tests {
    use crate::mesh::{export_colored_mesh, load_mesh, MeshError, TriMesh};
    use nalgebra::Point3;

    const TETRA_ASCII: &str = "ply\nformat ascii 1.0\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nelement face 4\nproperty list uchar int vertex_indices\nend_header\n1 1 1\n1 -1 -1\n-1 1 -1\n-1 -1 1\n3 0 1 2\n3 0 3 1\n3 0 2 3\n3 1 3 2\n";

    #[test]
    fn loads_ascii_tetrahedron() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("tet.ply");
        std::fs::write(&p, TETRA_ASCII).unwrap();
        let mesh = load_mesh(&p).unwrap();
        assert_eq!(mesh.vertex_count(), 4);
        assert_eq!(mesh.face_count(), 4);
        for n in &mesh.normals {
            assert!((n.norm() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn out_of_range_index_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.ply");
        std::fs::write(&p, TETRA_ASCII.replace("3 1 3 2", "3 1 3 99")).unwrap();
        match load_mesh(&p) {
            Err(MeshError::FaceIndexOutOfRange { index: 99, vertex_count: 4, .. }) => {}
            other => panic!("expected index error, got {other:?}"),
        }
    }

    #[test]
    fn quad_face_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("quad.ply");
        std::fs::write(&p, TETRA_ASCII.replace("3 0 1 2", "4 0 1 2 3")).unwrap();
        match load_mesh(&p) {
            Err(MeshError::NonTriangleFace { face: 0, arity: 4 }) => {}
            other => panic!("expected non-triangle error, got {other:?}"),
        }
    }

    #[test]
    fn welds_duplicated_vertices() {
        // same tetrahedron but vertex 0 appears twice; faces reference both copies
        let text = "ply\nformat ascii 1.0\nelement vertex 5\nproperty float x\nproperty float y\nproperty float z\nelement face 4\nproperty list uchar int vertex_indices\nend_header\n1 1 1\n1 -1 -1\n-1 1 -1\n-1 -1 1\n1 1 1\n3 0 1 2\n3 4 3 1\n3 0 2 3\n3 1 3 2\n";
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dup.ply");
        std::fs::write(&p, text).unwrap();
        let mesh = load_mesh(&p).unwrap();
        assert_eq!(mesh.vertex_count(), 4);
        assert_eq!(mesh.face_count(), 4);
    }

    #[test]
    fn colored_export_round_trips() {
        let vertices = vec![
            Point3::new(1.0, 1.0, 1.0),
            Point3::new(1.0, -1.0, -1.0),
            Point3::new(-1.0, 1.0, -1.0),
            Point3::new(-1.0, -1.0, 1.0),
        ];
        let faces = vec![[0u32, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]];
        let colors = vec![
            [1.0, 0.0, 0.0],
            [0.5, 0.5, 0.5],
            [0.25, 0.75, 0.1],
            [0.0, 1.0, 1.0],
        ];
        let mesh = TriMesh::new(vertices, faces).unwrap().with_colors(colors.clone());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("colored.ply");
        export_colored_mesh(&mesh, &p).unwrap();

        // byte-level checks: color 1.0 -> 255, 0.5 -> 128 (round half away from zero)
        let bytes = std::fs::read(&p).unwrap();
        let header_end = bytes.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        let v0 = &bytes[header_end..header_end + 15];
        assert_eq!(&v0[12..15], &[255, 0, 0]);
        let v1 = &bytes[header_end + 15..header_end + 30];
        assert_eq!(&v1[12..15], &[128, 128, 128]);

        let back = load_mesh(&p).unwrap();
        assert_eq!(back.vertex_count(), 4);
        let back_colors = back.colors.as_ref().unwrap();
        for (a, b) in colors.iter().zip(back_colors) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1.0 / 255.0 + 1e-12);
            }
        }
        // geometry survives the float32 round trip well inside 1e-6 mm
        for (a, b) in mesh.vertices.iter().zip(&back.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
    }

    #[test]
    fn export_without_colors_is_an_error() {
        let mesh = TriMesh::new(
            vec![
                Point3::new(1.0, 1.0, 1.0),
                Point3::new(1.0, -1.0, -1.0),
                Point3::new(-1.0, 1.0, -1.0),
                Point3::new(-1.0, -1.0, 1.0),
            ],
            vec![[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]],
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        match export_colored_mesh(&mesh, &dir.path().join("x.ply")) {
            Err(MeshError::MissingColors) => {}
            other => panic!("expected missing-colors error, got {other:?}"),
        }
    }

    #[test]
    fn load_export_load_is_idempotent_on_geometry() {
        let dir = tempfile::tempdir().unwrap();
        let p0 = dir.path().join("a.ply");
        std::fs::write(&p0, TETRA_ASCII).unwrap();
        let first = load_mesh(&p0).unwrap().with_colors(vec![[0.5; 3]; 4]);
        let p1 = dir.path().join("b.ply");
        export_colored_mesh(&first, &p1).unwrap();
        let second = load_mesh(&p1).unwrap();
        for (a, b) in first.vertices.iter().zip(&second.vertices) {
            assert!((a - b).norm() < 1e-6);
        }
        assert_eq!(first.faces, second.faces);
    }

    #[test]
    fn skips_unknown_properties_and_elements() {
        let text = "ply\nformat ascii 1.0\ncomment extra stuff\nelement vertex 4\nproperty float x\nproperty float y\nproperty float z\nproperty float confidence\nelement face 4\nproperty list uchar int vertex_indices\nelement edge 1\nproperty int vertex1\nproperty int vertex2\nend_header\n1 1 1 0.9\n1 -1 -1 0.8\n-1 1 -1 0.7\n-1 -1 1 0.6\n3 0 1 2\n3 0 3 1\n3 0 2 3\n3 1 3 2\n0 1\n";
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("extra.ply");
        std::fs::write(&p, text).unwrap();
        let mesh = load_mesh(&p).unwrap();
        assert_eq!(mesh.vertex_count(), 4);
        assert_eq!(mesh.face_count(), 4);
    }
}
