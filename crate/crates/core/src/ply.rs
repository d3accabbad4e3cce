//! PLY interchange: reading raw colored point clouds and writing decoded
//! frames.
//!
//! Supports the `ascii 1.0` and `binary_little_endian 1.0` formats. The
//! vertex element must provide `x`, `y`, `z` (float or double) and `red`,
//! `green`, `blue` (uchar); additional scalar or list properties are skipped.
//! Elements preceding the vertex element are skipped as well, as long as
//! their layout is self-describing (scalars and lists of scalars).

use crate::voxel::RawPointCloud;
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use thiserror::Error;

/// Errors from PLY parsing and serialization.
#[derive(Debug, Error)]
pub enum PlyError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("unsupported PLY feature: {0}")]
    Unsupported(String),
    #[error("vertex element is missing required property `{0}`")]
    MissingProperty(&'static str),
    #[error("points and colors have different lengths")]
    LengthMismatch,
}

/// Output encoding for [`write_ply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
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
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
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
            Scalar::I32 | Scalar::U32 => 4,
            Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    /// Reads one little-endian value and widens it to f64.
    fn read_le(self, r: &mut impl Read) -> io::Result<f64> {
        let mut buf = [0u8; 8];
        let n = self.size();
        r.read_exact(&mut buf[..n])?;
        Ok(match self {
            Scalar::I8 => buf[0] as i8 as f64,
            Scalar::U8 => buf[0] as f64,
            Scalar::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(buf),
        })
    }
}

#[derive(Debug, Clone)]
enum Property {
    Scalar { name: String, ty: Scalar },
    List { count_ty: Scalar, item_ty: Scalar },
}

#[derive(Debug, Clone)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    ascii: bool,
    elements: Vec<Element>,
    header_lines: usize,
}

fn read_header_line(reader: &mut impl BufRead, line_no: &mut usize) -> Result<String, PlyError> {
    let mut raw = Vec::new();
    let n = reader.read_until(b'\n', &mut raw)?;
    if n == 0 {
        return Err(PlyError::Parse { line: *line_no + 1, message: "unexpected end of header".into() });
    }
    *line_no += 1;
    String::from_utf8(raw)
        .map(|s| s.trim_end_matches(['\r', '\n']).to_string())
        .map_err(|_| PlyError::Parse { line: *line_no, message: "header is not valid UTF-8".into() })
}

fn parse_header(reader: &mut impl BufRead) -> Result<Header, PlyError> {
    let mut line_no = 0usize;

    let magic = read_header_line(reader, &mut line_no)?;
    if magic.trim() != "ply" {
        return Err(PlyError::Parse { line: 1, message: "missing `ply` magic line".into() });
    }

    let mut ascii = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let line = read_header_line(reader, &mut line_no)?;
        let current = line_no;
        let mut tokens = line.split_whitespace();
        match tokens.next() {
            None | Some("comment") | Some("obj_info") => continue,
            Some("format") => {
                let fmt = tokens.next().unwrap_or("");
                ascii = Some(match fmt {
                    "ascii" => true,
                    "binary_little_endian" => false,
                    other => {
                        return Err(PlyError::Unsupported(format!("format `{other}`")));
                    }
                });
            }
            Some("element") => {
                let name = tokens
                    .next()
                    .ok_or_else(|| PlyError::Parse { line: current, message: "element needs a name".into() })?
                    .to_string();
                let count: usize = tokens
                    .next()
                    .and_then(|t| t.parse().ok())
                    .ok_or_else(|| PlyError::Parse { line: current, message: "element needs a count".into() })?;
                elements.push(Element { name, count, properties: Vec::new() });
            }
            Some("property") => {
                let element = elements.last_mut().ok_or_else(|| PlyError::Parse {
                    line: current,
                    message: "property before any element".into(),
                })?;
                let ty_token = tokens.next().unwrap_or("");
                if ty_token == "list" {
                    let count_ty = tokens.next().and_then(Scalar::parse);
                    let item_ty = tokens.next().and_then(Scalar::parse);
                    match (count_ty, item_ty) {
                        (Some(count_ty), Some(item_ty)) => {
                            element.properties.push(Property::List { count_ty, item_ty });
                        }
                        _ => {
                            return Err(PlyError::Parse {
                                line: current,
                                message: "malformed list property".into(),
                            })
                        }
                    }
                } else {
                    let ty = Scalar::parse(ty_token).ok_or_else(|| PlyError::Parse {
                        line: current,
                        message: format!("unknown property type `{ty_token}`"),
                    })?;
                    let name = tokens
                        .next()
                        .ok_or_else(|| PlyError::Parse { line: current, message: "property needs a name".into() })?
                        .to_string();
                    element.properties.push(Property::Scalar { name, ty });
                }
            }
            Some("end_header") => break,
            Some(other) => {
                return Err(PlyError::Parse {
                    line: current,
                    message: format!("unknown header keyword `{other}`"),
                })
            }
        }
    }

    let ascii = ascii.ok_or(PlyError::Unsupported("missing format line".into()))?;
    Ok(Header { ascii, elements, header_lines: line_no })
}

/// Column layout of the vertex element: indices of the required properties
/// within the property list.
struct VertexLayout {
    x: usize,
    y: usize,
    z: usize,
    red: usize,
    green: usize,
    blue: usize,
}

fn vertex_layout(element: &Element) -> Result<VertexLayout, PlyError> {
    let find = |wanted: &'static str| -> Result<usize, PlyError> {
        element
            .properties
            .iter()
            .position(|p| matches!(p, Property::Scalar { name, .. } if name == wanted))
            .ok_or(PlyError::MissingProperty(wanted))
    };
    let layout = VertexLayout {
        x: find("x")?,
        y: find("y")?,
        z: find("z")?,
        red: find("red")?,
        green: find("green")?,
        blue: find("blue")?,
    };
    for (idx, wanted) in [(layout.x, "x"), (layout.y, "y"), (layout.z, "z")] {
        if let Property::Scalar { ty, .. } = &element.properties[idx] {
            if !matches!(ty, Scalar::F32 | Scalar::F64) {
                return Err(PlyError::Unsupported(format!("coordinate `{wanted}` must be float or double")));
            }
        }
    }
    for (idx, wanted) in [(layout.red, "red"), (layout.green, "green"), (layout.blue, "blue")] {
        if let Property::Scalar { ty, .. } = &element.properties[idx] {
            if !matches!(ty, Scalar::U8) {
                return Err(PlyError::Unsupported(format!("color `{wanted}` must be uchar")));
            }
        }
    }
    Ok(layout)
}

/// Reads a colored point cloud from a PLY file.
pub fn read_ply(path: &Path) -> Result<RawPointCloud, PlyError> {
    let file = File::open(path)?;
    read_ply_from(BufReader::new(file))
}

/// Reads a colored point cloud from any buffered source.
pub fn read_ply_from(mut reader: impl BufRead) -> Result<RawPointCloud, PlyError> {
    let header = parse_header(&mut reader)?;
    let vertex_pos = header
        .elements
        .iter()
        .position(|e| e.name == "vertex")
        .ok_or(PlyError::Unsupported("no vertex element".into()))?;
    let layout = vertex_layout(&header.elements[vertex_pos])?;

    if header.ascii {
        read_ascii(&mut reader, &header, vertex_pos, &layout)
    } else {
        read_binary(&mut reader, &header, vertex_pos, &layout)
    }
}

fn read_ascii(
    reader: &mut impl BufRead,
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<RawPointCloud, PlyError> {
    fn next_data_line(
        reader: &mut impl BufRead,
        line_no: &mut usize,
    ) -> Result<String, PlyError> {
        loop {
            let mut s = String::new();
            if reader.read_line(&mut s)? == 0 {
                return Err(PlyError::Parse { line: *line_no + 1, message: "unexpected end of file".into() });
            }
            *line_no += 1;
            if !s.trim().is_empty() {
                return Ok(s);
            }
        }
    }

    let mut line_no = header.header_lines;
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (pos, element) in header.elements.iter().enumerate() {
        if pos > vertex_pos {
            break; // everything needed has been read
        }
        for _ in 0..element.count {
            let line = next_data_line(reader, &mut line_no)?;
            let current = line_no;
            if pos != vertex_pos {
                continue; // skip foreign elements line-wise
            }
            let mut values = Vec::with_capacity(element.properties.len());
            let mut tokens = line.split_whitespace();
            for property in &element.properties {
                match property {
                    Property::Scalar { .. } => {
                        let t = tokens.next().ok_or_else(|| PlyError::Parse {
                            line: current,
                            message: "missing vertex value".into(),
                        })?;
                        let v: f64 = t.parse().map_err(|_| PlyError::Parse {
                            line: current,
                            message: format!("invalid number `{t}`"),
                        })?;
                        values.push(v);
                    }
                    Property::List { .. } => {
                        let n: usize = tokens
                            .next()
                            .and_then(|t| t.parse().ok())
                            .ok_or_else(|| PlyError::Parse {
                                line: current,
                                message: "invalid list count".into(),
                            })?;
                        for _ in 0..n {
                            tokens.next().ok_or_else(|| PlyError::Parse {
                                line: current,
                                message: "truncated list".into(),
                            })?;
                        }
                        values.push(0.0); // placeholder keeps column indices aligned
                    }
                }
            }
            push_vertex(&values, layout, &mut points, &mut colors, current)?;
        }
    }
    Ok(RawPointCloud { points, colors })
}

fn read_binary(
    reader: &mut impl BufRead,
    header: &Header,
    vertex_pos: usize,
    layout: &VertexLayout,
) -> Result<RawPointCloud, PlyError> {
    let mut points = Vec::new();
    let mut colors = Vec::new();
    for (pos, element) in header.elements.iter().enumerate() {
        if pos > vertex_pos {
            break;
        }
        for _ in 0..element.count {
            let mut values = Vec::with_capacity(element.properties.len());
            for property in &element.properties {
                match property {
                    Property::Scalar { ty, .. } => {
                        let v = ty.read_le(reader).map_err(PlyError::Io)?;
                        values.push(v);
                    }
                    Property::List { count_ty, item_ty } => {
                        let n = count_ty.read_le(reader)? as usize;
                        let mut skip = vec![0u8; n * item_ty.size()];
                        reader.read_exact(&mut skip)?;
                        values.push(0.0);
                    }
                }
            }
            if pos == vertex_pos {
                push_vertex(&values, layout, &mut points, &mut colors, 0)?;
            }
        }
    }
    Ok(RawPointCloud { points, colors })
}

fn push_vertex(
    values: &[f64],
    layout: &VertexLayout,
    points: &mut Vec<[f64; 3]>,
    colors: &mut Vec<[u8; 3]>,
    line: usize,
) -> Result<(), PlyError> {
    let p = [values[layout.x], values[layout.y], values[layout.z]];
    if !p.iter().all(|v| v.is_finite()) {
        return Err(PlyError::Parse { line, message: "non-finite coordinate".into() });
    }
    let clamp = |v: f64| -> u8 { v.clamp(0.0, 255.0) as u8 };
    points.push(p);
    colors.push([clamp(values[layout.red]), clamp(values[layout.green]), clamp(values[layout.blue])]);
    Ok(())
}

/// Writes a colored point cloud to a PLY file.
pub fn write_ply(
    path: &Path,
    points: &[[f64; 3]],
    colors: &[[u8; 3]],
    format: PlyFormat,
) -> Result<(), PlyError> {
    let file = File::create(path)?;
    write_ply_to(BufWriter::new(file), points, colors, format)
}

/// Writes a colored point cloud to any sink.
pub fn write_ply_to(
    mut w: impl Write,
    points: &[[f64; 3]],
    colors: &[[u8; 3]],
    format: PlyFormat,
) -> Result<(), PlyError> {
    if points.len() != colors.len() {
        return Err(PlyError::LengthMismatch);
    }
    let fmt_line = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    write!(
        w,
        "ply\nformat {} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        fmt_line,
        points.len()
    )?;
    match format {
        PlyFormat::Ascii => {
            for (p, c) in points.iter().zip(colors) {
                writeln!(w, "{} {} {} {} {} {}", p[0], p[1], p[2], c[0], c[1], c[2])?;
            }
        }
        PlyFormat::BinaryLittleEndian => {
            for (p, c) in points.iter().zip(colors) {
                for v in p {
                    w.write_all(&v.to_le_bytes())?;
                }
                w.write_all(c)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    #[test]
    fn ascii_round_trip() {
        let points = vec![[0.0, 1.5, -2.25], [3.0, 4.0, 5.0]];
        let colors = vec![[255, 0, 10], [1, 2, 3]];
        let mut buf = Vec::new();
        write_ply_to(&mut buf, &points, &colors, PlyFormat::Ascii).unwrap();
        let cloud = read_ply_from(Cursor::new(buf)).unwrap();
        assert_eq!(cloud.points, points);
        assert_eq!(cloud.colors, colors);
    }

    #[test]
    fn binary_round_trip() {
        let points = vec![[0.125, -7.5, 1e6], [0.0, 0.0, 0.0]];
        let colors = vec![[0, 128, 255], [42, 42, 42]];
        let mut buf = Vec::new();
        write_ply_to(&mut buf, &points, &colors, PlyFormat::BinaryLittleEndian).unwrap();
        let cloud = read_ply_from(Cursor::new(buf)).unwrap();
        assert_eq!(cloud.points, points);
        assert_eq!(cloud.colors, colors);
    }

    #[test]
    fn extra_scalar_properties_are_skipped() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\nelement vertex 1\n\
                    property float x\nproperty float y\nproperty float z\n\
                    property float nx\nproperty uchar red\nproperty uchar green\nproperty uchar blue\n\
                    end_header\n1 2 3 0.5 9 8 7\n";
        let cloud = read_ply_from(Cursor::new(text)).unwrap();
        assert_eq!(cloud.points, vec![[1.0, 2.0, 3.0]]);
        assert_eq!(cloud.colors, vec![[9, 8, 7]]);
    }

    #[test]
    fn missing_color_property_is_an_error() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\n\
                    property float x\nproperty float y\nproperty float z\n\
                    end_header\n1 2 3\n";
        match read_ply_from(Cursor::new(text)) {
            Err(PlyError::MissingProperty("red")) => {}
            other => panic!("expected MissingProperty(red), got {other:?}"),
        }
    }

    #[test]
    fn element_before_vertex_is_skipped() {
        let text = "ply\nformat ascii 1.0\nelement junk 2\nproperty float a\n\
                    element vertex 1\n\
                    property float x\nproperty float y\nproperty float z\n\
                    property uchar red\nproperty uchar green\nproperty uchar blue\n\
                    end_header\n0.1\n0.2\n4 5 6 1 2 3\n";
        let cloud = read_ply_from(Cursor::new(text)).unwrap();
        assert_eq!(cloud.points, vec![[4.0, 5.0, 6.0]]);
    }

    #[test]
    fn truncated_binary_payload_is_an_io_error() {
        let mut buf = Vec::new();
        write_ply_to(&mut buf, &[[1.0, 2.0, 3.0]], &[[4, 5, 6]], PlyFormat::BinaryLittleEndian)
            .unwrap();
        buf.truncate(buf.len() - 2);
        assert!(matches!(read_ply_from(Cursor::new(buf)), Err(PlyError::Io(_))));
    }
}
