//! Minimal binary little-endian PLY support for vertex elements with scalar
//! properties.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalarType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl ScalarType {
    fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Self::I8 => "char",
            Self::U8 => "uchar",
            Self::I16 => "short",
            Self::U16 => "ushort",
            Self::I32 => "int",
            Self::U32 => "uint",
            Self::F32 => "float",
            Self::F64 => "double",
        }
    }

    fn read(self, b: &[u8]) -> f64 {
        match self {
            Self::I8 => b[0] as i8 as f64,
            Self::U8 => b[0] as f64,
            Self::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Self::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Self::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Self::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PropertyDef {
    pub name: String,
    pub ty: ScalarType,
    pub offset: usize,
}

/// Parsed vertex table: one row of `f64` values per vertex, columns in
/// header order.
#[derive(Debug)]
pub struct VertexTable<'a> {
    pub properties: Vec<PropertyDef>,
    pub count: usize,
    stride: usize,
    payload: &'a [u8],
}

impl<'a> VertexTable<'a> {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.properties.iter().position(|p| p.name == name)
    }

    pub fn value(&self, vertex: usize, column: usize) -> f64 {
        let p = &self.properties[column];
        let start = vertex * self.stride + p.offset;
        p.ty.read(&self.payload[start..start + p.ty.size()])
    }
}

pub fn parse(bytes: &[u8]) -> Result<VertexTable<'_>> {
    const END: &[u8] = b"end_header";
    let header_end = bytes
        .windows(END.len())
        .position(|w| w == END)
        .ok_or_else(|| Error::PlyHeader("no end_header line".into()))?;
    let mut body = header_end + END.len();
    // line terminator after end_header: "\n" or "\r\n"
    if bytes.get(body) == Some(&b'\r') {
        body += 1;
    }
    if bytes.get(body) != Some(&b'\n') {
        return Err(Error::PlyHeader("end_header not followed by newline".into()));
    }
    body += 1;

    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::PlyHeader("header is not valid UTF-8".into()))?;
    let mut lines = header.lines().map(str::trim).filter(|l| !l.is_empty());
    if lines.next() != Some("ply") {
        return Err(Error::PlyHeader("missing `ply` magic".into()));
    }

    let mut format_ok = false;
    // (element name, count, properties)
    let mut elements: Vec<(String, usize, Vec<PropertyDef>, usize)> = Vec::new();
    for line in lines {
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["format", "binary_little_endian", "1.0"] => format_ok = true,
            ["format", other, ..] => {
                return Err(Error::PlyHeader(format!("unsupported format `{other}`")))
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                let count = count
                    .parse()
                    .map_err(|_| Error::PlyHeader(format!("bad element count `{count}`")))?;
                elements.push((name.to_string(), count, Vec::new(), 0));
            }
            ["property", "list", ..] => {
                let (name, ..) = elements
                    .last()
                    .ok_or_else(|| Error::PlyHeader("property before element".into()))?;
                if name == "vertex" {
                    return Err(Error::PlyHeader(
                        "list properties are not supported on vertices".into(),
                    ));
                }
            }
            ["property", ty, name] => {
                let ty = ScalarType::parse(ty)
                    .ok_or_else(|| Error::PlyHeader(format!("unknown scalar type `{ty}`")))?;
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::PlyHeader("property before element".into()))?;
                el.2.push(PropertyDef {
                    name: name.to_string(),
                    ty,
                    offset: el.3,
                });
                el.3 += ty.size();
            }
            _ => return Err(Error::PlyHeader(format!("unrecognized header line `{line}`"))),
        }
    }
    if !format_ok {
        return Err(Error::PlyHeader("missing binary_little_endian format line".into()));
    }
    let first = elements
        .first()
        .ok_or_else(|| Error::PlyHeader("no elements declared".into()))?;
    if first.0 != "vertex" {
        return Err(Error::PlyHeader("vertex must be the first element".into()));
    }
    let (_, count, properties, stride) = elements.swap_remove(0);
    let need = count
        .checked_mul(stride)
        .ok_or_else(|| Error::PlyHeader("vertex payload size overflows".into()))?;
    let available = bytes.len() - body;
    if available < need {
        let vertex = if stride == 0 { 0 } else { available / stride };
        let partial = available - vertex * stride;
        let property = properties
            .iter()
            .find(|p| p.offset + p.ty.size() > partial)
            .map(|p| p.name.clone())
            .unwrap_or_default();
        return Err(Error::PlyVertex {
            vertex,
            property,
            reason: format!("truncated payload: need {need} bytes, found {available}"),
        });
    }
    Ok(VertexTable {
        properties,
        count,
        stride,
        payload: &bytes[body..body + need],
    })
}

/// Column description for [`write`].
pub struct Column<'a> {
    pub name: &'a str,
    pub ty: ScalarType,
}

/// Writes a binary little-endian PLY with one vertex element. `rows` yields
/// one value per column, in column order.
pub fn write<'r>(
    columns: &[Column<'_>],
    count: usize,
    rows: impl Iterator<Item = &'r [f64]>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\n");
    out.extend_from_slice(format!("element vertex {count}\n").as_bytes());
    for c in columns {
        out.extend_from_slice(format!("property {} {}\n", c.ty.name(), c.name).as_bytes());
    }
    out.extend_from_slice(b"end_header\n");
    for row in rows {
        for (c, &v) in columns.iter().zip(row) {
            match c.ty {
                ScalarType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                ScalarType::F64 => out.extend_from_slice(&v.to_le_bytes()),
                ScalarType::I8 => out.extend_from_slice(&(v.round() as i8).to_le_bytes()),
                ScalarType::U8 => out.extend_from_slice(&(v.round() as u8).to_le_bytes()),
                ScalarType::I16 => out.extend_from_slice(&(v.round() as i16).to_le_bytes()),
                ScalarType::U16 => out.extend_from_slice(&(v.round() as u16).to_le_bytes()),
                ScalarType::I32 => out.extend_from_slice(&(v.round() as i32).to_le_bytes()),
                ScalarType::U32 => out.extend_from_slice(&(v.round() as u32).to_le_bytes()),
            }
        }
    }
    out
}
