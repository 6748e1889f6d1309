//! Minimal PLY point-cloud reader and writer.
//!
//! Writes `x y z` as 32-bit floats, binary little-endian by default. Reads
//! ASCII and binary files whose vertex element has scalar properties
//! including `x`, `y`, `z`; other vertex properties are skipped.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::cloud::PointCloud;
use crate::geometry::Point3;

#[derive(Debug, Error)]
pub enum PlyError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("header line {line}: {msg}")]
    Header { line: usize, msg: String },
    #[error("body line {line}: {msg}")]
    AsciiBody { line: usize, msg: String },
    #[error("body byte offset {offset}: {msg}")]
    BinaryBody { offset: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Encoding {
    Ascii,
    Little,
    Big,
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
    fn parse(name: &str) -> Option<Self> {
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

    fn decode(self, b: &[u8], enc: Encoding) -> f64 {
        macro_rules! num {
            ($t:ty, $n:expr) => {{
                let arr: [u8; $n] = b[..$n].try_into().expect("slice length");
                (if enc == Encoding::Big { <$t>::from_be_bytes(arr) } else { <$t>::from_le_bytes(arr) }) as f64
            }};
        }
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => num!(i16, 2),
            Scalar::U16 => num!(u16, 2),
            Scalar::I32 => num!(i32, 4),
            Scalar::U32 => num!(u32, 4),
            Scalar::F32 => num!(f32, 4),
            Scalar::F64 => num!(f64, 8),
        }
    }
}

#[derive(Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<(String, Scalar)>,
    has_list: bool,
}

pub fn write_ply(path: &Path, cloud: &PointCloud, format: PlyFormat) -> Result<(), PlyError> {
    let io = |source| PlyError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut f = std::io::BufWriter::new(fs::File::create(path).map_err(io)?);
    f.write_all(&encode_ply(cloud, format)).map_err(io)?;
    f.flush().map_err(io)
}

/// Serializes a cloud to PLY bytes.
pub fn encode_ply(cloud: &PointCloud, format: PlyFormat) -> Vec<u8> {
    let fmt = match format {
        PlyFormat::Ascii => "ascii",
        PlyFormat::BinaryLittleEndian => "binary_little_endian",
    };
    let mut out = format!(
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        cloud.len()
    )
    .into_bytes();
    for p in &cloud.points {
        let c = [p.x as f32, p.y as f32, p.z as f32];
        match format {
            PlyFormat::Ascii => out.extend_from_slice(format!("{} {} {}\n", c[0], c[1], c[2]).as_bytes()),
            PlyFormat::BinaryLittleEndian => c.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    out
}

pub fn read_ply(path: &Path) -> Result<PointCloud, PlyError> {
    let bytes = fs::read(path).map_err(|source| PlyError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_ply(&bytes)
}

pub fn decode_ply(bytes: &[u8]) -> Result<PointCloud, PlyError> {
    let mut reader = BufReader::new(bytes);
    let (encoding, elements, header_lines) = parse_header(&mut reader)?;
    let mut body = Vec::new();
    reader.read_to_end(&mut body).expect("reading from memory");
    let header_len = bytes.len() - body.len();

    let mut points = Vec::new();
    let mut offset = 0usize;
    let mut line = header_lines;
    let mut text = std::str::from_utf8(if encoding == Encoding::Ascii { &body } else { &[] })
        .map_err(|e| PlyError::AsciiBody {
            line: line + 1,
            msg: format!("not valid UTF-8: {e}"),
        })?
        .lines();

    let mut vertex_done = false;
    for el in &elements {
        if vertex_done {
            break;
        }
        let is_vertex = el.name == "vertex";
        vertex_done = is_vertex;
        if el.has_list {
            if is_vertex {
                return Err(PlyError::Header {
                    line: header_lines,
                    msg: "list properties on vertex are not supported".into(),
                });
            }
            // Elements after the vertices are never read; earlier ones must be skippable.
            return Err(PlyError::Header {
                line: header_lines,
                msg: format!("list element '{}' before vertex cannot be skipped", el.name),
            });
        }
        let idx = |n: &str| el.properties.iter().position(|(p, _)| p == n);
        let xyz = if is_vertex {
            match (idx("x"), idx("y"), idx("z")) {
                (Some(x), Some(y), Some(z)) => Some([x, y, z]),
                _ => {
                    return Err(PlyError::Header {
                        line: header_lines,
                        msg: "vertex element lacks x, y or z".into(),
                    })
                }
            }
        } else {
            None
        };
        let row: usize = el.properties.iter().map(|(_, s)| s.size()).sum();
        for i in 0..el.count {
            let mut vals = vec![0.0; el.properties.len()];
            if encoding == Encoding::Ascii {
                line += 1;
                let l = text.next().ok_or_else(|| PlyError::AsciiBody {
                    line,
                    msg: format!("{} declares {} entries, found {i}", el.name, el.count),
                })?;
                let toks: Vec<&str> = l.split_whitespace().collect();
                if toks.len() != vals.len() {
                    return Err(PlyError::AsciiBody {
                        line,
                        msg: format!("expected {} values, found {}", vals.len(), toks.len()),
                    });
                }
                for (v, t) in vals.iter_mut().zip(toks) {
                    *v = t.parse().map_err(|_| PlyError::AsciiBody {
                        line,
                        msg: format!("cannot parse '{t}' as a number"),
                    })?;
                }
            } else {
                if body.len() < offset + row {
                    return Err(PlyError::BinaryBody {
                        offset: header_len + offset,
                        msg: format!("{} declares {} entries, data ends after {i}", el.name, el.count),
                    });
                }
                let mut o = offset;
                for (v, (_, s)) in vals.iter_mut().zip(&el.properties) {
                    *v = s.decode(&body[o..], encoding);
                    o += s.size();
                }
                offset += row;
            }
            if let Some([x, y, z]) = xyz {
                points.push(Point3::new(vals[x], vals[y], vals[z]));
            }
        }
    }
    Ok(PointCloud::new(points))
}

fn parse_header(reader: &mut impl BufRead) -> Result<(Encoding, Vec<Element>, usize), PlyError> {
    let mut line_no = 0;
    let mut next_line = |reader: &mut dyn BufRead| -> Result<(usize, String), PlyError> {
        let mut buf = Vec::new();
        line_no += 1;
        let n = reader.read_until(b'\n', &mut buf).expect("reading from memory");
        if n == 0 {
            return Err(PlyError::Header {
                line: line_no,
                msg: "unexpected end of file before end_header".into(),
            });
        }
        let s = String::from_utf8(buf).map_err(|_| PlyError::Header {
            line: line_no,
            msg: "header is not ASCII".into(),
        })?;
        Ok((line_no, s.trim_end_matches(['\n', '\r']).to_string()))
    };

    let (n, magic) = next_line(reader)?;
    if magic != "ply" {
        return Err(PlyError::Header {
            line: n,
            msg: format!("expected 'ply', found '{magic}'"),
        });
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        let (n, l) = next_line(reader)?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        let err = |msg: String| PlyError::Header { line: n, msg };
        match toks.as_slice() {
            ["end_header"] => break,
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["format", f, "1.0"] => {
                encoding = Some(match *f {
                    "ascii" => Encoding::Ascii,
                    "binary_little_endian" => Encoding::Little,
                    "binary_big_endian" => Encoding::Big,
                    other => return Err(err(format!("unknown format '{other}'"))),
                })
            }
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count.parse().map_err(|_| err(format!("bad element count '{count}'")))?,
                properties: Vec::new(),
                has_list: false,
            }),
            ["property", "list", ..] => {
                elements
                    .last_mut()
                    .ok_or_else(|| err("property before any element".into()))?
                    .has_list = true;
            }
            ["property", ty, name] => {
                let s = Scalar::parse(ty).ok_or_else(|| err(format!("unknown property type '{ty}'")))?;
                elements
                    .last_mut()
                    .ok_or_else(|| err("property before any element".into()))?
                    .properties
                    .push((name.to_string(), s));
            }
            _ => return Err(err(format!("unrecognized header line '{l}'"))),
        }
    }
    let encoding = encoding.ok_or_else(|| PlyError::Header {
        line: line_no,
        msg: "missing format line".into(),
    })?;
    if !elements.iter().any(|e| e.name == "vertex") {
        return Err(PlyError::Header {
            line: line_no,
            msg: "no vertex element".into(),
        });
    }
    Ok((encoding, elements, line_no))
}
