use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geom::{Point, PointCloud, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CloudFormat {
    Ply,
    Csv,
}

impl CloudFormat {
    /// Format implied by the file extension (`.ply` or `.csv`, any case).
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref() {
            Some("ply") => Ok(CloudFormat::Ply),
            Some("csv") => Ok(CloudFormat::Csv),
            _ => Err(Error::Config(format!("cannot infer cloud format of {}", path.display()))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

pub fn load_cloud(path: &Path, format: CloudFormat) -> Result<PointCloud> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        CloudFormat::Ply => read_ply(&bytes, path),
        CloudFormat::Csv => read_csv_cloud(&bytes, path),
    }
}

/// Writes binary little-endian PLY or CSV depending on `format`.
pub fn save_cloud(path: &Path, cloud: &PointCloud, format: CloudFormat) -> Result<()> {
    let bytes = match format {
        CloudFormat::Ply => write_ply(cloud, PlyEncoding::BinaryLittleEndian),
        CloudFormat::Csv => write_csv_cloud(cloud),
    };
    super::write_atomic(path, &bytes)
}

// ---------------------------------------------------------------- CSV

pub fn read_csv_cloud(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(bytes);

    // Column positions of x,y,z[,nx,ny,nz].
    let mut columns: Option<Vec<usize>> = None;
    let mut points = Vec::new();
    let mut normals = Vec::new();
    let mut first = true;

    for record in reader.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }
        if first {
            first = false;
            if record.get(0).is_some_and(|f| f.parse::<f64>().is_err()) {
                columns = Some(header_columns(&record, path, line)?);
                continue;
            }
        }
        let cols = match &columns {
            Some(c) => c.clone(),
            None => match record.len() {
                3 => vec![0, 1, 2],
                6 => vec![0, 1, 2, 3, 4, 5],
                n => return Err(Error::parse(path, line, format!("expected 3 or 6 columns, found {n}"))),
            },
        };
        if columns.is_none() {
            columns = Some(cols.clone());
        }
        let mut values = [0.0f64; 6];
        for (slot, &col) in cols.iter().enumerate() {
            let field = record
                .get(col)
                .ok_or_else(|| Error::parse(path, line, format!("missing column {}", col + 1)))?;
            let v: f64 = field
                .parse()
                .map_err(|_| Error::parse(path, line, format!("cannot parse {field:?} as a number")))?;
            if !v.is_finite() {
                return Err(Error::parse(path, line, format!("non-finite value {field:?}")));
            }
            values[slot] = v;
        }
        points.push(Point::new(values[0], values[1], values[2]));
        if cols.len() == 6 {
            normals.push(Vector::new(values[3], values[4], values[5]));
        }
    }

    if normals.is_empty() {
        PointCloud::new(points)
    } else {
        PointCloud::with_normals(points, normals)
    }
}

fn header_columns(record: &csv::StringRecord, path: &Path, line: usize) -> Result<Vec<usize>> {
    let find = |name: &str| record.iter().position(|f| f.eq_ignore_ascii_case(name));
    let mut cols = Vec::new();
    for name in ["x", "y", "z"] {
        cols.push(find(name).ok_or_else(|| Error::parse(path, line, format!("header lacks column {name:?}")))?);
    }
    let normal: Vec<Option<usize>> = ["nx", "ny", "nz"].iter().map(|n| find(n)).collect();
    match normal.as_slice() {
        [Some(a), Some(b), Some(c)] => cols.extend([*a, *b, *c]),
        [None, None, None] => {}
        _ => return Err(Error::parse(path, line, "header has a partial nx,ny,nz set")),
    }
    Ok(cols)
}

pub fn write_csv_cloud(cloud: &PointCloud) -> Vec<u8> {
    let mut out = String::new();
    match cloud.normals() {
        Some(normals) => {
            out.push_str("x,y,z,nx,ny,nz\n");
            for (p, n) in cloud.points().iter().zip(normals) {
                out.push_str(&format!("{},{},{},{},{},{}\n", p.x, p.y, p.z, n.x, n.y, n.z));
            }
        }
        None => {
            out.push_str("x,y,z\n");
            for p in cloud.points() {
                out.push_str(&format!("{},{},{}\n", p.x, p.y, p.z));
            }
        }
    }
    out.into_bytes()
}

// ---------------------------------------------------------------- PLY

#[derive(Clone, Copy, Debug, PartialEq)]
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

    fn decode_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::U32 => u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F32 => f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().expect("8 bytes")),
        }
    }
}

struct PlyHeader {
    encoding: PlyEncoding,
    vertex_count: usize,
    properties: Vec<(String, Scalar)>,
    /// Byte offset of the first body byte.
    body_offset: usize,
    /// Number of header lines, for ASCII line numbering.
    header_lines: usize,
}

fn parse_ply_header(bytes: &[u8], path: &Path) -> Result<PlyHeader> {
    let mut offset = 0;
    let mut line_no = 0;
    let mut encoding = None;
    let mut vertex_count = None;
    let mut properties = Vec::new();
    // 0: before any element, 1: in vertex, 2: in a later element.
    let mut section = 0;

    loop {
        let end = bytes[offset..]
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::parse(path, line_no + 1, "unterminated PLY header"))?;
        let raw = &bytes[offset..offset + end];
        offset += end + 1;
        line_no += 1;
        let line = std::str::from_utf8(raw)
            .map_err(|_| Error::parse(path, line_no, "header is not UTF-8"))?
            .trim_end_matches('\r')
            .trim();
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            [] => {}
            ["ply"] if line_no == 1 => {}
            _ if line_no == 1 => return Err(Error::parse(path, 1, "missing 'ply' magic")),
            ["format", fmt, _version] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    other => return Err(Error::parse(path, line_no, format!("unsupported PLY format {other:?}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", name, count] => {
                if *name == "vertex" {
                    if section != 0 {
                        return Err(Error::parse(path, line_no, "vertex must be the first element"));
                    }
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| Error::parse(path, line_no, format!("bad vertex count {count:?}")))?,
                    );
                    section = 1;
                } else {
                    if section == 0 {
                        return Err(Error::parse(path, line_no, "vertex must be the first element"));
                    }
                    section = 2;
                }
            }
            ["property", "list", ..] if section == 1 => {
                return Err(Error::parse(path, line_no, "list properties are not supported on vertices"))
            }
            ["property", ty, name] if section == 1 => {
                let scalar = Scalar::parse(ty).ok_or_else(|| Error::parse(path, line_no, format!("unknown property type {ty:?}")))?;
                properties.push((name.to_string(), scalar));
            }
            ["property", ..] => {}
            ["end_header"] => break,
            _ => return Err(Error::parse(path, line_no, format!("unexpected header line {line:?}"))),
        }
    }

    Ok(PlyHeader {
        encoding: encoding.ok_or_else(|| Error::parse(path, line_no, "missing format line"))?,
        vertex_count: vertex_count.ok_or_else(|| Error::parse(path, line_no, "missing vertex element"))?,
        properties,
        body_offset: offset,
        header_lines: line_no,
    })
}

pub fn read_ply(bytes: &[u8], path: &Path) -> Result<PointCloud> {
    let header = parse_ply_header(bytes, path)?;
    let find = |name: &str| header.properties.iter().position(|(n, _)| n == name);
    let xyz = ["x", "y", "z"]
        .iter()
        .map(|n| find(n).ok_or_else(|| Error::parse(path, header.header_lines, format!("vertex lacks property {n:?}"))))
        .collect::<Result<Vec<_>>>()?;
    let nrm: Vec<Option<usize>> = ["nx", "ny", "nz"].iter().map(|n| find(n)).collect();
    let nrm = match nrm.as_slice() {
        [Some(a), Some(b), Some(c)] => Some([*a, *b, *c]),
        [None, None, None] => None,
        _ => return Err(Error::parse(path, header.header_lines, "partial nx,ny,nz set")),
    };

    let mut points = Vec::with_capacity(header.vertex_count);
    let mut normals = Vec::with_capacity(if nrm.is_some() { header.vertex_count } else { 0 });
    let mut row = vec![0.0f64; header.properties.len()];

    match header.encoding {
        PlyEncoding::Ascii => {
            let body = std::str::from_utf8(&bytes[header.body_offset..])
                .map_err(|_| Error::parse(path, header.header_lines + 1, "body is not UTF-8"))?;
            let mut lines = body.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
            for _ in 0..header.vertex_count {
                let (idx, line) = lines
                    .next()
                    .ok_or_else(|| Error::parse(path, header.header_lines + 1, format!("expected {} vertices", header.vertex_count)))?;
                let line_no = header.header_lines + idx + 1;
                let fields: Vec<&str> = line.split_whitespace().collect();
                if fields.len() < row.len() {
                    return Err(Error::parse(
                        path,
                        line_no,
                        format!("expected {} values, found {}", row.len(), fields.len()),
                    ));
                }
                for (slot, field) in row.iter_mut().zip(&fields) {
                    *slot = field
                        .parse()
                        .map_err(|_| Error::parse(path, line_no, format!("cannot parse {field:?}")))?;
                    if !slot.is_finite() {
                        return Err(Error::parse(path, line_no, format!("non-finite value {field:?}")));
                    }
                }
                points.push(Point::new(row[xyz[0]], row[xyz[1]], row[xyz[2]]));
                if let Some(n) = nrm {
                    normals.push(Vector::new(row[n[0]], row[n[1]], row[n[2]]));
                }
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let stride: usize = header.properties.iter().map(|(_, s)| s.size()).sum();
            let needed = header.vertex_count * stride;
            let body = &bytes[header.body_offset..];
            if body.len() < needed {
                return Err(Error::parse_binary(
                    path,
                    header.body_offset + body.len(),
                    format!("truncated body: need {needed} bytes of vertices, have {}", body.len()),
                ));
            }
            for v in 0..header.vertex_count {
                let mut at = v * stride;
                for (slot, (_, scalar)) in row.iter_mut().zip(&header.properties) {
                    *slot = scalar.decode_le(&body[at..at + scalar.size()]);
                    if !slot.is_finite() {
                        return Err(Error::parse_binary(path, header.body_offset + at, "non-finite value"));
                    }
                    at += scalar.size();
                }
                points.push(Point::new(row[xyz[0]], row[xyz[1]], row[xyz[2]]));
                if let Some(n) = nrm {
                    normals.push(Vector::new(row[n[0]], row[n[1]], row[n[2]]));
                }
            }
        }
    }

    match nrm {
        Some(_) => PointCloud::with_normals(points, normals),
        None => PointCloud::new(points),
    }
}

/// Serializes with float64 properties so a write/read round trip is lossless.
pub fn write_ply(cloud: &PointCloud, encoding: PlyEncoding) -> Vec<u8> {
    let mut out = Vec::new();
    let fmt = match encoding {
        PlyEncoding::Ascii => "ascii",
        PlyEncoding::BinaryLittleEndian => "binary_little_endian",
    };
    out.extend_from_slice(format!("ply\nformat {fmt} 1.0\nelement vertex {}\n", cloud.len()).as_bytes());
    out.extend_from_slice(b"property double x\nproperty double y\nproperty double z\n");
    if cloud.has_normals() {
        out.extend_from_slice(b"property double nx\nproperty double ny\nproperty double nz\n");
    }
    out.extend_from_slice(b"end_header\n");

    let normals = cloud.normals();
    for (i, p) in cloud.points().iter().enumerate() {
        let mut values = vec![p.x, p.y, p.z];
        if let Some(n) = normals {
            values.extend_from_slice(&[n[i].x, n[i].y, n[i].z]);
        }
        match encoding {
            PlyEncoding::Ascii => {
                let line: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("test")
    }

    #[test]
    fn csv_without_header() {
        let c = read_csv_cloud(b"0,0,0\n1,0,0\n", p()).unwrap();
        assert_eq!(c.len(), 2);
        assert!(!c.has_normals());
        assert_eq!(c.points()[1], Point::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn csv_with_header_and_normals() {
        let c = read_csv_cloud(b"nx,ny,nz,x,y,z\n0,0,1,5,6,7\n", p()).unwrap();
        assert_eq!(c.points(), &[Point::new(5.0, 6.0, 7.0)]);
        assert_eq!(c.normals().unwrap(), &[Vector::z()]);
    }

    #[test]
    fn csv_rejects_nan_with_line() {
        let err = read_csv_cloud(b"0,0,0\n1,2,nan\n", p()).unwrap_err();
        match err {
            Error::Parse { at, .. } => assert_eq!(at, "line 2"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(read_csv_cloud(b"0,0,0\n1,2\n", p()).is_err());
        assert!(read_csv_cloud(b"0,0,zero\n", p()).is_err());
    }

    #[test]
    fn ascii_ply_with_normals() {
        let text = b"ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty float ny\nproperty float nz\nend_header\n0 0 0 0 0 1\n";
        let c = read_ply(text, p()).unwrap();
        assert_eq!(c.points(), &[Point::origin()]);
        assert_eq!(c.normals().unwrap(), &[Vector::z()]);
    }

    #[test]
    fn binary_float32_ply() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment made by hand\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty uchar intensity\nend_header\n".to_vec();
        for (xyz, i) in [([1.0f32, 2.0, 3.0], 7u8), ([-1.5, 0.25, 8.0], 9)] {
            for v in xyz {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
            bytes.push(i);
        }
        let c = read_ply(&bytes, p()).unwrap();
        assert_eq!(c.points(), &[Point::new(1.0, 2.0, 3.0), Point::new(-1.5, 0.25, 8.0)]);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let mut bytes = write_ply(&PointCloud::from_xyz(&[[1.0, 2.0, 3.0]]).unwrap(), PlyEncoding::BinaryLittleEndian);
        bytes.truncate(bytes.len() - 4);
        match read_ply(&bytes, p()).unwrap_err() {
            Error::Parse { at, .. } => assert!(at.starts_with("byte ")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ascii_ply_bad_value_names_line() {
        let text =
            b"ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n0 x 0\n";
        match read_ply(text, p()).unwrap_err() {
            Error::Parse { at, .. } => assert_eq!(at, "line 9"),
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn ply_round_trip_is_lossless(
            pts in prop::collection::vec(prop::array::uniform3(-1e3..1e3f64), 0..50),
            ascii in any::<bool>(),
        ) {
            let cloud = PointCloud::from_xyz(&pts).unwrap();
            let enc = if ascii { PlyEncoding::Ascii } else { PlyEncoding::BinaryLittleEndian };
            let back = read_ply(&write_ply(&cloud, enc), p()).unwrap();
            prop_assert_eq!(back, cloud);
        }
    }
}
