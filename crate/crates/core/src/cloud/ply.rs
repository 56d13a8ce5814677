//! PLY reading and writing for point clouds and triangle meshes.
//!
//! Vertices carry `x y z` as float32, optionally `nx ny nz` (float32) and
//! `red green blue` (uint8). Meshes add a `face` element with a
//! `list uchar int vertex_indices` property. Both `ascii` and
//! `binary_little_endian` encodings are supported.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use super::PointCloud;
use crate::error::{Result, SlamError};
use crate::fusion::TriangleMesh;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlyEncoding {
    Ascii,
    BinaryLittleEndian,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum ScalarType {
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
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "char" | "int8" => Self::I8,
            "uchar" | "uint8" => Self::U8,
            "short" | "int16" => Self::I16,
            "ushort" | "uint16" => Self::U16,
            "int" | "int32" => Self::I32,
            "uint" | "uint32" => Self::U32,
            "float" | "float32" => Self::F32,
            "double" | "float64" => Self::F64,
            other => return Err(SlamError::Format(format!("unknown PLY scalar type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    fn read_binary(self, buf: &[u8]) -> f64 {
        match self {
            Self::I8 => buf[0] as i8 as f64,
            Self::U8 => buf[0] as f64,
            Self::I16 => i16::from_le_bytes([buf[0], buf[1]]) as f64,
            Self::U16 => u16::from_le_bytes([buf[0], buf[1]]) as f64,
            Self::I32 => i32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            Self::U32 => u32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            Self::F32 => f32::from_le_bytes(buf[..4].try_into().unwrap()) as f64,
            Self::F64 => f64::from_le_bytes(buf[..8].try_into().unwrap()),
        }
    }
}

#[derive(Clone, Debug)]
enum Property {
    Scalar { name: String, ty: ScalarType },
    List { count: ScalarType, item: ScalarType },
}

#[derive(Clone, Debug)]
struct Element {
    name: String,
    count: usize,
    properties: Vec<Property>,
}

struct Header {
    encoding: PlyEncoding,
    elements: Vec<Element>,
}

fn read_header<R: BufRead>(reader: &mut R) -> Result<Header> {
    let mut line = String::new();
    let mut lineno = 0;
    let mut next = |reader: &mut R, line: &mut String| -> Result<()> {
        line.clear();
        lineno += 1;
        if reader.read_line(line)? == 0 {
            return Err(SlamError::parse(lineno, "unexpected end of PLY header"));
        }
        Ok(())
    };
    next(reader, &mut line)?;
    if line.trim() != "ply" {
        return Err(SlamError::Format("missing PLY magic".into()));
    }
    let mut encoding = None;
    let mut elements: Vec<Element> = Vec::new();
    loop {
        next(reader, &mut line)?;
        let tokens: Vec<&str> = line.split_whitespace().collect();
        match tokens.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                encoding = Some(match *fmt {
                    "ascii" => PlyEncoding::Ascii,
                    "binary_little_endian" => PlyEncoding::BinaryLittleEndian,
                    other => return Err(SlamError::Format(format!("unsupported PLY encoding {other}"))),
                })
            }
            ["comment", ..] | ["obj_info", ..] | [] => {}
            ["element", name, count] => elements.push(Element {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| SlamError::Format(format!("bad element count {count}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", count, item, _name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| SlamError::Format("property before element".into()))?;
                el.properties.push(Property::List {
                    count: ScalarType::parse(count)?,
                    item: ScalarType::parse(item)?,
                });
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| SlamError::Format("property before element".into()))?;
                el.properties.push(Property::Scalar {
                    name: name.to_string(),
                    ty: ScalarType::parse(ty)?,
                });
            }
            _ => return Err(SlamError::Format(format!("unrecognized PLY header line: {}", line.trim()))),
        }
    }
    Ok(Header {
        encoding: encoding.ok_or_else(|| SlamError::Format("PLY header lacks a format line".into()))?,
        elements,
    })
}

/// Decoded rows of one element: scalar values and list values per row.
struct Rows {
    scalars: Vec<Vec<f64>>,
    lists: Vec<Vec<Vec<f64>>>,
}

fn read_element<R: BufRead>(reader: &mut R, el: &Element, encoding: PlyEncoding) -> Result<Rows> {
    let mut rows = Rows {
        scalars: Vec::with_capacity(el.count),
        lists: Vec::with_capacity(el.count),
    };
    match encoding {
        PlyEncoding::Ascii => {
            let mut line = String::new();
            for row in 0..el.count {
                line.clear();
                if reader.read_line(&mut line)? == 0 {
                    return Err(SlamError::Format(format!("{} row {row} missing", el.name)));
                }
                let mut tok = line.split_whitespace().map(|t| {
                    t.parse::<f64>()
                        .map_err(|_| SlamError::Format(format!("bad number {t} in {}", el.name)))
                });
                let mut scalars = Vec::new();
                let mut lists = Vec::new();
                for p in &el.properties {
                    let mut take = || tok.next().unwrap_or_else(|| Err(SlamError::Format(format!("short {} row", el.name))));
                    match p {
                        Property::Scalar { .. } => scalars.push(take()?),
                        Property::List { .. } => {
                            let n = take()? as usize;
                            let items = (0..n).map(|_| take()).collect::<Result<Vec<_>>>()?;
                            lists.push(items);
                        }
                    }
                }
                rows.scalars.push(scalars);
                rows.lists.push(lists);
            }
        }
        PlyEncoding::BinaryLittleEndian => {
            let mut buf = [0u8; 8];
            for _ in 0..el.count {
                let mut scalars = Vec::new();
                let mut lists = Vec::new();
                for p in &el.properties {
                    match p {
                        Property::Scalar { ty, .. } => {
                            reader.read_exact(&mut buf[..ty.size()])?;
                            scalars.push(ty.read_binary(&buf));
                        }
                        Property::List { count, item, .. } => {
                            reader.read_exact(&mut buf[..count.size()])?;
                            let n = count.read_binary(&buf) as usize;
                            let mut items = Vec::with_capacity(n);
                            for _ in 0..n {
                                reader.read_exact(&mut buf[..item.size()])?;
                                items.push(item.read_binary(&buf));
                            }
                            lists.push(items);
                        }
                    }
                }
                rows.scalars.push(scalars);
                rows.lists.push(lists);
            }
        }
    }
    Ok(rows)
}

fn scalar_slot(el: &Element, name: &str) -> Option<usize> {
    el.properties
        .iter()
        .filter(|p| matches!(p, Property::Scalar { .. }))
        .position(|p| matches!(p, Property::Scalar { name: n, .. } if n == name))
}

fn read_ply<R: Read>(reader: R) -> Result<(PointCloud, Vec<[usize; 3]>)> {
    let mut reader = BufReader::new(reader);
    let header = read_header(&mut reader)?;
    let mut cloud = PointCloud::default();
    let mut faces = Vec::new();
    for el in &header.elements {
        let rows = read_element(&mut reader, el, header.encoding)?;
        match el.name.as_str() {
            "vertex" => {
                let slot = |n: &str| scalar_slot(el, n);
                let (x, y, z) = match (slot("x"), slot("y"), slot("z")) {
                    (Some(x), Some(y), Some(z)) => (x, y, z),
                    _ => return Err(SlamError::Format("vertex element lacks x/y/z".into())),
                };
                cloud.positions = rows.scalars.iter().map(|r| Vector3::new(r[x], r[y], r[z])).collect();
                if let (Some(a), Some(b), Some(c)) = (slot("nx"), slot("ny"), slot("nz")) {
                    cloud.normals = Some(rows.scalars.iter().map(|r| Vector3::new(r[a], r[b], r[c])).collect());
                }
                if let (Some(a), Some(b), Some(c)) = (slot("red"), slot("green"), slot("blue")) {
                    cloud.colors = Some(
                        rows.scalars
                            .iter()
                            .map(|r| [(r[a] / 255.0) as f32, (r[b] / 255.0) as f32, (r[c] / 255.0) as f32])
                            .collect(),
                    );
                }
            }
            "face" => {
                for list in rows.lists {
                    let Some(idx) = list.first() else { continue };
                    // fan-triangulate polygons
                    for k in 1..idx.len().saturating_sub(1) {
                        faces.push([idx[0] as usize, idx[k] as usize, idx[k + 1] as usize]);
                    }
                }
            }
            _ => {}
        }
    }
    Ok((cloud, faces))
}

pub fn read_point_cloud<R: Read>(reader: R) -> Result<PointCloud> {
    Ok(read_ply(reader)?.0)
}

pub fn read_mesh<R: Read>(reader: R) -> Result<TriangleMesh> {
    let (cloud, faces) = read_ply(reader)?;
    TriangleMesh::new(cloud.positions, faces)
}

fn color_byte(c: f32) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_ply<W: Write>(
    mut w: W,
    cloud: &PointCloud,
    faces: Option<&[[usize; 3]]>,
    encoding: PlyEncoding,
) -> Result<()> {
    let mut header = String::from("ply\n");
    header.push_str(match encoding {
        PlyEncoding::Ascii => "format ascii 1.0\n",
        PlyEncoding::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    });
    header.push_str(&format!("element vertex {}\n", cloud.len()));
    header.push_str("property float x\nproperty float y\nproperty float z\n");
    if cloud.normals.is_some() {
        header.push_str("property float nx\nproperty float ny\nproperty float nz\n");
    }
    if cloud.colors.is_some() {
        header.push_str("property uchar red\nproperty uchar green\nproperty uchar blue\n");
    }
    if let Some(f) = faces {
        header.push_str(&format!("element face {}\nproperty list uchar int vertex_indices\n", f.len()));
    }
    header.push_str("end_header\n");
    w.write_all(header.as_bytes())?;

    for i in 0..cloud.len() {
        let p = cloud.positions[i];
        let mut floats = vec![p.x as f32, p.y as f32, p.z as f32];
        if let Some(ns) = &cloud.normals {
            floats.extend([ns[i].x as f32, ns[i].y as f32, ns[i].z as f32]);
        }
        let color = cloud.colors.as_ref().map(|cs| cs[i].map(color_byte));
        match encoding {
            PlyEncoding::Ascii => {
                let mut line = floats.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ");
                if let Some(c) = color {
                    line.push_str(&format!(" {} {} {}", c[0], c[1], c[2]));
                }
                line.push('\n');
                w.write_all(line.as_bytes())?;
            }
            PlyEncoding::BinaryLittleEndian => {
                for v in floats {
                    w.write_all(&v.to_le_bytes())?;
                }
                if let Some(c) = color {
                    w.write_all(&c)?;
                }
            }
        }
    }
    if let Some(faces) = faces {
        for f in faces {
            match encoding {
                PlyEncoding::Ascii => writeln!(w, "3 {} {} {}", f[0], f[1], f[2])?,
                PlyEncoding::BinaryLittleEndian => {
                    w.write_all(&[3u8])?;
                    for &i in f {
                        w.write_all(&(i as i32).to_le_bytes())?;
                    }
                }
            }
        }
    }
    Ok(())
}

pub fn write_point_cloud<W: Write>(w: W, cloud: &PointCloud, encoding: PlyEncoding) -> Result<()> {
    write_ply(w, cloud, None, encoding)
}

pub fn write_mesh<W: Write>(w: W, mesh: &TriangleMesh, encoding: PlyEncoding) -> Result<()> {
    write_ply(w, &PointCloud::new(mesh.vertices.clone()), Some(&mesh.triangles), encoding)
}

pub fn save_point_cloud(path: impl AsRef<Path>, cloud: &PointCloud, encoding: PlyEncoding) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_point_cloud(file, cloud, encoding)
}

pub fn load_point_cloud(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_point_cloud(std::fs::File::open(path)?)
}

pub fn save_mesh(path: impl AsRef<Path>, mesh: &TriangleMesh, encoding: PlyEncoding) -> Result<()> {
    let file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_mesh(file, mesh, encoding)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_cloud() -> PointCloud {
        PointCloud {
            positions: vec![Vector3::new(0.5, -1.25, 2.0), Vector3::new(0.0, 0.125, -3.5)],
            normals: Some(vec![Vector3::z(), -Vector3::x()]),
            colors: Some(vec![[1.0, 0.0, 0.2], [0.0, 1.0, 1.0]]),
        }
    }

    #[test]
    fn cloud_round_trips_in_both_encodings() {
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            let mut buf = Vec::new();
            write_point_cloud(&mut buf, &sample_cloud(), enc).unwrap();
            let back = read_point_cloud(buf.as_slice()).unwrap();
            assert_eq!(back.positions, sample_cloud().positions);
            assert_eq!(back.normals, sample_cloud().normals);
            let c = back.colors.unwrap();
            assert_eq!(c[0].map(color_byte), [255, 0, 51]);
        }
    }

    #[test]
    fn mesh_round_trips() {
        let mesh = TriangleMesh::new(
            vec![Vector3::zeros(), Vector3::x(), Vector3::y(), Vector3::z()],
            vec![[0, 1, 2], [0, 2, 3]],
        )
        .unwrap();
        for enc in [PlyEncoding::Ascii, PlyEncoding::BinaryLittleEndian] {
            let mut buf = Vec::new();
            write_mesh(&mut buf, &mesh, enc).unwrap();
            let back = read_mesh(buf.as_slice()).unwrap();
            assert_eq!(back.vertices, mesh.vertices);
            assert_eq!(back.triangles, mesh.triangles);
        }
    }

    #[test]
    fn positions_only_and_bad_magic() {
        let text = "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nproperty float y\nproperty float z\nend_header\n1 2 3\n";
        let cloud = read_point_cloud(text.as_bytes()).unwrap();
        assert_eq!(cloud.positions, vec![Vector3::new(1.0, 2.0, 3.0)]);
        assert!(cloud.normals.is_none() && cloud.colors.is_none());
        assert!(read_point_cloud("plx\n".as_bytes()).is_err());
    }
}
