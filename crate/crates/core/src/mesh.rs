//! Triangle meshes, point sets and ASCII OBJ input/output.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Point3, Vector3};

use crate::error::{Error, Result};

/// Vertex positions with optional triangle connectivity.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Point3<f64>>,
    pub faces: Vec<[usize; 3]>,
}

impl Mesh {
    pub fn new(vertices: Vec<Point3<f64>>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let mesh = Self { vertices, faces };
        mesh.validate()?;
        Ok(mesh)
    }

    pub fn from_vertices(vertices: Vec<Point3<f64>>) -> Result<Self> {
        Self::new(vertices, Vec::new())
    }

    pub fn validate(&self) -> Result<()> {
        if self.vertices.is_empty() {
            return Err(Error::InvalidInput("mesh has no vertices".into()));
        }
        let count = self.vertices.len();
        for (face, tri) in self.faces.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i >= count) {
                return Err(Error::FaceIndexOutOfRange { face, index, count });
            }
        }
        Ok(())
    }

    /// Length of the axis-aligned bounding box diagonal.
    pub fn bbox_diagonal(&self) -> f64 {
        bbox_diagonal(&self.vertices)
    }
}

pub fn bbox_diagonal(points: &[Point3<f64>]) -> f64 {
    let Some(first) = points.first() else {
        return 0.0;
    };
    let (lo, hi) = points
        .iter()
        .fold((first.coords, first.coords), |(lo, hi), p| {
            (lo.inf(&p.coords), hi.sup(&p.coords))
        });
    (hi - lo).norm()
}

/// Target points, optionally with unit normals.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointSet {
    pub points: Vec<Point3<f64>>,
    pub normals: Option<Vec<Vector3<f64>>>,
}

impl PointSet {
    pub fn new(points: Vec<Point3<f64>>) -> Self {
        Self {
            points,
            normals: None,
        }
    }

    pub fn with_normals(points: Vec<Point3<f64>>, normals: Vec<Vector3<f64>>) -> Result<Self> {
        if normals.len() != points.len() {
            return Err(Error::InvalidInput(format!(
                "{} normals for {} points",
                normals.len(),
                points.len()
            )));
        }
        if let Some(i) = normals.iter().position(|n| (n.norm() - 1.0).abs() > 1e-9) {
            return Err(Error::InvalidInput(format!(
                "normal {i} is not unit length"
            )));
        }
        Ok(Self {
            points,
            normals: Some(normals),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Parses ASCII OBJ text. Only `v` and `f` records are interpreted; faces with
/// more than three corners are fan-triangulated.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        let mut fields = content.split_whitespace();
        match fields.next() {
            Some("v") => {
                let coords: Vec<f64> = fields
                    .take(3)
                    .map(|s| {
                        s.parse::<f64>().map_err(|_| Error::Parse {
                            line,
                            message: format!("bad vertex coordinate {s:?}"),
                        })
                    })
                    .collect::<Result<_>>()?;
                if coords.len() != 3 {
                    return Err(Error::Parse {
                        line,
                        message: "vertex record needs three coordinates".into(),
                    });
                }
                vertices.push(Point3::new(coords[0], coords[1], coords[2]));
            }
            Some("f") => {
                let corners: Vec<usize> = fields
                    .map(|s| parse_face_index(s, vertices.len(), line))
                    .collect::<Result<_>>()?;
                if corners.len() < 3 {
                    return Err(Error::Parse {
                        line,
                        message: "face record needs at least three indices".into(),
                    });
                }
                for k in 1..corners.len() - 1 {
                    faces.push([corners[0], corners[k], corners[k + 1]]);
                }
            }
            _ => {}
        }
    }
    let mesh = Mesh { vertices, faces };
    if mesh.vertices.is_empty() {
        return Err(Error::InvalidInput("OBJ contains no vertices".into()));
    }
    mesh.validate()?;
    Ok(mesh)
}

// Accepts `i`, `i/t`, `i/t/n` and negative (relative) indices.
fn parse_face_index(token: &str, seen: usize, line: usize) -> Result<usize> {
    let head = token.split('/').next().unwrap_or("");
    let value: i64 = head.parse().map_err(|_| Error::Parse {
        line,
        message: format!("bad face index {token:?}"),
    })?;
    let resolved = match value {
        0 => {
            return Err(Error::Parse {
                line,
                message: "face index 0 is invalid in OBJ".into(),
            })
        }
        v if v > 0 => v - 1,
        v => seen as i64 + v,
    };
    if resolved < 0 {
        return Err(Error::Parse {
            line,
            message: format!("relative face index {value} precedes first vertex"),
        });
    }
    Ok(resolved as usize)
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| Error::Read {
        path: path.to_path_buf(),
        source,
    })?;
    parse_obj(&text)
}

/// Formats a mesh as OBJ with round-trip (shortest exact) float formatting.
pub fn format_obj(mesh: &Mesh) -> String {
    let mut out = String::with_capacity(mesh.vertices.len() * 40 + mesh.faces.len() * 20);
    for v in &mesh.vertices {
        let _ = writeln!(out, "v {:?} {:?} {:?}", v.x, v.y, v.z);
    }
    for f in &mesh.faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn save_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    mesh.validate()?;
    let path = path.as_ref();
    std::fs::write(path, format_obj(mesh)).map_err(|source| Error::Write {
        path: path.to_path_buf(),
        source,
    })
}
