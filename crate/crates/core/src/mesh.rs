//! Triangle meshes with discrete symmetries, builtin test solids and loaders
//! for ASCII OBJ and binary little-endian PLY.
//!
//! Units are meters. BOP-style models and metadata are in millimeters; load
//! them with `scale = 1e-3` and give `diameter_m` / symmetry translations in
//! meters in the metadata file.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{so3_exp, Mat3, Pose, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[u32; 3]>,
    /// Largest pairwise vertex distance (meters).
    pub diameter: f64,
    /// Discrete symmetry transforms; always contains the identity first.
    pub symmetries: Vec<Pose>,
}

impl Mesh {
    /// Builds a mesh with the identity as its only symmetry and a brute-force diameter.
    pub fn new(vertices: Vec<Vec3>, triangles: Vec<[u32; 3]>) -> Result<Self> {
        if vertices.is_empty() || triangles.is_empty() {
            return Err(Error::Empty("mesh has no vertices or triangles"));
        }
        let n = vertices.len() as u32;
        if let Some(t) = triangles.iter().find(|t| t.iter().any(|&i| i >= n)) {
            return Err(Error::InvalidParameter(format!(
                "triangle {t:?} references a vertex beyond {n}"
            )));
        }
        let diameter = brute_force_diameter(&vertices);
        if !(diameter > 0.0) {
            return Err(Error::Degenerate("mesh diameter is zero".into()));
        }
        Ok(Self {
            vertices,
            triangles,
            diameter,
            symmetries: vec![Pose::identity()],
        })
    }

    /// Replaces the symmetry list, inserting the identity if missing.
    pub fn with_symmetries(mut self, symmetries: Vec<Pose>) -> Self {
        let mut syms = vec![Pose::identity()];
        for s in symmetries {
            if !is_identity(&s, 1e-9) {
                syms.push(s);
            }
        }
        self.symmetries = syms;
        self
    }

    pub fn with_diameter(mut self, diameter: f64) -> Result<Self> {
        if !(diameter > 0.0) {
            return Err(Error::InvalidParameter(format!("diameter must be > 0, got {diameter}")));
        }
        self.diameter = diameter;
        Ok(self)
    }

    /// Largest vertex distance from the model origin.
    pub fn bounding_radius(&self) -> f64 {
        self.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn apply_metadata(self, meta: &MeshMetadata) -> Result<Self> {
        let mut mesh = self;
        if let Some(d) = meta.diameter_m {
            mesh = mesh.with_diameter(d)?;
        }
        let syms = meta
            .symmetries_discrete
            .iter()
            .map(Pose::from_matrix4_row_major)
            .collect();
        Ok(mesh.with_symmetries(syms))
    }

    /// Deterministic farthest-point sample of at most `n` vertices, starting
    /// from vertex 0. Returns every vertex when the mesh has `n` or fewer.
    pub fn sample_vertices(&self, n: usize) -> Vec<Vec3> {
        farthest_point_sample(&self.vertices, n)
    }

    pub fn triangle(&self, i: usize) -> [Vec3; 3] {
        let t = self.triangles[i];
        [
            self.vertices[t[0] as usize],
            self.vertices[t[1] as usize],
            self.vertices[t[2] as usize],
        ]
    }
}

fn is_identity(p: &Pose, tol: f64) -> bool {
    (p.rotation - Mat3::identity()).amax() < tol && p.translation.amax() < tol
}

pub fn brute_force_diameter(vertices: &[Vec3]) -> f64 {
    let mut best = 0.0f64;
    for (i, a) in vertices.iter().enumerate() {
        for b in &vertices[i + 1..] {
            best = best.max((a - b).norm_squared());
        }
    }
    best.sqrt()
}

pub fn farthest_point_sample(points: &[Vec3], n: usize) -> Vec<Vec3> {
    if points.len() <= n {
        return points.to_vec();
    }
    let mut chosen = Vec::with_capacity(n);
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut next = 0;
    for _ in 0..n {
        chosen.push(points[next]);
        let c = points[next];
        let mut far = 0;
        let mut far_d = -1.0;
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > far_d {
                far_d = dist[i];
                far = i;
            }
        }
        next = far;
    }
    chosen
}

/// Closure of a set of rotation generators under composition.
pub fn symmetry_group(generators: &[Mat3]) -> Vec<Pose> {
    let mut group = vec![Mat3::identity()];
    let mut frontier = vec![Mat3::identity()];
    let contains = |g: &[Mat3], m: &Mat3| g.iter().any(|x| (x - m).amax() < 1e-9);
    while let Some(m) = frontier.pop() {
        for g in generators {
            let p = g * m;
            if !contains(&group, &p) {
                group.push(p);
                frontier.push(p);
            }
        }
        assert!(group.len() <= 1000, "generators do not span a finite group");
    }
    group.into_iter().map(|r| Pose::new(r, Vec3::zeros())).collect()
}

/// Axis-aligned cube centered at the origin with its 24 proper rotational symmetries.
pub fn cube(side: f64) -> Mesh {
    let h = side / 2.0;
    let vertices = vec![
        Vec3::new(-h, -h, -h),
        Vec3::new(h, -h, -h),
        Vec3::new(h, h, -h),
        Vec3::new(-h, h, -h),
        Vec3::new(-h, -h, h),
        Vec3::new(h, -h, h),
        Vec3::new(h, h, h),
        Vec3::new(-h, h, h),
    ];
    let quads = [
        [0, 3, 2, 1],
        [4, 5, 6, 7],
        [0, 1, 5, 4],
        [2, 3, 7, 6],
        [1, 2, 6, 5],
        [0, 4, 7, 3],
    ];
    let triangles = quads
        .iter()
        .flat_map(|q| [[q[0], q[1], q[2]], [q[0], q[2], q[3]]])
        .collect();
    let quarter = std::f64::consts::FRAC_PI_2;
    let syms = symmetry_group(&[
        so3_exp(&Vec3::new(quarter, 0.0, 0.0)),
        so3_exp(&Vec3::new(0.0, quarter, 0.0)),
    ]);
    Mesh::new(vertices, triangles).expect("cube mesh").with_symmetries(syms)
}

/// The 12 unit-length vertices and 20 faces of a regular icosahedron.
pub fn icosahedron() -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let raw = [
        (-1.0, phi, 0.0),
        (1.0, phi, 0.0),
        (-1.0, -phi, 0.0),
        (1.0, -phi, 0.0),
        (0.0, -1.0, phi),
        (0.0, 1.0, phi),
        (0.0, -1.0, -phi),
        (0.0, 1.0, -phi),
        (phi, 0.0, -1.0),
        (phi, 0.0, 1.0),
        (-phi, 0.0, -1.0),
        (-phi, 0.0, 1.0),
    ];
    let vertices = raw.iter().map(|&(x, y, z)| Vec3::new(x, y, z).normalize()).collect();
    let faces = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    (vertices, faces)
}

/// Splits every triangle into four, pushing new edge midpoints onto the unit
/// sphere. Original vertices keep their indices; midpoints are appended in
/// order of first appearance.
pub fn subdivide_sphere(vertices: &[Vec3], faces: &[[u32; 3]]) -> (Vec<Vec3>, Vec<[u32; 3]>) {
    let mut verts = vertices.to_vec();
    let mut cache: HashMap<(u32, u32), u32> = HashMap::new();
    let mut midpoint = |a: u32, b: u32, verts: &mut Vec<Vec3>| -> u32 {
        let key = (a.min(b), a.max(b));
        *cache.entry(key).or_insert_with(|| {
            verts.push(((verts[a as usize] + verts[b as usize]) / 2.0).normalize());
            (verts.len() - 1) as u32
        })
    };
    let mut out = Vec::with_capacity(faces.len() * 4);
    for &[a, b, c] in faces {
        let ab = midpoint(a, b, &mut verts);
        let bc = midpoint(b, c, &mut verts);
        let ca = midpoint(c, a, &mut verts);
        out.extend_from_slice(&[[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
    }
    (verts, out)
}

/// Geodesic sphere with the 60 rotational symmetries of the icosahedron.
pub fn icosphere(radius: f64, subdivisions: u32) -> Mesh {
    let (mut v, mut f) = icosahedron();
    let (base_v, base_f) = (v.clone(), f.clone());
    for _ in 0..subdivisions {
        (v, f) = subdivide_sphere(&v, &f);
    }
    let vertices = v.into_iter().map(|p| p * radius).collect();
    let five_fold = so3_exp(&(base_v[0] * (2.0 * std::f64::consts::PI / 5.0)));
    let face = base_f[0];
    let axis = (base_v[face[0] as usize] + base_v[face[1] as usize] + base_v[face[2] as usize]).normalize();
    let three_fold = so3_exp(&(axis * (2.0 * std::f64::consts::PI / 3.0)));
    Mesh::new(vertices, f)
        .expect("icosphere mesh")
        .with_symmetries(symmetry_group(&[five_fold, three_fold]))
}

/// Extruded L-shaped bracket without any proper rotational symmetry,
/// centered on its bounding box (about 0.1 m across).
pub fn l_bracket() -> Mesh {
    // L profile in the xy plane, counter-clockwise
    let profile = [
        (0.0, 0.0),
        (0.08, 0.0),
        (0.08, 0.02),
        (0.025, 0.02),
        (0.025, 0.05),
        (0.0, 0.05),
    ];
    let depth = 0.03;
    let center = Vec3::new(0.04, 0.025, depth / 2.0);
    let mut vertices = Vec::new();
    for z in [0.0, depth] {
        for &(x, y) in &profile {
            vertices.push(Vec3::new(x, y, z) - center);
        }
    }
    // cap triangulation of the L (indices into the profile)
    let cap = [[0u32, 1, 2], [0, 2, 3], [0, 3, 4], [0, 4, 5]];
    let mut triangles = Vec::new();
    for t in cap {
        triangles.push([t[0], t[2], t[1]]);
        triangles.push([t[0] + 6, t[1] + 6, t[2] + 6]);
    }
    for i in 0..6u32 {
        let j = (i + 1) % 6;
        triangles.push([i, j, j + 6]);
        triangles.push([i, j + 6, i + 6]);
    }
    Mesh::new(vertices, triangles).expect("l-bracket mesh")
}

/// Builtin solid by name: `cube`, `icosphere` or `l_bracket`.
pub fn builtin(name: &str) -> Option<Mesh> {
    match name {
        "cube" => Some(cube(0.06)),
        "icosphere" => Some(icosphere(0.05, 3)),
        "l_bracket" => Some(l_bracket()),
        _ => None,
    }
}

/// Per-model metadata file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshMetadata {
    #[serde(default)]
    pub diameter_m: Option<f64>,
    /// 4x4 row-major homogeneous matrices.
    #[serde(default)]
    pub symmetries_discrete: Vec<[f64; 16]>,
}

impl MeshMetadata {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn from_mesh(mesh: &Mesh) -> Self {
        let symmetries_discrete = mesh
            .symmetries
            .iter()
            .map(|s| {
                let (r, t) = s.to_row_major();
                [
                    r[0], r[1], r[2], t[0], r[3], r[4], r[5], t[1], r[6], r[7], r[8], t[2], 0.0, 0.0, 0.0, 1.0,
                ]
            })
            .collect();
        Self {
            diameter_m: Some(mesh.diameter),
            symmetries_discrete,
        }
    }
}

/// Loads an OBJ or PLY file (by extension), scaling coordinates by `scale`.
/// A sibling `<stem>.json` metadata file is applied when present.
pub fn load_mesh(path: impl AsRef<Path>, scale: f64) -> Result<Mesh> {
    let path = path.as_ref();
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    let mesh = match ext.as_deref() {
        Some("obj") => load_obj(path, scale)?,
        Some("ply") => load_ply(path, scale)?,
        _ => return Err(Error::parse(path, "unsupported mesh extension (expected .obj or .ply)")),
    };
    let meta_path = path.with_extension("json");
    if meta_path.is_file() {
        mesh.apply_metadata(&MeshMetadata::load(&meta_path)?)
    } else {
        Ok(mesh)
    }
}

/// ASCII OBJ: only `v` and `f` records are read; polygons are fan-triangulated.
pub fn load_obj(path: impl AsRef<Path>, scale: f64) -> Result<Mesh> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let coords: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
                if coords.len() != 3 {
                    return Err(Error::parse(
                        path,
                        format!("line {}: vertex needs 3 coordinates", lineno + 1),
                    ));
                }
                vertices.push(Vec3::new(coords[0], coords[1], coords[2]) * scale);
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in it {
                    let first = tok.split('/').next().unwrap_or("");
                    let i: i64 = first
                        .parse()
                        .map_err(|e| Error::parse(path, format!("line {}: {e}", lineno + 1)))?;
                    let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                    if resolved < 0 {
                        return Err(Error::parse(path, format!("line {}: bad index {i}", lineno + 1)));
                    }
                    idx.push(resolved as u32);
                }
                if idx.len() < 3 {
                    return Err(Error::parse(
                        path,
                        format!("line {}: face needs 3 vertices", lineno + 1),
                    ));
                }
                for k in 1..idx.len() - 1 {
                    triangles.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Mesh::new(vertices, triangles).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_obj(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for v in &mesh.vertices {
        out.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
    }
    for t in &mesh.triangles {
        out.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
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

    fn size(self) -> usize {
        match self {
            Self::I8 | Self::U8 => 1,
            Self::I16 | Self::U16 => 2,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
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

enum PlyProperty {
    Scalar(String, PlyType),
    List(String, PlyType, PlyType),
}

struct PlyElement {
    name: String,
    count: usize,
    properties: Vec<PlyProperty>,
}

/// Binary little-endian PLY with `vertex` (x, y, z) and `face` (vertex index list) elements.
pub fn load_ply(path: impl AsRef<Path>, scale: f64) -> Result<Mesh> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let header_end = bytes
        .windows(11)
        .position(|w| w == b"end_header\n")
        .ok_or_else(|| Error::parse(path, "missing end_header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| Error::parse(path, "header is not UTF-8"))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(Error::parse(path, "not a PLY file"));
    }
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::parse(path, format!("unsupported PLY format {fmt}")));
                }
            }
            ["element", name, count] => elements.push(PlyElement {
                name: name.to_string(),
                count: count
                    .parse()
                    .map_err(|_| Error::parse(path, format!("bad element count {count}")))?,
                properties: Vec::new(),
            }),
            ["property", "list", ct, it, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, "property before element"))?;
                let ct = PlyType::parse(ct).ok_or_else(|| Error::parse(path, format!("bad type {ct}")))?;
                let it = PlyType::parse(it).ok_or_else(|| Error::parse(path, format!("bad type {it}")))?;
                el.properties.push(PlyProperty::List(name.to_string(), ct, it));
            }
            ["property", ty, name] => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| Error::parse(path, "property before element"))?;
                let ty = PlyType::parse(ty).ok_or_else(|| Error::parse(path, format!("bad type {ty}")))?;
                el.properties.push(PlyProperty::Scalar(name.to_string(), ty));
            }
            _ => {}
        }
    }

    let mut data = &bytes[header_end + 11..];
    let mut take = |n: usize| -> Result<&[u8]> {
        if data.len() < n {
            return Err(Error::parse(path, "truncated PLY body"));
        }
        let (head, tail) = data.split_at(n);
        data = tail;
        Ok(head)
    };
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for el in &elements {
        for _ in 0..el.count {
            let mut xyz = [0.0; 3];
            for prop in &el.properties {
                match prop {
                    PlyProperty::Scalar(name, ty) => {
                        let v = ty.read(take(ty.size())?);
                        match name.as_str() {
                            "x" => xyz[0] = v,
                            "y" => xyz[1] = v,
                            "z" => xyz[2] = v,
                            _ => {}
                        }
                    }
                    PlyProperty::List(name, ct, it) => {
                        let n = ct.read(take(ct.size())?) as usize;
                        let mut idx = Vec::with_capacity(n);
                        for _ in 0..n {
                            idx.push(it.read(take(it.size())?) as u32);
                        }
                        if el.name == "face" && (name == "vertex_indices" || name == "vertex_index") {
                            for k in 1..idx.len().saturating_sub(1) {
                                triangles.push([idx[0], idx[k], idx[k + 1]]);
                            }
                        }
                    }
                }
            }
            if el.name == "vertex" {
                vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]) * scale);
            }
        }
    }
    Mesh::new(vertices, triangles).map_err(|e| Error::parse(path, e.to_string()))
}

/// Writes a binary little-endian PLY (float xyz, uchar/int face lists).
pub fn write_ply(mesh: &Mesh, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )
    .expect("write to vec");
    for v in &mesh.vertices {
        for c in [v.x, v.y, v.z] {
            out.extend_from_slice(&(c as f32).to_le_bytes());
        }
    }
    for t in &mesh.triangles {
        out.push(3);
        for i in t {
            out.extend_from_slice(&(*i as i32).to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}
