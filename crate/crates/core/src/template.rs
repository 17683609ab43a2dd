//! Template generation: 42 out-of-plane viewpoints on a once-subdivided
//! icosahedron, rendered as depth maps by a software z-buffer rasterizer.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{DepthMap, Intrinsics, Mat3, Pose, Vec2, Vec3};
use crate::mesh::{icosahedron, subdivide_sphere, Mesh};

/// Number of template viewpoints.
pub const NUM_TEMPLATES: usize = 42;

/// Rendered surfaces closer than this are discarded.
const NEAR: f64 = 1e-6;

/// The 42 viewing directions: the 12 icosahedron vertices followed by the 30
/// normalized edge midpoints of its one-step subdivision.
pub fn icosphere_viewpoints() -> Vec<Vec3> {
    let (v, f) = icosahedron();
    let (v, _) = subdivide_sphere(&v, &f);
    debug_assert_eq!(v.len(), NUM_TEMPLATES);
    v
}

/// Smallest angle (radians) between viewpoints joined by an edge of the
/// subdivided icosahedron.
pub fn min_edge_angle() -> f64 {
    let (v, f) = icosahedron();
    let (v, f) = subdivide_sphere(&v, &f);
    f.iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| v[a as usize].dot(&v[b as usize]).clamp(-1.0, 1.0).acos())
        .fold(f64::INFINITY, f64::min)
}

/// Camera looking at the model origin from `direction * radius`.
///
/// The image "up" follows world +y; directions within ~8° of the y axis use
/// world +x instead.
pub fn look_at_pose(direction: &Vec3, radius: f64) -> Pose {
    let dir = direction.normalize();
    let eye = dir * radius;
    let forward = -dir;
    let up = if dir.y.abs() > 0.99 { Vec3::x() } else { Vec3::y() };
    let down = -up;
    let x = down.cross(&forward).normalize();
    let y = forward.cross(&x);
    let rotation = Mat3::from_rows(&[x.transpose(), y.transpose(), forward.transpose()]);
    Pose::new(rotation, -(rotation * eye))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Viewpoint {
    pub direction: Vec3,
    pub camera_pose: Pose,
    pub radius: f64,
}

impl Viewpoint {
    pub fn new(direction: Vec3, radius: f64) -> Self {
        let direction = direction.normalize();
        Self {
            camera_pose: look_at_pose(&direction, radius),
            direction,
            radius,
        }
    }
}

/// Geometric payload of one rendered template.
#[derive(Clone, Debug, PartialEq)]
pub struct Template {
    pub index: usize,
    pub viewpoint: Viewpoint,
    pub depth: DepthMap,
    pub intrinsics: Intrinsics,
    /// Square image side (pixels).
    pub size: u32,
}

impl Template {
    pub fn pose(&self) -> &Pose {
        &self.viewpoint.camera_pose
    }

    /// True exactly where the depth is positive.
    pub fn mask(&self) -> Vec<bool> {
        self.depth.mask()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TemplateSet {
    pub mesh_id: String,
    pub templates: Vec<Template>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TemplateConfig {
    pub size: u32,
    pub focal: f64,
    /// Camera distance (meters); derived from `fill` when absent.
    pub distance: Option<f64>,
    /// Fraction of the crop spanned by the object's bounding sphere.
    pub fill: f64,
}

impl Default for TemplateConfig {
    fn default() -> Self {
        Self {
            size: 224,
            focal: 280.0,
            distance: None,
            fill: 0.9,
        }
    }
}

impl TemplateConfig {
    pub fn intrinsics(&self) -> Intrinsics {
        let c = self.size as f64 / 2.0;
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: c,
            cy: c,
        }
    }

    /// Distance at which a sphere of `radius` spans `fill` of the crop.
    pub fn camera_distance(&self, radius: f64) -> f64 {
        self.distance.unwrap_or_else(|| {
            let half = self.fill * self.size as f64 / 2.0;
            radius * (1.0 + (self.focal / half).powi(2)).sqrt()
        })
    }
}

#[inline]
fn edge(a: &Vec2, b: &Vec2, p: &Vec2) -> f64 {
    (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
}

#[inline]
fn is_top_left(a: &Vec2, b: &Vec2) -> bool {
    let dx = b.x - a.x;
    let dy = b.y - a.y;
    (dy == 0.0 && dx > 0.0) || dy < 0.0
}

#[inline]
fn covers(w: f64, top_left: bool) -> bool {
    w > 0.0 || (w == 0.0 && top_left)
}

/// Z-buffer depth of the nearest surface at every pixel center.
///
/// Coverage is tested at pixel centers with a top-left fill rule; depth is
/// the exact ray/triangle-plane intersection. Triangles touching the near
/// plane are skipped.
pub fn rasterize(mesh: &Mesh, pose: &Pose, k: &Intrinsics, width: u32, height: u32) -> DepthMap {
    let mut depth = DepthMap::zeros(width, height);
    let cam: Vec<Vec3> = mesh.vertices.iter().map(|v| pose.transform(v)).collect();
    for tri in &mesh.triangles {
        let mut p = [cam[tri[0] as usize], cam[tri[1] as usize], cam[tri[2] as usize]];
        if p.iter().any(|v| v.z <= NEAR) {
            continue;
        }
        let mut s = [
            k.project(&p[0]).unwrap(),
            k.project(&p[1]).unwrap(),
            k.project(&p[2]).unwrap(),
        ];
        let area = edge(&s[0], &s[1], &s[2]);
        if area.abs() < 1e-14 {
            continue;
        }
        if area < 0.0 {
            s.swap(1, 2);
            p.swap(1, 2);
        }
        let min_x = s.iter().map(|v| v.x).fold(f64::INFINITY, f64::min);
        let max_x = s.iter().map(|v| v.x).fold(f64::NEG_INFINITY, f64::max);
        let min_y = s.iter().map(|v| v.y).fold(f64::INFINITY, f64::min);
        let max_y = s.iter().map(|v| v.y).fold(f64::NEG_INFINITY, f64::max);
        let c0 = (min_x - 0.5).ceil().max(0.0);
        let c1 = (max_x - 0.5).floor().min(width as f64 - 1.0);
        let r0 = (min_y - 0.5).ceil().max(0.0);
        let r1 = (max_y - 0.5).floor().min(height as f64 - 1.0);
        if c0 > c1 || r0 > r1 {
            continue;
        }
        let tl = [
            is_top_left(&s[1], &s[2]),
            is_top_left(&s[2], &s[0]),
            is_top_left(&s[0], &s[1]),
        ];
        let normal = (p[1] - p[0]).cross(&(p[2] - p[0]));
        let plane_d = normal.dot(&p[0]);
        for row in r0 as u32..=r1 as u32 {
            let py = row as f64 + 0.5;
            for col in c0 as u32..=c1 as u32 {
                let px = Vec2::new(col as f64 + 0.5, py);
                if !(covers(edge(&s[1], &s[2], &px), tl[0])
                    && covers(edge(&s[2], &s[0], &px), tl[1])
                    && covers(edge(&s[0], &s[1], &px), tl[2]))
                {
                    continue;
                }
                let ray = Vec3::new((px.x - k.cx) / k.fx, (px.y - k.cy) / k.fy, 1.0);
                let denom = normal.dot(&ray);
                if denom.abs() < 1e-300 {
                    continue;
                }
                let z = plane_d / denom;
                if !(z > NEAR) {
                    continue;
                }
                let i = depth.index(col, row);
                let cur = depth.values[i];
                if cur == 0.0 || z < cur {
                    depth.values[i] = z;
                }
            }
        }
    }
    depth
}

/// Renders one template per icosphere viewpoint.
pub fn build_templates(mesh: &Mesh, mesh_id: &str, cfg: &TemplateConfig) -> Result<TemplateSet> {
    if cfg.size == 0 {
        return Err(Error::InvalidParameter("template size must be > 0".into()));
    }
    if !(cfg.focal > 0.0) || !(cfg.fill > 0.0) {
        return Err(Error::InvalidParameter("template focal and fill must be > 0".into()));
    }
    let k = cfg.intrinsics();
    let radius = cfg.camera_distance(mesh.bounding_radius());
    let templates = icosphere_viewpoints()
        .into_par_iter()
        .enumerate()
        .map(|(index, dir)| {
            let viewpoint = Viewpoint::new(dir, radius);
            let depth = rasterize(mesh, &viewpoint.camera_pose, &k, cfg.size, cfg.size);
            Template {
                index,
                viewpoint,
                depth,
                intrinsics: k,
                size: cfg.size,
            }
        })
        .collect();
    Ok(TemplateSet {
        mesh_id: mesh_id.to_string(),
        templates,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateIndexEntry {
    index: usize,
    direction: [f64; 3],
    radius: f64,
    camera_pose: Pose,
    intrinsics: Intrinsics,
    size: u32,
    depth_file: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateIndex {
    mesh_id: String,
    templates: Vec<TemplateIndexEntry>,
}

/// Raw depth file: `width: u32 LE`, `height: u32 LE`, then `f32 LE` row-major.
pub fn write_depth_file(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::with_capacity(8 + depth.len() * 4);
    out.extend_from_slice(&depth.width.to_le_bytes());
    out.extend_from_slice(&depth.height.to_le_bytes());
    for v in &depth.values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_depth_file(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::parse(path, "depth file shorter than its header"));
    }
    let width = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let height = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let n = width as usize * height as usize;
    if bytes.len() != 8 + 4 * n {
        return Err(Error::parse(
            path,
            format!(
                "expected {} bytes for {width}x{height}, found {}",
                8 + 4 * n,
                bytes.len()
            ),
        ));
    }
    let values = bytes[8..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    DepthMap::from_values(width, height, values).map_err(|e| Error::parse(path, e.to_string()))
}

impl TemplateSet {
    /// Writes `index.json` and one `template_NNN.depth` file per template.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut entries = Vec::with_capacity(self.templates.len());
        for t in &self.templates {
            let name = format!("template_{:03}.depth", t.index);
            write_depth_file(&t.depth, dir.join(&name))?;
            entries.push(TemplateIndexEntry {
                index: t.index,
                direction: [
                    t.viewpoint.direction.x,
                    t.viewpoint.direction.y,
                    t.viewpoint.direction.z,
                ],
                radius: t.viewpoint.radius,
                camera_pose: t.viewpoint.camera_pose,
                intrinsics: t.intrinsics,
                size: t.size,
                depth_file: name,
            });
        }
        let index = TemplateIndex {
            mesh_id: self.mesh_id.clone(),
            templates: entries,
        };
        let path = dir.join("index.json");
        let text = serde_json::to_string_pretty(&index)?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("index.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: TemplateIndex = serde_json::from_str(&text).map_err(|e| Error::parse(&path, e.to_string()))?;
        let templates = index
            .templates
            .into_iter()
            .map(|e| {
                Ok(Template {
                    index: e.index,
                    viewpoint: Viewpoint {
                        direction: Vec3::from(e.direction),
                        camera_pose: e.camera_pose,
                        radius: e.radius,
                    },
                    depth: read_depth_file(dir.join(&e.depth_file))?,
                    intrinsics: e.intrinsics,
                    size: e.size,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            mesh_id: index.mesh_id,
            templates,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::{cube, icosphere};

    fn angle(a: &Vec3, b: &Vec3) -> f64 {
        a.dot(b).clamp(-1.0, 1.0).acos()
    }

    #[test]
    fn forty_two_unit_directions() {
        let v = icosphere_viewpoints();
        assert_eq!(v.len(), 42);
        assert_eq!(icosahedron().0.len(), 12);
        for d in &v {
            assert!((d.norm() - 1.0).abs() < 1e-12);
        }
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                assert!((v[i] - v[j]).norm() > 1e-6);
            }
        }
    }

    #[test]
    fn edge_angle_matches_brute_force_minimum() {
        let v = icosphere_viewpoints();
        let mut brute = f64::INFINITY;
        for i in 0..v.len() {
            for j in i + 1..v.len() {
                brute = brute.min(angle(&v[i], &v[j]));
            }
        }
        assert!((min_edge_angle() - brute).abs() < 1e-12);
    }

    #[test]
    fn viewpoint_gap_regularity() {
        let v = icosphere_viewpoints();
        // nearest-neighbor angle per direction
        let nn: Vec<f64> = (0..v.len())
            .map(|i| {
                (0..v.len())
                    .filter(|&j| j != i)
                    .map(|j| angle(&v[i], &v[j]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let min = nn.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = nn.iter().cloned().fold(0.0, f64::max);
        assert!(max < 2.0 * min);
    }

    #[test]
    fn look_at_points_z_axis_at_origin() {
        for d in icosphere_viewpoints() {
            let pose = look_at_pose(&d, 2.0);
            assert!(pose.is_valid(1e-12));
            let origin = pose.transform(&Vec3::zeros());
            assert!(origin.x.abs() < 1e-12 && origin.y.abs() < 1e-12);
            assert!((origin.z - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn planar_triangle_depth() {
        let mesh = Mesh::new(
            vec![
                Vec3::new(-1.0, -1.0, 1.0),
                Vec3::new(1.0, -1.0, 1.0),
                Vec3::new(0.0, 1.0, 1.0),
            ],
            vec![[0, 1, 2]],
        )
        .unwrap();
        let k = Intrinsics::new(10.0, 10.0, 5.0, 5.0).unwrap();
        let d = rasterize(&mesh, &Pose::identity(), &k, 10, 10);
        assert_eq!(d.get(5, 5), 1.0);
        for v in &d.values {
            assert!(*v == 0.0 || (*v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn sphere_min_depth_converges() {
        let k = Intrinsics::new(200.0, 200.0, 64.0, 64.0).unwrap();
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 3.0));
        let mut prev = f64::INFINITY;
        for level in 1..=3 {
            let d = rasterize(&icosphere(1.0, level), &pose, &k, 128, 128);
            let min = d
                .values
                .iter()
                .cloned()
                .filter(|v| *v > 0.0)
                .fold(f64::INFINITY, f64::min);
            assert!(min >= 2.0 - 1e-12);
            assert!(min <= prev + 1e-12);
            prev = min;
        }
        assert!((prev - 2.0).abs() < 1e-2);
    }

    #[test]
    fn farther_object_covers_fewer_pixels() {
        let k = Intrinsics::new(100.0, 100.0, 32.0, 32.0).unwrap();
        let mesh = cube(1.0);
        let near = rasterize(&mesh, &Pose::from_translation(Vec3::new(0.0, 0.0, 3.0)), &k, 64, 64);
        let far = rasterize(&mesh, &Pose::from_translation(Vec3::new(0.0, 0.0, 6.0)), &k, 64, 64);
        assert!(far.valid_count() < near.valid_count());
    }

    #[test]
    fn shared_edge_pixels_are_not_lost() {
        // a square made of two triangles must cover a solid block
        let k = Intrinsics::new(16.0, 16.0, 8.0, 8.0).unwrap();
        let d = rasterize(
            &cube(1.0),
            &Pose::from_translation(Vec3::new(0.0, 0.0, 2.5)),
            &k,
            16,
            16,
        );
        let covered: Vec<(u32, u32)> = (0..16)
            .flat_map(|r| (0..16).map(move |c| (c, r)))
            .filter(|&(c, r)| d.get(c, r) > 0.0)
            .collect();
        let (cmin, cmax) = (
            covered.iter().map(|p| p.0).min().unwrap(),
            covered.iter().map(|p| p.0).max().unwrap(),
        );
        let (rmin, rmax) = (
            covered.iter().map(|p| p.1).min().unwrap(),
            covered.iter().map(|p| p.1).max().unwrap(),
        );
        assert_eq!(covered.len() as u32, (cmax - cmin + 1) * (rmax - rmin + 1));
    }

    #[test]
    fn masked_depth_lies_on_surface() {
        // backprojected depth within 1e-6 of the nearest cube face plane
        let mesh = cube(0.1);
        let pose = Pose::from_axis_angle(Vec3::new(0.3, -0.5, 0.2), Vec3::new(0.01, 0.0, 0.4));
        let k = Intrinsics::new(300.0, 300.0, 32.0, 32.0).unwrap();
        let d = rasterize(&mesh, &pose, &k, 64, 64);
        assert!(d.valid_count() > 100);
        for i in 0..d.len() {
            if d.values[i] > 0.0 {
                let x = crate::geom::backproject(&pose, &k, &d, &d.pixel_center(i)).unwrap();
                let face_dist = x.iter().map(|c| (c.abs() - 0.05).abs()).fold(f64::INFINITY, f64::min);
                assert!(face_dist < 1e-6, "off-surface by {face_dist}");
                assert!(x.amax() < 0.05 + 1e-6);
            }
        }
    }

    #[test]
    fn templates_cover_every_view_and_are_deterministic() {
        let mesh = cube(0.06);
        let cfg = TemplateConfig {
            size: 64,
            focal: 80.0,
            ..Default::default()
        };
        let a = build_templates(&mesh, "cube", &cfg).unwrap();
        let b = build_templates(&mesh, "cube", &cfg).unwrap();
        assert_eq!(a.templates.len(), 42);
        for (ta, tb) in a.templates.iter().zip(&b.templates) {
            assert!(ta.depth.valid_count() > 0);
            assert_eq!(ta.mask().iter().filter(|m| **m).count(), ta.depth.valid_count());
            let bits_a: Vec<u64> = ta.depth.values.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.depth.values.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b);
        }
    }

    #[test]
    fn template_set_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TemplateConfig {
            size: 32,
            focal: 40.0,
            ..Default::default()
        };
        let set = build_templates(&cube(0.06), "cube", &cfg).unwrap();
        set.save(dir.path()).unwrap();
        let back = TemplateSet::load(dir.path()).unwrap();
        assert_eq!(back.templates.len(), 42);
        for (a, b) in set.templates.iter().zip(&back.templates) {
            assert_eq!(a.viewpoint.camera_pose, b.viewpoint.camera_pose);
            for (x, y) in a.depth.values.iter().zip(&b.depth.values) {
                assert_eq!(*x as f32 as f64, *y);
            }
        }
    }
}
