//! Hybrid patch-classification + offset correspondences.
//!
//! A query image of side `G * patch` is split into a `G x G` grid. Cell
//! `(i, j)` has column `i` (x) and row `j` (y) and is stored at `j * G + i`.
//! Each cell carries a distribution over `G^2 + 1` classes: class `c < G^2`
//! names template patch `(c mod G, c / G)`, and class `G^2` (zero-based) is
//! "no match". The per-cell offset refines the location inside the template
//! patch, in patch units within `[-0.5, 0.5]`.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{backproject_at_depth, DepthMap, Intrinsics, Pose, Vec2};
use crate::mesh::Mesh;
use crate::template::rasterize;

/// Side of a square patch in pixels.
pub const PATCH: u32 = 16;

/// Depth agreement (meters) for a surface point to count as visible.
pub const VISIBILITY_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassTensor {
    grid: u32,
    probs: Vec<f64>,
}

impl ClassTensor {
    /// `probs` holds `G^2` cells of `G^2 + 1` probabilities each.
    pub fn new(grid: u32, probs: Vec<f64>) -> Result<Self> {
        let k = num_classes(grid);
        let cells = (grid * grid) as usize;
        if probs.len() != cells * k {
            return Err(Error::ShapeMismatch(format!(
                "{} probabilities for a {grid}x{grid} grid with {k} classes",
                probs.len()
            )));
        }
        for (cell, p) in probs.chunks_exact(k).enumerate() {
            if p.iter().any(|v| !(*v >= 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "cell {cell} has a negative probability"
                )));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidParameter(format!("cell {cell} sums to {sum}")));
            }
        }
        Ok(Self { grid, probs })
    }

    /// Each cell puts `1 - eps + eps / K` on its class and `eps / K` elsewhere.
    pub fn smoothed_one_hot(grid: u32, classes: &[usize], eps: f64) -> Result<Self> {
        let k = num_classes(grid);
        if classes.len() != (grid * grid) as usize {
            return Err(Error::ShapeMismatch(format!(
                "{} labels for {} cells",
                classes.len(),
                grid * grid
            )));
        }
        let base = eps / k as f64;
        let mut probs = vec![base; classes.len() * k];
        for (cell, &c) in classes.iter().enumerate() {
            if c >= k {
                return Err(Error::InvalidParameter(format!("class {c} out of range for K = {k}")));
            }
            probs[cell * k + c] += 1.0 - eps;
        }
        Ok(Self { grid, probs })
    }

    pub fn one_hot(grid: u32, classes: &[usize]) -> Result<Self> {
        Self::smoothed_one_hot(grid, classes, 0.0)
    }

    pub fn uniform(grid: u32) -> Self {
        let k = num_classes(grid);
        Self {
            grid,
            probs: vec![1.0 / k as f64; (grid * grid) as usize * k],
        }
    }

    pub fn grid(&self) -> u32 {
        self.grid
    }

    pub fn num_classes(&self) -> usize {
        num_classes(self.grid)
    }

    pub fn no_match_class(&self) -> usize {
        no_match_class(self.grid)
    }

    pub fn num_cells(&self) -> usize {
        (self.grid * self.grid) as usize
    }

    pub fn cell(&self, index: usize) -> &[f64] {
        let k = self.num_classes();
        &self.probs[index * k..(index + 1) * k]
    }

    pub fn cell_mut(&mut self, index: usize) -> &mut [f64] {
        let k = self.num_classes();
        &mut self.probs[index * k..(index + 1) * k]
    }

    /// Most probable class of a cell and its probability; ties go to the lowest index.
    pub fn argmax(&self, index: usize) -> (usize, f64) {
        let mut best = (0, f64::NEG_INFINITY);
        for (c, &p) in self.cell(index).iter().enumerate() {
            if p > best.1 {
                best = (c, p);
            }
        }
        best
    }
}

pub fn num_classes(grid: u32) -> usize {
    (grid * grid) as usize + 1
}

/// Zero-based index of the no-match class.
pub fn no_match_class(grid: u32) -> usize {
    (grid * grid) as usize
}

#[derive(Clone, Debug, PartialEq)]
pub struct OffsetTensor {
    grid: u32,
    offsets: Vec<Vec2>,
}

impl OffsetTensor {
    pub fn new(grid: u32, offsets: Vec<Vec2>) -> Result<Self> {
        if offsets.len() != (grid * grid) as usize {
            return Err(Error::ShapeMismatch(format!(
                "{} offsets for a {grid}x{grid} grid",
                offsets.len()
            )));
        }
        if offsets
            .iter()
            .any(|o| !(o.x >= -0.5 && o.x <= 0.5 && o.y >= -0.5 && o.y <= 0.5))
        {
            return Err(Error::InvalidParameter("offsets must lie in [-0.5, 0.5]".into()));
        }
        Ok(Self { grid, offsets })
    }

    pub fn zeros(grid: u32) -> Self {
        Self {
            grid,
            offsets: vec![Vec2::zeros(); (grid * grid) as usize],
        }
    }

    pub fn grid(&self) -> u32 {
        self.grid
    }

    pub fn get(&self, index: usize) -> Vec2 {
        self.offsets[index]
    }

    pub fn as_slice(&self) -> &[Vec2] {
        &self.offsets
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Match {
    pub query: Vec2,
    pub target: Vec2,
    pub weight: f64,
}

#[derive(Serialize, Deserialize)]
struct MatchLine {
    q: [f64; 2],
    t: [f64; 2],
    w: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MatchSet {
    pub matches: Vec<Match>,
    /// Side of the (square) query and template images.
    pub image_size: u32,
}

impl MatchSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    /// One `{"q":[x,y],"t":[x,y],"w":w}` object per line.
    pub fn write_json_lines<W: Write>(&self, mut out: W) -> Result<()> {
        for m in &self.matches {
            let line = MatchLine {
                q: [m.query.x, m.query.y],
                t: [m.target.x, m.target.y],
                w: m.weight,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n").map_err(|e| Error::io("<match stream>", e))?;
        }
        Ok(())
    }

    pub fn read_json_lines<R: BufRead>(input: R, image_size: u32) -> Result<Self> {
        let mut matches = Vec::new();
        for line in input.lines() {
            let line = line.map_err(|e| Error::io("<match stream>", e))?;
            if line.trim().is_empty() {
                continue;
            }
            let m: MatchLine = serde_json::from_str(&line)?;
            matches.push(Match {
                query: Vec2::from(m.q),
                target: Vec2::from(m.t),
                weight: m.w,
            });
        }
        Ok(Self { matches, image_size })
    }
}

/// Query patch center of cell `index`.
pub fn cell_center(index: usize, grid: u32, patch: u32) -> Vec2 {
    let g = grid as usize;
    let i = (index % g) as f64;
    let j = (index / g) as f64;
    Vec2::new((i + 0.5) * patch as f64, (j + 0.5) * patch as f64)
}

/// Template pixel named by a class and an offset.
pub fn class_to_target(class: usize, offset: &Vec2, grid: u32, patch: u32) -> Vec2 {
    let g = grid as usize;
    let p = patch as f64;
    Vec2::new(
        ((class % g) as f64 + 0.5 + offset.x) * p,
        ((class / g) as f64 + 0.5 + offset.y) * p,
    )
}

/// Semi-dense matches from the hybrid representation; no-match cells emit nothing.
pub fn decode_matches(c: &ClassTensor, u: &OffsetTensor, patch: u32) -> Result<MatchSet> {
    if c.grid() != u.grid() {
        return Err(Error::ShapeMismatch(format!(
            "class grid {} vs offset grid {}",
            c.grid(),
            u.grid()
        )));
    }
    let grid = c.grid();
    let no_match = c.no_match_class();
    let matches = (0..c.num_cells())
        .filter_map(|cell| {
            let (class, p) = c.argmax(cell);
            (class != no_match).then(|| Match {
                query: cell_center(cell, grid, patch),
                target: class_to_target(class, &u.get(cell), grid, patch),
                weight: p,
            })
        })
        .collect();
    Ok(MatchSet {
        matches,
        image_size: grid * patch,
    })
}

/// Sum of the per-cell maximum probability over cells not classified as no-match.
pub fn similarity_score(c: &ClassTensor) -> f64 {
    let no_match = c.no_match_class();
    (0..c.num_cells())
        .map(|cell| c.argmax(cell))
        .filter(|(class, _)| *class != no_match)
        .map(|(_, p)| p)
        .sum()
}

/// Index of the best score, lowest index on ties.
pub fn select_template(scores: &[f64]) -> Result<usize> {
    Ok(top_n(scores, 1)?[0])
}

/// The `n` best distinct indices by descending score; ties by lowest index.
pub fn top_n(scores: &[f64], n: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::Empty("score list"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n.max(1));
    Ok(order)
}

/// Ground-truth class and offset for a template pixel.
pub fn gt_class_and_offset(target: &Vec2, patch: u32, grid: u32) -> Result<(usize, Vec2)> {
    let side = (grid * patch) as f64;
    if !(target.x >= 0.0 && target.y >= 0.0 && target.x < side && target.y < side) {
        return Err(Error::OutOfBounds {
            u: target.x,
            v: target.y,
            width: grid * patch,
            height: grid * patch,
        });
    }
    let p = patch as f64;
    let sx = target.x / p;
    let sy = target.y / p;
    let class = sy.floor() as usize * grid as usize + sx.floor() as usize;
    Ok((class, Vec2::new(sx - sx.floor() - 0.5, sy - sy.floor() - 0.5)))
}

/// Per-cell ground truth between a query view and a template view.
#[derive(Clone, Debug, PartialEq)]
pub struct GtCorrespondences {
    pub grid: u32,
    pub patch: u32,
    pub matches: MatchSet,
    /// Ground-truth class per cell (`G^2` for no match).
    pub classes: Vec<usize>,
    /// Ground-truth offset per matched cell.
    pub offsets: Vec<Option<Vec2>>,
    /// Cells whose query patch center lies on the object.
    pub on_object: Vec<bool>,
}

impl GtCorrespondences {
    pub fn matched_cells(&self) -> usize {
        self.offsets.iter().filter(|o| o.is_some()).count()
    }

    pub fn offset_tensor(&self) -> OffsetTensor {
        OffsetTensor {
            grid: self.grid,
            offsets: self.offsets.iter().map(|o| o.unwrap_or_else(Vec2::zeros)).collect(),
        }
    }
}

/// One view of the object: rendered depth, camera pose and intrinsics.
#[derive(Clone, Copy, Debug)]
pub struct View<'a> {
    pub depth: &'a DepthMap,
    pub pose: &'a Pose,
    pub k: &'a Intrinsics,
}

/// Ground-truth correspondences from already rendered depth maps.
///
/// For each query patch center on the object, the visible surface point is
/// recovered from the query depth and projected into the template; the cell
/// is no-match when that point falls outside the template or is hidden there
/// (depth disagreement above [`VISIBILITY_TOL`]).
pub fn gt_correspondences_from_views(query: View<'_>, template: View<'_>, patch: u32) -> Result<GtCorrespondences> {
    let grid = query.depth.width / patch;
    if grid == 0 || query.depth.width != query.depth.height || template.depth.width != template.depth.height {
        return Err(Error::ShapeMismatch(
            "views must be square and at least one patch wide".into(),
        ));
    }
    if template.depth.width / patch != grid {
        return Err(Error::ShapeMismatch(format!(
            "query grid {grid} vs template grid {}",
            template.depth.width / patch
        )));
    }
    let cells = (grid * grid) as usize;
    let no_match = no_match_class(grid);
    let mut classes = vec![no_match; cells];
    let mut offsets = vec![None; cells];
    let mut on_object = vec![false; cells];
    let mut matches = Vec::new();
    let to_template = template.pose.compose(&query.pose.inverse());
    for cell in 0..cells {
        let q = cell_center(cell, grid, patch);
        let zq = query.depth.sample(&q);
        on_object[cell] = zq.is_some() || query.depth.at(&q) > 0.0;
        // creases and silhouettes have no single surface point to match
        let Some(zq) = zq else {
            continue;
        };
        let x_cam_t = to_template.transform(&query.k.unproject(&q, zq));
        let Some(t) = template.k.project(&x_cam_t) else {
            continue;
        };
        let Some(zt) = template.depth.sample(&t) else {
            continue;
        };
        if (zt - x_cam_t.z).abs() > VISIBILITY_TOL {
            continue;
        }
        let Ok((class, offset)) = gt_class_and_offset(&t, patch, grid) else {
            continue;
        };
        classes[cell] = class;
        offsets[cell] = Some(offset);
        matches.push(Match {
            query: q,
            target: t,
            weight: 1.0,
        });
    }
    Ok(GtCorrespondences {
        grid,
        patch,
        matches: MatchSet {
            matches,
            image_size: grid * patch,
        },
        classes,
        offsets,
        on_object,
    })
}

/// Renders both views of `mesh` and derives the ground-truth correspondences.
pub fn gt_correspondences(
    mesh: &Mesh,
    pose_q: &Pose,
    pose_t: &Pose,
    k_q: &Intrinsics,
    k_t: &Intrinsics,
    size: u32,
) -> Result<GtCorrespondences> {
    let dq = rasterize(mesh, pose_q, k_q, size, size);
    let dt = rasterize(mesh, pose_t, k_t, size, size);
    if dq.valid_count() == 0 || dt.valid_count() == 0 {
        return Err(Error::ObjectOutOfView);
    }
    gt_correspondences_from_views(
        View {
            depth: &dq,
            pose: pose_q,
            k: k_q,
        },
        View {
            depth: &dt,
            pose: pose_t,
            k: k_t,
        },
        PATCH,
    )
}

/// Model-frame point behind a template pixel: interpolated depth when the
/// neighborhood is planar, else the containing pixel's depth.
pub fn template_point(template: View<'_>, pixel: &Vec2) -> Option<crate::geom::Vec3> {
    let z = template
        .depth
        .sample(pixel)
        .or_else(|| Some(template.depth.at(pixel)).filter(|d| *d > 0.0))?;
    Some(backproject_at_depth(template.pose, template.k, pixel, z))
}
