//! Conforming triangulations of the hold-all square `Ω = (-1,1)²`.
//!
//! The inversion runs on a coarse mesh while synthetic data is generated on a
//! strictly finer one, so the same builder serves both. Meshes are immutable
//! after construction and safe to share across threads.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Half side length of the hold-all square.
pub const DOMAIN_HALF: f64 = 1.0;
/// Area of the hold-all square `(-1,1)²`.
pub const DOMAIN_AREA: f64 = 4.0;

/// How `build_square_mesh` places interior vertices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeshMode {
    /// Uniform grid with alternating cell diagonals.
    Structured,
    /// Structured grid with interior vertices jittered by at most `0.2·h`,
    /// to break the alignment between grid diagonals and level-set
    /// interfaces. Deterministic: the jitter seed is derived from `n`.
    Perturbed,
}

/// One edge of `∂Ω` together with the triangle it belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BoundaryEdge {
    /// Vertex indices, oriented counterclockwise around the domain
    /// (the interior lies to the left of `v[0] → v[1]`).
    pub v: [usize; 2],
    /// Index of the unique triangle containing this edge.
    pub tri: usize,
}

/// Per-element geometry: area and the constant gradients of the three
/// barycentric basis functions.
#[derive(Debug, Clone, Copy)]
pub struct ElementGeometry {
    pub area: f64,
    /// `grad[i]` is the gradient of the barycentric coordinate attached to
    /// local vertex `i`; the three gradients sum to zero.
    pub grad: [[f64; 2]; 3],
}

/// A conforming triangulation of the hold-all square.
#[derive(Debug, Clone)]
pub struct TriMesh {
    /// Vertex coordinates.
    pub vertices: Vec<[f64; 2]>,
    /// Vertex-index triples, counterclockwise.
    pub triangles: Vec<[usize; 3]>,
    /// Edges of `∂Ω`, each with its parent triangle.
    pub boundary_edges: Vec<BoundaryEdge>,
    /// Flag per vertex: lies on `∂Ω`.
    pub vertex_is_boundary: Vec<bool>,
    /// Triangles incident to each vertex.
    vertex_tris: Vec<Vec<u32>>,
    /// Uniform background grid binning triangles for point location.
    bins: Bins,
}

#[derive(Debug, Clone)]
struct Bins {
    per_side: usize,
    cells: Vec<Vec<u32>>,
}

fn cross(a: [f64; 2], b: [f64; 2]) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

fn sub(a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    [a[0] - b[0], a[1] - b[1]]
}

impl TriMesh {
    /// Assembles a mesh from raw arrays, deriving boundary topology and the
    /// point-location structure. Fails if any triangle is degenerate or the
    /// edge topology is not manifold.
    pub fn from_raw(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        let nv = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= nv {
                    return Err(Error::MeshCorruption(format!(
                        "triangle {t} references vertex {v} out of {nv}"
                    )));
                }
            }
            let area = signed_area(&vertices, tri);
            if area <= 0.0 {
                return Err(Error::MeshCorruption(format!(
                    "triangle {t} has non-positive area {area:e}"
                )));
            }
        }

        // Edge census: interior edges must be shared by exactly 2 triangles,
        // boundary edges by exactly 1.
        let mut edge_count: HashMap<(usize, usize), (u8, usize, [usize; 2])> = HashMap::new();
        for (t, tri) in triangles.iter().enumerate() {
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                let key = (a.min(b), a.max(b));
                let entry = edge_count.entry(key).or_insert((0, t, [a, b]));
                entry.0 += 1;
                if entry.0 == 1 {
                    *entry = (1, t, [a, b]);
                }
            }
        }
        let mut boundary_edges = Vec::new();
        for (_, (count, t, dir)) in edge_count.iter() {
            match count {
                1 => boundary_edges.push(BoundaryEdge { v: *dir, tri: *t }),
                2 => {}
                c => {
                    return Err(Error::MeshCorruption(format!(
                        "edge {dir:?} shared by {c} triangles"
                    )))
                }
            }
        }
        // Deterministic ordering regardless of hash iteration.
        boundary_edges.sort_by_key(|e| (e.v[0], e.v[1]));

        let mut vertex_is_boundary = vec![false; nv];
        for e in &boundary_edges {
            vertex_is_boundary[e.v[0]] = true;
            vertex_is_boundary[e.v[1]] = true;
        }

        let mut vertex_tris = vec![Vec::new(); nv];
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                vertex_tris[v].push(t as u32);
            }
        }

        let bins = Bins::build(&vertices, &triangles);

        Ok(TriMesh {
            vertices,
            triangles,
            boundary_edges,
            vertex_is_boundary,
            vertex_tris,
            bins,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    /// Effective grid spacing `h = sqrt(2·|Ω| / n_triangles)`; equals `2/n`
    /// for the structured mesh with `n` subdivisions per side.
    pub fn h(&self) -> f64 {
        (2.0 * DOMAIN_AREA / self.n_triangles() as f64).sqrt()
    }

    /// Coordinates of the three corners of triangle `t`.
    pub fn tri_coords(&self, t: usize) -> [[f64; 2]; 3] {
        let [a, b, c] = self.triangles[t];
        [self.vertices[a], self.vertices[b], self.vertices[c]]
    }

    /// Area and barycentric basis gradients of triangle `t`.
    pub fn element_geometry(&self, t: usize) -> Result<ElementGeometry> {
        let p = self.tri_coords(t);
        let area2 = cross(sub(p[1], p[0]), sub(p[2], p[0]));
        if area2 <= 0.0 {
            return Err(Error::MeshCorruption(format!(
                "triangle {t} degenerate (2·area = {area2:e})"
            )));
        }
        let grad = |u: [f64; 2], v: [f64; 2]| {
            let e = sub(u, v);
            [-e[1] / area2, e[0] / area2]
        };
        Ok(ElementGeometry {
            area: 0.5 * area2,
            grad: [grad(p[2], p[1]), grad(p[0], p[2]), grad(p[1], p[0])],
        })
    }

    /// Triangles incident to vertex `v`.
    pub fn tris_of_vertex(&self, v: usize) -> &[u32] {
        &self.vertex_tris[v]
    }

    /// Locates the triangle containing `point` (clamped to `Ω̄`) and returns
    /// its index with the barycentric coordinates of the clamped point.
    pub fn locate(&self, point: [f64; 2]) -> (usize, [f64; 3]) {
        let p = [
            point[0].clamp(-DOMAIN_HALF, DOMAIN_HALF),
            point[1].clamp(-DOMAIN_HALF, DOMAIN_HALF),
        ];
        const TOL: f64 = 1e-10;
        let m = self.bins.per_side;
        let (cx, cy) = self.bins.cell_of(p);
        // Search the home cell first, then widen ring by ring. The bins hold
        // every triangle whose bounding box overlaps the cell, so a hit in
        // ring 0 is the common case.
        for ring in 0..m.max(1) {
            let mut best: Option<(usize, [f64; 3], f64)> = None;
            for gy in cy.saturating_sub(ring)..=(cy + ring).min(m - 1) {
                for gx in cx.saturating_sub(ring)..=(cx + ring).min(m - 1) {
                    let on_ring = gx == cx.saturating_sub(ring)
                        || gx == (cx + ring).min(m - 1)
                        || gy == cy.saturating_sub(ring)
                        || gy == (cy + ring).min(m - 1);
                    if ring > 0 && !on_ring {
                        continue;
                    }
                    for &t in &self.bins.cells[gy * m + gx] {
                        let t = t as usize;
                        let bc = self.barycentric(t, p);
                        let worst = bc[0].min(bc[1]).min(bc[2]);
                        if worst >= -TOL {
                            return (t, clamp_bary(bc));
                        }
                        match best {
                            Some((_, _, w)) if w >= worst => {}
                            _ => best = Some((t, bc, worst)),
                        }
                    }
                }
            }
            // Accept a slightly-outside match before widening further; this
            // covers roundoff on perturbed meshes.
            if let Some((t, bc, w)) = best {
                if w >= -1e-6 {
                    return (t, clamp_bary(bc));
                }
            }
        }
        // Fallback: closest triangle incident to the nearest vertex.
        let mut nearest = 0usize;
        let mut dmin = f64::INFINITY;
        for (v, q) in self.vertices.iter().enumerate() {
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2);
            if d < dmin {
                dmin = d;
                nearest = v;
            }
        }
        let t = self.vertex_tris[nearest][0] as usize;
        (t, clamp_bary(self.barycentric(t, p)))
    }

    /// Barycentric coordinates of `p` with respect to triangle `t`.
    pub fn barycentric(&self, t: usize, p: [f64; 2]) -> [f64; 3] {
        let c = self.tri_coords(t);
        let area2 = cross(sub(c[1], c[0]), sub(c[2], c[0]));
        let l0 = cross(sub(c[2], c[1]), sub(p, c[1])) / area2;
        let l1 = cross(sub(c[0], c[2]), sub(p, c[2])) / area2;
        [l0, l1, 1.0 - l0 - l1]
    }

    /// Verifies every structural invariant; used by tests and `check`.
    pub fn validate(&self) -> Result<()> {
        let mut total = 0.0;
        for t in 0..self.n_triangles() {
            total += self.element_geometry(t)?.area;
        }
        if ((total - DOMAIN_AREA) / DOMAIN_AREA).abs() > 1e-12 {
            return Err(Error::MeshCorruption(format!(
                "triangle areas sum to {total}, expected {DOMAIN_AREA}"
            )));
        }
        // Boundary edges must close into loops: every boundary vertex has
        // exactly one outgoing and one incoming boundary edge.
        let mut out_deg: HashMap<usize, usize> = HashMap::new();
        let mut in_deg: HashMap<usize, usize> = HashMap::new();
        for e in &self.boundary_edges {
            *out_deg.entry(e.v[0]).or_insert(0) += 1;
            *in_deg.entry(e.v[1]).or_insert(0) += 1;
        }
        for (&v, &d) in &out_deg {
            if d != 1 || in_deg.get(&v) != Some(&1) {
                return Err(Error::MeshCorruption(format!(
                    "boundary vertex {v} has degree out={d}, in={:?}",
                    in_deg.get(&v)
                )));
            }
        }
        Ok(())
    }
}

fn signed_area(vertices: &[[f64; 2]], tri: &[usize; 3]) -> f64 {
    let p = [vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]];
    0.5 * cross(sub(p[1], p[0]), sub(p[2], p[0]))
}

fn clamp_bary(bc: [f64; 3]) -> [f64; 3] {
    let c = [bc[0].max(0.0), bc[1].max(0.0), bc[2].max(0.0)];
    let s = c[0] + c[1] + c[2];
    [c[0] / s, c[1] / s, c[2] / s]
}

impl Bins {
    fn build(vertices: &[[f64; 2]], triangles: &[[usize; 3]]) -> Bins {
        let per_side = (((triangles.len() as f64) / 2.0).sqrt().ceil() as usize).clamp(1, 512);
        let mut cells = vec![Vec::new(); per_side * per_side];
        let w = 2.0 * DOMAIN_HALF / per_side as f64;
        for (t, tri) in triangles.iter().enumerate() {
            let xs = tri.map(|v| vertices[v][0]);
            let ys = tri.map(|v| vertices[v][1]);
            let to_cell = |v: f64| -> usize {
                (((v + DOMAIN_HALF) / w).floor() as isize).clamp(0, per_side as isize - 1) as usize
            };
            let (x0, x1) = (
                to_cell(xs.iter().cloned().fold(f64::INFINITY, f64::min)),
                to_cell(xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
            );
            let (y0, y1) = (
                to_cell(ys.iter().cloned().fold(f64::INFINITY, f64::min)),
                to_cell(ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
            );
            for gy in y0..=y1 {
                for gx in x0..=x1 {
                    cells[gy * per_side + gx].push(t as u32);
                }
            }
        }
        Bins { per_side, cells }
    }

    fn cell_of(&self, p: [f64; 2]) -> (usize, usize) {
        let w = 2.0 * DOMAIN_HALF / self.per_side as f64;
        let clamp = |v: f64| -> usize {
            (((v + DOMAIN_HALF) / w).floor() as isize).clamp(0, self.per_side as isize - 1)
                as usize
        };
        (clamp(p[0]), clamp(p[1]))
    }
}

/// Builds the `n × n` triangulation of `(-1,1)²`: `(n+1)²` vertices and
/// `2n²` triangles, cell diagonals alternating in a checkerboard pattern.
pub fn build_square_mesh(n: usize, mode: MeshMode) -> Result<TriMesh> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "subdivision count n must be at least 1".into(),
        ));
    }
    let h = 2.0 * DOMAIN_HALF / n as f64;
    let mut vertices = Vec::with_capacity((n + 1) * (n + 1));
    for iy in 0..=n {
        for ix in 0..=n {
            vertices.push([
                -DOMAIN_HALF + h * ix as f64,
                -DOMAIN_HALF + h * iy as f64,
            ]);
        }
    }
    if mode == MeshMode::Perturbed {
        // Fixed derived seed keeps perturbed meshes reproducible run to run.
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_u64 ^ (n as u64));
        let amp = 0.2 * h / std::f64::consts::SQRT_2;
        for iy in 1..n {
            for ix in 1..n {
                let v = iy * (n + 1) + ix;
                vertices[v][0] += rng.gen_range(-amp..=amp);
                vertices[v][1] += rng.gen_range(-amp..=amp);
            }
        }
    }
    let mut triangles = Vec::with_capacity(2 * n * n);
    for iy in 0..n {
        for ix in 0..n {
            let a = iy * (n + 1) + ix;
            let b = a + 1;
            let c = a + n + 2;
            let d = a + n + 1;
            if (ix + iy) % 2 == 0 {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            } else {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            }
        }
    }
    TriMesh::from_raw(vertices, triangles)
}

/// Splits every triangle into four congruent children through the edge
/// midpoints. Vertex and triangle counts follow `V' = V + E`, `T' = 4T`.
pub fn refine_uniform(mesh: &TriMesh) -> Result<TriMesh> {
    let mut vertices = mesh.vertices.clone();
    let mut midpoint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut mid = |a: usize, b: usize, vertices: &mut Vec<[f64; 2]>| -> usize {
        let key = (a.min(b), a.max(b));
        *midpoint.entry(key).or_insert_with(|| {
            let pa = vertices[a];
            let pb = vertices[b];
            vertices.push([0.5 * (pa[0] + pb[0]), 0.5 * (pa[1] + pb[1])]);
            vertices.len() - 1
        })
    };
    let mut triangles = Vec::with_capacity(4 * mesh.n_triangles());
    for tri in &mesh.triangles {
        let [a, b, c] = *tri;
        let mab = mid(a, b, &mut vertices);
        let mbc = mid(b, c, &mut vertices);
        let mca = mid(c, a, &mut vertices);
        triangles.push([a, mab, mca]);
        triangles.push([mab, b, mbc]);
        triangles.push([mca, mbc, c]);
        triangles.push([mab, mbc, mca]);
    }
    TriMesh::from_raw(vertices, triangles)
}
