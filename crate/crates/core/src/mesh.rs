//! Conforming triangulations of rectangles with adaptive bisection
//! refinement and inter-mesh field transfer.
//!
//! Cells are stored as `[v0, v1, v2]` in counter-clockwise order. The
//! refinement edge of a cell is `(v0, v1)` and `v2` is its newest vertex;
//! bisection inserts the midpoint of `(v0, v1)` and hands the two halves
//! `(v2, v0, m)` and `(v1, v2, m)` down with `m` as their newest vertex.
//! Marked refinement propagates to a conforming closure before any cell
//! is split, so the result never contains hanging nodes.

use crate::error::{Error, Result};
use crate::fem::{self, NodalField};
use crate::linalg;

/// Axis-aligned rectangle.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl Rect {
    pub fn area(&self) -> f64 {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

/// An edge of the triangulation with its one or two adjacent cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Edge {
    /// Node ids, `nodes[0] < nodes[1]`.
    pub nodes: [usize; 2],
    pub cells: [Option<usize>; 2],
}

impl Edge {
    pub fn is_boundary(&self) -> bool {
        self.cells[1].is_none()
    }
}

#[derive(Debug, Clone)]
pub struct Mesh {
    nodes: Vec<[f64; 2]>,
    cells: Vec<[usize; 3]>,
    edges: Vec<Edge>,
    generation: u32,
    parent_map: Vec<usize>,
    adjacency: Vec<Vec<usize>>,
}

/// Marking policy for adaptive refinement.
#[derive(Debug, Clone, Copy)]
pub struct RefinePolicy {
    /// Dörfler fraction in (0, 1].
    pub theta_mark: f64,
    /// Smallest admissible cell volume.
    pub v_min: f64,
    /// Largest admissible cell volume.
    pub v_max: f64,
}

impl RefinePolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_mark > 0.0 && self.theta_mark <= 1.0) {
            return Err(Error::invalid(format!(
                "theta_mark must lie in (0, 1], got {}",
                self.theta_mark
            )));
        }
        if !(self.v_min > 0.0 && self.v_min < self.v_max) {
            return Err(Error::invalid(format!(
                "cell volume bounds must satisfy 0 < v_min < v_max, got {} and {}",
                self.v_min, self.v_max
            )));
        }
        Ok(())
    }
}

/// Fraction of the mean indicator below which a cell becomes a
/// coarsening candidate.
const COARSEN_FRACTION: f64 = 0.05;

/// Barycentric tolerance for point location.
const LOCATE_TOL: f64 = 1e-10;

impl Mesh {
    fn finalize(
        nodes: Vec<[f64; 2]>,
        cells: Vec<[usize; 3]>,
        generation: u32,
        parent_map: Vec<usize>,
    ) -> Mesh {
        let edges = derive_edges(nodes.len(), &cells);
        let adjacency = derive_adjacency(nodes.len(), &cells);
        Mesh {
            nodes,
            cells,
            edges,
            generation,
            parent_map,
            adjacency,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    pub fn nodes(&self) -> &[[f64; 2]] {
        &self.nodes
    }

    pub fn cells(&self) -> &[[usize; 3]] {
        &self.cells
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn parent_map(&self) -> &[usize] {
        &self.parent_map
    }

    /// Sorted node-to-node adjacency (including self), the nonzero
    /// pattern of every P1 operator on this mesh.
    pub fn adjacency(&self) -> &[Vec<usize>] {
        &self.adjacency
    }

    pub fn cell_area(&self, c: usize) -> f64 {
        let [a, b, d] = self.cells[c];
        triangle_area(self.nodes[a], self.nodes[b], self.nodes[d])
    }

    pub fn total_area(&self) -> f64 {
        (0..self.n_cells()).map(|c| self.cell_area(c)).sum()
    }

    pub fn cell_areas(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|c| self.cell_area(c)).collect()
    }

    /// A field lives on this mesh if its generation tag and length match.
    pub fn owns(&self, field: &NodalField) -> bool {
        field.generation() == self.generation && field.len() == self.n_nodes()
    }

    pub fn check_field(&self, field: &NodalField) -> Result<()> {
        if !self.owns(field) {
            return Err(Error::invalid(format!(
                "field of generation {} / {} values does not live on mesh generation {} with {} nodes",
                field.generation(),
                field.len(),
                self.generation,
                self.n_nodes()
            )));
        }
        Ok(())
    }

    /// Structural audit: positive areas, every edge with one or two
    /// adjacent cells, interior edges traversed once per direction.
    pub fn audit_conformity(&self) -> Result<()> {
        for c in 0..self.n_cells() {
            if self.cell_area(c) <= 0.0 {
                return Err(Error::Geometry(format!(
                    "cell {c} has non-positive area {}",
                    self.cell_area(c)
                )));
            }
        }
        // Count directed traversals per undirected edge; conformity means
        // every undirected edge is used once (boundary) or twice with
        // opposite direction (interior).
        let mut dir_count = std::collections::HashMap::new();
        for cell in &self.cells {
            for e in 0..3 {
                let a = cell[e];
                let b = cell[(e + 1) % 3];
                *dir_count.entry((a.min(b), a.max(b))).or_insert(0usize) += 1;
            }
        }
        for edge in &self.edges {
            let k = (edge.nodes[0], edge.nodes[1]);
            let uses = dir_count.get(&k).copied().unwrap_or(0);
            let cells = 1 + edge.cells[1].is_some() as usize;
            if uses != cells || uses == 0 || uses > 2 {
                return Err(Error::Geometry(format!(
                    "edge {:?} used {uses} times but has {cells} adjacent cells",
                    edge.nodes
                )));
            }
        }
        Ok(())
    }
}

fn triangle_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
}

fn derive_edges(_n_nodes: usize, cells: &[[usize; 3]]) -> Vec<Edge> {
    let mut triples: Vec<(usize, usize, usize)> = Vec::with_capacity(cells.len() * 3);
    for (c, cell) in cells.iter().enumerate() {
        for e in 0..3 {
            let a = cell[e];
            let b = cell[(e + 1) % 3];
            triples.push((a.min(b), a.max(b), c));
        }
    }
    triples.sort_unstable();
    let mut edges = Vec::new();
    let mut i = 0;
    while i < triples.len() {
        let (a, b, c0) = triples[i];
        let mut edge = Edge {
            nodes: [a, b],
            cells: [Some(c0), None],
        };
        if i + 1 < triples.len() && triples[i + 1].0 == a && triples[i + 1].1 == b {
            edge.cells[1] = Some(triples[i + 1].2);
            i += 1;
        }
        edges.push(edge);
        i += 1;
    }
    edges
}

fn derive_adjacency(n_nodes: usize, cells: &[[usize; 3]]) -> Vec<Vec<usize>> {
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for cell in cells {
        for &i in cell {
            for &j in cell {
                adj[i].push(j);
            }
        }
    }
    for a in adj.iter_mut() {
        a.sort_unstable();
        a.dedup();
    }
    adj
}

/// Uniform triangulation of `rect` with `n` squares per side, each split
/// along its lower-left to upper-right diagonal. The diagonal is the
/// refinement edge of both halves.
pub fn build_uniform(rect: Rect, n: usize) -> Result<Mesh> {
    if n == 0 {
        return Err(Error::invalid("cell count per side must be at least 1"));
    }
    if rect.area() <= 0.0 {
        return Err(Error::invalid("rectangle must have positive area"));
    }
    let m = n + 1;
    let mut nodes = Vec::with_capacity(m * m);
    for j in 0..m {
        for i in 0..m {
            let x = rect.x0 + (rect.x1 - rect.x0) * (i as f64) / (n as f64);
            let y = rect.y0 + (rect.y1 - rect.y0) * (j as f64) / (n as f64);
            nodes.push([x, y]);
        }
    }
    let idx = |i: usize, j: usize| j * m + i;
    let mut cells = Vec::with_capacity(2 * n * n);
    for j in 0..n {
        for i in 0..n {
            let bl = idx(i, j);
            let br = idx(i + 1, j);
            let tl = idx(i, j + 1);
            let tr = idx(i + 1, j + 1);
            // Refinement edge = the diagonal (longest edge).
            cells.push([tr, bl, br]);
            cells.push([bl, tr, tl]);
        }
    }
    let parent_map = (0..cells.len()).collect();
    Ok(Mesh::finalize(nodes, cells, 0, parent_map))
}

/// Bisect all marked cells plus the closure needed for conformity.
/// Unaffected cells carry over bit-exactly; `parent_map` of the result
/// points into the input mesh.
pub fn refine_bisect(mesh: &Mesh, marked: &[usize]) -> Result<Mesh> {
    for &c in marked {
        if c >= mesh.n_cells() {
            return Err(Error::invalid(format!(
                "marked cell {c} out of range ({} cells)",
                mesh.n_cells()
            )));
        }
    }

    // Edge lookup for the current mesh.
    let mut edge_id = std::collections::HashMap::new();
    for (e, edge) in mesh.edges.iter().enumerate() {
        edge_id.insert((edge.nodes[0], edge.nodes[1]), e);
    }
    let eid = |a: usize, b: usize| edge_id[&(a.min(b), a.max(b))];

    let mut edge_marked = vec![false; mesh.edges.len()];
    for &c in marked {
        let [v0, v1, _] = mesh.cells[c];
        edge_marked[eid(v0, v1)] = true;
    }

    // Closure: a cell with any marked edge must have its refinement edge
    // marked; iterate to a fixpoint.
    loop {
        let mut changed = false;
        for cell in &mesh.cells {
            let [v0, v1, v2] = *cell;
            let re = eid(v0, v1);
            if !edge_marked[re]
                && (edge_marked[eid(v1, v2)] || edge_marked[eid(v2, v0)])
            {
                edge_marked[re] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }

    // Midpoints in edge order.
    let mut nodes = mesh.nodes.clone();
    let mut midpoint = vec![usize::MAX; mesh.edges.len()];
    for (e, edge) in mesh.edges.iter().enumerate() {
        if edge_marked[e] {
            let a = mesh.nodes[edge.nodes[0]];
            let b = mesh.nodes[edge.nodes[1]];
            midpoint[e] = nodes.len();
            nodes.push([0.5 * (a[0] + b[0]), 0.5 * (a[1] + b[1])]);
        }
    }

    let mut cells = Vec::with_capacity(mesh.n_cells());
    let mut parent_map = Vec::with_capacity(mesh.n_cells());
    for (c, cell) in mesh.cells.iter().enumerate() {
        let [v0, v1, v2] = *cell;
        let re = eid(v0, v1);
        if !edge_marked[re] {
            cells.push(*cell);
            parent_map.push(c);
            continue;
        }
        let m01 = midpoint[re];
        // First bisection: (v2, v0, m01) and (v1, v2, m01).
        let children = [[v2, v0, m01], [v1, v2, m01]];
        for child in children {
            let child_re = eid(child[0], child[1]);
            if edge_marked[child_re] {
                let m = midpoint[child_re];
                cells.push([child[2], child[0], m]);
                parent_map.push(c);
                cells.push([child[1], child[2], m]);
                parent_map.push(c);
            } else {
                cells.push(child);
                parent_map.push(c);
            }
        }
    }

    let out = Mesh::finalize(nodes, cells, mesh.generation + 1, parent_map);
    debug_assert!(out.audit_conformity().is_ok());
    Ok(out)
}

/// Per-cell error indicator: summed squared L²(E)-norms of the normal
/// gradient jumps of the three fields over the cell's edges. Boundary
/// edges contribute nothing.
pub fn gradient_jump_indicator(mesh: &Mesh, fields: [&NodalField; 3]) -> Result<Vec<f64>> {
    for f in fields {
        mesh.check_field(f)?;
    }
    // Constant P1 gradient per cell.
    let mut grads = vec![[[0.0f64; 2]; 3]; mesh.n_cells()];
    for (c, cell) in mesh.cells.iter().enumerate() {
        let [i, j, k] = *cell;
        let p = [mesh.nodes[i], mesh.nodes[j], mesh.nodes[k]];
        let two_a = 2.0 * triangle_area(p[0], p[1], p[2]);
        for (fi, f) in fields.iter().enumerate() {
            let u = [f.values()[i], f.values()[j], f.values()[k]];
            let mut g = [0.0f64; 2];
            for v in 0..3 {
                let pn = p[(v + 1) % 3];
                let pp = p[(v + 2) % 3];
                // grad of barycentric v: rotate opposite edge.
                g[0] += u[v] * (pn[1] - pp[1]);
                g[1] += u[v] * (pp[0] - pn[0]);
            }
            grads[c][fi] = [g[0] / two_a, g[1] / two_a];
        }
    }

    let mut eta = vec![0.0f64; mesh.n_cells()];
    for edge in &mesh.edges {
        let (Some(c0), Some(c1)) = (edge.cells[0], edge.cells[1]) else {
            continue;
        };
        let a = mesh.nodes[edge.nodes[0]];
        let b = mesh.nodes[edge.nodes[1]];
        let ex = b[0] - a[0];
        let ey = b[1] - a[1];
        let len = (ex * ex + ey * ey).sqrt();
        let nx = ey / len;
        let ny = -ex / len;
        let mut jump_sq = 0.0;
        for fi in 0..3 {
            let j = (grads[c0][fi][0] - grads[c1][fi][0]) * nx
                + (grads[c0][fi][1] - grads[c1][fi][1]) * ny;
            jump_sq += j * j;
        }
        let contrib = len * jump_sq;
        eta[c0] += contrib;
        eta[c1] += contrib;
    }
    Ok(eta)
}

/// Dörfler marking. The refine set is the minimal greedy prefix (by
/// descending indicator, ties by lower cell id) carrying the fraction
/// `theta_mark` of the total indicator; cells whose bisection would
/// produce children below `v_min` are then removed. The coarsen set
/// collects cells far below the mean whose merged volume stays within
/// `v_max`; it is advisory only.
pub fn doerfler_mark(
    indicators: &[f64],
    policy: &RefinePolicy,
    cell_volumes: &[f64],
) -> (Vec<usize>, Vec<usize>) {
    assert_eq!(indicators.len(), cell_volumes.len());
    let total: f64 = indicators.iter().sum();
    let n = indicators.len();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        indicators[b]
            .partial_cmp(&indicators[a])
            .unwrap()
            .then(a.cmp(&b))
    });

    let mut refine = Vec::new();
    if total > 0.0 {
        let target = policy.theta_mark * total;
        let mut acc = 0.0;
        for &c in &order {
            if acc >= target {
                break;
            }
            acc += indicators[c];
            refine.push(c);
        }
    }
    refine.retain(|&c| 0.5 * cell_volumes[c] >= policy.v_min);
    refine.sort_unstable();

    let mean = if n > 0 { total / n as f64 } else { 0.0 };
    let mut coarsen: Vec<usize> = (0..n)
        .filter(|&c| indicators[c] <= COARSEN_FRACTION * mean && 2.0 * cell_volumes[c] <= policy.v_max)
        .collect();
    coarsen.sort_unstable();
    (refine, coarsen)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferMode {
    LagrangeInterpolate,
    L2Project,
}

/// Spatial bin grid for point-in-cell queries.
struct CellLocator<'a> {
    mesh: &'a Mesh,
    nx: usize,
    ny: usize,
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    bins: Vec<Vec<usize>>,
}

impl<'a> CellLocator<'a> {
    fn new(mesh: &'a Mesh) -> Self {
        let mut x0 = f64::INFINITY;
        let mut y0 = f64::INFINITY;
        let mut x1 = f64::NEG_INFINITY;
        let mut y1 = f64::NEG_INFINITY;
        for p in mesh.nodes() {
            x0 = x0.min(p[0]);
            y0 = y0.min(p[1]);
            x1 = x1.max(p[0]);
            y1 = y1.max(p[1]);
        }
        let side = ((mesh.n_cells() as f64 / 2.0).sqrt().ceil() as usize).max(1);
        let (nx, ny) = (side, side);
        let dx = ((x1 - x0) / nx as f64).max(1e-300);
        let dy = ((y1 - y0) / ny as f64).max(1e-300);
        let mut bins = vec![Vec::new(); nx * ny];
        for (c, cell) in mesh.cells().iter().enumerate() {
            let pts = [mesh.nodes[cell[0]], mesh.nodes[cell[1]], mesh.nodes[cell[2]]];
            let bx0 = pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let bx1 = pts.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let by0 = pts.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let by1 = pts.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            let i0 = (((bx0 - x0) / dx).floor() as isize).clamp(0, nx as isize - 1) as usize;
            let i1 = (((bx1 - x0) / dx).floor() as isize).clamp(0, nx as isize - 1) as usize;
            let j0 = (((by0 - y0) / dy).floor() as isize).clamp(0, ny as isize - 1) as usize;
            let j1 = (((by1 - y0) / dy).floor() as isize).clamp(0, ny as isize - 1) as usize;
            for j in j0..=j1 {
                for i in i0..=i1 {
                    bins[j * nx + i].push(c);
                }
            }
        }
        CellLocator {
            mesh,
            nx,
            ny,
            x0,
            y0,
            dx,
            dy,
            bins,
        }
    }

    fn barycentric(&self, c: usize, p: [f64; 2]) -> [f64; 3] {
        let [i, j, k] = self.mesh.cells[c];
        let (a, b, d) = (self.mesh.nodes[i], self.mesh.nodes[j], self.mesh.nodes[k]);
        let denom = (b[0] - a[0]) * (d[1] - a[1]) - (b[1] - a[1]) * (d[0] - a[0]);
        let l0 = ((b[0] - p[0]) * (d[1] - p[1]) - (b[1] - p[1]) * (d[0] - p[0])) / denom;
        let l1 = ((d[0] - p[0]) * (a[1] - p[1]) - (d[1] - p[1]) * (a[0] - p[0])) / denom;
        [l0, l1, 1.0 - l0 - l1]
    }

    /// Containing cell and clamped barycentrics. Points farther outside
    /// than the barycentric tolerance are a geometry error.
    fn locate(&self, p: [f64; 2]) -> Result<(usize, [f64; 3])> {
        let bi = (((p[0] - self.x0) / self.dx).floor() as isize).clamp(0, self.nx as isize - 1);
        let bj = (((p[1] - self.y0) / self.dy).floor() as isize).clamp(0, self.ny as isize - 1);
        let candidates = &self.bins[bj as usize * self.nx + bi as usize];

        let mut best: Option<(usize, [f64; 3], f64)> = None;
        let consider = |c: usize, best: &mut Option<(usize, [f64; 3], f64)>| {
            let l = self.barycentric(c, p);
            let min_l = l[0].min(l[1]).min(l[2]);
            if best.as_ref().map_or(true, |(_, _, m)| min_l > *m) {
                *best = Some((c, l, min_l));
            }
        };
        for &c in candidates {
            consider(c, &mut best);
            if let Some((_, _, m)) = best {
                if m >= 0.0 {
                    break;
                }
            }
        }
        let need_global = best.map_or(true, |(_, _, m)| m < -LOCATE_TOL);
        if need_global {
            for c in 0..self.mesh.n_cells() {
                consider(c, &mut best);
            }
        }
        let (c, l, min_l) = best.ok_or_else(|| Error::Geometry("empty mesh".into()))?;
        if min_l < -LOCATE_TOL {
            return Err(Error::Geometry(format!(
                "point ({}, {}) lies outside the mesh (barycentric deficit {min_l:.3e})",
                p[0], p[1]
            )));
        }
        let mut l = [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)];
        let s = l[0] + l[1] + l[2];
        for v in l.iter_mut() {
            *v /= s;
        }
        Ok((c, l))
    }

    /// P1 evaluation with an exact-coordinate snap to vertices so that
    /// shared nodes transfer bit-exactly.
    fn eval(&self, field: &NodalField, p: [f64; 2]) -> Result<f64> {
        let (c, l) = self.locate(p)?;
        let cell = self.mesh.cells[c];
        for &v in &cell {
            let q = self.mesh.nodes[v];
            if q[0] == p[0] && q[1] == p[1] {
                return Ok(field.values()[v]);
            }
        }
        let u = field.values();
        Ok(l[0] * u[cell[0]] + l[1] * u[cell[1]] + l[2] * u[cell[2]])
    }
}

/// Transfer a nodal field onto another mesh covering the same domain.
///
/// Lagrange mode evaluates the source at destination nodes. L2 mode
/// solves `M_dst x = b` with `b_i = ∫ u_src φ_i`; the right-hand side is
/// integrated with the edge-midpoint rule over the cells of the finer of
/// the two meshes, which is exact whenever the meshes are nested.
pub fn transfer_nodal(
    src_mesh: &Mesh,
    field: &NodalField,
    dst_mesh: &Mesh,
    mode: TransferMode,
) -> Result<NodalField> {
    src_mesh.check_field(field)?;
    match mode {
        TransferMode::LagrangeInterpolate => {
            let locator = CellLocator::new(src_mesh);
            let mut values = Vec::with_capacity(dst_mesh.n_nodes());
            for &p in dst_mesh.nodes() {
                values.push(locator.eval(field, p)?);
            }
            Ok(NodalField::new(dst_mesh.generation(), values))
        }
        TransferMode::L2Project => {
            let mut b = vec![0.0f64; dst_mesh.n_nodes()];
            if dst_mesh.generation() > src_mesh.generation() {
                // Quadrature over destination cells; source evaluated there.
                let locator = CellLocator::new(src_mesh);
                for cell in dst_mesh.cells() {
                    let pts = [
                        dst_mesh.nodes[cell[0]],
                        dst_mesh.nodes[cell[1]],
                        dst_mesh.nodes[cell[2]],
                    ];
                    let w = triangle_area(pts[0], pts[1], pts[2]) / 3.0;
                    for e in 0..3 {
                        let i = e;
                        let j = (e + 1) % 3;
                        let q = [
                            0.5 * (pts[i][0] + pts[j][0]),
                            0.5 * (pts[i][1] + pts[j][1]),
                        ];
                        let u = locator.eval(field, q)?;
                        // Midpoint of edge (i, j): barycentrics 1/2, 1/2.
                        b[cell[i]] += w * u * 0.5;
                        b[cell[j]] += w * u * 0.5;
                    }
                }
            } else {
                // Quadrature over source cells; destination basis located.
                let locator = CellLocator::new(dst_mesh);
                let u = field.values();
                for cell in src_mesh.cells() {
                    let pts = [
                        src_mesh.nodes[cell[0]],
                        src_mesh.nodes[cell[1]],
                        src_mesh.nodes[cell[2]],
                    ];
                    let w = triangle_area(pts[0], pts[1], pts[2]) / 3.0;
                    for e in 0..3 {
                        let i = e;
                        let j = (e + 1) % 3;
                        let q = [
                            0.5 * (pts[i][0] + pts[j][0]),
                            0.5 * (pts[i][1] + pts[j][1]),
                        ];
                        let uq = 0.5 * (u[cell[i]] + u[cell[j]]);
                        let (dc, l) = locator.locate(q)?;
                        let dcell = dst_mesh.cells[dc];
                        for v in 0..3 {
                            b[dcell[v]] += w * uq * l[v];
                        }
                    }
                }
            }
            let mass = fem::assemble_mass(dst_mesh);
            let ordering = linalg::reverse_cuthill_mckee(dst_mesh.adjacency());
            let x = linalg::solve_csr(&mass, &b, &ordering)?;
            Ok(NodalField::new(dst_mesh.generation(), x))
        }
    }
}

/// Evaluate a field at arbitrary points (used by snapshot tooling).
pub fn eval_at_points(mesh: &Mesh, field: &NodalField, points: &[[f64; 2]]) -> Result<Vec<f64>> {
    mesh.check_field(field)?;
    let locator = CellLocator::new(mesh);
    points.iter().map(|&p| locator.eval(field, p)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit_square() -> Rect {
        Rect {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    fn affine_field(mesh: &Mesh, a: f64, b: f64, c: f64) -> NodalField {
        NodalField::new(
            mesh.generation(),
            mesh.nodes().iter().map(|p| a * p[0] + b * p[1] + c).collect(),
        )
    }

    #[test]
    fn uniform_counts() {
        let m1 = build_uniform(unit_square(), 1).unwrap();
        assert_eq!(m1.n_cells(), 2);
        assert_eq!(m1.n_nodes(), 4);
        let m2 = build_uniform(unit_square(), 2).unwrap();
        assert_eq!(m2.n_cells(), 8);
        assert_eq!(m2.n_nodes(), 9);
        let macro_mesh = build_uniform(
            Rect {
                x0: -5.0,
                y0: -5.0,
                x1: 5.0,
                y1: 5.0,
            },
            50,
        )
        .unwrap();
        assert_eq!(macro_mesh.n_cells(), 5000);
        assert_eq!(macro_mesh.n_nodes(), 51 * 51);
        macro_mesh.audit_conformity().unwrap();
        assert!((macro_mesh.total_area() - 100.0).abs() < 100.0 * 1e-12);
    }

    #[test]
    fn uniform_rejects_degenerate_input() {
        assert!(build_uniform(unit_square(), 0).is_err());
        assert!(build_uniform(
            Rect {
                x0: 0.0,
                y0: 0.0,
                x1: 0.0,
                y1: 1.0
            },
            3
        )
        .is_err());
    }

    #[test]
    fn empty_marking_preserves_mesh() {
        let m = build_uniform(unit_square(), 2).unwrap();
        let r = refine_bisect(&m, &[]).unwrap();
        assert_eq!(r.n_cells(), m.n_cells());
        assert_eq!(r.cells(), m.cells());
        assert_eq!(r.nodes(), m.nodes());
        assert_eq!(r.generation(), m.generation() + 1);
        assert_eq!(r.parent_map(), &(0..m.n_cells()).collect::<Vec<_>>()[..]);
    }

    #[test]
    fn single_bisection_stays_conforming() {
        let m = build_uniform(unit_square(), 1).unwrap();
        let r = refine_bisect(&m, &[0]).unwrap();
        assert!(r.n_cells() >= 3);
        r.audit_conformity().unwrap();
        assert!((r.total_area() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn full_marking_doubles_cells() {
        // Marking everything bisects every cell exactly once: the closure
        // adds nothing because every refinement edge is already marked.
        let mut m = build_uniform(unit_square(), 2).unwrap();
        for _ in 0..3 {
            let all: Vec<usize> = (0..m.n_cells()).collect();
            let r = refine_bisect(&m, &all).unwrap();
            assert_eq!(r.n_cells(), 2 * m.n_cells());
            r.audit_conformity().unwrap();
            assert!((r.total_area() - 1.0).abs() < 1e-12);
            m = r;
        }
    }

    #[test]
    fn affine_field_has_zero_indicator() {
        let m = build_uniform(unit_square(), 3).unwrap();
        let f = affine_field(&m, 2.0, -1.0, 0.3);
        let g = affine_field(&m, 0.0, 4.0, 1.0);
        let h = affine_field(&m, 1.0, 1.0, -2.0);
        let eta = gradient_jump_indicator(&m, [&f, &g, &h]).unwrap();
        for (c, e) in eta.iter().enumerate() {
            assert!(e.abs() < 1e-24, "cell {c}: {e}");
        }
    }

    #[test]
    fn unit_jump_contributes_edge_length() {
        // Two cells sharing the diagonal of the unit square; field with
        // gradient (1,0) on one cell and (0,0) on the other jumps by the
        // normal component across that diagonal.
        let m = build_uniform(unit_square(), 1).unwrap();
        // Nodes: (0,0),(1,0),(0,1),(1,1). Field x on lower cell only is
        // not continuous P1; instead use field = max(x + y - 1, 0) which
        // is P1 on this mesh: gradient (1,1) above the diagonal, 0 below.
        let vals: Vec<f64> = m
            .nodes()
            .iter()
            .map(|p| (p[0] + p[1] - 1.0).max(0.0))
            .collect();
        let f = NodalField::new(m.generation(), vals);
        let zero = NodalField::new(m.generation(), vec![0.0; m.n_nodes()]);
        let eta = gradient_jump_indicator(&m, [&f, &zero, &zero]).unwrap();
        // Jump of grad = (1,1), normal of diagonal ∝ (1,1)/√2 → jump·n = √2.
        // Edge length = √2, contribution = √2 · 2 = 2√2 per adjacent cell.
        let expect = 2.0 * (2.0f64).sqrt();
        assert!((eta[0] - expect).abs() < 1e-12, "{}", eta[0]);
        assert!((eta[1] - expect).abs() < 1e-12, "{}", eta[1]);
    }

    #[test]
    fn indicator_mismatched_generation_errors() {
        let m = build_uniform(unit_square(), 2).unwrap();
        let f = NodalField::new(m.generation() + 1, vec![0.0; m.n_nodes()]);
        let z = NodalField::new(m.generation(), vec![0.0; m.n_nodes()]);
        assert!(gradient_jump_indicator(&m, [&f, &z, &z]).is_err());
    }

    fn policy(theta: f64) -> RefinePolicy {
        RefinePolicy {
            theta_mark: theta,
            v_min: 1e-12,
            v_max: 1e12,
        }
    }

    #[test]
    fn doerfler_greedy_minimality() {
        let ind = [4.0, 1.0, 1.0, 1.0, 1.0];
        let vols = [1.0; 5];
        let (refine, _) = doerfler_mark(&ind, &policy(0.5), &vols);
        assert_eq!(refine, vec![0]);

        let (all, _) = doerfler_mark(&[1.0; 4], &policy(1.0), &[1.0; 4]);
        assert_eq!(all, vec![0, 1, 2, 3]);

        let (one, _) = doerfler_mark(&[1.0, 3.0, 2.0], &policy(1e-12), &[1.0; 3]);
        assert_eq!(one, vec![1]);
    }

    #[test]
    fn doerfler_respects_volume_floor() {
        let ind = [1.0, 1.0];
        let vols = [1.0, 1e-13];
        let p = RefinePolicy {
            theta_mark: 1.0,
            v_min: 1e-10,
            v_max: 1.0,
        };
        let (refine, _) = doerfler_mark(&ind, &p, &vols);
        assert_eq!(refine, vec![0]);
    }

    #[test]
    fn doerfler_zero_indicators_marks_nothing() {
        let (refine, _) = doerfler_mark(&[0.0; 6], &policy(0.7), &[1.0; 6]);
        assert!(refine.is_empty());
    }

    #[test]
    fn transfer_identity_both_modes() {
        let m = build_uniform(unit_square(), 3).unwrap();
        let f = NodalField::new(
            m.generation(),
            m.nodes().iter().map(|p| (p[0] * 3.1).sin() + p[1]).collect(),
        );
        let lag = transfer_nodal(&m, &f, &m, TransferMode::LagrangeInterpolate).unwrap();
        assert_eq!(lag.values(), f.values());
        let l2 = transfer_nodal(&m, &f, &m, TransferMode::L2Project).unwrap();
        for (a, b) in l2.values().iter().zip(f.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn transfer_constant_and_affine_reproduced() {
        let coarse = build_uniform(unit_square(), 2).unwrap();
        let all: Vec<usize> = (0..coarse.n_cells()).collect();
        let fine = refine_bisect(&coarse, &all).unwrap();

        let ones = NodalField::new(coarse.generation(), vec![1.0; coarse.n_nodes()]);
        for mode in [TransferMode::LagrangeInterpolate, TransferMode::L2Project] {
            let t = transfer_nodal(&coarse, &ones, &fine, mode).unwrap();
            for v in t.values() {
                assert!((v - 1.0).abs() < 1e-12);
            }
        }

        let aff = affine_field(&coarse, 1.0, 2.0, 0.0);
        for mode in [TransferMode::LagrangeInterpolate, TransferMode::L2Project] {
            let t = transfer_nodal(&coarse, &aff, &fine, mode).unwrap();
            let expect = affine_field(&fine, 1.0, 2.0, 0.0);
            for (a, b) in t.values().iter().zip(expect.values()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn coarsening_l2_preserves_integral_lagrange_does_not() {
        let coarse = build_uniform(unit_square(), 2).unwrap();
        let all: Vec<usize> = (0..coarse.n_cells()).collect();
        let fine = refine_bisect(&coarse, &all).unwrap();
        // Non-affine field on the fine mesh.
        let f = NodalField::new(
            fine.generation(),
            fine.nodes()
                .iter()
                .map(|p| (6.0 * p[0]).sin() * (5.0 * p[1]).cos() + p[0] * p[0])
                .collect(),
        );
        let int_src = crate::fem::integrate(&fine, &f).unwrap();

        let l2 = transfer_nodal(&fine, &f, &coarse, TransferMode::L2Project).unwrap();
        let int_l2 = crate::fem::integrate(&coarse, &l2).unwrap();
        assert!(
            (int_l2 - int_src).abs() < 1e-10,
            "L2 transfer changed the mean: {int_src} vs {int_l2}"
        );

        let lag = transfer_nodal(&fine, &f, &coarse, TransferMode::LagrangeInterpolate).unwrap();
        let int_lag = crate::fem::integrate(&coarse, &lag).unwrap();
        assert!(
            (int_lag - int_src).abs() > 1e-6,
            "expected interpolation to change the mean of a curved field"
        );
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn refinement_keeps_conformity_and_area(marks in proptest::collection::vec(0usize..32, 0..12)) {
            let mut m = build_uniform(unit_square(), 2).unwrap();
            for chunk in marks.chunks(3) {
                let marked: Vec<usize> = chunk.iter().map(|&c| c % m.n_cells()).collect();
                m = refine_bisect(&m, &marked).unwrap();
                m.audit_conformity().unwrap();
                prop_assert!((m.total_area() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn doerfler_fraction_inequality(
            ind in proptest::collection::vec(0.0f64..10.0, 1..40),
            theta in 0.05f64..1.0,
        ) {
            let vols = vec![1.0; ind.len()];
            let (refine, _) = doerfler_mark(&ind, &policy(theta), &vols);
            let total: f64 = ind.iter().sum();
            let marked: f64 = refine.iter().map(|&c| ind[c]).sum();
            if total > 0.0 {
                prop_assert!(marked >= theta * total - 1e-12 * total);
            } else {
                prop_assert!(refine.is_empty());
            }
        }
    }

    #[test]
    fn indicator_invariant_under_renumbering() {
        // Renumber nodes of a small mesh and check indicators agree.
        let m = build_uniform(unit_square(), 2).unwrap();
        let f = NodalField::new(
            m.generation(),
            m.nodes().iter().map(|p| p[0] * p[0] + 0.5 * p[1]).collect(),
        );
        let z = NodalField::new(m.generation(), vec![0.0; m.n_nodes()]);
        let eta = gradient_jump_indicator(&m, [&f, &z, &z]).unwrap();

        // Reverse node order.
        let n = m.n_nodes();
        let remap: Vec<usize> = (0..n).rev().collect();
        let mut nodes2 = vec![[0.0; 2]; n];
        for (old, &new) in remap.iter().enumerate() {
            nodes2[new] = m.nodes()[old];
        }
        let cells2: Vec<[usize; 3]> = m
            .cells()
            .iter()
            .map(|c| [remap[c[0]], remap[c[1]], remap[c[2]]])
            .collect();
        let m2 = Mesh::finalize(nodes2, cells2, 0, (0..m.n_cells()).collect());
        let vals2: Vec<f64> = m2.nodes().iter().map(|p| p[0] * p[0] + 0.5 * p[1]).collect();
        let f2 = NodalField::new(0, vals2);
        let z2 = NodalField::new(0, vec![0.0; n]);
        let eta2 = gradient_jump_indicator(&m2, [&f2, &z2, &z2]).unwrap();
        for c in 0..m.n_cells() {
            assert!((eta[c] - eta2[c]).abs() < 1e-12);
        }
    }
}
