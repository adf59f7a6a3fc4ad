//! P1 finite-element assembly: mass, lumped mass, stiffness and their
//! coefficient-weighted variants, all with exact element quadrature.
//!
//! Composed coefficients like a mobility evaluated at a phase field
//! enter as the P1 interpolant of their nodal values. For the stiffness
//! that integrates to the one-third nodal average per element; for the
//! mass it is the exact cubic formula ∫ λ_a λ_b λ_c = 2|T| a!b!c!/(a+b+c+2)!.

use crate::error::{Error, Result};
use crate::linalg::{pattern_from_rows, SparseOperator};
use crate::mesh::Mesh;

/// One scalar value per mesh node, tagged with the mesh generation it
/// lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct NodalField {
    generation: u32,
    values: Vec<f64>,
}

impl NodalField {
    pub fn new(generation: u32, values: Vec<f64>) -> Self {
        NodalField { generation, values }
    }

    pub fn constant(mesh: &Mesh, value: f64) -> Self {
        NodalField {
            generation: mesh.generation(),
            values: vec![value; mesh.n_nodes()],
        }
    }

    /// Sample a function at the mesh nodes.
    pub fn from_fn(mesh: &Mesh, f: impl Fn([f64; 2]) -> f64) -> Self {
        NodalField {
            generation: mesh.generation(),
            values: mesh.nodes().iter().map(|&p| f(p)).collect(),
        }
    }

    pub fn generation(&self) -> u32 {
        self.generation
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    /// Nodewise map producing a field on the same mesh generation.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> NodalField {
        NodalField {
            generation: self.generation,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Element geometry factors: `b[i] = y_{i+1} - y_{i+2}`, `c[i] = x_{i+2} - x_{i+1}`
/// so that the P1 gradient is `(Σ u_i b_i, Σ u_i c_i) / (2A)`.
struct ElementGeom {
    area: f64,
    b: [f64; 3],
    c: [f64; 3],
}

fn element_geom(mesh: &Mesh, cell: &[usize; 3]) -> ElementGeom {
    let p = [
        mesh.nodes()[cell[0]],
        mesh.nodes()[cell[1]],
        mesh.nodes()[cell[2]],
    ];
    let mut b = [0.0; 3];
    let mut c = [0.0; 3];
    for i in 0..3 {
        let j = (i + 1) % 3;
        let k = (i + 2) % 3;
        b[i] = p[j][1] - p[k][1];
        c[i] = p[k][0] - p[j][0];
    }
    let area = 0.5 * ((p[1][0] - p[0][0]) * (p[2][1] - p[0][1])
        - (p[1][1] - p[0][1]) * (p[2][0] - p[0][0]));
    ElementGeom { area, b, c }
}

fn empty_operator(mesh: &Mesh, symmetric: bool) -> SparseOperator {
    let (row_ptr, col_idx) = pattern_from_rows(mesh.adjacency());
    let nnz = col_idx.len();
    SparseOperator::new(mesh.n_nodes(), row_ptr, col_idx, vec![0.0; nnz], symmetric)
}

/// Assemble with a per-element 3x3 contribution.
fn assemble(
    mesh: &Mesh,
    symmetric: bool,
    mut element: impl FnMut(usize, &ElementGeom, &mut [[f64; 3]; 3]),
) -> SparseOperator {
    let mut op = empty_operator(mesh, symmetric);
    // Precompute row offsets once instead of the quadratic entry_index.
    let mut row_start = Vec::with_capacity(mesh.n_nodes());
    {
        let mut acc = 0usize;
        for i in 0..mesh.n_nodes() {
            row_start.push(acc);
            acc += op.row(i).0.len();
        }
    }
    for (cidx, cell) in mesh.cells().iter().enumerate() {
        let geom = element_geom(mesh, cell);
        let mut local = [[0.0f64; 3]; 3];
        element(cidx, &geom, &mut local);
        for a in 0..3 {
            let i = cell[a];
            for bidx in 0..3 {
                let j = cell[bidx];
                let k = {
                    let (cols, _) = op.row(i);
                    cols.binary_search(&j).expect("pattern covers cell pairs")
                };
                let pos = row_start[i] + k;
                op.vals_mut()[pos] += local[a][bidx];
            }
        }
    }
    op
}

/// Consistent mass matrix: `M_ij = ∫ φ_i φ_j`.
pub fn assemble_mass(mesh: &Mesh) -> SparseOperator {
    assemble(mesh, true, |_, geom, local| {
        let a12 = geom.area / 12.0;
        for i in 0..3 {
            for j in 0..3 {
                local[i][j] = if i == j { 2.0 * a12 } else { a12 };
            }
        }
    })
}

/// Lumped (diagonal) mass matrix: row sums of the consistent mass,
/// equivalently one third of the adjacent cell areas per node.
pub fn assemble_lumped_mass(mesh: &Mesh) -> SparseOperator {
    assemble(mesh, true, |_, geom, local| {
        let third = geom.area / 3.0;
        for i in 0..3 {
            local[i][i] = third;
        }
    })
}

/// Diagonal of the lumped mass as a plain vector.
pub fn lumped_mass_diag(mesh: &Mesh) -> Vec<f64> {
    let mut d = vec![0.0; mesh.n_nodes()];
    for cell in mesh.cells() {
        let geom = element_geom(mesh, cell);
        for &i in cell {
            d[i] += geom.area / 3.0;
        }
    }
    d
}

/// Stiffness matrix `K_ij = ∫ ∇φ_i · ∇φ_j`, natural boundary conditions.
pub fn assemble_stiffness(mesh: &Mesh) -> SparseOperator {
    assemble(mesh, true, |_, geom, local| {
        let f = 1.0 / (4.0 * geom.area);
        for i in 0..3 {
            for j in 0..3 {
                local[i][j] = f * (geom.b[i] * geom.b[j] + geom.c[i] * geom.c[j]);
            }
        }
    })
}

/// Stiffness weighted by the P1 interpolant of a nodal coefficient,
/// integrated exactly: each element sees the mean of its three nodal
/// coefficient values.
pub fn assemble_weighted_stiffness(mesh: &Mesh, coeff: &NodalField) -> Result<SparseOperator> {
    mesh.check_field(coeff)?;
    for (i, &v) in coeff.values().iter().enumerate() {
        if v < 0.0 {
            return Err(Error::invalid(format!(
                "stiffness coefficient must be nonnegative, node {i} has {v}"
            )));
        }
    }
    Ok(assemble_weighted_stiffness_signed(mesh, coeff.values()))
}

/// Same quadrature as `assemble_weighted_stiffness` without the sign
/// restriction; linearizations feed signed coefficient fields here.
pub fn assemble_weighted_stiffness_signed(mesh: &Mesh, coeff: &[f64]) -> SparseOperator {
    assemble(mesh, true, |cidx, geom, local| {
        let cell = mesh.cells()[cidx];
        let w = (coeff[cell[0]] + coeff[cell[1]] + coeff[cell[2]]) / 3.0;
        let f = w / (4.0 * geom.area);
        for i in 0..3 {
            for j in 0..3 {
                local[i][j] = f * (geom.b[i] * geom.b[j] + geom.c[i] * geom.c[j]);
            }
        }
    })
}

/// Mass matrix weighted by the P1 interpolant of a nodal coefficient,
/// with the exact cubic quadrature
/// ∫ λ_a λ_b λ_c = |T|/10 (all equal), |T|/30 (two equal), |T|/60 (distinct).
pub fn assemble_weighted_mass(mesh: &Mesh, coeff: &[f64]) -> SparseOperator {
    assemble(mesh, true, |cidx, geom, local| {
        let cell = mesh.cells()[cidx];
        let w = [coeff[cell[0]], coeff[cell[1]], coeff[cell[2]]];
        for i in 0..3 {
            for j in 0..3 {
                let mut acc = 0.0;
                for (k, wk) in w.iter().enumerate() {
                    let coef = if i == j && j == k {
                        1.0 / 10.0
                    } else if i == j || j == k || i == k {
                        1.0 / 30.0
                    } else {
                        1.0 / 60.0
                    };
                    acc += wk * coef;
                }
                local[i][j] = acc * geom.area;
            }
        }
    })
}

/// Nodewise nonlinearity under lumped integration: returns `M_L · map(u)`.
pub fn apply_lumped_nonlinearity(
    mesh: &Mesh,
    field: &NodalField,
    map: impl Fn(f64) -> f64,
) -> Result<Vec<f64>> {
    mesh.check_field(field)?;
    let lumped = lumped_mass_diag(mesh);
    let mut out = Vec::with_capacity(field.len());
    for (i, (&u, &m)) in field.values().iter().zip(&lumped).enumerate() {
        let v = map(u);
        if !v.is_finite() {
            return Err(Error::Numerical(format!(
                "nonlinear map produced a non-finite value at node {i} (input {u})"
            )));
        }
        out.push(m * v);
    }
    Ok(out)
}

/// Per-node derivative pairing for the weighted stiffness: entry `j` is
/// `∂(x^T K_w y)/∂w_j = (1/3) Σ_{T ∋ j} x_T^T K_T y_T`.
pub fn weighted_stiffness_partials(mesh: &Mesh, x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_nodes()];
    for cell in mesh.cells() {
        let geom = element_geom(mesh, cell);
        let f = 1.0 / (4.0 * geom.area);
        let mut pairing = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                pairing +=
                    x[cell[i]] * f * (geom.b[i] * geom.b[j] + geom.c[i] * geom.c[j]) * y[cell[j]];
            }
        }
        for &n in cell {
            out[n] += pairing / 3.0;
        }
    }
    out
}

/// Per-node derivative pairing for the weighted mass: entry `k` is
/// `∂(x^T M_w y)/∂w_k = Σ_{T ∋ k} ∫_T λ_k x_h y_h`.
pub fn weighted_mass_partials(mesh: &Mesh, x: &[f64], y: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; mesh.n_nodes()];
    for cell in mesh.cells() {
        let geom = element_geom(mesh, cell);
        for k in 0..3 {
            let mut acc = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let coef = if i == j && j == k {
                        1.0 / 10.0
                    } else if i == j || j == k || i == k {
                        1.0 / 30.0
                    } else {
                        1.0 / 60.0
                    };
                    acc += coef * x[cell[i]] * y[cell[j]];
                }
            }
            out[cell[k]] += geom.area * acc;
        }
    }
    out
}

/// ∫_Ω u_h dx of a P1 field.
pub fn integrate(mesh: &Mesh, field: &NodalField) -> Result<f64> {
    mesh.check_field(field)?;
    let lumped = lumped_mass_diag(mesh);
    Ok(field
        .values()
        .iter()
        .zip(&lumped)
        .map(|(&u, &m)| u * m)
        .sum())
}

/// Degree-5 Radon rule on the triangle (7 points), used to project
/// analytic initial data.
const QUAD_DEG5: [([f64; 3], f64); 7] = {
    let a = 0.059715871789770;
    let b = 0.470142064105115;
    let c = 0.797426985353087;
    let d = 0.101286507323456;
    let w1 = 0.225;
    let w2 = 0.132394152788506;
    let w3 = 0.125939180544827;
    [
        ([1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], w1),
        ([a, b, b], w2),
        ([b, a, b], w2),
        ([b, b, a], w2),
        ([c, d, d], w3),
        ([d, c, d], w3),
        ([d, d, c], w3),
    ]
};

/// L2-projection of an analytic function onto the P1 space of `mesh`:
/// solves `M x = b` with `b_i = ∫ f φ_i` by high-order quadrature.
pub fn project_function(mesh: &Mesh, f: impl Fn([f64; 2]) -> f64) -> Result<NodalField> {
    let mut b = vec![0.0f64; mesh.n_nodes()];
    for cell in mesh.cells() {
        let p = [
            mesh.nodes()[cell[0]],
            mesh.nodes()[cell[1]],
            mesh.nodes()[cell[2]],
        ];
        let geom = element_geom(mesh, cell);
        for (lambda, w) in QUAD_DEG5 {
            let x = lambda[0] * p[0][0] + lambda[1] * p[1][0] + lambda[2] * p[2][0];
            let y = lambda[0] * p[0][1] + lambda[1] * p[1][1] + lambda[2] * p[2][1];
            let fv = f([x, y]);
            for i in 0..3 {
                b[cell[i]] += geom.area * w * fv * lambda[i];
            }
        }
    }
    let mass = assemble_mass(mesh);
    let ordering = crate::linalg::reverse_cuthill_mckee(mesh.adjacency());
    let x = crate::linalg::solve_csr(&mass, &b, &ordering)?;
    Ok(NodalField::new(mesh.generation(), x))
}
