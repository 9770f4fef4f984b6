//! Rectangular (Clements) MZI meshes.
//!
//! A mesh on `n` modes has `n` layers; layer `ℓ` holds the MZIs acting on
//! mode pairs `(m, m + 1)` with `m ≡ ℓ (mod 2)`, giving `n(n − 1)/2`
//! interferometers followed by a diagonal output phase screen.
//!
//! For placement every MZI covers two horizontally adjacent unit cells of a
//! `(n − 1) × 2n` grid: the node in layer `ℓ` on top mode `m` sits at
//! `(2ℓ, m)` and `(2ℓ + 1, m)`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::device::{mzi_block, wrap_phase, ArmLoss, Block2, PhasePair, SplitterQuad};
use crate::error::{invalid, Error, Result};
use crate::linalg::{unitarity_error, ComplexMatrix};

/// Input unitaries may be off by this much before decomposition refuses them.
pub const UNITARITY_TOLERANCE: f64 = 1e-8;

/// Reference entries smaller than this are left out of [`rvd`].
pub const RVD_EPSILON: f64 = 1e-9;

/// One interferometer of a mesh.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "NodeRecord", into = "NodeRecord")]
pub struct MziNode {
    pub layer: usize,
    /// The node couples modes `top_mode` and `top_mode + 1`.
    pub top_mode: usize,
    pub phases: PhasePair,
    pub splitters: SplitterQuad,
    pub loss: ArmLoss,
}

impl MziNode {
    /// Ideal, lossless node.
    pub fn ideal(layer: usize, top_mode: usize, phases: PhasePair) -> Self {
        Self {
            layer,
            top_mode,
            phases,
            splitters: SplitterQuad::IDEAL,
            loss: ArmLoss::LOSSLESS,
        }
    }

    /// Left grid column of the node; the right cell is `grid_x() + 1`.
    pub fn grid_x(&self) -> usize {
        2 * self.layer
    }

    pub fn grid_y(&self) -> usize {
        self.top_mode
    }

    pub fn block(&self) -> Block2 {
        mzi_block(self.phases, self.splitters, self.loss)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NodeRecord {
    layer: usize,
    top_mode: usize,
    theta: f64,
    phi: f64,
    r: f64,
    t: f64,
    r2: f64,
    t2: f64,
    beta_lt: f64,
    beta_lb: f64,
    beta_rt: f64,
    beta_rb: f64,
}

impl From<NodeRecord> for MziNode {
    fn from(n: NodeRecord) -> Self {
        Self {
            layer: n.layer,
            top_mode: n.top_mode,
            phases: PhasePair::unwrapped(n.theta, n.phi),
            splitters: SplitterQuad {
                r: n.r,
                t: n.t,
                r2: n.r2,
                t2: n.t2,
            },
            loss: ArmLoss {
                beta_lt: n.beta_lt,
                beta_lb: n.beta_lb,
                beta_rt: n.beta_rt,
                beta_rb: n.beta_rb,
            },
        }
    }
}

impl From<MziNode> for NodeRecord {
    fn from(n: MziNode) -> Self {
        Self {
            layer: n.layer,
            top_mode: n.top_mode,
            theta: n.phases.theta,
            phi: n.phases.phi,
            r: n.splitters.r,
            t: n.splitters.t,
            r2: n.splitters.r2,
            t2: n.splitters.t2,
            beta_lt: n.loss.beta_lt,
            beta_lb: n.loss.beta_lb,
            beta_rt: n.loss.beta_rt,
            beta_rb: n.loss.beta_rb,
        }
    }
}

/// Ordered MZI list (input to output) plus the output phase screen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeshPlan {
    pub n: usize,
    pub nodes: Vec<MziNode>,
    pub phase_screen: Vec<f64>,
}

impl MeshPlan {
    /// Mesh with no interferometers and a zero phase screen.
    pub fn identity(n: usize) -> Self {
        Self {
            n,
            nodes: Vec::new(),
            phase_screen: vec![0.0; n],
        }
    }

    pub fn full_node_count(n: usize) -> usize {
        n * n.saturating_sub(1) / 2
    }

    /// Checks mode bounds, layer parity, ordering and cell exclusivity.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("mesh needs at least one mode"));
        }
        if self.phase_screen.len() != self.n {
            return Err(Error::ShapeMismatch(format!(
                "phase screen has {} entries for {} modes",
                self.phase_screen.len(),
                self.n
            )));
        }
        let mut seen = vec![false; self.n * self.n];
        let mut last_layer = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            if self.n < 2 || node.top_mode > self.n - 2 {
                return Err(invalid(format!("node {i}: top mode {} out of range", node.top_mode)));
            }
            if node.layer >= self.n {
                return Err(invalid(format!("node {i}: layer {} out of range", node.layer)));
            }
            if node.layer % 2 != node.top_mode % 2 {
                return Err(invalid(format!(
                    "node {i}: layer {} cannot host top mode {} in a rectangular mesh",
                    node.layer, node.top_mode
                )));
            }
            if node.layer < last_layer {
                return Err(invalid(format!("node {i}: nodes must be ordered by layer")));
            }
            last_layer = node.layer;
            let slot = node.layer * self.n + node.top_mode;
            if std::mem::replace(&mut seen[slot], true) {
                return Err(invalid(format!(
                    "node {i}: grid cell ({}, {}) already occupied",
                    node.grid_x(),
                    node.grid_y()
                )));
            }
        }
        let finite = self.phase_screen.iter().all(|p| p.is_finite())
            && self.nodes.iter().all(|n| {
                [
                    n.phases.theta,
                    n.phases.phi,
                    n.splitters.r,
                    n.splitters.t,
                    n.splitters.r2,
                    n.splitters.t2,
                    n.loss.beta_lt,
                    n.loss.beta_lb,
                    n.loss.beta_rt,
                    n.loss.beta_rb,
                ]
                .iter()
                .all(|v| v.is_finite())
            });
        if !finite {
            return Err(invalid("mesh parameters must be finite"));
        }
        Ok(())
    }

    /// Number of layers actually populated.
    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.layer + 1).max().unwrap_or(0)
    }
}

/// Evaluates the mesh as an `n × n` linear operator.
pub fn mesh_to_unitary(plan: &MeshPlan) -> ComplexMatrix {
    let mut u = ComplexMatrix::identity(plan.n);
    for node in &plan.nodes {
        u.apply_left_2x2(node.top_mode, &node.block());
    }
    for (i, &psi) in plan.phase_screen.iter().enumerate() {
        let d = Complex64::cis(psi);
        for j in 0..plan.n {
            u[(i, j)] *= d;
        }
    }
    u
}

fn dagger(b: &Block2) -> Block2 {
    [[b[0][0].conj(), b[1][0].conj()], [b[0][1].conj(), b[1][1].conj()]]
}

fn ideal_block(theta: f64, phi: f64) -> Block2 {
    mzi_block(PhasePair::unwrapped(theta, phi), SplitterQuad::IDEAL, ArmLoss::LOSSLESS)
}

struct RawNode {
    top_mode: usize,
    theta: f64,
    phi: f64,
}

/// Decomposes a unitary into a rectangular mesh of ideal MZIs.
///
/// Entries are nulled alternately by right-multiplication with inverse MZIs
/// (column operations) and left-multiplication with MZIs (row operations);
/// the left-hand MZIs are then pushed through the remaining diagonal so the
/// whole product reads as one input-to-output sequence.
pub fn clements_decompose(u: &ComplexMatrix, tol: f64) -> Result<MeshPlan> {
    if !u.is_square() {
        return Err(invalid(format!(
            "expected a square unitary, got {}x{}",
            u.rows(),
            u.cols()
        )));
    }
    let n = u.rows();
    if n < 2 {
        return Err(invalid("mesh decomposition needs at least two modes"));
    }
    let err = unitarity_error(u)?;
    if err > UNITARITY_TOLERANCE {
        return Err(Error::NotUnitary { error: err });
    }

    let mut work = u.clone();
    let mut right: Vec<RawNode> = Vec::new();
    let mut left: Vec<RawNode> = Vec::new();

    for i in 0..n - 1 {
        if i % 2 == 0 {
            for j in 0..=i {
                // null work[row, col] against column col + 1
                let (row, col) = (n - 1 - j, i - j);
                let a = work[(row, col)];
                let b = work[(row, col + 1)];
                let theta = 2.0 * b.norm().atan2(a.norm());
                let phi = a.arg() - b.arg() + std::f64::consts::PI;
                work.apply_right_2x2(col, &dagger(&ideal_block(theta, phi)));
                right.push(RawNode {
                    top_mode: col,
                    theta,
                    phi,
                });
            }
        } else {
            for j in 1..=i + 1 {
                // null work[p + 1, col] against row p
                let (p, col) = (n + j - i - 3, j - 1);
                let a = work[(p, col)];
                let b = work[(p + 1, col)];
                let theta = 2.0 * a.norm().atan2(b.norm());
                let phi = b.arg() - a.arg();
                work.apply_left_2x2(p, &ideal_block(theta, phi));
                left.push(RawNode {
                    top_mode: p,
                    theta,
                    phi,
                });
            }
        }
    }

    // work is now diagonal: L_k…L_1 · U · R_1ᴴ…R_nᴴ = D.
    // Rewrite each L_iᴴ·D as D'·T(θ, φ') so that U = D_out · T'_1…T'_k · R_n…R_1.
    let mut diag: Vec<Complex64> = (0..n).map(|i| work[(i, i)]).collect();
    let mut pushed = Vec::with_capacity(left.len());
    for node in left.iter().rev() {
        let p = node.top_mode;
        let (d1, d2) = (diag[p], diag[p + 1]);
        let phi_new = d1.arg() - d2.arg();
        let g = -Complex64::cis(-node.theta);
        diag[p] = g * Complex64::cis(-node.phi) * d2;
        diag[p + 1] = g * d2;
        pushed.push(RawNode {
            top_mode: p,
            theta: node.theta,
            phi: phi_new,
        });
    }

    let ordered: Vec<RawNode> = right.into_iter().chain(pushed).collect();
    let mut frontier: Vec<Option<usize>> = vec![None; n];
    let mut nodes = Vec::with_capacity(ordered.len());
    for raw in ordered {
        let m = raw.top_mode;
        let earliest = match (frontier[m], frontier[m + 1]) {
            (None, None) => 0,
            (a, b) => a.max(b).map_or(0, |l| l + 1),
        };
        let layer = if earliest % 2 == m % 2 { earliest } else { earliest + 1 };
        frontier[m] = Some(layer);
        frontier[m + 1] = Some(layer);
        nodes.push(MziNode::ideal(layer, m, PhasePair::new(raw.theta, raw.phi)));
    }
    // nodes within one layer act on disjoint modes, so a stable sort keeps the product
    nodes.sort_by_key(|node| node.layer);

    let plan = MeshPlan {
        n,
        nodes,
        phase_screen: diag.iter().map(|d| wrap_phase(d.arg())).collect(),
    };
    plan.validate()?;
    let residual = mesh_to_unitary(&plan).sub(u)?.frobenius_norm();
    if residual > tol {
        return Err(invalid(format!(
            "decomposition residual {residual:.3e} exceeds tolerance {tol:.3e}"
        )));
    }
    Ok(plan)
}

/// Position of one MZI on the placement grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridSlot {
    pub layer: usize,
    pub top_mode: usize,
    pub grid_x: usize,
    pub grid_y: usize,
}

/// Grid extent in unit cells.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape {
    pub width: usize,
    pub height: usize,
}

impl GridShape {
    pub fn for_modes(n: usize) -> Self {
        Self {
            width: 2 * n,
            height: n.saturating_sub(1),
        }
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }
}

/// Placement of every MZI of a full `n`-mode mesh, in layer order.
pub fn grid_layout(n: usize) -> Vec<GridSlot> {
    let mut slots = Vec::with_capacity(MeshPlan::full_node_count(n));
    for layer in 0..n {
        let mut m = layer % 2;
        while m + 1 < n {
            slots.push(GridSlot {
                layer,
                top_mode: m,
                grid_x: 2 * layer,
                grid_y: m,
            });
            m += 2;
        }
    }
    slots
}

/// Per-channel attenuation plus one global gain realising a set of
/// singular values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalStage {
    pub scalars: Vec<f64>,
    pub gain: f64,
}

impl DiagonalStage {
    /// `gain · scalars`.
    pub fn values(&self) -> Vec<f64> {
        self.scalars.iter().map(|s| s * self.gain).collect()
    }

    /// Internal phase of the attenuating MZI for each channel.
    pub fn attenuator_thetas(&self) -> Vec<f64> {
        self.scalars.iter().map(|&s| attenuator_theta(s)).collect()
    }
}

/// Internal phase giving a single-port MZI transmission of `scalar`
/// (`|e^{iθ} − 1| / 2 = sin(θ/2)`).
pub fn attenuator_theta(scalar: f64) -> f64 {
    2.0 * scalar.clamp(0.0, 1.0).asin()
}

/// Splits singular values into unit-bounded scalars and a global gain.
pub fn diagonal_stage(singular_values: &[f64]) -> Result<DiagonalStage> {
    if let Some(v) = singular_values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
        return Err(invalid(format!(
            "singular values must be finite and non-negative, got {v}"
        )));
    }
    let max = singular_values.iter().copied().fold(0.0, f64::max);
    let gain = if max > 0.0 { max } else { 1.0 };
    Ok(DiagonalStage {
        scalars: singular_values.iter().map(|v| (v / gain).min(1.0)).collect(),
        gain,
    })
}

/// Sum of element-wise relative deviations of `u` from `u_ref`.
pub fn rvd(u: &ComplexMatrix, u_ref: &ComplexMatrix) -> Result<f64> {
    if u.rows() != u_ref.rows() || u.cols() != u_ref.cols() {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            u.rows(),
            u.cols(),
            u_ref.rows(),
            u_ref.cols()
        )));
    }
    Ok(u.as_slice()
        .iter()
        .zip(u_ref.as_slice())
        .filter(|(_, r)| r.norm() >= RVD_EPSILON)
        .map(|(a, r)| (a - r).norm() / r.norm())
        .sum())
}
