//! The original coupled multi-agent system, its subpopulation layout, random
//! partially-exchangeable instances, and the exchangeability check.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::decomp::{self, ExchangeableBlocks};
use crate::error::{Error, Result};
use crate::matlin::{spectral_radius, Mat, SymMat};

/// Stability target for generated open-loop dynamics (global and auxiliary).
pub const GENERATED_RHO_TARGET: f64 = 0.9;
/// Minimum eigenvalue enforced on generated auxiliary cost matrices.
pub const GENERATED_PD_MARGIN: f64 = 0.1;

/// Agents grouped into `L` exchangeable subpopulations. Agents are laid out in
/// the global state (and action) vector subpopulation by subpopulation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PartitionRepr", into = "PartitionRepr")]
pub struct SubpopulationPartition {
    sizes: Vec<usize>,
    state_dims: Vec<usize>,
    action_dims: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PartitionRepr {
    sizes: Vec<usize>,
    state_dims: Vec<usize>,
    action_dims: Vec<usize>,
}

impl TryFrom<PartitionRepr> for SubpopulationPartition {
    type Error = Error;
    fn try_from(r: PartitionRepr) -> Result<Self> {
        SubpopulationPartition::new(r.sizes, r.state_dims, r.action_dims)
    }
}

impl From<SubpopulationPartition> for PartitionRepr {
    fn from(p: SubpopulationPartition) -> Self {
        PartitionRepr {
            sizes: p.sizes,
            state_dims: p.state_dims,
            action_dims: p.action_dims,
        }
    }
}

impl SubpopulationPartition {
    pub fn new(sizes: Vec<usize>, state_dims: Vec<usize>, action_dims: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidArgument("partition needs at least one subpopulation".into()));
        }
        if sizes.len() != state_dims.len() || sizes.len() != action_dims.len() {
            return Err(Error::InvalidArgument(format!(
                "partition lists differ in length: sizes {}, state_dims {}, action_dims {}",
                sizes.len(),
                state_dims.len(),
                action_dims.len()
            )));
        }
        if sizes.iter().chain(&state_dims).chain(&action_dims).any(|&x| x == 0) {
            return Err(Error::InvalidArgument("partition entries must be positive".into()));
        }
        Ok(SubpopulationPartition {
            sizes,
            state_dims,
            action_dims,
        })
    }

    /// `L` subpopulations of identical agents with state dimension `d` and
    /// action dimension `k`.
    pub fn uniform(sizes: Vec<usize>, d: usize, k: usize) -> Result<Self> {
        let l = sizes.len();
        SubpopulationPartition::new(sizes, vec![d; l], vec![k; l])
    }

    pub fn num_subpopulations(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn state_dims(&self) -> &[usize] {
        &self.state_dims
    }

    pub fn action_dims(&self) -> &[usize] {
        &self.action_dims
    }

    pub fn size(&self, l: usize) -> usize {
        self.sizes[l]
    }

    pub fn state_dim(&self, l: usize) -> usize {
        self.state_dims[l]
    }

    pub fn action_dim(&self, l: usize) -> usize {
        self.action_dims[l]
    }

    pub fn num_agents(&self) -> usize {
        self.sizes.iter().sum()
    }

    /// Total state dimension `D = Σ_l |N^l| d_l`.
    pub fn total_state_dim(&self) -> usize {
        self.sizes.iter().zip(&self.state_dims).map(|(n, d)| n * d).sum()
    }

    pub fn total_action_dim(&self) -> usize {
        self.sizes.iter().zip(&self.action_dims).map(|(n, k)| n * k).sum()
    }

    /// Dimension of the stacked mean-field state `Σ_l d_l`.
    pub fn mean_state_dim(&self) -> usize {
        self.state_dims.iter().sum()
    }

    pub fn mean_action_dim(&self) -> usize {
        self.action_dims.iter().sum()
    }

    /// Offset of subpopulation `l`'s first agent in the global state vector.
    pub fn state_offset(&self, l: usize) -> usize {
        (0..l).map(|j| self.sizes[j] * self.state_dims[j]).sum()
    }

    pub fn action_offset(&self, l: usize) -> usize {
        (0..l).map(|j| self.sizes[j] * self.action_dims[j]).sum()
    }

    /// Offset of agent `i` of subpopulation `l` in the global state vector.
    pub fn agent_state_offset(&self, l: usize, i: usize) -> usize {
        self.state_offset(l) + i * self.state_dims[l]
    }

    pub fn agent_action_offset(&self, l: usize, i: usize) -> usize {
        self.action_offset(l) + i * self.action_dims[l]
    }

    /// Offset of `x̄^l` inside the stacked mean-field state.
    pub fn mean_state_offset(&self, l: usize) -> usize {
        self.state_dims[..l].iter().sum()
    }

    pub fn mean_action_offset(&self, l: usize) -> usize {
        self.action_dims[..l].iter().sum()
    }

    /// `(subpopulation, index within it)` for every agent in layout order.
    pub fn agents(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.sizes
            .iter()
            .enumerate()
            .flat_map(|(l, &n)| (0..n).map(move |i| (l, i)))
    }
}

/// `x_{t+1} = A x_t + B u_t + w_t` with stage cost `xᵀQx + uᵀRu`. The noise of
/// every agent in subpopulation `l` is independent `N(0, W_l)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SystemRepr", into = "SystemRepr")]
pub struct GlobalLqrSystem {
    a: Mat,
    b: Mat,
    q: SymMat,
    r: SymMat,
    w_noise: Vec<SymMat>,
    partition: SubpopulationPartition,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemRepr {
    partition: SubpopulationPartition,
    #[serde(rename = "A")]
    a: Mat,
    #[serde(rename = "B")]
    b: Mat,
    #[serde(rename = "Q")]
    q: SymMat,
    #[serde(rename = "R")]
    r: SymMat,
    #[serde(rename = "W_noise")]
    w_noise: Vec<SymMat>,
}

impl TryFrom<SystemRepr> for GlobalLqrSystem {
    type Error = Error;
    fn try_from(r: SystemRepr) -> Result<Self> {
        GlobalLqrSystem::new(r.a, r.b, r.q, r.r, r.w_noise, r.partition)
    }
}

impl From<GlobalLqrSystem> for SystemRepr {
    fn from(s: GlobalLqrSystem) -> Self {
        SystemRepr {
            partition: s.partition,
            a: s.a,
            b: s.b,
            q: s.q,
            r: s.r,
            w_noise: s.w_noise,
        }
    }
}

impl GlobalLqrSystem {
    /// Validates the block layout against the partition, `Q, R ⪰ 0` and
    /// `W_l ≻ 0`.
    pub fn new(
        a: Mat,
        b: Mat,
        q: SymMat,
        r: SymMat,
        w_noise: Vec<SymMat>,
        partition: SubpopulationPartition,
    ) -> Result<Self> {
        let n = partition.total_state_dim();
        let m = partition.total_action_dim();
        if a.shape() != (n, n) || b.shape() != (n, m) || q.dim() != n || r.dim() != m {
            return Err(Error::dim(
                "GlobalLqrSystem::new",
                format!(
                    "partition implies A {n}x{n}, B {n}x{m}, Q {n}x{n}, R {m}x{m}; got A {:?}, B {:?}, Q {}, R {}",
                    a.shape(),
                    b.shape(),
                    q.dim(),
                    r.dim()
                ),
            ));
        }
        if w_noise.len() != partition.num_subpopulations() {
            return Err(Error::dim(
                "GlobalLqrSystem::new",
                "one noise covariance per subpopulation is required",
            ));
        }
        for (l, w) in w_noise.iter().enumerate() {
            if w.dim() != partition.state_dim(l) {
                return Err(Error::dim("GlobalLqrSystem::new", format!("W_noise[{l}] has wrong size")));
            }
            let ev = w.min_eigenvalue();
            if ev <= 0.0 {
                return Err(Error::Assumption {
                    matrix: format!("W_noise[{l}]"),
                    requirement: "positive definite",
                    min_eigenvalue: ev,
                });
            }
        }
        for (name, mat) in [("Q", &q), ("R", &r)] {
            let ev = mat.min_eigenvalue();
            if ev < -1e-10 * mat.max_abs().max(1.0) {
                return Err(Error::Assumption {
                    matrix: name.into(),
                    requirement: "positive semi-definite",
                    min_eigenvalue: ev,
                });
            }
        }
        Ok(GlobalLqrSystem {
            a,
            b,
            q,
            r,
            w_noise,
            partition,
        })
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }

    pub fn b(&self) -> &Mat {
        &self.b
    }

    pub fn q(&self) -> &SymMat {
        &self.q
    }

    pub fn r(&self) -> &SymMat {
        &self.r
    }

    pub fn w_noise(&self) -> &[SymMat] {
        &self.w_noise
    }

    pub fn partition(&self) -> &SubpopulationPartition {
        &self.partition
    }

    /// Covariance of the stacked noise `w_t`: block diagonal with one `W_l`
    /// per agent.
    pub fn noise_covariance(&self) -> SymMat {
        let blocks: Vec<SymMat> = self
            .partition
            .agents()
            .map(|(l, _)| self.w_noise[l].clone())
            .collect();
        SymMat::block_diag(&blocks)
    }

    /// `xᵀQx + uᵀRu`.
    pub fn global_cost(&self, x: &[f64], u: &[f64]) -> Result<f64> {
        if x.len() != self.q.dim() || u.len() != self.r.dim() {
            return Err(Error::dim(
                "global_cost",
                format!("expected x of {} and u of {}", self.q.dim(), self.r.dim()),
            ));
        }
        Ok(self.q.quad_form(x) + self.r.quad_form(u))
    }

    /// One noiseless step `A x + B u`.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        let mut next = self.a.mul_vec(x);
        for (n, bu) in next.iter_mut().zip(self.b.mul_vec(u)) {
            *n += bu;
        }
        next
    }

    /// Replaces a raw matrix. Intended for fault injection in tests and
    /// experiments; no exchangeability is implied.
    pub fn with_a(mut self, a: Mat) -> Result<Self> {
        if a.shape() != self.a.shape() {
            return Err(Error::dim("with_a", "shape differs"));
        }
        self.a = a;
        Ok(self)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Draws a random partially-exchangeable system.
///
/// Free blocks `a^l, ā^{l,k}, b^l, b̄^{l,k}, q^l, q̄^{l,k}, r^l, r̄^{l,k}` are
/// Gaussian with standard deviation `scale`. The dynamics are then shrunk so
/// the global `A`, every auxiliary `A_l` and the mean-field `Ā` have spectral
/// radius at most 0.9, and `Q`, `R` receive a diagonal shift so every
/// auxiliary cost matrix has minimum eigenvalue at least 0.1.
pub fn generate_system(partition: &SubpopulationPartition, seed: u64, scale: f64) -> GlobalLqrSystem {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = |rows: usize, cols: usize| -> Mat {
        Mat::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            scale * z
        })
    };
    let l_count = partition.num_subpopulations();
    let d = partition.state_dims();
    let k = partition.action_dims();
    let singleton = |l: usize| partition.size(l) == 1;

    let a_self: Vec<Mat> = (0..l_count).map(|l| gauss(d[l], d[l])).collect();
    let a_cross: Vec<Vec<Mat>> = (0..l_count)
        .map(|l| {
            (0..l_count)
                .map(|j| {
                    let m = gauss(d[l], d[j]);
                    if l == j && singleton(l) {
                        Mat::zeros(d[l], d[j])
                    } else {
                        m
                    }
                })
                .collect()
        })
        .collect();
    let b_self: Vec<Mat> = (0..l_count).map(|l| gauss(d[l], k[l])).collect();
    let b_cross: Vec<Vec<Mat>> = (0..l_count)
        .map(|l| {
            (0..l_count)
                .map(|j| {
                    let m = gauss(d[l], k[j]);
                    if l == j && singleton(l) {
                        Mat::zeros(d[l], k[j])
                    } else {
                        m
                    }
                })
                .collect()
        })
        .collect();
    let (q_self, q_cross) = symmetric_family(&mut gauss, d, partition);
    let (r_self, r_cross) = symmetric_family(&mut gauss, k, partition);
    let w_noise: Vec<SymMat> = (0..l_count)
        .map(|l| {
            let g = gauss(d[l], d[l]).scale(1.0 / scale.max(f64::MIN_POSITIVE));
            let ggt = (&g * &g.transpose()).scale(0.5 / d[l] as f64);
            SymMat::symmetrize(&ggt).add(&SymMat::identity(d[l]).scale(0.5))
        })
        .collect();

    let mut blocks = ExchangeableBlocks {
        a_self,
        a_cross,
        b_self,
        b_cross,
        q_self,
        q_cross,
        r_self,
        r_cross,
    };

    // (i) shrink the dynamics. Every auxiliary matrix is linear in the A
    // blocks, so one common factor handles them all.
    let (a_full, ..) = blocks.tile(partition);
    let mut rho_max = spectral_radius(&a_full).expect("square");
    let aux = blocks.auxiliary_matrices(partition);
    for a_l in &aux.a_l {
        rho_max = rho_max.max(spectral_radius(a_l).expect("square"));
    }
    rho_max = rho_max.max(spectral_radius(&aux.a_bar).expect("square"));
    if rho_max > GENERATED_RHO_TARGET {
        let c = GENERATED_RHO_TARGET / rho_max;
        blocks.a_self.iter_mut().for_each(|m| *m = m.scale(c));
        blocks
            .a_cross
            .iter_mut()
            .flatten()
            .for_each(|m| *m = m.scale(c));
    }

    // (ii) shift q^l and r^l by s·I: this adds s·I to every Q_l and
    // diag(|N^l| s I) to Q̄ + Q̆.
    let aux = blocks.auxiliary_matrices(partition);
    let q_shift = pd_shift(
        aux.q_l
            .iter()
            .enumerate()
            .filter(|(l, _)| !singleton(*l))
            .map(|(_, m)| m)
            .chain(std::iter::once(&aux.q_eff)),
    );
    let r_shift = pd_shift(
        aux.r_l
            .iter()
            .enumerate()
            .filter(|(l, _)| !singleton(*l))
            .map(|(_, m)| m)
            .chain(std::iter::once(&aux.r_eff)),
    );
    for l in 0..l_count {
        blocks.q_self[l] = &blocks.q_self[l] + &Mat::identity(d[l]).scale(q_shift);
        blocks.r_self[l] = &blocks.r_self[l] + &Mat::identity(k[l]).scale(r_shift);
    }

    let (a, b, q, r) = blocks.tile(partition);
    GlobalLqrSystem::new(
        a,
        b,
        SymMat::symmetrize(&q),
        SymMat::symmetrize(&r),
        w_noise,
        partition.clone(),
    )
    .expect("generated system is valid by construction")
}

type BlockFamilies = (Vec<Mat>, Vec<Vec<Mat>>);

/// Self blocks symmetric, cross blocks with `x̄^{k,l} = (x̄^{l,k})ᵀ` so the
/// tiled matrix is symmetric.
fn symmetric_family(
    gauss: &mut impl FnMut(usize, usize) -> Mat,
    dims: &[usize],
    partition: &SubpopulationPartition,
) -> BlockFamilies {
    let l_count = dims.len();
    let selfs: Vec<Mat> = dims
        .iter()
        .map(|&n| SymMat::symmetrize(&gauss(n, n)).into_mat())
        .collect();
    let mut cross: Vec<Vec<Mat>> = (0..l_count)
        .map(|l| (0..l_count).map(|j| Mat::zeros(dims[l], dims[j])).collect())
        .collect();
    for l in 0..l_count {
        for j in l..l_count {
            let m = gauss(dims[l], dims[j]);
            if l == j {
                if partition.size(l) > 1 {
                    cross[l][l] = SymMat::symmetrize(&m).into_mat();
                }
            } else {
                cross[j][l] = m.transpose();
                cross[l][j] = m;
            }
        }
    }
    (selfs, cross)
}

fn pd_shift<'a>(mats: impl Iterator<Item = &'a Mat>) -> f64 {
    mats.map(|m| SymMat::symmetrize(m).min_eigenvalue())
        .filter(|&ev| ev < GENERATED_PD_MARGIN)
        .map(|ev| ev.abs() + GENERATED_PD_MARGIN)
        .fold(0.0, f64::max)
}

/// Which family of agent blocks a deviation belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BlockFamily {
    /// Blocks `(i, i)` for agents `i` of one subpopulation.
    Diagonal { sub: usize },
    /// Blocks `(i, j)`, `i ≠ j`, both in the same subpopulation.
    OffDiagonal { sub: usize },
    /// Blocks `(i, j)` with `i` in `row_sub` and `j` in `col_sub ≠ row_sub`.
    Cross { row_sub: usize, col_sub: usize },
}

impl fmt::Display for BlockFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockFamily::Diagonal { sub } => write!(f, "({sub},{sub}) diagonal"),
            BlockFamily::OffDiagonal { sub } => write!(f, "({sub},{sub}) off-diagonal"),
            BlockFamily::Cross { row_sub, col_sub } => write!(f, "({row_sub},{col_sub}) cross"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyDeviation {
    pub matrix: String,
    pub family: BlockFamily,
    pub max_deviation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExchangeabilityReport {
    pub holds: bool,
    pub tol: f64,
    pub violations: Vec<FamilyDeviation>,
    /// Deviation of every checked family, violating or not.
    pub families: Vec<FamilyDeviation>,
}

impl ExchangeabilityReport {
    pub fn summary(&self) -> String {
        if self.holds {
            return "exchangeable".into();
        }
        self.violations
            .iter()
            .map(|v| format!("{} {} deviates by {:e}", v.matrix, v.family, v.max_deviation))
            .collect::<Vec<_>>()
            .join("; ")
    }
}

#[derive(Clone, Copy)]
enum Axis {
    State,
    Action,
}

fn axis_dims(p: &SubpopulationPartition, axis: Axis) -> &[usize] {
    match axis {
        Axis::State => p.state_dims(),
        Axis::Action => p.action_dims(),
    }
}

fn axis_offset(p: &SubpopulationPartition, axis: Axis, l: usize, i: usize) -> usize {
    match axis {
        Axis::State => p.agent_state_offset(l, i),
        Axis::Action => p.agent_action_offset(l, i),
    }
}

fn agent_block(p: &SubpopulationPartition, m: &Mat, rows: Axis, cols: Axis, (l, i): (usize, usize), (j, jj): (usize, usize)) -> Mat {
    let r0 = axis_offset(p, rows, l, i);
    let c0 = axis_offset(p, cols, j, jj);
    m.block(r0, c0, axis_dims(p, rows)[l], axis_dims(p, cols)[j])
}

fn family_deviations(p: &SubpopulationPartition, name: &str, m: &Mat, rows: Axis, cols: Axis) -> Vec<FamilyDeviation> {
    let n_sub = p.num_subpopulations();
    let mut out = Vec::new();
    for l in 0..n_sub {
        for j in 0..n_sub {
            let mut members: Vec<((usize, usize), (usize, usize))> = Vec::new();
            if l == j {
                let diag: Vec<_> = (0..p.size(l)).map(|i| ((l, i), (l, i))).collect();
                out.push(FamilyDeviation {
                    matrix: name.into(),
                    family: BlockFamily::Diagonal { sub: l },
                    max_deviation: spread(p, m, rows, cols, &diag),
                });
                for i in 0..p.size(l) {
                    for ii in 0..p.size(l) {
                        if i != ii {
                            members.push(((l, i), (l, ii)));
                        }
                    }
                }
                if !members.is_empty() {
                    out.push(FamilyDeviation {
                        matrix: name.into(),
                        family: BlockFamily::OffDiagonal { sub: l },
                        max_deviation: spread(p, m, rows, cols, &members),
                    });
                }
            } else {
                for i in 0..p.size(l) {
                    for jj in 0..p.size(j) {
                        members.push(((l, i), (j, jj)));
                    }
                }
                out.push(FamilyDeviation {
                    matrix: name.into(),
                    family: BlockFamily::Cross { row_sub: l, col_sub: j },
                    max_deviation: spread(p, m, rows, cols, &members),
                });
            }
        }
    }
    out
}

/// Largest entrywise deviation of any member block from the first one.
fn spread(p: &SubpopulationPartition, m: &Mat, rows: Axis, cols: Axis, members: &[((usize, usize), (usize, usize))]) -> f64 {
    let reference = agent_block(p, m, rows, cols, members[0].0, members[0].1);
    members[1..]
        .iter()
        .map(|&(a, b)| agent_block(p, m, rows, cols, a, b).max_abs_diff(&reference))
        .fold(0.0, f64::max)
}

/// Checks that swapping any two agents of the same subpopulation leaves `A`,
/// `B`, `Q` and `R` unchanged, family by family.
pub fn verify_partial_exchangeability(sys: &GlobalLqrSystem, tol: f64) -> Result<ExchangeabilityReport> {
    let p = sys.partition();
    let (n, m) = (p.total_state_dim(), p.total_action_dim());
    if sys.a.shape() != (n, n) || sys.b.shape() != (n, m) || sys.q.dim() != n || sys.r.dim() != m {
        return Err(Error::dim("verify_partial_exchangeability", "block layout does not match partition"));
    }
    let mut families = Vec::new();
    families.extend(family_deviations(p, "A", &sys.a, Axis::State, Axis::State));
    families.extend(family_deviations(p, "B", &sys.b, Axis::State, Axis::Action));
    families.extend(family_deviations(p, "Q", &sys.q, Axis::State, Axis::State));
    families.extend(family_deviations(p, "R", &sys.r, Axis::Action, Axis::Action));
    let violations: Vec<FamilyDeviation> = families
        .iter()
        .filter(|f| f.max_deviation > tol)
        .cloned()
        .collect();
    Ok(ExchangeabilityReport {
        holds: violations.is_empty(),
        tol,
        violations,
        families,
    })
}

/// Default tolerance for exchangeability checks on `sys`.
pub fn default_exchangeability_tol(sys: &GlobalLqrSystem) -> f64 {
    let scale = [sys.a.max_abs(), sys.b.max_abs(), sys.q.max_abs(), sys.r.max_abs()]
        .into_iter()
        .fold(1.0, f64::max);
    1e-10 * scale
}

impl GlobalLqrSystem {
    /// Representative blocks, refusing non-exchangeable systems.
    pub fn blocks(&self) -> Result<ExchangeableBlocks> {
        decomp::extract_blocks(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn transposition(p: &SubpopulationPartition, axis: Axis, l: usize, i: usize, j: usize) -> Mat {
        let n = match axis {
            Axis::State => p.total_state_dim(),
            Axis::Action => p.total_action_dim(),
        };
        let dim = axis_dims(p, axis)[l];
        let (oi, oj) = (axis_offset(p, axis, l, i), axis_offset(p, axis, l, j));
        let mut perm: Vec<usize> = (0..n).collect();
        for c in 0..dim {
            perm.swap(oi + c, oj + c);
        }
        Mat::from_fn(n, n, |r, c| if perm[r] == c { 1.0 } else { 0.0 })
    }

    #[test]
    fn partition_dimension_arithmetic() {
        let p = SubpopulationPartition::new(vec![3, 4], vec![2, 1], vec![1, 1]).unwrap();
        assert_eq!(p.total_state_dim(), 10);
        assert_eq!(p.total_action_dim(), 7);
        assert_eq!(p.mean_state_dim(), 3);
        assert_eq!(p.agent_state_offset(1, 2), 8);
        assert_eq!(p.agents().count(), 7);
        assert!(SubpopulationPartition::new(vec![1], vec![1, 2], vec![1]).is_err());
        assert!(SubpopulationPartition::new(vec![0], vec![1], vec![1]).is_err());
    }

    #[test]
    fn two_agent_scalar_blocks_are_tied() {
        let p = SubpopulationPartition::uniform(vec![2], 1, 1).unwrap();
        let sys = generate_system(&p, 7, 1.0);
        let a = sys.a();
        assert_eq!(a[(0, 0)], a[(1, 1)]);
        assert_eq!(a[(0, 1)], a[(1, 0)]);
        let rep = verify_partial_exchangeability(&sys, 0.0).unwrap();
        assert!(rep.holds, "{}", rep.summary());
    }

    #[test]
    fn generated_systems_meet_stability_and_definiteness_targets() {
        let parts = [
            SubpopulationPartition::uniform(vec![2, 3], 1, 1).unwrap(),
            SubpopulationPartition::new(vec![3, 1, 4], vec![2, 1, 3], vec![1, 2, 2]).unwrap(),
            SubpopulationPartition::new(vec![1], vec![2], vec![1]).unwrap(),
        ];
        for (s, p) in parts.iter().enumerate() {
            let sys = generate_system(p, 11 + s as u64, 1.0);
            assert!(spectral_radius(sys.a()).unwrap() <= GENERATED_RHO_TARGET + 1e-9);
            let ens = crate::decomp::build_auxiliary(&sys).unwrap();
            for (l, aux) in ens.subsystems.iter().enumerate() {
                assert!(spectral_radius(&aux.a).unwrap() <= GENERATED_RHO_TARGET + 1e-9);
                if p.size(l) > 1 {
                    assert!(aux.q.min_eigenvalue() >= GENERATED_PD_MARGIN - 1e-9);
                    assert!(aux.r.min_eigenvalue() >= GENERATED_PD_MARGIN - 1e-9);
                    assert!(aux.phi.min_eigenvalue() > 0.0);
                }
            }
            let mf = &ens.mean_field;
            assert!(spectral_radius(&mf.a_bar).unwrap() <= GENERATED_RHO_TARGET + 1e-9);
            assert!(mf.q_eff.min_eigenvalue() >= GENERATED_PD_MARGIN - 1e-9);
            assert!(mf.r_eff.min_eigenvalue() >= GENERATED_PD_MARGIN - 1e-9);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let p = SubpopulationPartition::new(vec![2, 3], vec![2, 1], vec![1, 1]).unwrap();
        assert_eq!(generate_system(&p, 5, 0.7), generate_system(&p, 5, 0.7));
        assert_ne!(generate_system(&p, 5, 0.7), generate_system(&p, 6, 0.7));
    }

    #[test]
    fn perturbation_is_reported_by_family() {
        let p = SubpopulationPartition::uniform(vec![3], 1, 1).unwrap();
        let sys = generate_system(&p, 3, 1.0);
        let mut a = sys.a().clone();
        a[(0, 1)] += 1e-3;
        let bad = sys.with_a(a).unwrap();
        let rep = verify_partial_exchangeability(&bad, 1e-6).unwrap();
        assert!(!rep.holds);
        assert_eq!(rep.violations.len(), 1);
        assert_eq!(rep.violations[0].matrix, "A");
        assert_eq!(rep.violations[0].family, BlockFamily::OffDiagonal { sub: 0 });
        assert!((rep.violations[0].max_deviation - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn permutation_oracle_on_generated_system() {
        let p = SubpopulationPartition::new(vec![3, 4], vec![2, 1], vec![1, 2]).unwrap();
        let sys = generate_system(&p, 9, 1.0);
        assert!(verify_partial_exchangeability(&sys, 0.0).unwrap().holds);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let l = rng.random_range(0..2);
            let i = rng.random_range(0..p.size(l));
            let mut j = rng.random_range(0..p.size(l));
            if j == i {
                j = (i + 1) % p.size(l);
            }
            let px = transposition(&p, Axis::State, l, i, j);
            let pu = transposition(&p, Axis::Action, l, i, j);
            let pa = &(&px * sys.a()) * &px.transpose();
            let pb = &(&px * sys.b()) * &pu.transpose();
            let pq = &(&px * sys.q().as_mat()) * &px.transpose();
            let pr = &(&pu * sys.r().as_mat()) * &pu.transpose();
            assert_eq!(&pa, sys.a());
            assert_eq!(&pb, sys.b());
            assert_eq!(&pq, sys.q().as_mat());
            assert_eq!(&pr, sys.r().as_mat());
        }
    }

    #[test]
    fn global_cost_examples() {
        let p = SubpopulationPartition::uniform(vec![2], 1, 1).unwrap();
        let sys = GlobalLqrSystem::new(
            Mat::zeros(2, 2),
            Mat::identity(2),
            SymMat::identity(2),
            SymMat::identity(2),
            vec![SymMat::scalar(1.0)],
            p,
        )
        .unwrap();
        assert_eq!(sys.global_cost(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(sys.global_cost(&[1.0, 0.0], &[0.0, 0.0]).unwrap(), 1.0);
        assert!(sys.global_cost(&[1.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let p = SubpopulationPartition::new(vec![2, 3], vec![2, 1], vec![1, 1]).unwrap();
        let sys = generate_system(&p, 21, 1.3);
        let s = sys.to_json().unwrap();
        let back = GlobalLqrSystem::from_json(&s).unwrap();
        assert_eq!(sys, back);
        assert_eq!(s, back.to_json().unwrap());
    }

    #[test]
    fn json_rejects_unknown_keys_and_bad_layout() {
        let p = SubpopulationPartition::uniform(vec![2], 1, 1).unwrap();
        let sys = generate_system(&p, 1, 1.0);
        let mut v: serde_json::Value = serde_json::from_str(&sys.to_json().unwrap()).unwrap();
        v["extra"] = serde_json::json!(1);
        assert!(serde_json::from_value::<GlobalLqrSystem>(v.clone()).is_err());
        v.as_object_mut().unwrap().remove("extra");
        v["partition"]["sizes"] = serde_json::json!([3]);
        assert!(serde_json::from_value::<GlobalLqrSystem>(v).is_err());
    }
}
