//! Joint decomposition of layer groups.
//!
//! Every member `Wⁿ` of a group is unfolded to a matrix and approximated with
//! a factor shared across the group:
//!
//! * right-shared: `Wⁿ ≈ Uⁿ V`, one truncated SVD of the vertical stack;
//! * left-shared: `Wⁿ ≈ U Vⁿ`, one truncated SVD of the horizontal stack;
//! * dual: `Wⁿ ≈ Uⁿ V + U Vⁿ`, alternating the two stacked SVDs on residuals
//!   for a fixed number of iterations.
//!
//! Residuals are stored un-normalized, `Σₙ ‖Wⁿ − approxⁿ‖²_F`.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, solve_least_squares, solve_least_squares_right};
use crate::random;
use crate::tensor::{fold, stack_horizontal, stack_vertical, unfold, Matrix, Shape4, Tensor4};

/// Iteration count used when none is given.
pub const DEFAULT_ITERATIONS: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Rjsvd,
    Ljsvd,
    Bijsvd,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Rjsvd => "rjsvd",
            Method::Ljsvd => "ljsvd",
            Method::Bijsvd => "bijsvd",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rjsvd" => Ok(Method::Rjsvd),
            "ljsvd" => Ok(Method::Ljsvd),
            "bijsvd" => Ok(Method::Bijsvd),
            other => Err(Error::InvalidParameter(format!(
                "unknown method `{other}` (expected rjsvd, ljsvd or bijsvd)"
            ))),
        }
    }
}

/// An ordered set of tensors decomposed together.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGroup {
    group_id: usize,
    members: Vec<(String, Tensor4)>,
}

impl LayerGroup {
    pub fn new(group_id: usize, members: Vec<(String, Tensor4)>) -> Result<Self> {
        if members.is_empty() {
            return Err(Error::EmptyGroup { group_id });
        }
        let mut seen = HashSet::new();
        for (name, _) in &members {
            if !seen.insert(name.as_str()) {
                return Err(Error::DuplicateName(name.clone()));
            }
        }
        Ok(LayerGroup { group_id, members })
    }

    pub fn group_id(&self) -> usize {
        self.group_id
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn members(&self) -> &[(String, Tensor4)] {
        &self.members
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.members.iter().map(|(n, _)| n.as_str())
    }

    pub fn shapes(&self) -> Vec<Shape4> {
        self.members.iter().map(|(_, t)| t.shape()).collect()
    }

    pub fn unfolded(&self) -> Vec<Matrix> {
        self.members.iter().map(|(_, t)| unfold(t)).collect()
    }

    /// The same group with every member's unfolding transposed.
    pub fn swap_roles(&self) -> LayerGroup {
        LayerGroup {
            group_id: self.group_id,
            members: self
                .members
                .iter()
                .map(|(n, t)| (n.clone(), t.swap_roles()))
                .collect(),
        }
    }

    /// Checks the group against `method`'s stacking rule, naming the first
    /// member that disagrees with member 0.
    pub fn check_compatible(&self, method: Method) -> Result<()> {
        check_shapes(self.group_id, &self.named_shapes(), method)
    }

    fn named_shapes(&self) -> Vec<(&str, Shape4)> {
        self.members.iter().map(|(n, t)| (n.as_str(), t.shape())).collect()
    }
}

/// Compatibility rule shared by in-memory groups and manifests.
pub fn check_shapes(group_id: usize, members: &[(&str, Shape4)], method: Method) -> Result<()> {
    let Some(&(first_name, first)) = members.first() else {
        return Err(Error::EmptyGroup { group_id });
    };
    for &(name, shape) in &members[1..] {
        let cols_differ = shape.unfolded_cols() != first.unfolded_cols();
        let rows_differ = shape.unfolded_rows() != first.unfolded_rows();
        let reason = match method {
            Method::Rjsvd if cols_differ => Some(format!(
                "F2*O = {} but `{first_name}` has {}",
                shape.unfolded_cols(),
                first.unfolded_cols()
            )),
            Method::Ljsvd if rows_differ => Some(format!(
                "F1*I = {} but `{first_name}` has {}",
                shape.unfolded_rows(),
                first.unfolded_rows()
            )),
            Method::Bijsvd if cols_differ || rows_differ => Some(format!(
                "unfolds to {}x{} but `{first_name}` unfolds to {}x{}",
                shape.unfolded_rows(),
                shape.unfolded_cols(),
                first.unfolded_rows(),
                first.unfolded_cols()
            )),
            _ => None,
        };
        if let Some(reason) = reason {
            return Err(Error::Incompatible {
                group_id,
                member: name.to_string(),
                method: method.as_str(),
                reason,
            });
        }
    }
    Ok(())
}

/// `Wⁿ ≈ Uⁿ V` with `V` shared.
#[derive(Debug, Clone, PartialEq)]
pub struct RightSharedFactorization {
    /// `r x F2O`.
    pub shared_v: Matrix,
    /// `F1ⁿIⁿ x r`, one per member.
    pub member_us: Vec<Matrix>,
    pub rank_r: usize,
    pub residual_sq: f64,
}

/// `Wⁿ ≈ U Vⁿ` with `U` shared.
#[derive(Debug, Clone, PartialEq)]
pub struct LeftSharedFactorization {
    /// `F1I x r`.
    pub shared_u: Matrix,
    /// `r x F2ⁿOⁿ`, one per member.
    pub member_vs: Vec<Matrix>,
    pub rank_l: usize,
    pub residual_sq: f64,
}

/// `Wⁿ ≈ Uⁿ V + U Vⁿ`.
///
/// `right.residual_sq` and `left.residual_sq` hold the objective right after
/// the last right-shared and left-shared steps respectively.
#[derive(Debug, Clone, PartialEq)]
pub struct DualFactorization {
    pub right: RightSharedFactorization,
    pub left: LeftSharedFactorization,
    pub iterations: usize,
    /// Objective after initialization and after each full iteration.
    pub objective_trace: Vec<f64>,
}

impl DualFactorization {
    pub fn residual_sq(&self) -> f64 {
        *self.objective_trace.last().expect("trace has at least two entries")
    }
}

/// Common view over the three factorization kinds.
pub trait Factorization {
    fn member_count(&self) -> usize;

    /// The unfolded approximation of member `n`.
    fn approximation(&self, n: usize) -> Result<Matrix>;

    fn residual_sq(&self) -> f64;

    fn check_index(&self, n: usize) -> Result<()> {
        if n >= self.member_count() {
            return Err(Error::IndexOutOfRange {
                index: n,
                len: self.member_count(),
            });
        }
        Ok(())
    }
}

impl Factorization for RightSharedFactorization {
    fn member_count(&self) -> usize {
        self.member_us.len()
    }

    fn approximation(&self, n: usize) -> Result<Matrix> {
        self.check_index(n)?;
        self.member_us[n].matmul(&self.shared_v)
    }

    fn residual_sq(&self) -> f64 {
        self.residual_sq
    }
}

impl Factorization for LeftSharedFactorization {
    fn member_count(&self) -> usize {
        self.member_vs.len()
    }

    fn approximation(&self, n: usize) -> Result<Matrix> {
        self.check_index(n)?;
        self.shared_u.matmul(&self.member_vs[n])
    }

    fn residual_sq(&self) -> f64 {
        self.residual_sq
    }
}

impl Factorization for DualFactorization {
    fn member_count(&self) -> usize {
        self.right.member_count()
    }

    fn approximation(&self, n: usize) -> Result<Matrix> {
        self.right.approximation(n)?.add(&self.left.approximation(n)?)
    }

    fn residual_sq(&self) -> f64 {
        DualFactorization::residual_sq(self)
    }
}

/// Any of the three factorization kinds, tagged by method.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupFactorization {
    Right(RightSharedFactorization),
    Left(LeftSharedFactorization),
    Dual(DualFactorization),
}

impl GroupFactorization {
    pub fn method(&self) -> Method {
        match self {
            GroupFactorization::Right(_) => Method::Rjsvd,
            GroupFactorization::Left(_) => Method::Ljsvd,
            GroupFactorization::Dual(_) => Method::Bijsvd,
        }
    }

    /// `(r_r, r_l)`.
    pub fn ranks(&self) -> (usize, usize) {
        match self {
            GroupFactorization::Right(f) => (f.rank_r, 0),
            GroupFactorization::Left(f) => (0, f.rank_l),
            GroupFactorization::Dual(f) => (f.right.rank_r, f.left.rank_l),
        }
    }

    /// The right-shared part, if any.
    pub fn right(&self) -> Option<&RightSharedFactorization> {
        match self {
            GroupFactorization::Right(f) => Some(f),
            GroupFactorization::Dual(f) if f.right.rank_r > 0 => Some(&f.right),
            _ => None,
        }
    }

    /// The left-shared part, if any.
    pub fn left(&self) -> Option<&LeftSharedFactorization> {
        match self {
            GroupFactorization::Left(f) => Some(f),
            GroupFactorization::Dual(f) if f.left.rank_l > 0 => Some(&f.left),
            _ => None,
        }
    }
}

impl Factorization for GroupFactorization {
    fn member_count(&self) -> usize {
        match self {
            GroupFactorization::Right(f) => f.member_count(),
            GroupFactorization::Left(f) => f.member_count(),
            GroupFactorization::Dual(f) => f.member_count(),
        }
    }

    fn approximation(&self, n: usize) -> Result<Matrix> {
        match self {
            GroupFactorization::Right(f) => f.approximation(n),
            GroupFactorization::Left(f) => f.approximation(n),
            GroupFactorization::Dual(f) => f.approximation(n),
        }
    }

    fn residual_sq(&self) -> f64 {
        match self {
            GroupFactorization::Right(f) => f.residual_sq,
            GroupFactorization::Left(f) => f.residual_sq,
            GroupFactorization::Dual(f) => f.residual_sq(),
        }
    }
}

fn check_rank(rank: usize, max: usize) -> Result<()> {
    if rank == 0 || rank > max {
        return Err(Error::RankOutOfRange { rank, max });
    }
    Ok(())
}

/// Right-shared step on unfolded members. `r = 0` yields empty factors and
/// leaves the whole energy as residual.
fn right_step(ws: &[Matrix], r: usize) -> Result<RightSharedFactorization> {
    let stacked = stack_vertical(ws)?;
    let (pair, residual_sq) = if r == 0 {
        let empty = linalg::TruncatedPair {
            u: Matrix::zeros(stacked.rows(), 0),
            v: Matrix::zeros(0, stacked.cols()),
            rank: 0,
        };
        (empty, stacked.frobenius_norm_sq())
    } else {
        let d = linalg::svd(&stacked)?;
        (d.truncate_or_empty(r)?, d.discarded_energy(r))
    };
    let mut member_us = Vec::with_capacity(ws.len());
    let mut start = 0;
    for w in ws {
        member_us.push(pair.u.row_block(start, w.rows()));
        start += w.rows();
    }
    Ok(RightSharedFactorization {
        shared_v: pair.v,
        member_us,
        rank_r: r,
        residual_sq,
    })
}

fn left_step(ws: &[Matrix], r: usize) -> Result<LeftSharedFactorization> {
    let stacked = stack_horizontal(ws)?;
    let (pair, residual_sq) = if r == 0 {
        let empty = linalg::TruncatedPair {
            u: Matrix::zeros(stacked.rows(), 0),
            v: Matrix::zeros(0, stacked.cols()),
            rank: 0,
        };
        (empty, stacked.frobenius_norm_sq())
    } else {
        let d = linalg::svd(&stacked)?;
        (d.truncate_or_empty(r)?, d.discarded_energy(r))
    };
    let mut member_vs = Vec::with_capacity(ws.len());
    let mut start = 0;
    for w in ws {
        member_vs.push(pair.v.col_block(start, w.cols()));
        start += w.cols();
    }
    Ok(LeftSharedFactorization {
        shared_u: pair.u,
        member_vs,
        rank_l: r,
        residual_sq,
    })
}

/// Right-shared decomposition of already-unfolded members (all sharing a
/// column count).
pub fn rjsvd_unfolded(ws: &[Matrix], r: usize) -> Result<RightSharedFactorization> {
    let rows: usize = ws.iter().map(Matrix::rows).sum();
    let cols = ws.first().ok_or(Error::EmptyStack)?.cols();
    check_rank(r, rows.min(cols))?;
    right_step(ws, r)
}

/// Left-shared decomposition of already-unfolded members (all sharing a row
/// count).
pub fn ljsvd_unfolded(ws: &[Matrix], r: usize) -> Result<LeftSharedFactorization> {
    let rows = ws.first().ok_or(Error::EmptyStack)?.rows();
    let cols: usize = ws.iter().map(Matrix::cols).sum();
    check_rank(r, rows.min(cols))?;
    left_step(ws, r)
}

pub fn rjsvd(group: &LayerGroup, r: usize) -> Result<RightSharedFactorization> {
    group.check_compatible(Method::Rjsvd)?;
    rjsvd_unfolded(&group.unfolded(), r)
}

pub fn ljsvd(group: &LayerGroup, r: usize) -> Result<LeftSharedFactorization> {
    group.check_compatible(Method::Ljsvd)?;
    ljsvd_unfolded(&group.unfolded(), r)
}

/// Largest admissible `(r_r, r_l)` for a dual decomposition of `n` members
/// that unfold to `rows x cols`.
pub fn dual_rank_bounds(n: usize, rows: usize, cols: usize) -> (usize, usize) {
    ((n * rows).min(cols), rows.min(n * cols))
}

fn objective(ws: &[Matrix], right: &RightSharedFactorization, left: &LeftSharedFactorization) -> Result<f64> {
    let mut total = 0.0;
    for (n, w) in ws.iter().enumerate() {
        let approx = right.approximation(n)?.add(&left.approximation(n)?)?;
        total += w.sub(&approx)?.frobenius_norm_sq();
    }
    Ok(total)
}

/// Dual decomposition of already-unfolded members of identical shape.
pub fn bijsvd_unfolded(ws: &[Matrix], r_r: usize, r_l: usize, k: usize) -> Result<DualFactorization> {
    let first = ws.first().ok_or(Error::EmptyStack)?;
    let (rows, cols) = first.dims();
    if ws.iter().any(|w| w.dims() != (rows, cols)) {
        return Err(Error::DimensionMismatch(
            "dual decomposition needs members of identical unfolded shape".into(),
        ));
    }
    if k == 0 {
        return Err(Error::ZeroIterations);
    }
    let (max_r, max_l) = dual_rank_bounds(ws.len(), rows, cols);
    if r_r + r_l == 0 {
        return Err(Error::RankOutOfRange {
            rank: 0,
            max: max_r + max_l,
        });
    }
    if r_r > max_r {
        return Err(Error::RankOutOfRange { rank: r_r, max: max_r });
    }
    if r_l > max_l {
        return Err(Error::RankOutOfRange { rank: r_l, max: max_l });
    }

    let n = ws.len();
    let mut left = LeftSharedFactorization {
        shared_u: Matrix::zeros(rows, r_l),
        member_vs: vec![Matrix::zeros(r_l, cols); n],
        rank_l: r_l,
        residual_sq: 0.0,
    };
    let mut right = RightSharedFactorization {
        shared_v: Matrix::zeros(r_r, cols),
        member_us: vec![Matrix::zeros(rows, r_r); n],
        rank_r: r_r,
        residual_sq: 0.0,
    };
    let mut trace = Vec::with_capacity(k + 1);
    trace.push(objective(ws, &right, &left)?);

    for _ in 0..k {
        let residual: Vec<Matrix> = ws
            .iter()
            .enumerate()
            .map(|(i, w)| w.sub(&left.approximation(i)?))
            .collect::<Result<_>>()?;
        right = right_step(&residual, r_r)?;

        let residual: Vec<Matrix> = ws
            .iter()
            .enumerate()
            .map(|(i, w)| w.sub(&right.approximation(i)?))
            .collect::<Result<_>>()?;
        left = left_step(&residual, r_l)?;

        trace.push(objective(ws, &right, &left)?);
    }

    Ok(DualFactorization {
        right,
        left,
        iterations: k,
        objective_trace: trace,
    })
}

pub fn bijsvd(group: &LayerGroup, r_r: usize, r_l: usize, k: usize) -> Result<DualFactorization> {
    group.check_compatible(Method::Bijsvd)?;
    bijsvd_unfolded(&group.unfolded(), r_r, r_l, k)
}

/// Decomposes `group` with `method`. For the single-sided methods the rank of
/// the unused side must be zero; `k` is only used by the dual method.
pub fn decompose(group: &LayerGroup, method: Method, r_r: usize, r_l: usize, k: usize) -> Result<GroupFactorization> {
    match method {
        Method::Rjsvd => {
            if r_l != 0 {
                return Err(Error::InvalidParameter("rjsvd takes no left rank".into()));
            }
            rjsvd(group, r_r).map(GroupFactorization::Right)
        }
        Method::Ljsvd => {
            if r_r != 0 {
                return Err(Error::InvalidParameter("ljsvd takes no right rank".into()));
            }
            ljsvd(group, r_l).map(GroupFactorization::Left)
        }
        Method::Bijsvd => bijsvd(group, r_r, r_l, k).map(GroupFactorization::Dual),
    }
}

/// Right-shared decomposition by alternating least squares from a seeded
/// random start:
///
/// ```text
/// V  = (1/N) Σₙ (UⁿᵀUⁿ)⁻¹ Uⁿᵀ Wⁿ
/// Uⁿ = Wⁿ Vᵀ (V Vᵀ)⁻¹
/// ```
///
/// The averaged `V` update is not the exact joint minimizer for `N > 1`, so
/// the residual is not guaranteed to decrease monotonically. Meant as a
/// cross-check against [`rjsvd`].
pub fn rjsvd_als(group: &LayerGroup, r: usize, iters: usize, seed: u64) -> Result<RightSharedFactorization> {
    group.check_compatible(Method::Bijsvd)?;
    if iters == 0 {
        return Err(Error::ZeroIterations);
    }
    let ws = group.unfolded();
    let (rows, cols) = ws[0].dims();
    check_rank(r, rows.min(cols))?;

    let mut rng = random::rng(seed);
    let mut us: Vec<Matrix> = ws
        .iter()
        .map(|_| Matrix::new(rows, r, random::normal_vec(&mut rng, rows * r)))
        .collect::<Result<_>>()?;
    let mut v = Matrix::zeros(r, cols);
    let scale = 1.0 / ws.len() as f64;
    for _ in 0..iters {
        let mut acc = Matrix::zeros(r, cols);
        for (u, w) in us.iter().zip(&ws) {
            acc = acc.add(&solve_least_squares(u, w)?)?;
        }
        v = acc.scale(scale);
        for (u, w) in us.iter_mut().zip(&ws) {
            *u = solve_least_squares_right(&v, w)?;
        }
    }
    let mut residual_sq = 0.0;
    for (u, w) in us.iter().zip(&ws) {
        residual_sq += w.sub(&u.matmul(&v)?)?.frobenius_norm_sq();
    }
    Ok(RightSharedFactorization {
        shared_v: v,
        member_us: us,
        rank_r: r,
        residual_sq,
    })
}

/// Folds member `n`'s approximation back to a kernel of `shape`.
pub fn reconstruct_member(f: &impl Factorization, n: usize, shape: Shape4) -> Result<Tensor4> {
    let m = f.approximation(n)?;
    if m.dims() != (shape.unfolded_rows(), shape.unfolded_cols()) {
        return Err(Error::ShapeMismatch(format!(
            "member {n} approximates a {}x{} matrix, which does not fold to {shape}",
            m.rows(),
            m.cols()
        )));
    }
    fold(&m, shape)
}
