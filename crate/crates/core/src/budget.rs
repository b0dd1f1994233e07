//! Parameter, compression-factor and multiply-accumulate accounting, and rank
//! planning against a target compression factor.
//!
//! A decomposed group stores, per side:
//!
//! * right-shared (`r_r > 0`): one `F1ⁿIⁿ x r_r` factor per member plus a
//!   shared `r_r x F2O` factor;
//! * left-shared (`r_l > 0`): a shared `F1I x r_l` factor plus one
//!   `r_l x F2ⁿOⁿ` factor per member.
//!
//! The compression factor is `(Σ raw + other) / (Σ stored + other)` where
//! ungrouped layers are stored raw.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::joint::{dual_rank_bounds, Method};
use crate::tensor::Shape4;

/// A convolution layer with its spatial context. Padding is always SAME.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvLayerSpec {
    pub shape: Shape4,
    pub stride: usize,
    pub input_h: usize,
    pub input_w: usize,
}

impl ConvLayerSpec {
    pub fn output_hw(&self) -> (usize, usize) {
        (self.input_h.div_ceil(self.stride), self.input_w.div_ceil(self.stride))
    }
}

/// Multiply-accumulates of the direct convolution, `H'W'F1F2IO`.
pub fn macs_conv(layer: &ConvLayerSpec) -> u64 {
    let (oh, ow) = layer.output_hw();
    let s = layer.shape;
    (oh * ow) as u64 * s.len() as u64
}

/// Multiply-accumulates of the split (or dual split) layer,
/// `(H'W F1 I + H'W' F2 O)(r_r + r_l)`.
pub fn macs_decomposed(layer: &ConvLayerSpec, r_r: usize, r_l: usize) -> u64 {
    let (oh, ow) = layer.output_hw();
    let s = layer.shape;
    let vertical = oh * layer.input_w * s.f1 * s.i;
    let horizontal = oh * ow * s.f2 * s.o;
    (vertical + horizontal) as u64 * (r_r + r_l) as u64
}

/// How reported FLOPs relate to multiply-accumulates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlopsConvention {
    Mac,
    TwoPerMac,
}

impl FlopsConvention {
    pub fn flops(self, macs: u64) -> u64 {
        match self {
            FlopsConvention::Mac => macs,
            FlopsConvention::TwoPerMac => 2 * macs,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub name: String,
    pub conv: ConvLayerSpec,
}

/// Every weight tensor of a model plus the count of parameters that are never
/// decomposed (biases, normalization, ...).
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelSpec {
    pub layers: Vec<LayerSpec>,
    pub other_params: u64,
}

impl ModelSpec {
    fn index(&self) -> HashMap<&str, &LayerSpec> {
        self.layers.iter().map(|l| (l.name.as_str(), l)).collect()
    }
}

/// A group of layers to decompose together.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSpec {
    pub group_id: usize,
    pub method: Method,
    pub members: Vec<String>,
    /// Ranks the planner must keep as given, `(r_r, r_l)`.
    pub fixed: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanEntry {
    pub group_id: usize,
    pub method: Method,
    pub r_r: usize,
    pub r_l: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankPlan {
    pub entries: Vec<PlanEntry>,
    pub p: f64,
    pub achieved_cf: f64,
}

impl RankPlan {
    pub fn entry(&self, group_id: usize) -> Option<&PlanEntry> {
        self.entries.iter().find(|e| e.group_id == group_id)
    }
}

/// Before/after accounting of a compressed model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressionReport {
    pub params_before: u64,
    pub params_after: u64,
    pub other_params: u64,
    pub cf: f64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub flops_convention: FlopsConvention,
    pub flops_before: u64,
    pub flops_after: u64,
    pub per_group_residuals: Vec<f64>,
}

/// Splits a total rank into `(r_r, r_l)` with `r_l = round_half_up(p * total)`.
pub fn apportion_rank(r_total: usize, p: f64) -> (usize, usize) {
    let r_l = ((p * r_total as f64) + 0.5).floor() as usize;
    let r_l = r_l.min(r_total);
    (r_total - r_l, r_l)
}

/// Total parameter count of `model`.
pub fn count_params(model: &ModelSpec) -> u64 {
    model.layers.iter().map(|l| l.conv.shape.len() as u64).sum::<u64>() + model.other_params
}

/// Stored parameter count of a group decomposed with ranks `(r_r, r_l)`.
pub fn group_factor_params(shapes: &[Shape4], r_r: usize, r_l: usize) -> u64 {
    let Some(first) = shapes.first() else {
        return 0;
    };
    let mut total = 0u64;
    if r_r > 0 {
        let us: usize = shapes.iter().map(|s| s.unfolded_rows() * r_r).sum();
        total += (us + r_r * first.unfolded_cols()) as u64;
    }
    if r_l > 0 {
        let vs: usize = shapes.iter().map(|s| r_l * s.unfolded_cols()).sum();
        total += (first.unfolded_rows() * r_l + vs) as u64;
    }
    total
}

struct ResolvedGroup<'a> {
    spec: &'a GroupSpec,
    layers: Vec<&'a LayerSpec>,
}

impl ResolvedGroup<'_> {
    fn shapes(&self) -> Vec<Shape4> {
        self.layers.iter().map(|l| l.conv.shape).collect()
    }

    fn raw_params(&self) -> u64 {
        self.layers.iter().map(|l| l.conv.shape.len() as u64).sum()
    }
}

fn resolve<'a>(model: &'a ModelSpec, groups: &'a [GroupSpec]) -> Result<Vec<ResolvedGroup<'a>>> {
    let index = model.index();
    let mut owner: HashMap<&str, usize> = HashMap::new();
    let mut out = Vec::with_capacity(groups.len());
    for g in groups {
        if g.members.is_empty() {
            return Err(Error::EmptyGroup { group_id: g.group_id });
        }
        let mut layers = Vec::with_capacity(g.members.len());
        for name in &g.members {
            let layer = index.get(name.as_str()).ok_or_else(|| Error::UnknownLayer(name.clone()))?;
            if owner.insert(name.as_str(), g.group_id).is_some() {
                return Err(Error::OverlappingGroups(name.clone()));
            }
            layers.push(*layer);
        }
        out.push(ResolvedGroup { spec: g, layers });
    }
    Ok(out)
}

fn plan_ranks_for(plan: &RankPlan, group_id: usize) -> Result<(usize, usize)> {
    plan.entry(group_id)
        .map(|e| (e.r_r, e.r_l))
        .ok_or_else(|| Error::InvalidParameter(format!("plan has no entry for group {group_id}")))
}

fn totals(model: &ModelSpec, resolved: &[ResolvedGroup<'_>], ranks: &[(usize, usize)]) -> (u64, u64) {
    let before = count_params(model);
    let grouped_raw: u64 = resolved.iter().map(ResolvedGroup::raw_params).sum();
    let factors: u64 = resolved
        .iter()
        .zip(ranks)
        .map(|(g, &(r_r, r_l))| group_factor_params(&g.shapes(), r_r, r_l))
        .sum();
    (before, before - grouped_raw + factors)
}

/// Compression factor of `model` with `groups` decomposed per `plan`.
pub fn cf_for_plan(model: &ModelSpec, groups: &[GroupSpec], plan: &RankPlan) -> Result<f64> {
    let resolved = resolve(model, groups)?;
    let ranks: Vec<(usize, usize)> = groups
        .iter()
        .map(|g| plan_ranks_for(plan, g.group_id))
        .collect::<Result<_>>()?;
    let (before, after) = totals(model, &resolved, &ranks);
    Ok(before as f64 / after as f64)
}

/// Full before/after accounting. `per_group_residuals` is copied verbatim.
pub fn compression_report(
    model: &ModelSpec,
    groups: &[GroupSpec],
    plan: &RankPlan,
    per_group_residuals: Vec<f64>,
) -> Result<CompressionReport> {
    let resolved = resolve(model, groups)?;
    let ranks: Vec<(usize, usize)> = groups
        .iter()
        .map(|g| plan_ranks_for(plan, g.group_id))
        .collect::<Result<_>>()?;
    let (params_before, params_after) = totals(model, &resolved, &ranks);

    let mut grouped: HashMap<&str, (usize, usize)> = HashMap::new();
    for (g, &r) in resolved.iter().zip(&ranks) {
        for l in &g.layers {
            grouped.insert(l.name.as_str(), r);
        }
    }
    let macs_before: u64 = model.layers.iter().map(|l| macs_conv(&l.conv)).sum();
    let macs_after: u64 = model
        .layers
        .iter()
        .map(|l| match grouped.get(l.name.as_str()) {
            Some(&(r_r, r_l)) => macs_decomposed(&l.conv, r_r, r_l),
            None => macs_conv(&l.conv),
        })
        .sum();
    let convention = FlopsConvention::TwoPerMac;
    Ok(CompressionReport {
        params_before,
        params_after,
        other_params: model.other_params,
        cf: params_before as f64 / params_after as f64,
        macs_before,
        macs_after,
        flops_convention: convention,
        flops_before: convention.flops(macs_before),
        flops_after: convention.flops(macs_after),
        per_group_residuals,
    })
}

/// Report of an undecomposed model.
pub fn baseline_report(model: &ModelSpec) -> CompressionReport {
    let params = count_params(model);
    let macs: u64 = model.layers.iter().map(|l| macs_conv(&l.conv)).sum();
    let convention = FlopsConvention::TwoPerMac;
    CompressionReport {
        params_before: params,
        params_after: params,
        other_params: model.other_params,
        cf: 1.0,
        macs_before: macs,
        macs_after: macs,
        flops_convention: convention,
        flops_before: convention.flops(macs),
        flops_after: convention.flops(macs),
        per_group_residuals: Vec::new(),
    }
}

/// Ranks for one group at total rank `r` (single-sided methods use it whole).
fn split_for(method: Method, r: usize, p: f64) -> (usize, usize) {
    match method {
        Method::Rjsvd => (r, 0),
        Method::Ljsvd => (0, r),
        Method::Bijsvd => apportion_rank(r, p),
    }
}

/// Whether `(r_r, r_l)` respects the stacked-matrix bounds of the group.
fn within_bounds(method: Method, shapes: &[Shape4], r_r: usize, r_l: usize) -> bool {
    let n = shapes.len();
    let first = shapes[0];
    match method {
        Method::Rjsvd => {
            let rows: usize = shapes.iter().map(|s| s.unfolded_rows()).sum();
            r_l == 0 && r_r >= 1 && r_r <= rows.min(first.unfolded_cols())
        }
        Method::Ljsvd => {
            let cols: usize = shapes.iter().map(|s| s.unfolded_cols()).sum();
            r_r == 0 && r_l >= 1 && r_l <= cols.min(first.unfolded_rows())
        }
        Method::Bijsvd => {
            let (max_r, max_l) = dual_rank_bounds(n, first.unfolded_rows(), first.unfolded_cols());
            r_r + r_l >= 1 && r_r <= max_r && r_l <= max_l
        }
    }
}

/// Largest total rank that stays within the stacking bounds and stores no
/// more parameters than the raw group (at least 1).
pub fn max_admissible_rank(method: Method, shapes: &[Shape4], p: f64) -> usize {
    let raw: u64 = shapes.iter().map(|s| s.len() as u64).sum();
    let upper = match method {
        Method::Rjsvd => shapes.iter().map(|s| s.unfolded_rows()).sum::<usize>(),
        Method::Ljsvd => shapes.iter().map(|s| s.unfolded_cols()).sum::<usize>(),
        Method::Bijsvd => {
            let (a, b) = dual_rank_bounds(shapes.len(), shapes[0].unfolded_rows(), shapes[0].unfolded_cols());
            a + b
        }
    };
    (1..=upper)
        .rev()
        .find(|&r| {
            let (r_r, r_l) = split_for(method, r, p);
            within_bounds(method, shapes, r_r, r_l) && group_factor_params(shapes, r_r, r_l) <= raw
        })
        .unwrap_or(1)
}

/// Chooses ranks so the model reaches at least `target_cf`.
///
/// Every free group gets `max(1, floor(φ · r_max))` of its
/// [`max_admissible_rank`], with a single fraction `φ ∈ (0, 1]` shared by all
/// groups and found by bisection as the largest that still meets the target.
/// Dual groups split their total with [`apportion_rank`].
pub fn plan_ranks(model: &ModelSpec, groups: &[GroupSpec], p: f64, target_cf: f64) -> Result<RankPlan> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("p = {p} is outside [0, 1]")));
    }
    if !(target_cf.is_finite() && target_cf > 0.0) {
        return Err(Error::InvalidParameter(format!("target compression factor {target_cf} must be positive")));
    }
    if groups.is_empty() {
        return Err(Error::InvalidParameter("no groups to plan".into()));
    }
    let resolved = resolve(model, groups)?;
    let maxima: Vec<usize> = resolved
        .iter()
        .map(|g| max_admissible_rank(g.spec.method, &g.shapes(), p))
        .collect();

    let ranks_at = |phi: f64| -> Vec<(usize, usize)> {
        resolved
            .iter()
            .zip(&maxima)
            .map(|(g, &max)| match g.spec.fixed {
                Some(r) => r,
                None => {
                    let r = ((phi * max as f64).floor() as usize).clamp(1, max);
                    split_for(g.spec.method, r, p)
                }
            })
            .collect()
    };
    let cf_at = |ranks: &[(usize, usize)]| {
        let (before, after) = totals(model, &resolved, ranks);
        before as f64 / after as f64
    };

    for (g, r) in resolved.iter().zip(ranks_at(0.0)) {
        if !within_bounds(g.spec.method, &g.shapes(), r.0, r.1) {
            return Err(Error::RankOutOfRange {
                rank: r.0 + r.1,
                max: max_admissible_rank(g.spec.method, &g.shapes(), p),
            });
        }
    }

    let floor_cf = cf_at(&ranks_at(0.0));
    if floor_cf < target_cf {
        return Err(Error::InfeasibleTarget {
            target: target_cf,
            max: floor_cf,
        });
    }

    let phi = if cf_at(&ranks_at(1.0)) >= target_cf {
        1.0
    } else {
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if cf_at(&ranks_at(mid)) >= target_cf {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    };

    let ranks = ranks_at(phi);
    let achieved_cf = cf_at(&ranks);
    let entries = resolved
        .iter()
        .zip(ranks)
        .map(|(g, (r_r, r_l))| PlanEntry {
            group_id: g.spec.group_id,
            method: g.spec.method,
            r_r,
            r_l,
        })
        .collect();
    Ok(RankPlan {
        entries,
        p,
        achieved_cf,
    })
}

/// Plan with the same `(r_r, r_l)` for every group.
pub fn uniform_plan(model: &ModelSpec, groups: &[GroupSpec], p: f64, ranks: &BTreeMap<usize, (usize, usize)>) -> Result<RankPlan> {
    let entries: Vec<PlanEntry> = groups
        .iter()
        .map(|g| {
            let (r_r, r_l) = ranks
                .get(&g.group_id)
                .copied()
                .ok_or_else(|| Error::InvalidParameter(format!("no ranks for group {}", g.group_id)))?;
            Ok(PlanEntry {
                group_id: g.group_id,
                method: g.method,
                r_r,
                r_l,
            })
        })
        .collect::<Result<_>>()?;
    let mut plan = RankPlan {
        entries,
        p,
        achieved_cf: 0.0,
    };
    plan.achieved_cf = cf_for_plan(model, groups, &plan)?;
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(f1: usize, f2: usize, i: usize, o: usize, stride: usize, hw: usize) -> ConvLayerSpec {
        ConvLayerSpec {
            shape: Shape4::new(f1, f2, i, o).unwrap(),
            stride,
            input_h: hw,
            input_w: hw,
        }
    }

    /// Two (3, 3, 4, 4) layers on a 4x4 input in one group.
    fn toy(method: Method) -> (ModelSpec, Vec<GroupSpec>) {
        let layers = ["a", "b"]
            .iter()
            .map(|n| LayerSpec {
                name: n.to_string(),
                conv: conv(3, 3, 4, 4, 1, 4),
            })
            .collect();
        let model = ModelSpec {
            layers,
            other_params: 0,
        };
        let groups = vec![GroupSpec {
            group_id: 0,
            method,
            members: vec!["a".into(), "b".into()],
            fixed: None,
        }];
        (model, groups)
    }

    fn single(method: Method, r_r: usize, r_l: usize) -> RankPlan {
        RankPlan {
            entries: vec![PlanEntry {
                group_id: 0,
                method,
                r_r,
                r_l,
            }],
            p: 0.0,
            achieved_cf: 0.0,
        }
    }

    #[test]
    fn toy_cf_by_hand() {
        // before = 2 * 144 = 288. Rank 2: after = 2 * (12 * 2) + 2 * 12 = 72.
        let (model, groups) = toy(Method::Rjsvd);
        assert_eq!(count_params(&model), 288);
        assert_eq!(cf_for_plan(&model, &groups, &single(Method::Rjsvd, 2, 0)).unwrap(), 4.0);
        // Rank 1: after = 36.
        assert_eq!(cf_for_plan(&model, &groups, &single(Method::Rjsvd, 1, 0)).unwrap(), 8.0);

        let (model, groups) = toy(Method::Ljsvd);
        assert_eq!(cf_for_plan(&model, &groups, &single(Method::Ljsvd, 0, 2)).unwrap(), 4.0);
    }

    #[test]
    fn full_rank_single_member_inflates() {
        let model = ModelSpec {
            layers: vec![LayerSpec {
                name: "a".into(),
                conv: conv(3, 3, 4, 4, 1, 4),
            }],
            other_params: 0,
        };
        let groups = vec![GroupSpec {
            group_id: 0,
            method: Method::Rjsvd,
            members: vec!["a".into()],
            fixed: None,
        }];
        let cf = cf_for_plan(&model, &groups, &single(Method::Rjsvd, 12, 0)).unwrap();
        assert_eq!(cf, 144.0 / 288.0);
    }

    #[test]
    fn overlapping_and_unknown_layers() {
        let (model, mut groups) = toy(Method::Rjsvd);
        groups.push(GroupSpec {
            group_id: 1,
            method: Method::Rjsvd,
            members: vec!["a".into()],
            fixed: None,
        });
        let mut plan = single(Method::Rjsvd, 1, 0);
        plan.entries.push(PlanEntry {
            group_id: 1,
            method: Method::Rjsvd,
            r_r: 1,
            r_l: 0,
        });
        assert!(matches!(cf_for_plan(&model, &groups, &plan), Err(Error::OverlappingGroups(n)) if n == "a"));
        groups[1].members = vec!["zz".into()];
        assert!(matches!(cf_for_plan(&model, &groups, &plan), Err(Error::UnknownLayer(_))));
    }

    #[test]
    fn mac_counts() {
        let l = conv(3, 3, 4, 4, 1, 4);
        assert_eq!(macs_conv(&l), 2304);
        assert_eq!(macs_conv(&conv(1, 1, 1, 1, 1, 1)), 1);
        assert_eq!(macs_decomposed(&l, 2, 0), 768);
        assert_eq!(macs_decomposed(&l, 0, 2), 768);
        assert_eq!(macs_decomposed(&l, 1, 1), 768);
        // Stride 2 on 7x7: H' = W' = 4, vertical conv keeps W = 7.
        let s = conv(3, 3, 4, 8, 2, 7);
        assert_eq!(macs_conv(&s), 16 * 9 * 32);
        assert_eq!(macs_decomposed(&s, 3, 0), (4 * 7 * 3 * 4 + 16 * 3 * 8) * 3);
    }

    #[test]
    fn decomposed_macs_drop_condition() {
        for &(f, i, o, s, hw) in &[(3, 4, 4, 1, 4), (3, 16, 32, 2, 9), (5, 8, 3, 1, 7), (1, 6, 6, 1, 5)] {
            let l = conv(f, f, i, o, s, hw);
            let (oh, ow) = l.output_hw();
            let direct = macs_conv(&l) as f64;
            let per_rank = (oh * hw * f * i + oh * ow * f * o) as f64;
            for r in 1..40 {
                let drops = (r as f64) < direct / per_rank;
                assert_eq!(macs_decomposed(&l, r, 0) < macs_conv(&l), drops, "{f} {i} {o} {s} {hw} r={r}");
            }
        }
    }

    #[test]
    fn apportion_examples() {
        assert_eq!(apportion_rank(10, 0.3), (7, 3));
        assert_eq!(apportion_rank(9, 0.0), (9, 0));
        assert_eq!(apportion_rank(9, 1.0), (0, 9));
        assert_eq!(apportion_rank(1, 0.5), (0, 1));
        assert_eq!(apportion_rank(8, 0.5), (4, 4));
    }

    #[test]
    fn count_params_with_only_other() {
        let m = ModelSpec {
            layers: vec![],
            other_params: 7,
        };
        assert_eq!(count_params(&m), 7);
    }

    #[test]
    fn plan_toy_targets() {
        let (model, groups) = toy(Method::Rjsvd);
        let plan = plan_ranks(&model, &groups, 0.5, 8.0).unwrap();
        assert_eq!(plan.entries[0].r_r, 1);
        assert_eq!(plan.achieved_cf, 8.0);
        let plan = plan_ranks(&model, &groups, 0.5, 4.0).unwrap();
        assert_eq!(plan.entries[0].r_r, 2);
        assert_eq!(plan.achieved_cf, 4.0);

        let plan = plan_ranks(&model, &groups, 0.5, 1.0).unwrap();
        assert!(plan.achieved_cf >= 1.0);
        assert_eq!(plan.entries[0].r_r, max_admissible_rank(Method::Rjsvd, &[groups_shape(); 2], 0.5));

        assert!(matches!(
            plan_ranks(&model, &groups, 0.5, 8.5),
            Err(Error::InfeasibleTarget { .. })
        ));
        assert!(plan_ranks(&model, &groups, 1.5, 2.0).is_err());
    }

    fn groups_shape() -> Shape4 {
        Shape4::new(3, 3, 4, 4).unwrap()
    }

    #[test]
    fn plan_errors_on_empty_group() {
        let (model, mut groups) = toy(Method::Rjsvd);
        groups[0].members.clear();
        assert!(matches!(plan_ranks(&model, &groups, 0.5, 2.0), Err(Error::EmptyGroup { group_id: 0 })));
    }

    #[test]
    fn other_params_pull_cf_toward_one() {
        let (mut model, groups) = toy(Method::Rjsvd);
        let plan = single(Method::Rjsvd, 2, 0);
        let mut last = cf_for_plan(&model, &groups, &plan).unwrap();
        for other in [10, 20, 40, 80, 160] {
            model.other_params = other;
            let cf = cf_for_plan(&model, &groups, &plan).unwrap();
            assert!(cf < last && cf > 1.0);
            last = cf;
        }
    }

    #[test]
    fn cf_strictly_decreasing_in_each_rank() {
        let (model, groups) = toy(Method::Bijsvd);
        for r_r in 0..6 {
            for r_l in 0..6 {
                if r_r + r_l == 0 {
                    continue;
                }
                let base = cf_for_plan(&model, &groups, &single(Method::Bijsvd, r_r, r_l)).unwrap();
                let up_r = cf_for_plan(&model, &groups, &single(Method::Bijsvd, r_r + 1, r_l)).unwrap();
                let up_l = cf_for_plan(&model, &groups, &single(Method::Bijsvd, r_r, r_l + 1)).unwrap();
                assert!(up_r < base && up_l < base);
            }
        }
    }

    #[test]
    fn plan_is_self_consistent_and_near_target() {
        let layers: Vec<LayerSpec> = (0..6)
            .map(|k| LayerSpec {
                name: format!("l{k}"),
                conv: conv(3, 3, 64, 64, 1, 16),
            })
            .collect();
        let model = ModelSpec {
            layers,
            other_params: 1000,
        };
        let groups = vec![
            GroupSpec {
                group_id: 0,
                method: Method::Bijsvd,
                members: vec!["l0".into(), "l1".into(), "l2".into()],
                fixed: None,
            },
            GroupSpec {
                group_id: 1,
                method: Method::Ljsvd,
                members: vec!["l3".into(), "l4".into()],
                fixed: None,
            },
        ];
        for target in [1.2, 1.5, 2.0, 3.0] {
            let plan = plan_ranks(&model, &groups, 0.3, target).unwrap();
            assert!(plan.achieved_cf >= target);
            assert_eq!(cf_for_plan(&model, &groups, &plan).unwrap(), plan.achieved_cf);
            assert!(plan.achieved_cf <= target * 1.03, "{target} -> {}", plan.achieved_cf);
            let e = plan.entry(0).unwrap();
            let total = e.r_r + e.r_l;
            assert!((e.r_l as f64 - 0.3 * total as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn fixed_ranks_are_kept() {
        let (model, mut groups) = toy(Method::Rjsvd);
        groups[0].fixed = Some((3, 0));
        let plan = plan_ranks(&model, &groups, 0.5, 2.0).unwrap();
        assert_eq!((plan.entries[0].r_r, plan.entries[0].r_l), (3, 0));
    }
}
