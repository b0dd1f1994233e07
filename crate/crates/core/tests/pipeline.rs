use std::collections::BTreeMap;
use std::path::PathBuf;

use proptest::prelude::*;

use jsvd_core::budget::uniform_plan;
use jsvd_core::model_io::{artifact_cf, load_factorized, save_factorized, DecomposedGroup};
use jsvd_core::random::random_tensor;
use jsvd_core::{
    compression_report, conv2d, decompose, factor_kernels, forward_dual, forward_split, load_model, max_abs_diff,
    reconstruct_member, unfold, Factorization, FeatureMap, GroupFactorization, LayerGroup, Method, Precision, Shape4,
};

fn toy_manifest() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../models/toy/model.json")
}

/// Direct sum of squared member errors, independent of the solver's bookkeeping.
fn direct_residual(group: &LayerGroup, f: &GroupFactorization) -> f64 {
    group
        .members()
        .iter()
        .enumerate()
        .map(|(n, (_, w))| unfold(w).sub(&f.approximation(n).unwrap()).unwrap().frobenius_norm_sq())
        .sum()
}

#[test]
fn toy_model_round_trips_through_artifact() {
    let model = load_model(&toy_manifest()).unwrap();
    let spec = model.manifest.model_spec().unwrap();
    for method in [Method::Rjsvd, Method::Ljsvd, Method::Bijsvd] {
        let specs = model.manifest.group_specs(Some(method), Some(0.5)).unwrap();
        let ranks: BTreeMap<usize, (usize, usize)> = specs.iter().map(|g| (g.group_id, g.fixed.unwrap())).collect();
        let plan = uniform_plan(&spec, &specs, 0.5, &ranks).unwrap();

        let mut decomposed = Vec::new();
        for entry in &model.manifest.groups {
            let group = model.layer_group(entry).unwrap();
            let (r_r, r_l) = ranks[&entry.group_id];
            let f = decompose(&group, method, r_r, r_l, 10).unwrap();
            let direct = direct_residual(&group, &f);
            assert!((f.residual_sq() - direct).abs() <= 1e-10 * direct.max(1.0), "{method:?} group {}", entry.group_id);
            decomposed.push(DecomposedGroup {
                group,
                factorization: f,
                p: 0.5,
                k: 10,
            });
        }
        let residuals = decomposed.iter().map(|d| d.factorization.residual_sq()).collect();
        let report = compression_report(&spec, &specs, &plan, residuals).unwrap();

        let out = tempfile::tempdir().unwrap();
        save_factorized(out.path(), &decomposed, &report, Precision::F64, false).unwrap();
        let artifact = load_factorized(out.path()).unwrap();
        assert!(artifact.digest_mismatches.is_empty());
        for (a, b) in artifact.factorizations.iter().zip(&decomposed) {
            assert_eq!(a.ranks(), b.factorization.ranks());
            for n in 0..b.group.len() {
                assert_eq!(a.approximation(n).unwrap(), b.factorization.approximation(n).unwrap());
            }
        }
        assert_eq!(artifact_cf(&model.manifest, &artifact.manifest).unwrap(), report.cf);
        assert!(report.cf > 1.0);
    }
}

fn group_strategy() -> impl Strategy<Value = (Shape4, usize, u64)> {
    (
        prop::sample::select(vec![1usize, 3]),
        prop::sample::select(vec![1usize, 3]),
        1usize..=5,
        1usize..=5,
        1usize..=3,
        any::<u64>(),
    )
        .prop_map(|(f1, f2, i, o, n, seed)| (Shape4::new(f1, f2, i, o).unwrap(), n, seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// Running the factor kernels in sequence matches convolving with the
    /// folded approximation.
    #[test]
    fn split_forward_matches_folded_kernel(
        (shape, n, seed) in group_strategy(),
        method in prop::sample::select(vec![Method::Rjsvd, Method::Ljsvd, Method::Bijsvd]),
        stride in 1usize..=2,
        rank_pick in 0usize..100,
    ) {
        let members = (0..n).map(|k| (format!("m{k}"), random_tensor(shape, seed.wrapping_add(k as u64)))).collect();
        let group = LayerGroup::new(0, members).unwrap();
        let (rows, cols) = (shape.unfolded_rows(), shape.unfolded_cols());
        let (r_r, r_l) = match method {
            Method::Rjsvd => (1 + rank_pick % (n * rows).min(cols), 0),
            Method::Ljsvd => (0, 1 + rank_pick % rows.min(n * cols)),
            Method::Bijsvd => (1 + rank_pick % rows.min(cols), rank_pick % 2),
        };
        let f = decompose(&group, method, r_r, r_l, 4).unwrap();
        let x = FeatureMap::random(6, 5, shape.i, seed ^ 0xabc);

        for m in 0..n {
            let kernel = reconstruct_member(&f, m, shape).unwrap();
            let expected = conv2d(&x, &kernel, stride, stride).unwrap();
            let right = f.right().map(|r| factor_kernels(&r.member_us[m], &r.shared_v, shape).unwrap());
            let left = f.left().map(|l| factor_kernels(&l.shared_u, &l.member_vs[m], shape).unwrap());
            let got = match (&right, &left) {
                (Some(a), Some(b)) => forward_dual(&x, (&a.0, &a.1), (&b.0, &b.1), stride).unwrap(),
                (Some(a), None) | (None, Some(a)) => forward_split(&x, &a.0, &a.1, stride).unwrap(),
                (None, None) => unreachable!("some rank is positive"),
            };
            prop_assert!(max_abs_diff(&expected, &got).unwrap() <= 1e-9);
        }
    }
}
