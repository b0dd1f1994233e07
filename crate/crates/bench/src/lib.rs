//! Seeded fixtures shared by the benchmarks.

use jsvd_core::conv::factor_kernels;
use jsvd_core::random::random_tensor;
use jsvd_core::{svd, unfold, LayerGroup, Shape4, Tensor4};

/// Group of `n` random members of one shape.
pub fn random_group(n: usize, shape: Shape4, seed: u64) -> LayerGroup {
    let members = (0..n)
        .map(|k| (format!("m{k}"), random_tensor(shape, seed + k as u64)))
        .collect();
    LayerGroup::new(0, members).expect("members share a shape")
}

/// Rank-`r` split kernels of `w` from its truncated SVD.
pub fn split_kernels(w: &Tensor4, r: usize) -> (Tensor4, Tensor4) {
    let pair = svd(&unfold(w)).expect("svd").truncate(r).expect("rank in range");
    factor_kernels(&pair.u, &pair.v, w.shape()).expect("factor shapes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let s = Shape4::new(3, 3, 8, 8).unwrap();
        let g = random_group(3, s, 1);
        assert_eq!(g.len(), 3);
        let (u, v) = split_kernels(&g.members()[0].1, 4);
        assert_eq!(u.shape(), Shape4::new(3, 1, 8, 4).unwrap());
        assert_eq!(v.shape(), Shape4::new(1, 3, 4, 8).unwrap());
    }
}
