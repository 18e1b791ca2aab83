//! Non-overlapping patching along time and complementary random masking.
//!
//! A long history [T_long, N, C] becomes T_p = T_long / L patches per node,
//! each a flattened [L * C] vector. Masking draws, per node, a fixed number
//! of patch indices; one view keeps exactly those patches zeroed and the
//! other view zeroes the rest, so every patch is visible in exactly one of
//! the two views.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct PatchSet {
    /// [T_p, N, P] with P = patch_len * channels.
    pub patches: Tensor,
    pub patch_len: usize,
    pub channels: usize,
}

impl PatchSet {
    pub fn t_p(&self) -> usize {
        self.patches.dim(0)
    }

    pub fn n_nodes(&self) -> usize {
        self.patches.dim(1)
    }

    pub fn patch_dim(&self) -> usize {
        self.patches.dim(2)
    }
}

/// Cut [T_long, N, C] into patches of `patch_len` steps. T_long must be a
/// multiple of patch_len.
pub fn patchify(x_long: &Tensor, patch_len: usize) -> Result<PatchSet> {
    if x_long.rank() != 3 {
        return Err(CoreError::Shape(format!(
            "patchify needs [T_long, N, C], got {:?}",
            x_long.shape
        )));
    }
    if patch_len == 0 {
        return Err(CoreError::Config("patch length must be >= 1".into()));
    }
    let (t_long, n, c) = (x_long.dim(0), x_long.dim(1), x_long.dim(2));
    if t_long % patch_len != 0 {
        return Err(CoreError::Config(format!(
            "history length {t_long} is not a multiple of patch length {patch_len}"
        )));
    }
    let t_p = t_long / patch_len;
    let p = patch_len * c;
    let mut patches = Tensor::zeros(&[t_p, n, p]);
    for i in 0..t_p {
        for nn in 0..n {
            for l in 0..patch_len {
                for cc in 0..c {
                    patches.data[(i * n + nn) * p + l * c + cc] =
                        x_long.data[((i * patch_len + l) * n + nn) * c + cc];
                }
            }
        }
    }
    Ok(PatchSet {
        patches,
        patch_len,
        channels: c,
    })
}

/// Inverse of `patchify`.
pub fn unpatchify(ps: &PatchSet) -> Tensor {
    let (t_p, n) = (ps.t_p(), ps.n_nodes());
    let (l, c) = (ps.patch_len, ps.channels);
    let mut x = Tensor::zeros(&[t_p * l, n, c]);
    for i in 0..t_p {
        for nn in 0..n {
            for ll in 0..l {
                for cc in 0..c {
                    x.data[((i * l + ll) * n + nn) * c + cc] =
                        ps.patches.data[(i * n + nn) * (l * c) + ll * c + cc];
                }
            }
        }
    }
    x
}

/// Complementary visibility masks for the two views.
#[derive(Debug, Clone)]
pub struct MaskPair {
    /// [T_p, N] of 0/1; 1 means the patch is visible in view one.
    pub visible_one: Tensor,
    pub ratio: f64,
}

impl MaskPair {
    /// Visibility of view two, the elementwise complement.
    pub fn visible_two(&self) -> Tensor {
        self.visible_one.map(|m| 1.0 - m)
    }

    pub fn is_visible_one(&self, i: usize, n: usize) -> bool {
        self.visible_one.data[i * self.visible_one.dim(1) + n] != 0.0
    }
}

/// Draw complementary masks hiding round(ratio * T_p) patches per node
/// from view one. Each node gets its own independent pattern.
pub fn complementary_masks(t_p: usize, n: usize, ratio: f64, rng: &mut Rng) -> Result<MaskPair> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CoreError::Config(format!(
            "mask ratio must lie strictly inside (0, 1), got {ratio}"
        )));
    }
    if t_p == 0 || n == 0 {
        return Err(CoreError::Shape(format!(
            "mask grid must be non-empty, got T_p={t_p}, N={n}"
        )));
    }
    let hidden = (ratio * t_p as f64).round() as usize;
    let mut visible = Tensor::filled(&[t_p, n], 1.0);
    for nn in 0..n {
        let perm = rng.permutation(t_p);
        for &i in perm.iter().take(hidden) {
            visible.data[i * n + nn] = 0.0;
        }
    }
    Ok(MaskPair {
        visible_one: visible,
        ratio,
    })
}

/// Zero every patch whose mask entry is 0, leaving visible patches intact.
pub fn apply_mask(ps: &PatchSet, visible: &Tensor) -> Result<PatchSet> {
    if visible.shape != [ps.t_p(), ps.n_nodes()] {
        return Err(CoreError::Shape(format!(
            "mask shape {:?} does not match patch grid [{}, {}]",
            visible.shape,
            ps.t_p(),
            ps.n_nodes()
        )));
    }
    if visible.data.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(CoreError::Shape(
            "mask entries must be exactly 0 or 1".into(),
        ));
    }
    let p = ps.patch_dim();
    let mut masked = ps.patches.clone();
    for (row, &m) in visible.data.iter().enumerate() {
        if m == 0.0 {
            masked.data[row * p..(row + 1) * p].fill(0.0);
        }
    }
    Ok(PatchSet {
        patches: masked,
        patch_len: ps.patch_len,
        channels: ps.channels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(t: usize, n: usize, c: usize) -> Tensor {
        Tensor::new(vec![t, n, c], (0..t * n * c).map(|i| i as f64).collect()).unwrap()
    }

    #[test]
    fn a_standard_history_gives_56_patches() {
        let x = ramp(672, 2, 1);
        let ps = patchify(&x, 12).unwrap();
        assert_eq!(ps.patches.shape, vec![56, 2, 12]);
    }

    #[test]
    fn patch_rows_follow_time_order_per_node() {
        let x = ramp(6, 2, 1);
        let ps = patchify(&x, 3).unwrap();
        // Node 1, second patch covers t = 3, 4, 5.
        assert_eq!(ps.patches.data[(1 * 2 + 1) * 3..(1 * 2 + 2) * 3], [7.0, 9.0, 11.0]);
    }

    #[test]
    fn indivisible_history_is_a_config_error() {
        let x = ramp(10, 1, 1);
        assert!(matches!(patchify(&x, 3), Err(CoreError::Config(_))));
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let x = ramp(24, 3, 2);
        let ps = patchify(&x, 4).unwrap();
        assert_eq!(unpatchify(&ps).data, x.data);
    }

    #[test]
    fn masks_hide_the_rounded_count_per_node() {
        let mut rng = Rng::new(40);
        let pair = complementary_masks(56, 4, 0.5, &mut rng).unwrap();
        for n in 0..4 {
            let visible: usize = (0..56)
                .filter(|&i| pair.visible_one.data[i * 4 + n] != 0.0)
                .count();
            assert_eq!(visible, 28);
        }
    }

    #[test]
    fn views_are_complementary() {
        let mut rng = Rng::new(41);
        let pair = complementary_masks(20, 3, 0.3, &mut rng).unwrap();
        let two = pair.visible_two();
        for (a, b) in pair.visible_one.data.iter().zip(&two.data) {
            assert_eq!(a + b, 1.0);
        }
    }

    #[test]
    fn nodes_draw_independent_patterns() {
        let mut rng = Rng::new(42);
        let pair = complementary_masks(56, 2, 0.5, &mut rng).unwrap();
        let differs = (0..56).any(|i| pair.visible_one.data[i * 2] != pair.visible_one.data[i * 2 + 1]);
        assert!(differs);
    }

    #[test]
    fn masks_replay_exactly() {
        let a = complementary_masks(30, 5, 0.5, &mut Rng::new(77)).unwrap();
        let b = complementary_masks(30, 5, 0.5, &mut Rng::new(77)).unwrap();
        assert_eq!(a.visible_one.data, b.visible_one.data);
    }

    #[test]
    fn degenerate_ratios_rejected() {
        let mut rng = Rng::new(1);
        assert!(complementary_masks(10, 1, 0.0, &mut rng).is_err());
        assert!(complementary_masks(10, 1, 1.0, &mut rng).is_err());
    }

    #[test]
    fn apply_mask_zeroes_exactly_hidden_patches() {
        let x = ramp(8, 2, 1);
        let ps = patchify(&x, 2).unwrap();
        let mut rng = Rng::new(50);
        let pair = complementary_masks(4, 2, 0.5, &mut rng).unwrap();
        let v1 = apply_mask(&ps, &pair.visible_one).unwrap();
        let v2 = apply_mask(&ps, &pair.visible_two()).unwrap();
        for i in 0..4 {
            for n in 0..2 {
                let row = &v1.patches.data[(i * 2 + n) * 2..(i * 2 + n + 1) * 2];
                let row2 = &v2.patches.data[(i * 2 + n) * 2..(i * 2 + n + 1) * 2];
                let orig = &ps.patches.data[(i * 2 + n) * 2..(i * 2 + n + 1) * 2];
                if pair.is_visible_one(i, n) {
                    assert_eq!(row, orig);
                    assert_eq!(row2, [0.0, 0.0]);
                } else {
                    assert_eq!(row, [0.0, 0.0]);
                    assert_eq!(row2, orig);
                }
            }
        }
    }

    #[test]
    fn fractional_mask_entries_rejected() {
        let x = ramp(4, 1, 1);
        let ps = patchify(&x, 2).unwrap();
        let bad = Tensor::filled(&[2, 1], 0.5);
        assert!(apply_mask(&ps, &bad).is_err());
    }
}

#[cfg(test)]
mod props {
    use super::{complementary_masks, patchify, unpatchify};
    use crate::rng::Rng;
    use crate::tensor::Tensor;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        /// Every patch is visible in exactly one view, for any grid and ratio.
        #[test]
        fn masks_partition_the_patch_grid(
            t_p in 1usize..40,
            n in 1usize..6,
            ratio in 0.05f64..0.95,
            seed in 0u64..1000,
        ) {
            let pair = complementary_masks(t_p, n, ratio, &mut Rng::new(seed)).unwrap();
            let two = pair.visible_two();
            for (a, b) in pair.visible_one.data.iter().zip(&two.data) {
                prop_assert_eq!(a + b, 1.0);
                prop_assert!(*a == 0.0 || *a == 1.0);
            }
        }

        /// Round-tripping through patches preserves the history exactly.
        #[test]
        fn patchify_round_trips(
            t_p in 1usize..10,
            l in 1usize..6,
            n in 1usize..4,
            c in 1usize..3,
        ) {
            let t = t_p * l;
            let x = Tensor::new(
                vec![t, n, c],
                (0..t * n * c).map(|i| (i as f64).sin()).collect(),
            ).unwrap();
            let ps = patchify(&x, l).unwrap();
            prop_assert_eq!(unpatchify(&ps).data, x.data);
        }
    }
}
