//! Patch tokenisation and mask planning.
//!
//! A square image becomes a sequence of non-overlapping patch tokens in
//! row-major grid order; token `i` holds the flattened pixels (row-major,
//! channels innermost) of grid cell `(i / g, i % g)`. Masking partitions
//! token indices into a masked and a visible set; the encoder only ever sees
//! the visible rows, which is what makes the reconstruction task
//! non-trivial.

use rand::Rng;

use crate::data::Image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Patch tokens of one image: an `n x d_tok` matrix with the grid geometry
/// needed to reassemble it.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `n x d_tok`, where `n = (S / P)^2` and `d_tok = 3 * P^2`.
    pub tokens: Tensor,
    /// Tokens per side of the grid.
    pub grid: usize,
    pub patch_size: usize,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }
}

/// A partition of `0..n` into masked and visible indices, both sorted
/// ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n: usize,
    pub masked_idx: Vec<usize>,
    pub visible_idx: Vec<usize>,
}

impl MaskPlan {
    /// A plan with nothing masked.
    pub fn all_visible(n: usize) -> Self {
        MaskPlan {
            n,
            masked_idx: Vec::new(),
            visible_idx: (0..n).collect(),
        }
    }

    pub fn mask_count(&self) -> usize {
        self.masked_idx.len()
    }

    /// True when the two index lists are sorted, disjoint, and cover `0..n`.
    pub fn is_partition(&self) -> bool {
        if self.masked_idx.len() + self.visible_idx.len() != self.n {
            return false;
        }
        let mut all: Vec<usize> = self
            .masked_idx
            .iter()
            .chain(self.visible_idx.iter())
            .copied()
            .collect();
        all.sort_unstable();
        all.iter().enumerate().all(|(i, &v)| i == v)
            && self.masked_idx.windows(2).all(|w| w[0] < w[1])
            && self.visible_idx.windows(2).all(|w| w[0] < w[1])
    }
}

/// Split a square image into patch tokens.
///
/// Errors when the image is not square or its side is not divisible by
/// `patch_size`.
pub fn patchify(image: &Image, patch_size: usize) -> Result<TokenSequence> {
    if patch_size == 0 {
        return Err(Error::Config("patch_size must be positive".into()));
    }
    let (h, w) = (image.height(), image.width());
    if h != w {
        return Err(Error::InvalidArgument(format!(
            "patchify expects a square image, got {h}x{w}"
        )));
    }
    if h % patch_size != 0 {
        return Err(Error::InvalidArgument(format!(
            "image side {h} is not divisible by patch size {patch_size}"
        )));
    }
    let g = h / patch_size;
    let d_tok = 3 * patch_size * patch_size;
    let mut tokens = Tensor::zeros(g * g, d_tok);
    for gy in 0..g {
        for gx in 0..g {
            let row = tokens.row_mut(gy * g + gx);
            let mut k = 0;
            for py in 0..patch_size {
                for px in 0..patch_size {
                    for c in 0..3 {
                        row[k] = image.get(gy * patch_size + py, gx * patch_size + px, c);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(TokenSequence {
        tokens,
        grid: g,
        patch_size,
    })
}

/// Reassemble an image from patch tokens; exact inverse of [`patchify`].
pub fn unpatchify(seq: &TokenSequence) -> Result<Image> {
    let g = seq.grid;
    let p = seq.patch_size;
    let expected = (g * g, 3 * p * p);
    if seq.tokens.shape() != expected {
        return Err(Error::shape(
            "unpatchify",
            format!("{}x{}", expected.0, expected.1),
            format!("{}x{}", seq.tokens.rows(), seq.tokens.cols()),
        ));
    }
    let mut img = Image::new(g * p, g * p);
    paste_tokens(&mut img, &seq.tokens, g, p, |_| true);
    Ok(img)
}

/// Write token rows accepted by `keep` into their patch positions.
pub(crate) fn paste_tokens(
    img: &mut Image,
    tokens: &Tensor,
    grid: usize,
    patch: usize,
    keep: impl Fn(usize) -> bool,
) {
    for i in 0..grid * grid {
        if !keep(i) {
            continue;
        }
        let (gy, gx) = (i / grid, i % grid);
        let row = tokens.row(i);
        let mut k = 0;
        for py in 0..patch {
            for px in 0..patch {
                for c in 0..3 {
                    img.set(gy * patch + py, gx * patch + px, c, row[k]);
                    k += 1;
                }
            }
        }
    }
}

/// Draw a uniform mask plan over `n` tokens.
///
/// The masked count is `ratio * n` rounded half up, the subset is uniform
/// without replacement, and both index lists come back sorted. `ratio` must
/// lie in `[0, 1)`; at 1.0 and above no token would remain visible for the
/// encoder.
pub fn sample_mask(n: usize, ratio: f64, rng: &mut impl Rng) -> Result<MaskPlan> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "sample_mask: n must be positive".into(),
        ));
    }
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::Config(format!(
            "mask ratio must lie in [0, 1), got {ratio}; at least one visible token is required"
        )));
    }
    let count = (ratio * n as f64).round() as usize;
    // Partial Fisher-Yates: after `count` swaps the prefix is a uniform
    // sample without replacement.
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n.saturating_sub(1)) {
        let j = rng.gen_range(i..n);
        pool.swap(i, j);
    }
    let mut masked_idx: Vec<usize> = pool[..count].to_vec();
    let mut visible_idx: Vec<usize> = pool[count..].to_vec();
    masked_idx.sort_unstable();
    visible_idx.sort_unstable();
    Ok(MaskPlan {
        n,
        masked_idx,
        visible_idx,
    })
}

/// Split a token sequence into `(visible, masked)` row matrices per the
/// plan's index lists, preserving ascending order.
pub fn apply_mask(seq: &TokenSequence, plan: &MaskPlan) -> Result<(Tensor, Tensor)> {
    if plan.n != seq.len() {
        return Err(Error::shape(
            "apply_mask",
            format!("plan over {} tokens", seq.len()),
            format!("plan over {}", plan.n),
        ));
    }
    Ok((
        seq.tokens.gather_rows(&plan.visible_idx),
        seq.tokens.gather_rows(&plan.masked_idx),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic_domains;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn test_image(size: usize) -> Image {
        let sets = make_synthetic_domains(1, 1, size, 77).unwrap();
        sets[0].samples[0].image.clone()
    }

    #[test]
    fn patchify_shapes_and_top_left_token() {
        let img = test_image(32);
        let seq = patchify(&img, 16).unwrap();
        assert_eq!(seq.tokens.shape(), (4, 3 * 16 * 16));
        assert_eq!(seq.grid, 2);
        // Token 0 is the top-left 16x16x3 block, channels innermost.
        let mut k = 0;
        for py in 0..16 {
            for px in 0..16 {
                for c in 0..3 {
                    assert_eq!(seq.tokens.get(0, k), img.get(py, px, c));
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn default_geometry_token_count() {
        let img = test_image(256);
        let seq = patchify(&img, 16).unwrap();
        assert_eq!(seq.len(), 256, "256x256 at patch 16 gives 16x16 tokens");
        assert_eq!(seq.token_dim(), 768);
    }

    #[test]
    fn unpatchify_inverts_patchify_exactly() {
        let img = test_image(24);
        let seq = patchify(&img, 8).unwrap();
        let back = unpatchify(&seq).unwrap();
        assert_eq!(back, img, "round trip must be bit-exact");
    }

    #[test]
    fn patchify_rejects_bad_geometry() {
        let img = test_image(24);
        assert!(matches!(patchify(&img, 7), Err(Error::InvalidArgument(_))));
        let mut wide = Image::new(8, 16);
        wide.clamp01();
        assert!(matches!(patchify(&wide, 8), Err(Error::InvalidArgument(_))));
        assert!(matches!(patchify(&img, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mask_count_rounds_half_up() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let plan = sample_mask(256, 0.85, &mut rng).unwrap();
        assert_eq!(plan.mask_count(), 218, "256 * 0.85 = 217.6 rounds to 218");
        assert_eq!(plan.visible_idx.len(), 38);

        let plan = sample_mask(10, 0.25, &mut rng).unwrap();
        assert_eq!(plan.mask_count(), 3, "2.5 rounds half up to 3");
    }

    #[test]
    fn mask_count_formula_exhaustive_over_ratio_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in 1..=1024usize {
            for step in 0..20 {
                let ratio = step as f64 * 0.05;
                if ratio >= 1.0 {
                    continue;
                }
                let plan = sample_mask(n, ratio, &mut rng).unwrap();
                let expected = (ratio * n as f64).round() as usize;
                assert_eq!(plan.mask_count(), expected, "n={n} ratio={ratio}");
                assert!(plan.is_partition(), "n={n} ratio={ratio}");
            }
        }
    }

    #[test]
    fn zero_ratio_masks_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let plan = sample_mask(64, 0.0, &mut rng).unwrap();
        assert!(plan.masked_idx.is_empty());
        assert_eq!(plan.visible_idx, (0..64).collect::<Vec<_>>());
    }

    #[test]
    fn ratio_one_or_more_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(matches!(
            sample_mask(16, 1.0, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_mask(16, 1.5, &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            sample_mask(16, -0.1, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn same_rng_state_reproduces_the_plan() {
        let mut r1 = ChaCha8Rng::seed_from_u64(42);
        let mut r2 = ChaCha8Rng::seed_from_u64(42);
        assert_eq!(
            sample_mask(256, 0.85, &mut r1).unwrap(),
            sample_mask(256, 0.85, &mut r2).unwrap()
        );
    }

    #[test]
    fn per_index_mask_frequency_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 256;
        let draws = 10_000;
        let mut hits = vec![0usize; n];
        for _ in 0..draws {
            let plan = sample_mask(n, 0.85, &mut rng).unwrap();
            for &i in &plan.masked_idx {
                hits[i] += 1;
            }
        }
        let expected = 218.0 / 256.0;
        for (i, &h) in hits.iter().enumerate() {
            let f = h as f64 / draws as f64;
            assert!(
                (f - expected).abs() <= 0.02,
                "index {i}: frequency {f:.4} vs expected {expected:.4}"
            );
        }
    }

    #[test]
    fn apply_mask_splits_rows_in_sorted_order() {
        let img = test_image(16);
        let seq = patchify(&img, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let plan = sample_mask(seq.len(), 0.5, &mut rng).unwrap();
        let (vis, masked) = apply_mask(&seq, &plan).unwrap();
        assert_eq!(vis.rows(), plan.visible_idx.len());
        assert_eq!(masked.rows(), plan.masked_idx.len());
        for (r, &i) in plan.visible_idx.iter().enumerate() {
            assert_eq!(vis.row(r), seq.tokens.row(i));
        }
        for (r, &i) in plan.masked_idx.iter().enumerate() {
            assert_eq!(masked.row(r), seq.tokens.row(i));
        }
    }

    #[test]
    fn apply_mask_rejects_foreign_plan() {
        let seq = patchify(&test_image(16), 4).unwrap();
        let plan = MaskPlan::all_visible(9);
        assert!(apply_mask(&seq, &plan).is_err());
    }

    proptest! {
        #[test]
        fn mask_plan_is_always_a_partition(n in 1usize..300, ratio in 0.0f64..0.999, seed: u64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let plan = sample_mask(n, ratio, &mut rng).unwrap();
            prop_assert!(plan.is_partition());
            prop_assert_eq!(plan.mask_count(), (ratio * n as f64).round() as usize);
        }

        #[test]
        fn patchify_round_trip_over_sizes(grid in 1usize..5, patch in prop::sample::select(vec![2usize, 4, 8])) {
            let size = grid * patch;
            if size >= 8 {
                let img = test_image(size);
                let seq = patchify(&img, patch).unwrap();
                prop_assert_eq!(seq.len(), grid * grid);
                let back = unpatchify(&seq).unwrap();
                prop_assert_eq!(back, img);
            }
        }
    }
}
