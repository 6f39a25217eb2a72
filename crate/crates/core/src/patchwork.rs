//! Patchification, random masking and mask-token padding.

use ndarray::{s, Array1, Array2, Array3, ArrayView3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{masked_count, FrameImage, MaskSpec, Modality, PatchSequence, Spectrogram};
use crate::error::{Error, Result};

/// Anything that can be cut into a grid of patches.
pub trait Patchable {
    fn modality(&self) -> Modality;
    /// The input as `rows x cols x channels`.
    fn as_grid(&self) -> ArrayView3<'_, f64>;
}

impl Patchable for Spectrogram {
    fn modality(&self) -> Modality {
        Modality::Audio
    }

    fn as_grid(&self) -> ArrayView3<'_, f64> {
        self.values().view().insert_axis(Axis(2))
    }
}

impl Patchable for FrameImage {
    fn modality(&self) -> Modality {
        Modality::Visual
    }

    fn as_grid(&self) -> ArrayView3<'_, f64> {
        self.values().view()
    }
}

pub fn patchify<T: Patchable + ?Sized>(input: &T, patch_shape: (usize, usize)) -> Result<PatchSequence> {
    patchify_grid(input.as_grid(), patch_shape, input.modality())
}

/// Cut an `H x W x C` array into row-major patches. Each patch is flattened
/// in (row, col, channel) order.
pub fn patchify_grid(
    grid: ArrayView3<'_, f64>,
    patch_shape: (usize, usize),
    modality: Modality,
) -> Result<PatchSequence> {
    let (h, w, c) = grid.dim();
    let (ph, pw) = patch_shape;
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 {
        return Err(Error::Dimension(format!(
            "{modality} input {h}x{w} is not divisible by patch shape {ph}x{pw}"
        )));
    }
    let (rows, cols) = (h / ph, w / pw);
    let p = ph * pw * c;
    let mut patches = Array2::<f64>::zeros((rows * cols, p));
    for r in 0..rows {
        for q in 0..cols {
            let block = grid.slice(s![r * ph..(r + 1) * ph, q * pw..(q + 1) * pw, ..]);
            let mut row = patches.row_mut(r * cols + q);
            for (dst, src) in row.iter_mut().zip(block.iter()) {
                *dst = *src;
            }
        }
    }
    PatchSequence::new(patches, (rows, cols), patch_shape, c, modality)
}

/// Inverse of [`patchify`], returning the raw `H x W x C` array. Audio comes
/// back with a single channel.
pub fn unpatchify(patches: &PatchSequence) -> Result<Array3<f64>> {
    patches.check_consistent()?;
    let (rows, cols) = patches.grid();
    let (ph, pw) = patches.patch_shape();
    let c = patches.channels();
    let mut out = Array3::<f64>::zeros((rows * ph, cols * pw, c));
    for r in 0..rows {
        for q in 0..cols {
            let src = patches.patches().row(r * cols + q);
            let mut block = out.slice_mut(s![r * ph..(r + 1) * ph, q * pw..(q + 1) * pw, ..]);
            for (dst, v) in block.iter_mut().zip(src.iter()) {
                *dst = *v;
            }
        }
    }
    Ok(out)
}

pub fn unpatchify_spectrogram(patches: &PatchSequence, sample_id: &str) -> Result<Spectrogram> {
    if patches.modality() != Modality::Audio {
        return Err(Error::Modality("expected audio patches".into()));
    }
    let grid = unpatchify(patches)?;
    Spectrogram::new(grid.index_axis_move(Axis(2), 0), sample_id)
}

pub fn unpatchify_frame(patches: &PatchSequence, timestamp_s: f64, sample_id: &str) -> Result<FrameImage> {
    if patches.modality() != Modality::Visual {
        return Err(Error::Modality("expected visual patches".into()));
    }
    FrameImage::new(unpatchify(patches)?, timestamp_s, sample_id)
}

/// Uniformly sample `round(ratio * n_total)` positions without replacement.
pub fn sample_mask(n_total: usize, ratio: f64, seed: u64) -> Result<MaskSpec> {
    if !(0.0..1.0).contains(&ratio) || !ratio.is_finite() {
        return Err(Error::Parameter(format!("mask ratio {ratio} outside [0, 1)")));
    }
    if n_total == 0 {
        return Err(Error::Parameter("cannot mask an empty patch sequence".into()));
    }
    let k = masked_count(n_total, ratio);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let masked = rand::seq::index::sample(&mut rng, n_total, k).into_vec();
    MaskSpec::new(masked, n_total, ratio)
}

/// The visible subset of a patch sequence together with the original
/// position of every kept row.
#[derive(Debug, Clone, PartialEq)]
pub struct VisiblePatches {
    pub patches: Array2<f64>,
    pub positions: Vec<usize>,
    pub modality: Modality,
    pub n_total: usize,
}

impl VisiblePatches {
    /// Every patch visible.
    pub fn all(seq: &PatchSequence) -> Self {
        Self {
            patches: seq.patches().clone(),
            positions: (0..seq.len()).collect(),
            modality: seq.modality(),
            n_total: seq.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

pub fn apply_mask(patches: &PatchSequence, mask: &MaskSpec) -> Result<VisiblePatches> {
    if mask.n_total() != patches.len() {
        return Err(Error::Dimension(format!(
            "mask covers {} positions but sequence has {} patches",
            mask.n_total(),
            patches.len()
        )));
    }
    let positions = mask.visible_indices();
    let kept = patches.patches().select(Axis(0), &positions);
    Ok(VisiblePatches {
        patches: kept,
        positions,
        modality: patches.modality(),
        n_total: patches.len(),
    })
}

/// Scatter visible-position tokens back to full length, filling Ω with
/// copies of `mask_token`.
pub fn pad_with_mask_tokens(tokens: &Array2<f64>, mask: &MaskSpec, mask_token: &Array1<f64>) -> Result<Array2<f64>> {
    let visible = mask.visible_indices();
    if tokens.nrows() != visible.len() {
        return Err(Error::Dimension(format!(
            "{} tokens for {} visible positions",
            tokens.nrows(),
            visible.len()
        )));
    }
    if tokens.ncols() != mask_token.len() && !visible.is_empty() {
        return Err(Error::Dimension(format!(
            "token width {} does not match mask token width {}",
            tokens.ncols(),
            mask_token.len()
        )));
    }
    let d = mask_token.len();
    let mut out = Array2::<f64>::zeros((mask.n_total(), d));
    for &i in mask.masked_indices() {
        out.row_mut(i).assign(mask_token);
    }
    for (row, &i) in visible.iter().enumerate() {
        out.row_mut(i).assign(&tokens.row(row));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn frame(h: usize, w: usize, c: usize, seed: u64) -> FrameImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = Array3::from_shape_fn((h, w, c), |_| rng.random::<f64>());
        FrameImage::new(v, 0.0, "f").unwrap()
    }

    #[test]
    fn paper_shapes_patch_counts() {
        let f = FrameImage::new(Array3::zeros((224, 224, 3)), 0.0, "f").unwrap();
        let p = patchify(&f, (16, 16)).unwrap();
        assert_eq!((p.len(), p.patch_len()), (196, 768));

        let a = Spectrogram::new(Array2::zeros((1024, 128)), "a").unwrap();
        let p = patchify(&a, (16, 16)).unwrap();
        assert_eq!((p.len(), p.patch_len()), (512, 256));
        assert_eq!(p.grid(), (64, 8));
    }

    #[test]
    fn non_divisible_shape_names_both() {
        let f = FrameImage::new(Array3::zeros((30, 32, 1)), 0.0, "f").unwrap();
        let err = patchify(&f, (16, 16)).unwrap_err().to_string();
        assert!(err.contains("30x32") && err.contains("16x16"), "{err}");
    }

    #[test]
    fn row_major_ordering() {
        let v = Array2::from_shape_fn((4, 4), |(r, c)| (r * 4 + c) as f64);
        let a = Spectrogram::new(v, "a").unwrap();
        let p = patchify(&a, (2, 2)).unwrap();
        assert_eq!(p.patches().row(0).to_vec(), vec![0.0, 1.0, 4.0, 5.0]);
        assert_eq!(p.patches().row(1).to_vec(), vec![2.0, 3.0, 6.0, 7.0]);
        assert_eq!(p.patches().row(2).to_vec(), vec![8.0, 9.0, 12.0, 13.0]);
    }

    #[test]
    fn single_patch_is_reshape() {
        let f = frame(4, 4, 2, 1);
        let p = patchify(&f, (4, 4)).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(unpatchify(&p).unwrap(), *f.values());
    }

    #[test]
    fn tampered_grid_rejected() {
        let f = frame(8, 8, 1, 2);
        let mut p = patchify(&f, (4, 4)).unwrap();
        p.set_grid_unchecked((3, 2));
        assert!(matches!(unpatchify(&p), Err(Error::Dimension(_))));
    }

    #[test]
    fn sample_mask_counts_and_determinism() {
        let m = sample_mask(196, 0.75, 7).unwrap();
        assert_eq!(m.n_masked(), 147);
        assert_eq!(m.n_visible(), 49);
        assert_eq!(m, sample_mask(196, 0.75, 7).unwrap());
        assert!(sample_mask(196, 0.0, 7).unwrap().masked_indices().is_empty());
        assert!(sample_mask(10, 1.0, 0).is_err());
        assert!(sample_mask(10, -0.1, 0).is_err());
    }

    #[test]
    fn sample_mask_is_uniform() {
        // each position should be masked with probability 0.75
        let n = 16;
        let draws = 10_000;
        let mut hits = vec![0usize; n];
        for seed in 0..draws {
            for &i in sample_mask(n, 0.75, seed as u64).unwrap().masked_indices() {
                hits[i] += 1;
            }
        }
        for (i, &h) in hits.iter().enumerate() {
            let freq = h as f64 / draws as f64;
            assert!((freq - 0.75).abs() < 0.02, "position {i}: {freq}");
        }
    }

    #[test]
    fn apply_mask_enumeration() {
        let v = Array2::from_shape_fn((4, 1), |(r, _)| r as f64);
        let seq = PatchSequence::new(v, (2, 2), (1, 1), 1, Modality::Audio).unwrap();
        let m = MaskSpec::new(vec![1, 3], 4, 0.5).unwrap();
        let vis = apply_mask(&seq, &m).unwrap();
        assert_eq!(vis.positions, vec![0, 2]);
        assert_eq!(vis.patches.column(0).to_vec(), vec![0.0, 2.0]);

        let all = apply_mask(&seq, &MaskSpec::none(4)).unwrap();
        assert_eq!(&all.patches, seq.patches());

        assert!(apply_mask(&seq, &MaskSpec::none(5)).is_err());
    }

    #[test]
    fn pad_direct_construction() {
        let m = MaskSpec::new(vec![0, 2], 3, 0.6).unwrap();
        let t = Array2::from_elem((1, 2), 5.0);
        let tok = Array1::from(vec![-1.0, -2.0]);
        let out = pad_with_mask_tokens(&t, &m, &tok).unwrap();
        assert_eq!(out.row(0).to_vec(), vec![-1.0, -2.0]);
        assert_eq!(out.row(1).to_vec(), vec![5.0, 5.0]);
        assert_eq!(out.row(2).to_vec(), vec![-1.0, -2.0]);

        let none = MaskSpec::none(3);
        let t3 = Array2::from_shape_fn((3, 2), |(r, c)| (r * 2 + c) as f64);
        assert_eq!(pad_with_mask_tokens(&t3, &none, &tok).unwrap(), t3);
        assert!(pad_with_mask_tokens(&t, &none, &tok).is_err());
    }

    proptest! {
        #[test]
        fn patchify_round_trip(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5, c in 1usize..4) {
            let f = frame(rows * 8, cols * 8, c, seed);
            let p = patchify(&f, (8, 8)).unwrap();
            prop_assert_eq!(&unpatchify(&p).unwrap(), f.values());
        }

        #[test]
        fn visible_and_masked_partition(n in 1usize..200, ratio in 0.0f64..0.99, seed in any::<u64>()) {
            let m = sample_mask(n, ratio, seed).unwrap();
            let v = Array2::from_shape_fn((n, 2), |(r, c)| (r * 2 + c) as f64);
            let seq = PatchSequence::new(v, (n, 1), (1, 2), 1, Modality::Visual).unwrap();
            let vis = apply_mask(&seq, &m).unwrap();
            let mut all: Vec<usize> = vis.positions.iter().chain(m.masked_indices()).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
            prop_assert!(vis.positions.windows(2).all(|w| w[0] < w[1]));
        }

        #[test]
        fn pad_gather_consistency(n in 1usize..64, ratio in 0.0f64..0.95, seed in any::<u64>()) {
            let m = sample_mask(n, ratio, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            let tokens = Array2::from_shape_fn((m.n_visible(), 3), |_| rng.random::<f64>());
            let tok = Array1::from(vec![-7.0, -8.0, -9.0]);
            let out = pad_with_mask_tokens(&tokens, &m, &tok).unwrap();
            prop_assert_eq!(out.select(Axis(0), &m.visible_indices()), tokens);
            for &i in m.masked_indices() {
                prop_assert_eq!(out.row(i).to_owned(), tok.clone());
            }
        }
    }
}
