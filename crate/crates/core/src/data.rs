//! In-memory dataset operations: labeled images, augmentation, stratified
//! splitting, data-fraction subsampling, imbalance construction and the
//! synthetic two-class generator. Decoding from disk lives in the std crate.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::real::{self, Real};
use crate::{rng_from_seed, Error, Result, Rng, Tensor};

/// Side length images are resized to on ingestion.
pub const IMAGE_SIZE: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImage {
    /// `[H, W, C]`, values in `[0, 1]`.
    pub pixels: Tensor,
    /// 0 normal, 1 pneumonia.
    pub label: u8,
    pub source_id: String,
}

impl LabeledImage {
    pub fn new(pixels: Tensor, label: u8, source_id: impl Into<String>) -> Result<Self> {
        if pixels.rank() != 3 {
            return Err(Error::dim(
                "LabeledImage",
                format!("expected [H, W, C], got {:?}", pixels.shape()),
            ));
        }
        if label > 1 {
            return Err(Error::contract(
                "LabeledImage",
                format!("label {label} not in {{0, 1}}"),
            ));
        }
        Ok(LabeledImage {
            pixels,
            label,
            source_id: source_id.into(),
        })
    }

    pub fn hwc(&self) -> [usize; 3] {
        let s = self.pixels.shape();
        [s[0], s[1], s[2]]
    }
}

/// `[normal, pneumonia]` counts.
pub fn class_counts(images: &[LabeledImage]) -> [usize; 2] {
    let mut c = [0; 2];
    for im in images {
        c[im.label as usize] += 1;
    }
    c
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LabeledImage>,
    pub validation: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: [usize; 2],
    pub validation: [usize; 2],
    pub test: [usize; 2],
}

impl DatasetSplit {
    pub fn class_counts(&self) -> SplitCounts {
        SplitCounts {
            train: class_counts(&self.train),
            validation: class_counts(&self.validation),
            test: class_counts(&self.test),
        }
    }
}

/// Augmentation ranges. Each magnitude is drawn uniformly from `[-max, max]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentParams {
    pub rotation_deg: Real,
    /// Fraction of the width.
    pub width_shift: Real,
    /// Fraction of the height.
    pub height_shift: Real,
    /// Shear angle in degrees.
    pub shear_deg: Real,
    /// Zoom factors are drawn from `[1 - zoom, 1 + zoom]` per axis.
    pub zoom: Real,
    pub horizontal_flip: bool,
}

impl Default for AugmentParams {
    fn default() -> Self {
        AugmentParams {
            rotation_deg: 20.0,
            width_shift: 0.2,
            height_shift: 0.2,
            shear_deg: 0.2,
            zoom: 0.2,
            horizontal_flip: true,
        }
    }
}

impl AugmentParams {
    pub const MAX_ROTATION_DEG: Real = 20.0;
    pub const MAX_FRACTION: Real = 0.2;

    /// All magnitudes zero, no flip.
    pub fn none() -> Self {
        AugmentParams {
            rotation_deg: 0.0,
            width_shift: 0.0,
            height_shift: 0.0,
            shear_deg: 0.0,
            zoom: 0.0,
            horizontal_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("rotation_deg", self.rotation_deg, Self::MAX_ROTATION_DEG),
            ("width_shift", self.width_shift, Self::MAX_FRACTION),
            ("height_shift", self.height_shift, Self::MAX_FRACTION),
            ("shear_deg", self.shear_deg, Self::MAX_FRACTION),
            ("zoom", self.zoom, Self::MAX_FRACTION),
        ];
        for (name, v, max) in checks {
            if !(0.0..=max).contains(&v) {
                return Err(Error::contract(
                    "AugmentParams",
                    format!("{name} = {v} outside [0, {max}]"),
                ));
            }
        }
        Ok(())
    }
}

fn symmetric(rng: &mut Rng, max: Real) -> Real {
    let u: Real = rng.gen();
    max * (2.0 * u - 1.0)
}

/// Bilinear sample at fractional `(r, c)`, coordinates clamped to the
/// border (nearest fill).
fn sample_clamped(src: &[Real], h: usize, w: usize, ch: usize, r: Real, c: Real, out: &mut [Real]) {
    let r = r.clamp(0.0, (h - 1) as Real);
    let c = c.clamp(0.0, (w - 1) as Real);
    let r0 = real::floor(r) as usize;
    let c0 = real::floor(c) as usize;
    let r1 = (r0 + 1).min(h - 1);
    let c1 = (c0 + 1).min(w - 1);
    let fr = r - r0 as Real;
    let fc = c - c0 as Real;
    let (b00, b01) = ((r0 * w + c0) * ch, (r0 * w + c1) * ch);
    let (b10, b11) = ((r1 * w + c0) * ch, (r1 * w + c1) * ch);
    for k in 0..ch {
        let top = src[b00 + k] * (1.0 - fc) + src[b01 + k] * fc;
        let bottom = src[b10 + k] * (1.0 - fc) + src[b11 + k] * fc;
        out[k] = top * (1.0 - fr) + bottom * fr;
    }
}

/// Mirrors an `[H, W, C]` image left to right.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let s = image.shape();
    let (h, w, ch) = (s[0], s[1], s[2]);
    let src = image.data();
    let mut out = Vec::with_capacity(src.len());
    for r in 0..h {
        for c in (0..w).rev() {
            let b = (r * w + c) * ch;
            out.extend_from_slice(&src[b..b + ch]);
        }
    }
    Tensor::new(s, out).expect("same shape")
}

/// Random rotation, shift, shear and zoom about the image centre, then an
/// optional horizontal flip. Output coordinates are mapped back into the
/// source and sampled bilinearly; points outside take the nearest edge value.
pub fn augment(image: &Tensor, params: &AugmentParams, seed: u64) -> Result<Tensor> {
    params.validate()?;
    if image.rank() != 3 {
        return Err(Error::dim(
            "augment",
            format!("expected [H, W, C], got {:?}", image.shape()),
        ));
    }
    let s = image.shape();
    let (h, w, ch) = (s[0], s[1], s[2]);
    let mut rng = rng_from_seed(seed);
    let deg = core::f64::consts::PI as Real / 180.0;
    let theta = symmetric(&mut rng, params.rotation_deg) * deg;
    let tr = symmetric(&mut rng, params.height_shift) * h as Real;
    let tc = symmetric(&mut rng, params.width_shift) * w as Real;
    let shear = symmetric(&mut rng, params.shear_deg) * deg;
    let zr = 1.0 + symmetric(&mut rng, params.zoom);
    let zc = 1.0 + symmetric(&mut rng, params.zoom);
    let flip = params.horizontal_flip && rng.gen_bool(0.5);

    // output (row, col) offset from centre -> source offset
    // rotation · shift · shear · zoom
    let (cos, sin) = (real::cos(theta), real::sin(theta));
    let (ssh, csh) = (real::sin(shear), real::cos(shear));
    // shear · zoom
    let sz = [[zr, -ssh * zc], [0.0, csh * zc]];
    let m = [
        [
            cos * sz[0][0] - sin * sz[1][0],
            cos * sz[0][1] - sin * sz[1][1],
        ],
        [
            sin * sz[0][0] + cos * sz[1][0],
            sin * sz[0][1] + cos * sz[1][1],
        ],
    ];
    let off = [cos * tr - sin * tc, sin * tr + cos * tc];

    let (cr, cc) = ((h as Real - 1.0) / 2.0, (w as Real - 1.0) / 2.0);
    let src = image.data();
    let mut out = alloc::vec![0.0; src.len()];
    for r in 0..h {
        let dr = r as Real - cr;
        for c in 0..w {
            let dc = c as Real - cc;
            let sr = m[0][0] * dr + m[0][1] * dc + off[0] + cr;
            let sc = m[1][0] * dr + m[1][1] * dc + off[1] + cc;
            let b = (r * w + c) * ch;
            sample_clamped(src, h, w, ch, sr, sc, &mut out[b..b + ch]);
        }
    }
    let t = Tensor::new(s, out)?;
    Ok(if flip { flip_horizontal(&t) } else { t })
}

/// Bilinear resize of an `[H, W, C]` image with half-pixel centres.
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    if image.rank() != 3 || out_h == 0 || out_w == 0 || image.is_empty() {
        return Err(Error::dim(
            "resize_bilinear",
            format!("cannot resize {:?} to {out_h}x{out_w}", image.shape()),
        ));
    }
    let s = image.shape();
    let (h, w, ch) = (s[0], s[1], s[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let (sy, sx) = (h as Real / out_h as Real, w as Real / out_w as Real);
    let mut out = alloc::vec![0.0; out_h * out_w * ch];
    for r in 0..out_h {
        let y = (r as Real + 0.5) * sy - 0.5;
        for c in 0..out_w {
            let x = (c as Real + 0.5) * sx - 0.5;
            let b = (r * out_w + c) * ch;
            sample_clamped(image.data(), h, w, ch, y, x, &mut out[b..b + ch]);
        }
    }
    Tensor::new(&[out_h, out_w, ch], out)
}

/// Appends `⌈growth · count(class)⌉` augmented copies of randomly chosen
/// members of `class_id`.
pub fn expand_minority(
    images: &[LabeledImage],
    class_id: u8,
    growth: Real,
    params: &AugmentParams,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if !(growth >= 0.0) {
        return Err(Error::contract(
            "expand_minority",
            format!("growth {growth} < 0"),
        ));
    }
    let members: Vec<&LabeledImage> = images.iter().filter(|im| im.label == class_id).collect();
    if members.is_empty() {
        return Err(Error::Protocol(format!(
            "class {class_id} absent; nothing to expand"
        )));
    }
    let target = growth * members.len() as Real;
    let extra = libm::ceil(target as f64 - 1e-9) as usize;
    let mut rng = rng_from_seed(seed);
    let mut out = images.to_vec();
    for k in 0..extra {
        let src = members[rng.gen_range(0..members.len())];
        let aug_seed: u64 = rng.gen();
        out.push(LabeledImage {
            pixels: augment(&src.pixels, params, aug_seed)?,
            label: class_id,
            source_id: format!("{}#aug{k}", src.source_id),
        });
    }
    Ok(out)
}

/// Partitions per class: each class is shuffled and its first
/// `round(frac · n)` members go to each listed portion, the remainder to
/// the last output. Every output keeps input order.
fn partition_stratified(
    images: &[LabeledImage],
    fracs: &[Real],
    seed: u64,
) -> Result<Vec<Vec<LabeledImage>>> {
    let counts = class_counts(images);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Protocol(format!(
            "class {c} has no members; cannot stratify"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut assign = alloc::vec![fracs.len(); images.len()];
    for class in 0..2u8 {
        let mut idx: Vec<usize> = (0..images.len())
            .filter(|&i| images[i].label == class)
            .collect();
        idx.shuffle(&mut rng);
        let n = idx.len() as Real;
        let mut start = 0;
        for (slot, &f) in fracs.iter().enumerate() {
            let take = (libm::round((f * n) as f64) as usize).min(idx.len() - start);
            for &i in &idx[start..start + take] {
                assign[i] = slot;
            }
            start += take;
        }
    }
    let mut out = alloc::vec![Vec::new(); fracs.len() + 1];
    for (im, &slot) in images.iter().zip(&assign) {
        out[slot].push(im.clone());
    }
    Ok(out)
}

/// Stratified train / validation / test split; `test_frac` and `val_frac`
/// are fractions of the whole set.
pub fn stratified_split(
    images: &[LabeledImage],
    test_frac: Real,
    val_frac: Real,
    seed: u64,
) -> Result<DatasetSplit> {
    if !(test_frac > 0.0 && test_frac < 1.0)
        || !(0.0..1.0).contains(&val_frac)
        || test_frac + val_frac >= 1.0
    {
        return Err(Error::contract(
            "stratified_split",
            format!("fractions test {test_frac}, validation {val_frac} must lie in (0,1) and sum below 1"),
        ));
    }
    let mut parts = partition_stratified(images, &[test_frac, val_frac], seed)?;
    let train = parts.pop().unwrap();
    let validation = parts.pop().unwrap();
    let test = parts.pop().unwrap();
    Ok(DatasetSplit {
        train,
        validation,
        test,
    })
}

/// Moves a stratified `val_frac` of `train` into the validation portion.
pub fn carve_validation(split: &DatasetSplit, val_frac: Real, seed: u64) -> Result<DatasetSplit> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::contract(
            "carve_validation",
            format!("fraction {val_frac} outside (0,1)"),
        ));
    }
    let mut parts = partition_stratified(&split.train, &[val_frac], seed)?;
    let train = parts.pop().unwrap();
    let mut validation = split.validation.clone();
    validation.extend(parts.pop().unwrap());
    Ok(DatasetSplit {
        train,
        validation,
        test: split.test.clone(),
    })
}

/// Round half to even, tolerant of representation error near `.5`.
pub fn round_half_even(x: Real) -> Real {
    let f = real::floor(x);
    let d = x - f;
    if (d - 0.5).abs() < 1e-9 {
        if f % 2.0 == 0.0 {
            f
        } else {
            f + 1.0
        }
    } else if d < 0.5 {
        f
    } else {
        f + 1.0
    }
}

fn random_subset(items: &[&LabeledImage], keep: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.shuffle(rng);
    idx.truncate(keep);
    idx.sort_unstable();
    idx
}

/// Reduces the training portion per class to `round(fraction · count)`
/// (half to even); validation and test are untouched.
pub fn subsample_fraction(split: &DatasetSplit, fraction: Real, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::contract(
            "subsample_fraction",
            format!("fraction {fraction} outside (0,1]"),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let mut keep = alloc::vec![false; split.train.len()];
    for class in 0..2u8 {
        let members: Vec<usize> = (0..split.train.len())
            .filter(|&i| split.train[i].label == class)
            .collect();
        let target = round_half_even(fraction * members.len() as Real) as usize;
        if target == 0 {
            return Err(Error::Protocol(format!(
                "fraction {fraction} leaves class {class} empty ({} members)",
                members.len()
            )));
        }
        let refs: Vec<&LabeledImage> = members.iter().map(|&i| &split.train[i]).collect();
        for j in random_subset(&refs, target, &mut rng) {
            keep[members[j]] = true;
        }
    }
    Ok(DatasetSplit {
        train: split
            .train
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(im, _)| im.clone())
            .collect(),
        validation: split.validation.clone(),
        test: split.test.clone(),
    })
}

/// Random per-class subsets of exactly the requested sizes.
pub fn make_imbalanced(
    pool: &[LabeledImage],
    n_positive: usize,
    n_negative: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if n_positive == 0 || n_negative == 0 {
        return Err(Error::Protocol(format!(
            "requested ({n_positive} positive, {n_negative} negative) leaves a class empty"
        )));
    }
    let have = class_counts(pool);
    let want = [n_negative, n_positive];
    let deficit: Vec<String> = (0..2)
        .filter(|&c| have[c] < want[c])
        .map(|c| {
            format!(
                "class {c}: need {}, have {} (short {})",
                want[c],
                have[c],
                want[c] - have[c]
            )
        })
        .collect();
    if !deficit.is_empty() {
        return Err(Error::Protocol(format!(
            "insufficient pool: {}",
            deficit.join("; ")
        )));
    }
    let mut rng = rng_from_seed(seed);
    let mut keep = alloc::vec![false; pool.len()];
    for class in 0..2u8 {
        let members: Vec<usize> = (0..pool.len())
            .filter(|&i| pool[i].label == class)
            .collect();
        let refs: Vec<&LabeledImage> = members.iter().map(|&i| &pool[i]).collect();
        for j in random_subset(&refs, want[class as usize], &mut rng) {
            keep[members[j]] = true;
        }
    }
    Ok(pool
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(im, _)| im.clone())
        .collect())
}

/// Named positive/negative count pairs for the imbalance experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImbalancePreset {
    TextI,
    TextII,
    TableI,
    TableII,
}

impl ImbalancePreset {
    pub const ALL: [ImbalancePreset; 4] = [Self::TextI, Self::TextII, Self::TableI, Self::TableII];

    /// `(pneumonia, normal)`.
    pub fn counts(self) -> (usize, usize) {
        match self {
            Self::TextI => (8874, 4984),
            Self::TextII => (2908, 4984),
            Self::TableI => (8729, 4884),
            Self::TableII => (2908, 4884),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::TextI => "text-i",
            Self::TextII => "text-ii",
            Self::TableI => "table-i",
            Self::TableII => "table-ii",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }
}

/// Two-class synthetic set of `[size, size, 3]` images. Both classes carry
/// a smooth Gaussian blob plus pixel noise; class 1 adds a period-4
/// sinusoidal stripe texture, horizontal or vertical at random.
pub fn synth_dataset(n_per_class: usize, size: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    synth_dataset_channels(n_per_class, size, 3, seed)
}

pub fn synth_dataset_channels(
    n_per_class: usize,
    size: usize,
    channels: usize,
    seed: u64,
) -> Result<Vec<LabeledImage>> {
    if n_per_class == 0 || size < 16 || channels == 0 {
        return Err(Error::contract(
            "synth_dataset",
            format!(
                "need n >= 1, size >= 16, channels >= 1; got {n_per_class}, {size}, {channels}"
            ),
        ));
    }
    let mut rng = rng_from_seed(seed);
    let two_pi = 2.0 * core::f64::consts::PI as Real;
    let mut out = Vec::with_capacity(2 * n_per_class);
    for i in 0..2 * n_per_class {
        let label = (i % 2) as u8;
        let s = size as Real;
        let (cy, cx) = (s * rng.gen_range(0.3..0.7), s * rng.gen_range(0.3..0.7));
        let sigma = s * rng.gen_range(0.15..0.3);
        let base: Real = rng.gen_range(0.15..0.3);
        let peak: Real = rng.gen_range(0.35..0.5);
        let amp: Real = rng.gen_range(0.2..0.3);
        let phase: Real = rng.gen_range(0.0..two_pi);
        let vertical = rng.gen_bool(0.5);
        let mut pixels = Vec::with_capacity(size * size * channels);
        for r in 0..size {
            for c in 0..size {
                let (dy, dx) = (r as Real - cy, c as Real - cx);
                let mut v = base + peak * real::exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma));
                if label == 1 {
                    let t = if vertical { c } else { r } as Real;
                    v += amp * real::sin(two_pi * t / 4.0 + phase);
                }
                let noise: f64 = rng.sample(StandardNormal);
                v = (v + 0.02 * noise as Real).clamp(0.0, 1.0);
                pixels.extend(std::iter::repeat_n(v, channels));
            }
        }
        out.push(LabeledImage {
            pixels: Tensor::new(&[size, size, channels], pixels)?,
            label,
            source_id: format!("synth-{seed}-{i:05}"),
        });
    }
    Ok(out)
}

/// Stacks images into an `[B, H, W, C]` batch with float targets.
pub fn to_batch(images: &[&LabeledImage]) -> Result<(Tensor, Vec<Real>)> {
    let refs: Vec<&Tensor> = images.iter().map(|im| &im.pixels).collect();
    let x = Tensor::stack(&refs)?;
    Ok((x, images.iter().map(|im| im.label as Real).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dummy(n0: usize, n1: usize) -> Vec<LabeledImage> {
        (0..n0 + n1)
            .map(|i| {
                LabeledImage::new(
                    Tensor::full(&[2, 2, 1], i as Real / 1000.0),
                    (i >= n0) as u8,
                    format!("img{i}"),
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn identity_augmentation() {
        let img = synth_dataset(1, 16, 3).unwrap().remove(0).pixels;
        for seed in 0..5 {
            assert_eq!(augment(&img, &AugmentParams::none(), seed).unwrap(), img);
        }
    }

    #[test]
    fn flip_mirrors_pattern() {
        let img = Tensor::new(&[1, 2, 1], alloc::vec![0.2, 0.7]).unwrap();
        assert_eq!(flip_horizontal(&img).data(), &[0.7, 0.2]);
        let params = AugmentParams {
            horizontal_flip: true,
            ..AugmentParams::none()
        };
        let outs: Vec<Vec<Real>> = (0..32)
            .map(|s| augment(&img, &params, s).unwrap().into_data())
            .collect();
        assert!(outs.iter().all(|o| o == &[0.2, 0.7] || o == &[0.7, 0.2]));
        assert!(outs.iter().any(|o| o == &[0.7, 0.2]));
        assert!(outs.iter().any(|o| o == &[0.2, 0.7]));
    }

    #[test]
    fn augmentation_stays_in_range() {
        let img = synth_dataset(1, 16, 9).unwrap().remove(1).pixels;
        let p = AugmentParams::default();
        for seed in 0..1000 {
            let out = augment(&img, &p, seed).unwrap();
            assert_eq!(out.shape(), img.shape());
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn out_of_range_params_rejected() {
        let p = AugmentParams {
            rotation_deg: 45.0,
            ..AugmentParams::default()
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn resize_upscales_and_preserves_constants() {
        let img = Tensor::full(&[64, 64, 3], 1.0);
        let out = resize_bilinear(&img, 128, 128).unwrap();
        assert_eq!(out.shape(), &[128, 128, 3]);
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn expansion_counts() {
        let p = AugmentParams::default();
        let mut imgs = dummy(100, 150);
        let out = expand_minority(&imgs, 0, 0.30, &p, 1).unwrap();
        assert_eq!(class_counts(&out), [130, 150]);
        assert_eq!(&out[..250], &imgs[..]);
        assert_eq!(expand_minority(&imgs, 0, 0.0, &p, 1).unwrap(), imgs);
        imgs = dummy(10, 1);
        assert_eq!(
            class_counts(&expand_minority(&imgs, 0, 0.30, &p, 1).unwrap())[0],
            13
        );
        assert!(matches!(
            expand_minority(&dummy(0, 5), 0, 0.3, &p, 1),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn split_counts() {
        let imgs = dummy(40, 60);
        let s = stratified_split(&imgs, 0.1, 0.0, 7).unwrap();
        assert_eq!(class_counts(&s.test), [4, 6]);
        assert_eq!(s, stratified_split(&imgs, 0.1, 0.0, 7).unwrap());
        assert!(matches!(
            stratified_split(&dummy(10, 0), 0.1, 0.1, 1),
            Err(Error::Protocol(_))
        ));
        assert!(stratified_split(&imgs, 0.6, 0.5, 1).is_err());
    }

    #[test]
    fn subsample_counts() {
        let split = DatasetSplit {
            train: dummy(1000, 1000),
            ..Default::default()
        };
        assert_eq!(subsample_fraction(&split, 1.0, 3).unwrap(), split);
        assert_eq!(
            class_counts(&subsample_fraction(&split, 0.5, 3).unwrap().train),
            [500, 500]
        );
        let split = DatasetSplit {
            train: dummy(997, 1003),
            ..Default::default()
        };
        assert_eq!(
            class_counts(&subsample_fraction(&split, 0.7, 3).unwrap().train),
            [698, 702]
        );
        let tiny = DatasetSplit {
            train: dummy(1, 5),
            ..Default::default()
        };
        assert!(matches!(
            subsample_fraction(&tiny, 0.4, 1),
            Err(Error::Protocol(_))
        ));
    }

    #[test]
    fn half_even_rounding() {
        assert_eq!(round_half_even(2.5), 2.0);
        assert_eq!(round_half_even(3.5), 4.0);
        assert_eq!(round_half_even(0.7 * 5.0), 4.0);
        assert_eq!(round_half_even(697.9), 698.0);
    }

    #[test]
    fn imbalanced_counts_and_deficit() {
        let pool = dummy(30, 40);
        let out = make_imbalanced(&pool, 12, 30, 5).unwrap();
        assert_eq!(class_counts(&out), [30, 12]);
        match make_imbalanced(&pool, 50, 10, 5) {
            Err(Error::Protocol(msg)) => assert!(msg.contains("short 10"), "{msg}"),
            other => panic!("{other:?}"),
        }
        assert!(make_imbalanced(&pool, 0, 10, 5).is_err());
    }

    #[test]
    fn preset_counts() {
        assert_eq!(ImbalancePreset::TextI.counts(), (8874, 4984));
        assert_eq!(ImbalancePreset::TextII.counts(), (2908, 4984));
        assert_eq!(ImbalancePreset::TableI.counts(), (8729, 4884));
        assert_eq!(ImbalancePreset::TableII.counts(), (2908, 4884));
        assert_eq!(
            ImbalancePreset::parse("table-ii"),
            Some(ImbalancePreset::TableII)
        );
    }

    #[test]
    fn synth_is_deterministic_and_in_range() {
        let a = synth_dataset(50, 64, 1).unwrap();
        assert_eq!(a, synth_dataset(50, 64, 1).unwrap());
        assert_eq!(class_counts(&a), [50, 50]);
        assert!(a
            .iter()
            .all(|im| im.pixels.data().iter().all(|v| (0.0..=1.0).contains(v))));
        assert!(synth_dataset(1, 8, 1).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn split_preserves_proportions(n0 in 1usize..60, n1 in 1usize..60, test in 0.05f64..0.4, val in 0.0f64..0.3, seed in any::<u64>()) {
            let imgs = dummy(n0, n1);
            let s = stratified_split(&imgs, test as Real, val as Real, seed).unwrap();
            let c = s.class_counts();
            for (part, frac) in [(c.test, test), (c.validation, val)] {
                for k in 0..2 {
                    let expected = frac * [n0, n1][k] as f64;
                    prop_assert!((part[k] as f64 - expected).abs() <= 1.0);
                }
            }
            prop_assert_eq!(c.train[0] + c.test[0] + c.validation[0], n0);
            prop_assert_eq!(c.train[1] + c.test[1] + c.validation[1], n1);
            let mut ids: Vec<&str> = s.train.iter().chain(&s.validation).chain(&s.test).map(|im| im.source_id.as_str()).collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), n0 + n1);
        }
    }
}
