//! Cloth-preserved random erasing.
//!
//! Erasing is confined to the (dilated) clothing mask and keeps a fraction
//! `r` of clothing pixels. Per pixel:
//!
//! * outside cloth: unchanged
//! * inside cloth, kept: unchanged
//! * inside cloth, erased: fill value
//!
//! Batches are split into raw and erased views at 1:1 by [`mix_batch`].

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_image_dims, BinaryMask, Grid};
use crate::sample::{Sample, View};
use crate::seed::SeedStream;

/// How the keep mask is drawn inside the clothing region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EraseMode {
    /// Independent Bernoulli(r) per clothing pixel.
    #[default]
    Bernoulli,
    /// Random rectangles erased until the kept fraction first drops to `<= r`.
    Patch,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixAssignment {
    /// Exactly half of each identity's samples are erased, ties favor raw.
    #[default]
    Half,
    /// Each sample is erased with probability one half.
    Bernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixPolicy {
    pub raw_fraction: f64,
    pub assignment: MixAssignment,
}

impl MixPolicy {
    pub fn new(assignment: MixAssignment) -> Self {
        Self {
            raw_fraction: 0.5,
            assignment,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeepMask {
    pub grid: BinaryMask,
    pub keep_ratio: f64,
    pub seed: u64,
}

/// Draws the keep mask; only its values under the cloth mask matter and it is 1 elsewhere.
pub fn sample_keep_mask(cloth_mask: &BinaryMask, r: f64, mode: EraseMode, seed: SeedStream) -> Result<KeepMask> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::Argument(format!("keep ratio must lie in [0, 1], got {r}")));
    }
    let mut rng = seed.rng();
    let grid = match mode {
        EraseMode::Bernoulli => cloth_mask.map(|&c| if c == 0 { 1 } else { u8::from(rng.random_bool(r)) }),
        EraseMode::Patch => patch_keep_mask(cloth_mask, r, &mut rng),
    };
    Ok(KeepMask {
        grid,
        keep_ratio: r,
        seed: seed.value(),
    })
}

fn patch_keep_mask(cloth: &BinaryMask, r: f64, rng: &mut impl Rng) -> BinaryMask {
    let (h, w) = cloth.dims();
    let mut keep = Grid::filled(h, w, 1u8);
    let total = cloth.count_ones();
    if total == 0 {
        return keep;
    }
    let mut kept: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| *cloth.get(y, x) != 0)
        .collect();
    let (y0, y1) = (
        kept.iter().map(|p| p.0).min().unwrap(),
        kept.iter().map(|p| p.0).max().unwrap(),
    );
    let (x0, x1) = (
        kept.iter().map(|p| p.1).min().unwrap(),
        kept.iter().map(|p| p.1).max().unwrap(),
    );
    let box_area = ((y1 - y0 + 1) * (x1 - x0 + 1)) as f64;
    while (kept.len() as f64) / (total as f64) > r {
        // Every rectangle is centered on a still-kept pixel, so each step erases at least one.
        let (cy, cx) = kept[rng.random_range(0..kept.len())];
        let area = box_area * rng.random_range(0.02..0.2);
        let aspect: f64 = rng.random_range(0.3f64..3.3);
        let rh = ((area * aspect).sqrt().round() as usize).max(1);
        let rw = ((area / aspect).sqrt().round() as usize).max(1);
        let top = cy.saturating_sub(rh / 2);
        let left = cx.saturating_sub(rw / 2);
        for y in top..(top + rh).min(h) {
            for x in left..(left + rw).min(w) {
                keep.set(y, x, 0);
            }
        }
        kept.retain(|&(y, x)| *keep.get(y, x) != 0);
    }
    // Restore 1 outside the cloth region; those values have no effect.
    cloth
        .zip_map(&keep, |&c, &k| if c == 0 { 1 } else { k })
        .expect("same dims")
}

/// Fills erased clothing pixels; everything else is copied bit for bit.
pub fn apply_cpre(image: &RgbImage, cloth_mask: &BinaryMask, keep: &KeepMask, fill: [u8; 3]) -> Result<RgbImage> {
    ensure_image_dims(image, cloth_mask.dims(), "apply_cpre")?;
    ensure_image_dims(image, keep.grid.dims(), "apply_cpre")?;
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        let (yy, xx) = (y as usize, x as usize);
        if *cloth_mask.get(yy, xx) != 0 && *keep.grid.get(yy, xx) == 0 {
            Rgb(fill)
        } else {
            *image.get_pixel(x, y)
        }
    }))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CpreSettings {
    pub keep_min: f64,
    pub keep_max: f64,
    pub mode: EraseMode,
    pub fill: [u8; 3],
    pub policy: MixPolicy,
}

impl Default for CpreSettings {
    fn default() -> Self {
        Self {
            keep_min: 0.1,
            keep_max: 0.3,
            mode: EraseMode::Bernoulli,
            fill: [0, 0, 0],
            policy: MixPolicy::new(MixAssignment::Half),
        }
    }
}

impl CpreSettings {
    pub fn validate(&self) -> Result<()> {
        if self.keep_min > self.keep_max {
            return Err(Error::Config(format!(
                "cpre keep range is empty: min {} > max {}",
                self.keep_min, self.keep_max
            )));
        }
        if !(0.0..=1.0).contains(&self.keep_min) || !(0.0..=1.0).contains(&self.keep_max) {
            return Err(Error::Config("cpre keep range must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Raw/erased split of a batch.
///
/// `cloth_masks[i]` is the (dilated) cloth mask of `samples[i]`; samples
/// without one stay raw. Each erased sample draws its own keep ratio from
/// `[keep_min, keep_max]` on the stream `seed.child(i)`.
pub fn mix_batch(
    samples: &[Sample],
    cloth_masks: &[Option<&BinaryMask>],
    settings: &CpreSettings,
    seed: SeedStream,
) -> Result<Vec<Sample>> {
    settings.validate()?;
    if samples.len() != cloth_masks.len() {
        return Err(Error::Argument("mix_batch: one mask slot per sample required".into()));
    }
    let mut rng = seed.named("assign").rng();
    let mut erase = vec![false; samples.len()];
    match settings.policy.assignment {
        MixAssignment::Half => {
            let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
            for (i, s) in samples.iter().enumerate() {
                by_identity.entry(s.identity).or_default().push(i);
            }
            for members in by_identity.values() {
                let n_erase = members.len() / 2;
                let mut candidates: Vec<usize> =
                    members.iter().copied().filter(|&i| cloth_masks[i].is_some()).collect();
                candidates.shuffle(&mut rng);
                for &i in candidates.iter().take(n_erase) {
                    erase[i] = true;
                }
            }
        }
        MixAssignment::Bernoulli => {
            for (i, flag) in erase.iter_mut().enumerate() {
                *flag = rng.random_bool(1.0 - settings.policy.raw_fraction) && cloth_masks[i].is_some();
            }
        }
    }
    samples
        .iter()
        .zip(cloth_masks)
        .enumerate()
        .map(|(i, (sample, mask))| match (erase[i], mask) {
            (true, Some(mask)) => {
                let stream = seed.child(i as u64);
                let r = stream
                    .named("ratio")
                    .rng()
                    .random_range(settings.keep_min..=settings.keep_max);
                let keep = sample_keep_mask(mask, r, settings.mode, stream)?;
                Ok(Sample {
                    image: apply_cpre(&sample.image, mask, &keep, settings.fill)?,
                    view: View::Erased,
                    ..sample.clone()
                })
            }
            _ => Ok(Sample {
                view: if sample.view == View::Erased {
                    View::Raw
                } else {
                    sample.view
                },
                ..sample.clone()
            }),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sample::HairstyleLabel;

    fn image(h: u32, w: u32, seed: u64) -> RgbImage {
        let mut rng = SeedStream::new(seed).rng();
        RgbImage::from_fn(w, h, |_, _| {
            Rgb([rng.random_range(1..=255), rng.random(), rng.random()])
        })
    }

    fn sample(identity: u32, idx: usize) -> Sample {
        Sample {
            id: format!("{identity}_{idx}"),
            image: image(8, 4, idx as u64),
            identity,
            clothes: identity,
            hairstyle: 0,
            camera: 0,
            semantic_map: None,
            view: View::Raw,
            style: HairstyleLabel::Original,
        }
    }

    #[test]
    fn degenerate_ratios() {
        let cloth = Grid::from_fn(10, 10, |y, _| u8::from(y > 4));
        let all = sample_keep_mask(&cloth, 1.0, EraseMode::Bernoulli, SeedStream::new(1)).unwrap();
        assert!(all.grid.as_slice().iter().all(|&k| k == 1));
        let none = sample_keep_mask(&cloth, 0.0, EraseMode::Bernoulli, SeedStream::new(1)).unwrap();
        for (c, k) in cloth.as_slice().iter().zip(none.grid.as_slice()) {
            if *c == 1 {
                assert_eq!(*k, 0);
            }
        }
        assert!(sample_keep_mask(&cloth, 1.5, EraseMode::Bernoulli, SeedStream::new(1)).is_err());
        assert!(sample_keep_mask(&cloth, -0.1, EraseMode::Patch, SeedStream::new(1)).is_err());
    }

    #[test]
    fn keep_fraction_concentrates() {
        let cloth = BinaryMask::filled(100, 100, 1);
        let mean: f64 = (0..100)
            .map(|s| {
                let k = sample_keep_mask(&cloth, 0.2, EraseMode::Bernoulli, SeedStream::new(s)).unwrap();
                k.grid.count_ones() as f64 / 10_000.0
            })
            .sum::<f64>()
            / 100.0;
        assert!((mean - 0.2).abs() < 0.02, "mean kept {mean}");
    }

    #[test]
    fn patch_mode_stops_at_or_below_ratio() {
        let cloth = Grid::from_fn(40, 20, |y, x| u8::from(y > 10 && x > 2 && x < 17));
        let total = cloth.count_ones() as f64;
        for seed in 0..10 {
            let k = sample_keep_mask(&cloth, 0.3, EraseMode::Patch, SeedStream::new(seed)).unwrap();
            let kept = cloth
                .as_slice()
                .iter()
                .zip(k.grid.as_slice())
                .filter(|(&c, &k)| c == 1 && k == 1)
                .count() as f64;
            assert!(kept / total <= 0.3);
            assert!(kept / total > 0.05, "patch mode overshot: {}", kept / total);
        }
    }

    #[test]
    fn apply_cases() {
        let img = image(3, 3, 9);
        let zero = BinaryMask::zeros(3, 3);
        let keep0 = KeepMask {
            grid: BinaryMask::zeros(3, 3),
            keep_ratio: 0.0,
            seed: 0,
        };
        assert_eq!(apply_cpre(&img, &zero, &keep0, [0, 0, 0]).unwrap(), img);
        let keep1 = KeepMask {
            grid: BinaryMask::filled(3, 3, 1),
            ..keep0.clone()
        };
        assert_eq!(
            apply_cpre(&img, &BinaryMask::filled(3, 3, 1), &keep1, [0, 0, 0]).unwrap(),
            img
        );
        let mut center = BinaryMask::zeros(3, 3);
        center.set(1, 1, 1);
        let out = apply_cpre(&img, &center, &keep0, [7, 8, 9]).unwrap();
        for (x, y, px) in out.enumerate_pixels() {
            if (x, y) == (1, 1) {
                assert_eq!(px.0, [7, 8, 9]);
            } else {
                assert_eq!(px, img.get_pixel(x, y));
            }
        }
        assert!(apply_cpre(&img, &BinaryMask::zeros(2, 3), &keep0, [0; 3]).is_err());
    }

    #[test]
    fn half_policy_splits_each_identity() {
        let samples: Vec<Sample> = (0..8).map(|i| sample(i as u32 / 4, i)).collect();
        let cloth = BinaryMask::filled(8, 4, 1);
        let masks = vec![Some(&cloth); 8];
        let out = mix_batch(&samples, &masks, &CpreSettings::default(), SeedStream::new(3)).unwrap();
        for id in 0..2 {
            let erased = out
                .iter()
                .filter(|s| s.identity == id && s.view == View::Erased)
                .count();
            assert_eq!(erased, 2);
        }
        let one = mix_batch(&samples[..1], &masks[..1], &CpreSettings::default(), SeedStream::new(3)).unwrap();
        assert_eq!(one[0].view, View::Raw);
        assert_eq!(one[0].image, samples[0].image);
    }

    #[test]
    fn unmasked_samples_stay_raw() {
        let samples: Vec<Sample> = (0..4).map(|i| sample(0, i)).collect();
        let out = mix_batch(
            &samples,
            &[None, None, None, None],
            &CpreSettings::default(),
            SeedStream::new(1),
        )
        .unwrap();
        assert!(out.iter().all(|s| s.view == View::Raw));
    }

    #[test]
    fn empty_range_is_config_error() {
        let s = CpreSettings {
            keep_min: 0.5,
            keep_max: 0.2,
            ..CpreSettings::default()
        };
        assert!(matches!(
            mix_batch(&[], &[], &s, SeedStream::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn bernoulli_policy_is_balanced() {
        let samples: Vec<Sample> = (0..8).map(|i| sample(i as u32 % 2, i)).collect();
        let cloth = BinaryMask::filled(8, 4, 1);
        let masks = vec![Some(&cloth); 8];
        let settings = CpreSettings {
            policy: MixPolicy::new(MixAssignment::Bernoulli),
            ..CpreSettings::default()
        };
        let mut erased = 0usize;
        for b in 0..1000 {
            let out = mix_batch(&samples, &masks, &settings, SeedStream::new(b)).unwrap();
            erased += out.iter().filter(|s| s.view == View::Erased).count();
        }
        let frac = erased as f64 / 8000.0;
        assert!((frac - 0.5).abs() < 0.03, "erased fraction {frac}");
    }

    #[test]
    fn mix_is_deterministic() {
        let samples: Vec<Sample> = (0..6).map(|i| sample(i as u32 % 3, i)).collect();
        let cloth = Grid::from_fn(8, 4, |y, _| u8::from(y >= 3));
        let masks = vec![Some(&cloth); 6];
        let a = mix_batch(&samples, &masks, &CpreSettings::default(), SeedStream::new(42)).unwrap();
        let b = mix_batch(&samples, &masks, &CpreSettings::default(), SeedStream::new(42)).unwrap();
        assert_eq!(a, b);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn matches_three_case_oracle(seed in 0u64..10_000, r in 0.0f64..=1.0) {
                let mut rng = SeedStream::new(seed).rng();
                let img = RgbImage::from_fn(6, 9, |_, _| Rgb([rng.random(), rng.random(), rng.random()]));
                let cloth = Grid::from_fn(9, 6, |_, _| u8::from(rng.random_bool(0.5)));
                let keep = sample_keep_mask(&cloth, r, EraseMode::Bernoulli, SeedStream::new(seed)).unwrap();
                let out = apply_cpre(&img, &cloth, &keep, [1, 2, 3]).unwrap();
                for (x, y, px) in out.enumerate_pixels() {
                    let (c, k) = (*cloth.get(y as usize, x as usize), *keep.grid.get(y as usize, x as usize));
                    let expect = if c == 0 || k == 1 { *img.get_pixel(x, y) } else { Rgb([1, 2, 3]) };
                    prop_assert_eq!(*px, expect);
                }
            }
        }
    }
}
