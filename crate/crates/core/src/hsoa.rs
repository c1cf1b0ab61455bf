//! Hairstyle-oriented augmentation.
//!
//! The head (face and hair) is cut out, handed to a [`HairSynthesizer`] for
//! each target hairstyle, and the synthesized hair is pasted back under the
//! source hair mask only:
//!
//! `out = hair * synth + (1 - hair) * image`
//!
//! so every pixel outside the hair mask, the face included, is carried over
//! bit for bit. Augmented samples keep the identity, clothes and camera labels
//! of their source.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{ensure_image_dims, BinaryMask};
use crate::masks::RegionMasks;
use crate::sample::{HairstyleLabel, Sample, View};
use crate::seed::fnv1a;

/// Head image produced by a synthesizer; zero outside the head support.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesizedHead {
    pub image: RgbImage,
    pub style: HairstyleLabel,
    pub source_sample_id: String,
}

pub trait HairSynthesizer: Send + Sync {
    fn synthesize(
        &self,
        sample_id: &str,
        head_crop: &RgbImage,
        head_masks: &RegionMasks,
        style: HairstyleLabel,
    ) -> Result<SynthesizedHead>;

    fn supports(&self, style: HairstyleLabel) -> bool {
        style != HairstyleLabel::Original
    }
}

/// `image * head_mask`, zero outside the head.
pub fn extract_head(image: &RgbImage, masks: &RegionMasks) -> Result<RgbImage> {
    ensure_image_dims(image, masks.dims(), "extract_head")?;
    let head = &masks.head;
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if *head.get(y as usize, x as usize) != 0 {
            *image.get_pixel(x, y)
        } else {
            Rgb([0, 0, 0])
        }
    }))
}

/// Pastes `synth` into `image` under `hair_mask`; other pixels are copied.
pub fn composite_hair(image: &RgbImage, hair_mask: &BinaryMask, synth: &SynthesizedHead) -> Result<RgbImage> {
    ensure_image_dims(image, hair_mask.dims(), "composite_hair")?;
    ensure_image_dims(&synth.image, hair_mask.dims(), "composite_hair")?;
    Ok(RgbImage::from_fn(image.width(), image.height(), |x, y| {
        if *hair_mask.get(y as usize, x as usize) != 0 {
            *synth.image.get_pixel(x, y)
        } else {
            *image.get_pixel(x, y)
        }
    }))
}

/// Deterministic stand-in for a hairstyle GAN.
///
/// Face pixels are copied unchanged. Hair pixels are repainted with a color
/// drawn from `(sample_id, style)` and cut to a style template: short keeps the
/// top 35% of the head box, medium the top 65%, long everything. Hair pixels
/// outside the template are left at zero.
#[derive(Clone, Copy, Debug, Default)]
pub struct ProceduralStub;

impl ProceduralStub {
    fn template_fraction(style: HairstyleLabel) -> f64 {
        match style {
            HairstyleLabel::Short => 0.35,
            HairstyleLabel::Medium => 0.65,
            HairstyleLabel::Long | HairstyleLabel::Original => 1.0,
        }
    }

    fn style_color(sample_id: &str, style: HairstyleLabel) -> [u8; 3] {
        let h = fnv1a(format!("{sample_id}/{}", style.as_str()).as_bytes());
        let h = h ^ (h >> 29);
        [(h & 0xff) as u8, ((h >> 8) & 0xff) as u8, ((h >> 16) & 0xff) as u8]
    }
}

impl HairSynthesizer for ProceduralStub {
    fn synthesize(
        &self,
        sample_id: &str,
        head_crop: &RgbImage,
        head_masks: &RegionMasks,
        style: HairstyleLabel,
    ) -> Result<SynthesizedHead> {
        if !self.supports(style) {
            return Err(Error::Synthesis {
                sample_id: sample_id.to_string(),
                style: style.to_string(),
                reason: "style not supported".into(),
            });
        }
        ensure_image_dims(head_crop, head_masks.dims(), "synthesize")?;
        let (h, w) = head_masks.dims();
        let rows_with_head: Vec<usize> = (0..h)
            .filter(|&y| (0..w).any(|x| *head_masks.head.get(y, x) != 0))
            .collect();
        let (top, bottom) = match (rows_with_head.first(), rows_with_head.last()) {
            (Some(&t), Some(&b)) => (t, b),
            _ => (0, 0),
        };
        let cutoff = top as f64 + Self::template_fraction(style) * (bottom + 1 - top) as f64;
        let base = Self::style_color(sample_id, style);
        let image = RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let (yy, xx) = (y as usize, x as usize);
            if *head_masks.face.get(yy, xx) != 0 {
                return *head_crop.get_pixel(x, y);
            }
            if *head_masks.hair.get(yy, xx) == 0 || (yy as f64) >= cutoff {
                return Rgb([0, 0, 0]);
            }
            let shade = match style {
                HairstyleLabel::Medium if yy % 2 == 1 => 0.8,
                HairstyleLabel::Long if xx % 2 == 1 => 0.8,
                _ => 1.0,
            };
            Rgb(base.map(|c| (f64::from(c) * shade).round() as u8))
        });
        Ok(SynthesizedHead {
            image,
            style,
            source_sample_id: sample_id.to_string(),
        })
    }
}

/// Loads precomputed heads from `<root>/<sample_id>/<style>.png`.
#[derive(Clone, Debug)]
pub struct FileAdapter {
    root: PathBuf,
    /// When set, face pixels must match the source crop within this
    /// per-channel tolerance or the head is rejected.
    face_tolerance: Option<u8>,
}

impl FileAdapter {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            face_tolerance: None,
        }
    }

    pub fn with_face_tolerance(mut self, tolerance: u8) -> Self {
        self.face_tolerance = Some(tolerance);
        self
    }

    pub fn path_for(&self, sample_id: &str, style: HairstyleLabel) -> PathBuf {
        self.root.join(sample_id).join(format!("{}.png", style.as_str()))
    }
}

impl HairSynthesizer for FileAdapter {
    fn synthesize(
        &self,
        sample_id: &str,
        head_crop: &RgbImage,
        head_masks: &RegionMasks,
        style: HairstyleLabel,
    ) -> Result<SynthesizedHead> {
        let path = self.path_for(sample_id, style);
        let fail = |reason: String| Error::Synthesis {
            sample_id: sample_id.to_string(),
            style: style.to_string(),
            reason,
        };
        let image = image::open(&path)
            .map_err(|e| fail(format!("{}: {e}", path.display())))?
            .to_rgb8();
        if image.dimensions() != head_crop.dimensions() {
            return Err(fail(format!(
                "{} is {:?}, head crop is {:?}",
                path.display(),
                image.dimensions(),
                head_crop.dimensions()
            )));
        }
        if let Some(tol) = self.face_tolerance {
            for (x, y, px) in head_crop.enumerate_pixels() {
                if *head_masks.face.get(y as usize, x as usize) == 0 {
                    continue;
                }
                let other = image.get_pixel(x, y);
                if px.0.iter().zip(other.0).any(|(&a, b)| a.abs_diff(b) > tol) {
                    return Err(fail(format!("face pixel ({x}, {y}) changed beyond tolerance {tol}")));
                }
            }
        }
        Ok(SynthesizedHead {
            image,
            style,
            source_sample_id: sample_id.to_string(),
        })
    }
}

/// Result of augmenting one source sample.
#[derive(Debug, Default)]
pub struct Augmentation {
    pub samples: Vec<Sample>,
    /// Styles the synthesizer failed on, with the reason.
    pub skipped: Vec<(HairstyleLabel, String)>,
    /// The source had no hair pixels; `samples` then holds unmodified copies.
    pub empty_hair: bool,
}

pub fn augmented_id(source_id: &str, style: HairstyleLabel) -> String {
    format!("{source_id}_{}", style.as_str())
}

/// One augmented sample per requested style.
pub fn augment_identity(
    sample: &Sample,
    masks: &RegionMasks,
    synthesizer: &dyn HairSynthesizer,
    styles: &[HairstyleLabel],
) -> Result<Augmentation> {
    ensure_image_dims(&sample.image, masks.dims(), "augment_identity")?;
    let mut out = Augmentation::default();
    if styles.is_empty() {
        return Ok(out);
    }
    if masks.hair.count_ones() == 0 {
        out.empty_hair = true;
        out.samples = styles.iter().map(|_| sample.clone()).collect();
        return Ok(out);
    }
    let head = extract_head(&sample.image, masks)?;
    for &style in styles {
        if !synthesizer.supports(style) {
            out.skipped.push((style, "unsupported style".into()));
            continue;
        }
        match synthesizer.synthesize(&sample.id, &head, masks, style) {
            Ok(synth) => {
                let image = composite_hair(&sample.image, &masks.hair, &synth)?;
                out.samples.push(Sample {
                    id: augmented_id(&sample.id, style),
                    image,
                    view: View::HsoaAug,
                    style,
                    ..sample.clone()
                });
            }
            Err(e) => {
                log::warn!("hair synthesis skipped for {} ({style}): {e}", sample.id);
                out.skipped.push((style, e.to_string()));
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentLabels {
    pub identity: u32,
    pub clothes: u32,
    pub hairstyle: u32,
    pub camera: u32,
}

/// One line of the augmentation manifest.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentationRecord {
    pub source_id: String,
    pub style: HairstyleLabel,
    pub output_path: String,
    pub labels: AugmentLabels,
}

impl AugmentationRecord {
    pub fn new(source: &Sample, style: HairstyleLabel, output_path: &Path) -> Self {
        Self {
            source_id: source.id.clone(),
            style,
            output_path: output_path.to_string_lossy().into_owned(),
            labels: AugmentLabels {
                identity: source.identity,
                clothes: source.clothes,
                hairstyle: source.hairstyle,
                camera: source.camera,
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, h: u32, w: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |_, _| Rgb([rng.random(), rng.random(), rng.random()]))
    }

    fn masks_from(face: BinaryMask, hair: BinaryMask) -> RegionMasks {
        let head = face.zip_map(&hair, |&a, &b| a | b).unwrap();
        let (h, w) = face.dims();
        RegionMasks {
            face,
            hair,
            head,
            cloth: BinaryMask::zeros(h, w),
            limbs: BinaryMask::zeros(h, w),
            dilation_radius_cloth: 0,
        }
    }

    fn toy_masks(h: usize, w: usize) -> RegionMasks {
        let hair = Grid::from_fn(h, w, |y, _| u8::from(y < h / 3));
        let face = Grid::from_fn(h, w, |y, _| u8::from(y >= h / 3 && y < h / 2));
        masks_from(face, hair)
    }

    fn sample(image: RgbImage) -> Sample {
        Sample {
            id: "p1_c0_h0_0".into(),
            image,
            identity: 1,
            clothes: 4,
            hairstyle: 2,
            camera: 1,
            semantic_map: None,
            view: View::Raw,
            style: HairstyleLabel::Original,
        }
    }

    #[test]
    fn extract_head_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 2, 2);
        let all = masks_from(BinaryMask::filled(2, 2, 1), BinaryMask::zeros(2, 2));
        assert_eq!(extract_head(&img, &all).unwrap(), img);
        let none = masks_from(BinaryMask::zeros(2, 2), BinaryMask::zeros(2, 2));
        assert!(extract_head(&img, &none).unwrap().pixels().all(|p| p.0 == [0, 0, 0]));
        let diag = masks_from(
            Grid::from_vec(2, 2, vec![1, 0, 0, 0]).unwrap(),
            Grid::from_vec(2, 2, vec![0, 0, 0, 1]).unwrap(),
        );
        let out = extract_head(&img, &diag).unwrap();
        assert_eq!(out.get_pixel(0, 0), img.get_pixel(0, 0));
        assert_eq!(out.get_pixel(1, 1), img.get_pixel(1, 1));
        assert_eq!(out.get_pixel(1, 0).0, [0, 0, 0]);
        assert_eq!(out.get_pixel(0, 1).0, [0, 0, 0]);
        let wrong = toy_masks(3, 2);
        assert!(matches!(extract_head(&img, &wrong), Err(Error::Argument(_))));
    }

    #[test]
    fn composite_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, 4, 3);
        let synth = SynthesizedHead {
            image: random_image(&mut rng, 4, 3),
            style: HairstyleLabel::Short,
            source_sample_id: "x".into(),
        };
        assert_eq!(composite_hair(&img, &BinaryMask::zeros(4, 3), &synth).unwrap(), img);
        assert_eq!(
            composite_hair(&img, &BinaryMask::filled(4, 3, 1), &synth).unwrap(),
            synth.image
        );
    }

    #[test]
    fn composite_matches_select_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let img = random_image(&mut rng, 8, 8);
            let synth = SynthesizedHead {
                image: random_image(&mut rng, 8, 8),
                style: HairstyleLabel::Long,
                source_sample_id: "x".into(),
            };
            let mask = Grid::from_fn(8, 8, |_, _| u8::from(rng.random_bool(0.5)));
            let out = composite_hair(&img, &mask, &synth).unwrap();
            for y in 0..8u32 {
                for x in 0..8u32 {
                    let expect = if *mask.get(y as usize, x as usize) == 1 {
                        synth.image.get_pixel(x, y)
                    } else {
                        img.get_pixel(x, y)
                    };
                    assert_eq!(out.get_pixel(x, y), expect);
                }
            }
        }
    }

    #[test]
    fn augment_inherits_labels_and_preserves_non_hair() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let s = sample(random_image(&mut rng, 12, 6));
        let masks = toy_masks(12, 6);
        let aug = augment_identity(&s, &masks, &ProceduralStub, &HairstyleLabel::SYNTHESIZED).unwrap();
        assert_eq!(aug.samples.len(), 3);
        assert!(!aug.empty_hair && aug.skipped.is_empty());
        for (a, style) in aug.samples.iter().zip(HairstyleLabel::SYNTHESIZED) {
            assert_eq!((a.identity, a.clothes, a.camera), (s.identity, s.clothes, s.camera));
            assert_eq!(a.style, style);
            assert_eq!(a.view, View::HsoaAug);
            for (x, y, px) in a.image.enumerate_pixels() {
                if *masks.hair.get(y as usize, x as usize) == 0 {
                    assert_eq!(px, s.image.get_pixel(x, y));
                }
            }
        }
        assert!(augment_identity(&s, &masks, &ProceduralStub, &[])
            .unwrap()
            .samples
            .is_empty());
    }

    #[test]
    fn stub_is_deterministic_and_keeps_face() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, 12, 6);
        let masks = toy_masks(12, 6);
        let head = extract_head(&img, &masks).unwrap();
        let a = ProceduralStub
            .synthesize("s", &head, &masks, HairstyleLabel::Medium)
            .unwrap();
        let b = ProceduralStub
            .synthesize("s", &head, &masks, HairstyleLabel::Medium)
            .unwrap();
        assert_eq!(a, b);
        let c = ProceduralStub
            .synthesize("s", &head, &masks, HairstyleLabel::Short)
            .unwrap();
        assert_ne!(a.image, c.image);
        for (x, y, px) in a.image.enumerate_pixels() {
            if *masks.face.get(y as usize, x as usize) == 1 {
                assert_eq!(px, head.get_pixel(x, y));
            }
            if *masks.head.get(y as usize, x as usize) == 0 {
                assert_eq!(px.0, [0, 0, 0]);
            }
        }
    }

    #[test]
    fn empty_hair_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let s = sample(random_image(&mut rng, 4, 4));
        let masks = masks_from(BinaryMask::filled(4, 4, 1), BinaryMask::zeros(4, 4));
        let aug = augment_identity(&s, &masks, &ProceduralStub, &[HairstyleLabel::Short]).unwrap();
        assert!(aug.empty_hair);
        assert_eq!(aug.samples, vec![s]);
    }

    #[test]
    fn file_adapter_loads_and_reports_missing() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = sample(random_image(&mut rng, 12, 6));
        let masks = toy_masks(12, 6);
        let head = extract_head(&s.image, &masks).unwrap();
        let adapter = FileAdapter::new(dir.path()).with_face_tolerance(0);
        let synth = ProceduralStub
            .synthesize(&s.id, &head, &masks, HairstyleLabel::Long)
            .unwrap();
        let path = adapter.path_for(&s.id, HairstyleLabel::Long);
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        synth.image.save(&path).unwrap();

        let aug = augment_identity(&s, &masks, &adapter, &HairstyleLabel::SYNTHESIZED).unwrap();
        assert_eq!(aug.samples.len(), 1);
        assert_eq!(aug.samples[0].style, HairstyleLabel::Long);
        let skipped: Vec<_> = aug.skipped.iter().map(|(s, _)| *s).collect();
        assert_eq!(skipped, vec![HairstyleLabel::Short, HairstyleLabel::Medium]);
        let direct = composite_hair(&s.image, &masks.hair, &synth).unwrap();
        assert_eq!(aug.samples[0].image, direct);
    }
}
