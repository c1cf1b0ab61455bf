//! Datasets: the synthetic factored pedestrian generator, the on-disk
//! directory format, identity splits and the PK batch sampler.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::masks::{LabelSchema, RegionMasks, RegionSets, SemanticMap};
use crate::sample::{HairstyleLabel, Sample, View};
use crate::seed::SeedStream;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>) -> Self {
        Self { samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Sample indices grouped by identity, in ascending identity order.
    pub fn by_identity(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut map: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            map.entry(s.identity).or_default().push(i);
        }
        map
    }

    pub fn identities(&self) -> Vec<u32> {
        self.by_identity().into_keys().collect()
    }

    /// Region masks for every sample that carries a semantic map.
    pub fn region_masks(&self, schema: &LabelSchema, sets: &RegionSets) -> Result<Vec<Option<RegionMasks>>> {
        self.samples
            .iter()
            .map(|s| {
                s.semantic_map
                    .as_ref()
                    .map(|m| crate::masks::derive_masks(m, schema, sets))
                    .transpose()
            })
            .collect()
    }

    /// Splits by identity: the first `round(n * train_fraction)` identities
    /// (ascending) train, the rest test.
    pub fn split_by_identity(&self, train_fraction: f64) -> Result<(Dataset, Dataset)> {
        if !(0.0..=1.0).contains(&train_fraction) {
            return Err(Error::Config(format!("train fraction {train_fraction} outside [0, 1]")));
        }
        let ids = self.identities();
        let n_train = (ids.len() as f64 * train_fraction).round() as usize;
        let train_ids: Vec<u32> = ids[..n_train].to_vec();
        let (train, test): (Vec<Sample>, Vec<Sample>) = self
            .samples
            .iter()
            .cloned()
            .partition(|s| train_ids.binary_search(&s.identity).is_ok());
        Ok((Dataset::new(train), Dataset::new(test)))
    }

    /// Query/gallery split of an evaluation set: `query_camera` images query,
    /// all other cameras form the gallery.
    pub fn query_gallery(&self, query_camera: u32) -> (Vec<&Sample>, Vec<&Sample>) {
        self.samples.iter().partition(|s| s.camera == query_camera)
    }

    /// Per identity, the sorted list of its global clothes classes.
    pub fn clothes_per_identity(&self) -> BTreeMap<u32, Vec<u32>> {
        let mut map: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
        for s in &self.samples {
            let v = map.entry(s.identity).or_default();
            if !v.contains(&s.clothes) {
                v.push(s.clothes);
            }
        }
        for v in map.values_mut() {
            v.sort_unstable();
        }
        map
    }
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub num_identities: usize,
    pub clothes_per_identity: usize,
    pub hairstyles_per_identity: usize,
    pub images_per_combination: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            num_identities: 32,
            clothes_per_identity: 3,
            hairstyles_per_identity: 3,
            images_per_combination: 6,
            image_height: 64,
            image_width: 32,
            noise_std: 0.03,
            seed: 0,
        }
    }
}

/// Hair palette; a hairstyle class is `shape + 3 * color`.
pub const HAIR_COLORS: [[u8; 3]; 4] = [[35, 28, 24], [112, 68, 38], [222, 192, 112], [168, 58, 32]];
pub const NUM_HAIR_CLASSES: usize = 3 * HAIR_COLORS.len();

pub const MIN_SYNTHETIC_HEIGHT: usize = 32;
pub const MIN_SYNTHETIC_WIDTH: usize = 16;

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_identities", self.num_identities),
            ("clothes_per_identity", self.clothes_per_identity),
            ("hairstyles_per_identity", self.hairstyles_per_identity),
            ("images_per_combination", self.images_per_combination),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("synthetic.{name} must be >= 1")));
            }
        }
        if self.hairstyles_per_identity > NUM_HAIR_CLASSES {
            return Err(Error::Config(format!(
                "synthetic.hairstyles_per_identity must be <= {NUM_HAIR_CLASSES}"
            )));
        }
        if !(self.noise_std >= 0.0) {
            return Err(Error::Config("synthetic.noise_std must be >= 0".into()));
        }
        if self.image_height < MIN_SYNTHETIC_HEIGHT || self.image_width < MIN_SYNTHETIC_WIDTH {
            return Err(Error::Config(format!(
                "synthetic image {}x{} too small to place all parts (min {MIN_SYNTHETIC_HEIGHT}x{MIN_SYNTHETIC_WIDTH})",
                self.image_height, self.image_width
            )));
        }
        Ok(())
    }

    pub fn num_clothes_classes(&self) -> usize {
        self.num_identities * self.clothes_per_identity
    }
}

/// Stable per-identity appearance: skin tone and body proportions.
#[derive(Clone, Debug, PartialEq)]
pub struct IdentityTraits {
    pub skin: [u8; 3],
    pub torso_half_width: f64,
    pub scale: f64,
    pub hairstyles: Vec<u32>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Texture {
    Plain,
    HStripes,
    VStripes,
    Checker,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Outfit {
    upper: [u8; 3],
    lower: [u8; 3],
    texture: Texture,
}

fn random_color(rng: &mut impl Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn color_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, y)| (f64::from(x) - f64::from(y)).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Draws identity traits; skin tones are kept at least 14 RGB units apart.
pub fn identity_traits(config: &SyntheticConfig) -> Vec<IdentityTraits> {
    let mut rng = SeedStream::new(config.seed).named("identities").rng();
    let mut out: Vec<IdentityTraits> = Vec::with_capacity(config.num_identities);
    for _ in 0..config.num_identities {
        let mut skin = [0u8; 3];
        for attempt in 0..1000 {
            skin = [
                rng.random_range(95..=245),
                rng.random_range(60..=205),
                rng.random_range(40..=185),
            ];
            let min_dist = out
                .iter()
                .map(|t| color_distance(t.skin, skin))
                .fold(f64::INFINITY, f64::min);
            if min_dist >= 14.0 || attempt == 999 {
                break;
            }
        }
        let mut classes: Vec<u32> = (0..NUM_HAIR_CLASSES as u32).collect();
        classes.shuffle(&mut rng);
        classes.truncate(config.hairstyles_per_identity);
        classes.sort_unstable();
        out.push(IdentityTraits {
            skin,
            torso_half_width: rng.random_range(0.15..0.24),
            scale: rng.random_range(0.86..1.0),
            hairstyles: classes,
        });
    }
    out
}

fn outfits(config: &SyntheticConfig) -> Vec<Outfit> {
    let mut rng = SeedStream::new(config.seed).named("outfits").rng();
    let textures = [Texture::Plain, Texture::HStripes, Texture::VStripes, Texture::Checker];
    (0..config.num_clothes_classes())
        .map(|_| Outfit {
            upper: random_color(&mut rng),
            lower: random_color(&mut rng),
            texture: textures[rng.random_range(0..textures.len())],
        })
        .collect()
}

struct Painter {
    labels: Grid<u8>,
    colors: Grid<[f64; 3]>,
}

impl Painter {
    fn paint(&mut self, y: usize, x: usize, label: u8, color: [f64; 3]) {
        self.labels.set(y, x, label);
        self.colors.set(y, x, color);
    }
}

fn shade(c: [u8; 3], f: f64) -> [f64; 3] {
    c.map(|v| f64::from(v) * f)
}

/// Renders one figure and its ground-truth semantic map.
///
/// Geometry is laid out on a 64x32 reference canvas and scaled to the
/// configured size. Identity fixes skin (face, arms, legs), torso width and
/// figure scale; the outfit fixes torso and trouser fill; the hairstyle class
/// fixes hair shape and color.
#[allow(clippy::too_many_arguments)]
fn render(
    config: &SyntheticConfig,
    schema: &LabelSchema,
    traits: &IdentityTraits,
    outfit: &Outfit,
    hair_class: u32,
    rng: &mut impl Rng,
) -> Result<(RgbImage, SemanticMap)> {
    let (h, w) = (config.image_height, config.image_width);
    let sy = h as f64 / 64.0;
    let sx = w as f64 / 32.0;
    let label = |name: &str| schema.label(name);
    let (l_hair, l_face, l_upper, l_pants) = (label("hair")?, label("face")?, label("upper-cloth")?, label("pants")?);
    let (l_larm, l_rarm, l_lleg, l_rleg) = (
        label("left-arm")?,
        label("right-arm")?,
        label("left-leg")?,
        label("right-leg")?,
    );

    let jitter = 2.0 * config.noise_std;
    let brightness = 1.0 + rng.random_range(-1.0..=1.0) * jitter;
    let bg_level: f64 = rng.random_range(150.0..215.0);
    let bg = [
        bg_level,
        bg_level * rng.random_range(0.95..1.05),
        bg_level * rng.random_range(0.95..1.05),
    ];
    let dx = rng.random_range(-2i32..=2) as f64 * sx;
    let dy = rng.random_range(-1i32..=1) as f64 * sy;

    let mut p = Painter {
        labels: Grid::filled(h, w, 0),
        colors: Grid::filled(h, w, bg),
    };
    let cx = w as f64 / 2.0 + dx;
    let s = traits.scale;
    let top = 2.0 * sy + dy;
    let px = |ref_y: f64| top + ref_y * sy * s;

    let face_cy = px(8.5);
    let (face_ry, face_rx) = (5.0 * sy * s, 4.0 * sx);
    let torso_top = px(14.5);
    let torso_bottom = px(33.0);
    let pants_bottom = px(44.0);
    let leg_bottom = px(60.0).min(h as f64 - 1.0);
    let torso_hw = traits.torso_half_width * w as f64;
    let arm_w = 2.5 * sx;

    let skin = shade(traits.skin, brightness);
    for y in 0..h {
        let fy = y as f64 + 0.5;
        for x in 0..w {
            let fx = x as f64 + 0.5;
            let ox = fx - cx;
            // legs
            if fy >= pants_bottom && fy < leg_bottom {
                let (lo, hi) = (1.0 * sx, 4.0 * sx);
                if ox.abs() >= lo && ox.abs() < hi {
                    p.paint(y, x, if ox < 0.0 { l_lleg } else { l_rleg }, skin);
                }
            }
            // trousers
            if fy >= torso_bottom && fy < pants_bottom && ox.abs() < (torso_hw - 0.5 * sx).max(4.0 * sx) {
                p.paint(y, x, l_pants, shade(outfit.lower, brightness));
            }
            // torso
            if fy >= torso_top && fy < torso_bottom && ox.abs() < torso_hw {
                let (ry, rx) = (
                    ((fy - torso_top) / (2.0 * sy)) as i64,
                    ((ox + 32.0) / (2.0 * sx)) as i64,
                );
                let dark = match outfit.texture {
                    Texture::Plain => false,
                    Texture::HStripes => ry % 2 == 0,
                    Texture::VStripes => rx % 2 == 0,
                    Texture::Checker => (ry + rx) % 2 == 0,
                };
                let f = if dark { 0.6 } else { 1.0 };
                p.paint(y, x, l_upper, shade(outfit.upper, brightness * f));
            }
            // arms
            if fy >= torso_top + 1.0 * sy
                && fy < torso_bottom + 2.0 * sy
                && ox.abs() >= torso_hw
                && ox.abs() < torso_hw + arm_w
            {
                p.paint(y, x, if ox < 0.0 { l_larm } else { l_rarm }, skin);
            }
        }
    }

    // hair, then face on top of it
    let shape = hair_class % 3;
    let hair_color = shade(HAIR_COLORS[(hair_class / 3) as usize], brightness);
    let side_bottom = match shape {
        0 => None,
        1 => Some(px(15.0)),
        _ => Some(px(26.0)),
    };
    for y in 0..h {
        let fy = y as f64 + 0.5;
        for x in 0..w {
            let fx = x as f64 + 0.5;
            let ox = fx - cx;
            let cap = {
                let (cy, ry, rx) = (px(7.0), 5.8 * sy * s, 5.5 * sx);
                ((fy - cy) / ry).powi(2) + (ox / rx).powi(2) <= 1.0 && fy <= px(6.5)
            };
            let side =
                side_bottom.is_some_and(|b| fy > px(5.0) && fy < b && ox.abs() >= 2.5 * sx && ox.abs() < 6.0 * sx);
            if cap || side {
                p.paint(y, x, l_hair, hair_color);
            }
            if ((fy - face_cy) / face_ry).powi(2) + (ox / face_rx).powi(2) <= 1.0 && fy > px(4.5) {
                p.paint(y, x, l_face, skin);
            }
        }
    }

    let noise = Normal::new(0.0, config.noise_std * 255.0).map_err(|e| Error::Config(e.to_string()))?;
    let image = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let c = p.colors.get(y as usize, x as usize);
        Rgb(c.map(|v| {
            let n = if config.noise_std > 0.0 { noise.sample(rng) } else { 0.0 };
            (v + n).round().clamp(0.0, 255.0) as u8
        }))
    });
    Ok((image, SemanticMap::new(p.labels)))
}

/// Renders the full factorial dataset: identities x outfits x hairstyles x images.
///
/// Clothes labels are global (`identity * clothes_per_identity + k`). Image
/// `j` of a combination is shot by camera `j % 2`.
pub fn generate_synthetic_dataset(config: &SyntheticConfig, schema: &LabelSchema) -> Result<Dataset> {
    config.validate()?;
    let traits = identity_traits(config);
    let outfits = outfits(config);
    let root = SeedStream::new(config.seed).named("images");
    let mut samples = Vec::new();
    for (identity, t) in traits.iter().enumerate() {
        for k in 0..config.clothes_per_identity {
            let clothes = (identity * config.clothes_per_identity + k) as u32;
            for &hair in &t.hairstyles {
                for j in 0..config.images_per_combination {
                    let id = format!("p{identity:03}_c{k}_h{hair:02}_{j}");
                    let mut rng = root.child(crate::seed::fnv1a(id.as_bytes())).rng();
                    let (image, map) = render(config, schema, t, &outfits[clothes as usize], hair, &mut rng)?;
                    samples.push(Sample {
                        id,
                        image,
                        identity: identity as u32,
                        clothes,
                        hairstyle: hair,
                        camera: (j % 2) as u32,
                        semantic_map: Some(map),
                        view: View::Raw,
                        style: HairstyleLabel::Original,
                    });
                }
            }
        }
    }
    Ok(Dataset::new(samples))
}

// ---------------------------------------------------------------------------
// Directory format
// ---------------------------------------------------------------------------

/// One manifest line. `file` is relative to `images/` (and `masks/`).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub file: String,
    pub identity: u32,
    pub clothes: u32,
    pub hairstyle: u32,
    pub camera: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<HairstyleLabel>,
}

impl ManifestRecord {
    pub fn for_sample(s: &Sample) -> Self {
        Self {
            file: format!("{}.png", s.id),
            identity: s.identity,
            clothes: s.clothes,
            hairstyle: s.hairstyle,
            camera: s.camera,
            style: (s.style != HairstyleLabel::Original).then_some(s.style),
        }
    }
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Writes `images/`, `masks/` and `manifest.jsonl` under `root`.
pub fn write_directory_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let images = root.join("images");
    let masks = root.join("masks");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    fs::create_dir_all(&masks).map_err(|e| Error::io(&masks, e))?;
    let manifest_path = root.join(MANIFEST);
    let file = File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut out = BufWriter::new(file);
    for s in &dataset.samples {
        let rec = ManifestRecord::for_sample(s);
        let img_path = images.join(&rec.file);
        s.image.save(&img_path).map_err(|e| Error::Image {
            path: img_path.clone(),
            source: e,
        })?;
        if let Some(map) = &s.semantic_map {
            map.write_png(&masks.join(&rec.file))?;
        }
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n").map_err(|e| Error::io(&manifest_path, e))?;
    }
    out.flush().map_err(|e| Error::io(&manifest_path, e))
}

pub fn read_manifest(root: &Path) -> Result<Vec<ManifestRecord>> {
    let path = root.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::Format(format!("missing manifest {}", path.display())));
    }
    let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ManifestRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), n + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Loads a dataset written by [`write_directory_dataset`] (or by hand in the same layout).
pub fn load_directory_dataset(root: &Path, schema: &LabelSchema) -> Result<Dataset> {
    let records = read_manifest(root)?;
    let samples = records
        .into_iter()
        .map(|rec| {
            let img_path = root.join("images").join(&rec.file);
            if !img_path.is_file() {
                return Err(Error::data(&img_path, "image referenced by manifest does not exist"));
            }
            let image = image::open(&img_path)
                .map_err(|e| Error::Image {
                    path: img_path.clone(),
                    source: e,
                })?
                .to_rgb8();
            let mask_path = root.join("masks").join(&rec.file);
            let semantic_map = if mask_path.is_file() {
                let map = SemanticMap::read_png(&mask_path)?;
                if map.dims() != (image.height() as usize, image.width() as usize) {
                    return Err(Error::data(
                        &mask_path,
                        format!(
                            "mask is {:?} but image is {}x{}",
                            map.dims(),
                            image.height(),
                            image.width()
                        ),
                    ));
                }
                map.validate(schema)
                    .map_err(|e| Error::data(&mask_path, e.to_string()))?;
                Some(map)
            } else {
                None
            };
            let id = rec.file.strip_suffix(".png").unwrap_or(&rec.file).to_string();
            let (view, style) = match rec.style {
                Some(style) if style != HairstyleLabel::Original => (View::HsoaAug, style),
                _ => (View::Raw, HairstyleLabel::Original),
            };
            Ok(Sample {
                id,
                image,
                identity: rec.identity,
                clothes: rec.clothes,
                hairstyle: rec.hairstyle,
                camera: rec.camera,
                semantic_map,
                view,
                style,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples))
}

// ---------------------------------------------------------------------------
// PK sampling
// ---------------------------------------------------------------------------

/// Draws batches of `p` identities with `k` images each.
#[derive(Clone, Debug)]
pub struct PkSampler {
    by_identity: Vec<(u32, Vec<usize>)>,
    p: usize,
    k: usize,
}

impl PkSampler {
    pub fn new(dataset: &Dataset, p: usize, k: usize) -> Result<Self> {
        if p == 0 || k == 0 {
            return Err(Error::Config("P and K must be >= 1".into()));
        }
        let by_identity: Vec<(u32, Vec<usize>)> = dataset.by_identity().into_iter().collect();
        if p > by_identity.len() {
            return Err(Error::Config(format!(
                "P = {p} exceeds the {} identities in the dataset",
                by_identity.len()
            )));
        }
        Ok(Self { by_identity, p, k })
    }

    pub fn batch_size(&self) -> usize {
        self.p * self.k
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.by_identity.len().div_ceil(self.p)
    }

    /// One epoch: identities are shuffled and chunked into groups of P, the
    /// last group topped up with other identities, so every identity appears
    /// at least once and no identity repeats within a batch.
    pub fn epoch(&self, rng: &mut impl Rng) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..self.by_identity.len()).collect();
        order.shuffle(rng);
        let mut batches = Vec::with_capacity(self.batches_per_epoch());
        for chunk in order.chunks(self.p) {
            let mut ids = chunk.to_vec();
            if ids.len() < self.p {
                let mut rest: Vec<usize> = order.iter().copied().filter(|i| !ids.contains(i)).collect();
                rest.shuffle(rng);
                ids.extend(rest.into_iter().take(self.p - ids.len()));
            }
            let mut batch = Vec::with_capacity(self.batch_size());
            for id in ids {
                batch.extend(self.draw_k(&self.by_identity[id].1, rng));
            }
            batches.push(batch);
        }
        batches
    }

    fn draw_k(&self, pool: &[usize], rng: &mut impl Rng) -> Vec<usize> {
        let mut picked = pool.to_vec();
        picked.shuffle(rng);
        if picked.len() >= self.k {
            picked.truncate(self.k);
        } else {
            while picked.len() < self.k {
                picked.push(pool[rng.random_range(0..pool.len())]);
            }
        }
        picked
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn small_config() -> SyntheticConfig {
        SyntheticConfig {
            num_identities: 4,
            clothes_per_identity: 2,
            hairstyles_per_identity: 2,
            images_per_combination: 2,
            noise_std: 0.0,
            seed: 9,
            ..SyntheticConfig::default()
        }
    }

    fn region_mean(s: &Sample, label: u8) -> [f64; 3] {
        let map = s.semantic_map.as_ref().unwrap();
        let mut acc = [0.0; 3];
        let mut n = 0.0;
        for (x, y, px) in s.image.enumerate_pixels() {
            if *map.labels.get(y as usize, x as usize) == label {
                for (a, v) in acc.iter_mut().zip(px.0) {
                    *a += f64::from(v);
                }
                n += 1.0;
            }
        }
        acc.map(|v| v / n)
    }

    #[test]
    fn factor_isolation() {
        let schema = LabelSchema::default();
        let cfg = SyntheticConfig {
            num_identities: 2,
            clothes_per_identity: 1,
            hairstyles_per_identity: 1,
            images_per_combination: 1,
            noise_std: 0.0,
            seed: 1,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic_dataset(&cfg, &schema).unwrap();
        assert_eq!(ds.len(), 2);
        let t = identity_traits(&cfg);
        assert_ne!(t[0].skin, t[1].skin);
        assert_ne!(ds.samples[0].identity, ds.samples[1].identity);
        for s in &ds.samples {
            assert_eq!(s.dims(), (64, 32));
            s.validate().unwrap();
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let schema = LabelSchema::default();
        let cfg = SyntheticConfig {
            noise_std: 0.05,
            ..small_config()
        };
        let a = generate_synthetic_dataset(&cfg, &schema).unwrap();
        let b = generate_synthetic_dataset(&cfg, &schema).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4 * 2 * 2 * 2);
    }

    #[test]
    fn region_colors_follow_factors() {
        let schema = LabelSchema::default();
        let cfg = small_config();
        let ds = generate_synthetic_dataset(&cfg, &schema).unwrap();
        let traits = identity_traits(&cfg);
        let hair = schema.label("hair").unwrap();
        let face = schema.label("face").unwrap();
        for s in &ds.samples {
            let hm = region_mean(s, hair);
            let expect = HAIR_COLORS[(s.hairstyle / 3) as usize];
            for c in 0..3 {
                assert!((hm[c] - f64::from(expect[c])).abs() < 1.0, "hair {hm:?} vs {expect:?}");
            }
            let fm = region_mean(s, face);
            let skin = traits[s.identity as usize].skin;
            for c in 0..3 {
                assert!((fm[c] - f64::from(skin[c])).abs() < 1.0);
            }
        }
    }

    #[test]
    fn face_color_separates_identities() {
        let schema = LabelSchema::default();
        let cfg = SyntheticConfig {
            noise_std: 0.0,
            images_per_combination: 1,
            ..SyntheticConfig::default()
        };
        let ds = generate_synthetic_dataset(&cfg, &schema).unwrap();
        let traits = identity_traits(&cfg);
        let face = schema.label("face").unwrap();
        for s in &ds.samples {
            let m = region_mean(s, face);
            let nearest = traits
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let d: f64 = (0..3).map(|c| (m[c] - f64::from(t.skin[c])).powi(2)).sum();
                    (d, i)
                })
                .min_by(|a, b| a.0.total_cmp(&b.0))
                .unwrap()
                .1;
            assert_eq!(nearest as u32, s.identity);
        }
    }

    #[test]
    fn too_small_is_config_error() {
        let cfg = SyntheticConfig {
            image_height: 16,
            ..small_config()
        };
        assert!(matches!(
            generate_synthetic_dataset(&cfg, &LabelSchema::default()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn every_synthetic_sample_has_all_regions() {
        let schema = LabelSchema::default();
        let sets = RegionSets::default_for(&schema).unwrap();
        let ds = generate_synthetic_dataset(&small_config(), &schema).unwrap();
        for m in ds.region_masks(&schema, &sets).unwrap() {
            let m = m.unwrap();
            assert!(m.face.count_ones() > 20);
            assert!(m.hair.count_ones() > 5);
            assert!(m.cloth.count_ones() > 100);
            assert!(m.limbs.count_ones() > 20);
        }
    }

    #[test]
    fn directory_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let schema = LabelSchema::default();
        let ds = generate_synthetic_dataset(
            &SyntheticConfig {
                noise_std: 0.04,
                ..small_config()
            },
            &schema,
        )
        .unwrap();
        write_directory_dataset(&ds, dir.path()).unwrap();
        let back = load_directory_dataset(dir.path(), &schema).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn loader_errors() {
        let dir = tempfile::tempdir().unwrap();
        let schema = LabelSchema::default();
        assert!(matches!(
            load_directory_dataset(dir.path(), &schema),
            Err(Error::Format(_))
        ));
        fs::write(dir.path().join(MANIFEST), "").unwrap();
        assert!(load_directory_dataset(dir.path(), &schema).unwrap().is_empty());
        fs::write(
            dir.path().join(MANIFEST),
            "{\"file\":\"ghost.png\",\"identity\":0,\"clothes\":0,\"hairstyle\":0,\"camera\":0}\n",
        )
        .unwrap();
        match load_directory_dataset(dir.path(), &schema) {
            Err(Error::Data { path, .. }) => assert!(path.ends_with("images/ghost.png")),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    #[test]
    fn mask_dim_mismatch_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let schema = LabelSchema::default();
        let ds = generate_synthetic_dataset(&small_config(), &schema).unwrap();
        let one = Dataset::new(ds.samples[..1].to_vec());
        write_directory_dataset(&one, dir.path()).unwrap();
        let mask_path = dir.path().join("masks").join(format!("{}.png", one.samples[0].id));
        SemanticMap::new(Grid::filled(3, 3, 0)).write_png(&mask_path).unwrap();
        match load_directory_dataset(dir.path(), &schema) {
            Err(Error::Data { path, .. }) => assert_eq!(path, mask_path),
            other => panic!("expected data error, got {other:?}"),
        }
    }

    fn toy_dataset(counts: &[usize]) -> Dataset {
        let img = RgbImage::new(2, 2);
        let samples = counts
            .iter()
            .enumerate()
            .flat_map(|(id, &n)| {
                let img = img.clone();
                (0..n).map(move |j| Sample {
                    id: format!("{id}_{j}"),
                    image: img.clone(),
                    identity: id as u32,
                    clothes: 0,
                    hairstyle: 0,
                    camera: 0,
                    semantic_map: None,
                    view: View::Raw,
                    style: HairstyleLabel::Original,
                })
            })
            .collect();
        Dataset::new(samples)
    }

    #[test]
    fn pk_batches_have_k_per_identity() {
        let ds = toy_dataset(&[5, 5, 5, 5]);
        let sampler = PkSampler::new(&ds, 2, 2).unwrap();
        let mut rng = SeedStream::new(1).rng();
        let batches = sampler.epoch(&mut rng);
        assert_eq!(batches.len(), 2);
        let mut seen = BTreeSet::new();
        for b in &batches {
            assert_eq!(b.len(), 4);
            let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
            for &i in b {
                *counts.entry(ds.samples[i].identity).or_default() += 1;
            }
            assert_eq!(counts.len(), 2);
            assert!(counts.values().all(|&c| c == 2));
            seen.extend(counts.keys().copied());
        }
        assert_eq!(seen.len(), 4);
    }

    #[test]
    fn pk_default_batch_size_and_replacement() {
        let ds = toy_dataset(&[20, 20, 20, 3]);
        let sampler = PkSampler::new(&ds, 4, 16).unwrap();
        assert_eq!(sampler.batch_size(), 64);
        let ds = toy_dataset(&[3, 8]);
        let sampler = PkSampler::new(&ds, 1, 4).unwrap();
        let mut rng = SeedStream::new(2).rng();
        for b in sampler.epoch(&mut rng) {
            let ids: BTreeSet<u32> = b.iter().map(|&i| ds.samples[i].identity).collect();
            assert_eq!(ids.len(), 1);
            if ids.contains(&0) {
                let distinct: BTreeSet<usize> = b.iter().copied().collect();
                assert_eq!(b.len(), 4);
                assert!(distinct.len() < 4);
            }
        }
        assert!(matches!(PkSampler::new(&ds, 3, 2), Err(Error::Config(_))));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn pk_structure_holds(counts in proptest::collection::vec(1usize..8, 2..8), p in 1usize..4, k in 1usize..5, seed in 0u64..100) {
                prop_assume!(p <= counts.len());
                let ds = toy_dataset(&counts);
                let sampler = PkSampler::new(&ds, p, k).unwrap();
                let mut rng = SeedStream::new(seed).rng();
                let batches = sampler.epoch(&mut rng);
                prop_assert_eq!(batches.len(), counts.len().div_ceil(p));
                let mut covered = BTreeSet::new();
                for b in &batches {
                    let mut per: BTreeMap<u32, usize> = BTreeMap::new();
                    for &i in b {
                        *per.entry(ds.samples[i].identity).or_default() += 1;
                    }
                    prop_assert_eq!(per.len(), p);
                    prop_assert!(per.values().all(|&c| c == k));
                    covered.extend(per.keys().copied());
                }
                prop_assert_eq!(covered.len(), counts.len());
            }
        }
    }
}
