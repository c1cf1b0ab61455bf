//! Human-parsing label maps and the binary region masks derived from them.
//!
//! A [`SemanticMap`] is the per-pixel output of a human parser. Region masks
//! (face, hair, head, cloth, limbs) are indicator images over configurable
//! label sets; the head mask is always the union of face and hair. Masks are
//! produced at image resolution and resampled to feature resolution as soft
//! grids for attention supervision.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BinaryMask, Grid, SoftMask};

/// Names of the default 20-class human-parsing label set.
pub const DEFAULT_CLASSES: [&str; 20] = [
    "background",
    "hat",
    "hair",
    "glove",
    "sunglasses",
    "upper-cloth",
    "dress",
    "coat",
    "socks",
    "pants",
    "jumpsuit",
    "scarf",
    "skirt",
    "face",
    "left-arm",
    "right-arm",
    "left-leg",
    "right-leg",
    "left-shoe",
    "right-shoe",
];

/// Mapping from semantic class names to label integers.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSchema {
    classes: BTreeMap<String, u8>,
}

impl Default for LabelSchema {
    fn default() -> Self {
        let classes = DEFAULT_CLASSES
            .iter()
            .enumerate()
            .map(|(i, name)| (name.to_string(), i as u8))
            .collect();
        Self { classes }
    }
}

impl LabelSchema {
    pub fn new(classes: BTreeMap<String, u8>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for (name, &label) in &classes {
            if !seen.insert(label) {
                return Err(Error::Schema(format!("label {label} assigned twice (at {name:?})")));
            }
        }
        Ok(Self { classes })
    }

    pub fn label(&self, name: &str) -> Result<u8> {
        self.classes
            .get(name)
            .copied()
            .ok_or_else(|| Error::Schema(format!("unknown class name {name:?}")))
    }

    pub fn contains_label(&self, label: u8) -> bool {
        self.classes.values().any(|&l| l == label)
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> impl Iterator<Item = (&str, u8)> {
        self.classes.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// The label sets that define each region.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionSets {
    pub face: BTreeSet<u8>,
    pub hair: BTreeSet<u8>,
    pub cloth: BTreeSet<u8>,
    pub limbs: BTreeSet<u8>,
}

impl RegionSets {
    /// Builds region sets from class names in `schema`.
    pub fn from_names(
        schema: &LabelSchema,
        face: &[&str],
        hair: &[&str],
        cloth: &[&str],
        limbs: &[&str],
    ) -> Result<Self> {
        let resolve = |names: &[&str]| -> Result<BTreeSet<u8>> { names.iter().map(|n| schema.label(n)).collect() };
        let sets = Self {
            face: resolve(face)?,
            hair: resolve(hair)?,
            cloth: resolve(cloth)?,
            limbs: resolve(limbs)?,
        };
        sets.validate()?;
        Ok(sets)
    }

    /// Default grouping over [`LabelSchema::default`].
    pub fn default_for(schema: &LabelSchema) -> Result<Self> {
        Self::from_names(
            schema,
            &["face"],
            &["hair"],
            &["upper-cloth", "dress", "coat", "pants", "jumpsuit", "skirt"],
            &["left-arm", "right-arm", "left-leg", "right-leg"],
        )
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.face.intersection(&self.hair).next() {
            return Err(Error::Config(format!("face and hair label sets overlap at label {l}")));
        }
        Ok(())
    }
}

/// Per-pixel parser output.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMap {
    pub labels: Grid<u8>,
}

impl SemanticMap {
    pub fn new(labels: Grid<u8>) -> Self {
        Self { labels }
    }

    pub fn dims(&self) -> (usize, usize) {
        self.labels.dims()
    }

    /// Checks that every label value is declared by `schema`.
    pub fn validate(&self, schema: &LabelSchema) -> Result<()> {
        let mut known = [false; 256];
        for (_, l) in schema.classes() {
            known[l as usize] = true;
        }
        if let Some(&bad) = self.labels.as_slice().iter().find(|&&l| !known[l as usize]) {
            return Err(Error::Schema(format!("label value {bad} is not in the schema")));
        }
        Ok(())
    }

    /// Reads a single-channel PNG whose pixel values are label integers.
    ///
    /// Palette PNGs are read as raw indices; 8-bit grayscale is accepted too.
    pub fn read_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::IDENTITY);
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::data(path, format!("png decode: {e}")))?;
        let info = reader.info();
        let (w, h) = (info.width as usize, info.height as usize);
        let color = info.color_type;
        let depth = info.bit_depth;
        if !matches!(color, png::ColorType::Indexed | png::ColorType::Grayscale) || depth != png::BitDepth::Eight {
            return Err(Error::data(
                path,
                format!("expected 8-bit single-channel PNG, got {color:?}/{depth:?}"),
            ));
        }
        let mut buf = vec![0; reader.output_buffer_size().unwrap_or(w * h)];
        let frame = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::data(path, format!("png decode: {e}")))?;
        buf.truncate(frame.buffer_size());
        let mut labels = Vec::with_capacity(w * h);
        for row in buf.chunks(frame.line_size).take(h) {
            labels.extend_from_slice(&row[..w]);
        }
        Ok(Self::new(Grid::from_vec(h, w, labels)?))
    }

    /// Writes the map as an 8-bit palette-indexed PNG.
    pub fn write_png(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let (h, w) = self.dims();
        let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
        encoder.set_color(png::ColorType::Indexed);
        encoder.set_depth(png::BitDepth::Eight);
        encoder.set_palette(palette());
        let mut writer = encoder
            .write_header()
            .map_err(|e| Error::data(path, format!("png encode: {e}")))?;
        writer
            .write_image_data(self.labels.as_slice())
            .map_err(|e| Error::data(path, format!("png encode: {e}")))?;
        writer
            .finish()
            .map_err(|e| Error::data(path, format!("png encode: {e}")))
    }
}

/// 256-entry visualization palette; the label is the index, colors are cosmetic.
fn palette() -> Vec<u8> {
    (0..=255u32)
        .flat_map(|i| {
            let mut rgb = [0u8; 3];
            let mut v = i;
            for bit in 0..8 {
                for (c, slot) in rgb.iter_mut().enumerate() {
                    *slot |= (((v >> c) & 1) as u8) << (7 - bit);
                }
                v >>= 3;
            }
            rgb
        })
        .collect()
}

/// Binary region masks at image resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMasks {
    pub face: BinaryMask,
    pub hair: BinaryMask,
    pub head: BinaryMask,
    pub cloth: BinaryMask,
    pub limbs: BinaryMask,
    /// Radius the cloth mask has been dilated by (0 for the raw indicator).
    pub dilation_radius_cloth: usize,
}

impl RegionMasks {
    pub fn dims(&self) -> (usize, usize) {
        self.face.dims()
    }

    /// Returns a copy whose cloth mask is dilated by `radius` pixels.
    pub fn with_cloth_dilation(&self, radius: usize) -> Self {
        let mut out = self.clone();
        out.cloth = dilate_mask(&self.cloth, radius as i64).expect("radius is non-negative");
        out.dilation_radius_cloth = self.dilation_radius_cloth + radius;
        out
    }

    /// Face, limbs and hair masks averaged down to feature resolution.
    pub fn feature_targets(&self, height: usize, width: usize) -> Result<FeatureMasks> {
        Ok(FeatureMasks {
            face: downsample_mask(&self.face, height, width)?,
            limbs: downsample_mask(&self.limbs, height, width)?,
            hair: downsample_mask(&self.hair, height, width)?,
        })
    }
}

/// Soft masks at feature resolution used by the attention loss.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMasks {
    pub face: SoftMask,
    pub limbs: SoftMask,
    pub hair: SoftMask,
}

/// Indicator masks for each region of `sets`; head is face OR hair.
pub fn derive_masks(map: &SemanticMap, schema: &LabelSchema, sets: &RegionSets) -> Result<RegionMasks> {
    sets.validate()?;
    map.validate(schema)?;
    let member = |set: &BTreeSet<u8>| {
        let mut table = [0u8; 256];
        for &l in set {
            table[l as usize] = 1;
        }
        map.labels.map(|&l| table[l as usize])
    };
    let face = member(&sets.face);
    let hair = member(&sets.hair);
    let head = face.zip_map(&hair, |&a, &b| a | b)?;
    Ok(RegionMasks {
        face,
        hair,
        head,
        cloth: member(&sets.cloth),
        limbs: member(&sets.limbs),
        dilation_radius_cloth: 0,
    })
}

/// Dilation with a square (Chebyshev) structuring element.
///
/// A pixel is set iff some set input pixel lies within Chebyshev distance
/// `radius`. The square window is separable, so rows and columns are
/// max-filtered in turn.
pub fn dilate_mask(mask: &BinaryMask, radius: i64) -> Result<BinaryMask> {
    if radius < 0 {
        return Err(Error::Argument(format!("dilation radius must be >= 0, got {radius}")));
    }
    let r = radius as usize;
    if r == 0 {
        return Ok(mask.clone());
    }
    let (h, w) = mask.dims();
    let horizontal = Grid::from_fn(h, w, |y, x| {
        let lo = x.saturating_sub(r);
        let hi = (x + r).min(w - 1);
        (lo..=hi).map(|xx| *mask.get(y, xx)).max().unwrap_or(0)
    });
    Ok(Grid::from_fn(h, w, |y, x| {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(h - 1);
        (lo..=hi).map(|yy| *horizontal.get(yy, x)).max().unwrap_or(0)
    }))
}

/// Area-weighted average of a binary mask onto a coarser grid.
pub fn downsample_mask(mask: &BinaryMask, height: usize, width: usize) -> Result<SoftMask> {
    downsample_soft(&mask.to_soft(), height, width)
}

/// Area-weighted average of a soft grid onto a coarser grid.
///
/// Output cell `(i, j)` covers the input rectangle
/// `[i*H/H', (i+1)*H/H') x [j*W/W', (j+1)*W/W')`; partially covered pixels
/// contribute in proportion to the covered area.
pub fn downsample_soft(grid: &SoftMask, height: usize, width: usize) -> Result<SoftMask> {
    if height == 0 || width == 0 {
        return Err(Error::Argument(format!(
            "target dims must be positive, got {height}x{width}"
        )));
    }
    let (h, w) = grid.dims();
    if height > h || width > w {
        return Err(Error::Argument(format!(
            "cannot downsample {h}x{w} to larger {height}x{width}"
        )));
    }
    let rows = overlap_weights(h, height);
    let cols = overlap_weights(w, width);
    Ok(Grid::from_fn(height, width, |i, j| {
        let mut acc = 0.0;
        let mut area = 0.0;
        for &(y, wy) in &rows[i] {
            for &(x, wx) in &cols[j] {
                acc += grid.get(y, x) * wy * wx;
                area += wy * wx;
            }
        }
        acc / area
    }))
}

/// For each output bin, the input indices it overlaps and the overlap length.
fn overlap_weights(input: usize, output: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let start = o as f64 * scale;
            let end = (o + 1) as f64 * scale;
            let first = start.floor() as usize;
            let last = (end.ceil() as usize).min(input);
            (first..last)
                .filter_map(|i| {
                    let overlap = (end.min(i as f64 + 1.0) - start.max(i as f64)).max(0.0);
                    (overlap > 0.0).then_some((i, overlap))
                })
                .collect()
        })
        .collect()
}
