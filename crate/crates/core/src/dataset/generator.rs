//! Procedural saliency dataset with category-dependent saliency rules.
//!
//! Every image holds a few Gaussian blobs, each of a distinct attribute class
//! (bright, dark, textured, thin bar). The category decides which attribute is
//! salient, so the same blob arrangement has a different ground truth under
//! each category. The category itself is signalled by the gray level of a frame
//! around the image border.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SaliencySample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of distinct blob attribute classes, and so the largest supported K.
pub const NUM_ATTRIBUTES: usize = 4;

const PLACEMENT_TRIES: usize = 200;
const LAYOUT_TRIES: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    Bright,
    Dark,
    Textured,
    Bar,
}

impl Attribute {
    pub const ALL: [Attribute; NUM_ATTRIBUTES] = [Attribute::Bright, Attribute::Dark, Attribute::Textured, Attribute::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Bright => "bright",
            Attribute::Dark => "dark",
            Attribute::Textured => "textured",
            Attribute::Bar => "bar",
        }
    }

    /// The attribute that is salient in category `k`.
    pub fn for_category(k: usize) -> Attribute {
        Self::ALL[k]
    }
}

/// Parameters of the synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub num_categories: usize,
    pub samples_per_category: usize,
    pub height: usize,
    pub width: usize,
    /// Width in pixels of the border frame whose gray level encodes the category.
    pub frame_width: usize,
    /// Inclusive range of blobs per image.
    pub blob_count: [usize; 2],
    /// Range of the Gaussian blob scale (pixels).
    pub blob_radius: [f64; 2],
    /// Range of the blob contrast against the background.
    pub blob_contrast: [f64; 2],
    pub background: f64,
    /// Half-width of the uniform per-pixel background noise.
    pub noise: f64,
    pub fixation_count: usize,
    /// Density spread, as a multiple of the salient blob's scale.
    pub density_sigma: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            num_categories: 4,
            samples_per_category: 80,
            height: 32,
            width: 32,
            frame_width: 3,
            blob_count: [4, 4],
            blob_radius: [1.8, 2.6],
            blob_contrast: [0.3, 0.45],
            background: 0.5,
            noise: 0.03,
            fixation_count: 20,
            density_sigma: 1.0,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(2..=NUM_ATTRIBUTES).contains(&self.num_categories) {
            return bad(format!(
                "num_categories must lie in 2..={NUM_ATTRIBUTES} (one salient attribute per category), got {}",
                self.num_categories
            ));
        }
        if self.samples_per_category == 0 {
            return bad("samples_per_category must be positive".into());
        }
        let [lo, hi] = self.blob_count;
        if lo < 2 || lo > hi || hi > NUM_ATTRIBUTES {
            return bad(format!("blob_count range [{lo}, {hi}] must satisfy 2 <= min <= max <= {NUM_ATTRIBUTES}"));
        }
        for (name, [a, b]) in [("blob_radius", self.blob_radius), ("blob_contrast", self.blob_contrast)] {
            if !(a > 0.0 && a <= b && b.is_finite()) {
                return bad(format!("{name} range [{a}, {b}] must be positive and nonempty"));
            }
        }
        if !(0.0..=1.0).contains(&self.background) || !(self.noise >= 0.0) {
            return bad("background must lie in [0,1] and noise must be nonnegative".into());
        }
        if self.fixation_count == 0 {
            return bad("fixation_count must be positive".into());
        }
        if !(self.density_sigma > 0.0) {
            return bad("density_sigma must be positive".into());
        }
        let interior_h = self.height.saturating_sub(2 * self.frame_width);
        let interior_w = self.width.saturating_sub(2 * self.frame_width);
        let need = 2.0 * footprint(Attribute::Bar, self.blob_radius[1]);
        if (interior_h as f64) < need || (interior_w as f64) < need {
            return bad(format!(
                "{}x{} image with a {}-pixel frame is too small to place blobs of radius {}",
                self.height, self.width, self.frame_width, self.blob_radius[1]
            ));
        }
        Ok(())
    }

    /// Gray level of the frame for category `k`.
    pub fn frame_level(&self, k: usize) -> f64 {
        0.1 + 0.8 * k as f64 / (self.num_categories - 1) as f64
    }

    pub fn category_names(&self) -> Vec<String> {
        (0..self.num_categories)
            .map(|k| Attribute::for_category(k).name().to_string())
            .collect()
    }
}

/// One rendered blob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub attribute: Attribute,
    pub row: f64,
    pub col: f64,
    pub radius: f64,
    pub contrast: f64,
    /// Bars only: orientation of the long axis.
    pub horizontal: bool,
}

/// Hidden generator state for one image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub category: usize,
    pub blobs: Vec<Blob>,
}

/// Radius of the disc a blob occupies, for non-overlapping placement.
fn footprint(attribute: Attribute, radius: f64) -> f64 {
    match attribute {
        Attribute::Bar => 1.6 * radius + 0.5,
        _ => 1.3 * radius + 0.5,
    }
}

/// `(sigma_row, sigma_col)` of a blob's intensity envelope.
fn envelope(b: &Blob) -> (f64, f64) {
    match (b.attribute, b.horizontal) {
        (Attribute::Bar, true) => (0.6, 1.4 * b.radius),
        (Attribute::Bar, false) => (1.4 * b.radius, 0.6),
        _ => (b.radius, b.radius),
    }
}

fn gauss(b: &Blob, r: usize, c: usize, scale: f64) -> f64 {
    let (sr, sc) = envelope(b);
    let (sr, sc) = (sr * scale, sc * scale);
    let dr = r as f64 - b.row;
    let dc = c as f64 - b.col;
    (-(dr * dr / (2.0 * sr * sr) + dc * dc / (2.0 * sc * sc))).exp()
}

/// Draws a blob arrangement for category `k`. The salient attribute always
/// appears; the other blobs take distinct attributes, preferring those salient
/// in other categories so every image carries conflicting cues.
pub fn sample_layout(spec: &DatasetSpec, category: usize, rng: &mut ChaCha8Rng) -> Result<Layout> {
    let n = rng.random_range(spec.blob_count[0]..=spec.blob_count[1]);
    let mut others: Vec<usize> = (0..spec.num_categories).filter(|&a| a != category).collect();
    let mut extras: Vec<usize> = (spec.num_categories..NUM_ATTRIBUTES).collect();
    shuffle(&mut others, rng);
    shuffle(&mut extras, rng);
    let attrs: Vec<usize> = std::iter::once(category).chain(others).chain(extras).take(n).collect();

    for _ in 0..LAYOUT_TRIES {
        if let Some(blobs) = try_place(spec, &attrs, rng) {
            return Ok(Layout { category, blobs });
        }
    }
    Err(Error::config(format!(
        "could not place {n} non-overlapping blobs in a {}x{} image",
        spec.height, spec.width
    )))
}

/// One greedy placement attempt; `None` when some blob finds no free spot.
fn try_place(spec: &DatasetSpec, attrs: &[usize], rng: &mut ChaCha8Rng) -> Option<Vec<Blob>> {
    let f = spec.frame_width as f64;
    let mut blobs: Vec<Blob> = Vec::with_capacity(attrs.len());
    for &a in attrs {
        let attribute = Attribute::ALL[a];
        let radius = rng.random_range(spec.blob_radius[0]..=spec.blob_radius[1]);
        let contrast = rng.random_range(spec.blob_contrast[0]..=spec.blob_contrast[1]);
        let horizontal = rng.random_bool(0.5);
        let fp = footprint(attribute, radius);
        let (row_lo, row_hi) = (f + fp, spec.height as f64 - 1.0 - f - fp);
        let (col_lo, col_hi) = (f + fp, spec.width as f64 - 1.0 - f - fp);
        if row_lo > row_hi || col_lo > col_hi {
            return None;
        }
        let spot = (0..PLACEMENT_TRIES).find_map(|_| {
            let row = rng.random_range(row_lo..=row_hi);
            let col = rng.random_range(col_lo..=col_hi);
            let clear = blobs.iter().all(|o| {
                let d = ((o.row - row).powi(2) + (o.col - col).powi(2)).sqrt();
                d >= fp + footprint(o.attribute, o.radius)
            });
            clear.then_some((row, col))
        });
        let (row, col) = spot?;
        blobs.push(Blob {
            attribute,
            row,
            col,
            radius,
            contrast,
            horizontal,
        });
    }
    Some(blobs)
}

fn shuffle<T>(v: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..v.len()).rev() {
        let j = rng.random_range(0..=i);
        v.swap(i, j);
    }
}

/// Renders the grayscale image `[1,H,W]`, quantized to 8 bits.
pub fn render_image(spec: &DatasetSpec, layout: &Layout, rng: &mut ChaCha8Rng) -> Tensor {
    let (h, w) = (spec.height, spec.width);
    let level = spec.frame_level(layout.category);
    let mut data = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let edge = r.min(c).min(h - 1 - r).min(w - 1 - c);
            let mut v = if edge < spec.frame_width { level } else { spec.background };
            if spec.noise > 0.0 {
                v += rng.random_range(-spec.noise..=spec.noise);
            }
            for b in &layout.blobs {
                let e = gauss(b, r, c, 1.0);
                v += b.contrast
                    * e
                    * match b.attribute {
                        Attribute::Bright | Attribute::Bar => 1.0,
                        Attribute::Dark => -1.0,
                        Attribute::Textured => {
                            if (r + c) % 2 == 0 {
                                1.0
                            } else {
                                -1.0
                            }
                        }
                    };
            }
            data[r * w + c] = super::io::quantize(v) as f64 / 255.0;
        }
    }
    Tensor::new(&[1, h, w], data).expect("dimensions validated")
}

/// Ground-truth density `[1,H,W]` for the blobs carrying `salient`: a Gaussian
/// on each, max-normalized to exactly 1 and rounded to 32-bit precision.
pub fn render_density(spec: &DatasetSpec, layout: &Layout, salient: Attribute) -> Result<Tensor> {
    let (h, w) = (spec.height, spec.width);
    let targets: Vec<&Blob> = layout.blobs.iter().filter(|b| b.attribute == salient).collect();
    if targets.is_empty() {
        return Err(Error::usage(format!("layout has no {} blob", salient.name())));
    }
    let mut data = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            data[r * w + c] = targets.iter().map(|b| gauss(b, r, c, spec.density_sigma)).sum();
        }
    }
    let max = data.iter().cloned().fold(0.0, f64::max);
    for v in &mut data {
        *v = (*v / max) as f32 as f64;
    }
    Tensor::new(&[1, h, w], data)
}

/// Samples `count` pixels with replacement in proportion to `density`;
/// repeated draws collapse to one fixated pixel.
pub fn sample_fixations(density: &Tensor, count: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut cumulative = Vec::with_capacity(density.numel());
    let mut total = 0.0;
    for &v in density.data() {
        total += v.max(0.0);
        cumulative.push(total);
    }
    let mut fix = vec![0.0; density.numel()];
    for _ in 0..count {
        let u = rng.random::<f64>() * total;
        let i = cumulative.partition_point(|&c| c <= u).min(fix.len() - 1);
        fix[i] = 1.0;
    }
    Tensor::new(density.shape(), fix).expect("same shape as density")
}

/// Deterministic per-sample random stream.
fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Generates `samples_per_category` samples for each category, in category-major order.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<SaliencySample>> {
    spec.validate()?;
    let names = spec.category_names();
    let mut out = Vec::with_capacity(spec.num_categories * spec.samples_per_category);
    for k in 0..spec.num_categories {
        for i in 0..spec.samples_per_category {
            let mut rng = sample_rng(spec.seed, (k * spec.samples_per_category + i) as u64);
            let layout = sample_layout(spec, k, &mut rng)?;
            let image = render_image(spec, &layout, &mut rng);
            let density = render_density(spec, &layout, Attribute::for_category(k))?;
            let fixations = sample_fixations(&density, spec.fixation_count, &mut rng);
            out.push(SaliencySample {
                id: format!("{}-{i:04}", names[k]),
                category: k,
                image,
                density,
                fixations,
                blobs: layout.blobs,
            });
        }
    }
    Ok(out)
}

/// Classifies an image by the gray level of its frame: the generator's
/// category cue read back from the pixels.
pub fn oracle_category(spec: &DatasetSpec, image: &Tensor) -> usize {
    let (h, w) = (spec.height, spec.width);
    let d = image.data();
    let (mut sum, mut n) = (0.0, 0usize);
    for r in 0..h {
        for c in 0..w {
            if r.min(c).min(h - 1 - r).min(w - 1 - c) < spec.frame_width {
                sum += d[r * w + c];
                n += 1;
            }
        }
    }
    let mean = sum / n as f64;
    (0..spec.num_categories)
        .min_by(|&a, &b| {
            (spec.frame_level(a) - mean)
                .abs()
                .total_cmp(&(spec.frame_level(b) - mean).abs())
        })
        .expect("at least two categories")
}
