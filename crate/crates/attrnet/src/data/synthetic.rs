//! Procedural attribute dataset: each image carries one figure with an
//! independently sampled color, shape and pattern on a cluttered gray
//! background, so every label is known by construction. Generation is a
//! pure function of the seed; records are produced from per-record RNG
//! substreams keyed by image id.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{
    detect_scheme, AttributeSchema, BBox, Dataset, DatasetRecord, ImageBuf, Split,
};

pub const BACKGROUND_RGB: [u8; 3] = [120, 120, 120];

#[derive(Debug, Clone)]
pub struct SyntheticConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub test_count: usize,
    /// Square image side in pixels.
    pub image_size: u32,
    /// Ordered (name, rgb) palette; one color per figure.
    pub palette: Vec<(String, [u8; 3])>,
    /// Figure shapes, from {round, rectangular, square, long}.
    pub shapes: Vec<String>,
    /// Figure patterns, from {striped, spotted, plain}. `plain` yields no
    /// positive pattern class.
    pub patterns: Vec<String>,
    /// 0 = clean uniform background, 1 = heavy blobs and pixel noise.
    pub clutter: f64,
    pub seed: u64,
}

impl SyntheticConfig {
    pub fn new(train: usize, val: usize, test: usize, size: u32, clutter: f64, seed: u64) -> Self {
        SyntheticConfig {
            train_count: train,
            val_count: val,
            test_count: test,
            image_size: size,
            palette: default_palette(),
            shapes: ["long", "rectangular", "round", "square"]
                .map(String::from)
                .to_vec(),
            patterns: ["plain", "spotted", "striped"].map(String::from).to_vec(),
            clutter,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config("image size must be at least 16".into()));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("palette must not be empty".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Config("shape set must not be empty".into()));
        }
        if self.patterns.is_empty() {
            return Err(Error::Config("pattern set must not be empty".into()));
        }
        for (i, (na, a)) in self.palette.iter().enumerate() {
            for (nb, b) in self.palette.iter().skip(i + 1) {
                if rgb_distance(*a, *b) < 50.0 {
                    return Err(Error::Config(format!(
                        "palette colors {na:?} and {nb:?} are too close to distinguish"
                    )));
                }
            }
        }
        for s in &self.shapes {
            parse_shape(s)?;
        }
        for p in &self.patterns {
            parse_pattern(p)?;
        }
        if !(0.0..=1.0).contains(&self.clutter) {
            return Err(Error::Config(format!(
                "clutter must be in [0, 1], got {}",
                self.clutter
            )));
        }
        Ok(())
    }

    /// Schema implied by the config. Pattern classes exclude `plain`
    /// (it means the absence of a pattern); the texture group is only
    /// populated by externally ingested datasets.
    pub fn schema(&self) -> AttributeSchema {
        AttributeSchema {
            color: self.palette.iter().map(|(n, _)| n.clone()).collect(),
            shape: self.shapes.clone(),
            pattern: self
                .patterns
                .iter()
                .filter(|p| p.as_str() != "plain")
                .cloned()
                .collect(),
            texture: Vec::new(),
        }
    }
}

pub fn default_palette() -> Vec<(String, [u8; 3])> {
    vec![
        ("black".into(), [15, 15, 15]),
        ("blue".into(), [30, 30, 220]),
        ("green".into(), [30, 200, 30]),
        ("red".into(), [220, 30, 30]),
        ("white".into(), [240, 240, 240]),
        ("yellow".into(), [230, 220, 40]),
    ]
}

fn rgb_distance(a: [u8; 3], b: [u8; 3]) -> f64 {
    (0..3)
        .map(|c| (a[c] as f64 - b[c] as f64).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ShapeKind {
    Round,
    Rectangular,
    Square,
    Long,
}

fn parse_shape(name: &str) -> Result<ShapeKind> {
    match name {
        "round" => Ok(ShapeKind::Round),
        "rectangular" => Ok(ShapeKind::Rectangular),
        "square" => Ok(ShapeKind::Square),
        "long" => Ok(ShapeKind::Long),
        other => Err(Error::Config(format!("unknown shape {other:?}"))),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PatternKind {
    Plain,
    Spotted,
    Striped,
}

fn parse_pattern(name: &str) -> Result<PatternKind> {
    match name {
        "plain" => Ok(PatternKind::Plain),
        "spotted" => Ok(PatternKind::Spotted),
        "striped" => Ok(PatternKind::Striped),
        other => Err(Error::Config(format!("unknown pattern {other:?}"))),
    }
}

/// Generate the full dataset described by `config`. Running twice with the
/// same config yields byte-identical records.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<Dataset> {
    config.validate()?;
    let schema = config.schema();
    schema.validate()?;

    let mut records = Vec::with_capacity(config.train_count + config.val_count + config.test_count);
    for (split, count) in [
        (Split::Train, config.train_count),
        (Split::Val, config.val_count),
        (Split::Test, config.test_count),
    ] {
        for i in 0..count {
            let image_id = format!("{}_{i:05}", split.as_str());
            records.push(render_record(config, &schema, &image_id, split)?);
        }
    }
    let scheme = detect_scheme(&records);
    Ok(Dataset {
        records,
        schema,
        scheme,
    })
}

/// Stable per-record seed: FNV-1a over the image id, mixed with the master
/// seed through splitmix64.
fn record_seed(master: u64, image_id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in image_id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Darken light colors / lighten dark ones; used for stripe and spot ink.
fn variant_color(rgb: [u8; 3]) -> [u8; 3] {
    let luminance = 0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64;
    if luminance >= 80.0 {
        rgb.map(|v| (v as f64 * 0.45) as u8)
    } else {
        rgb.map(|v| (v as f64 + 0.45 * (255.0 - v as f64)) as u8)
    }
}

fn render_record(
    config: &SyntheticConfig,
    schema: &AttributeSchema,
    image_id: &str,
    split: Split,
) -> Result<DatasetRecord> {
    let size = config.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(record_seed(config.seed, image_id));

    let color_idx = rng.gen_range(0..config.palette.len());
    let shape_idx = rng.gen_range(0..config.shapes.len());
    let pattern_idx = rng.gen_range(0..config.patterns.len());
    let (color_name, rgb) = config.palette[color_idx].clone();
    let shape = parse_shape(&config.shapes[shape_idx])?;
    let pattern = parse_pattern(&config.patterns[pattern_idx])?;

    let mut img = ImageBuf::filled(size, size, BACKGROUND_RGB);

    // background clutter: colored blobs under per-pixel noise
    let n_blobs = (config.clutter * 12.0).round() as usize;
    for _ in 0..n_blobs {
        draw_blob(&mut img, &mut rng, &config.palette);
    }
    let noise_amp = config.clutter * 25.0;
    if noise_amp > 0.0 {
        for y in 0..size {
            for x in 0..size {
                let mut px = img.get(x, y);
                for c in px.iter_mut() {
                    let d = rng.gen_range(-noise_amp..=noise_amp);
                    *c = (*c as f64 + d).clamp(0.0, 255.0) as u8;
                }
                img.set(x, y, px);
            }
        }
    }

    // the figure overdraws clutter; its pixels stay noise-free
    let mask = sample_figure_mask(size, shape, &mut rng);
    let bbox = mask_bounds(&mask, size).expect("figure mask is never empty");
    paint_figure(&mut img, &mask, size, rgb, pattern, &mut rng);

    let mut labels = vec![-1i8; schema.num_classes()];
    let set = |labels: &mut Vec<i8>, name: &str| {
        let idx = schema.class_index(name).expect("class from config schema");
        labels[idx] = 1;
    };
    set(&mut labels, &color_name);
    set(&mut labels, &config.shapes[shape_idx]);
    if pattern != PatternKind::Plain {
        set(&mut labels, &config.patterns[pattern_idx]);
    }

    Ok(DatasetRecord {
        image_id: image_id.to_string(),
        pixels: img,
        bbox: Some(bbox),
        labels,
        split,
    })
}

fn draw_blob<R: Rng>(img: &mut ImageBuf, rng: &mut R, palette: &[(String, [u8; 3])]) {
    let size = img.width() as i64;
    let cx = rng.gen_range(0..size);
    let cy = rng.gen_range(0..size);
    let rx = rng.gen_range((size as f64 * 0.03).max(1.0)..=(size as f64 * 0.12).max(2.0));
    let ry = rng.gen_range((size as f64 * 0.03).max(1.0)..=(size as f64 * 0.12).max(2.0));
    let base = palette[rng.gen_range(0..palette.len())].1;
    let gray = rng.gen_range(60..200) as f64;
    let mix = 0.65;
    let rgb = base.map(|v| (v as f64 * mix + gray * (1.0 - mix)) as u8);
    let x_lo = (cx - rx.ceil() as i64).max(0);
    let x_hi = (cx + rx.ceil() as i64 + 1).min(size);
    let y_lo = (cy - ry.ceil() as i64).max(0);
    let y_hi = (cy + ry.ceil() as i64 + 1).min(size);
    for y in y_lo..y_hi {
        for x in x_lo..x_hi {
            let nx = (x - cx) as f64 / rx;
            let ny = (y - cy) as f64 / ry;
            if nx * nx + ny * ny <= 1.0 {
                img.set(x as u32, y as u32, rgb);
            }
        }
    }
}

/// Boolean mask of the figure, placed uniformly so it fits with a margin.
fn sample_figure_mask<R: Rng>(size: u32, shape: ShapeKind, rng: &mut R) -> Vec<bool> {
    let s = size as i64;
    let scale = rng.gen_range(0.35..=0.60);
    let max_half = s / 2 - 2;
    let (half_w, half_h) = match shape {
        ShapeKind::Round | ShapeKind::Square => {
            let h = ((scale * s as f64 / 2.0).round() as i64).clamp(3, max_half);
            (h, h)
        }
        ShapeKind::Rectangular => {
            let long = ((scale * s as f64 / 2.0).round() as i64).clamp(4, max_half);
            let ratio = rng.gen_range(0.42..=0.60);
            let short = ((long as f64 * ratio).round() as i64).clamp(2, max_half);
            if rng.gen::<bool>() {
                (long, short)
            } else {
                (short, long)
            }
        }
        ShapeKind::Long => {
            let long = ((scale * s as f64 / 2.0).round() as i64).clamp(5, max_half);
            let ratio = rng.gen_range(0.16..=0.28);
            let short = ((long as f64 * ratio).round() as i64).clamp(1, max_half);
            if rng.gen::<bool>() {
                (long, short)
            } else {
                (short, long)
            }
        }
    };
    let cx = rng.gen_range(half_w + 1..s - half_w - 1);
    let cy = rng.gen_range(half_h + 1..s - half_h - 1);

    let mut mask = vec![false; (size * size) as usize];
    for y in 0..s {
        for x in 0..s {
            let inside = match shape {
                ShapeKind::Round => {
                    let dx = (x - cx) as f64 / half_w as f64;
                    let dy = (y - cy) as f64 / half_h as f64;
                    dx * dx + dy * dy <= 1.0
                }
                _ => (x - cx).abs() <= half_w && (y - cy).abs() <= half_h,
            };
            if inside {
                mask[(y * s + x) as usize] = true;
            }
        }
    }
    mask
}

fn mask_bounds(mask: &[bool], size: u32) -> Option<BBox> {
    let mut x0 = u32::MAX;
    let mut y0 = u32::MAX;
    let mut x1 = 0u32;
    let mut y1 = 0u32;
    for y in 0..size {
        for x in 0..size {
            if mask[(y * size + x) as usize] {
                x0 = x0.min(x);
                y0 = y0.min(y);
                x1 = x1.max(x + 1);
                y1 = y1.max(y + 1);
            }
        }
    }
    (x0 < x1).then_some(BBox { x0, y0, x1, y1 })
}

fn paint_figure<R: Rng>(
    img: &mut ImageBuf,
    mask: &[bool],
    size: u32,
    rgb: [u8; 3],
    pattern: PatternKind,
    rng: &mut R,
) {
    let ink = variant_color(rgb);
    match pattern {
        PatternKind::Plain => {
            for y in 0..size {
                for x in 0..size {
                    if mask[(y * size + x) as usize] {
                        img.set(x, y, rgb);
                    }
                }
            }
        }
        PatternKind::Striped => {
            let stripe_w = rng.gen_range(4..=6u32);
            let vertical = rng.gen::<bool>();
            // bands start on the base color so it keeps the majority and
            // the figure's mean hue stays decodable
            for y in 0..size {
                for x in 0..size {
                    if mask[(y * size + x) as usize] {
                        let coord = if vertical { x } else { y };
                        let band = (coord / stripe_w) % 2 == 0;
                        img.set(x, y, if band { rgb } else { ink });
                    }
                }
            }
        }
        PatternKind::Spotted => {
            for y in 0..size {
                for x in 0..size {
                    if mask[(y * size + x) as usize] {
                        img.set(x, y, rgb);
                    }
                }
            }
            let step = rng.gen_range(8..=10u32);
            let radius = rng.gen_range(2..=3) as i64;
            let jitter = 1i64;
            let mut gy = step / 2;
            while gy < size {
                let mut gx = step / 2;
                while gx < size {
                    let cx = gx as i64 + rng.gen_range(-jitter..=jitter);
                    let cy = gy as i64 + rng.gen_range(-jitter..=jitter);
                    for dy in -radius..=radius {
                        for dx in -radius..=radius {
                            if dx * dx + dy * dy > radius * radius {
                                continue;
                            }
                            let (px, py) = (cx + dx, cy + dy);
                            if px < 0 || py < 0 || px >= size as i64 || py >= size as i64 {
                                continue;
                            }
                            if mask[(py as u32 * size + px as u32) as usize] {
                                img.set(px as u32, py as u32, ink);
                            }
                        }
                    }
                    gx += step;
                }
                gy += step;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AttributeGroup;

    fn small_config(clutter: f64) -> SyntheticConfig {
        SyntheticConfig::new(12, 4, 6, 48, clutter, 99)
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_config(0.5);
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.schema, b.schema);
    }

    #[test]
    fn every_record_has_color_and_shape_positive() {
        let ds = generate_synthetic(&small_config(0.3)).unwrap();
        let color_range = ds.schema.group_range(AttributeGroup::Color);
        let shape_range = ds.schema.group_range(AttributeGroup::Shape);
        for rec in &ds.records {
            let positives = rec.labels.iter().filter(|&&v| v == 1).count();
            assert!(positives >= 2, "record {} has {positives}", rec.image_id);
            assert_eq!(
                rec.labels[color_range.clone()]
                    .iter()
                    .filter(|&&v| v == 1)
                    .count(),
                1
            );
            assert_eq!(
                rec.labels[shape_range.clone()]
                    .iter()
                    .filter(|&&v| v == 1)
                    .count(),
                1
            );
        }
    }

    #[test]
    fn clutter_zero_background_is_uniform_outside_bbox() {
        let ds = generate_synthetic(&small_config(0.0)).unwrap();
        for rec in &ds.records {
            let bbox = rec.bbox.unwrap();
            for y in 0..rec.pixels.height() {
                for x in 0..rec.pixels.width() {
                    let inside =
                        x >= bbox.x0 && x < bbox.x1 && y >= bbox.y0 && y < bbox.y1;
                    if !inside {
                        assert_eq!(rec.pixels.get(x, y), BACKGROUND_RGB);
                    }
                }
            }
        }
    }

    #[test]
    fn bbox_is_tight_and_in_bounds() {
        let ds = generate_synthetic(&small_config(0.8)).unwrap();
        for rec in &ds.records {
            let bbox = rec.bbox.unwrap();
            bbox.validate(rec.pixels.width(), rec.pixels.height()).unwrap();
            assert!(bbox.width() >= 3 && bbox.height() >= 3);
        }
    }

    #[test]
    fn labeled_color_decodes_from_figure_pixels() {
        // clutter 0: mean hue of non-background pixels inside the bbox,
        // decoded by nearest palette entry, must equal the labeled color.
        let cfg = SyntheticConfig::new(60, 0, 0, 48, 0.0, 7);
        let ds = generate_synthetic(&cfg).unwrap();
        for rec in &ds.records {
            let bbox = rec.bbox.unwrap();
            let mut sum = [0.0f64; 3];
            let mut n = 0.0;
            for y in bbox.y0..bbox.y1 {
                for x in bbox.x0..bbox.x1 {
                    let px = rec.pixels.get(x, y);
                    if px != BACKGROUND_RGB {
                        for c in 0..3 {
                            sum[c] += px[c] as f64;
                        }
                        n += 1.0;
                    }
                }
            }
            assert!(n > 0.0);
            let mean = sum.map(|s| (s / n) as u8);
            let decoded = cfg
                .palette
                .iter()
                .min_by(|a, b| {
                    rgb_distance(a.1, mean)
                        .partial_cmp(&rgb_distance(b.1, mean))
                        .unwrap()
                })
                .map(|(name, _)| name.clone())
                .unwrap();
            let color_range = ds.schema.group_range(AttributeGroup::Color);
            let labeled = color_range
                .clone()
                .find(|&i| rec.labels[i] == 1)
                .map(|i| ds.schema.class_names()[i].clone())
                .unwrap();
            assert_eq!(decoded, labeled, "record {}", rec.image_id);
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = small_config(0.2);
        cfg.palette.clear();
        assert!(generate_synthetic(&cfg).is_err());

        let mut cfg = small_config(0.2);
        cfg.shapes.clear();
        assert!(generate_synthetic(&cfg).is_err());

        let mut cfg = small_config(0.2);
        cfg.clutter = 1.5;
        assert!(generate_synthetic(&cfg).is_err());

        let mut cfg = small_config(0.2);
        cfg.palette.push(("red2".into(), [221, 31, 30]));
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn schema_excludes_plain() {
        let cfg = small_config(0.0);
        let schema = cfg.schema();
        assert_eq!(schema.pattern, vec!["spotted".to_string(), "striped".to_string()]);
        assert_eq!(schema.num_classes(), 12);
    }
}
