//! Seeded synthetic scenes of overlapping round objects with a skewed
//! category mix, and the on-disk dataset layout.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::anchors::{BoxN, Label};
use crate::config::{join, KeyValues};
use crate::error::{Error, Result};
use crate::synth::image::Image;
use crate::synth::labels::{read_labels, write_labels};

/// Placement attempts before an object is accepted regardless of overlap.
pub const PLACEMENT_TRIES: usize = 20;

/// RNG stream offset separating validation scenes from training scenes.
pub const VAL_STREAM_BASE: u64 = 1 << 32;

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    /// Category frequencies, summing to one.
    pub ratios: Vec<f64>,
    /// Inclusive range of objects per image.
    pub objects: (usize, usize),
    /// Per-category inclusive radius range in pixels.
    pub radius: Vec<(f64, f64)>,
    /// Largest tolerated fraction of either box covered by the other.
    pub max_overlap: f64,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
    pub train_count: usize,
    pub val_count: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 160,
            width: 160,
            ratios: vec![0.70, 0.15, 0.15],
            objects: (4, 10),
            radius: vec![(11.0, 15.0), (8.0, 11.0), (5.0, 7.0)],
            max_overlap: 0.3,
            noise: 0.03,
            seed: 42,
            train_count: 300,
            val_count: 60,
        }
    }
}

impl SceneConfig {
    pub fn n_categories(&self) -> usize {
        self.ratios.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive".into());
        }
        if self.ratios.is_empty() || self.ratios.iter().any(|&r| !(r >= 0.0 && r.is_finite())) {
            return bad("ratios must be non-negative".into());
        }
        let sum: f64 = self.ratios.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return bad(format!("ratios sum to {sum}, expected 1"));
        }
        if self.radius.len() != self.ratios.len() {
            return bad(format!(
                "{} radius ranges for {} categories",
                self.radius.len(),
                self.ratios.len()
            ));
        }
        for (c, &(lo, hi)) in self.radius.iter().enumerate() {
            if !(lo >= 1.0 && hi >= lo && hi.is_finite()) {
                return bad(format!(
                    "category {c}: radius range {lo}-{hi} invalid (need 1 <= min <= max)"
                ));
            }
        }
        if self.objects.0 > self.objects.1 {
            return bad(format!(
                "objects range {}-{} is empty",
                self.objects.0, self.objects.1
            ));
        }
        if !(0.0..=1.0).contains(&self.max_overlap) {
            return bad("max_overlap must lie in [0,1]".into());
        }
        if !(self.noise >= 0.0 && self.noise <= 1.0) {
            return bad("noise must lie in [0,1]".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "height = {}", self.height);
        let _ = writeln!(s, "width = {}", self.width);
        let _ = writeln!(s, "categories = {}", self.n_categories());
        let _ = writeln!(s, "ratios = {}", join(&self.ratios));
        let _ = writeln!(s, "objects_min = {}", self.objects.0);
        let _ = writeln!(s, "objects_max = {}", self.objects.1);
        let lo: Vec<f64> = self.radius.iter().map(|r| r.0).collect();
        let hi: Vec<f64> = self.radius.iter().map(|r| r.1).collect();
        let _ = writeln!(s, "radius_min = {}", join(&lo));
        let _ = writeln!(s, "radius_max = {}", join(&hi));
        let _ = writeln!(s, "max_overlap = {}", self.max_overlap);
        let _ = writeln!(s, "noise = {}", self.noise);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "train_count = {}", self.train_count);
        let _ = writeln!(s, "val_count = {}", self.val_count);
        s
    }

    /// Reads the keys above; missing keys keep their defaults.
    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = SceneConfig::default();
        let height = kv.take_or("height", d.height)?;
        let width = kv.take_or("width", d.width)?;
        let categories: Option<usize> = kv.take("categories")?;
        let ratios = match kv.take_list::<f64>("ratios")? {
            Some(r) => r,
            None => match categories {
                Some(n) if n != d.ratios.len() => vec![1.0 / n as f64; n],
                _ => d.ratios.clone(),
            },
        };
        if let Some(n) = categories {
            if n != ratios.len() {
                return Err(Error::Config(format!(
                    "categories = {n} but {} ratios given",
                    ratios.len()
                )));
            }
        }
        let objects = (
            kv.take_or("objects_min", d.objects.0)?,
            kv.take_or("objects_max", d.objects.1)?,
        );
        let default_radius = |i: usize| d.radius[i.min(d.radius.len() - 1)];
        let lo = kv
            .take_list::<f64>("radius_min")?
            .unwrap_or_else(|| (0..ratios.len()).map(|i| default_radius(i).0).collect());
        let hi = kv
            .take_list::<f64>("radius_max")?
            .unwrap_or_else(|| (0..ratios.len()).map(|i| default_radius(i).1).collect());
        if lo.len() != hi.len() {
            return Err(Error::Config(
                "radius_min and radius_max differ in length".into(),
            ));
        }
        let cfg = SceneConfig {
            height,
            width,
            ratios,
            objects,
            radius: lo.into_iter().zip(hi).collect(),
            max_overlap: kv.take_or("max_overlap", d.max_overlap)?,
            noise: kv.take_or("noise", d.noise)?,
            seed: kv.take_or("seed", d.seed)?,
            train_count: kv.take_or("train_count", d.train_count)?,
            val_count: kv.take_or("val_count", d.val_count)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut kv = KeyValues::load(path)?;
        let cfg = Self::from_kv(&mut kv)?;
        kv.finish()?;
        Ok(cfg)
    }
}

/// Fill color of a category; the first three mimic stained-cell hues.
pub fn category_color(c: usize) -> [f64; 3] {
    const PALETTE: [[f64; 3]; 3] = [[0.82, 0.32, 0.34], [0.42, 0.24, 0.68], [0.58, 0.50, 0.80]];
    if c < PALETTE.len() {
        PALETTE[c]
    } else {
        let t = c as f64 * 0.618_033_988_75;
        let h = (t - t.floor()) * std::f64::consts::TAU;
        [
            0.5 + 0.35 * h.cos(),
            0.5 + 0.35 * (h + 2.1).cos(),
            0.5 + 0.35 * (h + 4.2).cos(),
        ]
    }
}

pub const BACKGROUND: [f64; 3] = [0.95, 0.88, 0.85];

/// One object as drawn: its label and every pixel it covers (inside the image).
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedObject {
    pub label: Label,
    /// Ellipse center `(x, y)` and radii `(rx, ry)` in pixels.
    pub centre: (f64, f64),
    pub radii: (f64, f64),
    pub pixels: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<RenderedObject>,
}

impl Scene {
    pub fn labels(&self) -> Vec<Label> {
        self.objects.iter().map(|o| o.label).collect()
    }
}

struct Ellipse {
    category: usize,
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn bounds(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.rx,
            self.cy - self.ry,
            self.cx + self.rx,
            self.cy + self.ry,
        )
    }

    /// Normalized squared radius of a pixel center.
    fn rho(&self, y: usize, x: usize) -> f64 {
        let dx = (x as f64 + 0.5 - self.cx) / self.rx;
        let dy = (y as f64 + 0.5 - self.cy) / self.ry;
        dx * dx + dy * dy
    }
}

fn overlap_ok(a: &Ellipse, placed: &[Ellipse], max_overlap: f64) -> bool {
    let (ax0, ay0, ax1, ay1) = a.bounds();
    let area_a = (ax1 - ax0) * (ay1 - ay0);
    placed.iter().all(|b| {
        let (bx0, by0, bx1, by1) = b.bounds();
        let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
        let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
        let inter = iw * ih;
        let area_b = (bx1 - bx0) * (by1 - by0);
        inter / area_a <= max_overlap && inter / area_b <= max_overlap
    })
}

fn sample_category<R: Rng>(rng: &mut R, ratios: &[f64]) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (c, &r) in ratios.iter().enumerate() {
        acc += r;
        if u < acc {
            return c;
        }
    }
    ratios.iter().rposition(|&r| r > 0.0).unwrap_or(0)
}

/// Renders scene `stream` for `cfg`. A pure function of `(cfg, stream)`.
pub fn render_scene(cfg: &SceneConfig, stream: u64) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    let (h, w) = (cfg.height, cfg.width);
    let n = rng.gen_range(cfg.objects.0..=cfg.objects.1);

    let mut placed: Vec<Ellipse> = Vec::with_capacity(n);
    for _ in 0..n {
        // category first so the overlap retries cannot skew the mix
        let category = sample_category(&mut rng, &cfg.ratios);
        let (lo, hi) = cfg.radius[category];
        let r = if hi > lo { rng.gen_range(lo..=hi) } else { lo };
        let e: f64 = rng.gen_range(-0.15..=0.15);
        let (rx, ry) = ((r * (1.0 + e)).max(1.0), (r * (1.0 - e)).max(1.0));
        let mut cand = None;
        for attempt in 0..PLACEMENT_TRIES {
            let el = Ellipse {
                category,
                cx: rng.gen_range(0.0..w as f64),
                cy: rng.gen_range(0.0..h as f64),
                rx,
                ry,
            };
            if overlap_ok(&el, &placed, cfg.max_overlap) || attempt + 1 == PLACEMENT_TRIES {
                cand = Some(el);
                break;
            }
        }
        placed.push(cand.expect("at least one attempt"));
    }

    let mut image = Image::filled(h, w, BACKGROUND);
    let mut objects = Vec::with_capacity(placed.len());
    for el in &placed {
        let base = category_color(el.category);
        let jitter: [f64; 3] = [
            rng.gen_range(-0.04..=0.04),
            rng.gen_range(-0.04..=0.04),
            rng.gen_range(-0.04..=0.04),
        ];
        let (x0, y0, x1, y1) = el.bounds();
        let ys = (y0.floor().max(0.0) as usize)..(y1.ceil().min(h as f64) as usize);
        let xs = (x0.floor().max(0.0) as usize)..(x1.ceil().min(w as f64) as usize);
        let mut pixels = Vec::new();
        for y in ys {
            for x in xs.clone() {
                let rho = el.rho(y, x);
                if rho <= 1.0 {
                    let shade = 0.85 + 0.15 * rho;
                    let rgb = [0, 1, 2].map(|c| ((base[c] + jitter[c]) * shade).clamp(0.0, 1.0));
                    image.set_pixel(y, x, rgb);
                    pixels.push((y, x));
                }
            }
        }
        if pixels.is_empty() {
            // radius >= 1 and a center inside the image make this unreachable
            continue;
        }
        let px0 = pixels.iter().map(|p| p.1).min().unwrap();
        let px1 = pixels.iter().map(|p| p.1).max().unwrap() + 1;
        let py0 = pixels.iter().map(|p| p.0).min().unwrap();
        let py1 = pixels.iter().map(|p| p.0).max().unwrap() + 1;
        let bbox = BoxN::from_corners(
            px0 as f64 / w as f64,
            py0 as f64 / h as f64,
            px1 as f64 / w as f64,
            py1 as f64 / h as f64,
        );
        objects.push(RenderedObject {
            label: Label::new(el.category, bbox),
            centre: (el.cx, el.cy),
            radii: (el.rx, el.ry),
            pixels,
        });
    }
    for v in &mut image.data {
        let n: f64 = rng.gen_range(-1.0..=1.0);
        *v = (*v + cfg.noise * n).clamp(0.0, 1.0);
    }
    Scene {
        image: image.quantized(),
        objects,
    }
}

/// Labeled image for training index `index`.
pub fn generate_scene(cfg: &SceneConfig, index: u64) -> (Image, Vec<Label>) {
    let s = render_scene(cfg, index);
    let labels = s.labels();
    (s.image, labels)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }

    pub fn stream(self, index: usize) -> u64 {
        match self {
            Split::Train => index as u64,
            Split::Val => VAL_STREAM_BASE + index as u64,
        }
    }
}

pub fn image_path(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join("images")
        .join(split.name())
        .join(format!("{index:06}.ppm"))
}

pub fn label_path(root: &Path, split: Split, index: usize) -> PathBuf {
    root.join("labels")
        .join(split.name())
        .join(format!("{index:06}.txt"))
}

/// Writes `images/{train,val}/NNNNNN.ppm`, `labels/{split}/NNNNNN.txt` and `dataset.cfg`.
pub fn write_dataset(cfg: &SceneConfig, root: &Path) -> Result<()> {
    cfg.validate()?;
    for split in [Split::Train, Split::Val] {
        for dir in ["images", "labels"] {
            let d = root.join(dir).join(split.name());
            std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        let count = match split {
            Split::Train => cfg.train_count,
            Split::Val => cfg.val_count,
        };
        (0..count).into_par_iter().try_for_each(|i| -> Result<()> {
            let scene = render_scene(cfg, split.stream(i));
            scene.image.write_ppm(&image_path(root, split, i))?;
            write_labels(&label_path(root, split, i), &scene.labels())
        })?;
    }
    let p = root.join("dataset.cfg");
    std::fs::write(&p, cfg.to_kv()).map_err(|e| Error::io(&p, e))
}

/// One image file paired with its label file.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: PathBuf,
    pub labels: PathBuf,
}

/// Lists a split's images sorted by file name, each paired with its label file.
pub fn list_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let dir = root.join("images").join(split.name());
    let mut names: Vec<String> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".ppm"))
        .collect();
    names.sort();
    Ok(names
        .into_iter()
        .map(|n| {
            let stem = n.trim_end_matches(".ppm");
            Sample {
                image: dir.join(&n),
                labels: root
                    .join("labels")
                    .join(split.name())
                    .join(format!("{stem}.txt")),
            }
        })
        .collect())
}

/// Loads every image and label of a split.
pub fn load_split(
    root: &Path,
    split: Split,
    n_categories: usize,
) -> Result<Vec<(Image, Vec<Label>)>> {
    list_split(root, split)?
        .par_iter()
        .map(|s| {
            Ok((
                Image::read_ppm(&s.image)?,
                read_labels(&s.labels, n_categories)?,
            ))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_roundtrips_through_kv() {
        let cfg = SceneConfig::default();
        let mut kv = KeyValues::parse("d.cfg", &cfg.to_kv()).unwrap();
        let back = SceneConfig::from_kv(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn validation_catches_bad_ratios() {
        let cfg = SceneConfig {
            ratios: vec![0.5, 0.2, 0.2],
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
