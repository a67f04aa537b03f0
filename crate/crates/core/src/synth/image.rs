//! RGB images in `[0,1]`, binary PPM I/O and preprocessing filters.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::anchors::{BoxN, Label};
use crate::error::{Error, Result};
use crate::ops::ResizePlan;
use crate::tensor::Tensor;

/// Row-major `H×W×3` image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != height * width * 3 {
            return Err(Error::Validation(format!(
                "image {height}x{width} needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self {
            height,
            width,
            data: rgb.repeat(height * width),
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// `[1,H,W,3]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.height, self.width, 3], self.data.clone())
            .expect("image dims are positive")
    }

    /// Rounds every value to the nearest of 256 levels, as stored in a PPM.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = quantize(*v) as f64 / 255.0;
        }
        self
    }

    pub fn write_ppm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_ppm_to(&mut f).map_err(|e| Error::io(path, e))
    }

    pub fn write_ppm_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        w.write_all(&bytes)
    }

    pub fn read_ppm(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ppm_from(&mut BufReader::new(f), path)
    }

    /// Binary `P6` with `maxval ≤ 255`; `#` comments allowed in the header.
    pub fn read_ppm_from<R: BufRead>(r: &mut R, path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg,
        };
        let mut fields = Vec::with_capacity(4);
        let mut token = Vec::new();
        let mut byte = [0u8; 1];
        let mut in_comment = false;
        while fields.len() < 4 {
            let n = r.read(&mut byte).map_err(|e| Error::io(path, e))?;
            if n == 0 {
                return Err(bad("truncated PPM header".into()));
            }
            let c = byte[0];
            if in_comment {
                in_comment = c != b'\n';
                continue;
            }
            if c == b'#' {
                in_comment = true;
            } else if c.is_ascii_whitespace() {
                if !token.is_empty() {
                    fields.push(String::from_utf8_lossy(&token).into_owned());
                    token.clear();
                }
            } else {
                token.push(c);
            }
        }
        if fields[0] != "P6" {
            return Err(bad(format!(
                "unsupported magic {:?} (expected P6)",
                fields[0]
            )));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| bad(format!("bad header value {s:?}: {e}")))
        };
        let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if width == 0 || height == 0 || maxval == 0 || maxval > 255 {
            return Err(bad(format!(
                "unsupported PPM geometry {width}x{height} maxval {maxval}"
            )));
        }
        let mut bytes = vec![0u8; width * height * 3];
        r.read_exact(&mut bytes)
            .map_err(|e| bad(format!("reading pixel data: {e}")))?;
        let data = bytes.iter().map(|&b| b as f64 / maxval as f64).collect();
        Image::new(height, width, data)
    }

    /// Bilinear resize with half-pixel centers.
    pub fn resize(&self, height: usize, width: usize) -> Result<Image> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let plan = ResizePlan::new(&[1, self.height, self.width, 3], height, width)?;
        Image::new(height, width, plan.forward(&self.data))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Preprocessing and augmentation filters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Filter {
    /// Separable Gaussian truncated at 3σ and renormalized; edges replicated.
    Gaussian(f64),
    /// Per-channel `k×k` window median (odd `k`); edges replicated.
    Median(usize),
    /// `0.5 + factor·(v − 0.5)`, clamped.
    Contrast(f64),
    /// Horizontal flip.
    Mirror,
    /// Quarter turn clockwise.
    Rotate90,
}

impl Filter {
    pub fn apply(&self, img: &Image, labels: &[Label]) -> Result<(Image, Vec<Label>)> {
        match *self {
            Filter::Gaussian(s) => Ok((gaussian(img, s)?, labels.to_vec())),
            Filter::Median(k) => Ok((median(img, k)?, labels.to_vec())),
            Filter::Contrast(f) => Ok((contrast(img, f), labels.to_vec())),
            Filter::Mirror => Ok((
                mirror(img),
                labels
                    .iter()
                    .map(|l| Label::new(l.category, mirror_box(&l.bbox)))
                    .collect(),
            )),
            Filter::Rotate90 => Ok((
                rotate90(img),
                labels
                    .iter()
                    .map(|l| Label::new(l.category, rotate90_box(&l.bbox)))
                    .collect(),
            )),
        }
    }
}

/// Normalized Gaussian taps for offsets `−r..=r`, `r = ceil(3σ)`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!(
            "gaussian sigma must be >= 0, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(vec![1.0]);
    }
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    Ok(k.into_iter().map(|v| v / s).collect())
}

fn clamp_index(i: isize, n: usize) -> usize {
    i.clamp(0, n as isize - 1) as usize
}

pub fn gaussian(img: &Image, sigma: f64) -> Result<Image> {
    let k = gaussian_kernel(sigma)?;
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let xx = clamp_index(x as isize + t as isize - r, w);
                    acc += kv * img.data[(y * w + xx) * 3 + c];
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = vec![0.0; img.data.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    let yy = clamp_index(y as isize + t as isize - r, h);
                    acc += kv * tmp[(yy * w + x) * 3 + c];
                }
                out[(y * w + x) * 3 + c] = acc.clamp(0.0, 1.0);
            }
        }
    }
    Image::new(h, w, out)
}

pub fn median(img: &Image, k: usize) -> Result<Image> {
    if k.is_multiple_of(2) {
        return Err(Error::Config(format!("median window must be odd, got {k}")));
    }
    let r = (k / 2) as isize;
    let (h, w) = (img.height, img.width);
    let mut out = vec![0.0; img.data.len()];
    let mut window = Vec::with_capacity(k * k);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                window.clear();
                for dy in -r..=r {
                    for dx in -r..=r {
                        let yy = clamp_index(y as isize + dy, h);
                        let xx = clamp_index(x as isize + dx, w);
                        window.push(img.data[(yy * w + xx) * 3 + c]);
                    }
                }
                window.sort_by(f64::total_cmp);
                out[(y * w + x) * 3 + c] = window[window.len() / 2];
            }
        }
    }
    Image::new(h, w, out)
}

pub fn contrast(img: &Image, factor: f64) -> Image {
    Image {
        height: img.height,
        width: img.width,
        data: img
            .data
            .iter()
            .map(|&v| (0.5 + factor * (v - 0.5)).clamp(0.0, 1.0))
            .collect(),
    }
}

pub fn mirror(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height {
        for x in 0..img.width {
            out.set_pixel(y, img.width - 1 - x, img.pixel(y, x));
        }
    }
    out
}

pub fn mirror_box(b: &BoxN) -> BoxN {
    BoxN::new(1.0 - b.cx, b.cy, b.w, b.h)
}

/// Source pixel `(y, x)` lands at `(x, H − 1 − y)`.
pub fn rotate90(img: &Image) -> Image {
    let (h, w) = (img.height, img.width);
    let mut out = Image::filled(w, h, [0.0; 3]);
    for y in 0..h {
        for x in 0..w {
            out.set_pixel(x, h - 1 - y, img.pixel(y, x));
        }
    }
    out
}

pub fn rotate90_box(b: &BoxN) -> BoxN {
    BoxN::new(1.0 - b.cy, b.cx, b.h, b.w)
}
