//! Images, preprocessing, augmentation, the synthetic task and the on-disk
//! dataset layout (`labels.csv` with header `file,label,split`).

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::init::{self, Rng};
use crate::tensor::Tensor;

/// `[h × w × c]` image with values in `[0, 1]`.
pub fn from_u8(pixels: &[u8], size: usize, channels: usize) -> Result<Tensor> {
    Tensor::new(
        pixels.iter().map(|&p| p as f32 / 255.0).collect(),
        &[size, size, channels],
    )
}

fn dims3(img: &Tensor) -> Result<(usize, usize, usize)> {
    match *img.shape() {
        [h, w, c] => Ok((h, w, c)),
        _ => Err(Error::contract(format!(
            "images are [h × w × c], got {:?}",
            img.shape()
        ))),
    }
}

/// Bilinear resampling with half-pixel centers (source coordinate
/// `(x + ½)·in/out − ½`, clamped at the border). Same-size input is
/// returned unchanged.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (h, w, c) = dims3(img)?;
    if (h, w) == (out_h, out_w) {
        return Ok(img.detach());
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::contract("resize target must be non-empty"));
    }
    let taps = |out: usize, inp: usize| -> Vec<(usize, usize, f32)> {
        let ratio = inp as f32 / out as f32;
        (0..out)
            .map(|o| {
                let s = ((o as f32 + 0.5) * ratio - 0.5).max(0.0);
                let i0 = (s.floor() as usize).min(inp - 1);
                let i1 = (i0 + 1).min(inp - 1);
                (i0, i1, s - i0 as f32)
            })
            .collect()
    };
    let ys = taps(out_h, h);
    let xs = taps(out_w, w);
    let src = img.data();
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for &(y0, y1, wy) in &ys {
        for &(x0, x1, wx) in &xs {
            for ch in 0..c {
                let at = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = at(y0, x0) * (1.0 - wx) + at(y0, x1) * wx;
                let bottom = at(y1, x0) * (1.0 - wx) + at(y1, x1) * wx;
                out.push(top * (1.0 - wy) + bottom * wy);
            }
        }
    }
    Tensor::new(out, &[out_h, out_w, c])
}

/// `(x − 0.5) / 0.5` per channel.
pub fn normalize(img: &Tensor) -> Tensor {
    let data = img.data().iter().map(|&v| (v - 0.5) / 0.5).collect();
    Tensor::new(data, img.shape()).expect("same shape")
}

/// Deterministic high-resolution input: resize then normalize.
pub fn prepare_high(img: &Tensor, high_res: usize) -> Result<Tensor> {
    Ok(normalize(&resize_bilinear(img, high_res, high_res)?))
}

/// Un-normalized low-resolution view, down-sampled from the high-resolution
/// image.
pub fn prepare_low(img: &Tensor, high_res: usize, low_res: usize) -> Result<Tensor> {
    resize_bilinear(&resize_bilinear(img, high_res, high_res)?, low_res, low_res)
}

/// One draw of the low-resolution augmentation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AugmentParams {
    /// Crop area as a fraction of the image, in `[0.7, 1]`.
    pub crop_scale: f32,
    /// Crop origin as fractions of the free margin.
    pub crop_origin: (f32, f32),
    pub flip: bool,
    pub brightness: f32,
    pub contrast: f32,
}

impl AugmentParams {
    pub fn identity() -> Self {
        AugmentParams {
            crop_scale: 1.0,
            crop_origin: (0.0, 0.0),
            flip: false,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn sample(rng: &mut Rng) -> Self {
        AugmentParams {
            crop_scale: rng.random_range(0.7..=1.0),
            crop_origin: (rng.random(), rng.random()),
            flip: rng.random_bool(0.5),
            brightness: rng.random_range(-0.2..=0.2),
            contrast: rng.random_range(-0.2..=0.2),
        }
    }
}

/// Applies one augmentation draw; values are clamped to `[0, 1]`.
pub fn augment_with(img: &Tensor, p: &AugmentParams) -> Result<Tensor> {
    let (h, w, c) = dims3(img)?;
    let side = |extent: usize| {
        ((extent as f32 * p.crop_scale.sqrt()).round() as usize).clamp(1, extent)
    };
    let (ch, cw) = (side(h), side(w));
    let y0 = ((h - ch) as f32 * p.crop_origin.0).round() as usize;
    let x0 = ((w - cw) as f32 * p.crop_origin.1).round() as usize;
    let src = img.data();
    let mut crop = Vec::with_capacity(ch * cw * c);
    for y in y0..y0 + ch {
        crop.extend_from_slice(&src[(y * w + x0) * c..(y * w + x0 + cw) * c]);
    }
    let mut out = resize_bilinear(&Tensor::new(crop, &[ch, cw, c])?, h, w)?.to_vec();
    if p.flip {
        for row in out.chunks_exact_mut(w * c) {
            for x in 0..w / 2 {
                for k in 0..c {
                    row.swap(x * c + k, (w - 1 - x) * c + k);
                }
            }
        }
    }
    if p.contrast != 0.0 {
        let mean = (out.iter().map(|&v| v as f64).sum::<f64>() / out.len() as f64) as f32;
        out.iter_mut()
            .for_each(|v| *v = (*v - mean) * (1.0 + p.contrast) + mean);
    }
    if p.brightness != 0.0 {
        out.iter_mut().for_each(|v| *v += p.brightness);
    }
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Tensor::new(out, &[h, w, c])
}

/// Random resized crop (area 0.7–1), horizontal flip with probability ½,
/// brightness and contrast jitter of ±0.2.
pub fn augment_low(img: &Tensor, rng: &mut Rng) -> Result<Tensor> {
    augment_with(img, &AugmentParams::sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Data(format!("unknown split {s:?}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Item {
    /// File name relative to the dataset root; also the cache key.
    pub file: String,
    pub label: usize,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub items: Vec<Item>,
    pub class_count: usize,
}

impl Dataset {
    /// Reads `root/labels.csv`; the class count is one past the largest label.
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        let csv = fs::read_to_string(root.join("labels.csv"))
            .map_err(|e| Error::Data(format!("{}: {e}", root.join("labels.csv").display())))?;
        let mut lines = csv.lines().filter(|l| !l.trim().is_empty());
        if lines.next().map(str::trim) != Some("file,label,split") {
            return Err(Error::Data("labels.csv must start with `file,label,split`".into()));
        }
        let mut items = Vec::new();
        for (n, line) in lines.enumerate() {
            let fields: Vec<&str> = line.trim().split(',').collect();
            let [file, label, split] = fields[..] else {
                return Err(Error::Data(format!("labels.csv row {}: expected 3 fields", n + 2)));
            };
            let label = label
                .parse()
                .map_err(|_| Error::Data(format!("labels.csv row {}: bad label {label:?}", n + 2)))?;
            items.push(Item {
                file: file.to_string(),
                label,
                split: Split::parse(split)?,
            });
        }
        let class_count = items.iter().map(|i| i.label + 1).max().unwrap_or(0);
        Ok(Dataset {
            root,
            items,
            class_count,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Item> {
        self.items.iter().filter(move |i| i.split == split)
    }

    /// `[h × w × channels]` image in `[0, 1]`.
    pub fn load(&self, item: &Item, channels: usize) -> Result<Tensor> {
        load_image(self.root.join(&item.file), channels)
    }
}

/// Reads a PNG or binary PPM/PGM as `[h × w × channels]` in `[0, 1]`.
pub fn load_image(path: impl AsRef<Path>, channels: usize) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = match channels {
        1 => img.to_luma8().into_raw(),
        3 => img.to_rgb8().into_raw(),
        _ => return Err(Error::config(format!("{channels} channels unsupported"))),
    };
    Tensor::new(
        raw.iter().map(|&p| p as f32 / 255.0).collect(),
        &[h, w, channels],
    )
}

/// Writes `labels.csv` for `items`.
pub fn write_labels(root: impl AsRef<Path>, items: &[Item]) -> Result<()> {
    let mut csv = String::from("file,label,split\n");
    for item in items {
        csv.push_str(&format!("{},{},{}\n", item.file, item.label, item.split));
    }
    fs::write(root.as_ref().join("labels.csv"), csv)?;
    Ok(())
}

/// Placement of the class texture in a synthetic image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stamp {
    pub y: usize,
    pub x: usize,
    pub size: usize,
}

#[derive(Clone, Debug)]
pub struct SynthImage {
    pub size: usize,
    /// `size × size × 3`, row-major.
    pub pixels: Vec<u8>,
    pub label: usize,
    pub stamp: Option<Stamp>,
}

impl SynthImage {
    pub fn to_tensor(&self) -> Tensor {
        from_u8(&self.pixels, self.size, 3).expect("consistent size")
    }
}

/// Checkerboard amplitude of the class texture.
pub const STAMP_AMPLITUDE: f32 = 0.15;
const STAMP_GRID: usize = 8;

/// Stamp side: two 16-pixel patches, shrunk for small images.
pub fn stamp_size(high_res: usize) -> usize {
    (high_res / 4).clamp(2, 32) & !1
}

/// Synthetic images over a smooth, noisy background. Class 0 is plain; class
/// `c ≥ 1` carries a one-pixel checkerboard stamp placed in horizontal band
/// `c − 1` of `classes − 1`. Stamps sit on an 8-pixel grid so that a 4×
/// bilinear downsample averages each checker cell pair to exactly zero.
/// Labels are assigned round-robin.
pub fn synth_dataset(seed: u64, n: usize, classes: usize, high_res: usize) -> Result<Vec<SynthImage>> {
    if classes < 2 || n < classes {
        return Err(Error::config(format!(
            "need n ≥ classes ≥ 2, got n={n}, classes={classes}"
        )));
    }
    if high_res < 16 || high_res % STAMP_GRID != 0 {
        return Err(Error::config(format!(
            "synthetic images need a resolution that is a multiple of {STAMP_GRID} and ≥ 16"
        )));
    }
    Ok((0..n)
        .map(|i| synth_image(&mut init::rng_for(seed, &format!("synth/{i}")), i % classes, classes, high_res))
        .collect())
}

fn synth_image(rng: &mut Rng, label: usize, classes: usize, r: usize) -> SynthImage {
    let base: f32 = rng.random_range(0.55..0.85);
    let (gy, gx): (f32, f32) = (rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1));
    let tint: [f32; 3] = [
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
        rng.random_range(-0.03..0.03),
    ];
    let blobs: Vec<(f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.random_range(0.0..r as f32),
                rng.random_range(0.0..r as f32),
                rng.random_range(-0.05..0.05),
            )
        })
        .collect();
    let width = r as f32 / 4.0;
    let stamp = (label > 0).then(|| {
        let size = stamp_size(r);
        let mut cells = |lo: usize, hi: usize| {
            let first = lo.div_ceil(STAMP_GRID);
            let last = (hi.saturating_sub(size) / STAMP_GRID).max(first);
            (rng.random_range(first..=last) * STAMP_GRID).min((r - size) / STAMP_GRID * STAMP_GRID)
        };
        let band = r / (classes - 1);
        let y = cells(band * (label - 1), band * label);
        let x = cells(0, r);
        Stamp { y, x, size }
    });
    let mut pixels = Vec::with_capacity(r * r * 3);
    for y in 0..r {
        for x in 0..r {
            let (fy, fx) = (y as f32 / r as f32 - 0.5, x as f32 / r as f32 - 0.5);
            let mut v = base + gy * fy + gx * fx;
            for &(by, bx, amp) in &blobs {
                let d2 = ((y as f32 - by).powi(2) + (x as f32 - bx).powi(2)) / (width * width);
                v += amp * (-d2).exp();
            }
            if let Some(s) = stamp {
                if (s.y..s.y + s.size).contains(&y) && (s.x..s.x + s.size).contains(&x) {
                    v += if (x + y) % 2 == 0 { STAMP_AMPLITUDE } else { -STAMP_AMPLITUDE };
                }
            }
            for t in tint {
                let noise: f32 = rng.sample::<f32, _>(StandardNormal) * 0.02;
                pixels.push(((v + t + noise).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    SynthImage {
        size: r,
        pixels,
        label,
        stamp,
    }
}

/// Split sizes for `n` items: the first `n − val − test` are train.
pub fn split_of(i: usize, n: usize, val: usize, test: usize) -> Split {
    if i >= n - test {
        Split::Test
    } else if i >= n - test - val {
        Split::Val
    } else {
        Split::Train
    }
}

/// Writes synthetic images as PNG files plus `labels.csv`.
pub fn write_synthetic(root: impl AsRef<Path>, images: &[SynthImage], val: usize, test: usize) -> Result<Vec<Item>> {
    let root = root.as_ref();
    fs::create_dir_all(root)?;
    if val + test > images.len() {
        return Err(Error::config("validation and test splits exceed the dataset size"));
    }
    let mut items = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let file = format!("img_{i:05}.png");
        image::RgbImage::from_raw(img.size as u32, img.size as u32, img.pixels.clone())
            .ok_or_else(|| Error::Data("pixel buffer does not match image size".into()))?
            .save(root.join(&file))
            .map_err(|e| Error::Data(format!("{file}: {e}")))?;
        items.push(Item {
            file,
            label: img.label,
            split: split_of(i, images.len(), val, test),
        });
    }
    write_labels(root, &items)?;
    Ok(items)
}

/// Scripted detector: strongest mean absolute horizontal neighbour
/// difference over all `window`-sized squares on an 8-pixel grid, scaled
/// to the image, compared with `threshold`.
pub fn texture_detector(img: &Tensor, window: usize, threshold: f32) -> Result<bool> {
    let (h, w, c) = dims3(img)?;
    let win = window.clamp(2, w.min(h));
    let step = (STAMP_GRID * w / h.max(1)).max(1).min(win);
    let px = img.data();
    let gray = |y: usize, x: usize| (0..c).map(|k| px[(y * w + x) * c + k]).sum::<f32>() / c as f32;
    let mut best = 0.0f32;
    let mut y = 0;
    while y + win <= h {
        let mut x = 0;
        while x + win <= w {
            let mut acc = 0.0;
            for yy in y..y + win {
                for xx in x..x + win - 1 {
                    acc += (gray(yy, xx) - gray(yy, xx + 1)).abs();
                }
            }
            best = best.max(acc / (win * (win - 1)) as f32);
            x += step;
        }
        y += step;
    }
    Ok(best > threshold)
}
