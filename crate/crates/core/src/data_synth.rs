//! Deterministic synthetic objects and defects, MVTec-style directory
//! ingestion, and the incremental step plan.

use std::f32::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::imageops::FilterType;
use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Stripes,
    Checker,
    Blobs,
    Gradient,
    Rings,
    NoiseTexture,
}

impl GeneratorKind {
    pub const ALL: [GeneratorKind; 6] = [
        GeneratorKind::Stripes,
        GeneratorKind::Checker,
        GeneratorKind::Blobs,
        GeneratorKind::Gradient,
        GeneratorKind::Rings,
        GeneratorKind::NoiseTexture,
    ];

    pub fn name(self) -> &'static str {
        match self {
            GeneratorKind::Stripes => "stripes",
            GeneratorKind::Checker => "checker",
            GeneratorKind::Blobs => "blobs",
            GeneratorKind::Gradient => "gradient",
            GeneratorKind::Rings => "rings",
            GeneratorKind::NoiseTexture => "noise_texture",
        }
    }
}

impl FromStr for GeneratorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        GeneratorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("generator_kind", format!("unknown generator kind `{s}`")))
    }
}

impl fmt::Display for GeneratorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextureParams {
    /// Cycles (or cells) across the image.
    pub frequency: f32,
    /// Radians.
    pub orientation: f32,
    pub palette_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub object_id: usize,
    pub kind: GeneratorKind,
    pub params: TextureParams,
    pub seed: u64,
}

impl ObjectSpec {
    /// The default object for `object_id`: kinds cycle through [`GeneratorKind::ALL`].
    pub fn synthetic(object_id: usize, master_seed: u64) -> Self {
        let kind = GeneratorKind::ALL[object_id % GeneratorKind::ALL.len()];
        let s = seed::derive(master_seed, object_id as u64);
        let mut rng = seed::rng(s);
        let frequency = match kind {
            GeneratorKind::Stripes => rng.random_range(4.0..8.0),
            GeneratorKind::Checker => rng.random_range(4.0..8.0),
            GeneratorKind::Blobs => rng.random_range(6.0..10.0),
            GeneratorKind::Gradient => rng.random_range(1.0..2.0),
            GeneratorKind::Rings => rng.random_range(3.0..6.0),
            GeneratorKind::NoiseTexture => rng.random_range(5.0..9.0),
        };
        Self {
            object_id,
            kind,
            params: TextureParams {
                frequency,
                orientation: rng.random_range(0.0..PI),
                palette_seed: rng.random(),
            },
            seed: rng.random(),
        }
    }

    pub fn name(&self) -> String {
        format!("obj{:02}_{}", self.object_id, self.kind)
    }

    fn validate(&self) -> Result<()> {
        let p = &self.params;
        if !(p.frequency.is_finite() && p.frequency > 0.0) || !p.orientation.is_finite() {
            return Err(Error::config(
                "texture_params",
                format!("invalid texture parameters for object {}", self.object_id),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Defective,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `C x H x W`, values in `[0, 1]`.
    pub image: Array3<f32>,
    pub object_id: usize,
    pub label: Label,
    /// `H x W`, 1 marks a defective pixel.
    pub mask: Array2<u8>,
    pub name: String,
}

impl Sample {
    pub fn mask_area(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }

    /// Mask/label coherence and value range.
    pub fn validate(&self) -> Result<()> {
        let area = self.mask_area();
        match self.label {
            Label::Normal if area != 0 => Err(Error::Contract(format!(
                "normal sample `{}` carries a non-empty mask",
                self.name
            ))),
            Label::Defective if area == 0 => Err(Error::Contract(format!(
                "defective sample `{}` has an empty mask",
                self.name
            ))),
            _ if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) => Err(Error::Contract(
                format!("sample `{}` has pixel values outside [0, 1]", self.name),
            )),
            _ => Ok(()),
        }
    }
}

/// Train and test samples of one object.
#[derive(Clone, Debug)]
pub struct ObjectData {
    pub object_id: usize,
    pub name: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub n_train: usize,
    pub n_test_normal: usize,
    pub n_test_defective: usize,
}

impl Default for SplitCounts {
    fn default() -> Self {
        Self {
            n_train: 40,
            n_test_normal: 20,
            n_test_defective: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefectKind {
    Scratch,
    Blotch,
    NoisePatch,
}

impl DefectKind {
    pub const ALL: [DefectKind; 3] = [
        DefectKind::Scratch,
        DefectKind::Blotch,
        DefectKind::NoisePatch,
    ];
}

fn palette(palette_seed: u64) -> ([f32; 3], [f32; 3]) {
    let mut rng = seed::rng(palette_seed);
    loop {
        let a: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
        let b: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.1..0.9));
        let contrast: f32 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        if contrast >= 0.6 {
            return (a, b);
        }
    }
}

/// Scalar texture field in `[0, 1]` for one image.
fn texture_field(spec: &ObjectSpec, size: usize, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let p = spec.params;
    let n = size as f32;
    let theta = p.orientation + rng.random_range(-0.08..0.08);
    let (ct, st) = (theta.cos(), theta.sin());
    let phase = rng.random_range(0.0..2.0 * PI);
    match spec.kind {
        GeneratorKind::Stripes => Array2::from_shape_fn((size, size), |(y, x)| {
            let u = (x as f32 * ct + y as f32 * st) / n;
            0.5 + 0.5 * (2.0 * PI * p.frequency * u + phase).sin()
        }),
        GeneratorKind::Checker => {
            let cell = n / p.frequency;
            let (ox, oy) = (rng.random_range(0.0..cell), rng.random_range(0.0..cell));
            Array2::from_shape_fn((size, size), |(y, x)| {
                let cx = ((x as f32 + ox) / cell).floor() as i64;
                let cy = ((y as f32 + oy) / cell).floor() as i64;
                if (cx + cy).rem_euclid(2) == 0 {
                    0.1
                } else {
                    0.9
                }
            })
        }
        GeneratorKind::Blobs => {
            let radius = n / p.frequency;
            let count = rng.random_range(7..11);
            let centers: Vec<(f32, f32)> = (0..count)
                .map(|_| (rng.random_range(0.0..n), rng.random_range(0.0..n)))
                .collect();
            Array2::from_shape_fn((size, size), |(y, x)| {
                let v: f32 = centers
                    .iter()
                    .map(|&(cx, cy)| {
                        let d2 = (x as f32 - cx).powi(2) + (y as f32 - cy).powi(2);
                        (-d2 / (2.0 * radius * radius)).exp()
                    })
                    .sum();
                v.min(1.0)
            })
        }
        GeneratorKind::Gradient => {
            let offset = rng.random_range(-0.1..0.1);
            Array2::from_shape_fn((size, size), |(y, x)| {
                let u = (x as f32 * ct + y as f32 * st) / (n * std::f32::consts::SQRT_2);
                let ramp = 0.5 + 0.8 * (u - 0.35) + offset;
                let ripple = 0.05 * (2.0 * PI * 3.0 * p.frequency * u + phase).sin();
                (ramp + ripple).clamp(0.0, 1.0)
            })
        }
        GeneratorKind::Rings => {
            let (cx, cy) = (
                n * 0.5 + rng.random_range(-n * 0.1..n * 0.1),
                n * 0.5 + rng.random_range(-n * 0.1..n * 0.1),
            );
            Array2::from_shape_fn((size, size), |(y, x)| {
                let r = ((x as f32 - cx).powi(2) + (y as f32 - cy).powi(2)).sqrt() / n;
                0.5 + 0.5 * (2.0 * PI * p.frequency * r + phase).sin()
            })
        }
        GeneratorKind::NoiseTexture => {
            let g = p.frequency.round().max(2.0) as usize;
            let grid = Array2::from_shape_fn((g + 1, g + 1), |_| rng.random_range(0.0f32..1.0));
            let cell = n / g as f32;
            Array2::from_shape_fn((size, size), |(y, x)| {
                let (fx, fy) = (x as f32 / cell, y as f32 / cell);
                let (ix, iy) = ((fx as usize).min(g - 1), (fy as usize).min(g - 1));
                let (tx, ty) = (fx - ix as f32, fy - iy as f32);
                let (tx, ty) = (tx * tx * (3.0 - 2.0 * tx), ty * ty * (3.0 - 2.0 * ty));
                let top = grid[[iy, ix]] * (1.0 - tx) + grid[[iy, ix + 1]] * tx;
                let bottom = grid[[iy + 1, ix]] * (1.0 - tx) + grid[[iy + 1, ix + 1]] * tx;
                top * (1.0 - ty) + bottom * ty
            })
        }
    }
}

/// Normal image number `index` of an object. Pure function of `(spec, index, size)`.
pub fn render_normal(spec: &ObjectSpec, index: u64, size: usize) -> Array3<f32> {
    let mut rng = seed::rng(seed::derive(spec.seed, index));
    let field = texture_field(spec, size, &mut rng);
    let (c0, c1) = palette(spec.params.palette_seed);
    let brightness = rng.random_range(-0.03f32..0.03);
    let noise = Normal::new(0.0f32, 0.01).expect("valid sigma");
    let mut img = Array3::<f32>::zeros((3, size, size));
    for y in 0..size {
        for x in 0..size {
            let v = field[[y, x]];
            for c in 0..3 {
                let base = c0[c] * (1.0 - v) + c1[c] * v + brightness;
                img[[c, y, x]] = (base + noise.sample(&mut rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

fn area_bounds(h: usize, w: usize) -> (usize, usize) {
    let total = (h * w) as f64;
    let lo = (0.002 * total).ceil().max(1.0) as usize;
    let hi = (0.1 * total).floor() as usize;
    (lo, hi.max(lo))
}

fn stamp(mask: &mut Array2<u8>, cx: f32, cy: f32, width: usize) {
    let (h, w) = mask.dim();
    let x0 = cx.round() as isize - (width as isize - 1) / 2;
    let y0 = cy.round() as isize - (width as isize - 1) / 2;
    for dy in 0..width as isize {
        for dx in 0..width as isize {
            let (x, y) = (x0 + dx, y0 + dy);
            if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
                mask[[y as usize, x as usize]] = 1;
            }
        }
    }
}

fn draw_mask(kind: DefectKind, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array2<u8> {
    let mut mask = Array2::<u8>::zeros((h, w));
    let (hf, wf) = (h as f32, w as f32);
    let margin = (hf.min(wf) * 0.125).max(1.0);
    match kind {
        DefectKind::Scratch => {
            let width = rng.random_range(1..=3usize);
            let (mut x, mut y) = (
                rng.random_range(margin..wf - margin),
                rng.random_range(margin..hf - margin),
            );
            let mut angle = rng.random_range(0.0..2.0 * PI);
            for _ in 0..rng.random_range(2..=4) {
                let len = rng.random_range(5.0..14.0f32);
                let steps = (len * 4.0).ceil() as usize;
                let (dx, dy) = (angle.cos() * 0.25, angle.sin() * 0.25);
                for _ in 0..steps {
                    stamp(&mut mask, x, y, width);
                    let (nx, ny) = (x + dx, y + dy);
                    if nx < 0.0 || ny < 0.0 || nx > wf - 1.0 || ny > hf - 1.0 {
                        break;
                    }
                    x = nx;
                    y = ny;
                }
                angle += rng.random_range(-1.0..1.0);
            }
        }
        DefectKind::Blotch => {
            let (cx, cy) = (
                rng.random_range(margin..wf - margin),
                rng.random_range(margin..hf - margin),
            );
            let (rx, ry) = (rng.random_range(2.0..8.0f32), rng.random_range(2.0..8.0f32));
            let rot = rng.random_range(0.0..PI);
            let (c, s) = (rot.cos(), rot.sin());
            for yy in 0..h {
                for xx in 0..w {
                    let (px, py) = (xx as f32 - cx, yy as f32 - cy);
                    let (u, v) = (px * c + py * s, -px * s + py * c);
                    if (u / rx).powi(2) + (v / ry).powi(2) <= 1.0 {
                        mask[[yy, xx]] = 1;
                    }
                }
            }
        }
        DefectKind::NoisePatch => {
            let (pw, ph) = (rng.random_range(3..=12usize), rng.random_range(3..=12usize));
            let x0 = rng.random_range(0..w.saturating_sub(pw).max(1));
            let y0 = rng.random_range(0..h.saturating_sub(ph).max(1));
            for yy in y0..(y0 + ph).min(h) {
                for xx in x0..(x0 + pw).min(w) {
                    mask[[yy, xx]] = 1;
                }
            }
        }
    }
    mask
}

/// Paint a small defect onto `image` (`C x H x W` in `[0, 1]`).
///
/// The returned image differs from the input on every mask pixel and nowhere
/// else; the mask covers between 0.2% and 10% of the image.
pub fn inject_defect(
    image: &Array3<f32>,
    rng_seed: u64,
    kind: DefectKind,
) -> (Array3<f32>, Array2<u8>) {
    let (channels, h, w) = image.dim();
    let (lo, hi) = area_bounds(h, w);
    let mut rng = seed::rng(rng_seed);
    let mut mask = None;
    for _ in 0..200 {
        let m = draw_mask(kind, h, w, &mut rng);
        let area = m.iter().filter(|&&v| v != 0).count();
        if (lo..=hi).contains(&area) {
            mask = Some(m);
            break;
        }
    }
    let mask = mask.unwrap_or_else(|| {
        // Fallback: a compact square of the minimum admissible area.
        let side = (lo as f64).sqrt().ceil() as usize;
        let mut m = Array2::<u8>::zeros((h, w));
        let (y0, x0) = ((h - side) / 2, (w - side) / 2);
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                m[[y, x]] = 1;
            }
        }
        m
    });

    let mut out = image.clone();
    let shift = rng.random_range(0.35f32..0.6) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
    let color: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0f32..1.0));
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            for c in 0..channels {
                let orig = image[[c, y, x]];
                let v = match kind {
                    DefectKind::Scratch => orig + shift,
                    DefectKind::Blotch => 0.2 * orig + 0.8 * color[c % 3],
                    DefectKind::NoisePatch => rng.random_range(0.0f32..1.0),
                };
                out[[c, y, x]] = v.clamp(0.0, 1.0);
            }
            let unchanged = (0..channels).all(|c| out[[c, y, x]] == image[[c, y, x]]);
            if unchanged {
                let orig = image[[0, y, x]];
                out[[0, y, x]] = if orig < 0.5 { orig + 0.5 } else { orig - 0.5 };
            }
        }
    }
    (out, mask)
}

/// Train (normal only) and test (normal + defective) samples for one object.
pub fn generate_dataset(spec: &ObjectSpec, counts: SplitCounts, size: usize) -> Result<ObjectData> {
    if counts.n_train == 0 || counts.n_test_normal == 0 || counts.n_test_defective == 0 {
        return Err(Error::config(
            "data.counts",
            "every split count must be at least 1",
        ));
    }
    if size < 8 {
        return Err(Error::config(
            "data.image_size",
            "image size must be at least 8",
        ));
    }
    spec.validate()?;
    let name = spec.name();
    let normal = |index: usize, tag: &str| Sample {
        image: render_normal(spec, index as u64, size),
        object_id: spec.object_id,
        label: Label::Normal,
        mask: Array2::zeros((size, size)),
        name: format!("{tag}_{index:04}"),
    };
    let train = (0..counts.n_train).map(|i| normal(i, "train")).collect();
    let mut test: Vec<Sample> = (0..counts.n_test_normal)
        .map(|i| normal(counts.n_train + i, "test_good"))
        .collect();
    let base = counts.n_train + counts.n_test_normal;
    for i in 0..counts.n_test_defective {
        let index = base + i;
        let clean = render_normal(spec, index as u64, size);
        let dseed = seed::derive(spec.seed ^ 0x00D5_FEC7_u64, index as u64);
        let kind = DefectKind::ALL[(dseed % 3) as usize];
        let (image, mask) = inject_defect(&clean, dseed, kind);
        test.push(Sample {
            image,
            object_id: spec.object_id,
            label: Label::Defective,
            mask,
            name: format!("test_defect_{index:04}"),
        });
    }
    Ok(ObjectData {
        object_id: spec.object_id,
        name,
        train,
        test,
    })
}

// ---------------------------------------------------------------------------
// MVTec-style layout

const IMAGE_EXTENSIONS: [&str; 5] = ["png", "jpg", "jpeg", "bmp", "tif"];

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    Ok(entries)
}

fn read_rgb(path: &Path, size: usize) -> Result<Array3<f32>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    Ok(Array3::from_shape_fn((3, size, size), |(c, y, x)| {
        img.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    }))
}

fn read_mask(path: &Path, size: usize) -> Result<Array2<u8>> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let img = image::imageops::resize(&img, size as u32, size as u32, FilterType::Nearest);
    Ok(Array2::from_shape_fn((size, size), |(y, x)| {
        u8::from(img.get_pixel(x as u32, y as u32)[0] >= 128)
    }))
}

fn find_mask(gt_dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS
        .iter()
        .map(|ext| gt_dir.join(format!("{stem}_mask.{ext}")))
        .find(|p| p.is_file())
}

/// Read `<object>/train/good/*`, `<object>/test/<defect>/*` and
/// `<object>/ground_truth/<defect>/*_mask.*` under `root`. Objects get ids by
/// sorted directory name.
pub fn load_mvtec_layout(root: &Path, size: usize) -> Result<Vec<ObjectData>> {
    let mut objects = Vec::new();
    let dirs: Vec<PathBuf> = sorted_entries(root)?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    if dirs.is_empty() {
        return Err(Error::Ingestion {
            path: root.to_path_buf(),
            message: "no object directories".into(),
        });
    }
    for (object_id, dir) in dirs.iter().enumerate() {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("object")
            .to_string();
        let train_dir = dir.join("train").join("good");
        let mut train = Vec::new();
        if train_dir.is_dir() {
            for path in sorted_entries(&train_dir)?
                .into_iter()
                .filter(|p| is_image(p))
            {
                train.push(Sample {
                    image: read_rgb(&path, size)?,
                    object_id,
                    label: Label::Normal,
                    mask: Array2::zeros((size, size)),
                    name: format!("train_{}", file_stem(&path)),
                });
            }
        }
        if train.is_empty() {
            return Err(Error::Ingestion {
                path: dir.clone(),
                message: "object has no training images under train/good".into(),
            });
        }
        let mut test = Vec::new();
        let test_dir = dir.join("test");
        if test_dir.is_dir() {
            for defect_dir in sorted_entries(&test_dir)?
                .into_iter()
                .filter(|p| p.is_dir())
            {
                let defect = defect_dir
                    .file_name()
                    .and_then(|n| n.to_str())
                    .unwrap_or("")
                    .to_string();
                for path in sorted_entries(&defect_dir)?
                    .into_iter()
                    .filter(|p| is_image(p))
                {
                    let stem = file_stem(&path);
                    let image = read_rgb(&path, size)?;
                    let sample_name = format!("test_{defect}_{stem}");
                    if defect == "good" {
                        test.push(Sample {
                            image,
                            object_id,
                            label: Label::Normal,
                            mask: Array2::zeros((size, size)),
                            name: sample_name,
                        });
                        continue;
                    }
                    let gt_dir = dir.join("ground_truth").join(&defect);
                    let mask_path = find_mask(&gt_dir, &stem).ok_or_else(|| Error::Ingestion {
                        path: path.clone(),
                        message: format!(
                            "missing ground-truth mask {}/{stem}_mask.*",
                            gt_dir.display()
                        ),
                    })?;
                    let mask = read_mask(&mask_path, size)?;
                    if mask.iter().all(|&m| m == 0) {
                        return Err(Error::Ingestion {
                            path: mask_path,
                            message: "defective test image has an all-zero mask".into(),
                        });
                    }
                    test.push(Sample {
                        image,
                        object_id,
                        label: Label::Defective,
                        mask,
                        name: sample_name,
                    });
                }
            }
        }
        objects.push(ObjectData {
            object_id,
            name,
            train,
            test,
        });
    }
    Ok(objects)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image")
        .to_string()
}

// ---------------------------------------------------------------------------
// Step plans

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    pub steps: Vec<Vec<usize>>,
    pub total_objects: usize,
}

impl StepPlan {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Objects introduced in steps `0..=step` (0-based).
    pub fn seen_through(&self, step: usize) -> Vec<usize> {
        let mut seen: Vec<usize> = self.steps[..=step].iter().flatten().copied().collect();
        seen.sort_unstable();
        seen
    }
}

fn parse_count(text: &str, whole: &str) -> Result<usize> {
    let n: usize = text
        .trim()
        .parse()
        .map_err(|_| Error::Protocol(format!("`{whole}`: `{text}` is not a positive integer")))?;
    if n == 0 {
        return Err(Error::Protocol(format!(
            "`{whole}`: counts must be positive"
        )));
    }
    Ok(n)
}

/// Step sizes of a protocol string: `-` separates stages, `a×s` (or `axs`)
/// repeats a stage of `a` objects `s` times. Covers `a-b`, `a×s` and `a-b×s`.
pub fn protocol_step_sizes(spec: &str) -> Result<Vec<usize>> {
    let normalized = spec.trim().replace(['×', 'X'], "x");
    if normalized.is_empty() {
        return Err(Error::Protocol("empty protocol string".into()));
    }
    let mut sizes = Vec::new();
    for stage in normalized.split('-') {
        match stage.split_once('x') {
            Some((a, s)) => {
                let (a, s) = (parse_count(a, spec)?, parse_count(s, spec)?);
                sizes.extend(std::iter::repeat_n(a, s));
            }
            None => sizes.push(parse_count(stage, spec)?),
        }
    }
    Ok(sizes)
}

pub fn parse_protocol(spec: &str, total_objects: usize) -> Result<StepPlan> {
    let sizes = protocol_step_sizes(spec)?;
    let covered: usize = sizes.iter().sum();
    if covered != total_objects {
        return Err(Error::Protocol(format!(
            "`{spec}` covers {covered} objects but {total_objects} were provided"
        )));
    }
    let mut next = 0;
    let steps = sizes
        .into_iter()
        .map(|n| {
            let ids: Vec<usize> = (next..next + n).collect();
            next += n;
            ids
        })
        .collect();
    Ok(StepPlan {
        steps,
        total_objects,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_examples() {
        let p = parse_protocol("14-1", 15).unwrap();
        assert_eq!(p.steps, vec![(0..14).collect::<Vec<_>>(), vec![14]]);
        let p = parse_protocol("3x5", 15).unwrap();
        assert_eq!(p.steps.len(), 5);
        assert!(p.steps.iter().all(|s| s.len() == 3));
        let p = parse_protocol("10-1×5", 15).unwrap();
        assert_eq!(
            p.steps,
            vec![
                (0..10).collect(),
                vec![10],
                vec![11],
                vec![12],
                vec![13],
                vec![14]
            ]
        );
        let p = parse_protocol("10-5", 15).unwrap();
        assert_eq!(p.steps[1], vec![10, 11, 12, 13, 14]);
    }

    #[test]
    fn protocol_errors() {
        let err = parse_protocol("3-1", 5).unwrap_err().to_string();
        assert!(err.contains('4') && err.contains('5'), "{err}");
        assert!(parse_protocol("3-0", 3).is_err());
        assert!(parse_protocol("a-b", 3).is_err());
        assert!(parse_protocol("", 0).is_err());
    }

    #[test]
    fn unknown_generator_kind() {
        assert!(matches!(
            "zigzag".parse::<GeneratorKind>(),
            Err(Error::Config { .. })
        ));
        assert_eq!(
            "noise_texture".parse::<GeneratorKind>().unwrap(),
            GeneratorKind::NoiseTexture
        );
    }

    #[test]
    fn stripes_train_split_is_normal_and_in_range() {
        let spec = ObjectSpec::synthetic(0, 3);
        assert_eq!(spec.kind, GeneratorKind::Stripes);
        let data = generate_dataset(
            &spec,
            SplitCounts {
                n_train: 10,
                n_test_normal: 1,
                n_test_defective: 1,
            },
            64,
        )
        .unwrap();
        assert_eq!(data.train.len(), 10);
        for s in &data.train {
            assert_eq!(s.label, Label::Normal);
            s.validate().unwrap();
        }
        assert!(data.test.iter().any(|s| s.label == Label::Normal));
        assert!(data.test.iter().any(|s| s.label == Label::Defective));
    }

    #[test]
    fn zero_counts_rejected() {
        let spec = ObjectSpec::synthetic(1, 3);
        let counts = SplitCounts {
            n_train: 0,
            ..Default::default()
        };
        assert!(generate_dataset(&spec, counts, 64).is_err());
    }

    #[test]
    fn blobs_defect_areas() {
        let spec = ObjectSpec::synthetic(2, 11);
        assert_eq!(spec.kind, GeneratorKind::Blobs);
        let data = generate_dataset(
            &spec,
            SplitCounts {
                n_train: 1,
                n_test_normal: 1,
                n_test_defective: 5,
            },
            64,
        )
        .unwrap();
        let defects: Vec<_> = data
            .test
            .iter()
            .filter(|s| s.label == Label::Defective)
            .collect();
        assert_eq!(defects.len(), 5);
        for s in defects {
            let area = s.mask_area();
            assert!(area >= 1 && area * 10 <= 64 * 64, "area {area}");
            s.validate().unwrap();
        }
    }
}
