//! Datasets: on-disk loading, synthetic generation, augmentation, batching.
//!
//! A face dataset is a directory per domain with `live/` and `spoof/`
//! subdirectories of PNG or JPEG files. Images are decoded to RGB, scaled to
//! `[0,1]` floats, and bilinearly resized to the configured square input
//! size. The synthetic generator produces the same structure in memory (and
//! can be written back to disk in the same layout), with a controlled
//! domain/liveness factorisation: domains differ by global color and
//! illumination casts, spoof samples carry a domain-independent moire
//! texture over a blurred base, so the liveness signal survives a domain
//! transfer while the domain signal does not.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Row-major RGB image with `f64` channels in `[0,1]`, stored
/// height x width x 3.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        debug_assert!(y < self.height && x < self.width && c < 3);
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        debug_assert!(y < self.height && x < self.width && c < 3);
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn from_rgb8(src: &image::RgbImage) -> Self {
        let (w, h) = src.dimensions();
        let mut out = Image::new(h as usize, w as usize);
        for (x, y, px) in src.enumerate_pixels() {
            for c in 0..3 {
                out.set(y as usize, x as usize, c, px.0[c] as f64 / 255.0);
            }
        }
        out
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let mut out = image::RgbImage::new(self.width as u32, self.height as u32);
        for y in 0..self.height {
            for x in 0..self.width {
                let px = [
                    quantize(self.get(y, x, 0)),
                    quantize(self.get(y, x, 1)),
                    quantize(self.get(y, x, 2)),
                ];
                out.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        out
    }

    /// Bilinear resample with half-pixel-centre sampling. Same-size calls
    /// return an exact copy.
    pub fn resize_bilinear(&self, out_h: usize, out_w: usize) -> Image {
        assert!(out_h > 0 && out_w > 0, "resize_bilinear: empty output");
        if out_h == self.height && out_w == self.width {
            return self.clone();
        }
        let mut out = Image::new(out_h, out_w);
        let sy = self.height as f64 / out_h as f64;
        let sx = self.width as f64 / out_w as f64;
        for y in 0..out_h {
            let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (self.height - 1) as f64);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f64;
            for x in 0..out_w {
                let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (self.width - 1) as f64);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f64;
                for c in 0..3 {
                    let top = self.get(y0, x0, c) * (1.0 - wx) + self.get(y0, x1, c) * wx;
                    let bot = self.get(y1, x0, c) * (1.0 - wx) + self.get(y1, x1, c) * wx;
                    out.set(y, x, c, top * (1.0 - wy) + bot * wy);
                }
            }
        }
        out
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Image {
        assert!(
            top + h <= self.height && left + w <= self.width,
            "crop out of bounds"
        );
        let mut out = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    out.set(y, x, c, self.get(top + y, left + x, c));
                }
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary liveness label. `Live` maps to class index 1, `Spoof` to 0.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub enum Liveness {
    Spoof,
    Live,
}

impl Liveness {
    pub fn as_index(self) -> usize {
        match self {
            Liveness::Spoof => 0,
            Liveness::Live => 1,
        }
    }

    pub fn dir_name(self) -> &'static str {
        match self {
            Liveness::Spoof => "spoof",
            Liveness::Live => "live",
        }
    }
}

/// One labelled face image with its domain of origin.
#[derive(Clone, Debug)]
pub struct FaceSample {
    pub image: Image,
    pub label: Liveness,
    /// Small integer id shared by every sample of the same domain.
    pub domain: u32,
    /// Provenance string (file path, or a synthetic URI).
    pub source: String,
}

/// All samples of a single domain.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub domain_name: String,
    pub domain_id: u32,
    pub samples: Vec<FaceSample>,
}

impl DomainDataset {
    /// Count of samples carrying the given label.
    pub fn count(&self, label: Liveness) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Mini-batch of owned images with aligned labels and domain ids.
#[derive(Clone, Debug)]
pub struct LabeledBatch {
    pub images: Vec<Image>,
    pub labels: Vec<Liveness>,
    pub domains: Vec<u32>,
}

impl LabeledBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Leading dimensions must agree; called by consumers before use.
    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() || self.images.len() != self.domains.len() {
            return Err(Error::shape(
                "LabeledBatch",
                format!("{} labels and domains", self.images.len()),
                format!(
                    "{} labels, {} domains",
                    self.labels.len(),
                    self.domains.len()
                ),
            ));
        }
        if self.images.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        Ok(())
    }
}

/// Load one domain from `root/<domain_name>/{live,spoof}/*.{png,jpg,jpeg}`.
///
/// Files are visited in sorted order, live before spoof, and every image is
/// bilinearly resized to `input_size` x `input_size`. A missing class
/// directory or an undecodable file is an error.
pub fn load_domain_dir(
    root: &Path,
    domain_name: &str,
    domain_id: u32,
    input_size: usize,
) -> Result<DomainDataset> {
    let dir = root.join(domain_name);
    if !dir.is_dir() {
        return Err(Error::Dataset {
            path: dir,
            reason: "domain directory not found".into(),
        });
    }
    let mut samples = Vec::new();
    for label in [Liveness::Live, Liveness::Spoof] {
        let class_dir = dir.join(label.dir_name());
        if !class_dir.is_dir() {
            return Err(Error::Dataset {
                path: class_dir,
                reason: format!("missing class directory `{}`", label.dir_name()),
            });
        }
        let mut files: Vec<PathBuf> = std::fs::read_dir(&class_dir)
            .map_err(|e| Error::io(&class_dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .and_then(|e| e.to_str())
                    .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
                    .unwrap_or(false)
            })
            .collect();
        files.sort();
        for path in files {
            let decoded = image::open(&path).map_err(|e| Error::Image {
                path: path.clone(),
                source: e,
            })?;
            let img = Image::from_rgb8(&decoded.to_rgb8());
            let img = img.resize_bilinear(input_size, input_size);
            samples.push(FaceSample {
                image: img,
                label,
                domain: domain_id,
                source: path.display().to_string(),
            });
        }
    }
    Ok(DomainDataset {
        domain_name: domain_name.to_string(),
        domain_id,
        samples,
    })
}

/// Load several sibling domain directories, assigning ids in list order.
pub fn load_domains(root: &Path, names: &[&str], input_size: usize) -> Result<Vec<DomainDataset>> {
    names
        .iter()
        .enumerate()
        .map(|(i, name)| load_domain_dir(root, name, i as u32, input_size))
        .collect()
}

/// Write datasets back to `out_root/<domain>/<live|spoof>/NNNN.png`.
pub fn write_domain_dirs(datasets: &[DomainDataset], out_root: &Path) -> Result<()> {
    for ds in datasets {
        for label in [Liveness::Live, Liveness::Spoof] {
            let dir = out_root.join(&ds.domain_name).join(label.dir_name());
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, sample) in ds.samples.iter().filter(|s| s.label == label).enumerate() {
                let path = dir.join(format!("{i:04}.png"));
                sample
                    .image
                    .to_rgb8()
                    .save(&path)
                    .map_err(|e| Error::Image { path, source: e })?;
            }
        }
    }
    Ok(())
}

/// Crop a random square covering a uniform fraction of the source area, then
/// resize to `out_size`. `scale_range = (1.0, 1.0)` with matching sizes is
/// the identity.
pub fn random_resized_crop(
    image: &Image,
    scale_range: (f64, f64),
    out_size: usize,
    rng: &mut impl Rng,
) -> Result<Image> {
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::Config(format!(
            "crop scale range must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})"
        )));
    }
    if image.height() != image.width() {
        return Err(Error::InvalidArgument(format!(
            "random_resized_crop expects a square image, got {}x{}",
            image.height(),
            image.width()
        )));
    }
    let s = image.height();
    let area = if lo < hi { rng.gen_range(lo..hi) } else { lo };
    let side = ((s as f64) * area.sqrt()).round().clamp(1.0, s as f64) as usize;
    let top = if side < s {
        rng.gen_range(0..=(s - side))
    } else {
        0
    };
    let left = if side < s {
        rng.gen_range(0..=(s - side))
    } else {
        0
    };
    Ok(image
        .crop(top, left, side, side)
        .resize_bilinear(out_size, out_size))
}

/// Mean squared response of a 3x3 Laplacian over all interior pixels and
/// channels. Spoof corruption concentrates energy here, which is what makes
/// the synthetic sets separable by a one-dimensional threshold.
pub fn high_frequency_energy(image: &Image) -> f64 {
    let (h, w) = (image.height(), image.width());
    assert!(h >= 3 && w >= 3, "high_frequency_energy: image too small");
    let mut acc = 0.0;
    let mut count = 0usize;
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..3 {
                let lap = 4.0 * image.get(y, x, c)
                    - image.get(y - 1, x, c)
                    - image.get(y + 1, x, c)
                    - image.get(y, x - 1, c)
                    - image.get(y, x + 1, c);
                acc += lap * lap;
                count += 1;
            }
        }
    }
    acc / count as f64
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

struct DomainStyle {
    gain: [f64; 3],
    offset: [f64; 3],
    /// Illumination gradient: strength and direction over the unit square.
    grad_strength: f64,
    grad_dir: (f64, f64),
}

/// Generate `num_domains` synthetic domains with `n_per_class` live and
/// `n_per_class` spoof samples each, at `image_size` x `image_size`.
///
/// Construction: every sample shares a smooth face-like base (oval plus eye
/// blobs plus low-frequency texture, jittered per sample). Domains apply a
/// fixed per-channel gain/offset and an illumination gradient to both
/// classes, before either class-specific change, so the domain cast is
/// label-independent. Spoof samples then blur the image and blend in a
/// high-frequency screen pattern; because the blend happens after the domain
/// cast and never leaves the displayable range, the corruption's statistics
/// are identical across domains. Deterministic: the same arguments always
/// produce the same pixels.
pub fn make_synthetic_domains(
    num_domains: usize,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<Vec<DomainDataset>> {
    if num_domains == 0 {
        return Err(Error::Config("num_domains must be at least 1".into()));
    }
    if n_per_class == 0 {
        return Err(Error::Config("n_per_class must be at least 1".into()));
    }
    if image_size < 8 {
        return Err(Error::Config(format!(
            "image_size must be at least 8, got {image_size}"
        )));
    }
    let mut out = Vec::with_capacity(num_domains);
    for d in 0..num_domains {
        let mut rng = domain_rng(seed, d as u64);
        let style = DomainStyle {
            gain: [
                rng.gen_range(0.72..1.25),
                rng.gen_range(0.72..1.25),
                rng.gen_range(0.72..1.25),
            ],
            offset: [
                rng.gen_range(-0.13..0.13),
                rng.gen_range(-0.13..0.13),
                rng.gen_range(-0.13..0.13),
            ],
            grad_strength: rng.gen_range(0.05..0.18),
            grad_dir: {
                let a: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (a.cos(), a.sin())
            },
        };
        let mut samples = Vec::with_capacity(2 * n_per_class);
        for i in 0..n_per_class {
            let img = synth_sample(image_size, &style, Liveness::Live, &mut rng);
            samples.push(FaceSample {
                image: img,
                label: Liveness::Live,
                domain: d as u32,
                source: format!("synthetic://domain{d}/live/{i:04}"),
            });
        }
        for i in 0..n_per_class {
            let img = synth_sample(image_size, &style, Liveness::Spoof, &mut rng);
            samples.push(FaceSample {
                image: img,
                label: Liveness::Spoof,
                domain: d as u32,
                source: format!("synthetic://domain{d}/spoof/{i:04}"),
            });
        }
        out.push(DomainDataset {
            domain_name: format!("domain{d}"),
            domain_id: d as u32,
            samples,
        });
    }
    Ok(out)
}

fn domain_rng(seed: u64, domain: u64) -> ChaCha8Rng {
    // Distinct, well-separated streams per (seed, domain).
    ChaCha8Rng::seed_from_u64(seed ^ (domain.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn synth_sample(size: usize, style: &DomainStyle, label: Liveness, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    // Jittered face geometry, shared by both classes.
    let cx = 0.5 + rng.gen_range(-0.05..0.05);
    let cy = 0.52 + rng.gen_range(-0.05..0.05);
    let face_w: f64 = 0.30 + rng.gen_range(-0.03..0.03);
    let face_h: f64 = 0.38 + rng.gen_range(-0.03..0.03);
    let eye_dx = 0.12 + rng.gen_range(-0.015..0.015);
    let eye_y = cy - 0.08 + rng.gen_range(-0.01..0.01);
    let skin = 0.55 + rng.gen_range(-0.06..0.06);
    let tex_amp = 0.05 + rng.gen_range(0.0..0.02);
    let tex_fx = rng.gen_range(1.5..3.0);
    let tex_fy = rng.gen_range(1.5..3.0);
    let tex_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);

    let mut img = Image::new(size, size);
    for y in 0..size {
        let v = (y as f64 + 0.5) / s;
        for x in 0..size {
            let u = (x as f64 + 0.5) / s;
            let du = (u - cx) / face_w;
            let dv = (v - cy) / face_h;
            let oval = (-0.5 * (du * du + dv * dv)).exp();
            let eye_l = eye_blob(u, v, cx - eye_dx, eye_y);
            let eye_r = eye_blob(u, v, cx + eye_dx, eye_y);
            let texture =
                tex_amp * (std::f64::consts::TAU * (tex_fx * u + tex_fy * v) + tex_phase).sin();
            let base = 0.18 + skin * oval - 0.22 * (eye_l + eye_r) + texture;
            for c in 0..3 {
                // Small fixed channel tilt so the base is not pure gray.
                let tilt = 1.0 + 0.06 * (c as f64 - 1.0);
                img.set(y, x, c, base * tilt);
            }
        }
    }

    // Domain cast applied identically to both classes, then clamped, so any
    // gamut clipping is shared by live and spoof alike.
    for y in 0..size {
        let v = (y as f64 + 0.5) / s - 0.5;
        for x in 0..size {
            let u = (x as f64 + 0.5) / s - 0.5;
            let grad = style.grad_strength * (u * style.grad_dir.0 + v * style.grad_dir.1);
            for c in 0..3 {
                let val = img.get(y, x, c) * style.gain[c] + style.offset[c] + grad;
                img.set(y, x, c, val);
            }
        }
    }
    img.clamp01();

    if label == Liveness::Spoof {
        // Recapture artifact: soften the image, then blend in a pixel-parity
        // screen pattern under a slowly varying envelope. Blending (rather
        // than adding) keeps every pixel inside [0, 1], so the pattern is
        // never clipped and its statistics are the same in every domain.
        img = box_blur3(&img);
        let fx = rng.gen_range(0.05..0.12);
        let fy = rng.gen_range(0.05..0.12);
        let px: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let py: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let weight = rng.gen_range(0.18..0.24);
        for y in 0..size {
            for x in 0..size {
                let parity = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                let envelope = 0.6
                    + 0.4
                        * (std::f64::consts::TAU * fx * x as f64 + px).sin()
                        * (std::f64::consts::TAU * fy * y as f64 + py).sin();
                let pattern = 0.5 + 0.5 * parity * envelope;
                for c in 0..3 {
                    let val = (1.0 - weight) * img.get(y, x, c) + weight * pattern;
                    img.set(y, x, c, val);
                }
            }
        }
    } else {
        // Sensor noise: small, zero-mean, shared across channels.
        for y in 0..size {
            for x in 0..size {
                let n = rng.gen_range(-0.012..0.012);
                for c in 0..3 {
                    img.set(y, x, c, img.get(y, x, c) + n);
                }
            }
        }
        img.clamp01();
    }
    img
}

fn eye_blob(u: f64, v: f64, ex: f64, ey: f64) -> f64 {
    let du = (u - ex) / 0.045;
    let dv = (v - ey) / 0.035;
    (-0.5 * (du * du + dv * dv)).exp()
}

fn box_blur3(img: &Image) -> Image {
    let (h, w) = (img.height(), img.width());
    let mut out = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = y as i64 + dy;
                        let xx = x as i64 + dx;
                        if yy >= 0 && yy < h as i64 && xx >= 0 && xx < w as i64 {
                            acc += img.get(yy as usize, xx as usize, c);
                            n += 1.0;
                        }
                    }
                }
                out.set(y, x, c, acc / n);
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// Build one epoch of batches over the union of `datasets`.
///
/// Balanced mode requires `batch_size` divisible by `2 * num_domains` and
/// fills every batch with an equal count from each (domain, label) cell;
/// trailing samples that cannot complete a batch are dropped that epoch.
/// Unbalanced mode shuffles the union and chunks it, keeping a truncated
/// final batch. Both modes are deterministic in `seed` and visit every
/// retained sample exactly once.
pub fn make_batches(
    datasets: &[DomainDataset],
    batch_size: usize,
    balanced: bool,
    seed: u64,
) -> Result<Vec<LabeledBatch>> {
    if datasets.is_empty() {
        return Err(Error::InvalidArgument("make_batches: no datasets".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    if balanced {
        let cells_per_batch = 2 * datasets.len();
        if !batch_size.is_multiple_of(cells_per_batch) {
            return Err(Error::Config(format!(
                "balanced batching needs batch_size divisible by 2 * num_domains = {cells_per_batch}, got {batch_size}"
            )));
        }
        let per_cell = batch_size / cells_per_batch;
        // One shuffled index list per (domain, label) cell.
        let mut cells: Vec<(usize, Vec<usize>)> = Vec::new();
        for (di, ds) in datasets.iter().enumerate() {
            for label in [Liveness::Live, Liveness::Spoof] {
                let mut idx: Vec<usize> = ds
                    .samples
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.label == label)
                    .map(|(i, _)| i)
                    .collect();
                shuffle(&mut idx, &mut rng);
                cells.push((di, idx));
            }
        }
        let n_batches = cells
            .iter()
            .map(|(_, idx)| idx.len() / per_cell)
            .min()
            .unwrap_or(0);
        if n_batches == 0 {
            return Err(Error::InvalidArgument(format!(
                "balanced batching needs at least {per_cell} samples per (domain, label) cell"
            )));
        }
        let mut batches = Vec::with_capacity(n_batches);
        for b in 0..n_batches {
            let mut batch = LabeledBatch {
                images: Vec::with_capacity(batch_size),
                labels: Vec::with_capacity(batch_size),
                domains: Vec::with_capacity(batch_size),
            };
            for (di, idx) in &cells {
                for k in 0..per_cell {
                    let sample = &datasets[*di].samples[idx[b * per_cell + k]];
                    batch.images.push(sample.image.clone());
                    batch.labels.push(sample.label);
                    batch.domains.push(sample.domain);
                }
            }
            batches.push(batch);
        }
        Ok(batches)
    } else {
        let mut all: Vec<(usize, usize)> = Vec::new();
        for (di, ds) in datasets.iter().enumerate() {
            for i in 0..ds.samples.len() {
                all.push((di, i));
            }
        }
        if all.is_empty() {
            return Err(Error::InvalidArgument(
                "make_batches: all datasets empty".into(),
            ));
        }
        shuffle(&mut all, &mut rng);
        let mut batches = Vec::new();
        for chunk in all.chunks(batch_size) {
            let mut batch = LabeledBatch {
                images: Vec::with_capacity(chunk.len()),
                labels: Vec::with_capacity(chunk.len()),
                domains: Vec::with_capacity(chunk.len()),
            };
            for &(di, i) in chunk {
                let sample = &datasets[di].samples[i];
                batch.images.push(sample.image.clone());
                batch.labels.push(sample.label);
                batch.domains.push(sample.domain);
            }
            batches.push(batch);
        }
        Ok(batches)
    }
}

/// Fisher-Yates with the caller's generator; kept local so batching and
/// augmentation share one shuffle implementation.
pub(crate) fn shuffle<T>(items: &mut [T], rng: &mut impl Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
