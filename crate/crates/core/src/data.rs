//! Synthetic RGB-D scenes, on-disk datasets, augmentation and batching.
//!
//! Scenes are layered rectangles over a receding ground plane. Luminance is
//! tied monotonically to depth (near is bright), with a per-object tint and a
//! little noise, so depth is learnable from color alone. About 2% of pixels
//! carry depth 0 (invalid) to exercise masking.
//!
//! On-disk layout: `<root>/rgb/*.png` (8-bit RGB), `<root>/depth/*.png`
//! (16-bit grayscale, meters * 256), `<root>/splits/{train,test}.txt` with
//! one `<rgb_path> <depth_path>` pair per line, `#` comments allowed.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FscnError, Result};
use crate::loss::{valid_mask, ValidMask};
use crate::tensor::{Shape, Tensor};

/// Depth quantization of the 16-bit on-disk format: value = meters * 256.
pub const DEPTH_PNG_SCALE: f64 = 256.0;

/// One RGB image with its metric depth map. Depth 0 marks invalid pixels.
#[derive(Clone, Debug)]
pub struct DepthSample {
    /// (1, 3, h, w), values in [0, 1].
    pub rgb: Tensor<f32>,
    /// (1, 1, h, w), meters.
    pub depth: Tensor<f32>,
    pub id: String,
}

impl DepthSample {
    pub fn dims(&self) -> (usize, usize) {
        let s = self.rgb.shape();
        (s.h, s.w)
    }
}

/// Stable per-index stream derivation so parallel loading or resumption
/// cannot change the draws.
pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 over the mixed inputs.
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9e3779b97f4a7c15))
        .wrapping_add(index.wrapping_mul(0xbf58476d1ce4e5b9));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

struct Rect {
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    depth: f64,
    tint: [f64; 3],
}

/// Procedural scenes, deterministic per (seed, index).
pub fn generate_synthetic(
    seed: u64,
    n: usize,
    h: usize,
    w: usize,
    max_depth_m: f64,
) -> Vec<DepthSample> {
    (0..n)
        .map(|i| synth_scene(seed, i as u64, h, w, max_depth_m))
        .collect()
}

fn synth_scene(seed: u64, index: u64, h: usize, w: usize, max_depth_m: f64) -> DepthSample {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5ce4e, index));
    let far = max_depth_m * rng.gen_range(0.80..0.95);
    let near = max_depth_m * rng.gen_range(0.40..0.60);
    let bg_tint = [
        rng.gen_range(0.70..1.0),
        rng.gen_range(0.70..1.0),
        rng.gen_range(0.70..1.0),
    ];

    let n_rects = rng.gen_range(4..=9);
    let mut rects: Vec<Rect> = (0..n_rects)
        .map(|_| {
            let rw = rng.gen_range(w / 10..=w / 2).max(2);
            let rh = rng.gen_range(h / 10..=h / 2).max(2);
            let x0 = rng.gen_range(0..w.saturating_sub(rw).max(1));
            let y0 = rng.gen_range(0..h.saturating_sub(rh).max(1));
            Rect {
                x0,
                y0,
                x1: (x0 + rw).min(w),
                y1: (y0 + rh).min(h),
                depth: max_depth_m * rng.gen_range(0.08..0.75),
                tint: [
                    rng.gen_range(0.70..1.0),
                    rng.gen_range(0.70..1.0),
                    rng.gen_range(0.70..1.0),
                ],
            }
        })
        .collect();
    // Paint far-to-near so closer objects overwrite.
    rects.sort_by(|a, b| b.depth.partial_cmp(&a.depth).expect("finite depths"));

    let mut depth = vec![0f32; h * w];
    let mut tint = vec![[0f64; 3]; h * w];
    for y in 0..h {
        let bg = far + (near - far) * y as f64 / (h - 1).max(1) as f64;
        for x in 0..w {
            depth[y * w + x] = bg as f32;
            tint[y * w + x] = bg_tint;
        }
    }
    for r in &rects {
        for y in r.y0..r.y1 {
            for x in r.x0..r.x1 {
                depth[y * w + x] = r.depth as f32;
                tint[y * w + x] = r.tint;
            }
        }
    }

    let mut rgb = vec![0f32; 3 * h * w];
    for i in 0..h * w {
        let lum = 0.12 + 0.85 * (1.0 - depth[i] as f64 / max_depth_m);
        let noise = rng.gen_range(-0.02..0.02);
        for c in 0..3 {
            rgb[c * h * w + i] = ((tint[i][c] * lum + noise).clamp(0.0, 1.0)) as f32;
        }
    }
    // ~2% invalid depth pixels; color untouched.
    for d in depth.iter_mut() {
        if rng.gen::<f64>() < 0.02 {
            *d = 0.0;
        }
    }

    DepthSample {
        rgb: Tensor::from_vec(Shape::new(1, 3, h, w), rgb).expect("rgb layout"),
        depth: Tensor::from_vec(Shape::new(1, 1, h, w), depth).expect("depth layout"),
        id: format!("synth-{seed}-{index:05}"),
    }
}

/// Degenerate scene: constant depth everywhere, hence constant shading.
pub fn constant_scene(depth_m: f64, h: usize, w: usize, max_depth_m: f64) -> DepthSample {
    let lum = (0.12 + 0.85 * (1.0 - depth_m / max_depth_m)).clamp(0.0, 1.0) as f32;
    DepthSample {
        rgb: Tensor::filled(Shape::new(1, 3, h, w), lum),
        depth: Tensor::filled(Shape::new(1, 1, h, w), depth_m as f32),
        id: "synth-constant".to_string(),
    }
}

// ---- on-disk IO -----------------------------------------------------------

/// Load an RGB/depth pair: 8-bit 3-channel png scaled to [0, 1], 16-bit
/// single-channel png divided by 256 into meters (raw 0 stays invalid 0).
pub fn load_sample(rgb_path: &Path, depth_path: &Path) -> Result<DepthSample> {
    let rgb_img = image::open(rgb_path)
        .map_err(|e| FscnError::Data(format!("{}: {e}", rgb_path.display())))?;
    let rgb_img = match rgb_img {
        DynamicImage::ImageRgb8(img) => img,
        other => {
            return Err(FscnError::Data(format!(
                "{}: expected 8-bit RGB, got {:?}",
                rgb_path.display(),
                other.color()
            )))
        }
    };
    let depth_img = image::open(depth_path)
        .map_err(|e| FscnError::Data(format!("{}: {e}", depth_path.display())))?;
    let depth_img = match depth_img {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(FscnError::Data(format!(
                "{}: expected 16-bit grayscale, got {:?}",
                depth_path.display(),
                other.color()
            )))
        }
    };
    let (w, h) = (rgb_img.width() as usize, rgb_img.height() as usize);
    if (depth_img.width() as usize, depth_img.height() as usize) != (w, h) {
        return Err(FscnError::Data(format!(
            "dimension mismatch: {} is {}x{} but {} is {}x{}",
            rgb_path.display(),
            w,
            h,
            depth_path.display(),
            depth_img.width(),
            depth_img.height()
        )));
    }
    let mut rgb = vec![0f32; 3 * h * w];
    for (x, y, px) in rgb_img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            rgb[c * h * w + i] = px.0[c] as f32 / 255.0;
        }
    }
    let mut depth = vec![0f32; h * w];
    for (x, y, px) in depth_img.enumerate_pixels() {
        depth[y as usize * w + x as usize] = (px.0[0] as f64 / DEPTH_PNG_SCALE) as f32;
    }
    let id = rgb_path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "sample".to_string());
    Ok(DepthSample {
        rgb: Tensor::from_vec(Shape::new(1, 3, h, w), rgb)?,
        depth: Tensor::from_vec(Shape::new(1, 1, h, w), depth)?,
        id,
    })
}

/// Write one sample as the pair of pngs used by [`load_sample`].
pub fn save_sample(sample: &DepthSample, rgb_path: &Path, depth_path: &Path) -> Result<()> {
    let (h, w) = sample.dims();
    let plane = h * w;
    let rgb_data = sample.rgb.data();
    let mut rgb_img = ImageBuffer::<Rgb<u8>, Vec<u8>>::new(w as u32, h as u32);
    for (x, y, px) in rgb_img.enumerate_pixels_mut() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            px.0[c] = (rgb_data[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    rgb_img
        .save(rgb_path)
        .map_err(|e| FscnError::Data(format!("{}: {e}", rgb_path.display())))?;

    let mut depth_img = ImageBuffer::<Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
    for (x, y, px) in depth_img.enumerate_pixels_mut() {
        let v = sample.depth.data()[y as usize * w + x as usize] as f64 * DEPTH_PNG_SCALE;
        px.0[0] = v.round().clamp(0.0, u16::MAX as f64) as u16;
    }
    depth_img
        .save(depth_path)
        .map_err(|e| FscnError::Data(format!("{}: {e}", depth_path.display())))?;
    Ok(())
}

/// Write samples into the standard dataset layout under `root`.
pub fn materialize_dataset(
    root: &Path,
    train: &[DepthSample],
    test: &[DepthSample],
) -> Result<()> {
    for sub in ["rgb", "depth", "splits"] {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| FscnError::io(root.join(sub), e))?;
    }
    let write_split = |name: &str, samples: &[DepthSample]| -> Result<()> {
        let mut lines = String::new();
        for s in samples {
            let rgb_rel = format!("rgb/{}.png", s.id);
            let depth_rel = format!("depth/{}.png", s.id);
            save_sample(s, &root.join(&rgb_rel), &root.join(&depth_rel))?;
            lines.push_str(&format!("{rgb_rel} {depth_rel}\n"));
        }
        let path = root.join("splits").join(format!("{name}.txt"));
        std::fs::write(&path, lines).map_err(|e| FscnError::io(path.clone(), e))
    };
    write_split("train", train)?;
    write_split("test", test)
}

/// Ordered (rgb, depth) path pairs from a split file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitList {
    pub pairs: Vec<(PathBuf, PathBuf)>,
}

/// Parse a split file: one `<rgb> <depth>` pair per line, blank lines and
/// `#` comments skipped. Malformed lines name their line number.
pub fn parse_split(path: &Path) -> Result<SplitList> {
    let text = std::fs::read_to_string(path).map_err(|e| FscnError::io(path, e))?;
    let mut pairs = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let tokens: Vec<&str> = line.split_whitespace().collect();
        if tokens.len() != 2 {
            return Err(FscnError::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                message: format!("expected '<rgb_path> <depth_path>', got {} token(s)", tokens.len()),
            });
        }
        pairs.push((PathBuf::from(tokens[0]), PathBuf::from(tokens[1])));
    }
    Ok(SplitList { pairs })
}

/// Load every sample of a split, resolving paths against `root` and
/// verifying existence up front.
pub fn load_dataset(root: &Path, split: &str) -> Result<Vec<DepthSample>> {
    let split_path = root.join("splits").join(format!("{split}.txt"));
    let list = parse_split(&split_path)?;
    for (rgb, depth) in &list.pairs {
        for rel in [rgb, depth] {
            let p = root.join(rel);
            if !p.exists() {
                return Err(FscnError::Data(format!(
                    "missing file referenced by {}: {}",
                    split_path.display(),
                    p.display()
                )));
            }
        }
    }
    list.pairs
        .iter()
        .map(|(rgb, depth)| load_sample(&root.join(rgb), &root.join(depth)))
        .collect()
}

// ---- augmentation ----------------------------------------------------------

fn default_p() -> f64 {
    0.5
}
fn default_rot_range() -> (f64, f64) {
    (-1.0, 1.0)
}
fn default_crop_h() -> usize {
    64
}
fn default_crop_w() -> usize {
    128
}

/// Augmentation pipeline settings. Order of application is fixed:
/// rotate, flip, contrast, color, crop.
#[derive(Clone, Copy, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    #[serde(default = "default_p")]
    pub flip_p: f64,
    #[serde(default = "default_p")]
    pub contrast_p: f64,
    #[serde(default = "default_p")]
    pub color_p: f64,
    /// Rotation range in degrees, inclusive.
    #[serde(default = "default_rot_range")]
    pub rot_range_deg: (f64, f64),
    #[serde(default = "default_crop_h")]
    pub crop_h: usize,
    #[serde(default = "default_crop_w")]
    pub crop_w: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: default_p(),
            contrast_p: default_p(),
            color_p: default_p(),
            rot_range_deg: default_rot_range(),
            crop_h: default_crop_h(),
            crop_w: default_crop_w(),
        }
    }
}

impl AugmentConfig {
    /// Everything off: the pipeline becomes the bit-exact identity for
    /// images already at (crop_h, crop_w).
    pub fn disabled(crop_h: usize, crop_w: usize) -> Self {
        AugmentConfig {
            flip_p: 0.0,
            contrast_p: 0.0,
            color_p: 0.0,
            rot_range_deg: (0.0, 0.0),
            crop_h,
            crop_w,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_p", self.flip_p),
            ("contrast_p", self.contrast_p),
            ("color_p", self.color_p),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(FscnError::Config(format!(
                    "{name} must be in [0, 1], got {p}"
                )));
            }
        }
        if self.rot_range_deg.0 > self.rot_range_deg.1 {
            return Err(FscnError::Config(format!(
                "rot_range_deg lo {} exceeds hi {}",
                self.rot_range_deg.0, self.rot_range_deg.1
            )));
        }
        if self.crop_h == 0 || self.crop_w == 0 {
            return Err(FscnError::Config("crop dims must be positive".into()));
        }
        Ok(())
    }
}

/// Apply the augmentation pipeline. Geometric steps hit rgb and depth with
/// identical indices; photometric steps touch rgb only. Depth is rotated
/// nearest-neighbor so invalid zeros stay exact.
pub fn augment(
    sample: &DepthSample,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<DepthSample> {
    cfg.validate()?;
    let (h, w) = sample.dims();
    if cfg.crop_h > h || cfg.crop_w > w {
        return Err(FscnError::InvalidArgument(format!(
            "crop {}x{} larger than image {}x{}",
            cfg.crop_h, cfg.crop_w, h, w
        )));
    }

    // One fixed draw sequence per sample keeps streams aligned regardless of
    // which effects fire.
    let (lo, hi) = cfg.rot_range_deg;
    let theta_deg = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
    let do_flip = rng.gen::<f64>() < cfg.flip_p;
    let do_contrast = rng.gen::<f64>() < cfg.contrast_p;
    let contrast_c = rng.gen_range(0.9..1.1);
    let do_color = rng.gen::<f64>() < cfg.color_p;
    let gains = [
        rng.gen_range(0.9..1.1),
        rng.gen_range(0.9..1.1),
        rng.gen_range(0.9..1.1),
    ];
    let crop_y = rng.gen_range(0..=h - cfg.crop_h);
    let crop_x = rng.gen_range(0..=w - cfg.crop_w);

    let mut rgb = sample.rgb.data().to_vec();
    let mut depth = sample.depth.data().to_vec();

    if theta_deg != 0.0 {
        let (r, d) = rotate(&rgb, &depth, h, w, theta_deg);
        rgb = r;
        depth = d;
    }
    if do_flip {
        flip_horizontal(&mut rgb, h, w, 3);
        flip_horizontal(&mut depth, h, w, 1);
    }
    if do_contrast {
        let mean = rgb.iter().map(|&v| v as f64).sum::<f64>() / rgb.len() as f64;
        for v in rgb.iter_mut() {
            *v = ((mean + (*v as f64 - mean) * contrast_c).clamp(0.0, 1.0)) as f32;
        }
    }
    if do_color {
        let plane = h * w;
        for c in 0..3 {
            for v in rgb[c * plane..(c + 1) * plane].iter_mut() {
                *v = ((*v as f64 * gains[c]).clamp(0.0, 1.0)) as f32;
            }
        }
    }

    let rgb = crop(&rgb, h, w, 3, crop_y, crop_x, cfg.crop_h, cfg.crop_w);
    let depth = crop(&depth, h, w, 1, crop_y, crop_x, cfg.crop_h, cfg.crop_w);
    Ok(DepthSample {
        rgb: Tensor::from_vec(Shape::new(1, 3, cfg.crop_h, cfg.crop_w), rgb)?,
        depth: Tensor::from_vec(Shape::new(1, 1, cfg.crop_h, cfg.crop_w), depth)?,
        id: sample.id.clone(),
    })
}

fn rotate(rgb: &[f32], depth: &[f32], h: usize, w: usize, theta_deg: f64) -> (Vec<f32>, Vec<f32>) {
    let theta = theta_deg.to_radians();
    let (sin, cos) = theta.sin_cos();
    let cy = (h - 1) as f64 / 2.0;
    let cx = (w - 1) as f64 / 2.0;
    let plane = h * w;
    let mut out_rgb = vec![0f32; 3 * plane];
    let mut out_depth = vec![0f32; plane];
    for y in 0..h {
        for x in 0..w {
            // Inverse map: rotate the destination back by -theta.
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let di = y * w + x;
            if sx < 0.0 || sy < 0.0 || sx > (w - 1) as f64 || sy > (h - 1) as f64 {
                continue; // rgb 0, depth 0 (invalid)
            }
            // Bilinear for color.
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let wx = sx - x0 as f64;
            let wy = sy - y0 as f64;
            for c in 0..3 {
                let p = &rgb[c * plane..(c + 1) * plane];
                let top = p[y0 * w + x0] as f64 * (1.0 - wx) + p[y0 * w + x1] as f64 * wx;
                let bot = p[y1 * w + x0] as f64 * (1.0 - wx) + p[y1 * w + x1] as f64 * wx;
                out_rgb[c * plane + di] = (top * (1.0 - wy) + bot * wy) as f32;
            }
            // Nearest for depth.
            let nx = sx.round() as usize;
            let ny = sy.round() as usize;
            out_depth[di] = depth[ny.min(h - 1) * w + nx.min(w - 1)];
        }
    }
    (out_rgb, out_depth)
}

fn flip_horizontal(data: &mut [f32], h: usize, w: usize, channels: usize) {
    let plane = h * w;
    for c in 0..channels {
        for y in 0..h {
            let row = &mut data[c * plane + y * w..c * plane + (y + 1) * w];
            row.reverse();
        }
    }
}

fn crop(
    data: &[f32],
    h: usize,
    w: usize,
    channels: usize,
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
) -> Vec<f32> {
    let plane = h * w;
    let mut out = Vec::with_capacity(channels * ch * cw);
    for c in 0..channels {
        for y in y0..y0 + ch {
            let start = c * plane + y * w + x0;
            out.extend_from_slice(&data[start..start + cw]);
        }
    }
    out
}

// ---- batching ---------------------------------------------------------------

/// Stacked samples ready for a training or evaluation step.
#[derive(Clone, Debug)]
pub struct Batch {
    /// (n, 3, h, w)
    pub rgb: Tensor<f32>,
    /// (n, 1, h, w)
    pub depth: Tensor<f32>,
    pub mask: ValidMask,
}

/// Stack samples in argument order and compute the validity mask at `cap_m`.
pub fn make_batch(samples: &[&DepthSample], cap_m: f64) -> Result<Batch> {
    let first = samples
        .first()
        .ok_or_else(|| FscnError::InvalidArgument("make_batch: empty sample list".into()))?;
    let (h, w) = first.dims();
    let n = samples.len();
    let mut rgb = Vec::with_capacity(n * 3 * h * w);
    let mut depth = Vec::with_capacity(n * h * w);
    for s in samples {
        if s.dims() != (h, w) {
            return Err(FscnError::shape(
                "make_batch",
                format!("{h}x{w}"),
                format!("{}x{} ({})", s.dims().0, s.dims().1, s.id),
            ));
        }
        rgb.extend_from_slice(s.rgb.data());
        depth.extend_from_slice(s.depth.data());
    }
    let depth = Tensor::from_vec(Shape::new(n, 1, h, w), depth)?;
    let mask = valid_mask(&depth, cap_m)?;
    Ok(Batch {
        rgb: Tensor::from_vec(Shape::new(n, 3, h, w), rgb)?,
        depth,
        mask,
    })
}

/// Mask flags of a batch as a plain vector (used by tests).
pub fn mask_flags(mask: &ValidMask) -> Arc<Vec<bool>> {
    mask.flags().clone()
}
