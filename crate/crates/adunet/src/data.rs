//! Paired-image datasets and the seeded synthetic rain+haze generator.
//!
//! Synthetic scenes are procedural: a smooth color field with depth-ordered
//! rectangles and discs, hazed by the atmospheric scattering model
//! `hazy = clean*t + A*(1-t)`, `t = exp(-beta*depth)`, then overlaid with
//! blurred oriented rain streaks. Every pair is fully determined by
//! (master seed, index); outputs are quantized to the 8-bit grid so a pair
//! is byte-identical to its PNG round trip.

use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthParams {
    pub height: usize,
    pub width: usize,
    /// Haze attenuation coefficient range.
    pub beta_range: (f32, f32),
    /// Atmospheric light range.
    pub airlight_range: (f32, f32),
    pub streak_count: (usize, usize),
    pub streak_length: (f32, f32),
    pub streak_width: (f32, f32),
    pub streak_intensity: (f32, f32),
    /// Streak angle from vertical, degrees.
    pub angle_range: (f32, f32),
    pub seed: u64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            height: 64,
            width: 64,
            beta_range: (0.3, 1.0),
            airlight_range: (0.7, 0.95),
            streak_count: (15, 45),
            streak_length: (8.0, 32.0),
            streak_width: (0.7, 1.5),
            streak_intensity: (0.15, 0.5),
            angle_range: (-20.0, 20.0),
            seed: 0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Data("synth canvas must be non-empty".into()));
        }
        if self.beta_range.0 < 0.0 || self.beta_range.1 < self.beta_range.0 {
            return Err(Error::Data(format!(
                "beta range {:?} invalid (need 0 <= lo <= hi)",
                self.beta_range
            )));
        }
        let (alo, ahi) = self.airlight_range;
        if !(0.0..=1.0).contains(&alo) || !(0.0..=1.0).contains(&ahi) || ahi < alo {
            return Err(Error::Data(format!(
                "airlight range {:?} outside [0,1]",
                self.airlight_range
            )));
        }
        let (glo, ghi) = self.angle_range;
        if glo <= -90.0 || ghi >= 90.0 || ghi < glo {
            return Err(Error::Data(format!(
                "angle range {:?} outside (-90, 90)",
                self.angle_range
            )));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, range: (f32, f32)) -> f32 {
    let u: f32 = rng.random_range(0.0..1.0);
    range.0 + u * (range.1 - range.0)
}

fn quantize8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn quantize16(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 65535.0).round() / 65535.0
}

/// Generate the (contaminated, clean, depth) triple for one index.
pub fn synth_pair(p: &SynthParams, index: u64) -> (Image, Image, Array2<f32>) {
    debug_assert!(p.validate().is_ok(), "invalid synth params");
    let (h, w) = (p.height, p.width);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    rng.set_stream(index.wrapping_add(1));

    // smooth background color field
    let mut clean = Array3::<f32>::zeros((3, h, w));
    for c in 0..3 {
        let c0 = uniform(&mut rng, (0.15, 0.85));
        let gx = uniform(&mut rng, (-0.35, 0.35));
        let gy = uniform(&mut rng, (-0.35, 0.35));
        for y in 0..h {
            for x in 0..w {
                let fx = x as f32 / w as f32 - 0.5;
                let fy = y as f32 / h as f32 - 0.5;
                clean[[c, y, x]] = (c0 + gx * fx + gy * fy).clamp(0.0, 1.0);
            }
        }
    }
    // background depth: far at the top, near at the bottom
    let mut depth = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        let d = 0.95 - 0.6 * y as f32 / (h.max(2) - 1) as f32;
        for x in 0..w {
            depth[[y, x]] = d;
        }
    }

    // depth-ordered shapes, far to near
    struct Shape {
        disc: bool,
        color: [f32; 3],
        depth: f32,
        cx: f32,
        cy: f32,
        sx: f32,
        sy: f32,
    }
    let n_shapes = rng.random_range(6..=12);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let disc = rng.random_range(0.0..1.0f32) < 0.5;
        let color = [
            uniform(&mut rng, (0.05, 0.95)),
            uniform(&mut rng, (0.05, 0.95)),
            uniform(&mut rng, (0.05, 0.95)),
        ];
        let d = uniform(&mut rng, (0.05, 0.9));
        let cx = uniform(&mut rng, (0.0, w as f32));
        let cy = uniform(&mut rng, (0.0, h as f32));
        let sx = uniform(&mut rng, (w as f32 / 16.0, w as f32 / 3.0));
        let sy = uniform(&mut rng, (h as f32 / 16.0, h as f32 / 3.0));
        shapes.push(Shape {
            disc,
            color,
            depth: d,
            cx,
            cy,
            sx,
            sy,
        });
    }
    shapes.sort_by(|a, b| b.depth.total_cmp(&a.depth));
    for s in &shapes {
        for y in 0..h {
            for x in 0..w {
                let inside = if s.disc {
                    let dx = (x as f32 - s.cx) / s.sx;
                    let dy = (y as f32 - s.cy) / s.sy;
                    dx * dx + dy * dy <= 1.0
                } else {
                    (x as f32 - s.cx).abs() <= s.sx && (y as f32 - s.cy).abs() <= s.sy
                };
                if inside {
                    for c in 0..3 {
                        clean[[c, y, x]] = s.color[c];
                    }
                    depth[[y, x]] = s.depth;
                }
            }
        }
    }

    // haze via atmospheric scattering
    let airlight = uniform(&mut rng, p.airlight_range);
    let beta = uniform(&mut rng, p.beta_range);
    let mut hazy = clean.clone();
    if beta > 0.0 {
        for y in 0..h {
            for x in 0..w {
                let t = (-beta * depth[[y, x]]).exp();
                for c in 0..3 {
                    hazy[[c, y, x]] = clean[[c, y, x]] * t + airlight * (1.0 - t);
                }
            }
        }
    }

    // additive blurred rain streaks, shared across channels
    let count = if p.streak_count.1 == 0 {
        0
    } else {
        rng.random_range(p.streak_count.0..=p.streak_count.1)
    };
    let mut rain = Array2::<f32>::zeros((h, w));
    for _ in 0..count {
        let cx = uniform(&mut rng, (0.0, w as f32));
        let cy = uniform(&mut rng, (0.0, h as f32));
        let angle = uniform(&mut rng, p.angle_range).to_radians();
        let len = uniform(&mut rng, p.streak_length);
        let width = uniform(&mut rng, p.streak_width);
        let intensity = uniform(&mut rng, p.streak_intensity);
        let (dx, dy) = (angle.sin(), angle.cos());
        let (x0, y0) = (cx - dx * len / 2.0, cy - dy * len / 2.0);
        let (x1, y1) = (cx + dx * len / 2.0, cy + dy * len / 2.0);
        let margin = width.ceil() as isize + 1;
        let ylo = (y0.min(y1).floor() as isize - margin).max(0) as usize;
        let yhi = (y0.max(y1).ceil() as isize + margin).max(0) as usize;
        let xlo = (x0.min(x1).floor() as isize - margin).max(0) as usize;
        let xhi = (x0.max(x1).ceil() as isize + margin).max(0) as usize;
        for y in ylo..=yhi.min(h - 1) {
            for x in xlo..=xhi.min(w - 1) {
                let d = dist_to_segment(x as f32, y as f32, x0, y0, x1, y1);
                let fall = 1.0 - d / width;
                if fall > 0.0 {
                    rain[[y, x]] += intensity * fall;
                }
            }
        }
    }
    let rain = gaussian_blur2d(&rain, 0.7);

    let mut contaminated = hazy;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                contaminated[[c, y, x]] =
                    (contaminated[[c, y, x]] + rain[[y, x]]).clamp(0.0, 1.0);
            }
        }
    }

    let clean = clean.mapv(quantize8);
    let contaminated = contaminated.mapv(quantize8);
    let depth = depth.mapv(quantize16);
    (
        Image::new(contaminated).expect("quantized contaminated image in range"),
        Image::new(clean).expect("quantized clean image in range"),
        depth,
    )
}

fn dist_to_segment(px: f32, py: f32, x0: f32, y0: f32, x1: f32, y1: f32) -> f32 {
    let (vx, vy) = (x1 - x0, y1 - y0);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((px - x0) * vx + (py - y0) * vy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (x0 + t * vx, y0 + t * vy);
    ((px - cx) * (px - cx) + (py - cy) * (py - cy)).sqrt()
}

fn gaussian_blur2d(x: &Array2<f32>, sigma: f32) -> Array2<f32> {
    let r = (2.0 * sigma).ceil() as isize;
    let mut k = Vec::with_capacity((2 * r + 1) as usize);
    for i in -r..=r {
        k.push((-((i * i) as f32) / (2.0 * sigma * sigma)).exp());
    }
    let sum: f32 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= sum;
    }
    let (h, w) = (x.shape()[0], x.shape()[1]);
    let mut tmp = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sx = xx as isize + i as isize - r;
                if sx >= 0 && (sx as usize) < w {
                    acc += kv * x[[y, sx as usize]];
                }
            }
            tmp[[y, xx]] = acc;
        }
    }
    let mut out = Array2::<f32>::zeros((h, w));
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                let sy = y as isize + i as isize - r;
                if sy >= 0 && (sy as usize) < h {
                    acc += kv * tmp[[sy as usize, xx]];
                }
            }
            out[[y, xx]] = acc;
        }
    }
    out
}

/// One (input, ground truth) pair, keyed by filename stem.
#[derive(Debug, Clone)]
pub struct PairedItem {
    pub stem: String,
    pub input: Image,
    pub gt: Image,
}

/// In-memory paired dataset in a stable stem order.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pub items: Vec<PairedItem>,
    /// (height, width) every image was resized to.
    pub target: (usize, usize),
}

impl PairedDataset {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Generate an in-memory synthetic dataset of `n` pairs.
pub fn synth_dataset(p: &SynthParams, n: usize) -> PairedDataset {
    let items = (0..n)
        .map(|i| {
            let (input, gt, _) = synth_pair(p, i as u64);
            PairedItem {
                stem: format!("{i:05}"),
                input,
                gt,
            }
        })
        .collect();
    PairedDataset {
        items,
        target: (p.height, p.width),
    }
}

/// Write a synthetic dataset in the on-disk layout:
/// `<root>/input/*.png`, `<root>/gt/*.png`, `<root>/depth/*.png` (16-bit).
pub fn write_synth_dataset(p: &SynthParams, n: usize, root: &Path) -> Result<()> {
    p.validate()?;
    for sub in ["input", "gt", "depth"] {
        std::fs::create_dir_all(root.join(sub)).map_err(|e| Error::io(root.join(sub), e))?;
    }
    for i in 0..n {
        let (contaminated, clean, depth) = synth_pair(p, i as u64);
        let stem = format!("{i:05}.png");
        contaminated.save_png(root.join("input").join(&stem))?;
        clean.save_png(root.join("gt").join(&stem))?;
        let (h, w) = (depth.shape()[0], depth.shape()[1]);
        let mut buf = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                buf.put_pixel(
                    x as u32,
                    y as u32,
                    image::Luma([(depth[[y, x]] * 65535.0).round() as u16]),
                );
            }
        }
        let path = root.join("depth").join(&stem);
        buf.save(&path)
            .map_err(|e| Error::Data(format!("{}: {}", path.display(), e)))?;
    }
    Ok(())
}

fn png_stems(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) == Some("png") {
            let stem = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Data(format!("unreadable file name {}", path.display())))?
                .to_string();
            out.push((stem, path));
        }
    }
    out.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(out)
}

/// Load a paired dataset from `<root>/input` and `<root>/gt`, resizing
/// bilinearly to `target` (height, width; both divisible by 16).
pub fn load_paired(root: &Path, target: (usize, usize)) -> Result<PairedDataset> {
    if target.0 % 16 != 0 || target.1 % 16 != 0 {
        return Err(Error::Data(format!(
            "resize target {}x{} not divisible by 16",
            target.0, target.1
        )));
    }
    let inputs = png_stems(&root.join("input"))?;
    let gts = png_stems(&root.join("gt"))?;
    let missing_gt: Vec<&str> = inputs
        .iter()
        .filter(|(s, _)| !gts.iter().any(|(g, _)| g == s))
        .map(|(s, _)| s.as_str())
        .collect();
    if !missing_gt.is_empty() {
        return Err(Error::Data(format!(
            "inputs without ground truth: {}",
            missing_gt.join(", ")
        )));
    }
    let missing_input: Vec<&str> = gts
        .iter()
        .filter(|(s, _)| !inputs.iter().any(|(i, _)| i == s))
        .map(|(s, _)| s.as_str())
        .collect();
    if !missing_input.is_empty() {
        return Err(Error::Data(format!(
            "ground truths without inputs: {}",
            missing_input.join(", ")
        )));
    }
    let mut items = Vec::with_capacity(inputs.len());
    for (stem, input_path) in inputs {
        let gt_path = root.join("gt").join(format!("{stem}.png"));
        let input = Image::load_png(&input_path)?.resize(target.0, target.1);
        let gt = Image::load_png(&gt_path)?.resize(target.0, target.1);
        items.push(PairedItem { stem, input, gt });
    }
    Ok(PairedDataset { items, target })
}

/// Deterministic shuffled split into (train, val) with `fraction` of items
/// in train.
pub fn split(
    ds: &PairedDataset,
    fraction: f64,
    seed: u64,
) -> Result<(PairedDataset, PairedDataset)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Data(format!(
            "split fraction {fraction} outside (0, 1)"
        )));
    }
    let n = ds.len();
    if n < 2 {
        return Err(Error::Data("cannot split fewer than 2 items".into()));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    let k = ((n as f64 * fraction).round() as usize).clamp(1, n - 1);
    let take = |ids: &[usize]| PairedDataset {
        items: ids.iter().map(|&i| ds.items[i].clone()).collect(),
        target: ds.target,
    };
    Ok((take(&idx[..k]), take(&idx[k..])))
}
