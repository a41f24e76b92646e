//! Procedural crack-like images with masks and boxes, joint geometric
//! augmentation, perceptual hashing, near-duplicate removal, and dataset
//! splitting.
//!
//! Everything here is a pure function of its inputs and a seed, so datasets
//! and experiment inputs are bit-reproducible.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::fmath;
use crate::losses::BBox;
use crate::rng::{seeded, Rng, SeededRng};
use crate::tensor::Tensor;

/// One generated image with its pixel mask and tight boxes.
///
/// Invariants (checked by [`check_consistency`]): every mask-positive pixel
/// lies inside exactly one listed box, and every box contains at least one
/// mask-positive pixel. Box corners are pixel coordinates with exclusive
/// upper edges, so a single pixel (x, y) is the box (x, y, x+1, y+1).
#[derive(Debug, Clone, PartialEq)]
pub struct CrackSample {
    /// Grayscale image, shape [H, W], values in [0, 1].
    pub image: Tensor,
    /// Binary mask, row-major, length H·W.
    pub mask: Vec<u8>,
    /// Disjoint boxes covering the mask.
    pub boxes: Vec<BBox>,
    /// Seed this sample was generated from (0 for derived samples).
    pub seed: u64,
}

impl CrackSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }

    /// Image as a [1, 1, H, W] tensor for the conv stack.
    pub fn image_nchw(&self) -> Tensor {
        let (h, w) = (self.height(), self.width());
        self.image
            .reshaped(&[1, 1, h, w])
            .expect("same element count")
    }

    /// True when the sample contains any crack pixels.
    pub fn has_crack(&self) -> bool {
        !self.boxes.is_empty()
    }
}

/// Generator difficulty knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenConfig {
    /// Square image side, ≥ 16.
    pub size: usize,
    /// Crack count range (inclusive); 0 allows background-only images.
    pub min_cracks: usize,
    pub max_cracks: usize,
    /// Random-walk steps per crack polyline.
    pub walk_steps: usize,
    /// Amplitude of the low-frequency background texture.
    pub texture: f64,
    /// How much darker crack pixels are than their background.
    pub crack_depth: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            size: 64,
            min_cracks: 1,
            max_cracks: 2,
            walk_steps: 26,
            texture: 0.25,
            crack_depth: 0.75,
        }
    }
}

impl GenConfig {
    fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::Invalid(alloc::format!(
                "image size must be at least 16, got {}",
                self.size
            )));
        }
        if self.min_cracks > self.max_cracks {
            return Err(Error::Invalid(alloc::format!(
                "crack count range is empty: {}..={}",
                self.min_cracks,
                self.max_cracks
            )));
        }
        if !(0.0..=1.0).contains(&self.texture) || !(0.0..=1.0).contains(&self.crack_depth) {
            return Err(Error::Invalid(alloc::format!(
                "texture and crack_depth must lie in [0,1]"
            )));
        }
        Ok(())
    }
}

/// Augmentation recipe: joint geometric transforms plus image-only noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentConfig {
    /// Rotation range in degrees.
    pub rotation_deg: (f64, f64),
    /// Horizontal / vertical flip probabilities.
    pub hflip_p: f64,
    pub vflip_p: f64,
    /// Uniform scale range.
    pub scale: (f64, f64),
    /// Standard deviation of zero-mean Gaussian pixel noise (image only).
    pub noise_sigma: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            rotation_deg: (-30.0, 30.0),
            hflip_p: 0.5,
            vflip_p: 0.5,
            scale: (0.8, 1.2),
            noise_sigma: 0.1,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.hflip_p) || !prob(self.vflip_p) {
            return Err(Error::Invalid(alloc::format!(
                "flip probabilities must lie in [0,1]"
            )));
        }
        if !(self.scale.0 > 0.0 && self.scale.1 >= self.scale.0) {
            return Err(Error::Invalid(alloc::format!(
                "scale range must be positive and ordered"
            )));
        }
        if !(self.rotation_deg.0 <= self.rotation_deg.1) || self.noise_sigma < 0.0 {
            return Err(Error::Invalid(alloc::format!(
                "rotation range must be ordered and noise_sigma non-negative"
            )));
        }
        Ok(())
    }
}

/// Deterministically generates one sample from a seed.
pub fn generate(seed: u64, cfg: &GenConfig) -> Result<CrackSample> {
    cfg.validate()?;
    let mut rng = seeded(seed);
    let n = cfg.size;
    let mut image = background(&mut rng, n, cfg.texture);
    let mut mask = vec![0u8; n * n];

    let cracks = rng.gen_range(cfg.min_cracks..=cfg.max_cracks);
    for _ in 0..cracks {
        walk_crack(&mut rng, cfg, &mut image, &mut mask);
    }

    let boxes = boxes_from_mask(&mask, n, n);
    Ok(CrackSample {
        image: Tensor::new(&[n, n], image)?,
        mask,
        boxes,
        seed,
    })
}

/// Low-frequency value noise: a coarse random grid sampled bilinearly,
/// plus fine per-pixel jitter, centered on mid-gray.
fn background(rng: &mut SeededRng, n: usize, texture: f64) -> Vec<f64> {
    const CELL: usize = 8;
    let gw = n / CELL + 2;
    let grid: Vec<f64> = (0..gw * gw).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; n * n];
    for y in 0..n {
        for x in 0..n {
            let fy = y as f64 / CELL as f64;
            let fx = x as f64 / CELL as f64;
            let (gy, gx) = (fy as usize, fx as usize);
            let (ty, tx) = (fy - gy as f64, fx - gx as f64);
            let v00 = grid[gy * gw + gx];
            let v01 = grid[gy * gw + gx + 1];
            let v10 = grid[(gy + 1) * gw + gx];
            let v11 = grid[(gy + 1) * gw + gx + 1];
            let coarse = v00 * (1.0 - ty) * (1.0 - tx)
                + v01 * (1.0 - ty) * tx
                + v10 * ty * (1.0 - tx)
                + v11 * ty * tx;
            let jitter = rng.gen_range(-1.0..1.0);
            let v = 0.62 + 0.5 * texture * coarse + 0.1 * texture * jitter;
            out[y * n + x] = v.clamp(0.0, 1.0);
        }
    }
    out
}

/// Rasterizes one random-walk polyline with thickness wandering in 1..=3.
fn walk_crack(rng: &mut SeededRng, cfg: &GenConfig, image: &mut [f64], mask: &mut [u8]) {
    let n = cfg.size;
    let margin = 2.0;
    let mut x = rng.gen_range(margin..(n as f64 - margin));
    let mut y = rng.gen_range(margin..(n as f64 - margin));
    let mut angle = rng.gen_range(0.0..core::f64::consts::TAU);
    let mut thickness: i64 = rng.gen_range(1..=3);

    for _ in 0..cfg.walk_steps {
        stamp(image, mask, n, x, y, thickness as usize, cfg.crack_depth);
        angle += rng.gen_range(-0.45..0.45);
        if rng.gen_range(0.0..1.0) < 0.15 {
            thickness = (thickness + rng.gen_range(-1..=1)).clamp(1, 3);
        }
        x += fmath::cos(angle);
        y += fmath::sin(angle);
        // Reflect off the borders so cracks stay in frame.
        if x < margin || x > n as f64 - margin {
            angle = core::f64::consts::PI - angle;
            x = x.clamp(margin, n as f64 - margin);
        }
        if y < margin || y > n as f64 - margin {
            angle = -angle;
            y = y.clamp(margin, n as f64 - margin);
        }
    }
}

/// Darkens and marks a thickness×thickness block centered at (x, y).
fn stamp(image: &mut [f64], mask: &mut [u8], n: usize, x: f64, y: f64, thickness: usize, depth: f64) {
    let cx = x as i64;
    let cy = y as i64;
    let r0 = -((thickness as i64 - 1) / 2);
    let r1 = thickness as i64 / 2;
    for dy in r0..=r1 {
        for dx in r0..=r1 {
            let (px, py) = (cx + dx, cy + dy);
            if px < 0 || py < 0 || px >= n as i64 || py >= n as i64 {
                continue;
            }
            let idx = py as usize * n + px as usize;
            mask[idx] = 1;
            image[idx] *= 1.0 - depth;
        }
    }
}

/// Tight boxes over 8-connected mask components, merged until pairwise
/// disjoint so each mask pixel lies in exactly one box.
pub fn boxes_from_mask(mask: &[u8], w: usize, h: usize) -> Vec<BBox> {
    debug_assert_eq!(mask.len(), w * h);
    let mut seen = vec![false; w * h];
    let mut raw: Vec<(usize, usize, usize, usize)> = Vec::new();
    let mut stack: Vec<(usize, usize)> = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            let idx = sy * w + sx;
            if mask[idx] == 0 || seen[idx] {
                continue;
            }
            // Flood one component, tracking its pixel bounds.
            let (mut x1, mut y1, mut x2, mut y2) = (sx, sy, sx, sy);
            seen[idx] = true;
            stack.push((sx, sy));
            while let Some((px, py)) = stack.pop() {
                x1 = x1.min(px);
                y1 = y1.min(py);
                x2 = x2.max(px);
                y2 = y2.max(py);
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (qx, qy) = (px as i64 + dx, py as i64 + dy);
                        if qx < 0 || qy < 0 || qx >= w as i64 || qy >= h as i64 {
                            continue;
                        }
                        let qi = qy as usize * w + qx as usize;
                        if mask[qi] == 1 && !seen[qi] {
                            seen[qi] = true;
                            stack.push((qx as usize, qy as usize));
                        }
                    }
                }
            }
            raw.push((x1, y1, x2 + 1, y2 + 1));
        }
    }

    // Merge overlapping boxes until all are disjoint.
    let mut merged = true;
    while merged {
        merged = false;
        'outer: for i in 0..raw.len() {
            for j in (i + 1)..raw.len() {
                let (ax1, ay1, ax2, ay2) = raw[i];
                let (bx1, by1, bx2, by2) = raw[j];
                if ax1 < bx2 && bx1 < ax2 && ay1 < by2 && by1 < ay2 {
                    raw[i] = (ax1.min(bx1), ay1.min(by1), ax2.max(bx2), ay2.max(by2));
                    raw.swap_remove(j);
                    merged = true;
                    break 'outer;
                }
            }
        }
    }
    raw.sort_unstable();
    raw.iter()
        .map(|&(x1, y1, x2, y2)| {
            BBox::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64).expect("pixel boxes are valid")
        })
        .collect()
}

/// Verifies the mask↔box invariants plus basic well-formedness.
pub fn check_consistency(s: &CrackSample) -> Result<()> {
    let (h, w) = (s.height(), s.width());
    if s.mask.len() != h * w {
        return Err(Error::DataLength {
            expected: h * w,
            got: s.mask.len(),
        });
    }
    if s.image.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::Invalid(alloc::format!(
            "image values must lie in [0,1]"
        )));
    }
    for y in 0..h {
        for x in 0..w {
            if s.mask[y * w + x] == 0 {
                continue;
            }
            let (fx, fy) = (x as f64, y as f64);
            let containing = s
                .boxes
                .iter()
                .filter(|b| b.x1 <= fx && fx < b.x2 && b.y1 <= fy && fy < b.y2)
                .count();
            if containing != 1 {
                return Err(Error::Invalid(alloc::format!(
                    "mask pixel ({x},{y}) lies in {containing} boxes, want exactly 1"
                )));
            }
        }
    }
    for b in &s.boxes {
        let mut any = false;
        for y in b.y1 as usize..b.y2 as usize {
            for x in b.x1 as usize..b.x2 as usize {
                if s.mask[y * w + x] == 1 {
                    any = true;
                }
            }
        }
        if !any {
            return Err(Error::Invalid(alloc::format!(
                "box ({},{},{},{}) contains no mask pixels",
                b.x1,
                b.y1,
                b.x2,
                b.y2
            )));
        }
        if b.x1 < 0.0 || b.y1 < 0.0 || b.x2 > w as f64 || b.y2 > h as f64 {
            return Err(Error::Invalid(alloc::format!("box exceeds image bounds")));
        }
    }
    Ok(())
}

/// One zero-mean unit-variance draw (Box–Muller).
fn gaussian(rng: &mut SeededRng) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen();
    fmath::sqrt(-2.0 * fmath::ln(u1)) * fmath::cos(core::f64::consts::TAU * u2)
}

/// Applies one random draw of the augmentation recipe. Image and mask are
/// transformed jointly (bilinear / nearest), boxes are recomputed from the
/// transformed mask, and noise is added to the image only.
pub fn augment(s: &CrackSample, cfg: &AugmentConfig, rng: &mut SeededRng) -> Result<CrackSample> {
    cfg.validate()?;
    let angle_deg = rng.gen_range(cfg.rotation_deg.0..=cfg.rotation_deg.1);
    let hflip = rng.gen_range(0.0..1.0) < cfg.hflip_p;
    let vflip = rng.gen_range(0.0..1.0) < cfg.vflip_p;
    let scale = rng.gen_range(cfg.scale.0..=cfg.scale.1);

    let (h, w) = (s.height(), s.width());
    let theta = angle_deg * core::f64::consts::PI / 180.0;
    let (cos_t, sin_t) = (fmath::cos(theta), fmath::sin(theta));
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);

    let src = s.image.data();
    let mut image = vec![0.0f64; h * w];
    let mut mask = vec![0u8; h * w];
    for yo in 0..h {
        for xo in 0..w {
            // Invert flip, then rotation, then scale, all about the center.
            let mut dx = xo as f64 - cx;
            let mut dy = yo as f64 - cy;
            if hflip {
                dx = -dx;
            }
            if vflip {
                dy = -dy;
            }
            let rx = cos_t * dx + sin_t * dy;
            let ry = -sin_t * dx + cos_t * dy;
            let sx = cx + rx / scale;
            let sy = cy + ry / scale;

            // Image: bilinear with edge clamping.
            let bx = sx.clamp(0.0, w as f64 - 1.0);
            let by = sy.clamp(0.0, h as f64 - 1.0);
            let (x0, y0) = (bx as usize, by as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (tx, ty) = (bx - x0 as f64, by - y0 as f64);
            image[yo * w + xo] = src[y0 * w + x0] * (1.0 - ty) * (1.0 - tx)
                + src[y0 * w + x1] * (1.0 - ty) * tx
                + src[y1 * w + x0] * ty * (1.0 - tx)
                + src[y1 * w + x1] * ty * tx;

            // Mask: nearest neighbor, zero outside the source frame.
            let nx = (sx + 0.5) as i64;
            let ny = (sy + 0.5) as i64;
            if sx >= -0.5 && sy >= -0.5 && nx < w as i64 && ny < h as i64 {
                mask[yo * w + xo] = s.mask[ny as usize * w + nx as usize];
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        for v in image.iter_mut() {
            *v = (*v + cfg.noise_sigma * gaussian(rng)).clamp(0.0, 1.0);
        }
    }

    let boxes = boxes_from_mask(&mask, w, h);
    Ok(CrackSample {
        image: Tensor::new(&[h, w], image)?,
        mask,
        boxes,
        seed: 0,
    })
}

// ---- perceptual hashing ----

const HASH_SIDE: usize = 32;
const HASH_KEEP: usize = 8;

/// Area-average resample of an [H, W] image to 32×32.
fn resample32(image: &Tensor) -> Result<[f64; HASH_SIDE * HASH_SIDE]> {
    if image.rank() != 2 {
        return Err(Error::RankMismatch {
            op: "phash64",
            expected: 2,
            got: image.shape().to_vec(),
        });
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h < HASH_SIDE || w < HASH_SIDE {
        return Err(Error::Invalid(alloc::format!(
            "phash64 needs at least 32×32 input, got {h}×{w}"
        )));
    }
    let src = image.data();
    let mut out = [0.0; HASH_SIDE * HASH_SIDE];
    for ty in 0..HASH_SIDE {
        let y0 = ty * h / HASH_SIDE;
        let y1 = (((ty + 1) * h) / HASH_SIDE).max(y0 + 1);
        for tx in 0..HASH_SIDE {
            let x0 = tx * w / HASH_SIDE;
            let x1 = (((tx + 1) * w) / HASH_SIDE).max(x0 + 1);
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += src[y * w + x];
                }
            }
            out[ty * HASH_SIDE + tx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    Ok(out)
}

/// 64-bit DCT perceptual hash: resample to 32×32, 2-D DCT-II, keep the
/// top-left 8×8 coefficients, set bit i (row-major, first coefficient in
/// the most significant bit) when the coefficient exceeds the median of
/// the 63 non-DC coefficients.
pub fn phash64(image: &Tensor) -> Result<u64> {
    let g = resample32(image)?;

    // Separable unnormalized DCT-II; only the first 8 output frequencies
    // of each pass are needed.
    let mut table = [[0.0f64; HASH_SIDE]; HASH_KEEP];
    for (u, row) in table.iter_mut().enumerate() {
        for (i, v) in row.iter_mut().enumerate() {
            *v = fmath::cos(core::f64::consts::PI * (2.0 * i as f64 + 1.0) * u as f64
                / (2.0 * HASH_SIDE as f64));
        }
    }
    // Rows: 32 rows × 8 frequencies.
    let mut rows = [[0.0f64; HASH_KEEP]; HASH_SIDE];
    for y in 0..HASH_SIDE {
        for (u, t) in table.iter().enumerate() {
            let mut acc = 0.0;
            for x in 0..HASH_SIDE {
                acc += g[y * HASH_SIDE + x] * t[x];
            }
            rows[y][u] = acc;
        }
    }
    // Columns: 8×8 block.
    let mut coef = [0.0f64; HASH_KEEP * HASH_KEEP];
    for v in 0..HASH_KEEP {
        for (u, t) in table.iter().enumerate() {
            let mut acc = 0.0;
            for y in 0..HASH_SIDE {
                acc += rows[y][v] * t[y];
            }
            coef[u * HASH_KEEP + v] = acc;
        }
    }

    let mut rest: Vec<f64> = coef[1..].to_vec();
    rest.sort_unstable_by(|a, b| a.total_cmp(b));
    let median = rest[rest.len() / 2];

    let mut hash = 0u64;
    for &c in coef.iter() {
        hash = (hash << 1) | u64::from(c > median);
    }
    Ok(hash)
}

/// Number of differing bits between two hashes.
pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Greedy near-duplicate removal in input order: index i is kept iff its
/// hash is farther than `threshold` from every earlier kept hash.
pub fn dedup(hashes: &[u64], threshold: u32) -> Result<Vec<usize>> {
    if threshold > 64 {
        return Err(Error::Invalid(alloc::format!(
            "hamming threshold must lie in 0..=64, got {threshold}"
        )));
    }
    let mut kept: Vec<usize> = Vec::new();
    for (i, &h) in hashes.iter().enumerate() {
        if kept.iter().all(|&k| hamming(hashes[k], h) > threshold) {
            kept.push(i);
        }
    }
    Ok(kept)
}

// ---- splitting ----

/// Index partition of a dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

fn shuffle(rng: &mut SeededRng, items: &mut [usize]) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}

/// Largest-remainder apportionment of n into the given integer ratios.
fn apportion(n: usize, ratios: &[usize]) -> Vec<usize> {
    let total: usize = ratios.iter().sum();
    let mut counts: Vec<usize> = ratios.iter().map(|&r| n * r / total).collect();
    let assigned: usize = counts.iter().sum();
    // Distribute the remainder by descending fractional part; ties resolve
    // in declaration order (train before val before test).
    let mut order: Vec<usize> = (0..ratios.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = (n * ratios[a]) % total;
        let fb = (n * ratios[b]) % total;
        fb.cmp(&fa).then(a.cmp(&b))
    });
    for k in 0..(n - assigned) {
        counts[order[k % ratios.len()]] += 1;
    }
    counts
}

/// Seeded shuffle followed by a contiguous 7:2:1 partition with
/// largest-remainder rounding.
pub fn split(n: usize, seed: u64) -> Result<Split> {
    if n == 0 {
        return Err(Error::Invalid(alloc::format!(
            "cannot split an empty dataset"
        )));
    }
    let mut ids: Vec<usize> = (0..n).collect();
    let mut rng = seeded(seed);
    shuffle(&mut rng, &mut ids);
    let counts = apportion(n, &[7, 2, 1]);
    let train = ids[..counts[0]].to_vec();
    let val = ids[counts[0]..counts[0] + counts[1]].to_vec();
    let test = ids[counts[0] + counts[1]..].to_vec();
    Ok(Split { train, val, test })
}

/// Seeded uniform subsample without replacement, size round(fraction·n).
/// Built as a prefix of one seeded permutation, so for a fixed seed the
/// 30% subset is contained in the 50% subset, and so on. The result is
/// sorted ascending.
pub fn subsample(ids: &[usize], fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Invalid(alloc::format!(
            "subsample fraction must lie in (0,1], got {fraction}"
        )));
    }
    let mut order: Vec<usize> = ids.to_vec();
    let mut rng = seeded(seed);
    shuffle(&mut rng, &mut order);
    let take = ((fraction * ids.len() as f64) + 0.5) as usize;
    let mut out = order[..take.min(ids.len())].to_vec();
    out.sort_unstable();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_consistent() {
        let cfg = GenConfig::default();
        let a = generate(7, &cfg).unwrap();
        let b = generate(7, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.has_crack());
        check_consistency(&a).unwrap();
        let c = generate(8, &cfg).unwrap();
        assert_ne!(a.image.data(), c.image.data());
    }

    #[test]
    fn zero_cracks_gives_empty_mask_and_boxes() {
        let cfg = GenConfig {
            min_cracks: 0,
            max_cracks: 0,
            ..GenConfig::default()
        };
        let s = generate(3, &cfg).unwrap();
        assert!(s.mask.iter().all(|&m| m == 0));
        assert!(s.boxes.is_empty());
        assert!(!s.has_crack());
        check_consistency(&s).unwrap();
    }

    #[test]
    fn boxes_merge_overlapping_components() {
        // Two diagonal-adjacent pixels are one 8-connected component; two
        // components with overlapping tight boxes get merged.
        let mut mask = vec![0u8; 36];
        mask[0] = 1; // (0,0)
        mask[7] = 1; // (1,1) — 8-connected with (0,0)
        mask[4] = 1; // (4,0)
        mask[11] = 1; // (5,1) — separate component, box overlaps nothing
        let boxes = boxes_from_mask(&mask, 6, 6);
        assert_eq!(boxes.len(), 2);
        assert_eq!(boxes[0], BBox::new(0.0, 0.0, 2.0, 2.0).unwrap());
        assert_eq!(boxes[1], BBox::new(4.0, 0.0, 6.0, 2.0).unwrap());

        // A diagonal chain spans a large tight box; an unconnected pixel
        // inside that box forces a merge into a single box.
        let mut mask = vec![0u8; 36];
        for k in 0..4 {
            mask[k * 6 + k] = 1; // (k,k)
        }
        mask[3] = 1; // (3,0): not 8-adjacent to any chain pixel
        let boxes = boxes_from_mask(&mask, 6, 6);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0], BBox::new(0.0, 0.0, 4.0, 4.0).unwrap());
    }

    #[test]
    fn split_counts_follow_largest_remainder() {
        let s = split(10, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (7, 2, 1));
        let s = split(100, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 20, 10));
        let s = split(11, 1).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 2, 1));

        // Partition: disjoint and covering.
        let mut all: Vec<usize> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .copied()
            .collect();
        all.sort_unstable();
        assert_eq!(all, (0..11).collect::<Vec<_>>());
    }

    #[test]
    fn subsample_sizes_and_nesting() {
        let ids: Vec<usize> = (0..100).collect();
        let full = subsample(&ids, 1.0, 5).unwrap();
        assert_eq!(full, ids);
        let half = subsample(&ids, 0.5, 5).unwrap();
        assert_eq!(half.len(), 50);
        let third = subsample(&ids, 0.3, 5).unwrap();
        assert_eq!(third.len(), 30);
        assert!(third.iter().all(|i| half.contains(i)));
        assert!(subsample(&ids, 0.0, 5).is_err());
    }

    #[test]
    fn dedup_greedy_semantics() {
        // All distinct → all kept.
        let far = [0u64, !0u64, 0xF0F0_F0F0_F0F0_F0F0];
        assert_eq!(dedup(&far, 5).unwrap(), vec![0, 1, 2]);
        // Exact duplicate dropped, original kept (d(17, 0xFFFF0000) = 18).
        let dup = [17u64, 0xFFFF_0000, 17];
        assert_eq!(dedup(&dup, 5).unwrap(), vec![0, 1]);
        // Chain A~B, B~C, A≁C: B dropped, C compared against {A} only and
        // kept because d(A,C) = 8 > 5.
        let a = 0u64;
        let b = 0b1111u64; // d(a,b) = 4
        let c = 0b1111_1111u64; // d(b,c) = 4, d(a,c) = 8
        assert_eq!(dedup(&[a, b, c], 5).unwrap(), vec![0, 2]);
    }

    #[test]
    fn identity_augmentation_is_bitwise_noop() {
        let s = generate(11, &GenConfig::default()).unwrap();
        let cfg = AugmentConfig {
            rotation_deg: (0.0, 0.0),
            hflip_p: 0.0,
            vflip_p: 0.0,
            scale: (1.0, 1.0),
            noise_sigma: 0.0,
        };
        let mut rng = seeded(1);
        let t = augment(&s, &cfg, &mut rng).unwrap();
        assert_eq!(t.image.data(), s.image.data());
        assert_eq!(t.mask, s.mask);
        assert_eq!(t.boxes, s.boxes);
    }

    #[test]
    fn horizontal_flip_mirrors_boxes() {
        let s = generate(13, &GenConfig::default()).unwrap();
        let cfg = AugmentConfig {
            rotation_deg: (0.0, 0.0),
            hflip_p: 1.0,
            vflip_p: 0.0,
            scale: (1.0, 1.0),
            noise_sigma: 0.0,
        };
        let mut rng = seeded(1);
        let t = augment(&s, &cfg, &mut rng).unwrap();
        let w = s.width() as f64;
        let mut mirrored: Vec<BBox> = s
            .boxes
            .iter()
            .map(|b| BBox::new(w - b.x2, b.y1, w - b.x1, b.y2).unwrap())
            .collect();
        mirrored.sort_by(|a, b| (a.x1, a.y1).partial_cmp(&(b.x1, b.y1)).unwrap());
        assert_eq!(t.boxes, mirrored);
        check_consistency(&t).unwrap();
    }

    #[test]
    fn rotated_samples_stay_consistent() {
        let cfg = AugmentConfig::default();
        for seed in 0..20u64 {
            let s = generate(seed, &GenConfig::default()).unwrap();
            let mut rng = seeded(seed ^ 0xABCD);
            let t = augment(&s, &cfg, &mut rng).unwrap();
            check_consistency(&t).unwrap();
        }
    }

    #[test]
    fn phash_identity_and_bit_packing() {
        let s = generate(19, &GenConfig::default()).unwrap();
        let h1 = phash64(&s.image).unwrap();
        let h2 = phash64(&s.image).unwrap();
        assert_eq!(hamming(h1, h2), 0);
        // The DC coefficient of a non-negative image dominates the AC
        // median, so the first (most significant) bit is set.
        assert_eq!(h1 >> 63, 1);
        // Too-small images are rejected.
        let tiny = Tensor::zeros(&[16, 16]);
        assert!(phash64(&tiny).is_err());
    }

    #[test]
    fn brightness_shift_leaves_hash_essentially_unchanged() {
        // Adding a constant moves only the DC coefficient; the AC
        // coefficients that decide the bits are unchanged up to floating
        // point residue, so the hash survives global brightness shifts.
        let s = generate(23, &GenConfig::default()).unwrap();
        let shifted = s.image.map(|v| (v * 0.8) + 0.1);
        let h1 = phash64(&s.image).unwrap();
        let h2 = phash64(&shifted).unwrap();
        assert!(hamming(h1, h2) <= 2, "distance {}", hamming(h1, h2));
    }
}
