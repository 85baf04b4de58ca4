//! Synthetic visible / pseudo-infrared pairs with known geometry.

use std::fs;
use std::path::{Path, PathBuf};

use distillmatch_tensor::{io, Tensor};
use nalgebra::{Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{essential_from_pose, from_rows, invert, normalize_h, sample_homography, to_rows, HomographyRanges, Mat3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextureKind {
    Checker,
    ValueNoise,
    Blobs,
}

impl std::str::FromStr for TextureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "checker" => Ok(Self::Checker),
            "noise" | "value_noise" => Ok(Self::ValueNoise),
            "blobs" => Ok(Self::Blobs),
            other => Err(Error::Config(format!("unknown texture kind {other:?}"))),
        }
    }
}

pub const CHECKER_CELL: usize = 8;

/// Textures are squeezed into `[0.5 - c/2, 0.5 + c/2]`.
pub const VIS_CONTRAST: f64 = 0.5;

fn check_dims(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::Dimension(format!("image {h}x{w}: sides must be positive multiples of 8")));
    }
    Ok(())
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

/// Multi-octave value noise in `[0, 1]`, `[h, w]` row-major.
fn value_noise(h: usize, w: usize, rng: &mut impl Rng) -> Vec<f64> {
    let octaves = [(32usize, 0.45), (16, 0.3), (8, 0.15), (4, 0.1)];
    let mut out = vec![0.0; h * w];
    for (cell, weight) in octaves {
        let (lh, lw) = (h / cell + 2, w / cell + 2);
        let lattice: Vec<f64> = (0..lh * lw).map(|_| rng.random::<f64>()).collect();
        for y in 0..h {
            let fy = y as f64 / cell as f64;
            let (y0, ty) = (fy.floor() as usize, smooth(fy.fract()));
            for x in 0..w {
                let fx = x as f64 / cell as f64;
                let (x0, tx) = (fx.floor() as usize, smooth(fx.fract()));
                let at = |yy: usize, xx: usize| lattice[yy * lw + xx];
                let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
                let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
                out[y * w + x] += weight * (top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

/// RGB texture `[3, h, w]` in `[0, 1]`, deterministic per seed.
pub fn gen_texture(kind: TextureKind, h: usize, w: usize, seed: u64) -> Result<Tensor> {
    check_dims(h, w)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = h * w;
    let mut data = vec![0.0; 3 * n];
    match kind {
        TextureKind::Checker => {
            let (ch, cw) = (h / CHECKER_CELL, w / CHECKER_CELL);
            let cells: Vec<[f64; 3]> = (0..ch * cw)
                .map(|i| {
                    let (cy, cx) = (i / cw, i % cw);
                    let base = if (cx + cy) % 2 == 0 { 0.6 } else { 0.0 };
                    [0, 1, 2].map(|_| base + 0.4 * rng.random::<f64>())
                })
                .collect();
            for y in 0..h {
                for x in 0..w {
                    let c = cells[(y / CHECKER_CELL) * cw + x / CHECKER_CELL];
                    for k in 0..3 {
                        data[k * n + y * w + x] = c[k];
                    }
                }
            }
        }
        TextureKind::ValueNoise => {
            for k in 0..3 {
                let ch = value_noise(h, w, &mut rng);
                data[k * n..(k + 1) * n].copy_from_slice(&ch);
            }
            stretch(&mut data);
        }
        TextureKind::Blobs => {
            let bg = value_noise(h, w, &mut rng);
            for k in 0..3 {
                for i in 0..n {
                    data[k * n + i] = 0.2 + 0.4 * bg[i];
                }
            }
            let count = 6 + (h * w) / 512;
            for _ in 0..count {
                let cx = rng.random::<f64>() * w as f64;
                let cy = rng.random::<f64>() * h as f64;
                let r = 2.0 + rng.random::<f64>() * (w.min(h) as f64 / 8.0);
                let col = [0, 1, 2].map(|_| rng.random::<f64>());
                for y in 0..h {
                    for x in 0..w {
                        let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                        let a = (-d2 / (2.0 * r * r)).exp();
                        for k in 0..3 {
                            let v = &mut data[k * n + y * w + x];
                            *v = *v * (1.0 - a) + col[k] * a;
                        }
                    }
                }
            }
        }
    }
    for v in &mut data {
        *v = 0.5 + VIS_CONTRAST * (v.clamp(0.0, 1.0) - 0.5);
    }
    Ok(Tensor::new(&[3, h, w], data)?)
}

/// Affine map of all values onto `[0, 1]`; constant input is left unchanged.
fn stretch(v: &mut [f64]) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo > 1e-12 {
        for x in v.iter_mut() {
            *x = (*x - lo) / (hi - lo);
        }
    }
}

/// Bilinear sample of channel plane `p` (`h × w`) at `(x, y)`, which must lie inside.
fn bilinear(p: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let (x0, y0) = (x.floor().max(0.0) as usize, y.floor().max(0.0) as usize);
    let (x0, y0) = (x0.min(w - 1), y0.min(h - 1));
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (x - x0 as f64, y - y0 as f64);
    let top = p[y0 * w + x0] * (1.0 - tx) + p[y0 * w + x1] * tx;
    let bot = p[y1 * w + x0] * (1.0 - tx) + p[y1 * w + x1] * tx;
    top * (1.0 - ty) + bot * ty
}

/// Warped image and validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Warped {
    pub image: Tensor,
    /// `[h, w]`, 1 where the source pixel was inside the input.
    pub valid: Tensor,
}

/// Image `b` with `b(H x) = a(x)`: every output pixel is sampled from `H⁻¹`
/// of its position; samples outside the input are zero and marked invalid.
pub fn warp(img: &Tensor, h: &Mat3) -> Result<Warped> {
    let s = img.shape();
    if s.len() != 3 {
        return Err(Error::Dimension(format!("warp expects [C, H, W], got {s:?}")));
    }
    let (c, hh, ww) = (s[0], s[1], s[2]);
    let hinv = invert(h)?;
    let n = hh * ww;
    let mut out = vec![0.0; c * n];
    let mut valid = vec![0.0; n];
    let tol = 1e-9;
    for y in 0..hh {
        for x in 0..ww {
            let v = hinv * Vector3::new(x as f64, y as f64, 1.0);
            let (sx, sy) = (v[0] / v[2], v[1] / v[2]);
            if !(sx >= -tol && sy >= -tol && sx <= (ww - 1) as f64 + tol && sy <= (hh - 1) as f64 + tol) {
                continue;
            }
            let (sx, sy) = (sx.clamp(0.0, (ww - 1) as f64), sy.clamp(0.0, (hh - 1) as f64));
            valid[y * ww + x] = 1.0;
            for k in 0..c {
                out[k * n + y * ww + x] = bilinear(&img.data()[k * n..(k + 1) * n], hh, ww, sx, sy);
            }
        }
    }
    Ok(Warped {
        image: Tensor::new(s, out)?,
        valid: Tensor::new(&[hh, ww], valid)?,
    })
}

pub fn luminance(img: &Tensor) -> Result<Vec<f64>> {
    let s = img.shape();
    match s {
        [1, _, _] => Ok(img.data().to_vec()),
        [3, h, w] => {
            let n = h * w;
            let d = img.data();
            Ok((0..n).map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i]).collect())
        }
        _ => Err(Error::Dimension(format!("expected [1|3, H, W], got {s:?}"))),
    }
}

/// Separable Gaussian blur with clamped borders.
pub fn gaussian_blur(p: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let ks: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / ks).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * p[y * w + clamp(x as isize + d, w)]).sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = (-r..=r).map(|d| k[(d + r) as usize] * tmp[clamp(y as isize + d, h) * w + x]).sum();
        }
    }
    out
}

pub const PIR_POWER: f64 = 1.5;
pub const PIR_SIGMA: f64 = 1.0;

/// Tone-inverted luminance `(1 - L)^1.5`, blurred and stretched to `[0, 1]`; `[1, h, w]`.
pub fn pseudo_ir(img: &Tensor) -> Result<Tensor> {
    let s = img.shape();
    let l = luminance(img)?;
    let (h, w) = (s[1], s[2]);
    let v: Vec<f64> = l.iter().map(|&x| (1.0 - x.clamp(0.0, 1.0)).powf(PIR_POWER)).collect();
    let mut b = gaussian_blur(&v, h, w, PIR_SIGMA);
    stretch(&mut b);
    Ok(Tensor::new(&[1, h, w], b)?)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d <= 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max <= 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}

/// Hue rotation by `hue` radians, saturation and value scaled, then clamped.
pub fn hsv_adjust(img: &Tensor, hue: f64, sat: f64, val: f64) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Dimension(format!("expected [3, H, W], got {s:?}")));
    }
    let n = s[1] * s[2];
    let d = img.data();
    let mut out = vec![0.0; 3 * n];
    let dh = hue / std::f64::consts::TAU;
    for i in 0..n {
        let (h, sa, v) = rgb_to_hsv(d[i], d[n + i], d[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + dh, (sa * sat).clamp(0.0, 1.0), (v * val).clamp(0.0, 1.0));
        out[i] = r.clamp(0.0, 1.0);
        out[n + i] = g.clamp(0.0, 1.0);
        out[2 * n + i] = b.clamp(0.0, 1.0);
    }
    Ok(Tensor::new(s, out)?)
}

/// Half-widths of the colour jitter: hue in radians, saturation and value as
/// relative scale around 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HsvRanges {
    pub hue: f64,
    pub sat: f64,
    pub val: f64,
}

impl Default for HsvRanges {
    fn default() -> Self {
        Self {
            hue: 0.3,
            sat: 0.2,
            val: 0.2,
        }
    }
}

pub fn hsv_jitter(img: &Tensor, seed: u64, r: &HsvRanges) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut u = |half: f64| if half > 0.0 { rng.random_range(-half..=half) } else { 0.0 };
    let (dh, ds, dv) = (u(r.hue), u(r.sat), u(r.val));
    hsv_adjust(img, dh, 1.0 + ds, 1.0 + dv)
}

/// How the ground-truth transform of a pair is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GtMode {
    Homography,
    /// Plane seen by two calibrated cameras; also yields an essential matrix.
    Pose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub textures: Vec<TextureKind>,
    pub hsv: HsvRanges,
    pub homography: HomographyRanges,
    pub mode: GtMode,
}

impl SynthConfig {
    pub fn new(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            textures: vec![TextureKind::ValueNoise, TextureKind::Blobs, TextureKind::Checker],
            hsv: HsvRanges::default(),
            homography: HomographyRanges::default(),
            mode: GtMode::Homography,
        }
    }

    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serialises");
        hex(&Sha256::digest(&json))
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Ground truth of one pair. Matrices are row-major; `h` maps image `a`
/// pixels to image `b` pixels. In pose mode `x_aᵀ E x_b = 0` holds for
/// normalised coordinates `K⁻¹ x` and `X_a = R X_b + t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub h: [f64; 9],
    pub e: Option<[f64; 9]>,
    pub k: Option<[f64; 9]>,
    pub r: Option<[f64; 9]>,
    pub t: Option<[f64; 3]>,
    pub seed: u64,
}

impl GroundTruth {
    pub fn homography(&self) -> Mat3 {
        from_rows(&self.h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthPair {
    /// `[3, H, W]`.
    pub vis: Tensor,
    /// `[1, H, W]`.
    pub pir: Tensor,
    /// `[H, W]` validity of the warped image.
    pub valid: Tensor,
    pub gt: GroundTruth,
}

/// Pinhole intrinsics with focal length equal to the width and the
/// principal point at the image centre.
pub fn intrinsics(w: usize, h: usize) -> Mat3 {
    let f = w as f64;
    Mat3::new(f, 0.0, (w as f64 - 1.0) / 2.0, 0.0, f, (h as f64 - 1.0) / 2.0, 0.0, 0.0, 1.0)
}

/// Relative pose of two cameras over the plane `Z_b = 1`:
/// `x_a ~ K (R + t nᵀ) K⁻¹ x_b` with `n = (0, 0, 1)`.
pub fn sample_plane_pose(w: usize, h: usize, seed: u64) -> Result<GroundTruth> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let angle = rng.random_range(-8f64..8.0).to_radians();
    let r = Rotation3::from_axis_angle(&Unit::new_normalize(axis + Vector3::new(0.0, 0.0, 1e-3)), angle).into_inner();
    let dir = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
    let t = dir.normalize() * rng.random_range(0.05..0.12);
    let k = intrinsics(w, h);
    let n = Vector3::new(0.0, 0.0, 1.0);
    let h_ba = k * (r + t * n.transpose()) * invert(&k)?;
    let h_ab = normalize_h(&invert(&h_ba)?);
    let e = essential_from_pose(&r, &t);
    Ok(GroundTruth {
        h: to_rows(&h_ab),
        e: Some(to_rows(&e)),
        k: Some(to_rows(&k)),
        r: Some(to_rows(&r)),
        t: Some([t[0], t[1], t[2]]),
        seed,
    })
}

/// Seed of pair `idx` in a batch drawn from `seed`.
pub fn pair_seed(seed: u64, idx: usize) -> u64 {
    let mut z = seed ^ (idx as u64).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn make_pair(cfg: &SynthConfig, seed: u64, kind: TextureKind) -> Result<SynthPair> {
    let (h, w) = (cfg.height, cfg.width);
    let tex = gen_texture(kind, h, w, seed)?;
    let vis = hsv_jitter(&tex, seed ^ 0x5EED_0001, &cfg.hsv)?;
    let gt = match cfg.mode {
        GtMode::Homography => {
            let (hm, _) = sample_homography(w, h, seed ^ 0x5EED_0002, &cfg.homography)?;
            GroundTruth {
                h: to_rows(&hm),
                e: None,
                k: None,
                r: None,
                t: None,
                seed,
            }
        }
        GtMode::Pose => sample_plane_pose(w, h, seed ^ 0x5EED_0003)?,
    };
    let warped = warp(&vis, &gt.homography())?;
    let pir = pseudo_ir(&warped.image)?;
    Ok(SynthPair {
        vis,
        pir,
        valid: warped.valid,
        gt,
    })
}

/// `n` pairs, texture kinds cycling through the configured list.
pub fn make_batch(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<SynthPair>> {
    if n == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if cfg.textures.is_empty() {
        return Err(Error::Config("no texture kinds configured".into()));
    }
    check_dims(cfg.height, cfg.width)?;
    (0..n)
        .map(|i| make_pair(cfg, pair_seed(seed, i), cfg.textures[i % cfg.textures.len()]))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config: SynthConfig,
    pub config_hash: String,
    pub pairs: Vec<String>,
}

pub fn pair_name(idx: usize) -> String {
    format!("pair_{idx:04}")
}

/// Writes `pair_<idx>/{vis,pir}.tensor`, `pair_<idx>/gt.json` and `manifest.json`.
pub fn write_dataset(dir: &Path, pairs: &[SynthPair], cfg: &SynthConfig, seed: u64) -> Result<DatasetManifest> {
    fs::create_dir_all(dir)?;
    let mut names = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let name = pair_name(i);
        let pd = dir.join(&name);
        fs::create_dir_all(&pd)?;
        io::save(pd.join("vis.tensor"), &p.vis)?;
        io::save(pd.join("pir.tensor"), &p.pir)?;
        fs::write(pd.join("gt.json"), serde_json::to_string_pretty(&p.gt)?)?;
        names.push(name);
    }
    let manifest = DatasetManifest {
        seed,
        config: cfg.clone(),
        config_hash: cfg.hash(),
        pairs: names,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// A pair as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredPair {
    pub name: String,
    pub vis: Tensor,
    pub pir: Tensor,
    pub gt: GroundTruth,
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn read_pair(dir: &Path, name: &str) -> Result<StoredPair> {
    let pd: PathBuf = dir.join(name);
    let vis = io::load(pd.join("vis.tensor"))?;
    let pir = io::load(pd.join("pir.tensor"))?;
    let gt: GroundTruth = serde_json::from_str(&fs::read_to_string(pd.join("gt.json"))?)?;
    Ok(StoredPair {
        name: name.to_string(),
        vis,
        pir,
        gt,
    })
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<StoredPair>)> {
    let m = read_manifest(dir)?;
    let pairs = m.pairs.iter().map(|n| read_pair(dir, n)).collect::<Result<Vec<_>>>()?;
    Ok((m, pairs))
}
