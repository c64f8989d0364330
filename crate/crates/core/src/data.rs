//! Image I/O, k-space low-resolution synthesis, and training pair iteration.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma};
use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::seeded_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn image_err(path: &Path, source: image::ImageError) -> Error {
    match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        other => Error::Image { path: path.to_path_buf(), source: other },
    }
}

/// Loads an 8- or 16-bit grayscale PNG/PGM as `[1, H, W]`, divided by its
/// own maximum (an all-zero image stays zero).
pub fn load_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw: Vec<f64> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f64::from).collect(),
        DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(f64::from).collect(),
        other => {
            return Err(Error::Format(format!(
                "{}: unsupported pixel format {:?}; expected 8- or 16-bit grayscale",
                path.display(),
                other.color()
            )))
        }
    };
    let peak = raw.iter().copied().fold(0.0, f64::max);
    let data = if peak > 0.0 { raw.into_iter().map(|v| v / peak).collect() } else { raw };
    Tensor::new([1, h, w], data)
}

/// Writes a `[1, H, W]` (or `[H, W]`) image, clamped to `[0, 1]`. The format
/// follows the extension (`.png`, `.pgm`).
pub fn save_image(img: &Tensor, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = match *img.shape() {
        [1, h, w] | [h, w] => (h, w),
        _ => return Err(Error::dim(format!("save_image expects one channel, got {:?}", img.shape()))),
    };
    let clamped = img.data().iter().map(|v| v.clamp(0.0, 1.0));
    let result = match depth {
        BitDepth::Eight => {
            let px: Vec<u8> = clamped.map(|v| (v * 255.0).round() as u8).collect();
            ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, px).expect("buffer size").save(path)
        }
        BitDepth::Sixteen => {
            let px: Vec<u16> = clamped.map(|v| (v * 65535.0).round() as u16).collect();
            ImageBuffer::<Luma<u16>, _>::from_raw(w as u32, h as u32, px).expect("buffer size").save(path)
        }
    };
    result.map_err(|e| image_err(path, e))
}

fn plane(x: &Tensor) -> Result<(usize, usize)> {
    match *x.shape() {
        [1, h, w] => Ok((h, w)),
        _ => Err(Error::dim(format!("expected a [1,H,W] image, got {:?}", x.shape()))),
    }
}

/// Unnormalized forward 2D DFT of a real `h × w` plane, row-major.
fn fft2(data: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = data.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    transform2(&mut buf, h, w, false);
    buf
}

/// 2D DFT in place; the inverse includes the `1/(h·w)` factor.
fn transform2(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::new();
    let (row, col) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for r in buf.chunks_exact_mut(w) {
        row.process(r);
    }
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for j in 0..w {
        for i in 0..h {
            column[i] = buf[i * w + j];
        }
        col.process(&mut column);
        for i in 0..h {
            buf[i * w + j] = column[i];
        }
    }
    if inverse {
        let s = 1.0 / (h * w) as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }
}

/// Real part of the inverse transform and the largest discarded imaginary part.
fn ifft2_real(mut coefs: Vec<Complex64>, h: usize, w: usize) -> (Vec<f64>, f64) {
    transform2(&mut coefs, h, w, true);
    let imag = coefs.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    (coefs.into_iter().map(|c| c.re).collect(), imag)
}

/// High-resolution bins feeding low-resolution bin `u` of an `n_lo`-point
/// grid cut from an `n_hi`-point one. An even-length grid's Nyquist bin takes
/// the mean of the `±n_lo/2` bins so real images stay real.
fn source_bins(u: usize, n_lo: usize, n_hi: usize) -> Vec<(usize, f64)> {
    if n_lo % 2 == 0 && u == n_lo / 2 && n_lo < n_hi {
        let k = n_lo / 2;
        vec![(k, 0.5), (n_hi - k, 0.5)]
    } else if u <= (n_lo - 1) / 2 || n_lo == n_hi {
        vec![(u, 1.0)]
    } else {
        vec![(n_hi - (n_lo - u), 1.0)]
    }
}

fn crop_spectrum(spec: &[Complex64], h: usize, w: usize, lh: usize, lw: usize) -> Vec<Complex64> {
    let rows: Vec<_> = (0..lh).map(|u| source_bins(u, lh, h)).collect();
    let cols: Vec<_> = (0..lw).map(|v| source_bins(v, lw, w)).collect();
    let mut out = Vec::with_capacity(lh * lw);
    for ru in &rows {
        for cv in &cols {
            let mut acc = Complex64::new(0.0, 0.0);
            for &(i, a) in ru {
                for &(j, b) in cv {
                    acc += spec[i * w + j] * (a * b);
                }
            }
            out.push(acc);
        }
    }
    out
}

fn pad_spectrum(spec: &[Complex64], lh: usize, lw: usize, h: usize, w: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); h * w];
    for u in 0..lh {
        for v in 0..lw {
            for &(i, a) in &source_bins(u, lh, h) {
                for &(j, b) in &source_bins(v, lw, w) {
                    out[i * w + j] += spec[u * lw + v] * (a * b);
                }
            }
        }
    }
    out
}

fn check_factor(h: usize, w: usize, r: usize) -> Result<()> {
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(Error::Config(format!("scale {r} does not divide {h}x{w}")));
    }
    Ok(())
}

/// Low-pass k-space truncation to `(H/r) × (W/r)`, before clamping. Also
/// returns the largest imaginary residue of the inverse transform.
pub fn degrade_kspace_unclamped(hr: &Tensor, r: usize) -> Result<(Tensor, f64)> {
    let (h, w) = plane(hr)?;
    check_factor(h, w, r)?;
    let (lh, lw) = (h / r, w / r);
    let spec = fft2(hr.data(), h, w);
    let mut cut = crop_spectrum(&spec, h, w, lh, lw);
    let s = 1.0 / (r * r) as f64;
    cut.iter_mut().for_each(|c| *c *= s);
    let (re, imag) = ifft2_real(cut, lh, lw);
    Ok((Tensor::new([1, lh, lw], re)?, imag))
}

/// Keeps the centred `(H/r) × (W/r)` block of the 2D spectrum, scales by
/// `1/r²` so constants are preserved, and clamps to `[0, 1]`.
pub fn degrade_kspace(hr: &Tensor, r: usize) -> Result<Tensor> {
    let (lr, residue) = degrade_kspace_unclamped(hr, r)?;
    debug_assert!(residue <= 1e-12, "imaginary residue {residue} after inverse transform");
    Ok(lr.map(|v| v.clamp(0.0, 1.0)))
}

/// Zero-pads the spectrum of `lr` to `r` times its extents (no clamping).
pub fn upsample_kspace(lr: &Tensor, r: usize) -> Result<Tensor> {
    let (lh, lw) = plane(lr)?;
    let (h, w) = (lh * r, lw * r);
    let spec = fft2(lr.data(), lh, lw);
    let mut padded = pad_spectrum(&spec, lh, lw, h, w);
    let s = (r * r) as f64;
    padded.iter_mut().for_each(|c| *c *= s);
    let (re, _) = ifft2_real(padded, h, w);
    Tensor::new([1, h, w], re)
}

/// Centre crop to `(top, left, height, width)` with both extents the largest
/// multiple of `divisor` that fits.
pub fn centre_crop_box(h: usize, w: usize, divisor: usize) -> Result<(usize, usize, usize, usize)> {
    let (ch, cw) = (h / divisor * divisor, w / divisor * divisor);
    if ch == 0 || cw == 0 {
        return Err(Error::Config(format!("{h}x{w} image is smaller than the required multiple {divisor}")));
    }
    Ok(((h - ch) / 2, (w - cw) / 2, ch, cw))
}

pub fn crop(img: &Tensor, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
    let (h, w) = plane(img)?;
    if top + ch > h || left + cw > w {
        return Err(Error::dim(format!("crop {ch}x{cw}+{top}+{left} outside {h}x{w}")));
    }
    Ok(Tensor::from_fn(vec![1, ch, cw], |i| img.data()[(top + i / cw) * w + left + i % cw]))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImagePair {
    pub id: String,
    pub hr_path: PathBuf,
    pub hr: Tensor,
    pub lr: Tensor,
    pub scale: usize,
    /// `(top, left, height, width)` of the crop taken from the source image.
    pub crop: (usize, usize, usize, usize),
}

impl ImagePair {
    /// A pair for an in-memory HR image whose extents are already multiples
    /// of `r`. No crop is taken.
    pub fn from_hr(id: impl Into<String>, hr: Tensor, r: usize) -> Result<Self> {
        let (h, w) = plane(&hr)?;
        let id = id.into();
        Ok(ImagePair {
            hr_path: PathBuf::from(&id),
            id,
            lr: degrade_kspace(&hr, r)?,
            hr,
            scale: r,
            crop: (0, 0, h, w),
        })
    }
}

/// Sorted PNG/PGM files in `dir`.
pub fn list_images(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no PNG/PGM images in {}", dir.display())));
    }
    Ok(paths)
}

/// Builds the pair for one HR image: centre crop to a multiple of
/// `lcm(r, divisor)`, then k-space degradation.
pub fn make_pair(path: &Path, r: usize, divisor: usize) -> Result<ImagePair> {
    let img = load_image(path)?;
    let (h, w) = plane(&img)?;
    let m = r / gcd(r, divisor) * divisor;
    let (top, left, ch, cw) = centre_crop_box(h, w, m)?;
    let hr = crop(&img, top, left, ch, cw)?;
    let lr = degrade_kspace(&hr, r)?;
    let id = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(ImagePair { id, hr_path: path.to_path_buf(), hr, lr, scale: r, crop: (top, left, ch, cw) })
}

/// Pairs for every image in `dir`, in lexicographic file order, degraded on
/// the fly.
pub fn iterate_pairs(dir: impl AsRef<Path>, r: usize, divisor: usize) -> Result<impl Iterator<Item = Result<ImagePair>>> {
    let paths = list_images(dir)?;
    Ok(paths.into_iter().map(move |p| make_pair(&p, r, divisor)))
}

pub fn load_pairs(dir: impl AsRef<Path>, r: usize, divisor: usize) -> Result<Vec<ImagePair>> {
    iterate_pairs(dir, r, divisor)?.collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub hr_path: PathBuf,
    pub r: usize,
    pub crop: (usize, usize, usize, usize),
    pub hr_file: String,
    pub lr_file: String,
}

/// Writes each pair as two tensor files plus `manifest.json`.
pub fn write_cache(pairs: &[ImagePair], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(pairs.len());
    for (i, p) in pairs.iter().enumerate() {
        let (hr_file, lr_file) = (format!("{i:05}_hr.tensor"), format!("{i:05}_lr.tensor"));
        for (name, t) in [(&hr_file, &p.hr), (&lr_file, &p.lr)] {
            let path = dir.join(name);
            fs::write(&path, t.to_bytes()).map_err(|e| Error::io(&path, e))?;
        }
        manifest.push(ManifestEntry { hr_path: p.hr_path.clone(), r: p.scale, crop: p.crop, hr_file, lr_file });
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
}

pub fn read_cache(dir: impl AsRef<Path>) -> Result<Vec<ImagePair>> {
    let dir = dir.as_ref();
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes)?;
    manifest
        .into_iter()
        .map(|m| {
            let read = |name: &str| -> Result<Tensor> {
                let p = dir.join(name);
                let f = fs::File::open(&p).map_err(|e| Error::io(&p, e))?;
                Tensor::read_from(&mut std::io::BufReader::new(f))
            };
            let id = m.hr_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            Ok(ImagePair { id, hr: read(&m.hr_file)?, lr: read(&m.lr_file)?, hr_path: m.hr_path, scale: m.r, crop: m.crop })
        })
        .collect()
}

/// Synthetic MR-like slice in `[0, 1]`: an elliptical head with a darker
/// rim, a few inner ellipses of varying intensity, and a faint texture.
pub fn synthetic_phantom(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = seeded_rng(seed);
    let mut blobs = Vec::new();
    for _ in 0..5 {
        blobs.push((
            rng.random_range(-0.4..0.4),
            rng.random_range(-0.4..0.4),
            rng.random_range(0.08..0.25),
            rng.random_range(0.08..0.25),
            rng.random_range(-0.35..0.35),
        ));
    }
    let (fy, fx, phase) = (rng.random_range(2.0..5.0), rng.random_range(2.0..5.0), rng.random_range(0.0..std::f64::consts::TAU));
    let img = Tensor::from_fn(vec![1, h, w], |i| {
        let y = 2.0 * ((i / w) as f64 + 0.5) / h as f64 - 1.0;
        let x = 2.0 * ((i % w) as f64 + 0.5) / w as f64 - 1.0;
        let head = (y / 0.9).powi(2) + (x / 0.75).powi(2);
        if head > 1.0 {
            return 0.0;
        }
        let mut v = if head > 0.8 { 0.9 } else { 0.55 };
        for &(cy, cx, ry, rx, dv) in &blobs {
            if ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0 {
                v += dv;
            }
        }
        v += 0.05 * (fy * std::f64::consts::PI * y + phase).sin() * (fx * std::f64::consts::PI * x).cos();
        v
    });
    let peak = img.data().iter().copied().fold(0.0, f64::max);
    img.map(|v| (v / peak).clamp(0.0, 1.0))
}
