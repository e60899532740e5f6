use rand::Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterDeltas {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for JitterDeltas {
    fn default() -> Self {
        Self {
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
        }
    }
}

/// Concrete jitter draw: multiplicative factors plus an additive hue shift
/// measured in turns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterFactors {
    pub const IDENTITY: Self = Self {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugName {
    ColorJitter,
    Grayscale,
    GaussianBlur,
    ResizedCrop,
    HorizontalFlip,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AugKind {
    ColorJitter(JitterDeltas),
    Grayscale,
    GaussianBlur { sigma_min: f64, sigma_max: f64 },
    ResizedCrop { area_min: f64, area_max: f64 },
    HorizontalFlip,
}

impl AugKind {
    pub fn name(&self) -> AugName {
        match self {
            AugKind::ColorJitter(_) => AugName::ColorJitter,
            AugKind::Grayscale => AugName::Grayscale,
            AugKind::GaussianBlur { .. } => AugName::GaussianBlur,
            AugKind::ResizedCrop { .. } => AugName::ResizedCrop,
            AugKind::HorizontalFlip => AugName::HorizontalFlip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugKind,
    /// Probability that the augmentation fires on a given view.
    pub prob: f64,
}

/// Ordered augmentation pipeline; `main` indexes the augmentation whose
/// frequency distinguishes this composition from its siblings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionSpec {
    pub augs: Vec<AugmentationSpec>,
    pub main: usize,
}

impl CompositionSpec {
    pub fn new(augs: Vec<AugmentationSpec>, main: usize) -> Result<Self> {
        let spec = Self { augs, main };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.main >= self.augs.len() {
            return Err(invalid(format!(
                "main index {} outside composition of {}",
                self.main,
                self.augs.len()
            )));
        }
        for a in &self.augs {
            if !(0.0..=1.0).contains(&a.prob) {
                return Err(invalid(format!("{:?} probability {} not in [0,1]", a.kind.name(), a.prob)));
            }
            match a.kind {
                AugKind::ColorJitter(d) => {
                    if [d.brightness, d.contrast, d.saturation, d.hue].iter().any(|v| !(*v >= 0.0)) {
                        return Err(invalid("jitter deltas must be >= 0"));
                    }
                }
                AugKind::GaussianBlur { sigma_min, sigma_max } => {
                    if !(sigma_min > 0.0 && sigma_max >= sigma_min) {
                        return Err(invalid(format!("blur sigma range [{sigma_min}, {sigma_max}]")));
                    }
                }
                AugKind::ResizedCrop { area_min, area_max } => check_area((area_min, area_max))?,
                AugKind::Grayscale | AugKind::HorizontalFlip => {}
            }
        }
        Ok(())
    }

    /// The five-augmentation pipeline (crop, jitter, grayscale, blur, flip)
    /// with `main` set to `frequency` and every other member at its default.
    pub fn standard(main: AugName, frequency: f64) -> Result<Self> {
        let mut augs = vec![
            AugmentationSpec {
                kind: AugKind::ResizedCrop {
                    area_min: 0.2,
                    area_max: 1.0,
                },
                prob: 1.0,
            },
            AugmentationSpec {
                kind: AugKind::ColorJitter(JitterDeltas::default()),
                prob: 0.8,
            },
            AugmentationSpec {
                kind: AugKind::Grayscale,
                prob: 0.2,
            },
            AugmentationSpec {
                kind: AugKind::GaussianBlur {
                    sigma_min: 0.1,
                    sigma_max: 2.0,
                },
                prob: 0.5,
            },
            AugmentationSpec {
                kind: AugKind::HorizontalFlip,
                prob: 0.5,
            },
        ];
        let main = augs.iter().position(|a| a.kind.name() == main).unwrap();
        augs[main].prob = frequency;
        Self::new(augs, main)
    }

    pub fn main_kind(&self) -> AugName {
        self.augs[self.main].kind.name()
    }

    pub fn main_frequency(&self) -> f64 {
        self.augs[self.main].prob
    }
}

fn check_area(range: (f64, f64)) -> Result<()> {
    let (lo, hi) = range;
    if !(lo > 0.0 && hi <= 1.0 && lo <= hi) {
        return Err(invalid(format!("area range ({lo}, {hi}) must lie in (0, 1]")));
    }
    Ok(())
}

fn luminance(rgb: [f32; 3]) -> f32 {
    0.299 * rgb[0] + 0.587 * rgb[1] + 0.114 * rgb[2]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Applies brightness, contrast, saturation and hue in that order, clamping
/// to `[0, 1]` after each stage.
pub fn jitter_with(img: &Image, f: &JitterFactors) -> Image {
    let mut out = img.clone();
    let n = out.plane();
    if f.brightness != 1.0 {
        let b = f.brightness as f32;
        out.data.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
    }
    if f.contrast != 1.0 {
        let c = f.contrast as f32;
        let mean = (0..n).map(|i| luminance(out.rgb(i))).sum::<f32>() / n as f32;
        out.data
            .iter_mut()
            .for_each(|v| *v = ((*v - mean) * c + mean).clamp(0.0, 1.0));
    }
    if f.saturation != 1.0 {
        let s = f.saturation as f32;
        for i in 0..n {
            let px = out.rgb(i);
            let g = luminance(px);
            out.set_rgb(i, px.map(|v| ((v - g) * s + g).clamp(0.0, 1.0)));
        }
    }
    if f.hue != 0.0 {
        let dh = f.hue as f32;
        for i in 0..n {
            let [h, s, v] = rgb_to_hsv(out.rgb(i));
            out.set_rgb(i, hsv_to_rgb([h + dh, s, v]).map(|x| x.clamp(0.0, 1.0)));
        }
    }
    out
}

pub fn color_jitter<R: Rng + ?Sized>(img: &Image, deltas: &JitterDeltas, rng: &mut R) -> Image {
    let mut factor = |d: f64| if d > 0.0 { rng.random_range(1.0 - d..=1.0 + d) } else { 1.0 };
    let brightness = factor(deltas.brightness);
    let contrast = factor(deltas.contrast);
    let saturation = factor(deltas.saturation);
    let hue = if deltas.hue > 0.0 {
        rng.random_range(-deltas.hue..=deltas.hue)
    } else {
        0.0
    };
    jitter_with(
        img,
        &JitterFactors {
            brightness: brightness.max(0.0),
            contrast: contrast.max(0.0),
            saturation: saturation.max(0.0),
            hue,
        },
    )
}

pub fn horizontal_flip(img: &Image) -> Image {
    let mut out = img.clone();
    for row in out.data.chunks_mut(img.width) {
        row.reverse();
    }
    out
}

pub fn to_grayscale(img: &Image) -> Image {
    let mut out = img.clone();
    for i in 0..img.plane() {
        let g = luminance(img.rgb(i)).clamp(0.0, 1.0);
        out.set_rgb(i, [g; 3]);
    }
    out
}

/// Mirror index without repeating the edge sample (`d c b | a b c d | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    (if m >= n as isize { period - m } else { m }) as usize
}

/// Separable Gaussian blur with reflect padding. `radius == 0` is the
/// identity.
pub fn gaussian_blur(img: &Image, sigma: f64, radius: usize) -> Result<Image> {
    if !(sigma > 0.0) {
        return Err(invalid(format!("blur sigma must be > 0, got {sigma}")));
    }
    if radius == 0 {
        return Ok(img.clone());
    }
    let r = radius as isize;
    let mut kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= total);
    let (h, w) = (img.height, img.width);
    let mut tmp = vec![0f32; img.data.len()];
    for (src, dst) in img.data.chunks(w).zip(tmp.chunks_mut(w)) {
        for (x, out) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * src[reflect(x as isize + k as isize - r, w)] as f64;
            }
            *out = acc as f32;
        }
    }
    let mut out = img.clone();
    for c in 0..3 {
        let plane = &tmp[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * plane[reflect(y as isize + k as isize - r, h) * w + x] as f64;
                }
                out.data[(c * h + y) * w + x] = (acc as f32).clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

/// Bilinearly resamples the rectangle `(top, left, height, width)` (pixel
/// units, possibly fractional) back to the full image size.
pub fn crop_resize(img: &Image, top: f64, left: f64, height: f64, width: f64) -> Image {
    let (h, w) = (img.height, img.width);
    let sy = height / h as f64;
    let sx = width / w as f64;
    let coords = |n: usize, scale: f64, offset: f64, limit: usize| -> Vec<(usize, usize, f32)> {
        (0..n)
            .map(|i| {
                let s = (offset + (i as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(limit - 1);
                (i0, i1, (s - i0 as f64) as f32)
            })
            .collect()
    };
    let ys = coords(h, sy, top, h);
    let xs = coords(w, sx, left, w);
    let mut out = Image::filled(h, w, [0.0; 3]);
    for c in 0..3 {
        for (y, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = img.at(c, y0, x0) * (1.0 - fx) + img.at(c, y0, x1) * fx;
                let bottom = img.at(c, y1, x0) * (1.0 - fx) + img.at(c, y1, x1) * fx;
                out.set(c, y, x, (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Random crop covering an area fraction drawn from `area_range` with aspect
/// ratio in `[3/4, 4/3]`, resized back to the input size. Falls back to the
/// full frame when ten draws fail to fit.
pub fn resized_crop<R: Rng + ?Sized>(img: &Image, area_range: (f64, f64), rng: &mut R) -> Result<Image> {
    check_area(area_range)?;
    let (h, w) = (img.height as f64, img.width as f64);
    let log_ratio = ((3.0f64 / 4.0).ln(), (4.0f64 / 3.0).ln());
    for _ in 0..10 {
        let area = h * w * rng.random_range(area_range.0..=area_range.1);
        let ratio = rng.random_range(log_ratio.0..=log_ratio.1).exp();
        let cw = (area * ratio).sqrt();
        let ch = (area / ratio).sqrt();
        if cw <= w && ch <= h {
            let top = rng.random_range(0.0..=h - ch);
            let left = rng.random_range(0.0..=w - cw);
            return Ok(crop_resize(img, top, left, ch, cw));
        }
    }
    Ok(img.clone())
}

/// Runs the composition once, returning the view and which members fired.
pub fn augment_traced<R: Rng + ?Sized>(
    img: &Image,
    comp: &CompositionSpec,
    rng: &mut R,
) -> Result<(Image, Vec<bool>)> {
    let mut out = img.clone();
    let mut fired = Vec::with_capacity(comp.augs.len());
    for a in &comp.augs {
        let fire = rng.random::<f64>() < a.prob;
        fired.push(fire);
        if !fire {
            continue;
        }
        out = match a.kind {
            AugKind::ColorJitter(d) => color_jitter(&out, &d, rng),
            AugKind::Grayscale => to_grayscale(&out),
            AugKind::GaussianBlur { sigma_min, sigma_max } => {
                let sigma = rng.random_range(sigma_min..=sigma_max);
                gaussian_blur(&out, sigma, (3.0 * sigma).ceil() as usize)?
            }
            AugKind::ResizedCrop { area_min, area_max } => resized_crop(&out, (area_min, area_max), rng)?,
            AugKind::HorizontalFlip => horizontal_flip(&out),
        };
    }
    Ok((out, fired))
}

pub fn augment<R: Rng + ?Sized>(img: &Image, comp: &CompositionSpec, rng: &mut R) -> Result<Image> {
    Ok(augment_traced(img, comp, rng)?.0)
}

/// Two independent draws of `comp` on the same image.
pub fn make_views<R: Rng + ?Sized>(img: &Image, comp: &CompositionSpec, rng: &mut R) -> Result<(Image, Image)> {
    let q = augment(img, comp, rng)?;
    let k = augment(img, comp, rng)?;
    Ok((q, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn noise(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = stream(seed, &[]);
        Image::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn max_diff(a: &Image, b: &Image) -> f32 {
        a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f32::max)
    }

    #[test]
    fn zero_deltas_are_identity() {
        let img = noise(8, 8, 1);
        let zero = JitterDeltas {
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
        };
        assert_eq!(color_jitter(&img, &zero, &mut stream(0, &[])), img);
    }

    #[test]
    fn brightness_doubles() {
        let img = Image::filled(4, 4, [0.3; 3]);
        let out = jitter_with(
            &img,
            &JitterFactors {
                brightness: 2.0,
                ..JitterFactors::IDENTITY
            },
        );
        assert!(out.data.iter().all(|v| (v - 0.6).abs() < 1e-6));
    }

    #[test]
    fn half_turn_hue_twice_is_identity() {
        let img = noise(6, 6, 2);
        let half = JitterFactors {
            hue: 0.5,
            ..JitterFactors::IDENTITY
        };
        let back = jitter_with(&jitter_with(&img, &half), &half);
        assert!(max_diff(&back, &img) < 1e-5);
    }

    #[test]
    fn hsv_round_trip() {
        let img = noise(5, 5, 3);
        for i in 0..img.plane() {
            let px = img.rgb(i);
            let back = hsv_to_rgb(rgb_to_hsv(px));
            for c in 0..3 {
                assert!((px[c] - back[c]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn blur_preserves_constant_image() {
        let img = Image::filled(9, 7, [0.2, 0.5, 0.9]);
        let out = gaussian_blur(&img, 1.3, 4).unwrap();
        assert!(max_diff(&out, &img) < 1e-6);
    }

    #[test]
    fn blur_of_impulse_matches_explicit_kernel() {
        let (n, sigma, r) = (21usize, 1.5, 5usize);
        let mut img = Image::filled(n, n, [0.0; 3]);
        for c in 0..3 {
            img.set(c, 10, 10, 1.0);
        }
        let out = gaussian_blur(&img, sigma, r).unwrap();
        let k: Vec<f64> = (-(r as i64)..=r as i64)
            .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
            .collect();
        let s: f64 = k.iter().sum();
        let mut mass = 0.0;
        for y in 0..n {
            for x in 0..n {
                let dy = y as i64 - 10;
                let dx = x as i64 - 10;
                let expected = if dy.abs() <= r as i64 && dx.abs() <= r as i64 {
                    k[(dy + r as i64) as usize] * k[(dx + r as i64) as usize] / (s * s)
                } else {
                    0.0
                };
                assert!((out.at(0, y, x) as f64 - expected).abs() < 1e-6);
                assert_eq!(out.at(0, y, x), out.at(0, 20 - y, x));
                assert_eq!(out.at(0, y, x), out.at(0, y, 20 - x));
                mass += out.at(0, y, x) as f64;
            }
        }
        assert!((mass - 1.0).abs() < 1e-6);
    }

    #[test]
    fn blur_rejects_nonpositive_sigma() {
        let img = Image::filled(3, 3, [0.5; 3]);
        assert!(gaussian_blur(&img, 0.0, 1).is_err());
        assert!(gaussian_blur(&img, -1.0, 1).is_err());
        assert_eq!(gaussian_blur(&img, 0.01, 0).unwrap(), img);
    }

    #[test]
    fn reflect_indices() {
        let got: Vec<usize> = (-3..7).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 2, 1, 0]);
    }

    #[test]
    fn flip_is_involution_and_gray_is_fixed_point() {
        let img = noise(5, 6, 4);
        assert_eq!(horizontal_flip(&horizontal_flip(&img)), img);
        assert_eq!(horizontal_flip(&img).at(1, 2, 0), img.at(1, 2, 5));
        let g = to_grayscale(&img);
        assert!(max_diff(&to_grayscale(&g), &g) < 1e-6);
        assert!((g.at(0, 1, 1) - (0.299 * img.at(0, 1, 1) + 0.587 * img.at(1, 1, 1) + 0.114 * img.at(2, 1, 1))).abs() < 1e-6);
    }

    #[test]
    fn full_frame_crop_is_identity() {
        let img = noise(16, 12, 5);
        assert!(max_diff(&crop_resize(&img, 0.0, 0.0, 16.0, 12.0), &img) < 1e-6);
        let out = resized_crop(&img, (1.0, 1.0), &mut stream(0, &[])).unwrap();
        assert_eq!((out.height, out.width), (16, 12));
    }

    #[test]
    fn crop_area_range_validated() {
        let img = noise(4, 4, 6);
        let mut rng = stream(0, &[]);
        assert!(resized_crop(&img, (0.0, 0.5), &mut rng).is_err());
        assert!(resized_crop(&img, (0.5, 1.5), &mut rng).is_err());
        assert!(resized_crop(&img, (0.8, 0.5), &mut rng).is_err());
    }

    #[test]
    fn zero_probability_views_equal_input() {
        let img = noise(8, 8, 7);
        let mut comp = CompositionSpec::standard(AugName::GaussianBlur, 0.0).unwrap();
        comp.augs.iter_mut().for_each(|a| a.prob = 0.0);
        let (q, k) = make_views(&img, &comp, &mut stream(1, &[])).unwrap();
        assert_eq!(q, img);
        assert_eq!(k, img);
    }

    #[test]
    fn views_are_seed_deterministic() {
        let img = noise(16, 16, 8);
        let comp = CompositionSpec::standard(AugName::GaussianBlur, 0.5).unwrap();
        let a = make_views(&img, &comp, &mut stream(3, &[1, 2])).unwrap();
        let b = make_views(&img, &comp, &mut stream(3, &[1, 2])).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0, a.1);
    }

    #[test]
    fn main_frequency_one_always_fires() {
        let img = noise(8, 8, 9);
        let comp = CompositionSpec::standard(AugName::GaussianBlur, 1.0).unwrap();
        let mut fired = 0;
        for i in 0..1000 {
            let mut rng = stream(4, &[i]);
            for _ in 0..2 {
                let (_, f) = augment_traced(&img, &comp, &mut rng).unwrap();
                fired += f[comp.main] as usize;
            }
        }
        assert_eq!(fired, 2000);
    }

    #[test]
    fn order_matters() {
        // Grayscale then jitter can re-introduce colour; the reverse cannot.
        let img = noise(8, 8, 10);
        let jitter = AugmentationSpec {
            kind: AugKind::ColorJitter(JitterDeltas::default()),
            prob: 1.0,
        };
        let gray = AugmentationSpec {
            kind: AugKind::Grayscale,
            prob: 1.0,
        };
        let a = CompositionSpec::new(vec![gray, jitter], 0).unwrap();
        let b = CompositionSpec::new(vec![jitter, gray], 1).unwrap();
        let va = augment(&img, &a, &mut stream(5, &[])).unwrap();
        let vb = augment(&img, &b, &mut stream(5, &[])).unwrap();
        assert_ne!(va, vb);
    }

    #[test]
    fn invalid_compositions_rejected() {
        assert!(CompositionSpec::standard(AugName::GaussianBlur, 1.5).is_err());
        let mut c = CompositionSpec::standard(AugName::ColorJitter, 0.8).unwrap();
        c.augs[1].kind = AugKind::ColorJitter(JitterDeltas {
            brightness: -0.1,
            ..JitterDeltas::default()
        });
        assert!(c.validate().is_err());
        c.main = 9;
        assert!(c.validate().is_err());
    }
}
