//! Seeded synthetic images: per-location static textures with random noise
//! occluders, and split checkerboard/noise test images.

use crate::backbone::{Backbone, BackboneConfig};
use crate::evalkit::Homography;
use crate::extractor::{FeatureSet, Keypoint};
use crate::locdata::LocationSet;
use crate::tensorops::Tensor;
use crate::weights::WeightFile;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A static checkerboard: cell size, phase and two colours.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Checker {
    pub cell: u32,
    pub offset: (u32, u32),
    pub colors: [[u8; 3]; 2],
}

impl Checker {
    /// Random cell size and phase for a hue in `[0, 6)`. Both cells share the
    /// hue's chroma scaled by `saturation` and differ only in lightness.
    pub fn random(rng: &mut impl Rng, cells: std::ops::RangeInclusive<u32>, hue: f64, saturation: f64) -> Self {
        let cell = rng.gen_range(cells);
        let base = hue_rgb(hue);
        let tone = |lum: f64| base.map(|v| ((lum + saturation * (v - 0.5)) * 255.0).round().clamp(0.0, 255.0) as u8);
        let (dark, light) = (tone(0.5 - LIGHTNESS), tone(0.5 + LIGHTNESS));
        Self {
            cell,
            offset: (rng.gen_range(0..cell), rng.gen_range(0..cell)),
            colors: [dark, light],
        }
    }

    pub fn at(&self, x: u32, y: u32) -> [u8; 3] {
        let cx = (x + self.offset.0) / self.cell;
        let cy = (y + self.offset.1) / self.cell;
        self.colors[((cx + cy) % 2) as usize]
    }

    pub fn render(&self, width: u32, height: u32) -> RgbImage {
        RgbImage::from_fn(width, height, |x, y| Rgb(self.at(x, y)))
    }
}

const LIGHTNESS: f64 = 0.15;

/// Fully saturated colour for a hue in `[0, 6)`.
fn hue_rgb(h: f64) -> [f64; 3] {
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    match h as u32 {
        0 => [1.0, x, 0.0],
        1 => [x, 1.0, 0.0],
        2 => [0.0, 1.0, x],
        3 => [0.0, x, 1.0],
        4 => [x, 0.0, 1.0],
        _ => [1.0, 0.0, x],
    }
}

fn noise_pixel(rng: &mut impl Rng) -> Rgb<u8> {
    Rgb([rng.gen(), rng.gen(), rng.gen()])
}

/// Rectangle `(x, y, w, h)` with area as close as possible to `fraction` of the image.
pub fn occluder_extent(width: u32, height: u32, fraction: f64) -> (u32, u32) {
    let area = fraction * (width * height) as f64;
    let w = (area.sqrt().round() as u32).clamp(1, width);
    let h = ((area / w as f64).round() as u32).clamp(1, height);
    (w, h)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OccluderSpec {
    pub locations: usize,
    pub per_location: usize,
    pub width: u32,
    pub height: u32,
    pub area_fraction: f64,
    pub cells: std::ops::RangeInclusive<u32>,
    pub saturation: f64,
    pub seed: u64,
}

impl Default for OccluderSpec {
    fn default() -> Self {
        Self {
            locations: 10,
            per_location: 6,
            width: 32,
            height: 32,
            area_fraction: 0.2,
            cells: 2..=4,
            saturation: 0.3,
            seed: 42,
        }
    }
}

/// Images, occluder masks (row-major, `true` inside) and their location set.
#[derive(Clone, Debug)]
pub struct OccluderDataset {
    pub images: Vec<RgbImage>,
    pub masks: Vec<Vec<bool>>,
    pub textures: Vec<Checker>,
    pub set: LocationSet,
}

/// Every location has a fixed checkerboard with its own hue (hues spread
/// evenly around the colour wheel); each image pastes a uniform
/// noise rectangle at a random position.
pub fn occluder_dataset(spec: &OccluderSpec) -> OccluderDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (w, h) = (spec.width, spec.height);
    let (ow, oh) = occluder_extent(w, h, spec.area_fraction);
    let textures: Vec<Checker> = (0..spec.locations)
        .map(|loc| {
            let hue = 6.0 * (loc as f64 + rng.gen_range(0.0..0.5)) / spec.locations as f64;
            Checker::random(&mut rng, spec.cells.clone(), hue, spec.saturation)
        })
        .collect();
    let mut images = Vec::new();
    let mut masks = Vec::new();
    let mut rows = Vec::new();
    for (loc, tex) in textures.iter().enumerate() {
        for k in 0..spec.per_location {
            let mut img = tex.render(w, h);
            let x0 = rng.gen_range(0..=w - ow);
            let y0 = rng.gen_range(0..=h - oh);
            let mut mask = vec![false; (w * h) as usize];
            for y in y0..y0 + oh {
                for x in x0..x0 + ow {
                    img.put_pixel(x, y, noise_pixel(&mut rng));
                    mask[(y * w + x) as usize] = true;
                }
            }
            images.push(img);
            masks.push(mask);
            rows.push((format!("loc{loc}/img{k}.png"), "synthetic".to_string(), loc));
        }
    }
    let set = LocationSet::from_entries(&rows).expect("synthetic rows are valid");
    OccluderDataset {
        images,
        masks,
        textures,
        set,
    }
}

/// Left half a checkerboard, right half uniform noise. Returns the image and
/// the first noise column.
pub fn split_checker_noise(width: u32, height: u32, checker: &Checker, seed: u64) -> (RgbImage, u32) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let split = width / 2;
    let img = RgbImage::from_fn(width, height, |x, y| {
        if x < split {
            Rgb(checker.at(x, y))
        } else {
            noise_pixel(&mut rng)
        }
    });
    (img, split)
}

/// Gray-noise background with uniquely coloured square blobs.
#[derive(Clone, Debug)]
pub struct PlantedScene {
    pub image: RgbImage,
    pub palette: Vec<[u8; 3]>,
    /// Blob centres `(x, y)`, one per palette entry.
    pub centers: Vec<(f64, f64)>,
}

/// Non-gray colour number `i`; distinct for every `i < 216`.
fn palette_color(i: usize) -> [u8; 3] {
    let r = (i % 6) as u8;
    let g = ((i / 6) % 6) as u8;
    let b = (i / 36) as u8;
    // offset the red channel so no entry has r == g == b
    [40 * r + 30, 40 * g + 20, 40 * b + 20]
}

/// Places `count` blobs of half-width `radius` on a grid with jitter, keeping
/// `margin` pixels clear of every edge.
pub fn planted_scene(width: u32, height: u32, count: usize, radius: u32, margin: u32, seed: u64) -> PlantedScene {
    assert!(count <= 216, "palette holds 216 colours");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = RgbImage::from_fn(width, height, |_, _| {
        let v = rng.gen_range(60..200u8);
        Rgb([v, v, v])
    });
    let cols = (count as f64).sqrt().ceil() as u32;
    let rows = (count as u32).div_ceil(cols);
    let (sx, sy) = ((width - 2 * margin) / cols, (height - 2 * margin) / rows);
    let jitter = |rng: &mut ChaCha8Rng, span: u32| {
        let slack = span.saturating_sub(2 * radius + 2) / 2;
        rng.gen_range(0..=slack) as i64 - (slack / 2) as i64
    };
    let mut palette = Vec::with_capacity(count);
    let mut centers = Vec::with_capacity(count);
    for i in 0..count {
        let (gx, gy) = (i as u32 % cols, i as u32 / cols);
        let cx = (margin + gx * sx + sx / 2) as i64 + jitter(&mut rng, sx);
        let cy = (margin + gy * sy + sy / 2) as i64 + jitter(&mut rng, sy);
        let color = palette_color(i);
        let r = radius as i64;
        for y in cy - r..=cy + r {
            for x in cx - r..=cx + r {
                image.put_pixel(x as u32, y as u32, Rgb(color));
            }
        }
        palette.push(color);
        centers.push((cx as f64, cy as f64));
    }
    PlantedScene { image, palette, centers }
}

/// Inverse-maps every output pixel through `h` with nearest-neighbour
/// sampling; pixels falling outside the source are mid-gray.
pub fn warp_nearest(src: &RgbImage, h: &Homography, width: u32, height: u32) -> RgbImage {
    let inv = h.inverse();
    RgbImage::from_fn(width, height, |x, y| match inv.project(x as f64, y as f64) {
        Ok((sx, sy)) => {
            let (ix, iy) = (sx.round(), sy.round());
            if ix >= 0.0 && iy >= 0.0 && (ix as u32) < src.width() && (iy as u32) < src.height() {
                *src.get_pixel(ix as u32, iy as u32)
            } else {
                Rgb([128; 3])
            }
        }
        Err(_) => Rgb([128; 3]),
    })
}

/// Blob centroids as keypoints with one-hot palette descriptors. Colours
/// absent from the image produce no keypoint.
pub fn planted_features(image: &RgbImage, palette: &[[u8; 3]]) -> FeatureSet {
    let mut sums = vec![(0.0f64, 0.0f64, 0usize); palette.len()];
    for (x, y, px) in image.enumerate_pixels() {
        if let Some(i) = palette.iter().position(|c| *c == px.0) {
            sums[i].0 += x as f64;
            sums[i].1 += y as f64;
            sums[i].2 += 1;
        }
    }
    let dim = palette.len();
    let mut keypoints = Vec::new();
    let mut descriptors = Vec::new();
    for (i, &(sx, sy, n)) in sums.iter().enumerate() {
        if n == 0 {
            continue;
        }
        keypoints.push(Keypoint {
            x: (sx / n as f64) as f32,
            y: (sy / n as f64) as f32,
            score: 1.0,
        });
        let mut d = vec![0.0f32; dim];
        d[i] = 1.0;
        descriptors.extend(d);
    }
    FeatureSet {
        keypoints,
        descriptors,
        dim,
        width: image.width(),
        height: image.height(),
        scale_to_original: Some(1.0),
    }
}

/// Writes a sequence directory: `1.png`, then `k.png` and `H_1_k` for each
/// query, numbered from 2.
pub fn write_sequence(dir: &std::path::Path, reference: &RgbImage, queries: &[(RgbImage, Homography)]) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    let save = |img: &RgbImage, name: String| {
        img.save(dir.join(name)).map_err(|e| std::io::Error::other(e.to_string()))
    };
    save(reference, "1.png".into())?;
    for (k, (img, h)) in queries.iter().enumerate() {
        save(img, format!("{}.png", k + 2))?;
        let m = h.matrix();
        let mut text = String::new();
        for r in 0..3 {
            text.push_str(&format!("{:e} {:e} {:e}\n", m[(r, 0)], m[(r, 1)], m[(r, 2)]));
        }
        std::fs::write(dir.join(format!("H_1_{}", k + 2)), text)?;
    }
    Ok(())
}

/// Hue threshold of [`hue_backbone`] used by the occluder experiments.
pub const HUE_THRESHOLD: f32 = 0.4;

/// Hand-built `[[c, c], [c, c]]` backbone. The first convolution projects each
/// pixel's chroma onto `c` evenly spaced hue directions (centre tap only,
/// thresholded by `bias`); every later convolution is the identity. Inputs are
/// scaled to `[-1, 1]`.
pub fn hue_backbone(channels: usize, bias: f32) -> Backbone {
    let config = BackboneConfig::toy(channels);
    let mut w = WeightFile::new();
    w.insert("backbone.input.mean", Tensor::new(&[3], vec![127.5; 3]).expect("finite"));
    w.insert("backbone.input.scale", Tensor::new(&[3], vec![1.0 / 127.5; 3]).expect("finite"));
    let s2 = std::f32::consts::FRAC_1_SQRT_2;
    let s6 = 1.0 / 6f32.sqrt();
    for (idx, (name, cin, cout)) in config.layers().into_iter().enumerate() {
        let mut k = vec![0.0f32; cout * cin * 9];
        let mut b = vec![0.0f32; cout];
        for o in 0..cout {
            if idx == 0 {
                let t = std::f32::consts::TAU * o as f32 / cout as f32;
                let (c, s) = (t.cos(), t.sin());
                let rgb = [c * s2 + s * s6, -c * s2 + s * s6, -2.0 * s * s6];
                for (i, v) in rgb.into_iter().enumerate() {
                    k[(o * cin + i) * 9 + 4] = v;
                }
                b[o] = -bias;
            } else {
                k[(o * cin + o) * 9 + 4] = 1.0;
            }
        }
        w.insert(format!("backbone.{name}.weight"), Tensor::new(&[cout, cin, 3, 3], k).expect("finite"));
        w.insert(format!("backbone.{name}.bias"), Tensor::new(&[cout], b).expect("finite"));
    }
    Backbone::from_weights(&w, &config).expect("consistent synthetic weights")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn occluders_cover_a_fifth() {
        let d = occluder_dataset(&OccluderSpec::default());
        assert_eq!(d.images.len(), 60);
        assert_eq!(d.set.num_locations(), 10);
        for m in &d.masks {
            let frac = m.iter().filter(|&&b| b).count() as f64 / m.len() as f64;
            assert!((frac - 0.2).abs() < 0.01, "{frac}");
        }
        let again = occluder_dataset(&OccluderSpec::default());
        assert_eq!(again.images, d.images);
    }

    #[test]
    fn hue_backbone_separates_hues() {
        let bb = hue_backbone(8, HUE_THRESHOLD);
        let solid = |rgb: [u8; 3]| image::DynamicImage::ImageRgb8(RgbImage::from_pixel(4, 4, Rgb(rgb)));
        let active = |rgb| {
            let f = bb.forward_dense(&bb.preprocess(&solid(rgb), 640).unwrap()).unwrap();
            (0..8).filter(|&c| f.tensor().at3(c, 1, 1) > 0.0).collect::<Vec<_>>()
        };
        assert_eq!(active([128, 128, 128]), Vec::<usize>::new());
        let red = active([255, 0, 0]);
        let cyan = active([0, 255, 255]);
        assert!(!red.is_empty() && !cyan.is_empty());
        assert!(red.iter().all(|c| !cyan.contains(c)));
    }

    #[test]
    fn planted_blobs_are_recovered() {
        let scene = planted_scene(120, 90, 20, 2, 8, 3);
        let f = planted_features(&scene.image, &scene.palette);
        assert_eq!(f.len(), 20);
        for (k, c) in f.keypoints.iter().zip(&scene.centers) {
            assert_eq!((k.x as f64, k.y as f64), *c);
        }
        let shift = Homography::from_row_slice(&[1., 0., 3., 0., 1., -2., 0., 0., 1.]).unwrap();
        let warped = warp_nearest(&scene.image, &shift, 120, 90);
        let g = planted_features(&warped, &scene.palette);
        assert_eq!(g.len(), 20);
        assert_eq!((g.keypoints[0].x as f64, g.keypoints[0].y as f64), (scene.centers[0].0 + 3.0, scene.centers[0].1 - 2.0));
    }

    #[test]
    fn split_image_halves() {
        let c = Checker {
            cell: 2,
            offset: (0, 0),
            colors: [[0; 3], [255; 3]],
        };
        let (img, split) = split_checker_noise(8, 4, &c, 1);
        assert_eq!(split, 4);
        assert_eq!(img.get_pixel(0, 0).0, [0; 3]);
        assert_eq!(img.get_pixel(2, 0).0, [255; 3]);
    }
}
