//! Deterministic toy corpus: shapes on textured backgrounds with four nested
//! annotation tiers.
//!
//! Every image is described by a chain of region partitions, each refining the
//! previous one: objects, object halves, stripes inside objects, and finally
//! faint blobs in the background. Tier `k` marks the boundaries of partition
//! `k`, so tiers are nested and their edge-pixel counts strictly increase.

use std::fs;
use std::path::Path;

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{dataset_granularity_bounds, edge_pixel_count, AnnotatedImage};
use super::{DatasetManifest, ManifestEntry, Split};
use crate::error::{invalid, Result};
use crate::imageio;

pub const SYNTH_TIERS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub split: Split,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            split: Split::Train,
        }
    }
}

/// Writes `n_images` images, their tier annotations and `manifest.json`
/// under `out_dir`, returning the manifest.
pub fn generate_synthetic_corpus(
    n_images: usize,
    seed: u64,
    out_dir: &Path,
    config: &SynthConfig,
) -> Result<DatasetManifest> {
    if n_images == 0 {
        return Err(invalid("corpus needs at least one image"));
    }
    fs::create_dir_all(out_dir.join("images"))?;
    fs::create_dir_all(out_dir.join("gt"))?;

    let samples: Vec<AnnotatedImage> = (0..n_images)
        .into_par_iter()
        .map(|i| synth_sample(seed, i, config))
        .collect::<Result<_>>()?;

    let entries = samples
        .par_iter()
        .map(|s| {
            let image = format!("images/{}.png", s.id);
            imageio::save_rgb(&out_dir.join(&image), &s.image)?;
            let annotations = s
                .annotations
                .iter()
                .enumerate()
                .map(|(k, a)| {
                    let rel = format!("gt/{}_{}.png", s.id, k);
                    imageio::save_edge_map(&out_dir.join(&rel), a)?;
                    Ok(rel.into())
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ManifestEntry {
                id: s.id.clone(),
                image: image.into(),
                annotations,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (lo, hi) = dataset_granularity_bounds(&samples)?;
    let manifest = DatasetManifest {
        split: config.split,
        granularity_bounds: [lo, hi],
        entries,
        root: out_dir.to_path_buf(),
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

/// Renders image `index` of the corpus with the given seed.
pub fn synth_sample(seed: u64, index: usize, config: &SynthConfig) -> Result<AnnotatedImage> {
    let (h, w) = (config.height, config.width);
    if h < 32 || w < 32 {
        return Err(invalid(format!("synthetic images must be at least 32x32, got {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index as u64);
    // Redraw until every tier adds edges; in practice the first draw succeeds.
    loop {
        let scene = Scene::random(&mut rng, h, w);
        let tiers = scene.tiers(h, w);
        let counts: Vec<u64> = tiers.iter().map(edge_pixel_count).collect();
        if counts[0] > 0 && counts.windows(2).all(|p| p[0] < p[1]) {
            let image = scene.render(&mut rng, h, w);
            return AnnotatedImage::new(format!("synth_{index:04}"), image, tiers);
        }
    }
}

#[derive(Clone, Copy)]
enum Shape {
    Ellipse { cy: f64, cx: f64, ry: f64, rx: f64, angle: f64 },
    Polygon { cy: f64, cx: f64, radius: f64, phase: f64, sides: usize },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Ellipse { cy, cx, ry, rx, angle } => {
                let (s, c) = angle.sin_cos();
                let (dy, dx) = (y - cy, x - cx);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / rx).powi(2) + (v / ry).powi(2) <= 1.0
            }
            Shape::Polygon { cy, cx, radius, phase, sides } => {
                // Regular polygon: inside every edge's half-plane.
                let apothem = radius * (std::f64::consts::PI / sides as f64).cos();
                (0..sides).all(|k| {
                    let theta = phase + (k as f64 + 0.5) * std::f64::consts::TAU / sides as f64;
                    (x - cx) * theta.cos() + (y - cy) * theta.sin() <= apothem
                })
            }
        }
    }

    fn center(&self) -> (f64, f64) {
        match *self {
            Shape::Ellipse { cy, cx, .. } | Shape::Polygon { cy, cx, .. } => (cy, cx),
        }
    }
}

struct Object {
    shape: Shape,
    color: [f32; 3],
    split_angle: f64,
    half_shade: f32,
    stripe_angle: f64,
    stripe_period: f64,
    stripe_shade: f32,
}

struct Blob {
    shape: Shape,
    shade: f32,
}

struct Scene {
    background: [f32; 3],
    blobs: Vec<Blob>,
    objects: Vec<Object>,
}

/// Region identity of a pixel at each partition level.
#[derive(Clone, Copy, PartialEq, Eq)]
struct Region {
    object: usize,
    half: usize,
    stripe: i64,
    blob: usize,
}

impl Scene {
    fn random(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Self {
        let scale = h.min(w) as f64;
        let random_shape = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            let cy = rng.gen_range(0.2..0.8) * h as f64;
            let cx = rng.gen_range(0.2..0.8) * w as f64;
            if rng.gen_bool(0.5) {
                Shape::Ellipse {
                    cy,
                    cx,
                    ry: rng.gen_range(lo..hi) * scale,
                    rx: rng.gen_range(lo..hi) * scale,
                    angle: rng.gen_range(0.0..std::f64::consts::PI),
                }
            } else {
                Shape::Polygon {
                    cy,
                    cx,
                    radius: rng.gen_range(lo..hi) * scale,
                    phase: rng.gen_range(0.0..std::f64::consts::TAU),
                    sides: rng.gen_range(3..=6),
                }
            }
        };
        let background = [rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8), rng.gen_range(0.2..0.8)];
        let blobs = (0..rng.gen_range(2..=3))
            .map(|_| Blob {
                shape: random_shape(rng, 0.15, 0.35),
                shade: if rng.gen_bool(0.5) { 0.07 } else { -0.07 },
            })
            .collect();
        let objects = (0..rng.gen_range(2..=3))
            .map(|_| {
                let shape = random_shape(rng, 0.12, 0.28);
                let color = background.map(|b| {
                    let delta: f32 = rng.gen_range(0.3..0.5);
                    if b > 0.5 { b - delta } else { b + delta }
                });
                Object {
                    shape,
                    color,
                    split_angle: rng.gen_range(0.0..std::f64::consts::PI),
                    half_shade: 0.15,
                    stripe_angle: rng.gen_range(0.0..std::f64::consts::PI),
                    stripe_period: rng.gen_range(0.06..0.1) * scale,
                    stripe_shade: 0.08,
                }
            })
            .collect();
        Scene { background, blobs, objects }
    }

    fn region(&self, y: f64, x: f64) -> Region {
        // Later objects occlude earlier ones.
        for (i, obj) in self.objects.iter().enumerate().rev() {
            if obj.shape.contains(y, x) {
                let (cy, cx) = obj.shape.center();
                let (s, c) = obj.split_angle.sin_cos();
                let half = usize::from((x - cx) * c + (y - cy) * s >= 0.0);
                let (ss, sc) = obj.stripe_angle.sin_cos();
                let stripe = (((x - cx) * sc + (y - cy) * ss) / obj.stripe_period).floor() as i64;
                return Region { object: i + 1, half, stripe, blob: 0 };
            }
        }
        let blob = self
            .blobs
            .iter()
            .enumerate()
            .rev()
            .find(|(_, b)| b.shape.contains(y, x))
            .map_or(0, |(i, _)| i + 1);
        Region { object: 0, half: 0, stripe: 0, blob }
    }

    fn regions(&self, h: usize, w: usize) -> Array2<Region> {
        Array2::from_shape_fn((h, w), |(y, x)| self.region(y as f64 + 0.5, x as f64 + 0.5))
    }

    fn tiers(&self, h: usize, w: usize) -> Vec<Array2<u8>> {
        let regions = self.regions(h, w);
        let keys: [fn(&Region) -> (usize, usize, i64, usize); SYNTH_TIERS] = [
            |r| (r.object, 0, 0, 0),
            |r| (r.object, r.half, 0, 0),
            |r| (r.object, r.half, r.stripe, 0),
            |r| (r.object, r.half, r.stripe, r.blob),
        ];
        keys.iter()
            .map(|key| {
                Array2::from_shape_fn((h, w), |(y, x)| {
                    let k = key(&regions[[y, x]]);
                    let right = x + 1 < w && key(&regions[[y, x + 1]]) != k;
                    let down = y + 1 < h && key(&regions[[y + 1, x]]) != k;
                    u8::from(right || down)
                })
            })
            .collect()
    }

    fn render(&self, rng: &mut ChaCha8Rng, h: usize, w: usize) -> Array3<f32> {
        let regions = self.regions(h, w);
        let noise = Normal::new(0.0f32, 0.015).expect("valid std");
        let mut image = Array3::<f32>::zeros((h, w, 3));
        for y in 0..h {
            for x in 0..w {
                let r = regions[[y, x]];
                let color = if r.object == 0 {
                    let shade = if r.blob == 0 { 0.0 } else { self.blobs[r.blob - 1].shade };
                    self.background.map(|c| c + shade)
                } else {
                    let obj = &self.objects[r.object - 1];
                    let half = if r.half == 1 { obj.half_shade } else { 0.0 };
                    let stripe = if r.stripe.rem_euclid(2) == 1 { obj.stripe_shade } else { 0.0 };
                    obj.color.map(|c| if c > 0.5 { c - half - stripe } else { c + half + stripe })
                };
                for c in 0..3 {
                    image[[y, x, c]] = (color[c] + noise.sample(rng)).clamp(0.0, 1.0);
                }
            }
        }
        image
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiers_are_nested_and_strictly_increasing() {
        let config = SynthConfig::default();
        for i in 0..12 {
            let s = synth_sample(0, i, &config).unwrap();
            assert_eq!(s.annotations.len(), SYNTH_TIERS);
            let counts: Vec<u64> = s.annotations.iter().map(edge_pixel_count).collect();
            assert!(counts.windows(2).all(|p| p[0] < p[1]), "{counts:?}");
            for k in 1..SYNTH_TIERS {
                for (a, b) in s.annotations[k - 1].iter().zip(s.annotations[k].iter()) {
                    assert!(a <= b);
                }
            }
        }
    }

    #[test]
    fn corpus_is_byte_identical_across_runs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let config = SynthConfig { height: 64, width: 64, ..SynthConfig::default() };
        let ma = generate_synthetic_corpus(3, 7, a.path(), &config).unwrap();
        let mb = generate_synthetic_corpus(3, 7, b.path(), &config).unwrap();
        assert_eq!(ma.entries, mb.entries);
        for entry in &ma.entries {
            for p in std::iter::once(&entry.image).chain(&entry.annotations) {
                assert_eq!(fs::read(a.path().join(p)).unwrap(), fs::read(b.path().join(p)).unwrap());
            }
        }
        assert_eq!(
            fs::read(a.path().join("manifest.json")).unwrap(),
            fs::read(b.path().join("manifest.json")).unwrap()
        );
        let reloaded = DatasetManifest::load(&a.path().join("manifest.json")).unwrap();
        assert_eq!(reloaded.entries.len(), 3);
        let sample = reloaded.load_sample(&reloaded.entries[0]).unwrap();
        assert_eq!(sample.annotations, synth_sample(7, 0, &config).unwrap().annotations);
    }

    #[test]
    fn different_seeds_differ() {
        let config = SynthConfig::default();
        let a = synth_sample(0, 0, &config).unwrap();
        let b = synth_sample(1, 0, &config).unwrap();
        assert_ne!(a.annotations[0], b.annotations[0]);
    }

    #[test]
    fn zero_images_rejected() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_synthetic_corpus(0, 0, dir.path(), &SynthConfig::default()).is_err());
    }
}
