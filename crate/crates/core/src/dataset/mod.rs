//! Multi-annotator edge datasets: label-subset combination, granularity
//! normalization, augmentation and batch assembly.

mod augment;
mod manifest;
mod synth;

pub use augment::{train_batch, train_batch_from_pool, AugmentConfig, TrainBatch};
pub use manifest::{dataset_granularity_bounds, load_captions, DatasetManifest, ManifestEntry, Split};
pub use synth::{generate_synthetic_corpus, synth_sample, SynthConfig, SYNTH_TIERS};

use ndarray::{Array2, Array3, Zip};

use crate::error::{invalid, GedError, Result};
use crate::granularity::Granularity;

/// An RGB image (values in `[0, 1]`) with `K ≥ 1` binary annotator maps.
#[derive(Clone, Debug)]
pub struct AnnotatedImage {
    pub id: String,
    pub image: Array3<f32>,
    pub annotations: Vec<Array2<u8>>,
}

impl AnnotatedImage {
    pub fn new(id: impl Into<String>, image: Array3<f32>, annotations: Vec<Array2<u8>>) -> Result<Self> {
        let id = id.into();
        let (h, w, c) = image.dim();
        if c != 3 {
            return Err(invalid(format!("{id}: image has {c} channels, expected 3")));
        }
        if annotations.is_empty() {
            return Err(invalid(format!("{id}: no annotations")));
        }
        for (k, a) in annotations.iter().enumerate() {
            if a.dim() != (h, w) {
                return Err(invalid(format!(
                    "{id}: annotation {k} is {:?}, image is {:?}",
                    a.dim(),
                    (h, w)
                )));
            }
            if a.iter().any(|&v| v > 1) {
                return Err(invalid(format!("{id}: annotation {k} is not binary")));
            }
        }
        Ok(Self { id, image, annotations })
    }

    pub fn height(&self) -> usize {
        self.image.dim().0
    }

    pub fn width(&self) -> usize {
        self.image.dim().1
    }
}

/// One combined edge map with its granularity and the annotators that formed it.
#[derive(Clone, Debug, PartialEq)]
pub struct GranularitySample {
    pub edge_map: Array2<u8>,
    pub granularity: Granularity,
    /// Zero-based annotator indices.
    pub subset: Vec<usize>,
}

/// All annotator subsets of size ≥ 2, in lexicographic order of their
/// (zero-based) index lists. There are `2^K - K - 1` of them.
pub fn enumerate_label_subsets(annotators: usize) -> Result<Vec<Vec<usize>>> {
    if annotators < 2 {
        return Err(GedError::DegenerateAnnotation { annotators });
    }
    fn extend(start: usize, k: usize, current: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        for i in start..k {
            current.push(i);
            if current.len() >= 2 {
                out.push(current.clone());
            }
            extend(i + 1, k, current, out);
            current.pop();
        }
    }
    let mut out = Vec::with_capacity((1usize << annotators) - annotators - 1);
    extend(0, annotators, &mut Vec::new(), &mut out);
    Ok(out)
}

/// Pixel-wise logical OR of the selected annotator maps.
pub fn combine_labels(annotations: &[Array2<u8>], subset: &[usize]) -> Result<Array2<u8>> {
    let first = *subset
        .first()
        .ok_or_else(|| invalid("cannot combine an empty subset"))?;
    let shape = annotations
        .get(first)
        .ok_or_else(|| invalid(format!("annotator index {first} out of range")))?
        .dim();
    let mut out = Array2::<u8>::zeros(shape);
    for &k in subset {
        let map = annotations
            .get(k)
            .ok_or_else(|| invalid(format!("annotator index {k} out of range")))?;
        if map.dim() != shape {
            return Err(invalid(format!(
                "annotation shapes differ: {:?} vs {:?}",
                map.dim(),
                shape
            )));
        }
        Zip::from(&mut out).and(map).for_each(|o, &m| *o |= u8::from(m != 0));
    }
    Ok(out)
}

pub fn edge_pixel_count(map: &Array2<u8>) -> u64 {
    map.iter().filter(|&&v| v != 0).count() as u64
}

/// Min-max normalizes edge-pixel counts to `[0, 1]`.
pub fn normalize_counts(counts: &[u64]) -> Result<Vec<f64>> {
    let (min, max) = match (counts.iter().min(), counts.iter().max()) {
        (Some(&min), Some(&max)) => (min, max),
        _ => return Err(invalid("no counts to normalize")),
    };
    if min == max {
        return Err(GedError::DegenerateGranularity { count: min });
    }
    let range = (max - min) as f64;
    Ok(counts.iter().map(|&c| (c - min) as f64 / range).collect())
}

pub fn compute_granularities(combined_maps: &[Array2<u8>]) -> Result<Vec<f64>> {
    let counts: Vec<u64> = combined_maps.iter().map(edge_pixel_count).collect();
    normalize_counts(&counts)
}

/// The per-image label pool: every combined label with its granularity.
///
/// Single-annotator images and images whose combined labels all have the same
/// edge-pixel count are in single-label mode: granularities are `Disabled`.
#[derive(Clone, Debug)]
pub struct LabelPool {
    pub subsets: Vec<Vec<usize>>,
    pub maps: Vec<Array2<u8>>,
    pub granularities: Vec<Granularity>,
}

impl LabelPool {
    pub fn build(sample: &AnnotatedImage) -> Result<Self> {
        let k = sample.annotations.len();
        let subsets = match enumerate_label_subsets(k) {
            Ok(s) => s,
            Err(GedError::DegenerateAnnotation { .. }) => {
                return Ok(Self {
                    subsets: vec![vec![0]],
                    maps: vec![sample.annotations[0].clone()],
                    granularities: vec![Granularity::Disabled],
                })
            }
            Err(e) => return Err(e),
        };
        let maps = subsets
            .iter()
            .map(|s| combine_labels(&sample.annotations, s))
            .collect::<Result<Vec<_>>>()?;
        let granularities = match compute_granularities(&maps) {
            Ok(g) => g.into_iter().map(Granularity::Level).collect(),
            Err(GedError::DegenerateGranularity { .. }) => vec![Granularity::Disabled; maps.len()],
            Err(e) => return Err(e),
        };
        Ok(Self { subsets, maps, granularities })
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    pub fn is_single_label(&self) -> bool {
        self.granularities.iter().all(Granularity::is_disabled)
    }

    pub fn counts(&self) -> Vec<u64> {
        self.maps.iter().map(edge_pixel_count).collect()
    }
}
