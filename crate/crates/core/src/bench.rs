//! Relative-depth benchmark synthesis.
//!
//! Markers are rejection-sampled inside a horizontal band around mid-height so
//! that vertical position carries no depth cue, with pairwise minimum
//! separations in disparity and in pixel distance. The closest marker
//! (largest disparity) is therefore unique.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox_codec::ImageSize;
use crate::datagen::scene::{Scene, CATEGORIES};
use crate::depth_map::DepthMap;
use crate::error::{Error, Result};
use crate::seeding::rng_for;

pub const MAX_MARKERS: usize = 5;

/// Consecutive draws rejected before a partial marker set is abandoned.
const RESTART_AFTER: usize = 200;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Marker {
    pub label: String,
    pub x: u32,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MarkerSet {
    pub markers: Vec<Marker>,
}

pub fn label_for(index: usize) -> String {
    char::from(b'A' + index as u8).to_string()
}

pub fn label_index(label: &str) -> Option<usize> {
    let mut chars = label.chars();
    match (chars.next(), chars.next()) {
        (Some(c @ 'A'..='E'), None) => Some(c as usize - 'A' as usize),
        _ => None,
    }
}

impl MarkerSet {
    pub fn len(&self) -> usize {
        self.markers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.markers.is_empty()
    }

    /// Disparity under each marker, read nearest-neighbor from `depth`.
    pub fn disparities(&self, depth: &DepthMap, frame: ImageSize) -> Vec<f64> {
        self.markers
            .iter()
            .map(|m| {
                depth.sample_nearest(
                    f64::from(m.x),
                    f64::from(m.y),
                    frame.width as usize,
                    frame.height as usize,
                )
            })
            .collect()
    }

    /// Label of the marker with the largest disparity.
    pub fn closest(&self, depth: &DepthMap, frame: ImageSize) -> Option<String> {
        argmax(&self.disparities(depth, frame)).map(|i| self.markers[i].label.clone())
    }

    /// Verifies labels and the pairwise separation constraints.
    pub fn validate(&self, depth: &DepthMap, frame: ImageSize, config: &PlacementConfig) -> Result<()> {
        for (i, m) in self.markers.iter().enumerate() {
            if m.label != label_for(i) {
                return Err(Error::DegenerateMarkers(format!(
                    "marker {i} is labeled `{}`",
                    m.label
                )));
            }
            if m.x >= frame.width || m.y >= frame.height {
                return Err(Error::DegenerateMarkers(format!(
                    "marker {} lies outside the image",
                    m.label
                )));
            }
        }
        let disparities = self.disparities(depth, frame);
        let min_xy = config.min_pixel_distance(frame);
        for i in 0..self.markers.len() {
            for j in i + 1..self.markers.len() {
                let (a, b) = (&self.markers[i], &self.markers[j]);
                if (disparities[i] - disparities[j]).abs() < config.delta_depth {
                    return Err(Error::DegenerateMarkers(format!(
                        "{} and {} differ by less than {} in disparity",
                        a.label, b.label, config.delta_depth
                    )));
                }
                if pixel_distance(a, b) < min_xy {
                    return Err(Error::DegenerateMarkers(format!(
                        "{} and {} are closer than {min_xy:.1} px",
                        a.label, b.label
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn argmax(values: &[f64]) -> Option<usize> {
    values
        .iter()
        .enumerate()
        .fold(None, |best: Option<(usize, f64)>, (i, &v)| match best {
            Some((_, b)) if b >= v => best,
            _ => Some((i, v)),
        })
        .map(|(i, _)| i)
}

fn pixel_distance(a: &Marker, b: &Marker) -> f64 {
    let dx = f64::from(a.x) - f64::from(b.x);
    let dy = f64::from(a.y) - f64::from(b.y);
    dx.hypot(dy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementConfig {
    /// Minimum pairwise disparity gap.
    pub delta_depth: f64,
    /// Minimum pairwise distance as a fraction of `min(width, height)`.
    pub delta_xy: f64,
    /// Allowed row range as fractions of the image height.
    pub band: (f64, f64),
    /// Candidate draws per placement before giving up.
    pub max_attempts: usize,
}

impl Default for PlacementConfig {
    fn default() -> Self {
        Self {
            delta_depth: 0.15,
            delta_xy: 0.15,
            band: (0.40, 0.60),
            max_attempts: 10_000,
        }
    }
}

impl PlacementConfig {
    pub fn min_pixel_distance(&self, frame: ImageSize) -> f64 {
        self.delta_xy * f64::from(frame.width.min(frame.height))
    }

    fn rows(&self, frame: ImageSize) -> Option<(u32, u32)> {
        let h = f64::from(frame.height);
        let lo = (self.band.0 * h).ceil().max(0.0) as u32;
        let hi = ((self.band.1 * h).floor() as u32).min(frame.height - 1);
        (lo <= hi).then_some((lo, hi))
    }
}

/// Rejection-samples `n` labeled markers on `depth`; coordinates are in the
/// `frame` image.
pub fn place_markers<R: Rng + ?Sized>(
    depth: &DepthMap,
    frame: ImageSize,
    n: usize,
    config: &PlacementConfig,
    rng: &mut R,
) -> Result<MarkerSet> {
    if n == 0 || n > MAX_MARKERS {
        return Err(Error::DegenerateMarkers(format!(
            "marker count must be 1..={MAX_MARKERS}, got {n}"
        )));
    }
    let Some((row_lo, row_hi)) = config.rows(frame) else {
        return Err(Error::PlacementInfeasible(0));
    };
    let min_xy = config.min_pixel_distance(frame);
    let lookup = |x: u32, y: u32| {
        depth.sample_nearest(
            f64::from(x),
            f64::from(y),
            frame.width as usize,
            frame.height as usize,
        )
    };

    let mut placed: Vec<(u32, u32, f64)> = Vec::with_capacity(n);
    let mut rejected_in_row = 0;
    for _ in 0..config.max_attempts {
        let x = rng.random_range(0..frame.width);
        let y = rng.random_range(row_lo..=row_hi);
        let d = lookup(x, y);
        let compatible = placed.iter().all(|&(px, py, pd)| {
            let dist = (f64::from(px) - f64::from(x)).hypot(f64::from(py) - f64::from(y));
            (pd - d).abs() >= config.delta_depth && dist >= min_xy
        });
        if compatible {
            placed.push((x, y, d));
            rejected_in_row = 0;
            if placed.len() == n {
                return Ok(MarkerSet {
                    markers: placed
                        .iter()
                        .enumerate()
                        .map(|(i, &(x, y, _))| Marker {
                            label: label_for(i),
                            x,
                            y,
                        })
                        .collect(),
                });
            }
        } else {
            rejected_in_row += 1;
            if rejected_in_row >= RESTART_AFTER {
                placed.clear();
                rejected_in_row = 0;
            }
        }
    }
    Err(Error::PlacementInfeasible(config.max_attempts))
}

/// One relative-depth benchmark question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub id: String,
    pub depth_pgm_path: String,
    pub image: ImageSize,
    pub markers: MarkerSet,
    pub question: String,
    pub gt_label: String,
}

impl BenchmarkItem {
    pub fn n_markers(&self) -> usize {
        self.markers.len()
    }
}

/// Question text. Two-point items name both labels; harder variants give
/// neither the count nor the labels.
pub fn depth_question(n: usize) -> String {
    if n == 2 {
        "Two points are marked on the image, A and B. Which point is closer to the camera?"
            .to_owned()
    } else {
        "Some points are marked on the image. Which marked point is closest to the camera?"
            .to_owned()
    }
}

/// Relative path under which a scene's depth map is stored next to a suite.
pub fn depth_path(scene: &Scene) -> String {
    format!("depth/{}.pgm", scene.id)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkSuite {
    pub items: Vec<BenchmarkItem>,
    /// Scenes where placement was infeasible.
    pub skipped: usize,
}

/// Places `n` markers on every scene; infeasible scenes are skipped and counted.
pub fn build_benchmark(
    scenes: &[Scene],
    n: usize,
    config: &PlacementConfig,
    seed: u64,
) -> Result<BenchmarkSuite> {
    let tag = format!("bench-n{n}");
    let placed: Vec<Option<BenchmarkItem>> = scenes
        .par_iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = rng_for(seed, &tag, i as u64);
            match place_markers(&scene.depth, scene.size, n, config, &mut rng) {
                Ok(markers) => {
                    let gt_label = markers
                        .closest(&scene.depth, scene.size)
                        .expect("at least one marker");
                    Ok(Some(BenchmarkItem {
                        id: format!("n{n}-{i:04}"),
                        depth_pgm_path: depth_path(scene),
                        image: scene.size,
                        markers,
                        question: depth_question(n),
                        gt_label,
                    }))
                }
                Err(Error::PlacementInfeasible(_)) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let skipped = placed.iter().filter(|p| p.is_none()).count();
    Ok(BenchmarkSuite {
        items: placed.into_iter().flatten().collect(),
        skipped,
    })
}

/// One counting question with its ground-truth count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountItem {
    pub id: String,
    pub image_id: String,
    pub category: String,
    pub question: String,
    pub gt_count: u32,
}

pub fn count_question(category: &str) -> String {
    format!("How many {category} instances are in the image?")
}

/// One counting item per scene. The category is drawn from all known
/// categories, so zero counts occur naturally.
pub fn build_count_suite(scenes: &[Scene], seed: u64) -> Vec<CountItem> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, scene)| {
            let mut rng = rng_for(seed, "count-suite", i as u64);
            let category = CATEGORIES[rng.random_range(0..CATEGORIES.len())];
            CountItem {
                id: format!("count-{i:04}"),
                image_id: scene.id.clone(),
                category: category.to_owned(),
                question: count_question(category),
                gt_count: scene.count(category) as u32,
            }
        })
        .collect()
}
