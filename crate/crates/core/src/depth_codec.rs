//! Patch codebook quantizer for depth maps.
//!
//! A canonical 320×320 map is cut into a 10×10 grid of 32×32 patches; each
//! patch is replaced by the index of its nearest centroid. Decoding pastes the
//! centroid patches back. The codebook is trained with Lloyd's algorithm from
//! a k-means++ seeding.

use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution as _;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_map::{DepthMap, CANONICAL_SIZE};
use crate::error::{Error, Result};
use crate::vocab::{TokenClass, TokenId, Vocabulary, DEPTH_CODES};

pub const PATCH: usize = 32;
pub const PATCH_DIM: usize = PATCH * PATCH;
pub const GRID: usize = CANONICAL_SIZE / PATCH;
pub const GRID_CELLS: usize = GRID * GRID;
/// Length of a delimited depth-token span.
pub const DEPTH_SPAN_LEN: usize = GRID_CELLS + 2;

/// 10×10 row-major grid of code indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CodeGrid {
    indices: [u8; GRID_CELLS],
}

impl CodeGrid {
    pub fn new(indices: [u8; GRID_CELLS]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i as usize >= DEPTH_CODES) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                k: DEPTH_CODES,
            });
        }
        Ok(Self { indices })
    }

    pub fn filled(index: u8) -> Result<Self> {
        Self::new([index; GRID_CELLS])
    }

    pub fn from_slice(indices: &[u8]) -> Result<Self> {
        let array: [u8; GRID_CELLS] =
            indices.try_into().map_err(|_| Error::ShapeMismatch {
                expected: format!("{GRID_CELLS} code indices"),
                got: format!("{} code indices", indices.len()),
            })?;
        Self::new(array)
    }

    pub fn indices(&self) -> &[u8; GRID_CELLS] {
        &self.indices
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.indices[row * GRID + col]
    }

    pub fn with_cell(mut self, cell: usize, index: u8) -> Result<Self> {
        self.indices[cell] = index;
        Self::new(self.indices)
    }
}

/// Flat storage of 32×32 training patches.
#[derive(Debug, Clone, Default)]
pub struct PatchSet {
    data: Vec<f32>,
}

impl PatchSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.data.len() / PATCH_DIM
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f32] {
        &self.data[i * PATCH_DIM..(i + 1) * PATCH_DIM]
    }

    pub fn push(&mut self, patch: &[f32]) {
        assert_eq!(patch.len(), PATCH_DIM, "patch must hold {PATCH_DIM} values");
        self.data.extend_from_slice(patch);
    }

    /// Adds all 100 grid patches of a canonical map.
    pub fn extend_from_map(&mut self, map: &DepthMap) -> Result<()> {
        self.extend_from_map_cells(map, 0..GRID_CELLS)
    }

    /// Adds the listed grid cells (row-major indices) of a canonical map.
    pub fn extend_from_map_cells(
        &mut self,
        map: &DepthMap,
        cells: impl IntoIterator<Item = usize>,
    ) -> Result<()> {
        for cell in cells {
            let patch = patch_of(map, cell)?;
            self.data.extend(patch.iter().map(|&v| v as f32));
        }
        Ok(())
    }
}

/// Training patches from `maps`, keeping `per_map` randomly chosen cells of
/// each (all 100 when `per_map` is at least that).
pub fn sample_patches<'a>(
    maps: impl IntoIterator<Item = &'a DepthMap>,
    per_map: usize,
    seed: u64,
) -> Result<PatchSet> {
    let mut patches = PatchSet::new();
    for (i, map) in maps.into_iter().enumerate() {
        if per_map >= GRID_CELLS {
            patches.extend_from_map(map)?;
        } else {
            let mut rng = crate::seeding::rng_for(seed, "patch-sample", i as u64);
            let mut cells = rand::seq::index::sample(&mut rng, GRID_CELLS, per_map).into_vec();
            cells.sort_unstable();
            patches.extend_from_map_cells(map, cells)?;
        }
    }
    Ok(patches)
}

/// Copies grid cell `cell` (row-major) of a canonical map.
pub fn patch_of(map: &DepthMap, cell: usize) -> Result<Vec<f64>> {
    map.ensure_canonical()?;
    let (row, col) = (cell / GRID, cell % GRID);
    let mut patch = Vec::with_capacity(PATCH_DIM);
    for y in row * PATCH..(row + 1) * PATCH {
        let start = y * CANONICAL_SIZE + col * PATCH;
        patch.extend_from_slice(&map.values()[start..start + PATCH]);
    }
    Ok(patch)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Training stops once no centroid moves farther (L2) than this.
    pub tol: f64,
}

impl Default for TrainParams {
    fn default() -> Self {
        Self {
            k: DEPTH_CODES,
            seed: 7,
            max_iters: 25,
            tol: 1e-4,
        }
    }
}

/// Diagnostics from a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Sum of squared errors after each assignment step, in order.
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub reseeded: usize,
}

impl TrainReport {
    /// Whether the objective never increased (up to summation round-off).
    pub fn is_monotone(&self) -> bool {
        self.objective
            .windows(2)
            .all(|w| w[1] <= w[0] + 1e-9 * w[0].abs().max(1e-300))
    }

    /// Mean squared error per value of the final assignment.
    pub fn final_mse(&self, patches: usize) -> f64 {
        self.objective.last().copied().unwrap_or(0.0) / (patches * PATCH_DIM) as f64
    }
}

/// 128 (or fewer, for tests) centroid patches.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    codes: Vec<f32>,
    k: usize,
    seed: u64,
    trained_on: usize,
    norms: Vec<f64>,
}

impl Codebook {
    /// Builds a codebook from explicit centroid patches.
    pub fn from_centroids(centroids: &[Vec<f32>], seed: u64, trained_on: usize) -> Result<Self> {
        if centroids.is_empty() || centroids.len() > DEPTH_CODES {
            return Err(Error::CodebookFormat(format!(
                "codebook must hold 1..={DEPTH_CODES} codes, got {}",
                centroids.len()
            )));
        }
        let mut codes = Vec::with_capacity(centroids.len() * PATCH_DIM);
        for c in centroids {
            if c.len() != PATCH_DIM {
                return Err(Error::CodebookFormat(format!(
                    "centroid has {} values, expected {PATCH_DIM}",
                    c.len()
                )));
            }
            codes.extend_from_slice(c);
        }
        Self::from_flat(codes, seed, trained_on)
    }

    fn from_flat(codes: Vec<f32>, seed: u64, trained_on: usize) -> Result<Self> {
        if codes.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
            return Err(Error::CodebookFormat("centroid values must lie in [0,1]".into()));
        }
        let k = codes.len() / PATCH_DIM;
        let norms = codes
            .chunks_exact(PATCH_DIM)
            .map(|c| c.iter().map(|&v| f64::from(v) * f64::from(v)).sum())
            .collect();
        Ok(Self {
            codes,
            k,
            seed,
            trained_on,
            norms,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn trained_on(&self) -> usize {
        self.trained_on
    }

    pub fn centroid(&self, code: usize) -> &[f32] {
        &self.codes[code * PATCH_DIM..(code + 1) * PATCH_DIM]
    }

    /// Index of the nearest centroid to `patch`; ties go to the lowest index.
    pub fn nearest(&self, patch: &[f64]) -> usize {
        let mut best = 0;
        let mut best_score = f64::INFINITY;
        for code in 0..self.k {
            // ‖x‖² is common to all codes and dropped.
            let score = self.norms[code] - 2.0 * dot_mixed(self.centroid(code), patch);
            if score < best_score {
                best_score = score;
                best = code;
            }
        }
        best
    }

    pub fn encode(&self, map: &DepthMap) -> Result<CodeGrid> {
        map.ensure_canonical()?;
        let mut indices = [0u8; GRID_CELLS];
        for (cell, slot) in indices.iter_mut().enumerate() {
            *slot = self.nearest(&patch_of(map, cell)?) as u8;
        }
        CodeGrid::new(indices)
    }

    pub fn decode(&self, grid: &CodeGrid) -> Result<DepthMap> {
        if let Some(&bad) = grid.indices().iter().find(|&&i| i as usize >= self.k) {
            return Err(Error::IndexOutOfRange {
                index: bad as usize,
                k: self.k,
            });
        }
        let mut values = vec![0.0; CANONICAL_SIZE * CANONICAL_SIZE];
        for (cell, &code) in grid.indices().iter().enumerate() {
            paste(&mut values, cell, self.centroid(code as usize).iter().map(|&v| f64::from(v)));
        }
        DepthMap::new(CANONICAL_SIZE, CANONICAL_SIZE, values)
    }

    /// Writes the JSON header to `path` and the raw centroid block to a
    /// sibling `.bin` file with the same stem.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bin = bin_path(path);
        let name = bin
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default();
        std::fs::write(&bin, self.to_le_bytes())?;
        std::fs::write(path, self.header_json(&name)?)?;
        Ok(())
    }

    /// Header naming `data` as the centroid file.
    pub fn header_json(&self, data: &str) -> Result<String> {
        let header = CodebookHeader {
            k: self.k,
            patch: PATCH,
            seed: self.seed,
            trained_on: self.trained_on,
            data: data.to_owned(),
        };
        Ok(serde_json::to_string_pretty(&header)? + "\n")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let header: CodebookHeader = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if header.patch != PATCH {
            return Err(Error::CodebookFormat(format!(
                "patch size {} unsupported",
                header.patch
            )));
        }
        let bin = path.with_file_name(&header.data);
        let bytes = std::fs::read(bin)?;
        if bytes.len() != header.k * PATCH_DIM * 4 {
            return Err(Error::CodebookFormat(format!(
                "expected {} bytes of centroid data, found {}",
                header.k * PATCH_DIM * 4,
                bytes.len()
            )));
        }
        let codes = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Self::from_flat(codes, header.seed, header.trained_on)
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.codes.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct CodebookHeader {
    k: usize,
    patch: usize,
    seed: u64,
    trained_on: usize,
    data: String,
}

/// Centroid file that accompanies a codebook header.
pub fn bin_path(path: &Path) -> PathBuf {
    path.with_extension("bin")
}

/// Writes one 32×32 patch into a canonical row-major buffer.
pub(crate) fn paste(values: &mut [f64], cell: usize, patch: impl IntoIterator<Item = f64>) {
    let (row, col) = (cell / GRID, cell % GRID);
    let mut patch = patch.into_iter();
    for y in row * PATCH..(row + 1) * PATCH {
        let start = y * CANONICAL_SIZE + col * PATCH;
        for slot in &mut values[start..start + PATCH] {
            *slot = patch.next().expect("patch holds 1024 values");
        }
    }
}

fn dot_mixed(a: &[f32], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    for (x, y) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += f64::from(x[i]) * y[i];
        }
    }
    acc.iter().sum()
}

fn sq_norm(a: &[f32]) -> f64 {
    a.iter().map(|&v| f64::from(v) * f64::from(v)).sum()
}

fn sq_dist(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - y;
            d * d
        })
        .sum()
}

/// Trains a codebook with k-means++ seeding followed by Lloyd iterations.
pub fn train_codebook(patches: &PatchSet, params: &TrainParams) -> Result<(Codebook, TrainReport)> {
    let n = patches.len();
    let k = params.k;
    if k == 0 || k > DEPTH_CODES {
        return Err(Error::CodebookFormat(format!(
            "k must be in 1..={DEPTH_CODES}, got {k}"
        )));
    }
    if n < k {
        return Err(Error::InsufficientData { needed: k, got: n });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let patch_norms: Vec<f64> = (0..n).map(|i| sq_norm(patches.get(i))).collect();

    let mut centroids = kmeans_plus_plus(patches, k, &mut rng);
    let mut report = TrainReport {
        objective: Vec::new(),
        iterations: 0,
        converged: false,
        reseeded: 0,
    };

    loop {
        let assignment = assign(patches, &patch_norms, &centroids);
        report
            .objective
            .push(assignment.iter().map(|&(_, d)| d).sum::<f64>());
        if report.converged || report.iterations == params.max_iters {
            break;
        }
        report.iterations += 1;

        // Deterministic reduction: patches are summed in index order.
        let mut sums = vec![0.0f64; k * PATCH_DIM];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assignment.iter().enumerate() {
            counts[c] += 1;
            for (s, &v) in sums[c * PATCH_DIM..(c + 1) * PATCH_DIM]
                .iter_mut()
                .zip(patches.get(i))
            {
                *s += f64::from(v);
            }
        }

        let mut next = vec![0.0f64; k * PATCH_DIM];
        let mut empty = Vec::new();
        for c in 0..k {
            let dst = &mut next[c * PATCH_DIM..(c + 1) * PATCH_DIM];
            if counts[c] == 0 {
                empty.push(c);
                dst.copy_from_slice(&centroids[c * PATCH_DIM..(c + 1) * PATCH_DIM]);
            } else {
                let inv = counts[c] as f64;
                for (d, s) in dst.iter_mut().zip(&sums[c * PATCH_DIM..(c + 1) * PATCH_DIM]) {
                    *d = (s / inv).clamp(0.0, 1.0);
                }
            }
        }

        if !empty.is_empty() {
            // Re-seed empty clusters from the patches worst served so far.
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                assignment[b]
                    .1
                    .total_cmp(&assignment[a].1)
                    .then(a.cmp(&b))
            });
            for (&c, &i) in empty.iter().zip(&order) {
                if assignment[i].1 <= 0.0 {
                    break;
                }
                for (d, &v) in next[c * PATCH_DIM..(c + 1) * PATCH_DIM]
                    .iter_mut()
                    .zip(patches.get(i))
                {
                    *d = f64::from(v);
                }
                report.reseeded += 1;
            }
        }

        let shift = (0..k)
            .map(|c| {
                let range = c * PATCH_DIM..(c + 1) * PATCH_DIM;
                centroids[range.clone()]
                    .iter()
                    .zip(&next[range])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt()
            })
            .fold(0.0, f64::max);
        centroids = next;
        report.converged = shift < params.tol;
    }

    let codes = centroids.iter().map(|&v| v as f32).collect();
    Ok((Codebook::from_flat(codes, params.seed, n)?, report))
}

fn kmeans_plus_plus(patches: &PatchSet, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = patches.len();
    let mut centroids = Vec::with_capacity(k * PATCH_DIM);
    let push = |centroids: &mut Vec<f64>, i: usize| {
        centroids.extend(patches.get(i).iter().map(|&v| f64::from(v)));
    };
    push(&mut centroids, rng.random_range(0..n));
    let mut nearest: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| sq_dist(patches.get(i), &centroids[..PATCH_DIM]))
        .collect();
    for c in 1..k {
        let pick = match WeightedIndex::new(&nearest) {
            Ok(dist) => dist.sample(rng),
            // Every patch already coincides with a centroid.
            Err(_) => rng.random_range(0..n),
        };
        push(&mut centroids, pick);
        let latest = &centroids[c * PATCH_DIM..(c + 1) * PATCH_DIM];
        nearest
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, d)| *d = d.min(sq_dist(patches.get(i), latest)));
    }
    centroids
}

/// Nearest centroid and squared distance for every patch.
fn assign(patches: &PatchSet, patch_norms: &[f64], centroids: &[f64]) -> Vec<(usize, f64)> {
    let norms: Vec<f64> = centroids
        .chunks_exact(PATCH_DIM)
        .map(|c| c.iter().map(|v| v * v).sum())
        .collect();
    (0..patches.len())
        .into_par_iter()
        .map(|i| {
            let patch = patches.get(i);
            let mut best = (0, f64::INFINITY);
            for (c, centroid) in centroids.chunks_exact(PATCH_DIM).enumerate() {
                let d = patch_norms[i] + norms[c] - 2.0 * dot_mixed(patch, centroid);
                if d < best.1 {
                    best = (c, d);
                }
            }
            (best.0, best.1.max(0.0))
        })
        .collect()
}

/// `[DEPTH_START, DEPTH_c0, …, DEPTH_c99, DEPTH_END]`.
pub fn grid_to_tokens(grid: &CodeGrid, vocab: &Vocabulary) -> Vec<TokenId> {
    let mut seq = Vec::with_capacity(DEPTH_SPAN_LEN);
    seq.push(vocab.depth_start());
    seq.extend(grid.indices().iter().map(|&i| vocab.depth_token(i as usize)));
    seq.push(vocab.depth_end());
    seq
}

pub fn tokens_to_grid(seq: &[TokenId], vocab: &Vocabulary) -> Result<CodeGrid> {
    if seq.len() != DEPTH_SPAN_LEN {
        return Err(Error::MalformedSequence(format!(
            "expected {DEPTH_SPAN_LEN} tokens, got {}",
            seq.len()
        )));
    }
    if seq[0] != vocab.depth_start() {
        return Err(Error::MalformedSequence("missing DEPTH_START".into()));
    }
    if seq[DEPTH_SPAN_LEN - 1] != vocab.depth_end() {
        return Err(Error::MalformedSequence("missing DEPTH_END".into()));
    }
    let mut indices = [0u8; GRID_CELLS];
    for (slot, &token) in indices.iter_mut().zip(&seq[1..DEPTH_SPAN_LEN - 1]) {
        let code = vocab.depth_code(token).ok_or_else(|| {
            Error::MalformedSequence(format!("token {token} inside the span is not a DEPTH code"))
        })?;
        *slot = code as u8;
    }
    CodeGrid::new(indices)
}

/// Finds the first complete `DEPTH_START … DEPTH_END` span and parses it.
/// Returns `Ok(None)` if the sequence contains no DEPTH_START at all.
pub fn find_depth_span(seq: &[TokenId], vocab: &Vocabulary) -> Result<Option<CodeGrid>> {
    let Some(start) = seq
        .iter()
        .position(|&t| vocab.class_of(t) == Some(TokenClass::DepthStart))
    else {
        return Ok(None);
    };
    let end = seq[start..]
        .iter()
        .position(|&t| t == vocab.depth_end())
        .map(|off| start + off)
        .ok_or_else(|| Error::MalformedSequence("unterminated depth span".into()))?;
    tokens_to_grid(&seq[start..=end], vocab).map(Some)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_patch(rng: &mut ChaCha8Rng) -> Vec<f32> {
        (0..PATCH_DIM).map(|_| rng.random::<f32>()).collect()
    }

    fn widen(patch: &[f32]) -> Vec<f64> {
        patch.iter().map(|&v| f64::from(v)).collect()
    }

    fn brute_force_nearest(cb: &Codebook, patch: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for code in 0..cb.k() {
            let d: f64 = patch
                .iter()
                .zip(cb.centroid(code))
                .map(|(&a, &b)| (a - f64::from(b)).powi(2))
                .sum();
            if d < best.1 {
                best = (code, d);
            }
        }
        best.0
    }

    #[test]
    fn exact_fit_with_k_distinct_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut set = PatchSet::new();
        for _ in 0..16 {
            set.push(&random_patch(&mut rng));
        }
        let params = TrainParams {
            k: 16,
            ..TrainParams::default()
        };
        let (cb, report) = train_codebook(&set, &params).unwrap();
        assert!(*report.objective.last().unwrap() < 1e-9);
        for i in 0..16 {
            assert_eq!(cb.centroid(cb.nearest(&widen(set.get(i)))), set.get(i));
        }
    }

    #[test]
    fn constant_patches_collapse() {
        let mut set = PatchSet::new();
        for _ in 0..200 {
            set.push(&[0.5; PATCH_DIM]);
        }
        let (cb, report) = train_codebook(&set, &TrainParams::default()).unwrap();
        assert_eq!(cb.k(), 128);
        for code in 0..cb.k() {
            assert!(cb.centroid(code).iter().all(|&v| v == 0.5));
        }
        assert_eq!(*report.objective.last().unwrap(), 0.0);
        assert_eq!(cb.nearest(&[0.5; PATCH_DIM]), 0);
    }

    #[test]
    fn too_few_patches() {
        let mut set = PatchSet::new();
        set.push(&[0.0; PATCH_DIM]);
        assert!(matches!(
            train_codebook(&set, &TrainParams::default()),
            Err(Error::InsufficientData { needed: 128, got: 1 })
        ));
    }

    #[test]
    fn lloyd_descends_on_random_patches() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut set = PatchSet::new();
        for _ in 0..10_000 {
            set.push(&random_patch(&mut rng));
        }
        let params = TrainParams {
            seed: 7,
            max_iters: 6,
            ..TrainParams::default()
        };
        let (cb, report) = train_codebook(&set, &params).unwrap();
        assert!(report.is_monotone(), "{:?}", report.objective);
        assert!(report.objective.last().unwrap() <= &report.objective[0]);

        // Independently recompute the final objective with the stored codebook.
        let recomputed: f64 = (0..set.len())
            .map(|i| {
                let p = set.get(i);
                let c = cb.centroid(brute_force_nearest(&cb, &widen(p)));
                p.iter()
                    .zip(c)
                    .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
                    .sum::<f64>()
            })
            .sum();
        let last = *report.objective.last().unwrap();
        assert!((recomputed - last).abs() <= 1e-3 * last);
    }

    #[test]
    fn training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut set = PatchSet::new();
        for _ in 0..300 {
            set.push(&random_patch(&mut rng));
        }
        let params = TrainParams {
            max_iters: 3,
            ..TrainParams::default()
        };
        let a = train_codebook(&set, &params).unwrap();
        let b = train_codebook(&set, &params).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_centroid_encodes_constant_zero_map() {
        let centroids: Vec<Vec<f32>> = (0..8)
            .map(|c| vec![if c == 3 { 0.0 } else { 0.2 + c as f32 * 0.1 }; PATCH_DIM])
            .collect();
        let cb = Codebook::from_centroids(&centroids, 0, 0).unwrap();
        let map = DepthMap::constant(320, 320, 0.0);
        let grid = cb.encode(&map).unwrap();
        assert!(grid.indices().iter().all(|&i| i == 3));
        let back = cb.decode(&CodeGrid::filled(3).unwrap()).unwrap();
        assert!(back.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_code_always_wins() {
        let cb = Codebook::from_centroids(&[vec![0.9; PATCH_DIM]], 0, 0).unwrap();
        let map = DepthMap::from_fn(320, 320, |x, y| ((x * 7 + y * 13) % 100) as f64 / 99.0);
        assert!(cb.encode(&map).unwrap().indices().iter().all(|&i| i == 0));
    }

    #[test]
    fn shape_and_range_errors() {
        let cb = Codebook::from_centroids(&[vec![0.1; PATCH_DIM], vec![0.2; PATCH_DIM]], 0, 0)
            .unwrap();
        assert!(matches!(
            cb.encode(&DepthMap::constant(64, 64, 0.1)),
            Err(Error::ShapeMismatch { .. })
        ));
        assert!(matches!(
            cb.decode(&CodeGrid::filled(5).unwrap()),
            Err(Error::IndexOutOfRange { index: 5, k: 2 })
        ));
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let cb = Codebook::from_centroids(
            &[vec![0.0; PATCH_DIM], vec![1.0; PATCH_DIM], vec![0.0; PATCH_DIM]],
            0,
            0,
        )
        .unwrap();
        assert_eq!(cb.nearest(&[0.5; PATCH_DIM]), 0);
        assert_eq!(cb.nearest(&[0.1; PATCH_DIM]), 0);
    }

    #[test]
    fn encode_matches_brute_force_and_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let centroids: Vec<Vec<f32>> = (0..128).map(|_| random_patch(&mut rng)).collect();
        let cb = Codebook::from_centroids(&centroids, 5, 0).unwrap();
        for _ in 0..4 {
            let map = DepthMap::from_fn(320, 320, |_, _| rng.random::<f64>());
            let grid = cb.encode(&map).unwrap();
            for cell in 0..GRID_CELLS {
                let patch = patch_of(&map, cell).unwrap();
                assert_eq!(grid.indices()[cell] as usize, brute_force_nearest(&cb, &patch));
            }
            let again = cb.encode(&cb.decode(&grid).unwrap()).unwrap();
            assert_eq!(again, grid);
        }
    }

    #[test]
    fn decode_of_encode_beats_single_cell_perturbations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let centroids: Vec<Vec<f32>> = (0..32).map(|_| random_patch(&mut rng)).collect();
        let cb = Codebook::from_centroids(&centroids, 0, 0).unwrap();
        let map = DepthMap::from_fn(320, 320, |_, _| rng.random::<f64>());
        let grid = cb.encode(&map).unwrap();
        let best = cb.decode(&grid).unwrap().mse(&map).unwrap();
        for _ in 0..50 {
            let cell = rng.random_range(0..GRID_CELLS);
            let code = rng.random_range(0..32u8);
            let other = grid.with_cell(cell, code).unwrap();
            assert!(cb.decode(&other).unwrap().mse(&map).unwrap() >= best);
        }
    }

    #[test]
    fn tiled_centroids_round_trip_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let centroids: Vec<Vec<f32>> = (0..128).map(|_| random_patch(&mut rng)).collect();
        let cb = Codebook::from_centroids(&centroids, 0, 0).unwrap();
        let mut indices = [0u8; GRID_CELLS];
        for slot in indices.iter_mut() {
            *slot = rng.random_range(0..128);
        }
        let grid = CodeGrid::new(indices).unwrap();
        let map = cb.decode(&grid).unwrap();
        assert_eq!(cb.decode(&cb.encode(&map).unwrap()).unwrap().mse(&map).unwrap(), 0.0);
    }

    #[test]
    fn token_round_trip_and_errors() {
        let vocab = Vocabulary::build(40);
        let zero = CodeGrid::filled(0).unwrap();
        let seq = grid_to_tokens(&zero, &vocab);
        assert_eq!(seq.len(), 102);
        assert_eq!(seq[0], vocab.depth_start());
        assert!(seq[1..101].iter().all(|&t| t == vocab.depth_token(0)));
        assert_eq!(seq[101], vocab.depth_end());
        assert_eq!(tokens_to_grid(&seq, &vocab).unwrap(), zero);

        let mut short = seq.clone();
        short.remove(50);
        assert!(matches!(
            tokens_to_grid(&short, &vocab),
            Err(Error::MalformedSequence(_))
        ));
        let mut wrong = seq.clone();
        wrong[10] = vocab.pixel_token(3);
        assert!(matches!(
            tokens_to_grid(&wrong, &vocab),
            Err(Error::MalformedSequence(_))
        ));
        let mut swapped = seq.clone();
        swapped.swap(0, 101);
        assert!(tokens_to_grid(&swapped, &vocab).is_err());
    }

    #[test]
    fn save_and_load_are_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let centroids: Vec<Vec<f32>> = (0..128).map(|_| random_patch(&mut rng)).collect();
        let cb = Codebook::from_centroids(&centroids, 8, 1234).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cb.json");
        cb.save(&path).unwrap();
        assert!(dir.path().join("cb.bin").exists());
        let back = Codebook::load(&path).unwrap();
        assert_eq!(back, cb);
        assert_eq!(std::fs::metadata(dir.path().join("cb.bin")).unwrap().len(), 128 * 1024 * 4);
    }

    #[test]
    fn find_span_inside_longer_sequence() {
        let vocab = Vocabulary::build(40);
        let grid = CodeGrid::filled(9).unwrap();
        let mut seq = vec![vocab.text_token("Depth:")];
        seq.extend(grid_to_tokens(&grid, &vocab));
        seq.push(vocab.text_token("A"));
        assert_eq!(find_depth_span(&seq, &vocab).unwrap(), Some(grid));
        assert_eq!(find_depth_span(&seq[..1], &vocab).unwrap(), None);
        assert!(find_depth_span(&seq[..50], &vocab).is_err());
    }
}
