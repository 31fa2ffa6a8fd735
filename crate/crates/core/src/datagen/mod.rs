//! Training-data synthesis for the depth and counting tasks.
//!
//! Each task has three sub-datasets: atomic generation of perception tokens,
//! chain-of-thought samples that emit perception tokens before the answer,
//! and direct-labeling samples that give the answer alone.
//!
//! Responses are stored as piece sequences: auxiliary surface forms
//! (`DEPTH_17`, `PIXEL_200`, ...) interleaved with whitespace-free text words.

pub mod scene;

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox_codec::{boxes_to_tokens, scale_coord, tokens_to_boxes, ImageSize};
use crate::bench::{argmax, label_for, place_markers, Marker, MarkerSet, PlacementConfig};
use crate::depth_codec::{find_depth_span, grid_to_tokens, Codebook};
use crate::error::{Error, Result};
use crate::seeding::rng_for;
use crate::vocab::{TokenClass, TokenId, Vocabulary, PIXEL_POSITIONS};

use self::scene::{make_scene, Scene, SceneConfig, CATEGORIES};

/// Paper-scale corpus sizes.
pub const DEFAULT_DEPTH_GEN: usize = 20_000;
pub const DEFAULT_DEPTH_MULTITASK_IMAGES: usize = 500;
pub const DEFAULT_BBOX_GEN: usize = 5_000;
pub const DEFAULT_COUNT_MULTITASK_IMAGES: usize = 250;

pub const MARKERS_LABEL: &str = "Markers:";
pub const DEPTH_LABEL: &str = "Depth:";
pub const BOXES_LABEL: &str = "Boxes:";
pub const ANSWER_LABEL: &str = "Answer:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    DepthGen,
    BboxGen,
    DepthCot,
    DepthDirect,
    CountCot,
    CountDirect,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::DepthGen => "depth_gen",
            TaskKind::BboxGen => "bbox_gen",
            TaskKind::DepthCot => "depth_cot",
            TaskKind::DepthDirect => "depth_direct",
            TaskKind::CountCot => "count_cot",
            TaskKind::CountDirect => "count_direct",
        }
    }

    pub fn is_cot(self) -> bool {
        matches!(self, TaskKind::DepthCot | TaskKind::CountCot)
    }

    pub fn is_direct(self) -> bool {
        matches!(self, TaskKind::DepthDirect | TaskKind::CountDirect)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub markers: Option<Vec<Marker>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
}

/// One prompt/response training record.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QASample {
    pub image_id: String,
    pub task: TaskKind,
    pub prompt: String,
    pub response: Vec<String>,
    pub meta: SampleMeta,
}

impl QASample {
    pub fn response_ids(&self, vocab: &Vocabulary) -> Vec<TokenId> {
        vocab.pieces_to_ids(&self.response)
    }
}

/// Versioned prompt templates; `{category}` is substituted where present.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Templates {
    pub version: String,
    pub depth_gen: String,
    pub depth_cot: String,
    pub depth_direct: String,
    pub bbox_gen: String,
    pub count_cot: String,
    pub count_direct: String,
}

impl Default for Templates {
    fn default() -> Self {
        Self {
            version: "1".into(),
            depth_gen: "Describe the depth of this image as a grid of depth tokens.".into(),
            depth_cot: "Points are marked on the image. List the marker positions, then the \
                        depth tokens, then name the marker nearest to the camera."
                .into(),
            depth_direct: "Points are marked on the image. Name the marker nearest to the camera."
                .into(),
            bbox_gen: "Locate every {category} in the image with bounding box tokens.".into(),
            count_cot: "Count the {category} instances in the image. Give a bounding box for \
                        each one first, then the total."
                .into(),
            count_direct: "Count the {category} instances in the image. Reply with a number."
                .into(),
        }
    }
}

impl Templates {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }

    pub fn prompt(&self, task: TaskKind, category: Option<&str>) -> String {
        let template = match task {
            TaskKind::DepthGen => &self.depth_gen,
            TaskKind::BboxGen => &self.bbox_gen,
            TaskKind::DepthCot => &self.depth_cot,
            TaskKind::DepthDirect => &self.depth_direct,
            TaskKind::CountCot => &self.count_cot,
            TaskKind::CountDirect => &self.count_direct,
        };
        template.replace("{category}", category.unwrap_or("object"))
    }
}

fn surface(ids: &[TokenId], vocab: &Vocabulary) -> Vec<String> {
    ids.iter()
        .map(|&t| vocab.id_to_surface(t).expect("ids come from the vocabulary"))
        .collect()
}

/// Marker position in the 336 frame.
pub fn marker_to_pixels(marker: &Marker, frame: ImageSize) -> (u16, u16) {
    (
        scale_coord(marker.x, frame.width),
        scale_coord(marker.y, frame.height),
    )
}

pub fn synth_depth_gen(
    scene: &Scene,
    cb: &Codebook,
    vocab: &Vocabulary,
    templates: &Templates,
) -> Result<QASample> {
    let grid = cb.encode(&scene.depth)?;
    Ok(QASample {
        image_id: scene.id.clone(),
        task: TaskKind::DepthGen,
        prompt: templates.prompt(TaskKind::DepthGen, None),
        response: surface(&grid_to_tokens(&grid, vocab), vocab),
        meta: SampleMeta::default(),
    })
}

/// Checks the placement constraints and returns the ground-truth label.
fn marker_answer(scene: &Scene, markers: &MarkerSet, placement: &PlacementConfig) -> Result<String> {
    if !(2..=5).contains(&markers.len()) {
        return Err(Error::DegenerateMarkers(format!(
            "depth samples need 2..=5 markers, got {}",
            markers.len()
        )));
    }
    markers.validate(&scene.depth, scene.size, placement)?;
    Ok(markers
        .closest(&scene.depth, scene.size)
        .expect("non-empty marker set"))
}

/// CoT response: marker positions as PIXEL pairs in label order, the
/// depth-token span, then the answer label.
pub fn synth_depth_cot(
    scene: &Scene,
    markers: &MarkerSet,
    cb: &Codebook,
    vocab: &Vocabulary,
    templates: &Templates,
    placement: &PlacementConfig,
) -> Result<QASample> {
    let answer = marker_answer(scene, markers, placement)?;
    let mut response = vec![MARKERS_LABEL.to_owned()];
    for marker in &markers.markers {
        let (x, y) = marker_to_pixels(marker, scene.size);
        response.push(vocab.id_to_surface(vocab.pixel_token(x))?);
        response.push(vocab.id_to_surface(vocab.pixel_token(y))?);
    }
    response.push(DEPTH_LABEL.to_owned());
    let grid = cb.encode(&scene.depth)?;
    response.extend(surface(&grid_to_tokens(&grid, vocab), vocab));
    response.push(ANSWER_LABEL.to_owned());
    response.push(answer.clone());

    let sample = QASample {
        image_id: scene.id.clone(),
        task: TaskKind::DepthCot,
        prompt: templates.prompt(TaskKind::DepthCot, None),
        response,
        meta: SampleMeta {
            markers: Some(markers.markers.clone()),
            category: None,
            answer: Some(answer.clone()),
        },
    };
    // The tokens alone must support the answer; otherwise the sample would
    // teach the model to ignore its own perception span.
    let derived = rederive_answer(&sample, cb, vocab)?;
    if derived != answer {
        return Err(Error::DegenerateMarkers(format!(
            "quantized depth points to {derived}, ground truth is {answer}"
        )));
    }
    Ok(sample)
}

pub fn synth_depth_direct(
    scene: &Scene,
    markers: &MarkerSet,
    templates: &Templates,
    placement: &PlacementConfig,
) -> Result<QASample> {
    let answer = marker_answer(scene, markers, placement)?;
    Ok(QASample {
        image_id: scene.id.clone(),
        task: TaskKind::DepthDirect,
        prompt: templates.prompt(TaskKind::DepthDirect, None),
        response: vec![answer.clone()],
        meta: SampleMeta {
            markers: Some(markers.markers.clone()),
            category: None,
            answer: Some(answer),
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    BboxGen,
    Cot,
    Direct,
}

pub fn synth_count(
    scene: &Scene,
    category: &str,
    vocab: &Vocabulary,
    templates: &Templates,
    mode: CountMode,
) -> Result<QASample> {
    let boxes = scene.boxes_336(category)?;
    let box_pieces = surface(&boxes_to_tokens(&boxes, vocab), vocab);
    let count = boxes.len().to_string();
    let (task, response) = match mode {
        CountMode::BboxGen => (TaskKind::BboxGen, box_pieces),
        CountMode::Cot => {
            let mut r = vec![BOXES_LABEL.to_owned()];
            r.extend(box_pieces);
            r.push(ANSWER_LABEL.to_owned());
            r.push(count.clone());
            (TaskKind::CountCot, r)
        }
        CountMode::Direct => (TaskKind::CountDirect, vec![count.clone()]),
    };
    Ok(QASample {
        image_id: scene.id.clone(),
        task,
        prompt: templates.prompt(task, Some(category)),
        response,
        meta: SampleMeta {
            markers: None,
            category: Some(category.to_owned()),
            answer: (mode != CountMode::BboxGen).then_some(count),
        },
    })
}

/// Recomputes a CoT sample's final answer from its auxiliary tokens only.
pub fn rederive_answer(sample: &QASample, cb: &Codebook, vocab: &Vocabulary) -> Result<String> {
    let ids = sample.response_ids(vocab);
    match sample.task {
        TaskKind::DepthCot => {
            let pixels: Vec<u16> = ids.iter().filter_map(|&t| vocab.pixel_coord(t)).collect();
            if pixels.is_empty() || pixels.len() % 2 != 0 {
                return Err(Error::MalformedSequence(format!(
                    "{} marker coordinates do not form pairs",
                    pixels.len()
                )));
            }
            let grid = find_depth_span(&ids, vocab)?
                .ok_or_else(|| Error::MalformedSequence("no depth span".into()))?;
            let map = cb.decode(&grid)?;
            let disparities: Vec<f64> = pixels
                .chunks_exact(2)
                .map(|p| {
                    map.sample_nearest(
                        f64::from(p[0]),
                        f64::from(p[1]),
                        PIXEL_POSITIONS,
                        PIXEL_POSITIONS,
                    )
                })
                .collect();
            Ok(label_for(argmax(&disparities).expect("at least one marker")))
        }
        TaskKind::CountCot => {
            let pixels: Vec<TokenId> = ids
                .iter()
                .copied()
                .filter(|&t| vocab.class_of(t) == Some(TokenClass::Pixel))
                .collect();
            Ok(tokens_to_boxes(&pixels, vocab)?.len().to_string())
        }
        other => Err(Error::MalformedSequence(format!(
            "{} samples carry no perception span",
            other.as_str()
        ))),
    }
}

/// Knobs shared by the corpus builders.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SynthConfig {
    pub scene: SceneConfig,
    pub placement: PlacementConfig,
    pub templates: Templates,
}

/// Deterministic scene for position `index` of a named corpus.
pub fn corpus_scene(seed: u64, corpus: &str, index: usize, config: &SceneConfig) -> Scene {
    make_scene(crate::seeding::derive_seed(seed, corpus, index as u64), config)
}

fn sorted(mut samples: Vec<QASample>) -> Vec<QASample> {
    samples.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    samples
}

pub fn depth_gen_corpus(
    n: usize,
    seed: u64,
    cb: &Codebook,
    vocab: &Vocabulary,
    config: &SynthConfig,
) -> Result<Vec<QASample>> {
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let scene = corpus_scene(seed, "depth-gen", i, &config.scene);
            synth_depth_gen(&scene, cb, vocab, &config.templates)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sorted(samples))
}

/// Multitask depth corpus: for each image, a CoT and a direct sample over the
/// same 2–5 markers.
#[derive(Debug, Clone, PartialEq)]
pub struct MultitaskCorpus {
    pub cot: Vec<QASample>,
    pub direct: Vec<QASample>,
    /// Candidate scenes rejected because no consistent markers were found.
    pub skipped: usize,
}

const PLACEMENT_RETRIES: usize = 8;

pub fn depth_multitask_corpus(
    n_images: usize,
    seed: u64,
    cb: &Codebook,
    vocab: &Vocabulary,
    config: &SynthConfig,
) -> Result<MultitaskCorpus> {
    // Scenes that cannot host a consistent marker set are replaced by the
    // next candidate, so the corpus always reaches `n_images`.
    let mut cot = Vec::with_capacity(n_images);
    let mut direct = Vec::with_capacity(n_images);
    let mut skipped = 0;
    let mut next = 0usize;
    while cot.len() < n_images {
        let batch: Vec<usize> = (next..next + (n_images - cot.len())).collect();
        next += batch.len();
        let results = batch
            .par_iter()
            .map(|&i| depth_pair(seed, i, cb, vocab, config))
            .collect::<Result<Vec<_>>>()?;
        for pair in results {
            match pair {
                Some((c, d)) => {
                    cot.push(c);
                    direct.push(d);
                }
                None => skipped += 1,
            }
        }
    }
    Ok(MultitaskCorpus {
        cot: sorted(cot),
        direct: sorted(direct),
        skipped,
    })
}

fn depth_pair(
    seed: u64,
    index: usize,
    cb: &Codebook,
    vocab: &Vocabulary,
    config: &SynthConfig,
) -> Result<Option<(QASample, QASample)>> {
    let scene = corpus_scene(seed, "depth-multitask", index, &config.scene);
    let mut rng = rng_for(seed, "depth-multitask-markers", index as u64);
    let n = rng.random_range(2..=5);
    for _ in 0..PLACEMENT_RETRIES {
        let markers = match place_markers(&scene.depth, scene.size, n, &config.placement, &mut rng) {
            Ok(m) => m,
            Err(Error::PlacementInfeasible(_)) => return Ok(None),
            Err(e) => return Err(e),
        };
        match synth_depth_cot(&scene, &markers, cb, vocab, &config.templates, &config.placement) {
            Ok(cot) => {
                let direct =
                    synth_depth_direct(&scene, &markers, &config.templates, &config.placement)?;
                return Ok(Some((cot, direct)));
            }
            Err(Error::DegenerateMarkers(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Ok(None)
}

fn count_category(scene: &Scene, rng: &mut impl Rng) -> String {
    // Half the time ask about an object that is present, otherwise any category.
    if !scene.objects.is_empty() && rng.random::<bool>() {
        scene.objects[rng.random_range(0..scene.objects.len())]
            .category
            .clone()
    } else {
        CATEGORIES[rng.random_range(0..CATEGORIES.len())].to_owned()
    }
}

pub fn bbox_gen_corpus(
    n: usize,
    seed: u64,
    vocab: &Vocabulary,
    config: &SynthConfig,
) -> Result<Vec<QASample>> {
    let samples = (0..n)
        .into_par_iter()
        .map(|i| {
            let scene = corpus_scene(seed, "bbox-gen", i, &config.scene);
            let mut rng = rng_for(seed, "bbox-gen-category", i as u64);
            let category = count_category(&scene, &mut rng);
            synth_count(&scene, &category, vocab, &config.templates, CountMode::BboxGen)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(sorted(samples))
}

pub fn count_multitask_corpus(
    n_images: usize,
    seed: u64,
    vocab: &Vocabulary,
    config: &SynthConfig,
) -> Result<MultitaskCorpus> {
    let pairs = (0..n_images)
        .into_par_iter()
        .map(|i| {
            let scene = corpus_scene(seed, "count-multitask", i, &config.scene);
            let mut rng = rng_for(seed, "count-multitask-category", i as u64);
            let category = count_category(&scene, &mut rng);
            Ok((
                synth_count(&scene, &category, vocab, &config.templates, CountMode::Cot)?,
                synth_count(&scene, &category, vocab, &config.templates, CountMode::Direct)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let (cot, direct) = pairs.into_iter().unzip();
    Ok(MultitaskCorpus {
        cot: sorted(cot),
        direct: sorted(direct),
        skipped: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::Marker;
    use crate::depth_codec::{tokens_to_grid, train_codebook, PatchSet, TrainParams};
    use crate::depth_map::DepthMap;
    use crate::jsonl::{read_jsonl, to_jsonl_bytes};

    fn small_codebook() -> Codebook {
        let config = SceneConfig::default();
        let mut patches = PatchSet::new();
        for seed in 0..40 {
            patches.extend_from_map(&make_scene(seed, &config).depth).unwrap();
        }
        let params = TrainParams {
            max_iters: 5,
            ..TrainParams::default()
        };
        train_codebook(&patches, &params).unwrap().0
    }

    fn flat_scene(value: f64) -> Scene {
        Scene {
            id: "flat".into(),
            seed: 0,
            size: ImageSize { width: 320, height: 320 },
            depth: DepthMap::constant(320, 320, value),
            objects: vec![],
            background: None,
        }
    }

    #[test]
    fn depth_gen_responses_parse() {
        let cb = small_codebook();
        let vocab = Vocabulary::build(1000);
        let flat = synth_depth_gen(&flat_scene(0.3), &cb, &vocab, &Templates::default()).unwrap();
        let interior = &flat.response[1..101];
        assert!(interior.iter().all(|t| t == &interior[0]));

        let corpus = depth_gen_corpus(60, 1, &cb, &vocab, &SynthConfig::default()).unwrap();
        for sample in &corpus {
            assert_eq!(sample.response.len(), 102);
            tokens_to_grid(&sample.response_ids(&vocab), &vocab).unwrap();
        }
        assert!(corpus.windows(2).all(|w| w[0].image_id <= w[1].image_id));
    }

    #[test]
    fn forced_two_marker_label() {
        let cb = small_codebook();
        let vocab = Vocabulary::build(1000);
        let scene = Scene {
            depth: DepthMap::from_fn(320, 320, |x, _| if x < 160 { 0.9 } else { 0.2 }),
            ..flat_scene(0.0)
        };
        let markers = MarkerSet {
            markers: vec![
                Marker { label: "A".into(), x: 40, y: 160 },
                Marker { label: "B".into(), x: 280, y: 160 },
            ],
        };
        let placement = PlacementConfig::default();
        let templates = Templates::default();
        let direct = synth_depth_direct(&scene, &markers, &templates, &placement).unwrap();
        assert_eq!(direct.response, vec!["A"]);
        let cot = synth_depth_cot(&scene, &markers, &cb, &vocab, &templates, &placement).unwrap();
        assert_eq!(cot.response.last().unwrap(), "A");
        assert_eq!(rederive_answer(&cot, &cb, &vocab).unwrap(), "A");
    }

    #[test]
    fn degenerate_markers_are_rejected() {
        let scene = flat_scene(0.5);
        let markers = MarkerSet {
            markers: vec![
                Marker { label: "A".into(), x: 40, y: 160 },
                Marker { label: "B".into(), x: 280, y: 160 },
            ],
        };
        assert!(matches!(
            synth_depth_direct(&scene, &markers, &Templates::default(), &PlacementConfig::default()),
            Err(Error::DegenerateMarkers(_))
        ));
    }

    #[test]
    fn multitask_pairs_agree_and_rederive() {
        let cb = small_codebook();
        let vocab = Vocabulary::build(1000);
        let corpus = depth_multitask_corpus(40, 3, &cb, &vocab, &SynthConfig::default()).unwrap();
        assert_eq!(corpus.cot.len(), 40);
        assert_eq!(corpus.direct.len(), 40);
        for (cot, direct) in corpus.cot.iter().zip(&corpus.direct) {
            assert_eq!(cot.image_id, direct.image_id);
            assert_eq!(cot.response.last(), direct.response.last());
            assert_eq!(&rederive_answer(cot, &cb, &vocab).unwrap(), cot.response.last().unwrap());
            let n = cot.meta.markers.as_ref().unwrap().len();
            assert!((2..=5).contains(&n));
        }
    }

    #[test]
    fn counting_samples() {
        let vocab = Vocabulary::build(1000);
        let templates = Templates::default();
        let scene = corpus_scene(0, "t", 0, &SceneConfig::default());
        let absent = synth_count(&scene, "unicorn", &vocab, &templates, CountMode::Cot).unwrap();
        assert_eq!(absent.response, vec![BOXES_LABEL, ANSWER_LABEL, "0"]);
        let gen = synth_count(&scene, "unicorn", &vocab, &templates, CountMode::BboxGen).unwrap();
        assert!(gen.response.is_empty());

        let config = SynthConfig::default();
        let corpus = count_multitask_corpus(100, 2, &vocab, &config).unwrap();
        for sample in &corpus.cot {
            let boxes = sample
                .response
                .iter()
                .filter(|p| p.starts_with("PIXEL_"))
                .count();
            assert_eq!(boxes % 4, 0);
            assert_eq!((boxes / 4).to_string(), *sample.response.last().unwrap());
            assert_eq!(&rederive_answer(sample, &small_dummy_codebook(), &vocab).unwrap(), sample.response.last().unwrap());
        }
        let gen = bbox_gen_corpus(50, 2, &vocab, &config).unwrap();
        for sample in &gen {
            let ids = sample.response_ids(&vocab);
            tokens_to_boxes(&ids, &vocab).unwrap();
        }
    }

    fn small_dummy_codebook() -> Codebook {
        Codebook::from_centroids(&[vec![0.0; crate::depth_codec::PATCH_DIM]], 0, 0).unwrap()
    }

    #[test]
    fn samples_round_trip_through_jsonl() {
        let vocab = Vocabulary::build(1000);
        let corpus = count_multitask_corpus(20, 2, &vocab, &SynthConfig::default()).unwrap();
        let bytes = to_jsonl_bytes(&corpus.cot).unwrap();
        let back: Vec<QASample> = read_jsonl(&bytes[..]).unwrap();
        assert_eq!(back, corpus.cot);
        assert_eq!(to_jsonl_bytes(&back).unwrap(), bytes);
        let first = String::from_utf8(bytes).unwrap();
        assert!(first.starts_with("{\"image_id\":"));
    }

    #[test]
    fn templates_substitute_category() {
        let t = Templates::default();
        assert!(t.prompt(TaskKind::CountDirect, Some("lamp")).contains("lamp"));
        let json = serde_json::to_string(&t).unwrap();
        assert_eq!(serde_json::from_str::<Templates>(&json).unwrap(), t);
    }
}
