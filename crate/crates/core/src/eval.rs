//! Answer extraction and benchmark scoring.

use std::collections::HashMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bbox_codec::tokens_to_boxes;
use crate::bench::{argmax, label_for, label_index, BenchmarkItem, CountItem};
use crate::depth_codec::{find_depth_span, Codebook};
use crate::depth_map::DepthMap;
use crate::error::{Error, Result};
use crate::losses::{recon_loss, Prediction};
use crate::vocab::{TokenClass, TokenId, Vocabulary};

const NUMBER_WORDS: [&str; 16] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
    "eleven", "twelve", "thirteen", "fourteen", "fifteen",
];

/// Model output for one item: free text, or a list of pieces mixing aux
/// surface forms and words.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Answer {
    Text(String),
    Pieces(Vec<String>),
}

impl Answer {
    pub fn pieces(&self) -> Vec<String> {
        match self {
            Answer::Text(t) => t.split_whitespace().map(str::to_owned).collect(),
            Answer::Pieces(p) => p.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Response {
    pub id: String,
    pub answer: Answer,
}

/// Splits a response into its token ids and the text left after removing
/// auxiliary tokens.
pub fn split_response(answer: &Answer, vocab: &Vocabulary) -> (Vec<TokenId>, String) {
    let pieces = answer.pieces();
    let ids = vocab.pieces_to_ids(&pieces);
    let text: Vec<&str> = pieces
        .iter()
        .filter(|p| vocab.aux_id(p).is_none())
        .map(String::as_str)
        .collect();
    (ids, text.join(" "))
}

fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty())
}

/// Last standalone letter naming one of the first `n_markers` labels.
/// Uppercase matches win over lowercase ones so that the article "a" does not
/// shadow a capital answer.
pub fn extract_label(answer: &str, n_markers: usize) -> Result<String> {
    let candidates: Vec<char> = words(answer)
        .filter_map(|w| {
            let mut chars = w.chars();
            match (chars.next(), chars.next()) {
                (Some(c), None) if c.is_ascii_alphabetic() => Some(c),
                _ => None,
            }
        })
        .filter(|c| label_index(&c.to_ascii_uppercase().to_string()).is_some_and(|i| i < n_markers))
        .collect();
    candidates
        .iter()
        .rev()
        .find(|c| c.is_ascii_uppercase())
        .or(candidates.last())
        .map(|c| c.to_ascii_uppercase().to_string())
        .ok_or_else(|| Error::Unparseable(format!("no label among {n_markers} markers in `{answer}`")))
}

/// Last integer literal or number word (zero to fifteen).
pub fn extract_count(answer: &str) -> Result<u32> {
    words(answer)
        .filter_map(|w| {
            if w.bytes().all(|b| b.is_ascii_digit()) {
                w.parse().ok()
            } else {
                let lower = w.to_ascii_lowercase();
                NUMBER_WORDS.iter().position(|n| *n == lower).map(|i| i as u32)
            }
        })
        .last()
        .ok_or_else(|| Error::Unparseable(format!("no count in `{answer}`")))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Nearest,
    Bilinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ItemStatus {
    Scored,
    Missing,
    Unparseable,
    Malformed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemRecord {
    pub id: String,
    pub predicted: Option<String>,
    pub gt: String,
    pub correct: bool,
    pub status: ItemStatus,
    /// Answer implied by the response's own perception tokens.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_correct: Option<bool>,
    /// Set when the stated answer disagrees with the perception tokens.
    #[serde(default)]
    pub inconsistent: bool,
}

impl ItemRecord {
    fn new(id: &str, gt: String) -> Self {
        Self {
            id: id.to_owned(),
            predicted: None,
            gt,
            correct: false,
            status: ItemStatus::Scored,
            derived: None,
            derived_correct: None,
            inconsistent: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub suite: String,
    pub total: usize,
    pub correct: usize,
    /// Correct over total; unparseable and missing answers count as wrong.
    pub accuracy: f64,
    /// Responses that were missing, unparseable, or malformed.
    pub skipped: usize,
    /// Items whose response carried a perception span.
    pub with_perception: usize,
    /// Items whose perception span alone yields the ground truth.
    pub derived_correct: usize,
    /// `derived_correct / total`.
    pub derived_accuracy: f64,
    pub inconsistent: usize,
    pub records: Vec<ItemRecord>,
}

impl EvalReport {
    fn from_records(suite: &str, records: Vec<ItemRecord>) -> Self {
        let total = records.len();
        let correct = records.iter().filter(|r| r.correct).count();
        let derived_correct = records.iter().filter(|r| r.derived_correct == Some(true)).count();
        let ratio = |n: usize| if total == 0 { 0.0 } else { n as f64 / total as f64 };
        Self {
            suite: suite.to_owned(),
            total,
            correct,
            accuracy: ratio(correct),
            skipped: records.iter().filter(|r| r.status != ItemStatus::Scored).count(),
            with_perception: records.iter().filter(|r| r.derived_correct.is_some()).count(),
            derived_correct,
            derived_accuracy: ratio(derived_correct),
            inconsistent: records.iter().filter(|r| r.inconsistent).count(),
            records,
        }
    }

    /// Scored items with a wrong answer.
    pub fn incorrect(&self) -> usize {
        self.total - self.correct - self.skipped
    }

    /// Plain-text summary followed by one row per item.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "suite {}", self.suite);
        let _ = writeln!(
            out,
            "accuracy {:.4} ({}/{}), skipped {}",
            self.accuracy, self.correct, self.total, self.skipped
        );
        if self.with_perception > 0 {
            let _ = writeln!(
                out,
                "perception-derived accuracy {:.4} ({}/{}), inconsistent {}",
                self.derived_accuracy, self.derived_correct, self.total, self.inconsistent
            );
        }
        let _ = writeln!(out, "{:<16} {:<10} {:<10} {:<8} {:<8} status", "id", "predicted", "gt", "correct", "derived");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{:<16} {:<10} {:<10} {:<8} {:<8} {:?}",
                r.id,
                r.predicted.as_deref().unwrap_or("-"),
                r.gt,
                r.correct,
                r.derived.as_deref().unwrap_or("-"),
                r.status
            );
        }
        out
    }
}

fn index_responses(responses: &[Response]) -> Result<HashMap<&str, &Answer>> {
    let mut map = HashMap::with_capacity(responses.len());
    for r in responses {
        if map.insert(r.id.as_str(), &r.answer).is_some() {
            return Err(Error::Unparseable(format!("duplicate response id `{}`", r.id)));
        }
    }
    Ok(map)
}

/// Closest marker according to a decoded map.
pub fn label_from_map(map: &DepthMap, item: &BenchmarkItem, sampling: Sampling) -> String {
    let (w, h) = (item.image.width as usize, item.image.height as usize);
    let disparities: Vec<f64> = item
        .markers
        .markers
        .iter()
        .map(|m| {
            let (x, y) = (f64::from(m.x), f64::from(m.y));
            match sampling {
                Sampling::Nearest => map.sample_nearest(x, y, w, h),
                Sampling::Bilinear => map.sample_bilinear(x, y, w, h),
            }
        })
        .collect();
    label_for(argmax(&disparities).expect("benchmark items carry markers"))
}

fn score_depth_item(
    item: &BenchmarkItem,
    answer: Option<&Answer>,
    cb: &Codebook,
    vocab: &Vocabulary,
    sampling: Sampling,
) -> ItemRecord {
    let mut record = ItemRecord::new(&item.id, item.gt_label.clone());
    let Some(answer) = answer else {
        record.status = ItemStatus::Missing;
        return record;
    };
    let (ids, text) = split_response(answer, vocab);
    match find_depth_span(&ids, vocab).and_then(|g| g.map(|g| cb.decode(&g)).transpose()) {
        Ok(Some(map)) => {
            let derived = label_from_map(&map, item, sampling);
            record.derived_correct = Some(derived == item.gt_label);
            record.derived = Some(derived);
        }
        Ok(None) => {}
        Err(_) => record.status = ItemStatus::Malformed,
    }
    match extract_label(&text, item.n_markers()) {
        Ok(label) => {
            record.correct = record.status == ItemStatus::Scored && label == item.gt_label;
            record.inconsistent = record.derived.as_ref().is_some_and(|d| *d != label);
            record.predicted = Some(label);
        }
        Err(_) => {
            if record.status == ItemStatus::Scored {
                record.status = ItemStatus::Unparseable;
            }
        }
    }
    record
}

/// Scores relative-depth answers. Stated labels give the accuracy; responses
/// with a depth span are also scored by reading the decoded map at the
/// markers.
pub fn relative_depth_accuracy(
    suite_name: &str,
    suite: &[BenchmarkItem],
    responses: &[Response],
    cb: &Codebook,
    vocab: &Vocabulary,
    sampling: Sampling,
) -> Result<EvalReport> {
    let by_id = index_responses(responses)?;
    let records = suite
        .par_iter()
        .map(|item| score_depth_item(item, by_id.get(item.id.as_str()).copied(), cb, vocab, sampling))
        .collect();
    Ok(EvalReport::from_records(suite_name, records))
}

fn score_count_item(item: &CountItem, answer: Option<&Answer>, vocab: &Vocabulary) -> ItemRecord {
    let mut record = ItemRecord::new(&item.id, item.gt_count.to_string());
    let Some(answer) = answer else {
        record.status = ItemStatus::Missing;
        return record;
    };
    let (ids, text) = split_response(answer, vocab);
    let pixels: Vec<TokenId> = ids
        .into_iter()
        .filter(|&t| vocab.class_of(t) == Some(TokenClass::Pixel))
        .collect();
    let boxes = if pixels.is_empty() {
        None
    } else {
        match tokens_to_boxes(&pixels, vocab) {
            Ok(b) => Some(b.len()),
            Err(_) => {
                record.inconsistent = true;
                None
            }
        }
    };
    if let Some(n) = boxes {
        record.derived = Some(n.to_string());
        record.derived_correct = Some(n as u32 == item.gt_count);
    }
    match extract_count(&text) {
        Ok(count) => {
            record.correct = count == item.gt_count;
            if boxes.is_some_and(|n| n as u32 != count) {
                record.inconsistent = true;
            }
            record.predicted = Some(count.to_string());
        }
        Err(_) => record.status = ItemStatus::Unparseable,
    }
    record
}

/// Exact-match counting accuracy. Box tuples in a response are validated and
/// their number compared with the stated count.
pub fn counting_accuracy(
    suite_name: &str,
    suite: &[CountItem],
    responses: &[Response],
    vocab: &Vocabulary,
) -> Result<EvalReport> {
    let by_id = index_responses(responses)?;
    let records = suite
        .par_iter()
        .map(|item| score_count_item(item, by_id.get(item.id.as_str()).copied(), vocab))
        .collect();
    Ok(EvalReport::from_records(suite_name, records))
}

/// Reconstruction MSE of a predicted depth span against the ground truth.
pub fn recon_mse(pred: &[TokenId], gt: &DepthMap, cb: &Codebook, vocab: &Vocabulary) -> Result<f64> {
    let grid = find_depth_span(pred, vocab)?
        .ok_or_else(|| Error::MalformedSequence("prediction holds no depth span".into()))?;
    recon_loss(Prediction::Hard(&grid), gt, cb)
}
