//! The expanded vocabulary: opaque base tokens followed by the auxiliary
//! perception-token families.
//!
//! Layout is contiguous and assigned in family order, so for a base size `B`
//! the depth codes occupy `B..B+128`, the two depth delimiters `B+128` and
//! `B+129`, and the pixel coordinates `B+130..B+466`.

use std::collections::HashMap;
use std::fmt;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEPTH_CODES: usize = 128;
pub const PIXEL_POSITIONS: usize = 336;
pub const DEPTH_START: &str = "DEPTH_START";
pub const DEPTH_END: &str = "DEPTH_END";

const BASE_PREFIX: &str = "<base:";

/// Dense index into the expanded vocabulary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TokenId(pub u32);

impl TokenId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl From<u32> for TokenId {
    fn from(value: u32) -> Self {
        TokenId(value)
    }
}

impl fmt::Display for TokenId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FamilyName {
    Depth,
    Pixel,
    Delim,
}

impl FamilyName {
    pub fn as_str(self) -> &'static str {
        match self {
            FamilyName::Depth => "DEPTH",
            FamilyName::Pixel => "PIXEL",
            FamilyName::Delim => "DELIM",
        }
    }
}

/// A registered family of auxiliary tokens occupying a contiguous id range.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuxFamily {
    pub name: FamilyName,
    pub range: Range<u32>,
    pub surface_forms: Vec<String>,
}

impl AuxFamily {
    pub fn len(&self) -> usize {
        self.surface_forms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surface_forms.is_empty()
    }

    pub fn contains(&self, id: TokenId) -> bool {
        self.range.contains(&id.0)
    }

    pub fn members(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.range.clone().map(TokenId)
    }
}

/// Class of a token as seen by the decoding grammar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TokenClass {
    Base,
    Depth,
    Pixel,
    DepthStart,
    DepthEnd,
}

impl TokenClass {
    pub const ALL: [TokenClass; 5] = [
        TokenClass::Base,
        TokenClass::Depth,
        TokenClass::Pixel,
        TokenClass::DepthStart,
        TokenClass::DepthEnd,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_aux(self) -> bool {
        self != TokenClass::Base
    }
}

/// Bijection from specialist code index to DEPTH token id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialistMapping {
    targets: Vec<TokenId>,
}

impl SpecialistMapping {
    pub fn new(targets: Vec<TokenId>) -> Self {
        Self { targets }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn map(&self, code: usize) -> Option<TokenId> {
        self.targets.get(code).copied()
    }

    pub fn inverse(&self, token: TokenId) -> Option<usize> {
        self.targets.iter().position(|&t| t == token)
    }

    pub fn targets(&self) -> &[TokenId] {
        &self.targets
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    base_size: u32,
    families: Vec<FamilyFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct FamilyFile {
    name: FamilyName,
    surface_forms: Vec<String>,
}

/// The expanded vocabulary `V ∪ V_aux`. Immutable after construction.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    base_size: u32,
    families: Vec<AuxFamily>,
    lookup: HashMap<String, TokenId>,
    mapping: SpecialistMapping,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.base_size == other.base_size && self.families == other.families
    }
}

impl Vocabulary {
    /// Builds the canonical layout on top of `base_size` opaque base tokens.
    pub fn build(base_size: u32) -> Self {
        assert!(base_size >= 1, "base vocabulary must hold at least one token");
        let depth = (0..DEPTH_CODES).map(|i| format!("DEPTH_{i}")).collect();
        let delim = vec![DEPTH_START.to_owned(), DEPTH_END.to_owned()];
        let pixel = (0..PIXEL_POSITIONS).map(|i| format!("PIXEL_{i}")).collect();
        Self::from_parts(
            base_size,
            vec![
                (FamilyName::Depth, depth),
                (FamilyName::Delim, delim),
                (FamilyName::Pixel, pixel),
            ],
        )
        .expect("canonical layout is valid")
    }

    fn from_parts(base_size: u32, families: Vec<(FamilyName, Vec<String>)>) -> Result<Self> {
        if base_size == 0 {
            return Err(Error::InvalidVocabulary("base_size must be ≥ 1".into()));
        }
        let mut lookup = HashMap::new();
        let mut built = Vec::with_capacity(families.len());
        let mut next = base_size;
        for (name, forms) in families {
            if built.iter().any(|f: &AuxFamily| f.name == name) {
                return Err(Error::InvalidVocabulary(format!(
                    "family {} listed twice",
                    name.as_str()
                )));
            }
            let start = next;
            for form in &forms {
                if form.starts_with(BASE_PREFIX) {
                    return Err(Error::InvalidVocabulary(format!(
                        "surface form `{form}` collides with base token syntax"
                    )));
                }
                if lookup.insert(form.clone(), TokenId(next)).is_some() {
                    return Err(Error::InvalidVocabulary(format!(
                        "surface form `{form}` registered twice"
                    )));
                }
                next += 1;
            }
            built.push(AuxFamily {
                name,
                range: start..next,
                surface_forms: forms,
            });
        }

        let vocab_family = |name: FamilyName| built.iter().find(|f| f.name == name);
        let depth = vocab_family(FamilyName::Depth)
            .ok_or_else(|| Error::InvalidVocabulary("missing DEPTH family".into()))?;
        if depth.len() != DEPTH_CODES {
            return Err(Error::InvalidVocabulary(format!(
                "DEPTH family must have {DEPTH_CODES} members, found {}",
                depth.len()
            )));
        }
        let pixel = vocab_family(FamilyName::Pixel)
            .ok_or_else(|| Error::InvalidVocabulary("missing PIXEL family".into()))?;
        if pixel.len() != PIXEL_POSITIONS {
            return Err(Error::InvalidVocabulary(format!(
                "PIXEL family must have {PIXEL_POSITIONS} members, found {}",
                pixel.len()
            )));
        }
        let delim = vocab_family(FamilyName::Delim)
            .ok_or_else(|| Error::InvalidVocabulary("missing DELIM family".into()))?;
        for required in [DEPTH_START, DEPTH_END] {
            if !delim.surface_forms.iter().any(|f| f == required) {
                return Err(Error::InvalidVocabulary(format!("DELIM lacks {required}")));
            }
        }
        let mapping = SpecialistMapping::new(depth.members().collect());

        Ok(Self {
            base_size,
            families: built,
            lookup,
            mapping,
        })
    }

    pub fn base_size(&self) -> u32 {
        self.base_size
    }

    /// Total size of the expanded vocabulary.
    pub fn len(&self) -> usize {
        self.families
            .last()
            .map_or(self.base_size, |f| f.range.end) as usize
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn families(&self) -> &[AuxFamily] {
        &self.families
    }

    pub fn family(&self, name: FamilyName) -> &AuxFamily {
        self.families
            .iter()
            .find(|f| f.name == name)
            .expect("validated at build")
    }

    pub fn mapping(&self) -> &SpecialistMapping {
        &self.mapping
    }

    pub fn surface_to_id(&self, form: &str) -> Result<TokenId> {
        if let Some(&id) = self.lookup.get(form) {
            return Ok(id);
        }
        if let Some(n) = form
            .strip_prefix(BASE_PREFIX)
            .and_then(|rest| rest.strip_suffix('>'))
            .and_then(|n| n.parse::<u32>().ok())
        {
            if n < self.base_size {
                return Ok(TokenId(n));
            }
        }
        Err(Error::UnknownToken(form.to_owned()))
    }

    /// Auxiliary tokens render as their registered form; base tokens as `<base:N>`.
    pub fn id_to_surface(&self, id: TokenId) -> Result<String> {
        if id.0 < self.base_size {
            return Ok(format!("{BASE_PREFIX}{}>", id.0));
        }
        self.families
            .iter()
            .find(|f| f.contains(id))
            .map(|f| f.surface_forms[(id.0 - f.range.start) as usize].clone())
            .ok_or_else(|| Error::UnknownToken(id.to_string()))
    }

    /// Looks up an auxiliary surface form only; base and unknown strings give `None`.
    pub fn aux_id(&self, form: &str) -> Option<TokenId> {
        self.lookup.get(form).copied()
    }

    pub fn class_of(&self, id: TokenId) -> Option<TokenClass> {
        if id.0 < self.base_size {
            return Some(TokenClass::Base);
        }
        if id.0 == self.depth_start().0 {
            return Some(TokenClass::DepthStart);
        }
        if id.0 == self.depth_end().0 {
            return Some(TokenClass::DepthEnd);
        }
        if self.family(FamilyName::Depth).contains(id) {
            return Some(TokenClass::Depth);
        }
        if self.family(FamilyName::Pixel).contains(id) {
            return Some(TokenClass::Pixel);
        }
        // Any further delimiter registered in a loaded vocabulary is treated as text.
        if (id.index()) < self.len() {
            return Some(TokenClass::Base);
        }
        None
    }

    pub fn is_aux(&self, id: TokenId) -> bool {
        id.0 >= self.base_size && id.index() < self.len()
    }

    pub fn depth_token(&self, code: usize) -> TokenId {
        assert!(code < DEPTH_CODES, "depth code {code} out of range");
        TokenId(self.family(FamilyName::Depth).range.start + code as u32)
    }

    /// Code index of a DEPTH token, if it is one.
    pub fn depth_code(&self, id: TokenId) -> Option<usize> {
        let family = self.family(FamilyName::Depth);
        family
            .contains(id)
            .then(|| (id.0 - family.range.start) as usize)
    }

    pub fn pixel_token(&self, coord: u16) -> TokenId {
        assert!(
            (coord as usize) < PIXEL_POSITIONS,
            "pixel coordinate {coord} out of range"
        );
        TokenId(self.family(FamilyName::Pixel).range.start + coord as u32)
    }

    pub fn pixel_coord(&self, id: TokenId) -> Option<u16> {
        let family = self.family(FamilyName::Pixel);
        family
            .contains(id)
            .then(|| (id.0 - family.range.start) as u16)
    }

    pub fn depth_start(&self) -> TokenId {
        self.lookup[DEPTH_START]
    }

    pub fn depth_end(&self) -> TokenId {
        self.lookup[DEPTH_END]
    }

    /// Stand-in tokenizer for natural-language words: a stable FNV-1a hash
    /// folded into the base range.
    pub fn text_token(&self, word: &str) -> TokenId {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for byte in word.bytes() {
            hash ^= u64::from(byte);
            hash = hash.wrapping_mul(0x0100_0000_01b3);
        }
        TokenId((hash % u64::from(self.base_size)) as u32)
    }

    /// Converts a mixed piece sequence (aux surface forms and text words) to ids.
    pub fn pieces_to_ids<S: AsRef<str>>(&self, pieces: &[S]) -> Vec<TokenId> {
        pieces
            .iter()
            .map(|p| {
                let p = p.as_ref();
                self.aux_id(p).unwrap_or_else(|| self.text_token(p))
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = VocabFile {
            base_size: self.base_size,
            families: self
                .families
                .iter()
                .map(|f| FamilyFile {
                    name: f.name,
                    surface_forms: f.surface_forms.clone(),
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile = serde_json::from_str(text)?;
        Self::from_parts(
            file.base_size,
            file.families
                .into_iter()
                .map(|f| (f.name, f.surface_forms))
                .collect(),
        )
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_match_layout() {
        assert_eq!(Vocabulary::build(32000).len(), 32466);
        assert_eq!(Vocabulary::build(1).len(), 467);
    }

    #[test]
    fn depth_127_is_contiguous_after_base() {
        let vocab = Vocabulary::build(500);
        let id = vocab.surface_to_id("DEPTH_127").unwrap();
        assert_eq!(id, TokenId(500 + 127));
        assert_eq!(vocab.id_to_surface(id).unwrap(), "DEPTH_127");
    }

    #[test]
    fn lookups() {
        let vocab = Vocabulary::build(10);
        assert_eq!(vocab.surface_to_id("DEPTH_START").unwrap(), vocab.depth_start());
        assert_eq!(vocab.class_of(vocab.depth_start()), Some(TokenClass::DepthStart));
        let pixel0 = vocab.surface_to_id("PIXEL_0").unwrap();
        assert_eq!(pixel0, vocab.family(FamilyName::Pixel).range.start.into());
        assert!(matches!(
            vocab.surface_to_id("DEPTH_128"),
            Err(Error::UnknownToken(_))
        ));
        assert!(matches!(
            vocab.surface_to_id("<base:10>"),
            Err(Error::UnknownToken(_))
        ));
        assert_eq!(vocab.surface_to_id("<base:9>").unwrap(), TokenId(9));
    }

    #[test]
    fn aux_round_trip_is_exhaustive() {
        let vocab = Vocabulary::build(7);
        for id in 7..vocab.len() as u32 {
            let form = vocab.id_to_surface(TokenId(id)).unwrap();
            assert_eq!(vocab.surface_to_id(&form).unwrap(), TokenId(id));
        }
    }

    #[test]
    fn mapping_is_a_bijection_onto_depth() {
        let vocab = Vocabulary::build(3);
        let mapping = vocab.mapping();
        assert_eq!(mapping.len(), DEPTH_CODES);
        for code in 0..DEPTH_CODES {
            let token = mapping.map(code).unwrap();
            assert!(vocab.family(FamilyName::Depth).contains(token));
            assert_eq!(mapping.inverse(token), Some(code));
        }
        let mut targets = mapping.targets().to_vec();
        targets.sort();
        targets.dedup();
        assert_eq!(targets.len(), DEPTH_CODES);
    }

    #[test]
    fn families_are_disjoint() {
        let vocab = Vocabulary::build(50);
        let mut owner = vec![None; vocab.len()];
        for id in 0..50 {
            owner[id] = Some("BASE");
        }
        for family in vocab.families() {
            for member in family.members() {
                assert!(owner[member.index()].is_none(), "{member} assigned twice");
                owner[member.index()] = Some(family.name.as_str());
            }
        }
        assert!(owner.iter().all(Option::is_some));
    }

    #[test]
    fn json_round_trip_is_bit_stable() {
        let vocab = Vocabulary::build(123);
        let text = vocab.to_json().unwrap();
        let back = Vocabulary::from_json(&text).unwrap();
        assert_eq!(back, vocab);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn rejects_short_depth_family() {
        let text = r#"{"base_size":4,"families":[{"name":"DEPTH","surface_forms":["DEPTH_0"]}]}"#;
        assert!(matches!(
            Vocabulary::from_json(text),
            Err(Error::InvalidVocabulary(_))
        ));
    }

    #[test]
    fn text_tokens_land_in_base_range() {
        let vocab = Vocabulary::build(97);
        for word in ["Answer:", "A", "the", ""] {
            assert!(vocab.text_token(word).0 < 97);
            assert_eq!(vocab.class_of(vocab.text_token(word)), Some(TokenClass::Base));
        }
    }
}
