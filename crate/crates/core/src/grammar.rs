//! Finite-state constrained decoding over the extended vocabulary.
//!
//! A grammar is written as a small regular expression over token classes
//! ([`Node`]), compiled through a Thompson NFA into a DFA whose dead states are
//! pruned, so every reachable state can still reach acceptance. Decoding keeps
//! a [`DecodeState`] per stream; masks are bitsets over V'.

use std::collections::{HashMap, VecDeque};
use std::ops::Range;
use std::path::Path;

use base64::Engine as _;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::TaskKind;
use crate::depth_codec::GRID_CELLS;
use crate::error::{Error, Result};
use crate::vocab::{TokenClass, TokenId, Vocabulary, DEPTH_CODES, PIXEL_POSITIONS};

const CLASSES: usize = TokenClass::ALL.len();
const MAX_NFA_STATES: usize = 1 << 20;

/// Regular pattern over token classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Class(TokenClass),
    Seq(Vec<Node>),
    Choice(Vec<Node>),
    Repeat {
        node: Box<Node>,
        min: u32,
        /// Unbounded when absent.
        #[serde(default)]
        max: Option<u32>,
    },
}

impl Node {
    pub fn class(class: TokenClass) -> Self {
        Node::Class(class)
    }

    pub fn repeat(node: Node, min: u32, max: Option<u32>) -> Self {
        Node::Repeat {
            node: Box::new(node),
            min,
            max,
        }
    }

    pub fn star(node: Node) -> Self {
        Self::repeat(node, 0, None)
    }

    pub fn exactly(node: Node, k: u32) -> Self {
        Self::repeat(node, k, Some(k))
    }

    /// `DEPTH_START DEPTH{100} DEPTH_END`.
    pub fn depth_span() -> Self {
        Node::Seq(vec![
            Node::Class(TokenClass::DepthStart),
            Self::exactly(Node::Class(TokenClass::Depth), GRID_CELLS as u32),
            Node::Class(TokenClass::DepthEnd),
        ])
    }

    /// Four PIXEL tokens.
    pub fn box_tuple() -> Self {
        Self::exactly(Node::Class(TokenClass::Pixel), 4)
    }
}

/// Grammar description as stored in JSON.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrammarSpec {
    pub name: String,
    /// PIXEL tokens come in `x1 y1 x2 y2` tuples; the mask then also enforces
    /// `x2 ≥ x1` and `y2 ≥ y1`.
    #[serde(default)]
    pub box_tuples: bool,
    pub pattern: Node,
}

impl GrammarSpec {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub const BUNDLED: [&str; 6] = [
    "depth_map",
    "boxes",
    "depth_cot",
    "count_cot",
    "perception_text",
    "unrestricted",
];

/// Built-in grammar descriptions by name.
pub fn bundled(name: &str) -> Option<GrammarSpec> {
    use TokenClass::*;
    let base_star = || Node::star(Node::Class(Base));
    let (pattern, box_tuples) = match name {
        "depth_map" => (Node::depth_span(), false),
        "boxes" => (Node::star(Node::box_tuple()), true),
        "depth_cot" => (
            Node::Seq(vec![
                base_star(),
                Node::repeat(Node::exactly(Node::Class(Pixel), 2), 1, None),
                base_star(),
                Node::depth_span(),
                base_star(),
            ]),
            false,
        ),
        "count_cot" => (
            Node::Seq(vec![base_star(), Node::star(Node::box_tuple()), base_star()]),
            true,
        ),
        "perception_text" => (
            Node::star(Node::Choice(vec![
                Node::Class(Base),
                Node::depth_span(),
                Node::box_tuple(),
            ])),
            true,
        ),
        "unrestricted" => (
            Node::star(Node::Choice(
                TokenClass::ALL.iter().map(|&c| Node::Class(c)).collect(),
            )),
            false,
        ),
        _ => return None,
    };
    Some(GrammarSpec {
        name: name.to_owned(),
        box_tuples,
        pattern,
    })
}

/// Bundled grammar that a task's responses follow.
pub fn grammar_for_task(task: TaskKind) -> &'static str {
    match task {
        TaskKind::DepthGen => "depth_map",
        TaskKind::BboxGen => "boxes",
        TaskKind::DepthCot => "depth_cot",
        TaskKind::CountCot => "count_cot",
        TaskKind::DepthDirect | TaskKind::CountDirect => "perception_text",
    }
}

struct Nfa {
    eps: Vec<Vec<usize>>,
    edges: Vec<Vec<(TokenClass, usize)>>,
}

impl Nfa {
    fn state(&mut self) -> Result<usize> {
        if self.eps.len() >= MAX_NFA_STATES {
            return Err(Error::InvalidGrammar(format!(
                "pattern expands past {MAX_NFA_STATES} states"
            )));
        }
        self.eps.push(Vec::new());
        self.edges.push(Vec::new());
        Ok(self.eps.len() - 1)
    }

    fn fragment(&mut self, node: &Node) -> Result<(usize, usize)> {
        match node {
            Node::Class(c) => {
                let (s, t) = (self.state()?, self.state()?);
                self.edges[s].push((*c, t));
                Ok((s, t))
            }
            Node::Seq(items) => {
                let s = self.state()?;
                let mut end = s;
                for item in items {
                    let (a, b) = self.fragment(item)?;
                    self.eps[end].push(a);
                    end = b;
                }
                Ok((s, end))
            }
            Node::Choice(items) => {
                if items.is_empty() {
                    return Err(Error::InvalidGrammar("empty choice".into()));
                }
                let (s, t) = (self.state()?, self.state()?);
                for item in items {
                    let (a, b) = self.fragment(item)?;
                    self.eps[s].push(a);
                    self.eps[b].push(t);
                }
                Ok((s, t))
            }
            Node::Repeat { node, min, max } => {
                if let Some(max) = max {
                    if max < min {
                        return Err(Error::InvalidGrammar(format!(
                            "repeat bounds {min}..{max} are reversed"
                        )));
                    }
                }
                let s = self.state()?;
                let mut end = s;
                for _ in 0..*min {
                    let (a, b) = self.fragment(node)?;
                    self.eps[end].push(a);
                    end = b;
                }
                let t = self.state()?;
                match max {
                    Some(max) => {
                        for _ in *min..*max {
                            let (a, b) = self.fragment(node)?;
                            self.eps[end].push(a);
                            self.eps[end].push(t);
                            end = b;
                        }
                        self.eps[end].push(t);
                    }
                    None => {
                        let (a, b) = self.fragment(node)?;
                        self.eps[end].push(a);
                        self.eps[end].push(t);
                        self.eps[b].push(a);
                        self.eps[b].push(t);
                    }
                }
                Ok((s, t))
            }
        }
    }

    fn closure(&self, seeds: impl IntoIterator<Item = usize>) -> Vec<usize> {
        let mut seen = vec![false; self.eps.len()];
        let mut stack: Vec<usize> = seeds.into_iter().collect();
        let mut out = Vec::new();
        while let Some(s) = stack.pop() {
            if std::mem::replace(&mut seen[s], true) {
                continue;
            }
            out.push(s);
            stack.extend(self.eps[s].iter().copied());
        }
        out.sort_unstable();
        out
    }
}

/// Deterministic automaton compiled from a [`GrammarSpec`]. Immutable and
/// shareable across streams.
#[derive(Debug, Clone)]
pub struct Grammar {
    spec: GrammarSpec,
    trans: Vec<[Option<u32>; CLASSES]>,
    accept: Vec<bool>,
    /// Steps to the nearest accepting state.
    distance: Vec<u32>,
}

impl Grammar {
    pub fn compile(spec: GrammarSpec) -> Result<Self> {
        let mut nfa = Nfa {
            eps: Vec::new(),
            edges: Vec::new(),
        };
        let (start, end) = nfa.fragment(&spec.pattern)?;

        // Subset construction.
        let mut ids: HashMap<Vec<usize>, u32> = HashMap::new();
        let mut sets = vec![nfa.closure([start])];
        ids.insert(sets[0].clone(), 0);
        let mut trans: Vec<[Option<u32>; CLASSES]> = Vec::new();
        let mut i = 0;
        while i < sets.len() {
            let mut row = [None; CLASSES];
            for class in TokenClass::ALL {
                let targets: Vec<usize> = sets[i]
                    .iter()
                    .flat_map(|&s| nfa.edges[s].iter())
                    .filter(|(c, _)| *c == class)
                    .map(|&(_, t)| t)
                    .collect();
                if targets.is_empty() {
                    continue;
                }
                let set = nfa.closure(targets);
                let id = match ids.get(&set) {
                    Some(&id) => id,
                    None => {
                        let id = sets.len() as u32;
                        ids.insert(set.clone(), id);
                        sets.push(set);
                        id
                    }
                };
                row[class.index()] = Some(id);
            }
            trans.push(row);
            i += 1;
        }
        let accept: Vec<bool> = sets.iter().map(|s| s.binary_search(&end).is_ok()).collect();
        Self::pruned(spec, trans, accept)
    }

    /// Drops states that cannot reach acceptance and renumbers the rest in
    /// breadth-first order from the start state.
    fn pruned(spec: GrammarSpec, trans: Vec<[Option<u32>; CLASSES]>, accept: Vec<bool>) -> Result<Self> {
        let n = trans.len();
        let mut reverse: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (s, row) in trans.iter().enumerate() {
            for t in row.iter().flatten() {
                reverse[*t as usize].push(s);
            }
        }
        let mut distance = vec![u32::MAX; n];
        let mut queue: VecDeque<usize> = (0..n).filter(|&s| accept[s]).collect();
        for &s in &queue {
            distance[s] = 0;
        }
        while let Some(s) = queue.pop_front() {
            for &p in &reverse[s] {
                if distance[p] == u32::MAX {
                    distance[p] = distance[s] + 1;
                    queue.push_back(p);
                }
            }
        }
        if distance[0] == u32::MAX {
            return Err(Error::InvalidGrammar(format!(
                "grammar `{}` accepts no sequence",
                spec.name
            )));
        }

        let mut renumber = vec![u32::MAX; n];
        let mut order = vec![0usize];
        renumber[0] = 0;
        let mut head = 0;
        while head < order.len() {
            let s = order[head];
            head += 1;
            for t in trans[s].iter().flatten() {
                let t = *t as usize;
                if distance[t] != u32::MAX && renumber[t] == u32::MAX {
                    renumber[t] = order.len() as u32;
                    order.push(t);
                }
            }
        }
        let new_trans = order
            .iter()
            .map(|&s| {
                trans[s].map(|t| t.filter(|&t| distance[t as usize] != u32::MAX).map(|t| renumber[t as usize]))
            })
            .collect();
        Ok(Self {
            spec,
            trans: new_trans,
            accept: order.iter().map(|&s| accept[s]).collect(),
            distance: order.iter().map(|&s| distance[s]).collect(),
        })
    }

    pub fn bundled(name: &str) -> Result<Self> {
        let spec = bundled(name)
            .ok_or_else(|| Error::InvalidGrammar(format!("no bundled grammar named `{name}`")))?;
        Self::compile(spec)
    }

    /// Bundled name or path to a JSON description.
    pub fn resolve(name_or_path: &str) -> Result<Self> {
        match bundled(name_or_path) {
            Some(spec) => Self::compile(spec),
            None => Self::compile(GrammarSpec::load(name_or_path)?),
        }
    }

    pub fn spec(&self) -> &GrammarSpec {
        &self.spec
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn state_count(&self) -> usize {
        self.trans.len()
    }

    pub fn start(&self) -> DecodeState {
        DecodeState::default()
    }

    pub fn is_accepting(&self, state: &DecodeState) -> bool {
        self.accept[state.state as usize]
    }

    /// Length of the shortest completion from `state`.
    pub fn distance_to_accept(&self, state: &DecodeState) -> u32 {
        self.distance[state.state as usize]
    }

    /// True when no token may follow.
    pub fn is_final(&self, state: &DecodeState) -> bool {
        self.trans[state.state as usize].iter().all(Option::is_none)
    }

    pub fn allowed_classes(&self, state: &DecodeState) -> Vec<TokenClass> {
        TokenClass::ALL
            .into_iter()
            .filter(|c| self.trans[state.state as usize][c.index()].is_some())
            .collect()
    }

    /// Smallest PIXEL coordinate allowed next.
    fn pixel_floor(&self, state: &DecodeState) -> u16 {
        if !self.spec.box_tuples {
            return 0;
        }
        match state.pixel_phase {
            2 => state.box_origin[0],
            3 => state.box_origin[1],
            _ => 0,
        }
    }

    pub fn is_allowed(&self, state: &DecodeState, token: TokenId, vocab: &Vocabulary) -> bool {
        let Some(class) = vocab.class_of(token) else {
            return false;
        };
        if self.trans[state.state as usize][class.index()].is_none() {
            return false;
        }
        match vocab.pixel_coord(token) {
            Some(coord) => coord >= self.pixel_floor(state),
            None => true,
        }
    }

    pub fn allowed_mask(&self, state: &DecodeState, vocab: &Vocabulary) -> TokenMask {
        let mut mask = TokenMask::empty(vocab.len());
        for class in self.allowed_classes(state) {
            let mut range = class_range(vocab, class);
            if class == TokenClass::Pixel {
                range.start += u32::from(self.pixel_floor(state));
            }
            mask.insert_range(range);
        }
        mask
    }

    pub fn advance(&self, state: &DecodeState, token: TokenId, vocab: &Vocabulary) -> Result<DecodeState> {
        if !self.is_allowed(state, token, vocab) {
            return Err(Error::IllegalToken { token: token.0 });
        }
        let class = vocab.class_of(token).expect("allowed tokens are in the vocabulary");
        let mut next = *state;
        next.state = self.trans[state.state as usize][class.index()].expect("allowed class");
        match class {
            TokenClass::DepthStart => {
                next.in_depth_span = true;
                next.depth_count = 0;
            }
            TokenClass::Depth if next.in_depth_span => {
                next.depth_count = next.depth_count.saturating_add(1);
            }
            TokenClass::DepthEnd => {
                next.in_depth_span = false;
                next.depth_count = 0;
            }
            TokenClass::Pixel => {
                let coord = vocab.pixel_coord(token).expect("pixel token");
                match next.pixel_phase {
                    0 => next.box_origin[0] = coord,
                    1 => next.box_origin[1] = coord,
                    _ => {}
                }
                next.pixel_phase = (next.pixel_phase + 1) % 4;
            }
            _ => {}
        }
        Ok(next)
    }

    /// Feeds `seq` from the start state.
    pub fn replay(&self, seq: &[TokenId], vocab: &Vocabulary) -> Result<DecodeState> {
        seq.iter()
            .try_fold(self.start(), |st, &t| self.advance(&st, t, vocab))
    }

    pub fn accepts(&self, seq: &[TokenId], vocab: &Vocabulary) -> bool {
        self.replay(seq, vocab)
            .map(|st| self.is_accepting(&st))
            .unwrap_or(false)
    }

    /// Lowest-id token on a shortest path to acceptance.
    fn completion_token(&self, state: &DecodeState, vocab: &Vocabulary) -> Option<TokenId> {
        let row = &self.trans[state.state as usize];
        let mut best: Option<(u32, TokenId)> = None;
        for class in TokenClass::ALL {
            let Some(t) = row[class.index()] else { continue };
            let d = self.distance[t as usize];
            let mut range = class_range(vocab, class);
            if class == TokenClass::Pixel {
                range.start += u32::from(self.pixel_floor(state));
            }
            let token = TokenId(range.start);
            if best.is_none_or(|(bd, bt)| d < bd || (d == bd && token < bt)) {
                best = Some((d, token));
            }
        }
        best.map(|(_, t)| t)
    }
}

pub fn class_range(vocab: &Vocabulary, class: TokenClass) -> Range<u32> {
    match class {
        TokenClass::Base => 0..vocab.base_size(),
        TokenClass::Depth => {
            let first = vocab.depth_token(0).0;
            first..first + DEPTH_CODES as u32
        }
        TokenClass::Pixel => {
            let first = vocab.pixel_token(0).0;
            first..first + PIXEL_POSITIONS as u32
        }
        TokenClass::DepthStart => vocab.depth_start().0..vocab.depth_start().0 + 1,
        TokenClass::DepthEnd => vocab.depth_end().0..vocab.depth_end().0 + 1,
    }
}

/// Per-stream decoding position.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DecodeState {
    pub state: u32,
    /// DEPTH tokens since the last DEPTH_START.
    pub depth_count: u8,
    pub in_depth_span: bool,
    /// PIXEL tokens emitted so far, mod 4.
    pub pixel_phase: u8,
    /// `x1, y1` of the tuple in progress.
    pub box_origin: [u16; 2],
}

/// Allowed-token bitset over V'.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    words: Vec<u64>,
    len: usize,
}

impl TokenMask {
    pub fn empty(len: usize) -> Self {
        Self {
            words: vec![0; len.div_ceil(64)],
            len,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, id: TokenId) {
        let i = id.index();
        assert!(i < self.len, "token {i} outside a mask of {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    pub fn insert_range(&mut self, range: Range<u32>) {
        for i in range {
            self.insert(TokenId(i));
        }
    }

    pub fn contains(&self, id: TokenId) -> bool {
        let i = id.index();
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    /// Number of allowed tokens.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = TokenId> + '_ {
        (0..self.len as u32).map(TokenId).filter(|&t| self.contains(t))
    }

    pub fn to_bools(&self) -> Vec<bool> {
        (0..self.len as u32).map(|i| self.contains(TokenId(i))).collect()
    }

    /// Byte `i / 8`, bit `i % 8` (least significant first) holds token `i`.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out: Vec<u8> = self.words.iter().flat_map(|w| w.to_le_bytes()).collect();
        out.truncate(self.len.div_ceil(8));
        out
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Self {
        let mut mask = Self::empty(len);
        for i in 0..len.min(bytes.len() * 8) {
            if bytes[i / 8] >> (i % 8) & 1 == 1 {
                mask.insert(TokenId(i as u32));
            }
        }
        mask
    }

    pub fn to_base64(&self) -> String {
        base64::engine::general_purpose::STANDARD.encode(self.to_bytes())
    }
}

/// Source of next-token scores, one per token of V'. `None` ends the stream.
pub trait LogitStream {
    fn next_logits(&mut self, prefix: &[TokenId]) -> Option<Vec<f32>>;
}

/// Scores a fixed target sequence highest at every step.
#[derive(Debug, Clone)]
pub struct LookupStream {
    target: Vec<TokenId>,
    vocab_len: usize,
}

impl LookupStream {
    pub fn new(target: Vec<TokenId>, vocab: &Vocabulary) -> Self {
        Self {
            target,
            vocab_len: vocab.len(),
        }
    }
}

impl LogitStream for LookupStream {
    fn next_logits(&mut self, prefix: &[TokenId]) -> Option<Vec<f32>> {
        let next = self.target.get(prefix.len())?;
        let mut logits = vec![0.0; self.vocab_len];
        logits[next.index()] = 1.0;
        Some(logits)
    }
}

/// Uniform random scores for a fixed number of steps, with an optional bonus
/// on base tokens.
#[derive(Debug, Clone)]
pub struct RandomStream<R> {
    rng: R,
    steps: usize,
    vocab_len: usize,
    base_size: usize,
    base_bias: f32,
}

impl<R: Rng> RandomStream<R> {
    pub fn new(rng: R, steps: usize, vocab: &Vocabulary, base_bias: f32) -> Self {
        Self {
            rng,
            steps,
            vocab_len: vocab.len(),
            base_size: vocab.base_size() as usize,
            base_bias,
        }
    }
}

impl<R: Rng> LogitStream for RandomStream<R> {
    fn next_logits(&mut self, prefix: &[TokenId]) -> Option<Vec<f32>> {
        if prefix.len() >= self.steps {
            return None;
        }
        Some(
            (0..self.vocab_len)
                .map(|i| {
                    let bias = if i < self.base_size { self.base_bias } else { 0.0 };
                    self.rng.random_range(-4.0f32..4.0) + bias
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleOptions {
    /// Zero selects the masked argmax.
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_len: 4096,
        }
    }
}

fn finite(x: f32) -> f64 {
    if x.is_nan() {
        f64::NEG_INFINITY
    } else {
        f64::from(x)
    }
}

/// Decodes from `stream` under `grammar`. When the stream ends in a
/// non-accepting state the shortest completion is appended, lowest token id
/// first, so the output is always accepted.
pub fn constrained_sample<S, R>(
    stream: &mut S,
    grammar: &Grammar,
    vocab: &Vocabulary,
    options: &SampleOptions,
    rng: &mut R,
) -> Result<Vec<TokenId>>
where
    S: LogitStream + ?Sized,
    R: Rng + ?Sized,
{
    let mut out = Vec::new();
    let mut state = grammar.start();
    loop {
        if grammar.is_accepting(&state) && grammar.is_final(&state) {
            return Ok(out);
        }
        if out.len() >= options.max_len {
            return if grammar.is_accepting(&state) {
                Ok(out)
            } else {
                Err(Error::MaxLengthExceeded(options.max_len))
            };
        }
        let Some(logits) = stream.next_logits(&out) else {
            return complete(grammar, vocab, state, out, options.max_len);
        };
        if logits.len() != vocab.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} logits", vocab.len()),
                got: format!("{}", logits.len()),
            });
        }
        let mask = grammar.allowed_mask(&state, vocab);
        let token = pick(&mask, &logits, options.temperature, rng);
        state = grammar.advance(&state, token, vocab)?;
        out.push(token);
    }
}

fn complete(
    grammar: &Grammar,
    vocab: &Vocabulary,
    mut state: DecodeState,
    mut out: Vec<TokenId>,
    max_len: usize,
) -> Result<Vec<TokenId>> {
    while !grammar.is_accepting(&state) {
        if out.len() >= max_len {
            return Err(Error::MaxLengthExceeded(max_len));
        }
        let token = grammar
            .completion_token(&state, vocab)
            .expect("pruned states reach acceptance");
        state = grammar.advance(&state, token, vocab)?;
        out.push(token);
    }
    Ok(out)
}

fn pick<R: Rng + ?Sized>(mask: &TokenMask, logits: &[f32], temperature: f64, rng: &mut R) -> TokenId {
    let allowed: Vec<TokenId> = mask.iter().collect();
    let best = allowed
        .iter()
        .copied()
        .fold(None, |best: Option<(TokenId, f64)>, t| {
            let v = finite(logits[t.index()]);
            match best {
                Some((_, b)) if b >= v => best,
                _ => Some((t, v)),
            }
        })
        .expect("masks are never empty");
    if temperature <= 0.0 || best.1 == f64::NEG_INFINITY || best.1 == f64::INFINITY {
        return best.0;
    }
    let weights: Vec<f64> = allowed
        .iter()
        .map(|t| ((finite(logits[t.index()]) - best.1) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (t, w) in allowed.iter().zip(&weights) {
        if u < *w {
            return *t;
        }
        u -= w;
    }
    best.0
}

/// Question tokens followed by the auxiliary tokens of `response`, in order;
/// the base-token reasoning in between is dropped.
pub fn bottleneck_context(question: &[TokenId], response: &[TokenId], vocab: &Vocabulary) -> Result<Vec<TokenId>> {
    let aux: Vec<TokenId> = response.iter().copied().filter(|&t| vocab.is_aux(t)).collect();
    if aux.is_empty() {
        return Err(Error::NoAuxSpan);
    }
    let mut out = question.to_vec();
    out.extend(aux);
    Ok(out)
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// FNV-1a over the little-endian bytes of a token history.
pub fn history_hash(history: &[TokenId]) -> u64 {
    history.iter().fold(FNV_OFFSET, |h, &t| extend_hash(h, t))
}

pub fn extend_hash(hash: u64, token: TokenId) -> u64 {
    token
        .0
        .to_le_bytes()
        .iter()
        .fold(hash, |h, &b| (h ^ u64::from(b)).wrapping_mul(FNV_PRIME))
}

/// Line protocol for querying masks without linking the library.
///
/// ```text
/// START                 -> <hash>
/// ADVANCE <hash> <id>   -> OK <hash>
/// MASK <hash>           -> <base64 bitset>
/// ```
///
/// Hashes are 16 hex digits. Failures answer `ERR <kind> <message>`.
pub struct MaskServer {
    grammar: Grammar,
    vocab: Vocabulary,
    states: HashMap<u64, DecodeState>,
}

impl MaskServer {
    pub fn new(grammar: Grammar, vocab: Vocabulary) -> Self {
        let mut states = HashMap::new();
        states.insert(history_hash(&[]), grammar.start());
        Self {
            grammar,
            vocab,
            states,
        }
    }

    pub fn handle(&mut self, line: &str) -> String {
        match self.dispatch(line) {
            Ok(reply) => reply,
            Err(e) => format!("ERR {} {e}", e.kind()),
        }
    }

    fn state(&self, hash: &str) -> Result<(u64, DecodeState)> {
        let h = u64::from_str_radix(hash, 16)
            .map_err(|_| Error::Unparseable(format!("bad hash `{hash}`")))?;
        let st = self
            .states
            .get(&h)
            .ok_or_else(|| Error::Unparseable(format!("unknown history {hash}")))?;
        Ok((h, *st))
    }

    fn dispatch(&mut self, line: &str) -> Result<String> {
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            ["START"] => Ok(format!("{:016x}", history_hash(&[]))),
            ["MASK", hash] => {
                let (_, st) = self.state(hash)?;
                Ok(self.grammar.allowed_mask(&st, &self.vocab).to_base64())
            }
            ["ADVANCE", hash, token] => {
                let (h, st) = self.state(hash)?;
                let token = TokenId(
                    token
                        .parse()
                        .map_err(|_| Error::Unparseable(format!("bad token id `{token}`")))?,
                );
                let next = self.grammar.advance(&st, token, &self.vocab)?;
                let nh = extend_hash(h, token);
                self.states.insert(nh, next);
                Ok(format!("OK {nh:016x}"))
            }
            _ => Err(Error::Unparseable(format!("unknown request `{line}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::depth_codec::tokens_to_grid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::build(64)
    }

    fn walk(g: &Grammar, v: &Vocabulary, seq: &[TokenId]) -> DecodeState {
        g.replay(seq, v).unwrap()
    }

    #[test]
    fn depth_span_masks_count_down() {
        let v = vocab();
        let g = Grammar::bundled("depth_map").unwrap();
        let mut st = g.advance(&g.start(), v.depth_start(), &v).unwrap();
        for i in 0..100 {
            let mask = g.allowed_mask(&st, &v);
            assert_eq!(mask.count(), 128, "step {i}");
            assert!(mask.iter().all(|t| v.depth_code(t).is_some()));
            st = g.advance(&st, v.depth_token(i % 128), &v).unwrap();
            assert_eq!(st.depth_count as usize, i + 1);
        }
        let mask = g.allowed_mask(&st, &v);
        assert_eq!(mask.iter().collect::<Vec<_>>(), vec![v.depth_end()]);
        st = g.advance(&st, v.depth_end(), &v).unwrap();
        assert!(g.is_accepting(&st) && g.is_final(&st));
    }

    #[test]
    fn unrestricted_free_state_allows_everything() {
        let v = vocab();
        let g = Grammar::bundled("unrestricted").unwrap();
        assert_eq!(g.allowed_mask(&g.start(), &v).count(), v.len());
    }

    #[test]
    fn depth_count_increments() {
        let v = vocab();
        let g = Grammar::bundled("perception_text").unwrap();
        let mut seq = vec![TokenId(3), v.depth_start()];
        seq.extend((0..57).map(|i| v.depth_token(i)));
        let st = walk(&g, &v, &seq);
        assert_eq!(st.depth_count, 57);
        assert_eq!(g.advance(&st, v.depth_token(9), &v).unwrap().depth_count, 58);
    }

    #[test]
    fn bare_depth_token_is_illegal() {
        let v = vocab();
        let g = Grammar::bundled("perception_text").unwrap();
        let st = walk(&g, &v, &[TokenId(0), TokenId(1)]);
        assert!(matches!(
            g.advance(&st, v.depth_token(3), &v),
            Err(Error::IllegalToken { .. })
        ));
    }

    #[test]
    fn box_tuples_are_pixel_only_and_ordered() {
        let v = vocab();
        let g = Grammar::bundled("count_cot").unwrap();
        let st = walk(&g, &v, &[TokenId(5), v.pixel_token(100)]);
        assert_eq!(st.pixel_phase, 1);
        let mask = g.allowed_mask(&st, &v);
        assert_eq!(mask.count(), 336);
        let st = g.advance(&st, v.pixel_token(40), &v).unwrap();
        let mask = g.allowed_mask(&st, &v);
        assert_eq!(mask.count(), 336 - 100);
        assert!(!mask.contains(v.pixel_token(99)));
        assert!(g.advance(&st, v.pixel_token(99), &v).is_err());
        let st = g.advance(&st, v.pixel_token(100), &v).unwrap();
        assert_eq!(g.allowed_mask(&st, &v).count(), 336 - 40);
    }

    #[test]
    fn every_state_reaches_acceptance() {
        for name in BUNDLED {
            let g = Grammar::bundled(name).unwrap();
            for s in 0..g.state_count() {
                assert!(g.distance[s] != u32::MAX, "{name} state {s}");
                if !g.accept[s] {
                    assert!(g.trans[s].iter().any(Option::is_some));
                }
            }
        }
    }

    #[test]
    fn oracle_stream_is_reproduced() {
        let v = vocab();
        let g = Grammar::bundled("depth_cot").unwrap();
        let mut target = vec![TokenId(7), v.pixel_token(10), v.pixel_token(20), TokenId(8), v.depth_start()];
        target.extend((0..100).map(|i| v.depth_token(i)));
        target.extend([v.depth_end(), TokenId(9), TokenId(0)]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut stream = LookupStream::new(target.clone(), &v);
        let out = constrained_sample(&mut stream, &g, &v, &SampleOptions::default(), &mut rng).unwrap();
        assert_eq!(out, target);
    }

    #[test]
    fn adversarial_stream_still_yields_full_span() {
        let v = vocab();
        let g = Grammar::bundled("depth_map").unwrap();
        for seed in 0..50 {
            let mut stream = RandomStream::new(ChaCha8Rng::seed_from_u64(seed), 500, &v, 100.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let options = SampleOptions {
                temperature: 1.0,
                max_len: 200,
            };
            let out = constrained_sample(&mut stream, &g, &v, &options, &mut rng).unwrap();
            assert_eq!(out.len(), 102);
            tokens_to_grid(&out, &v).unwrap();
        }
    }

    #[test]
    fn short_streams_are_completed() {
        let v = vocab();
        let g = Grammar::bundled("depth_cot").unwrap();
        let mut stream = RandomStream::new(ChaCha8Rng::seed_from_u64(1), 3, &v, 0.0);
        let out = constrained_sample(&mut stream, &g, &v, &SampleOptions::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(g.accepts(&out, &v));
        assert!(out.iter().filter(|&&t| v.depth_code(t).is_some()).count() == 100);
    }

    #[test]
    fn max_length_is_enforced() {
        let v = vocab();
        let g = Grammar::bundled("depth_map").unwrap();
        let mut stream = RandomStream::new(ChaCha8Rng::seed_from_u64(1), 500, &v, 0.0);
        let options = SampleOptions {
            temperature: 0.0,
            max_len: 50,
        };
        assert!(matches!(
            constrained_sample(&mut stream, &g, &v, &options, &mut ChaCha8Rng::seed_from_u64(1)),
            Err(Error::MaxLengthExceeded(50))
        ));
    }

    #[test]
    fn greedy_decoding_is_deterministic() {
        let v = vocab();
        let g = Grammar::bundled("perception_text").unwrap();
        let run = || {
            let mut stream = RandomStream::new(ChaCha8Rng::seed_from_u64(9), 300, &v, 0.0);
            constrained_sample(&mut stream, &g, &v, &SampleOptions::default(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn bottleneck_keeps_question_and_aux() {
        let v = vocab();
        let question = vec![TokenId(1), TokenId(2)];
        let mut span = vec![v.depth_start()];
        span.extend((0..100).map(|i| v.depth_token(i)));
        span.push(v.depth_end());
        let mut response = vec![TokenId(10), TokenId(11)];
        response.extend(&span);
        response.push(TokenId(12));
        let ctx = bottleneck_context(&question, &response, &v).unwrap();
        let mut expected = question.clone();
        expected.extend(&span);
        assert_eq!(ctx, expected);
        assert!(matches!(
            bottleneck_context(&question, &[TokenId(4)], &v),
            Err(Error::NoAuxSpan)
        ));
    }

    #[test]
    fn bad_descriptions_are_rejected() {
        let empty = GrammarSpec {
            name: "x".into(),
            box_tuples: false,
            pattern: Node::Choice(vec![]),
        };
        assert!(matches!(Grammar::compile(empty), Err(Error::InvalidGrammar(_))));
        let reversed = GrammarSpec {
            name: "x".into(),
            box_tuples: false,
            pattern: Node::repeat(Node::class(TokenClass::Base), 3, Some(1)),
        };
        assert!(matches!(Grammar::compile(reversed), Err(Error::InvalidGrammar(_))));
    }

    #[test]
    fn descriptions_round_trip_through_json() {
        for name in BUNDLED {
            let spec = bundled(name).unwrap();
            let json = serde_json::to_string(&spec).unwrap();
            assert_eq!(serde_json::from_str::<GrammarSpec>(&json).unwrap(), spec);
        }
        let text = r#"{"name":"pair","pattern":{"seq":[{"class":"DEPTH_START"},{"repeat":{"node":{"class":"DEPTH"},"min":2,"max":2}},{"class":"DEPTH_END"}]}}"#;
        let g = Grammar::compile(serde_json::from_str(text).unwrap()).unwrap();
        let v = vocab();
        assert!(g.accepts(&[v.depth_start(), v.depth_token(0), v.depth_token(1), v.depth_end()], &v));
        assert!(!g.accepts(&[v.depth_start(), v.depth_token(0), v.depth_end()], &v));
    }

    #[test]
    fn mask_bytes_are_lsb_first() {
        let mut mask = TokenMask::empty(20);
        mask.insert(TokenId(0));
        mask.insert(TokenId(9));
        mask.insert(TokenId(19));
        assert_eq!(mask.to_bytes(), vec![0b0000_0001, 0b0000_0010, 0b0000_1000]);
        assert_eq!(TokenMask::from_bytes(&mask.to_bytes(), 20), mask);
    }

    #[test]
    fn mask_server_protocol() {
        let v = vocab();
        let g = Grammar::bundled("depth_map").unwrap();
        let mut server = MaskServer::new(g.clone(), v.clone());
        let h0 = server.handle("START");
        assert_eq!(h0, format!("{:016x}", history_hash(&[])));
        let reply = server.handle(&format!("ADVANCE {h0} {}", v.depth_start().0));
        let h1 = reply.strip_prefix("OK ").unwrap();
        assert_eq!(h1, format!("{:016x}", history_hash(&[v.depth_start()])));
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(server.handle(&format!("MASK {h1}")))
            .unwrap();
        let mask = TokenMask::from_bytes(&bytes, v.len());
        assert_eq!(mask, g.allowed_mask(&g.replay(&[v.depth_start()], &v).unwrap(), &v));
        assert!(server.handle(&format!("ADVANCE {h0} 3")).starts_with("ERR IllegalToken"));
        assert!(server.handle("MASK 0000000000000001").starts_with("ERR"));
        assert!(server.handle("HELLO").starts_with("ERR"));
    }
}
