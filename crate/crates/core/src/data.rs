//! The synthetic shapes world: scenes, rendering, captions, text-only
//! documents, question tasks, and deterministic batch plans.

use std::collections::BTreeSet;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::PAD;
use crate::vision::Image;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Shape::ALL.into_iter().find(|s| s.word() == w)
    }

    /// Whether a point in cell-normalized coordinates lies inside the shape.
    fn covers(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Square => (0.15..0.85).contains(&u) && (0.15..0.85).contains(&v),
            Shape::Circle => (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.36 * 0.36,
            Shape::Triangle => (0.15..0.85).contains(&v) && (u - 0.5).abs() < 0.5 * (v - 0.15),
        }
    }
}

impl Color {
    pub const ALL: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn from_word(w: &str) -> Option<Self> {
        Color::ALL.into_iter().find(|c| c.word() == w)
    }

    pub fn rgb(self) -> [f32; 3] {
        match self {
            Color::Red => [1.0, 0.0, 0.0],
            Color::Green => [0.0, 1.0, 0.0],
            Color::Blue => [0.0, 0.0, 1.0],
            Color::Yellow => [1.0, 1.0, 0.0],
        }
    }
}

/// A (color, shape) pair; the unit of compositional holdout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Combo {
    pub color: Color,
    pub shape: Shape,
}

impl fmt::Display for Combo {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}", self.color.word(), self.shape.word())
    }
}

impl std::str::FromStr for Combo {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut it = s.split([' ', '_', '-']);
        let (c, sh) = (it.next().unwrap_or(""), it.next().unwrap_or(""));
        match (Color::from_word(c), Shape::from_word(sh), it.next()) {
            (Some(color), Some(shape), None) => Ok(Combo { color, shape }),
            _ => Err(Error::Config(format!("bad combo {s:?}, expected e.g. \"yellow circle\""))),
        }
    }
}

pub fn all_combos() -> Vec<Combo> {
    Color::ALL.into_iter().flat_map(|color| Shape::ALL.into_iter().map(move |shape| Combo { color, shape })).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
    /// `[row, col]` on the scene grid.
    pub cell: [usize; 2],
}

impl Object {
    pub fn combo(&self) -> Combo {
        Combo { color: self.color, shape: self.shape }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Above,
    LeftOf,
}

impl Relation {
    pub fn words(self) -> &'static str {
        match self {
            Relation::Above => "above",
            Relation::LeftOf => "left of",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<Object>,
    pub grid: usize,
}

/// What a caption states: objects in subject-first order and the relation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Semantics {
    pub objects: Vec<Combo>,
    pub relation: Option<Relation>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.objects.len() > 2 {
            return Err(Error::Data(format!("{} objects; at most 2 allowed", self.objects.len())));
        }
        for o in &self.objects {
            if o.cell[0] >= self.grid || o.cell[1] >= self.grid {
                return Err(Error::Data(format!("cell {:?} outside a {} grid", o.cell, self.grid)));
            }
        }
        if self.objects.len() == 2 && self.objects[0].cell == self.objects[1].cell {
            return Err(Error::Data(format!("overlapping cells {:?}", self.objects[0].cell)));
        }
        Ok(())
    }

    /// Objects with the subject first: the upper one, or the left one when
    /// both share a row. Returns the relation that holds subject -> object.
    pub fn ordered(&self) -> (Vec<Object>, Option<Relation>) {
        match self.objects.as_slice() {
            [a, b] => {
                let (s, o) = if (a.cell[0], a.cell[1]) <= (b.cell[0], b.cell[1]) { (*a, *b) } else { (*b, *a) };
                let rel = if s.cell[0] < o.cell[0] { Relation::Above } else { Relation::LeftOf };
                (vec![s, o], Some(rel))
            }
            other => (other.to_vec(), None),
        }
    }

    pub fn semantics(&self) -> Semantics {
        let (objs, relation) = self.ordered();
        Semantics { objects: objs.iter().map(Object::combo).collect(), relation }
    }

    pub fn combos(&self) -> impl Iterator<Item = Combo> + '_ {
        self.objects.iter().map(Object::combo)
    }
}

/// Solid shapes on a white background; no anti-aliasing. Each pixel is
/// tested at its center in cell-normalized coordinates.
pub fn render_scene(spec: &SceneSpec, hw: usize) -> Result<Image> {
    spec.validate()?;
    if spec.grid == 0 || !hw.is_multiple_of(spec.grid) {
        return Err(Error::Data(format!("image size {hw} not divisible by grid {}", spec.grid)));
    }
    let cell = hw / spec.grid;
    let mut img = Image::filled(hw, hw, [1.0; 3]);
    for o in &spec.objects {
        let (top, left) = (o.cell[0] * cell, o.cell[1] * cell);
        for y in 0..cell {
            let v = (y as f64 + 0.5) / cell as f64;
            for x in 0..cell {
                let u = (x as f64 + 0.5) / cell as f64;
                if o.shape.covers(u, v) {
                    for (c, &val) in o.color.rgb().iter().enumerate() {
                        img.set(c, top + y, left + x, val);
                    }
                }
            }
        }
    }
    Ok(img)
}

fn noun_phrase(c: Combo) -> String {
    format!("a {} {}", c.color.word(), c.shape.word())
}

/// The grammar caption for a scene: "a red square", "a red square above a
/// blue circle", "a red square left of a blue circle".
pub fn clean_caption(spec: &SceneSpec) -> String {
    let sem = spec.semantics();
    match (sem.objects.as_slice(), sem.relation) {
        ([], _) => "nothing".to_string(),
        ([a], _) => noun_phrase(*a),
        ([a, b, ..], Some(r)) => format!("{} {} {}", noun_phrase(*a), r.words(), noun_phrase(*b)),
        ([a, b, ..], None) => format!("{} and {}", noun_phrase(*a), noun_phrase(*b)),
    }
}

/// Grammar caption, corrupted with probability `noise_rate` by dropping a
/// word or swapping a color word for a different color.
pub fn caption_scene<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R, noise_rate: f64) -> String {
    let clean = clean_caption(spec);
    if noise_rate <= 0.0 || rng.gen::<f64>() >= noise_rate {
        return clean;
    }
    let mut words: Vec<&str> = clean.split(' ').collect();
    let colors: Vec<usize> = (0..words.len()).filter(|&i| Color::from_word(words[i]).is_some()).collect();
    if rng.gen::<bool>() && !colors.is_empty() {
        let i = colors[rng.gen_range(0..colors.len())];
        let old = Color::from_word(words[i]).expect("color word");
        let others: Vec<Color> = Color::ALL.into_iter().filter(|&c| c != old).collect();
        words[i] = others[rng.gen_range(0..others.len())].word();
    } else if words.len() > 1 {
        words.remove(rng.gen_range(0..words.len()));
    }
    words.join(" ")
}

/// Invert the caption grammar. Recovers objects and relation; cells are
/// not stated by captions.
pub fn parse_caption(text: &str) -> Result<Semantics> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::Data(format!("not a grammar caption: {text:?}"));
    let np = |w: &[&str]| -> Option<Combo> {
        match w {
            ["a", c, s] => Some(Combo { color: Color::from_word(c)?, shape: Shape::from_word(s)? }),
            _ => None,
        }
    };
    match words.len() {
        3 => Ok(Semantics { objects: vec![np(&words).ok_or_else(bad)?], relation: None }),
        7 if words[3] == "above" => Ok(Semantics {
            objects: vec![np(&words[..3]).ok_or_else(bad)?, np(&words[4..]).ok_or_else(bad)?],
            relation: Some(Relation::Above),
        }),
        8 if words[3] == "left" && words[4] == "of" => Ok(Semantics {
            objects: vec![np(&words[..3]).ok_or_else(bad)?, np(&words[5..]).ok_or_else(bad)?],
            relation: Some(Relation::LeftOf),
        }),
        _ => Err(bad()),
    }
}

/// A random scene with 1 or 2 objects (2 with probability 2/3) whose
/// combos are drawn from `allowed`.
pub fn random_scene<R: Rng + ?Sized>(allowed: &[Combo], grid: usize, rng: &mut R) -> SceneSpec {
    let n = if rng.gen_range(0..3) == 0 { 1 } else { 2 };
    random_scene_with(allowed, grid, n, rng)
}

pub fn random_scene_with<R: Rng + ?Sized>(allowed: &[Combo], grid: usize, n: usize, rng: &mut R) -> SceneSpec {
    let cells: Vec<usize> = rand::seq::index::sample(rng, grid * grid, n).into_vec();
    let objects = cells
        .into_iter()
        .map(|c| {
            let combo = allowed[rng.gen_range(0..allowed.len())];
            Object { shape: combo.shape, color: combo.color, cell: [c / grid, c % grid] }
        })
        .collect();
    SceneSpec { objects, grid }
}

const FILLER_SUBJECTS: [&str; 6] = ["the cat", "a dog", "my friend", "the teacher", "a child", "the artist"];
const FILLER_VERBS: [&str; 5] = ["likes", "draws", "paints", "sees", "wants"];

fn plural(s: Shape) -> String {
    format!("{}s", s.word())
}

/// One sentence from the non-visual filler grammar.
pub fn filler_sentence<R: Rng + ?Sized>(rng: &mut R) -> String {
    let color = *Color::ALL.choose(rng).expect("non-empty");
    let shape = *Shape::ALL.choose(rng).expect("non-empty");
    match rng.gen_range(0..5) {
        0 => format!("{} is a color", color.word()),
        1 => format!("a {} is a shape", shape.word()),
        2 => format!(
            "{} {} {} {}",
            FILLER_SUBJECTS.choose(rng).expect("non-empty"),
            FILLER_VERBS.choose(rng).expect("non-empty"),
            color.word(),
            plural(shape)
        ),
        3 => format!(
            "{} {} {}",
            FILLER_SUBJECTS.choose(rng).expect("non-empty"),
            FILLER_VERBS.choose(rng).expect("non-empty"),
            noun_phrase(Combo { color, shape })
        ),
        _ => format!(
            "{} {} the {}",
            FILLER_SUBJECTS.choose(rng).expect("non-empty"),
            FILLER_VERBS.choose(rng).expect("non-empty"),
            shape.word()
        ),
    }
}

pub const PROMPT: &str = "a picture of";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairRecord {
    pub id: String,
    /// Image path relative to the corpus directory.
    pub image: String,
    pub caption: String,
    pub spec: SceneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextRecord {
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_pairs: usize,
    pub n_docs: usize,
    pub n_eval: usize,
    pub grid: usize,
    pub image_size: usize,
    pub noise_rate: f64,
    /// Combos written like "yellow circle".
    pub holdout: Vec<String>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            n_pairs: 20_000,
            n_docs: 4_000,
            n_eval: 500,
            grid: 4,
            image_size: 32,
            noise_rate: 0.1,
            holdout: vec!["yellow circle".into(), "green triangle".into()],
            seed: 0,
        }
    }
}

impl CorpusConfig {
    pub fn holdout_combos(&self) -> Result<Vec<Combo>> {
        let mut v = self.holdout.iter().map(|s| s.parse()).collect::<Result<Vec<Combo>>>()?;
        v.sort();
        v.dedup();
        Ok(v)
    }
}

/// Generated corpora. Scenes are kept as specs; images are rendered on
/// demand since rendering is a pure function of the spec.
#[derive(Clone, Debug, PartialEq)]
pub struct Corpora {
    pub pairs: Vec<PairRecord>,
    pub docs: Vec<TextRecord>,
    pub heldin: Vec<PairRecord>,
    pub compositional: Vec<PairRecord>,
    pub holdout: Vec<Combo>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Build training pairs, text documents and the two evaluation splits.
pub fn build_corpora(cfg: &CorpusConfig) -> Result<Corpora> {
    let holdout = cfg.holdout_combos()?;
    let all = all_combos();
    let train: Vec<Combo> = all.iter().copied().filter(|c| !holdout.contains(c)).collect();
    if train.is_empty() {
        return Err(Error::Data("holdout covers every combo; nothing left to train on".into()));
    }
    if cfg.grid < 2 {
        return Err(Error::Data("grid must be at least 2x2".into()));
    }
    let mut rng = stream_rng(cfg.seed, 1);
    let pairs = (0..cfg.n_pairs)
        .map(|i| {
            let spec = random_scene(&train, cfg.grid, &mut rng);
            let caption = caption_scene(&spec, &mut rng, cfg.noise_rate);
            PairRecord { id: format!("p{i:06}"), image: format!("images/p{i:06}.ppm"), caption, spec, split: None }
        })
        .collect();
    let mut rng = stream_rng(cfg.seed, 2);
    let docs = (0..cfg.n_docs)
        .map(|_| {
            let text = if rng.gen::<bool>() {
                let spec = random_scene(&all, cfg.grid, &mut rng);
                let c = clean_caption(&spec);
                if rng.gen::<bool>() {
                    format!("{PROMPT} {c}")
                } else {
                    c
                }
            } else {
                filler_sentence(&mut rng)
            };
            TextRecord { text }
        })
        .collect();
    let eval = |stream: u64, allowed: &[Combo], split: &str, tag: &str| {
        let mut rng = stream_rng(cfg.seed, stream);
        (0..cfg.n_eval)
            .map(|i| {
                let spec = random_scene(allowed, cfg.grid, &mut rng);
                PairRecord {
                    id: format!("{tag}{i:05}"),
                    image: format!("images/{tag}{i:05}.ppm"),
                    caption: clean_caption(&spec),
                    spec,
                    split: Some(split.to_string()),
                }
            })
            .collect::<Vec<_>>()
    };
    let heldin = eval(3, &train, "heldin", "h");
    let compositional = if holdout.is_empty() { Vec::new() } else { eval(4, &holdout, "compositional", "c") };
    Ok(Corpora { pairs, docs, heldin, compositional, holdout })
}

/// Training scenes that contain a holdout combo. Empty for a clean corpus.
pub fn holdout_leaks<'a>(pairs: &'a [PairRecord], holdout: &[Combo]) -> Vec<&'a PairRecord> {
    pairs.iter().filter(|p| p.spec.combos().any(|c| holdout.contains(&c))).collect()
}

/// Every sentence shape the world can produce, for tokenizer coverage.
pub fn lexicon_lines() -> Vec<String> {
    let mut out = BTreeSet::new();
    for c in all_combos() {
        out.insert(noun_phrase(c));
        out.insert(format!("{PROMPT} {} above {} left of {}", noun_phrase(c), noun_phrase(c), noun_phrase(c)));
        out.insert(format!("{} is a color", c.color.word()));
        out.insert(format!("a {} is a shape", c.shape.word()));
        for s in FILLER_SUBJECTS {
            for v in FILLER_VERBS {
                out.insert(format!("{s} {v} {} {} the {}", c.color.word(), plural(c.shape), c.shape.word()));
            }
        }
    }
    for q in question_templates() {
        out.insert(q);
    }
    out.into_iter().collect()
}

// ---------------------------------------------------------------------------
// Question tasks

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaRecord {
    pub id: String,
    pub image: String,
    pub question: String,
    pub answer: String,
    pub spec: SceneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedRecord {
    pub id: String,
    pub image: String,
    pub image2: String,
    pub question: String,
    pub label: String,
    pub spec: SceneSpec,
    pub spec2: SceneSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
}

fn question_templates() -> Vec<String> {
    let mut v = vec!["how many objects are there?".to_string(), PAIRED_QUESTION.to_string()];
    for s in Shape::ALL {
        v.push(format!("what color is the {}?", s.word()));
    }
    for c in Color::ALL {
        v.push(format!("what shape is the {} object?", c.word()));
        v.push(format!("is there a {} object?", c.word()));
        for s in Shape::ALL {
            v.push(format!("is there a {} {}?", c.word(), s.word()));
        }
    }
    v.extend(["yes", "no", "one", "two"].map(String::from));
    v
}

/// Every answer a VQA question can have, in a fixed order.
pub fn vqa_answers() -> Vec<String> {
    let mut v: Vec<String> = ["yes", "no", "one", "two"].map(String::from).to_vec();
    v.extend(Color::ALL.map(|c| c.word().to_string()));
    v.extend(Shape::ALL.map(|s| s.word().to_string()));
    v
}

/// A question with a well-defined answer about `spec`.
pub fn ask<R: Rng + ?Sized>(spec: &SceneSpec, rng: &mut R) -> (String, String) {
    loop {
        match rng.gen_range(0..5) {
            0 => {
                let n = if spec.objects.len() == 1 { "one" } else { "two" };
                return ("how many objects are there?".into(), n.into());
            }
            1 => {
                let o = spec.objects[rng.gen_range(0..spec.objects.len())];
                if spec.objects.iter().filter(|p| p.shape == o.shape).count() == 1 {
                    return (format!("what color is the {}?", o.shape.word()), o.color.word().into());
                }
            }
            2 => {
                let o = spec.objects[rng.gen_range(0..spec.objects.len())];
                if spec.objects.iter().filter(|p| p.color == o.color).count() == 1 {
                    return (format!("what shape is the {} object?", o.color.word()), o.shape.word().into());
                }
            }
            3 => {
                let c = *Color::ALL.choose(rng).expect("non-empty");
                let yes = spec.objects.iter().any(|o| o.color == c);
                return (format!("is there a {} object?", c.word()), if yes { "yes" } else { "no" }.into());
            }
            _ => {
                // half the time ask about a present combo so yes/no stays balanced
                let combo = if rng.gen::<bool>() {
                    spec.objects[rng.gen_range(0..spec.objects.len())].combo()
                } else {
                    *all_combos().choose(rng).expect("non-empty")
                };
                let yes = spec.combos().any(|c| c == combo);
                return (format!("is there a {combo}?"), if yes { "yes" } else { "no" }.into());
            }
        }
    }
}

/// VQA examples over scenes whose combos come from `allowed`; the answer
/// filter keeps only answers in `answers` when given.
pub fn vqa_examples(
    n: usize,
    allowed: &[Combo],
    grid: usize,
    answers: Option<&[String]>,
    seed: u64,
    split: &str,
) -> Vec<VqaRecord> {
    let mut rng = stream_rng(seed, 10);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let spec = random_scene(allowed, grid, &mut rng);
        let (question, answer) = ask(&spec, &mut rng);
        if answers.is_some_and(|a| !a.contains(&answer)) {
            continue;
        }
        let id = format!("{split}{:05}", out.len());
        out.push(VqaRecord {
            image: format!("images/{id}.ppm"),
            id,
            question,
            answer,
            spec,
            split: Some(split.to_string()),
        });
    }
    out
}

pub const PAIRED_QUESTION: &str = "do both images show the same color?";

/// Paired examples over single-object scenes, balanced between same and
/// different colors.
pub fn paired_examples(n: usize, allowed: &[Combo], grid: usize, seed: u64, split: &str) -> Vec<PairedRecord> {
    let mut rng = stream_rng(seed, 11);
    (0..n)
        .map(|i| {
            let a = random_scene_with(allowed, grid, 1, &mut rng);
            let same = i % 2 == 0;
            let b = loop {
                let b = random_scene_with(allowed, grid, 1, &mut rng);
                if (b.objects[0].color == a.objects[0].color) == same {
                    break b;
                }
            };
            let id = format!("{split}{i:05}");
            PairedRecord {
                image: format!("images/{id}a.ppm"),
                image2: format!("images/{id}b.ppm"),
                id,
                question: PAIRED_QUESTION.into(),
                label: if same { "yes" } else { "no" }.into(),
                spec: a,
                spec2: b,
                split: Some(split.to_string()),
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Batching

/// Index lists of one mixed batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MixedBatch {
    pub step: u64,
    pub pairs: Vec<usize>,
    pub docs: Vec<usize>,
}

/// Deterministic epoch-cycling batch schedule. Each stream is reshuffled
/// every epoch; batch `s` is a pure function of `(seed, s)`.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    pub n_pairs: usize,
    pub n_docs: usize,
    pub pairs_per_batch: usize,
    pub docs_per_batch: usize,
    pub seed: u64,
}

impl BatchPlan {
    pub fn new(
        n_pairs: usize,
        n_docs: usize,
        pairs_per_batch: usize,
        docs_per_batch: usize,
        seed: u64,
    ) -> Result<Self> {
        if pairs_per_batch > 0 && n_pairs == 0 {
            return Err(Error::Data("pair stream is empty but pairs_per_batch > 0".into()));
        }
        if docs_per_batch > 0 && n_docs == 0 {
            return Err(Error::Data("text stream is empty but docs_per_batch > 0".into()));
        }
        if pairs_per_batch + docs_per_batch == 0 {
            return Err(Error::Data("batch holds no samples".into()));
        }
        Ok(BatchPlan { n_pairs, n_docs, pairs_per_batch, docs_per_batch, seed })
    }

    fn take(&self, stream: u64, n: usize, per_batch: usize, step: u64) -> Vec<usize> {
        let mut out = Vec::with_capacity(per_batch);
        let start = step as usize * per_batch;
        let mut epoch = usize::MAX;
        let mut perm: Vec<usize> = Vec::new();
        for k in start..start + per_batch {
            let (e, i) = (k / n, k % n);
            if e != epoch {
                epoch = e;
                perm = (0..n).collect();
                let mut rng = stream_rng(self.seed ^ (e as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), stream);
                perm.shuffle(&mut rng);
            }
            out.push(perm[i]);
        }
        out
    }

    pub fn batch(&self, step: u64) -> MixedBatch {
        let pairs =
            if self.pairs_per_batch > 0 { self.take(20, self.n_pairs, self.pairs_per_batch, step) } else { Vec::new() };
        let docs =
            if self.docs_per_batch > 0 { self.take(21, self.n_docs, self.docs_per_batch, step) } else { Vec::new() };
        MixedBatch { step, pairs, docs }
    }
}

/// RNG for sample `index` of batch `step`, independent of evaluation order.
pub fn sample_rng(seed: u64, step: u64, index: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x2545_f491_4f6c_dd1d));
    r.set_stream(1000 + index as u64);
    r
}

/// Right-padded token matrix with per-row lengths and loss masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Collated {
    pub ids: Vec<Vec<u32>>,
    pub lengths: Vec<usize>,
    pub loss_mask: Vec<Vec<bool>>,
}

impl Collated {
    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[i][..self.lengths[i]]
    }
}

/// Pad every sequence to the longest one (each first truncated to
/// `max_len`, keeping a final EOS).
pub fn collate(seqs: &[Vec<u32>], max_len: usize) -> Collated {
    let trimmed: Vec<Vec<u32>> = seqs
        .iter()
        .map(|s| {
            if s.len() <= max_len {
                s.clone()
            } else {
                let mut t = s[..max_len].to_vec();
                if let (Some(&last), Some(end)) = (s.last(), t.last_mut()) {
                    if last == crate::tokenizer::EOS {
                        *end = last;
                    }
                }
                t
            }
        })
        .collect();
    let width = trimmed.iter().map(Vec::len).max().unwrap_or(0);
    let lengths: Vec<usize> = trimmed.iter().map(Vec::len).collect();
    let ids = trimmed
        .into_iter()
        .map(|mut s| {
            s.resize(width, PAD);
            s
        })
        .collect();
    let loss_mask = lengths.iter().map(|&l| (0..width).map(|j| j < l).collect()).collect();
    Collated { ids, lengths, loss_mask }
}

// ---------------------------------------------------------------------------
// JSONL

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?);
    }
    Ok(out)
}

/// CRC-32 of a file's bytes, for corpus manifests.
pub fn file_checksum(path: &Path) -> Result<u32> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(crc32fast::hash(&bytes))
}

/// Write corpora plus rendered images under `dir`.
pub fn write_corpora(dir: &Path, c: &Corpora, image_size: usize) -> Result<()> {
    write_jsonl(&dir.join("pairs.jsonl"), &c.pairs)?;
    write_jsonl(&dir.join("text.jsonl"), &c.docs)?;
    let eval: Vec<&PairRecord> = c.heldin.iter().chain(&c.compositional).collect();
    write_jsonl(&dir.join("eval.jsonl"), &eval)?;
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for p in c.pairs.iter().chain(&c.heldin).chain(&c.compositional) {
        let path = dir.join(&p.image);
        let img = render_scene(&p.spec, image_size)?;
        std::fs::write(&path, img.to_ppm()).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

/// Read corpora written by [`write_corpora`]. Evaluation records are
/// split by their `split` tag.
pub fn read_corpora(dir: &Path, holdout: Vec<Combo>) -> Result<Corpora> {
    let pairs = read_jsonl(&dir.join("pairs.jsonl"))?;
    let docs = read_jsonl(&dir.join("text.jsonl"))?;
    let eval: Vec<PairRecord> = read_jsonl(&dir.join("eval.jsonl"))?;
    let (heldin, compositional) = eval.into_iter().partition(|p| p.split.as_deref() == Some("heldin"));
    Ok(Corpora { pairs, docs, heldin, compositional, holdout })
}
