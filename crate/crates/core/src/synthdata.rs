//! Deterministic synthetic referring-expression scenes: colored shapes with
//! distractors, a closed template grammar, a word-level tokenizer, splits,
//! and the on-disk dataset layout.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::language::{CLS_ID, PAD_ID};
use crate::raster;
use crate::vision::ImageTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeClass {
    Small,
    Large,
}

pub const SHAPES: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
pub const COLORS: [Color; 4] = [Color::Red, Color::Green, Color::Blue, Color::Yellow];
pub const SIZES: [SizeClass; 2] = [SizeClass::Small, SizeClass::Large];

impl ShapeKind {
    pub fn word(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }
}

impl Color {
    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [50, 90, 230],
            Color::Yellow => [230, 210, 40],
        }
    }
}

impl SizeClass {
    pub fn word(self) -> &'static str {
        match self {
            SizeClass::Small => "small",
            SizeClass::Large => "large",
        }
    }
}

/// Spatial relation between object centers, with a dead zone against near-ties.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

pub const RELATIONS: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

impl Relation {
    pub fn words(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Whether `a` stands in this relation to `b` (image y grows downwards).
    pub fn holds(self, a: &SceneObject, b: &SceneObject, dead_zone: f64) -> bool {
        match self {
            Relation::LeftOf => a.center.0 < b.center.0 - dead_zone,
            Relation::RightOf => a.center.0 > b.center.0 + dead_zone,
            Relation::Above => a.center.1 < b.center.1 - dead_zone,
            Relation::Below => a.center.1 > b.center.1 + dead_zone,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    pub shape: ShapeKind,
    pub color: Color,
    pub size: SizeClass,
    /// `(x, y)` in pixels.
    pub center: (f64, f64),
    pub radius: f64,
}

impl SceneObject {
    /// Whether the pixel with center `(px, py)` lies inside the object.
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (cx, cy) = self.center;
        let r = self.radius;
        match self.shape {
            ShapeKind::Circle => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            ShapeKind::Square => (px - cx).abs() <= r && (py - cy).abs() <= r,
            // Apex at the top, base of width 2r at the bottom.
            ShapeKind::Triangle => py >= cy - r && py <= cy + r && (px - cx).abs() <= (py - (cy - r)) / 2.0,
        }
    }

    pub fn rasterize(&self, size: usize) -> Vec<bool> {
        let mut m = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                m[y * size + x] = self.contains(x as f64 + 0.5, y as f64 + 0.5);
            }
        }
        m
    }

    fn bbox(&self) -> (f64, f64, f64, f64) {
        let (cx, cy) = self.center;
        (cx - self.radius, cy - self.radius, cx + self.radius, cy + self.radius)
    }

    fn separated(&self, other: &SceneObject, margin: f64) -> bool {
        let a = self.bbox();
        let b = other.bbox();
        a.2 + margin <= b.0 || b.2 + margin <= a.0 || a.3 + margin <= b.1 || b.3 + margin <= a.1
    }
}

/// A parsed referring expression of the closed grammar.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Expression {
    /// `<size>? <color> <shape>`
    Attribute { size: Option<SizeClass>, color: Color, shape: ShapeKind },
    /// `<color> <shape> <relation> <color> <shape>`
    Relational { color: Color, shape: ShapeKind, relation: Relation, ref_color: Color, ref_shape: ShapeKind },
}

impl fmt::Display for Expression {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expression::Attribute { size: Some(s), color, shape } => write!(f, "{} {} {}", s.word(), color.word(), shape.word()),
            Expression::Attribute { size: None, color, shape } => write!(f, "{} {}", color.word(), shape.word()),
            Expression::Relational { color, shape, relation, ref_color, ref_shape } => write!(
                f,
                "{} {} {} {} {}",
                color.word(),
                shape.word(),
                relation.words(),
                ref_color.word(),
                ref_shape.word()
            ),
        }
    }
}

impl Expression {
    /// Indices of the objects this expression describes.
    pub fn matches(&self, objects: &[SceneObject], dead_zone: f64) -> Vec<usize> {
        (0..objects.len())
            .filter(|&i| {
                let o = &objects[i];
                match self {
                    Expression::Attribute { size, color, shape } => {
                        o.color == *color && o.shape == *shape && size.is_none_or(|s| o.size == s)
                    }
                    Expression::Relational { color, shape, relation, ref_color, ref_shape } => {
                        o.color == *color
                            && o.shape == *shape
                            && objects.iter().enumerate().any(|(j, p)| {
                                j != i && p.color == *ref_color && p.shape == *ref_shape && relation.holds(o, p, dead_zone)
                            })
                    }
                }
            })
            .collect()
    }
}

/// One synthetic sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub id: usize,
    pub size: usize,
    /// Interleaved 8-bit RGB, row-major.
    pub rgb: Vec<u8>,
    pub objects: Vec<SceneObject>,
    pub target_index: usize,
    pub expression: String,
    pub gt_mask: Vec<bool>,
}

impl Scene {
    /// The image as `(3, S, S)` with values in `[0, 1]`.
    pub fn image(&self) -> ImageTensor {
        let n = self.size * self.size;
        let mut data = vec![0.0; 3 * n];
        for p in 0..n {
            for c in 0..3 {
                data[c * n + p] = f64::from(self.rgb[3 * p + c]) / 255.0;
            }
        }
        ImageTensor { size: self.size, data }
    }
}

/// Knobs of the scene generator.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Radius as a fraction of the image side.
    pub small_radius: f64,
    pub large_radius: f64,
    /// Minimum gap between object bounding boxes, in pixels.
    pub margin: f64,
    /// Center offset below which no spatial relation holds, in pixels.
    pub dead_zone: f64,
    /// Probability of describing the target relationally when possible.
    pub relational_prob: f64,
    pub max_attempts: usize,
}

impl GeneratorConfig {
    pub fn new(image_size: usize) -> Self {
        Self {
            image_size,
            min_objects: 2,
            max_objects: 3,
            small_radius: 0.125,
            large_radius: 0.1875,
            margin: 2.0,
            dead_zone: 4.0,
            relational_prob: 0.15,
            max_attempts: 2000,
        }
    }

    pub fn radius(&self, size: SizeClass) -> f64 {
        let f = match size {
            SizeClass::Small => self.small_radius,
            SizeClass::Large => self.large_radius,
        };
        (f * self.image_size as f64).round().max(1.0)
    }
}

const BACKGROUND: [u8; 3] = [24, 24, 28];

/// Generates `count` scenes, deterministic in `(count, seed, image_size)`.
pub fn generate_dataset(count: usize, seed: u64, image_size: usize) -> Result<Vec<Scene>> {
    generate_with(&GeneratorConfig::new(image_size), count, seed)
}

pub fn generate_with(gen: &GeneratorConfig, count: usize, seed: u64) -> Result<Vec<Scene>> {
    if count == 0 {
        return Err(Error::Usage("dataset count must be >= 1".into()));
    }
    if gen.min_objects < 2 || gen.max_objects < gen.min_objects {
        return Err(Error::Usage("scenes need at least two objects".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|id| generate_scene(gen, id, &mut rng)).collect()
}

fn random_attrs(rng: &mut impl Rng) -> (ShapeKind, Color, SizeClass) {
    (SHAPES[rng.random_range(0..3)], COLORS[rng.random_range(0..4)], SIZES[rng.random_range(0..2)])
}

fn generate_scene(gen: &GeneratorConfig, id: usize, rng: &mut ChaCha8Rng) -> Result<Scene> {
    let s = gen.image_size as f64;
    let mut rejected_layout = 0;
    let mut rejected_expr = 0;
    for _ in 0..gen.max_attempts {
        let n = rng.random_range(gen.min_objects..=gen.max_objects);
        let mut attrs = Vec::with_capacity(n);
        let target = random_attrs(rng);
        attrs.push(target);
        // The first distractor shares the target's shape or its color.
        let (mut shape, mut color, size) = random_attrs(rng);
        if rng.random_bool(0.5) {
            shape = target.0;
        } else {
            color = target.1;
        }
        attrs.push((shape, color, size));
        for _ in 2..n {
            attrs.push(random_attrs(rng));
        }

        let mut objects: Vec<SceneObject> = Vec::with_capacity(n);
        let mut placed = true;
        for &(shape, color, size) in &attrs {
            let r = gen.radius(size);
            let lo = r + 1.0;
            let hi = s - r - 1.0;
            if hi <= lo {
                return Err(Error::Generation(format!("objects of radius {r} do not fit a {s}px image")));
            }
            let mut ok = false;
            for _ in 0..100 {
                let cx = rng.random_range(lo..hi).round();
                let cy = rng.random_range(lo..hi).round();
                let cand = SceneObject { shape, color, size, center: (cx, cy), radius: r };
                if objects.iter().all(|o| o.separated(&cand, gen.margin)) {
                    objects.push(cand);
                    ok = true;
                    break;
                }
            }
            if !ok {
                placed = false;
                break;
            }
        }
        if !placed {
            rejected_layout += 1;
            continue;
        }
        // Shuffle so the target is not always drawn first.
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let objects: Vec<SceneObject> = order.iter().map(|&i| objects[i].clone()).collect();
        let target_index = order.iter().position(|&i| i == 0).expect("target present");

        let Some(expr) = describe(gen, &objects, target_index, rng) else {
            rejected_expr += 1;
            continue;
        };
        let gt_mask = objects[target_index].rasterize(gen.image_size);
        if !gt_mask.iter().any(|&p| p) {
            rejected_layout += 1;
            continue;
        }
        let rgb = paint(gen.image_size, &objects);
        return Ok(Scene { id, size: gen.image_size, rgb, objects, target_index, expression: expr.to_string(), gt_mask });
    }
    Err(Error::Generation(format!(
        "scene {id}: no valid scene after {} attempts ({rejected_layout} layout rejections, {rejected_expr} ambiguous)",
        gen.max_attempts
    )))
}

/// Picks an expression that matches exactly the target, or `None`.
fn describe(gen: &GeneratorConfig, objects: &[SceneObject], target: usize, rng: &mut impl Rng) -> Option<Expression> {
    let t = &objects[target];
    let unique = |e: &Expression| e.matches(objects, gen.dead_zone) == vec![target];
    let relational = |rng: &mut dyn rand::RngCore| -> Option<Expression> {
        let mut cands = Vec::new();
        for (j, p) in objects.iter().enumerate() {
            if j == target {
                continue;
            }
            for rel in RELATIONS {
                if rel.holds(t, p, gen.dead_zone) {
                    let e = Expression::Relational {
                        color: t.color,
                        shape: t.shape,
                        relation: rel,
                        ref_color: p.color,
                        ref_shape: p.shape,
                    };
                    if unique(&e) {
                        cands.push(e);
                    }
                }
            }
        }
        if cands.is_empty() {
            None
        } else {
            let k = rng.random_range(0..cands.len());
            Some(cands.swap_remove(k))
        }
    };
    if rng.random_bool(gen.relational_prob) {
        if let Some(e) = relational(rng) {
            return Some(e);
        }
    }
    let plain = Expression::Attribute { size: None, color: t.color, shape: t.shape };
    if unique(&plain) {
        return Some(plain);
    }
    let sized = Expression::Attribute { size: Some(t.size), color: t.color, shape: t.shape };
    if unique(&sized) {
        return Some(sized);
    }
    relational(rng)
}

fn paint(size: usize, objects: &[SceneObject]) -> Vec<u8> {
    let mut rgb = Vec::with_capacity(3 * size * size);
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let c = objects.iter().find(|o| o.contains(px, py)).map_or(BACKGROUND, |o| o.color.rgb());
            rgb.extend_from_slice(&c);
        }
    }
    rgb
}

/// Target-attribute and template histogram, for reproducibility checks.
pub fn class_histogram(scenes: &[Scene]) -> BTreeMap<String, usize> {
    let mut h = BTreeMap::new();
    for s in scenes {
        let t = &s.objects[s.target_index];
        for key in [
            format!("shape.{}", t.shape.word()),
            format!("color.{}", t.color.word()),
            format!("size.{}", t.size.word()),
            format!("objects.{}", s.objects.len()),
            format!("words.{}", s.expression.split_whitespace().count()),
        ] {
            *h.entry(key).or_insert(0) += 1;
        }
    }
    h
}

/// Word-level vocabulary over the closed grammar plus `[PAD]` and `[CLS]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: BTreeMap<String, usize>,
}

pub const PAD_TOKEN: &str = "[PAD]";
pub const CLS_TOKEN: &str = "[CLS]";

impl Vocab {
    /// The fixed vocabulary used by the generator; ids are stable.
    pub fn standard() -> Self {
        let mut words = vec![PAD_TOKEN.to_string(), CLS_TOKEN.to_string()];
        words.extend(SIZES.iter().map(|s| s.word().to_string()));
        words.extend(COLORS.iter().map(|c| c.word().to_string()));
        words.extend(SHAPES.iter().map(|s| s.word().to_string()));
        words.extend(["left", "right", "of", "above", "below"].map(String::from));
        Self::from_words(words).expect("standard vocabulary is well formed")
    }

    /// Builds a vocabulary whose id is the position in `words`. Position 0
    /// must be `[PAD]` and position 1 `[CLS]`.
    pub fn from_words(words: Vec<String>) -> Result<Self> {
        if words.first().map(String::as_str) != Some(PAD_TOKEN) || words.get(1).map(String::as_str) != Some(CLS_TOKEN) {
            return Err(Error::Data("vocabulary must start with [PAD], [CLS]".into()));
        }
        let mut index = BTreeMap::new();
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word `{w}`")));
            }
        }
        debug_assert_eq!(index[PAD_TOKEN], PAD_ID);
        debug_assert_eq!(index[CLS_TOKEN], CLS_ID);
        Ok(Self { words, index })
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// One word per line; line number is the id.
    pub fn write_to(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for w in &self.words {
            writeln!(f, "{w}")?;
        }
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let f = BufReader::new(fs::File::open(path)?);
        let words = f.lines().collect::<std::io::Result<Vec<_>>>()?;
        Self::from_words(words.into_iter().filter(|w| !w.is_empty()).collect())
    }
}

/// Token ids with `[CLS]` first and `[PAD]` fill; `padding[i]` marks `[PAD]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokens {
    pub ids: Vec<usize>,
    pub padding: Vec<bool>,
}

pub fn tokenize(vocab: &Vocab, expression: &str, max_tokens: usize) -> Result<Tokens> {
    let words: Vec<&str> = expression.split_whitespace().collect();
    if words.is_empty() {
        return Err(Error::Data("empty expression".into()));
    }
    if words.len() + 1 > max_tokens {
        return Err(Error::Data(format!(
            "expression has {} words but only {} fit after [CLS]",
            words.len(),
            max_tokens.saturating_sub(1)
        )));
    }
    let mut ids = Vec::with_capacity(max_tokens);
    ids.push(CLS_ID);
    for w in &words {
        ids.push(vocab.id(w).ok_or_else(|| Error::Data(format!("unknown word `{w}`")))?);
    }
    let used = ids.len();
    ids.resize(max_tokens, PAD_ID);
    let padding = (0..max_tokens).map(|i| i >= used).collect();
    Ok(Tokens { ids, padding })
}

/// Inverse of [`tokenize`]: drops `[CLS]` and `[PAD]`, joins with spaces.
pub fn detokenize(vocab: &Vocab, ids: &[usize]) -> String {
    ids.iter()
        .filter(|&&i| i != CLS_ID && i != PAD_ID)
        .filter_map(|&i| vocab.word(i))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Replaces one randomly chosen word with a different word of the same kind
/// (color for color, shape for shape, ...). Only used for robustness probes.
pub fn inject_typo(expression: &str, rng: &mut impl Rng) -> String {
    let mut words: Vec<String> = expression.split_whitespace().map(String::from).collect();
    if words.is_empty() {
        return String::new();
    }
    let groups: [&[&str]; 3] = [
        &["red", "green", "blue", "yellow"],
        &["circle", "square", "triangle"],
        &["small", "large"],
    ];
    let k = rng.random_range(0..words.len());
    if let Some(group) = groups.iter().find(|g| g.contains(&words[k].as_str())) {
        let others: Vec<&str> = group.iter().copied().filter(|w| *w != words[k]).collect();
        words[k] = others[rng.random_range(0..others.len())].to_string();
    }
    words.join(" ")
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

/// Deterministic shuffle-split; the validation side gets `round(n * val_fraction)` scenes.
pub fn split_dataset(scenes: Vec<Scene>, val_fraction: f64, seed: u64) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Usage(format!("val_fraction must lie in (0, 1), got {val_fraction}")));
    }
    let n = scenes.len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Usage(format!("val_fraction {val_fraction} leaves an empty split of {n} scenes")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut slots: Vec<Option<Scene>> = scenes.into_iter().map(Some).collect();
    let mut take = |i: usize| slots[i].take().expect("each index used once");
    let val: Vec<Scene> = order[..n_val].iter().map(|&i| take(i)).collect();
    let train: Vec<Scene> = order[n_val..].iter().map(|&i| take(i)).collect();
    Ok(Split { train, val })
}

#[derive(Serialize, Deserialize)]
struct ExpressionRecord {
    id: usize,
    expression: String,
    objects: Vec<SceneObject>,
    target_index: usize,
}

/// Writes `images/NNNN.png`, `masks/NNNN.png`, `expressions.jsonl` and
/// `vocab.txt` under `dir`.
pub fn save_dataset(dir: &Path, scenes: &[Scene], vocab: &Vocab) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("masks"))?;
    let mut jsonl = fs::File::create(dir.join("expressions.jsonl"))?;
    for s in scenes {
        raster::write_rgb_png(&dir.join("images").join(format!("{:04}.png", s.id)), s.size, &s.rgb)?;
        raster::write_mask_png(&dir.join("masks").join(format!("{:04}.png", s.id)), s.size, &s.gt_mask)?;
        let rec = ExpressionRecord {
            id: s.id,
            expression: s.expression.clone(),
            objects: s.objects.clone(),
            target_index: s.target_index,
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(jsonl, "{line}")?;
    }
    vocab.write_to(&dir.join("vocab.txt"))
}

/// Reads a dataset written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Vec<Scene>, Vocab)> {
    let vocab = Vocab::read_from(&dir.join("vocab.txt"))?;
    let f = BufReader::new(fs::File::open(dir.join("expressions.jsonl"))?);
    let mut scenes = Vec::new();
    for (lineno, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ExpressionRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("expressions.jsonl line {}: {e}", lineno + 1)))?;
        let (size, rgb) = raster::read_rgb_png(&dir.join("images").join(format!("{:04}.png", rec.id)))?;
        let (msize, gt_mask) = raster::read_mask_png(&dir.join("masks").join(format!("{:04}.png", rec.id)))?;
        if msize != size {
            return Err(Error::Data(format!("scene {}: image side {size} but mask side {msize}", rec.id)));
        }
        if rec.target_index >= rec.objects.len() {
            return Err(Error::Data(format!("scene {}: target index out of range", rec.id)));
        }
        scenes.push(Scene {
            id: rec.id,
            size,
            rgb,
            objects: rec.objects,
            target_index: rec.target_index,
            expression: rec.expression,
            gt_mask,
        });
    }
    Ok((scenes, vocab))
}
