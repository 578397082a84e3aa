//! Synthetic grid-image question answering with gold reasoning trajectories.
//!
//! Each task is a pure function of `(seed, family, grid_size)`. Patches are
//! grid cells, so patch `r * size + c` is cell `(r, c)` everywhere: in the
//! rendered pixels, in the vision encoder and in the oracle masks.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::format::{Step, Trajectory};

pub const DEFAULT_GRID: usize = 8;
pub const DEFAULT_PATCH: usize = 4;
pub const ORACLE_FLOOR: f64 = 1e-6;
const BACKGROUND: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Circle,
    Square,
    Star,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 4] = [Shape::Circle, Shape::Square, Shape::Star, Shape::Triangle];

    pub fn word(self) -> &'static str {
        match self {
            Shape::Circle => "circle",
            Shape::Square => "square",
            Shape::Star => "star",
            Shape::Triangle => "triangle",
        }
    }

    /// Whether pixel `(y, x)` of a `p x p` patch is inked.
    fn covers(self, y: usize, x: usize, p: usize) -> bool {
        let u = (x as f64 + 0.5) / p as f64 - 0.5;
        let v = (y as f64 + 0.5) / p as f64 - 0.5;
        match self {
            Shape::Square => u.abs() < 0.4 && v.abs() < 0.4,
            Shape::Circle => u * u + v * v < 0.16,
            Shape::Triangle => v >= u,
            Shape::Star => u.abs() < 0.2 || v.abs() < 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
    White,
    Black,
}

impl Color {
    pub const ALL: [Color; 6] = [Color::Red, Color::Green, Color::Blue, Color::Yellow, Color::White, Color::Black];

    pub fn word(self) -> &'static str {
        match self {
            Color::Red => "red",
            Color::Green => "green",
            Color::Blue => "blue",
            Color::Yellow => "yellow",
            Color::White => "white",
            Color::Black => "black",
        }
    }

    pub fn rgb(self) -> [u8; 3] {
        match self {
            Color::Red => [220, 40, 40],
            Color::Green => [40, 180, 60],
            Color::Blue => [40, 80, 220],
            Color::Yellow => [230, 210, 40],
            Color::White => [245, 245, 245],
            Color::Black => [15, 15, 15],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Object {
    pub shape: Shape,
    pub color: Color,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Attribute,
    Relational,
    Global,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Attribute, Family::Relational, Family::Global];

    pub fn name(self) -> &'static str {
        match self {
            Family::Attribute => "attribute",
            Family::Relational => "relational",
            Family::Global => "global",
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("unknown task family `{0}`")]
    UnknownFamily(String),
    #[error("step {step} out of range for a {steps}-step task")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("grid size {0} unsupported (need 3..=16)")]
    GridSize(usize),
    #[error("task `{0}` not found")]
    TaskNotFound(String),
}

impl FromStr for Family {
    type Err = TaskError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| TaskError::UnknownFamily(s.to_string()))
    }
}

/// A `size x size` grid of cells rendered to `(size*patch)^2` RGB pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct GridImage {
    pub size: usize,
    pub patch: usize,
    pub cells: Vec<Option<Object>>,
    pub pixels: Vec<u8>,
}

impl GridImage {
    pub fn new(size: usize, patch: usize, cells: Vec<Option<Object>>) -> Self {
        assert_eq!(cells.len(), size * size, "cell count");
        let side = size * patch;
        let mut pixels = vec![0u8; side * side * 3];
        for r in 0..size {
            for c in 0..size {
                let obj = cells[r * size + c];
                for y in 0..patch {
                    for x in 0..patch {
                        let rgb = match obj {
                            Some(o) if o.shape.covers(y, x, patch) => o.color.rgb(),
                            _ => BACKGROUND,
                        };
                        let at = ((r * patch + y) * side + c * patch + x) * 3;
                        pixels[at..at + 3].copy_from_slice(&rgb);
                    }
                }
            }
        }
        Self { size, patch, cells, pixels }
    }

    pub fn patches(&self) -> usize {
        self.size * self.size
    }

    pub fn side(&self) -> usize {
        self.size * self.patch
    }

    pub fn cell(&self, r: usize, c: usize) -> Option<Object> {
        self.cells[r * self.size + c]
    }

    /// Pixels of one patch flattened row-major as `patch*patch*3` bytes.
    pub fn patch_pixels(&self, index: usize) -> Vec<u8> {
        let (r, c) = (index / self.size, index % self.size);
        let side = self.side();
        let mut out = Vec::with_capacity(self.patch * self.patch * 3);
        for y in 0..self.patch {
            let at = ((r * self.patch + y) * side + c * self.patch) * 3;
            out.extend_from_slice(&self.pixels[at..at + self.patch * 3]);
        }
        out
    }

    /// Binary P6 PPM.
    pub fn to_ppm(&self) -> Vec<u8> {
        let side = self.side();
        let mut out = format!("P6\n{side} {side}\n255\n").into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskInstance {
    pub id: String,
    pub seed: u64,
    pub family: Family,
    pub image: GridImage,
    pub question: String,
    pub answer: String,
    pub gold_trajectory: Trajectory,
    pub oracle_masks: Vec<Vec<f64>>,
}

impl TaskInstance {
    pub fn question_words(&self) -> Vec<String> {
        self.question.split_whitespace().map(str::to_string).collect()
    }

    pub fn steps(&self) -> usize {
        self.gold_trajectory.steps.len()
    }
}

pub fn task_id(seed: u64, family: Family, grid: usize) -> String {
    format!("{}-g{grid}-s{seed}", family.name())
}

/// Inverse of [`task_id`].
pub fn parse_task_id(id: &str) -> Result<(Family, usize, u64), TaskError> {
    let bad = || TaskError::TaskNotFound(id.to_string());
    let mut parts = id.split('-');
    let family: Family = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let grid = parts.next().and_then(|g| g.strip_prefix('g')).and_then(|g| g.parse().ok()).ok_or_else(bad)?;
    let seed = parts.next().and_then(|s| s.strip_prefix('s')).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    Ok((family, grid, seed))
}

/// Uniform over `relevant` patches, floored at [`ORACLE_FLOOR`] and
/// renormalized.
pub fn oracle_mask(relevant: &[usize], patches: usize) -> Vec<f64> {
    assert!(!relevant.is_empty());
    let mut m = vec![ORACLE_FLOOR; patches];
    let share = 1.0 / relevant.len() as f64;
    for &p in relevant {
        m[p] += share;
    }
    let total: f64 = m.iter().sum();
    m.iter_mut().for_each(|x| *x /= total);
    m
}

pub fn oracle_attention(task: &TaskInstance, step: usize) -> Result<&[f64], TaskError> {
    task.oracle_masks
        .get(step)
        .map(|m| m.as_slice())
        .ok_or(TaskError::StepOutOfRange { step, steps: task.oracle_masks.len() })
}

/// 1 iff the answers agree after trimming, lowercasing and dropping a
/// trailing period.
pub fn exact_match(predicted: &str, gold: &str) -> u8 {
    fn norm(s: &str) -> String {
        let s = s.trim().to_lowercase();
        s.strip_suffix('.').map(|x| x.trim_end().to_string()).unwrap_or(s)
    }
    u8::from(norm(predicted) == norm(gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Direction {
    Left,
    Right,
    Above,
    Below,
}

impl Direction {
    const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Above, Direction::Below];

    fn word(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Above => "above",
            Direction::Below => "below",
        }
    }

    fn from_word(w: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.word() == w)
    }

    fn step(self, r: usize, c: usize, size: usize) -> Option<(usize, usize)> {
        match self {
            Direction::Left => c.checked_sub(1).map(|c| (r, c)),
            Direction::Right => (c + 1 < size).then_some((r, c + 1)),
            Direction::Above => r.checked_sub(1).map(|r| (r, c)),
            Direction::Below => (r + 1 < size).then_some((r + 1, c)),
        }
    }
}

fn family_salt(f: Family) -> u64 {
    match f {
        Family::Attribute => 0x9E37_79B9_7F4A_7C15,
        Family::Relational => 0xC2B2_AE3D_27D4_EB4F,
        Family::Global => 0x1656_67B1_9E37_79F9,
    }
}

fn task_rng(seed: u64, family: Family, grid: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&family_salt(family).to_le_bytes());
    key[16..24].copy_from_slice(&(grid as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn random_object(rng: &mut ChaCha8Rng, shapes: &[Shape], colors: &[Color]) -> Object {
    Object { shape: *shapes.choose(rng).unwrap(), color: *colors.choose(rng).unwrap() }
}

/// Fills `count` distinct cells (excluding `reserved`) with objects.
fn scatter(
    rng: &mut ChaCha8Rng,
    cells: &mut [Option<Object>],
    count: usize,
    reserved: &[usize],
    shapes: &[Shape],
    colors: &[Color],
) {
    let mut free: Vec<usize> = (0..cells.len()).filter(|i| cells[*i].is_none() && !reserved.contains(i)).collect();
    free.shuffle(rng);
    for &i in free.iter().take(count) {
        cells[i] = Some(random_object(rng, shapes, colors));
    }
}

pub fn generate_task(seed: u64, family: Family, grid: usize) -> Result<TaskInstance, TaskError> {
    generate_task_with_patch(seed, family, grid, DEFAULT_PATCH)
}

pub fn generate_task_with_patch(seed: u64, family: Family, grid: usize, patch: usize) -> Result<TaskInstance, TaskError> {
    if !(3..=16).contains(&grid) {
        return Err(TaskError::GridSize(grid));
    }
    let mut rng = task_rng(seed, family, grid);
    let m = grid * grid;
    let mut cells: Vec<Option<Object>> = vec![None; m];
    let density = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| ((m as f64) * rng.gen_range(lo..hi)).round() as usize;

    let (question, answer, steps, masks) = match family {
        Family::Attribute => {
            let target = rng.gen_range(0..m);
            let (r, c) = (target / grid, target % grid);
            let obj = random_object(&mut rng, &Shape::ALL, &Color::ALL);
            cells[target] = Some(obj);
            let ask_color = rng.gen_bool(0.5);
            let count = density(&mut rng, 0.08, 0.2);
            if ask_color {
                // the target shape is unique in the grid
                let others: Vec<Shape> = Shape::ALL.into_iter().filter(|s| *s != obj.shape).collect();
                scatter(&mut rng, &mut cells, count, &[target], &others, &Color::ALL);
                let s = obj.shape.word();
                let c_word = obj.color.word();
                (
                    format!("what color is the {s} ?"),
                    c_word.to_string(),
                    vec![Step::new(&words(&format!("locate the {s}")), &words(&format!("the {s} is {c_word}")))],
                    vec![oracle_mask(&[r * grid + c], m)],
                )
            } else {
                let others: Vec<Color> = Color::ALL.into_iter().filter(|x| *x != obj.color).collect();
                scatter(&mut rng, &mut cells, count, &[target], &Shape::ALL, &others);
                let col = obj.color.word();
                let s = obj.shape.word();
                (
                    format!("what shape is the {col} object ?"),
                    s.to_string(),
                    vec![Step::new(
                        &words(&format!("locate the {col} object")),
                        &words(&format!("the {col} object is a {s}")),
                    )],
                    vec![oracle_mask(&[target], m)],
                )
            }
        }
        Family::Relational => {
            let dir = *Direction::ALL.choose(&mut rng).unwrap();
            let (anchor, neighbor) = loop {
                let a = rng.gen_range(0..m);
                if let Some((nr, nc)) = dir.step(a / grid, a % grid, grid) {
                    break (a, nr * grid + nc);
                }
            };
            let anchor_shape = *Shape::ALL.choose(&mut rng).unwrap();
            let others: Vec<Shape> = Shape::ALL.into_iter().filter(|s| *s != anchor_shape).collect();
            cells[anchor] = Some(Object { shape: anchor_shape, color: *Color::ALL.choose(&mut rng).unwrap() });
            let nobj = random_object(&mut rng, &others, &Color::ALL);
            cells[neighbor] = Some(nobj);
            let count = density(&mut rng, 0.06, 0.18);
            scatter(&mut rng, &mut cells, count, &[anchor, neighbor], &others, &Color::ALL);
            let (ar, ac) = (anchor / grid, anchor % grid);
            let s = anchor_shape.word();
            let d = dir.word();
            let ask_color = rng.gen_bool(0.5);
            let q = if ask_color {
                format!("what color is the object {d} of the {s} ?")
            } else {
                format!("what shape is the object {d} of the {s} ?")
            };
            let a = if ask_color { nobj.color.word() } else { nobj.shape.word() };
            (
                q,
                a.to_string(),
                vec![
                    Step::new(&words(&format!("locate the {s}")), &words(&format!("the {s} is at row {ar} column {ac}"))),
                    Step::new(
                        &words(&format!("look {d} of row {ar} column {ac}")),
                        &words(&format!("it is a {} {}", nobj.color.word(), nobj.shape.word())),
                    ),
                ],
                vec![oracle_mask(&[anchor], m), oracle_mask(&[neighbor], m)],
            )
        }
        Family::Global => {
            let count = density(&mut rng, 0.15, 0.3).max(5);
            let mut palette = Color::ALL.to_vec();
            palette.shuffle(&mut rng);
            let dominant = palette[0];
            let lead = (count / 3 + 2).min(count);
            let mut colors = vec![dominant; lead];
            // remaining objects spread over the other colors with a margin of 2
            let mut tallies = [0usize; 6];
            while colors.len() < count {
                let c = palette[rng.gen_range(1..palette.len())];
                let ci = Color::ALL.iter().position(|x| *x == c).unwrap();
                if tallies[ci] + 2 <= lead {
                    tallies[ci] += 1;
                    colors.push(c);
                } else if tallies.iter().enumerate().all(|(i, &t)| Color::ALL[i] == dominant || t + 2 > lead) {
                    break;
                }
            }
            let mut slots: Vec<usize> = (0..m).collect();
            slots.shuffle(&mut rng);
            let mut occupied = Vec::new();
            for (&slot, &color) in slots.iter().zip(&colors) {
                cells[slot] = Some(Object { shape: *Shape::ALL.choose(&mut rng).unwrap(), color });
                occupied.push(slot);
            }
            occupied.sort_unstable();
            let dw = dominant.word();
            (
                "what is the dominant color ?".to_string(),
                dw.to_string(),
                vec![Step::new(&words("survey all objects"), &words(&format!("most objects are {dw}")))],
                vec![oracle_mask(&occupied, m)],
            )
        }
    };
    let image = GridImage::new(grid, patch, cells);
    Ok(TaskInstance {
        id: task_id(seed, family, grid),
        seed,
        family,
        image,
        question,
        gold_trajectory: Trajectory { steps, answer: vec![answer.clone()] },
        answer,
        oracle_masks: masks,
    })
}

/// Answers a generated question by reading the grid cells directly.
pub fn oracle_solve(image: &GridImage, question: &str) -> Option<String> {
    let w: Vec<&str> = question.split_whitespace().collect();
    let find = |pred: &dyn Fn(&Object) -> bool| -> Option<usize> {
        let hits: Vec<usize> = (0..image.patches()).filter(|&i| image.cells[i].as_ref().is_some_and(pred)).collect();
        (hits.len() == 1).then(|| hits[0])
    };
    let shape_of = |s: &str| Shape::ALL.into_iter().find(|x| x.word() == s);
    let color_of = |s: &str| Color::ALL.into_iter().find(|x| x.word() == s);
    match w.as_slice() {
        ["what", "is", "the", "dominant", "color", "?"] => {
            let mut tally = [0usize; 6];
            for o in image.cells.iter().flatten() {
                tally[Color::ALL.iter().position(|c| *c == o.color).unwrap()] += 1;
            }
            let best = *tally.iter().max()?;
            let winners: Vec<usize> = (0..6).filter(|&i| tally[i] == best).collect();
            (winners.len() == 1 && best > 0).then(|| Color::ALL[winners[0]].word().to_string())
        }
        ["what", "color", "is", "the", s, "?"] => {
            let shape = shape_of(s)?;
            let i = find(&|o| o.shape == shape)?;
            Some(image.cells[i]?.color.word().to_string())
        }
        ["what", "shape", "is", "the", c, "object", "?"] => {
            let color = color_of(c)?;
            let i = find(&|o| o.color == color)?;
            Some(image.cells[i]?.shape.word().to_string())
        }
        ["what", attr, "is", "the", "object", d, "of", "the", s, "?"] => {
            let shape = shape_of(s)?;
            let dir = Direction::from_word(d)?;
            let a = find(&|o| o.shape == shape)?;
            let (r, c) = dir.step(a / image.size, a % image.size, image.size)?;
            let o = image.cell(r, c)?;
            match *attr {
                "color" => Some(o.color.word().to_string()),
                "shape" => Some(o.shape.word().to_string()),
                _ => None,
            }
        }
        _ => None,
    }
}

/// Seeds `start..start+count`, cycling through `families`.
pub fn generate_dataset(start: u64, count: usize, families: &[Family], grid: usize) -> Result<Vec<TaskInstance>, TaskError> {
    (0..count)
        .map(|i| generate_task(start + i as u64, families[i % families.len()], grid))
        .collect()
}
