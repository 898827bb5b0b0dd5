//! The synthetic text-to-image world: prompt grammar, unified segmented
//! vocabulary, 8x8 grid images, and the detector-style oracle reward.

use crate::numerics::RngStream;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const GRID_SIDE: usize = 8;
pub const GRID_CELLS: usize = GRID_SIDE * GRID_SIDE;
/// Minimum centroid separation along the relation axis for full spatial credit.
pub const SPATIAL_SEPARATION_CELLS: f64 = 2.0;
/// Weight of the spatial sub-score in the spatial branch of the oracle reward.
pub const DEFAULT_ALPHA: f64 = 0.6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DomainError {
    #[error("image length must be 64")]
    ImageLength,
    #[error("segment violation")]
    SegmentViolation,
    #[error("line {line}: unknown word \"{word}\"")]
    UnknownWord { line: usize, word: String },
    #[error("line {line}: does not match the prompt grammar")]
    BadGrammar { line: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Color {
    Red,
    Green,
    Blue,
    Yellow,
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
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    LeftOf,
    Above,
}

impl Direction {
    pub fn word(self) -> &'static str {
        match self {
            Direction::LeftOf => "left-of",
            Direction::Above => "above",
        }
    }
}

/// Ground-truth scene behind a prompt: per-color target counts plus an
/// optional spatial relation between two of the colors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<(Color, usize)>,
    pub relation: Option<(Color, Color, Direction)>,
}

/// Token segment a position belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    Text,
    Image,
}

/// Fixed token-id layout of the unified vocabulary.
///
/// ```text
///  0..=2   counts: one two three
///  3..=6   colors: red green blue yellow
///  7..=8   relations: left-of above
///  9..=12  filler words
///  13      <BOI>
/// 14..=18  image cells: background red green blue yellow
///  19      <PAD>
/// ```
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub text_tokens: Vec<u32>,
    pub boi_token: u32,
    pub image_tokens: Vec<u32>,
    pub pad_token: u32,
}

pub const COUNT_WORDS: [&str; 3] = ["one", "two", "three"];
pub const FILLER_WORDS: [&str; 4] = ["a", "the", "bright", "shape"];

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary {
            text_tokens: (0..13).collect(),
            boi_token: 13,
            image_tokens: (14..19).collect(),
            pad_token: 19,
        }
    }
}

impl Vocabulary {
    pub fn full_size(&self) -> usize {
        20
    }

    /// Active set sampled from in the text phase: all text words plus <BOI>.
    pub fn text_active_set(&self) -> Vec<u32> {
        let mut ids = self.text_tokens.clone();
        ids.push(self.boi_token);
        ids
    }

    pub fn image_active_set(&self) -> Vec<u32> {
        self.image_tokens.clone()
    }

    pub fn active_set(&self, segment: Segment) -> Vec<u32> {
        match segment {
            Segment::Text => self.text_active_set(),
            Segment::Image => self.image_active_set(),
        }
    }

    pub fn color_text_token(&self, c: Color) -> u32 {
        3 + Color::ALL.iter().position(|&x| x == c).unwrap() as u32
    }

    pub fn count_text_token(&self, n: usize) -> u32 {
        debug_assert!((1..=3).contains(&n));
        n as u32 - 1
    }

    pub fn direction_text_token(&self, d: Direction) -> u32 {
        match d {
            Direction::LeftOf => 7,
            Direction::Above => 8,
        }
    }

    /// Image token for a cell color; `None` is the background cell.
    pub fn image_token(&self, c: Option<Color>) -> u32 {
        match c {
            None => 14,
            Some(c) => 15 + Color::ALL.iter().position(|&x| x == c).unwrap() as u32,
        }
    }

    pub fn cell_color(&self, token: u32) -> Option<Color> {
        match token {
            14 => None,
            15..=18 => Some(Color::ALL[(token - 15) as usize]),
            _ => panic!("not an image token: {token}"),
        }
    }

    pub fn is_image_token(&self, token: u32) -> bool {
        self.image_tokens.contains(&token)
    }

    /// Surface word for a text token id.
    pub fn text_word(&self, token: u32) -> &'static str {
        match token {
            0..=2 => COUNT_WORDS[token as usize],
            3..=6 => Color::ALL[(token - 3) as usize].word(),
            7 => Direction::LeftOf.word(),
            8 => Direction::Above.word(),
            9..=12 => FILLER_WORDS[(token - 9) as usize],
            13 => "<BOI>",
            _ => panic!("not a text token: {token}"),
        }
    }

    fn word_token(&self, word: &str) -> Option<u32> {
        COUNT_WORDS
            .iter()
            .position(|&w| w == word)
            .map(|i| i as u32)
            .or_else(|| {
                Color::ALL
                    .iter()
                    .position(|c| c.word() == word)
                    .map(|i| 3 + i as u32)
            })
            .or_else(|| match word {
                "left-of" => Some(7),
                "above" => Some(8),
                _ => None,
            })
            .or_else(|| {
                FILLER_WORDS
                    .iter()
                    .position(|&w| w == word)
                    .map(|i| 9 + i as u32)
            })
    }
}

/// A query: the token sequence conditioning generation plus the scene the
/// tokens denote. The grammar is invertible, so `tokens` and `scene` always
/// agree.
#[derive(Debug, Clone, PartialEq)]
pub struct Prompt {
    pub tokens: Vec<u32>,
    pub scene: SceneSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptCategory {
    Single,
    Counting,
    TwoObject,
    Spatial,
}

impl PromptCategory {
    pub const ALL: [PromptCategory; 4] = [
        PromptCategory::Single,
        PromptCategory::Counting,
        PromptCategory::TwoObject,
        PromptCategory::Spatial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PromptCategory::Single => "single",
            PromptCategory::Counting => "counting",
            PromptCategory::TwoObject => "two_object",
            PromptCategory::Spatial => "spatial",
        }
    }
}

/// Draw a prompt from the grammar for one category.
pub fn sample_prompt(vocab: &Vocabulary, stream: RngStream, category: PromptCategory) -> Prompt {
    let mut rng = stream.rng();
    let color = Color::ALL[rng.gen_range(0..4)];
    let scene = match category {
        PromptCategory::Single => SceneSpec {
            objects: vec![(color, 1)],
            relation: None,
        },
        PromptCategory::Counting => SceneSpec {
            objects: vec![(color, rng.gen_range(2..=3))],
            relation: None,
        },
        PromptCategory::TwoObject | PromptCategory::Spatial => {
            let mut other = Color::ALL[rng.gen_range(0..4)];
            while other == color {
                other = Color::ALL[rng.gen_range(0..4)];
            }
            let relation = (category == PromptCategory::Spatial).then(|| {
                let dir = if rng.gen_range(0..2) == 0 {
                    Direction::LeftOf
                } else {
                    Direction::Above
                };
                (color, other, dir)
            });
            SceneSpec {
                objects: vec![(color, 1), (other, 1)],
                relation,
            }
        }
    };
    Prompt {
        tokens: render_scene(vocab, &scene),
        scene,
    }
}

/// Surface tokens for a scene. Productions:
/// single `one <color>`, counting `<count> <color>`,
/// two-object `one <color> one <color'>`,
/// spatial `one <color> <direction> one <color'>`.
pub fn render_scene(vocab: &Vocabulary, scene: &SceneSpec) -> Vec<u32> {
    let mut tokens = Vec::new();
    match &scene.relation {
        Some((a, b, dir)) => {
            tokens.push(vocab.count_text_token(1));
            tokens.push(vocab.color_text_token(*a));
            tokens.push(vocab.direction_text_token(*dir));
            tokens.push(vocab.count_text_token(1));
            tokens.push(vocab.color_text_token(*b));
        }
        None => {
            for &(c, n) in &scene.objects {
                tokens.push(vocab.count_text_token(n));
                tokens.push(vocab.color_text_token(c));
            }
        }
    }
    tokens
}

/// Surface string for a scene ("two red", "one red left-of one blue", ...).
pub fn render_scene_text(vocab: &Vocabulary, scene: &SceneSpec) -> String {
    render_scene(vocab, scene)
        .iter()
        .map(|&t| vocab.text_word(t))
        .collect::<Vec<_>>()
        .join(" ")
}

/// Parse one grammar line back into a prompt. `line` is used in errors only.
pub fn parse_prompt_line(vocab: &Vocabulary, text: &str, line: usize) -> Result<Prompt, DomainError> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let mut tokens = Vec::new();
    for w in &words {
        tokens.push(vocab.word_token(w).ok_or_else(|| DomainError::UnknownWord {
            line,
            word: w.to_string(),
        })?);
    }
    let scene = parse_scene(vocab, &tokens).ok_or(DomainError::BadGrammar { line })?;
    Ok(Prompt { tokens, scene })
}

fn parse_scene(vocab: &Vocabulary, tokens: &[u32]) -> Option<SceneSpec> {
    let count_at = |i: usize| -> Option<usize> {
        tokens.get(i).and_then(|&t| (t <= 2).then(|| t as usize + 1))
    };
    let color_at = |i: usize| -> Option<Color> {
        tokens
            .get(i)
            .and_then(|&t| (3..=6).contains(&t).then(|| Color::ALL[(t - 3) as usize]))
    };
    let dir_at = |i: usize| -> Option<Direction> {
        match tokens.get(i) {
            Some(7) => Some(Direction::LeftOf),
            Some(8) => Some(Direction::Above),
            _ => None,
        }
    };
    match tokens.len() {
        2 => {
            let (n, c) = (count_at(0)?, color_at(1)?);
            Some(SceneSpec {
                objects: vec![(c, n)],
                relation: None,
            })
        }
        4 => {
            let (n1, c1, n2, c2) = (count_at(0)?, color_at(1)?, count_at(2)?, color_at(3)?);
            if n1 != 1 || n2 != 1 || c1 == c2 {
                return None;
            }
            Some(SceneSpec {
                objects: vec![(c1, 1), (c2, 1)],
                relation: None,
            })
        }
        5 => {
            let (n1, c1, d, n2, c2) = (
                count_at(0)?,
                color_at(1)?,
                dir_at(2)?,
                count_at(3)?,
                color_at(4)?,
            );
            if n1 != 1 || n2 != 1 || c1 == c2 {
                return None;
            }
            let _ = vocab;
            Some(SceneSpec {
                objects: vec![(c1, 1), (c2, 1)],
                relation: Some((c1, c2, d)),
            })
        }
        _ => None,
    }
}

/// Parse a prompt-set file: one grammar line per non-empty line.
pub fn parse_prompt_file(vocab: &Vocabulary, content: &str) -> Result<Vec<Prompt>, DomainError> {
    let mut prompts = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        prompts.push(parse_prompt_line(vocab, line, i + 1)?);
    }
    Ok(prompts)
}

/// An 8x8 image; each cell holds a color or background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridImage {
    pub cells: Vec<Option<Color>>,
}

impl GridImage {
    pub fn cell(&self, row: usize, col: usize) -> Option<Color> {
        self.cells[row * GRID_SIDE + col]
    }

    /// Render as 8 lines of single-character cells (`.` = background).
    pub fn char_map(&self) -> String {
        let mut out = String::new();
        for row in 0..GRID_SIDE {
            for col in 0..GRID_SIDE {
                out.push(match self.cell(row, col) {
                    None => '.',
                    Some(Color::Red) => 'R',
                    Some(Color::Green) => 'G',
                    Some(Color::Blue) => 'B',
                    Some(Color::Yellow) => 'Y',
                });
            }
            out.push('\n');
        }
        out
    }
}

/// Row-major decode of exactly 64 image tokens into a grid.
pub fn decode_image(vocab: &Vocabulary, tokens: &[u32]) -> Result<GridImage, DomainError> {
    if tokens.len() != GRID_CELLS {
        return Err(DomainError::ImageLength);
    }
    let mut cells = Vec::with_capacity(GRID_CELLS);
    for &t in tokens {
        if !vocab.is_image_token(t) {
            return Err(DomainError::SegmentViolation);
        }
        cells.push(vocab.cell_color(t));
    }
    Ok(GridImage { cells })
}

/// A 4-connected monochrome component.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub color: Color,
    pub cells: Vec<(usize, usize)>,
    /// Mean (row, col) of the member cells.
    pub centroid: (f64, f64),
    /// Inclusive (min_row, min_col, max_row, max_col).
    pub bbox: (usize, usize, usize, usize),
}

/// 4-connected components of same-colored non-background cells.
pub fn detect_components(grid: &GridImage) -> Vec<Component> {
    let mut seen = [false; GRID_CELLS];
    let mut out = Vec::new();
    for start in 0..GRID_CELLS {
        if seen[start] {
            continue;
        }
        let color = match grid.cells[start] {
            Some(c) => c,
            None => continue,
        };
        // BFS flood fill
        let mut cells = Vec::new();
        let mut queue = vec![start];
        seen[start] = true;
        while let Some(idx) = queue.pop() {
            let (r, c) = (idx / GRID_SIDE, idx % GRID_SIDE);
            cells.push((r, c));
            let mut visit = |nr: usize, nc: usize| {
                let nidx = nr * GRID_SIDE + nc;
                if !seen[nidx] && grid.cells[nidx] == Some(color) {
                    seen[nidx] = true;
                    queue.push(nidx);
                }
            };
            if r > 0 {
                visit(r - 1, c);
            }
            if r + 1 < GRID_SIDE {
                visit(r + 1, c);
            }
            if c > 0 {
                visit(r, c - 1);
            }
            if c + 1 < GRID_SIDE {
                visit(r, c + 1);
            }
        }
        cells.sort_unstable();
        let n = cells.len() as f64;
        let centroid = (
            cells.iter().map(|&(r, _)| r as f64).sum::<f64>() / n,
            cells.iter().map(|&(_, c)| c as f64).sum::<f64>() / n,
        );
        let bbox = (
            cells.iter().map(|&(r, _)| r).min().unwrap(),
            cells.iter().map(|&(_, c)| c).min().unwrap(),
            cells.iter().map(|&(r, _)| r).max().unwrap(),
            cells.iter().map(|&(_, c)| c).max().unwrap(),
        );
        out.push(Component {
            color,
            cells,
            centroid,
            bbox,
        });
    }
    out
}

fn color_cells(grid: &GridImage, color: Color) -> Vec<(usize, usize)> {
    (0..GRID_CELLS)
        .filter(|&i| grid.cells[i] == Some(color))
        .map(|i| (i / GRID_SIDE, i % GRID_SIDE))
        .collect()
}

fn cells_centroid(cells: &[(usize, usize)]) -> (f64, f64) {
    let n = cells.len() as f64;
    (
        cells.iter().map(|&(r, _)| r as f64).sum::<f64>() / n,
        cells.iter().map(|&(_, c)| c as f64).sum::<f64>() / n,
    )
}

fn cells_bbox(cells: &[(usize, usize)]) -> (usize, usize, usize, usize) {
    (
        cells.iter().map(|&(r, _)| r).min().unwrap(),
        cells.iter().map(|&(_, c)| c).min().unwrap(),
        cells.iter().map(|&(r, _)| r).max().unwrap(),
        cells.iter().map(|&(_, c)| c).max().unwrap(),
    )
}

fn bbox_iou(a: (usize, usize, usize, usize), b: (usize, usize, usize, usize)) -> f64 {
    let area = |(r0, c0, r1, c1): (usize, usize, usize, usize)| ((r1 - r0 + 1) * (c1 - c0 + 1)) as f64;
    let ir0 = a.0.max(b.0);
    let ic0 = a.1.max(b.1);
    let ir1 = a.2.min(b.2);
    let ic1 = a.3.min(b.3);
    if ir1 < ir0 || ic1 < ic0 {
        return 0.0;
    }
    let inter = area((ir0, ic0, ir1, ic1));
    inter / (area(a) + area(b) - inter)
}

/// Detector-style piecewise reward in [0, 1].
///
/// Branch precedence: spatial (scene has a relation), then count (any target
/// count > 1), then existence. The spatial sub-score is 1 when the relation
/// direction is correct and the centroid separation along the relation axis
/// is at least [`SPATIAL_SEPARATION_CELLS`], 0 when the direction is wrong,
/// and the bounding-box IoU of the two objects otherwise.
pub fn oracle_reward(grid: &GridImage, scene: &SceneSpec, alpha: f64) -> f64 {
    debug_assert!((0.0..=1.0).contains(&alpha));
    let components = detect_components(grid);
    let detected = |c: Color| components.iter().any(|comp| comp.color == c);
    let comp_count = |c: Color| components.iter().filter(|comp| comp.color == c).count();

    let mut named: Vec<Color> = Vec::new();
    for &(c, _) in &scene.objects {
        if !named.contains(&c) {
            named.push(c);
        }
    }
    let k = named.len() as f64;

    if let Some((a, b, dir)) = scene.relation {
        let existence = named.iter().filter(|&&c| detected(c)).count() as f64 / k;
        let cells_a = color_cells(grid, a);
        let cells_b = color_cells(grid, b);
        let r_spatial = if cells_a.is_empty() || cells_b.is_empty() {
            0.0
        } else {
            let ca = cells_centroid(&cells_a);
            let cb = cells_centroid(&cells_b);
            // a left-of b: a's centroid column strictly smaller; a above b:
            // a's centroid row strictly smaller.
            let delta = match dir {
                Direction::LeftOf => cb.1 - ca.1,
                Direction::Above => cb.0 - ca.0,
            };
            if delta <= 0.0 {
                0.0
            } else if delta >= SPATIAL_SEPARATION_CELLS {
                1.0
            } else {
                bbox_iou(cells_bbox(&cells_a), cells_bbox(&cells_b))
            }
        };
        return alpha * r_spatial + (1.0 - alpha) * existence;
    }

    if scene.objects.iter().any(|&(_, n)| n > 1) {
        let per_color = |c: Color| -> usize {
            scene
                .objects
                .iter()
                .filter(|&&(oc, _)| oc == c)
                .map(|&(_, n)| n)
                .sum()
        };
        return named
            .iter()
            .filter(|&&c| comp_count(c) == per_color(c))
            .count() as f64
            / k;
    }

    named.iter().filter(|&&c| detected(c)).count() as f64 / k
}

/// Shannon entropy (nats) of the empirical cell-color distribution.
pub fn color_entropy(grid: &GridImage) -> f64 {
    let mut counts = [0usize; 5];
    for cell in &grid.cells {
        let i = match cell {
            None => 0,
            Some(c) => 1 + Color::ALL.iter().position(|x| x == c).unwrap(),
        };
        counts[i] += 1;
    }
    let n = GRID_CELLS as f64;
    -counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Render a scene as an idealized grid: every object instance is a disjoint
/// single-cell component and relation scenes place the pair well-separated in
/// the correct direction. Always scores 1.0 under `oracle_reward`.
pub fn ideal_render(scene: &SceneSpec) -> GridImage {
    let mut cells = vec![None; GRID_CELLS];
    match scene.relation {
        Some((a, b, dir)) => {
            let (pa, pb) = match dir {
                Direction::LeftOf => ((3usize, 1usize), (3usize, 6usize)),
                Direction::Above => ((1, 3), (6, 3)),
            };
            cells[pa.0 * GRID_SIDE + pa.1] = Some(a);
            cells[pb.0 * GRID_SIDE + pb.1] = Some(b);
        }
        None => {
            // spaced on a stride-2 lattice so every cell is its own component
            let mut slots = (0..4).flat_map(|r| (0..4).map(move |c| (2 * r, 2 * c)));
            for &(color, count) in &scene.objects {
                for _ in 0..count {
                    let (r, c) = slots.next().expect("scene exceeds grid capacity");
                    cells[r * GRID_SIDE + c] = Some(color);
                }
            }
        }
    }
    GridImage { cells }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::derive_stream;

    fn vocab() -> Vocabulary {
        Vocabulary::default()
    }

    fn grid_from(cells: &[(usize, usize, Color)]) -> GridImage {
        let mut g = GridImage {
            cells: vec![None; GRID_CELLS],
        };
        for &(r, c, color) in cells {
            g.cells[r * GRID_SIDE + c] = Some(color);
        }
        g
    }

    #[test]
    fn vocab_layout() {
        let v = vocab();
        assert_eq!(v.text_active_set().len(), 14);
        assert_eq!(v.image_active_set().len(), 5);
        assert_eq!(v.full_size(), 20);
        // id ranges are disjoint
        let mut all = v.text_active_set();
        all.extend(v.image_active_set());
        all.push(v.pad_token);
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), 20);
    }

    #[test]
    fn counting_prompt_has_matching_scene() {
        let v = vocab();
        for id in 0..20 {
            let p = sample_prompt(&v, derive_stream(11, id), PromptCategory::Counting);
            assert_eq!(p.scene.objects.len(), 1);
            assert!(p.scene.objects[0].1 >= 2);
            assert_eq!(p.tokens, render_scene(&v, &p.scene));
        }
    }

    #[test]
    fn spatial_prompt_carries_relation() {
        let v = vocab();
        let p = sample_prompt(&v, derive_stream(3, 0), PromptCategory::Spatial);
        let (a, b, _) = p.scene.relation.expect("relation");
        assert_ne!(a, b);
        assert_eq!(p.tokens.len(), 5);
    }

    #[test]
    fn grammar_round_trip() {
        let v = vocab();
        for i in 0..1000u64 {
            let cat = PromptCategory::ALL[(i % 4) as usize];
            let p = sample_prompt(&v, derive_stream(99, i), cat);
            let text = render_scene_text(&v, &p.scene);
            let parsed = parse_prompt_line(&v, &text, 1).unwrap();
            assert_eq!(parsed.scene, p.scene);
            assert_eq!(parsed.tokens, p.tokens);
        }
    }

    #[test]
    fn prompt_file_rejects_bad_lines() {
        let v = vocab();
        let err = parse_prompt_file(&v, "two red\none purple\n").unwrap_err();
        assert_eq!(
            err,
            DomainError::UnknownWord {
                line: 2,
                word: "purple".into()
            }
        );
        let err = parse_prompt_file(&v, "red two\n").unwrap_err();
        assert_eq!(err, DomainError::BadGrammar { line: 1 });
    }

    #[test]
    fn decode_image_cases() {
        let v = vocab();
        let bg = vec![v.image_token(None); 64];
        let g = decode_image(&v, &bg).unwrap();
        assert!(g.cells.iter().all(|c| c.is_none()));

        let mut tokens = bg.clone();
        tokens[0] = v.image_token(Some(Color::Red));
        tokens[1] = v.image_token(Some(Color::Red));
        let g = decode_image(&v, &tokens).unwrap();
        assert_eq!(g.cell(0, 0), Some(Color::Red));
        assert_eq!(g.cell(0, 1), Some(Color::Red));

        assert_eq!(decode_image(&v, &bg[..63]).unwrap_err(), DomainError::ImageLength);
        let mut bad = bg;
        bad[5] = v.pad_token;
        assert_eq!(decode_image(&v, &bad).unwrap_err(), DomainError::SegmentViolation);
    }

    #[test]
    fn components_disjoint_cells() {
        let g = grid_from(&[(0, 0, Color::Red), (7, 7, Color::Red)]);
        let comps = detect_components(&g);
        assert_eq!(comps.len(), 2);
        assert!(comps.iter().all(|c| c.color == Color::Red && c.cells.len() == 1));
    }

    #[test]
    fn component_centroid_hand_value() {
        let g = grid_from(&[(0, 0, Color::Red), (0, 1, Color::Red), (1, 0, Color::Red)]);
        let comps = detect_components(&g);
        assert_eq!(comps.len(), 1);
        assert!((comps[0].centroid.0 - 1.0 / 3.0).abs() < 1e-12);
        assert!((comps[0].centroid.1 - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(comps[0].bbox, (0, 0, 1, 1));
    }

    #[test]
    fn empty_grid_has_no_components() {
        let g = GridImage {
            cells: vec![None; GRID_CELLS],
        };
        assert!(detect_components(&g).is_empty());
    }

    #[test]
    fn oracle_count_branch() {
        let scene = SceneSpec {
            objects: vec![(Color::Red, 2)],
            relation: None,
        };
        let g = grid_from(&[(0, 0, Color::Red), (4, 4, Color::Red)]);
        assert_eq!(oracle_reward(&g, &scene, DEFAULT_ALPHA), 1.0);
        let g1 = grid_from(&[(0, 0, Color::Red)]);
        assert_eq!(oracle_reward(&g1, &scene, DEFAULT_ALPHA), 0.0);
    }

    #[test]
    fn oracle_spatial_correct_direction() {
        let scene = SceneSpec {
            objects: vec![(Color::Red, 1), (Color::Blue, 1)],
            relation: Some((Color::Red, Color::Blue, Direction::LeftOf)),
        };
        // red centroid col 1.5, blue centroid col 5.5
        let g = grid_from(&[
            (3, 1, Color::Red),
            (3, 2, Color::Red),
            (3, 5, Color::Blue),
            (3, 6, Color::Blue),
        ]);
        assert!((oracle_reward(&g, &scene, 0.6) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_spatial_wrong_direction() {
        let scene = SceneSpec {
            objects: vec![(Color::Red, 1), (Color::Blue, 1)],
            relation: Some((Color::Red, Color::Blue, Direction::LeftOf)),
        };
        // red entirely right of blue: spatial 0, existence fraction 1
        let g = grid_from(&[(3, 6, Color::Red), (3, 1, Color::Blue)]);
        assert!((oracle_reward(&g, &scene, 0.6) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn oracle_spatial_close_uses_iou() {
        let scene = SceneSpec {
            objects: vec![(Color::Red, 1), (Color::Blue, 1)],
            relation: Some((Color::Red, Color::Blue, Direction::LeftOf)),
        };
        // correct direction, separation 1 (< 2): bbox IoU of two 1-cell boxes
        // that don't overlap = 0
        let g = grid_from(&[(3, 3, Color::Red), (3, 4, Color::Blue)]);
        assert!((oracle_reward(&g, &scene, 0.6) - 0.4).abs() < 1e-12);
    }

    #[test]
    fn oracle_spatial_precedence_over_count() {
        // relation present wins even when counts are > 1
        let scene = SceneSpec {
            objects: vec![(Color::Red, 2), (Color::Blue, 1)],
            relation: Some((Color::Red, Color::Blue, Direction::Above)),
        };
        let g = grid_from(&[(0, 3, Color::Red), (6, 3, Color::Blue)]);
        let got = oracle_reward(&g, &scene, 0.6);
        // spatial branch: r_spatial 1, existence 1
        assert!((got - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ideal_render_scores_one() {
        let v = vocab();
        for i in 0..1000u64 {
            let cat = PromptCategory::ALL[(i % 4) as usize];
            let p = sample_prompt(&v, derive_stream(5, i), cat);
            let g = ideal_render(&p.scene);
            assert_eq!(oracle_reward(&g, &p.scene, DEFAULT_ALPHA), 1.0, "scene {:?}", p.scene);
        }
    }

    #[test]
    fn oracle_reward_bounded_on_random_pairs() {
        use rand::Rng;
        let v = vocab();
        let mut rng = derive_stream(77, 0).rng();
        for i in 0..10_000u64 {
            let cat = PromptCategory::ALL[(i % 4) as usize];
            let p = sample_prompt(&v, derive_stream(78, i), cat);
            let g = GridImage {
                cells: (0..GRID_CELLS)
                    .map(|_| match rng.gen_range(0..8) {
                        0 => Some(Color::Red),
                        1 => Some(Color::Green),
                        2 => Some(Color::Blue),
                        3 => Some(Color::Yellow),
                        _ => None,
                    })
                    .collect(),
            };
            let r = oracle_reward(&g, &p.scene, DEFAULT_ALPHA);
            assert!((0.0..=1.0).contains(&r), "r = {r}");
        }
    }

    #[test]
    fn color_entropy_values() {
        let all_bg = GridImage {
            cells: vec![None; GRID_CELLS],
        };
        assert_eq!(color_entropy(&all_bg), 0.0);

        let half = GridImage {
            cells: (0..GRID_CELLS)
                .map(|i| if i < 32 { Some(Color::Red) } else { Some(Color::Blue) })
                .collect(),
        };
        assert!((color_entropy(&half) - 2.0f64.ln()).abs() < 1e-12);

        let four = GridImage {
            cells: (0..GRID_CELLS).map(|i| Some(Color::ALL[i / 16])).collect(),
        };
        assert!((color_entropy(&four) - 4.0f64.ln()).abs() < 1e-12);
    }
}
