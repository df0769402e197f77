//! Colors, color sets and candidate sets used as co-referential markers.
//!
//! A [`Color`] pairs a visual appearance (an [`Rgb`] triple painted onto the
//! image) with the word a masked language model is expected to produce for
//! it. A [`ColorSet`] is the ordered palette a pipeline run marks regions
//! with.

use std::collections::HashSet;
use std::fmt;
use std::num::NonZeroU32;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Built-in named-color table, `name<TAB>r,g,b` per line.
pub const BUILTIN_NAMED_COLORS: &str = include_str!("../data/named_colors.tsv");

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ColorError {
    #[error("color text must not be empty")]
    EmptyText,
    #[error("color text {0:?} must be lowercase without surrounding whitespace")]
    NotNormalized(String),
    #[error("color text {0:?} must be a single word")]
    MultiWord(String),
    #[error("invalid rgb triple {0:?}, expected `r,g,b` with channels in 0..=255")]
    BadRgb(String),
    #[error("color set must contain at least one color")]
    EmptySet,
    #[error("duplicate color text {0:?}")]
    DuplicateText(String),
    #[error("color text {0:?} is reserved")]
    Reserved(String),
    #[error("duplicate visual appearance {0}")]
    DuplicateRgb(Rgb),
    #[error("candidate {0} list must not be empty")]
    EmptyCandidates(&'static str),
    #[error("line {line}: {message}")]
    Table { line: usize, message: String },
}

/// An 8-bit sRGB triple.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Rgb {
    pub r: u8,
    pub g: u8,
    pub b: u8,
}

impl Rgb {
    pub const fn new(r: u8, g: u8, b: u8) -> Self {
        Self { r, g, b }
    }

    pub const fn channels(self) -> [u8; 3] {
        [self.r, self.g, self.b]
    }

    pub const fn from_channels(c: [u8; 3]) -> Self {
        Self::new(c[0], c[1], c[2])
    }

    /// Manhattan distance over the three channels.
    pub fn l1(self, other: Rgb) -> u32 {
        self.channels()
            .iter()
            .zip(other.channels())
            .map(|(&a, b)| u32::from(a.abs_diff(b)))
            .sum()
    }
}

impl fmt::Display for Rgb {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{}", self.r, self.g, self.b)
    }
}

impl FromStr for Rgb {
    type Err = ColorError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ColorError::BadRgb(s.to_string());
        let mut parts = s.split(',').map(|p| p.trim().parse::<u8>());
        let mut next = || parts.next().ok_or_else(bad)?.map_err(|_| bad());
        let rgb = Rgb::new(next()?, next()?, next()?);
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(rgb)
    }
}

/// The word a model is asked to produce for a color, e.g. `red`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ColorText(String);

impl ColorText {
    pub fn new(text: impl Into<String>) -> Result<Self, ColorError> {
        let text = text.into();
        if text.is_empty() {
            return Err(ColorError::EmptyText);
        }
        if text.trim() != text || text.to_lowercase() != text {
            return Err(ColorError::NotNormalized(text));
        }
        if text.chars().any(char::is_whitespace) {
            return Err(ColorError::MultiWord(text));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ColorText {
    type Error = ColorError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ColorText> for String {
    fn from(value: ColorText) -> Self {
        value.0
    }
}

impl fmt::Display for ColorText {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Color {
    pub visual: Rgb,
    pub text: ColorText,
}

impl Color {
    pub fn new(visual: Rgb, text: ColorText) -> Self {
        Self { visual, text }
    }

    /// Shorthand for building colors from literals. Panics on invalid text.
    pub fn named(rgb: (u8, u8, u8), text: &str) -> Self {
        Self::new(
            Rgb::new(rgb.0, rgb.1, rgb.2),
            ColorText::new(text).expect("valid color text"),
        )
    }
}

/// Ordered palette with pairwise distinct texts and pairwise distinct RGBs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Color>", into = "Vec<Color>")]
pub struct ColorSet {
    colors: Vec<Color>,
}

impl ColorSet {
    pub fn new(colors: Vec<Color>) -> Result<Self, ColorError> {
        if colors.is_empty() {
            return Err(ColorError::EmptySet);
        }
        let mut texts = HashSet::new();
        let mut visuals = HashSet::new();
        for c in &colors {
            if c.text.as_str() == crate::scoring::NONE_LABEL {
                return Err(ColorError::Reserved(c.text.to_string()));
            }
            if !texts.insert(c.text.as_str()) {
                return Err(ColorError::DuplicateText(c.text.to_string()));
            }
            if !visuals.insert(c.visual) {
                return Err(ColorError::DuplicateRgb(c.visual));
            }
        }
        Ok(Self { colors })
    }

    pub fn colors(&self) -> &[Color] {
        &self.colors
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Color> {
        self.colors.iter()
    }

    pub fn get(&self, index: usize) -> Option<&Color> {
        self.colors.get(index)
    }

    pub fn find(&self, text: &str) -> Option<&Color> {
        self.colors.iter().find(|c| c.text.as_str() == text)
    }

    /// Keeps only the first `n` colors.
    pub fn truncated(&self, n: usize) -> Result<Self, ColorError> {
        Self::new(self.colors.iter().take(n).cloned().collect())
    }

    /// Renders the set in the named-color table format.
    pub fn to_table(&self) -> String {
        NamedColorTable {
            entries: self.colors.clone(),
        }
        .to_string()
    }

    pub fn from_table(text: &str) -> Result<Self, ColorError> {
        Self::new(NamedColorTable::parse(text)?.entries)
    }
}

impl TryFrom<Vec<Color>> for ColorSet {
    type Error = ColorError;

    fn try_from(value: Vec<Color>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<ColorSet> for Vec<Color> {
    fn from(value: ColorSet) -> Self {
        value.colors
    }
}

impl<'a> IntoIterator for &'a ColorSet {
    type Item = &'a Color;
    type IntoIter = std::slice::Iter<'a, Color>;

    fn into_iter(self) -> Self::IntoIter {
        self.colors.iter()
    }
}

/// Candidate color texts and visual appearances explored by prompt search.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CandidateSets {
    texts: Vec<ColorText>,
    visuals: Vec<Rgb>,
}

impl CandidateSets {
    /// Deduplicates both lists, keeping first occurrences.
    pub fn new(texts: Vec<ColorText>, visuals: Vec<Rgb>) -> Result<Self, ColorError> {
        let texts = dedup_in_order(texts);
        let visuals = dedup_in_order(visuals);
        if texts.is_empty() {
            return Err(ColorError::EmptyCandidates("text"));
        }
        if visuals.is_empty() {
            return Err(ColorError::EmptyCandidates("visual"));
        }
        Ok(Self { texts, visuals })
    }

    /// Texts from `table`; visuals are the union of RGB grids around each
    /// table entry, sorted.
    pub fn from_table_grid(
        table: &NamedColorTable,
        radius: u32,
        step: NonZeroU32,
    ) -> Result<Self, ColorError> {
        let texts = table.entries().iter().map(|c| c.text.clone()).collect();
        let mut visuals: Vec<Rgb> = table
            .entries()
            .iter()
            .flat_map(|c| build_rgb_grid(c.visual, radius, step))
            .collect();
        visuals.sort_unstable();
        visuals.dedup();
        Self::new(texts, visuals)
    }

    pub fn texts(&self) -> &[ColorText] {
        &self.texts
    }

    pub fn visuals(&self) -> &[Rgb] {
        &self.visuals
    }
}

fn dedup_in_order<T: Clone + Eq + std::hash::Hash>(items: Vec<T>) -> Vec<T> {
    let mut seen = HashSet::new();
    items
        .into_iter()
        .filter(|item| seen.insert(item.clone()))
        .collect()
}

pub const DEFAULT_GRID_RADIUS: u32 = 30;
pub const DEFAULT_GRID_STEP: u32 = 5;

/// All RGB triples within `radius` of `base` on each channel, on a lattice of
/// spacing `step`, clamped to `0..=255`, deduplicated and sorted.
pub fn build_rgb_grid(base: Rgb, radius: u32, step: NonZeroU32) -> Vec<Rgb> {
    let axis = |center: u8| -> Vec<u8> {
        let reach = i64::from(radius / step.get());
        let step = i64::from(step.get());
        let mut values: Vec<u8> = (-reach..=reach)
            .map(|k| (i64::from(center) + k * step).clamp(0, 255) as u8)
            .collect();
        values.sort_unstable();
        values.dedup();
        values
    };
    let (rs, gs, bs) = (axis(base.r), axis(base.g), axis(base.b));
    let mut grid = Vec::with_capacity(rs.len() * gs.len() * bs.len());
    for &r in &rs {
        for &g in &gs {
            for &b in &bs {
                grid.push(Rgb::new(r, g, b));
            }
        }
    }
    grid
}

/// Top-6 colors by text frequency, each at its standard RGB.
pub fn preset_frequency_colors() -> ColorSet {
    ColorSet::new(vec![
        Color::named((255, 0, 0), "red"),
        Color::named((0, 0, 0), "black"),
        Color::named((0, 0, 255), "blue"),
        Color::named((0, 255, 0), "green"),
        Color::named((255, 255, 0), "yellow"),
        Color::named((165, 42, 42), "brown"),
    ])
    .expect("frequency preset is a valid color set")
}

/// Top-6 colors selected by cross-modal prompt search.
pub fn preset_cps_colors() -> ColorSet {
    ColorSet::new(vec![
        Color::named((240, 0, 30), "red"),
        Color::named((155, 50, 210), "purple"),
        Color::named((255, 255, 25), "yellow"),
        Color::named((0, 10, 255), "blue"),
        Color::named((255, 170, 230), "pink"),
        Color::named((0, 255, 0), "green"),
    ])
    .expect("search preset is a valid color set")
}

/// A `name -> rgb` table in the `name<TAB>r,g,b` line format.
///
/// Blank lines and lines starting with `#` are ignored. Names must be unique.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NamedColorTable {
    entries: Vec<Color>,
}

impl NamedColorTable {
    pub fn parse(text: &str) -> Result<Self, ColorError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let table_err = |message: String| ColorError::Table {
                line: line_no,
                message,
            };
            let (name, rgb) = line
                .split_once('\t')
                .ok_or_else(|| table_err("expected `name<TAB>r,g,b`".into()))?;
            let text = ColorText::new(name).map_err(|e| table_err(e.to_string()))?;
            let visual: Rgb = rgb
                .parse()
                .map_err(|e: ColorError| table_err(e.to_string()))?;
            if !seen.insert(text.clone()) {
                return Err(table_err(format!("duplicate name {text:?}")));
            }
            entries.push(Color::new(visual, text));
        }
        Ok(Self { entries })
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_NAMED_COLORS).expect("built-in named color table parses")
    }

    pub fn entries(&self) -> &[Color] {
        &self.entries
    }

    pub fn lookup(&self, name: &str) -> Option<Rgb> {
        self.entries
            .iter()
            .find(|c| c.text.as_str() == name)
            .map(|c| c.visual)
    }
}

impl fmt::Display for NamedColorTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.entries {
            writeln!(f, "{}\t{}", c.text, c.visual)?;
        }
        Ok(())
    }
}
