//! Cross-modal prompt search: probe a backend with pure color blocks and
//! pick the color set whose visuals the model names most confidently.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::backend::{BackendError, ScoreRequest, ScoringBackend, META_ALPHA, META_TARGET_BOX};
use crate::colorspec::{CandidateSets, Color, ColorError, ColorSet, ColorText, Rgb};
use crate::dataio::write_atomic;
use crate::prompt::{CandidateTokenSeq, PromptText};
use crate::raster::pure_color_block;

pub const DEFAULT_DISCARD_THRESHOLD: f64 = 0.8;
pub const DEFAULT_BLOCK_SIZE: u32 = 224;
/// L1 distance at which the planted surface reaches zero.
pub const PLANTED_SCALE: f64 = 90.0;

#[derive(Debug, Error)]
pub enum CpsError {
    #[error("backend failed on row {row}{}: {source}", col.map(|c| format!(", column {c}")).unwrap_or_default())]
    Backend {
        row: usize,
        col: Option<usize>,
        #[source]
        source: BackendError,
    },
    #[error("invalid score matrix: {0}")]
    InvalidMatrix(String),
    #[error("discard threshold must lie in [0, 1], got {0}")]
    BadThreshold(f64),
    #[error("block size must be at least 1")]
    BadBlockSize,
    #[error("every decoding score is below the discard threshold {0}")]
    AllDiscarded(f64),
    #[error("matrix file line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Color(#[from] ColorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Decoding scores `s(visual, text)`, one row per candidate visual.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMatrix {
    visuals: Vec<Rgb>,
    texts: Vec<ColorText>,
    scores: Vec<f64>,
}

impl ScoreMatrix {
    /// `scores` is row-major, one row per visual.
    pub fn new(
        visuals: Vec<Rgb>,
        texts: Vec<ColorText>,
        scores: Vec<f64>,
    ) -> Result<Self, CpsError> {
        if visuals.is_empty() || texts.is_empty() {
            return Err(CpsError::InvalidMatrix("no rows or no columns".into()));
        }
        if scores.len() != visuals.len() * texts.len() {
            return Err(CpsError::InvalidMatrix(format!(
                "{} scores for a {}x{} matrix",
                scores.len(),
                visuals.len(),
                texts.len()
            )));
        }
        if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(CpsError::InvalidMatrix(format!(
                "score {} at row {}, column {} is not a probability",
                scores[i],
                i / texts.len(),
                i % texts.len()
            )));
        }
        Ok(Self {
            visuals,
            texts,
            scores,
        })
    }

    pub fn visuals(&self) -> &[Rgb] {
        &self.visuals
    }

    pub fn texts(&self) -> &[ColorText] {
        &self.texts
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.scores[row * self.texts.len() + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let n = self.texts.len();
        &self.scores[row * n..(row + 1) * n]
    }

    /// Sub-matrix of the given rows and columns, kept in the given order.
    pub fn restrict(&self, rows: &[usize], cols: &[usize]) -> Result<Self, CpsError> {
        let scores = rows
            .iter()
            .flat_map(|&r| cols.iter().map(move |&c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        Self::new(
            rows.iter().map(|&r| self.visuals[r]).collect(),
            cols.iter().map(|&c| self.texts[c].clone()).collect(),
            scores,
        )
    }

    /// Tab-separated: a header of texts after an `rgb` cell, then one line
    /// per visual.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rgb");
        for t in &self.texts {
            out.push('\t');
            out.push_str(t.as_str());
        }
        out.push('\n');
        for (i, v) in self.visuals.iter().enumerate() {
            out.push_str(&v.to_string());
            for s in self.row(i) {
                out.push('\t');
                out.push_str(&s.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_tsv(text: &str) -> Result<Self, CpsError> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.is_empty());
        let parse_err = |line: usize, message: String| CpsError::Parse {
            line: line + 1,
            message,
        };
        let (hl, header) = lines
            .next()
            .ok_or_else(|| parse_err(0, "empty file".into()))?;
        let mut cells = header.split('\t');
        if cells.next() != Some("rgb") {
            return Err(parse_err(hl, "header must start with `rgb`".into()));
        }
        let texts = cells
            .map(ColorText::new)
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| parse_err(hl, e.to_string()))?;
        let mut visuals = Vec::new();
        let mut scores = Vec::new();
        for (ln, line) in lines {
            let mut cells = line.split('\t');
            let rgb: Rgb = cells
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e: ColorError| parse_err(ln, e.to_string()))?;
            let row = cells
                .map(|c| {
                    c.parse::<f64>()
                        .map_err(|e| parse_err(ln, format!("{c:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            if row.len() != texts.len() {
                return Err(parse_err(
                    ln,
                    format!("{} scores, expected {}", row.len(), texts.len()),
                ));
            }
            visuals.push(rgb);
            scores.extend(row);
        }
        Self::new(visuals, texts, scores)
    }

    pub fn save(&self, path: &Path) -> Result<(), CpsError> {
        write_atomic(path, self.to_tsv().as_bytes()).map_err(|source| CpsError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CpsError> {
        let text = std::fs::read_to_string(path).map_err(|source| CpsError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_tsv(&text)
    }
}

/// Anything that can produce one row of decoding scores for a visual.
pub trait DecodingSurface: Sync {
    /// Probability of each text for a pure block of `visual`. On failure,
    /// the column index is reported when the fault is column-specific.
    fn row(
        &self,
        visual: Rgb,
        texts: &[ColorText],
    ) -> Result<Vec<f64>, (Option<usize>, BackendError)>;
}

/// Probes a scoring backend with a pure color block and the probe prompt.
pub struct BackendSurface<'a, B: ?Sized> {
    pub backend: &'a B,
    pub probe: PromptText,
    pub block_size: u32,
}

impl<B: ScoringBackend + ?Sized> DecodingSurface for BackendSurface<'_, B> {
    fn row(
        &self,
        visual: Rgb,
        texts: &[ColorText],
    ) -> Result<Vec<f64>, (Option<usize>, BackendError)> {
        let block = pure_color_block(visual, self.block_size, self.block_size)
            .map_err(|e| (None, BackendError::Protocol(e.to_string())))?;
        // Lets the chromatic oracle read the block as an unblended target.
        let meta = [
            (
                META_TARGET_BOX.to_string(),
                format!("0,0,{},{}", self.block_size, self.block_size),
            ),
            (META_ALPHA.to_string(), "0".to_string()),
        ]
        .into_iter()
        .collect();
        let candidates = vec![texts
            .iter()
            .map(|t| CandidateTokenSeq::single(t.as_str()))
            .collect()];
        let request =
            ScoreRequest::new(block, &self.probe, candidates, meta).map_err(|e| (None, e))?;
        let response = self.backend.score(&request).map_err(|e| (None, e))?;
        response.validate_for(&request).map_err(|e| (None, e))?;
        let slot = &response.per_slot_logprobs[0];
        texts
            .iter()
            .enumerate()
            .map(|(col, t)| {
                slot.get(t.as_str()).map(|lp| lp.exp()).ok_or_else(|| {
                    (
                        Some(col),
                        BackendError::Protocol(format!("missing score for {t}")),
                    )
                })
            })
            .collect()
    }
}

/// Closed-form surface around planted `(rgb*, text)` pairs:
/// `max(0, 1 - L1(visual, rgb*(text)) / scale)`, and 0 for unplanted texts.
#[derive(Clone, Debug)]
pub struct PlantedSurface {
    planted: BTreeMap<String, Rgb>,
    scale: f64,
}

impl PlantedSurface {
    pub fn new(planted: &ColorSet) -> Self {
        Self {
            planted: planted
                .iter()
                .map(|c| (c.text.to_string(), c.visual))
                .collect(),
            scale: PLANTED_SCALE,
        }
    }

    pub fn score(&self, visual: Rgb, text: &str) -> f64 {
        self.planted
            .get(text)
            .map(|p| (1.0 - f64::from(visual.l1(*p)) / self.scale).max(0.0))
            .unwrap_or(0.0)
    }
}

impl DecodingSurface for PlantedSurface {
    fn row(
        &self,
        visual: Rgb,
        texts: &[ColorText],
    ) -> Result<Vec<f64>, (Option<usize>, BackendError)> {
        Ok(texts
            .iter()
            .map(|t| self.score(visual, t.as_str()))
            .collect())
    }
}

/// Fills the score matrix row by row. Rows run on the current rayon pool;
/// the result does not depend on completion order.
pub fn probe_surface(
    surface: &dyn DecodingSurface,
    candidates: &CandidateSets,
) -> Result<ScoreMatrix, CpsError> {
    let texts = candidates.texts();
    let rows = candidates
        .visuals()
        .par_iter()
        .enumerate()
        .map(|(row, &v)| {
            surface
                .row(v, texts)
                .map_err(|(col, source)| CpsError::Backend { row, col, source })
        })
        .collect::<Result<Vec<_>, _>>()?;
    ScoreMatrix::new(
        candidates.visuals().to_vec(),
        texts.to_vec(),
        rows.into_iter().flatten().collect(),
    )
}

pub fn probe_scores<B: ScoringBackend + ?Sized>(
    backend: &B,
    candidates: &CandidateSets,
    probe: &PromptText,
    block_size: u32,
) -> Result<ScoreMatrix, CpsError> {
    if block_size == 0 {
        return Err(CpsError::BadBlockSize);
    }
    let surface = BackendSurface {
        backend,
        probe: probe.clone(),
        block_size,
    };
    probe_surface(&surface, candidates)
}

/// Index of the largest value among `items`, lowest index on ties.
fn argmax(items: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    items.fold(None, |best, (i, v)| match best {
        Some((_, bv)) if v <= bv => best,
        _ => Some((i, v)),
    })
}

/// Selects the color set from a score matrix.
///
/// Entries below `discard_threshold` are dropped. Every row with a surviving
/// entry elects its best text. Each elected text is then paired with the
/// elector that scores it highest, which keeps visuals distinct. Pairs come
/// out by descending score, ties by row.
pub fn search(matrix: &ScoreMatrix, discard_threshold: f64) -> Result<ColorSet, CpsError> {
    if !(0.0..=1.0).contains(&discard_threshold) {
        return Err(CpsError::BadThreshold(discard_threshold));
    }
    // text column -> (best elector row, its score), in first-election order
    let mut elected: Vec<(usize, usize, f64)> = Vec::new();
    for row in 0..matrix.visuals.len() {
        let surviving = matrix
            .row(row)
            .iter()
            .copied()
            .enumerate()
            .filter(|&(_, s)| s >= discard_threshold);
        let Some((col, score)) = argmax(surviving) else {
            continue;
        };
        match elected.iter_mut().find(|(c, _, _)| *c == col) {
            Some(entry) if score > entry.2 => *entry = (col, row, score),
            Some(_) => {}
            None => elected.push((col, row, score)),
        }
    }
    if elected.is_empty() {
        return Err(CpsError::AllDiscarded(discard_threshold));
    }
    elected.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.1.cmp(&b.1)));
    Ok(ColorSet::new(
        elected
            .into_iter()
            .map(|(col, row, _)| Color::new(matrix.visuals[row], matrix.texts[col].clone()))
            .collect(),
    )?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{ChromaticOracle, HashStub};
    use crate::colorspec::{build_rgb_grid, preset_cps_colors};
    use crate::prompt::{cps_probe_template, ProbeVariant};
    use proptest::prelude::*;
    use std::num::NonZeroU32;

    fn text(s: &str) -> ColorText {
        ColorText::new(s).unwrap()
    }

    fn matrix(rows: &[[f64; 3]]) -> ScoreMatrix {
        ScoreMatrix::new(
            (0..rows.len()).map(|i| Rgb::new(i as u8, 0, 0)).collect(),
            vec![text("a"), text("b"), text("c")],
            rows.iter().flatten().copied().collect(),
        )
        .unwrap()
    }

    fn pairs(set: &ColorSet) -> Vec<(Rgb, String)> {
        set.iter().map(|c| (c.visual, c.text.to_string())).collect()
    }

    #[test]
    fn matrix_validation() {
        assert!(ScoreMatrix::new(vec![Rgb::new(0, 0, 0)], vec![text("a")], vec![1.5]).is_err());
        assert!(ScoreMatrix::new(vec![Rgb::new(0, 0, 0)], vec![text("a")], vec![]).is_err());
        assert!(ScoreMatrix::new(vec![], vec![text("a")], vec![]).is_err());
    }

    #[test]
    fn tsv_round_trip() {
        let m = matrix(&[[0.1, 0.2, 0.7], [1.0 / 3.0, 0.0, 1e-17]]);
        let tsv = m.to_tsv();
        assert!(tsv.starts_with("rgb\ta\tb\tc\n0,0,0\t0.1\t0.2\t0.7\n"));
        assert_eq!(ScoreMatrix::from_tsv(&tsv).unwrap(), m);
        assert!(matches!(
            ScoreMatrix::from_tsv("rgb\ta\n1,2,3\t0.5\t0.5\n"),
            Err(CpsError::Parse { line: 2, .. })
        ));
    }

    #[test]
    fn single_surviving_pair() {
        let m = matrix(&[[0.1, 0.9, 0.0], [0.3, 0.3, 0.4]]);
        let set = search(&m, 0.8).unwrap();
        assert_eq!(pairs(&set), vec![(Rgb::new(0, 0, 0), "b".to_string())]);
    }

    #[test]
    fn uniform_half_is_all_discarded() {
        let m = matrix(&[[0.5; 3], [0.5; 3]]);
        assert!(matches!(search(&m, 0.8), Err(CpsError::AllDiscarded(_))));
        assert!(matches!(search(&m, 1.1), Err(CpsError::BadThreshold(_))));
    }

    #[test]
    fn collision_keeps_higher_scoring_visual() {
        let m = matrix(&[[0.85, 0.1, 0.05], [0.95, 0.0, 0.05], [0.0, 0.1, 0.9]]);
        let set = search(&m, 0.8).unwrap();
        assert_eq!(
            pairs(&set),
            vec![
                (Rgb::new(1, 0, 0), "a".to_string()),
                (Rgb::new(2, 0, 0), "c".to_string())
            ]
        );
    }

    #[test]
    fn elector_rule_keeps_visuals_distinct() {
        // Row 0 names "b" best; row 1 names "a". Column "b" is highest on
        // row 1 (0.88), but row 1 already stands for "a".
        let m = matrix(&[[0.0, 0.85, 0.0], [0.9, 0.88, 0.0]]);
        let set = search(&m, 0.8).unwrap();
        assert_eq!(
            pairs(&set),
            vec![
                (Rgb::new(1, 0, 0), "a".to_string()),
                (Rgb::new(0, 0, 0), "b".to_string())
            ]
        );
    }

    #[test]
    fn degenerate_and_uniform_backends() {
        let sets = CandidateSets::new(vec![text("red")], vec![Rgb::new(1, 2, 3)]).unwrap();
        let m = probe_scores(&HashStub, &sets, &cps_probe_template(ProbeVariant::Of), 4).unwrap();
        assert_eq!(m.get(0, 0), 1.0);

        struct Uniform;
        impl DecodingSurface for Uniform {
            fn row(
                &self,
                _: Rgb,
                texts: &[ColorText],
            ) -> Result<Vec<f64>, (Option<usize>, BackendError)> {
                Ok(vec![1.0 / texts.len() as f64; texts.len()])
            }
        }
        let sets = CandidateSets::new(
            vec![text("a"), text("b"), text("c"), text("d")],
            vec![Rgb::new(0, 0, 0), Rgb::new(9, 9, 9)],
        )
        .unwrap();
        let m = probe_surface(&Uniform, &sets).unwrap();
        assert!((0..2).all(|r| m.row(r).iter().all(|&s| s == 0.25)));
        assert!(matches!(
            probe_scores(&HashStub, &sets, &cps_probe_template(ProbeVariant::Of), 0),
            Err(CpsError::BadBlockSize)
        ));
    }

    #[test]
    fn backend_errors_carry_the_row() {
        let sets = CandidateSets::new(vec![text("nosuchcolor")], vec![Rgb::new(0, 0, 0)]).unwrap();
        let err = probe_scores(
            &ChromaticOracle::default(),
            &sets,
            &cps_probe_template(ProbeVariant::In),
            2,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            CpsError::Backend {
                row: 0,
                col: None,
                ..
            }
        ));
    }

    #[test]
    fn oracle_probe_names_pure_blocks() {
        let colors = preset_cps_colors();
        let oracle = ChromaticOracle::default().with_colors(&colors);
        let sets = CandidateSets::new(
            colors.iter().map(|c| c.text.clone()).collect(),
            colors.iter().map(|c| c.visual).collect(),
        )
        .unwrap();
        let m = probe_scores(&oracle, &sets, &cps_probe_template(ProbeVariant::Of), 8).unwrap();
        let mut got = pairs(&search(&m, 0.8).unwrap());
        let mut want = pairs(&colors);
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn planted_surface_matches_closed_form() {
        let planted = preset_cps_colors();
        let surface = PlantedSurface::new(&planted);
        let texts: Vec<ColorText> = planted.iter().map(|c| c.text.clone()).collect();
        let visuals: Vec<Rgb> =
            build_rgb_grid(Rgb::new(240, 0, 30), 10, NonZeroU32::new(5).unwrap());
        let sets = CandidateSets::new(texts.clone(), visuals.clone()).unwrap();
        let m = probe_surface(&surface, &sets).unwrap();
        for (r, v) in visuals.iter().enumerate() {
            for (c, t) in texts.iter().enumerate() {
                let p = planted.find(t.as_str()).unwrap().visual;
                let d = (i32::from(v.r) - i32::from(p.r)).abs()
                    + (i32::from(v.g) - i32::from(p.g)).abs()
                    + (i32::from(v.b) - i32::from(p.b)).abs();
                let expected = if d >= 90 {
                    0.0
                } else {
                    1.0 - f64::from(d) / 90.0
                };
                assert_eq!(m.get(r, c), expected);
            }
        }
    }

    fn arb_matrix() -> impl Strategy<Value = ScoreMatrix> {
        (1usize..8, 1usize..6).prop_flat_map(|(rows, cols)| {
            proptest::collection::vec(0.0f64..=1.0, rows * cols).prop_map(move |scores| {
                ScoreMatrix::new(
                    (0..rows).map(|i| Rgb::new(i as u8, 1, 2)).collect(),
                    (0..cols)
                        .map(|j| ColorText::new(format!("t{j}")).unwrap())
                        .collect(),
                    scores,
                )
                .unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn search_properties(m in arb_matrix(), lo in 0.0f64..=1.0, hi in 0.0f64..=1.0) {
            let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
            let low = search(&m, lo);
            let high = search(&m, hi);
            if let Ok(high) = &high {
                let low = low.as_ref().expect("lower threshold keeps everything the higher one does");
                for c in high {
                    prop_assert!(low.colors().contains(c));
                }
            }
            let Ok(set) = low else { return Ok(()); };
            let rows: Vec<usize> = m.visuals().iter().enumerate()
                .filter(|(_, v)| set.iter().any(|c| c.visual == **v)).map(|(i, _)| i).collect();
            let cols: Vec<usize> = m.texts().iter().enumerate()
                .filter(|(_, t)| set.find(t.as_str()).is_some()).map(|(i, _)| i).collect();
            for c in &set {
                let r = m.visuals().iter().position(|v| *v == c.visual).unwrap();
                let col = m.texts().iter().position(|t| *t == c.text).unwrap();
                let s = m.get(r, col);
                prop_assert!(s >= lo);
                prop_assert!(m.row(r).iter().all(|&x| x <= s), "pair is its row's maximum");
            }
            let again = search(&m.restrict(&rows, &cols).unwrap(), lo).unwrap();
            prop_assert_eq!(again, set);
        }
    }
}
