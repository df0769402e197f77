use std::collections::BTreeMap;

use crate::colorspec::{ColorSet, NamedColorTable, Rgb};
use crate::raster::{blend_channel, BoundingBox};
use crate::scoring::NONE_LABEL;

use super::{
    response_from_logits, BackendError, ScoreRequest, ScoreResponse, ScoringBackend, META_ALPHA,
    META_TARGET_BOX,
};

pub const ORACLE_BACKGROUND: Rgb = Rgb::new(128, 128, 128);
pub const DEFAULT_NONE_LOGIT: f64 = -20.0;
pub const DEFAULT_DISTANCE_SCALE: f64 = 3.0;

/// Deterministic mock that reads the overlay color off a known target box.
///
/// For each candidate with reference color `ρ` it predicts the blended
/// color a target on the gray background would show, and scores the
/// candidate by the negative L1 distance between that prediction and the
/// mean color actually observed in the box.
#[derive(Clone, Debug)]
pub struct ChromaticOracle {
    references: BTreeMap<String, Rgb>,
    none_logit: f64,
    distance_scale: f64,
}

impl Default for ChromaticOracle {
    fn default() -> Self {
        Self::with_table(&NamedColorTable::builtin())
    }
}

impl ChromaticOracle {
    pub fn with_table(table: &NamedColorTable) -> Self {
        Self {
            references: table
                .entries()
                .iter()
                .map(|c| (c.text.to_string(), c.visual))
                .collect(),
            none_logit: DEFAULT_NONE_LOGIT,
            distance_scale: DEFAULT_DISTANCE_SCALE,
        }
    }

    /// Registers a color set; its RGBs override table entries of the same name.
    pub fn register(&mut self, colors: &ColorSet) {
        for c in colors {
            self.references.insert(c.text.to_string(), c.visual);
        }
    }

    pub fn with_colors(mut self, colors: &ColorSet) -> Self {
        self.register(colors);
        self
    }

    pub fn with_none_logit(mut self, logit: f64) -> Self {
        self.none_logit = logit;
        self
    }

    pub fn with_distance_scale(mut self, scale: f64) -> Self {
        self.distance_scale = scale;
        self
    }

    pub fn reference(&self, label: &str) -> Option<Rgb> {
        self.references.get(label).copied()
    }

    /// Blend of `reference` over the gray background.
    pub fn expected(reference: Rgb, alpha: f64) -> Rgb {
        let bg = ORACLE_BACKGROUND;
        Rgb::new(
            blend_channel(bg.r, reference.r, alpha),
            blend_channel(bg.g, reference.g, alpha),
            blend_channel(bg.b, reference.b, alpha),
        )
    }

    fn logit(&self, label: &str, mean: [f64; 3], alpha: f64) -> Result<f64, BackendError> {
        if label == NONE_LABEL {
            return Ok(self.none_logit);
        }
        let rho = self
            .reference(label)
            .ok_or_else(|| BackendError::Protocol(format!("no reference color for {label:?}")))?;
        let e = Self::expected(rho, alpha).channels();
        let l1: f64 = (0..3).map(|c| (mean[c] - f64::from(e[c])).abs()).sum();
        Ok(-l1 / self.distance_scale)
    }
}

impl ScoringBackend for ChromaticOracle {
    fn backend_id(&self) -> String {
        "chromatic-oracle".into()
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse, BackendError> {
        request.validate()?;
        let target: BoundingBox = request
            .meta_value(META_TARGET_BOX)?
            .parse()
            .map_err(|e| BackendError::Protocol(format!("{META_TARGET_BOX}: {e}")))?;
        let alpha: f64 = request
            .meta_value(META_ALPHA)?
            .parse()
            .ok()
            .filter(|a| (0.0..=1.0).contains(a))
            .ok_or_else(|| {
                BackendError::Protocol(format!("{META_ALPHA} must be a number in [0, 1]"))
            })?;
        let mean = request.image.mean_over(&target).ok_or_else(|| {
            BackendError::Protocol(format!("{META_TARGET_BOX} {target} covers no pixel"))
        })?;
        let logits = request
            .candidates
            .iter()
            .map(|slot| {
                slot.iter()
                    .map(|c| Ok((c.label.clone(), self.logit(&c.label, mean, alpha)?)))
                    .collect::<Result<Vec<_>, BackendError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        response_from_logits(&logits, &self.backend_id())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::colorspec::{preset_cps_colors, Color};
    use crate::prompt::{grounding_template, CandidateTokenSeq};
    use crate::raster::{apply_visual_subprompt, Region, Shape, Transparency};
    use crate::RasterImage;

    fn candidates(colors: &ColorSet) -> Vec<Vec<CandidateTokenSeq>> {
        let mut slot: Vec<_> = colors
            .iter()
            .map(|c| CandidateTokenSeq::single(c.text.as_str()))
            .collect();
        slot.push(CandidateTokenSeq::single(NONE_LABEL));
        vec![slot]
    }

    fn scene(color: Option<&Color>) -> (RasterImage, BoundingBox) {
        let bg = RasterImage::filled(32, 32, ORACLE_BACKGROUND).unwrap();
        let target = BoundingBox::new(4.0, 4.0, 10.0, 8.0).unwrap();
        let img = match color {
            Some(c) => apply_visual_subprompt(
                &bg,
                &[(&Region::from_box(target), c)],
                Transparency::new(0.5).unwrap(),
                Shape::Block,
            )
            .unwrap(),
            None => bg,
        };
        (img, target)
    }

    fn ask(oracle: &ChromaticOracle, img: RasterImage, target: BoundingBox) -> ScoreResponse {
        let colors = preset_cps_colors();
        let meta = [
            (META_TARGET_BOX.to_string(), target.to_string()),
            (META_ALPHA.to_string(), "0.5".to_string()),
        ]
        .into_iter()
        .collect();
        let req = ScoreRequest::new(
            img,
            &grounding_template("x").unwrap(),
            candidates(&colors),
            meta,
        )
        .unwrap();
        let resp = oracle.score(&req).unwrap();
        resp.validate_for(&req).unwrap();
        resp
    }

    #[test]
    fn colored_target_is_recognized() {
        let colors = preset_cps_colors();
        let oracle = ChromaticOracle::default().with_colors(&colors);
        let red = colors.find("red").unwrap();
        let (img, target) = scene(Some(red));
        let resp = ask(&oracle, img, target);
        let slot = &resp.per_slot_logprobs[0];
        let best = slot.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, "red");
        // Independent recomputation of every candidate's distance.
        let seen = [184.0, 64.0, 79.0];
        for c in &colors {
            let rho = c.visual.channels();
            let d: f64 = (0..3)
                .map(|k| (seen[k] - (0.5 * 128.0 + 0.5 * f64::from(rho[k]) + 0.5).floor()).abs())
                .sum();
            if c.text.as_str() == "red" {
                assert_eq!(d, 0.0);
            } else {
                assert!(d > 0.0);
                assert!(slot[c.text.as_str()] < slot["red"]);
            }
        }
    }

    #[test]
    fn uncolored_target_decodes_none() {
        let colors = preset_cps_colors();
        let oracle = ChromaticOracle::default().with_colors(&colors);
        let (img, target) = scene(None);
        let resp = ask(&oracle, img, target);
        let slot = &resp.per_slot_logprobs[0];
        let best = slot.iter().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
        assert_eq!(best, NONE_LABEL);
        for c in &colors {
            let e = ChromaticOracle::expected(c.visual, 0.5);
            assert!(e.l1(ORACLE_BACKGROUND) > 60, "{} too close to gray", c.text);
        }
    }

    #[test]
    fn equal_distances_give_equal_probabilities() {
        let mut table = NamedColorTable::builtin();
        table =
            NamedColorTable::parse(&format!("{table}a\t138,128,128\nb\t118,128,128\n")).unwrap();
        let oracle = ChromaticOracle::with_table(&table);
        let req = ScoreRequest {
            image: RasterImage::filled(4, 4, ORACLE_BACKGROUND).unwrap(),
            prompt: "p".into(),
            mask_count: 1,
            candidates: vec![vec![
                CandidateTokenSeq::single("a"),
                CandidateTokenSeq::single("b"),
            ]],
            meta: [
                (META_TARGET_BOX.to_string(), "0,0,4,4".to_string()),
                (META_ALPHA.to_string(), "0.5".to_string()),
            ]
            .into_iter()
            .collect(),
        };
        let resp = oracle.score(&req).unwrap();
        assert_eq!(
            resp.per_slot_logprobs[0]["a"],
            resp.per_slot_logprobs[0]["b"]
        );
        assert_eq!(oracle.score(&req).unwrap(), resp, "deterministic");
    }

    #[test]
    fn meta_is_required() {
        let oracle = ChromaticOracle::default();
        let mut req = ScoreRequest {
            image: RasterImage::filled(4, 4, ORACLE_BACKGROUND).unwrap(),
            prompt: "p".into(),
            mask_count: 1,
            candidates: vec![vec![CandidateTokenSeq::single("red")]],
            meta: BTreeMap::new(),
        };
        assert_eq!(
            oracle.score(&req),
            Err(BackendError::MissingMeta(META_TARGET_BOX.into()))
        );
        req.meta.insert(META_TARGET_BOX.into(), "0,0,2,2".into());
        assert_eq!(
            oracle.score(&req),
            Err(BackendError::MissingMeta(META_ALPHA.into()))
        );
        req.meta.insert(META_ALPHA.into(), "1.5".into());
        assert!(matches!(oracle.score(&req), Err(BackendError::Protocol(_))));
    }
}
