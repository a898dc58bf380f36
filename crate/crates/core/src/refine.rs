//! Shortlist refinement. Raw nearest-neighbor candidate lists are improved
//! by up to three composable stages, always in this order:
//!
//! 1. **Local-feature re-ranking** ([`rerank_lf`]) — candidates are
//!    re-scored by how well their local features match the query crop's,
//!    weighting descriptor similarity by spatial agreement.
//! 2. **Macro-category filtering** ([`macro_category_filter`]) — when a
//!    strict majority of confident proposals agree on a category, every
//!    shortlist is rebuilt restricted to that category.
//! 3. **Ratio test** ([`ratio_test`]) — proposals whose top two candidates
//!    are nearly equidistant are marked ambiguous and excluded downstream.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detect::RegionProposal;
use crate::embedder::{Descriptor, LocalFeature};
use crate::error::{Error, Result};
use crate::store::{cosine_distance_units, RankedMatch, ReferenceDb};

/// Which refinement stages run. The execution order is fixed (re-rank,
/// then category filter, then ratio test); these flags only enable them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Stages {
    /// Local-feature re-ranking of each shortlist.
    pub lf: bool,
    /// Macro-category majority filtering.
    pub mc: bool,
    /// Distance-ratio ambiguity test.
    pub th: bool,
}

impl Stages {
    pub fn none() -> Self {
        Stages::default()
    }

    pub fn all() -> Self {
        Stages { lf: true, mc: true, th: true }
    }

    /// Every subset of stages, for ablation runs; the empty set comes
    /// first.
    pub fn all_subsets() -> Vec<Stages> {
        (0..8u8)
            .map(|mask| Stages {
                lf: mask & 1 != 0,
                mc: mask & 2 != 0,
                th: mask & 4 != 0,
            })
            .collect()
    }

    /// Stable label for reports and file names: "none", "lf", "lf+th", ...
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.lf {
            parts.push("lf");
        }
        if self.mc {
            parts.push("mc");
        }
        if self.th {
            parts.push("th");
        }
        if parts.is_empty() {
            "none".to_string()
        } else {
            parts.join("+")
        }
    }
}

impl fmt::Display for Stages {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

impl FromStr for Stages {
    type Err = Error;

    /// Parses a comma-separated stage list such as `"lf,mc,th"`. An empty
    /// string or `"none"` selects no stages.
    fn from_str(s: &str) -> Result<Self> {
        let mut stages = Stages::default();
        let trimmed = s.trim();
        if trimmed.is_empty() || trimmed == "none" {
            return Ok(stages);
        }
        for token in trimmed.split(',') {
            match token.trim() {
                "lf" => stages.lf = true,
                "mc" => stages.mc = true,
                "th" => stages.th = true,
                other => {
                    return Err(Error::Validation(format!(
                        "unknown refinement stage '{other}' (expected lf, mc, or th)"
                    )))
                }
            }
        }
        Ok(stages)
    }
}

/// Tuning knobs for refinement.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineParams {
    /// Guard added to the descriptor distance in the match-weight
    /// denominator.
    pub epsilon: f64,
    /// Largest accepted 1-NN/2-NN distance ratio, in (0, 1].
    pub tau_d: f64,
    /// Detector-confidence floor for category votes (strictly above).
    pub conf_mc: f32,
    /// Shortlist size used when rebuilding candidate lists.
    pub k: usize,
}

impl Default for RefineParams {
    fn default() -> Self {
        RefineParams { epsilon: 1e-6, tau_d: 0.9, conf_mc: 0.1, k: 5 }
    }
}

impl RefineParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Validation(format!(
                "epsilon {} must be a positive finite number",
                self.epsilon
            )));
        }
        if !(self.tau_d > 0.0 && self.tau_d <= 1.0) {
            return Err(Error::Validation(format!(
                "tau_d {} outside (0, 1]",
                self.tau_d
            )));
        }
        if !(0.0..=1.0).contains(&self.conf_mc) {
            return Err(Error::Validation(format!(
                "conf_mc {} outside [0, 1]",
                self.conf_mc
            )));
        }
        if self.k == 0 {
            return Err(Error::Validation("shortlist size k must be >= 1".into()));
        }
        Ok(())
    }
}

/// Whether a proposal's recognition survived refinement.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecognitionStatus {
    Accepted,
    RejectedAmbiguous,
}

/// One region proposal with its ranked product candidates.
#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub region: RegionProposal,
    pub candidates: Vec<RankedMatch>,
    pub status: RecognitionStatus,
}

impl Recognition {
    pub fn new(region: RegionProposal, candidates: Vec<RankedMatch>) -> Self {
        Recognition { region, candidates, status: RecognitionStatus::Accepted }
    }

    /// Rank-1 candidate, if any.
    pub fn top(&self) -> Option<&RankedMatch> {
        self.candidates.first()
    }
}

/// Embedded features of one query crop: the global descriptor that built
/// the shortlist plus the crop's local features.
#[derive(Clone, Debug)]
pub struct QueryFeatures {
    pub descriptor: Descriptor,
    pub locals: Vec<LocalFeature>,
}

/// Match weight between a query local feature and a reference local
/// feature: position-vector alignment over descriptor distance,
/// `((v_q · v_r) + 1) / (d(f_q, f_r) + epsilon)`.
///
/// Always non-negative; the numerator lies in [0, 2] for unit (or zero,
/// for map-center features) position vectors.
pub fn match_weight(fq: &LocalFeature, fr: &LocalFeature, epsilon: f64) -> Result<f64> {
    let vdot = fq.v[0] as f64 * fr.v[0] as f64 + fq.v[1] as f64 * fr.v[1] as f64;
    let d = cosine_distance_units(&fq.f, &fr.f)?;
    Ok((vdot + 1.0) / (d + epsilon))
}

/// Re-orders a shortlist by descending sum of match weights: each query
/// local is matched to the candidate's nearest reference local by
/// descriptor distance (one-directional; ties pick the first), and the
/// weights of those matches are summed per candidate. Equal scores keep
/// the original rank order. Candidate distances are left untouched — they
/// remain the global descriptor distances.
///
/// Returns the re-ranked list and a flag that is true when the query had
/// no local features, in which case the shortlist is returned unchanged.
pub fn rerank_lf(
    query_locals: &[LocalFeature],
    shortlist: &[RankedMatch],
    db: &ReferenceDb,
    params: &RefineParams,
) -> Result<(Vec<RankedMatch>, bool)> {
    params.validate()?;
    if query_locals.is_empty() {
        return Ok((shortlist.to_vec(), true));
    }
    let mut scored: Vec<(f64, usize, RankedMatch)> = Vec::with_capacity(shortlist.len());
    for (orig, m) in shortlist.iter().enumerate() {
        let rec = db.get(&m.product_id).ok_or_else(|| {
            Error::Validation(format!(
                "candidate '{}' is not in the reference database",
                m.product_id
            ))
        })?;
        let mut total = 0.0f64;
        for ql in query_locals {
            let mut best: Option<(f64, &LocalFeature)> = None;
            for rl in &rec.locals {
                let d = cosine_distance_units(&ql.f, &rl.f)?;
                if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
                    best = Some((d, rl));
                }
            }
            if let Some((_, rl)) = best {
                total += match_weight(ql, rl, params.epsilon)?;
            }
        }
        scored.push((total, orig, m.clone()));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let list = scored
        .into_iter()
        .enumerate()
        .map(|(i, (_, _, mut m))| {
            m.rank = i + 1;
            m
        })
        .collect();
    Ok((list, false))
}

/// Ambiguity test over a candidate list: accepted iff `d1 / d2 <= tau_d`,
/// where `d1` and `d2` are the two smallest global distances in the list.
/// Ambiguity is a property of the distance distribution, so a list whose
/// order was changed by re-ranking stages tests exactly like the original
/// distance-sorted shortlist. A list with fewer than two candidates
/// auto-accepts; `d1 == d2 == 0` accepts (exact duplicates).
pub fn ratio_test(shortlist: &[RankedMatch], tau_d: f64) -> bool {
    if shortlist.len() < 2 {
        return true;
    }
    let mut d1 = f64::INFINITY;
    let mut d2 = f64::INFINITY;
    for m in shortlist {
        if m.distance < d1 {
            d2 = d1;
            d1 = m.distance;
        } else if m.distance < d2 {
            d2 = m.distance;
        }
    }
    if d2 == 0.0 {
        // d1 <= d2, so both top distances are exact matches.
        return true;
    }
    d1 / d2 <= tau_d
}

/// Outcome of the macro-category vote.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CategoryVote {
    /// Vote counts per category among confident proposals.
    pub votes: BTreeMap<String, usize>,
    /// The winning category, when one holds a strict (> 50%) majority.
    pub majority: Option<String>,
}

/// Tallies the categories of rank-1 candidates over proposals whose
/// detector confidence is strictly above `conf_mc`.
pub fn category_vote(
    recognitions: &[Recognition],
    db: &ReferenceDb,
    conf_mc: f32,
) -> Result<CategoryVote> {
    let mut votes: BTreeMap<String, usize> = BTreeMap::new();
    for rec in recognitions {
        if rec.region.confidence <= conf_mc {
            continue;
        }
        let Some(top) = rec.top() else { continue };
        let record = db.get(&top.product_id).ok_or_else(|| {
            Error::Validation(format!(
                "candidate '{}' is not in the reference database",
                top.product_id
            ))
        })?;
        *votes.entry(record.category_id.clone()).or_default() += 1;
    }
    let total: usize = votes.values().sum();
    let majority = votes
        .iter()
        .find(|(_, &n)| n * 2 > total)
        .map(|(cat, _)| cat.clone());
    Ok(CategoryVote { votes, majority })
}

/// Category-consensus filter: rank-1 candidates of confident proposals
/// vote, and with a strict majority every proposal's shortlist is rebuilt
/// by a nearest-neighbor query restricted to the winning category
/// (`queries[i]` must hold the descriptor that built
/// `recognitions[i]`'s shortlist). Without a majority — including when no
/// proposal clears the confidence floor — the input is returned unchanged;
/// the vote tally reports which case occurred.
pub fn macro_category_filter(
    recognitions: Vec<Recognition>,
    queries: &[QueryFeatures],
    db: &ReferenceDb,
    params: &RefineParams,
) -> Result<(Vec<Recognition>, CategoryVote)> {
    params.validate()?;
    if recognitions.len() != queries.len() {
        return Err(Error::Dimension(format!(
            "{} recognitions but {} query feature sets",
            recognitions.len(),
            queries.len()
        )));
    }
    let vote = category_vote(&recognitions, db, params.conf_mc)?;
    let Some(category) = vote.majority.clone() else {
        return Ok((recognitions, vote));
    };
    let mut out = Vec::with_capacity(recognitions.len());
    for (rec, q) in recognitions.into_iter().zip(queries) {
        let candidates = db.knn(&q.descriptor, params.k, Some(&category))?;
        out.push(Recognition { candidates, ..rec });
    }
    Ok((out, vote))
}

/// Diagnostics from one refinement run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct RefineSummary {
    /// Re-rank applications skipped because the query had no local
    /// features.
    pub lf_skipped_empty_locals: usize,
    /// Category vote tally, present when the mc stage ran.
    pub category_vote: Option<CategoryVote>,
    /// Proposals marked ambiguous by the ratio test.
    pub th_rejected: usize,
}

fn apply_rerank(
    recognitions: Vec<Recognition>,
    queries: &[QueryFeatures],
    db: &ReferenceDb,
    params: &RefineParams,
    skipped: &mut usize,
) -> Result<Vec<Recognition>> {
    let mut out = Vec::with_capacity(recognitions.len());
    for (rec, q) in recognitions.into_iter().zip(queries) {
        let (candidates, skip) = rerank_lf(&q.locals, &rec.candidates, db, params)?;
        if skip {
            *skipped += 1;
        }
        out.push(Recognition { candidates, ..rec });
    }
    Ok(out)
}

/// Runs the enabled refinement stages over one scene's recognitions in
/// fixed order: local-feature re-ranking, macro-category filtering (after
/// which re-ranking is re-applied to the rebuilt shortlists when both
/// stages are enabled), then the ratio test, which marks losers
/// `rejected_ambiguous` instead of removing them. With no stages enabled
/// this is the identity. `queries[i]` holds the embedded features of
/// `recognitions[i]`'s crop.
pub fn refine_full(
    recognitions: Vec<Recognition>,
    queries: &[QueryFeatures],
    db: &ReferenceDb,
    params: &RefineParams,
    stages: Stages,
) -> Result<(Vec<Recognition>, RefineSummary)> {
    params.validate()?;
    if recognitions.len() != queries.len() {
        return Err(Error::Dimension(format!(
            "{} recognitions but {} query feature sets",
            recognitions.len(),
            queries.len()
        )));
    }
    let mut recs = recognitions;
    let mut summary = RefineSummary::default();

    if stages.lf {
        recs = apply_rerank(recs, queries, db, params, &mut summary.lf_skipped_empty_locals)?;
    }
    if stages.mc {
        let (filtered, vote) = macro_category_filter(recs, queries, db, params)?;
        recs = filtered;
        let requeried = vote.majority.is_some();
        summary.category_vote = Some(vote);
        if requeried && stages.lf {
            recs =
                apply_rerank(recs, queries, db, params, &mut summary.lf_skipped_empty_locals)?;
        }
    }
    if stages.th {
        for rec in &mut recs {
            if !ratio_test(&rec.candidates, params.tau_d) {
                rec.status = RecognitionStatus::RejectedAmbiguous;
                summary.th_rejected += 1;
            }
        }
    }
    Ok((recs, summary))
}

#[derive(Serialize, Deserialize)]
struct RecognitionLine {
    image: String,
    x: i64,
    y: i64,
    w: i64,
    h: i64,
    conf: f32,
    status: RecognitionStatus,
    candidates: Vec<RankedMatch>,
}

/// Writes one scene's recognitions as JSON lines:
/// `{"image", "x", "y", "w", "h", "conf", "status", "candidates": [...]}`.
pub fn write_recognitions(
    path: impl AsRef<Path>,
    image_name: &str,
    recognitions: &[Recognition],
) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for rec in recognitions {
        let line = RecognitionLine {
            image: image_name.to_string(),
            x: rec.region.x,
            y: rec.region.y,
            w: rec.region.w,
            h: rec.region.h,
            conf: rec.region.confidence,
            status: rec.status,
            candidates: rec.candidates.clone(),
        };
        serde_json::to_writer(&mut out, &line)
            .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a recognitions file and groups the entries by image name,
/// preserving file order within each image.
pub fn read_recognitions(path: impl AsRef<Path>) -> Result<BTreeMap<String, Vec<Recognition>>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut by_image: BTreeMap<String, Vec<Recognition>> = BTreeMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: RecognitionLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: lineno,
            msg: e.to_string(),
        })?;
        by_image.entry(parsed.image).or_default().push(Recognition {
            region: RegionProposal::new(parsed.x, parsed.y, parsed.w, parsed.h, parsed.conf),
            candidates: parsed.candidates,
            status: parsed.status,
        });
    }
    Ok(by_image)
}
