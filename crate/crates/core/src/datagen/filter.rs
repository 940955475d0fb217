use serde::{Deserialize, Serialize};

use crate::datagen::BBox;
use crate::error::{Error, Result};

/// Discard rules applied to detected boxes before a sample enters the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterPolicy {
    /// Boxes covering strictly less than this fraction of the image reject
    /// the sample.
    pub min_area_fraction: f64,
    /// Reject samples with two boxes sharing a label.
    pub unique_labels: bool,
    /// Reject samples whose source resolution is below this side length.
    pub min_resolution: usize,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        FilterPolicy {
            min_area_fraction: 0.10,
            unique_labels: true,
            min_resolution: 16,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_area_fraction > 0.0 && self.min_area_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "min_area_fraction must be in (0, 1), got {}",
                self.min_area_fraction
            )));
        }
        Ok(())
    }
}

/// What the filters see of a sample: image size, source resolution and
/// labelled boxes.
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub height: usize,
    pub width: usize,
    pub source_resolution: usize,
    pub boxes: Vec<(String, BBox)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RejectReason {
    Area,
    DuplicateLabel,
    Resolution,
}

impl RejectReason {
    pub fn code(&self) -> &'static str {
        match self {
            RejectReason::Area => "area",
            RejectReason::DuplicateLabel => "duplicate-label",
            RejectReason::Resolution => "resolution",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterDecision {
    Accept,
    Reject(RejectReason),
}

/// First matching rule in the order area, duplicate label, resolution.
pub fn apply_filters(candidate: &Candidate, policy: &FilterPolicy) -> FilterDecision {
    let image_area = (candidate.height * candidate.width) as f64;
    if candidate
        .boxes
        .iter()
        .any(|(_, b)| (b.area() as f64) / image_area < policy.min_area_fraction)
    {
        return FilterDecision::Reject(RejectReason::Area);
    }
    if policy.unique_labels {
        let mut seen = std::collections::HashSet::new();
        if candidate.boxes.iter().any(|(label, _)| !seen.insert(label.as_str())) {
            return FilterDecision::Reject(RejectReason::DuplicateLabel);
        }
    }
    if candidate.source_resolution < policy.min_resolution {
        return FilterDecision::Reject(RejectReason::Resolution);
    }
    FilterDecision::Accept
}
