use serde::{Deserialize, Serialize};

use crate::corpus::WsiBag;
use crate::error::{Result, UmtlError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Tplg,
    Tlc,
    Inherited,
    Clustering,
}

impl Provenance {
    pub fn as_str(&self) -> &'static str {
        match self {
            Provenance::Tplg => "tplg",
            Provenance::Tlc => "tlc",
            Provenance::Inherited => "inherited",
            Provenance::Clustering => "clustering",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlideLabels {
    pub slide_id: String,
    pub labels: Vec<u8>,
    /// φ per instance when produced by a cleaner.
    pub probs: Option<Vec<f64>>,
}

/// Instance labels for a set of bags, one entry per instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub slides: Vec<SlideLabels>,
    pub provenance: Provenance,
    pub iteration: usize,
}

impl PseudoLabelSet {
    pub fn from_flat(
        bags: &[&WsiBag],
        flat: &[u8],
        probs: Option<&[f64]>,
        provenance: Provenance,
        iteration: usize,
    ) -> Self {
        let mut off = 0;
        let slides = bags
            .iter()
            .map(|b| {
                let n = b.len();
                let s = SlideLabels {
                    slide_id: b.slide_id.clone(),
                    labels: flat[off..off + n].to_vec(),
                    probs: probs.map(|p| p[off..off + n].to_vec()),
                };
                off += n;
                s
            })
            .collect();
        PseudoLabelSet {
            slides,
            provenance,
            iteration,
        }
    }

    pub fn for_slide(&self, slide_id: &str) -> Option<&SlideLabels> {
        self.slides.iter().find(|s| s.slide_id == slide_id)
    }

    /// Labels aligned with `bags`, erroring on any uncovered instance.
    pub fn aligned(&self, bags: &[&WsiBag]) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for b in bags {
            let s = self.for_slide(&b.slide_id).ok_or_else(|| UmtlError::MissingLabel {
                slide: b.slide_id.clone(),
                instance: 0,
            })?;
            if s.labels.len() != b.len() {
                return Err(UmtlError::MissingLabel {
                    slide: b.slide_id.clone(),
                    instance: s.labels.len().min(b.len()),
                });
            }
            out.extend_from_slice(&s.labels);
        }
        Ok(out)
    }

    pub fn flat_labels(&self) -> Vec<u8> {
        self.slides.iter().flat_map(|s| s.labels.iter().copied()).collect()
    }

    pub fn count_positive(&self) -> usize {
        self.flat_labels().iter().filter(|&&l| l == 1).count()
    }

    pub fn len(&self) -> usize {
        self.slides.iter().map(|s| s.labels.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
