use crate::dpm::table::ScoreSource;
use crate::error::{Error, Result};
use crate::logdata::{Dataset, SegmentFeature};

/// Outcome of choosing a segmentation feature by explained variance.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentationChoice {
    pub feature: SegmentFeature,
    pub r_squared: f64,
    /// Set when every score is identical, so `R²` is defined as 0.
    pub degenerate: bool,
    /// `R²` of every candidate, in candidate order.
    pub candidates: Vec<(SegmentFeature, f64)>,
}

/// One-way ANOVA `R² = SSB / SST`. Returns `None` when `SST = 0`.
pub fn anova_r_squared(values: &[f64], groups: &[u32], n_groups: usize) -> Option<f64> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let mut sums = vec![0.0; n_groups];
    let mut sizes = vec![0usize; n_groups];
    for (v, g) in values.iter().zip(groups) {
        sums[*g as usize] += v;
        sizes[*g as usize] += 1;
    }
    let sst: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
    if sst == 0.0 {
        return None;
    }
    let ssb: f64 = sums
        .iter()
        .zip(&sizes)
        .filter(|(_, n)| **n > 0)
        .map(|(s, n)| {
            let group_mean = s / *n as f64;
            *n as f64 * (group_mean - mean).powi(2)
        })
        .sum();
    Some((ssb / sst).clamp(0.0, 1.0))
}

/// Picks the candidate feature whose grouping explains the most score
/// variance. Ties go to the earlier candidate.
pub fn select_segmentation(
    data: &Dataset,
    candidates: &[SegmentFeature],
    source: &ScoreSource,
) -> Result<SegmentationChoice> {
    if candidates.is_empty() {
        return Err(Error::Config("at least one segmentation candidate is required".into()));
    }
    let scores = source.scores(data)?;
    let mut scored = Vec::with_capacity(candidates.len());
    let mut degenerate = false;
    for feature in candidates {
        let assignment = data.segment_assignment(*feature);
        let r2 = match anova_r_squared(scores, &assignment.of_record, assignment.n_segments()) {
            Some(r2) => r2,
            None => {
                degenerate = true;
                0.0
            }
        };
        scored.push((*feature, r2));
    }
    let (feature, r_squared) = scored
        .iter()
        .fold(None::<(SegmentFeature, f64)>, |best, (f, r)| match best {
            Some((_, br)) if br >= *r => best,
            _ => Some((*f, *r)),
        })
        .expect("candidates is nonempty");
    Ok(SegmentationChoice {
        feature,
        r_squared,
        degenerate,
        candidates: scored,
    })
}
