//! Picks the segmentation feature that explains the most logging-score
//! variance. The simulated world shifts bids per segment, so `segment_key`
//! should win.

use dpm_ope::dpm::{select_segmentation, ScoreSource};
use dpm_ope::logdata::SegmentFeature;
use dpm_ope::simulator::{simulate, SimConfig};

fn main() -> dpm_ope::error::Result<()> {
    let config = SimConfig {
        n_auctions: 50_000,
        segment_bid_shift: 1.0,
        noise_sigma: 0.5,
        ..SimConfig::default()
    };
    let (data, _) = simulate(&config)?;
    let candidates = [
        SegmentFeature::SegmentKey,
        SegmentFeature::Day,
        SegmentFeature::HourOfDay,
        SegmentFeature::All,
    ];
    let choice = select_segmentation(&data, &candidates, &ScoreSource::Logging)?;
    for (feature, r2) in &choice.candidates {
        println!("{feature:<12} R^2 = {r2:.4}");
    }
    println!("selected: {}", choice.feature);
    let assignment = data.segment_assignment(choice.feature);
    for (label, members) in assignment.labels.iter().zip(assignment.members()) {
        println!("  {label}: {} impressions", members.len());
    }
    Ok(())
}
