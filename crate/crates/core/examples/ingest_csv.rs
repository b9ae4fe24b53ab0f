//! Ingests an external log with renamed columns. Bad rows are quarantined
//! with a reason instead of aborting the load.

use dpm_ope::logdata::{ingest_reader, ColumnMapping};

const LOG: &str = "\
id,ts,campaign,click,bid_score,new.model_a,second_price
i1,1704067200000,c1,1,2.5,2.0,1.9
i2,1704067260000,c1,0,1.5,1.8,
i3,1704067320000,c2,0,-1.0,1.0,0.5
i4,1704067380000,c2,yes,1.0,1.1,0.2
i5,1704153600000,c2,0,0.8,0.9,1.2
";

fn main() -> dpm_ope::error::Result<()> {
    let mapping = ColumnMapping {
        impression_id: "id".into(),
        timestamp_ms: "ts".into(),
        segment_key: "campaign".into(),
        reward: "click".into(),
        score_logging: "bid_score".into(),
        score_eval_prefix: "new.".into(),
        market_price: "second_price".into(),
        ..ColumnMapping::default()
    };
    let ingested = ingest_reader(LOG.as_bytes(), &mapping)?;
    let data = &ingested.dataset;
    println!("accepted {} rows, policies {:?}", data.len(), data.policy_names());
    println!("logged CTR {:.3}, days {:?}", data.logged_ctr(), data.day_indices());
    for r in &ingested.rejected {
        println!("rejected line {}: {}", r.line, r.reason);
    }
    Ok(())
}
