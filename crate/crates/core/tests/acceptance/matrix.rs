use std::time::{Duration, Instant};

use rdmachan::chan::{declared, declared_table, ChannelConfig, Selector};
use rdmachan::metrics::measure::memory_points;
use rdmachan::metrics::{classify, least_capable_profile, validate_matrix, MeasureParams, Side, MEMORY_NS};

use crate::{ensure, Outcome};

const MATRIX_BUDGET: Duration = Duration::from_secs(60);

pub fn conformance() -> Outcome {
    let t = Instant::now();
    let report = validate_matrix(&declared_table(), &MeasureParams::default());
    let took = t.elapsed();
    ensure(report.all_match(), || format!("{}/20 match: {:?}", report.matched(), report.diff_lines()))?;
    ensure(took < MATRIX_BUDGET, || format!("took {took:?}, budget {MATRIX_BUDGET:?}"))?;
    Ok(format!("{}/{} rows match in {:.2} s", report.matched(), report.rows.len(), took.as_secs_f64()))
}

pub fn memory_scaling() -> Outcome {
    let cfg = ChannelConfig::default();
    let mut bad = Vec::new();
    for sel in Selector::ALL {
        let spec = declared(sel).effective();
        let profile = least_capable_profile(sel);
        for (side, want) in [(Side::OneToN, spec.mem_1_to_n), (Side::NToOne, spec.mem_n_to_1)] {
            let pts = memory_points(sel, &profile, &cfg, side, &MEMORY_NS).map_err(|e| format!("{sel}: {e}"))?;
            let got = classify(&pts);
            if got != want {
                bad.push(format!("{sel} {side:?}: declared {want}, measured {got} from {pts:?}"));
            }
        }
    }
    ensure(bad.is_empty(), || bad.join("; "))?;
    Ok(format!("40/40 memory columns classify as declared at N in {MEMORY_NS:?}"))
}
