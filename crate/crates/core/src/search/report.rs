use super::{ObservationStore, SearchError};
use crate::search_space::{bits_to_string, SearchSpace};

/// Real-time threshold: one frame in at most 50 ms.
pub const REALTIME_MS: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub rank: usize,
    pub encoding: String,
    pub candidate: String,
    pub reward: f64,
    pub latency_ms: f64,
    /// Dense latency over pruned latency; NaN when unknown.
    pub speedup: f64,
    pub realtime: bool,
}

/// Every record ranked by reward, with latency, speedup and real-time flag.
/// `dense_ms` gives a candidate's unpruned latency estimate.
pub fn report(
    store: &ObservationStore,
    space: &SearchSpace,
    dense_ms: impl Fn(&crate::search_space::Candidate) -> Option<f64>,
) -> Result<Vec<ReportRow>, SearchError> {
    store
        .ranked()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let cand = space.decode(&r.bits)?;
            let speedup = match dense_ms(&cand) {
                Some(d) if r.latency_ms > 0.0 => d / r.latency_ms,
                _ => f64::NAN,
            };
            Ok(ReportRow {
                rank: i + 1,
                encoding: bits_to_string(&r.bits),
                candidate: cand.to_string(),
                reward: r.reward,
                latency_ms: r.latency_ms,
                speedup,
                realtime: r.latency_ms.is_finite() && r.latency_ms <= REALTIME_MS,
            })
        })
        .collect()
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut s = String::from("rank,encoding,candidate,reward,latency_ms,speedup,realtime\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},\"{}\",{},{},{:.4},{}\n",
            r.rank, r.encoding, r.candidate, r.reward, r.latency_ms, r.speedup, r.realtime
        ));
    }
    s
}
