use serde::{Deserialize, Serialize};

use super::report::LectureReport;
use crate::affectmodel::AffectiveState;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Opening,
    Middle,
    Closing,
}

impl Phase {
    pub const ALL: [Phase; 3] = [Phase::Opening, Phase::Middle, Phase::Closing];

    /// Phase of bucket `k` out of `n`: equal thirds by bucket index.
    pub fn of_bucket(k: usize, n: usize) -> Phase {
        match (3 * k) / n.max(1) {
            0 => Phase::Opening,
            1 => Phase::Middle,
            _ => Phase::Closing,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Phase::Opening => "opening third",
            Phase::Middle => "middle third",
            Phase::Closing => "closing third",
        }
    }

    fn bucket_range(self, n: usize) -> (usize, usize) {
        let members: Vec<usize> = (0..n).filter(|&k| Phase::of_bucket(k, n) == self).collect();
        match (members.first(), members.last()) {
            (Some(&a), Some(&b)) => (a, b + 1),
            _ => (0, 0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecommendationKind {
    LowEngagementPhase,
    RecurringStatePeak,
}

/// A lecture segment backing a recommendation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub session_id: String,
    pub phase: Phase,
    pub start_ms: u64,
    pub end_ms: u64,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub kind: RecommendationKind,
    pub phase: Phase,
    pub state: Option<AffectiveState>,
    pub text: String,
    pub evidence: Vec<Evidence>,
    pub score: f64,
}

const TIE_TOLERANCE: f64 = 1e-9;

/// Mean of bucket index means within each phase of one report.
fn phase_means(r: &LectureReport) -> [Option<f64>; 3] {
    let n = r.series.len();
    Phase::ALL.map(|p| {
        let (a, b) = p.bucket_range(n);
        let vals: Vec<f64> = r.series[a..b].iter().filter_map(|s| s.mean_norm_index).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    })
}

fn phase_evidence(r: &LectureReport, p: Phase, value: f64) -> Evidence {
    let (a, b) = p.bucket_range(r.series.len());
    let bucket = r.config.bucket_ms;
    Evidence {
        session_id: r.session.session_id.clone(),
        phase: p,
        start_ms: a as u64 * bucket,
        end_ms: b as u64 * bucket,
        value,
    }
}

fn lowest(means: &[Option<f64>; 3]) -> Option<Phase> {
    let mut best: Option<(Phase, f64)> = None;
    for (p, m) in Phase::ALL.iter().zip(means) {
        if let Some(m) = *m {
            if best.is_none_or(|(_, b)| m < b) {
                best = Some((*p, m));
            }
        }
    }
    best.map(|(p, _)| p)
}

/// Ranks lecture thirds by mean attentiveness across reports and flags
/// states that peak in the same third of two or more lectures.
pub fn recommend(reports: &[LectureReport]) -> Vec<Recommendation> {
    let mut out = Vec::new();
    let per_report: Vec<[Option<f64>; 3]> = reports.iter().map(phase_means).collect();

    let overall: Vec<(Phase, f64)> = Phase::ALL
        .iter()
        .enumerate()
        .filter_map(|(i, &p)| {
            let vals: Vec<f64> = per_report.iter().filter_map(|m| m[i]).collect();
            (!vals.is_empty()).then(|| (p, vals.iter().sum::<f64>() / vals.len() as f64))
        })
        .collect();
    if overall.len() >= 2 {
        let (worst, worst_mean) = overall.iter().copied().fold(overall[0], |a, b| if b.1 < a.1 { b } else { a });
        let best_mean = overall.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        if best_mean - worst_mean > TIE_TOLERANCE {
            let idx = Phase::ALL.iter().position(|&p| p == worst).expect("phase listed");
            let mut evidence: Vec<Evidence> = reports
                .iter()
                .zip(&per_report)
                .filter(|(_, m)| lowest(m) == Some(worst))
                .map(|(r, m)| phase_evidence(r, worst, m[idx].expect("lowest phase has a mean")))
                .collect();
            if evidence.is_empty() {
                evidence = reports
                    .iter()
                    .zip(&per_report)
                    .filter_map(|(r, m)| m[idx].map(|v| phase_evidence(r, worst, v)))
                    .collect();
            }
            out.push(Recommendation {
                kind: RecommendationKind::LowEngagementPhase,
                phase: worst,
                state: None,
                text: format!(
                    "Attentiveness is lowest in the {} of lectures ({:.0}% on average, {} of {} lectures); \
                     consider adding interaction or a change of pace there.",
                    worst.label(),
                    worst_mean * 100.0,
                    evidence.len(),
                    reports.len()
                ),
                score: best_mean - worst_mean,
                evidence,
            });
        }
    }

    for st in AffectiveState::ALL {
        for p in Phase::ALL {
            let evidence: Vec<Evidence> = reports
                .iter()
                .filter_map(|r| {
                    let n = r.series.len();
                    let (a, b) = p.bucket_range(n);
                    r.state_peaks
                        .iter()
                        .find(|pk| pk.state == st && pk.first_bucket < b && pk.first_bucket + pk.buckets > a)
                        .map(|pk| Evidence {
                            session_id: r.session.session_id.clone(),
                            phase: p,
                            start_ms: pk.start_ms,
                            end_ms: pk.end_ms,
                            value: pk.peak_level,
                        })
                })
                .collect();
            if evidence.len() >= 2 {
                out.push(Recommendation {
                    kind: RecommendationKind::RecurringStatePeak,
                    phase: p,
                    state: Some(st),
                    text: format!(
                        "{} is repeatedly elevated in the {} ({} lectures); review the material presented there.",
                        st.title(),
                        p.label(),
                        evidence.len()
                    ),
                    score: evidence.len() as f64 / reports.len() as f64,
                    evidence,
                });
            }
        }
    }
    debug_assert!(out.iter().all(|r| !r.evidence.is_empty()));
    out
}
