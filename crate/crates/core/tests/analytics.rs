use attend_core::affectmodel::{probs_to_intensities, probs_to_levels, AffectiveLevels, AffectiveState, AffectiveStateProbs};
use attend_core::analytics::{
    build_report, read_event_log, recommend, replay, report_json, to_event_line, window_stats_of, write_event_log, AlertKind,
    AnalyticsConfig, LectureReport, Phase, PredictionEvent, RecommendationKind, SessionEvent, SessionMeta, SessionState,
    DISENGAGED_MESSAGE,
};
use attend_core::attnindex::IndexConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn levels(l: [u8; 4]) -> AffectiveStateProbs {
    AffectiveStateProbs::one_hot(AffectiveLevels::new(l).unwrap())
}

/// Prediction with a chosen normalized index, independent of its probabilities.
fn with_norm(session: &str, learner: &str, ts: u64, norm: f64) -> PredictionEvent {
    let probs = levels([0, 1, 0, 0]);
    PredictionEvent {
        session_id: session.into(),
        learner_id: learner.into(),
        timestamp_ms: ts,
        probs,
        intensities: probs_to_intensities(&probs),
        raw_index: 0.0,
        norm_index: norm,
    }
}

#[test]
fn oscillating_index_alerts_once() {
    let mut s = SessionState::new("s", AnalyticsConfig::default()).unwrap();
    for i in 0..600u64 {
        let norm = if i % 2 == 0 { 0.39 } else { 0.41 };
        s.ingest(with_norm("s", "a", i * 500, norm)).unwrap();
    }
    assert_eq!(s.alerts.iter().filter(|a| a.kind == AlertKind::ClassDisengaged).count(), 1);
    let alert = s.alerts.iter().find(|a| a.kind == AlertKind::ClassDisengaged).unwrap();
    assert_eq!(alert.message, DISENGAGED_MESSAGE);
    assert_eq!(alert.timestamp_ms, 0);
}

#[test]
fn rearms_only_above_the_band_and_after_cooldown() {
    let mut s = SessionState::new("s", AnalyticsConfig::default()).unwrap();
    let mut t = 0;
    let mut run = |s: &mut SessionState, norm: f64, secs: u64| {
        for _ in 0..secs {
            s.ingest(with_norm("s", "a", t, norm)).unwrap();
            t += 1000;
        }
    };
    let fired = |s: &SessionState| -> Vec<u64> {
        s.alerts.iter().filter(|a| a.kind == AlertKind::ClassDisengaged).map(|a| a.timestamp_ms).collect()
    };
    run(&mut s, 0.2, 5);
    run(&mut s, 0.9, 35);
    // the trailing mean drops below 0.40 at 58 s, inside the 60 s cooldown
    run(&mut s, 0.1, 40);
    assert_eq!(fired(&s), vec![0, 60_000]);
    // still low but disarmed
    run(&mut s, 0.1, 30);
    assert_eq!(fired(&s).len(), 2);
    run(&mut s, 0.9, 40);
    run(&mut s, 0.1, 40);
    assert_eq!(fired(&s), vec![0, 60_000, 168_000]);
}

#[test]
fn state_elevation_alert_has_hysteresis() {
    let mut s = SessionState::new("s", AnalyticsConfig::default()).unwrap();
    let idx = IndexConfig::default();
    let mut t = 0;
    for l in [[0, 1, 3, 0], [0, 1, 3, 0], [0, 1, 0, 0], [0, 1, 3, 0]] {
        for _ in 0..40 {
            s.ingest(PredictionEvent::from_probs("s", "a", t, levels(l), &idx)).unwrap();
            t += 1000;
        }
    }
    let confusion: Vec<_> = s
        .alerts
        .iter()
        .filter(|a| a.kind == AlertKind::StateElevated && a.context.state == Some(AffectiveState::Confusion))
        .collect();
    assert_eq!(confusion.len(), 2, "{:?}", s.alerts);
}

fn random_event(rng: &mut ChaCha8Rng, session: &str, learner: &str, ts: u64) -> SessionEvent {
    let idx = IndexConfig::default();
    match rng.random_range(0..10) {
        0 => SessionEvent::InvalidFrame {
            session_id: session.into(),
            learner_id: learner.into(),
            timestamp_ms: ts,
        },
        _ => {
            let rows: [[f64; 4]; 4] = std::array::from_fn(|_| {
                let raw: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..1.0));
                let s: f64 = raw.iter().sum();
                raw.map(|v| v / s)
            });
            let probs = AffectiveStateProbs::with_tolerance(rows, 1e-9).unwrap();
            SessionEvent::Prediction(PredictionEvent::from_probs(session, learner, ts, probs, &idx))
        }
    }
}

/// A few minutes of four learners, with a late arrival, a leave and a config change.
fn scripted_session(seed: u64) -> Vec<SessionEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for l in ["l1", "l2", "l3"] {
        out.push(SessionEvent::LearnerJoined {
            session_id: "lec".into(),
            learner_id: l.into(),
            timestamp_ms: 0,
        });
    }
    for step in 0..360u64 {
        let ts = step * 500;
        for l in ["l1", "l2", "l3", "l4"] {
            if l == "l4" && step < 40 || l == "l2" && (150..260).contains(&step) {
                continue;
            }
            let jitter = rng.random_range(0..400);
            out.push(random_event(&mut rng, "lec", l, ts + jitter));
        }
        if step == 200 {
            // arrives after a newer frame from the same learner
            out.push(random_event(&mut rng, "lec", "l1", ts.saturating_sub(3000)));
            let config = AnalyticsConfig {
                disengaged_threshold: 0.5,
                ..AnalyticsConfig::default()
            };
            out.push(SessionEvent::ConfigChanged {
                session_id: "lec".into(),
                timestamp_ms: ts,
                config,
            });
        }
    }
    out
}

fn meta() -> SessionMeta {
    SessionMeta {
        session_id: "lec".into(),
        title: "Replay fixture".into(),
        created_at_ms: 1_700_000_000_000,
    }
}

#[test]
fn replay_reproduces_live_session_byte_for_byte() {
    let events = scripted_session(17);
    let mut live = SessionState::new("lec", AnalyticsConfig::default()).unwrap();
    let mut live_alerts = Vec::new();
    for e in &events {
        live_alerts.extend(live.apply(e).unwrap().alerts);
    }
    assert!(live.dropped_events >= 1);
    assert!(live_alerts.iter().any(|a| a.kind == AlertKind::LearnerAbsent));
    let live_json = report_json(&build_report(&meta(), &live));

    let mut buf = Vec::new();
    write_event_log(&mut buf, &events).unwrap();
    let parsed = read_event_log(buf.as_slice()).unwrap();
    assert_eq!(parsed, events);

    let a = replay(&meta(), AnalyticsConfig::default(), &parsed).unwrap();
    let b = replay(&meta(), AnalyticsConfig::default(), &parsed).unwrap();
    assert_eq!(report_json(&a.report), live_json);
    assert_eq!(report_json(&a.report), report_json(&b.report));
    assert_eq!(a.alerts, live_alerts);
    assert_eq!(a.alerts, b.alerts);
}

#[test]
fn log_lines_are_stable() {
    for e in scripted_session(3).iter().take(200) {
        let line = to_event_line(e);
        assert!(!line.contains('\n'));
        let back: SessionEvent = serde_json::from_str(&line).unwrap();
        assert_eq!(to_event_line(&back), line);
    }
    let bad = "{\"kind\":\"prediction\"}\n";
    assert!(read_event_log(format!("\n{bad}").as_bytes()).is_err());
}

#[test]
fn window_stats_match_direct_oracle() {
    let events = scripted_session(5);
    let preds: Vec<PredictionEvent> = events
        .iter()
        .filter_map(|e| match e {
            SessionEvent::Prediction(p) => Some(p.clone()),
            _ => None,
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..100 {
        let a = rng.random_range(0..180_000);
        let b = a + rng.random_range(1..60_000);
        let inside: Vec<&PredictionEvent> = preds.iter().filter(|e| e.timestamp_ms >= a && e.timestamp_ms < b).collect();
        let w = window_stats_of(&preds, a, b);
        assert_eq!(w.event_count, inside.len());
        if inside.is_empty() {
            assert_eq!(w.mean_norm_index, None);
            continue;
        }
        let n = inside.len() as f64;
        let norm = inside.iter().map(|e| e.norm_index).sum::<f64>() / n;
        assert!((w.mean_norm_index.unwrap() - norm).abs() < 1e-12);
        for st in 0..4 {
            let m = inside.iter().map(|e| e.intensities.0[st]).sum::<f64>() / n;
            assert!((w.mean_intensity.unwrap()[st] - m).abs() < 1e-12);
            let mut hist = [0usize; 4];
            for e in &inside {
                hist[probs_to_levels(&e.probs).as_array()[st] as usize] += 1;
            }
            assert_eq!(w.level_histogram[st], hist);
        }
        let mut ids: Vec<&str> = inside.iter().map(|e| e.learner_id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(w.active_learner_count, ids.len());
    }
}

/// One event per second for `secs` seconds, from `f(second)`.
fn lecture(id: &str, secs: u64, f: impl Fn(u64) -> PredictionEvent) -> LectureReport {
    let mut s = SessionState::new(id, AnalyticsConfig::default()).unwrap();
    for t in 0..secs {
        s.ingest(f(t)).unwrap();
    }
    let meta = SessionMeta {
        session_id: id.into(),
        title: id.into(),
        created_at_ms: 0,
    };
    build_report(&meta, &s)
}

#[test]
fn low_closing_third_is_recommended() {
    let reports: Vec<LectureReport> = ["a", "b"]
        .iter()
        .map(|id| lecture(id, 90, |t| with_norm(id, "x", t * 1000, if t >= 60 { 0.2 } else { 0.8 })))
        .collect();
    assert_eq!(reports[0].low_segments.len(), 1);
    assert_eq!(reports[0].low_segments[0].start_ms, 60_000);
    assert_eq!(reports[0].low_segments[0].percent, 20.0);
    let recs = recommend(&reports);
    assert_eq!(recs.len(), 1);
    assert_eq!(recs[0].kind, RecommendationKind::LowEngagementPhase);
    assert_eq!(recs[0].phase, Phase::Closing);
    assert_eq!(recs[0].evidence.len(), 2);
    assert!(recs[0].evidence.iter().all(|e| e.start_ms == 60_000 && e.end_ms == 90_000));
}

#[test]
fn recurring_confusion_peak_cites_every_lecture() {
    let idx = IndexConfig::default();
    let reports: Vec<LectureReport> = ["m1", "m2", "m3"]
        .iter()
        .map(|id| {
            lecture(id, 90, |t| {
                let c = if (30..60).contains(&t) { 3 } else { 0 };
                PredictionEvent::from_probs(*id, "x", t * 1000, levels([0, 1, c, 0]), &idx)
            })
        })
        .collect();
    assert_eq!(reports[1].state_peaks.len(), 1);
    assert_eq!(reports[1].state_peaks[0].peak_percent, 100.0);
    let peaks: Vec<_> = recommend(&reports)
        .into_iter()
        .filter(|r| r.kind == RecommendationKind::RecurringStatePeak)
        .collect();
    assert_eq!(peaks.len(), 1);
    assert_eq!(peaks[0].state, Some(AffectiveState::Confusion));
    assert_eq!(peaks[0].phase, Phase::Middle);
    assert_eq!(peaks[0].evidence.len(), 3);
}

#[test]
fn uniform_single_lecture_has_no_recommendations() {
    let report = lecture("u", 90, |t| with_norm("u", "x", t * 1000, 0.7));
    assert!(report.low_segments.is_empty() && report.state_peaks.is_empty());
    assert!(recommend(&[report]).is_empty());
    assert!(recommend(&[]).is_empty());
}
