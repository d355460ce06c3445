use sas_core::monitor::{AnomalyDetail, AnomalyKind, Event, EventKind, Monitor, MonitorConfig};

fn connect(id: u64, time: u64, dev: &str) -> Event {
    Event::new(id, time, EventKind::DeviceConnected, dev)
}

fn latency(id: u64, time: u64, dev: &str, ms: f64) -> Event {
    Event::new(id, time, EventKind::LatencySample, dev).with_attr("latency_ms", ms)
}

fn frequent(events: &[Event]) -> usize {
    let mut m = Monitor::new(MonitorConfig::default(), ["phone".to_string()]);
    events
        .iter()
        .flat_map(|e| m.ingest(e).unwrap())
        .filter(|a| a.kind == AnomalyKind::FrequentNewDevices)
        .count()
}

#[test]
fn frequency_boundary_two_then_three() {
    let two = [connect(1, 0, "d1"), connect(2, 60, "d2")];
    assert_eq!(frequent(&two), 0);
    let three = [connect(1, 0, "d1"), connect(2, 60, "d2"), connect(3, 120, "d3")];
    assert_eq!(frequent(&three), 1);
}

#[test]
fn frequency_window_is_a_day() {
    let day = 24 * 60;
    let spread = [connect(1, 0, "d1"), connect(2, 60, "d2"), connect(3, day, "d3")];
    assert_eq!(frequent(&spread), 0);
    let inside = [connect(1, 0, "d1"), connect(2, 60, "d2"), connect(3, day - 1, "d3")];
    assert_eq!(frequent(&inside), 1);
}

#[test]
fn known_and_repeat_devices_do_not_count() {
    let events = [
        connect(1, 0, "phone"),
        connect(2, 10, "d1"),
        connect(3, 20, "d1"),
        connect(4, 30, "d2"),
    ];
    assert_eq!(frequent(&events), 0);
}

#[test]
fn no_duplicate_anomalies_on_replayed_events() {
    let mut m = Monitor::new(MonitorConfig::default(), []);
    let e = connect(1, 0, "d1");
    assert_eq!(m.ingest(&e).unwrap().len(), 1);
    assert!(m.ingest(&e).unwrap().is_empty());
}

#[test]
fn latency_spike_needs_both_dispersion_and_floor() {
    let mut m = Monitor::new(MonitorConfig::default(), ["speaker".to_string()]);
    for i in 0..10 {
        let ms = if i % 2 == 0 { 10.0 } else { 14.0 };
        assert!(m.ingest(&latency(i, i, "speaker", ms)).unwrap().is_empty());
    }
    // mean 12, dispersion 2: the k-sigma threshold is 20 but the floor is 25
    assert!(m.ingest(&latency(10, 10, "speaker", 24.0)).unwrap().is_empty());
    let out = m.ingest(&latency(11, 11, "speaker", 90.0)).unwrap();
    assert_eq!(out.len(), 1);
    let AnomalyDetail::Latency { threshold_ms, baseline, .. } = &out[0].detail else { panic!() };
    let seen = [10.0, 14.0, 10.0, 14.0, 10.0, 14.0, 10.0, 14.0, 10.0, 14.0, 24.0];
    let n = seen.len() as f64;
    let mean = seen.iter().sum::<f64>() / n;
    let sd = (seen.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    assert_eq!(baseline.count, 11);
    assert!((baseline.mean - mean).abs() < 1e-9);
    assert!((threshold_ms - (mean + 4.0 * sd)).abs() < 1e-9);
}

#[test]
fn replaying_an_event_log_is_deterministic() {
    let log: Vec<Event> = (0..6).map(|i| connect(i, i * 30, &format!("d{i}"))).collect();
    let run = || {
        let mut m = Monitor::new(MonitorConfig::default(), []);
        log.iter().flat_map(|e| m.ingest(e).unwrap()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}
