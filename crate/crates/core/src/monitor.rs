//! Event ingestion and anomaly detection: unseen devices, bursts of new
//! devices and latency spikes against a per-device baseline.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MonitorError {
    #[error("event {id} for {subject} at {time} precedes last seen time {last}")]
    OutOfOrder {
        id: u64,
        subject: String,
        time: u64,
        last: u64,
    },
    #[error("event {id}: {reason}")]
    InvalidEvent { id: u64, reason: String },
    #[error("{device} has {have} latency samples, baseline needs {need}")]
    InsufficientSamples { device: String, have: usize, need: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    DeviceConnected,
    DeviceDisconnected,
    Command,
    DoorState,
    LatencySample,
}

/// A simulator observation; `time` is in simulated minutes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub id: u64,
    pub time: u64,
    pub kind: EventKind,
    pub subject: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub attrs: BTreeMap<String, Value>,
}

impl Event {
    pub fn new(id: u64, time: u64, kind: EventKind, subject: impl Into<String>) -> Self {
        Event {
            id,
            time,
            kind,
            subject: subject.into(),
            attrs: BTreeMap::new(),
        }
    }

    pub fn with_attr(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.attrs.insert(key.to_string(), value.into());
        self
    }

    pub fn latency_ms(&self) -> Option<f64> {
        self.attrs.get("latency_ms").and_then(Value::as_f64)
    }

    pub fn attr_str(&self, key: &str) -> Option<&str> {
        self.attrs.get(key).and_then(Value::as_str)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    NewDevice,
    FrequentNewDevices,
    LatencySpike,
}

impl fmt::Display for AnomalyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AnomalyKind::NewDevice => "new_device",
            AnomalyKind::FrequentNewDevices => "frequent_new_devices",
            AnomalyKind::LatencySpike => "latency_spike",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineStats {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub dispersion: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AnomalyDetail {
    NewDevice {
        device: String,
        attrs: BTreeMap<String, Value>,
    },
    Frequency {
        window_minutes: u64,
        count: usize,
        threshold: usize,
        devices: Vec<String>,
    },
    Latency {
        device: String,
        latency_ms: f64,
        threshold_ms: f64,
        baseline: BaselineStats,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub id: String,
    pub kind: AnomalyKind,
    pub tags: Vec<String>,
    pub evidence: Vec<u64>,
    pub detected_at: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub needs_human_fact: Option<String>,
    pub detail: AnomalyDetail,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MonitorConfig {
    /// Distinct new devices within the window that count as frequent.
    pub theta: usize,
    pub window_minutes: u64,
    /// Dispersions above the mean for a latency spike.
    pub k: f64,
    pub floor_ms: f64,
    pub n_min: usize,
    /// Latency samples kept per device.
    pub latency_window: usize,
    /// Tag added to every connection anomaly.
    pub network: String,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            theta: 3,
            window_minutes: 24 * 60,
            k: 4.0,
            floor_ms: 25.0,
            n_min: 10,
            latency_window: 100,
            network: "wifi".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Monitor {
    config: MonitorConfig,
    known: BTreeSet<String>,
    last_seen: BTreeMap<String, u64>,
    /// First-seen arrivals inside the frequency window: (time, device, event).
    arrivals: VecDeque<(u64, String, u64)>,
    latency: BTreeMap<String, VecDeque<f64>>,
    emitted: BTreeSet<String>,
    next_id: u64,
}

fn stats(samples: &VecDeque<f64>) -> BaselineStats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    BaselineStats {
        count: samples.len(),
        mean,
        dispersion: var.sqrt(),
    }
}

impl Monitor {
    /// `known` devices (the configured roster) never count as new.
    pub fn new(config: MonitorConfig, known: impl IntoIterator<Item = String>) -> Self {
        Monitor {
            config,
            known: known.into_iter().collect(),
            last_seen: BTreeMap::new(),
            arrivals: VecDeque::new(),
            latency: BTreeMap::new(),
            emitted: BTreeSet::new(),
            next_id: 1,
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.config
    }

    pub fn is_known(&self, device: &str) -> bool {
        self.known.contains(device)
    }

    pub fn ingest(&mut self, event: &Event) -> Result<Vec<Anomaly>, MonitorError> {
        if let Some(&last) = self.last_seen.get(&event.subject) {
            if event.time < last {
                return Err(MonitorError::OutOfOrder {
                    id: event.id,
                    subject: event.subject.clone(),
                    time: event.time,
                    last,
                });
            }
        }
        if event.kind == EventKind::LatencySample && !event.latency_ms().is_some_and(|l| l > 0.0) {
            return Err(MonitorError::InvalidEvent {
                id: event.id,
                reason: "latency_sample needs a positive latency_ms".into(),
            });
        }
        self.last_seen.insert(event.subject.clone(), event.time);
        let mut out = Vec::new();
        match event.kind {
            EventKind::DeviceConnected => {
                if self.known.insert(event.subject.clone()) {
                    self.new_device(event, &mut out);
                }
            }
            EventKind::LatencySample => {
                if let Some(a) = self.detect_latency_spike(event) {
                    out.push(a);
                }
            }
            EventKind::DeviceDisconnected | EventKind::Command | EventKind::DoorState => {}
        }
        Ok(out)
    }

    fn emit(&mut self, kind: AnomalyKind, tags: Vec<String>, evidence: Vec<u64>, at: u64, need: Option<&str>, detail: AnomalyDetail, out: &mut Vec<Anomaly>) {
        let key = format!("{kind}|{}|{:?}", tags.join(","), evidence);
        if !self.emitted.insert(key) {
            return;
        }
        let id = format!("an-{}", self.next_id);
        self.next_id += 1;
        out.push(Anomaly {
            id,
            kind,
            tags,
            evidence,
            detected_at: at,
            needs_human_fact: need.map(str::to_string),
            detail,
        });
    }

    fn new_device(&mut self, event: &Event, out: &mut Vec<Anomaly>) {
        let net = self.config.network.clone();
        self.emit(
            AnomalyKind::NewDevice,
            vec![event.subject.clone(), net.clone()],
            vec![event.id],
            event.time,
            Some("device_trust"),
            AnomalyDetail::NewDevice {
                device: event.subject.clone(),
                attrs: event.attrs.clone(),
            },
            out,
        );
        self.arrivals.push_back((event.time, event.subject.clone(), event.id));
        let w = self.config.window_minutes;
        while self.arrivals.front().is_some_and(|(t, _, _)| event.time - t >= w) {
            self.arrivals.pop_front();
        }
        if self.arrivals.len() >= self.config.theta {
            let evidence = self.arrivals.iter().map(|(_, _, id)| *id).collect();
            let devices = self.arrivals.iter().map(|(_, d, _)| d.clone()).collect();
            let count = self.arrivals.len();
            let theta = self.config.theta;
            self.emit(
                AnomalyKind::FrequentNewDevices,
                vec![net],
                evidence,
                event.time,
                None,
                AnomalyDetail::Frequency {
                    window_minutes: w,
                    count,
                    threshold: theta,
                    devices,
                },
                out,
            );
        }
    }

    pub fn latency_baseline(&self, device: &str) -> Result<BaselineStats, MonitorError> {
        let have = self.latency.get(device).map_or(0, VecDeque::len);
        if have < self.config.n_min {
            return Err(MonitorError::InsufficientSamples {
                device: device.to_string(),
                have,
                need: self.config.n_min,
            });
        }
        Ok(stats(&self.latency[device]))
    }

    /// Checks a sample against the baseline, then records it.
    pub fn detect_latency_spike(&mut self, sample: &Event) -> Option<Anomaly> {
        let latency = sample.latency_ms()?;
        let device = sample.subject.clone();
        let mut out = Vec::new();
        if let Ok(baseline) = self.latency_baseline(&device) {
            let threshold = baseline.mean + self.config.k * baseline.dispersion;
            if latency > threshold && latency >= self.config.floor_ms {
                self.emit(
                    AnomalyKind::LatencySpike,
                    vec![device.clone()],
                    vec![sample.id],
                    sample.time,
                    None,
                    AnomalyDetail::Latency {
                        device: device.clone(),
                        latency_ms: latency,
                        threshold_ms: threshold,
                        baseline,
                    },
                    &mut out,
                );
            }
        }
        let window = self.config.latency_window;
        let samples = self.latency.entry(device).or_default();
        samples.push_back(latency);
        while samples.len() > window {
            samples.pop_front();
        }
        out.pop()
    }

    pub fn snapshot(&self) -> String {
        serde_json::to_string(self).expect("monitor state serializes")
    }

    pub fn restore(snapshot: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(snapshot)
    }
}
