//! Wall-clock timing of pipeline stages.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Encoder,
    Fusion,
    Text,
    Diffusion,
    Compensation,
    Total,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Encoder,
        Stage::Fusion,
        Stage::Text,
        Stage::Diffusion,
        Stage::Compensation,
        Stage::Total,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Encoder => "encoder",
            Stage::Fusion => "fusion",
            Stage::Text => "text",
            Stage::Diffusion => "diffusion",
            Stage::Compensation => "compensation",
            Stage::Total => "total",
        }
    }
}

/// Per-image stage durations. A stage timed twice accumulates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimes(pub BTreeMap<Stage, f64>);

impl StageTimes {
    pub fn add(&mut self, stage: Stage, d: Duration) {
        *self.0.entry(stage).or_default() += d.as_secs_f64() * 1e3;
    }

    pub fn millis(&self, stage: Stage) -> Option<f64> {
        self.0.get(&stage).copied()
    }
}

/// Times closures against a monotonic clock; the `Total` stage spans from
/// construction to [`StageTimer::finish`].
#[derive(Debug)]
pub struct StageTimer {
    start: Instant,
    times: StageTimes,
}

impl Default for StageTimer {
    fn default() -> Self {
        Self::new()
    }
}

impl StageTimer {
    pub fn new() -> Self {
        Self {
            start: Instant::now(),
            times: StageTimes::default(),
        }
    }

    pub fn time<T>(&mut self, stage: Stage, f: impl FnOnce() -> T) -> T {
        let t0 = Instant::now();
        let out = f();
        self.times.add(stage, t0.elapsed());
        out
    }

    pub fn record(&mut self, stage: Stage, d: Duration) {
        self.times.add(stage, d);
    }

    pub fn finish(mut self) -> StageTimes {
        let total = self.start.elapsed();
        self.times.0.insert(Stage::Total, total.as_secs_f64() * 1e3);
        self.times
    }
}

/// Median milliseconds per stage over all images that recorded it.
pub fn median_times(runs: &[StageTimes]) -> BTreeMap<Stage, f64> {
    let mut out = BTreeMap::new();
    for stage in Stage::ALL {
        let mut v: Vec<f64> = runs.iter().filter_map(|r| r.millis(stage)).collect();
        if v.is_empty() {
            continue;
        }
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let m = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
        out.insert(stage, m);
    }
    out
}
