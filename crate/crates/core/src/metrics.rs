//! Per-slot, per-agent run records, derived series, and the metrics CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact header of the metrics CSV.
pub const CSV_HEADER: &str = "step,agent,power_index,freq_index,reward,success,sinr_db";

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
    #[error("metrics CSV is empty")]
    Empty,
    #[error("window must be >= 1")]
    Window,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub agent: usize,
    pub power_index: usize,
    pub freq_index: usize,
    pub reward: f64,
    pub success: bool,
    pub sinr_db: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<StepRecord>,
    pub aggregation_barriers: u64,
    /// Every training loss, in the order the updates ran.
    pub losses: Vec<f64>,
}

/// Network-level success fraction of one slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotSuccess {
    pub step: u64,
    pub fraction: f64,
}

/// One slot as an exact ratio.
#[derive(Clone, Copy)]
struct SlotCount {
    step: u64,
    successes: u64,
    agents: u64,
}

fn slot_counts(records: &[StepRecord]) -> Vec<SlotCount> {
    let mut out: Vec<SlotCount> = Vec::new();
    let mut i = 0;
    while i < records.len() {
        let step = records[i].step;
        let mut j = i;
        let mut ok = 0;
        while j < records.len() && records[j].step == step {
            ok += records[j].success as u64;
            j += 1;
        }
        out.push(SlotCount {
            step,
            successes: ok,
            agents: (j - i) as u64,
        });
        i = j;
    }
    out
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Means of per-slot fractions are sums of `successes * (lcm / agents)`
/// over `lcm * count`, so every reported probability is a single rounding
/// of an exact ratio and thresholds compare exactly.
fn common_denominator(slots: &[SlotCount]) -> u64 {
    slots.iter().fold(1, |l, s| l / gcd(l, s.agents) * s.agents)
}

fn scaled(slots: &[SlotCount], lcm: u64) -> Vec<u64> {
    slots
        .iter()
        .map(|s| s.successes * (lcm / s.agents))
        .collect()
}

/// Trailing means over `window` slots, defined from the `window`-th slot on.
fn trailing_means(slots: &[SlotCount], window: usize) -> Vec<SlotSuccess> {
    if window == 0 || slots.len() < window {
        return Vec::new();
    }
    let lcm = common_denominator(slots);
    let num = scaled(slots, lcm);
    let den = (lcm * window as u64) as f64;
    let mut sum: u64 = num[..window].iter().sum();
    let mut out = vec![SlotSuccess {
        step: slots[window - 1].step,
        fraction: sum as f64 / den,
    }];
    for i in window..slots.len() {
        sum = sum + num[i] - num[i - window];
        out.push(SlotSuccess {
            step: slots[i].step,
            fraction: sum as f64 / den,
        });
    }
    out
}

impl RunMetrics {
    pub fn extend(&mut self, other: RunMetrics) {
        self.records.extend(other.records);
        self.aggregation_barriers += other.aggregation_barriers;
        self.losses.extend(other.losses);
    }

    pub fn n_steps(&self) -> usize {
        slot_counts(&self.records).len()
    }

    pub fn slot_successes(&self) -> Vec<SlotSuccess> {
        slot_counts(&self.records)
            .iter()
            .map(|s| SlotSuccess {
                step: s.step,
                fraction: s.successes as f64 / s.agents as f64,
            })
            .collect()
    }

    /// Windowed network success probability, one entry per slot once
    /// `window` slots have elapsed.
    pub fn windowed_success(&self, window: usize) -> Vec<SlotSuccess> {
        trailing_means(&slot_counts(&self.records), window)
    }

    pub fn final_windowed_success(&self, window: usize) -> Option<f64> {
        self.windowed_success(window).last().map(|s| s.fraction)
    }

    /// Number of slots elapsed when the windowed success first reaches `threshold`.
    pub fn steps_to_reach(&self, threshold: f64, window: usize) -> Option<u64> {
        self.windowed_success(window)
            .iter()
            .position(|s| s.fraction >= threshold)
            .map(|i| (i + window) as u64)
    }

    /// Mean network success over slots with `lo <= step < hi`.
    pub fn mean_success_between(&self, lo: u64, hi: u64) -> Option<f64> {
        let slots: Vec<SlotCount> = slot_counts(&self.records)
            .into_iter()
            .filter(|s| s.step >= lo && s.step < hi)
            .collect();
        let lcm = common_denominator(&slots);
        let sum: u64 = scaled(&slots, lcm).iter().sum();
        (!slots.is_empty()).then(|| sum as f64 / (lcm * slots.len() as u64) as f64)
    }

    pub fn cumulative_reward(&self) -> f64 {
        crate::aggregation::exact_sum(self.records.iter().map(|r| r.reward))
    }

    /// Fraction of agent-slots on each frequency among the last `last_steps` slots.
    pub fn frequency_fractions(&self, n_f: usize, last_steps: usize) -> Vec<f64> {
        let first = self.first_step_of_tail(last_steps);
        let mut counts = vec![0usize; n_f];
        let mut total = 0usize;
        for r in self.records.iter().filter(|r| r.step >= first) {
            counts[r.freq_index] += 1;
            total += 1;
        }
        counts
            .iter()
            .map(|&c| {
                if total == 0 {
                    0.0
                } else {
                    c as f64 / total as f64
                }
            })
            .collect()
    }

    fn first_step_of_tail(&self, last_steps: usize) -> u64 {
        let slots = self.slot_successes();
        let start = slots.len().saturating_sub(last_steps);
        slots.get(start).map(|s| s.step).unwrap_or(u64::MAX)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::with_capacity(self.records.len() * 48 + CSV_HEADER.len() + 1);
        out.push_str(CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.step, r.agent, r.power_index, r.freq_index, r.reward, r.success as u8, r.sinr_db
            );
        }
        out
    }

    /// Parses a metrics CSV. Line numbers in errors are 1-based.
    pub fn from_csv(text: &str) -> Result<Self, MetricsError> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            None => return Err(MetricsError::Empty),
            Some((_, h)) if h.trim_end_matches('\r') != CSV_HEADER => {
                return Err(MetricsError::Malformed {
                    line: 1,
                    reason: format!("unexpected header {h:?}"),
                })
            }
            _ => {}
        }
        let mut records = Vec::new();
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let bad = |reason: String| MetricsError::Malformed {
                line: line_no,
                reason,
            };
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 7 {
                return Err(bad(format!("expected 7 fields, found {}", fields.len())));
            }
            let int = |i: usize, name: &str| {
                fields[i]
                    .parse::<u64>()
                    .map_err(|e| bad(format!("{name}: {e}")))
            };
            let float = |i: usize, name: &str| {
                fields[i]
                    .parse::<f64>()
                    .map_err(|e| bad(format!("{name}: {e}")))
            };
            let success = match fields[5] {
                "1" => true,
                "0" => false,
                other => return Err(bad(format!("success must be 0 or 1, found {other:?}"))),
            };
            let reward = float(4, "reward")?;
            if !reward.is_finite() {
                return Err(bad("reward must be finite".into()));
            }
            records.push(StepRecord {
                step: int(0, "step")?,
                agent: int(1, "agent")? as usize,
                power_index: int(2, "power_index")? as usize,
                freq_index: int(3, "freq_index")? as usize,
                reward,
                success,
                sinr_db: float(6, "sinr_db")?,
            });
        }
        Ok(Self {
            records,
            ..Default::default()
        })
    }
}

/// Per-agent action-selection probabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub agent: usize,
    pub power: Vec<f64>,
    pub frequency: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub steps: usize,
    pub agents: usize,
    pub window: usize,
    /// Windowed network success probability at the last slot; `None` when
    /// fewer than `window` slots were recorded.
    pub final_success_probability: Option<f64>,
    pub overall_success_probability: f64,
    pub cumulative_reward: f64,
    /// Selection probabilities over the final `window` slots.
    pub selection: Vec<SelectionTable>,
}

/// Summary of a run: final windowed success, selection tables, cumulative reward.
pub fn summarize(metrics: &RunMetrics, window: usize) -> Result<Summary, MetricsError> {
    if window == 0 {
        return Err(MetricsError::Window);
    }
    if metrics.records.is_empty() {
        return Err(MetricsError::Empty);
    }
    let slots = metrics.slot_successes();
    let first = metrics.first_step_of_tail(window);
    let n_p = metrics
        .records
        .iter()
        .map(|r| r.power_index + 1)
        .max()
        .unwrap_or(1);
    let n_f = metrics
        .records
        .iter()
        .map(|r| r.freq_index + 1)
        .max()
        .unwrap_or(1);
    let mut per_agent: BTreeMap<usize, (Vec<usize>, Vec<usize>, usize)> = BTreeMap::new();
    for r in &metrics.records {
        let entry = per_agent
            .entry(r.agent)
            .or_insert_with(|| (vec![0; n_p], vec![0; n_f], 0));
        if r.step >= first {
            entry.0[r.power_index] += 1;
            entry.1[r.freq_index] += 1;
            entry.2 += 1;
        }
    }
    let selection = per_agent
        .into_iter()
        .map(|(agent, (p, f, n))| {
            let norm = |v: Vec<usize>| {
                v.into_iter()
                    .map(|c| if n == 0 { 0.0 } else { c as f64 / n as f64 })
                    .collect()
            };
            SelectionTable {
                agent,
                power: norm(p),
                frequency: norm(f),
            }
        })
        .collect::<Vec<_>>();
    let successes = metrics.records.iter().filter(|r| r.success).count();
    Ok(Summary {
        steps: slots.len(),
        agents: selection.len(),
        window,
        final_success_probability: metrics.final_windowed_success(window),
        overall_success_probability: successes as f64 / metrics.records.len() as f64,
        cumulative_reward: metrics.cumulative_reward(),
        selection,
    })
}
