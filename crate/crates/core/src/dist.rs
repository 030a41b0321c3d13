//! Simulated `K`-worker fabric with All_Gather, All_Reduce (mean) and
//! Reduce_Scatter (mean) collectives and an exact element-count ledger.
//!
//! A collective call takes every worker's payload at once; the call itself
//! is the rendezvous. Reductions sum in ascending worker order and then
//! divide by `K`, so results do not depend on how workers were scheduled.
//!
//! Wire cost model (scalar elements, 8 bytes each):
//!
//! | primitive      | elements on the wire |
//! |----------------|----------------------|
//! | all_gather     | `K·(K−1)·p`          |
//! | all_reduce     | `2·(K−1)·p`          |
//! | reduce_scatter | `K·(K−1)·s`          |

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BYTES_PER_ELEMENT: u64 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    AllGather,
    AllReduce,
    ReduceScatter,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::AllGather => "all_gather",
            Primitive::AllReduce => "all_reduce",
            Primitive::ReduceScatter => "reduce_scatter",
        }
    }
}

/// Caller-supplied tag saying what a collective was for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    FeatureGather,
    UGather,
    TauGather,
    GradReduce,
    TauReduce,
    RsGrad,
    Other,
}

impl Phase {
    pub const ALL: [Phase; 7] = [
        Phase::FeatureGather,
        Phase::UGather,
        Phase::TauGather,
        Phase::GradReduce,
        Phase::TauReduce,
        Phase::RsGrad,
        Phase::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Phase::FeatureGather => "feature-gather",
            Phase::UGather => "u-gather",
            Phase::TauGather => "tau-gather",
            Phase::GradReduce => "grad-reduce",
            Phase::TauReduce => "tau-reduce",
            Phase::RsGrad => "rs-grad",
            Phase::Other => "other",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommRecord {
    pub phase: Phase,
    pub primitive: Primitive,
    pub k: usize,
    pub elements: u64,
    pub bytes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CommLedger {
    records: Vec<CommRecord>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub calls: u64,
    pub elements: u64,
    pub bytes: u64,
}

impl Totals {
    fn add(&mut self, r: &CommRecord) {
        self.calls += 1;
        self.elements += r.elements;
        self.bytes += r.bytes;
    }
}

/// Totals per primitive and per phase.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerReport {
    pub per_primitive: BTreeMap<Primitive, Totals>,
    pub per_phase: BTreeMap<Phase, Totals>,
    pub total: Totals,
}

impl LedgerReport {
    pub fn phase_elements(&self, phase: Phase) -> u64 {
        self.per_phase.get(&phase).map_or(0, |t| t.elements)
    }

    pub fn primitive_elements(&self, p: Primitive) -> u64 {
        self.per_primitive.get(&p).map_or(0, |t| t.elements)
    }
}

impl CommLedger {
    pub fn records(&self) -> &[CommRecord] {
        &self.records
    }

    pub fn push(&mut self, r: CommRecord) {
        self.records.push(r);
    }

    pub fn report(&self) -> LedgerReport {
        let mut rep = LedgerReport::default();
        for r in &self.records {
            rep.per_primitive.entry(r.primitive).or_default().add(r);
            rep.per_phase.entry(r.phase).or_default().add(r);
            rep.total.add(r);
        }
        rep
    }

    /// One line per collective: `phase,primitive,k,elements,bytes`.
    pub fn export(&self) -> String {
        let mut s = String::from("phase,primitive,k,elements,bytes\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                r.phase,
                r.primitive.name(),
                r.k,
                r.elements,
                r.bytes
            ));
        }
        s
    }

    pub fn clear(&mut self) {
        self.records.clear();
    }
}

#[derive(Debug, Clone)]
pub struct Fabric {
    k: usize,
    ledger: CommLedger,
}

impl Fabric {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("workers", "must be positive"));
        }
        Ok(Self {
            k,
            ledger: CommLedger::default(),
        })
    }

    pub fn workers(&self) -> usize {
        self.k
    }

    pub fn ledger(&self) -> &CommLedger {
        &self.ledger
    }

    pub fn ledger_mut(&mut self) -> &mut CommLedger {
        &mut self.ledger
    }

    pub fn ledger_report(&self) -> LedgerReport {
        self.ledger.report()
    }

    fn arrive<'a, P: AsRef<[f64]>>(&self, what: &str, payloads: &'a [P]) -> Result<Vec<&'a [f64]>> {
        if payloads.len() != self.k {
            return Err(Error::CollectiveShape(format!(
                "{what}: {} workers arrived, expected {}",
                payloads.len(),
                self.k
            )));
        }
        let views: Vec<&[f64]> = payloads.iter().map(|p| p.as_ref()).collect();
        let p = views[0].len();
        if let Some(w) = views.iter().position(|v| v.len() != p) {
            return Err(Error::CollectiveShape(format!(
                "{what}: worker {w} sent {} elements, worker 0 sent {p}",
                views[w].len()
            )));
        }
        Ok(views)
    }

    fn record(&mut self, phase: Phase, primitive: Primitive, elements: u64) {
        self.ledger.push(CommRecord {
            phase,
            primitive,
            k: self.k,
            elements,
            bytes: elements * BYTES_PER_ELEMENT,
        });
    }

    /// Concatenation of all payloads in worker order.
    pub fn all_gather<P: AsRef<[f64]>>(&mut self, phase: Phase, payloads: &[P]) -> Result<Vec<f64>> {
        let views = self.arrive("all_gather", payloads)?;
        let p = views[0].len() as u64;
        let k = self.k as u64;
        let out = views.concat();
        self.record(phase, Primitive::AllGather, k * (k - 1) * p);
        Ok(out)
    }

    /// Elementwise mean of all payloads.
    pub fn all_reduce_mean<P: AsRef<[f64]>>(&mut self, phase: Phase, payloads: &[P]) -> Result<Vec<f64>> {
        let views = self.arrive("all_reduce", payloads)?;
        let p = views[0].len();
        let k = self.k as u64;
        let out = mean_in_order(&views, 0..p);
        self.record(phase, Primitive::AllReduce, 2 * (k - 1) * p as u64);
        Ok(out)
    }

    /// Each payload holds `K` shards of `s` elements; worker `k` receives the
    /// elementwise mean of every worker's shard `k`.
    pub fn reduce_scatter_mean<P: AsRef<[f64]>>(
        &mut self,
        phase: Phase,
        payloads: &[P],
    ) -> Result<Vec<Vec<f64>>> {
        let views = self.arrive("reduce_scatter", payloads)?;
        let total = views[0].len();
        if total % self.k != 0 {
            return Err(Error::CollectiveShape(format!(
                "reduce_scatter: {total} elements do not split into {} shards",
                self.k
            )));
        }
        let s = total / self.k;
        let out = (0..self.k).map(|w| mean_in_order(&views, w * s..(w + 1) * s)).collect();
        let k = self.k as u64;
        self.record(phase, Primitive::ReduceScatter, k * (k - 1) * s as u64);
        Ok(out)
    }
}

fn mean_in_order(views: &[&[f64]], range: std::ops::Range<usize>) -> Vec<f64> {
    let k = views.len() as f64;
    range
        .map(|e| views.iter().fold(0.0, |acc, v| acc + v[e]) / k)
        .collect()
}
