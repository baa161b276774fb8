//! Delay-exact message bus: one FIFO per (source, recipient) pair, delivering
//! each payload exactly `d(source→recipient)` steps after its stamp.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::sync::Arc;

use nalgebra::DVector;

use crate::controller::ColumnSet;
use crate::error::{Error, Result};
use crate::topology::DelayTable;

/// Everything subsystem `source` publishes at time `stamp`.
#[derive(Debug, Clone)]
pub struct Payload {
    pub source: usize,
    pub stamp: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub what: DVector<f64>,
    pub theta: Arc<Vec<f64>>,
    pub columns: ColumnSet,
}

#[derive(Debug, Clone)]
pub struct MessageBus {
    delay: DelayTable,
    recipients: Vec<Vec<usize>>,
    channels: BTreeMap<(usize, usize), VecDeque<(usize, Arc<Payload>)>>,
}

impl MessageBus {
    /// `recipients[j]` lists who needs `j`'s payloads; unreachable ones are dropped.
    pub fn new(delay: DelayTable, recipients: Vec<BTreeSet<usize>>) -> Self {
        let recipients = recipients
            .into_iter()
            .enumerate()
            .map(|(j, rs)| rs.into_iter().filter(|&i| i != j && delay.delay(j, i).is_some()).collect())
            .collect();
        Self { delay, recipients, channels: BTreeMap::new() }
    }

    pub fn post(&mut self, payload: Arc<Payload>) {
        let j = payload.source;
        for &i in &self.recipients[j] {
            let at = payload.stamp + self.delay.delay(j, i).expect("recipient is reachable");
            self.channels.entry((j, i)).or_default().push_back((at, payload.clone()));
        }
    }

    /// Payloads due at `now`, ordered by (source, recipient). A payload left
    /// behind past its due time is a bus bug.
    pub fn deliver(&mut self, now: usize) -> Result<Vec<(usize, Arc<Payload>)>> {
        let mut out = Vec::new();
        for (&(j, i), q) in self.channels.iter_mut() {
            while let Some((at, _)) = q.front() {
                if *at > now {
                    break;
                }
                if *at < now {
                    return Err(Error::MissingData(format!("payload {j}→{i} due at {at} still queued at {now}")));
                }
                let (_, p) = q.pop_front().unwrap();
                out.push((i, p));
            }
        }
        Ok(out)
    }

    pub fn in_flight(&self) -> usize {
        self.channels.values().map(|q| q.len()).sum()
    }
}
