//! Splitting the training set across edge servers.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::registry::{Entry, Registry};
use crate::rng::StreamRng;

pub trait Partitioner: Send + Sync {
    fn name(&self) -> &'static str;

    /// Disjoint, covering index sets, one per client, each nonempty and
    /// in ascending order.
    fn partition(&self, data: &Dataset, clients: usize, rng: &mut StreamRng) -> Result<Vec<Vec<usize>>>;
}

fn check(data: &Dataset, clients: usize) -> Result<()> {
    if clients == 0 {
        return Err(Error::invalid("need at least one client"));
    }
    if clients > data.len() {
        return Err(Error::invalid(format!("{clients} clients but only {} training samples", data.len())));
    }
    Ok(())
}

/// Shuffled split into near-equal shards (sizes differ by at most one).
pub struct IidPartitioner;

impl Partitioner for IidPartitioner {
    fn name(&self) -> &'static str {
        "iid"
    }

    fn partition(&self, data: &Dataset, clients: usize, rng: &mut StreamRng) -> Result<Vec<Vec<usize>>> {
        check(data, clients)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let (base, extra) = (data.len() / clients, data.len() % clients);
        let mut shards = Vec::with_capacity(clients);
        let mut rest = order.as_slice();
        for m in 0..clients {
            let (head, tail) = rest.split_at(base + usize::from(m < extra));
            let mut shard = head.to_vec();
            shard.sort_unstable();
            shards.push(shard);
            rest = tail;
        }
        Ok(shards)
    }
}

/// Attacked samples go, with probability `skew`, to the client indexed by
/// their first compromised meter (mod the client count); everything else
/// is dealt round-robin after a shuffle.
pub struct LabelSkewPartitioner {
    pub skew: f64,
}

impl Partitioner for LabelSkewPartitioner {
    fn name(&self) -> &'static str {
        "label-skew"
    }

    fn partition(&self, data: &Dataset, clients: usize, rng: &mut StreamRng) -> Result<Vec<Vec<usize>>> {
        check(data, clients)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(rng);
        let mut shards = vec![Vec::new(); clients];
        let mut spread = Vec::new();
        for i in order {
            let s = &data.samples[i];
            let home = s.labels.0.iter().position(|&b| b != 0);
            match home {
                Some(h) if rng.random_bool(self.skew) => shards[h % clients].push(i),
                _ => spread.push(i),
            }
        }
        for (k, i) in spread.into_iter().enumerate() {
            shards[k % clients].push(i);
        }
        for shard in &mut shards {
            shard.sort_unstable();
        }
        if let Some(m) = shards.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("label-skew partition left client {m} without data")));
        }
        Ok(shards)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PartitionParams {
    pub label_skew: f64,
}

impl Default for PartitionParams {
    fn default() -> Self {
        Self { label_skew: 0.8 }
    }
}

pub type PartitionFactory = fn(&PartitionParams) -> Box<dyn Partitioner>;

pub static PARTITIONERS: Registry<PartitionFactory> = Registry::new(
    "partitioner",
    &[
        Entry {
            name: "iid",
            summary: "uniform shuffle into near-equal shards",
            build: |_| Box::new(IidPartitioner),
        },
        Entry {
            name: "label-skew",
            summary: "attacked samples biased toward one client per compromised location",
            build: |p| Box::new(LabelSkewPartitioner { skew: p.label_skew }),
        },
    ],
);

pub fn partitioner(name: &str, params: &PartitionParams) -> Result<Box<dyn Partitioner>> {
    Ok((PARTITIONERS.lookup(name)?)(params))
}

/// Index-based split of `train` into client shards.
pub fn partition(train: &Dataset, clients: usize, strategy: &dyn Partitioner, rng: &mut StreamRng) -> Result<Vec<Dataset>> {
    Ok(strategy
        .partition(train, clients, rng)?
        .iter()
        .map(|idx| train.subset(idx))
        .collect())
}
