//! Topology and gossip weights shared by the commands.

use milodo::graph::{build_topology, metropolis_weights, ring_gossip_weights, GossipMatrix, Topology};
use milodo::Scalar;

use crate::config::{ExperimentConfig, WeightRule};
use crate::error::{CliError, CliResult};

/// Communication graph on `n` nodes; random families draw from the experiment seed.
pub fn topology(cfg: &ExperimentConfig, n: usize) -> CliResult<Topology> {
    build_topology(&cfg.topology.kind, n, cfg.seed).map_err(|e| CliError::Config(format!("topology: {e}")))
}

pub fn gossip<T: Scalar>(cfg: &ExperimentConfig, t: &Topology) -> CliResult<GossipMatrix<T>> {
    let w = match cfg.topology.weights {
        WeightRule::Ring => ring_gossip_weights(t),
        WeightRule::Metropolis => metropolis_weights(t),
        WeightRule::Auto if t.is_ring() => ring_gossip_weights(t),
        WeightRule::Auto => metropolis_weights(t),
    };
    w.map_err(|e| CliError::Config(format!("gossip weights: {e}")))
}
