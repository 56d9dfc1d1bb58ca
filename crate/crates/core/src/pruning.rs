//! Top-m pruning: keep each routed layer's most used experts and drop the router.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::write_atomic;
use crate::encoder::{Encoder, Layer};
use crate::error::{Error, Result};
use crate::expert::{DeterministicLayer, MoeLayer};
use crate::numkit::Scalar;
use crate::usage::{frequencies, rank_experts, UsageReport};

/// The `m` most frequently selected experts of `layer`, most used first.
pub fn select_retained(report: &UsageReport, layer: usize, m: usize) -> Result<Vec<usize>> {
    let record = report
        .layer(layer)
        .ok_or_else(|| Error::Contract(format!("usage report has no entry for layer {layer}")))?;
    let n = record.n_experts();
    if m == 0 || m > n {
        return Err(Error::Usage(format!("m must lie in 1..={n}, got {m}")));
    }
    let mut order = rank_experts(&frequencies(record, report.k)?);
    order.truncate(m);
    Ok(order)
}

/// Router-free copy of `layer` holding only `retained`.
pub fn prune_layer<T: Scalar>(index: usize, layer: &MoeLayer<T>, retained: &[usize]) -> Result<DeterministicLayer<T>> {
    DeterministicLayer::from_moe(index, layer, retained)
}

/// Which experts each pruned layer kept.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneManifest {
    pub m: usize,
    pub retained: BTreeMap<usize, Vec<usize>>,
}

impl PruneManifest {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path.as_ref(), &bytes)
    }
}

/// Replaces every routed layer with its top-`m` deterministic layer.
pub fn prune_model<T: Scalar>(model: &Encoder<T>, report: &UsageReport, m: usize) -> Result<(Encoder<T>, PruneManifest)> {
    let mut pruned = model.clone();
    let mut retained = BTreeMap::new();
    for (i, layer) in model.layers.iter().enumerate() {
        if let Layer::Moe(moe) = layer {
            let keep = select_retained(report, i, m)?;
            pruned.layers[i] = Layer::Deterministic(prune_layer(i, moe, &keep)?);
            retained.insert(i, keep);
        }
    }
    Ok((pruned, PruneManifest { m, retained }))
}

/// True when no layer routes on its input.
pub fn verify_static<T: Scalar>(model: &Encoder<T>) -> bool {
    !model.layers.iter().any(|l| matches!(l, Layer::Moe(_)))
}
