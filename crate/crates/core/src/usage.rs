//! Per-layer expert selection tallies, the signal pruning ranks experts by.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{eval_batches, write_atomic, Dataset};
use crate::encoder::{Encoder, Layer};
use crate::error::{Error, Result};
use crate::numkit::{Graph, Scalar};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub layer: usize,
    pub counts: Vec<u64>,
    /// Routed sequences; each contributes `k` selections.
    pub total: u64,
}

impl UsageRecord {
    pub fn new(layer: usize, n_experts: usize) -> Self {
        Self {
            layer,
            counts: vec![0; n_experts],
            total: 0,
        }
    }

    pub fn n_experts(&self) -> usize {
        self.counts.len()
    }

    /// Tallies one routed sequence.
    pub fn record(&mut self, selected: &[usize]) -> Result<()> {
        for &j in selected {
            if j >= self.counts.len() {
                return Err(Error::Index {
                    what: "expert",
                    index: j,
                    bound: self.counts.len(),
                });
            }
        }
        for &j in selected {
            self.counts[j] += 1;
        }
        self.total += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageReport {
    pub k: usize,
    pub dataset: String,
    pub layers: Vec<UsageRecord>,
}

impl UsageReport {
    /// Empty tallies for every MoE layer of `model`.
    pub fn for_model<T: Scalar>(model: &Encoder<T>, dataset: impl Into<String>) -> Result<Self> {
        let mut k = None;
        let mut layers = Vec::new();
        for (i, layer) in model.layers.iter().enumerate() {
            if let Layer::Moe(m) = layer {
                if k.is_some_and(|k| k != m.k) {
                    return Err(Error::Contract("MoE layers disagree on k".into()));
                }
                k = Some(m.k);
                layers.push(UsageRecord::new(i, m.n_experts()));
            }
        }
        Ok(Self {
            k: k.unwrap_or(1),
            dataset: dataset.into(),
            layers,
        })
    }

    pub fn layer(&self, layer: usize) -> Option<&UsageRecord> {
        self.layers.iter().find(|r| r.layer == layer)
    }

    pub fn record(&mut self, layer: usize, selected: &[usize]) -> Result<()> {
        if selected.len() != self.k {
            return Err(Error::Usage(format!(
                "expected {} selections per sequence, got {}",
                self.k,
                selected.len()
            )));
        }
        self.layers
            .iter_mut()
            .find(|r| r.layer == layer)
            .ok_or_else(|| Error::Contract(format!("usage report has no layer {layer}")))?
            .record(selected)
    }

    /// Count-wise sum of two reports over the same layers.
    pub fn merge(&self, other: &UsageReport) -> Result<UsageReport> {
        let same_layers = self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.layer == b.layer && a.n_experts() == b.n_experts());
        if self.k != other.k || !same_layers {
            return Err(Error::Contract("merging usage reports of different shape".into()));
        }
        let layers = self
            .layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| UsageRecord {
                layer: a.layer,
                counts: a.counts.iter().zip(&b.counts).map(|(x, y)| x + y).collect(),
                total: a.total + b.total,
            })
            .collect();
        Ok(UsageReport {
            k: self.k,
            dataset: self.dataset.clone(),
            layers,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        write_atomic(path.as_ref(), &bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let report: UsageReport = serde_json::from_slice(&text)?;
        for r in &report.layers {
            let sum: u64 = r.counts.iter().sum();
            if sum != r.total * report.k as u64 {
                return Err(Error::Format(format!(
                    "layer {}: counts sum to {sum}, expected total·k = {}",
                    r.layer,
                    r.total * report.k as u64
                )));
            }
        }
        Ok(report)
    }
}

/// `counts / (total·k)`.
pub fn frequencies(record: &UsageRecord, k: usize) -> Result<Vec<f64>> {
    if record.total == 0 {
        return Err(Error::Statistics(format!("layer {} has no routed sequences", record.layer)));
    }
    let denom = (record.total * k as u64) as f64;
    Ok(record.counts.iter().map(|&c| c as f64 / denom).collect())
}

/// Expert indices by descending frequency; ties toward the lower index.
pub fn rank_experts(freqs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| freqs[b].partial_cmp(&freqs[a]).unwrap_or(std::cmp::Ordering::Equal));
    order
}

/// Shannon entropy in nats, with `0·ln 0 = 0`.
pub fn usage_entropy(freqs: &[f64]) -> f64 {
    -freqs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
}

/// One inference pass over `dataset`, tallying every MoE layer's routing.
pub fn collect_usage<T: Scalar>(
    model: &Encoder<T>,
    dataset: &Dataset,
    name: &str,
    batch_size: usize,
) -> Result<UsageReport> {
    let mut report = UsageReport::for_model(model, name)?;
    for batch in eval_batches(dataset, batch_size)? {
        let g = Graph::inference();
        let enc = model.encode(&g, &batch.tokens)?;
        for trace in &enc.routing {
            for sel in &trace.selections {
                report.record(trace.layer, sel)?;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn record_examples() {
        let mut r = UsageRecord::new(0, 4);
        for _ in 0..3 {
            r.record(&[1]).unwrap();
        }
        assert_eq!(r.counts, vec![0, 3, 0, 0]);
        let mut r = UsageRecord::new(0, 3);
        r.record(&[0, 2]).unwrap();
        assert_eq!((r.counts.clone(), r.total), (vec![1, 0, 1], 1));
        assert!(r.record(&[3]).is_err());
        assert_eq!(r.total, 1);
    }

    #[test]
    fn frequency_examples() {
        let rec = |counts: Vec<u64>| UsageRecord {
            layer: 0,
            total: counts.iter().sum(),
            counts,
        };
        assert_eq!(frequencies(&rec(vec![10, 0, 0]), 1).unwrap(), vec![1.0, 0.0, 0.0]);
        assert_eq!(frequencies(&rec(vec![5, 5]), 1).unwrap(), vec![0.5, 0.5]);
        let f = frequencies(&rec(vec![1, 2, 3]), 1).unwrap();
        assert!((f[0] - 1.0 / 6.0).abs() < 1e-15 && (f[1] - 1.0 / 3.0).abs() < 1e-15 && f[2] == 0.5);
        assert!(matches!(frequencies(&UsageRecord::new(0, 2), 1), Err(Error::Statistics(_))));
    }

    #[test]
    fn rank_and_entropy_examples() {
        assert_eq!(rank_experts(&[0.1, 0.7, 0.2]), vec![1, 2, 0]);
        assert_eq!(rank_experts(&[0.25; 4]), vec![0, 1, 2, 3]);
        assert!((usage_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(usage_entropy(&[1.0, 0.0, 0.0]), 0.0);
        assert!((usage_entropy(&[0.5, 0.5, 0.0, 0.0]) - 2f64.ln()).abs() < 1e-12);
    }
}
