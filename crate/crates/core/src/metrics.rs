//! Top-k accuracy and class-aware mean top-k recall.

use serde::{Deserialize, Serialize};

use crate::error::{HorstError, Result};
use crate::network::predict_topk;

/// Top-k list kept for every scored sample so totals can be recounted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredPrediction {
    pub label: usize,
    pub topk: Vec<usize>,
}

/// Mergeable tallies for one head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tally {
    pub k: usize,
    pub num_classes: usize,
    pub class_count: Vec<usize>,
    pub class_top1: Vec<usize>,
    pub class_topk: Vec<usize>,
    /// `confusion[true][predicted top-1]`.
    pub confusion: Vec<Vec<usize>>,
    pub predictions: Vec<StoredPrediction>,
}

impl Tally {
    pub fn new(num_classes: usize, k: usize) -> Self {
        Tally {
            k,
            num_classes,
            class_count: vec![0; num_classes],
            class_top1: vec![0; num_classes],
            class_topk: vec![0; num_classes],
            confusion: vec![vec![0; num_classes]; num_classes],
            predictions: Vec::new(),
        }
    }

    /// Scores one logit vector. `k` larger than the class count is clamped,
    /// so every class is a candidate.
    pub fn add(&mut self, logits: &[f64], label: usize) -> Result<()> {
        if logits.len() != self.num_classes {
            return Err(HorstError::shape(
                "evaluate",
                format!("{} logits for {} classes", logits.len(), self.num_classes),
            ));
        }
        if label >= self.num_classes {
            return Err(HorstError::LabelOutOfRange {
                head: "evaluate",
                label,
                classes: self.num_classes,
            });
        }
        let topk = predict_topk(logits, self.k.min(self.num_classes))?;
        self.class_count[label] += 1;
        if topk[0] == label {
            self.class_top1[label] += 1;
        }
        if topk.contains(&label) {
            self.class_topk[label] += 1;
        }
        self.confusion[label][topk[0]] += 1;
        self.predictions.push(StoredPrediction { label, topk });
        Ok(())
    }

    /// Associative merge of two shards.
    pub fn merge(mut self, other: Tally) -> Result<Tally> {
        if self.k != other.k || self.num_classes != other.num_classes {
            return Err(HorstError::Config(
                "cannot merge tallies of different heads".into(),
            ));
        }
        for c in 0..self.num_classes {
            self.class_count[c] += other.class_count[c];
            self.class_top1[c] += other.class_top1[c];
            self.class_topk[c] += other.class_topk[c];
            for p in 0..self.num_classes {
                self.confusion[c][p] += other.confusion[c][p];
            }
        }
        self.predictions.extend(other.predictions);
        Ok(self)
    }

    pub fn total(&self) -> usize {
        self.class_count.iter().sum()
    }

    pub fn top1(&self) -> f64 {
        ratio(self.class_top1.iter().sum(), self.total())
    }

    pub fn topk(&self) -> f64 {
        ratio(self.class_topk.iter().sum(), self.total())
    }

    /// Unweighted mean over classes with at least one sample of the per-class
    /// top-k hit rate.
    pub fn mean_recall(&self) -> f64 {
        let rates: Vec<f64> = (0..self.num_classes)
            .filter(|&c| self.class_count[c] > 0)
            .map(|c| self.class_topk[c] as f64 / self.class_count[c] as f64)
            .collect();
        if rates.is_empty() {
            0.0
        } else {
            rates.iter().sum::<f64>() / rates.len() as f64
        }
    }

    /// Recount top-1 and top-k hits from the stored predictions and compare
    /// with the running tallies.
    pub fn verify(&self) -> Result<()> {
        let top1 = self
            .predictions
            .iter()
            .filter(|p| p.topk[0] == p.label)
            .count();
        let topk = self
            .predictions
            .iter()
            .filter(|p| p.topk.contains(&p.label))
            .count();
        let t1: usize = self.class_top1.iter().sum();
        let tk: usize = self.class_topk.iter().sum();
        if top1 != t1 || topk != tk || self.predictions.len() != self.total() {
            return Err(HorstError::Graph(format!(
                "metric recount mismatch: top1 {top1} vs {t1}, topk {topk} vs {tk}"
            )));
        }
        Ok(())
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadMetrics {
    pub head: String,
    pub top1: f64,
    pub topk: f64,
    pub mean_recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: usize,
    pub k: usize,
    /// Top-1 accuracy of the primary (action) head.
    pub top1: f64,
    pub topk: f64,
    /// Class-aware mean top-k recall of the primary head.
    pub mean_recall: f64,
    pub heads: Vec<HeadMetrics>,
    pub confusion: Vec<Vec<usize>>,
}

impl MetricReport {
    /// `primary` is the tally of the action head; `extra` holds any further
    /// named heads.
    pub fn from_tallies(primary: &Tally, extra: &[(&str, &Tally)]) -> Result<Self> {
        primary.verify()?;
        let mut heads = Vec::new();
        for (name, t) in extra {
            t.verify()?;
            heads.push(HeadMetrics {
                head: name.to_string(),
                top1: t.top1(),
                topk: t.topk(),
                mean_recall: t.mean_recall(),
            });
        }
        Ok(MetricReport {
            samples: primary.total(),
            k: primary.k,
            top1: primary.top1(),
            topk: primary.topk(),
            mean_recall: primary.mean_recall(),
            heads,
            confusion: primary.confusion.clone(),
        })
    }

    /// `metric,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("samples,{}\n", self.samples));
        out.push_str(&format!("k,{}\n", self.k));
        out.push_str(&format!("top1,{}\n", self.top1));
        out.push_str(&format!("top{},{}\n", self.k, self.topk));
        out.push_str(&format!("mean_recall_at_{},{}\n", self.k, self.mean_recall));
        for h in &self.heads {
            out.push_str(&format!("{}_top1,{}\n", h.head, h.top1));
            out.push_str(&format!("{}_top{},{}\n", h.head, self.k, h.topk));
            out.push_str(&format!(
                "{}_mean_recall_at_{},{}\n",
                h.head, self.k, h.mean_recall
            ));
        }
        for (t, row) in self.confusion.iter().enumerate() {
            for (p, n) in row.iter().enumerate() {
                out.push_str(&format!("confusion_{t}_{p},{n}\n"));
            }
        }
        out
    }
}
