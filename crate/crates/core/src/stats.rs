//! Channel importance tables: accumulation of per-sample channel gates into
//! per-channel means, ranking, and the text exchange format.
//!
//! Sums are kept in f64 with Neumaier compensation, so the finalized means
//! do not depend on the order in which batches arrive (to ~1e-15 relative).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::data::{make_batch, Augment, Normalizer, Split};
use crate::error::{Error, Result};
use crate::model::{Ctx, ModelGraph};

/// Compensated running sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Neumaier {
    sum: f64,
    comp: f64,
}

impl Neumaier {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LayerAccum {
    id: String,
    sums: Vec<Neumaier>,
    count: u64,
}

/// Running per-channel sums of attention gates for each prunable layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ChannelScaleTable {
    layers: Vec<LayerAccum>,
}

impl ChannelScaleTable {
    /// Pre-registers layers so the table keeps forward order.
    pub fn with_layers(layers: &[(String, usize)]) -> Self {
        Self {
            layers: layers
                .iter()
                .map(|(id, c)| LayerAccum { id: id.clone(), sums: vec![Neumaier::default(); *c], count: 0 })
                .collect(),
        }
    }

    pub fn layer_ids(&self) -> Vec<&str> {
        self.layers.iter().map(|l| l.id.as_str()).collect()
    }

    /// Running sums of one layer.
    pub fn sums(&self, layer: &str) -> Option<Vec<f64>> {
        self.layers.iter().find(|l| l.id == layer).map(|l| l.sums.iter().map(Neumaier::value).collect())
    }

    pub fn sample_count(&self, layer: &str) -> Option<u64> {
        self.layers.iter().find(|l| l.id == layer).map(|l| l.count)
    }

    /// Adds every row of a `(batch, channels)` gate matrix. Unknown layers
    /// are registered on first sight.
    pub fn accumulate<T: Copy + Into<f64>>(&mut self, layer: &str, gates: &[T], channels: usize) -> Result<()> {
        if channels == 0 || gates.is_empty() || !gates.len().is_multiple_of(channels) {
            return Err(Error::Shape(format!(
                "layer {layer}: {} gate values do not form rows of {channels}",
                gates.len()
            )));
        }
        let pos = match self.layers.iter().position(|l| l.id == layer) {
            Some(p) => p,
            None => {
                self.layers.push(LayerAccum {
                    id: layer.to_string(),
                    sums: vec![Neumaier::default(); channels],
                    count: 0,
                });
                self.layers.len() - 1
            }
        };
        let acc = &mut self.layers[pos];
        if acc.sums.len() != channels {
            return Err(Error::Shape(format!(
                "layer {layer} has {} channels, gate rows have {channels}",
                acc.sums.len()
            )));
        }
        for row in gates.chunks_exact(channels) {
            for (s, &v) in acc.sums.iter_mut().zip(row) {
                s.add(v.into());
            }
            acc.count += 1;
        }
        Ok(())
    }

    /// Per-channel means `w_j = sum_j / count` with their ascending rank order.
    pub fn finalize(&self, scorer: &str) -> Result<ScoreTable> {
        if self.layers.is_empty() {
            return Err(Error::Scorer("no layers were accumulated".into()));
        }
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            if l.count == 0 {
                return Err(Error::Scorer(format!("layer {} saw no samples", l.id)));
            }
            let n = l.count as f64;
            layers.push(LayerScores::new(l.id.clone(), l.sums.iter().map(|s| s.value() / n).collect()));
        }
        let samples = self.layers.iter().map(|l| l.count).max();
        Ok(ScoreTable { scorer: scorer.to_string(), sample_count: samples, layers })
    }
}

/// Channel indices sorted by ascending score; equal scores keep index order.
pub fn rank_ascending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScores {
    pub id: String,
    pub scores: Vec<f64>,
    /// Channel indices by ascending score.
    pub order: Vec<usize>,
}

impl LayerScores {
    pub fn new(id: String, scores: Vec<f64>) -> Self {
        let order = rank_ascending(&scores);
        Self { id, scores, order }
    }
}

/// Finalized per-channel importance of every prunable layer.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub scorer: String,
    pub sample_count: Option<u64>,
    pub layers: Vec<LayerScores>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TableDoc {
    scorer: String,
    #[serde(default)]
    sample_count: Option<u64>,
    layers: Vec<LayerDoc>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerDoc {
    id: String,
    channels: Vec<(usize, f64)>,
}

impl ScoreTable {
    pub fn new(scorer: &str, layers: Vec<(String, Vec<f64>)>) -> Result<Self> {
        let t = Self {
            scorer: scorer.to_string(),
            sample_count: None,
            layers: layers.into_iter().map(|(id, s)| LayerScores::new(id, s)).collect(),
        };
        t.check()?;
        Ok(t)
    }

    pub fn layer(&self, id: &str) -> Option<&LayerScores> {
        self.layers.iter().find(|l| l.id == id)
    }

    pub fn check(&self) -> Result<()> {
        for l in &self.layers {
            if l.scores.is_empty() {
                return Err(Error::Scorer(format!("layer {} has no channels", l.id)));
            }
            if let Some(v) = l.scores.iter().find(|v| !v.is_finite()) {
                return Err(Error::Scorer(format!("layer {} has non-finite score {v}", l.id)));
            }
        }
        Ok(())
    }

    /// JSON with every score rendered to 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{{");
        let _ = writeln!(s, "  \"scorer\": {},", serde_json::Value::from(self.scorer.as_str()));
        if let Some(n) = self.sample_count {
            let _ = writeln!(s, "  \"sample_count\": {n},");
        }
        let _ = writeln!(s, "  \"layers\": [");
        for (li, l) in self.layers.iter().enumerate() {
            let _ = writeln!(s, "    {{");
            let _ = writeln!(s, "      \"id\": {},", serde_json::Value::from(l.id.as_str()));
            let _ = writeln!(s, "      \"channels\": [");
            for (j, v) in l.scores.iter().enumerate() {
                let sep = if j + 1 < l.scores.len() { "," } else { "" };
                let _ = writeln!(s, "        [{j}, {v:.16e}]{sep}");
            }
            let _ = writeln!(s, "      ]");
            let sep = if li + 1 < self.layers.len() { "," } else { "" };
            let _ = writeln!(s, "    }}{sep}");
        }
        let _ = writeln!(s, "  ]");
        let _ = writeln!(s, "}}");
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let doc: TableDoc = serde_json::from_str(text)?;
        let mut layers = Vec::with_capacity(doc.layers.len());
        for l in doc.layers {
            let mut scores = vec![f64::NAN; l.channels.len()];
            for (j, v) in l.channels {
                let slot = scores
                    .get_mut(j)
                    .ok_or_else(|| Error::Scorer(format!("layer {}: channel index {j} out of range", l.id)))?;
                *slot = v;
            }
            layers.push(LayerScores::new(l.id, scores));
        }
        let t = Self { scorer: doc.scorer, sample_count: doc.sample_count, layers };
        t.check()?;
        Ok(t)
    }

    /// Digest of the text rendering, used as plan provenance.
    pub fn digest(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }
}

/// Frozen-model pass over `split` that averages the channel gates of every
/// attention layer, keyed by the conv each gate scores.
pub fn collect_attention_scores(
    model: &mut ModelGraph,
    split: &Split,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<ChannelScaleTable> {
    let targets: Vec<(String, usize)> =
        model.attention_layers().iter().map(|a| (a.target.clone(), a.channels)).collect();
    if targets.is_empty() {
        return Err(Error::Scorer("model has no attention layers to collect from".into()));
    }
    if split.is_empty() {
        return Err(Error::Dataset("statistics pass over an empty split".into()));
    }
    let mut table = ChannelScaleTable::with_layers(&targets);
    let mut failure: Option<Error> = None;
    let idx: Vec<usize> = (0..split.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = make_batch(split, chunk, norm, Augment::none(), None);
        {
            let mut probe = |layer: &str, gates: &[f32], c: usize| {
                if let Err(e) = table.accumulate(layer, gates, c) {
                    failure.get_or_insert(e);
                }
            };
            let mut ctx = Ctx::probing(&mut probe);
            model.forward(x, &mut ctx)?;
        }
        if let Some(e) = failure.take() {
            return Err(e);
        }
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_sample_identity() {
        let mut t = ChannelScaleTable::default();
        t.accumulate("l", &[0.2f64, 0.8], 2).unwrap();
        assert_eq!(t.sums("l").unwrap(), vec![0.2, 0.8]);
        assert_eq!(t.sample_count("l"), Some(1));
    }

    #[test]
    fn two_batches_average() {
        let mut t = ChannelScaleTable::default();
        t.accumulate("l", &[0.2f64, 0.8], 2).unwrap();
        t.accumulate("l", &[0.4f64, 0.6], 2).unwrap();
        let w = &t.finalize("cpsca").unwrap().layers[0].scores;
        assert!((w[0] - 0.3).abs() < 1e-15 && (w[1] - 0.7).abs() < 1e-15);
    }

    #[test]
    fn constant_batch() {
        let mut t = ChannelScaleTable::default();
        t.accumulate("l", &[0.5f32; 6], 2).unwrap();
        assert_eq!(t.finalize("x").unwrap().layers[0].scores, vec![0.5, 0.5]);
        assert_eq!(t.sample_count("l"), Some(3));
    }

    #[test]
    fn division_and_order() {
        let mut t = ChannelScaleTable::with_layers(&[("l".into(), 2)]);
        t.accumulate("l", &[1.0f64, 3.0], 2).unwrap();
        t.layers[0].count = 10;
        let l = &t.finalize("x").unwrap().layers[0];
        assert!((l.scores[0] - 0.1).abs() < 1e-16 && (l.scores[1] - 0.3).abs() < 1e-16);
        assert_eq!(l.order, vec![0, 1]);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(rank_ascending(&[0.5, 0.5, 0.1]), vec![2, 0, 1]);
    }

    #[test]
    fn mismatched_channels_and_empty_are_errors() {
        let mut t = ChannelScaleTable::default();
        t.accumulate("l", &[0.1f64, 0.2], 2).unwrap();
        assert!(t.accumulate("l", &[0.1f64, 0.2, 0.3], 3).is_err());
        assert!(t.accumulate("l", &[0.1f64, 0.2, 0.3], 2).is_err());
        assert!(ChannelScaleTable::default().finalize("x").is_err());
        assert!(ChannelScaleTable::with_layers(&[("a".into(), 3)]).finalize("x").is_err());
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let t = ScoreTable::new(
            "l1",
            vec![("conv1".into(), vec![0.1, 1.0 / 3.0, 2.0e-300]), ("conv2".into(), vec![7.0, 0.0])],
        )
        .unwrap();
        let text = t.to_text();
        assert!(text.contains("3.3333333333333331e-1"));
        assert_eq!(ScoreTable::from_text(&text).unwrap(), t);
    }

    #[test]
    fn compensation_beats_naive_summation() {
        let mut n = Neumaier::default();
        n.add(1.0);
        for _ in 0..10 {
            n.add(1e-16);
        }
        assert_eq!(n.value(), 1.0 + 1e-15);
    }
}
