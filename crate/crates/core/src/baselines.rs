//! Channel scorers: filter l1-norm, BN scale magnitude (slimming), and the
//! averaged gates of SE (CPSE) or SCA (CPSCA) blocks.

use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, Split};
use crate::error::{Error, Result};
use crate::model::{AttentionBlock, Layer, ModelGraph};
use crate::pruner::following_bn;
use crate::stats::{collect_attention_scores, ScoreTable};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scorer {
    Cpsca,
    Cpse,
    L1,
    Slimming,
}

impl Scorer {
    pub const ALL: [Scorer; 4] = [Scorer::Cpsca, Scorer::Cpse, Scorer::L1, Scorer::Slimming];

    pub fn name(self) -> &'static str {
        match self {
            Scorer::Cpsca => "cpsca",
            Scorer::Cpse => "cpse",
            Scorer::L1 => "l1",
            Scorer::Slimming => "slimming",
        }
    }

    /// Whether the scorer reads attention gates (and so needs data and a
    /// matching attention family in the model).
    pub fn needs_attention(self) -> bool {
        matches!(self, Scorer::Cpsca | Scorer::Cpse)
    }
}

impl std::str::FromStr for Scorer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scorer::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scorer `{s}`; expected cpsca, cpse, l1 or slimming")))
    }
}

impl std::fmt::Display for Scorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Sum of absolute filter weights per output channel of each prunable conv.
pub fn l1_scores(model: &ModelGraph) -> Result<ScoreTable> {
    let mut layers = Vec::new();
    model.walk(&mut |n, _| {
        if let Layer::Conv(c) = &n.layer {
            if c.prunable {
                let per = c.weight.len() / c.out_channels;
                let s = c.weight.data().chunks(per).map(|f| f.iter().map(|v| v.abs() as f64).sum()).collect();
                layers.push((n.id.clone(), s));
            }
        }
    });
    ScoreTable::new(Scorer::L1.name(), layers)
}

/// `|gamma_j|` of the BN following each prunable conv.
pub fn slimming_scores(model: &ModelGraph) -> Result<ScoreTable> {
    let mut layers = Vec::new();
    for (id, _) in model.prunable_convs() {
        let bn = following_bn(model, &id)
            .ok_or_else(|| Error::Scorer(format!("prunable conv {id} has no batch norm to read scales from")))?;
        layers.push((id, bn.gamma.data().iter().map(|g| g.abs() as f64).collect()));
    }
    ScoreTable::new(Scorer::Slimming.name(), layers)
}

fn gate_scores(
    scorer: Scorer,
    model: &mut ModelGraph,
    split: &Split,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<ScoreTable> {
    let atts = model.attention_layers();
    let want_se = scorer == Scorer::Cpse;
    let family_ok = !atts.is_empty()
        && atts.iter().all(|a| match &a.block {
            AttentionBlock::Se(_) => want_se,
            AttentionBlock::Sca(b) => !want_se && b.cfg.arrangement.has_channel(),
        });
    if !family_ok {
        let need = if want_se { "SE blocks" } else { "SCA blocks with a channel submodule" };
        return Err(Error::Scorer(format!("{scorer} needs a model with {need}")));
    }
    let mut t = collect_attention_scores(model, split, norm, batch_size)?.finalize(scorer.name())?;
    t.scorer = scorer.name().to_string();
    Ok(t)
}

/// Mean SE gate of each scored channel over `split`.
pub fn cpse_scores(model: &mut ModelGraph, split: &Split, norm: &Normalizer, batch_size: usize) -> Result<ScoreTable> {
    gate_scores(Scorer::Cpse, model, split, norm, batch_size)
}

/// Mean SCA channel gate of each scored channel over `split`.
pub fn cpsca_scores(model: &mut ModelGraph, split: &Split, norm: &Normalizer, batch_size: usize) -> Result<ScoreTable> {
    gate_scores(Scorer::Cpsca, model, split, norm, batch_size)
}

/// Dispatches to the scorer; data is only read by the attention scorers.
pub fn score(
    scorer: Scorer,
    model: &mut ModelGraph,
    split: &Split,
    norm: &Normalizer,
    batch_size: usize,
) -> Result<ScoreTable> {
    match scorer {
        Scorer::L1 => l1_scores(model),
        Scorer::Slimming => slimming_scores(model),
        Scorer::Cpse | Scorer::Cpsca => gate_scores(scorer, model, split, norm, batch_size),
    }
}
