//! Ablation sweeps over SCA arrangements, spatial groups `g` and GN
//! groups `G`, each cell trained from the same seed.

use std::path::Path;

use cpsca_core::attention::{Arrangement, ScaConfig};
use cpsca_core::model::AttentionKind;
use cpsca_core::train::{evaluate, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::pipeline::costs;
use crate::report::Table;

pub const GROUPS: [usize; 5] = [4, 8, 16, 32, 64];
pub const GN_GROUPS: [usize; 4] = [1, 2, 4, 8];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub sweep: String,
    pub description: String,
    pub attention: AttentionKind,
    pub params: u64,
    pub flops: u64,
    /// Test accuracy in percent.
    pub acc: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub arrangements: Table,
    pub groups: Table,
    pub gn_groups: Table,
    pub cells: Vec<SweepCell>,
}

/// Baseline plus one cell per setting. `g` cells use the spatial submodule
/// alone; `G` cells use spatial then channel with the configured `g`.
pub fn cells(cfg: &ExperimentConfig) -> Vec<(String, String, AttentionKind)> {
    let base = match &cfg.model.attention {
        AttentionKind::Sca(c) => c.clone(),
        _ => ScaConfig::default(),
    };
    let arch = cfg.model.name().to_uppercase();
    let mut out = vec![("baseline".to_string(), format!("{arch} (baseline)"), AttentionKind::None)];
    for a in Arrangement::ALL {
        let kind = AttentionKind::Sca(ScaConfig { arrangement: a, ..base.clone() });
        out.push(("arrangement".into(), format!("{arch} + {}", a.label()), kind));
    }
    for g in GROUPS {
        let kind = AttentionKind::Sca(ScaConfig { groups: g, arrangement: Arrangement::SpatialOnly, ..base.clone() });
        out.push(("groups".into(), format!("{arch} + Spatial (g={g})"), kind));
    }
    for gn in GN_GROUPS {
        let kind = AttentionKind::Sca(ScaConfig {
            gn_groups: gn,
            arrangement: Arrangement::SpatialThenChannel,
            ..base.clone()
        });
        out.push(("gn_groups".into(), format!("{arch} + Spatial + Channel (G={gn})"), kind));
    }
    out
}

fn table(cells: &[SweepCell], sweep: &str) -> Table {
    let mut t = Table::new(&["Description", "Params", "GFLOPs", "Acc(%)"]);
    for c in cells.iter().filter(|c| c.sweep == sweep || c.sweep == "baseline") {
        t.rows.push(vec![
            c.description.clone(),
            format!("{:.4}M", c.params as f64 / 1e6),
            format!("{:.5}", c.flops as f64 / 1e9),
            format!("{:.2}", c.acc),
        ]);
    }
    t
}

/// Trains every cell and writes `arrangements`, `groups` and `gn_groups`
/// tables plus `cells.json` under `<out_dir>/sweep`. Smoke mode trains one epoch.
pub fn cmd_sweep(cfg: &ExperimentConfig, smoke: bool) -> Result<SweepReport> {
    cfg.validate()?;
    let data = cfg.dataset.load()?;
    let train_cfg = TrainConfig { epochs: if smoke { 1 } else { cfg.train.epochs }, ..cfg.train.clone() };
    let dir = cfg.out_dir.join("sweep");
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut done = Vec::new();
    for (sweep, description, kind) in cells(cfg) {
        let spec = cpsca_core::model::ArchSpec { attention: kind.clone(), ..cfg.model.clone() };
        let mut model = spec.build(cfg.seed)?;
        let out = cpsca_core::train::train(
            &mut model,
            &data,
            &TrainConfig { eval_each_epoch: false, ..train_cfg.clone() },
            None,
        )?;
        let (_, acc) = evaluate(&mut model, &data.test, &out.normalizer, train_cfg.eval_batch_size)?;
        let c = costs(&model)?;
        done.push(SweepCell {
            sweep,
            description,
            attention: kind,
            params: c.params,
            flops: c.flops,
            acc: acc * 100.0,
        });
    }
    let report = SweepReport {
        arrangements: table(&done, "arrangement"),
        groups: table(&done, "groups"),
        gn_groups: table(&done, "gn_groups"),
        cells: done,
    };
    write_sweep(&dir, &report)?;
    Ok(report)
}

fn write_sweep(dir: &Path, r: &SweepReport) -> Result<()> {
    r.arrangements.write(dir, "arrangements")?;
    r.groups.write(dir, "groups")?;
    r.gn_groups.write(dir, "gn_groups")?;
    let p = dir.join("cells.json");
    std::fs::write(&p, serde_json::to_string_pretty(&r.cells)?).map_err(|e| CliError::io(&p, e))
}
