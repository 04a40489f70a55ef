//! Ablation grids over module toggles, patch size and contrastive weight.
//! Each row trains a fresh network for a fixed step budget and reports mean
//! PSNR/SSIM on the evaluation pairs.

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::datapipe::PairedDataset;
use crate::error::Result;
use crate::hazegen::AhgModel;
use crate::train::{evaluate_dhr, DhrTrainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grid {
    Modules,
    PatchSize,
    Lambda3,
}

impl Grid {
    pub const ALL: [Grid; 3] = [Grid::Modules, Grid::PatchSize, Grid::Lambda3];

    pub fn file_stem(self) -> &'static str {
        match self {
            Grid::Modules => "ablation_modules",
            Grid::PatchSize => "ablation_patch_size",
            Grid::Lambda3 => "ablation_lambda3",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub ape: bool,
    pub ahg: bool,
    pub mncd: bool,
    pub patch_size: usize,
    pub lambda3: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub grid: Grid,
    pub rows: Vec<AblationRow>,
}

/// A row to run: its label and the exact configuration it trains with.
#[derive(Debug, Clone)]
pub struct RowSpec {
    pub label: String,
    pub config: RunConfig,
}

fn row_base(base: &RunConfig) -> RunConfig {
    let mut cfg = base.clone();
    cfg.train.max_steps = Some(base.ablate.steps);
    cfg
}

fn with_modules(base: &RunConfig, ape: bool, ahg: bool, mncd: bool) -> RunConfig {
    let mut cfg = row_base(base);
    cfg.dhr.use_ape = ape;
    cfg.train.use_ahg = ahg;
    if !mncd {
        cfg.loss.mncd = 0.0;
    }
    cfg
}

/// Row specifications of `grid`. Patch-size and weight sweeps run the full model.
pub fn grid_rows(grid: Grid, base: &RunConfig) -> Vec<RowSpec> {
    match grid {
        Grid::Modules => [
            ("Baseline", false, false, false),
            ("DHR", true, false, false),
            ("DHR+AHG", true, true, false),
            ("API", true, true, true),
        ]
        .into_iter()
        .map(|(label, ape, ahg, mncd)| RowSpec {
            label: label.to_string(),
            config: with_modules(base, ape, ahg, mncd),
        })
        .collect(),
        Grid::PatchSize => base
            .ablate
            .patch_sizes
            .iter()
            .map(|&p| {
                let mut cfg = with_modules(base, true, true, true);
                cfg.dhr.patch_size = p;
                RowSpec {
                    label: p.to_string(),
                    config: cfg,
                }
            })
            .collect(),
        Grid::Lambda3 => base
            .ablate
            .lambda3
            .iter()
            .map(|&l| {
                let mut cfg = with_modules(base, true, true, true);
                cfg.loss.mncd = l;
                RowSpec {
                    label: format!("{l}"),
                    config: cfg,
                }
            })
            .collect(),
    }
}

/// Trains and scores one row.
pub fn run_row(
    spec: &RowSpec,
    train: &PairedDataset,
    eval: &PairedDataset,
    ahg: Option<&AhgModel>,
    device: &Device,
) -> Result<AblationRow> {
    let cfg = &spec.config;
    let mut trainer = DhrTrainer::new(cfg.clone(), device)?;
    trainer.run(train, ahg.filter(|_| cfg.train.use_ahg), |_, _| Ok(()))?;
    let summary = evaluate_dhr(&trainer.model, eval)?.summary();
    Ok(AblationRow {
        label: spec.label.clone(),
        ape: cfg.dhr.use_ape,
        ahg: cfg.train.use_ahg,
        mncd: cfg.loss.mncd != 0.0,
        patch_size: cfg.dhr.patch_size,
        lambda3: cfg.loss.mncd,
        psnr: summary.mean_psnr,
        ssim: summary.mean_ssim,
        config_hash: cfg.hash(),
    })
}

fn mark(on: bool) -> &'static str {
    if on {
        "x"
    } else {
        ""
    }
}

impl AblationTable {
    pub fn header(&self) -> Vec<&'static str> {
        match self.grid {
            Grid::Modules => vec!["Models", "APE", "AHG", "MNCD", "PSNR", "SSIM", "config_hash"],
            Grid::PatchSize => vec!["PATCH_SIZE", "PSNR", "SSIM", "config_hash"],
            Grid::Lambda3 => vec!["lambda3", "PSNR", "SSIM", "config_hash"],
        }
    }

    fn cells(&self, row: &AblationRow, precise: bool) -> Vec<String> {
        let (p, s) = if precise {
            (format!("{:?}", row.psnr), format!("{:?}", row.ssim))
        } else {
            (format!("{:.3}", row.psnr), format!("{:.3}", row.ssim))
        };
        let mut out = vec![row.label.clone()];
        if self.grid == Grid::Modules {
            out.extend([row.ape, row.ahg, row.mncd].map(|b| mark(b).to_string()));
        }
        out.extend([p, s, row.config_hash.clone()]);
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.header().join(",") + "\n";
        for row in &self.rows {
            out += &(self.cells(row, true).join(",") + "\n");
        }
        out
    }

    pub fn to_markdown(&self) -> String {
        let header = self.header();
        let mut out = format!("| {} |\n", header.join(" | "));
        out += &format!("|{}\n", "---|".repeat(header.len()));
        for row in &self.rows {
            out += &format!("| {} |\n", self.cells(row, false).join(" | "));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_have_documented_rows() {
        let base = RunConfig::default();
        let modules = grid_rows(Grid::Modules, &base);
        let labels: Vec<_> = modules.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["Baseline", "DHR", "DHR+AHG", "API"]);
        let flags: Vec<_> = modules
            .iter()
            .map(|r| (r.config.dhr.use_ape, r.config.train.use_ahg, r.config.loss.mncd != 0.0))
            .collect();
        assert_eq!(
            flags,
            [(false, false, false), (true, false, false), (true, true, false), (true, true, true)]
        );
        let patches: Vec<_> = grid_rows(Grid::PatchSize, &base)
            .iter()
            .map(|r| r.config.dhr.patch_size)
            .collect();
        assert_eq!(patches, [8, 16, 32, 64, 128]);
        let lambdas: Vec<_> = grid_rows(Grid::Lambda3, &base).iter().map(|r| r.config.loss.mncd).collect();
        assert_eq!(lambdas, [1.0, 0.5, 0.05, 0.01, 0.005]);
        assert!(modules.iter().all(|r| r.config.train.max_steps == Some(base.ablate.steps)));
    }

    #[test]
    fn tables_render_every_row() {
        let row = AblationRow {
            label: "DHR".into(),
            ape: true,
            ahg: false,
            mncd: false,
            patch_size: 32,
            lambda3: 0.0,
            psnr: 20.5,
            ssim: 0.75,
            config_hash: "ab".into(),
        };
        let table = AblationTable {
            grid: Grid::Modules,
            rows: vec![row.clone(); 4],
        };
        let csv = table.to_csv();
        assert_eq!(csv.lines().next().unwrap(), "Models,APE,AHG,MNCD,PSNR,SSIM,config_hash");
        assert_eq!(csv.lines().nth(1).unwrap(), "DHR,x,,,20.5,0.75,ab");
        assert_eq!(table.to_markdown().lines().count(), 6);
    }
}
