use std::fmt::Write as _;
use std::io::Write;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{AblationGrid, EvalConfig, ModuleFlags, TrainConfig};
use super::eval::{evaluate, MetricMeans};
use super::train::train;
use crate::error::{Error, Result};
use crate::scenegen::SceneSample;

/// Figure panel a cell belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Panel {
    Modules,
    GammaSig,
    LambdaGrl,
}

impl Panel {
    pub fn name(self) -> &'static str {
        match self {
            Panel::Modules => "modules",
            Panel::GammaSig => "gamma_sig",
            Panel::LambdaGrl => "lambda_grl",
        }
    }
}

/// One train + evaluate run. `error` is set when the run failed or aborted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub panel: Panel,
    pub label: String,
    pub seed: u64,
    pub means: Option<MetricMeans>,
    pub error: Option<String>,
}

/// Seed-averaged metrics of one grid setting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub panel: Panel,
    pub label: String,
    pub seeds_ok: usize,
    pub seeds_failed: usize,
    pub ir: f64,
    pub fmr: f64,
    pub rr: f64,
    pub mmd: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub cells: Vec<AblationCell>,
    pub rows: Vec<AblationRow>,
}

/// The `(panel, label, config)` settings of a grid, in report order.
pub fn grid_settings(base: &TrainConfig, grid: &AblationGrid) -> Vec<(Panel, String, TrainConfig)> {
    let mut out = Vec::new();
    if grid.modules {
        for (name, flags) in ModuleFlags::variants() {
            out.push((Panel::Modules, name.to_string(), TrainConfig { flags, ..base.clone() }));
        }
    }
    for &g in &grid.gamma_sig {
        out.push((Panel::GammaSig, format!("{g}"), TrainConfig { gamma_sig: Some(g), flags: ModuleFlags::FULL, ..base.clone() }));
    }
    for &l in &grid.lambda_grl {
        out.push((Panel::LambdaGrl, format!("{l}"), TrainConfig { lambda_grl: l, flags: ModuleFlags::FULL, ..base.clone() }));
    }
    out
}

fn run_cell(cfg: &TrainConfig, eval: &EvalConfig, train_set: &[SceneSample], test_set: &[SceneSample]) -> Result<MetricMeans> {
    let run = train(cfg, train_set, &[], eval, None)?;
    if let Some(e) = run.aborted {
        return Err(e);
    }
    Ok(evaluate(&run.checkpoint.params, cfg, eval, test_set)?.means)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

/// Trains and evaluates every grid setting under every seed in parallel.
/// A failing cell is recorded and the rest of the grid still runs.
pub fn ablate(
    base: &TrainConfig,
    eval: &EvalConfig,
    grid: &AblationGrid,
    train_set: &[SceneSample],
    test_set: &[SceneSample],
) -> Result<AblationReport> {
    if grid.seeds.is_empty() {
        return Err(Error::Config("ablation grid needs at least one seed".into()));
    }
    let settings = grid_settings(base, grid);
    if settings.is_empty() {
        return Err(Error::Config("ablation grid has no settings".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..settings.len()).flat_map(|i| grid.seeds.iter().map(move |&s| (i, s))).collect();
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let (panel, label, cfg) = &settings[i];
            let cfg = TrainConfig { seed, ..cfg.clone() };
            let r = run_cell(&cfg, eval, train_set, test_set);
            match &r {
                Ok(m) => info!("{} {label} seed {seed}: RR {:.3}", panel.name(), m.rr),
                Err(e) => warn!("{} {label} seed {seed} failed: {e}", panel.name()),
            }
            AblationCell {
                panel: *panel,
                label: label.clone(),
                seed,
                means: r.as_ref().ok().copied(),
                error: r.err().map(|e| e.to_string()),
            }
        })
        .collect();
    Ok(AblationReport::from_cells(cells))
}

impl AblationReport {
    /// Seed-averaged rows of `cells`, one per `(panel, label)` in order of
    /// first appearance.
    pub fn from_cells(cells: Vec<AblationCell>) -> Self {
        let mut keys: Vec<(Panel, &str)> = Vec::new();
        for c in &cells {
            if !keys.contains(&(c.panel, c.label.as_str())) {
                keys.push((c.panel, &c.label));
            }
        }
        let rows = keys
            .iter()
            .map(|&(panel, label)| {
                let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.panel == panel && c.label == label).collect();
                let ok: Vec<MetricMeans> = mine.iter().filter_map(|c| c.means).collect();
                let mmds: Vec<f64> = ok.iter().filter_map(|m| m.mmd).collect();
                AblationRow {
                    panel,
                    label: label.to_string(),
                    seeds_ok: ok.len(),
                    seeds_failed: mine.len() - ok.len(),
                    ir: mean(&ok.iter().map(|m| m.ir).collect::<Vec<_>>()),
                    fmr: mean(&ok.iter().map(|m| m.fmr).collect::<Vec<_>>()),
                    rr: mean(&ok.iter().map(|m| m.rr).collect::<Vec<_>>()),
                    mmd: (!mmds.is_empty()).then(|| mean(&mmds)),
                }
            })
            .collect();
        AblationReport { cells, rows }
    }

    pub fn row(&self, panel: Panel, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.panel == panel && r.label == label)
    }

    /// Plain-text comparison table, one block per panel.
    pub fn table(&self) -> String {
        let mut s = String::from("synthetic metrics, mean over seeds\n");
        let mut last = None;
        for r in &self.rows {
            if last != Some(r.panel) {
                let _ = writeln!(s, "\n[{}]\n{:<10} {:>7} {:>7} {:>7} {:>8} {:>6}", r.panel.name(), "setting", "IR", "FMR", "RR", "MMD", "fail");
                last = Some(r.panel);
            }
            let mmd = r.mmd.map_or("-".to_string(), |m| format!("{m:.4}"));
            let _ = writeln!(s, "{:<10} {:>7.4} {:>7.4} {:>7.4} {:>8} {:>6}", r.label, r.ir, r.fmr, r.rr, mmd, r.seeds_failed);
        }
        s
    }

    /// One row per cell with its seed, for plotting.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "panel,setting,seed,status,ir,fmr,rr,rot_err_deg,trans_err_m,rmse_m,mmd")?;
        let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        for c in &self.cells {
            match &c.means {
                Some(m) => writeln!(
                    w,
                    "{},{},{},ok,{},{},{},{},{},{},{}",
                    c.panel.name(),
                    c.label,
                    c.seed,
                    m.ir,
                    m.fmr,
                    m.rr,
                    opt(m.rot_err_deg),
                    opt(m.trans_err_m),
                    opt(m.rmse_m),
                    opt(m.mmd)
                )?,
                None => writeln!(w, "{},{},{},failed,,,,,,,", c.panel.name(), c.label, c.seed)?,
            }
        }
        Ok(())
    }

    /// Grouped bar chart of IR, FMR and RR for one panel, or `None` if the
    /// panel is empty.
    pub fn svg(&self, panel: Panel) -> Option<String> {
        let rows: Vec<&AblationRow> = self.rows.iter().filter(|r| r.panel == panel).collect();
        if rows.is_empty() {
            return None;
        }
        let (bar, gap, h, top, left) = (18.0, 24.0, 200.0, 30.0, 40.0);
        let group = 3.0 * bar + gap;
        let width = left + group * rows.len() as f64 + gap;
        let colors = ["#4477aa", "#66ccee", "#228833"];
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{}" font-family="sans-serif" font-size="11">"#,
            top + h + 40.0
        );
        let _ = writeln!(s, r#"<text x="{left}" y="18">{} (synthetic; IR, FMR, RR)</text>"#, panel.name());
        let _ = writeln!(s, r#"<line x1="{left}" y1="{}" x2="{width}" y2="{}" stroke="black"/>"#, top + h, top + h);
        for tick in [0.0, 0.5, 1.0] {
            let y = top + h * (1.0 - tick);
            let _ = writeln!(s, r#"<text x="4" y="{}">{tick:.1}</text>"#, y + 4.0);
        }
        for (i, r) in rows.iter().enumerate() {
            let x0 = left + gap + group * i as f64;
            for (j, v) in [r.ir, r.fmr, r.rr].into_iter().enumerate() {
                let bh = h * v.clamp(0.0, 1.0);
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{}" width="{bar}" height="{bh}" fill="{}"/>"#,
                    x0 + bar * j as f64,
                    top + h - bh,
                    colors[j]
                );
            }
            let _ = writeln!(s, r#"<text x="{x0}" y="{}">{}</text>"#, top + h + 16.0, r.label);
        }
        s.push_str("</svg>\n");
        Some(s)
    }
}
