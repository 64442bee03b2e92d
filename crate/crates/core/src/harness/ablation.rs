//! Ablation switchboard: named grids of configurations trained on a shared
//! split with matched seeds, summarized as mean and range over seeds.

use std::fmt::Write as _;
use std::str::FromStr;

use super::pipeline::Model;
use super::train::{evaluate_scenes, train, TrainConfig};
use crate::config::{AlignMode, FusionDirection, ModelConfig};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;
use crate::synthdata::{Scene, Vocab};

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub group: String,
    pub label: String,
    pub model: ModelConfig,
}

/// Which family of cells to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Grid {
    /// Baseline, alignment only, fusion only, both.
    Main,
    /// Stage subsets for fusion only, alignment only, and both.
    Stages,
    /// `{Uni, Bi} x {w/o, w/}` alignment.
    Direction,
    /// Auxiliary side-head loss versus the alignment loss.
    Loss,
    All,
}

impl FromStr for Grid {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "main" => Grid::Main,
            "stages" => Grid::Stages,
            "direction" => Grid::Direction,
            "loss" => Grid::Loss,
            "all" => Grid::All,
            _ => return Err(Error::Parse(format!("unknown ablation grid `{s}` (main|stages|direction|loss|all)"))),
        })
    }
}

pub const STAGE_SUBSETS: [&[usize]; 4] = [&[4], &[3, 4], &[2, 3, 4], &[1, 2, 3, 4]];

fn cell(group: &str, label: &str, base: &ModelConfig, edit: impl FnOnce(&mut ModelConfig)) -> AblationCell {
    let mut model = base.clone();
    edit(&mut model);
    AblationCell { group: group.to_string(), label: label.to_string(), model }
}

fn set_align(c: &mut ModelConfig, stages: &[usize], lambda: f64) {
    c.align_stages = stages.to_vec();
    c.lambda_align = if stages.is_empty() { 0.0 } else { lambda };
}

/// Cells of `grid`, derived from `base` (whose `lambda_align` is the weight
/// used wherever alignment is on).
pub fn grid_cells(grid: Grid, base: &ModelConfig) -> Vec<AblationCell> {
    let lambda = base.lambda_align;
    let all = [1, 2, 3, 4];
    let mut out = Vec::new();
    if matches!(grid, Grid::Main | Grid::All) {
        out.push(cell("main", "baseline", base, |c| {
            c.fusion_stages = vec![4];
            set_align(c, &[], lambda);
        }));
        out.push(cell("main", "align", base, |c| {
            c.fusion_stages = vec![4];
            set_align(c, &all, lambda);
        }));
        out.push(cell("main", "fusion", base, |c| {
            c.fusion_stages = all.to_vec();
            set_align(c, &[], lambda);
        }));
        out.push(cell("main", "align+fusion", base, |c| {
            c.fusion_stages = all.to_vec();
            set_align(c, &all, lambda);
        }));
    }
    if matches!(grid, Grid::Stages | Grid::All) {
        for s in STAGE_SUBSETS {
            out.push(cell("fusion_only", &format!("{s:?}"), base, |c| {
                c.fusion_stages = s.to_vec();
                set_align(c, &[], lambda);
            }));
        }
        for s in STAGE_SUBSETS {
            out.push(cell("align_only", &format!("{s:?}"), base, |c| {
                c.fusion_stages = vec![4];
                set_align(c, s, lambda);
            }));
        }
        for s in STAGE_SUBSETS {
            out.push(cell("align_and_fusion", &format!("{s:?}"), base, |c| {
                c.fusion_stages = s.to_vec();
                set_align(c, s, lambda);
            }));
        }
    }
    if grid == Grid::Direction {
        // Reference point for the directional comparison; `All` has it under `main`.
        out.push(cell("direction", "baseline", base, |c| {
            c.fusion_stages = vec![4];
            set_align(c, &[], lambda);
        }));
    }
    if matches!(grid, Grid::Direction | Grid::All) {
        for (dir, dname) in [(FusionDirection::VisionOnly, "Uni"), (FusionDirection::Bidirectional, "Bi")] {
            for (on, aname) in [(false, "w/o"), (true, "w/")] {
                out.push(cell("direction", &format!("{dname} ({aname})"), base, |c| {
                    c.fusion_direction = dir;
                    c.fusion_stages = all.to_vec();
                    set_align(c, if on { &all } else { &[] }, lambda);
                }));
            }
        }
    }
    if matches!(grid, Grid::Loss | Grid::All) {
        for (mode, name) in [(AlignMode::Auxiliary, "auxiliary loss"), (AlignMode::Alignment, "alignment loss")] {
            out.push(cell("loss", name, base, |c| {
                c.fusion_stages = all.to_vec();
                c.align_mode = mode;
                set_align(c, &all, lambda);
            }));
        }
    }
    out
}

/// Headline numbers of one trained cell and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct CellScore {
    pub seed: u64,
    pub p50: f64,
    pub p70: f64,
    pub p90: f64,
    pub miou: f64,
    pub oiou: f64,
}

impl CellScore {
    pub fn from_report(seed: u64, r: &EvalReport) -> Self {
        let p = |t| r.precision(t).unwrap_or(f64::NAN);
        Self { seed, p50: p(0.5), p70: p(0.7), p90: p(0.9), miou: r.miou, oiou: r.oiou }
    }

    fn values(&self) -> [f64; 5] {
        [self.p50, self.p70, self.p90, self.miou, self.oiou]
    }
}

#[derive(Clone, Debug)]
pub struct CellResult {
    pub cell: AblationCell,
    pub scores: Vec<CellScore>,
    /// `(seed, message)` for every seed that failed.
    pub failures: Vec<(u64, String)>,
}

/// `(mean, min, max)` of one metric over the successful seeds.
pub type Summary = (f64, f64, f64);

impl CellResult {
    pub fn summary(&self, metric: usize) -> Option<Summary> {
        if self.scores.is_empty() {
            return None;
        }
        let v: Vec<f64> = self.scores.iter().map(|s| s.values()[metric]).collect();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Some((mean, lo, hi))
    }

    pub fn mean_miou(&self) -> Option<f64> {
        self.summary(3).map(|s| s.0)
    }
}

pub const METRIC_NAMES: [&str; 5] = ["P@0.5", "P@0.7", "P@0.9", "mIoU", "oIoU"];

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<CellResult>,
}

impl AblationTable {
    pub fn row(&self, group: &str, label: &str) -> Option<&CellResult> {
        self.rows.iter().find(|r| r.cell.group == group && r.cell.label == label)
    }

    /// One row per cell; metrics in percent as mean, min and max columns.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,label,seeds_ok,seeds_failed");
        for m in METRIC_NAMES {
            let _ = write!(s, ",{m}_mean,{m}_min,{m}_max");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},\"{}\",{},{}", r.cell.group, r.cell.label, r.scores.len(), r.failures.len());
            for k in 0..METRIC_NAMES.len() {
                match r.summary(k) {
                    Some((m, lo, hi)) => {
                        let _ = write!(s, ",{:.4},{:.4},{:.4}", 100.0 * m, 100.0 * lo, 100.0 * hi);
                    }
                    None => s.push_str(",,,"),
                }
            }
            s.push('\n');
        }
        s
    }

    /// Aligned text table, `mean ±half-range` in percent.
    pub fn to_text(&self) -> String {
        let mut cells: Vec<Vec<String>> = vec![{
            let mut h = vec!["group".to_string(), "setting".to_string()];
            h.extend(METRIC_NAMES.iter().map(|m| m.to_string()));
            h
        }];
        for r in &self.rows {
            let mut line = vec![r.cell.group.clone(), r.cell.label.clone()];
            for k in 0..METRIC_NAMES.len() {
                line.push(match r.summary(k) {
                    Some((m, lo, hi)) => format!("{:.2} ±{:.2}", 100.0 * m, 50.0 * (hi - lo)),
                    None => "FAILED".to_string(),
                });
            }
            cells.push(line);
        }
        let widths: Vec<usize> = (0..cells[0].len()).map(|c| cells.iter().map(|l| l[c].chars().count()).max().unwrap_or(0)).collect();
        let mut s = String::new();
        for (i, line) in cells.iter().enumerate() {
            let padded: Vec<String> = line
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(c, (v, w))| if c < 2 { format!("{v:<w$}") } else { format!("{v:>w$}") })
                .collect();
            let _ = writeln!(s, "{}", padded.join("  ").trim_end());
            if i == 0 {
                let _ = writeln!(s, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            }
        }
        let _ = writeln!(s, "seeds: {:?}; values in percent, mean ±half-range", self.seeds);
        for r in &self.rows {
            for (seed, msg) in &r.failures {
                let _ = writeln!(s, "failed: {} / {} seed {seed}: {msg}", r.cell.group, r.cell.label);
            }
        }
        s
    }
}

/// Trains and evaluates every cell for every seed. The seed sets both the
/// model initialization and the batch order. Failing cells are recorded and
/// the suite continues.
pub fn run_ablation_suite(
    cells: &[AblationCell],
    train_cfg: &TrainConfig,
    seeds: &[u64],
    train_set: &[Scene],
    val_set: &[Scene],
    vocab: &Vocab,
    mut progress: impl FnMut(&AblationCell, u64, std::result::Result<&CellScore, &str>),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Usage("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::with_capacity(cells.len());
    for c in cells {
        let mut res = CellResult { cell: c.clone(), scores: Vec::new(), failures: Vec::new() };
        for &seed in seeds {
            match run_cell(c, train_cfg, seed, train_set, val_set, vocab) {
                Ok(score) => {
                    progress(c, seed, Ok(&score));
                    res.scores.push(score);
                }
                Err(e) => {
                    let msg = e.to_string();
                    progress(c, seed, Err(&msg));
                    res.failures.push((seed, msg));
                }
            }
        }
        rows.push(res);
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}

pub fn run_cell(
    c: &AblationCell,
    train_cfg: &TrainConfig,
    seed: u64,
    train_set: &[Scene],
    val_set: &[Scene],
    vocab: &Vocab,
) -> Result<CellScore> {
    let model_cfg = ModelConfig { seed, ..c.model.clone() };
    let tc = TrainConfig { shuffle_seed: seed, ..train_cfg.clone() };
    let (state, _) = train(&model_cfg, &tc, train_set, vocab, |_| {})?;
    let model = Model::new(&model_cfg)?;
    let report = evaluate_scenes(&state.params, &model, val_set, vocab, tc.batch_size)?;
    Ok(CellScore::from_report(seed, &report))
}
