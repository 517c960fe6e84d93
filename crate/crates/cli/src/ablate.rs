//! Ablation sweeps laid out like the comparison tables they stand in for:
//! one row per model, one column per axis value, mean test AUC per cell.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use gatectr::gates::{Granularity, Sharing};
use gatectr::metrics::AucDisplay;
use gatectr::model::Family;
use gatectr::tensor::Activation;
use gatectr::train::{evaluate, train};

use crate::config::{ModelConfig, RunConfig};
use crate::error::CliError;
use crate::pipeline::{model_spec, prepare, Prepared};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    Sharing,
    Granularity,
    GateCombo,
    GateActivation,
    EmbeddingSize,
    Depth,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::Sharing,
        Axis::Granularity,
        Axis::GateCombo,
        Axis::GateActivation,
        Axis::EmbeddingSize,
        Axis::Depth,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Sharing => "sharing",
            Axis::Granularity => "granularity",
            Axis::GateCombo => "gate_combo",
            Axis::GateActivation => "gate_activation",
            Axis::EmbeddingSize => "embedding_size",
            Axis::Depth => "depth",
        }
    }
}

impl FromStr for Axis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Axis::ALL.into_iter().find(|a| a.name() == s.trim()).ok_or_else(|| {
            let names: Vec<_> = Axis::ALL.iter().map(|a| a.name()).collect();
            format!("unknown ablation axis '{s}': expected one of {}", names.join(", "))
        })
    }
}

/// One model to train: its table position and model section.
#[derive(Debug, Clone)]
pub struct Cell {
    pub row: usize,
    pub column: usize,
    pub model: ModelConfig,
}

#[derive(Debug, Clone)]
pub struct Grid {
    pub axis: Axis,
    pub corner: String,
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub cells: Vec<Cell>,
}

fn with(base: &ModelConfig, f: impl FnOnce(&mut ModelConfig)) -> ModelConfig {
    let mut m = base.clone();
    f(&mut m);
    m
}

pub fn grid(axis: Axis, cfg: &RunConfig) -> Grid {
    let base = ModelConfig {
        embed_gate: false,
        hidden_gate: false,
        ..cfg.model.clone()
    };
    let mut cells = Vec::new();
    let (corner, rows, columns): (&str, Vec<String>, Vec<String>) = match axis {
        Axis::Sharing | Axis::Granularity => {
            let families = [Family::Fm, Family::Dnn, Family::DeepFm];
            let columns = if axis == Axis::Sharing {
                vec!["Private", "Share"]
            } else {
                vec!["vec-wise", "bit-wise"]
            };
            for (r, fam) in families.iter().enumerate() {
                for c in 0..2 {
                    let model = with(&base, |m| {
                        m.family = *fam;
                        m.embed_gate = true;
                        if axis == Axis::Sharing {
                            m.embed_gate_sharing = [Sharing::FieldPrivate, Sharing::FieldShared][c];
                        } else {
                            m.embed_gate_sharing = Sharing::FieldPrivate;
                            m.embed_gate_granularity = [Granularity::VectorWise, Granularity::BitWise][c];
                        }
                    });
                    cells.push(Cell { row: r, column: c, model });
                }
            }
            (
                "Model",
                families.iter().map(|f| f.label().to_string()).collect(),
                columns.into_iter().map(String::from).collect(),
            )
        }
        Axis::GateCombo => {
            let families = [Family::Dnn, Family::DeepFm];
            let combos = [(false, false), (true, false), (false, true), (true, true)];
            for (r, fam) in families.iter().enumerate() {
                for (c, (e, h)) in combos.iter().enumerate() {
                    let model = with(&base, |m| {
                        m.family = *fam;
                        m.embed_gate = *e;
                        m.hidden_gate = *h;
                    });
                    cells.push(Cell { row: r, column: c, model });
                }
            }
            (
                "Model",
                families.iter().map(|f| f.label().to_string()).collect(),
                ["Base", "EGate", "HGate", "Both"].map(String::from).to_vec(),
            )
        }
        Axis::GateActivation => {
            let acts = Activation::USER_KINDS;
            for (c, act) in acts.iter().enumerate() {
                cells.push(Cell {
                    row: 0,
                    column: c,
                    model: with(&base, |m| {
                        m.family = Family::DeepFm;
                        m.embed_gate = true;
                        m.embed_gate_activation = *act;
                    }),
                });
                cells.push(Cell {
                    row: 1,
                    column: c,
                    model: with(&base, |m| {
                        m.family = Family::DeepFm;
                        m.hidden_gate = true;
                        m.hidden_gate_activation = *act;
                    }),
                });
            }
            (
                "Model",
                vec!["DeepFM_e".into(), "DeepFM_h".into()],
                ["Linear", "Relu", "Sigmoid", "Tanh"].map(String::from).to_vec(),
            )
        }
        Axis::EmbeddingSize => {
            for (c, &k) in cfg.ablate.embedding_sizes.iter().enumerate() {
                for (r, gate) in [false, true].into_iter().enumerate() {
                    cells.push(Cell {
                        row: r,
                        column: c,
                        model: with(&base, |m| {
                            m.family = Family::DeepFm;
                            m.embedding_dim = k;
                            m.embed_gate = gate;
                        }),
                    });
                }
            }
            (
                "Model",
                vec!["DeepFM".into(), "DeepFM_e".into()],
                cfg.ablate.embedding_sizes.iter().map(|k| k.to_string()).collect(),
            )
        }
        Axis::Depth => {
            let width = base.hidden_widths.first().copied().unwrap_or(400);
            for (c, &d) in cfg.ablate.depths.iter().enumerate() {
                for (r, gate) in [false, true].into_iter().enumerate() {
                    cells.push(Cell {
                        row: r,
                        column: c,
                        model: with(&base, |m| {
                            m.family = Family::DeepFm;
                            m.hidden_widths = vec![width; d];
                            m.hidden_gate = gate;
                        }),
                    });
                }
            }
            (
                "#Layers",
                vec!["DeepFM".into(), "DeepFM_h".into()],
                cfg.ablate.depths.iter().map(|d| d.to_string()).collect(),
            )
        }
    };
    Grid {
        axis,
        corner: corner.to_string(),
        rows,
        columns,
        cells,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub row: usize,
    pub column: usize,
    pub seed: u64,
    pub auc: Option<f64>,
    pub logloss: f64,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub grid: Grid,
    pub runs: Vec<RunResult>,
}

impl AblationTable {
    /// Mean AUC over the seeds with a defined AUC, per (row, column).
    pub fn mean_auc(&self) -> Vec<Vec<Option<f64>>> {
        let mut acc = vec![vec![(0.0, 0usize); self.grid.columns.len()]; self.grid.rows.len()];
        for r in &self.runs {
            if let Some(a) = r.auc {
                let cell = &mut acc[r.row][r.column];
                cell.0 += a;
                cell.1 += 1;
            }
        }
        acc.into_iter()
            .map(|row| row.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect())
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{},{}", self.grid.corner, self.grid.columns.join(","));
        for (name, row) in self.grid.rows.iter().zip(self.mean_auc()) {
            let vals: Vec<String> = row.iter().map(|v| AucDisplay(*v).to_string()).collect();
            let _ = writeln!(out, "{name},{}", vals.join(","));
        }
        out
    }

    pub fn runs_csv(&self) -> String {
        let mut out = String::from("axis,model,column,seed,auc,logloss\n");
        for r in &self.runs {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                self.grid.axis.name(),
                self.grid.rows[r.row],
                self.grid.columns[r.column],
                r.seed,
                AucDisplay(r.auc),
                r.logloss
            );
        }
        out
    }

    pub fn to_text(&self) -> String {
        let means = self.mean_auc();
        let cells: Vec<Vec<String>> = means
            .iter()
            .map(|row| {
                row.iter()
                    .map(|v| v.map_or_else(|| "undefined".to_string(), |x| format!("{x:.4}")))
                    .collect()
            })
            .collect();
        let first = self
            .grid
            .rows
            .iter()
            .map(String::len)
            .chain([self.grid.corner.len()])
            .max()
            .unwrap_or(0);
        let widths: Vec<usize> = self
            .grid
            .columns
            .iter()
            .enumerate()
            .map(|(c, h)| cells.iter().map(|r| r[c].len()).chain([h.len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let _ = write!(out, "{:<first$}", self.grid.corner);
        for (h, w) in self.grid.columns.iter().zip(&widths) {
            let _ = write!(out, "  {h:>w$}");
        }
        out.push('\n');
        let total = first + widths.iter().map(|w| w + 2).sum::<usize>();
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for (name, row) in self.grid.rows.iter().zip(&cells) {
            let _ = write!(out, "{name:<first$}");
            for (v, w) in row.iter().zip(&widths) {
                let _ = write!(out, "  {v:>w$}");
            }
            out.push('\n');
        }
        out
    }
}

/// Trains every cell of every axis for every seed. Data is prepared once per
/// seed and shared by all cells.
pub fn run_ablation(
    cfg: &RunConfig,
    axes: &[Axis],
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationTable>, CliError> {
    let mut data: BTreeMap<u64, Prepared> = BTreeMap::new();
    for &seed in &cfg.ablate.seeds {
        data.insert(seed, prepare(&cfg.data, seed)?);
    }
    let mut tables = Vec::new();
    for &axis in axes {
        let grid = grid(axis, cfg);
        let mut runs = Vec::new();
        for cell in &grid.cells {
            let run_cfg = RunConfig {
                model: cell.model.clone(),
                ..cfg.clone()
            };
            for (&seed, prepared) in &data {
                let spec = model_spec(&run_cfg, &prepared.vocab)?;
                let out = train(&spec, &prepared.splits, &cfg.train.train_config_with_seed(seed))?;
                let eval = evaluate(&out.model, &prepared.splits.test)?;
                progress(&format!(
                    "{} | {} | {} | seed {seed}: auc {} logloss {:.6}",
                    axis.name(),
                    grid.rows[cell.row],
                    grid.columns[cell.column],
                    AucDisplay(eval.auc),
                    eval.logloss
                ));
                runs.push(RunResult {
                    row: cell.row,
                    column: cell.column,
                    seed,
                    auc: eval.auc,
                    logloss: eval.logloss,
                });
            }
        }
        tables.push(AblationTable { grid, runs });
    }
    Ok(tables)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let cfg = RunConfig::default();
        let shape = |a| {
            let g = grid(a, &cfg);
            (g.rows.len(), g.columns.len(), g.cells.len())
        };
        assert_eq!(shape(Axis::Sharing), (3, 2, 6));
        assert_eq!(shape(Axis::Granularity), (3, 2, 6));
        assert_eq!(shape(Axis::GateCombo), (2, 4, 8));
        assert_eq!(shape(Axis::GateActivation), (2, 4, 8));
        assert_eq!(shape(Axis::EmbeddingSize), (2, 5, 10));
        assert_eq!(shape(Axis::Depth), (2, 5, 10));
    }

    #[test]
    fn cells_differ_only_along_the_axis() {
        let cfg = RunConfig::default();
        let g = grid(Axis::Depth, &cfg);
        let depths: Vec<usize> = g.cells.iter().filter(|c| c.row == 0).map(|c| c.model.hidden_widths.len()).collect();
        assert_eq!(depths, vec![2, 3, 4, 5, 6]);
        assert!(g.cells.iter().all(|c| c.model.family == Family::DeepFm && !c.model.embed_gate));
        assert!(g.cells.iter().all(|c| c.model.hidden_gate == (c.row == 1)));

        let g = grid(Axis::GateCombo, &cfg);
        let both = g.cells.iter().find(|c| c.row == 1 && c.column == 3).unwrap();
        assert!(both.model.embed_gate && both.model.hidden_gate && both.model.family == Family::DeepFm);
    }

    #[test]
    fn axis_names_round_trip() {
        for a in Axis::ALL {
            assert_eq!(a.name().parse::<Axis>().unwrap(), a);
        }
        assert!("width".parse::<Axis>().unwrap_err().contains("gate_combo"));
    }

    #[test]
    fn table_rendering() {
        let cfg = RunConfig::default();
        let t = AblationTable {
            grid: grid(Axis::Sharing, &cfg),
            runs: vec![
                RunResult { row: 0, column: 0, seed: 1, auc: Some(0.5), logloss: 0.7 },
                RunResult { row: 0, column: 0, seed: 2, auc: Some(0.75), logloss: 0.6 },
            ],
        };
        let csv = t.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "Model,Private,Share");
        assert_eq!(lines[1], "FM,0.625,undefined");
        assert_eq!(lines.len(), 4);
        let text = t.to_text();
        assert!(text.lines().next().unwrap().starts_with("Model"));
        assert!(text.contains("0.6250"));
    }
}
