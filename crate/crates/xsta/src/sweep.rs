//! Hyperparameter sweeps: a cartesian grid of config overrides, each cell
//! a full train + evaluate run with a derived seed, results collected
//! into one machine-readable JSON table.

use std::path::Path;

use indexmap::IndexMap;
use serde::Serialize;

use crate::config::Config;
use crate::data::ParallelExample;
use crate::error::{Error, Result};
use crate::trainer;

/// Parse a grid spec like `gamma=0,0.1,0.3;gdks_layer=0,1,2` into ordered
/// (key, values) lists.
pub fn parse_grid(spec: &str) -> Result<Vec<(String, Vec<String>)>> {
    let mut out = Vec::new();
    for part in spec.split(';') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (key, vals) = part
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("grid entry {part:?} is not key=v1,v2,...")))?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
        if values.is_empty() || values.iter().any(|v| v.is_empty()) {
            return Err(Error::Parse(format!("grid entry {part:?} has empty values")));
        }
        out.push((key.trim().to_string(), values));
    }
    if out.is_empty() {
        return Err(Error::Parse("empty sweep grid".into()));
    }
    Ok(out)
}

/// All assignments of the grid, in row-major order (last key fastest).
pub fn cells(grid: &[(String, Vec<String>)]) -> Vec<IndexMap<String, String>> {
    let mut out: Vec<IndexMap<String, String>> = vec![IndexMap::new()];
    for (key, values) in grid {
        let mut next = Vec::with_capacity(out.len() * values.len());
        for cell in &out {
            for v in values {
                let mut c = cell.clone();
                c.insert(key.clone(), v.clone());
                next.push(c);
            }
        }
        out = next;
    }
    out
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepCell {
    pub index: usize,
    pub overrides: IndexMap<String, String>,
    pub seed: u64,
    pub ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_language: Option<IndexMap<String, (f64, f64)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_em: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_f1: Option<f64>,
}

/// Run the whole grid sequentially. Each cell trains in
/// `<out_dir>/cell-<i>` with seed = base seed + cell index; failures are
/// recorded and the sweep continues. The table is written to
/// `<out_dir>/sweep.json` and returned.
pub fn sweep(
    base: &Config,
    grid_spec: &str,
    train_pairs: &[ParallelExample],
    valid_pairs: &[ParallelExample],
    eval_pairs: &[ParallelExample],
    out_dir: &Path,
) -> Result<Vec<SweepCell>> {
    let grid = parse_grid(grid_spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut results = Vec::new();
    for (i, overrides) in cells(&grid).into_iter().enumerate() {
        let seed = base.train.seed + i as u64;
        let run = (|| -> Result<trainer::EvalReport> {
            let mut cfg = base.clone();
            for (k, v) in &overrides {
                cfg.set_field(k, v)?;
            }
            cfg.train.seed = seed;
            cfg.validate()?;
            let cell_dir = out_dir.join(format!("cell-{i}"));
            let outcome = trainer::train(&cfg, train_pairs, valid_pairs, &cell_dir)?;
            let calibrate = !cfg.train.ablation.no_atgc && !cfg.train.ablation.no_atgc_inference;
            trainer::evaluate(&outcome.checkpoint, eval_pairs, calibrate)
        })();
        let cell = match run {
            Ok(report) => SweepCell {
                index: i,
                overrides,
                seed,
                ok: true,
                error: None,
                per_language: Some(report.per_language),
                mean_em: Some(report.mean_em),
                mean_f1: Some(report.mean_f1),
            },
            Err(e) => SweepCell {
                index: i,
                overrides,
                seed,
                ok: false,
                error: Some(e.to_string()),
                per_language: None,
                mean_em: None,
                mean_f1: None,
            },
        };
        results.push(cell);
    }
    let table_path = out_dir.join("sweep.json");
    let json = serde_json::to_string_pretty(&results).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(&table_path, json).map_err(|e| Error::io(table_path.display().to_string(), e))?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Answer, MrcExample};

    #[test]
    fn grid_parsing_and_cell_expansion() {
        let grid = parse_grid("gamma=0,0.1;gdks_layer=0,1,2").unwrap();
        assert_eq!(grid.len(), 2);
        assert_eq!(grid[0].1, vec!["0", "0.1"]);
        let all = cells(&grid);
        assert_eq!(all.len(), 6);
        // last key varies fastest
        assert_eq!(all[0]["gdks_layer"], "0");
        assert_eq!(all[1]["gdks_layer"], "1");
        assert_eq!(all[3]["gamma"], "0.1");

        assert!(parse_grid("").is_err());
        assert!(parse_grid("gamma").is_err());
        assert!(parse_grid("gamma=").is_err());
    }

    fn pairs() -> Vec<ParallelExample> {
        (0..4)
            .map(|i| {
                let source = MrcExample {
                    id: format!("s{i}"),
                    question: "qq aa".into(),
                    context: "aa bb cc dd".into(),
                    answers: vec![Answer { text: "cc".into(), char_start: 6 }],
                    language: "src".into(),
                };
                let target = MrcExample { language: "tgt".into(), ..source.clone() };
                ParallelExample { source, target, same_language: i % 2 == 0 }
            })
            .collect()
    }

    #[test]
    fn sweep_runs_cells_and_records_failures() {
        let mut cfg = Config::default();
        cfg.model.num_layers = 2;
        cfg.model.hidden_size = 8;
        cfg.model.num_heads = 2;
        cfg.model.ffn_size = 16;
        cfg.model.max_seq_len = 16;
        cfg.model.gdks_layer = 1;
        cfg.train.batch_size = 2;
        cfg.train.epochs = 1;
        cfg.train.log_every = 0;
        cfg.train.seed = 3;
        let dir = tempfile::tempdir().unwrap();
        let p = pairs();
        // gdks_layer=9 is invalid for a 2-layer model: that cell must fail
        let results = sweep(&cfg, "gdks_layer=1,9", &p, &p, &p, dir.path()).unwrap();
        assert_eq!(results.len(), 2);
        assert!(results[0].ok);
        assert_eq!(results[0].seed, 3);
        assert!(results[0].mean_f1.is_some());
        assert!(!results[1].ok);
        assert_eq!(results[1].seed, 4);
        assert!(results[1].error.as_deref().unwrap().contains("gdks_layer"));
        let table: Vec<serde_json::Value> = serde_json::from_str(
            &std::fs::read_to_string(dir.path().join("sweep.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(table.len(), 2);
        // cell directory exists for the successful run
        assert!(dir.path().join("cell-0").join("best.ckpt").exists());
    }
}
