use std::path::Path;

use nasprune::search::SubNetworkConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

/// One row of `eval.csv` and of the Pareto exports.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub source: String,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub ffn_ratio: f64,
    pub n_layers: usize,
    pub params: u64,
    pub flops: u64,
    pub latency_ms: Option<f64>,
    pub loss: f64,
    pub ppl: f64,
}

impl EvalRow {
    pub fn new(source: String, t: &SubNetworkConfig, params: u64, flops: u64, latency_ms: Option<f64>, loss: f64) -> Self {
        Self {
            source,
            d_model: t.d_model,
            n_heads: t.n_heads,
            d_head: t.d_head,
            ffn_ratio: t.ffn_ratio,
            n_layers: t.n_layers,
            params,
            flops,
            latency_ms,
            loss,
            ppl: loss.exp(),
        }
    }

    pub fn theta(&self) -> SubNetworkConfig {
        SubNetworkConfig::new(self.d_model, self.n_heads, self.d_head, self.ffn_ratio, self.n_layers)
    }
}

pub fn write_rows(path: &Path, rows: &[EvalRow]) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows(path: &Path) -> CliResult<Vec<EvalRow>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

pub fn print_rows(rows: &[EvalRow]) {
    println!(
        "{:<10} {:>22} {:>9} {:>11} {:>11} {:>8} {:>9}",
        "source", "theta", "params", "flops", "latency_ms", "loss", "ppl"
    );
    for r in rows {
        let lat = r.latency_ms.map_or("-".to_string(), |v| format!("{v:.3}"));
        println!(
            "{:<10} {:>22} {:>9} {:>11} {:>11} {:>8.4} {:>9.3}",
            r.source,
            r.theta().to_string(),
            r.params,
            r.flops,
            lat,
            r.loss,
            r.ppl
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let t = SubNetworkConfig::new(32, 2, 8, 2.5, 3);
        let rows = vec![
            EvalRow::new("grid:0".into(), &t, 1234, 99_000, Some(0.25), 2.0),
            EvalRow::new("theta".into(), &t, 1234, 99_000, None, 1.5),
        ];
        write_rows(&p, &rows).unwrap();
        assert_eq!(read_rows(&p).unwrap(), rows);
    }
}
