use std::io::Write;
use std::path::Path;

use serde::Serialize;

use super::SlamResult;
use crate::error::Result;
use crate::submap::links_csv;

/// Summary written to `metrics.json`. Fields without a reference are null.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub ate_rmse_m: Option<f64>,
    pub f_score: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub n_submaps: usize,
    pub n_pgo: usize,
    pub n_loop_edges: usize,
}

/// Writes `trajectory.txt`, `global_map.ply`, `metrics.json`,
/// `events.jsonl`, `tracking.csv`, `links.csv` and `pose_graph.txt` (with its
/// correspondence sidecar) into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, result: &SlamResult) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    result.trajectory.save(dir.join("trajectory.txt"))?;
    result.global_map.save_ply(dir.join("global_map.ply"))?;
    std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&result.metrics)? + "\n")?;
    let mut events = std::io::BufWriter::new(std::fs::File::create(dir.join("events.jsonl"))?);
    for e in &result.state.events {
        serde_json::to_writer(&mut events, e)?;
        events.write_all(b"\n")?;
    }
    events.flush()?;
    std::fs::write(dir.join("tracking.csv"), result.state.tracking_log.to_csv())?;
    std::fs::write(dir.join("links.csv"), links_csv(&result.state.submaps))?;
    result.state.graph.save(dir.join("pose_graph.txt"))?;
    Ok(())
}
