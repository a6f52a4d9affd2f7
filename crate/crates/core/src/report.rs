//! Trace-to-plot-data conversion.
//!
//! Searches emit a trace file plus one sidecar plan per episode. Reports
//! flatten those into two delimited text files ready for external plotting:
//! a reward curve and a per-channel bitwidth heatmap (one row per channel,
//! one column per episode).

use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::read_plan;
use crate::search::read_trace;

/// Sidecar plan file name for an episode.
pub fn plan_file_name(episode: usize) -> String {
    format!("ep_{episode:04}.plan")
}

/// Rendered report payloads.
#[derive(Debug, Clone)]
pub struct ReportFiles {
    /// `episode \t reward`, reward text copied verbatim from the trace.
    pub rewards_tsv: String,
    /// `layer \t channel \t <bits per episode...>`.
    pub heatmap_tsv: String,
}

/// Builds both report files from a trace and its plan sidecar directory.
pub fn render_reports(trace_path: &Path, plans_dir: &Path) -> Result<ReportFiles> {
    let (_, rows) = read_trace(trace_path)?;
    if rows.is_empty() {
        return Err(Error::Format("trace holds no episodes".into()));
    }

    let mut rewards = String::from("# episode\treward\n");
    for row in &rows {
        rewards.push_str(&format!("{}\t{}\n", row.episode, row.reward_text));
    }

    let mut plans = Vec::with_capacity(rows.len());
    for row in &rows {
        let path = plans_dir.join(plan_file_name(row.episode));
        let (plan, episode, _) = read_plan(&path)?;
        if episode != row.episode {
            return Err(Error::Format(format!(
                "{} carries episode {episode}, trace row says {}",
                path.display(),
                row.episode
            )));
        }
        if plan.digest() != row.plan_digest {
            return Err(Error::Format(format!(
                "{} digest {} does not match trace digest {}",
                path.display(),
                plan.digest(),
                row.plan_digest
            )));
        }
        plans.push(plan);
    }
    let shape: Vec<usize> = plans[0].rows.iter().map(Vec::len).collect();
    for p in &plans {
        let s: Vec<usize> = p.rows.iter().map(Vec::len).collect();
        if s != shape {
            return Err(Error::Format("episode plans disagree on network shape".into()));
        }
    }

    let mut heatmap = String::from("# layer\tchannel");
    for row in &rows {
        heatmap.push_str(&format!("\tep{}", row.episode));
    }
    heatmap.push('\n');
    for (layer, &channels) in shape.iter().enumerate() {
        for channel in 0..channels {
            heatmap.push_str(&format!("{layer}\t{channel}"));
            for p in &plans {
                heatmap.push_str(&format!("\t{}", p.rows[layer][channel]));
            }
            heatmap.push('\n');
        }
    }

    Ok(ReportFiles { rewards_tsv: rewards, heatmap_tsv: heatmap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{Measurement, MetricProbe};
    use crate::ir::{Layer, LayerSpec, NetworkIR, Task};
    use crate::quant::write_plan;
    use crate::search::{run_search, write_trace, SearchConfig};

    struct FlatProbe;

    impl MetricProbe for FlatProbe {
        fn measure(&self, _net: &NetworkIR) -> crate::Result<Measurement> {
            Ok(Measurement { metric: 50.0, top1: 50.0, top5: 50.0 })
        }
    }

    fn toy_net() -> NetworkIR {
        let s0 = LayerSpec::conv(0, 1, 3, 3, 1, 6, 6, false);
        let s1 = LayerSpec::fully_connected(1, 3, 2, false);
        let l0 = Layer::new(s0.clone(), (0..s0.weight_count()).map(|i| 0.1 + i as f32 * 0.01).collect(), vec![]).unwrap();
        let l1 = Layer::new(s1.clone(), (0..s1.weight_count()).map(|i| 0.2 + i as f32 * 0.02).collect(), vec![]).unwrap();
        NetworkIR::new(vec![l0, l1], Task::Classification).unwrap()
    }

    #[test]
    fn report_rows_and_rewards_match_trace() {
        let dir = tempfile::tempdir().unwrap();
        let trace_path = dir.path().join("trace.tsv");
        let plans_dir = dir.path().join("plans");
        std::fs::create_dir(&plans_dir).unwrap();

        let net = toy_net();
        let cfg = SearchConfig {
            episodes: 5,
            sc: 0.9,
            seed: 2,
            a_min_conv: 0.4,
            a_min_fc: 0.6,
            ..SearchConfig::default()
        };
        let out = run_search(&net, cfg.clone(), &FlatProbe).unwrap();
        write_trace(&out, &cfg, &trace_path).unwrap();
        for rec in &out.trace {
            write_plan(
                &rec.plan,
                rec.episode,
                rec.reward,
                &plans_dir.join(plan_file_name(rec.episode)),
            )
            .unwrap();
        }

        let files = render_reports(&trace_path, &plans_dir).unwrap();
        let reward_lines: Vec<&str> =
            files.rewards_tsv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(reward_lines.len(), 5);
        for (line, rec) in reward_lines.iter().zip(&out.trace) {
            assert_eq!(*line, format!("{}\t{}", rec.episode, rec.reward));
        }

        let heat_lines: Vec<&str> =
            files.heatmap_tsv.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(heat_lines.len(), 3 + 2); // channel rows across both layers
        for line in heat_lines {
            assert_eq!(line.split('\t').count(), 2 + 5);
        }
    }

    #[test]
    fn digest_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let trace_path = dir.path().join("trace.tsv");
        let plans_dir = dir.path().join("plans");
        std::fs::create_dir(&plans_dir).unwrap();

        let net = toy_net();
        let cfg = SearchConfig {
            episodes: 2,
            sc: 0.9,
            seed: 2,
            a_min_conv: 0.4,
            a_min_fc: 0.6,
            ..SearchConfig::default()
        };
        let out = run_search(&net, cfg.clone(), &FlatProbe).unwrap();
        write_trace(&out, &cfg, &trace_path).unwrap();
        // Write episode 1's plan under episode 0's name.
        write_plan(&out.trace[1].plan, 0, 0.0, &plans_dir.join(plan_file_name(0))).unwrap();
        write_plan(&out.trace[1].plan, 1, 0.0, &plans_dir.join(plan_file_name(1))).unwrap();
        let result = render_reports(&trace_path, &plans_dir);
        if out.trace[0].plan != out.trace[1].plan {
            assert!(result.is_err());
        }
    }
}
