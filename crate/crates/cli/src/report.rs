//! Adaptation reports: a versioned header, the resolved config, a summary
//! line, then one JSON object per episode.

use std::fmt::Write as _;
use std::path::Path;

use melodapt::adaptation::EpisodeReport;
use melodapt::metrics::{mean_scores, results_table, MelodyScores, ResultRow};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const REPORT_HEADER: &str = "#report\tv1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dataset: String,
    pub method: String,
    pub k: usize,
    pub s: usize,
    pub episodes: usize,
    /// Mean query scores after each round, starting at s = 0.
    pub by_iteration: Vec<MelodyScores>,
}

impl Summary {
    pub fn from_episodes(dataset: &str, method: &str, k: usize, s: usize, episodes: &[EpisodeReport]) -> Self {
        let by_iteration = (0..=s)
            .map(|i| {
                let scores: Vec<MelodyScores> = episodes
                    .iter()
                    .filter_map(|e| e.iterations.get(i).and_then(|r| r.scores))
                    .collect();
                mean_scores(&scores)
            })
            .collect();
        Self {
            dataset: dataset.into(),
            method: method.into(),
            k,
            s,
            episodes: episodes.len(),
            by_iteration,
        }
    }

    pub fn final_scores(&self) -> MelodyScores {
        *self.by_iteration.last().expect("at least s = 0")
    }

    pub fn row(&self) -> ResultRow {
        ResultRow {
            dataset: self.dataset.clone(),
            method: self.method.clone(),
            k: self.k,
            s: self.s,
            scores: self.final_scores(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub config_json: String,
    pub summary: Summary,
    pub episodes: Vec<EpisodeReport>,
}

impl Report {
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{REPORT_HEADER}");
        let _ = writeln!(out, "#config\t{}", self.config_json);
        let _ = writeln!(out, "#summary\t{}", serde_json::to_string(&self.summary).expect("serializes"));
        for e in &self.episodes {
            let _ = writeln!(out, "{}", serde_json::to_string(e).expect("serializes"));
        }
        out
    }

    pub fn parse(text: &str, name: &str) -> Result<Self, CliError> {
        let schema = |msg: String| CliError::schema(format!("{name}: {msg}"));
        let mut lines = text.lines();
        if lines.next() != Some(REPORT_HEADER) {
            return Err(schema(format!("first line is not {REPORT_HEADER:?}")));
        }
        let config_json = lines
            .next()
            .and_then(|l| l.strip_prefix("#config\t"))
            .ok_or_else(|| schema("missing #config line".into()))?
            .to_string();
        let summary = lines
            .next()
            .and_then(|l| l.strip_prefix("#summary\t"))
            .ok_or_else(|| schema("missing #summary line".into()))?;
        let summary: Summary = serde_json::from_str(summary).map_err(|e| schema(format!("summary: {e}")))?;
        let episodes = lines
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| serde_json::from_str(l).map_err(|e| schema(format!("episode line {}: {e}", i + 4))))
            .collect::<Result<Vec<EpisodeReport>, _>>()?;
        if episodes.len() != summary.episodes {
            return Err(schema(format!(
                "summary lists {} episodes, found {}",
                summary.episodes,
                episodes.len()
            )));
        }
        Ok(Self {
            config_json,
            summary,
            episodes,
        })
    }

    pub fn read(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::missing(format!("report {}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }
}

/// One table row per report, in the order given.
pub fn compare(reports: &[Report]) -> Result<String, CliError> {
    if reports.is_empty() {
        return Err(CliError::usage("compare needs at least one report"));
    }
    let rows: Vec<ResultRow> = reports.iter().map(|r| r.summary.row()).collect();
    Ok(results_table(&rows))
}
