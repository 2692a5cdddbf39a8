//! Evaluation protocol: greedy play over a game set, averaged over seeded
//! runs, plus report comparison and training-curve plots.

mod plot;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::agent::{run_episode, ActionMode, AgentError, AgentKind, AgentModel, ImageRuntime, TrainConfig};
use crate::env::{Level, LocalEnv, WorldSpec};
use crate::phrase::Lexicon;
use crate::seed::{hash_str, mix_seed};

pub use plot::{plot_curves, smooth};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("max_score must be at least 1")]
    ZeroMaxScore,
    #[error("score {score} exceeds max_score {max_score}")]
    ScoreAboveMax { score: u32, max_score: u32 },
    #[error("runs must be at least 1")]
    NoRuns,
    #[error("empty game set")]
    NoGames,
    #[error("game {game}, run {run}: {source}")]
    Episode { game: String, run: usize, source: AgentError },
    #[error("reports disagree on step_cap: {0} vs {1}")]
    StepCapMismatch(u32, u32),
    #[error("no reports to compare")]
    NoReports,
    #[error("io: {0}")]
    Io(String),
}

pub fn normalized_score(score: u32, max_score: u32) -> Result<f64, EvalError> {
    if max_score == 0 {
        return Err(EvalError::ZeroMaxScore);
    }
    if score > max_score {
        return Err(EvalError::ScoreAboveMax { score, max_score });
    }
    Ok(score as f64 / max_score as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    In,
    Out,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::In => "in",
            Split::Out => "out",
        }
    }
}

#[derive(Clone, Debug)]
pub struct GameSet {
    pub split: Split,
    pub games: Vec<Arc<WorldSpec>>,
}

/// Aggregate for one (agent, difficulty, split) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsCell {
    pub agent: AgentKind,
    pub level: Level,
    pub split: Split,
    pub runs: usize,
    pub seeds: Vec<u64>,
    pub score_mean: f64,
    pub score_std: f64,
    pub steps_mean: f64,
    pub steps_std: f64,
    /// Mean normalized score of each run over the cell's games.
    pub run_scores: Vec<f64>,
    pub run_steps: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub config_hash: String,
    pub step_cap: u32,
    pub master_seed: u64,
    pub cells: Vec<MetricsCell>,
}

/// Hash of the settings that make reports comparable. Agent kind and image
/// source are left out so the three agents share a family.
pub fn config_hash(config: &TrainConfig, runs: usize) -> String {
    let family = serde_json::json!({
        "gamma": config.gamma,
        "learning_rate": config.learning_rate,
        "episodes": config.episodes,
        "step_cap": config.step_cap,
        "master_seed": config.master_seed,
        "runs": runs,
    });
    hex::encode(&Sha256::digest(family.to_string().as_bytes())[..8])
}

/// Population mean and standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn run_seed(master_seed: u64, agent: AgentKind, game_id: &str, run: usize) -> u64 {
    mix_seed(&[master_seed, agent as u64, hash_str(game_id), run as u64])
}

/// Plays every game `runs` times with greedy action selection (uniform for
/// the random agent). Capped episodes count `step_cap` steps.
pub fn evaluate(
    model: &AgentModel,
    game_set: &GameSet,
    runs: usize,
    config: &TrainConfig,
    runtime: &ImageRuntime,
    lexicon: &Lexicon,
) -> Result<MetricsReport, EvalError> {
    if runs == 0 {
        return Err(EvalError::NoRuns);
    }
    if game_set.games.is_empty() {
        return Err(EvalError::NoGames);
    }
    let mode = if model.kind == AgentKind::Random { ActionMode::Random } else { ActionMode::GreedyRandomTies };
    // level -> per run (score sum, steps sum, game count)
    let mut sums: BTreeMap<Level, Vec<(f64, f64, usize)>> = BTreeMap::new();
    let mut seeds = Vec::new();
    for run in 0..runs {
        for world in &game_set.games {
            let id = world.id();
            let seed = run_seed(config.master_seed, model.kind, &id, run);
            seeds.push(seed);
            let local = match runtime {
                ImageRuntime::None => ImageRuntime::None,
                ImageRuntime::Generator { noise_seed } => {
                    ImageRuntime::Generator { noise_seed: mix_seed(&[*noise_seed, seed]) }
                }
                ImageRuntime::Retrieval { backend, cache } => ImageRuntime::Retrieval { backend: *backend, cache },
            };
            let mut env = LocalEnv::new(world.clone(), config.step_cap);
            let episode = |source| EvalError::Episode { game: id.clone(), run, source };
            let rollout = run_episode(model, &mut env, config, &local, lexicon, seed, &mode).map_err(episode)?;
            let traj = &rollout.trajectory;
            let score = normalized_score(traj.final_score, traj.max_score)?;
            let per_run = sums.entry(world.difficulty.level).or_insert_with(|| vec![(0.0, 0.0, 0); runs]);
            per_run[run].0 += score;
            per_run[run].1 += traj.steps() as f64;
            per_run[run].2 += 1;
        }
    }
    let cells = sums
        .into_iter()
        .map(|(level, per_run)| {
            let run_scores: Vec<f64> = per_run.iter().map(|(s, _, n)| s / *n as f64).collect();
            let run_steps: Vec<f64> = per_run.iter().map(|(_, s, n)| s / *n as f64).collect();
            let (score_mean, score_std) = mean_std(&run_scores);
            let (steps_mean, steps_std) = mean_std(&run_steps);
            MetricsCell {
                agent: model.kind,
                level,
                split: game_set.split,
                runs,
                seeds: seeds.clone(),
                score_mean,
                score_std,
                steps_mean,
                steps_std,
                run_scores,
                run_steps,
            }
        })
        .collect();
    Ok(MetricsReport { config_hash: config_hash(config, runs), step_cap: config.step_cap, master_seed: config.master_seed, cells })
}

impl MetricsReport {
    /// Appends the cells of `other`, which must share the step cap.
    pub fn merge(&mut self, other: MetricsReport) -> Result<(), EvalError> {
        if other.step_cap != self.step_cap {
            return Err(EvalError::StepCapMismatch(self.step_cap, other.step_cap));
        }
        self.cells.extend(other.cells);
        Ok(())
    }

    pub fn cell(&self, agent: AgentKind, level: Level, split: Split) -> Option<&MetricsCell> {
        self.cells.iter().find(|c| c.agent == agent && c.level == level && c.split == split)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Io(e.to_string()))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("agent,level,split,runs,score_mean,score_std,steps_mean,steps_std\n");
        for c in &self.cells {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                c.agent.name(),
                c.level.name(),
                c.split.name(),
                c.runs,
                c.score_mean,
                c.score_std,
                c.steps_mean,
                c.steps_std
            )
            .expect("writing to a string");
        }
        out
    }

    /// Writes `<stem>.json` and `<stem>.csv` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), EvalError> {
        let io = |e: std::io::Error| EvalError::Io(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(io)?;
        std::fs::write(dir.join(format!("{stem}.json")), self.to_json()).map_err(io)?;
        std::fs::write(dir.join(format!("{stem}.csv")), self.to_csv()).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = std::fs::read_to_string(path).map_err(|e| EvalError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

/// Index of the best value; ties go to the earliest entry.
pub fn best_index(values: &[f64], higher_is_better: bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        let better = match best {
            None => true,
            Some(b) if higher_is_better => v > values[b],
            Some(b) => v < values[b],
        };
        if better {
            best = Some(i);
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    /// `(level, split)` column keys.
    pub columns: Vec<(Level, Split)>,
    pub agents: Vec<AgentKind>,
    /// `[agent][column]`, `None` when a report lacks the cell.
    pub scores: Vec<Vec<Option<f64>>>,
    pub steps: Vec<Vec<Option<f64>>>,
    pub notes: Vec<String>,
}

/// Lays the reports out as an agents x (difficulty, split) grid for both
/// metrics. Mismatched step caps are an error; differing config hashes are
/// noted.
pub fn compare(reports: &[MetricsReport]) -> Result<ComparisonTable, EvalError> {
    let first = reports.first().ok_or(EvalError::NoReports)?;
    let mut notes = Vec::new();
    for r in &reports[1..] {
        if r.step_cap != first.step_cap {
            return Err(EvalError::StepCapMismatch(first.step_cap, r.step_cap));
        }
        if r.config_hash != first.config_hash {
            notes.push(format!("config hash {} differs from {}", r.config_hash, first.config_hash));
        }
    }
    let cells: Vec<&MetricsCell> = reports.iter().flat_map(|r| &r.cells).collect();
    let mut agents: Vec<AgentKind> = cells.iter().map(|c| c.agent).collect();
    agents.sort();
    agents.dedup();
    agents.reverse();
    let mut columns: Vec<(Level, Split)> = cells.iter().map(|c| (c.level, c.split)).collect();
    columns.sort();
    columns.dedup();
    let lookup = |agent, (level, split): (Level, Split), f: fn(&MetricsCell) -> f64| {
        cells.iter().find(|c| c.agent == agent && c.level == level && c.split == split).map(|c| f(c))
    };
    let grid = |f: fn(&MetricsCell) -> f64| -> Vec<Vec<Option<f64>>> {
        agents.iter().map(|&a| columns.iter().map(|&col| lookup(a, col, f)).collect()).collect()
    };
    Ok(ComparisonTable { scores: grid(|c| c.score_mean), steps: grid(|c| c.steps_mean), columns, agents, notes })
}

impl ComparisonTable {
    /// Row index of the best agent in column `col`.
    pub fn best(&self, col: usize, higher_is_better: bool) -> Option<usize> {
        let grid = if higher_is_better { &self.scores } else { &self.steps };
        let fill = if higher_is_better { f64::NEG_INFINITY } else { f64::INFINITY };
        let values: Vec<f64> = grid.iter().map(|row| row[col].unwrap_or(fill)).collect();
        best_index(&values, higher_is_better).filter(|&i| grid[i][col].is_some())
    }

    /// Plain-text grid; `*` marks the best agent per column.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (title, higher) in [("normalized score", true), ("steps", false)] {
            let grid = if higher { &self.scores } else { &self.steps };
            writeln!(out, "{title}").unwrap();
            write!(out, "{:<12}", "agent").unwrap();
            for (level, split) in &self.columns {
                write!(out, "{:>14}", format!("{}/{}", level.name(), split.name())).unwrap();
            }
            out.push('\n');
            for (row, agent) in self.agents.iter().enumerate() {
                write!(out, "{:<12}", agent.name()).unwrap();
                for col in 0..self.columns.len() {
                    let text = match grid[row][col] {
                        Some(v) => {
                            let mark = if self.best(col, higher) == Some(row) { "*" } else { " " };
                            format!("{v:.3}{mark}")
                        }
                        None => "-".to_string(),
                    };
                    write!(out, "{text:>14}").unwrap();
                }
                out.push('\n');
            }
            out.push('\n');
        }
        for note in &self.notes {
            writeln!(out, "note: {note}").unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalized_score_cases() {
        assert_eq!(normalized_score(4, 8).unwrap(), 0.5);
        assert_eq!(normalized_score(0, 3).unwrap(), 0.0);
        assert_eq!(normalized_score(3, 3).unwrap(), 1.0);
        assert!(matches!(normalized_score(1, 0), Err(EvalError::ZeroMaxScore)));
        assert!(normalized_score(4, 3).is_err());
    }

    #[test]
    fn best_marking() {
        assert_eq!(best_index(&[0.96, 0.82, 0.52], true), Some(0));
        assert_eq!(best_index(&[12.0, 9.0, 9.0], false), Some(1));
        assert_eq!(best_index(&[], true), None);
    }

    #[test]
    fn mean_std_population() {
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!((m, s), (2.0, 1.0));
        assert_eq!(mean_std(&[5.0]), (5.0, 0.0));
    }

    fn cell(agent: AgentKind, score: f64, steps: f64) -> MetricsCell {
        MetricsCell {
            agent,
            level: Level::Easy,
            split: Split::Out,
            runs: 1,
            seeds: vec![0],
            score_mean: score,
            score_std: 0.0,
            steps_mean: steps,
            steps_std: 0.0,
            run_scores: vec![score],
            run_steps: vec![steps],
        }
    }

    fn report(cells: Vec<MetricsCell>, step_cap: u32) -> MetricsReport {
        MetricsReport { config_hash: "h".into(), step_cap, master_seed: 0, cells }
    }

    #[test]
    fn compare_marks_best_and_checks_caps() {
        let reports = vec![
            report(vec![cell(AgentKind::Multimodal, 0.96, 9.0)], 50),
            report(vec![cell(AgentKind::TextOnly, 0.82, 12.0)], 50),
            report(vec![cell(AgentKind::Random, 0.52, 30.0)], 50),
        ];
        let table = compare(&reports).unwrap();
        assert_eq!(table.agents[0], AgentKind::Multimodal);
        assert_eq!(table.best(0, true), Some(0));
        assert_eq!(table.best(0, false), Some(0));
        assert!(table.render().contains("0.960*"));
        let single = compare(&reports[..1]).unwrap();
        assert_eq!(single.agents.len(), 1);
        let bad = vec![reports[0].clone(), report(vec![], 40)];
        assert!(matches!(compare(&bad), Err(EvalError::StepCapMismatch(50, 40))));
    }

    #[test]
    fn report_round_trips_json() {
        let r = report(vec![cell(AgentKind::TextOnly, 0.5, 10.0)], 50);
        assert_eq!(MetricsReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(r.to_csv().lines().count(), 2);
    }
}
