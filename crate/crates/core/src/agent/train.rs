use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{a2c_update, run_episode, Updater, ActionMode, AgentError, AgentKind, AgentModel, ImageRuntime, TrainConfig};
use crate::env::{LocalEnv, WorldSpec};
use crate::nn::save_checkpoint;
use crate::phrase::Lexicon;
use crate::seed::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub normalized_score: f64,
    pub steps: usize,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

const CURVE_HEADER: &str = "episode,normalized_score,steps,policy_loss,value_loss,entropy";

/// Trains `model` for `config.episodes` episodes, cycling through `games`,
/// with one A2C update per episode. Checkpoints go to `checkpoint_dir` when
/// `config.checkpoint_every > 0`.
pub fn train(
    model: &mut AgentModel,
    games: &[Arc<WorldSpec>],
    config: &TrainConfig,
    runtime: &ImageRuntime,
    lexicon: &Lexicon,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<CurvePoint>, AgentError> {
    config.validate()?;
    if games.is_empty() {
        return Err(AgentError::NoGames);
    }
    if model.kind != config.agent {
        return Err(AgentError::Config(format!(
            "model is {} but config trains {}",
            model.kind.name(),
            config.agent.name()
        )));
    }
    let mode = if model.kind == AgentKind::Random { ActionMode::Random } else { ActionMode::Sample };
    let mut updater = Updater::new(config);
    let mut curve = Vec::with_capacity(config.episodes);
    for episode in 0..config.episodes {
        let world = games[episode % games.len()].clone();
        let mut env = LocalEnv::new(world, config.step_cap);
        let seed = mix_seed(&[config.master_seed, 0x7472_6169_6e, episode as u64]);
        let rollout = run_episode(model, &mut env, config, runtime, lexicon, seed, &mode)?;
        let loss = if rollout.trajectory.transitions.is_empty() || model.kind == AgentKind::Random {
            Default::default()
        } else {
            a2c_update(model, &rollout, config, &mut updater)?
        };
        let steps = rollout.trajectory.steps();
        curve.push(CurvePoint {
            episode,
            normalized_score: rollout.trajectory.normalized_score(),
            steps,
            policy_loss: loss.policy_loss,
            value_loss: loss.value_loss,
            entropy: loss.entropy / steps.max(1) as f64,
        });
        if let (Some(dir), true) = (checkpoint_dir, config.checkpoint_every > 0) {
            if (episode + 1) % config.checkpoint_every == 0 {
                let path = dir.join(format!("checkpoint-{:05}.bin", episode + 1));
                save_checkpoint(&path, &model.checkpoint(config.master_seed))?;
            }
        }
    }
    Ok(curve)
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<(), AgentError> {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in curve {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            p.episode, p.normalized_score, p.steps, p.policy_loss, p.value_loss, p.entropy
        )
        .expect("writing to a string");
    }
    std::fs::write(path, out).map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>, AgentError> {
    let text = std::fs::read_to_string(path).map_err(|e| AgentError::Io(format!("{}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(CURVE_HEADER) {
        return Err(AgentError::Io(format!("{}: unexpected header", path.display())));
    }
    let bad = |line: &str| AgentError::Io(format!("{}: bad row `{line}`", path.display()));
    lines
        .filter(|l| !l.is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(line));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
            Ok(CurvePoint {
                episode: f[0].parse().map_err(|_| bad(line))?,
                normalized_score: num(f[1])?,
                steps: f[2].parse().map_err(|_| bad(line))?,
                policy_loss: num(f[3])?,
                value_loss: num(f[4])?,
                entropy: num(f[5])?,
            })
        })
        .collect()
}
