//! Line-delimited JSON protocol that lets external engines (or this one, out
//! of process) speak the [`Observation`] interface.
//!
//! Requests, one JSON object per line:
//!
//! ```text
//! {"type":"reset","seed":7,"difficulty":"easy"}            optional: "step_cap", "world"
//! {"type":"step","action":"take apple"}
//! {"type":"close"}
//! ```
//!
//! Every request line gets exactly one response line: an observation
//! (`{"type":"observation","text":..,"admissible_actions":[..],"reward":0.0,"score":0,"done":false}`),
//! `{"type":"error","detail":..}`, or `{"type":"close"}` after which the
//! server stops.

use std::io::{self, BufRead, Write};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::engine::{reset, step, GameState, Observation, TextEnv, DEFAULT_STEP_CAP};
use super::pool::EntityPool;
use super::world::{generate_world, Difficulty, Level, WorldSpec};
use super::EnvError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Request {
    Reset {
        seed: u64,
        difficulty: Level,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        step_cap: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        world: Option<Box<WorldSpec>>,
    },
    Step {
        action: String,
    },
    Close,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Response {
    Observation(Observation),
    Error { detail: String },
    Close,
}

/// Serves the protocol until `close` or end of input.
pub fn serve_adapter<R: BufRead, W: Write>(
    input: R,
    mut output: W,
    pool: &EntityPool,
) -> io::Result<()> {
    let mut state: Option<GameState> = None;
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let response = match serde_json::from_str::<Request>(&line) {
            Err(e) => Response::Error { detail: format!("malformed message: {e}") },
            Ok(Request::Close) => {
                write_line(&mut output, &Response::Close)?;
                return Ok(());
            }
            Ok(Request::Reset { seed, difficulty, step_cap, world }) => {
                let world = match world {
                    Some(w) => w.validate().map(|_| *w),
                    None => generate_world(seed, &Difficulty::sample(difficulty, seed), pool),
                };
                match world
                    .and_then(|w| reset(Arc::new(w), step_cap.unwrap_or(DEFAULT_STEP_CAP)))
                {
                    Ok((s, obs)) => {
                        state = Some(s);
                        Response::Observation(obs)
                    }
                    Err(e) => Response::Error { detail: e.to_string() },
                }
            }
            Ok(Request::Step { action }) => match state.as_ref() {
                None => Response::Error { detail: "step before reset".into() },
                Some(s) => match step(s, &action) {
                    Ok((next, obs)) => {
                        state = Some(next);
                        Response::Observation(obs)
                    }
                    Err(e) => Response::Error { detail: e.to_string() },
                },
            },
        };
        write_line(&mut output, &response)?;
    }
    Ok(())
}

fn write_line<W: Write>(output: &mut W, response: &Response) -> io::Result<()> {
    let text = serde_json::to_string(response).map_err(io::Error::other)?;
    writeln!(output, "{text}")?;
    output.flush()
}

/// Client side of the protocol, usable as a [`TextEnv`].
pub struct AdapterClient<R: BufRead, W: Write> {
    reader: R,
    writer: W,
    seed: u64,
    difficulty: Level,
    step_cap: Option<u32>,
    max_score: u32,
}

impl<R: BufRead, W: Write> AdapterClient<R, W> {
    /// `max_score` is not part of the observation stream, so the caller
    /// supplies it.
    pub fn new(reader: R, writer: W, seed: u64, difficulty: Level, max_score: u32) -> Self {
        AdapterClient { reader, writer, seed, difficulty, step_cap: None, max_score }
    }

    pub fn with_step_cap(mut self, step_cap: u32) -> Self {
        self.step_cap = Some(step_cap);
        self
    }

    fn exchange(&mut self, request: &Request) -> Result<Response, EnvError> {
        let text = serde_json::to_string(request).map_err(|e| EnvError::Adapter(e.to_string()))?;
        writeln!(self.writer, "{text}").map_err(|e| EnvError::Adapter(e.to_string()))?;
        self.writer.flush().map_err(|e| EnvError::Adapter(e.to_string()))?;
        let mut line = String::new();
        let read = self.reader.read_line(&mut line).map_err(|e| EnvError::Adapter(e.to_string()))?;
        if read == 0 {
            return Err(EnvError::Adapter("adapter closed the stream".into()));
        }
        serde_json::from_str(&line).map_err(|e| EnvError::Adapter(e.to_string()))
    }

    fn observation(&mut self, request: &Request) -> Result<Observation, EnvError> {
        match self.exchange(request)? {
            Response::Observation(obs) => Ok(obs),
            Response::Error { detail } => Err(EnvError::Adapter(detail)),
            Response::Close => Err(EnvError::Adapter("unexpected close".into())),
        }
    }

    pub fn close(mut self) -> Result<(), EnvError> {
        match self.exchange(&Request::Close)? {
            Response::Close => Ok(()),
            other => Err(EnvError::Adapter(format!("unexpected reply to close: {other:?}"))),
        }
    }
}

impl<R: BufRead, W: Write> TextEnv for AdapterClient<R, W> {
    fn reset(&mut self) -> Result<Observation, EnvError> {
        let request = Request::Reset {
            seed: self.seed,
            difficulty: self.difficulty,
            step_cap: self.step_cap,
            world: None,
        };
        self.observation(&request)
    }

    fn step(&mut self, action: &str) -> Result<Observation, EnvError> {
        self.observation(&Request::Step { action: action.to_string() })
    }

    fn max_score(&self) -> u32 {
        self.max_score
    }
}
