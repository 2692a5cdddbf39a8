//! The action grammar accepted by the engine.
//!
//! ```text
//! take <obj> | put <obj> (in|on) <target> | go <room|direction> | examine <entity> | look
//! ```
//!
//! Matching is case-insensitive and the articles `the`, `a` and `an` are ignored.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::pool::Preposition;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verb {
    Take,
    Put,
    Go,
    Examine,
    Look,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Command {
    pub verb: Verb,
    pub arg1: Option<String>,
    pub arg2: Option<String>,
    pub preposition: Option<Preposition>,
}

/// Unrecognized input; carries the first offending token (empty for blank input).
#[derive(Clone, Debug, PartialEq, Eq, Error)]
#[error("cannot parse command near `{0}`")]
pub struct ParseError(pub String);

const ARTICLES: &[&str] = &["the", "a", "an"];

pub fn parse_command(action_text: &str) -> Result<Command, ParseError> {
    let lowered = action_text.to_lowercase();
    let tokens: Vec<&str> =
        lowered.split_whitespace().filter(|t| !ARTICLES.contains(t)).collect();
    let Some((&verb, rest)) = tokens.split_first() else {
        return Err(ParseError(String::new()));
    };
    let joined = |words: &[&str]| -> Option<String> {
        (!words.is_empty()).then(|| words.join(" "))
    };
    let command = |verb, arg1, arg2, preposition| Command { verb, arg1, arg2, preposition };

    match verb {
        "look" => match rest.first() {
            None => Ok(command(Verb::Look, None, None, None)),
            Some(extra) => Err(ParseError(extra.to_string())),
        },
        "take" | "examine" | "go" => {
            let arg = joined(rest).ok_or_else(|| ParseError(verb.to_string()))?;
            let verb = match verb {
                "take" => Verb::Take,
                "examine" => Verb::Examine,
                _ => Verb::Go,
            };
            Ok(command(verb, Some(arg), None, None))
        }
        "put" => {
            let split = rest
                .iter()
                .position(|t| *t == "in" || *t == "on")
                .ok_or_else(|| ParseError(rest.last().unwrap_or(&verb).to_string()))?;
            let preposition = if rest[split] == "in" { Preposition::In } else { Preposition::On };
            let object = joined(&rest[..split]).ok_or_else(|| ParseError(rest[split].to_string()))?;
            let target =
                joined(&rest[split + 1..]).ok_or_else(|| ParseError(rest[split].to_string()))?;
            Ok(command(Verb::Put, Some(object), Some(target), Some(preposition)))
        }
        other => Err(ParseError(other.to_string())),
    }
}
