//! Game state, transitions and observation rendering.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::command::{parse_command, Command, Verb};
use super::pool::Preposition;
use super::world::{Direction, Placement, WorldSpec};
use super::EnvError;

pub const DEFAULT_STEP_CAP: u32 = 50;
pub const INVALID_ACTION_TEXT: &str = "You can't do that here.";

/// Current position of an object.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Location {
    Floor { room: String },
    Container { name: String },
    Inventory,
}

impl From<&Placement> for Location {
    fn from(p: &Placement) -> Self {
        match p {
            Placement::Floor { room } => Location::Floor { room: room.clone() },
            Placement::Container { name } => Location::Container { name: name.clone() },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub text: String,
    pub admissible_actions: Vec<String>,
    pub reward: f64,
    pub score: u32,
    pub done: bool,
}

#[derive(Clone, Debug)]
pub struct GameState {
    pub world: Arc<WorldSpec>,
    pub agent_room: String,
    pub object_locations: BTreeMap<String, Location>,
    pub inventory: BTreeSet<String>,
    pub steps_taken: u32,
    pub step_cap: u32,
    pub score: u32,
    pub placed: BTreeMap<String, bool>,
    pub done: bool,
}

/// Everything that distinguishes two states of the same world, used to
/// enumerate the reachable state graph.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateKey {
    pub agent_room: String,
    pub locations: Vec<(String, Location)>,
    pub placed: Vec<bool>,
    pub score: u32,
}

impl GameState {
    pub fn key(&self) -> StateKey {
        StateKey {
            agent_room: self.agent_room.clone(),
            locations: self.object_locations.iter().map(|(k, v)| (k.clone(), v.clone())).collect(),
            placed: self.placed.values().copied().collect(),
            score: self.score,
        }
    }

    pub fn normalized_score(&self) -> f64 {
        f64::from(self.score) / f64::from(self.world.max_score)
    }

    fn room_of<'a>(&'a self, location: &'a Location) -> Option<&'a str> {
        match location {
            Location::Floor { room } => Some(room),
            Location::Container { name } => self.world.container_rooms.get(name).map(String::as_str),
            Location::Inventory => None,
        }
    }

    fn object_in_room(&self, object: &str) -> bool {
        self.object_locations
            .get(object)
            .and_then(|l| self.room_of(l))
            .is_some_and(|r| r == self.agent_room)
    }

    fn container_here(&self, name: &str) -> bool {
        self.world.container_rooms.get(name).is_some_and(|r| *r == self.agent_room)
    }

    fn containers_here(&self) -> Vec<&str> {
        self.world
            .container_rooms
            .iter()
            .filter(|(_, r)| **r == self.agent_room)
            .map(|(c, _)| c.as_str())
            .collect()
    }

    fn objects_here(&self) -> Vec<&str> {
        self.object_locations
            .keys()
            .filter(|o| self.object_in_room(o))
            .map(String::as_str)
            .collect()
    }

    fn exit(&self, target: &str) -> Option<(Direction, String)> {
        self.world
            .exits_from(&self.agent_room)
            .find(|e| e.direction.word() == target || e.to == target)
            .map(|e| (e.direction, e.to.clone()))
    }
}

pub fn reset(world: Arc<WorldSpec>, step_cap: u32) -> Result<(GameState, Observation), EnvError> {
    if step_cap < 1 {
        return Err(EnvError::InvalidStepCap);
    }
    let object_locations: BTreeMap<String, Location> =
        world.placements.iter().map(|(o, p)| (o.clone(), Location::from(p))).collect();
    let placed = world.goals.keys().map(|o| (o.clone(), false)).collect();
    let agent_room = world.rooms[0].clone();
    let state = GameState {
        world,
        agent_room,
        object_locations,
        inventory: BTreeSet::new(),
        steps_taken: 0,
        step_cap,
        score: 0,
        placed,
        done: false,
    };
    let observation = Observation {
        text: describe(&state),
        admissible_actions: admissible_actions(&state),
        reward: 0.0,
        score: 0,
        done: false,
    };
    Ok((state, observation))
}

pub fn step(state: &GameState, action_text: &str) -> Result<(GameState, Observation), EnvError> {
    if state.done {
        return Err(EnvError::EpisodeDone);
    }
    let mut next = state.clone();
    next.steps_taken += 1;
    let outcome = parse_command(action_text).ok().and_then(|c| apply(&mut next, &c));
    let (reward, text) = match outcome {
        Some((reward, feedback)) => {
            let description = describe(&next);
            let text = if feedback.is_empty() {
                description
            } else {
                format!("{feedback} {description}")
            };
            (reward, text)
        }
        None => {
            next = state.clone();
            next.steps_taken += 1;
            (0.0, INVALID_ACTION_TEXT.to_string())
        }
    };
    next.done = next.score == next.world.max_score || next.steps_taken >= next.step_cap;
    let admissible_actions = if next.done { Vec::new() } else { admissible_actions(&next) };
    let observation =
        Observation { text, admissible_actions, reward, score: next.score, done: next.done };
    Ok((next, observation))
}

/// Applies a parsed command; `None` when its preconditions do not hold.
fn apply(state: &mut GameState, command: &Command) -> Option<(f64, String)> {
    let arg1 = command.arg1.as_deref();
    match command.verb {
        Verb::Look => Some((0.0, String::new())),
        Verb::Examine => {
            let target = arg1?;
            if state.inventory.contains(target) || state.object_in_room(target) {
                Some((0.0, format!("It is an ordinary {target}.")))
            } else if state.container_here(target) {
                let contents: Vec<&str> = state
                    .object_locations
                    .iter()
                    .filter(|(_, l)| matches!(l, Location::Container { name } if name == target))
                    .map(|(o, _)| o.as_str())
                    .collect();
                if contents.is_empty() {
                    Some((0.0, format!("The {target} is empty.")))
                } else {
                    Some((0.0, format!("The {target} holds {}.", list_with_articles(&contents))))
                }
            } else {
                None
            }
        }
        Verb::Take => {
            let object = arg1?;
            if state.inventory.contains(object) || !state.object_in_room(object) {
                return None;
            }
            state.object_locations.insert(object.to_string(), Location::Inventory);
            state.inventory.insert(object.to_string());
            Some((0.0, format!("You take the {object}.")))
        }
        Verb::Put => {
            let object = arg1?;
            let target = command.arg2.as_deref()?;
            let preposition = command.preposition?;
            if !state.inventory.contains(object) || !state.container_here(target) {
                return None;
            }
            let container = state.world.entities.container(target)?;
            if container.preposition != preposition {
                return None;
            }
            state.inventory.remove(object);
            state
                .object_locations
                .insert(object.to_string(), Location::Container { name: target.to_string() });
            let compatible = state
                .world
                .entities
                .goal_map
                .get(object)
                .is_some_and(|targets| targets.iter().any(|t| t == target));
            let first_time = state.placed.get(object).is_some_and(|p| !p);
            let mut feedback =
                format!("You put the {object} {} the {target}.", preposition.word());
            if compatible && first_time {
                state.placed.insert(object.to_string(), true);
                state.score += 1;
                feedback.push_str(" Your score has gone up by one point.");
                Some((1.0, feedback))
            } else {
                Some((0.0, feedback))
            }
        }
        Verb::Go => {
            let (direction, room) = state.exit(arg1?)?;
            state.agent_room = room;
            Some((0.0, format!("You go {}.", direction.word())))
        }
    }
}

/// Every action string whose parse succeeds and whose preconditions hold,
/// sorted and duplicate-free.
pub fn admissible_actions(state: &GameState) -> Vec<String> {
    let mut actions = BTreeSet::new();
    actions.insert("look".to_string());
    for object in state.objects_here() {
        actions.insert(format!("examine {object}"));
        if !state.inventory.contains(object) {
            actions.insert(format!("take {object}"));
        }
    }
    for object in &state.inventory {
        actions.insert(format!("examine {object}"));
    }
    for container in state.containers_here() {
        actions.insert(format!("examine {container}"));
        let preposition = state
            .world
            .entities
            .container(container)
            .map_or(Preposition::In, |c| c.preposition);
        for object in &state.inventory {
            actions.insert(format!("put {object} {} {container}", preposition.word()));
        }
    }
    for exit in state.world.exits_from(&state.agent_room) {
        actions.insert(format!("go {}", exit.direction.word()));
    }
    actions.into_iter().collect()
}

fn article(noun: &str) -> &'static str {
    match noun.chars().next() {
        Some('a' | 'e' | 'i' | 'o' | 'u') => "an",
        _ => "a",
    }
}

fn capitalized_article(noun: &str) -> &'static str {
    if article(noun) == "an" {
        "An"
    } else {
        "A"
    }
}

fn list_with_articles(items: &[&str]) -> String {
    let parts: Vec<String> = items.iter().map(|i| format!("{} {i}", article(i))).collect();
    match parts.len() {
        0 => String::new(),
        1 => parts[0].clone(),
        n => format!("{} and {}", parts[..n - 1].join(", "), parts[n - 1]),
    }
}

/// Room description. Objects are rendered relationally ("An apple is on the
/// floor.", "A lime is in the green bin.", "A kiwi is in your inventory.").
pub fn describe(state: &GameState) -> String {
    let mut sentences = vec![format!("You are in the {}.", state.agent_room)];
    for (object, location) in &state.object_locations {
        let sentence = match location {
            Location::Floor { room } if *room == state.agent_room => {
                format!("{} {object} is on the floor.", capitalized_article(object))
            }
            Location::Container { name } if state.container_here(name) => {
                let preposition = state
                    .world
                    .entities
                    .container(name)
                    .map_or(Preposition::In, |c| c.preposition);
                format!(
                    "{} {object} is {} the {name}.",
                    capitalized_article(object),
                    preposition.word()
                )
            }
            Location::Inventory => {
                format!("{} {object} is in your inventory.", capitalized_article(object))
            }
            _ => continue,
        };
        sentences.push(sentence);
    }
    let containers = state.containers_here();
    if !containers.is_empty() {
        sentences.push(format!("You see {}.", list_with_articles(&containers)));
    }
    let exits: Vec<&str> =
        state.world.exits_from(&state.agent_room).map(|e| e.direction.word()).collect();
    if !exits.is_empty() {
        let mut sorted = exits;
        sorted.sort_unstable();
        let joined = match sorted.len() {
            1 => sorted[0].to_string(),
            n => format!("{} and {}", sorted[..n - 1].join(", "), sorted[n - 1]),
        };
        sentences.push(format!("Exits lead {joined}."));
    }
    sentences.join(" ")
}

/// Words the engine can emit for `world`: template vocabulary plus the
/// world's entity and room names. Used to build agent vocabularies.
pub fn vocabulary_words(world: &WorldSpec) -> BTreeSet<String> {
    let mut words: BTreeSet<String> = TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect();
    let names = world
        .entities
        .objects
        .iter()
        .map(|o| o.name.as_str())
        .chain(world.entities.containers.iter().map(|c| c.name.as_str()))
        .chain(world.rooms.iter().map(String::as_str));
    for name in names {
        words.extend(name.split_whitespace().map(str::to_string));
    }
    words
}

pub(crate) const TEMPLATE_WORDS: &[&str] = &[
    "you", "are", "in", "the", "a", "an", "is", "on", "floor", "your", "inventory", "see", "and",
    "exits", "lead", "north", "south", "east", "west", "it", "ordinary", "empty", "holds", "take",
    "put", "go", "examine", "look", "score", "has", "gone", "up", "by", "one", "point", "can't",
    "do", "that", "here",
];

/// Template words that are not part of any noun phrase.
pub const TEMPLATE_STOPWORDS: &[&str] = &[
    "you", "are", "is", "see", "and", "exits", "lead", "north", "south", "east", "west", "it",
    "holds", "take", "put", "go", "examine", "look", "score", "has", "gone", "up", "by", "one",
    "point", "can't", "do", "here",
];

/// Common interface over the local engine and adapter-served games.
pub trait TextEnv {
    fn reset(&mut self) -> Result<Observation, EnvError>;
    fn step(&mut self, action: &str) -> Result<Observation, EnvError>;
    fn max_score(&self) -> u32;
}

/// The bundled engine behind [`TextEnv`].
pub struct LocalEnv {
    world: Arc<WorldSpec>,
    step_cap: u32,
    state: Option<GameState>,
}

impl LocalEnv {
    pub fn new(world: Arc<WorldSpec>, step_cap: u32) -> Self {
        LocalEnv { world, step_cap, state: None }
    }

    pub fn state(&self) -> Option<&GameState> {
        self.state.as_ref()
    }
}

impl TextEnv for LocalEnv {
    fn reset(&mut self) -> Result<Observation, EnvError> {
        let (state, observation) = reset(self.world.clone(), self.step_cap)?;
        self.state = Some(state);
        Ok(observation)
    }

    fn step(&mut self, action: &str) -> Result<Observation, EnvError> {
        let state = self.state.as_ref().ok_or(EnvError::NotReset)?;
        let (next, observation) = step(state, action)?;
        self.state = Some(next);
        Ok(observation)
    }

    fn max_score(&self) -> u32 {
        self.world.max_score
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::pool::EntityPool;
    use crate::env::world::{generate_world, Difficulty, Level};

    fn easy_world(n_objects: usize) -> Arc<WorldSpec> {
        let pool = EntityPool::default_pool();
        let d = Difficulty::new(Level::Easy, 1, n_objects).unwrap();
        Arc::new(generate_world(7, &d, &pool).unwrap())
    }

    #[test]
    fn reset_describes_every_placed_object() {
        let world = easy_world(3);
        let (state, obs) = reset(world.clone(), 50).unwrap();
        assert_eq!(state.steps_taken, 0);
        assert_eq!(obs.score, 0);
        assert_eq!(obs.reward, 0.0);
        assert!(!obs.done);
        assert!(obs.admissible_actions.contains(&"look".to_string()));
        for object in world.goals.keys() {
            assert!(obs.text.contains(&format!("{object} is on the floor")), "{}", obs.text);
        }
    }

    #[test]
    fn take_then_put_scores_once() {
        let world = easy_world(1);
        let (object, goal) = world.goals.iter().next().unwrap();
        let preposition = world.entities.container(goal).unwrap().preposition.word();
        let (s0, _) = reset(world.clone(), 50).unwrap();
        let (s1, o1) = step(&s0, &format!("take {object}")).unwrap();
        assert!(s1.inventory.contains(object));
        assert_eq!(o1.reward, 0.0);

        let put = format!("put {object} {preposition} {goal}");
        let (s2, o2) = step(&s1, &put).unwrap();
        assert_eq!(o2.reward, 1.0);
        assert_eq!(s2.score, 1);
        assert!(o2.done, "single-object world finishes");
    }

    #[test]
    fn placed_flag_blocks_second_reward() {
        let world = easy_world(2);
        let mut names = world.goals.iter();
        let (object, goal) = names.next().unwrap();
        let preposition = world.entities.container(goal).unwrap().preposition.word();
        let put = format!("put {object} {preposition} {goal}");
        let (s, _) = reset(world.clone(), 50).unwrap();
        let (s, _) = step(&s, &format!("take {object}")).unwrap();
        let (s, o) = step(&s, &put).unwrap();
        assert_eq!(o.reward, 1.0);
        let (s, _) = step(&s, &format!("take {object}")).unwrap();
        let (s, o) = step(&s, &put).unwrap();
        assert_eq!(o.reward, 0.0);
        assert_eq!(s.score, 1);
    }

    #[test]
    fn invalid_action_costs_a_step() {
        let world = easy_world(1);
        let (s0, _) = reset(world, 50).unwrap();
        let (s1, o) = step(&s0, "dance wildly").unwrap();
        assert_eq!(o.text, INVALID_ACTION_TEXT);
        assert_eq!(o.reward, 0.0);
        assert_eq!(s1.steps_taken, 1);
        assert_eq!(s1.key(), s0.key());
        let (_, o) = step(&s0, "take unicorn").unwrap();
        assert_eq!(o.text, INVALID_ACTION_TEXT);
    }

    #[test]
    fn stepping_a_finished_episode_errors() {
        let world = easy_world(1);
        let (s, _) = reset(world, 1).unwrap();
        let (s, o) = step(&s, "look").unwrap();
        assert!(o.done);
        assert!(o.admissible_actions.is_empty());
        assert!(matches!(step(&s, "look"), Err(EnvError::EpisodeDone)));
    }

    #[test]
    fn admissible_actions_filters_by_precondition() {
        let world = easy_world(2);
        let (s, _) = reset(world, 50).unwrap();
        let actions = admissible_actions(&s);
        assert!(actions.iter().all(|a| !a.starts_with("put ")));
        assert!(actions.iter().all(|a| !a.starts_with("go ")));
        let mut sorted = actions.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(actions, sorted);
    }

    #[test]
    fn hard_world_exits_are_walkable() {
        let pool = EntityPool::default_pool();
        let world =
            Arc::new(generate_world(4, &Difficulty::sample(Level::Hard, 4), &pool).unwrap());
        let (s, obs) = reset(world, 50).unwrap();
        let go = obs.admissible_actions.iter().find(|a| a.starts_with("go ")).unwrap();
        let (s2, o2) = step(&s, go).unwrap();
        assert_ne!(s2.agent_room, s.agent_room);
        assert_ne!(o2.text, INVALID_ACTION_TEXT);
    }

    #[test]
    fn step_cap_zero_rejected() {
        assert!(matches!(reset(easy_world(1), 0), Err(EnvError::InvalidStepCap)));
    }
}
