//! World generation and the world file format.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pool::{EntityPool, VisualTag};
use super::EnvError;
use crate::seed::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Easy,
    Medium,
    Hard,
}

impl Level {
    pub const ALL: [Level; 3] = [Level::Easy, Level::Medium, Level::Hard];

    pub fn name(self) -> &'static str {
        match self {
            Level::Easy => "easy",
            Level::Medium => "medium",
            Level::Hard => "hard",
        }
    }
}

impl std::str::FromStr for Level {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "easy" => Ok(Level::Easy),
            "medium" => Ok(Level::Medium),
            "hard" => Ok(Level::Hard),
            other => Err(EnvError::InvalidDifficulty(format!("unknown level `{other}`"))),
        }
    }
}

/// Room and object counts for one generated world.
///
/// easy: one room, at most 3 objects. medium: one room, at most 5 objects.
/// hard: 3 or 4 rooms with 4 or 5 objects.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Difficulty {
    pub level: Level,
    pub n_rooms: usize,
    pub n_objects: usize,
}

impl Difficulty {
    pub fn new(level: Level, n_rooms: usize, n_objects: usize) -> Result<Self, EnvError> {
        let ok = n_objects >= 1
            && match level {
                Level::Easy => n_rooms == 1 && n_objects <= 3,
                Level::Medium => n_rooms == 1 && n_objects <= 5,
                Level::Hard => (3..=4).contains(&n_rooms) && (4..=5).contains(&n_objects),
            };
        if ok {
            Ok(Difficulty { level, n_rooms, n_objects })
        } else {
            Err(EnvError::InvalidDifficulty(format!(
                "{} level cannot have {n_rooms} rooms and {n_objects} objects",
                level.name()
            )))
        }
    }

    /// Draws room and object counts for `level` deterministically from `seed`.
    pub fn sample(level: Level, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, 0xD1FF]));
        let (n_rooms, n_objects) = match level {
            Level::Easy => (1, rng.gen_range(1..=3)),
            Level::Medium => (1, rng.gen_range(3..=5)),
            Level::Hard => (rng.gen_range(3..=4), rng.gen_range(4..=5)),
        };
        Difficulty { level, n_rooms, n_objects }
    }

    pub fn check(&self) -> Result<(), EnvError> {
        Difficulty::new(self.level, self.n_rooms, self.n_objects).map(|_| ())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    North,
    South,
    East,
    West,
}

impl Direction {
    pub const ALL: [Direction; 4] =
        [Direction::North, Direction::South, Direction::East, Direction::West];

    pub fn word(self) -> &'static str {
        match self {
            Direction::North => "north",
            Direction::South => "south",
            Direction::East => "east",
            Direction::West => "west",
        }
    }

    pub fn opposite(self) -> Self {
        match self {
            Direction::North => Direction::South,
            Direction::South => Direction::North,
            Direction::East => Direction::West,
            Direction::West => Direction::East,
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|d| d.word() == word)
    }
}

/// One directed edge of the room graph; every connection is stored both ways.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exit {
    pub from: String,
    pub direction: Direction,
    pub to: String,
}

/// Where an object starts: on the floor of a room or inside a container.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Placement {
    Floor { room: String },
    Container { name: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub seed: u64,
    pub difficulty: Difficulty,
    pub rooms: Vec<String>,
    pub room_graph: Vec<Exit>,
    /// container name -> room it stands in.
    pub container_rooms: BTreeMap<String, String>,
    pub placements: BTreeMap<String, Placement>,
    pub goals: BTreeMap<String, String>,
    pub max_score: u32,
    pub entities: EntityPool,
}

impl WorldSpec {
    pub fn exits_from(&self, room: &str) -> impl Iterator<Item = &Exit> + '_ {
        let room = room.to_string();
        self.room_graph.iter().filter(move |e| e.from == room)
    }

    pub fn object_tag(&self, name: &str) -> Option<VisualTag> {
        self.entities.object(name).map(|o| o.tag)
    }

    /// A short stable identifier, e.g. `easy-7`.
    pub fn id(&self) -> String {
        format!("{}-{}", self.difficulty.level.name(), self.seed)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("world serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EnvError> {
        let world: WorldSpec =
            serde_json::from_str(text).map_err(|e| EnvError::WorldFile(e.to_string()))?;
        world.validate()?;
        Ok(world)
    }

    pub fn save(&self, path: &Path) -> Result<(), EnvError> {
        std::fs::write(path, self.to_json()).map_err(|e| EnvError::WorldFile(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, EnvError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| EnvError::WorldFile(e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |msg: String| Err(EnvError::WorldFile(msg));
        self.difficulty.check()?;
        if self.max_score < 1 || self.max_score as usize != self.goals.len() {
            return bad(format!("max_score {} does not match goals", self.max_score));
        }
        for (object, goal) in &self.goals {
            match self.placements.get(object) {
                None => return bad(format!("object `{object}` has no placement")),
                Some(Placement::Container { name }) if name == goal => {
                    return bad(format!("object `{object}` starts in its goal"))
                }
                _ => {}
            }
            if !self.container_rooms.contains_key(goal) {
                return bad(format!("goal `{goal}` is not in the world"));
            }
        }
        if !self.connected() {
            return bad("room graph is not connected".into());
        }
        Ok(())
    }

    fn connected(&self) -> bool {
        let Some(first) = self.rooms.first() else { return false };
        let mut seen = vec![first.clone()];
        let mut frontier = vec![first.clone()];
        while let Some(room) = frontier.pop() {
            for exit in self.exits_from(&room) {
                if !seen.contains(&exit.to) {
                    seen.push(exit.to.clone());
                    frontier.push(exit.to.clone());
                }
            }
        }
        seen.len() == self.rooms.len()
    }
}

/// Generates a house-cleanup world: every goal object starts misplaced and
/// must be put into the container sharing its visual tag.
///
/// Every world holds one container per tag family present in the pool. Easy
/// worlds draw all objects from a single family, so the colour of the objects
/// in view identifies the correct container; harder levels mix families.
pub fn generate_world(
    seed: u64,
    difficulty: &Difficulty,
    pool: &EntityPool,
) -> Result<WorldSpec, EnvError> {
    difficulty.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, difficulty.level as u64 + 1]));

    if pool.rooms.len() < difficulty.n_rooms {
        return Err(EnvError::PoolTooSmall {
            category: "rooms",
            needed: difficulty.n_rooms,
            available: pool.rooms.len(),
        });
    }
    let mut rooms = pool.rooms.clone();
    rooms.shuffle(&mut rng);
    rooms.truncate(difficulty.n_rooms);

    let room_graph = connect_rooms(&rooms, &mut rng);

    let families = pool.families();
    if families.len() < 2 {
        return Err(EnvError::PoolTooSmall {
            category: "containers",
            needed: 2,
            available: families.len(),
        });
    }
    let mut container_rooms = BTreeMap::new();
    let mut family_container = BTreeMap::new();
    for &tag in &families {
        let candidates: Vec<_> = pool.containers.iter().filter(|c| c.tag == tag).collect();
        let chosen = candidates.choose(&mut rng).expect("family has containers");
        let room = rooms.choose(&mut rng).expect("at least one room").clone();
        container_rooms.insert(chosen.name.clone(), room);
        family_container.insert(tag, chosen.name.clone());
    }

    let objects: Vec<_> = if difficulty.level == Level::Easy {
        let viable: Vec<VisualTag> = families
            .iter()
            .copied()
            .filter(|&t| pool.objects.iter().filter(|o| o.tag == t).count() >= difficulty.n_objects)
            .collect();
        let Some(&theme) = viable.choose(&mut rng) else {
            let largest = families
                .iter()
                .map(|&t| pool.objects.iter().filter(|o| o.tag == t).count())
                .max()
                .unwrap_or(0);
            return Err(EnvError::PoolTooSmall {
                category: "objects",
                needed: difficulty.n_objects,
                available: largest,
            });
        };
        let members: Vec<_> = pool.objects.iter().filter(|o| o.tag == theme).collect();
        members.choose_multiple(&mut rng, difficulty.n_objects).cloned().collect()
    } else {
        let members: Vec<_> =
            pool.objects.iter().filter(|o| family_container.contains_key(&o.tag)).collect();
        if members.len() < difficulty.n_objects {
            return Err(EnvError::PoolTooSmall {
                category: "objects",
                needed: difficulty.n_objects,
                available: members.len(),
            });
        }
        members.choose_multiple(&mut rng, difficulty.n_objects).cloned().collect()
    };

    let mut placements = BTreeMap::new();
    let mut goals = BTreeMap::new();
    for object in &objects {
        let goal = family_container[&object.tag].clone();
        let room = rooms.choose(&mut rng).expect("at least one room").clone();
        // Easy worlds keep everything on the floor; harder ones sometimes hide
        // an object in the wrong container.
        let wrong: Vec<&String> = container_rooms
            .iter()
            .filter(|(name, r)| **r == room && **name != goal)
            .map(|(name, _)| name)
            .collect();
        let placement = if difficulty.level != Level::Easy && !wrong.is_empty() && rng.gen_bool(0.3)
        {
            Placement::Container { name: wrong[rng.gen_range(0..wrong.len())].clone() }
        } else {
            Placement::Floor { room }
        };
        placements.insert(object.name.clone(), placement);
        goals.insert(object.name.clone(), goal);
    }

    let object_names: Vec<String> = objects.iter().map(|o| o.name.clone()).collect();
    let container_names: Vec<String> = container_rooms.keys().cloned().collect();
    let mut ordered_rooms = rooms.clone();
    ordered_rooms.sort();
    let entities = pool.subset(&object_names, &container_names, &ordered_rooms);

    let world = WorldSpec {
        seed,
        difficulty: *difficulty,
        rooms,
        room_graph,
        container_rooms,
        placements,
        goals,
        max_score: objects.len() as u32,
        entities,
    };
    world.validate()?;
    Ok(world)
}

/// Random spanning tree over the rooms, each edge labelled with a compass
/// direction unused at both endpoints.
fn connect_rooms(rooms: &[String], rng: &mut ChaCha8Rng) -> Vec<Exit> {
    let mut edges: Vec<Exit> = Vec::new();
    for i in 1..rooms.len() {
        loop {
            let j = rng.gen_range(0..i);
            let used = |room: &str, d: Direction| {
                edges.iter().any(|e| e.from == room && e.direction == d)
            };
            let free: Vec<Direction> = Direction::ALL
                .into_iter()
                .filter(|&d| !used(&rooms[j], d) && !used(&rooms[i], d.opposite()))
                .collect();
            if let Some(&d) = free.choose(rng) {
                edges.push(Exit { from: rooms[j].clone(), direction: d, to: rooms[i].clone() });
                edges.push(Exit {
                    from: rooms[i].clone(),
                    direction: d.opposite(),
                    to: rooms[j].clone(),
                });
                break;
            }
        }
    }
    edges
}
