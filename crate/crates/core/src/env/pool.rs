//! Entity pools: the named objects, containers and rooms worlds are built from.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::EnvError;

/// Categorical visual attribute shared by an object and its goal containers.
///
/// Tags are rendered as the dominant color of every image produced for the
/// entity, so each tag maps onto one RGB channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VisualTag {
    Red,
    Green,
    Blue,
}

impl VisualTag {
    pub const ALL: [VisualTag; 3] = [VisualTag::Red, VisualTag::Green, VisualTag::Blue];

    pub fn word(self) -> &'static str {
        match self {
            VisualTag::Red => "red",
            VisualTag::Green => "green",
            VisualTag::Blue => "blue",
        }
    }

    pub fn channel(self) -> usize {
        match self {
            VisualTag::Red => 0,
            VisualTag::Green => 1,
            VisualTag::Blue => 2,
        }
    }

    pub fn from_word(word: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.word() == word)
    }
}

/// How an object is put into a container: `in` a box, `on` a shelf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preposition {
    In,
    On,
}

impl Preposition {
    pub fn word(self) -> &'static str {
        match self {
            Preposition::In => "in",
            Preposition::On => "on",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub name: String,
    pub tag: VisualTag,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContainerEntry {
    pub name: String,
    pub tag: VisualTag,
    pub preposition: Preposition,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntityPool {
    pub objects: Vec<ObjectEntry>,
    pub containers: Vec<ContainerEntry>,
    pub rooms: Vec<String>,
    /// object name -> names of the containers it belongs in.
    pub goal_map: BTreeMap<String, Vec<String>>,
}

const RED_OBJECTS: &[&str] = &[
    "apple", "cherry", "tomato", "strawberry", "raspberry", "radish", "chili", "cranberry",
    "lobster", "ruby",
];
const GREEN_OBJECTS: &[&str] = &[
    "lime", "cucumber", "lettuce", "kiwi", "celery", "broccoli", "spinach", "pickle", "avocado",
    "olive",
];
const BLUE_OBJECTS: &[&str] = &[
    "blueberry", "sapphire", "ink", "jeans", "bluebell", "denim", "cornflower", "lapis", "mussel",
    "swimsuit",
];
const CONTAINER_KINDS: &[(&str, Preposition)] = &[
    ("box", Preposition::In),
    ("crate", Preposition::In),
    ("bin", Preposition::In),
    ("basket", Preposition::In),
    ("shelf", Preposition::On),
];
const ROOMS: &[&str] = &[
    "kitchen", "bedroom", "bathroom", "garage", "attic", "cellar", "study", "hallway",
];

impl EntityPool {
    /// Builds a pool whose goal map pairs every object with every container of
    /// the same visual tag.
    pub fn new(
        objects: Vec<ObjectEntry>,
        containers: Vec<ContainerEntry>,
        rooms: Vec<String>,
    ) -> Result<Self, EnvError> {
        let goal_map = objects
            .iter()
            .map(|o| {
                let targets = containers
                    .iter()
                    .filter(|c| c.tag == o.tag)
                    .map(|c| c.name.clone())
                    .collect();
                (o.name.clone(), targets)
            })
            .collect();
        let pool = EntityPool { objects, containers, rooms, goal_map };
        pool.validate()?;
        Ok(pool)
    }

    /// The bundled master pool: ten objects and five containers per tag.
    pub fn default_pool() -> Self {
        let mut objects = Vec::new();
        for (tag, names) in [
            (VisualTag::Red, RED_OBJECTS),
            (VisualTag::Green, GREEN_OBJECTS),
            (VisualTag::Blue, BLUE_OBJECTS),
        ] {
            objects.extend(names.iter().map(|n| ObjectEntry { name: n.to_string(), tag }));
        }
        let containers = VisualTag::ALL
            .iter()
            .flat_map(|&tag| {
                CONTAINER_KINDS.iter().map(move |&(kind, preposition)| ContainerEntry {
                    name: format!("{} {}", tag.word(), kind),
                    tag,
                    preposition,
                })
            })
            .collect();
        let rooms = ROOMS.iter().map(|r| r.to_string()).collect();
        EntityPool::new(objects, containers, rooms).expect("bundled pool is valid")
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        unique(self.objects.iter().map(|o| o.name.as_str()), "objects")?;
        unique(self.containers.iter().map(|c| c.name.as_str()), "containers")?;
        unique(self.rooms.iter().map(String::as_str), "rooms")?;
        for object in &self.objects {
            let targets = self.goal_map.get(&object.name).filter(|t| !t.is_empty()).ok_or_else(
                || EnvError::InvalidPool(format!("object `{}` has no goal container", object.name)),
            )?;
            for target in targets {
                let container = self.container(target).ok_or_else(|| {
                    EnvError::InvalidPool(format!("goal `{target}` is not a known container"))
                })?;
                if container.tag != object.tag {
                    return Err(EnvError::InvalidPool(format!(
                        "object `{}` and goal `{}` disagree on visual tag",
                        object.name, target
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn object(&self, name: &str) -> Option<&ObjectEntry> {
        self.objects.iter().find(|o| o.name == name)
    }

    pub fn container(&self, name: &str) -> Option<&ContainerEntry> {
        self.containers.iter().find(|c| c.name == name)
    }

    /// Tags that have at least one object and one container.
    pub fn families(&self) -> Vec<VisualTag> {
        VisualTag::ALL
            .into_iter()
            .filter(|&t| {
                self.objects.iter().any(|o| o.tag == t) && self.containers.iter().any(|c| c.tag == t)
            })
            .collect()
    }

    /// Restricts the pool to the named objects and containers.
    pub fn subset(&self, objects: &[String], containers: &[String], rooms: &[String]) -> Self {
        let objects: Vec<_> =
            self.objects.iter().filter(|o| objects.contains(&o.name)).cloned().collect();
        let containers: Vec<_> =
            self.containers.iter().filter(|c| containers.contains(&c.name)).cloned().collect();
        let goal_map = objects
            .iter()
            .map(|o| {
                let targets = self.goal_map[&o.name]
                    .iter()
                    .filter(|t| containers.iter().any(|c| &c.name == *t))
                    .cloned()
                    .collect();
                (o.name.clone(), targets)
            })
            .collect();
        EntityPool {
            objects,
            containers,
            rooms: self.rooms.iter().filter(|r| rooms.contains(r)).cloned().collect(),
            goal_map,
        }
    }
}

fn unique<'a>(names: impl Iterator<Item = &'a str>, what: &str) -> Result<(), EnvError> {
    let mut seen = BTreeSet::new();
    for name in names {
        if !seen.insert(name) {
            return Err(EnvError::InvalidPool(format!("duplicate name `{name}` in {what}")));
        }
    }
    Ok(())
}

/// Splits a master pool into name-disjoint training and OUT pools.
///
/// Splitting happens per visual-tag family so that every family keeps at least
/// one object and one container on each side; the tag schema itself is shared.
/// The number of OUT objects is `round(n_objects * out_fraction)`, clamped so
/// each family keeps a member on both sides.
pub fn split_pools(
    master: &EntityPool,
    seed: u64,
    out_fraction: f64,
) -> Result<(EntityPool, EntityPool), EnvError> {
    if !(0.0..=1.0).contains(&out_fraction) {
        return Err(EnvError::InvalidSplit(format!("out_fraction {out_fraction} outside [0, 1]")));
    }
    let families = master.families();
    if families.len() < 2 {
        return Err(EnvError::InvalidSplit(format!(
            "need at least 2 goal families, found {}",
            families.len()
        )));
    }
    for object in &master.objects {
        if !families.contains(&object.tag) {
            return Err(EnvError::InvalidSplit(format!(
                "object `{}` has no container family",
                object.name
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut object_groups = Vec::new();
    let mut container_groups = Vec::new();
    for &tag in &families {
        let mut objects: Vec<String> =
            master.objects.iter().filter(|o| o.tag == tag).map(|o| o.name.clone()).collect();
        let mut containers: Vec<String> =
            master.containers.iter().filter(|c| c.tag == tag).map(|c| c.name.clone()).collect();
        if objects.len() < 2 || containers.len() < 2 {
            return Err(EnvError::InvalidSplit(format!(
                "family `{}` has {} objects and {} containers; both sides need one of each",
                tag.word(),
                objects.len(),
                containers.len()
            )));
        }
        objects.shuffle(&mut rng);
        containers.shuffle(&mut rng);
        object_groups.push(objects);
        container_groups.push(containers);
    }

    let object_quota = allocate(&object_groups, out_fraction);
    let container_quota = allocate(&container_groups, out_fraction);

    let mut train = (Vec::new(), Vec::new());
    let mut out = (Vec::new(), Vec::new());
    for (group, &n_out) in object_groups.iter().zip(&object_quota) {
        out.0.extend_from_slice(&group[..n_out]);
        train.0.extend_from_slice(&group[n_out..]);
    }
    for (group, &n_out) in container_groups.iter().zip(&container_quota) {
        out.1.extend_from_slice(&group[..n_out]);
        train.1.extend_from_slice(&group[n_out..]);
    }
    let train_pool = master.subset(&train.0, &train.1, &master.rooms);
    let out_pool = master.subset(&out.0, &out.1, &master.rooms);
    train_pool.validate()?;
    out_pool.validate()?;
    Ok((train_pool, out_pool))
}

/// Distributes `round(total * fraction)` items over groups by largest
/// remainder, keeping every group within `1..len`.
fn allocate(groups: &[Vec<String>], fraction: f64) -> Vec<usize> {
    let total: usize = groups.iter().map(Vec::len).sum();
    let lo = groups.len();
    let hi = total - groups.len();
    let target = ((total as f64 * fraction).round() as usize).clamp(lo, hi);

    let mut quota: Vec<usize> = groups
        .iter()
        .map(|g| ((g.len() as f64 * fraction).floor() as usize).clamp(1, g.len() - 1))
        .collect();
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = groups[a].len() as f64 * fraction - quota[a] as f64;
        let rb = groups[b].len() as f64 * fraction - quota[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    loop {
        let assigned: usize = quota.iter().sum();
        if assigned == target {
            break;
        }
        let mut moved = false;
        if assigned < target {
            for &i in &order {
                if quota[i] < groups[i].len() - 1 {
                    quota[i] += 1;
                    moved = true;
                    break;
                }
            }
        } else {
            for &i in order.iter().rev() {
                if quota[i] > 1 {
                    quota[i] -= 1;
                    moved = true;
                    break;
                }
            }
        }
        if !moved {
            break;
        }
    }
    quota
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_pool_is_consistent() {
        let pool = EntityPool::default_pool();
        assert_eq!(pool.objects.len(), 30);
        assert_eq!(pool.containers.len(), 15);
        for object in &pool.objects {
            for target in &pool.goal_map[&object.name] {
                assert_eq!(pool.container(target).unwrap().tag, object.tag);
            }
        }
    }

    #[test]
    fn duplicate_names_rejected() {
        let objects = vec![
            ObjectEntry { name: "apple".into(), tag: VisualTag::Red },
            ObjectEntry { name: "apple".into(), tag: VisualTag::Red },
        ];
        let containers = vec![ContainerEntry {
            name: "red box".into(),
            tag: VisualTag::Red,
            preposition: Preposition::In,
        }];
        assert!(matches!(
            EntityPool::new(objects, containers, vec!["kitchen".into()]),
            Err(EnvError::InvalidPool(_))
        ));
    }

    #[test]
    fn object_without_container_rejected() {
        let objects = vec![ObjectEntry { name: "lime".into(), tag: VisualTag::Green }];
        let containers = vec![ContainerEntry {
            name: "red box".into(),
            tag: VisualTag::Red,
            preposition: Preposition::In,
        }];
        assert!(EntityPool::new(objects, containers, vec![]).is_err());
    }

    fn twenty_object_pool() -> EntityPool {
        let master = EntityPool::default_pool();
        let objects: Vec<ObjectEntry> = master
            .objects
            .iter()
            .filter(|o| o.tag != VisualTag::Blue)
            .cloned()
            .collect();
        let containers =
            master.containers.iter().filter(|c| c.tag != VisualTag::Blue).cloned().collect();
        EntityPool::new(objects, containers, master.rooms.clone()).unwrap()
    }

    #[test]
    fn twenty_objects_split_fourteen_six() {
        let pool = twenty_object_pool();
        assert_eq!(pool.objects.len(), 20);
        let (train, out) = split_pools(&pool, 3, 0.3).unwrap();
        assert_eq!(train.objects.len(), 14);
        assert_eq!(out.objects.len(), 6);
        let train_names: BTreeSet<_> = train.objects.iter().map(|o| &o.name).collect();
        assert!(out.objects.iter().all(|o| !train_names.contains(&o.name)));
    }

    #[test]
    fn split_keeps_goal_coverage() {
        let (train, out) = split_pools(&EntityPool::default_pool(), 11, 0.3).unwrap();
        for pool in [&train, &out] {
            for object in &pool.objects {
                assert!(!pool.goal_map[&object.name].is_empty());
            }
        }
    }

    #[test]
    fn unsplittable_family_is_an_error() {
        let objects = vec![
            ObjectEntry { name: "apple".into(), tag: VisualTag::Red },
            ObjectEntry { name: "cherry".into(), tag: VisualTag::Red },
            ObjectEntry { name: "lime".into(), tag: VisualTag::Green },
            ObjectEntry { name: "kiwi".into(), tag: VisualTag::Green },
        ];
        let containers = vec![
            ContainerEntry { name: "red box".into(), tag: VisualTag::Red, preposition: Preposition::In },
            ContainerEntry { name: "red bin".into(), tag: VisualTag::Red, preposition: Preposition::In },
            ContainerEntry { name: "green box".into(), tag: VisualTag::Green, preposition: Preposition::In },
        ];
        let pool = EntityPool::new(objects, containers, vec!["kitchen".into()]).unwrap();
        let err = split_pools(&pool, 0, 0.5).unwrap_err();
        assert!(err.to_string().contains("green"), "{err}");
    }
}
