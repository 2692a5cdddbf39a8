//! Synthetic caption/image pairs for generator pretraining.
//!
//! Two kinds of captions: "<color> <noun>" over generic nouns, where the
//! color word alone fixes the dominant channel, and captions naming game
//! entities ("apple", "apple on floor", "blue shelf", "kitchen") rendered in
//! the entity's color. Rooms and other uncolored things are gray.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ImageError, ImageTensor};
use crate::env::{EntityPool, VisualTag};
use crate::seed::{hash_str, mix_seed};

pub const COLOR_WORDS: [&str; 3] = ["red", "green", "blue"];

pub const GENERIC_NOUNS: &[&str] = &[
    "ball", "car", "cup", "hat", "kite", "lamp", "bag", "vase", "sock", "door", "chair", "bowl",
    "pen", "boat", "flag", "bird", "fish", "shoe", "coat", "bell", "book", "drum", "fan", "glove",
];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CaptionDataset {
    pub pairs: Vec<(String, ImageTensor)>,
}

impl CaptionDataset {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn captions(&self) -> impl Iterator<Item = &str> {
        self.pairs.iter().map(|(c, _)| c.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionOptions {
    pub size: usize,
    pub seed: u64,
    /// Generic nouns kept out of the dataset entirely.
    pub held_out: Vec<String>,
    /// Entity captions are added for this pool when present.
    pub include_pool: bool,
}

impl Default for CaptionOptions {
    fn default() -> Self {
        CaptionOptions {
            size: super::DEFAULT_SIZE,
            seed: 0,
            held_out: GENERIC_NOUNS[GENERIC_NOUNS.len() - 6..].iter().map(|s| s.to_string()).collect(),
            include_pool: true,
        }
    }
}

/// A disc of the tag's color on a gray background, or plain gray for
/// `None`. Small seeded jitter keeps pixels from being identical.
pub fn swatch(tag: Option<VisualTag>, size: usize, seed: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let center = (size as f64 - 1.0) / 2.0;
    let radius = 0.38 * size as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (dy, dx) = (y as f64 - center, x as f64 - center);
            let inside = dy * dy + dx * dx <= radius * radius;
            for c in 0..3 {
                let base = match tag {
                    Some(t) if inside => {
                        if t.channel() == c {
                            0.85
                        } else {
                            0.15
                        }
                    }
                    _ => 0.4,
                };
                let v: f64 = base + rng.gen_range(-0.04..0.04);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    ImageTensor { height: size, width: size, data }
}

fn push(pairs: &mut Vec<(String, ImageTensor)>, caption: String, tag: Option<VisualTag>, opts: &CaptionOptions) {
    let seed = mix_seed(&[opts.seed, hash_str(&caption)]);
    pairs.push((caption, swatch(tag, opts.size, seed)));
}

/// Builds the pretraining set; pair order is shuffled by `opts.seed`.
pub fn caption_dataset(pool: Option<&EntityPool>, opts: &CaptionOptions) -> Result<CaptionDataset, ImageError> {
    let mut pairs = Vec::new();
    for noun in GENERIC_NOUNS.iter().filter(|n| !opts.held_out.iter().any(|h| h == *n)) {
        for tag in VisualTag::ALL {
            push(&mut pairs, format!("{} {noun}", tag.word()), Some(tag), opts);
        }
    }
    if let (Some(pool), true) = (pool, opts.include_pool) {
        for object in &pool.objects {
            let tag = Some(object.tag);
            push(&mut pairs, object.name.clone(), tag, opts);
            push(&mut pairs, format!("{} on floor", object.name), tag, opts);
            push(&mut pairs, format!("{} in inventory", object.name), tag, opts);
        }
        for container in &pool.containers {
            push(&mut pairs, container.name.clone(), Some(container.tag), opts);
        }
        for room in &pool.rooms {
            push(&mut pairs, room.clone(), None, opts);
        }
        push(&mut pairs, "floor".to_string(), None, opts);
        push(&mut pairs, "inventory".to_string(), None, opts);
    }
    if pairs.is_empty() {
        return Err(ImageError::EmptyDataset);
    }
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(opts.seed));
    Ok(CaptionDataset { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn swatch_dominant_channel_matches_tag() {
        for tag in VisualTag::ALL {
            let means = swatch(Some(tag), 16, 1).channel_means();
            let c = tag.channel();
            assert!((0..3).filter(|&o| o != c).all(|o| means[c] > means[o]));
        }
        let gray = swatch(None, 16, 1).channel_means();
        assert!(gray.iter().all(|m| (m - 0.4).abs() < 0.02));
    }

    #[test]
    fn held_out_nouns_absent() {
        let opts = CaptionOptions { size: 8, ..CaptionOptions::default() };
        let data = caption_dataset(Some(&EntityPool::default_pool()), &opts).unwrap();
        for held in &opts.held_out {
            assert!(data.captions().all(|c| !c.split(' ').any(|w| w == held)));
        }
        assert!(data.captions().any(|c| c == "apple on floor"));
    }

    #[test]
    fn empty_dataset_rejected() {
        let opts = CaptionOptions {
            size: 8,
            held_out: GENERIC_NOUNS.iter().map(|s| s.to_string()).collect(),
            include_pool: false,
            seed: 0,
        };
        assert!(matches!(caption_dataset(None, &opts), Err(ImageError::EmptyDataset)));
    }
}
