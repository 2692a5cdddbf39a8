//! Action scoring MLP and value head over the fused feature.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::embed::Embedding;
use super::ops::{affine, axpy, dot, matvec_t_acc, outer_acc, softmax};
use super::{Grads, NnError, ParamStore, Params};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionScorer {
    pub fused_dim: usize,
    pub hidden: usize,
}

pub struct ScoreCache {
    actions: Vec<Vec<usize>>,
    inputs: Vec<Vec<f64>>,
    hidden: Vec<Vec<f64>>,
    fused: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub logits: Vec<f64>,
    pub policy: Vec<f64>,
    pub value: f64,
}

impl ActionScorer {
    pub fn new(fused_dim: usize, hidden: usize) -> Self {
        ActionScorer { fused_dim, hidden }
    }

    pub fn init(&self, store: &mut ParamStore, embed_dim: usize, rng: &mut ChaCha8Rng) {
        let input = embed_dim + self.fused_dim;
        store.add_uniform("score.w1", &[self.hidden, input], input, rng);
        store.add_uniform("score.b1", &[self.hidden], input, rng);
        store.add_uniform("score.w2", &[1, self.hidden], self.hidden, rng);
        store.add_uniform("score.b2", &[1], self.hidden, rng);
        store.add_uniform("value.w", &[1, self.fused_dim], self.fused_dim, rng);
        store.add_uniform("value.b", &[1], self.fused_dim, rng);
    }

    /// Scores each action (given as token ids) against `fused`. Each action
    /// is represented by the mean of its token embeddings.
    pub fn forward(
        &self,
        params: &Params,
        embedding: &Embedding,
        fused: &[f64],
        actions: &[Vec<usize>],
    ) -> Result<(Scores, ScoreCache), NnError> {
        if actions.is_empty() {
            return Err(NnError::NoActions);
        }
        let w1 = params.get("score.w1");
        let b1 = params.get("score.b1");
        let w2 = params.get("score.w2");
        let b2 = params.get("score.b2")[0];
        let mut logits = Vec::with_capacity(actions.len());
        let mut inputs = Vec::with_capacity(actions.len());
        let mut hidden = Vec::with_capacity(actions.len());
        for ids in actions {
            let mut input = embedding.mean(params, ids);
            input.extend_from_slice(fused);
            let mut h = vec![0.0; self.hidden];
            affine(w1, b1, &input, &mut h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            logits.push(b2 + dot(w2, &h));
            inputs.push(input);
            hidden.push(h);
        }
        let value = params.get("value.b")[0] + dot(params.get("value.w"), fused);
        let policy = softmax(&logits);
        let cache = ScoreCache { actions: actions.to_vec(), inputs, hidden, fused: fused.to_vec() };
        Ok((Scores { logits, policy, value }, cache))
    }

    /// Backpropagates logit and value gradients; returns the gradient with
    /// respect to the fused feature.
    pub fn backward(
        &self,
        params: &Params,
        grads: &mut Grads,
        embedding: &Embedding,
        cache: &ScoreCache,
        d_logits: &[f64],
        d_value: f64,
    ) -> Vec<f64> {
        let embed_dim = embedding.dim;
        let mut d_fused = vec![0.0; self.fused_dim];
        let w1 = params.get("score.w1");
        let w2 = params.get("score.w2");
        for (i, &g) in d_logits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let h = &cache.hidden[i];
            axpy(g, h, grads.get_mut("score.w2"));
            grads.get_mut("score.b2")[0] += g;
            let d_pre: Vec<f64> = h.iter().zip(w2).map(|(&hv, &wv)| if hv > 0.0 { g * wv } else { 0.0 }).collect();
            outer_acc(&d_pre, &cache.inputs[i], grads.get_mut("score.w1"));
            axpy(1.0, &d_pre, grads.get_mut("score.b1"));
            let mut d_input = vec![0.0; embed_dim + self.fused_dim];
            matvec_t_acc(w1, &d_pre, &mut d_input);
            embedding.mean_backward(grads, &cache.actions[i], &d_input[..embed_dim]);
            axpy(1.0, &d_input[embed_dim..], &mut d_fused);
        }
        if d_value != 0.0 {
            axpy(d_value, &cache.fused, grads.get_mut("value.w"));
            grads.get_mut("value.b")[0] += d_value;
            axpy(d_value, params.get("value.w"), &mut d_fused);
        }
        d_fused
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup() -> (ActionScorer, Embedding, ParamStore) {
        let scorer = ActionScorer::new(6, 5);
        let emb = Embedding::new("embed", 4);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        emb.init(&mut store, 7, &mut rng);
        scorer.init(&mut store, 4, &mut rng);
        (scorer, emb, store)
    }

    #[test]
    fn policy_normalized_and_empty_rejected() {
        let (scorer, emb, store) = setup();
        let fused = vec![0.3; 6];
        let actions = vec![vec![1, 2], vec![3], vec![4, 5, 6]];
        let (scores, _) = scorer.forward(&store.params, &emb, &fused, &actions).unwrap();
        assert!((scores.policy.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let (single, _) = scorer.forward(&store.params, &emb, &fused, &actions[..1]).unwrap();
        assert_eq!(single.policy, vec![1.0]);
        assert!(matches!(scorer.forward(&store.params, &emb, &fused, &[]), Err(NnError::NoActions)));
    }

    #[test]
    fn identical_actions_give_uniform_policy() {
        let (scorer, emb, store) = setup();
        let (scores, _) = scorer.forward(&store.params, &emb, &[0.1; 6], &[vec![2], vec![2], vec![2]]).unwrap();
        assert!(scores.policy.iter().all(|p| (p - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (scorer, emb, mut store) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fused: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let actions = vec![vec![1, 2], vec![0], vec![2, 3, 3]];
        let u = [0.7, -0.2, 0.4];
        let c = -1.3;
        let loss = |params: &Params, fused: &[f64]| {
            let (s, _) = scorer.forward(params, &emb, fused, &actions).unwrap();
            s.logits.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + c * s.value
        };
        let (_, cache) = scorer.forward(&store.params, &emb, &fused, &actions).unwrap();
        let d_fused = scorer.backward(&store.params, &mut store.grads, &emb, &cache, &u, c);
        let eps = 1e-6;
        for i in 0..6 {
            let mut p = fused.clone();
            p[i] += eps;
            let mut m = fused.clone();
            m[i] -= eps;
            let fd = (loss(&store.params, &p) - loss(&store.params, &m)) / (2.0 * eps);
            assert!((fd - d_fused[i]).abs() < 1e-8);
        }
        let names: Vec<String> = store.params.iter().map(|(k, _)| k.clone()).collect();
        for name in names {
            for i in 0..store.params.get(&name).len() {
                let mut p = store.params.clone();
                p.get_mut(&name)[i] += eps;
                let mut m = store.params.clone();
                m.get_mut(&name)[i] -= eps;
                let fd = (loss(&p, &fused) - loss(&m, &fused)) / (2.0 * eps);
                let an = store.grads.get(&name)[i];
                assert!((fd - an).abs() < 1e-8, "{name}[{i}]: {fd} vs {an}");
            }
        }
    }
}
