//! Goal-conditioned actor-critic: a shared per-view encoder feeding an
//! order-sensitive current-observation path (concat + 2-layer LSTM with a
//! previous-action embedding) and a rotation-invariant goal path (view
//! mean), a joint representation, N attention layers over the memory view,
//! and action/value heads on `cat(w_joint, z^N)`.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryView;
use crate::nn::layers::{
    attention_layer_kv, dense, dense_relu, init_attn_layer, init_lstm, lstm_step, project_kv,
    AttnLayerVars, DenseVars, LstmVars,
};
use crate::nn::{Bindings, ParamStore, Real, Tape, Var};
use crate::reach::views_matrix;
use crate::rng::stream;
use crate::sim::{Action, Observation};

pub const NUM_ACTIONS: usize = 4;
/// Previous-action embedding index used at episode start.
pub const NULL_ACTION: usize = NUM_ACTIONS;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct PolicyArch {
    pub views: usize,
    pub channels: usize,
    pub rays: usize,
    /// Per-view feature width.
    pub view_feature: usize,
    pub encoder_hidden: usize,
    /// Recurrent width H; the attention width D equals H.
    pub hidden: usize,
    pub action_embed: usize,
    pub attn_layers: usize,
    pub attn_heads: usize,
    /// Memory embedding dimension E (reachability net output).
    pub embed_dim: usize,
    pub use_memory: bool,
}

impl Default for PolicyArch {
    fn default() -> Self {
        PolicyArch {
            views: 4,
            channels: 4,
            rays: 32,
            view_feature: 128,
            encoder_hidden: 256,
            hidden: 128,
            action_embed: 16,
            attn_layers: 4,
            attn_heads: 4,
            embed_dim: 64,
            use_memory: true,
        }
    }
}

impl PolicyArch {
    pub fn strip_len(&self) -> usize {
        self.channels * self.rays
    }

    /// Width of the input to the action/value heads.
    pub fn head_input(&self) -> usize {
        if self.use_memory {
            3 * self.hidden
        } else {
            2 * self.hidden
        }
    }
}

pub struct PolicyNet<R: Real> {
    pub store: ParamStore<R>,
    pub arch: PolicyArch,
}

#[derive(Clone, Debug)]
pub struct PolicyState<R: Real> {
    pub h1: Array2<R>,
    pub c1: Array2<R>,
    pub h2: Array2<R>,
    pub c2: Array2<R>,
    pub prev_action: usize,
}

impl<R: Real> PolicyState<R> {
    pub fn reset(hidden: usize) -> Self {
        PolicyState {
            h1: Array2::zeros((1, hidden)),
            c1: Array2::zeros((1, hidden)),
            h2: Array2::zeros((1, hidden)),
            c2: Array2::zeros((1, hidden)),
            prev_action: NULL_ACTION,
        }
    }
}

pub struct BoundPolicy {
    pub view_enc1: DenseVars,
    pub view_enc2: DenseVars,
    pub obs_fc: DenseVars,
    pub act_embed: Var,
    pub lstm1: LstmVars,
    pub lstm2: LstmVars,
    pub goal_proj: DenseVars,
    pub joint_proj_w: Var,
    pub mem_proj: Option<DenseVars>,
    pub attn: Vec<AttnLayerVars>,
    pub placeholder: Option<Var>,
    pub action_head: DenseVars,
    pub value_head: DenseVars,
}

/// Per-snapshot projected keys/values, one (K, V) pair per attention layer.
pub struct MemoryKv {
    pub layers: Vec<(Var, Var)>,
    pub keep: Arc<Vec<bool>>,
}

/// Inference-side cache of the projected keys/values for one memory
/// snapshot (plain arrays; recomputed only when the memory changes).
#[derive(Clone)]
pub struct CachedKv {
    pub layers: Vec<(Arc<Array2<f32>>, Arc<Array2<f32>>)>,
    pub keep: Arc<Vec<bool>>,
    pub version: u64,
}

pub enum MemoryAttn<'a> {
    /// No-memory ablation: heads consume the joint representation alone.
    Disabled,
    /// Project the view's rows on the live tape (training path).
    View(&'a MemoryView<f32>),
    /// Precomputed keys/values (rollout path).
    Cached(&'a CachedKv),
}

impl<R: Real> PolicyNet<R> {
    pub fn init(arch: PolicyArch, seed: u64) -> Self {
        let mut rng = stream(seed, "policy.init", 0);
        let mut store = ParamStore::new();
        store.insert_dense("view_enc.l1", arch.strip_len(), arch.encoder_hidden, &mut rng);
        store.insert_dense("view_enc.l2", arch.encoder_hidden, arch.view_feature, &mut rng);
        store.insert_dense("obs_fc", arch.views * arch.view_feature, arch.hidden, &mut rng);
        store.insert_uniform(
            "act_embed",
            NUM_ACTIONS + 1,
            arch.action_embed,
            1.0 / (arch.action_embed as f64).sqrt(),
            &mut rng,
        );
        init_lstm(
            &mut store,
            "lstm1",
            arch.hidden + arch.action_embed,
            arch.hidden,
            &mut rng,
        );
        init_lstm(&mut store, "lstm2", arch.hidden, arch.hidden, &mut rng);
        store.insert_dense("goal_proj", arch.view_feature, arch.hidden, &mut rng);
        store.insert_uniform(
            "joint_proj.w",
            2 * arch.hidden,
            arch.hidden,
            1.0 / (2.0 * arch.hidden as f64).sqrt(),
            &mut rng,
        );
        if arch.use_memory {
            store.insert_dense("mem_proj", arch.embed_dim, arch.hidden, &mut rng);
            for l in 0..arch.attn_layers {
                init_attn_layer(&mut store, &format!("attn{l}"), arch.hidden, &mut rng);
            }
            store.insert_uniform(
                "placeholder",
                1,
                arch.embed_dim,
                1.0 / (arch.embed_dim as f64).sqrt(),
                &mut rng,
            );
        }
        store.insert_dense("action_head", arch.head_input(), NUM_ACTIONS, &mut rng);
        store.insert_dense("value_head", arch.head_input(), 1, &mut rng);
        PolicyNet { store, arch }
    }

    pub fn bind(&self, tape: &mut Tape<R>, bindings: &mut Bindings) -> BoundPolicy {
        let store = &self.store;
        self.bind_with(tape, |tape, name| store.bind(tape, name, bindings))
    }

    /// Bind every parameter through an arbitrary leaf factory (tests use
    /// this to wire finite-difference probe arrays into the graph).
    pub fn bind_with(
        &self,
        tape: &mut Tape<R>,
        mut leaf: impl FnMut(&mut Tape<R>, &str) -> Var,
    ) -> BoundPolicy {
        let mut d = |tape: &mut Tape<R>, prefix: &str| DenseVars {
            w: leaf(tape, &format!("{prefix}.w")),
            b: leaf(tape, &format!("{prefix}.b")),
        };
        let view_enc1 = d(tape, "view_enc.l1");
        let view_enc2 = d(tape, "view_enc.l2");
        let obs_fc = d(tape, "obs_fc");
        let goal_proj = d(tape, "goal_proj");
        let mem_proj = self.arch.use_memory.then(|| d(tape, "mem_proj"));
        let action_head = d(tape, "action_head");
        let value_head = d(tape, "value_head");
        let mut l = |tape: &mut Tape<R>, prefix: &str| LstmVars {
            wx: leaf(tape, &format!("{prefix}.wx")),
            wh: leaf(tape, &format!("{prefix}.wh")),
            b: leaf(tape, &format!("{prefix}.b")),
        };
        let lstm1 = l(tape, "lstm1");
        let lstm2 = l(tape, "lstm2");
        let attn = (0..if self.arch.use_memory { self.arch.attn_layers } else { 0 })
            .map(|li| {
                let p = format!("attn{li}");
                AttnLayerVars {
                    attn: crate::nn::layers::AttnVars {
                        wq: leaf(tape, &format!("{p}.attn.q.w")),
                        bq: leaf(tape, &format!("{p}.attn.q.b")),
                        wk: leaf(tape, &format!("{p}.attn.k.w")),
                        bk: leaf(tape, &format!("{p}.attn.k.b")),
                        wv: leaf(tape, &format!("{p}.attn.v.w")),
                        bv: leaf(tape, &format!("{p}.attn.v.b")),
                        wo: leaf(tape, &format!("{p}.attn.o.w")),
                        bo: leaf(tape, &format!("{p}.attn.o.b")),
                    },
                    ln1: crate::nn::layers::LayerNormVars {
                        gain: leaf(tape, &format!("{p}.ln1.gain")),
                        bias: leaf(tape, &format!("{p}.ln1.bias")),
                    },
                    ff1: DenseVars {
                        w: leaf(tape, &format!("{p}.ff1.w")),
                        b: leaf(tape, &format!("{p}.ff1.b")),
                    },
                    ff2: DenseVars {
                        w: leaf(tape, &format!("{p}.ff2.w")),
                        b: leaf(tape, &format!("{p}.ff2.b")),
                    },
                    ln2: crate::nn::layers::LayerNormVars {
                        gain: leaf(tape, &format!("{p}.ln2.gain")),
                        bias: leaf(tape, &format!("{p}.ln2.bias")),
                    },
                }
            })
            .collect();
        BoundPolicy {
            view_enc1,
            view_enc2,
            obs_fc,
            act_embed: leaf(tape, "act_embed"),
            lstm1,
            lstm2,
            goal_proj,
            joint_proj_w: leaf(tape, "joint_proj.w"),
            mem_proj,
            attn,
            placeholder: self.arch.use_memory.then(|| leaf(tape, "placeholder")),
            action_head,
            value_head,
        }
    }

    pub fn obs_matrix(&self, obs: &Observation) -> Result<Array2<R>> {
        views_matrix::<R>(&[obs], self.arch.views, self.arch.strip_len())
    }

    /// Shared per-view encoder: `(B * v) x (C * W)` to `(B * v) x F`.
    fn encode_views(&self, tape: &mut Tape<R>, bound: &BoundPolicy, x: Var) -> Result<Var> {
        let h = dense_relu(tape, x, bound.view_enc1.w, bound.view_enc1.b)?;
        dense_relu(tape, h, bound.view_enc2.w, bound.view_enc2.b)
    }

    /// Current-observation path: concat per-view features, reduce, and run
    /// one step of the 2-layer recurrent core with the previous-action
    /// embedding. Returns (w_obs, next state vars).
    #[allow(clippy::too_many_arguments)]
    pub fn encode_current(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundPolicy,
        obs_mat: Var,
        prev_actions: &[usize],
        h1: Var,
        c1: Var,
        h2: Var,
        c2: Var,
    ) -> Result<(Var, [Var; 4])> {
        let batch = prev_actions.len();
        let feats = self.encode_views(tape, bound, obs_mat)?;
        let cat = tape.reshape(feats, batch, self.arch.views * self.arch.view_feature)?;
        let reduced = dense_relu(tape, cat, bound.obs_fc.w, bound.obs_fc.b)?;
        let act = tape.gather_rows(bound.act_embed, Arc::new(prev_actions.to_vec()))?;
        let lstm_in = tape.concat_cols(&[reduced, act])?;
        let (h1n, c1n) = lstm_step(tape, lstm_in, h1, c1, &bound.lstm1)?;
        let (h2n, c2n) = lstm_step(tape, h1n, h2, c2, &bound.lstm2)?;
        Ok((h2n, [h1n, c1n, h2n, c2n]))
    }

    /// Goal path: shared view encoder, mean over views, dense projection.
    pub fn encode_goal(&self, tape: &mut Tape<R>, bound: &BoundPolicy, goal_mat: Var) -> Result<Var> {
        let feats = self.encode_views(tape, bound, goal_mat)?;
        let pooled = tape.mean_row_groups(feats, self.arch.views)?;
        dense_relu(tape, pooled, bound.goal_proj.w, bound.goal_proj.b)
    }

    /// Project a memory view to per-layer keys/values on the tape. When the
    /// placeholder row is active it is wired to the learned placeholder
    /// parameter so gradients reach it.
    pub fn project_memory(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundPolicy,
        view: &MemoryView<f32>,
    ) -> Result<MemoryKv> {
        let keep = Arc::new(view.keep.clone());
        let rows = if view.placeholder_used {
            let total = view.rows.nrows();
            let pad = tape.leaf_owned(Array2::zeros((total - 1, self.arch.embed_dim)));
            let ph = bound
                .placeholder
                .ok_or_else(|| Error::Invalid("placeholder used with memory disabled".into()))?;
            tape.concat_rows(&[pad, ph])?
        } else {
            let m = Array2::from_shape_fn(view.rows.dim(), |(r, c)| {
                R::of(f64::from(view.rows[[r, c]]))
            });
            tape.leaf_owned(m)
        };
        let mem_proj = bound
            .mem_proj
            .as_ref()
            .ok_or_else(|| Error::Invalid("memory projection missing".into()))?;
        let projected = dense(tape, rows, mem_proj.w, mem_proj.b)?;
        let mut layers = Vec::with_capacity(bound.attn.len());
        for vars in &bound.attn {
            layers.push(project_kv(tape, projected, &keep, &vars.attn)?);
        }
        Ok(MemoryKv { layers, keep })
    }

    /// Attention stack and heads. Returns (logits, value).
    pub fn heads(
        &self,
        tape: &mut Tape<R>,
        bound: &BoundPolicy,
        w_obs: Var,
        w_goal: Var,
        memory: Option<&MemoryKv>,
    ) -> Result<(Var, Var)> {
        let w_joint = tape.concat_cols(&[w_obs, w_goal])?;
        let head_in = match memory {
            Some(kv) => {
                let mut z = tape.matmul(w_joint, bound.joint_proj_w)?;
                for (vars, (k, v)) in bound.attn.iter().zip(kv.layers.iter()) {
                    z = attention_layer_kv(tape, z, *k, *v, &kv.keep, vars, self.arch.attn_heads)?;
                }
                tape.concat_cols(&[w_joint, z])?
            }
            None => w_joint,
        };
        let logits = dense(tape, head_in, bound.action_head.w, bound.action_head.b)?;
        let value = dense(tape, head_in, bound.value_head.w, bound.value_head.b)?;
        Ok((logits, value))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug)]
pub struct ActOutput {
    pub action: Action,
    pub log_prob: f32,
    pub value: f32,
    pub state: PolicyState<f32>,
}

impl PolicyNet<f32> {
    /// Precompute the projected keys/values for a memory snapshot (rollout
    /// path; no gradients). Uses the same graph code as training.
    pub fn cache_memory(&self, view: &MemoryView<f32>) -> Result<CachedKv> {
        let mut tape: Tape<f32> = Tape::new();
        let mut bindings = Bindings::new();
        let bound = self.bind(&mut tape, &mut bindings);
        let kv = self.project_memory(&mut tape, &bound, view)?;
        Ok(CachedKv {
            layers: kv
                .layers
                .iter()
                .map(|(k, v)| (tape.value_arc(*k), tape.value_arc(*v)))
                .collect(),
            keep: kv.keep,
            version: view.version,
        })
    }

    /// One action selection. `memory` must have at least one unmasked row
    /// unless the no-memory ablation is configured.
    pub fn act(
        &self,
        obs: &Observation,
        goal_obs: &Observation,
        state: &PolicyState<f32>,
        memory: MemoryAttn<'_>,
        rng: &mut ChaCha8Rng,
        mode: ActMode,
    ) -> Result<ActOutput> {
        let mut tape: Tape<f32> = Tape::new();
        let mut bindings = Bindings::new();
        let bound = self.bind(&mut tape, &mut bindings);

        let obs_mat = tape.leaf_owned(self.obs_matrix(obs)?);
        let goal_mat = tape.leaf_owned(self.obs_matrix(goal_obs)?);
        let h1 = tape.leaf_owned(state.h1.clone());
        let c1 = tape.leaf_owned(state.c1.clone());
        let h2 = tape.leaf_owned(state.h2.clone());
        let c2 = tape.leaf_owned(state.c2.clone());
        let (w_obs, next) = self.encode_current(
            &mut tape,
            &bound,
            obs_mat,
            &[state.prev_action],
            h1,
            c1,
            h2,
            c2,
        )?;
        let w_goal = self.encode_goal(&mut tape, &bound, goal_mat)?;

        let kv_storage;
        let kv_ref = match memory {
            MemoryAttn::Disabled => None,
            MemoryAttn::View(view) => {
                kv_storage = self.project_memory(&mut tape, &bound, view)?;
                Some(&kv_storage)
            }
            MemoryAttn::Cached(cache) => {
                let layers = cache
                    .layers
                    .iter()
                    .map(|(k, v)| (tape.leaf(Arc::clone(k)), tape.leaf(Arc::clone(v))))
                    .collect();
                kv_storage = MemoryKv {
                    layers,
                    keep: Arc::clone(&cache.keep),
                };
                Some(&kv_storage)
            }
        };
        let (logits, value) = self.heads(&mut tape, &bound, w_obs, w_goal, kv_ref)?;
        let log_probs = tape.log_softmax_rows(logits);

        let lp = tape.value(log_probs);
        let action_idx = match mode {
            ActMode::Greedy => {
                let row = tape.value(logits).row(0).to_owned();
                argmax(row.as_slice().unwrap())
            }
            ActMode::Sample => {
                let u: f64 = rng.gen_range(0.0..1.0);
                let mut cum = 0.0f64;
                let mut chosen = NUM_ACTIONS - 1;
                for (i, &l) in lp.row(0).iter().enumerate() {
                    cum += f64::from(l.exp());
                    if u < cum {
                        chosen = i;
                        break;
                    }
                }
                chosen
            }
        };
        let log_prob = lp[[0, action_idx]];
        let value = tape.value(value)[[0, 0]];
        let state = PolicyState {
            h1: tape.value(next[0]).clone(),
            c1: tape.value(next[1]).clone(),
            h2: tape.value(next[2]).clone(),
            c2: tape.value(next[3]).clone(),
            prev_action: action_idx,
        };
        Ok(ActOutput {
            action: Action::from_index(action_idx).expect("valid action index"),
            log_prob,
            value,
            state,
        })
    }
}

fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Mean embedding direction check helper used by tests: relative L2 change.
pub fn relative_change<R: Real>(a: &Array2<R>, b: &Array2<R>) -> f64 {
    let num: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = x.as_f64() - y.as_f64();
            d * d
        })
        .sum::<f64>()
        .sqrt();
    let den: f64 = a.iter().map(|&x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt();
    num / den.max(1e-12)
}

/// Sum of per-view features of a goal observation, for tests.
pub fn goal_vector<R: Real>(net: &PolicyNet<R>, goal: &Observation) -> Result<Array2<R>> {
    let mut tape = Tape::new();
    let mut bindings = Bindings::new();
    let bound = net.bind(&mut tape, &mut bindings);
    let m = tape.leaf_owned(net.obs_matrix(goal)?);
    let g = net.encode_goal(&mut tape, &bound, m)?;
    Ok(tape.value(g).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{attention_view, MemoryBuffer};
    use crate::sim::{generate_scene, random_walk, SceneParams, WalkConfig};

    fn test_obs(n: usize) -> Vec<Observation> {
        let scene = generate_scene(41, &SceneParams::default()).unwrap();
        let cfg = WalkConfig {
            steps: n,
            ..WalkConfig::default()
        };
        random_walk(&scene, &cfg, 3)
            .unwrap()
            .into_iter()
            .map(|(o, _)| o)
            .collect()
    }

    fn small_arch(use_memory: bool) -> PolicyArch {
        PolicyArch {
            use_memory,
            ..PolicyArch::default()
        }
    }

    #[test]
    fn goal_encoding_is_invariant_to_any_view_permutation() {
        let net: PolicyNet<f32> = PolicyNet::init(small_arch(true), 1);
        let obs = &test_obs(1)[0];
        let base = goal_vector(&net, obs).unwrap();
        for shift in 1..4 {
            let rotated = obs.rotate_views(shift);
            let g = goal_vector(&net, &rotated).unwrap();
            assert!(relative_change(&base, &g) <= 1e-5, "shift {shift}");
        }
        // arbitrary permutation (swap views 0 and 2 only)
        let mut swapped = obs.clone();
        let v0 = obs.view_strip(0).to_vec();
        let v2 = obs.view_strip(2).to_vec();
        swapped.view_strip_mut(0).copy_from_slice(&v2);
        swapped.view_strip_mut(2).copy_from_slice(&v0);
        let g = goal_vector(&net, &swapped).unwrap();
        assert!(relative_change(&base, &g) <= 1e-5);
    }

    #[test]
    fn zero_goal_observation_with_zero_biases_encodes_to_zero() {
        let net: PolicyNet<f32> = PolicyNet::init(small_arch(true), 2);
        let obs = Observation::zeros(4, 4, 32);
        let g = goal_vector(&net, &obs).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn current_encoding_is_view_order_sensitive() {
        let net: PolicyNet<f32> = PolicyNet::init(small_arch(true), 3);
        let obs = &test_obs(1)[0];
        let rotated = obs.rotate_views(1);

        let encode = |o: &Observation| {
            let mut tape: Tape<f32> = Tape::new();
            let mut b = Bindings::new();
            let bound = net.bind(&mut tape, &mut b);
            let m = tape.leaf_owned(net.obs_matrix(o).unwrap());
            let st = PolicyState::<f32>::reset(net.arch.hidden);
            let h1 = tape.leaf_owned(st.h1.clone());
            let c1 = tape.leaf_owned(st.c1.clone());
            let h2 = tape.leaf_owned(st.h2.clone());
            let c2 = tape.leaf_owned(st.c2.clone());
            let (w, _) = net
                .encode_current(&mut tape, &bound, m, &[NULL_ACTION], h1, c1, h2, c2)
                .unwrap();
            tape.value(w).clone()
        };
        let a = encode(obs);
        let b = encode(&rotated);
        assert!(relative_change(&a, &b) > 1e-4, "concat path must be order sensitive");
    }

    #[test]
    fn greedy_act_is_deterministic_and_log_prob_matches_softmax() {
        let net: PolicyNet<f32> = PolicyNet::init(small_arch(true), 4);
        let obs = test_obs(2);
        let state = PolicyState::reset(net.arch.hidden);
        let episodic: MemoryBuffer<f32> = MemoryBuffer::episodic(20, 0.5);
        let view = attention_view(&episodic, None, net.arch.embed_dim, 0);
        let mut rng = stream(5, "act", 0);
        let a = net
            .act(&obs[0], &obs[1], &state, MemoryAttn::View(&view), &mut rng, ActMode::Greedy)
            .unwrap();
        let b = net
            .act(&obs[0], &obs[1], &state, MemoryAttn::View(&view), &mut rng, ActMode::Greedy)
            .unwrap();
        assert_eq!(a.action, b.action);
        assert_eq!(a.log_prob, b.log_prob);
        assert_eq!(a.value, b.value);
        // log_prob is a log softmax output: exp sums to 1 over actions
        assert!(a.log_prob <= 0.0);
    }

    #[test]
    fn cached_kv_matches_on_tape_projection() {
        let net: PolicyNet<f32> = PolicyNet::init(small_arch(true), 6);
        let reach: crate::reach::ReachabilityNet<f32> =
            crate::reach::ReachabilityNet::init(crate::reach::ReachArch::default(), 8);
        let obs = test_obs(3);
        let mut episodic: MemoryBuffer<f32> = MemoryBuffer::episodic(20, 1.1);
        for (s, o) in obs.iter().enumerate().take(2) {
            let e = reach.embed(o).unwrap();
            episodic.maybe_insert_embedding(&reach, &e, s as u64).unwrap();
        }
        let view = attention_view(&episodic, None, net.arch.embed_dim, 1);
        let state = PolicyState::reset(net.arch.hidden);
        let mut rng = stream(6, "act", 0);
        let direct = net
            .act(&obs[2], &obs[0], &state, MemoryAttn::View(&view), &mut rng, ActMode::Greedy)
            .unwrap();
        let cache = net.cache_memory(&view).unwrap();
        let cached = net
            .act(&obs[2], &obs[0], &state, MemoryAttn::Cached(&cache), &mut rng, ActMode::Greedy)
            .unwrap();
        assert_eq!(direct.action, cached.action);
        assert_eq!(direct.log_prob, cached.log_prob);
        assert_eq!(direct.value, cached.value);
    }

    #[test]
    fn ablation_equals_full_model_with_zeroed_attention_head_rows() {
        // build the full net, zero the attention part of both heads, and
        // copy the shared parameters into an ablated net
        let full: PolicyNet<f32> = PolicyNet::init(small_arch(true), 7);
        let mut ablated: PolicyNet<f32> = PolicyNet::init(small_arch(false), 7);

        let h = full.arch.hidden;
        let mut full_zeroed = PolicyNet::<f32> {
            store: full.store.clone(),
            arch: full.arch,
        };
        // zero rows 2H.. of the head weights (the z^N block)
        for head in ["action_head", "value_head"] {
            let name = format!("{head}.w");
            let mut w = (*full_zeroed.store.get(&name).value).clone();
            w.slice_mut(ndarray::s![2 * h.., ..]).fill(0.0);
            full_zeroed.store.set_value(&name, w.clone());
            // ablated head = first 2H rows
            ablated
                .store
                .set_value(&name, w.slice(ndarray::s![..2 * h, ..]).to_owned());
            let b = (*full_zeroed.store.get(&format!("{head}.b")).value).clone();
            ablated.store.set_value(&format!("{head}.b"), b);
        }
        // share every common parameter
        for name in [
            "view_enc.l1.w", "view_enc.l1.b", "view_enc.l2.w", "view_enc.l2.b",
            "obs_fc.w", "obs_fc.b", "act_embed", "goal_proj.w", "goal_proj.b",
            "joint_proj.w", "lstm1.wx", "lstm1.wh", "lstm1.b",
            "lstm2.wx", "lstm2.wh", "lstm2.b",
        ] {
            ablated
                .store
                .set_value(name, (*full_zeroed.store.get(name).value).clone());
        }

        let obs = test_obs(2);
        let state = PolicyState::reset(h);
        let episodic: MemoryBuffer<f32> = MemoryBuffer::episodic(20, 0.5);
        let view = attention_view(&episodic, None, full.arch.embed_dim, 0);
        let mut rng = stream(9, "act", 0);
        let with_mem = full_zeroed
            .act(&obs[0], &obs[1], &state, MemoryAttn::View(&view), &mut rng, ActMode::Greedy)
            .unwrap();
        let without = ablated
            .act(&obs[0], &obs[1], &state, MemoryAttn::Disabled, &mut rng, ActMode::Greedy)
            .unwrap();
        assert_eq!(with_mem.action, without.action);
        assert!((with_mem.log_prob - without.log_prob).abs() < 1e-6);
        assert!((with_mem.value - without.value).abs() < 1e-6);
    }

    #[test]
    fn logits_are_bitwise_invariant_to_masked_memory_rows() {
        let net: PolicyNet<f32> = PolicyNet::init(small_arch(true), 10);
        let obs = test_obs(2);
        let state = PolicyState::reset(net.arch.hidden);
        let episodic: MemoryBuffer<f32> = MemoryBuffer::episodic(4, 0.5);
        let mut view = attention_view(&episodic, None, net.arch.embed_dim, 0);
        let mut rng = stream(11, "act", 0);
        let a = net
            .act(&obs[0], &obs[1], &state, MemoryAttn::View(&view), &mut rng, ActMode::Greedy)
            .unwrap();
        // poison the masked (padded) rows
        for r in 0..view.rows.nrows() - 1 {
            view.rows.row_mut(r).fill(777.0);
        }
        let b = net
            .act(&obs[0], &obs[1], &state, MemoryAttn::View(&view), &mut rng, ActMode::Greedy)
            .unwrap();
        assert_eq!(a.log_prob.to_bits(), b.log_prob.to_bits());
        assert_eq!(a.value.to_bits(), b.value.to_bits());
    }

    #[test]
    fn action_probabilities_sum_to_one() {
        let net: PolicyNet<f32> = PolicyNet::init(small_arch(true), 12);
        let obs = test_obs(2);
        let state = PolicyState::reset(net.arch.hidden);
        let episodic: MemoryBuffer<f32> = MemoryBuffer::episodic(20, 0.5);
        let view = attention_view(&episodic, None, net.arch.embed_dim, 0);
        let mut rng = stream(13, "act", 0);
        // sample many times; empirical support must be the full action set
        // (probabilities near uniform for a fresh net) and log_probs finite
        let mut seen = [false; NUM_ACTIONS];
        for _ in 0..200 {
            let out = net
                .act(&obs[0], &obs[1], &state, MemoryAttn::View(&view), &mut rng, ActMode::Sample)
                .unwrap();
            assert!(out.log_prob.is_finite());
            seen[out.action.index()] = true;
        }
        assert!(seen.iter().all(|&s| s), "sampling missed actions: {seen:?}");
    }
}
