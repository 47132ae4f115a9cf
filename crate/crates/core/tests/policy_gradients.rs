//! Finite-difference check of the full act pass (encoders, 2-layer
//! recurrence over a 5-step unroll, attention over memory, both heads)
//! at f64, against central differences on the forward pass alone.

use std::collections::HashMap;

use ndarray::Array2;
use panonav_core::memory::MemoryView;
use panonav_core::nn::gradcheck::{central_diff, max_rel_err, sample_coords, smooth_random};
use panonav_core::nn::{Tape, Var};
use panonav_core::policy::{PolicyArch, PolicyNet, NULL_ACTION};
use panonav_core::rng::stream;
use panonav_core::sim::Observation;

fn small_arch(seed: u64) -> PolicyArch {
    // vary shapes a little across seeds
    let bump = (seed % 3) as usize;
    PolicyArch {
        views: 4,
        channels: 3,
        rays: 6 + bump,
        view_feature: 10,
        encoder_hidden: 12 + bump,
        hidden: 8 + 2 * ((seed % 2) as usize),
        action_embed: 6,
        attn_layers: 2,
        attn_heads: 2,
        embed_dim: 9,
        use_memory: true,
    }
}

fn random_obs(arch: &PolicyArch, rng: &mut rand_chacha::ChaCha8Rng) -> Observation {
    let mut obs = Observation::zeros(arch.views, arch.channels, arch.rays);
    for v in obs.data.iter_mut() {
        *v = rand::Rng::gen_range(rng, 0.05..0.95);
    }
    obs
}

/// Unrolled 5-step loss: sum over steps of chosen log-prob plus value.
fn unrolled_loss(
    net: &PolicyNet<f64>,
    names: &[String],
    params: &[Array2<f64>],
    observations: &[Observation],
    goal: &Observation,
    view: &MemoryView<f32>,
    actions: &[usize],
) -> (Tape<f64>, Var, Vec<Var>) {
    let index: HashMap<&str, usize> = names
        .iter()
        .enumerate()
        .map(|(i, n)| (n.as_str(), i))
        .collect();
    let mut tape: Tape<f64> = Tape::new();
    let mut leaf_vars: Vec<Option<Var>> = vec![None; params.len()];
    let bound = net.bind_with(&mut tape, |tape, name| {
        let i = index[name];
        let v = tape.leaf_owned(params[i].clone());
        leaf_vars[i] = Some(v);
        v
    });

    let hidden = net.arch.hidden;
    let mut h1 = tape.leaf_owned(Array2::zeros((1, hidden)));
    let mut c1 = tape.leaf_owned(Array2::zeros((1, hidden)));
    let mut h2 = tape.leaf_owned(Array2::zeros((1, hidden)));
    let mut c2 = tape.leaf_owned(Array2::zeros((1, hidden)));
    let goal_mat = tape.leaf_owned(net.obs_matrix(goal).unwrap());
    let w_goal = net.encode_goal(&mut tape, &bound, goal_mat).unwrap();
    let kv = net.project_memory(&mut tape, &bound, view).unwrap();

    let mut prev_action = NULL_ACTION;
    let mut terms: Vec<Var> = Vec::new();
    for (t, obs) in observations.iter().enumerate() {
        let obs_mat = tape.leaf_owned(net.obs_matrix(obs).unwrap());
        let (w_obs, next) = net
            .encode_current(&mut tape, &bound, obs_mat, &[prev_action], h1, c1, h2, c2)
            .unwrap();
        [h1, c1, h2, c2] = next;
        let (logits, value) = net
            .heads(&mut tape, &bound, w_obs, w_goal, Some(&kv))
            .unwrap();
        let lp = tape.log_softmax_rows(logits);
        let picked = tape
            .gather_cols(lp, std::sync::Arc::new(vec![actions[t]]))
            .unwrap();
        let term = tape.add(picked, value).unwrap();
        terms.push(term);
        prev_action = actions[t];
    }
    let all = tape.concat_rows(&terms).unwrap();
    let loss = tape.sum_all(all);
    let vars = leaf_vars.into_iter().map(|v| v.unwrap()).collect();
    (tape, loss, vars)
}

#[test]
fn full_act_pass_gradients_match_finite_differences_over_seeds() {
    for seed in 0..20u64 {
        let arch = small_arch(seed);
        let net: PolicyNet<f64> = PolicyNet::init(arch, 1000 + seed);
        let mut rng = stream(seed, "fd-act", 0);

        let names: Vec<String> = net.store.names().cloned().collect();
        let params: Vec<Array2<f64>> = names
            .iter()
            .map(|n| (*net.store.get(n).value).clone())
            .collect();

        let observations: Vec<Observation> =
            (0..5).map(|_| random_obs(&net.arch, &mut rng)).collect();
        let goal = random_obs(&net.arch, &mut rng);
        // memory: 2 real entries, one masked slot poisoned, placeholder off
        let total_rows = 4;
        let mut rows = Array2::zeros((total_rows, net.arch.embed_dim));
        for r in 0..2 {
            for c in 0..net.arch.embed_dim {
                rows[[r, c]] = rand::Rng::gen_range(&mut rng, -1.0f32..1.0);
            }
        }
        rows.row_mut(2).fill(555.0);
        let view = MemoryView {
            rows,
            keep: vec![true, true, false, false],
            placeholder_used: false,
            version: 0,
        };
        let actions: Vec<usize> = (0..5)
            .map(|_| rand::Rng::gen_range(&mut rng, 0..4))
            .collect();

        let (tape, loss, vars) = unrolled_loss(
            &net,
            &names,
            &params,
            &observations,
            &goal,
            &view,
            &actions,
        );
        let grads = tape.backward(loss).unwrap();

        let coords = sample_coords(&params, 3, &mut rng);
        let mut eval = |p: &[Array2<f64>]| {
            let (tape, loss, _) =
                unrolled_loss(&net, &names, p, &observations, &goal, &view, &actions);
            tape.scalar(loss)
        };
        let numeric = central_diff(&mut eval, &params, &coords, 1e-5);
        let analytic: Vec<f64> = coords
            .iter()
            .map(|&(t, r, c)| grads.get(vars[t]).map_or(0.0, |g| g[[r, c]]))
            .collect();
        // a relu kink inside the stencil makes the numeric estimate wrong by
        // O(step); shrinking the step moves the kink outside the stencil, so
        // a genuine gradient bug is one that fails at every step size
        let mut err = 0.0f64;
        for (i, (&a, &n)) in analytic.iter().zip(numeric.iter()).enumerate() {
            let mut e = panonav_core::nn::gradcheck::rel_err(a, n);
            for h in [1e-6, 3e-7] {
                if e < 1e-4 {
                    break;
                }
                let refined = central_diff(&mut eval, &params, &coords[i..i + 1], h)[0];
                e = e.min(panonav_core::nn::gradcheck::rel_err(a, refined));
            }
            err = err.max(e);
        }
        assert!(err < 1e-4, "seed {seed}: max relative error {err}");
    }
}

#[test]
fn placeholder_parameter_receives_gradient_when_memory_is_empty() {
    let arch = small_arch(0);
    let net: PolicyNet<f64> = PolicyNet::init(arch, 5);
    let mut rng = stream(3, "fd-ph", 0);
    let names: Vec<String> = net.store.names().cloned().collect();
    let params: Vec<Array2<f64>> = names
        .iter()
        .map(|n| (*net.store.get(n).value).clone())
        .collect();
    let observations: Vec<Observation> = (0..2).map(|_| random_obs(&net.arch, &mut rng)).collect();
    let goal = random_obs(&net.arch, &mut rng);
    let view = MemoryView {
        rows: Array2::zeros((4, net.arch.embed_dim)),
        keep: vec![false, false, false, true],
        placeholder_used: true,
        version: 0,
    };
    let (tape, loss, vars) =
        unrolled_loss(&net, &names, &params, &observations, &goal, &view, &[0, 1]);
    let grads = tape.backward(loss).unwrap();
    let ph_idx = names.iter().position(|n| n == "placeholder").unwrap();
    let g = grads.get(vars[ph_idx]).expect("placeholder gradient exists");
    assert!(g.iter().any(|&v| v != 0.0), "placeholder gradient all zero");

    // and the finite-difference direction agrees
    let coords: Vec<(usize, usize, usize)> =
        (0..3).map(|c| (ph_idx, 0, c)).collect();
    let mut eval = |p: &[Array2<f64>]| {
        let (tape, loss, _) =
            unrolled_loss(&net, &names, p, &observations, &goal, &view, &[0, 1]);
        tape.scalar(loss)
    };
    let numeric = central_diff(&mut eval, &params, &coords, 1e-5);
    let analytic: Vec<f64> = coords.iter().map(|&(t, r, c)| {
        let _ = t;
        g[[r, c]]
    }).collect();
    assert!(max_rel_err(&analytic, &numeric) < 1e-4);
}

#[test]
fn smooth_random_probe_helper_avoids_kink_neighborhood() {
    let mut rng = stream(0, "probe", 0);
    let m = smooth_random(20, 20, &mut rng);
    assert!(m.iter().all(|&v| v.abs() >= 0.05 && v.abs() < 1.0));
}
