//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

use std::collections::VecDeque;

use latent_grpo::grpo::{
    policy_step, surrogate, surrogate_gradient, Gradient, Mode, RolloutGroup, SampledResponse, StateId, TabularPolicy,
    TokenStep,
};
use latent_grpo::maze::{Action, Cell, Maze};
use latent_grpo::waterfill::StateInstance;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// `τ` by enumerating every candidate capped set: sort-free, O(V²).
///
/// For each breakpoint `b_j = (1+ε)·h_j` the capped set at level `τ` is
/// `{i : b_i ≤ τ}`; the level solving mass conservation on that set is
/// accepted when it falls between consecutive breakpoints.
pub fn tau_by_enumeration(pi_ref: &[f64], pi_prop: &[f64], eps: f64) -> f64 {
    let caps: Vec<f64> = pi_prop.iter().map(|p| (1.0 + eps) * p).collect();
    let breaks: Vec<f64> = caps.iter().zip(pi_ref).map(|(c, r)| c / r).collect();
    let mut levels: Vec<f64> = breaks.clone();
    levels.push(0.0);
    levels.push(f64::INFINITY);
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    for w in levels.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let capped: Vec<bool> = breaks.iter().map(|&b| b <= lo).collect();
        let capped_mass: f64 = caps.iter().zip(&capped).filter(|(_, &c)| c).map(|(c, _)| c).sum();
        let free_ref: f64 = pi_ref.iter().zip(&capped).filter(|(_, &c)| !c).map(|(r, _)| r).sum();
        if free_ref == 0.0 {
            continue;
        }
        let tau = (1.0 - capped_mass) / free_ref;
        if tau >= lo - 1e-12 && tau <= hi + 1e-12 {
            return tau;
        }
    }
    panic!("no consistent capped set");
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn neighbor(maze: &Maze, c: Cell, a: Action) -> Cell {
    let (dx, dy): (i64, i64) = match a {
        Action::Up => (0, -1),
        Action::Down => (0, 1),
        Action::Left => (-1, 0),
        Action::Right => (1, 0),
        Action::Stay => return c,
    };
    let (x, y) = (c.x as i64 + dx, c.y as i64 + dy);
    if x < 0 || y < 0 || x >= maze.width() as i64 || y >= maze.height() as i64 {
        return c;
    }
    let n = Cell::new(x as u32, y as u32);
    let blocked = maze.walls().any(|(p, q)| (p == c && q == n) || (p == n && q == c));
    if blocked {
        c
    } else {
        n
    }
}

/// Breadth-first distances to the goal, from the wall list alone.
pub fn bfs_distances(maze: &Maze) -> Vec<Option<u32>> {
    let w = maze.width();
    let idx = |c: Cell| (c.y * w + c.x) as usize;
    let mut dist = vec![None; maze.cell_count()];
    dist[idx(maze.goal())] = Some(0);
    let mut queue = VecDeque::from([maze.goal()]);
    while let Some(c) = queue.pop_front() {
        let d = dist[idx(c)].unwrap();
        for a in Action::ALL {
            let n = neighbor(maze, c, a);
            if dist[idx(n)].is_none() {
                dist[idx(n)] = Some(d + 1);
                queue.push_back(n);
            }
        }
    }
    dist
}

/// Exact probability that a rollout of `policy` enters the goal within
/// `max_steps`, by propagating the cell distribution with the goal absorbing.
pub fn goal_probability(maze: &Maze, policy: &TabularPolicy) -> f64 {
    let w = maze.width();
    let n = maze.cell_count();
    let mut mass = vec![0.0; n];
    mass[(maze.start().y * w + maze.start().x) as usize] = 1.0;
    let goal = (maze.goal().y * w + maze.goal().x) as usize;
    let mut absorbed = 0.0;
    for _ in 0..maze.max_steps() {
        let mut next = vec![0.0; n];
        for (id, &m) in mass.iter().enumerate() {
            if m == 0.0 {
                continue;
            }
            let cell = Cell::new(id as u32 % w, id as u32 / w);
            let probs = policy.action_probs(StateId(id as u32));
            for a in Action::ALL {
                let t = neighbor(maze, cell, a);
                next[(t.y * w + t.x) as usize] += m * probs[a.index()];
            }
        }
        absorbed += next[goal];
        next[goal] = 0.0;
        mass = next;
    }
    absorbed
}

/// Random policy over `states` states and a random group on it. Stored old
/// and reference probabilities are the current ones perturbed multiplicatively.
pub fn random_config(rng: &mut ChaCha8Rng) -> (TabularPolicy, RolloutGroup) {
    let actions = rng.gen_range(2..=6);
    let states = rng.gen_range(1..=4u32);
    let temperature = rng.gen_range(0.5..2.0);
    let mut policy = TabularPolicy::with_temperature(actions, temperature).unwrap();
    for s in 0..states {
        let row = (0..actions).map(|_| rng.gen_range(-2.0..2.0)).collect();
        policy.set_logits(StateId(s), row).unwrap();
    }
    let g = rng.gen_range(2..=6);
    let responses = (0..g)
        .map(|_| {
            let len = rng.gen_range(1..=6);
            let steps = (0..len)
                .map(|_| {
                    let state = StateId(rng.gen_range(0..states));
                    let action = rng.gen_range(0..actions);
                    let p = policy.prob(state, action);
                    let perturb = |rng: &mut ChaCha8Rng| (p * rng.gen_range(-0.4f64..0.4).exp()).min(1.0);
                    TokenStep { state, action, old_prob: perturb(rng), ref_prob: perturb(rng) }
                })
                .collect();
            SampledResponse { steps, reward: rng.gen_range(-1.0..2.0) }
        })
        .collect();
    (policy, RolloutGroup::new(StateId(0), responses, 6).unwrap())
}

/// True when some ratio lies within `margin` of a clip boundary.
pub fn near_kink(policy: &TabularPolicy, group: &RolloutGroup, eps: f64, margin: f64) -> bool {
    group.responses().iter().flat_map(|r| &r.steps).any(|s| {
        let ratio = policy.prob(s.state, s.action) / s.old_prob;
        (ratio - (1.0 + eps)).abs() < margin || (ratio - (1.0 - eps)).abs() < margin
    })
}

/// Central differences of the surrogate value over every logit of every
/// state the policy has a row for.
pub fn finite_difference(
    policy: &TabularPolicy,
    group: &RolloutGroup,
    eps: f64,
    beta: f64,
    mode: Mode,
    h: f64,
) -> Vec<(StateId, usize, f64)> {
    let mut out = Vec::new();
    let states: Vec<StateId> = policy.states().collect();
    for s in states {
        let row = policy.logits(s).unwrap().to_vec();
        for b in 0..row.len() {
            let value_at = |delta: f64| {
                let mut p = policy.clone();
                let mut r = row.clone();
                r[b] += delta;
                p.set_logits(s, r).unwrap();
                surrogate(&p, group, eps, beta, mode).unwrap().value
            };
            out.push((s, b, (value_at(h) - value_at(-h)) / (2.0 * h)));
        }
    }
    out
}

/// `max |analytic - fd| / max(max |fd|, 1e-8)`.
pub fn gradient_relative_error(analytic: &Gradient, fd: &[(StateId, usize, f64)]) -> f64 {
    let scale = fd.iter().fold(0.0f64, |m, x| m.max(x.2.abs())).max(1e-8);
    fd.iter()
        .map(|&(s, b, v)| {
            let a = analytic.get(s).map_or(0.0, |row| row[b]);
            (a - v).abs()
        })
        .fold(0.0, f64::max)
        / scale
}

/// Single-state unrewarded training with `π_old = π_prop` held fixed.
///
/// Each step takes the exact expectation over `π_old` of the gradient of a
/// one-token group: the gradient for action `a` weighted by `π_prop(a)`.
/// The schedule is `(steps, learning_rate)` segments run in order, starting
/// from `π_ref`.
pub fn single_state_dynamics(inst: &StateInstance, schedule: &[(usize, f64)]) -> Vec<f64> {
    let prop = inst.pi_prop().probs().to_vec();
    let reference = inst.pi_ref().probs().to_vec();
    let a = prop.len();
    let state = StateId(0);
    let groups: Vec<RolloutGroup> = (0..a)
        .map(|act| {
            let step = TokenStep { state, action: act, old_prob: prop[act], ref_prob: reference[act] };
            RolloutGroup::new(state, vec![SampledResponse { steps: vec![step], reward: 0.0 }; 2], 1).unwrap()
        })
        .collect();
    let mut policy = TabularPolicy::uniform(a).unwrap();
    policy.set_logits(state, reference.iter().map(|p| p.ln()).collect()).unwrap();
    for &(steps, lr) in schedule {
        for _ in 0..steps {
            let mut total = Gradient::default();
            for (act, g) in groups.iter().enumerate() {
                let grad = surrogate_gradient(&policy, g, inst.eps(), inst.beta(), Mode::Unrewarded).unwrap();
                total.add_scaled(&grad, prop[act]);
            }
            policy = policy_step(&policy, &total, lr).unwrap();
        }
    }
    policy.action_probs(state)
}

pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Schedule used by the dynamics checks.
pub const DYNAMICS_SCHEDULE: [(usize, f64); 2] = [(800_000, 0.2), (200_000, 0.02)];
