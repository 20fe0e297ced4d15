//! Product of a labeled environment with the progression closure of a task
//! formula, and the Markovian task reward.
//!
//! The reward for one transition is `r_env + r_phi` when the remaining task
//! progresses to `true`, `r_env - r_phi` when it progresses to `false`, and
//! `r_env` otherwise. Labels are read from the state the transition enters.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ltl::{progress, Formula, Label};

#[derive(Debug, Error)]
pub enum TlError {
    #[error("step called on a terminal product state")]
    TerminalStep,
    #[error("environment error: {0}")]
    Env(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardConfig {
    pub r_phi: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { r_phi: 1.0 }
    }
}

/// Outcome of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvTransition {
    pub r_env: f64,
    pub label: Label,
}

/// An environment that exposes a labeling function over its states.
pub trait LabeledEnv {
    type State: Clone;

    fn state(&self) -> Self::State;
    fn is_terminal(&self) -> bool;
    /// Advances the environment and reports the reward and the label of the
    /// state it entered.
    fn step(&mut self, action: &[f64]) -> Result<EnvTransition, TlError>;
}

/// Augmented state `(s, φ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TlState<S> {
    pub env_state: S,
    pub formula: Formula,
}

impl<S> TlState<S> {
    pub fn new(env_state: S, formula: Formula) -> Self {
        Self { env_state, formula }
    }
}

/// Result of [`step`].
#[derive(Debug, Clone, PartialEq)]
pub struct TlStep<S> {
    pub state: TlState<S>,
    pub reward: f64,
    pub r_env: f64,
    pub label: Label,
    pub done: bool,
}

/// Progresses `phi` by `label` and returns the shaped reward with the
/// remaining formula.
pub fn augment_reward(phi: &Formula, label: &Label, r_env: f64, cfg: &RewardConfig) -> (f64, Formula) {
    let next = progress(phi, label);
    let reward = match next {
        Formula::True => r_env + cfg.r_phi,
        Formula::False => r_env - cfg.r_phi,
        _ => r_env,
    };
    (reward, next)
}

pub fn is_terminal<E: LabeledEnv>(state: &TlState<E::State>, env: &E) -> bool {
    env.is_terminal() || state.formula.is_decided()
}

/// One product-MDP transition.
pub fn step<E: LabeledEnv>(
    state: &TlState<E::State>,
    action: &[f64],
    env: &mut E,
    cfg: &RewardConfig,
) -> Result<TlStep<E::State>, TlError> {
    if is_terminal(state, env) {
        return Err(TlError::TerminalStep);
    }
    let tr = env.step(action)?;
    let (reward, formula) = augment_reward(&state.formula, &tr.label, tr.r_env, cfg);
    let done = env.is_terminal() || formula.is_decided();
    Ok(TlStep {
        state: TlState::new(env.state(), formula),
        reward,
        r_env: tr.r_env,
        label: tr.label,
        done,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ltl::{label, parse};

    /// Replays a fixed list of labels; terminal once the script runs out.
    struct Scripted {
        labels: Vec<Label>,
        t: usize,
        r_env: f64,
    }

    impl LabeledEnv for Scripted {
        type State = usize;

        fn state(&self) -> usize {
            self.t
        }

        fn is_terminal(&self) -> bool {
            self.t >= self.labels.len()
        }

        fn step(&mut self, _action: &[f64]) -> Result<EnvTransition, TlError> {
            let l = self.labels[self.t].clone();
            self.t += 1;
            Ok(EnvTransition { r_env: self.r_env, label: l })
        }
    }

    fn cfg() -> RewardConfig {
        RewardConfig { r_phi: 1.0 }
    }

    #[test]
    fn reward_cases() {
        let fp = parse("F p").unwrap();
        let (r, f) = augment_reward(&fp, &label(["p"]), 0.1, &cfg());
        assert!((r - 1.1).abs() < 1e-12);
        assert_eq!(f, Formula::True);

        let immediate = parse("p & q").unwrap();
        let (r, f) = augment_reward(&immediate, &label([]), 0.1, &cfg());
        assert!((r + 0.9).abs() < 1e-12);
        assert_eq!(f, Formula::False);

        let (r, f) = augment_reward(&fp, &label([]), 0.1, &cfg());
        assert_eq!(r, 0.1);
        assert_eq!(f, fp);
    }

    #[test]
    fn formula_termination() {
        let mut env = Scripted { labels: vec![label(["lid_opened"]); 5], t: 0, r_env: 0.0 };
        let s = TlState::new(0, parse("F lid_opened").unwrap());
        let out = step(&s, &[], &mut env, &cfg()).unwrap();
        assert_eq!(out.state.formula, Formula::True);
        assert!(out.done);
        assert!(matches!(step(&out.state, &[], &mut env, &cfg()), Err(TlError::TerminalStep)));
    }

    #[test]
    fn timeout_has_no_task_term() {
        let mut env = Scripted { labels: vec![label([]); 2], t: 0, r_env: 0.05 };
        let mut s = TlState::new(0, parse("F p").unwrap());
        let mut rewards = Vec::new();
        loop {
            let out = step(&s, &[], &mut env, &cfg()).unwrap();
            rewards.push(out.reward);
            s = out.state;
            if out.done {
                break;
            }
        }
        assert_eq!(rewards, vec![0.05, 0.05]);
        assert_eq!(s.formula, parse("F p").unwrap());
    }

    #[test]
    fn example_trace_pays_bonus_once() {
        let labels = vec![
            label(["toilet_approached"]),
            label(["lid_grasped"]),
            label(["lid_opened"]),
        ];
        let mut env = Scripted { labels, t: 0, r_env: 0.0 };
        let mut s = TlState::new(0, parse("F(toilet_approached & F(lid_grasped & F lid_opened))").unwrap());
        let mut rewards = Vec::new();
        while !is_terminal(&s, &env) {
            let out = step(&s, &[], &mut env, &cfg()).unwrap();
            assert_eq!(out.state.formula, progress(&s.formula, &out.label));
            rewards.push(out.reward);
            s = out.state;
        }
        assert_eq!(rewards, vec![0.0, 0.0, 1.0]);
    }

    #[test]
    fn terminal_predicate() {
        let env = Scripted { labels: vec![label([])], t: 0, r_env: 0.0 };
        assert!(is_terminal(&TlState::new(0, Formula::True), &env));
        assert!(!is_terminal(&TlState::new(0, parse("F p").unwrap()), &env));
        let done_env = Scripted { labels: vec![], t: 0, r_env: 0.0 };
        assert!(is_terminal(&TlState::new(0, parse("F p").unwrap()), &done_env));
    }
}
