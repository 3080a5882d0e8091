use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryStep {
    /// Retention slot, answer token or maze action.
    pub action: usize,
    /// `None` for steps without a sampled action (question steps).
    pub log_prob: Option<f64>,
    pub value: f64,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub steps: Vec<TrajectoryStep>,
    /// Value estimate after the last step; ignored when that step is done.
    pub bootstrap: f64,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Advantages {
    pub advantages: Vec<f64>,
    /// Value targets `A_t + V(s_t)`.
    pub returns: Vec<f64>,
}

/// Generalized advantage estimates, one right-to-left pass.
pub fn compute_gae(traj: &Trajectory, gamma: f64, lambda: f64) -> Result<Advantages> {
    if traj.is_empty() {
        return Err(contract("advantage estimation over an empty trajectory"));
    }
    if !(0.0..=1.0).contains(&gamma) || !(0.0..=1.0).contains(&lambda) {
        return Err(contract(format!("discount {gamma} or lambda {lambda} outside [0, 1]")));
    }
    let n = traj.len();
    let mut advantages = vec![0.0; n];
    let mut next_value = traj.bootstrap;
    let mut acc = 0.0;
    for t in (0..n).rev() {
        let s = &traj.steps[t];
        let live = if s.done { 0.0 } else { 1.0 };
        let delta = s.reward + gamma * next_value * live - s.value;
        acc = delta + gamma * lambda * live * acc;
        advantages[t] = acc;
        next_value = s.value;
    }
    let returns = advantages.iter().zip(&traj.steps).map(|(a, s)| a + s.value).collect();
    Ok(Advantages { advantages, returns })
}
