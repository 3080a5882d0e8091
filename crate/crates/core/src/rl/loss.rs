use super::gae::{Advantages, Trajectory};
use crate::error::{contract, Result};
use crate::tensor::{Graph, Var};

/// Tape handles recorded for one trajectory step.
#[derive(Debug, Clone, Copy)]
pub struct StepVars {
    pub log_prob: Option<Var>,
    pub value: Var,
    pub entropy: Option<Var>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub value: f64,
    pub entropy: f64,
}

/// The scalar loss plus its components as plain numbers (unweighted).
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub task: f64,
    pub policy: f64,
    pub value: f64,
    pub entropy: f64,
}

/// `-sum logp * A + c_v sum (V - R)^2 - c_e sum H + task`, advantages and
/// returns entering as constants.
pub fn actor_critic_loss(
    g: &mut Graph,
    traj: &Trajectory,
    adv: &Advantages,
    steps: &[StepVars],
    weights: LossWeights,
    task: Option<Var>,
) -> Result<LossParts> {
    let n = traj.len();
    if steps.len() != n || adv.advantages.len() != n || adv.returns.len() != n {
        return Err(contract(format!(
            "loss over {n} steps with {} outputs and {} advantages",
            steps.len(),
            adv.advantages.len()
        )));
    }
    let mut policy_terms = Vec::new();
    let mut value_terms = Vec::with_capacity(n);
    let mut entropy_terms = Vec::new();
    for (t, s) in steps.iter().enumerate() {
        if let Some(lp) = s.log_prob {
            policy_terms.push(g.scale(lp, -adv.advantages[t]));
        }
        let d = g.add_const(s.value, -adv.returns[t]);
        value_terms.push(g.mul(d, d)?);
        if let Some(h) = s.entropy {
            entropy_terms.push(h);
        }
    }
    let policy = sum_scalars(g, &policy_terms)?;
    let value = sum_scalars(g, &value_terms)?;
    let entropy = sum_scalars(g, &entropy_terms)?;
    let parts = (g.value(policy).item(), g.value(value).item(), g.value(entropy).item());
    let weighted_value = g.scale(value, weights.value);
    let weighted_entropy = g.scale(entropy, -weights.entropy);
    let mut total = g.add(policy, weighted_value)?;
    total = g.add(total, weighted_entropy)?;
    let mut task_value = 0.0;
    if let Some(task) = task {
        task_value = g.value(task).item();
        total = g.add(total, task)?;
    }
    Ok(LossParts {
        total,
        task: task_value,
        policy: parts.0,
        value: parts.1,
        entropy: parts.2,
    })
}

/// `-log softmax(logits)[target]`.
pub fn cross_entropy(g: &mut Graph, logits: Var, target: usize) -> Result<Var> {
    let lp = g.log_softmax(logits)?;
    let picked = g.index(lp, target)?;
    Ok(g.neg(picked))
}

pub(crate) fn sum_scalars(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(g.scalar(0.0));
    }
    let mut flat = Vec::with_capacity(terms.len());
    for &t in terms {
        flat.push(g.reshape(t, &[1])?);
    }
    let stacked = g.concat(&flat)?;
    Ok(g.sum(stacked))
}
