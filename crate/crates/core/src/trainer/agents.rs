use crate::embedmodel::{net_distance, EmbeddingNet};
use crate::error::{invalid, Error, Result};

/// Momentum update of a gallery network: `m·θ_g + (1−m)·θ_p`, evaluated as
/// `θ_g + (1−m)·(θ_p − θ_g)` so that equal inputs are a fixed point.
pub fn sst_update(agent: &[f64], probe: &[f64], m: f64) -> Result<Vec<f64>> {
    if agent.len() != probe.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("{} parameters", agent.len()),
            found: format!("{} parameters", probe.len()),
        });
    }
    Ok(agent.iter().zip(probe).map(|(g, p)| g + (1.0 - m) * (p - g)).collect())
}

/// Multi-agent update of agent `i`:
/// `(1+a)·(m·θ_{g_i} + (1−m)·θ_p) − a·mean_{j≠i} θ_{g_j}`.
///
/// With `a == 0` this is exactly [`sst_update`].
pub fn masst_update(agents: &[&[f64]], i: usize, probe: &[f64], m: f64, a: f64) -> Result<Vec<f64>> {
    if i >= agents.len() {
        return Err(invalid("agents", format!("agent index {i} out of range {}", agents.len())));
    }
    let momentum = sst_update(agents[i], probe, m)?;
    if a == 0.0 {
        return Ok(momentum);
    }
    if agents.len() < 2 {
        return Err(invalid("train.mix", "a > 0 needs at least two agents"));
    }
    // Evaluated as `mo − a·mean_j(θ_j − mo)`.
    let others = (agents.len() - 1) as f64;
    let mut spread = vec![0.0; probe.len()];
    for (j, agent) in agents.iter().enumerate() {
        if j == i {
            continue;
        }
        if agent.len() != probe.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} parameters", probe.len()),
                found: format!("{} parameters", agent.len()),
            });
        }
        for ((s, t), mo) in spread.iter_mut().zip(*agent).zip(&momentum) {
            *s += t - mo;
        }
    }
    Ok(momentum.iter().zip(&spread).map(|(mo, s)| mo - a * (s / others)).collect())
}

/// `S` momentum-updated copies of the probe network plus a rotation cursor.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentStack {
    agents: Vec<EmbeddingNet>,
    cursor: usize,
    momentum: f64,
    mix: f64,
}

impl AgentStack {
    /// Every agent starts as an exact copy of `init`.
    pub fn new(init: &EmbeddingNet, count: usize, momentum: f64, mix: f64) -> Result<Self> {
        if count < 1 {
            return Err(invalid("train.agents", "need at least one agent"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(invalid("train.momentum", "momentum must lie in [0, 1]"));
        }
        if !(mix >= 0.0 && mix.is_finite()) {
            return Err(invalid("train.mix", "mixing weight must be >= 0"));
        }
        if count < 2 && mix > 0.0 {
            return Err(invalid("train.mix", "a > 0 needs at least two agents"));
        }
        Ok(AgentStack { agents: vec![init.clone(); count], cursor: 0, momentum, mix })
    }

    pub fn len(&self) -> usize {
        self.agents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.agents.is_empty()
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn mix(&self) -> f64 {
        self.mix
    }

    pub fn agent(&self, i: usize) -> &EmbeddingNet {
        &self.agents[i]
    }

    pub fn agents(&self) -> &[EmbeddingNet] {
        &self.agents
    }

    /// Round robin: returns the cursor, then advances it.
    pub fn rotate(&mut self) -> usize {
        let idx = self.cursor;
        self.cursor = (self.cursor + 1) % self.agents.len();
        idx
    }

    /// Applies [`masst_update`] to agent `i` only.
    pub fn update(&mut self, i: usize, probe: &EmbeddingNet) -> Result<()> {
        self.update_from_params(i, probe.params())
    }

    pub fn update_from_params(&mut self, i: usize, probe: &[f64]) -> Result<()> {
        let views: Vec<&[f64]> = self.agents.iter().map(EmbeddingNet::params).collect();
        let next = masst_update(&views, i, probe, self.momentum, self.mix)?;
        self.agents[i].set_params(next);
        Ok(())
    }

    /// All pairwise parameter distances, `None` for a single agent.
    pub fn pairwise_distances(&self) -> Option<Vec<f64>> {
        if self.agents.len() < 2 {
            return None;
        }
        let mut out = Vec::new();
        for i in 0..self.agents.len() {
            for j in i + 1..self.agents.len() {
                out.push(net_distance(&self.agents[i], &self.agents[j]).expect("agents share one architecture"));
            }
        }
        Some(out)
    }

    pub fn min_distance(&self) -> Option<f64> {
        self.pairwise_distances().map(|d| d.into_iter().fold(f64::INFINITY, f64::min))
    }

    pub fn mean_distance(&self) -> Option<f64> {
        self.pairwise_distances().map(|d| d.iter().sum::<f64>() / d.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Activation;

    #[test]
    fn sst_examples() {
        assert_eq!(sst_update(&[1.0, 2.0], &[5.0, 6.0], 1.0).unwrap(), vec![1.0, 2.0]);
        assert_eq!(sst_update(&[1.0, 2.0], &[5.0, 6.0], 0.0).unwrap(), vec![5.0, 6.0]);
        assert!((sst_update(&[1.0], &[0.0], 0.99).unwrap()[0] - 0.99).abs() < 1e-15);
        assert!(sst_update(&[1.0], &[0.0, 1.0], 0.5).is_err());
    }

    #[test]
    fn masst_examples() {
        let agents: [&[f64]; 3] = [&[1.0], &[2.0], &[3.0]];
        let out = masst_update(&agents, 0, &[0.0], 0.5, 0.1).unwrap();
        assert!((out[0] - 0.30).abs() <= 1e-15);
        let zero_mix = masst_update(&agents, 1, &[0.7], 0.9, 0.0).unwrap();
        assert_eq!(zero_mix, sst_update(&[2.0], &[0.7], 0.9).unwrap());
        let same: [&[f64]; 3] = [&[0.25, -1.5], &[0.25, -1.5], &[0.25, -1.5]];
        let fixed = masst_update(&same, 2, &[0.25, -1.5], 0.7, 0.1).unwrap();
        for (x, y) in fixed.iter().zip([0.25, -1.5]) {
            assert!((x - y).abs() <= 1e-15);
        }
        let single: [&[f64]; 1] = [&[1.0]];
        assert!(masst_update(&single, 0, &[0.0], 0.5, 0.1).is_err());
        assert!(masst_update(&single, 0, &[0.0], 0.5, 0.0).is_ok());
    }

    #[test]
    fn rotation_is_round_robin() {
        let net = EmbeddingNet::init(&[3, 2], Activation::Tanh, 0).unwrap();
        let mut s3 = AgentStack::new(&net, 3, 0.9, 0.1).unwrap();
        let seq: Vec<usize> = (0..7).map(|_| s3.rotate()).collect();
        assert_eq!(seq, vec![0, 1, 2, 0, 1, 2, 0]);
        let mut s1 = AgentStack::new(&net, 1, 0.9, 0.0).unwrap();
        assert!((0..5).all(|_| s1.rotate() == 0));
        assert!(AgentStack::new(&net, 1, 0.9, 0.1).is_err());
        assert!(AgentStack::new(&net, 0, 0.9, 0.0).is_err());
    }

    #[test]
    fn update_touches_only_the_active_agent() {
        let net = EmbeddingNet::init(&[3, 4, 2], Activation::Tanh, 0).unwrap();
        let probe = EmbeddingNet::init(&[3, 4, 2], Activation::Tanh, 1).unwrap();
        let mut stack = AgentStack::new(&net, 3, 0.9, 0.1).unwrap();
        stack.update(1, &probe).unwrap();
        assert_eq!(stack.agent(0), &net);
        assert_eq!(stack.agent(2), &net);
        assert_ne!(stack.agent(1), &net);
        assert!(stack.min_distance().unwrap() == 0.0);
        assert!(stack.mean_distance().unwrap() > 0.0);
    }
}
