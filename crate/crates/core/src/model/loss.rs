use super::LossWeights;

/// `task + λ_E·E − λ_S·S + γ·C` for already-reduced terms.
///
/// `episodic_mass` is Σ π⁽²⁾ and `semantic_reward` is Σ π⁽³⁾·q, both over tokens and layers.
pub fn total_loss(
    weights: &LossWeights,
    task: f64,
    episodic_mass: f64,
    semantic_reward: f64,
    consolidation: f64,
) -> f64 {
    task + weights.lambda_e * episodic_mass - weights.lambda_s * semantic_reward
        + weights.gamma * consolidation
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combines_terms_with_signs() {
        let w = LossWeights {
            lambda_e: 0.1,
            lambda_s: 0.05,
            gamma: 0.5,
        };
        assert_eq!(total_loss(&w, 1.0, 10.0, 4.0, 2.0), 1.0 + 1.0 - 0.2 + 1.0);
    }

    #[test]
    fn zero_weights_leave_task() {
        let w = LossWeights {
            lambda_e: 0.0,
            lambda_s: 0.0,
            gamma: 0.0,
        };
        assert_eq!(total_loss(&w, 3.5, 9.0, 9.0, 9.0), 3.5);
    }
}
