use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gumbel_noise, softmax_slice, Tensor};
use crate::scalar::Scalar;

pub const FEATURES: usize = 4;
pub const ACTIONS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    CtOnly,
    Episodic,
    Semantic,
}

impl Action {
    pub const ALL: [Action; 3] = [Self::CtOnly, Self::Episodic, Self::Semantic];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Self {
        Self::ALL[i]
    }

    /// 1-based action number: 1 CT only, 2 episodic, 3 semantic.
    pub fn number(self) -> usize {
        self.index() + 1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Gumbel-perturbed hard samples.
    Train,
    /// Noise-free argmax.
    Eval,
}

/// Router input `[log(1+Δτ), ‖h^K‖, q, entropy of previous π]`.
pub type RouterFeatures<T> = [T; FEATURES];

/// Two-layer perceptron `z ↦ relu(z·W₁ + b₁)·W₂ + b₂`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RouterParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> RouterParams<T> {
    pub fn logits(&self, z: &RouterFeatures<T>) -> [T; ACTIONS] {
        let h = self.b1.len();
        let mut hidden = self.b1.data().to_vec();
        for (i, &zi) in z.iter().enumerate() {
            let row = &self.w1.data()[i * h..(i + 1) * h];
            for (acc, &w) in hidden.iter_mut().zip(row) {
                *acc = *acc + zi * w;
            }
        }
        let mut out = [T::zero(); ACTIONS];
        out.copy_from_slice(self.b2.data());
        for (j, &a) in hidden.iter().enumerate() {
            let a = a.max(T::zero());
            let row = &self.w2.data()[j * ACTIONS..(j + 1) * ACTIONS];
            for (acc, &w) in out.iter_mut().zip(row) {
                *acc = *acc + a * w;
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RouterDecision<T> {
    /// Noise-free routing distribution.
    pub pi: [T; ACTIONS],
    pub action: Action,
    pub q: T,
}

/// Shannon entropy in nats, in `[0, ln 3]` for three actions.
pub fn entropy<T: Scalar>(p: &[T]) -> T {
    p.iter()
        .filter(|&&x| x > T::zero())
        .map(|&x| -x * x.ln())
        .sum()
}

/// Hard choice from logits plus optional Gumbel noise.
///
/// Temperature scales the relaxed sample but never changes its argmax.
pub fn choose<T: Scalar>(logits: &[T; ACTIONS], noise: Option<&[T]>) -> Action {
    let mut best = 0;
    let score = |i: usize| logits[i] + noise.map_or(T::zero(), |g| g[i]);
    for i in 1..ACTIONS {
        if score(i) > score(best) {
            best = i;
        }
    }
    Action::from_index(best)
}

/// Routes one token. Train mode draws fresh Gumbel noise; eval mode is deterministic.
pub fn route<T: Scalar, R: Rng + ?Sized>(
    router: &RouterParams<T>,
    z: &RouterFeatures<T>,
    rng: &mut R,
    mode: Mode,
) -> RouterDecision<T> {
    let logits = router.logits(z);
    let pi = softmax_slice(&logits);
    let action = match mode {
        Mode::Train => {
            let g: Tensor<T> = gumbel_noise(rng, 1, ACTIONS);
            choose(&logits, Some(g.data()))
        }
        Mode::Eval => choose(&logits, None),
    };
    RouterDecision {
        pi: [pi[0], pi[1], pi[2]],
        action,
        q: z[2],
    }
}
