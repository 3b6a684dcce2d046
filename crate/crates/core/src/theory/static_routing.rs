use num_rational::Ratio;
use num_traits::{ToPrimitive, Zero};
use serde::{Deserialize, Serialize};

use super::TheoryError;

/// Largest K for which every routing subset is enumerated.
pub const MAX_ENUMERATION_K: usize = 20;

type Q = Ratio<i64>;

/// `n` positions, a fraction `f` of which are queries spread over `K` patterns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StaticTask {
    pub n: u64,
    pub f: Q,
    pub k: usize,
    pub eps: Q,
}

/// One point of the frontier: routing `size` patterns to attention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub size: usize,
    /// Fraction of all `n` positions answered wrongly.
    pub error: Q,
    pub attention: Q,
}

fn rational(x: f64, what: &str) -> Result<Q, TheoryError> {
    Ratio::approximate_float(x)
        .ok_or_else(|| TheoryError::Parameter(format!("{what} = {x} has no rational form")))
}

impl StaticTask {
    pub fn new(n: u64, f: Q, k: usize, eps: Q) -> Result<Self, TheoryError> {
        let t = Self { n, f, k, eps };
        t.validate()?;
        Ok(t)
    }

    /// Converts `f` and `eps` to the nearest small-denominator fractions (0.05 → 1/20).
    pub fn from_f64(n: u64, f: f64, k: usize, eps: f64) -> Result<Self, TheoryError> {
        Self::new(n, rational(f, "f")?, k, rational(eps, "eps")?)
    }

    pub fn validate(&self) -> Result<(), TheoryError> {
        if self.n == 0 || self.k == 0 {
            return Err(TheoryError::Parameter("n and K must be positive".into()));
        }
        if !(self.f > Q::zero() && self.f < Q::from_integer(1)) {
            return Err(TheoryError::Parameter(format!(
                "f = {} must lie in (0, 1)",
                self.f
            )));
        }
        if self.eps < Q::zero() {
            return Err(TheoryError::Parameter(format!(
                "eps = {} must be non-negative",
                self.eps
            )));
        }
        if i64::try_from(self.n).is_err() {
            return Err(TheoryError::Parameter("n too large".into()));
        }
        Ok(())
    }

    fn n_q(&self) -> Q {
        Q::from_integer(self.n as i64)
    }

    /// Query positions `round(f·n)`.
    pub fn query_count(&self) -> u64 {
        (self.f * self.n_q()).round().to_integer() as u64
    }

    /// Occurrences per pattern: an even split of the queries with the remainder
    /// going one each to the first patterns.
    pub fn occurrences(&self) -> Vec<u64> {
        let total = self.query_count();
        let k = self.k as u64;
        (0..k)
            .map(|i| total / k + u64::from(i < total % k))
            .collect()
    }
}

/// Closed form by subset size: error `f(K−s)/K`, attention `f·n·s/K`.
pub fn closed_form_frontier(task: &StaticTask) -> Vec<FrontierPoint> {
    let k = Q::from_integer(task.k as i64);
    (0..=task.k)
        .map(|s| {
            let s_q = Q::from_integer(s as i64);
            FrontierPoint {
                size: s,
                error: task.f * (k - s_q) / k,
                attention: task.f * task.n_q() * s_q / k,
            }
        })
        .collect()
}

struct Enumeration {
    frontier: Vec<FrontierPoint>,
    min_admissible: Q,
}

fn enumerate(task: &StaticTask) -> Result<Enumeration, TheoryError> {
    task.validate()?;
    if task.k > MAX_ENUMERATION_K {
        return Err(TheoryError::Bound {
            k: task.k,
            max: MAX_ENUMERATION_K,
        });
    }
    let occ = task.occurrences();
    let total: u64 = occ.iter().sum();
    let n = task.n_q();
    let mut best: Vec<Option<u64>> = vec![None; task.k + 1];
    let mut admissible = total;
    for mask in 0u32..(1u32 << task.k) {
        let attention: u64 = occ
            .iter()
            .enumerate()
            .filter(|(i, _)| mask >> i & 1 == 1)
            .map(|(_, c)| c)
            .sum();
        let slot = &mut best[mask.count_ones() as usize];
        if slot.is_none_or(|a| attention < a) {
            *slot = Some(attention);
        }
        if Q::from_integer((total - attention) as i64) / n <= task.eps {
            admissible = admissible.min(attention);
        }
    }
    let frontier = best
        .into_iter()
        .enumerate()
        .map(|(size, a)| {
            let a = a.expect("every size has a subset");
            FrontierPoint {
                size,
                error: Q::from_integer((total - a) as i64) / n,
                attention: Q::from_integer(a as i64),
            }
        })
        .collect();
    Ok(Enumeration {
        frontier,
        min_admissible: Q::from_integer(admissible as i64),
    })
}

/// Enumerates all `2^K` subsets and keeps, per size, the cheapest one and its error.
pub fn enumerate_frontier(task: &StaticTask) -> Result<Vec<FrontierPoint>, TheoryError> {
    Ok(enumerate(task)?.frontier)
}

/// The frontier, enumerated when `K ≤ 20`.
pub fn static_routing_frontier(task: &StaticTask) -> Result<Vec<FrontierPoint>, TheoryError> {
    enumerate_frontier(task)
}

/// Minimum attention over all enumerated routings with error `≤ ε`.
pub fn min_admissible_attention(task: &StaticTask) -> Result<Q, TheoryError> {
    Ok(enumerate(task)?.min_admissible)
}

/// Smallest closed-form frontier attention whose error is `≤ ε`.
pub fn min_admissible_attention_closed_form(task: &StaticTask) -> Q {
    closed_form_frontier(task)
        .into_iter()
        .filter(|p| p.error <= task.eps)
        .map(|p| p.attention)
        .min()
        .expect("routing every pattern has zero error")
}

fn check_schedule(eps_cons: f64, m: u64) -> Result<(), TheoryError> {
    if m == 0 {
        return Err(TheoryError::Parameter(
            "exposures per pattern m must be at least 1".into(),
        ));
    }
    if !(0.0..=1.0).contains(&eps_cons) {
        return Err(TheoryError::Parameter(format!(
            "eps_cons = {eps_cons} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `ε_cons·f·n + (1−ε_cons)·K·m`: attention for every occurrence of patterns that
/// never consolidate plus `m` exposures for each pattern that does.
pub fn consolidation_schedule_cost(
    task: &StaticTask,
    eps_cons: f64,
    m: u64,
) -> Result<f64, TheoryError> {
    task.validate()?;
    check_schedule(eps_cons, m)?;
    let fn_ = task.f.to_f64().expect("finite ratio") * task.n as f64;
    Ok(eps_cons * fn_ + (1.0 - eps_cons) * task.k as f64 * m as f64)
}

/// Integer simulation of the same schedule: the first `round(ε_cons·K)` patterns
/// never consolidate; the others use attention for their first `m` occurrences.
pub fn simulate_consolidation(
    task: &StaticTask,
    eps_cons: f64,
    m: u64,
) -> Result<u64, TheoryError> {
    task.validate()?;
    check_schedule(eps_cons, m)?;
    let stuck = (eps_cons * task.k as f64).round() as usize;
    Ok(task
        .occurrences()
        .iter()
        .enumerate()
        .map(|(i, &c)| if i < stuck { c } else { c.min(m) })
        .sum())
}
