use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounds::BoxBounds;
use crate::environment::{ConstraintTree, EnvDistribution, EnvParams};
use crate::error::{Error, Result};

/// How sampled states are paired with sampled environments.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// `N` fresh states for every environment.
    #[default]
    PerEnvironment,
    /// One pool of `N` states paired with every environment.
    Shared,
}

#[derive(Debug, Clone, PartialEq)]
pub enum StatePool {
    PerEnvironment(Vec<Vec<Vec<f64>>>),
    Shared(Vec<Vec<f64>>),
}

/// Joint samples `Ξ = ∪ᵢ {eᵢ} × X_{eᵢ}`, addressed by a flat index.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDataset {
    pub environments: Vec<EnvParams>,
    pub states: StatePool,
    /// Prefix sums of per-environment state counts.
    offsets: Vec<usize>,
}

impl JointDataset {
    pub fn new(environments: Vec<EnvParams>, states: StatePool) -> Result<Self> {
        if environments.is_empty() {
            return Err(Error::Config("dataset has no environments".into()));
        }
        let mut offsets = Vec::with_capacity(environments.len() + 1);
        offsets.push(0);
        match &states {
            StatePool::PerEnvironment(sets) => {
                if sets.len() != environments.len() {
                    return Err(Error::Shape {
                        what: "per-environment state sets",
                        expected: environments.len(),
                        actual: sets.len(),
                    });
                }
                for set in sets {
                    offsets.push(offsets.last().unwrap() + set.len());
                }
            }
            StatePool::Shared(pool) => {
                for _ in &environments {
                    offsets.push(offsets.last().unwrap() + pool.len());
                }
            }
        }
        if *offsets.last().unwrap() == 0 {
            return Err(Error::Config("dataset has no states".into()));
        }
        Ok(Self {
            environments,
            states,
            offsets,
        })
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn env_dim(&self) -> usize {
        self.environments[0].len()
    }

    pub fn state_dim(&self) -> usize {
        match &self.states {
            StatePool::PerEnvironment(sets) => sets.iter().flatten().next().map_or(0, Vec::len),
            StatePool::Shared(pool) => pool.first().map_or(0, Vec::len),
        }
    }

    /// The `(x, e)` pair at flat index `idx`.
    pub fn get(&self, idx: usize) -> (&[f64], &EnvParams) {
        let env = self.offsets.partition_point(|&o| o <= idx) - 1;
        let local = idx - self.offsets[env];
        let x = match &self.states {
            StatePool::PerEnvironment(sets) => &sets[env][local],
            StatePool::Shared(pool) => &pool[local],
        };
        (x, &self.environments[env])
    }

    /// Writes the joint vector `(x, e)` at `idx` into `row`.
    pub fn fill_row(&self, idx: usize, row: &mut [f64]) {
        let (x, e) = self.get(idx);
        let n = x.len();
        row[..n].copy_from_slice(x);
        row[n..].copy_from_slice(e.as_slice());
    }

    /// Indices belonging to environment `env`.
    pub fn env_range(&self, env: usize) -> std::ops::Range<usize> {
        self.offsets[env]..self.offsets[env + 1]
    }
}

/// Samples `m` environments and `n` states (per environment, or one shared
/// pool), uniformly and deterministically per `seed`.
pub fn build_dataset(
    dist: &EnvDistribution,
    state_box: &BoxBounds,
    m: usize,
    n: usize,
    seed: u64,
    pairing: Pairing,
) -> Result<JointDataset> {
    state_box.validate("state sampling box")?;
    if n == 0 {
        return Err(Error::Config("state count must be at least 1".into()));
    }
    let environments = dist.sample(m, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut draw = |count: usize| -> Vec<Vec<f64>> {
        (0..count).map(|_| state_box.sample(&mut rng)).collect()
    };
    let states = match pairing {
        Pairing::PerEnvironment => StatePool::PerEnvironment((0..m).map(|_| draw(n)).collect()),
        Pairing::Shared => StatePool::Shared(draw(n)),
    };
    JointDataset::new(environments, states)
}

/// Extra weight on the constraint boundary: a share of each environment's
/// states is redrawn from the band `|c(x, e)| <= band`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundarySampling {
    pub fraction: f64,
    pub band: f64,
}

const MAX_REJECTIONS: usize = 100_000;

impl BoundarySampling {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fraction) || !(self.band > 0.0) || !self.band.is_finite() {
            return Err(Error::Config(format!(
                "boundary sampling needs fraction in [0, 1] and a positive band, got {self:?}"
            )));
        }
        Ok(())
    }

    /// Replaces the leading `fraction` of every per-environment state set by
    /// rejection samples from the band. Deterministic per `seed`.
    pub fn apply(
        &self,
        dataset: &mut JointDataset,
        tree: &ConstraintTree,
        state_box: &BoxBounds,
        seed: u64,
    ) -> Result<()> {
        self.validate()?;
        let StatePool::PerEnvironment(sets) = &mut dataset.states else {
            return Err(Error::Config(
                "boundary sampling needs per_environment pairing".into(),
            ));
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        for (set, e) in sets.iter_mut().zip(&dataset.environments) {
            let count = (self.fraction * set.len() as f64).round() as usize;
            for slot in set.iter_mut().take(count) {
                let mut tries = 0;
                *slot = loop {
                    let x = state_box.sample(&mut rng);
                    if tree.eval(&x, e.as_slice())?.abs() <= self.band {
                        break x;
                    }
                    tries += 1;
                    if tries == MAX_REJECTIONS {
                        return Err(Error::Config(format!(
                            "no state with |c| <= {} found in the sampling box for e = {:?}",
                            self.band,
                            e.as_slice()
                        )));
                    }
                };
            }
        }
        Ok(())
    }
}
