//! Turn-granting policies. A host picks who gets the next turn and moves
//! its cursor; whether that person actually speaks is up to them.

use crate::config::{ClassSpec, HostClass};
use crate::model::PersonId;
use crate::rng::SplitMix64;

/// XORed into the session seed so the random host's stream differs from
/// other consumers of the same seed.
pub const RANDOM_HOST_SALT: u64 = 0x5241_4E44_484F_5354;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HostPolicy {
    RoundRobin { cursor: usize },
    Random { rng: SplitMix64 },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HostState {
    roster: Vec<PersonId>,
    policy: HostPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HostError {
    #[error("roster is empty")]
    EmptyRoster,
    #[error("start_person_index {index} out of range for {persons} persons")]
    StartIndexOutOfRange { index: usize, persons: usize },
    #[error("class {0:?} is not a host class")]
    NotAHost(String),
}

impl HostState {
    pub fn round_robin(roster: Vec<PersonId>, start: usize) -> Result<Self, HostError> {
        if roster.is_empty() {
            return Err(HostError::EmptyRoster);
        }
        if start >= roster.len() {
            return Err(HostError::StartIndexOutOfRange {
                index: start,
                persons: roster.len(),
            });
        }
        Ok(Self {
            roster,
            policy: HostPolicy::RoundRobin { cursor: start },
        })
    }

    /// Random host whose generator is seeded with `seed ^ RANDOM_HOST_SALT`.
    pub fn random(roster: Vec<PersonId>, seed: u64) -> Result<Self, HostError> {
        if roster.is_empty() {
            return Err(HostError::EmptyRoster);
        }
        Ok(Self {
            roster,
            policy: HostPolicy::Random {
                rng: SplitMix64::new(seed ^ RANDOM_HOST_SALT),
            },
        })
    }

    pub fn roster(&self) -> &[PersonId] {
        &self.roster
    }

    pub fn policy(&self) -> &HostPolicy {
        &self.policy
    }

    pub fn is_round_robin(&self) -> bool {
        matches!(self.policy, HostPolicy::RoundRobin { .. })
    }

    /// Grants the next turn and returns the roster index of the chosen
    /// person. The cursor advances whether or not that person speaks.
    pub fn next_speaker(&mut self) -> usize {
        let n = self.roster.len();
        match &mut self.policy {
            HostPolicy::RoundRobin { cursor } => {
                let chosen = *cursor;
                *cursor = (*cursor + 1) % n;
                chosen
            }
            HostPolicy::Random { rng } => (rng.next_u64() % n as u64) as usize,
        }
    }

    pub fn next_speaker_id(&mut self) -> PersonId {
        let idx = self.next_speaker();
        self.roster[idx].clone()
    }
}

/// Builds the host described by a validated host spec.
pub fn make_host(spec: &ClassSpec, roster: Vec<PersonId>, seed: u64) -> Result<HostState, HostError> {
    match HostClass::from_spec(spec) {
        Some(HostClass::RoundRobin { start_person_index }) => {
            HostState::round_robin(roster, start_person_index)
        }
        Some(HostClass::Random) => HostState::random(roster, seed),
        None => Err(HostError::NotAHost(spec.class.clone())),
    }
}
