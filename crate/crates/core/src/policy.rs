//! Eviction policies for a fixed-capacity, per-layer expert cache.
//!
//! Every step the token's activated experts are looked up against the
//! resident set, missing experts are loaded, and if the cache overflows the
//! policy picks victims among the resident experts that the current token
//! does not need. Activated experts are never evicted in their own step.
//!
//! | policy     | victim                                                        |
//! |------------|---------------------------------------------------------------|
//! | `lru`      | oldest last use, then lowest id                               |
//! | `lfu`      | lowest access count, then oldest last use, then lowest id     |
//! | `lfu-aged` | as `lfu`, with all counts scaled by a factor every period     |
//! | `opt`      | next use farthest in the future (never used first), lowest id |

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::trace::{ExpertId, ExpertSet};

pub const DEFAULT_DECAY_FACTOR: f64 = 0.5;
pub const DEFAULT_DECAY_PERIOD: u64 = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyKind {
    Lru,
    Lfu,
    /// LFU whose counts are multiplied by `decay_factor` every
    /// `decay_period` steps.
    LfuAged {
        decay_factor: f64,
        decay_period: u64,
    },
    /// Belady's clairvoyant policy. Needs the future access stream.
    Opt,
}

impl PolicyKind {
    pub fn lfu_aged_default() -> Self {
        PolicyKind::LfuAged {
            decay_factor: DEFAULT_DECAY_FACTOR,
            decay_period: DEFAULT_DECAY_PERIOD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let PolicyKind::LfuAged {
            decay_factor,
            decay_period,
        } = *self
        {
            if !(decay_factor > 0.0 && decay_factor <= 1.0) {
                return Err(Error::Config(format!(
                    "lfu-aged decay factor must be in (0, 1], got {decay_factor}"
                )));
            }
            if decay_period == 0 {
                return Err(Error::Config("lfu-aged decay period must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn needs_future(&self) -> bool {
        matches!(self, PolicyKind::Opt)
    }

    /// Whether counts are decayed before running the step that follows
    /// `completed_steps` earlier steps. Decay happens at steps
    /// `period, 2*period, ...`.
    pub fn decays_at(&self, completed_steps: u64) -> bool {
        match *self {
            PolicyKind::LfuAged { decay_period, .. } => {
                completed_steps > 0 && completed_steps % decay_period == 0
            }
            _ => false,
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PolicyKind::Lru => f.write_str("lru"),
            PolicyKind::Lfu => f.write_str("lfu"),
            PolicyKind::LfuAged {
                decay_factor,
                decay_period,
            } => write!(f, "lfu-aged:{decay_factor}:{decay_period}"),
            PolicyKind::Opt => f.write_str("opt"),
        }
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s.trim() {
            "lru" => PolicyKind::Lru,
            "lfu" => PolicyKind::Lfu,
            "opt" => PolicyKind::Opt,
            "lfu-aged" => PolicyKind::lfu_aged_default(),
            other => {
                let rest = other.strip_prefix("lfu-aged:").ok_or_else(|| {
                    Error::Config(format!(
                        "unknown policy {other:?} (expected lru, lfu, lfu-aged:<factor>:<period>, opt)"
                    ))
                })?;
                let (factor, period) = rest.split_once(':').ok_or_else(|| {
                    Error::Config(format!("lfu-aged needs <factor>:<period>, got {rest:?}"))
                })?;
                PolicyKind::LfuAged {
                    decay_factor: factor
                        .parse()
                        .map_err(|_| Error::Config(format!("bad decay factor {factor:?}")))?,
                    decay_period: period
                        .parse()
                        .map_err(|_| Error::Config(format!("bad decay period {period:?}")))?,
                }
            }
        };
        kind.validate()?;
        Ok(kind)
    }
}

/// Resident experts of one layer plus the bookkeeping the policies need.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheState {
    capacity: usize,
    resident: ExpertSet,
    /// Step index of the most recent access, for every expert ever seen.
    last_use: BTreeMap<ExpertId, u64>,
    /// Access counts for every expert ever seen. Integral unless decayed.
    freq: BTreeMap<ExpertId, f64>,
    step: u64,
}

/// What happened to the cache during one step.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StepOutcome {
    pub hits: ExpertSet,
    pub misses: ExpertSet,
    pub evicted: ExpertSet,
    pub loaded: ExpertSet,
    pub resident_before: ExpertSet,
    pub resident_after: ExpertSet,
}

impl StepOutcome {
    pub fn activated(&self) -> ExpertSet {
        self.hits.union(&self.misses)
    }
}

/// An empty cache of `capacity` experts.
pub fn warm_state(kind: PolicyKind, capacity: usize) -> Result<CacheState> {
    kind.validate()?;
    if capacity == 0 {
        return Err(Error::Config("cache capacity must be at least 1".into()));
    }
    Ok(CacheState {
        capacity,
        resident: ExpertSet::new(),
        last_use: BTreeMap::new(),
        freq: BTreeMap::new(),
        step: 0,
    })
}

/// Pure form of [`CacheState::step`]: returns the successor state.
pub fn policy_step(
    state: &CacheState,
    kind: PolicyKind,
    activated: &ExpertSet,
    future: Option<&[ExpertSet]>,
) -> Result<(CacheState, StepOutcome)> {
    let mut next = state.clone();
    let outcome = next.step(kind, activated, future)?;
    Ok((next, outcome))
}

impl CacheState {
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn resident(&self) -> &ExpertSet {
        &self.resident
    }

    /// Number of completed steps.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn freq(&self, e: ExpertId) -> f64 {
        self.freq.get(&e).copied().unwrap_or(0.0)
    }

    pub fn last_use(&self, e: ExpertId) -> Option<u64> {
        self.last_use.get(&e).copied()
    }

    /// Resident experts, most recently used first. Experts touched in the
    /// same step are ordered by descending id, so the last element is always
    /// the LRU victim.
    pub fn recency(&self) -> Vec<ExpertId> {
        let mut v: Vec<ExpertId> = self.resident.iter().collect();
        v.sort_by_key(|&e| std::cmp::Reverse((self.last_use(e), e)));
        v
    }

    /// Seeds the state with `resident` experts whose last uses follow the
    /// given order (first = most recent) and with explicit counts. Intended
    /// for tests and scripted scenarios.
    pub fn with_contents(
        kind: PolicyKind,
        capacity: usize,
        recency_newest_first: &[ExpertId],
        freq: &[(ExpertId, f64)],
    ) -> Result<Self> {
        let mut state = warm_state(kind, capacity)?;
        if recency_newest_first.len() > capacity {
            return Err(Error::Config(format!(
                "{} resident experts exceed capacity {capacity}",
                recency_newest_first.len()
            )));
        }
        let n = recency_newest_first.len() as u64;
        for (i, &e) in recency_newest_first.iter().enumerate() {
            if !state.resident.insert(e) {
                return Err(Error::Config(format!("expert {e} listed twice")));
            }
            state.last_use.insert(e, n - 1 - i as u64);
        }
        for &(e, f) in freq {
            state.freq.insert(e, f);
        }
        state.step = n;
        Ok(state)
    }

    /// Serves one token's activated experts. `future` is the layer's
    /// remaining activation stream after this step and is required for
    /// [`PolicyKind::Opt`].
    pub fn step(
        &mut self,
        kind: PolicyKind,
        activated: &ExpertSet,
        future: Option<&[ExpertSet]>,
    ) -> Result<StepOutcome> {
        if activated.len() > self.capacity {
            return Err(Error::Config(format!(
                "{} activated experts cannot fit in a cache of {}",
                activated.len(),
                self.capacity
            )));
        }
        if kind.needs_future() && future.is_none() {
            return Err(Error::Config("opt policy requires the future access stream".into()));
        }

        if kind.decays_at(self.step) {
            if let PolicyKind::LfuAged { decay_factor, .. } = kind {
                for f in self.freq.values_mut() {
                    *f *= decay_factor;
                }
            }
        }

        let resident_before = self.resident.clone();
        let hits = activated.intersection(&resident_before);
        let misses = activated.difference(&resident_before);
        let overflow = (resident_before.len() + misses.len()).saturating_sub(self.capacity);

        let mut candidates: Vec<ExpertId> = resident_before.difference(activated).iter().collect();
        let evicted = match kind {
            PolicyKind::Lru => {
                candidates.sort_by_key(|&e| (self.last_use(e), e));
                ExpertSet::collect_dedup(candidates.into_iter().take(overflow))
            }
            PolicyKind::Lfu | PolicyKind::LfuAged { .. } => {
                candidates.sort_by(|&a, &b| {
                    self.freq(a)
                        .total_cmp(&self.freq(b))
                        .then(self.last_use(a).cmp(&self.last_use(b)))
                        .then(a.cmp(&b))
                });
                ExpertSet::collect_dedup(candidates.into_iter().take(overflow))
            }
            PolicyKind::Opt => {
                let future = future.unwrap_or(&[]);
                let next_use = |e: ExpertId| {
                    future
                        .iter()
                        .position(|s| s.contains(e))
                        .unwrap_or(usize::MAX)
                };
                candidates.sort_by_key(|&e| (std::cmp::Reverse(next_use(e)), e));
                ExpertSet::collect_dedup(candidates.into_iter().take(overflow))
            }
        };

        for e in evicted.iter() {
            self.resident.remove(e);
        }
        for e in activated.iter() {
            self.resident.insert(e);
            self.last_use.insert(e, self.step);
            *self.freq.entry(e).or_insert(0.0) += 1.0;
        }
        self.step += 1;
        debug_assert!(self.resident.len() <= self.capacity);

        Ok(StepOutcome {
            hits,
            loaded: misses.clone(),
            misses,
            evicted,
            resident_before,
            resident_after: self.resident.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(ids: &[u32]) -> ExpertSet {
        ExpertSet::from_ids(ids.iter().map(|&i| ExpertId(i))).unwrap()
    }

    fn ids(v: &[u32]) -> Vec<ExpertId> {
        v.iter().map(|&i| ExpertId(i)).collect()
    }

    #[test]
    fn parses_policy_strings() {
        assert_eq!("lru".parse::<PolicyKind>().unwrap(), PolicyKind::Lru);
        assert_eq!("lfu".parse::<PolicyKind>().unwrap(), PolicyKind::Lfu);
        assert_eq!("opt".parse::<PolicyKind>().unwrap(), PolicyKind::Opt);
        assert_eq!(
            "lfu-aged:0.5:16".parse::<PolicyKind>().unwrap(),
            PolicyKind::LfuAged {
                decay_factor: 0.5,
                decay_period: 16
            }
        );
        assert!("lfu-aged:0:16".parse::<PolicyKind>().is_err());
        assert!("lfu-aged:1.5:16".parse::<PolicyKind>().is_err());
        assert!("lfu-aged:0.5:0".parse::<PolicyKind>().is_err());
        assert!("fifo".parse::<PolicyKind>().is_err());
        let k = PolicyKind::lfu_aged_default();
        assert_eq!(k.to_string().parse::<PolicyKind>().unwrap(), k);
    }

    #[test]
    fn warm_state_is_empty() {
        let s = warm_state(PolicyKind::Lru, 4).unwrap();
        assert!(s.resident().is_empty());
        assert_eq!(s.steps(), 0);
        let s = warm_state(PolicyKind::Lfu, 4).unwrap();
        assert_eq!(s.freq(ExpertId(3)), 0.0);
        assert!(warm_state(PolicyKind::Lru, 0).is_err());
    }

    #[test]
    fn aged_decay_schedule() {
        let k = PolicyKind::LfuAged {
            decay_factor: 0.5,
            decay_period: 16,
        };
        let due: Vec<u64> = (0..50).filter(|&s| k.decays_at(s)).collect();
        assert_eq!(due, vec![16, 32, 48]);
        assert!(!PolicyKind::Lfu.decays_at(16));
    }

    #[test]
    fn lru_evicts_two_oldest() {
        let state = CacheState::with_contents(PolicyKind::Lru, 4, &ids(&[3, 2, 1, 0]), &[]).unwrap();
        assert_eq!(state.recency(), ids(&[3, 2, 1, 0]));
        let (next, out) = policy_step(&state, PolicyKind::Lru, &set(&[4, 5]), None).unwrap();
        assert_eq!(out.evicted, set(&[0, 1]));
        assert_eq!(out.loaded, set(&[4, 5]));
        assert!(out.hits.is_empty());
        assert_eq!(next.resident(), &set(&[2, 3, 4, 5]));
    }

    #[test]
    fn lfu_displaces_frequent_experts_when_forced() {
        let state = CacheState::with_contents(
            PolicyKind::Lfu,
            2,
            &ids(&[1, 0]),
            &[(ExpertId(0), 5.0), (ExpertId(1), 1.0)],
        )
        .unwrap();
        let (_, out) = policy_step(&state, PolicyKind::Lfu, &set(&[2, 3]), None).unwrap();
        assert_eq!(out.evicted, set(&[0, 1]));
    }

    #[test]
    fn lfu_keeps_frequent_expert() {
        let state = CacheState::with_contents(
            PolicyKind::Lfu,
            2,
            &ids(&[1, 0]),
            &[(ExpertId(0), 5.0), (ExpertId(1), 1.0)],
        )
        .unwrap();
        let (_, out) = policy_step(&state, PolicyKind::Lfu, &set(&[2]), None).unwrap();
        assert_eq!(out.evicted, set(&[1]));
    }

    #[test]
    fn lfu_ties_break_by_recency_then_id() {
        // equal counts: 2 is older than 0 and 1, so it goes first
        let state = CacheState::with_contents(
            PolicyKind::Lfu,
            3,
            &ids(&[0, 1, 2]),
            &[(ExpertId(0), 1.0), (ExpertId(1), 1.0), (ExpertId(2), 1.0)],
        )
        .unwrap();
        let (_, out) = policy_step(&state, PolicyKind::Lfu, &set(&[5]), None).unwrap();
        assert_eq!(out.evicted, set(&[2]));

        // same step, same count: lowest id goes first
        let mut s = warm_state(PolicyKind::Lfu, 2).unwrap();
        s.step(PolicyKind::Lfu, &set(&[3, 6]), None).unwrap();
        let out = s.step(PolicyKind::Lfu, &set(&[1]), None).unwrap();
        assert_eq!(out.evicted, set(&[3]));
    }

    #[test]
    fn opt_evicts_farthest_next_use() {
        let state = CacheState::with_contents(PolicyKind::Opt, 2, &ids(&[1, 0]), &[]).unwrap();
        let future = [set(&[0]), set(&[0]), set(&[1])];
        let (_, out) = policy_step(&state, PolicyKind::Opt, &set(&[2]), Some(&future)).unwrap();
        assert_eq!(out.evicted, set(&[1]));
    }

    #[test]
    fn opt_evicts_never_used_first_then_lowest_id() {
        let state = CacheState::with_contents(PolicyKind::Opt, 3, &ids(&[0, 1, 2]), &[]).unwrap();
        let future = [set(&[0])];
        let (_, out) = policy_step(&state, PolicyKind::Opt, &set(&[5]), Some(&future)).unwrap();
        assert_eq!(out.evicted, set(&[1]));
    }

    #[test]
    fn opt_without_future_is_config_error() {
        let s = warm_state(PolicyKind::Opt, 2).unwrap();
        assert!(matches!(
            policy_step(&s, PolicyKind::Opt, &set(&[0]), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn too_many_activated_is_config_error() {
        let s = warm_state(PolicyKind::Lru, 1).unwrap();
        assert!(matches!(
            policy_step(&s, PolicyKind::Lru, &set(&[0, 1]), None),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn aged_counts_halve_at_period() {
        let kind = PolicyKind::LfuAged {
            decay_factor: 0.5,
            decay_period: 2,
        };
        let mut s = warm_state(kind, 2).unwrap();
        s.step(kind, &set(&[0]), None).unwrap();
        s.step(kind, &set(&[0]), None).unwrap();
        assert_eq!(s.freq(ExpertId(0)), 2.0);
        s.step(kind, &set(&[1]), None).unwrap();
        assert_eq!(s.freq(ExpertId(0)), 1.0);
        assert_eq!(s.freq(ExpertId(1)), 1.0);
    }

    #[test]
    fn aging_lets_a_stale_popular_expert_go() {
        // plain LFU pins expert 0 after its early burst; aging releases it
        let mut stream = vec![set(&[0]); 20];
        for _ in 0..8 {
            stream.push(set(&[1]));
            stream.push(set(&[2]));
        }
        let run = |kind: PolicyKind| {
            let mut s = warm_state(kind, 2).unwrap();
            for a in &stream {
                s.step(kind, a, None).unwrap();
            }
            s.resident().contains(ExpertId(0))
        };
        assert!(run(PolicyKind::Lfu));
        let aged = PolicyKind::LfuAged {
            decay_factor: 0.1,
            decay_period: 4,
        };
        assert!(!run(aged));
    }

    fn stream_strategy() -> impl Strategy<Value = (usize, usize, usize, Vec<Vec<u32>>)> {
        (2usize..7, 1usize..3).prop_flat_map(|(e, k)| {
            let k = k.min(e);
            (
                Just(e),
                Just(k),
                k..=e,
                proptest::collection::vec(
                    proptest::sample::subsequence((0..e as u32).collect::<Vec<_>>(), k),
                    0..40,
                ),
            )
        })
    }

    fn kinds() -> [PolicyKind; 4] {
        [
            PolicyKind::Lru,
            PolicyKind::Lfu,
            PolicyKind::LfuAged {
                decay_factor: 0.5,
                decay_period: 3,
            },
            PolicyKind::Opt,
        ]
    }

    proptest! {
        #[test]
        fn step_invariants_hold((_e, _k, c, stream) in stream_strategy()) {
            let sets: Vec<ExpertSet> = stream.iter().map(|v| set(v)).collect();
            for kind in kinds() {
                let mut s = warm_state(kind, c).unwrap();
                let mut prev_freq = BTreeMap::new();
                for (i, a) in sets.iter().enumerate() {
                    let before = s.clone();
                    let out = s.step(kind, a, Some(&sets[i + 1..])).unwrap();
                    prop_assert!(s.resident().len() <= c);
                    prop_assert_eq!(out.activated(), a.clone());
                    prop_assert_eq!(out.hits.intersection_len(&out.misses), 0);
                    prop_assert_eq!(&out.loaded, &out.misses);
                    prop_assert_eq!(
                        out.evicted.len(),
                        (out.resident_before.len() + out.misses.len()).saturating_sub(c)
                    );
                    prop_assert_eq!(out.evicted.intersection_len(a), 0);
                    prop_assert_eq!(s.recency().len(), s.resident().len());
                    // determinism
                    let again = policy_step(&before, kind, a, Some(&sets[i + 1..])).unwrap();
                    prop_assert_eq!(&again.0, &s);
                    prop_assert_eq!(&again.1, &out);
                    if !matches!(kind, PolicyKind::LfuAged { .. }) {
                        for (e, f) in &prev_freq {
                            prop_assert!(s.freq(*e) >= *f);
                        }
                        prev_freq = s.freq.clone();
                    }
                }
            }
        }
    }
}
