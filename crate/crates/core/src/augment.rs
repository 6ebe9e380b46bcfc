//! Counterfactual data augmentation: swap independent component groups
//! between two transitions and keep the proposal only if it is itself
//! locally factored along the swapped groups.

use std::collections::HashSet;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::envs::{MaskedDynamics, RewardFn};
use crate::factored::{components_in, join, proper_unions, sample_shared_set};
use crate::par::{self, Parallelism};
use crate::{
    ComponentPartition, Error, FactoredSpace, IndependentComponentSet, LocalMask, Provenance,
    Result, Transition,
};

pub use crate::sandy::Learned;

/// Source of local masks `M(s, a)`.
pub trait MaskProvider: Send + Sync {
    fn space(&self) -> &Arc<FactoredSpace>;

    fn mask(&self, s: &[f64], a: &[f64]) -> Result<LocalMask>;

    /// Provenance tag given to the samples this provider validates.
    fn provenance(&self) -> Provenance {
        Provenance::Coda
    }
}

/// The environment's own mask.
#[derive(Clone)]
pub struct GroundTruth {
    env: Arc<dyn MaskedDynamics>,
}

impl GroundTruth {
    pub fn new(env: Arc<dyn MaskedDynamics>) -> Self {
        GroundTruth { env }
    }
}

impl MaskProvider for GroundTruth {
    fn space(&self) -> &Arc<FactoredSpace> {
        self.env.space()
    }

    fn mask(&self, s: &[f64], a: &[f64]) -> Result<LocalMask> {
        Ok(self.env.step(s, a)?.1)
    }
}

/// Every component is its own block, so every proposal is accepted.
#[derive(Clone, Debug)]
pub struct Identity {
    space: Arc<FactoredSpace>,
}

impl Identity {
    pub fn new(space: Arc<FactoredSpace>) -> Self {
        Identity { space }
    }
}

impl MaskProvider for Identity {
    fn space(&self) -> &Arc<FactoredSpace> {
        &self.space
    }

    fn mask(&self, _s: &[f64], _a: &[f64]) -> Result<LocalMask> {
        Ok(LocalMask::identity(
            self.space.n_state(),
            self.space.n_action(),
        ))
    }

    fn provenance(&self) -> Provenance {
        Provenance::IdentityCoda
    }
}

/// Where the 2-D position of each state component lives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PositionLayout {
    /// Offset of `(x, y)` inside each state component.
    pub offsets: Vec<Option<usize>>,
    /// The component every action acts on.
    pub effector: usize,
}

impl PositionLayout {
    /// Positions at offset 0 of every component.
    pub fn leading(space: &FactoredSpace, effector: usize) -> Self {
        PositionLayout {
            offsets: vec![Some(0); space.n_state()],
            effector,
        }
    }

    fn validate(&self, space: &FactoredSpace) -> Result<()> {
        if self.offsets.len() != space.n_state() {
            return Err(Error::Dimension {
                what: "position layout",
                expected: space.n_state(),
                got: self.offsets.len(),
            });
        }
        for (i, off) in self.offsets.iter().enumerate() {
            match off {
                Some(o) if o + 2 <= space.state_components()[i].dim => {}
                _ => return Err(Error::MissingPosition(i)),
            }
        }
        if self.effector >= space.n_state() {
            return Err(Error::MissingPosition(self.effector));
        }
        Ok(())
    }
}

/// Objects within `threshold` of each other are coupled (distance equal to
/// the threshold counts as coupled). Actions always drive the effector and
/// reach any object within `threshold` of it.
pub fn heuristic_distance_mask(
    space: &FactoredSpace,
    layout: &PositionLayout,
    s: &[f64],
    threshold: f64,
) -> Result<LocalMask> {
    layout.validate(space)?;
    space.check_state(s)?;
    let n = space.n_state();
    let pos = |i: usize| {
        let base = space.state_range(i).start + layout.offsets[i].unwrap_or(0);
        (s[base], s[base + 1])
    };
    let near = |i: usize, j: usize| {
        let (p, q) = (pos(i), pos(j));
        (p.0 - q.0).hypot(p.1 - q.1) <= threshold
    };
    let mut mask = LocalMask::identity(n, space.n_action());
    for i in 0..n {
        for j in i + 1..n {
            if near(i, j) {
                mask.set(i, j, true);
                mask.set(j, i, true);
            }
        }
    }
    for k in 0..space.n_action() {
        for j in 0..n {
            if j == layout.effector || near(layout.effector, j) {
                mask.set(n + k, j, true);
            }
        }
    }
    Ok(mask)
}

#[derive(Clone, Debug)]
pub struct DistanceHeuristic {
    space: Arc<FactoredSpace>,
    layout: PositionLayout,
    threshold: f64,
}

impl DistanceHeuristic {
    pub fn new(space: Arc<FactoredSpace>, layout: PositionLayout, threshold: f64) -> Result<Self> {
        layout.validate(&space)?;
        if !(threshold >= 0.0) {
            return Err(Error::InvalidConfig("threshold must be nonnegative".into()));
        }
        Ok(DistanceHeuristic {
            space,
            layout,
            threshold,
        })
    }
}

impl MaskProvider for DistanceHeuristic {
    fn space(&self) -> &Arc<FactoredSpace> {
        &self.space
    }

    fn mask(&self, s: &[f64], _a: &[f64]) -> Result<LocalMask> {
        heuristic_distance_mask(&self.space, &self.layout, s, self.threshold)
    }
}

fn partition_of(provider: &dyn MaskProvider, t: &Transition) -> Result<ComponentPartition> {
    let mask = provider.mask(t.s.values(), t.a.values())?;
    components_in(provider.space(), &mask)
}

/// `t1` with every node in `d` taken from `t2`: state nodes replace both the
/// current and the next-state slices, action nodes the action slice.
pub fn swap(t1: &Transition, t2: &Transition, d: &IndependentComponentSet) -> Result<Transition> {
    if !t1.same_space(t2) {
        return Err(Error::SpaceMismatch);
    }
    let space = t1.space().clone();
    let n = space.n_state();
    let mut out = t1.clone();
    for &node in d.members() {
        if node < n {
            let r = space.state_range(node);
            out.s.values_mut()[r.clone()].copy_from_slice(&t2.s.values()[r.clone()]);
            out.s_next.values_mut()[r.clone()].copy_from_slice(&t2.s_next.values()[r]);
        } else {
            let r = space.action_range(node - n);
            out.a.values_mut()[r.clone()].copy_from_slice(&t2.a.values()[r]);
        }
    }
    Ok(out)
}

/// Checks `proposal` against its own mask and finishes it: on acceptance
/// the provenance is set and the reward relabelled.
fn validate(
    proposal: Transition,
    d: &IndependentComponentSet,
    provider: &dyn MaskProvider,
    reward_fn: Option<&dyn RewardFn>,
) -> Result<Option<Transition>> {
    let p = partition_of(provider, &proposal)?;
    if !p.is_union_of_blocks(d.members()) {
        return Ok(None);
    }
    let mut out = proposal;
    if let Some(f) = reward_fn {
        let (r, terminal) = f.relabel(out.s.values(), out.a.values(), out.s_next.values());
        if !r.is_finite() {
            return Err(Error::Precondition(
                "relabelled reward is not finite".into(),
            ));
        }
        out.reward = r;
        out.terminal = terminal;
    }
    out.provenance = provider.provenance();
    Ok(Some(out))
}

/// One counterfactual proposal between `t1` and `t2`, or `None` when there
/// is no shared swap set or the proposal is rejected.
pub fn coda<R: Rng + ?Sized>(
    t1: &Transition,
    t2: &Transition,
    provider: &dyn MaskProvider,
    reward_fn: Option<&dyn RewardFn>,
    rng: &mut R,
) -> Result<Option<Transition>> {
    if !t1.same_space(t2) || **t1.space() != **provider.space() {
        return Err(Error::SpaceMismatch);
    }
    let joined = join(&partition_of(provider, t1)?, &partition_of(provider, t2)?)?;
    let Some(d) = sample_shared_set(&joined, rng) else {
        return Ok(None);
    };
    validate(swap(t1, t2, &d)?, &d, provider, reward_fn)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodaConfig {
    pub pairs_per_round: usize,
    pub max_samples_per_pair: usize,
    pub relabel_reward: bool,
    /// Excludes swapping every component (which reproduces `t2`).
    pub require_proper_subset: bool,
    pub seed: u64,
}

impl Default for CodaConfig {
    fn default() -> Self {
        CodaConfig {
            pairs_per_round: 2000,
            max_samples_per_pair: 5,
            relabel_reward: true,
            require_proper_subset: true,
            seed: 0,
        }
    }
}

impl CodaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.pairs_per_round == 0 || self.max_samples_per_pair == 0 {
            return Err(Error::InvalidConfig("CoDA counts must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodaStats {
    pub pairs: usize,
    /// Pairs whose joined partition has a single block.
    pub pairs_without_swap: usize,
    pub proposals: usize,
    pub accepted: usize,
    /// Accepted samples kept after deduplication.
    pub unique: usize,
}

impl CodaStats {
    pub fn acceptance_rate(&self) -> f64 {
        if self.proposals == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposals as f64
        }
    }

    fn absorb(&mut self, other: &CodaStats) {
        self.pairs += other.pairs;
        self.pairs_without_swap += other.pairs_without_swap;
        self.proposals += other.proposals;
        self.accepted += other.accepted;
    }
}

/// Up to `max` distinct swap sets for one pair: all of them when there are
/// few, otherwise distinct uniform draws.
fn draw_swap_sets(
    joined: &ComponentPartition,
    max: usize,
    proper: bool,
    rng: &mut ChaCha8Rng,
) -> Vec<IndependentComponentSet> {
    let b = joined.n_blocks();
    let available = if b >= 63 {
        usize::MAX
    } else {
        (1usize << b) - 1 - proper as usize
    };
    if available == 0 {
        return Vec::new();
    }
    if available <= max {
        let mut all = proper_unions(joined);
        if !proper {
            all.push(joined.union_of(&vec![true; b]));
        }
        return all;
    }
    let mut out: Vec<IndependentComponentSet> = Vec::with_capacity(max);
    while out.len() < max {
        let selected: Vec<bool> = (0..b).map(|_| rng.random::<bool>()).collect();
        let count = selected.iter().filter(|&&s| s).count();
        if count == 0 || (proper && count == b) {
            continue;
        }
        let d = joined.union_of(&selected);
        if !out.contains(&d) {
            out.push(d);
        }
    }
    out
}

struct PairOutcome {
    samples: Vec<Transition>,
    stats: CodaStats,
}

struct Engine<'a> {
    buffer: &'a [Transition],
    partitions: Vec<ComponentPartition>,
    provider: &'a dyn MaskProvider,
    reward_fn: Option<&'a dyn RewardFn>,
    config: &'a CodaConfig,
}

impl<'a> Engine<'a> {
    fn new(
        buffer: &'a [Transition],
        provider: &'a dyn MaskProvider,
        reward_fn: Option<&'a dyn RewardFn>,
        config: &'a CodaConfig,
        par: Parallelism,
    ) -> Result<Self> {
        config.validate()?;
        if buffer.len() < 2 {
            return Err(Error::Precondition(
                "CoDA needs at least two transitions".into(),
            ));
        }
        if buffer.iter().any(|t| **t.space() != **provider.space()) {
            return Err(Error::SpaceMismatch);
        }
        let partitions =
            par::try_map_indexed(par, buffer.len(), |k| partition_of(provider, &buffer[k]))?;
        Ok(Engine {
            buffer,
            partitions,
            provider,
            reward_fn: if config.relabel_reward {
                reward_fn
            } else {
                None
            },
            config,
        })
    }

    fn pair(&self, stream: u64) -> Result<PairOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(stream);
        let n = self.buffer.len();
        let i = rng.random_range(0..n);
        let j = (i + rng.random_range(1..n)) % n;
        let mut stats = CodaStats {
            pairs: 1,
            ..Default::default()
        };
        let joined = join(&self.partitions[i], &self.partitions[j])?;
        let sets = draw_swap_sets(
            &joined,
            self.config.max_samples_per_pair,
            self.config.require_proper_subset,
            &mut rng,
        );
        if sets.is_empty() {
            stats.pairs_without_swap = 1;
        }
        let mut samples: Vec<Transition> = Vec::new();
        for d in &sets {
            stats.proposals += 1;
            let proposal = swap(&self.buffer[i], &self.buffer[j], d)?;
            if let Some(t) = validate(proposal, d, self.provider, self.reward_fn)? {
                stats.accepted += 1;
                if !samples.iter().any(|s| s.same_payload(&t)) {
                    samples.push(t);
                }
            }
        }
        Ok(PairOutcome { samples, stats })
    }

    fn round(&self, round: usize, par: Parallelism) -> Result<Vec<PairOutcome>> {
        let pairs = self.config.pairs_per_round;
        par::try_map_indexed(par, pairs, |p| self.pair((round * pairs + p) as u64))
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CodaBatch {
    pub samples: Vec<Transition>,
    pub stats: CodaStats,
}

/// One round of `pairs_per_round` random ordered pairs. Pair `p` draws from
/// stream `p` of the configured seed, so the output does not depend on the
/// thread count.
pub fn coda_batch(
    buffer: &[Transition],
    provider: &dyn MaskProvider,
    reward_fn: Option<&dyn RewardFn>,
    config: &CodaConfig,
    par: Parallelism,
) -> Result<CodaBatch> {
    let engine = Engine::new(buffer, provider, reward_fn, config, par)?;
    let mut batch = CodaBatch::default();
    for o in engine.round(0, par)? {
        batch.stats.absorb(&o.stats);
        batch.samples.extend(o.samples);
    }
    batch.stats.unique = batch.samples.len();
    Ok(batch)
}

/// Runs rounds until `target` globally unique samples (distinct from each
/// other and from the buffer) exist or `max_rounds` is reached; the result
/// is truncated to `target`.
pub fn augment_to_target(
    buffer: &[Transition],
    provider: &dyn MaskProvider,
    reward_fn: Option<&dyn RewardFn>,
    config: &CodaConfig,
    target: usize,
    max_rounds: usize,
    par: Parallelism,
) -> Result<CodaBatch> {
    let engine = Engine::new(buffer, provider, reward_fn, config, par)?;
    let mut seen: HashSet<Vec<u64>> = buffer.iter().map(Transition::payload_key).collect();
    let mut batch = CodaBatch::default();
    for round in 0..max_rounds {
        if batch.samples.len() >= target {
            break;
        }
        for o in engine.round(round, par)? {
            batch.stats.absorb(&o.stats);
            for t in o.samples {
                if batch.samples.len() < target && seen.insert(t.payload_key()) {
                    batch.samples.push(t);
                }
            }
        }
    }
    batch.stats.unique = batch.samples.len();
    Ok(batch)
}

/// Closes `buffer` under all valid swaps: every ordered pair, every shared
/// swap set, repeated until nothing new appears. Returns the sources followed
/// by the new outcomes, deduplicated by payload bits; `None` when more than
/// `limit` outcomes would be produced.
pub fn exhaustive_closure(
    buffer: &[Transition],
    provider: &dyn MaskProvider,
    reward_fn: Option<&dyn RewardFn>,
    limit: usize,
) -> Result<Option<Vec<Transition>>> {
    let mut all: Vec<Transition> = Vec::new();
    let mut parts: Vec<ComponentPartition> = Vec::new();
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for t in buffer {
        if seen.insert(t.payload_key()) {
            parts.push(partition_of(provider, t)?);
            all.push(t.clone());
        }
    }
    let mut frontier_start = 0;
    while frontier_start < all.len() {
        let end = all.len();
        for i in 0..end {
            for j in 0..end {
                // only pairs touching the new frontier can produce new outcomes
                if i == j || (i < frontier_start && j < frontier_start) {
                    continue;
                }
                for d in proper_unions(&join(&parts[i], &parts[j])?) {
                    let proposal = swap(&all[i], &all[j], &d)?;
                    if seen.contains(&proposal.payload_key()) {
                        continue;
                    }
                    if let Some(t) = validate(proposal, &d, provider, reward_fn)? {
                        seen.insert(t.payload_key());
                        parts.push(partition_of(provider, &t)?);
                        all.push(t);
                        if all.len() > limit {
                            return Ok(None);
                        }
                    }
                }
            }
        }
        frontier_start = end;
    }
    Ok(Some(all))
}

/// `n^m`, the number of component-wise recombinations of `n` transitions
/// with `m` always independent components.
pub fn amplification_bound(n_samples: u64, m_components: u32) -> Result<u64> {
    if n_samples == 0 || m_components == 0 {
        return Err(Error::Precondition("need n >= 1 and m >= 1".into()));
    }
    n_samples
        .checked_pow(m_components)
        .filter(|&v| v <= i64::MAX as u64)
        .ok_or(Error::Overflow {
            base: n_samples,
            exp: m_components,
        })
}

/// Real and counterfactual transitions sampled at a fixed coda:real ratio.
#[derive(Clone, Debug, Default)]
pub struct AugmentedBuffer {
    pub real: Vec<Transition>,
    pub coda: Vec<Transition>,
    pub ratio: f64,
}

impl AugmentedBuffer {
    pub fn new(real: Vec<Transition>, coda: Vec<Transition>, ratio: f64) -> Result<Self> {
        if !(ratio >= 0.0) || !ratio.is_finite() {
            return Err(Error::InvalidConfig(
                "mixing ratio must be nonnegative".into(),
            ));
        }
        Ok(AugmentedBuffer { real, coda, ratio })
    }

    pub fn len(&self) -> usize {
        self.real.len() + self.coda.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of counterfactual draws in a batch of `size`.
    pub fn coda_share(&self, size: usize) -> usize {
        if self.coda.is_empty() {
            0
        } else if self.real.is_empty() {
            size
        } else {
            (size as f64 * self.ratio / (1.0 + self.ratio)).round() as usize
        }
    }

    /// Uniform draws with replacement, split between the two pools per the
    /// ratio.
    pub fn sample<'a, R: Rng + ?Sized>(
        &'a self,
        size: usize,
        rng: &mut R,
    ) -> Result<Vec<&'a Transition>> {
        if self.is_empty() {
            return Err(Error::Empty("augmented buffer"));
        }
        let n_coda = self.coda_share(size);
        let mut out = Vec::with_capacity(size);
        for k in 0..size {
            let pool = if k < n_coda { &self.coda } else { &self.real };
            out.push(&pool[rng.random_range(0..pool.len())]);
        }
        Ok(out)
    }
}
