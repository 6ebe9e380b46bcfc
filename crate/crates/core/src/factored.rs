//! Factored state/action spaces, local masks and component partitions.
//!
//! A transition `(s, a, s')` over a space with `n` state components and `m`
//! action components is described by a [`LocalMask`]: an `(n + m) x n`
//! boolean matrix whose row `i` / column `j` entry says whether next-state
//! component `j` depends locally on current component `i` (state rows first,
//! then action rows).
//!
//! For swapping purposes the time-`t` and time-`t+1` instances of a state
//! component are one node, and action nodes get all-zero dummy columns. The
//! connected components of that collapsed undirected graph form a
//! [`ComponentPartition`]; unions of its blocks are the legal swap units.

use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    pub name: String,
    pub dim: usize,
}

impl Component {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Component {
            name: name.into(),
            dim,
        }
    }
}

#[derive(Deserialize)]
struct RawSpace {
    state_components: Vec<Component>,
    #[serde(default)]
    action_components: Vec<Component>,
}

/// `S = S^1 (+) ... (+) S^n`, `A = A^1 (+) ... (+) A^m`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawSpace")]
pub struct FactoredSpace {
    state_components: Vec<Component>,
    action_components: Vec<Component>,
    #[serde(skip)]
    state_offsets: Vec<usize>,
    #[serde(skip)]
    action_offsets: Vec<usize>,
}

impl TryFrom<RawSpace> for FactoredSpace {
    type Error = Error;

    fn try_from(raw: RawSpace) -> Result<Self> {
        FactoredSpace::new(raw.state_components, raw.action_components)
    }
}

fn offsets(components: &[Component]) -> Vec<usize> {
    let mut out = Vec::with_capacity(components.len() + 1);
    let mut acc = 0;
    out.push(0);
    for c in components {
        acc += c.dim;
        out.push(acc);
    }
    out
}

impl FactoredSpace {
    pub fn new(state: Vec<Component>, action: Vec<Component>) -> Result<Self> {
        if state.is_empty() {
            return Err(Error::InvalidSpace("at least one state component".into()));
        }
        if let Some(c) = state.iter().chain(action.iter()).find(|c| c.dim == 0) {
            return Err(Error::InvalidSpace(format!(
                "component {} has dim 0",
                c.name
            )));
        }
        Ok(FactoredSpace {
            state_offsets: offsets(&state),
            action_offsets: offsets(&action),
            state_components: state,
            action_components: action,
        })
    }

    /// Convenience constructor for `n` state and `m` action components of
    /// uniform dimension.
    pub fn uniform(n: usize, state_dim: usize, m: usize, action_dim: usize) -> Result<Self> {
        FactoredSpace::new(
            (0..n)
                .map(|i| Component::new(format!("s{i}"), state_dim))
                .collect(),
            (0..m)
                .map(|i| Component::new(format!("a{i}"), action_dim))
                .collect(),
        )
    }

    pub fn state_components(&self) -> &[Component] {
        &self.state_components
    }

    pub fn action_components(&self) -> &[Component] {
        &self.action_components
    }

    /// `n`
    pub fn n_state(&self) -> usize {
        self.state_components.len()
    }

    /// `m`
    pub fn n_action(&self) -> usize {
        self.action_components.len()
    }

    /// `n + m`, the node count of the collapsed swap graph.
    pub fn n_nodes(&self) -> usize {
        self.n_state() + self.n_action()
    }

    pub fn state_len(&self) -> usize {
        *self.state_offsets.last().unwrap()
    }

    pub fn action_len(&self) -> usize {
        *self.action_offsets.last().unwrap()
    }

    pub fn state_range(&self, i: usize) -> Range<usize> {
        self.state_offsets[i]..self.state_offsets[i + 1]
    }

    pub fn action_range(&self, k: usize) -> Range<usize> {
        self.action_offsets[k]..self.action_offsets[k + 1]
    }

    /// Flat range of node `i` inside the concatenated `(s, a)` vector.
    pub fn node_range(&self, node: usize) -> Range<usize> {
        let n = self.n_state();
        if node < n {
            self.state_range(node)
        } else {
            let r = self.action_range(node - n);
            r.start + self.state_len()..r.end + self.state_len()
        }
    }

    pub fn node_dim(&self, node: usize) -> usize {
        self.node_range(node).len()
    }

    pub fn check_state(&self, values: &[f64]) -> Result<()> {
        check_len("state", self.state_len(), values.len())
    }

    pub fn check_action(&self, values: &[f64]) -> Result<()> {
        check_len("action", self.action_len(), values.len())
    }
}

pub(crate) fn check_len(what: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            got,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum VectorKind {
    State,
    Action,
}

/// A flat real vector tied to a factored space.
#[derive(Clone, Debug, PartialEq)]
pub struct FactoredVector {
    space: Arc<FactoredSpace>,
    kind: VectorKind,
    values: Vec<f64>,
}

impl FactoredVector {
    pub fn new(space: Arc<FactoredSpace>, kind: VectorKind, values: Vec<f64>) -> Result<Self> {
        match kind {
            VectorKind::State => space.check_state(&values)?,
            VectorKind::Action => space.check_action(&values)?,
        }
        Ok(FactoredVector {
            space,
            kind,
            values,
        })
    }

    pub fn state(space: Arc<FactoredSpace>, values: Vec<f64>) -> Result<Self> {
        Self::new(space, VectorKind::State, values)
    }

    pub fn action(space: Arc<FactoredSpace>, values: Vec<f64>) -> Result<Self> {
        Self::new(space, VectorKind::Action, values)
    }

    pub fn space(&self) -> &Arc<FactoredSpace> {
        &self.space
    }

    pub fn kind(&self) -> VectorKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn n_components(&self) -> usize {
        match self.kind {
            VectorKind::State => self.space.n_state(),
            VectorKind::Action => self.space.n_action(),
        }
    }

    fn range(&self, i: usize) -> Range<usize> {
        match self.kind {
            VectorKind::State => self.space.state_range(i),
            VectorKind::Action => self.space.action_range(i),
        }
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.values[self.range(i)]
    }

    pub fn component_mut(&mut self, i: usize) -> &mut [f64] {
        let r = self.range(i);
        &mut self.values[r]
    }
}

/// Where a transition came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum Provenance {
    Real = 0,
    Coda = 1,
    IdentityCoda = 2,
}

impl Provenance {
    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(Provenance::Real),
            1 => Ok(Provenance::Coda),
            2 => Ok(Provenance::IdentityCoda),
            other => Err(Error::Format(format!("unknown provenance tag {other}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Real => "real",
            Provenance::Coda => "coda",
            Provenance::IdentityCoda => "identity-coda",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub s: FactoredVector,
    pub a: FactoredVector,
    pub s_next: FactoredVector,
    pub reward: f64,
    pub terminal: bool,
    pub provenance: Provenance,
}

impl Transition {
    pub fn new(
        space: &Arc<FactoredSpace>,
        s: Vec<f64>,
        a: Vec<f64>,
        s_next: Vec<f64>,
        reward: f64,
        terminal: bool,
    ) -> Result<Self> {
        if !reward.is_finite() {
            return Err(Error::Precondition("reward must be finite".into()));
        }
        Ok(Transition {
            s: FactoredVector::state(space.clone(), s)?,
            a: FactoredVector::action(space.clone(), a)?,
            s_next: FactoredVector::state(space.clone(), s_next)?,
            reward,
            terminal,
            provenance: Provenance::Real,
        })
    }

    pub fn space(&self) -> &Arc<FactoredSpace> {
        self.s.space()
    }

    pub fn same_space(&self, other: &Transition) -> bool {
        Arc::ptr_eq(self.space(), other.space()) || **self.space() == **other.space()
    }

    /// Exact equality of the `(s, a, s')` payload bits.
    pub fn same_payload(&self, other: &Transition) -> bool {
        let eq = |x: &[f64], y: &[f64]| {
            x.len() == y.len() && x.iter().zip(y).all(|(a, b)| a.to_bits() == b.to_bits())
        };
        eq(self.s.values(), other.s.values())
            && eq(self.a.values(), other.a.values())
            && eq(self.s_next.values(), other.s_next.values())
    }

    pub(crate) fn payload_key(&self) -> Vec<u64> {
        self.s
            .values()
            .iter()
            .chain(self.a.values())
            .chain(self.s_next.values())
            .map(|v| v.to_bits())
            .collect()
    }
}

/// Boolean `(n + m) x n` local dependency matrix.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocalMask {
    n_state: usize,
    n_action: usize,
    entries: Vec<bool>,
}

impl LocalMask {
    pub fn empty(n_state: usize, n_action: usize) -> Self {
        LocalMask {
            n_state,
            n_action,
            entries: vec![false; (n_state + n_action) * n_state],
        }
    }

    pub fn full(n_state: usize, n_action: usize) -> Self {
        LocalMask {
            n_state,
            n_action,
            entries: vec![true; (n_state + n_action) * n_state],
        }
    }

    /// State rows carry the identity, action rows are empty.
    pub fn identity(n_state: usize, n_action: usize) -> Self {
        let mut m = Self::empty(n_state, n_action);
        for i in 0..n_state {
            m.set(i, i, true);
        }
        m
    }

    pub fn from_rows(n_state: usize, n_action: usize, rows: &[Vec<u8>]) -> Result<Self> {
        if rows.len() != n_state + n_action {
            return Err(Error::InvalidMask(format!(
                "expected {} rows, got {}",
                n_state + n_action,
                rows.len()
            )));
        }
        let mut entries = Vec::with_capacity(rows.len() * n_state);
        for row in rows {
            if row.len() != n_state {
                return Err(Error::InvalidMask(format!(
                    "expected {n_state} columns, got {}",
                    row.len()
                )));
            }
            for &v in row {
                match v {
                    0 => entries.push(false),
                    1 => entries.push(true),
                    other => return Err(Error::InvalidMask(format!("entry {other} is not 0/1"))),
                }
            }
        }
        Ok(LocalMask {
            n_state,
            n_action,
            entries,
        })
    }

    pub fn for_space(space: &FactoredSpace) -> Self {
        Self::empty(space.n_state(), space.n_action())
    }

    pub fn n_state(&self) -> usize {
        self.n_state
    }

    pub fn n_action(&self) -> usize {
        self.n_action
    }

    pub fn n_rows(&self) -> usize {
        self.n_state + self.n_action
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.entries[row * self.n_state + col]
    }

    pub fn set(&mut self, row: usize, col: usize, on: bool) {
        self.entries[row * self.n_state + col] = on;
    }

    pub fn entries(&self) -> &[bool] {
        &self.entries
    }

    pub fn count_ones(&self) -> usize {
        self.entries.iter().filter(|&&e| e).count()
    }

    pub fn check_space(&self, space: &FactoredSpace) -> Result<()> {
        if self.n_state != space.n_state() || self.n_action != space.n_action() {
            return Err(Error::InvalidMask(format!(
                "mask is {}x{} (n={}, m={}) but space has n={}, m={}",
                self.n_rows(),
                self.n_state,
                self.n_state,
                self.n_action,
                space.n_state(),
                space.n_action()
            )));
        }
        Ok(())
    }

    /// Entrywise `self <= other`.
    pub fn is_subset_of(&self, other: &LocalMask) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(&a, &b)| !a || b)
    }

    pub fn union_with(&mut self, other: &LocalMask) {
        for (a, &b) in self.entries.iter_mut().zip(&other.entries) {
            *a |= b;
        }
    }
}

struct DisjointSets {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSets {
    fn new(n: usize) -> Self {
        DisjointSets {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }

    fn into_partition(mut self) -> ComponentPartition {
        let n = self.parent.len();
        let mut root_to_block = vec![usize::MAX; n];
        let mut blocks: Vec<Vec<usize>> = Vec::new();
        for x in 0..n {
            let r = self.find(x);
            if root_to_block[r] == usize::MAX {
                root_to_block[r] = blocks.len();
                blocks.push(Vec::new());
            }
            blocks[root_to_block[r]].push(x);
        }
        ComponentPartition::from_sorted_blocks(n, blocks)
    }
}

/// Disjoint, exhaustive blocks over nodes `0..n_nodes`, kept in canonical
/// order (members ascending, blocks ordered by smallest member).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ComponentPartition {
    n_nodes: usize,
    blocks: Vec<Vec<usize>>,
    block_of: Vec<usize>,
}

impl ComponentPartition {
    fn from_sorted_blocks(n_nodes: usize, blocks: Vec<Vec<usize>>) -> Self {
        let mut block_of = vec![0; n_nodes];
        for (b, members) in blocks.iter().enumerate() {
            for &x in members {
                block_of[x] = b;
            }
        }
        ComponentPartition {
            n_nodes,
            blocks,
            block_of,
        }
    }

    /// Builds a partition from arbitrary blocks, validating the invariants.
    pub fn new(n_nodes: usize, blocks: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; n_nodes];
        let mut canon = Vec::with_capacity(blocks.len());
        for mut b in blocks {
            if b.is_empty() {
                return Err(Error::Precondition("empty partition block".into()));
            }
            b.sort_unstable();
            for &x in &b {
                if x >= n_nodes || seen[x] {
                    return Err(Error::Precondition(format!(
                        "node {x} out of range or repeated"
                    )));
                }
                seen[x] = true;
            }
            canon.push(b);
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Precondition(
                "partition does not cover all nodes".into(),
            ));
        }
        canon.sort_unstable_by_key(|b| b[0]);
        Ok(Self::from_sorted_blocks(n_nodes, canon))
    }

    pub fn singletons(n_nodes: usize) -> Self {
        Self::from_sorted_blocks(n_nodes, (0..n_nodes).map(|i| vec![i]).collect())
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_of(&self, node: usize) -> usize {
        self.block_of[node]
    }

    /// True iff `members` is a union of blocks of this partition.
    pub fn is_union_of_blocks(&self, members: &[usize]) -> bool {
        let mut inside = vec![false; self.n_nodes];
        for &x in members {
            if x >= self.n_nodes {
                return false;
            }
            inside[x] = true;
        }
        members
            .iter()
            .all(|&x| self.blocks[self.block_of[x]].iter().all(|&y| inside[y]))
    }

    /// Union of the blocks whose indices are set in `selected`.
    pub fn union_of(&self, selected: &[bool]) -> IndependentComponentSet {
        let mut members: Vec<usize> = self
            .blocks
            .iter()
            .zip(selected)
            .filter(|(_, &s)| s)
            .flat_map(|(b, _)| b.iter().copied())
            .collect();
        members.sort_unstable();
        IndependentComponentSet { members }
    }
}

/// A union of partition blocks: a legal swap unit.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct IndependentComponentSet {
    members: Vec<usize>,
}

impl IndependentComponentSet {
    /// Builds a set from node indices, validating that it is a union of
    /// blocks of `partition`.
    pub fn new(partition: &ComponentPartition, mut members: Vec<usize>) -> Result<Self> {
        members.sort_unstable();
        members.dedup();
        if !partition.is_union_of_blocks(&members) {
            return Err(Error::Precondition(format!(
                "{members:?} is not a union of partition blocks"
            )));
        }
        Ok(IndependentComponentSet { members })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn contains(&self, node: usize) -> bool {
        self.members.binary_search(&node).is_ok()
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// Connected components of the collapsed local causal graph of `mask`.
///
/// Node `i` (a row) and node `j` (a column, i.e. a state component) are
/// linked iff `mask[i][j]` is set; the next-state column `j` is the same node
/// as state row `j`, so either orientation links them. Action nodes have no
/// columns and link only through their own rows.
pub fn components(mask: &LocalMask) -> ComponentPartition {
    let n = mask.n_state();
    let mut ds = DisjointSets::new(mask.n_rows());
    for row in 0..mask.n_rows() {
        for col in 0..n {
            if row != col && mask.get(row, col) {
                ds.union(row, col);
            }
        }
    }
    ds.into_partition()
}

/// Like [`components`] but first checks the mask against `space`.
pub fn components_in(space: &FactoredSpace, mask: &LocalMask) -> Result<ComponentPartition> {
    mask.check_space(space)?;
    Ok(components(mask))
}

/// The finest partition coarser than both `p1` and `p2`.
pub fn join(p1: &ComponentPartition, p2: &ComponentPartition) -> Result<ComponentPartition> {
    if p1.n_nodes != p2.n_nodes {
        return Err(Error::NodeCountMismatch(p1.n_nodes, p2.n_nodes));
    }
    let mut ds = DisjointSets::new(p1.n_nodes);
    for block in p1.blocks.iter().chain(&p2.blocks) {
        for w in block.windows(2) {
            ds.union(w[0], w[1]);
        }
    }
    Ok(ds.into_partition())
}

/// Every nonempty proper node set that is simultaneously a union of blocks
/// of `p1` and of `p2` (the `D1 ∩ D2` family).
///
/// Such sets are exactly the nonempty proper unions of blocks of
/// `join(p1, p2)`. Each join block is a union of `p1` blocks and of `p2`
/// blocks, so unions of join blocks qualify. Conversely a set that is a union
/// of blocks in both partitions is closed under "shares a `p1` block" and
/// "shares a `p2` block", hence under their transitive closure, whose classes
/// are the join blocks.
///
/// The result has `2^b - 2` entries for `b` join blocks; use
/// [`sample_shared_set`] when only a draw is needed.
pub fn shared_independent_sets(
    p1: &ComponentPartition,
    p2: &ComponentPartition,
) -> Result<Vec<IndependentComponentSet>> {
    let j = join(p1, p2)?;
    Ok(proper_unions(&j))
}

/// All nonempty proper unions of blocks of `partition`, ordered by the
/// binary code of the selected blocks.
pub fn proper_unions(partition: &ComponentPartition) -> Vec<IndependentComponentSet> {
    let b = partition.n_blocks();
    assert!(b < 32, "refusing to enumerate 2^{b} block unions");
    if b < 2 {
        return Vec::new();
    }
    (1u64..(1u64 << b) - 1)
        .map(|code| {
            let selected: Vec<bool> = (0..b).map(|k| code >> k & 1 == 1).collect();
            partition.union_of(&selected)
        })
        .collect()
}

/// Uniform draw from the nonempty proper unions of blocks of `join`, or
/// `None` when there are fewer than two blocks.
pub fn sample_shared_set<R: Rng + ?Sized>(
    join: &ComponentPartition,
    rng: &mut R,
) -> Option<IndependentComponentSet> {
    let b = join.n_blocks();
    if b < 2 {
        return None;
    }
    loop {
        let selected: Vec<bool> = (0..b).map(|_| rng.random::<bool>()).collect();
        let count = selected.iter().filter(|&&s| s).count();
        if count > 0 && count < b {
            return Some(join.union_of(&selected));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn part(n: usize, blocks: &[&[usize]]) -> ComponentPartition {
        ComponentPartition::new(n, blocks.iter().map(|b| b.to_vec()).collect()).unwrap()
    }

    #[test]
    fn identity_mask_gives_singletons() {
        let m = LocalMask::identity(3, 0);
        assert_eq!(components(&m), part(3, &[&[0], &[1], &[2]]));
    }

    #[test]
    fn coupled_mask_gives_one_block() {
        // rows s1, s2, a1
        let m = LocalMask::from_rows(2, 1, &[vec![1, 1], vec![0, 1], vec![1, 0]]).unwrap();
        assert_eq!(components(&m), part(3, &[&[0, 1, 2]]));
    }

    #[test]
    fn two_armed_robot_local_graph_splits() {
        // left arm state/action and right arm state/action, no cross edges
        // rows: S^L, S^R, A^L, A^R
        let m =
            LocalMask::from_rows(2, 2, &[vec![1, 0], vec![0, 1], vec![1, 0], vec![0, 1]]).unwrap();
        let p = components(&m);
        assert_eq!(p, part(4, &[&[0, 2], &[1, 3]]));
    }

    #[test]
    fn action_rows_without_edges_are_singletons() {
        let m = LocalMask::identity(2, 2);
        assert_eq!(components(&m).n_blocks(), 4);
    }

    #[test]
    fn mask_space_mismatch_is_reported() {
        let space = FactoredSpace::uniform(3, 1, 0, 1).unwrap();
        let m = LocalMask::identity(2, 0);
        assert!(matches!(
            components_in(&space, &m),
            Err(Error::InvalidMask(_))
        ));
        assert!(LocalMask::from_rows(2, 0, &[vec![1, 2], vec![0, 1]]).is_err());
    }

    #[test]
    fn join_examples() {
        let a = part(2, &[&[0], &[1]]);
        assert_eq!(join(&a, &a).unwrap(), a);
        let p1 = part(3, &[&[0, 1], &[2]]);
        let p2 = part(3, &[&[0], &[1, 2]]);
        assert_eq!(join(&p1, &p2).unwrap(), part(3, &[&[0, 1, 2]]));
        let p1 = part(4, &[&[0], &[1], &[2], &[3]]);
        let p2 = part(4, &[&[0, 1], &[2], &[3]]);
        assert_eq!(join(&p1, &p2).unwrap(), p2);
        assert!(matches!(
            join(&part(2, &[&[0, 1]]), &part(3, &[&[0, 1, 2]])),
            Err(Error::NodeCountMismatch(2, 3))
        ));
    }

    #[test]
    fn shared_sets_examples() {
        let a = part(2, &[&[0], &[1]]);
        let sets = shared_independent_sets(&a, &a).unwrap();
        let members: Vec<_> = sets.iter().map(|s| s.members().to_vec()).collect();
        assert_eq!(members, vec![vec![0], vec![1]]);

        let one = part(3, &[&[0, 1, 2]]);
        assert!(shared_independent_sets(&one, &one).unwrap().is_empty());

        let p1 = part(3, &[&[0], &[1], &[2]]);
        let p2 = part(3, &[&[0, 1], &[2]]);
        let mut members: Vec<_> = shared_independent_sets(&p1, &p2)
            .unwrap()
            .iter()
            .map(|s| s.members().to_vec())
            .collect();
        members.sort();
        assert_eq!(members, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn sampling_is_uniform_over_proper_unions() {
        let p = ComponentPartition::singletons(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut counts = std::collections::HashMap::new();
        for _ in 0..6000 {
            let d = sample_shared_set(&p, &mut rng).unwrap();
            *counts.entry(d.members().to_vec()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 6);
        for (_, c) in counts {
            assert!((800..1200).contains(&c), "count {c}");
        }
        assert!(sample_shared_set(
            &ComponentPartition::new(2, vec![vec![0, 1]]).unwrap(),
            &mut rng
        )
        .is_none());
    }

    #[test]
    fn space_layout() {
        let space = FactoredSpace::new(
            vec![Component::new("a", 2), Component::new("b", 3)],
            vec![Component::new("u", 1)],
        )
        .unwrap();
        assert_eq!(space.state_len(), 5);
        assert_eq!(space.state_range(1), 2..5);
        assert_eq!(space.node_range(2), 5..6);
        assert!(FactoredSpace::new(vec![], vec![]).is_err());
        assert!(FactoredSpace::new(vec![Component::new("z", 0)], vec![]).is_err());
        let json = serde_json::to_string(&space).unwrap();
        let back: FactoredSpace = serde_json::from_str(&json).unwrap();
        assert_eq!(back, space);
        assert_eq!(back.state_range(1), 2..5);
    }

    // Brute-force oracle: a set is in D iff it is a union of blocks in both.
    fn brute_force_shared(p1: &ComponentPartition, p2: &ComponentPartition) -> Vec<Vec<usize>> {
        let n = p1.n_nodes();
        let mut out = Vec::new();
        for code in 1u32..(1 << n) - 1 {
            let set: Vec<usize> = (0..n).filter(|&i| code >> i & 1 == 1).collect();
            if p1.is_union_of_blocks(&set) && p2.is_union_of_blocks(&set) {
                out.push(set);
            }
        }
        out.sort();
        out
    }

    fn arb_mask(max_nodes: usize) -> impl Strategy<Value = LocalMask> {
        (1usize..=max_nodes)
            .prop_flat_map(|total| (1usize..=total, Just(total)))
            .prop_flat_map(|(n, total)| {
                let m = total - n;
                proptest::collection::vec(proptest::bool::weighted(0.2), total * n).prop_map(
                    move |bits| {
                        let rows: Vec<Vec<u8>> = bits
                            .chunks(n)
                            .map(|r| r.iter().map(|&b| b as u8).collect())
                            .collect();
                        LocalMask::from_rows(n, m, &rows).unwrap()
                    },
                )
            })
    }

    fn arb_partition(n: usize) -> impl Strategy<Value = ComponentPartition> {
        proptest::collection::vec(0..n, n).prop_map(move |labels| {
            let mut blocks: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for (i, l) in labels.into_iter().enumerate() {
                blocks.entry(l).or_default().push(i);
            }
            ComponentPartition::new(n, blocks.into_values().collect()).unwrap()
        })
    }

    proptest! {
        #[test]
        fn shared_sets_match_powerset_oracle(
            (m1, m2) in arb_mask(8).prop_flat_map(|m| {
                let (n, a) = (m.n_state(), m.n_action());
                let other = proptest::collection::vec(proptest::bool::weighted(0.2), (n + a) * n)
                    .prop_map(move |bits| {
                        let rows: Vec<Vec<u8>> =
                            bits.chunks(n).map(|r| r.iter().map(|&b| b as u8).collect()).collect();
                        LocalMask::from_rows(n, a, &rows).unwrap()
                    });
                (Just(m), other)
            })
        ) {
            let (c1, c2) = (components(&m1), components(&m2));
            let mut ours: Vec<Vec<usize>> = shared_independent_sets(&c1, &c2)
                .unwrap()
                .into_iter()
                .map(|d| d.members().to_vec())
                .collect();
            ours.sort();
            for d in &ours {
                prop_assert!(c1.is_union_of_blocks(d) && c2.is_union_of_blocks(d));
            }
            prop_assert_eq!(ours, brute_force_shared(&c1, &c2));
        }

        #[test]
        fn components_are_permutation_equivariant(
            mask in arb_mask(7),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let (n, m) = (mask.n_state(), mask.n_action());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // permute state nodes among themselves and action nodes among themselves
            let mut ps: Vec<usize> = (0..n).collect();
            ps.shuffle(&mut rng);
            let mut pa: Vec<usize> = (0..m).collect();
            pa.shuffle(&mut rng);
            let perm = |x: usize| if x < n { ps[x] } else { n + pa[x - n] };
            let mut permuted = LocalMask::empty(n, m);
            for r in 0..n + m {
                for c in 0..n {
                    permuted.set(perm(r), perm(c), mask.get(r, c));
                }
            }
            let original = components(&mask);
            let relabeled = ComponentPartition::new(
                n + m,
                original.blocks().iter().map(|b| b.iter().map(|&x| perm(x)).collect()).collect(),
            ).unwrap();
            prop_assert_eq!(components(&permuted), relabeled);
        }

        #[test]
        fn join_is_a_semilattice(
            (a, b, c) in (1usize..=10).prop_flat_map(|n| (arb_partition(n), arb_partition(n), arb_partition(n)))
        ) {
            prop_assert_eq!(join(&a, &a).unwrap(), a.clone());
            prop_assert_eq!(join(&a, &b).unwrap(), join(&b, &a).unwrap());
            let left = join(&join(&a, &b).unwrap(), &c).unwrap();
            let right = join(&a, &join(&b, &c).unwrap()).unwrap();
            prop_assert_eq!(left, right);
        }
    }
}
