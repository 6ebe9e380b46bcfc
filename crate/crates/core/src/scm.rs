//! Finite structural causal models over one time step.
//!
//! Inputs are the time-`t` variables (state variables then action
//! variables); outputs are the time-`t+1` state variables. Every output `i`
//! has its own independent noise variable `u_i` and a lookup table indexed
//! by the values of its declared parents followed by the noise value.
//!
//! All graph computations are exhaustive enumerations, so the module is only
//! meant for small models (a few variables with a handful of values each).
//!
//! # Structural minimality on a subspace
//!
//! The graph of a model restricted to a subspace `L` has an edge `k -> i`
//! iff there are two assignments in `L` that differ only in input `k` and a
//! noise value `u_i` for which `f_i` differs. Only pairs that lie inside `L`
//! are considered, which is what makes `L` matter when it is not a product
//! set.
//!
//! # Mechanism independence
//!
//! Two disjoint node groups are independent in a graph when no edge runs
//! between them in either direction. Nodes are the collapsed time slices:
//! input `k < n` and output `k` are the same node.
//!
//! With that definition the union theorem is checked in the following form:
//! the groups are independent on `L1 ∪ L2` iff they are independent on `L1`
//! and on `L2`, and the restricted mechanisms agree across the two
//! subspaces. Agreement for group `i` means that for every `x1 ∈ L1` and
//! `x2 ∈ L2` differing in a single input that belongs to group `j`, every
//! output of group `i` takes the same value under every noise value (and
//! symmetrically for group `j`).

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par::{self, Parallelism};
use crate::{Error, LocalMask, Result};

const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variable {
    pub name: String,
    pub card: u8,
}

impl Variable {
    pub fn new(name: impl Into<String>, card: u8) -> Self {
        Variable {
            name: name.into(),
            card,
        }
    }

    pub fn binary(name: impl Into<String>) -> Self {
        Variable::new(name, 2)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseVar {
    pub name: String,
    /// Marginal over `0..probs.len()`.
    pub probs: Vec<f64>,
}

impl NoiseVar {
    pub fn constant(name: impl Into<String>) -> Self {
        NoiseVar {
            name: name.into(),
            probs: vec![1.0],
        }
    }

    pub fn card(&self) -> usize {
        self.probs.len()
    }
}

/// Structural function of one output: `table[parents..., u]` in mixed radix
/// with the noise value as the fastest-varying digit.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mechanism {
    pub parents: Vec<usize>,
    pub table: Vec<u8>,
}

/// The serialized form of a [`DiscreteScm`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScmDocument {
    pub states: Vec<Variable>,
    pub actions: Vec<Variable>,
    pub noise: Vec<NoiseVar>,
    pub mechanisms: Vec<Mechanism>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScmDocument", into = "ScmDocument")]
pub struct DiscreteScm {
    doc: ScmDocument,
    cards: Vec<u8>,
}

impl TryFrom<ScmDocument> for DiscreteScm {
    type Error = Error;

    fn try_from(doc: ScmDocument) -> Result<Self> {
        DiscreteScm::new(doc)
    }
}

impl From<DiscreteScm> for ScmDocument {
    fn from(scm: DiscreteScm) -> Self {
        scm.doc
    }
}

fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidConfig(msg.into())
}

impl DiscreteScm {
    pub fn new(doc: ScmDocument) -> Result<Self> {
        let n = doc.states.len();
        if n == 0 {
            return Err(invalid("a model needs at least one state variable"));
        }
        let cards: Vec<u8> = doc
            .states
            .iter()
            .chain(&doc.actions)
            .map(|v| v.card)
            .collect();
        if cards.contains(&0) {
            return Err(invalid("variable ranges must be nonempty"));
        }
        if doc.noise.len() != n || doc.mechanisms.len() != n {
            return Err(invalid(
                "need one noise variable and one mechanism per state",
            ));
        }
        for (i, u) in doc.noise.iter().enumerate() {
            let total: f64 = u.probs.iter().sum();
            if u.probs.is_empty()
                || u.probs.len() > 255
                || u.probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite())
                || (total - 1.0).abs() > PROB_TOLERANCE
            {
                return Err(invalid(format!("noise marginal {i} is not a distribution")));
            }
        }
        for (i, mech) in doc.mechanisms.iter().enumerate() {
            let mut seen = vec![false; cards.len()];
            for &p in &mech.parents {
                if p >= cards.len() || std::mem::replace(&mut seen[p], true) {
                    return Err(invalid(format!("bad parent list for mechanism {i}")));
                }
            }
            let size = mech
                .parents
                .iter()
                .map(|&p| cards[p] as usize)
                .product::<usize>()
                * doc.noise[i].card();
            if mech.table.len() != size {
                return Err(invalid(format!(
                    "mechanism {i} table has {} entries, expected {size}",
                    mech.table.len()
                )));
            }
            if mech.table.iter().any(|&v| v >= cards[i]) {
                return Err(invalid(format!(
                    "mechanism {i} outputs a value out of range"
                )));
            }
        }
        Ok(DiscreteScm { doc, cards })
    }

    /// Builds a model from closures `f_i(x, u)` over full input assignments.
    /// Every input is declared a parent.
    pub fn from_fns<F>(
        states: Vec<Variable>,
        actions: Vec<Variable>,
        noise: Vec<NoiseVar>,
        f: F,
    ) -> Result<Self>
    where
        F: Fn(usize, &[u8], u8) -> u8,
    {
        let cards: Vec<u8> = states.iter().chain(&actions).map(|v| v.card).collect();
        let parents: Vec<usize> = (0..cards.len()).collect();
        let mut mechanisms = Vec::with_capacity(states.len());
        for (i, u) in noise.iter().enumerate().take(states.len()) {
            let mut table = Vec::new();
            for code in 0..joint_size(&cards) {
                let x = decode(&cards, code);
                for uv in 0..u.card() {
                    table.push(f(i, &x, uv as u8));
                }
            }
            mechanisms.push(Mechanism {
                parents: parents.clone(),
                table,
            });
        }
        DiscreteScm::new(ScmDocument {
            states,
            actions,
            noise,
            mechanisms,
        })
    }

    pub fn document(&self) -> &ScmDocument {
        &self.doc
    }

    pub fn n_state(&self) -> usize {
        self.doc.states.len()
    }

    pub fn n_action(&self) -> usize {
        self.doc.actions.len()
    }

    pub fn n_inputs(&self) -> usize {
        self.cards.len()
    }

    /// Input cardinalities, states then actions.
    pub fn cards(&self) -> &[u8] {
        &self.cards
    }

    pub fn mechanism(&self, i: usize) -> &Mechanism {
        &self.doc.mechanisms[i]
    }

    pub fn noise(&self, i: usize) -> &NoiseVar {
        &self.doc.noise[i]
    }

    /// `f_i(x, u)` for a full input assignment `x`.
    pub fn eval(&self, i: usize, x: &[u8], u: u8) -> u8 {
        let mech = &self.doc.mechanisms[i];
        let mut idx = 0usize;
        for &p in &mech.parents {
            idx = idx * self.cards[p] as usize + x[p] as usize;
        }
        mech.table[idx * self.doc.noise[i].card() + u as usize]
    }

    /// Exact distribution of the next state given inputs `x`, indexed by the
    /// mixed-radix code of the next-state assignment.
    pub fn next_state_distribution(&self, x: &[u8]) -> Vec<f64> {
        let n = self.n_state();
        let state_cards = &self.cards[..n];
        let mut dist = vec![0.0; joint_size(state_cards)];
        // per-output marginals are independent given x
        let marginals: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut m = vec![0.0; self.cards[i] as usize];
                for (u, p) in self.doc.noise[i].probs.iter().enumerate() {
                    m[self.eval(i, x, u as u8) as usize] += p;
                }
                m
            })
            .collect();
        for (code, slot) in dist.iter_mut().enumerate() {
            let y = decode(state_cards, code);
            *slot = y
                .iter()
                .enumerate()
                .map(|(i, &v)| marginals[i][v as usize])
                .product();
        }
        dist
    }
}

fn joint_size(cards: &[u8]) -> usize {
    cards.iter().map(|&c| c as usize).product()
}

fn decode(cards: &[u8], mut code: usize) -> Vec<u8> {
    let mut x = vec![0u8; cards.len()];
    for k in (0..cards.len()).rev() {
        let c = cards[k] as usize;
        x[k] = (code % c) as u8;
        code /= c;
    }
    x
}

fn encode(cards: &[u8], x: &[u8]) -> usize {
    x.iter()
        .zip(cards)
        .fold(0, |acc, (&v, &c)| acc * c as usize + v as usize)
}

/// A nonempty set of joint input assignments.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subspace {
    cards: Vec<u8>,
    members: Vec<bool>,
}

impl Subspace {
    fn from_members(cards: &[u8], members: Vec<bool>) -> Result<Self> {
        if !members.contains(&true) {
            return Err(Error::Precondition("subspace must be nonempty".into()));
        }
        Ok(Subspace {
            cards: cards.to_vec(),
            members,
        })
    }

    pub fn full(scm: &DiscreteScm) -> Self {
        Subspace {
            cards: scm.cards.clone(),
            members: vec![true; joint_size(&scm.cards)],
        }
    }

    pub fn from_predicate(scm: &DiscreteScm, pred: impl Fn(&[u8]) -> bool) -> Result<Self> {
        let members = (0..joint_size(&scm.cards))
            .map(|code| pred(&decode(&scm.cards, code)))
            .collect();
        Subspace::from_members(&scm.cards, members)
    }

    pub fn from_assignments(scm: &DiscreteScm, xs: &[Vec<u8>]) -> Result<Self> {
        let mut members = vec![false; joint_size(&scm.cards)];
        for x in xs {
            if x.len() != scm.cards.len() || x.iter().zip(&scm.cards).any(|(v, c)| v >= c) {
                return Err(Error::Precondition(format!(
                    "assignment {x:?} is out of range"
                )));
            }
            members[encode(&scm.cards, x)] = true;
        }
        Subspace::from_members(&scm.cards, members)
    }

    /// The product of per-variable allowed value sets.
    pub fn product(scm: &DiscreteScm, allowed: &[Vec<u8>]) -> Result<Self> {
        if allowed.len() != scm.cards.len() {
            return Err(Error::Precondition("one allowed set per variable".into()));
        }
        Subspace::from_predicate(scm, |x| {
            x.iter().zip(allowed).all(|(v, set)| set.contains(v))
        })
    }

    pub fn contains(&self, x: &[u8]) -> bool {
        self.members[encode(&self.cards, x)]
    }

    pub fn len(&self) -> usize {
        self.members.iter().filter(|&&m| m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn assignments(&self) -> Vec<Vec<u8>> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(code, _)| decode(&self.cards, code))
            .collect()
    }

    pub fn union(&self, other: &Subspace) -> Result<Subspace> {
        self.check_compatible(other)?;
        let members = self
            .members
            .iter()
            .zip(&other.members)
            .map(|(a, b)| a | b)
            .collect();
        Ok(Subspace {
            cards: self.cards.clone(),
            members,
        })
    }

    pub fn is_subset_of(&self, other: &Subspace) -> bool {
        self.cards == other.cards
            && self
                .members
                .iter()
                .zip(&other.members)
                .all(|(a, b)| !a || *b)
    }

    fn check_compatible(&self, other: &Subspace) -> Result<()> {
        if self.cards != other.cards {
            return Err(Error::Precondition("subspaces of different models".into()));
        }
        Ok(())
    }

    fn check_model(&self, scm: &DiscreteScm) -> Result<()> {
        if self.cards != scm.cards {
            return Err(Error::Precondition(
                "subspace does not match the model".into(),
            ));
        }
        Ok(())
    }
}

/// Edges from time-`t` inputs (rows) to time-`t+1` states (columns), stored
/// in the local-mask orientation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalGraph {
    mask: LocalMask,
}

impl CausalGraph {
    pub fn mask(&self) -> &LocalMask {
        &self.mask
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.mask.get(from, to)
    }

    pub fn edge_count(&self) -> usize {
        self.mask.count_ones()
    }

    pub fn parents_of(&self, to: usize) -> Vec<usize> {
        (0..self.mask.n_rows())
            .filter(|&k| self.mask.get(k, to))
            .collect()
    }

    pub fn is_subgraph_of(&self, other: &CausalGraph) -> bool {
        self.mask.is_subset_of(&other.mask)
    }

    /// No edge runs between `a` and `b` in either direction.
    pub fn independent(&self, a: &[usize], b: &[usize]) -> bool {
        let n = self.mask.n_state();
        let crosses = |from: &[usize], to: &[usize]| {
            from.iter()
                .any(|&k| to.iter().any(|&l| l < n && self.mask.get(k, l)))
        };
        !crosses(a, b) && !crosses(b, a)
    }
}

/// Calls `visit(x1, x2, k)` for every `x1 ∈ a`, input `k` in `inputs` and
/// `x2 ∈ b` that differs from `x1` exactly in coordinate `k`.
fn single_changes(
    a: &Subspace,
    b: &Subspace,
    inputs: &[usize],
    mut visit: impl FnMut(&[u8], &[u8], usize),
) {
    let cards = &a.cards;
    for x1 in a.assignments() {
        let mut x2 = x1.clone();
        for &k in inputs {
            for v in 0..cards[k] {
                if v == x1[k] {
                    continue;
                }
                x2[k] = v;
                if b.contains(&x2) {
                    visit(&x1, &x2, k);
                }
            }
            x2[k] = x1[k];
        }
    }
}

fn outputs_differ(scm: &DiscreteScm, i: usize, x1: &[u8], x2: &[u8]) -> bool {
    (0..scm.noise(i).card()).any(|u| scm.eval(i, x1, u as u8) != scm.eval(i, x2, u as u8))
}

/// The structurally minimal graph of `scm` restricted to `subspace`.
pub fn minimal_graph(scm: &DiscreteScm, subspace: &Subspace) -> Result<CausalGraph> {
    subspace.check_model(scm)?;
    let mut mask = LocalMask::empty(scm.n_state(), scm.n_action());
    let inputs: Vec<usize> = (0..scm.n_inputs()).collect();
    single_changes(subspace, subspace, &inputs, |x1, x2, k| {
        for i in 0..scm.n_state() {
            if !mask.get(k, i) && outputs_differ(scm, i, x1, x2) {
                mask.set(k, i, true);
            }
        }
    });
    Ok(CausalGraph { mask })
}

/// The local model on `subspace`: each mechanism keeps only its local
/// parents and is tabulated from the assignments inside `subspace`. Table
/// entries for parent values never seen in the subspace are set to 0.
pub fn induce_local(scm: &DiscreteScm, subspace: &Subspace) -> Result<DiscreteScm> {
    let graph = minimal_graph(scm, subspace)?;
    let mut mechanisms = Vec::with_capacity(scm.n_state());
    let members = subspace.assignments();
    for i in 0..scm.n_state() {
        let parents = graph.parents_of(i);
        let ucard = scm.noise(i).card();
        let size = parents
            .iter()
            .map(|&p| scm.cards[p] as usize)
            .product::<usize>()
            * ucard;
        let mut table: Vec<Option<u8>> = vec![None; size];
        for x in &members {
            let mut idx = 0usize;
            for &p in &parents {
                idx = idx * scm.cards[p] as usize + x[p] as usize;
            }
            for u in 0..ucard {
                let v = scm.eval(i, x, u as u8);
                let slot = &mut table[idx * ucard + u];
                match slot {
                    Some(prev) if *prev != v => return Err(Error::IllDefinedRestriction(i)),
                    _ => *slot = Some(v),
                }
            }
        }
        mechanisms.push(Mechanism {
            parents,
            table: table.into_iter().map(|v| v.unwrap_or(0)).collect(),
        });
    }
    DiscreteScm::new(ScmDocument {
        mechanisms,
        ..scm.doc.clone()
    })
}

/// The restricted mechanisms of `outputs` agree between `l1` and `l2`
/// against single changes of the inputs in `changed`.
pub fn mechanisms_agree(
    scm: &DiscreteScm,
    l1: &Subspace,
    l2: &Subspace,
    outputs: &[usize],
    changed: &[usize],
) -> bool {
    let outputs: Vec<usize> = outputs
        .iter()
        .copied()
        .filter(|&i| i < scm.n_state())
        .collect();
    let mut agree = true;
    single_changes(l1, l2, changed, |x1, x2, _| {
        if agree && outputs.iter().any(|&i| outputs_differ(scm, i, x1, x2)) {
            agree = false;
        }
    });
    agree
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prop1Verdict {
    pub independent_l1: bool,
    pub independent_l2: bool,
    pub independent_union: bool,
    pub agree_i: bool,
    pub agree_j: bool,
    /// The biconditional holds for this instance.
    pub holds: bool,
}

impl Prop1Verdict {
    /// Both groups are locally independent but the union couples them.
    pub fn locally_only(&self) -> bool {
        self.independent_l1 && self.independent_l2 && !self.independent_union
    }
}

/// Evaluates both sides of the union theorem for two disjoint node groups.
pub fn check_prop1(
    scm: &DiscreteScm,
    l1: &Subspace,
    l2: &Subspace,
    part_i: &[usize],
    part_j: &[usize],
) -> Result<Prop1Verdict> {
    let nodes = scm.n_inputs();
    if part_i.iter().chain(part_j).any(|&k| k >= nodes) || part_i.iter().any(|k| part_j.contains(k))
    {
        return Err(Error::Precondition(
            "node groups must be disjoint sets of model nodes".into(),
        ));
    }
    let union = l1.union(l2)?;
    let independent_l1 = minimal_graph(scm, l1)?.independent(part_i, part_j);
    let independent_l2 = minimal_graph(scm, l2)?.independent(part_i, part_j);
    let independent_union = minimal_graph(scm, &union)?.independent(part_i, part_j);
    let agree_i = mechanisms_agree(scm, l1, l2, part_i, part_j);
    let agree_j = mechanisms_agree(scm, l1, l2, part_j, part_i);
    let rhs = independent_l1 && independent_l2 && agree_i && agree_j;
    Ok(Prop1Verdict {
        independent_l1,
        independent_l2,
        independent_union,
        agree_i,
        agree_j,
        holds: independent_union == rhs,
    })
}

fn check_nested(
    scm: &DiscreteScm,
    l: &Subspace,
    x: &Subspace,
) -> Result<(CausalGraph, CausalGraph)> {
    if !l.is_subset_of(x) {
        return Err(Error::Precondition(
            "the local subspace must be contained in the larger one".into(),
        ));
    }
    Ok((minimal_graph(scm, l)?, minimal_graph(scm, x)?))
}

/// Every parent on `l` is a parent on `x` when `l ⊆ x`.
pub fn check_lemma1(scm: &DiscreteScm, l: &Subspace, x: &Subspace) -> Result<bool> {
    let (gl, gx) = check_nested(scm, l, x)?;
    Ok(gl.is_subgraph_of(&gx))
}

/// The graph on `l` has no more edges than the graph on `x` when `l ⊆ x`.
pub fn check_corollary(scm: &DiscreteScm, l: &Subspace, x: &Subspace) -> Result<bool> {
    let (gl, gx) = check_nested(scm, l, x)?;
    Ok(gl.edge_count() <= gx.edge_count())
}

/// Shape of randomly generated models.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomScmConfig {
    pub min_states: usize,
    pub max_states: usize,
    pub n_actions: usize,
    pub card: u8,
    pub noise_card: u8,
    pub parent_prob: f64,
    /// Probability that a mechanism ignores its non-self parents whenever a
    /// gating input takes a particular value.
    pub gate_prob: f64,
}

impl Default for RandomScmConfig {
    fn default() -> Self {
        RandomScmConfig {
            min_states: 2,
            max_states: 5,
            n_actions: 1,
            card: 2,
            noise_card: 2,
            parent_prob: 0.5,
            gate_prob: 0.5,
        }
    }
}

impl RandomScmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_states == 0 || self.min_states > self.max_states {
            return Err(invalid("need 1 <= min_states <= max_states"));
        }
        if self.card < 2 || self.noise_card == 0 {
            return Err(invalid("need card >= 2 and noise_card >= 1"));
        }
        let inputs = self.max_states + self.n_actions;
        if (self.card as f64).powi(inputs as i32) > (1u64 << 20) as f64 {
            return Err(invalid("joint input space too large for enumeration"));
        }
        if !(0.0..=1.0).contains(&self.parent_prob) || !(0.0..=1.0).contains(&self.gate_prob) {
            return Err(invalid("probabilities must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// A random model with gated mechanisms, so that local graphs are often
/// sparser than the global one.
pub fn random_scm<R: Rng + ?Sized>(cfg: &RandomScmConfig, rng: &mut R) -> Result<DiscreteScm> {
    cfg.validate()?;
    let n = rng.random_range(cfg.min_states..=cfg.max_states);
    let states: Vec<Variable> = (0..n)
        .map(|i| Variable::new(format!("s{i}"), cfg.card))
        .collect();
    let actions: Vec<Variable> = (0..cfg.n_actions)
        .map(|k| Variable::new(format!("a{k}"), cfg.card))
        .collect();
    let n_inputs = n + cfg.n_actions;
    let noise: Vec<NoiseVar> = (0..n)
        .map(|i| {
            let w: Vec<f64> = (0..cfg.noise_card)
                .map(|_| rng.random_range(0.1..1.0))
                .collect();
            let total: f64 = w.iter().sum();
            NoiseVar {
                name: format!("u{i}"),
                probs: w.iter().map(|v| v / total).collect(),
            }
        })
        .collect();
    let mut mechanisms = Vec::with_capacity(n);
    for i in 0..n {
        let mut parents: Vec<usize> = (0..n_inputs)
            .filter(|&k| k == i || rng.random_bool(cfg.parent_prob))
            .collect();
        parents.sort_unstable();
        let gate = (parents.len() > 1 && rng.random_bool(cfg.gate_prob)).then(|| {
            let g = parents[rng.random_range(0..parents.len())];
            (g, rng.random_range(0..cfg.card))
        });
        let pcards = vec![cfg.card; parents.len()];
        let self_pos = parents.iter().position(|&p| p == i);
        // gated rows depend only on the node itself (and the gate) and noise
        let local: Vec<u8> = (0..cfg.card as usize * cfg.noise_card as usize)
            .map(|_| rng.random_range(0..cfg.card))
            .collect();
        let mut table = Vec::with_capacity(joint_size(&pcards) * cfg.noise_card as usize);
        for code in 0..joint_size(&pcards) {
            let pv = decode(&pcards, code);
            let gated = gate.is_some_and(|(g, gv)| {
                let pos = parents.iter().position(|&p| p == g).unwrap();
                pv[pos] == gv
            });
            for u in 0..cfg.noise_card as usize {
                let v = if gated {
                    let own = self_pos.map_or(0, |p| pv[p] as usize);
                    local[own * cfg.noise_card as usize + u]
                } else {
                    rng.random_range(0..cfg.card)
                };
                table.push(v);
            }
        }
        mechanisms.push(Mechanism { parents, table });
    }
    DiscreteScm::new(ScmDocument {
        states,
        actions,
        noise,
        mechanisms,
    })
}

/// A random nonempty subspace: either a random subset of all assignments
/// or a random subset of the slice where one input is pinned.
pub fn random_subspace<R: Rng + ?Sized>(scm: &DiscreteScm, rng: &mut R) -> Subspace {
    let size = joint_size(&scm.cards);
    let density = rng.random_range(0.2..0.9);
    let pin = rng.random_bool(0.5).then(|| {
        let k = rng.random_range(0..scm.n_inputs());
        (k, rng.random_range(0..scm.cards[k]))
    });
    let mut members: Vec<bool> = (0..size)
        .map(|code| {
            let inside = pin.is_none_or(|(k, v)| decode(&scm.cards, code)[k] == v);
            inside && rng.random_bool(density)
        })
        .collect();
    if !members.contains(&true) {
        let code = rng.random_range(0..size);
        let code = match pin {
            // move the fallback point into the pinned slice
            Some((k, v)) => {
                let mut x = decode(&scm.cards, code);
                x[k] = v;
                encode(&scm.cards, &x)
            }
            None => code,
        };
        members[code] = true;
    }
    Subspace {
        cards: scm.cards.clone(),
        members,
    }
}

/// Two random disjoint nonempty node groups.
pub fn random_parts<R: Rng + ?Sized>(n_nodes: usize, rng: &mut R) -> (Vec<usize>, Vec<usize>) {
    assert!(n_nodes >= 2, "need two nodes for two groups");
    let mut order: Vec<usize> = (0..n_nodes).collect();
    order.shuffle(rng);
    let mut part_i = vec![order[0]];
    let mut part_j = vec![order[1]];
    for &k in &order[2..] {
        match rng.random_range(0..3) {
            0 => part_i.push(k),
            1 => part_j.push(k),
            _ => {}
        }
    }
    part_i.sort_unstable();
    part_j.sort_unstable();
    (part_i, part_j)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CampaignConfig {
    pub instances: usize,
    pub seed: u64,
    pub model: RandomScmConfig,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        CampaignConfig {
            instances: 1000,
            seed: 0,
            model: RandomScmConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignReport {
    pub instances: usize,
    pub prop1_holds: usize,
    pub lemma1_holds: usize,
    pub corollary_holds: usize,
    /// Instances where the groups are independent on the union.
    pub independent_union: usize,
    /// Instances independent on both pieces but coupled on the union.
    pub locally_only: usize,
    pub failures: Vec<usize>,
}

impl CampaignReport {
    pub fn all_hold(&self) -> bool {
        self.failures.is_empty()
            && self.prop1_holds == self.instances
            && self.lemma1_holds == self.instances
            && self.corollary_holds == self.instances
    }
}

struct InstanceOutcome {
    prop1: Prop1Verdict,
    lemma1: bool,
    corollary: bool,
}

fn run_instance(cfg: &CampaignConfig, index: usize) -> Result<InstanceOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let scm = random_scm(&cfg.model, &mut rng)?;
    let l1 = random_subspace(&scm, &mut rng);
    let l2 = random_subspace(&scm, &mut rng);
    let (part_i, part_j) = random_parts(scm.n_inputs(), &mut rng);
    let prop1 = check_prop1(&scm, &l1, &l2, &part_i, &part_j)?;
    let union = l1.union(&l2)?;
    let full = Subspace::full(&scm);
    let lemma1 = check_lemma1(&scm, &l1, &union)? && check_lemma1(&scm, &union, &full)?;
    let corollary = check_corollary(&scm, &l1, &union)? && check_corollary(&scm, &l2, &full)?;
    Ok(InstanceOutcome {
        prop1,
        lemma1,
        corollary,
    })
}

/// Randomized check of the union theorem, the parent lemma and the sparsity
/// corollary. Instance `k` draws from stream `k` of the campaign seed.
pub fn run_campaign(cfg: &CampaignConfig, par: Parallelism) -> Result<CampaignReport> {
    cfg.model.validate()?;
    if cfg.model.min_states + cfg.model.n_actions < 2 {
        return Err(invalid("campaign models need at least two nodes"));
    }
    let outcomes = par::try_map_indexed(par, cfg.instances, |k| run_instance(cfg, k))?;
    let mut report = CampaignReport {
        instances: cfg.instances,
        ..Default::default()
    };
    for (k, o) in outcomes.iter().enumerate() {
        report.prop1_holds += o.prop1.holds as usize;
        report.lemma1_holds += o.lemma1 as usize;
        report.corollary_holds += o.corollary as usize;
        report.independent_union += o.prop1.independent_union as usize;
        report.locally_only += o.prop1.locally_only() as usize;
        if !(o.prop1.holds && o.lemma1 && o.corollary) {
            report.failures.push(k);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn xor() -> DiscreteScm {
        DiscreteScm::from_fns(
            vec![Variable::binary("s1"), Variable::binary("s2")],
            vec![],
            vec![NoiseVar::constant("u1"), NoiseVar::constant("u2")],
            |i, x, _| if i == 0 { x[0] ^ x[1] } else { x[1] },
        )
        .unwrap()
    }

    /// Two binary arms with actions; each arm moves on its own unless both
    /// are in contact, in which case each follows the other's action.
    fn two_arms() -> DiscreteScm {
        DiscreteScm::from_fns(
            vec![Variable::binary("left"), Variable::binary("right")],
            vec![Variable::binary("a_left"), Variable::binary("a_right")],
            vec![NoiseVar::constant("u1"), NoiseVar::constant("u2")],
            |i, x, _| {
                let contact = x[0] == 1 && x[1] == 1;
                match (i, contact) {
                    (0, true) => x[3],
                    (0, false) => x[0] ^ x[2],
                    (_, true) => x[2],
                    (_, false) => x[1] ^ x[3],
                }
            },
        )
        .unwrap()
    }

    /// Discrete rooms: the ground flips each step in room 1 and stays in
    /// room 0; motion ignores the ground.
    fn rooms() -> DiscreteScm {
        DiscreteScm::from_fns(
            vec![
                Variable::binary("room"),
                Variable::binary("velocity"),
                Variable::binary("ground"),
            ],
            vec![Variable::binary("push")],
            vec![
                NoiseVar::constant("u0"),
                NoiseVar::constant("u1"),
                NoiseVar::constant("u2"),
            ],
            |i, x, _| match i {
                0 => x[0] ^ (x[1] & x[3]),
                1 => x[1] ^ x[3],
                _ => x[2] ^ x[0],
            },
        )
        .unwrap()
    }

    fn graph_oracle(scm: &DiscreteScm, l: &Subspace) -> LocalMask {
        // all ordered pairs at Hamming distance one, enumerated in reverse
        let xs = l.assignments();
        let mut mask = LocalMask::empty(scm.n_state(), scm.n_action());
        for x2 in xs.iter().rev() {
            for x1 in xs.iter().rev() {
                let diff: Vec<usize> = (0..x1.len()).filter(|&k| x1[k] != x2[k]).collect();
                if diff.len() != 1 {
                    continue;
                }
                for i in (0..scm.n_state()).rev() {
                    for u in 0..scm.noise(i).card() as u8 {
                        if scm.eval(i, x1, u) != scm.eval(i, x2, u) {
                            mask.set(diff[0], i, true);
                        }
                    }
                }
            }
        }
        mask
    }

    #[test]
    fn xor_graphs() {
        let scm = xor();
        let full = minimal_graph(&scm, &Subspace::full(&scm)).unwrap();
        assert!(full.has_edge(0, 0) && full.has_edge(1, 0));
        assert_eq!(full.parents_of(1), vec![1]);
        let l = Subspace::from_predicate(&scm, |x| x[1] == 0).unwrap();
        let local = minimal_graph(&scm, &l).unwrap();
        assert_eq!(local.parents_of(0), vec![0]);
        assert!(check_lemma1(&scm, &l, &Subspace::full(&scm)).unwrap());
        assert!(check_corollary(&scm, &l, &Subspace::full(&scm)).unwrap());
        assert!(matches!(
            check_lemma1(&scm, &Subspace::full(&scm), &l),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn ignored_input_has_no_edge() {
        let scm = DiscreteScm::from_fns(
            vec![Variable::binary("a"), Variable::new("b", 3)],
            vec![],
            vec![NoiseVar::constant("u0"), NoiseVar::constant("u1")],
            |i, x, _| if i == 0 { x[0] } else { (x[1] + 1) % 3 },
        )
        .unwrap();
        let g = minimal_graph(&scm, &Subspace::full(&scm)).unwrap();
        assert!(!g.has_edge(1, 0) && !g.has_edge(0, 1));
    }

    #[test]
    fn two_arms_split_without_contact() {
        let scm = two_arms();
        let full = Subspace::full(&scm);
        let global = minimal_graph(&scm, &full).unwrap();
        assert!(global.has_edge(1, 0) && global.has_edge(3, 0));
        let apart = Subspace::from_predicate(&scm, |x| !(x[0] == 1 && x[1] == 1)).unwrap();
        let local = induce_local(&scm, &apart).unwrap();
        let g = minimal_graph(&local, &Subspace::full(&local)).unwrap();
        let p = crate::factored::components(g.mask());
        assert_eq!(p.blocks(), &[vec![0, 2], vec![1, 3]]);
        assert!(g.is_subgraph_of(&global));
        assert!(minimal_graph(&scm, &apart).unwrap().is_subgraph_of(&global));
    }

    #[test]
    fn identical_pieces_are_trivial() {
        let scm = two_arms();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let l = random_subspace(&scm, &mut rng);
            let v = check_prop1(&scm, &l, &l, &[0, 2], &[1, 3]).unwrap();
            assert_eq!(v.independent_union, v.independent_l1);
            assert!(v.holds);
        }
    }

    #[test]
    fn rooms_are_coupled_only_in_the_union() {
        let scm = rooms();
        let a = Subspace::from_predicate(&scm, |x| x[0] == 0 && x[1] == 0).unwrap();
        let b = Subspace::from_predicate(&scm, |x| x[0] == 1 && x[1] == 0).unwrap();
        let motion = [0, 1, 3];
        let ground = [2];
        let v = check_prop1(&scm, &a, &b, &motion, &ground).unwrap();
        assert!(v.independent_l1 && v.independent_l2);
        assert!(!v.agree_j);
        assert!(!v.independent_union);
        assert!(v.holds && v.locally_only());
    }

    #[test]
    fn prop1_rejects_overlapping_groups() {
        let scm = rooms();
        let full = Subspace::full(&scm);
        assert!(check_prop1(&scm, &full, &full, &[0, 1], &[1]).is_err());
        assert!(check_prop1(&scm, &full, &full, &[0], &[9]).is_err());
    }

    #[test]
    fn ill_defined_restriction_is_reported() {
        // L = {(0,0), (1,1)}: no single-coordinate change stays inside, so the
        // local graph is empty although the output varies across L.
        let scm = xor();
        let l = Subspace::from_assignments(&scm, &[vec![0, 0], vec![1, 1]]).unwrap();
        assert!(minimal_graph(&scm, &l).unwrap().edge_count() == 0);
        assert!(matches!(
            induce_local(&scm, &l),
            Err(Error::IllDefinedRestriction(1))
        ));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let scm = two_arms();
        let json = serde_json::to_string(&scm).unwrap();
        let back: DiscreteScm = serde_json::from_str(&json).unwrap();
        assert_eq!(back, scm);
        let mut doc = scm.document().clone();
        doc.noise[0].probs = vec![0.5, 0.6];
        assert!(DiscreteScm::new(doc.clone()).is_err());
        doc.noise[0].probs = vec![1.0];
        doc.mechanisms[0].table[0] = 7;
        assert!(
            serde_json::from_str::<DiscreteScm>(&serde_json::to_string(&doc).unwrap()).is_err()
        );
    }

    #[test]
    fn distribution_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let scm = random_scm(&RandomScmConfig::default(), &mut rng).unwrap();
        let x = vec![0u8; scm.n_inputs()];
        let total: f64 = scm.next_state_distribution(&x).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn small_campaign_holds_and_is_nontrivial() {
        let cfg = CampaignConfig {
            instances: 300,
            seed: 7,
            ..Default::default()
        };
        let seq = run_campaign(&cfg, Parallelism::Sequential).unwrap();
        assert!(seq.all_hold(), "{seq:?}");
        assert!(seq.independent_union > 0, "{seq:?}");
        assert!(seq.locally_only > 0, "{seq:?}");
        assert_eq!(seq, run_campaign(&cfg, Parallelism::Rayon).unwrap());
    }

    fn model_and_subspaces() -> impl Strategy<Value = (u64, usize)> {
        (any::<u64>(), 1usize..4)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn minimal_graph_matches_pair_oracle((seed, _) in model_and_subspaces()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scm = random_scm(&RandomScmConfig { max_states: 4, ..Default::default() }, &mut rng).unwrap();
            let l = random_subspace(&scm, &mut rng);
            let g = minimal_graph(&scm, &l).unwrap();
            prop_assert_eq!(g.mask(), &graph_oracle(&scm, &l));
        }

        #[test]
        fn graphs_are_monotone((seed, extra) in model_and_subspaces()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scm = random_scm(&RandomScmConfig::default(), &mut rng).unwrap();
            let mut l = random_subspace(&scm, &mut rng);
            let mut prev = minimal_graph(&scm, &l).unwrap();
            for _ in 0..extra {
                l = l.union(&random_subspace(&scm, &mut rng)).unwrap();
                let next = minimal_graph(&scm, &l).unwrap();
                prop_assert!(prev.is_subgraph_of(&next));
                prev = next;
            }
        }

        /// Intervening inside a product subspace gives the same next-state
        /// distribution under the local and the global model.
        #[test]
        fn local_interventions_match_global(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = RandomScmConfig { min_states: 2, max_states: 4, n_actions: 2, ..Default::default() };
            let scm = random_scm(&cfg, &mut rng).unwrap();
            let allowed: Vec<Vec<u8>> = (0..scm.n_inputs())
                .map(|_| match rng.random_range(0..3) {
                    0 => vec![0],
                    1 => vec![1],
                    _ => vec![0, 1],
                })
                .collect();
            let l = Subspace::product(&scm, &allowed).unwrap();
            let local = induce_local(&scm, &l).unwrap();
            for x in l.assignments() {
                let g = scm.next_state_distribution(&x);
                let m = local.next_state_distribution(&x);
                for (p, q) in g.iter().zip(&m) {
                    prop_assert!((p - q).abs() <= 1e-12);
                }
            }
            let full = Subspace::full(&scm);
            let again = induce_local(&scm, &full).unwrap();
            prop_assert_eq!(
                minimal_graph(&again, &full).unwrap(),
                minimal_graph(&scm, &full).unwrap()
            );
        }
    }
}
