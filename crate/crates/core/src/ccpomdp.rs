//! Chance-constrained POMDP search over an AND-OR belief hypergraph:
//! best-first search with value and risk bounds, exact policy evaluation,
//! and an exhaustive solver for small instances.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashMap};
use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Slack on the chance constraint to absorb summation-order rounding.
pub const RISK_TOL: f64 = 1e-12;
pub const BRUTE_FORCE_LIMIT: usize = 1_000_000;
/// Default cap on search work: node expansions plus partial policies popped.
pub const DEFAULT_SEARCH_LIMIT: usize = 20_000;
/// Branch probabilities must sum to one within this.
pub const PROB_SUM_TOL: f64 = 1e-9;
/// Number of nonzero multipliers in the risk-penalty bound grid.
const PENALTY_STEPS: usize = 24;

/// Risk multipliers used by the search bounds: zero, then half decades
/// from 1e-2 to about 1e9.
fn penalty_grid() -> Vec<f64> {
    std::iter::once(0.0)
        .chain((0..PENALTY_STEPS).map(|i| 10f64.powf(-2.0 + 0.5 * i as f64)))
        .collect()
}

#[derive(Debug, Error)]
pub enum PlannerError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("no actions available")]
    NoActions,
    #[error("policy is incomplete: {0}")]
    IncompletePolicy(String),
    #[error("instance too large for exhaustive search: more than {0} policies")]
    InstanceTooLarge(usize),
    #[error("search exceeded its work limit of {0}")]
    SearchLimit(usize),
    #[error("model error: {0}")]
    Model(String),
    #[error("returned policy violates the constraint: exec risk {exec_risk} > {delta}")]
    ConstraintViolated { exec_risk: f64, delta: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintScope {
    /// Execution risk of the whole conditional plan from the root.
    #[default]
    Mission,
    /// Every chosen action separately.
    PerEpoch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChanceConstraint {
    pub delta: f64,
    pub horizon_epochs: usize,
    #[serde(default)]
    pub scope: ConstraintScope,
}

impl ChanceConstraint {
    pub fn new(delta: f64, horizon_epochs: usize) -> Self {
        Self {
            delta,
            horizon_epochs,
            scope: ConstraintScope::Mission,
        }
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        if !(0.0..=1.0).contains(&self.delta) {
            return Err(PlannerError::InvalidInput(format!("delta {} outside [0, 1]", self.delta)));
        }
        if self.horizon_epochs == 0 {
            return Err(PlannerError::InvalidInput("horizon must be at least one epoch".into()));
        }
        Ok(())
    }

    fn admits(&self, risk: f64) -> bool {
        risk <= self.delta + RISK_TOL
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Branch<B, O> {
    pub obs: O,
    pub prob: f64,
    pub belief: B,
}

/// A chance-constrained POMDP as seen by the solvers. Actions are named;
/// wherever several choices are equally good the smaller name wins.
pub trait CcPomdp {
    type Belief: Clone;
    type Obs: Clone;

    /// Actions available at `b`; none means the belief is terminal.
    fn actions(&self, b: &Self::Belief) -> Result<Vec<String>, PlannerError>;
    fn transition(&self, b: &Self::Belief, a: &str) -> Result<Vec<Branch<Self::Belief, Self::Obs>>, PlannerError>;
    /// Probability that executing `a` from `b` ends in failure.
    fn risk(&self, b: &Self::Belief, a: &str) -> Result<f64, PlannerError>;
    fn reward(&self, b: &Self::Belief, a: &str) -> Result<f64, PlannerError>;
    /// Largest reward any single action can earn.
    fn max_reward(&self) -> f64;
    /// Upper bound on the value obtainable from `b` in `remaining` epochs.
    fn heuristic(&self, _b: &Self::Belief, remaining: usize) -> Result<f64, PlannerError> {
        Ok(self.max_reward().max(0.0) * remaining as f64)
    }
}

fn sorted_actions<M: CcPomdp>(model: &M, b: &M::Belief) -> Result<Vec<String>, PlannerError> {
    let mut a = model.actions(b)?;
    a.sort();
    a.dedup();
    Ok(a)
}

fn checked_transition<M: CcPomdp>(model: &M, b: &M::Belief, a: &str) -> Result<Vec<Branch<M::Belief, M::Obs>>, PlannerError> {
    let branches = model.transition(b, a)?;
    let total: f64 = branches.iter().map(|br| br.prob).sum();
    if branches.is_empty() || (total - 1.0).abs() > PROB_SUM_TOL || branches.iter().any(|br| !(br.prob >= 0.0)) {
        return Err(PlannerError::Model(format!(
            "action {a}: {} branches with total probability {total}",
            branches.len()
        )));
    }
    Ok(branches)
}

fn checked_risk<M: CcPomdp>(model: &M, b: &M::Belief, a: &str) -> Result<f64, PlannerError> {
    let r = model.risk(b, a)?;
    if !(0.0..=1.0).contains(&r) {
        return Err(PlannerError::Model(format!("action {a}: risk {r} outside [0, 1]")));
    }
    Ok(r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyNode<B, O> {
    pub belief: B,
    /// `None` at leaves.
    pub action: Option<String>,
    pub reward: f64,
    pub risk: f64,
    pub value: f64,
    pub exec_risk: f64,
    pub children: Vec<PolicyBranch<B, O>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBranch<B, O> {
    pub obs: O,
    pub prob: f64,
    pub node: PolicyNode<B, O>,
}

impl<B, O> PolicyNode<B, O> {
    fn leaf(belief: B) -> Self {
        Self {
            belief,
            action: None,
            reward: 0.0,
            risk: 0.0,
            value: 0.0,
            exec_risk: 0.0,
            children: Vec::new(),
        }
    }

    fn max_action_risk(&self) -> f64 {
        self.children
            .iter()
            .map(|c| c.node.max_action_risk())
            .fold(self.risk, f64::max)
    }

    /// Action names in preorder, `None` for leaves.
    pub fn preorder_actions(&self) -> Vec<Option<&str>> {
        let mut out = vec![self.action.as_deref()];
        for c in &self.children {
            out.extend(c.node.preorder_actions());
        }
        out
    }

    pub fn node_count(&self) -> usize {
        1 + self.children.iter().map(|c| c.node.node_count()).sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Policy<B, O> {
    pub root: PolicyNode<B, O>,
    pub horizon: usize,
    pub value: f64,
    pub exec_risk: f64,
}

impl<B, O> Policy<B, O> {
    pub fn first_action(&self) -> Option<&str> {
        self.root.action.as_deref()
    }

    /// Largest single-action risk anywhere in the plan.
    pub fn max_action_risk(&self) -> f64 {
        self.root.max_action_risk()
    }

    fn satisfies(&self, cc: &ChanceConstraint) -> bool {
        match cc.scope {
            ConstraintScope::Mission => cc.admits(self.exec_risk),
            ConstraintScope::PerEpoch => cc.admits(self.max_action_risk()),
        }
    }
}

/// Exact value and execution risk of a closed policy, recomputed from the
/// model rather than from the stored annotations.
pub fn evaluate_policy<M: CcPomdp>(model: &M, policy: &Policy<M::Belief, M::Obs>) -> Result<(f64, f64), PlannerError> {
    evaluate_node(model, &policy.root, &policy.root.belief, policy.horizon)
}

fn evaluate_node<M: CcPomdp>(
    model: &M,
    node: &PolicyNode<M::Belief, M::Obs>,
    belief: &M::Belief,
    remaining: usize,
) -> Result<(f64, f64), PlannerError> {
    let Some(a) = node.action.as_deref() else {
        if remaining > 0 && !model.actions(belief)?.is_empty() {
            return Err(PlannerError::IncompletePolicy(format!("open node with {remaining} epochs left")));
        }
        return Ok((0.0, 0.0));
    };
    if remaining == 0 {
        return Err(PlannerError::InvalidInput("policy acts beyond its horizon".into()));
    }
    let branches = checked_transition(model, belief, a)?;
    if branches.len() != node.children.len() {
        return Err(PlannerError::IncompletePolicy(format!(
            "action {a} has {} outcomes, policy covers {}",
            branches.len(),
            node.children.len()
        )));
    }
    let r = checked_risk(model, belief, a)?;
    let mut value = model.reward(belief, a)?;
    let mut child_risk = 0.0;
    for (br, child) in branches.iter().zip(&node.children) {
        if (br.prob - child.prob).abs() > PROB_SUM_TOL {
            return Err(PlannerError::IncompletePolicy(format!(
                "stored branch probability {} differs from model {}",
                child.prob, br.prob
            )));
        }
        let (v, er) = evaluate_node(model, &child.node, &br.belief, remaining - 1)?;
        value += br.prob * v;
        child_risk += br.prob * er;
    }
    Ok((value, r + (1.0 - r) * child_risk))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchStats {
    /// Belief nodes whose successors were generated.
    pub expanded_nodes: usize,
    /// Partial policies taken off the queue.
    pub popped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SearchOutcome<B, O> {
    /// `None` is the infeasible verdict.
    pub policy: Option<Policy<B, O>>,
    pub stats: SearchStats,
}

struct GAction<O> {
    id: String,
    reward: f64,
    risk: f64,
    /// Whether the action fits the constraint given the risk already
    /// committed on the path to its node, and is not dominated.
    admissible: bool,
    /// (probability, observation, graph node)
    children: Vec<(f64, O, usize)>,
}

struct GNode<B, O> {
    belief: B,
    depth: usize,
    actions: Vec<String>,
    /// Per multiplier in the penalty grid: upper bound on reach-weighted
    /// value minus multiplier times risk of any subpolicy from here.
    /// Starts at the heuristic and is tightened by backups.
    bounds: Vec<f64>,
    reach: f64,
    /// Reach probability times survival of every ancestor action.
    surv: f64,
    /// Risk committed by ancestor actions on the path from the root.
    path_risk: f64,
    parent: Option<usize>,
    expansion: Option<Vec<GAction<O>>>,
}

#[derive(Clone)]
struct Partial {
    f: f64,
    g: f64,
    risk_lb: f64,
    assigned: Vec<(usize, usize)>,
    open: Vec<usize>,
    seq: u64,
}

impl PartialEq for Partial {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Partial {}
impl PartialOrd for Partial {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Partial {
    fn cmp(&self, other: &Self) -> Ordering {
        self.f
            .total_cmp(&other.f)
            .then(self.assigned.len().cmp(&other.assigned.len()))
            .then(self.seq.cmp(&other.seq))
    }
}

struct Search<'m, M: CcPomdp> {
    model: &'m M,
    cc: ChanceConstraint,
    penalties: Vec<f64>,
    nodes: Vec<GNode<M::Belief, M::Obs>>,
    stats: SearchStats,
    search_limit: usize,
}

impl<M: CcPomdp> Search<'_, M> {
    fn add_node(
        &mut self,
        belief: M::Belief,
        depth: usize,
        reach: f64,
        surv: f64,
        path_risk: f64,
        parent: Option<usize>,
    ) -> Result<usize, PlannerError> {
        let remaining = self.cc.horizon_epochs - depth;
        let actions = if remaining > 0 { sorted_actions(self.model, &belief)? } else { Vec::new() };
        let h = if actions.is_empty() { 0.0 } else { self.model.heuristic(&belief, remaining)? };
        self.nodes.push(GNode {
            belief,
            depth,
            actions,
            bounds: vec![reach * h; self.penalties.len()],
            reach,
            surv,
            path_risk,
            parent,
            expansion: None,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Fails once expansions plus pops reach the work limit.
    fn charge(&self) -> Result<(), PlannerError> {
        if self.stats.expanded_nodes + self.stats.popped >= self.search_limit {
            return Err(PlannerError::SearchLimit(self.search_limit));
        }
        Ok(())
    }

    fn is_open(&self, n: usize) -> bool {
        !self.nodes[n].actions.is_empty()
    }

    fn expand(&mut self, n: usize) -> Result<(), PlannerError> {
        if self.nodes[n].expansion.is_some() {
            return Ok(());
        }
        self.charge()?;
        self.stats.expanded_nodes += 1;
        let GNode {
            depth,
            reach,
            surv,
            path_risk,
            ..
        } = self.nodes[n];
        let depth = depth + 1;
        let mut out = Vec::with_capacity(self.nodes[n].actions.len());
        for id in self.nodes[n].actions.clone() {
            let belief = &self.nodes[n].belief;
            let reward = self.model.reward(belief, &id)?;
            let risk = checked_risk(self.model, belief, &id)?;
            let branches = checked_transition(self.model, belief, &id)?;
            let committed = path_risk + surv * risk;
            let admissible = match self.cc.scope {
                ConstraintScope::Mission => self.cc.admits(committed),
                ConstraintScope::PerEpoch => self.cc.admits(risk),
            };
            let mut children = Vec::with_capacity(branches.len());
            for br in branches {
                let c = self.add_node(
                    br.belief,
                    depth,
                    reach * br.prob,
                    surv * br.prob * (1.0 - risk),
                    committed,
                    Some(n),
                )?;
                children.push((br.prob, br.obs, c));
            }
            out.push(GAction {
                id,
                reward,
                risk,
                admissible,
                children,
            });
        }
        // with only terminal children an action is just a (reward, risk)
        // pair, so dominated ones are dropped; exact ties keep the first name
        if out.iter().all(|a| a.children.iter().all(|&(_, _, c)| !self.is_open(c))) {
            let pairs: Vec<(f64, f64)> = out.iter().map(|a| (a.reward, a.risk)).collect();
            for (i, act) in out.iter_mut().enumerate() {
                let (rew, risk) = pairs[i];
                act.admissible &= !pairs.iter().enumerate().any(|(j, &(r2, k2))| {
                    j != i && r2 >= rew && k2 <= risk && (r2 > rew || k2 < risk || j < i)
                });
            }
        }
        self.nodes[n].expansion = Some(out);
        self.backup(n);
        Ok(())
    }

    /// Re-derives bounds from `n` towards the root until one stops changing.
    fn backup(&mut self, mut n: usize) {
        loop {
            let node = &self.nodes[n];
            let acts = node.expansion.as_ref().unwrap();
            let bounds: Vec<f64> = self
                .penalties
                .iter()
                .enumerate()
                .map(|(j, &lambda)| {
                    let best = acts
                        .iter()
                        .filter(|a| a.admissible)
                        .map(|a| {
                            node.reach * a.reward - lambda * node.surv * a.risk
                                + a.children.iter().map(|&(_, _, c)| self.nodes[c].bounds[j]).sum::<f64>()
                        })
                        .fold(f64::NEG_INFINITY, f64::max);
                    best.min(node.bounds[j])
                })
                .collect();
            if bounds == self.nodes[n].bounds {
                return;
            }
            self.nodes[n].bounds = bounds;
            match self.nodes[n].parent {
                Some(p) => n = p,
                None => return,
            }
        }
    }

    /// Smallest Lagrangian bound on the value of any completion of `p`
    /// that satisfies the constraint.
    fn optimistic(&self, p: &Partial) -> f64 {
        let slack = self.cc.delta + RISK_TOL - p.risk_lb;
        let used = match self.cc.scope {
            ConstraintScope::Mission => self.penalties.len(),
            ConstraintScope::PerEpoch => 1,
        };
        self.penalties[..used]
            .iter()
            .enumerate()
            .map(|(j, &lambda)| p.g + lambda * slack + p.open.iter().map(|&l| self.nodes[l].bounds[j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    fn build(&self, n: usize, chosen: &HashMap<usize, usize>) -> PolicyNode<M::Belief, M::Obs> {
        let node = &self.nodes[n];
        let Some(&a) = chosen.get(&n) else {
            return PolicyNode::leaf(node.belief.clone());
        };
        let act = &node.expansion.as_ref().unwrap()[a];
        let risk = act.risk;
        let mut value = act.reward;
        let mut child_risk = 0.0;
        let children: Vec<_> = act
            .children
            .iter()
            .map(|(p, o, c)| {
                let child = self.build(*c, chosen);
                value += p * child.value;
                child_risk += p * child.exec_risk;
                PolicyBranch {
                    obs: o.clone(),
                    prob: *p,
                    node: child,
                }
            })
            .collect();
        PolicyNode {
            belief: node.belief.clone(),
            action: Some(act.id.clone()),
            reward: act.reward,
            risk,
            value,
            exec_risk: risk + (1.0 - risk) * child_risk,
            children,
        }
    }
}

pub fn rao_star<M: CcPomdp>(
    model: &M,
    b0: &M::Belief,
    cc: &ChanceConstraint,
) -> Result<SearchOutcome<M::Belief, M::Obs>, PlannerError> {
    rao_star_limited(model, b0, cc, DEFAULT_SEARCH_LIMIT)
}

/// Best-first search over partial policies of the explicit hypergraph.
///
/// A partial policy fixes actions on a subtree rooted at `b0`. Its
/// optimistic value is the reward collected so far plus reach-weighted
/// bounds on its open leaves, tightened by a Lagrangian penalty on the risk
/// budget left; its risk lower bound is the execution risk with open leaves
/// counted as safe. Node bounds start at the heuristic and are backed up
/// over the actions that fit the risk already committed on their path.
/// Policies whose risk bound exceeds delta are discarded, stale entries are
/// re-scored when popped, and the first closed policy popped is optimal
/// among those satisfying the constraint.
pub fn rao_star_limited<M: CcPomdp>(
    model: &M,
    b0: &M::Belief,
    cc: &ChanceConstraint,
    search_limit: usize,
) -> Result<SearchOutcome<M::Belief, M::Obs>, PlannerError> {
    cc.validate()?;
    let mut s = Search {
        model,
        cc: *cc,
        penalties: penalty_grid(),
        nodes: Vec::new(),
        stats: SearchStats::default(),
        search_limit,
    };
    let root = s.add_node(b0.clone(), 0, 1.0, 1.0, 0.0, None)?;
    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let open = if s.is_open(root) {
        vec![root]
    } else {
        Vec::new()
    };
    heap.push(Partial {
        f: s.nodes[root].bounds[0],
        g: 0.0,
        risk_lb: 0.0,
        assigned: Vec::new(),
        open,
        seq,
    });
    while let Some(mut p) = heap.pop() {
        s.charge()?;
        s.stats.popped += 1;
        let f = s.optimistic(&p);
        if f == f64::NEG_INFINITY {
            continue;
        }
        if heap.peek().is_some_and(|top| top.f > f) {
            p.f = f;
            heap.push(p);
            continue;
        }
        if p.open.is_empty() {
            let chosen: HashMap<usize, usize> = p.assigned.iter().copied().collect();
            let root_node = s.build(root, &chosen);
            let mut policy = Policy {
                value: root_node.value,
                exec_risk: root_node.exec_risk,
                root: root_node,
                horizon: cc.horizon_epochs,
            };
            let (value, exec_risk) = evaluate_policy(model, &policy)?;
            policy.value = value;
            policy.exec_risk = exec_risk;
            if !policy.satisfies(cc) {
                return Err(PlannerError::ConstraintViolated {
                    exec_risk,
                    delta: cc.delta,
                });
            }
            return Ok(SearchOutcome {
                policy: Some(policy),
                stats: s.stats,
            });
        }
        // expand the open leaf carrying the most optimistic value
        let (li, leaf) = p
            .open
            .iter()
            .enumerate()
            .fold(None::<(usize, usize)>, |best, (i, &l)| match best {
                Some((_, b)) if s.nodes[b].bounds[0] >= s.nodes[l].bounds[0] => best,
                _ => Some((i, l)),
            })
            .unwrap();
        s.expand(leaf)?;
        let node = &s.nodes[leaf];
        // pushed in reverse so that among ties the newest, smallest-named
        // action is popped first
        for (a, act) in node.expansion.as_ref().unwrap().iter().enumerate().rev() {
            if !act.admissible {
                continue;
            }
            let risk_lb = p.risk_lb + node.surv * act.risk;
            if cc.scope == ConstraintScope::Mission && !cc.admits(risk_lb) {
                continue;
            }
            let mut open = Vec::with_capacity(p.open.len() + act.children.len());
            open.extend(p.open[..li].iter().copied());
            open.extend(p.open[li + 1..].iter().copied());
            open.extend(act.children.iter().map(|&(_, _, c)| c).filter(|&c| s.is_open(c)));
            seq += 1;
            let mut assigned = p.assigned.clone();
            assigned.push((leaf, a));
            let mut next = Partial {
                f: 0.0,
                g: p.g + node.reach * act.reward,
                risk_lb,
                assigned,
                open,
                seq,
            };
            next.f = s.optimistic(&next);
            if next.f > f64::NEG_INFINITY {
                heap.push(next);
            }
        }
    }
    Ok(SearchOutcome {
        policy: None,
        stats: s.stats,
    })
}

struct Choice<B, O> {
    belief: B,
    action: Option<(String, f64, f64)>,
    children: Vec<(O, f64, Rc<Choice<B, O>>)>,
}

struct Candidate<B, O> {
    value: f64,
    exec_risk: f64,
    max_risk: f64,
    choice: Rc<Choice<B, O>>,
}

impl<B, O> Clone for Candidate<B, O> {
    fn clone(&self) -> Self {
        Self {
            value: self.value,
            exec_risk: self.exec_risk,
            max_risk: self.max_risk,
            choice: Rc::clone(&self.choice),
        }
    }
}

fn preorder_key<B, O>(c: &Choice<B, O>, out: &mut Vec<Option<String>>) {
    out.push(c.action.as_ref().map(|a| a.0.clone()));
    for (_, _, child) in &c.children {
        preorder_key(child, out);
    }
}

fn enumerate<M: CcPomdp>(
    model: &M,
    belief: &M::Belief,
    remaining: usize,
) -> Result<Vec<Candidate<M::Belief, M::Obs>>, PlannerError> {
    let actions = if remaining > 0 { sorted_actions(model, belief)? } else { Vec::new() };
    if actions.is_empty() {
        return Ok(vec![Candidate {
            value: 0.0,
            exec_risk: 0.0,
            max_risk: 0.0,
            choice: Rc::new(Choice {
                belief: belief.clone(),
                action: None,
                children: Vec::new(),
            }),
        }]);
    }
    let mut out = Vec::new();
    for a in actions {
        let reward = model.reward(belief, &a)?;
        let risk = checked_risk(model, belief, &a)?;
        let branches = checked_transition(model, belief, &a)?;
        let mut per_branch = Vec::with_capacity(branches.len());
        let mut combos: usize = 1;
        for br in &branches {
            let c = enumerate(model, &br.belief, remaining - 1)?;
            combos = combos.saturating_mul(c.len());
            if out.len().saturating_add(combos) > BRUTE_FORCE_LIMIT {
                return Err(PlannerError::InstanceTooLarge(BRUTE_FORCE_LIMIT));
            }
            per_branch.push(c);
        }
        // odometer over one candidate per branch
        let mut idx = vec![0usize; branches.len()];
        loop {
            let mut value = reward;
            let mut child_risk = 0.0;
            let mut max_risk = risk;
            let mut children = Vec::with_capacity(branches.len());
            for (k, br) in branches.iter().enumerate() {
                let c = &per_branch[k][idx[k]];
                value += br.prob * c.value;
                child_risk += br.prob * c.exec_risk;
                max_risk = max_risk.max(c.max_risk);
                children.push((br.obs.clone(), br.prob, Rc::clone(&c.choice)));
            }
            out.push(Candidate {
                value,
                exec_risk: risk + (1.0 - risk) * child_risk,
                max_risk,
                choice: Rc::new(Choice {
                    belief: belief.clone(),
                    action: Some((a.clone(), reward, risk)),
                    children,
                }),
            });
            let mut k = branches.len();
            loop {
                if k == 0 {
                    break;
                }
                k -= 1;
                idx[k] += 1;
                if idx[k] < per_branch[k].len() {
                    break;
                }
                idx[k] = 0;
                if k == 0 {
                    k = usize::MAX;
                    break;
                }
            }
            if k == usize::MAX || branches.is_empty() {
                break;
            }
        }
    }
    Ok(out)
}

fn to_policy_node<B: Clone, O: Clone>(c: &Choice<B, O>) -> PolicyNode<B, O> {
    let Some((id, reward, risk)) = &c.action else {
        return PolicyNode::leaf(c.belief.clone());
    };
    let mut value = *reward;
    let mut child_risk = 0.0;
    let children: Vec<_> = c
        .children
        .iter()
        .map(|(o, p, child)| {
            let node = to_policy_node(child);
            value += p * node.value;
            child_risk += p * node.exec_risk;
            PolicyBranch {
                obs: o.clone(),
                prob: *p,
                node,
            }
        })
        .collect();
    PolicyNode {
        belief: c.belief.clone(),
        action: Some(id.clone()),
        reward: *reward,
        risk: *risk,
        value,
        exec_risk: risk + (1.0 - risk) * child_risk,
        children,
    }
}

/// Enumerates every policy up to the horizon and returns the best one that
/// satisfies the constraint; equal values go to the lexicographically
/// smallest preorder action sequence.
pub fn brute_force_policy<M: CcPomdp>(
    model: &M,
    b0: &M::Belief,
    cc: &ChanceConstraint,
) -> Result<Option<Policy<M::Belief, M::Obs>>, PlannerError> {
    cc.validate()?;
    let candidates = enumerate(model, b0, cc.horizon_epochs)?;
    let mut best: Option<(Candidate<M::Belief, M::Obs>, Vec<Option<String>>)> = None;
    for c in candidates {
        let risk = match cc.scope {
            ConstraintScope::Mission => c.exec_risk,
            ConstraintScope::PerEpoch => c.max_risk,
        };
        if !cc.admits(risk) {
            continue;
        }
        let mut key = Vec::new();
        preorder_key(&c.choice, &mut key);
        let better = match &best {
            None => true,
            Some((b, bkey)) => c.value > b.value || (c.value == b.value && key < *bkey),
        };
        if better {
            best = Some((c, key));
        }
    }
    Ok(best.map(|(c, _)| Policy {
        root: to_policy_node(&c.choice),
        horizon: cc.horizon_epochs,
        value: c.value,
        exec_risk: c.exec_risk,
    }))
}

/// Unconstrained optimal value-to-go by full recursion.
pub fn optimal_value<M: CcPomdp>(model: &M, b: &M::Belief, remaining: usize) -> Result<f64, PlannerError> {
    if remaining == 0 {
        return Ok(0.0);
    }
    let actions = sorted_actions(model, b)?;
    if actions.is_empty() {
        return Ok(0.0);
    }
    let mut best = f64::NEG_INFINITY;
    for a in actions {
        let mut v = model.reward(b, &a)?;
        for br in checked_transition(model, b, &a)? {
            v += br.prob * optimal_value(model, &br.belief, remaining - 1)?;
        }
        best = best.max(v);
    }
    Ok(best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularAction {
    pub id: String,
    pub reward: f64,
    pub risk: f64,
    /// (probability, child state)
    pub outcomes: Vec<(f64, usize)>,
}

/// A finite tree-shaped CC-POMDP given as tables; beliefs are state
/// indices and observations are outcome positions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitModel {
    pub states: Vec<Vec<TabularAction>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomInstanceSpec {
    pub max_actions: usize,
    pub max_observations: usize,
    pub depth: usize,
    /// Chance that an action is risk-free.
    pub p_safe: f64,
    /// Risks of other actions are drawn uniformly below this.
    pub max_risk: f64,
}

impl Default for RandomInstanceSpec {
    fn default() -> Self {
        Self {
            max_actions: 3,
            max_observations: 2,
            depth: 3,
            p_safe: 0.3,
            max_risk: 0.3,
        }
    }
}

impl ExplicitModel {
    pub fn random(spec: &RandomInstanceSpec, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut states = vec![Vec::new()];
        let mut frontier = vec![(0usize, 0usize)];
        while let Some((s, depth)) = frontier.pop() {
            if depth == spec.depth {
                continue;
            }
            let n_actions = rng.random_range(1..=spec.max_actions.max(1));
            let mut acts = Vec::with_capacity(n_actions);
            for i in 0..n_actions {
                let n_obs = rng.random_range(1..=spec.max_observations.max(1));
                let raw: Vec<f64> = (0..n_obs).map(|_| rng.random_range(0.05..1.0)).collect();
                let total: f64 = raw.iter().sum();
                let outcomes = raw
                    .iter()
                    .map(|w| {
                        states.push(Vec::new());
                        let c = states.len() - 1;
                        frontier.push((c, depth + 1));
                        (w / total, c)
                    })
                    .collect();
                let risk = if rng.random_bool(spec.p_safe) {
                    0.0
                } else {
                    rng.random_range(0.0..spec.max_risk)
                };
                acts.push(TabularAction {
                    id: format!("a{i}"),
                    reward: rng.random_range(0.0..1.0),
                    risk,
                    outcomes,
                });
            }
            states[s] = acts;
        }
        Self { states }
    }

    fn action(&self, b: usize, a: &str) -> Result<&TabularAction, PlannerError> {
        self.states
            .get(b)
            .and_then(|acts| acts.iter().find(|x| x.id == a))
            .ok_or_else(|| PlannerError::InvalidInput(format!("no action {a} at state {b}")))
    }
}

impl CcPomdp for ExplicitModel {
    type Belief = usize;
    type Obs = usize;

    fn actions(&self, b: &usize) -> Result<Vec<String>, PlannerError> {
        Ok(self.states[*b].iter().map(|a| a.id.clone()).collect())
    }

    fn transition(&self, b: &usize, a: &str) -> Result<Vec<Branch<usize, usize>>, PlannerError> {
        Ok(self
            .action(*b, a)?
            .outcomes
            .iter()
            .enumerate()
            .map(|(o, &(prob, belief))| Branch { obs: o, prob, belief })
            .collect())
    }

    fn risk(&self, b: &usize, a: &str) -> Result<f64, PlannerError> {
        Ok(self.action(*b, a)?.risk)
    }

    fn reward(&self, b: &usize, a: &str) -> Result<f64, PlannerError> {
        Ok(self.action(*b, a)?.reward)
    }

    fn max_reward(&self) -> f64 {
        self.states
            .iter()
            .flatten()
            .map(|a| a.reward)
            .fold(0.0, f64::max)
    }
}
