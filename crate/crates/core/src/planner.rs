//! Driving instance of the chance-constrained POMDP: ego maneuvers over a
//! belief made of the ego position distribution and per-agent maneuver
//! posteriors.

use std::cell::RefCell;
use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;
use std::sync::{Arc, Mutex};

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::ccpomdp::{rao_star_limited, Branch, CcPomdp, ChanceConstraint, PlannerError, DEFAULT_SEARCH_LIMIT};
use crate::dynamics::{Control, Gaussian2, Pose, VehicleState};
use crate::intent::{component_tube, predict_agent_window, ManeuverPosterior, PRUNE_WEIGHT};
use crate::maneuver::{generate_pft, plan_nominal, GeneratorConfig, ManeuverError, ManeuverTemplate};
use crate::pft::{ManeuverLibrary, Pft, TubeFrame};
use crate::risk::{mixture_risk, pft_collision_risk, Aggregation};
use crate::road::Road;
use crate::traffic::{derive_seed, LibraryBank};

/// Branches less likely than this are dropped before renormalizing.
pub const MIN_BRANCH_PROB: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub progress: f64,
    pub duration: f64,
    pub lateral: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            progress: 1.0,
            duration: 0.1,
            lateral: 0.2,
        }
    }
}

/// Grid on which ego tube shapes are shared between nearby start states.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TubeResolution {
    pub speed: f64,
    pub heading: f64,
    pub offset: f64,
}

impl Default for TubeResolution {
    fn default() -> Self {
        Self {
            speed: 0.1,
            heading: 0.002,
            offset: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationModel {
    /// Labels kept per agent.
    pub top_k: usize,
    /// Mass spread over the other labels after an observation.
    pub epsilon: f64,
}

impl Default for ObservationModel {
    fn default() -> Self {
        Self { top_k: 2, epsilon: 0.05 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoBelief {
    pub position: Gaussian2,
    pub speed: f64,
    pub heading: f64,
}

impl EgoBelief {
    pub fn exact(s: &VehicleState) -> Self {
        Self {
            position: Gaussian2 {
                mean: s.position(),
                cov: Matrix2::zeros(),
            },
            speed: s.speed,
            heading: s.heading,
        }
    }

    pub fn mean_state(&self) -> VehicleState {
        VehicleState::new(self.position.mean.x, self.position.mean.y, self.heading, self.speed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentBelief {
    pub posterior: ManeuverPosterior,
    /// State the agent's tubes start from.
    pub anchor: VehicleState,
    pub anchor_cov: Matrix2<f64>,
    /// Steps since the anchor.
    pub elapsed: usize,
    pub radius: f64,
    pub speed_class: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefNode {
    pub ego: EgoBelief,
    pub agents: BTreeMap<String, AgentBelief>,
    pub epoch: usize,
    pub depth: usize,
}

/// Observed maneuver label per agent.
pub type Observation = BTreeMap<String, String>;

/// Where progress is measured toward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Goal {
    pub waypoint: [f64; 2],
    /// Unit direction of the route leg ending at the waypoint.
    pub direction: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannerConfig {
    pub generator: GeneratorConfig,
    pub weights: RewardWeights,
    pub ego_radius: f64,
    pub aggregation: Aggregation,
    pub observations: ObservationModel,
    pub tube_resolution: TubeResolution,
    pub search_limit: usize,
    /// Maneuver chain whose execution risk is audited at every decision.
    pub audit_sequence: Vec<String>,
}

/// Everything that stays fixed while planning one decision.
#[derive(Debug, Clone)]
pub struct PlanningContext {
    pub road: Road,
    pub catalog: Vec<ManeuverTemplate>,
    pub config: PlannerConfig,
    pub goal: Goal,
    pub libraries: Arc<LibraryBank>,
    pub tubes: Arc<EgoTubeCache>,
}

/// Ego tube shapes in a canonical frame, keyed by maneuver and quantized
/// start state, shared across decisions and episodes.
#[derive(Debug)]
pub struct EgoTubeCache {
    seed: u64,
    shapes: Mutex<HashMap<ShapeKey, Option<Arc<TubeShape>>>>,
}

type ShapeKey = (String, i64, i64, i64);

/// Per-step deviation of the sampled mean from the nominal rollout, and
/// the sampled covariance, both in the canonical frame.
#[derive(Debug)]
struct TubeShape {
    deltas: Vec<Vector2<f64>>,
    covs: Vec<Matrix2<f64>>,
    mean_speed: Vec<f64>,
}

impl EgoTubeCache {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            shapes: Mutex::new(HashMap::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.shapes.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn shape(
        &self,
        template: &ManeuverTemplate,
        rel_heading: f64,
        speed: f64,
        offset: f64,
        cfg: &PlannerConfig,
    ) -> Result<Option<Arc<TubeShape>>, ManeuverError> {
        let res = cfg.tube_resolution;
        let q = |v: f64, r: f64| (v / r).round() as i64;
        let key = (
            template.id.clone(),
            q(speed, res.speed),
            q(rel_heading, res.heading),
            q(offset, res.offset),
        );
        if let Some(s) = self.shapes.lock().unwrap().get(&key) {
            return Ok(s.clone());
        }
        let start = VehicleState::new(0.0, 0.0, key.2 as f64 * res.heading, key.1 as f64 * res.speed);
        let g = &cfg.generator;
        let shape = match plan_nominal(template, &start, 0.0, key.3 as f64 * res.offset, g) {
            Ok(plan) => {
                let tube = generate_pft(
                    &g.model,
                    &start,
                    &plan.controls,
                    &g.noise,
                    g.dt,
                    g.samples,
                    derive_seed((self.seed, &key)),
                )?;
                Some(Arc::new(TubeShape {
                    deltas: tube.steps.iter().zip(&plan.rollout[1..]).map(|(s, r)| s.mean - r.position()).collect(),
                    covs: tube.steps.iter().map(|s| s.cov).collect(),
                    mean_speed: tube.mean_speed,
                }))
            }
            Err(ManeuverError::Infeasible(_)) => None,
            Err(e) => return Err(e),
        };
        Ok(self.shapes.lock().unwrap().entry(key).or_insert(shape).clone())
    }
}

/// Nominal execution of one catalog entry from one ego state.
#[derive(Debug)]
pub struct EgoPlan {
    pub template: usize,
    pub lateral_offset: f64,
    pub axis_heading: f64,
    pub controls: Vec<Control>,
    pub positions: Vec<Vector2<f64>>,
    pub end: VehicleState,
    pub reward: f64,
    tube: RefCell<Option<Pft>>,
}

type StateKey = [u64; 4];

/// Ego start state, start covariance and maneuver.
type TubeKey = (StateKey, [[u64; 2]; 2], usize);

type ComponentKey = (TubeKey, String, usize, i64, usize);

fn state_key(s: &VehicleState) -> StateKey {
    [s.x.to_bits(), s.y.to_bits(), s.heading.to_bits(), s.speed.to_bits()]
}

/// The CC-POMDP handed to the solver for one decision.
pub struct DrivingModel<'a> {
    pub ctx: &'a PlanningContext,
    plans: RefCell<HashMap<StateKey, Rc<Vec<Rc<EgoPlan>>>>>,
    values: RefCell<HashMap<(StateKey, usize), f64>>,
    components: RefCell<HashMap<ComponentKey, f64>>,
}

impl<'a> DrivingModel<'a> {
    pub fn new(ctx: &'a PlanningContext) -> Self {
        Self {
            ctx,
            plans: RefCell::new(HashMap::new()),
            values: RefCell::new(HashMap::new()),
            components: RefCell::new(HashMap::new()),
        }
    }

    /// Feasible maneuvers from an ego state, in catalog order.
    pub fn ego_plans(&self, s: &VehicleState) -> Result<Rc<Vec<Rc<EgoPlan>>>, PlannerError> {
        let key = state_key(s);
        if let Some(p) = self.plans.borrow().get(&key) {
            return Ok(Rc::clone(p));
        }
        let ctx = self.ctx;
        let g = &ctx.config.generator;
        let mut out = Vec::new();
        let here = ctx.road.locate(&s.position(), s.heading);
        let axis = here.map_or(s.heading, |h| h.axis_heading);
        for (i, t) in ctx.catalog.iter().enumerate() {
            let offsets: Vec<f64> = if t.lateral_offset != 0.0 {
                let side = if t.lateral_offset > 0.0 { 1 } else { -1 };
                match ctx.road.neighbor_offset(&s.position(), s.heading, side) {
                    Some(o) => vec![o],
                    None => continue,
                }
            } else {
                let to_center = here.map_or(0.0, |h| h.to_center);
                if to_center == 0.0 {
                    vec![0.0]
                } else {
                    vec![to_center, 0.0]
                }
            };
            for offset in offsets {
                match plan_nominal(t, s, axis, offset, g) {
                    Ok(plan) => {
                        let end = *plan.rollout.last().unwrap();
                        let dir = Vector2::from(ctx.goal.direction);
                        let progress = (end.position() - s.position()).dot(&dir);
                        let w = &ctx.config.weights;
                        let reward = w.progress * progress
                            - w.duration * plan.controls.len() as f64 * g.dt
                            - w.lateral * offset.abs();
                        out.push(Rc::new(EgoPlan {
                            template: i,
                            lateral_offset: offset,
                            axis_heading: axis,
                            positions: plan.rollout[1..].iter().map(|r| r.position()).collect(),
                            controls: plan.controls,
                            end,
                            reward,
                            tube: RefCell::new(None),
                        }));
                        break;
                    }
                    Err(ManeuverError::Infeasible(_)) => continue,
                    Err(e) => return Err(PlannerError::Model(e.to_string())),
                }
            }
        }
        let out = Rc::new(out);
        self.plans.borrow_mut().insert(key, Rc::clone(&out));
        Ok(out)
    }

    fn plan_for(&self, b: &BeliefNode, a: &str) -> Result<Rc<EgoPlan>, PlannerError> {
        let plans = self.ego_plans(&b.ego.mean_state())?;
        plans
            .iter()
            .find(|p| self.ctx.catalog[p.template].id == a)
            .cloned()
            .ok_or_else(|| PlannerError::InvalidInput(format!("maneuver {a:?} not available here")))
    }

    /// World-frame ego tube of a plan, before adding the start uncertainty.
    fn tube(&self, start: &VehicleState, plan: &EgoPlan) -> Result<Pft, PlannerError> {
        if let Some(t) = plan.tube.borrow().as_ref() {
            return Ok(t.clone());
        }
        let ctx = self.ctx;
        let template = &ctx.catalog[plan.template];
        let rel = crate::dynamics::wrap_angle(start.heading - plan.axis_heading);
        let shape = ctx
            .tubes
            .shape(template, rel, start.speed, plan.lateral_offset, &ctx.config)
            .map_err(|e| PlannerError::Model(e.to_string()))?;
        let tube = match shape {
            Some(shape) => {
                let rot = Pose {
                    x: 0.0,
                    y: 0.0,
                    heading: plan.axis_heading,
                }
                .rotation();
                let steps = plan
                    .positions
                    .iter()
                    .zip(shape.deltas.iter().zip(&shape.covs))
                    .map(|(p, (d, c))| Gaussian2 {
                        mean: p + rot * d,
                        cov: rot * c * rot.transpose(),
                    })
                    .collect();
                Pft {
                    dt: ctx.config.generator.dt,
                    steps,
                    mean_speed: shape.mean_speed.clone(),
                    frame: TubeFrame::World,
                }
            }
            // the quantized start cannot run this maneuver: sample this start directly
            None => {
                let g = &ctx.config.generator;
                let plan_exact = plan_nominal(template, start, plan.axis_heading, plan.lateral_offset, g)
                    .map_err(|e| PlannerError::Model(e.to_string()))?;
                generate_pft(
                    &g.model,
                    start,
                    &plan_exact.controls,
                    &g.noise,
                    g.dt,
                    g.samples,
                    derive_seed(("exact", state_key(start), &template.id)),
                )
                .map_err(|e| PlannerError::Model(e.to_string()))?
            }
        };
        *plan.tube.borrow_mut() = Some(tube.clone());
        Ok(tube)
    }

    fn library(&self, class: i64) -> Result<Arc<ManeuverLibrary>, PlannerError> {
        self.ctx.libraries.get(class).map_err(|e| PlannerError::Model(e.to_string()))
    }

    /// Collision risk of one agent during the action.
    pub fn agent_risk(&self, b: &BeliefNode, a: &str, agent: &AgentBelief) -> Result<f64, PlannerError> {
        let plan = self.plan_for(b, a)?;
        let ego_tube = self.tube(&b.ego.mean_state(), &plan)?.inflated(&b.ego.position.cov);
        self.agent_risk_with(&ego_tube, agent)
    }

    fn agent_risk_with(&self, ego_tube: &Pft, agent: &AgentBelief) -> Result<f64, PlannerError> {
        let lib = self.library(agent.speed_class)?;
        let probs = agent
            .posterior
            .to_library_order(&lib)
            .map_err(|e| PlannerError::Model(e.to_string()))?;
        let pred = predict_agent_window(&lib, &probs, &agent.anchor, agent.elapsed, ego_tube.len(), &agent.anchor_cov)
            .map_err(|e| PlannerError::Model(e.to_string()))?;
        mixture_risk(ego_tube, &pred, self.ctx.config.ego_radius, agent.radius, self.ctx.config.aggregation)
            .map_err(|e| PlannerError::Model(e.to_string()))
    }

    /// Same value as [`Self::agent_risk_with`], reusing per-maneuver risks
    /// across beliefs that differ only in the agent posterior.
    fn agent_risk_cached(&self, key: &TubeKey, ego_tube: &Pft, id: &str, agent: &AgentBelief) -> Result<f64, PlannerError> {
        let lib = self.library(agent.speed_class)?;
        let probs = agent
            .posterior
            .to_library_order(&lib)
            .map_err(|e| PlannerError::Model(e.to_string()))?;
        let len = ego_tube.len();
        if agent.elapsed + len > lib.shortest_tube() {
            return Err(PlannerError::Model(format!(
                "prediction window ends at step {} but shortest tube has {}",
                agent.elapsed + len,
                lib.shortest_tube()
            )));
        }
        let kept: f64 = probs.iter().filter(|p| **p >= PRUNE_WEIGHT).sum();
        if !(kept > 0.0) {
            return Err(PlannerError::Model(format!("agent {id} has no maneuver above the prune weight")));
        }
        let cfg = &self.ctx.config;
        let mut risk = 0.0;
        for (i, (e, p)) in lib.entries().iter().zip(&probs).enumerate() {
            if *p < PRUNE_WEIGHT {
                continue;
            }
            let ck = (key.clone(), id.to_string(), agent.elapsed, agent.speed_class, i);
            let cached = self.components.borrow().get(&ck).copied();
            let r = match cached {
                Some(r) => r,
                None => {
                    let tube = component_tube(&e.tube, &agent.anchor, agent.elapsed, len, &agent.anchor_cov)
                        .map_err(|e| PlannerError::Model(e.to_string()))?;
                    let r = pft_collision_risk(ego_tube, &tube, cfg.ego_radius, agent.radius, cfg.aggregation)
                        .map_err(|e| PlannerError::Model(e.to_string()))?
                        .total;
                    self.components.borrow_mut().insert(ck, r);
                    r
                }
            };
            risk += p / kept * r;
        }
        Ok(risk.clamp(0.0, 1.0))
    }

    fn observation_branches(&self, b: &BeliefNode) -> Result<Vec<(f64, Observation, BTreeMap<String, ManeuverPosterior>)>, PlannerError> {
        let obs = self.ctx.config.observations;
        let mut combos: Vec<(f64, Observation, BTreeMap<String, ManeuverPosterior>)> =
            vec![(1.0, BTreeMap::new(), BTreeMap::new())];
        for (id, agent) in &b.agents {
            let mut labels: Vec<(&String, f64)> = agent.posterior.probs.iter().map(|(k, v)| (k, *v)).collect();
            labels.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(y.0)));
            // labels too unlikely to enter the prediction mixture are not observable
            labels.retain(|l| l.1 >= PRUNE_WEIGHT);
            labels.truncate(obs.top_k.max(1));
            let kept: f64 = labels.iter().map(|l| l.1).sum();
            if !(kept > 0.0) {
                return Err(PlannerError::Model(format!("agent {id} has an empty posterior")));
            }
            let n = labels.len();
            let mut next = Vec::with_capacity(combos.len() * labels.len());
            for (p, o, posts) in &combos {
                for (label, w) in &labels {
                    let prob = p * w / kept;
                    if prob < MIN_BRANCH_PROB {
                        continue;
                    }
                    let diffuse = if n > 1 { obs.epsilon / (n - 1) as f64 } else { 0.0 };
                    let child = ManeuverPosterior {
                        probs: agent
                            .posterior
                            .probs
                            .keys()
                            .map(|k| {
                                let p = if k == *label {
                                    1.0 - diffuse * (n - 1) as f64
                                } else if labels.iter().any(|l| l.0 == k) {
                                    diffuse
                                } else {
                                    0.0
                                };
                                (k.clone(), p)
                            })
                            .collect(),
                    };
                    let mut o = o.clone();
                    o.insert(id.clone(), (*label).clone());
                    let mut posts = posts.clone();
                    posts.insert(id.clone(), child);
                    next.push((prob, o, posts));
                }
            }
            combos = next;
        }
        let total: f64 = combos.iter().map(|c| c.0).sum();
        for c in &mut combos {
            c.0 /= total;
        }
        Ok(combos)
    }

    /// Best reward sum over ego maneuver sequences, ignoring risk.
    fn ego_value(&self, s: &VehicleState, remaining: usize) -> Result<f64, PlannerError> {
        if remaining == 0 {
            return Ok(0.0);
        }
        let key = (state_key(s), remaining);
        if let Some(v) = self.values.borrow().get(&key) {
            return Ok(*v);
        }
        let plans = self.ego_plans(s)?;
        let mut best = if plans.is_empty() { 0.0 } else { f64::NEG_INFINITY };
        for p in plans.iter() {
            best = best.max(p.reward + self.ego_value(&p.end, remaining - 1)?);
        }
        self.values.borrow_mut().insert(key, best);
        Ok(best)
    }
}

impl CcPomdp for DrivingModel<'_> {
    type Belief = BeliefNode;
    type Obs = Observation;

    fn actions(&self, b: &BeliefNode) -> Result<Vec<String>, PlannerError> {
        Ok(self
            .ego_plans(&b.ego.mean_state())?
            .iter()
            .map(|p| self.ctx.catalog[p.template].id.clone())
            .collect())
    }

    fn transition(&self, b: &BeliefNode, a: &str) -> Result<Vec<Branch<BeliefNode, Observation>>, PlannerError> {
        let plan = self.plan_for(b, a)?;
        let tube = self.tube(&b.ego.mean_state(), &plan)?;
        let steps = tube.len();
        let ego = EgoBelief {
            position: Gaussian2 {
                mean: plan.end.position(),
                cov: b.ego.position.cov + tube.steps.last().unwrap().cov,
            },
            speed: plan.end.speed,
            heading: plan.end.heading,
        };
        Ok(self
            .observation_branches(b)?
            .into_iter()
            .map(|(prob, obs, posts)| {
                let agents = b
                    .agents
                    .iter()
                    .map(|(id, ag)| {
                        (
                            id.clone(),
                            AgentBelief {
                                posterior: posts[id].clone(),
                                elapsed: ag.elapsed + steps,
                                ..ag.clone()
                            },
                        )
                    })
                    .collect();
                Branch {
                    obs,
                    prob,
                    belief: BeliefNode {
                        ego: ego.clone(),
                        agents,
                        epoch: b.epoch + 1,
                        depth: b.depth + 1,
                    },
                }
            })
            .collect())
    }

    fn risk(&self, b: &BeliefNode, a: &str) -> Result<f64, PlannerError> {
        if b.agents.is_empty() {
            return Ok(0.0);
        }
        let plan = self.plan_for(b, a)?;
        let ego_tube = self.tube(&b.ego.mean_state(), &plan)?.inflated(&b.ego.position.cov);
        let key = (state_key(&b.ego.mean_state()), b.ego.position.cov.map(f64::to_bits).into(), plan.template);
        let mut survive = 1.0;
        for (id, agent) in &b.agents {
            survive *= 1.0 - self.agent_risk_cached(&key, &ego_tube, id, agent)?;
        }
        Ok((1.0 - survive).clamp(0.0, 1.0))
    }

    fn reward(&self, b: &BeliefNode, a: &str) -> Result<f64, PlannerError> {
        Ok(self.plan_for(b, a)?.reward)
    }

    fn max_reward(&self) -> f64 {
        let g = &self.ctx.config.generator;
        let steps = self.ctx.catalog.iter().map(|t| t.duration_steps()).max().unwrap_or(0) as f64;
        self.ctx.config.weights.progress * g.speed_limit * steps * g.dt
    }

    fn heuristic(&self, b: &BeliefNode, remaining: usize) -> Result<f64, PlannerError> {
        self.ego_value(&b.ego.mean_state(), remaining)
    }
}

/// One-step transition of the driving model.
pub fn belief_transition(
    ctx: &PlanningContext,
    b: &BeliefNode,
    a: &str,
) -> Result<Vec<Branch<BeliefNode, Observation>>, PlannerError> {
    if ctx.catalog.is_empty() {
        return Err(PlannerError::NoActions);
    }
    DrivingModel::new(ctx).transition(b, a)
}

/// Probability that maneuver `a` from `b` collides with any agent.
pub fn action_risk(ctx: &PlanningContext, b: &BeliefNode, a: &str) -> Result<f64, PlannerError> {
    DrivingModel::new(ctx).risk(b, a)
}

/// Execution risk of a fixed maneuver sequence, or `None` when some step
/// is unavailable along the way.
pub fn sequence_exec_risk<M: CcPomdp>(model: &M, b: &M::Belief, seq: &[String]) -> Result<Option<f64>, PlannerError> {
    let Some((a, rest)) = seq.split_first() else {
        return Ok(Some(0.0));
    };
    if !model.actions(b)?.contains(a) {
        return Ok(None);
    }
    let r = model.risk(b, a)?;
    let mut child = 0.0;
    for br in model.transition(b, a)? {
        match sequence_exec_risk(model, &br.belief, rest)? {
            Some(er) => child += br.prob * er,
            None => return Ok(None),
        }
    }
    Ok(Some(r + (1.0 - r) * child))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    /// `None` when no policy satisfies the constraint.
    pub action: Option<String>,
    pub lateral_offset: f64,
    pub action_risk: f64,
    pub exec_risk: f64,
    pub value: f64,
    pub expanded_nodes: usize,
    /// Lookahead in epochs actually searched.
    pub horizon: usize,
    /// Risk of each available first maneuver, by id.
    pub root_risks: BTreeMap<String, f64>,
    /// Execution risk of the audit sequence, when it is available.
    pub audit_risk: Option<f64>,
    #[serde(skip)]
    pub controls: Vec<Control>,
}

pub fn decide(ctx: &PlanningContext, root: &BeliefNode, cc: &ChanceConstraint) -> Result<Decision, PlannerError> {
    let model = DrivingModel::new(ctx);
    let limit = if ctx.config.search_limit == 0 {
        DEFAULT_SEARCH_LIMIT
    } else {
        ctx.config.search_limit
    };
    // fall back to shorter lookahead when the search runs out of work
    let mut horizon = cc.horizon_epochs;
    let out = loop {
        let cc_h = ChanceConstraint { horizon_epochs: horizon, ..*cc };
        match rao_star_limited(&model, root, &cc_h, limit) {
            Err(PlannerError::SearchLimit(_)) if horizon > 1 => {
                log::debug!("search limit hit at horizon {horizon}; retrying shorter");
                horizon -= 1;
            }
            other => break other?,
        }
    };
    let mut root_risks = BTreeMap::new();
    for a in model.actions(root)? {
        let r = model.risk(root, &a)?;
        root_risks.insert(a, r);
    }
    let audit_risk = if ctx.config.audit_sequence.is_empty() {
        None
    } else {
        sequence_exec_risk(&model, root, &ctx.config.audit_sequence)?
    };
    let mut d = Decision {
        action: None,
        lateral_offset: 0.0,
        action_risk: 0.0,
        exec_risk: 0.0,
        value: 0.0,
        expanded_nodes: out.stats.expanded_nodes,
        horizon,
        root_risks,
        audit_risk,
        controls: Vec::new(),
    };
    if let Some(p) = out.policy {
        if let Some(a) = p.first_action() {
            let plan = model.plan_for(root, a)?;
            d.action_risk = d.root_risks[a];
            d.lateral_offset = plan.lateral_offset;
            d.controls = plan.controls.clone();
            d.action = Some(a.to_string());
        }
        d.exec_risk = p.exec_risk;
        d.value = p.value;
    }
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ccpomdp::{brute_force_policy, optimal_value, rao_star};
    use crate::dynamics::{NoiseModel, VehicleModel};
    use crate::maneuver::{default_catalog, TrackingGains};
    use crate::road::Lane;
    use crate::traffic::AgentBehavior;

    fn ctx_with(samples: usize) -> PlanningContext {
        let generator = GeneratorConfig {
            model: VehicleModel::default(),
            gains: TrackingGains::default(),
            noise: NoiseModel {
                sigma_accel: 0.2,
                sigma_steer: 0.005,
            },
            dt: 0.1,
            samples,
            speed_limit: 15.0,
        };
        let behavior = AgentBehavior {
            tube_steps: 100,
            demos: 20,
            ..AgentBehavior::default()
        };
        PlanningContext {
            road: Road::new(vec![
                Lane::straight([-50.0, 0.0], [500.0, 0.0], 3.5),
                Lane::straight([500.0, 3.5], [-50.0, 3.5], 3.5),
            ])
            .unwrap(),
            catalog: default_catalog(30),
            config: PlannerConfig {
                generator,
                weights: RewardWeights::default(),
                ego_radius: 1.0,
                aggregation: Aggregation::Independent,
                observations: ObservationModel::default(),
                tube_resolution: TubeResolution::default(),
                search_limit: 0,
                audit_sequence: Vec::new(),
            },
            goal: Goal {
                waypoint: [300.0, 0.0],
                direction: [1.0, 0.0],
            },
            libraries: Arc::new(LibraryBank::new(behavior, VehicleModel::default(), 0.1, 5)),
            tubes: Arc::new(EgoTubeCache::new(1)),
        }
    }

    fn ctx() -> PlanningContext {
        ctx_with(200)
    }

    fn ego_root(x: f64, speed: f64) -> BeliefNode {
        BeliefNode {
            ego: EgoBelief::exact(&VehicleState::new(x, 0.0, 0.0, speed)),
            agents: BTreeMap::new(),
            epoch: 0,
            depth: 0,
        }
    }

    fn agent(ctx: &PlanningContext, x: f64, y: f64, heading: f64, speed: f64, probs: &[(&str, f64)]) -> AgentBelief {
        let mut p: BTreeMap<String, f64> = ctx
            .libraries
            .behavior
            .maneuvers
            .iter()
            .map(|m| (m.id.clone(), 0.0))
            .collect();
        for (k, v) in probs {
            p.insert(k.to_string(), *v);
        }
        AgentBelief {
            posterior: ManeuverPosterior { probs: p },
            anchor: VehicleState::new(x, y, heading, speed),
            anchor_cov: Matrix2::identity() * 0.04,
            elapsed: 0,
            radius: 1.2,
            speed_class: ctx.libraries.class_of(speed),
        }
    }

    #[test]
    fn lane_gating() {
        let c = ctx();
        let m = DrivingModel::new(&c);
        let acts = m.actions(&ego_root(0.0, 8.0)).unwrap();
        assert_eq!(acts, ["accelerate", "decelerate", "maintain", "merge_left"]);
        let mut left = ego_root(0.0, 8.0);
        left.ego.position.mean.y = 3.5;
        let acts = m.actions(&left).unwrap();
        assert_eq!(acts, ["accelerate", "decelerate", "maintain", "merge_right"]);
    }

    #[test]
    fn no_agents_single_branch_zero_risk() {
        let c = ctx();
        let b = ego_root(0.0, 8.0);
        let br = belief_transition(&c, &b, "maintain").unwrap();
        assert_eq!(br.len(), 1);
        assert_eq!(br[0].prob, 1.0);
        assert!((br[0].belief.ego.position.mean.x - 24.0).abs() < 0.1);
        assert!(br[0].belief.ego.position.cov.trace() > 0.0);
        assert_eq!(action_risk(&c, &b, "maintain").unwrap(), 0.0);
    }

    #[test]
    fn branch_probabilities_follow_posteriors() {
        let c = ctx();
        let mut b = ego_root(0.0, 8.0);
        b.agents.insert("a".into(), agent(&c, 200.0, 0.0, 0.0, 8.0, &[("keep_lane", 0.7), ("accelerate", 0.3)]));
        let br = belief_transition(&c, &b, "maintain").unwrap();
        let probs: Vec<f64> = br.iter().map(|x| x.prob).collect();
        assert!((probs[0] - 0.7).abs() < 1e-12 && (probs[1] - 0.3).abs() < 1e-12);
        assert_eq!(br[0].belief.agents["a"].posterior.get("keep_lane"), 0.95);
        assert!((br[0].belief.agents["a"].posterior.get("accelerate") - 0.05).abs() < 1e-12);
        assert_eq!(br[0].belief.agents["a"].posterior.get("merge_left"), 0.0);
        assert_eq!(br[0].belief.agents["a"].elapsed, 30);
        b.agents.insert("b".into(), agent(&c, 300.0, 0.0, 0.0, 8.0, &[("decelerate", 0.4), ("keep_lane", 0.6)]));
        let br = belief_transition(&c, &b, "maintain").unwrap();
        let mut probs: Vec<f64> = br.iter().map(|x| x.prob).collect();
        probs.sort_by(|a, b| b.total_cmp(a));
        for (p, want) in probs.iter().zip([0.42, 0.28, 0.18, 0.12]) {
            assert!((p - want).abs() < 1e-12);
        }
        assert!((br.iter().map(|x| x.prob).sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn distant_agent_is_harmless() {
        let c = ctx();
        let mut b = ego_root(0.0, 8.0);
        b.agents.insert("far".into(), agent(&c, 150.0, 0.0, 0.0, 8.0, &[("keep_lane", 1.0)]));
        for a in ["maintain", "accelerate", "merge_left"] {
            assert!(action_risk(&c, &b, a).unwrap() <= 1e-9);
        }
    }

    #[test]
    fn risk_combines_agents_independently() {
        let c = ctx();
        let mut b = ego_root(0.0, 8.0);
        b.agents.insert("a".into(), agent(&c, 6.0, 0.0, 0.0, 4.0, &[("keep_lane", 1.0)]));
        b.agents.insert("b".into(), agent(&c, 40.0, 3.5, std::f64::consts::PI, 8.0, &[("keep_lane", 0.5), ("merge_left", 0.5)]));
        let m = DrivingModel::new(&c);
        let ra = m.agent_risk(&b, "merge_left", &b.agents["a"]).unwrap();
        let rb = m.agent_risk(&b, "merge_left", &b.agents["b"]).unwrap();
        assert!(ra > 0.0 && rb > 0.0);
        let total = action_risk(&c, &b, "merge_left").unwrap();
        assert!((total - (1.0 - (1.0 - ra) * (1.0 - rb))).abs() < 1e-12);
    }

    #[test]
    fn oncoming_traffic_makes_overtaking_risky() {
        let c = ctx();
        let mut b = ego_root(0.0, 8.0);
        b.agents.insert("lead".into(), agent(&c, 10.0, 0.0, 0.0, 6.0, &[("keep_lane", 1.0)]));
        let m = DrivingModel::new(&c);
        let pass: Vec<String> = ["merge_left", "accelerate", "merge_right"].map(String::from).to_vec();
        let clear = sequence_exec_risk(&m, &b, &pass).unwrap().unwrap();
        b.agents.insert("onc".into(), agent(&c, 120.0, 3.5, std::f64::consts::PI, 12.0, &[("keep_lane", 1.0)]));
        let m = DrivingModel::new(&c);
        let blocked = sequence_exec_risk(&m, &b, &pass).unwrap().unwrap();
        assert!(clear < 0.05, "{clear}");
        assert!(blocked > 0.5, "{blocked}");
    }

    #[test]
    fn heuristic_is_exact_without_agents() {
        let c = ctx();
        let m = DrivingModel::new(&c);
        let b = ego_root(0.0, 8.0);
        for remaining in 1..=2 {
            let h = m.heuristic(&b, remaining).unwrap();
            let v = optimal_value(&m, &b, remaining).unwrap();
            assert!((h - v).abs() < 1e-9);
        }
    }

    #[test]
    fn heuristic_bounds_value_with_agents() {
        let c = ctx();
        let m = DrivingModel::new(&c);
        let mut b = ego_root(0.0, 8.0);
        b.agents.insert("lead".into(), agent(&c, 25.0, 0.0, 0.0, 6.0, &[("keep_lane", 0.8), ("decelerate", 0.2)]));
        let h = m.heuristic(&b, 2).unwrap();
        assert!(h >= optimal_value(&m, &b, 2).unwrap() - 1e-12);
    }

    #[test]
    fn search_matches_brute_force_on_driving_instance() {
        let c = ctx_with(100);
        let m = DrivingModel::new(&c);
        let mut b = ego_root(0.0, 8.0);
        b.agents.insert("lead".into(), agent(&c, 20.0, 0.0, 0.0, 6.0, &[("keep_lane", 0.9), ("decelerate", 0.1)]));
        for delta in [0.0, 1e-3, 0.05, 1.0] {
            let cc = ChanceConstraint::new(delta, 2);
            let rs = rao_star(&m, &b, &cc).unwrap().policy;
            let bf = brute_force_policy(&m, &b, &cc).unwrap();
            assert_eq!(rs.is_some(), bf.is_some(), "delta {delta}");
            if let (Some(r), Some(f)) = (rs, bf) {
                assert!((r.value - f.value).abs() < 1e-9, "delta {delta}");
            }
        }
    }

    #[test]
    fn tube_follows_nominal_path() {
        let c = ctx();
        let m = DrivingModel::new(&c);
        let s = VehicleState::new(10.0, 0.1, 0.01, 8.0);
        let plans = m.ego_plans(&s).unwrap();
        let p = plans.iter().find(|p| c.catalog[p.template].id == "merge_left").unwrap();
        assert!((p.lateral_offset - 3.4).abs() < 1e-9);
        let t = m.tube(&s, p).unwrap();
        assert_eq!(t.len(), 30);
        assert!((t.steps[29].mean - p.end.position()).norm() < 0.3);
        // shapes are shared between nearby starts
        let before = c.tubes.len();
        let s2 = VehicleState::new(50.0, 0.1, 0.0101, 8.001);
        let p2 = m.ego_plans(&s2).unwrap();
        let p2 = p2.iter().find(|p| c.catalog[p.template].id == "merge_left").unwrap();
        m.tube(&s2, p2).unwrap();
        assert_eq!(c.tubes.len(), before);
    }
}
